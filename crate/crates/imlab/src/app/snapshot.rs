//! The `IMLB` binary snapshot: a fixed little-endian header followed by the
//! half-spectrum of a real field.
//!
//! Header: magic `IMLB`, `u32` version (1), `u8` equation tag, `u8`
//! component count, `u32` grid size, then `f64` γ, γ̄, α and time. The body
//! lists `(re, im)` pairs of `f64` for every component and every mode `n`
//! with `|nᵢ| < m/2` and `n ≥ -n` lexicographically, in `(component, q, l,
//! m)` order. The remaining modes follow by Hermitian symmetry; Nyquist
//! modes are zero.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{ImError, Result};
use crate::field::{index_of, OperatorSpec, SpectralField, C64};
use crate::lattice::ModeVec;
use crate::nonlinearity::Family;

pub const MAGIC: &[u8; 4] = b"IMLB";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnapshotHeader {
    pub family: Family,
    pub components: u8,
    pub grid_m: u32,
    pub gamma: f64,
    pub gamma_bar: f64,
    pub alpha: f64,
    pub t: f64,
}

impl SnapshotHeader {
    pub fn new(family: Family, op: &OperatorSpec, grid_m: usize, t: f64) -> Self {
        SnapshotHeader {
            family,
            components: family.space_kind().components() as u8,
            grid_m: grid_m as u32,
            gamma: op.gamma,
            gamma_bar: op.gamma_bar,
            alpha: op.alpha_filter,
            t,
        }
    }
}

/// Stored modes, in file order.
fn half_modes(m: usize) -> Vec<ModeVec> {
    let h = (m / 2) as i64;
    let mut out = Vec::new();
    for q in -h + 1..h {
        for l in -h + 1..h {
            for k in -h + 1..h {
                let n = ModeVec::new(q, l, k);
                if n >= n.neg() {
                    out.push(n);
                }
            }
        }
    }
    out
}

pub fn write_snapshot<W: Write>(
    mut w: W,
    header: &SnapshotHeader,
    u: &SpectralField,
) -> Result<()> {
    if u.grid_m() != header.grid_m as usize || u.components() != header.components as usize {
        return Err(ImError::mismatch(
            "snapshot header does not describe the field",
        ));
    }
    if u.kind() != header.family.space_kind() {
        return Err(ImError::mismatch(format!(
            "{:?} field cannot be stored as {:?}",
            u.kind(),
            header.family
        )));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(header.family.tag());
    buf.push(header.components);
    buf.extend_from_slice(&header.grid_m.to_le_bytes());
    for x in [header.gamma, header.gamma_bar, header.alpha, header.t] {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let m = u.grid_m();
    let modes = half_modes(m);
    for c in 0..u.components() {
        for &n in &modes {
            let z = u.coeff(c, n);
            buf.extend_from_slice(&z.re.to_le_bytes());
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Reads one snapshot; `Ok(None)` at a clean end of stream.
pub fn read_snapshot_opt<R: Read>(mut r: R) -> Result<Option<(SnapshotHeader, SpectralField)>> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let k = r.read(&mut magic[got..])?;
        if k == 0 {
            break;
        }
        got += k;
    }
    if got == 0 {
        return Ok(None);
    }
    if got < 4 || &magic != MAGIC {
        return Err(ImError::Format(format!("bad magic {:?}", &magic[..got])));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(ImError::Format(format!(
            "unsupported snapshot version {version}"
        )));
    }
    let [tag] = take::<1>(&mut r)?;
    let family = Family::from_tag(tag)
        .ok_or_else(|| ImError::Format(format!("unknown equation tag {tag}")))?;
    let [components] = take::<1>(&mut r)?;
    let grid_m = u32::from_le_bytes(take(&mut r)?);
    let mut f = [0.0; 4];
    for x in &mut f {
        *x = f64::from_le_bytes(take(&mut r)?);
    }
    let kind = family.space_kind();
    if components as usize != kind.components() {
        return Err(ImError::Format(format!(
            "{family:?} has {} components, file says {components}",
            kind.components()
        )));
    }
    if grid_m < 4 || grid_m % 2 == 1 || grid_m > 4096 {
        return Err(ImError::Format(format!("implausible grid size {grid_m}")));
    }
    let m = grid_m as usize;
    let header = SnapshotHeader {
        family,
        components,
        grid_m,
        gamma: f[0],
        gamma_bar: f[1],
        alpha: f[2],
        t: f[3],
    };
    let mut u = SpectralField::zeros(m, kind);
    let modes = half_modes(m);
    let n_per = u.len_per_component();
    for c in 0..kind.components() {
        for &n in &modes {
            let re = f64::from_le_bytes(take(&mut r)?);
            let im = f64::from_le_bytes(take(&mut r)?);
            let z = C64::new(re, im);
            let i = index_of(m, n).expect("stored modes lie on the grid");
            let j = index_of(m, n.neg()).expect("stored modes lie on the grid");
            let comp = &mut u.coeffs_mut()[c * n_per..(c + 1) * n_per];
            if i != j {
                comp[j] = z.conj();
            }
            comp[i] = z;
        }
    }
    Ok(Some((header, u)))
}

pub fn read_snapshot<R: Read>(r: R) -> Result<(SnapshotHeader, SpectralField)> {
    read_snapshot_opt(r)?.ok_or_else(|| ImError::Format("empty snapshot".into()))
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn snapshot_write(path: &Path, header: &SnapshotHeader, u: &SpectralField) -> Result<()> {
    let mut buf = Vec::new();
    write_snapshot(&mut buf, header, u)?;
    write_atomic(path, &buf)
}

pub fn snapshot_read(path: &Path) -> Result<(SnapshotHeader, SpectralField)> {
    read_snapshot(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Several snapshots back to back (used for manifold charts: `u₊` and
/// `𝕄(u₊)` alternate, with `t` holding the horizon used).
pub fn write_many(path: &Path, items: &[(SnapshotHeader, &SpectralField)]) -> Result<()> {
    let mut buf = Vec::new();
    for (h, u) in items {
        write_snapshot(&mut buf, h, u)?;
    }
    write_atomic(path, &buf)
}

pub fn read_many(path: &Path) -> Result<Vec<(SnapshotHeader, SpectralField)>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    while let Some(item) = read_snapshot_opt(&mut r)? {
        out.push(item);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::SpaceKind;
    use crate::nonlinearity::NonlinearitySpec;
    use crate::random::{random_field, seeded_rng};

    fn sample(kind: SpaceKind, seed: u64) -> SpectralField {
        random_field(8, kind, &mut seeded_rng(seed), |n2| 1.0 / (1.0 + n2))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for (family, seed) in [(Family::Rde, 1), (Family::Ch, 2), (Family::Nse, 3)] {
            let u = sample(family.space_kind(), seed);
            let op = match family {
                Family::Nse => NonlinearitySpec::nse(0.25, 0.25, 0.7).op,
                _ => NonlinearitySpec::rde(vec![]).op,
            };
            let h = SnapshotHeader::new(family, &op, 8, 1.25);
            let mut buf = Vec::new();
            write_snapshot(&mut buf, &h, &u).unwrap();
            let (h2, v) = read_snapshot(&buf[..]).unwrap();
            assert_eq!(h2, h);
            // Equal as numbers everywhere (the unstored half may differ in
            // the sign of a zero), and bit-identical once written again.
            assert_eq!(u, v);
            let mut again = Vec::new();
            write_snapshot(&mut again, &h2, &v).unwrap();
            assert_eq!(again, buf);
        }
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let u = sample(SpaceKind::FullScalar, 4);
        let h = SnapshotHeader::new(Family::Rde, &NonlinearitySpec::rde(vec![]).op, 8, 0.0);
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &h, &u).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_snapshot(&bad[..]), Err(ImError::Format(_))));
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(read_snapshot(&bad[..]), Err(ImError::Format(_))));
        assert!(read_snapshot(&buf[..buf.len() - 3]).is_err());
    }

    /// Bytes assembled by hand in little-endian order decode the same on
    /// any host.
    #[test]
    fn hand_built_fixture() {
        let mut b = Vec::new();
        b.extend_from_slice(b"IMLB");
        b.extend_from_slice(&[1, 0, 0, 0]);
        b.push(0);
        b.push(1);
        b.extend_from_slice(&[4, 0, 0, 0]);
        for x in [0.0f64, 0.0, 1.0, 2.5] {
            b.extend_from_slice(&x.to_bits().to_le_bytes());
        }
        let modes = half_modes(4);
        assert_eq!(modes.len(), 14);
        for n in &modes {
            let (re, im) = if *n == ModeVec::new(0, 0, 1) {
                (0.75f64, -0.5f64)
            } else {
                (0.0, 0.0)
            };
            b.extend_from_slice(&re.to_bits().to_le_bytes());
            b.extend_from_slice(&im.to_bits().to_le_bytes());
        }
        let (h, u) = read_snapshot(&b[..]).unwrap();
        assert_eq!(h.family, Family::Rde);
        assert_eq!(h.t, 2.5);
        assert_eq!(u.coeff(0, ModeVec::new(0, 0, 1)), C64::new(0.75, -0.5));
        assert_eq!(u.coeff(0, ModeVec::new(0, 0, -1)), C64::new(0.75, 0.5));
        assert_eq!(u.coeffs().iter().filter(|z| **z != C64::ZERO).count(), 2);
    }

    #[test]
    fn many_snapshots_in_one_file() {
        let dir = std::env::temp_dir().join(format!("imlab-snap-{}", std::process::id()));
        let path = dir.join("chart.imlb");
        let op = NonlinearitySpec::rde(vec![]).op;
        let (a, b) = (
            sample(SpaceKind::FullScalar, 5),
            sample(SpaceKind::FullScalar, 6),
        );
        let h = SnapshotHeader::new(Family::Rde, &op, 8, 3.0);
        write_many(&path, &[(h, &a), (h, &b)]).unwrap();
        let back = read_many(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].1, a);
        assert_eq!(back[1].1, b);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
