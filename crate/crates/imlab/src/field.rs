//! Truncated Fourier fields on the torus `(-π,π)³`.
//!
//! A field stores one complex coefficient per wave vector and component in
//! FFT order: index `i` along an axis carries wave number `i` for
//! `i ≤ m/2` and `i - m` above, so each axis spans `-m/2+1 … m/2`.
//! Coefficients refer to the orthonormal basis `e^{in·x}/(2π)^{3/2}`, which
//! makes `‖u‖²_H` the plain sum of `|c_n|²`. Use [`SpectralField::amplitude`]
//! for the classical Fourier amplitude.
//!
//! Physical samples live on the grid `x_j = 2πj/M`. The Nyquist planes
//! (`|n_i| = m/2`) are stored so that grid round trips are exact, but every
//! derivative, Leray projection and dealiased product returns them as zero.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use crate::error::{ImError, Result};
use crate::fft;
use crate::lattice::{ModeVec, ProjectorSpec};

pub type C64 = Complex64;

/// `(2π)^{3/2}`: ratio between orthonormal coefficients and amplitudes.
pub fn torus_scale() -> f64 {
    (2.0 * PI).powf(1.5)
}

/// `(2π)³`, the torus volume.
pub fn torus_volume() -> f64 {
    (2.0 * PI).powi(3)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpaceKind {
    FullScalar,
    MeanZeroScalar,
    DivFreeVector,
    /// Unconstrained 3-vector; only produced by intermediate operations such
    /// as gradients.
    Vector,
}

impl SpaceKind {
    pub fn components(self) -> usize {
        match self {
            SpaceKind::FullScalar | SpaceKind::MeanZeroScalar => 1,
            SpaceKind::DivFreeVector | SpaceKind::Vector => 3,
        }
    }

    pub fn has_mean(self) -> bool {
        matches!(self, SpaceKind::FullScalar | SpaceKind::Vector)
    }

    pub fn is_scalar(self) -> bool {
        self.components() == 1
    }
}

/// Per-grid lookup tables shared by all fields of one size.
pub(crate) struct ModeTable {
    pub n2: Vec<u32>,
    pub nyquist: Vec<bool>,
    pub conj: Vec<u32>,
    pub wave: Vec<[i32; 3]>,
    pub max_n2: usize,
}

thread_local! {
    static TABLES: RefCell<HashMap<usize, Rc<ModeTable>>> = RefCell::new(HashMap::new());
}

pub(crate) fn wavenumber(i: usize, m: usize) -> i64 {
    if i <= m / 2 {
        i as i64
    } else {
        i as i64 - m as i64
    }
}

pub(crate) fn mode_table(m: usize) -> Rc<ModeTable> {
    TABLES.with(|t| {
        t.borrow_mut()
            .entry(m)
            .or_insert_with(|| {
                let total = m * m * m;
                let mut n2 = Vec::with_capacity(total);
                let mut nyquist = Vec::with_capacity(total);
                let mut conj = Vec::with_capacity(total);
                let mut wave = Vec::with_capacity(total);
                let h = m / 2;
                for i in 0..m {
                    for j in 0..m {
                        for k in 0..m {
                            let w = [wavenumber(i, m), wavenumber(j, m), wavenumber(k, m)];
                            n2.push((w[0] * w[0] + w[1] * w[1] + w[2] * w[2]) as u32);
                            nyquist.push(i == h || j == h || k == h);
                            conj.push((((m - i) % m * m + (m - j) % m) * m + (m - k) % m) as u32);
                            wave.push([w[0] as i32, w[1] as i32, w[2] as i32]);
                        }
                    }
                }
                Rc::new(ModeTable {
                    n2,
                    nyquist,
                    conj,
                    wave,
                    max_n2: 3 * h * h,
                })
            })
            .clone()
    })
}

/// Flat index of a wave vector within one component, if representable.
pub fn index_of(m: usize, n: ModeVec) -> Option<usize> {
    let h = (m / 2) as i64;
    let lo = -h + 1;
    let f = |w: i64| -> Option<usize> {
        if w < lo || w > h {
            None
        } else if w >= 0 {
            Some(w as usize)
        } else {
            Some((w + m as i64) as usize)
        }
    };
    Some((f(n.q)? * m + f(n.l)?) * m + f(n.m)?)
}

pub fn mode_at(m: usize, idx: usize) -> ModeVec {
    let k = idx % m;
    let j = (idx / m) % m;
    let i = idx / (m * m);
    ModeVec::new(wavenumber(i, m), wavenumber(j, m), wavenumber(k, m))
}

/// Truncated Fourier representation of a real scalar or vector field.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralField {
    m: usize,
    kind: SpaceKind,
    data: Vec<C64>,
}

impl SpectralField {
    pub fn zeros(m: usize, kind: SpaceKind) -> Self {
        assert!(
            m >= 2 && m.is_multiple_of(2),
            "grid size must be even and at least 2, got {m}"
        );
        SpectralField {
            m,
            kind,
            data: vec![C64::ZERO; kind.components() * m * m * m],
        }
    }

    /// Wraps raw coefficients; the caller is responsible for Hermitian symmetry.
    pub fn from_coeffs(m: usize, kind: SpaceKind, data: Vec<C64>) -> Result<Self> {
        if m < 2 || !m.is_multiple_of(2) {
            return Err(ImError::invalid(format!(
                "grid size {m} must be even and ≥ 2"
            )));
        }
        if data.len() != kind.components() * m * m * m {
            return Err(ImError::mismatch(format!(
                "{} coefficients for a {:?} field on grid {m}",
                data.len(),
                kind
            )));
        }
        Ok(SpectralField { m, kind, data })
    }

    pub fn grid_m(&self) -> usize {
        self.m
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn components(&self) -> usize {
        self.kind.components()
    }

    pub fn len_per_component(&self) -> usize {
        self.m * self.m * self.m
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.data
    }

    pub fn coeffs_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn component(&self, c: usize) -> &[C64] {
        let n = self.len_per_component();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [C64] {
        let n = self.len_per_component();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn coeff(&self, c: usize, n: ModeVec) -> C64 {
        index_of(self.m, n).map_or(C64::ZERO, |i| self.data[c * self.len_per_component() + i])
    }

    /// Sets the coefficient at `n` and its conjugate partner at `-n`.
    pub fn set_pair(&mut self, c: usize, n: ModeVec, z: C64) -> Result<()> {
        let m = self.m;
        let i = index_of(m, n)
            .ok_or_else(|| ImError::invalid(format!("mode {n:?} outside grid {m}")))?;
        let t = mode_table(m);
        let j = t.conj[i] as usize;
        let off = c * self.len_per_component();
        if i == j {
            self.data[off + i] = C64::new(z.re, 0.0);
        } else {
            self.data[off + i] = z;
            self.data[off + j] = z.conj();
        }
        Ok(())
    }

    /// Classical Fourier amplitude `û_n` with `u(x) = Σ û_n e^{in·x}`.
    pub fn amplitude(&self, c: usize, n: ModeVec) -> C64 {
        self.coeff(c, n) / torus_scale()
    }

    /// Torus average of each component.
    pub fn mean(&self) -> Vec<f64> {
        (0..self.components())
            .map(|c| self.component(c)[0].re / torus_scale())
            .collect()
    }

    pub fn same_shape(&self, o: &SpectralField) -> bool {
        self.m == o.m && self.data.len() == o.data.len()
    }

    fn check_shape(&self, o: &SpectralField) {
        assert!(
            self.same_shape(o),
            "fields on different grids or with different component counts"
        );
    }

    /// `self += a·x`.
    pub fn axpy(&mut self, a: f64, x: &SpectralField) {
        self.check_shape(x);
        for (s, v) in self.data.iter_mut().zip(&x.data) {
            *s += v * a;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for s in &mut self.data {
            *s *= a;
        }
    }

    pub fn scaled(&self, a: f64) -> SpectralField {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    pub fn add(&self, o: &SpectralField) -> SpectralField {
        let mut out = self.clone();
        out.axpy(1.0, o);
        out
    }

    pub fn sub(&self, o: &SpectralField) -> SpectralField {
        let mut out = self.clone();
        out.axpy(-1.0, o);
        out
    }

    /// Real `L²` inner product.
    pub fn inner(&self, o: &SpectralField) -> f64 {
        self.check_shape(o);
        self.data
            .iter()
            .zip(&o.data)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.data.iter().map(|a| a.norm()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Largest violation of `c(-n) = conj c(n)`.
    pub fn hermitian_defect(&self) -> f64 {
        let t = mode_table(self.m);
        let n = self.len_per_component();
        let mut worst: f64 = 0.0;
        for c in 0..self.components() {
            let comp = &self.data[c * n..(c + 1) * n];
            for i in 0..n {
                worst = worst.max((comp[i] - comp[t.conj[i] as usize].conj()).norm());
            }
        }
        worst
    }

    /// Largest `|n·û(n)|` over all modes.
    pub fn divergence_defect(&self) -> f64 {
        if self.components() != 3 {
            return 0.0;
        }
        let t = mode_table(self.m);
        let n = self.len_per_component();
        (0..n)
            .map(|i| {
                let w = t.wave[i];
                (self.data[i] * w[0] as f64
                    + self.data[n + i] * w[1] as f64
                    + self.data[2 * n + i] * w[2] as f64)
                    .norm()
            })
            .fold(0.0, f64::max)
    }

    pub fn zero_nyquist(&mut self) {
        let t = mode_table(self.m);
        let n = self.len_per_component();
        for c in 0..self.components() {
            for i in 0..n {
                if t.nyquist[i] {
                    self.data[c * n + i] = C64::ZERO;
                }
            }
        }
    }

    /// Zeroes every coefficient whose `|n|²` fails `keep`.
    pub fn retain_by_n2(&mut self, keep: impl Fn(u64) -> bool) {
        let t = mode_table(self.m);
        let n = self.len_per_component();
        for c in 0..self.components() {
            for i in 0..n {
                if !keep(t.n2[i] as u64) {
                    self.data[c * n + i] = C64::ZERO;
                }
            }
        }
    }

    /// Projects onto the constraints of the field's space kind.
    pub fn enforce_kind(&mut self) {
        match self.kind {
            SpaceKind::MeanZeroScalar => self.data[0] = C64::ZERO,
            SpaceKind::DivFreeVector => leray_in_place(self),
            SpaceKind::FullScalar | SpaceKind::Vector => {}
        }
    }

    /// Re-tags the field and enforces the new constraints.
    pub fn into_kind(mut self, kind: SpaceKind) -> Result<SpectralField> {
        if kind.components() != self.components() {
            return Err(ImError::mismatch(format!(
                "cannot view {:?} as {:?}",
                self.kind, kind
            )));
        }
        self.kind = kind;
        self.enforce_kind();
        Ok(self)
    }
}

/// The positive operator `A` and the exponents attached to a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub shift: u8,
    pub gamma: f64,
    pub gamma_bar: f64,
    pub alpha_filter: f64,
    pub kind: SpaceKind,
}

impl OperatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shift > 1 {
            return Err(ImError::invalid("shift must be 0 or 1"));
        }
        if self.kind == SpaceKind::FullScalar && self.shift != 1 {
            return Err(ImError::invalid(
                "a field with a mean component needs A = 1 - Δ (shift 1)",
            ));
        }
        if !(self.gamma >= 0.0 && self.gamma_bar >= 0.0 && self.alpha_filter > 0.0) {
            return Err(ImError::invalid(
                "γ, γ̄ must be ≥ 0 and the filter scale α > 0",
            ));
        }
        Ok(())
    }

    pub fn eigenvalue(&self, n2: u64) -> f64 {
        self.shift as f64 + n2 as f64
    }

    fn is_active(&self, n2: u32) -> bool {
        n2 > 0 || self.kind.has_mean()
    }

    /// `symbol(λ)` tabulated by `|n|²`; inactive modes map to 0.
    pub(crate) fn table(&self, m: usize, symbol: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
        let max = mode_table(m).max_n2;
        let mut out = Vec::with_capacity(max + 1);
        for n2 in 0..=max as u32 {
            if !self.is_active(n2) {
                out.push(0.0);
                continue;
            }
            let v = symbol(self.eigenvalue(n2 as u64));
            if !v.is_finite() {
                return Err(ImError::invalid(format!(
                    "multiplier is singular at |n|²={n2}"
                )));
            }
            out.push(v);
        }
        Ok(out)
    }

    pub fn apply_multiplier(
        &self,
        u: &SpectralField,
        symbol: impl Fn(f64) -> f64,
    ) -> Result<SpectralField> {
        let tab = self.table(u.m, symbol)?;
        Ok(apply_table(u, &tab))
    }

    /// `A^s u`.
    pub fn power(&self, u: &SpectralField, s: f64) -> Result<SpectralField> {
        self.apply_multiplier(u, |l| l.powf(s))
    }

    /// `(1 - αΔ)^e u`; the symbol uses the unshifted `|n|²`.
    pub fn filter(&self, u: &SpectralField, e: f64) -> SpectralField {
        let max = mode_table(u.m).max_n2;
        let tab: Vec<f64> = (0..=max)
            .map(|n2| (1.0 + self.alpha_filter * n2 as f64).powf(e))
            .collect();
        apply_table(u, &tab)
    }

    pub fn sobolev_norm_sq(&self, u: &SpectralField, s: f64) -> Result<f64> {
        let tab = self.table(u.m, |l| l.powf(s))?;
        let t = mode_table(u.m);
        let n = u.len_per_component();
        let mut acc = 0.0;
        for c in 0..u.components() {
            for (i, z) in u.component(c).iter().enumerate().take(n) {
                acc += tab[t.n2[i] as usize] * z.norm_sqr();
            }
        }
        Ok(acc)
    }

    pub fn sobolev_norm(&self, u: &SpectralField, s: f64) -> Result<f64> {
        Ok(self.sobolev_norm_sq(u, s)?.sqrt())
    }

    /// `(A^{s/2} f, A^{s/2} g)_H`.
    pub fn inner_hs(&self, f: &SpectralField, g: &SpectralField, s: f64) -> Result<f64> {
        let tab = self.table(f.m, |l| l.powf(s))?;
        let t = mode_table(f.m);
        let n = f.len_per_component();
        let mut acc = 0.0;
        for c in 0..f.components() {
            let (a, b) = (f.component(c), g.component(c));
            for i in 0..n {
                acc += tab[t.n2[i] as usize] * (a[i].re * b[i].re + a[i].im * b[i].im);
            }
        }
        Ok(acc)
    }
}

pub(crate) fn apply_table(u: &SpectralField, tab: &[f64]) -> SpectralField {
    let t = mode_table(u.m);
    let n = u.len_per_component();
    let mut out = u.clone();
    for c in 0..u.components() {
        for (i, z) in out.component_mut(c).iter_mut().enumerate() {
            *z *= tab[t.n2[i] as usize];
        }
    }
    debug_assert_eq!(out.data.len(), n * u.components());
    out
}

/// Which spectral projector to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Which {
    /// `P_N`: `|n|² ≤ Λ`.
    P,
    /// `Q_N`: `|n|² > Λ`.
    Q,
    /// `ℐ_{k,N}`: the annulus `Λ-k ≤ |n|² ≤ Λ+k`.
    I,
    /// `𝒫_{k,N}`: below the annulus.
    PBelow,
    /// `𝒬_{k,N}`: above the annulus.
    QAbove,
}

pub fn project(u: &SpectralField, which: Which, spec: &ProjectorSpec) -> SpectralField {
    let (lo, hi) = spec.window();
    let lam = spec.lambda;
    let mut out = u.clone();
    match which {
        Which::P => out.retain_by_n2(|n2| n2 <= lam),
        Which::Q => out.retain_by_n2(|n2| n2 > lam),
        Which::I => out.retain_by_n2(|n2| n2 >= lo && n2 <= hi),
        Which::PBelow => out.retain_by_n2(|n2| n2 < lo),
        Which::QAbove => out.retain_by_n2(|n2| n2 > hi),
    }
    out
}

fn leray_in_place(u: &mut SpectralField) {
    let t = mode_table(u.m);
    let n = u.len_per_component();
    for i in 0..n {
        if t.n2[i] == 0 || t.nyquist[i] {
            for c in 0..3 {
                u.data[c * n + i] = C64::ZERO;
            }
            continue;
        }
        let w = t.wave[i].map(|x| x as f64);
        let dot = u.data[i] * w[0] + u.data[n + i] * w[1] + u.data[2 * n + i] * w[2];
        let s = dot / t.n2[i] as f64;
        for c in 0..3 {
            u.data[c * n + i] -= s * w[c];
        }
    }
}

/// Orthogonal projection onto divergence-free, mean-zero vector fields.
pub fn leray_project(u: &SpectralField) -> Result<SpectralField> {
    if u.components() != 3 {
        return Err(ImError::mismatch(
            "Leray projection needs a 3-component field",
        ));
    }
    let mut out = u.clone();
    leray_in_place(&mut out);
    out.kind = SpaceKind::DivFreeVector;
    Ok(out)
}

/// `∇f` for a scalar field.
pub fn gradient(f: &SpectralField) -> Result<SpectralField> {
    if f.components() != 1 {
        return Err(ImError::mismatch(
            "gradient of a vector field is not supported",
        ));
    }
    let t = mode_table(f.m);
    let n = f.len_per_component();
    let mut out = SpectralField::zeros(f.m, SpaceKind::Vector);
    for i in 0..n {
        if t.nyquist[i] {
            continue;
        }
        for c in 0..3 {
            out.data[c * n + i] = f.data[i] * C64::new(0.0, t.wave[i][c] as f64);
        }
    }
    Ok(out)
}

/// `∂_c f` for one component of a field (`which` selects the field component).
pub(crate) fn partial(f: &SpectralField, which: usize, axis: usize) -> SpectralField {
    let t = mode_table(f.m);
    let n = f.len_per_component();
    let mut out = SpectralField::zeros(f.m, SpaceKind::FullScalar);
    let src = f.component(which);
    for i in 0..n {
        if !t.nyquist[i] {
            out.data[i] = src[i] * C64::new(0.0, t.wave[i][axis] as f64);
        }
    }
    out
}

/// `∇·v` for a vector field.
pub fn divergence(v: &SpectralField) -> Result<SpectralField> {
    if v.components() != 3 {
        return Err(ImError::mismatch("divergence needs a 3-component field"));
    }
    let t = mode_table(v.m);
    let n = v.len_per_component();
    let mut out = SpectralField::zeros(v.m, SpaceKind::MeanZeroScalar);
    for i in 0..n {
        if t.nyquist[i] {
            continue;
        }
        let w = t.wave[i];
        let mut acc = C64::ZERO;
        for c in 0..3 {
            acc += v.data[c * n + i] * C64::new(0.0, w[c] as f64);
        }
        out.data[i] = acc;
    }
    Ok(out)
}

/// Smallest even padded grid that dealiases a product of `degree` factors.
pub fn dealias_size(m: usize, degree: usize) -> usize {
    let need = ((degree.max(1) + 1) * m).div_ceil(2);
    let need = need + need % 2;
    need.max(m)
}

fn embed(src: &[C64], m: usize, big: usize, dst: &mut [C64]) {
    if big == m {
        dst.copy_from_slice(src);
        return;
    }
    for z in dst.iter_mut() {
        *z = C64::ZERO;
    }
    let h = m / 2;
    let map = |i: usize| -> Option<usize> {
        let w = wavenumber(i, m);
        if w.unsigned_abs() as usize == h {
            None
        } else if w >= 0 {
            Some(w as usize)
        } else {
            Some((w + big as i64) as usize)
        }
    };
    let idx: Vec<Option<usize>> = (0..m).map(map).collect();
    for i in 0..m {
        let Some(bi) = idx[i] else { continue };
        for j in 0..m {
            let Some(bj) = idx[j] else { continue };
            for k in 0..m {
                let Some(bk) = idx[k] else { continue };
                dst[(bi * big + bj) * big + bk] = src[(i * m + j) * m + k];
            }
        }
    }
}

fn extract(src: &[C64], big: usize, m: usize, dst: &mut [C64]) {
    if big == m {
        dst.copy_from_slice(src);
        return;
    }
    let h = m / 2;
    let map = |i: usize| -> Option<usize> {
        let w = wavenumber(i, m);
        if w.unsigned_abs() as usize == h {
            None
        } else if w >= 0 {
            Some(w as usize)
        } else {
            Some((w + big as i64) as usize)
        }
    };
    let idx: Vec<Option<usize>> = (0..m).map(map).collect();
    for i in 0..m {
        for j in 0..m {
            for k in 0..m {
                dst[(i * m + j) * m + k] = match (idx[i], idx[j], idx[k]) {
                    (Some(a), Some(b), Some(c)) => src[(a * big + b) * big + c],
                    _ => C64::ZERO,
                };
            }
        }
    }
}

/// Samples scalar spectral components on the padded grid `big³`.
///
/// Two real fields share one complex transform.
pub(crate) fn spectral_to_grid(comps: &[&[C64]], m: usize, big: usize) -> Vec<Vec<f64>> {
    let plan = fft::plan(big);
    let total = big * big * big;
    let scale = 1.0 / torus_scale();
    let mut out = Vec::with_capacity(comps.len());
    let mut a = vec![C64::ZERO; total];
    let mut b = vec![C64::ZERO; total];
    for pair in comps.chunks(2) {
        embed(pair[0], m, big, &mut a);
        if pair.len() == 2 {
            embed(pair[1], m, big, &mut b);
            for (x, y) in a.iter_mut().zip(&b) {
                *x += C64::new(-y.im, y.re);
            }
        }
        plan.inverse(&mut a);
        out.push(a.iter().map(|z| z.re * scale).collect());
        if pair.len() == 2 {
            out.push(a.iter().map(|z| z.im * scale).collect());
        }
    }
    out
}

/// Inverse of [`spectral_to_grid`]: returns one coefficient vector per input
/// grid function, truncated to the grid `m`.
pub(crate) fn grid_to_spectral(values: &[&[f64]], big: usize, m: usize) -> Vec<Vec<C64>> {
    let plan = fft::plan(big);
    let total = big * big * big;
    let scale = torus_scale() / total as f64;
    let mut out = Vec::with_capacity(values.len());
    let mut z = vec![C64::ZERO; total];
    let conj_of = |idx: usize| -> usize {
        let k = idx % big;
        let j = (idx / big) % big;
        let i = idx / (big * big);
        (((big - i) % big) * big + (big - j) % big) * big + (big - k) % big
    };
    for pair in values.chunks(2) {
        if pair.len() == 2 {
            for ((dst, &x), &y) in z.iter_mut().zip(pair[0]).zip(pair[1]) {
                *dst = C64::new(x, y);
            }
        } else {
            for (dst, &x) in z.iter_mut().zip(pair[0]) {
                *dst = C64::new(x, 0.0);
            }
        }
        plan.forward(&mut z);
        if pair.len() == 2 {
            let mut a = vec![C64::ZERO; total];
            let mut b = vec![C64::ZERO; total];
            for idx in 0..total {
                let zc = z[conj_of(idx)].conj();
                a[idx] = (z[idx] + zc) * (0.5 * scale);
                b[idx] = (z[idx] - zc) * C64::new(0.0, -0.5 * scale);
            }
            let mut sa = vec![C64::ZERO; m * m * m];
            extract(&a, big, m, &mut sa);
            out.push(sa);
            let mut sb = vec![C64::ZERO; m * m * m];
            extract(&b, big, m, &mut sb);
            out.push(sb);
        } else {
            for x in z.iter_mut() {
                *x *= scale;
            }
            let mut sa = vec![C64::ZERO; m * m * m];
            extract(&z, big, m, &mut sa);
            out.push(sa);
        }
    }
    out
}

/// Physical values of each component on the grid `m³`.
pub fn to_physical(u: &SpectralField) -> Vec<Vec<f64>> {
    to_physical_padded(u, u.m)
}

/// Physical values on a finer grid `big³` (spectral interpolation).
pub fn to_physical_padded(u: &SpectralField, big: usize) -> Vec<Vec<f64>> {
    let comps: Vec<&[C64]> = (0..u.components()).map(|c| u.component(c)).collect();
    spectral_to_grid(&comps, u.m, big)
}

/// Transforms grid values back to a field of the requested kind, projecting
/// onto its constraints.
pub fn from_physical(values: &[Vec<f64>], m: usize, kind: SpaceKind) -> Result<SpectralField> {
    from_physical_padded(values, m, m, kind)
}

pub fn from_physical_padded(
    values: &[Vec<f64>],
    big: usize,
    m: usize,
    kind: SpaceKind,
) -> Result<SpectralField> {
    if values.len() != kind.components() {
        return Err(ImError::mismatch(format!(
            "{} components supplied for {:?}",
            values.len(),
            kind
        )));
    }
    let total = big * big * big;
    if values.iter().any(|v| v.len() != total) {
        return Err(ImError::mismatch(format!(
            "grid values must have length {total}"
        )));
    }
    let refs: Vec<&[f64]> = values.iter().map(|v| v.as_slice()).collect();
    let comps = grid_to_spectral(&refs, big, m);
    let mut out = SpectralField::zeros(m, kind);
    let n = m * m * m;
    for (c, v) in comps.into_iter().enumerate() {
        out.data[c * n..(c + 1) * n].copy_from_slice(&v);
    }
    out.enforce_kind();
    Ok(out)
}

/// Dealiased product of a scalar field with a scalar or vector field,
/// padded by the two-thirds rule. The result carries no constraint beyond
/// the component count of `g`.
pub fn pointwise_product(f: &SpectralField, g: &SpectralField) -> Result<SpectralField> {
    if f.m != g.m {
        return Err(ImError::mismatch("product of fields on different grids"));
    }
    if f.components() != 1 {
        return Err(ImError::mismatch(
            "the first factor of a product must be scalar",
        ));
    }
    let m = f.m;
    let big = dealias_size(m, 2);
    let mut comps: Vec<&[C64]> = vec![f.component(0)];
    for c in 0..g.components() {
        comps.push(g.component(c));
    }
    let phys = spectral_to_grid(&comps, m, big);
    let prods: Vec<Vec<f64>> = phys[1..]
        .iter()
        .map(|gc| gc.iter().zip(&phys[0]).map(|(a, b)| a * b).collect())
        .collect();
    let kind = if g.components() == 1 {
        SpaceKind::FullScalar
    } else {
        SpaceKind::Vector
    };
    from_physical_padded(&prods, big, m, kind)
}

/// `ψ_{>r}`: the field with every mode `|n| ≤ r` removed.
pub fn high_pass_tail(psi: &SpectralField, r: f64) -> SpectralField {
    let mut out = psi.clone();
    out.retain_by_n2(|n2| n2 as f64 > r * r);
    out
}

/// Max-norm of `ψ_{>r}` over the physical grid.
pub fn tail_linf_bound(psi: &SpectralField, r: f64) -> f64 {
    let tail = high_pass_tail(psi, r);
    to_physical(&tail)
        .iter()
        .flat_map(|v| v.iter())
        .fold(0.0, |a, &x| a.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{random_field, seeded_rng};
    use proptest::prelude::*;

    fn grid_fn(m: usize, f: impl Fn(f64, f64, f64) -> f64) -> Vec<f64> {
        let h = 2.0 * PI / m as f64;
        let mut out = Vec::with_capacity(m * m * m);
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    out.push(f(i as f64 * h, j as f64 * h, k as f64 * h));
                }
            }
        }
        out
    }

    fn mz_op(shift: u8) -> OperatorSpec {
        OperatorSpec {
            shift,
            gamma: 0.0,
            gamma_bar: 0.0,
            alpha_filter: 1.0,
            kind: SpaceKind::MeanZeroScalar,
        }
    }

    #[test]
    fn constant_and_cosine() {
        let m = 8;
        let c = from_physical(&[vec![2.5; m * m * m]], m, SpaceKind::FullScalar).unwrap();
        assert!((c.amplitude(0, ModeVec::ZERO).re - 2.5).abs() < 1e-14);
        assert!(c.norm_sq() - c.component(0)[0].norm_sqr() < 1e-20);
        let cs = from_physical(&[grid_fn(m, |x, _, _| x.cos())], m, SpaceKind::FullScalar).unwrap();
        for n in [ModeVec::new(1, 0, 0), ModeVec::new(-1, 0, 0)] {
            assert!((cs.amplitude(0, n) - C64::new(0.5, 0.0)).norm() < 1e-14);
        }
        assert!((cs.norm_sq() - 0.5 * torus_volume()).abs() < 1e-11);
    }

    #[test]
    fn sine_norm_and_unit_eigenvalue() {
        let m = 8;
        let s = from_physical(
            &[grid_fn(m, |x, _, _| x.sin())],
            m,
            SpaceKind::MeanZeroScalar,
        )
        .unwrap();
        let op = mz_op(0);
        assert!((op.sobolev_norm_sq(&s, 0.0).unwrap() - 0.5 * torus_volume()).abs() < 1e-11);
        assert!(
            (op.sobolev_norm_sq(&s, 2.0).unwrap() - op.sobolev_norm_sq(&s, 0.0).unwrap()).abs()
                < 1e-11
        );
    }

    #[test]
    fn heat_kernel_on_one_mode() {
        let m = 8;
        let u = from_physical(
            &[grid_fn(m, |x, _, _| x.cos())],
            m,
            SpaceKind::MeanZeroScalar,
        )
        .unwrap();
        let t = 0.37;
        let v = mz_op(0).apply_multiplier(&u, |l| (-t * l).exp()).unwrap();
        let expect = u.scaled((-t).exp());
        assert!(v.sub(&expect).max_abs_coeff() < 1e-14);
    }

    #[test]
    fn fractional_powers_invert() {
        let mut rng = seeded_rng(3);
        let u = random_field(8, SpaceKind::MeanZeroScalar, &mut rng, |n2| {
            (1.0 + n2).powf(-1.0)
        });
        let op = mz_op(0);
        let back = op.power(&op.power(&u, 0.5).unwrap(), -0.5).unwrap();
        assert!(back.sub(&u).max_abs_coeff() <= 1e-12 * u.max_abs_coeff());
        let id = op.apply_multiplier(&u, |_| 1.0).unwrap();
        assert_eq!(id, u);
    }

    #[test]
    fn singular_multiplier_is_an_error() {
        let u = SpectralField::zeros(8, SpaceKind::Vector);
        let op = OperatorSpec {
            shift: 0,
            gamma: 0.0,
            gamma_bar: 0.0,
            alpha_filter: 1.0,
            kind: SpaceKind::Vector,
        };
        assert!(op.power(&u, -1.0).is_err());
    }

    #[test]
    fn product_formula_cos_squared() {
        let m = 8;
        let c = from_physical(&[grid_fn(m, |x, _, _| x.cos())], m, SpaceKind::FullScalar).unwrap();
        let p = pointwise_product(&c, &c).unwrap();
        let expect = from_physical(
            &[grid_fn(m, |x, _, _| 0.5 + 0.5 * (2.0 * x).cos())],
            m,
            SpaceKind::FullScalar,
        )
        .unwrap();
        assert!(p.sub(&expect).max_abs_coeff() < 1e-13);
        let one = from_physical(&[vec![1.0; m * m * m]], m, SpaceKind::FullScalar).unwrap();
        let q = pointwise_product(&one, &c).unwrap();
        assert!(q.sub(&c).max_abs_coeff() < 1e-13);
    }

    #[test]
    fn div_grad_is_laplacian() {
        let mut rng = seeded_rng(5);
        let f = random_field(8, SpaceKind::MeanZeroScalar, &mut rng, |n2| {
            1.0 / (1.0 + n2)
        });
        let lap = divergence(&gradient(&f).unwrap()).unwrap();
        let mut expect = mz_op(0).apply_multiplier(&f, |l| -l).unwrap();
        expect.zero_nyquist();
        assert!(lap.sub(&expect).max_abs_coeff() < 1e-12);
    }

    #[test]
    fn tails() {
        let mut rng = seeded_rng(9);
        let psi = random_field(8, SpaceKind::FullScalar, &mut rng, |n2| (-n2.sqrt()).exp());
        assert_eq!(tail_linf_bound(&psi, 100.0), 0.0);
        let mut single = SpectralField::zeros(8, SpaceKind::FullScalar);
        single
            .set_pair(0, ModeVec::new(3, 0, 0), C64::new(1.0, 0.5))
            .unwrap();
        assert_eq!(high_pass_tail(&single, 2.0), single);
    }

    #[test]
    fn dealias_sizes() {
        assert_eq!(dealias_size(16, 2), 24);
        assert_eq!(dealias_size(16, 3), 32);
        assert_eq!(dealias_size(8, 2), 12);
        assert_eq!(dealias_size(8, 1), 8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn physical_round_trip(seed in 0u64..1000) {
            use rand::Rng;
            let m = 8;
            let mut rng = seeded_rng(seed);
            let vals: Vec<f64> = (0..m * m * m).map(|_| rng.random::<f64>() - 0.5).collect();
            let u = from_physical(std::slice::from_ref(&vals), m, SpaceKind::FullScalar).unwrap();
            let back = &to_physical(&u)[0];
            let err = back.iter().zip(&vals).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(err < 1e-12);
            prop_assert!(u.hermitian_defect() < 1e-14);
            let quad: f64 = vals.iter().map(|x| x * x).sum::<f64>() * torus_volume() / (m * m * m) as f64;
            prop_assert!((quad - u.norm_sq()).abs() <= 1e-12 * quad);
        }

        #[test]
        fn projector_pythagoras(seed in 0u64..1000, lam in 1u64..20, k in 0u64..3) {
            let mut rng = seeded_rng(seed);
            let u = random_field(8, SpaceKind::FullScalar, &mut rng, |n2| 1.0 / (1.0 + n2));
            let spec = ProjectorSpec { lambda: lam, k, shift: 1 };
            let p = project(&u, Which::P, &spec);
            let q = project(&u, Which::Q, &spec);
            prop_assert_eq!(p.add(&q), u.clone());
            prop_assert_eq!(project(&p, Which::Q, &spec).max_abs_coeff(), 0.0);
            let parts = project(&u, Which::PBelow, &spec).add(&project(&u, Which::I, &spec)).add(&project(&u, Which::QAbove, &spec));
            prop_assert_eq!(parts, u.clone());
            prop_assert!((p.norm_sq() + q.norm_sq() - u.norm_sq()).abs() <= 1e-12 * u.norm_sq());
        }

        #[test]
        fn sobolev_interpolation(seed in 0u64..1000, s in 0.0f64..3.0, eps in 0.05f64..1.0) {
            let mut rng = seeded_rng(seed);
            let u = random_field(8, SpaceKind::MeanZeroScalar, &mut rng, |n2| 1.0 / (1.0 + n2));
            let op = mz_op(0);
            let mid = op.sobolev_norm_sq(&u, s).unwrap();
            let lo = op.sobolev_norm(&u, s - eps).unwrap();
            let hi = op.sobolev_norm(&u, s + eps).unwrap();
            prop_assert!(mid <= lo * hi * (1.0 + 1e-12));
        }

        #[test]
        fn leray_properties(seed in 0u64..1000) {
            let mut rng = seeded_rng(seed);
            let v = random_field(8, SpaceKind::Vector, &mut rng, |n2| 1.0 / (1.0 + n2));
            let p = leray_project(&v).unwrap();
            prop_assert!(p.divergence_defect() < 1e-12);
            let pp = leray_project(&p).unwrap();
            prop_assert!(pp.sub(&p).max_abs_coeff() < 1e-14);
            let op = OperatorSpec { shift: 0, gamma: 0.5, gamma_bar: 0.0, alpha_filter: 0.3, kind: SpaceKind::DivFreeVector };
            let a = leray_project(&op.filter(&v, -0.7)).unwrap();
            let b = op.filter(&p, -0.7);
            prop_assert!(a.sub(&b).max_abs_coeff() < 1e-14);
            let f = random_field(8, SpaceKind::MeanZeroScalar, &mut rng, |n2| 1.0 / (1.0 + n2));
            let g = leray_project(&gradient(&f).unwrap()).unwrap();
            prop_assert!(g.max_abs_coeff() < 1e-13);
        }
    }
}
