//! Model nonlinearities and the truncation that makes them globally bounded
//! and Lipschitz.
//!
//! Three families are supported:
//!
//! * `rde`: scalar reaction-diffusion, `A = 1 - Δ`, `γ = 0`, `f` a polynomial;
//! * `ch`: generalized Cahn–Hilliard on mean-zero scalars, `A = -Δ`, `γ > 0`,
//!   with `f(u) - ⟨f(u)⟩`;
//! * `nse`: regularized Navier–Stokes on divergence-free fields with
//!   `f(u) = P(-Δ)^{-γ}[(u·∇)(1-αΔ)^{-γ̄}u]`.
//!
//! The truncated nonlinearity is
//! `F(u) = f(W(u)) - a(W(u))W(u) + θ(‖u‖²)a(W(u))u + T_N(u)` for the scalar
//! families and `F(u) = f(W(u))` for `nse`, where `a` is the spatial average
//! of `f'`.

use serde::{Deserialize, Serialize};

use crate::error::{ImError, Result};
use crate::field::{
    dealias_size, grid_to_spectral, leray_project, mode_table, partial, project, spectral_to_grid,
    OperatorSpec, SpaceKind, SpectralField, Which, C64,
};
use crate::lattice::ProjectorSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Rde,
    Ch,
    Nse,
}

impl Family {
    pub fn tag(self) -> u8 {
        match self {
            Family::Rde => 0,
            Family::Ch => 1,
            Family::Nse => 2,
        }
    }

    pub fn from_tag(t: u8) -> Option<Family> {
        match t {
            0 => Some(Family::Rde),
            1 => Some(Family::Ch),
            2 => Some(Family::Nse),
            _ => None,
        }
    }

    pub fn space_kind(self) -> SpaceKind {
        match self {
            Family::Rde => SpaceKind::FullScalar,
            Family::Ch => SpaceKind::MeanZeroScalar,
            Family::Nse => SpaceKind::DivFreeVector,
        }
    }
}

/// A model nonlinearity together with the operator it lives on.
#[derive(Clone, Debug, PartialEq)]
pub struct NonlinearitySpec {
    pub family: Family,
    /// `f(u) = Σ poly[i] uⁱ` (scalar families only).
    pub poly: Vec<f64>,
    pub op: OperatorSpec,
}

impl NonlinearitySpec {
    pub fn rde(poly: Vec<f64>) -> Self {
        NonlinearitySpec {
            family: Family::Rde,
            poly,
            op: OperatorSpec {
                shift: 1,
                gamma: 0.0,
                gamma_bar: 0.0,
                alpha_filter: 1.0,
                kind: SpaceKind::FullScalar,
            },
        }
    }

    pub fn ch(poly: Vec<f64>, gamma: f64) -> Self {
        NonlinearitySpec {
            family: Family::Ch,
            poly,
            op: OperatorSpec {
                shift: 0,
                gamma,
                gamma_bar: 0.0,
                alpha_filter: 1.0,
                kind: SpaceKind::MeanZeroScalar,
            },
        }
    }

    pub fn nse(gamma: f64, gamma_bar: f64, alpha_filter: f64) -> Self {
        NonlinearitySpec {
            family: Family::Nse,
            poly: Vec::new(),
            op: OperatorSpec {
                shift: 0,
                gamma,
                gamma_bar,
                alpha_filter,
                kind: SpaceKind::DivFreeVector,
            },
        }
    }

    pub fn kind(&self) -> SpaceKind {
        self.op.kind
    }

    pub fn validate(&self) -> Result<()> {
        self.op.validate()?;
        if self.op.kind != self.family.space_kind() {
            return Err(ImError::mismatch(format!(
                "{:?} lives on {:?}",
                self.family,
                self.family.space_kind()
            )));
        }
        match self.family {
            Family::Rde | Family::Ch => check_dissipative_poly(&self.poly),
            Family::Nse => {
                if (self.op.gamma + self.op.gamma_bar - 0.5).abs() > 1e-12 {
                    return Err(ImError::invalid(format!(
                        "nse needs γ + γ̄ = 1/2, got {} + {}",
                        self.op.gamma, self.op.gamma_bar
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn degree(&self) -> usize {
        match self.family {
            Family::Nse => 2,
            _ => poly_degree(&self.poly),
        }
    }

    fn check(&self, u: &SpectralField) -> Result<()> {
        if u.kind() != self.op.kind {
            return Err(ImError::mismatch(format!(
                "{:?} field handed to the {:?} nonlinearity",
                u.kind(),
                self.family
            )));
        }
        Ok(())
    }
}

fn poly_degree(p: &[f64]) -> usize {
    p.iter().rposition(|&c| c != 0.0).unwrap_or(0)
}

pub fn poly_eval(p: &[f64], x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

pub fn poly_d1(p: &[f64], x: f64) -> f64 {
    p.iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (i, &c)| acc * x + i as f64 * c)
}

pub fn poly_d2(p: &[f64], x: f64) -> f64 {
    p.iter()
        .enumerate()
        .skip(2)
        .rev()
        .fold(0.0, |acc, (i, &c)| acc * x + (i * (i - 1)) as f64 * c)
}

/// `Φ(x) = ∫₀ˣ f`.
pub fn poly_antideriv(p: &[f64], x: f64) -> f64 {
    p.iter()
        .enumerate()
        .rev()
        .fold(0.0, |acc, (i, &c)| acc * x + c / (i + 1) as f64)
        * x
}

/// Exact test of `f'(u) ≥ -K` and `f(u)u ≥ -C` for a polynomial `f`.
pub fn check_dissipative_poly(p: &[f64]) -> Result<()> {
    if p.iter().any(|c| !c.is_finite()) {
        return Err(ImError::invalid("polynomial coefficients must be finite"));
    }
    let d = poly_degree(p);
    let lead = p.get(d).copied().unwrap_or(0.0);
    let ok = match d {
        0 => lead == 0.0,
        1 => lead > 0.0,
        _ => d % 2 == 1 && lead > 0.0,
    };
    if ok {
        Ok(())
    } else {
        Err(ImError::invalid(format!(
            "f = {p:?} violates f'(u) ≥ -K or f(u)u ≥ -C (need odd degree with positive leading coefficient)"
        )))
    }
}

/// Constants `K = -inf f'` and `C = -inf f(u)u`, sampled on `[-span, span]`.
pub fn dissipation_constants(p: &[f64], span: f64) -> (f64, f64) {
    let n = 4001;
    let mut k: f64 = 0.0;
    let mut c: f64 = 0.0;
    for i in 0..n {
        let x = -span + 2.0 * span * i as f64 / (n - 1) as f64;
        k = k.max(-poly_d1(p, x));
        c = c.max(-poly_eval(p, x) * x);
    }
    (k, c)
}

fn grid_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Grid size on which a polynomial of `degree` in `u` (times at most one
/// more field) is computed without aliasing.
fn scalar_grid(nl: &NonlinearitySpec, m: usize) -> usize {
    dealias_size(m, nl.degree().max(2))
}

struct ScalarPass {
    f: SpectralField,
    a: f64,
}

/// `f(w)` (with the mean removed for `ch`) and `⟨f'(w)⟩` from one transform.
fn scalar_pass(nl: &NonlinearitySpec, w: &SpectralField) -> ScalarPass {
    let m = w.grid_m();
    let big = scalar_grid(nl, m);
    let phys = spectral_to_grid(&[w.component(0)], m, big);
    let fx: Vec<f64> = phys[0].iter().map(|&x| poly_eval(&nl.poly, x)).collect();
    let a = grid_mean(
        &phys[0]
            .iter()
            .map(|&x| poly_d1(&nl.poly, x))
            .collect::<Vec<_>>(),
    );
    let spec = grid_to_spectral(&[&fx], big, m)
        .pop()
        .expect("one component");
    let mut f = SpectralField::from_coeffs(m, nl.kind(), spec).expect("shape");
    f.enforce_kind();
    ScalarPass { f, a }
}

struct ScalarDerivPass {
    /// `f'(w)·z`, mean removed for `ch`.
    fz: SpectralField,
    /// `⟨f'(w)⟩`.
    a: f64,
    /// `⟨f''(w)·z⟩`.
    s3: f64,
}

fn scalar_deriv_pass(
    nl: &NonlinearitySpec,
    w: &SpectralField,
    z: &SpectralField,
) -> ScalarDerivPass {
    let m = w.grid_m();
    let big = scalar_grid(nl, m);
    let phys = spectral_to_grid(&[w.component(0), z.component(0)], m, big);
    let n = phys[0].len();
    let mut prod = Vec::with_capacity(n);
    let (mut a, mut s3) = (0.0, 0.0);
    for (&x, &y) in phys[0].iter().zip(&phys[1]) {
        let d1 = poly_d1(&nl.poly, x);
        prod.push(d1 * y);
        a += d1;
        s3 += poly_d2(&nl.poly, x) * y;
    }
    let spec = grid_to_spectral(&[&prod], big, m)
        .pop()
        .expect("one component");
    let mut fz = SpectralField::from_coeffs(m, nl.kind(), spec).expect("shape");
    fz.enforce_kind();
    ScalarDerivPass {
        fz,
        a: a / n as f64,
        s3: s3 / n as f64,
    }
}

/// `Σ_pairs (a·∇)b̄` on the dealiased grid, followed by Leray and `A^{-γ}`.
fn convective_sum(
    nl: &NonlinearitySpec,
    pairs: &[(&SpectralField, &SpectralField)],
) -> Result<SpectralField> {
    let m = pairs[0].0.grid_m();
    let big = dealias_size(m, 2);
    let mut owned: Vec<SpectralField> = Vec::new();
    for (a, b) in pairs {
        let bbar = nl.op.filter(b, -nl.op.gamma_bar);
        for c in 0..3 {
            owned.push(a.component(c).to_vec().into_field(m));
        }
        for j in 0..3 {
            for i in 0..3 {
                owned.push(partial(&bbar, j, i));
            }
        }
    }
    let comps: Vec<&[C64]> = owned.iter().map(|f| f.component(0)).collect();
    let phys = spectral_to_grid(&comps, m, big);
    let n = big * big * big;
    let mut out = vec![vec![0.0; n]; 3];
    for p in 0..pairs.len() {
        let base = p * 12;
        for j in 0..3 {
            let acc = &mut out[j];
            for i in 0..3 {
                let ai = &phys[base + i];
                let dij = &phys[base + 3 + 3 * j + i];
                for x in 0..n {
                    acc[x] += ai[x] * dij[x];
                }
            }
        }
    }
    let refs: Vec<&[f64]> = out.iter().map(|v| v.as_slice()).collect();
    let spec = grid_to_spectral(&refs, big, m);
    let mut data = Vec::with_capacity(3 * m * m * m);
    for s in spec {
        data.extend(s);
    }
    let raw = SpectralField::from_coeffs(m, SpaceKind::Vector, data)?;
    let proj = leray_project(&raw)?;
    nl.op.power(&proj, -nl.op.gamma)
}

trait IntoField {
    fn into_field(self, m: usize) -> SpectralField;
}

impl IntoField for Vec<C64> {
    fn into_field(self, m: usize) -> SpectralField {
        SpectralField::from_coeffs(m, SpaceKind::FullScalar, self).expect("component length")
    }
}

/// The untruncated model nonlinearity.
pub fn f_eval(nl: &NonlinearitySpec, u: &SpectralField) -> Result<SpectralField> {
    nl.check(u)?;
    match nl.family {
        Family::Rde | Family::Ch => Ok(scalar_pass(nl, u).f),
        Family::Nse => convective_sum(nl, &[(u, u)]),
    }
}

/// `f'(u)v`.
pub fn f_deriv(
    nl: &NonlinearitySpec,
    u: &SpectralField,
    v: &SpectralField,
) -> Result<SpectralField> {
    nl.check(u)?;
    nl.check(v)?;
    match nl.family {
        Family::Rde | Family::Ch => Ok(scalar_deriv_pass(nl, u, v).fz),
        Family::Nse => convective_sum(nl, &[(u, v), (v, u)]),
    }
}

/// Spatial average `⟨f'(u)⟩`; identically zero for `nse`.
pub fn f_average(nl: &NonlinearitySpec, u: &SpectralField) -> Result<f64> {
    nl.check(u)?;
    match nl.family {
        Family::Rde | Family::Ch => Ok(scalar_pass(nl, u).a),
        Family::Nse => Ok(0.0),
    }
}

/// `a'(u)v = ⟨f''(u)v⟩`.
pub fn f_average_deriv(nl: &NonlinearitySpec, u: &SpectralField, v: &SpectralField) -> Result<f64> {
    nl.check(u)?;
    match nl.family {
        Family::Rde | Family::Ch => Ok(scalar_deriv_pass(nl, u, v).s3),
        Family::Nse => Ok(0.0),
    }
}

/// Quintic smoothstep `t³(10 - 15t + 6t²)` on `[0,1]` and its derivative.
pub fn smoothstep(t: f64) -> (f64, f64) {
    if t <= 0.0 {
        (0.0, 0.0)
    } else if t >= 1.0 {
        (1.0, 0.0)
    } else {
        let t2 = t * t;
        (
            t2 * t * (10.0 - 15.0 * t + 6.0 * t2),
            30.0 * t2 * (1.0 - t) * (1.0 - t),
        )
    }
}

/// The amplitude clamp `φ`: identity on `[-1,1]`, `±2` beyond `|z| ≥ 2`.
/// Returns `(φ(z), φ'(z))`.
pub fn cutoff_phi(z: f64) -> (f64, f64) {
    let a = z.abs();
    if a <= 1.0 {
        return (z, 1.0);
    }
    if a >= 2.0 {
        return (2.0 * z.signum(), 0.0);
    }
    let (q, dq) = smoothstep(a - 1.0);
    let val = (1.0 - q) * a + 2.0 * q;
    let der = (1.0 - q) + dq * (2.0 - a);
    (val * z.signum(), der)
}

/// Parameters of the truncation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationParams {
    pub c_star: f64,
    pub s: f64,
    pub s0: f64,
    /// Inner radius of `T_N`.
    pub r: f64,
    /// Outer radius of `T_N`.
    pub r1: f64,
    /// Radius of the `θ` cutoff in `H`.
    pub r_bar: f64,
}

impl TruncationParams {
    pub const DEFAULT_S0: f64 = 1.75;
    pub const DEFAULT_S: f64 = 3.5;

    /// Defaults from measured absorbing radii in `H`, `H²`, `H^s`, each
    /// inflated by a factor of two.
    pub fn from_radii(radius_h: f64, radius_h2: f64, radius_hs: f64) -> Self {
        let floor = |x: f64| x.max(1e-3);
        let r = 2.0 * floor(radius_h2);
        TruncationParams {
            c_star: 2.0 * floor(radius_hs),
            s: Self::DEFAULT_S,
            s0: Self::DEFAULT_S0,
            r,
            r1: 2.0 * r,
            r_bar: 2.0 * floor(radius_h),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.c_star > 0.0 && self.c_star.is_finite()) {
            errs.push("C_* must be positive".to_string());
        }
        if !(self.s0 > 1.5 && self.s0 < 2.0) {
            errs.push(format!("s0={} must lie in (3/2, 2)", self.s0));
        }
        if !(self.s > self.s0 + 1.5 && self.s < self.s0 + 2.0) {
            errs.push(format!("s={} must lie in (s0+3/2, s0+2)", self.s));
        }
        if !(self.r > 0.0 && self.r1 > self.r) {
            errs.push(format!("need 0 < R < R1, got R={} R1={}", self.r, self.r1));
        }
        if !(self.r_bar > 0.0) {
            errs.push("R̄ must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ImError::Config(errs))
        }
    }

    /// `θ(z)`: 1 below `R̄²`, 0 above `4R̄²`.
    pub fn theta(&self, z: f64) -> (f64, f64) {
        let w = 3.0 * self.r_bar * self.r_bar;
        let (q, dq) = smoothstep((z - self.r_bar * self.r_bar) / w);
        (1.0 - q, -dq / w)
    }

    /// `φ_T(z)`: 0 below `R²`, `-1/2` above `R₁²`, nonincreasing.
    pub fn varphi_t(&self, z: f64) -> (f64, f64) {
        let (a, b) = (self.r * self.r, self.r1 * self.r1);
        let (q, dq) = smoothstep((z - a) / (b - a));
        (-0.5 * q, -0.5 * dq / (b - a))
    }
}

/// Truncation parameters together with the cut used by `T_N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub params: TruncationParams,
    pub projector: ProjectorSpec,
}

pub(crate) fn polarization(w: [i32; 3]) -> ([f64; 3], [f64; 3]) {
    let n = [w[0] as f64, w[1] as f64, w[2] as f64];
    let a = if w[0] == 0 && w[1] == 0 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let cross = |x: [f64; 3], y: [f64; 3]| {
        [
            x[1] * y[2] - x[2] * y[1],
            x[2] * y[0] - x[0] * y[2],
            x[0] * y[1] - x[1] * y[0],
        ]
    };
    let norm = |x: [f64; 3]| (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    let mut p1 = cross(n, a);
    let s1 = norm(p1);
    p1 = p1.map(|x| x / s1);
    let mut p2 = cross(n, p1);
    let s2 = norm(p2);
    p2 = p2.map(|x| x / s2);
    (p1, p2)
}

fn dot(p: [f64; 3], c: [C64; 3]) -> C64 {
    c[0] * p[0] + c[1] * p[1] + c[2] * p[2]
}

/// Clamps the real coordinate `x` (already multiplied by `κ`); returns the
/// new coordinate and the derivative factor, or `None` when unclamped.
fn clamp_coord(x: f64, scale: f64) -> Option<(f64, f64)> {
    let z = scale * x;
    if z.abs() <= 1.0 {
        None
    } else {
        let (p, dp) = cutoff_phi(z);
        Some((p / scale, dp))
    }
}

fn clamp_complex(c: C64, kappa: f64, scale: f64) -> (C64, [f64; 2], bool) {
    let re = clamp_coord(kappa * c.re, scale);
    let im = clamp_coord(kappa * c.im, scale);
    let clamped = re.is_some() || im.is_some();
    let (nr, fr) = re.map_or((c.re, 1.0), |(x, d)| (x / kappa, d));
    let (ni, fi) = im.map_or((c.im, 1.0), |(x, d)| (x / kappa, d));
    (C64::new(nr, ni), [fr, fi], clamped)
}

/// Mode-wise clamp `W(u)` and, if requested, `W'(u)v`.
pub fn w_apply(
    params: &TruncationParams,
    op: &OperatorSpec,
    u: &SpectralField,
    v: Option<&SpectralField>,
) -> Result<(SpectralField, Option<SpectralField>)> {
    let m = u.grid_m();
    let t = mode_table(m);
    let scales = op.table(m, |l| l.powf(params.s / 2.0) / params.c_star)?;
    let mut w = u.clone();
    let mut dv = v.cloned();
    let n = u.len_per_component();
    let sqrt2 = std::f64::consts::SQRT_2;
    if u.components() == 1 {
        let uc = u.component(0);
        for i in 0..n {
            let j = t.conj[i] as usize;
            if j < i {
                continue;
            }
            let scale = scales[t.n2[i] as usize];
            if scale == 0.0 {
                continue;
            }
            let kappa = if i == j { 1.0 } else { sqrt2 };
            let (c, f, clamped) = clamp_complex(uc[i], kappa, scale);
            if !clamped {
                continue;
            }
            let wc = w.component_mut(0);
            wc[i] = c;
            wc[j] = c.conj();
            if let Some(dv) = dv.as_mut() {
                let d = dv.component_mut(0);
                let z = C64::new(d[i].re * f[0], d[i].im * f[1]);
                d[i] = z;
                d[j] = z.conj();
            }
        }
    } else {
        if u.kind() != SpaceKind::DivFreeVector {
            return Err(ImError::mismatch(
                "vector truncation needs a divergence-free field",
            ));
        }
        for i in 0..n {
            let j = t.conj[i] as usize;
            if j < i || t.n2[i] == 0 {
                continue;
            }
            let scale = scales[t.n2[i] as usize];
            let kappa = if i == j { 1.0 } else { sqrt2 };
            let c = [u.coeffs()[i], u.coeffs()[n + i], u.coeffs()[2 * n + i]];
            let (p1, p2) = polarization(t.wave[i]);
            let (a1, f1, c1) = clamp_complex(dot(p1, c), kappa, scale);
            let (a2, f2, c2) = clamp_complex(dot(p2, c), kappa, scale);
            if !(c1 || c2) {
                continue;
            }
            let wc = w.coeffs_mut();
            for k in 0..3 {
                let z = a1 * p1[k] + a2 * p2[k];
                wc[k * n + i] = z;
                wc[k * n + j] = z.conj();
            }
            if let Some(dv) = dv.as_mut() {
                let d = dv.coeffs_mut();
                let vc = [d[i], d[n + i], d[2 * n + i]];
                let b1 = dot(p1, vc);
                let b2 = dot(p2, vc);
                let b1 = C64::new(b1.re * f1[0], b1.im * f1[1]);
                let b2 = C64::new(b2.re * f2[0], b2.im * f2[1]);
                for k in 0..3 {
                    let z = b1 * p1[k] + b2 * p2[k];
                    d[k * n + i] = z;
                    d[k * n + j] = z.conj();
                }
            }
        }
    }
    Ok((w, dv))
}

pub fn w_eval(
    params: &TruncationParams,
    op: &OperatorSpec,
    u: &SpectralField,
) -> Result<SpectralField> {
    Ok(w_apply(params, op, u, None)?.0)
}

pub fn w_deriv(
    params: &TruncationParams,
    op: &OperatorSpec,
    u: &SpectralField,
    v: &SpectralField,
) -> Result<SpectralField> {
    Ok(w_apply(params, op, u, Some(v))?
        .1
        .expect("direction supplied"))
}

/// Upper bound of `sup_x |W(u)(x)|` valid for every `u` on grid `m`.
pub fn w_linf_bound(params: &TruncationParams, op: &OperatorSpec, m: usize) -> Result<f64> {
    let t = mode_table(m);
    let inv = op.table(m, |l| l.powf(-params.s / 2.0))?;
    let per_mode: f64 =
        t.n2.iter()
            .zip(&t.nyquist)
            .filter(|(_, &ny)| !ny)
            .map(|(&k, _)| inv[k as usize])
            .sum();
    let comps = op.kind.components() as f64;
    Ok(2.0 * params.c_star * per_mode * comps.sqrt() / crate::field::torus_scale())
}

/// `z = ‖P_N u‖²_{H¹}`, the argument of the `T_N` cutoff.
pub(crate) fn t_argument(
    op: &OperatorSpec,
    spec: &ProjectorSpec,
    u: &SpectralField,
) -> Result<(SpectralField, f64)> {
    let pu = project(u, Which::P, spec);
    let z = op.sobolev_norm_sq(&pu, 1.0)?;
    Ok((pu, z))
}

/// `T_N(u) = φ_T(‖P_N u‖²_{H¹}) A P_N u`.
pub fn t_n(
    params: &TruncationParams,
    op: &OperatorSpec,
    spec: &ProjectorSpec,
    u: &SpectralField,
) -> Result<SpectralField> {
    let (pu, z) = t_argument(op, spec, u)?;
    let (phi, _) = params.varphi_t(z);
    if phi == 0.0 {
        return Ok(SpectralField::zeros(u.grid_m(), u.kind()));
    }
    Ok(op.power(&pu, 1.0)?.scaled(phi))
}

/// `T_N'(u)v = φ_T A P_N v + 2φ_T'(A P_N u, P_N v) A P_N u`.
pub fn t_n_deriv(
    params: &TruncationParams,
    op: &OperatorSpec,
    spec: &ProjectorSpec,
    u: &SpectralField,
    v: &SpectralField,
) -> Result<SpectralField> {
    let (pu, z) = t_argument(op, spec, u)?;
    let (phi, dphi) = params.varphi_t(z);
    if phi == 0.0 && dphi == 0.0 {
        return Ok(SpectralField::zeros(u.grid_m(), u.kind()));
    }
    let pv = project(v, Which::P, spec);
    let apu = op.power(&pu, 1.0)?;
    let mut out = op.power(&pv, 1.0)?.scaled(phi);
    out.axpy(2.0 * dphi * apu.inner(&pv), &apu);
    Ok(out)
}

/// The five pieces of `F'(u)v`.
#[derive(Clone, Debug)]
pub struct DerivTerms {
    pub l1: SpectralField,
    pub l2: SpectralField,
    pub l3: SpectralField,
    pub l4: SpectralField,
    pub t: SpectralField,
}

impl DerivTerms {
    pub fn sum(&self) -> SpectralField {
        let mut s = self.l1.clone();
        s.axpy(1.0, &self.l2);
        s.axpy(1.0, &self.l3);
        s.axpy(1.0, &self.l4);
        s.axpy(1.0, &self.t);
        s
    }

    /// `F'(u)v` without the `T_N'` piece.
    pub fn without_t(&self) -> SpectralField {
        let mut s = self.l1.clone();
        s.axpy(1.0, &self.l2);
        s.axpy(1.0, &self.l3);
        s.axpy(1.0, &self.l4);
        s
    }
}

/// A complete model: nonlinearity, optional truncation, and the forcing `g`
/// of `A^{-γ}∂ₜu + Au + F(u) = g`.
#[derive(Clone, Debug)]
pub struct Model {
    pub nl: NonlinearitySpec,
    pub trunc: Option<Truncation>,
    pub forcing: SpectralField,
    /// Drops the nonlinearity entirely (`F ≡ 0`); used for linear checks.
    pub linear: bool,
}

impl Model {
    pub fn new(
        nl: NonlinearitySpec,
        trunc: Option<Truncation>,
        forcing: SpectralField,
    ) -> Result<Self> {
        nl.validate()?;
        if forcing.kind() != nl.kind() {
            return Err(ImError::mismatch("forcing lives in the wrong space"));
        }
        if let Some(t) = &trunc {
            t.params.validate()?;
            t.projector.validate()?;
        }
        Ok(Model {
            nl,
            trunc,
            forcing,
            linear: false,
        })
    }

    /// The same operator with `F ≡ 0`.
    pub fn linear(nl: NonlinearitySpec, forcing: SpectralField) -> Result<Self> {
        let mut m = Model::new(nl, None, forcing)?;
        m.linear = true;
        Ok(m)
    }

    pub fn op(&self) -> &OperatorSpec {
        &self.nl.op
    }

    pub fn grid_m(&self) -> usize {
        self.forcing.grid_m()
    }

    pub fn kind(&self) -> SpaceKind {
        self.nl.kind()
    }

    pub fn zero(&self) -> SpectralField {
        SpectralField::zeros(self.grid_m(), self.kind())
    }

    pub fn untruncated(&self) -> Model {
        Model {
            trunc: None,
            ..self.clone()
        }
    }

    pub fn with_forcing(&self, g: SpectralField) -> Model {
        Model {
            forcing: g,
            ..self.clone()
        }
    }

    /// `F(u)`: truncated if the model carries a truncation, else `f(u)`.
    pub fn nonlinear(&self, u: &SpectralField) -> Result<SpectralField> {
        if self.linear {
            return Ok(self.zero());
        }
        let Some(tr) = &self.trunc else {
            return f_eval(&self.nl, u);
        };
        let op = &self.nl.op;
        let w = w_eval(&tr.params, op, u)?;
        match self.nl.family {
            Family::Nse => f_eval(&self.nl, &w),
            Family::Rde | Family::Ch => {
                let ScalarPass { f, a } = scalar_pass(&self.nl, &w);
                let (th, _) = tr.params.theta(u.norm_sq());
                let mut out = f;
                out.axpy(-a, &w);
                out.axpy(th * a, u);
                let t = t_n(&tr.params, op, &tr.projector, u)?;
                out.axpy(1.0, &t);
                Ok(out)
            }
        }
    }

    /// The pieces of `F'(u)v`. Untruncated models put everything in `l1`.
    pub fn deriv_terms(&self, u: &SpectralField, v: &SpectralField) -> Result<DerivTerms> {
        let z = self.zero();
        if self.linear {
            return Ok(DerivTerms {
                l1: z.clone(),
                l2: z.clone(),
                l3: z.clone(),
                l4: z.clone(),
                t: z,
            });
        }
        let Some(tr) = &self.trunc else {
            let l1 = f_deriv(&self.nl, u, v)?;
            return Ok(DerivTerms {
                l1,
                l2: z.clone(),
                l3: z.clone(),
                l4: z.clone(),
                t: z,
            });
        };
        let op = &self.nl.op;
        let (w, wv) = w_apply(&tr.params, op, u, Some(v))?;
        let wv = wv.expect("direction supplied");
        match self.nl.family {
            Family::Nse => {
                let l1 = f_deriv(&self.nl, &w, &wv)?;
                Ok(DerivTerms {
                    l1,
                    l2: z.clone(),
                    l3: z.clone(),
                    l4: z.clone(),
                    t: z,
                })
            }
            Family::Rde | Family::Ch => {
                let ScalarDerivPass { fz, a, s3 } = scalar_deriv_pass(&self.nl, &w, &wv);
                let (th, dth) = tr.params.theta(u.norm_sq());
                let mut l1 = fz;
                l1.axpy(-a, &wv);
                let l2 = v.scaled(th * a);
                let l3 = w.scaled(-s3);
                let l4 = u.scaled(2.0 * dth * u.inner(v) * a + th * s3);
                let t = t_n_deriv(&tr.params, op, &tr.projector, u, v)?;
                Ok(DerivTerms { l1, l2, l3, l4, t })
            }
        }
    }

    /// `F'(u)v`.
    pub fn nonlinear_deriv(&self, u: &SpectralField, v: &SpectralField) -> Result<SpectralField> {
        Ok(self.deriv_terms(u, v)?.sum())
    }

    /// The scalar part of `F'(u)`: `θ(‖u‖²)a(W(u))` when truncated,
    /// `⟨f'(u)⟩` otherwise, and zero for `nse` or linear models.
    pub fn average(&self, u: &SpectralField) -> Result<f64> {
        if self.linear || self.nl.family == Family::Nse {
            return Ok(0.0);
        }
        match &self.trunc {
            None => f_average(&self.nl, u),
            Some(tr) => {
                let w = w_eval(&tr.params, &self.nl.op, u)?;
                let (th, _) = tr.params.theta(u.norm_sq());
                Ok(th * f_average(&self.nl, &w)?)
            }
        }
    }

    /// Analytic bound on `‖F(u) - T_N(u)‖_H` over all `u` (truncated models).
    pub fn global_bound(&self) -> Result<f64> {
        let Some(tr) = &self.trunc else {
            return Err(ImError::invalid(
                "an untruncated nonlinearity has no global bound",
            ));
        };
        let b = w_linf_bound(&tr.params, &self.nl.op, self.grid_m())?;
        let vol_sqrt = crate::field::torus_scale();
        match self.nl.family {
            Family::Rde | Family::Ch => {
                let sup_f: f64 = self
                    .nl
                    .poly
                    .iter()
                    .enumerate()
                    .map(|(i, c)| c.abs() * b.powi(i as i32))
                    .sum();
                let sup_df: f64 = self
                    .nl
                    .poly
                    .iter()
                    .enumerate()
                    .skip(1)
                    .map(|(i, c)| i as f64 * c.abs() * b.powi(i as i32 - 1))
                    .sum();
                // f(W) in H, then a·W (‖W‖_H ≤ vol^{1/2}·b) and θ a u with ‖u‖ ≤ 2R̄.
                Ok(sup_f * vol_sqrt + sup_df * (b * vol_sqrt + 2.0 * tr.params.r_bar))
            }
            Family::Nse => {
                let m = self.grid_m();
                let t = mode_table(m);
                let inv = self.nl.op.table(m, |l| l.powf(-tr.params.s / 2.0))?;
                // ‖∇W̄‖_∞ by the same coefficient-sum argument, with |n| ≤ λ^{1/2}.
                let grad: f64 =
                    t.n2.iter()
                        .zip(&t.nyquist)
                        .filter(|(_, &ny)| !ny)
                        .map(|(&k, _)| inv[k as usize] * (k as f64).sqrt())
                        .sum();
                let gb = 2.0 * tr.params.c_star * grad * 3f64.sqrt() / vol_sqrt;
                Ok(3.0 * 3f64.sqrt() * b * gb * vol_sqrt)
            }
        }
    }
}

/// Sampled global Lipschitz constant of `F - T_N` on `H`: the largest ratio
/// `‖F'(u)v‖/‖v‖` over random states `u` (spread over several scales) and
/// random directions `v`.
pub fn measure_lipschitz(model: &Model, samples: usize, seed: u64) -> Result<f64> {
    use crate::random::{random_field, seeded_rng};
    let mut rng = seeded_rng(seed);
    let m = model.grid_m();
    let kind = model.kind();
    let mut best: f64 = 0.0;
    let base = match &model.trunc {
        Some(t) => t.params.r_bar.max(t.params.c_star),
        None => 1.0,
    };
    for i in 0..samples {
        let scale = base * [0.05, 0.3, 1.0, 3.0][i % 4];
        let mut u = random_field(m, kind, &mut rng, |n2| (1.0 + n2).powf(-1.5));
        let nu = u.norm();
        if nu > 0.0 {
            u.scale(scale / nu);
        }
        let v = random_field(m, kind, &mut rng, |n2| {
            (1.0 + n2).powf(-0.5 * (i % 3) as f64)
        });
        let nv = v.norm();
        if nv == 0.0 {
            continue;
        }
        let d = model.deriv_terms(&u, &v)?.without_t();
        best = best.max(d.norm() / nv);
    }
    Ok(best)
}
