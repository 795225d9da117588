//! The quadratic form `V(ξ) = ‖Q_Nξ‖²_{H^{-γ}} - ‖P_Nξ‖²_{H^{-γ}}`, its exact
//! derivative along the linearized flow, trajectory-level cone checks, and
//! the deviation of `F'(u)` from a scalar on the annulus.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::error::{ImError, Result};
use crate::evolution::{Integrator, TrajectorySegment};
use crate::field::{
    index_of, mode_table, project, OperatorSpec, SpaceKind, SpectralField, Which, C64,
};
use crate::fit::exp_rate;
use crate::lattice::{
    annulus, check_sg_condition, check_theorem_constants, ModeVec, ProjectorSpec, TheoremReport,
};
use crate::nonlinearity::{DerivTerms, Model};

/// Everything the cone inequality needs besides the trajectory.
#[derive(Clone, Debug, Serialize)]
pub struct ConeContext {
    pub op: OperatorSpec,
    pub projector: ProjectorSpec,
    /// Base exponent `α` of the two-block split.
    pub alpha_base: f64,
    pub mu: f64,
    pub l: f64,
    pub delta: f64,
    /// `λ_N` (shifted), used in the correction `a(u)λ_N^γ`.
    pub lambda_n: f64,
    /// Whether `α(u)` includes `a(u)λ_N^γ`.
    pub use_average: bool,
}

impl ConeContext {
    /// Constants of the spectral-gap case. Fails unless `Λ` is occupied.
    pub fn from_gap(op: OperatorSpec, projector: ProjectorSpec, l: f64) -> Result<Self> {
        let r = check_sg_condition(projector.lambda, l, op.gamma, projector.shift)?;
        Ok(ConeContext {
            op,
            projector,
            alpha_base: r.alpha,
            mu: r.mu,
            l,
            delta: 0.0,
            lambda_n: r.lambda_n,
            use_average: false,
        })
    }

    /// Constants of the spatial-averaging theorem, with the report of its
    /// four conditions.
    pub fn from_theorem(
        op: OperatorSpec,
        projector: ProjectorSpec,
        theta: f64,
        delta: f64,
        l: f64,
    ) -> (Self, TheoremReport) {
        let rep = check_theorem_constants(
            projector.lambda,
            projector.k,
            theta,
            delta,
            l,
            op.gamma,
            projector.shift,
        );
        let ctx = ConeContext {
            op,
            projector,
            alpha_base: rep.alpha,
            mu: rep.mu,
            l,
            delta,
            lambda_n: rep.lambda_n,
            use_average: true,
        };
        (ctx, rep)
    }

    /// `α(u) = α + a(u)λ_N^γ` given `a(u)`.
    pub fn alpha(&self, a_u: f64) -> f64 {
        if self.use_average {
            self.alpha_base + a_u * self.lambda_n.powf(self.op.gamma)
        } else {
            self.alpha_base
        }
    }
}

/// `V(ξ)`.
pub fn v_form(xi: &SpectralField, ctx: &ConeContext) -> Result<f64> {
    let w = ctx.op.table(xi.grid_m(), |l| l.powf(-ctx.op.gamma))?;
    let t = mode_table(xi.grid_m());
    let n = xi.len_per_component();
    let mut acc = 0.0;
    for (idx, z) in xi.coeffs().iter().enumerate() {
        let k = t.n2[idx % n];
        let sign = if ctx.projector.in_p(k as u64) {
            -1.0
        } else {
            1.0
        };
        acc += sign * w[k as usize] * z.norm_sqr();
    }
    Ok(acc)
}

/// `Q_N v - P_N v`.
fn flip(v: &SpectralField, spec: &ProjectorSpec) -> SpectralField {
    project(v, Which::Q, spec).sub(&project(v, Which::P, spec))
}

/// `½ dV/dt = -(Av + F'(u)v, Q_Nv - P_Nv)` along the linearized flow.
pub fn v_derivative(
    u: &SpectralField,
    v: &SpectralField,
    ctx: &ConeContext,
    model: &Model,
) -> Result<f64> {
    let d = v_derivative_parts(u, v, ctx, model)?;
    Ok(d.iter().sum())
}

/// The derivative split as `[linear, l1, l2, l3, l4, T_N']`.
pub fn v_derivative_parts(
    u: &SpectralField,
    v: &SpectralField,
    ctx: &ConeContext,
    model: &Model,
) -> Result<[f64; 6]> {
    let s = flip(v, &ctx.projector);
    let av = ctx.op.power(v, 1.0)?;
    let DerivTerms { l1, l2, l3, l4, t } = model.deriv_terms(u, v)?;
    Ok([
        -av.inner(&s),
        -l1.inner(&s),
        -l2.inner(&s),
        -l3.inner(&s),
        -l4.inner(&s),
        -t.inner(&s),
    ])
}

#[derive(Clone, Debug, Serialize)]
pub struct ConeReport {
    pub times: Vec<f64>,
    /// `½V' + α(u)V + μ‖v‖²`, which must stay `≤ 0`.
    pub slack: Vec<f64>,
    pub tolerance: Vec<f64>,
    pub pass: bool,
    pub worst_time: f64,
    pub worst_slack: f64,
    /// `[linear, l1, l2, l3, l4, T_N']` contributions at the worst time.
    pub worst_parts: [f64; 6],
    /// Observed range of `α(u(t))`.
    pub alpha_range: (f64, f64),
}

/// Evaluates `½V' + α(u)V ≤ -μ‖v‖²` at every stored time after the first.
pub fn strong_cone_check(
    u_traj: &TrajectorySegment,
    v_traj: &TrajectorySegment,
    ctx: &ConeContext,
    model: &Model,
) -> Result<ConeReport> {
    if u_traj.len() != v_traj.len() {
        return Err(ImError::mismatch(
            "state and tangent trajectories have different lengths",
        ));
    }
    let mut rep = ConeReport {
        times: Vec::new(),
        slack: Vec::new(),
        tolerance: Vec::new(),
        pass: true,
        worst_time: f64::NAN,
        worst_slack: f64::NEG_INFINITY,
        worst_parts: [0.0; 6],
        alpha_range: (f64::INFINITY, f64::NEG_INFINITY),
    };
    let mut worst_excess = f64::NEG_INFINITY;
    for i in 1..u_traj.len() {
        let (u, v) = (&u_traj.states[i], &v_traj.states[i]);
        let parts = v_derivative_parts(u, v, ctx, model)?;
        let a = if ctx.use_average {
            model.average(u)?
        } else {
            0.0
        };
        let alpha = ctx.alpha(a);
        rep.alpha_range = (rep.alpha_range.0.min(alpha), rep.alpha_range.1.max(alpha));
        let vn = v.norm_sq();
        let slack = parts.iter().sum::<f64>() + alpha * v_form(v, ctx)? + ctx.mu * vn;
        let tol = 1e-9 * (1.0 + vn);
        rep.times.push(u_traj.times[i]);
        rep.slack.push(slack);
        rep.tolerance.push(tol);
        if slack > tol {
            rep.pass = false;
        }
        if slack - tol > worst_excess {
            worst_excess = slack - tol;
            rep.worst_time = u_traj.times[i];
            rep.worst_slack = slack;
            rep.worst_parts = parts;
        }
    }
    Ok(rep)
}

#[derive(Clone, Debug, Serialize)]
pub struct PairReport {
    pub times: Vec<f64>,
    /// `V(S(t)ξ₁ - S(t)ξ₂)`.
    pub v_values: Vec<f64>,
    /// `‖S(t)ξ₁ - S(t)ξ₂‖_{H^{-γ}}`.
    pub distances: Vec<f64>,
    pub pass: bool,
    /// Squeezing only: fitted decay rate `θ` (positive means decay).
    pub theta: Option<f64>,
    pub note: String,
}

fn pair_runs(
    model: &Model,
    xi1: &SpectralField,
    xi2: &SpectralField,
    t_end: f64,
    dt: f64,
    ctx: &ConeContext,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let integ = Integrator::new(model, dt)?;
    let steps = integ.steps_for(t_end)?;
    let (mut a, mut b) = (xi1.clone(), xi2.clone());
    let mut ts = Vec::with_capacity(steps + 1);
    let mut vs = Vec::with_capacity(steps + 1);
    let mut ds = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        if k > 0 {
            a = integ.step(&a)?;
            b = integ.step(&b)?;
        }
        let d = a.sub(&b);
        ts.push(k as f64 * dt);
        vs.push(v_form(&d, ctx)?);
        ds.push(ctx.op.sobolev_norm(&d, -ctx.op.gamma)?);
    }
    Ok((ts, vs, ds))
}

/// Invariance of the cone: `ξ₁ - ξ₂ ∈ K⁺` must stay in `K⁺`.
pub fn cone_invariance_test(
    model: &Model,
    xi1: &SpectralField,
    xi2: &SpectralField,
    t_end: f64,
    dt: f64,
    ctx: &ConeContext,
) -> Result<PairReport> {
    let v0 = v_form(&xi1.sub(xi2), ctx)?;
    if v0 > 0.0 {
        return Err(ImError::invalid(format!(
            "initial difference lies outside the cone (V = {v0:e})"
        )));
    }
    let (times, v_values, distances) = pair_runs(model, xi1, xi2, t_end, dt, ctx)?;
    let pass = v_values
        .iter()
        .zip(&distances)
        .all(|(v, d)| *v <= 1e-9 * (1.0 + d * d));
    Ok(PairReport {
        times,
        v_values,
        distances,
        pass,
        theta: None,
        note: "V ≤ 1e-9·(1+‖d‖²) at every step".into(),
    })
}

/// Squeezing: if the difference is outside `K⁺` at `T`, its `H^{-γ}` norm
/// must have decayed exponentially on `[0, T]`.
pub fn squeezing_test(
    model: &Model,
    xi1: &SpectralField,
    xi2: &SpectralField,
    t_end: f64,
    dt: f64,
    ctx: &ConeContext,
) -> Result<PairReport> {
    let (times, v_values, distances) = pair_runs(model, xi1, xi2, t_end, dt, ctx)?;
    let outside = *v_values.last().expect("nonempty") > 0.0;
    if !outside {
        return Ok(PairReport {
            times,
            v_values,
            distances,
            pass: true,
            theta: None,
            note: "difference inside the cone at T; squeezing not triggered".into(),
        });
    }
    if distances[0] == 0.0 {
        return Ok(PairReport {
            times,
            v_values,
            distances,
            pass: true,
            theta: None,
            note: "identical data".into(),
        });
    }
    let rate = exp_rate(&times, &distances);
    Ok(PairReport {
        times,
        v_values,
        distances,
        pass: rate < 0.0,
        theta: Some(-rate),
        note: "fitted exponential rate of the H^-γ distance".into(),
    })
}

/// Real orthonormal basis of `H` restricted to the annulus, one field per
/// basis vector (coefficients sparse).
pub fn annulus_basis(
    m: usize,
    kind: SpaceKind,
    spec: &ProjectorSpec,
) -> Result<Vec<SpectralField>> {
    real_basis(m, kind, &annulus(spec))
}

/// Real orthonormal basis of the span of the given lattice modes (closed
/// under `n ↦ -n`). Cosine and sine type vectors per pair, times the two
/// polarizations for divergence-free fields.
pub fn real_basis(m: usize, kind: SpaceKind, modes: &[ModeVec]) -> Result<Vec<SpectralField>> {
    let h = (m / 2) as i64;
    if let Some(n) = modes.iter().find(|n| n.max_abs() >= h) {
        return Err(ImError::invalid(format!(
            "mode {n:?} does not fit on grid {m}"
        )));
    }
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut out = Vec::new();
    for &n in modes {
        let neg = n.neg();
        if n < neg {
            continue;
        }
        if n == ModeVec::ZERO {
            if kind.has_mean() {
                for c in 0..kind.components() {
                    let mut f = SpectralField::zeros(m, kind);
                    f.set_pair(c, n, C64::new(1.0, 0.0))?;
                    out.push(f);
                }
            }
            continue;
        }
        let pols: Vec<[f64; 3]> = match kind {
            SpaceKind::DivFreeVector => {
                let (p1, p2) =
                    crate::nonlinearity::polarization([n.q as i32, n.l as i32, n.m as i32]);
                vec![p1, p2]
            }
            SpaceKind::Vector => vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            _ => vec![[1.0, 0.0, 0.0]],
        };
        for p in pols {
            for z in [C64::new(s, 0.0), C64::new(0.0, -s)] {
                let mut f = SpectralField::zeros(m, kind);
                for (c, pc) in p.iter().enumerate().take(kind.components()) {
                    if *pc != 0.0 {
                        f.set_pair(c, n, z * *pc)?;
                    }
                }
                out.push(f);
            }
        }
    }
    Ok(out)
}

fn sparse_inner(basis: &SpectralField, w: &SpectralField, idx: &[usize]) -> f64 {
    let (a, b) = (basis.coeffs(), w.coeffs());
    idx.iter()
        .map(|&i| a[i].re * b[i].re + a[i].im * b[i].im)
        .sum()
}

#[derive(Clone, Debug, Serialize)]
pub struct SaDeviation {
    pub delta_est: f64,
    pub a_value: f64,
    pub dimension: usize,
    pub method: &'static str,
}

/// Largest singular value by power iteration on `MᵀM`, restarted from
/// random vectors until two runs agree to `tol`.
pub fn spectral_norm_power(mat: &DMatrix<f64>, tol: f64, rng: &mut impl Rng) -> f64 {
    let n = mat.ncols();
    if n == 0 {
        return 0.0;
    }
    let mtm = mat.transpose() * mat;
    let run = |rng: &mut dyn rand::RngCore| -> f64 {
        let mut x = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let mut est = 0.0;
        for _ in 0..10_000 {
            let nx = x.norm();
            if nx == 0.0 {
                return 0.0;
            }
            x /= nx;
            let y = &mtm * &x;
            let new = y.norm();
            let done = (new - est).abs() <= tol * new.max(f64::MIN_POSITIVE);
            est = new;
            x = y;
            if done {
                break;
            }
        }
        est.sqrt()
    };
    let mut best = run(rng);
    for _ in 0..4 {
        let again = run(rng);
        let agree = (again - best).abs() <= 10.0 * tol * best.max(f64::MIN_POSITIVE);
        best = best.max(again);
        if agree {
            break;
        }
    }
    best
}

/// `‖ℐF'(u)ℐ - a(u)ℐ‖` on `H`, with `F'` taken without the `T_N'` piece.
pub fn sa_deviation(u: &SpectralField, spec: &ProjectorSpec, model: &Model) -> Result<SaDeviation> {
    let basis = annulus_basis(u.grid_m(), u.kind(), spec)?;
    if basis.is_empty() {
        return Err(ImError::invalid(format!(
            "annulus around Λ={} with k={} is empty",
            spec.lambda, spec.k
        )));
    }
    let a = model.average(u)?;
    let supports: Vec<Vec<usize>> = basis
        .iter()
        .map(|b| {
            b.coeffs()
                .iter()
                .enumerate()
                .filter(|(_, z)| **z != C64::ZERO)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let dim = basis.len();
    let mut mat = DMatrix::<f64>::zeros(dim, dim);
    for (j, e) in basis.iter().enumerate() {
        let col = model.deriv_terms(u, e)?.without_t();
        for i in 0..dim {
            mat[(i, j)] = sparse_inner(&basis[i], &col, &supports[i]);
        }
        mat[(j, j)] -= a;
    }
    let (delta, method) = if dim <= 2000 {
        (mat.singular_values().max(), "dense")
    } else {
        let mut rng = crate::random::seeded_rng(dim as u64);
        (spectral_norm_power(&mat, 1e-6, &mut rng), "power")
    };
    Ok(SaDeviation {
        delta_est: delta,
        a_value: a,
        dimension: dim,
        method,
    })
}

/// Index set of a field's grid that lies in the annulus (helper for tests
/// and reports).
pub fn annulus_indices(m: usize, spec: &ProjectorSpec) -> Vec<usize> {
    annulus(spec)
        .into_iter()
        .filter_map(|n| index_of(m, n))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nonlinearity::NonlinearitySpec;
    use crate::random::{random_band_limited, random_field, seeded_rng};

    fn rde_linear(m: usize) -> Model {
        Model::linear(
            NonlinearitySpec::rde(vec![]),
            SpectralField::zeros(m, SpaceKind::FullScalar),
        )
        .unwrap()
    }

    fn ctx_for(model: &Model, lambda: u64) -> ConeContext {
        ConeContext::from_gap(
            *model.op(),
            ProjectorSpec::new(lambda, 1, model.op().shift).unwrap(),
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn v_form_signs_and_scaling() {
        let m = 8;
        let model = rde_linear(m);
        let ctx = ctx_for(&model, 2);
        let mut p = SpectralField::zeros(m, SpaceKind::FullScalar);
        p.set_pair(0, ModeVec::new(1, 0, 0), C64::new(0.5, 0.1))
            .unwrap();
        let mut q = SpectralField::zeros(m, SpaceKind::FullScalar);
        q.set_pair(0, ModeVec::new(1, 1, 1), C64::new(0.5, 0.1))
            .unwrap();
        assert!((v_form(&p, &ctx).unwrap() + p.norm_sq()).abs() < 1e-15);
        assert!((v_form(&q, &ctx).unwrap() - q.norm_sq()).abs() < 1e-15);
        assert!(v_form(&p.add(&q), &ctx).unwrap().abs() < 1e-15);
        let mut rng = seeded_rng(1);
        let x = random_field(m, SpaceKind::FullScalar, &mut rng, |_| 1.0);
        let v1 = v_form(&x, &ctx).unwrap();
        assert!(
            (v_form(&x.scaled(-3.0), &ctx).unwrap() - 9.0 * v1).abs() < 1e-12 * v1.abs().max(1.0)
        );
    }

    #[test]
    fn single_mode_derivative_oracle() {
        let m = 8;
        let nl = NonlinearitySpec::ch(vec![], 0.5);
        let model = Model::linear(nl, SpectralField::zeros(m, SpaceKind::MeanZeroScalar)).unwrap();
        let ctx =
            ConeContext::from_gap(*model.op(), ProjectorSpec::new(2, 1, 0).unwrap(), 0.0).unwrap();
        for (n, sign) in [(ModeVec::new(1, 1, 0), 1.0), (ModeVec::new(1, 1, 1), -1.0)] {
            let mut v = SpectralField::zeros(m, SpaceKind::MeanZeroScalar);
            v.set_pair(0, n, C64::new(0.3, 0.4)).unwrap();
            let lam = n.norm_sq() as f64;
            let d = v_derivative(&v, &v, &ctx, &model).unwrap();
            assert!((d - sign * lam * v.norm_sq()).abs() < 1e-14);
        }
    }

    #[test]
    fn derivative_matches_centered_differences() {
        let m = 8;
        let nl = NonlinearitySpec::rde(vec![0.0, -1.0, 0.0, 1.0]);
        let model = Model::new(nl, None, SpectralField::zeros(m, SpaceKind::FullScalar)).unwrap();
        let ctx = ctx_for(&model, 3);
        let mut rng = seeded_rng(4);
        let u = random_field(m, SpaceKind::FullScalar, &mut rng, |n2| 1.0 / (1.0 + n2));
        let v = random_field(m, SpaceKind::FullScalar, &mut rng, |n2| 1.0 / (1.0 + n2));
        let dt = 1e-5;
        let integ = Integrator::new(&model, dt).unwrap();
        let (us, vs) = integ.run_with_tangent(&u, &v, 2).unwrap();
        let fd = (v_form(&vs.states[2], &ctx).unwrap() - v_form(&vs.states[0], &ctx).unwrap())
            / (2.0 * dt);
        let exact = 2.0 * v_derivative(&us.states[1], &vs.states[1], &ctx, &model).unwrap();
        assert!((fd - exact).abs() < 1e-4 * exact.abs(), "{fd} vs {exact}");
    }

    #[test]
    fn linear_flow_passes_with_gap_constants() {
        let m = 8;
        let model = rde_linear(m);
        let ctx = ctx_for(&model, 3);
        let mut rng = seeded_rng(2);
        let integ = Integrator::new(&model, 0.01).unwrap();
        let u0 = model.zero();
        let v0 = random_field(m, SpaceKind::FullScalar, &mut rng, |_| 1.0);
        let (us, vs) = integ.run_with_tangent(&u0, &v0, 20).unwrap();
        let rep = strong_cone_check(&us, &vs, &ctx, &model).unwrap();
        assert!(rep.pass, "{:?}", rep.worst_slack);
    }

    #[test]
    fn scalar_derivative_has_zero_deviation() {
        let m = 8;
        let model = Model::new(
            NonlinearitySpec::rde(vec![0.0, 2.5]),
            None,
            SpectralField::zeros(m, SpaceKind::FullScalar),
        )
        .unwrap();
        let u = random_field(m, SpaceKind::FullScalar, &mut seeded_rng(1), |_| 1.0);
        let d = sa_deviation(&u, &ProjectorSpec::new(3, 1, 1).unwrap(), &model).unwrap();
        assert!(d.delta_est < 1e-13);
        assert!((d.a_value - 2.5).abs() < 1e-13);
    }

    #[test]
    fn band_limited_multiplier_cancels_on_admissible_annulus() {
        let m = 20;
        let model = Model::new(
            NonlinearitySpec::rde(vec![0.0, -1.0, 0.0, 1.0]),
            None,
            SpectralField::zeros(m, SpaceKind::FullScalar),
        )
        .unwrap();
        let u = random_band_limited(m, SpaceKind::FullScalar, &mut seeded_rng(3), 1, 1.0);
        let spec = ProjectorSpec::new(79, 1, 1).unwrap();
        assert!(crate::lattice::check_sa_condition(79, 1, 2));
        let d = sa_deviation(&u, &spec, &model).unwrap();
        assert!(d.delta_est < 1e-10, "{}", d.delta_est);
        // The same multiplier on a non-admissible annulus does not cancel.
        let bad = sa_deviation(&u, &ProjectorSpec::new(6, 1, 1).unwrap(), &model).unwrap();
        assert!(bad.delta_est > 1e-3);
    }

    #[test]
    fn nse_average_is_exactly_zero() {
        let m = 8;
        let model = Model::new(
            NonlinearitySpec::nse(0.5, 0.0, 1.0),
            None,
            SpectralField::zeros(m, SpaceKind::DivFreeVector),
        )
        .unwrap();
        let u = random_field(m, SpaceKind::DivFreeVector, &mut seeded_rng(3), |n2| {
            1.0 / (1.0 + n2)
        });
        let d = sa_deviation(&u, &ProjectorSpec::new(3, 1, 0).unwrap(), &model).unwrap();
        assert_eq!(d.a_value, 0.0);
        assert!(d.delta_est.is_finite());
    }

    #[test]
    fn power_iteration_matches_svd() {
        let mut rng = seeded_rng(8);
        let a = DMatrix::from_fn(30, 30, |_, _| rng.random::<f64>() - 0.5);
        let exact = a.singular_values().max();
        let est = spectral_norm_power(&a, 1e-10, &mut rng);
        assert!((est - exact).abs() < 1e-6 * exact);
    }

    #[test]
    fn annulus_basis_is_orthonormal() {
        for kind in [SpaceKind::FullScalar, SpaceKind::DivFreeVector] {
            let b = annulus_basis(8, kind, &ProjectorSpec::new(2, 1, 0).unwrap()).unwrap();
            let per_mode = if kind.is_scalar() { 1 } else { 2 };
            assert_eq!(b.len(), per_mode * (6 + 12 + 8));
            for i in 0..b.len() {
                for j in 0..b.len() {
                    let ip = b[i].inner(&b[j]);
                    assert!((ip - if i == j { 1.0 } else { 0.0 }).abs() < 1e-15);
                }
                assert_eq!(b[i].hermitian_defect(), 0.0);
                assert!(b[i].divergence_defect() < 1e-15);
            }
        }
    }
}
