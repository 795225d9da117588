//! The graph `𝕄: P_N H → Q_N H` of the inertial manifold, computed as the
//! long-time limit of two-point boundary value problems on `[-T, 0]`, plus
//! the probes built on it: tracking, the reduced inertial form, Lipschitz
//! and smoothness estimates.
//!
//! The boundary value problem is discretized with the same exponential
//! step as [`Integrator::step`]. Its fixed point is therefore an exact
//! trajectory of the discrete flow, and the computed graph is invariant
//! under that flow up to the Picard tolerance.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::cone::real_basis;
use crate::error::{ImError, Result};
use crate::evolution::Integrator;
use crate::field::{project, OperatorSpec, SpectralField, Which};
use crate::fit::{exp_rate, loglog_slope};
use crate::lattice::{cut_at, for_each_in_window, ModeVec, ProjectorSpec};
use crate::nonlinearity::{t_argument, Model};

/// Largest `ℓ_N T` the backward sweep may reach before `e^{ℓ_N T}` gets
/// close to overflowing.
const MAX_GROWTH_EXPONENT: f64 = 600.0;

#[derive(Clone, Debug, Serialize)]
pub struct BvpConfig {
    pub dt: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// First horizon of the `T` ladder.
    pub t0: f64,
    /// The ladder stops at `2^max_doublings · t0`.
    pub max_doublings: u32,
    /// Splitting shift `c` handed to the integrator (see
    /// [`Integrator::with_linear_shift`]).
    pub linear_shift: f64,
}

/// `λ_N^{1+γ}` and `λ_{N+1}^{1+γ}` at the cut.
pub fn linear_rates(op: &OperatorSpec, projector: &ProjectorSpec) -> (f64, f64) {
    shifted_rates(op, projector, 0.0)
}

/// `λ^{1+γ} + cλ^γ` at `λ_N` and `λ_{N+1}`.
pub fn shifted_rates(op: &OperatorSpec, projector: &ProjectorSpec, c: f64) -> (f64, f64) {
    let (below, above) = cut_at(projector.lambda);
    let sigma = |l: f64| l.powf(1.0 + op.gamma) + c * l.powf(op.gamma);
    (sigma(op.eigenvalue(below)), sigma(op.eigenvalue(above)))
}

impl BvpConfig {
    /// Tolerance `1e-8`, 200 Picard sweeps, `T₀ = 5 / (λ_{N+1}^{1+γ} - λ_N^{1+γ})`
    /// and six doublings.
    pub fn new(op: &OperatorSpec, projector: &ProjectorSpec, dt: f64) -> Self {
        let (ln, ln1) = linear_rates(op, projector);
        BvpConfig {
            dt,
            tol: 1e-8,
            max_iter: 200,
            t0: 5.0 / (ln1 - ln),
            max_doublings: 6,
            linear_shift: 0.0,
        }
    }

    /// Same defaults with the splitting shift `c`; `T₀` uses the shifted rates.
    pub fn with_linear_shift(
        op: &OperatorSpec,
        projector: &ProjectorSpec,
        dt: f64,
        c: f64,
    ) -> Self {
        let (ln, ln1) = shifted_rates(op, projector, c);
        BvpConfig {
            t0: 5.0 / (ln1 - ln),
            linear_shift: c,
            ..Self::new(op, projector, dt)
        }
    }
}

#[derive(Clone, Debug)]
pub struct GraphPoint {
    pub u_plus: SpectralField,
    pub m_of_u: SpectralField,
    pub t_used: f64,
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Successive Picard differences (weighted sup norm).
    pub picard_history: Vec<f64>,
    /// `‖𝕄_{2T} - 𝕄_T‖` along the ladder.
    pub ladder_history: Vec<f64>,
}

/// Picard solver for the boundary value problem
/// `P_N u(0) = u₊`, `Q_N u(-T) = 0`.
pub struct GraphSolver {
    integ: Integrator,
    projector: ProjectorSpec,
    cfg: BvpConfig,
    /// Weight exponent of the sup norm, halfway across the gap.
    eta: f64,
    ell_n: f64,
}

impl GraphSolver {
    pub fn new(model: &Model, projector: ProjectorSpec, cfg: BvpConfig) -> Result<Self> {
        projector.validate()?;
        if projector.shift != model.op().shift {
            return Err(ImError::mismatch(
                "projector and operator use different shifts",
            ));
        }
        if !(cfg.tol > 0.0 && cfg.t0 > 0.0 && cfg.max_iter > 0) {
            return Err(ImError::invalid(
                "BVP tolerance, first horizon and iteration cap must be positive",
            ));
        }
        let (ell_n, ell_n1) = shifted_rates(model.op(), &projector, cfg.linear_shift);
        if !(ell_n1 > ell_n) {
            return Err(ImError::invalid(
                "the shifted linear rates do not separate at the cut",
            ));
        }
        let integ = Integrator::with_linear_shift(model, cfg.dt, cfg.linear_shift)?;
        Ok(GraphSolver {
            integ,
            projector,
            cfg,
            eta: 0.5 * (ell_n + ell_n1),
            ell_n,
        })
    }

    pub fn model(&self) -> &Model {
        &self.integ.model
    }

    pub fn integrator(&self) -> &Integrator {
        &self.integ
    }

    pub fn projector(&self) -> &ProjectorSpec {
        &self.projector
    }

    pub fn config(&self) -> &BvpConfig {
        &self.cfg
    }

    pub fn op(&self) -> &OperatorSpec {
        self.integ.model.op()
    }

    pub fn p_part(&self, u: &SpectralField) -> SpectralField {
        project(u, Which::P, &self.projector)
    }

    pub fn q_part(&self, u: &SpectralField) -> SpectralField {
        project(u, Which::Q, &self.projector)
    }

    /// `‖·‖_{H^{-γ}}`.
    pub fn dist(&self, u: &SpectralField) -> Result<f64> {
        self.op().sobolev_norm(u, -self.op().gamma)
    }

    fn steps(&self, t: f64) -> usize {
        ((t / self.cfg.dt) - 1e-9).ceil().max(1.0) as usize
    }

    fn undecay_p(&self, x: &SpectralField) -> Result<SpectralField> {
        let spec = self.projector;
        self.integ.undecay_where(x, |n2| spec.in_p(n2))
    }

    /// Increment of one discrete step from `u`: `u_{+} = e^{-dt A^{1+γ}}u + incr(u)`.
    fn increment(&self, u: &SpectralField, zero: &SpectralField) -> Result<SpectralField> {
        let nj = self.integ.load(u)?;
        let a = self.integ.propagate(u, &nj);
        let na = self.integ.load(&a)?;
        Ok(self
            .integ
            .correct(&self.integ.propagate(zero, &nj), &na.sub(&nj)))
    }

    /// Backward extension of `P_N u` from `start` over `count` steps with
    /// the nonlinear load frozen at the later state and zero `Q_N` part;
    /// earliest first. Only an initial guess for the Picard sweep.
    fn backward_guess(&self, start: &SpectralField, count: usize) -> Result<Vec<SpectralField>> {
        let zero = self.model().zero();
        let mut out = Vec::with_capacity(count);
        let mut p = self.p_part(start);
        for _ in 0..count {
            let inc = self.p_part(&self.increment(&p, &zero)?);
            p = self.undecay_p(&p.sub(&inc))?;
            out.push(p.clone());
        }
        out.reverse();
        Ok(out)
    }

    fn check_u_plus(&self, u_plus: &SpectralField) -> Result<()> {
        if u_plus.kind() != self.model().kind() || u_plus.grid_m() != self.model().grid_m() {
            return Err(ImError::mismatch("u₊ does not live on the model's space"));
        }
        if self.q_part(u_plus).max_abs_coeff() != 0.0 {
            return Err(ImError::invalid("u₊ must be supported on P_N modes"));
        }
        Ok(())
    }

    /// Solves the boundary value problem on `[-T, 0]` (with `T` rounded up
    /// to whole steps). `warm` is a previous trajectory, earliest first; a
    /// shorter one is extended into the past.
    pub fn solve_bvp(
        &self,
        u_plus: &SpectralField,
        t: f64,
        warm: Option<&[SpectralField]>,
    ) -> Result<(GraphPoint, Vec<SpectralField>)> {
        if !(t > 0.0) {
            return Err(ImError::invalid(format!(
                "horizon must be positive, got {t}"
            )));
        }
        self.check_u_plus(u_plus)?;
        let n = self.steps(t);
        let t_used = n as f64 * self.cfg.dt;
        if self.ell_n * t_used > MAX_GROWTH_EXPONENT {
            return Err(ImError::invalid(format!(
                "horizon {t_used} is too long: backward growth e^{:.0} would overflow",
                self.ell_n * t_used
            )));
        }
        let mut traj = match warm {
            Some(w) if w.len() == n + 1 => {
                // Shift the P part by the linear backward image of the change in u₊.
                let mut d = u_plus.sub(&self.p_part(&w[n]));
                let mut out = w.to_vec();
                for j in (0..=n).rev() {
                    out[j].axpy(1.0, &d);
                    if j > 0 {
                        d = self.undecay_p(&d)?;
                    }
                }
                out
            }
            Some(w) if !w.is_empty() && w.len() < n + 1 => {
                let mut ext = self.backward_guess(&w[0], n + 1 - w.len())?;
                ext.extend_from_slice(w);
                ext
            }
            _ => {
                let mut ext = self.backward_guess(u_plus, n)?;
                ext.push(u_plus.clone());
                ext
            }
        };
        let zero = self.model().zero();
        let weights: Vec<f64> = (0..=n)
            .map(|j| (-self.eta * ((n - j) as f64) * self.cfg.dt).exp())
            .collect();
        let mut mixer = Anderson::new(ANDERSON_DEPTH, weights.clone());
        let mut history = Vec::new();
        let mut converged = false;
        for _ in 0..self.cfg.max_iter {
            let image = self.picard_map(&traj, u_plus, &zero)?;
            let mut diff: f64 = 0.0;
            for j in 0..=n {
                diff = diff.max(weights[j] * self.dist(&image[j].sub(&traj[j]))?);
            }
            history.push(diff);
            if !diff.is_finite() {
                break;
            }
            if diff < self.cfg.tol {
                traj = image;
                converged = true;
                break;
            }
            traj = mixer.next(traj, image);
        }
        let gp = GraphPoint {
            u_plus: u_plus.clone(),
            m_of_u: self.q_part(&traj[n]),
            t_used,
            residual: *history.last().unwrap_or(&f64::NAN),
            converged,
            iterations: history.len(),
            picard_history: history,
            ladder_history: Vec::new(),
        };
        Ok((gp, traj))
    }

    /// `φ_T(‖P_N u‖²_{H¹})` when the model's `T_N` acts on this solver's
    /// `P_N`, else zero. The backward sweep treats the diagonal part of
    /// `T_N` implicitly with this frozen factor, which keeps the sweep
    /// contracting once `T_N` switches on far in the past.
    fn frozen_t_factor(&self, u: &SpectralField) -> Result<f64> {
        let model = self.model();
        match &model.trunc {
            Some(tr) if !model.linear && tr.projector == self.projector => {
                let (_, z) = t_argument(model.op(), &tr.projector, u)?;
                Ok(tr.params.varphi_t(z).0)
            }
            _ => Ok(0.0),
        }
    }

    /// One Picard sweep: `Q_N` forward from zero at `-T`, `P_N` backward
    /// from `u₊` at `0`, both driven by the loads of `traj`.
    fn picard_map(
        &self,
        traj: &[SpectralField],
        u_plus: &SpectralField,
        zero: &SpectralField,
    ) -> Result<Vec<SpectralField>> {
        let n = traj.len() - 1;
        let mut incr = Vec::with_capacity(n);
        for u in &traj[..n] {
            incr.push(self.increment(u, zero)?);
        }
        let mut q = vec![zero.clone(); n + 1];
        for j in 0..n {
            q[j + 1] = self.q_part(&self.integ.decay(&q[j]).add(&incr[j]));
        }
        let mut out = vec![zero.clone(); n + 1];
        out[n] = u_plus.clone();
        let spec = self.projector;
        for j in (0..n).rev() {
            let phi = self.frozen_t_factor(&traj[j])?;
            let x = out[j + 1].sub(&incr[j]);
            out[j] = if phi == 0.0 {
                self.undecay_p(&x)?
            } else {
                self.integ
                    .undecay_damped(&x, &traj[j], phi, |n2| spec.in_p(n2))?
            };
        }
        for (o, qj) in out.iter_mut().zip(&q) {
            o.axpy(1.0, qj);
        }
        Ok(out)
    }

    /// Runs [`GraphSolver::solve_bvp`] over `T₀, 2T₀, 4T₀, …` until two
    /// successive values of `𝕄(u₊)` agree to the tolerance.
    pub fn build_graph_point(&self, u_plus: &SpectralField) -> Result<GraphPoint> {
        let mut t = self.cfg.t0;
        let (mut prev, mut traj) = self.solve_bvp(u_plus, t, None)?;
        let mut ladder = Vec::new();
        if !prev.converged {
            return Ok(prev);
        }
        for _ in 0..self.cfg.max_doublings {
            t *= 2.0;
            if self.ell_n * t > MAX_GROWTH_EXPONENT {
                break;
            }
            let (gp, tr) = self.solve_bvp(u_plus, t, Some(&traj))?;
            let change = self.dist(&gp.m_of_u.sub(&prev.m_of_u))?;
            ladder.push(change);
            let done = gp.converged && change < self.cfg.tol;
            prev = gp;
            traj = tr;
            prev.ladder_history = ladder.clone();
            if !prev.converged {
                return Ok(prev);
            }
            if done {
                prev.residual = prev.residual.max(change);
                return Ok(prev);
            }
        }
        prev.converged = false;
        prev.ladder_history = ladder;
        Ok(prev)
    }

    /// One full step of the flow.
    pub fn vector_field(&self, u: &SpectralField) -> Result<SpectralField> {
        let mut r = self.integ.load(u)?;
        r.axpy(-1.0, &self.op().power(u, 1.0 + self.op().gamma)?);
        let c = self.integ.linear_shift();
        if c != 0.0 {
            r.axpy(-c, &self.op().power(u, self.op().gamma)?);
        }
        Ok(r)
    }
}

const ANDERSON_DEPTH: usize = 6;

/// Anderson mixing of Picard iterates of whole trajectories, with the
/// time-weighted inner product `Σ_j w_j² (x_j, y_j)`.
struct Anderson {
    depth: usize,
    weights: Vec<f64>,
    /// Differences of successive images and residuals.
    dg: Vec<Vec<SpectralField>>,
    df: Vec<Vec<SpectralField>>,
    last: Option<(Vec<SpectralField>, Vec<SpectralField>)>,
}

fn traj_sub(a: &[SpectralField], b: &[SpectralField]) -> Vec<SpectralField> {
    a.iter().zip(b).map(|(x, y)| x.sub(y)).collect()
}

impl Anderson {
    fn new(depth: usize, weights: Vec<f64>) -> Self {
        Anderson {
            depth,
            weights,
            dg: Vec::new(),
            df: Vec::new(),
            last: None,
        }
    }

    fn dot(&self, a: &[SpectralField], b: &[SpectralField]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.weights)
            .map(|((x, y), w)| w * w * x.inner(y))
            .sum()
    }

    /// Next iterate from the current one and its Picard image.
    fn next(&mut self, x: Vec<SpectralField>, g: Vec<SpectralField>) -> Vec<SpectralField> {
        let f = traj_sub(&g, &x);
        if let Some((g0, f0)) = self.last.take() {
            self.dg.push(traj_sub(&g, &g0));
            self.df.push(traj_sub(&f, &f0));
            if self.dg.len() > self.depth {
                self.dg.remove(0);
                self.df.remove(0);
            }
        }
        let k = self.df.len();
        let mut out = g.clone();
        if k > 0 {
            let gram = DMatrix::from_fn(k, k, |i, j| self.dot(&self.df[i], &self.df[j]));
            let rhs = DVector::from_fn(k, |i, _| self.dot(&self.df[i], &f));
            let scale = (0..k).map(|i| gram[(i, i)]).fold(0.0, f64::max);
            let reg = gram + DMatrix::identity(k, k) * (1e-12 * scale);
            match reg.cholesky().map(|c| c.solve(&rhs)) {
                Some(gamma) if gamma.iter().all(|c| c.is_finite()) => {
                    for (i, c) in gamma.iter().enumerate() {
                        for (o, d) in out.iter_mut().zip(&self.dg[i]) {
                            o.axpy(-c, d);
                        }
                    }
                }
                _ => {
                    self.dg.clear();
                    self.df.clear();
                }
            }
        }
        self.last = Some((g, f));
        out
    }
}

/// Something that returns `𝕄(u₊)`.
pub trait GraphMap {
    fn solver(&self) -> &GraphSolver;
    fn graph(&self, u_plus: &SpectralField) -> Result<SpectralField>;
}

/// Direct evaluation at a fixed horizon, warm-started from the previous
/// call.
pub struct PointwiseManifold {
    solver: GraphSolver,
    horizon: f64,
    warm: RefCell<Option<Vec<SpectralField>>>,
}

impl PointwiseManifold {
    pub fn new(solver: GraphSolver, horizon: f64) -> Self {
        PointwiseManifold {
            solver,
            horizon,
            warm: RefCell::new(None),
        }
    }

    /// Picks the horizon by running the `T` ladder at `u_plus`.
    pub fn calibrated(solver: GraphSolver, u_plus: &SpectralField) -> Result<(Self, GraphPoint)> {
        let gp = solver.build_graph_point(u_plus)?;
        if !gp.converged {
            return Err(ImError::Breakdown {
                t: gp.t_used,
                what: "the T ladder did not converge".into(),
            });
        }
        // Both ends of the last ladder rung agree to the tolerance, so the
        // shorter horizon is enough for pointwise evaluation.
        let horizon = if gp.ladder_history.is_empty() {
            gp.t_used
        } else {
            0.5 * gp.t_used
        };
        Ok((PointwiseManifold::new(solver, horizon), gp))
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn point(&self, u_plus: &SpectralField) -> Result<GraphPoint> {
        let warm = self.warm.borrow_mut().take();
        let (gp, traj) = self
            .solver
            .solve_bvp(u_plus, self.horizon, warm.as_deref())?;
        let (gp, traj) = if gp.converged || warm.is_none() {
            (gp, traj)
        } else {
            self.solver.solve_bvp(u_plus, self.horizon, None)?
        };
        if !gp.converged {
            return Err(ImError::Breakdown {
                t: -self.horizon,
                what: format!(
                    "Picard iteration stalled at {:e} after {} sweeps",
                    gp.residual, gp.iterations
                ),
            });
        }
        *self.warm.borrow_mut() = Some(traj);
        Ok(gp)
    }
}

impl GraphMap for PointwiseManifold {
    fn solver(&self) -> &GraphSolver {
        &self.solver
    }

    fn graph(&self, u_plus: &SpectralField) -> Result<SpectralField> {
        Ok(self.point(u_plus)?.m_of_u)
    }
}

/// `𝕄 ≡ Q_N A^{-1} g` for `F ≡ 0`.
pub fn linear_graph(model: &Model, projector: &ProjectorSpec) -> Result<SpectralField> {
    if !model.linear {
        return Err(ImError::invalid("the closed form holds only for F ≡ 0"));
    }
    let g = model.op().power(&model.forcing, -1.0)?;
    Ok(project(&g, Which::Q, projector))
}

/// `-A^{1+γ}u₊ - A^γ P_N F(u₊ + 𝕄(u₊)) + P_N A^γ g`.
pub fn inertial_form_rhs(u_plus: &SpectralField, map: &dyn GraphMap) -> Result<SpectralField> {
    let s = map.solver();
    let lifted = u_plus.add(&map.graph(u_plus)?);
    Ok(s.p_part(&s.vector_field(&lifted)?))
}

/// `‖Q_N S(dt)(u₊ + 𝕄(u₊)) - 𝕄(P_N S(dt)(u₊ + 𝕄(u₊)))‖_{H^{-γ}}`.
pub fn invariance_residual(u_plus: &SpectralField, map: &dyn GraphMap) -> Result<f64> {
    let s = map.solver();
    let next = s.integrator().step(&u_plus.add(&map.graph(u_plus)?))?;
    let back = map.graph(&s.p_part(&next))?;
    s.dist(&s.q_part(&next).sub(&back))
}

#[derive(Clone, Debug, Serialize)]
pub struct TrackingConfig {
    pub t_end: f64,
    /// Distance is sampled every this many steps.
    pub sample_every: usize,
    pub theta_min: f64,
    pub end_tol: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrackingReport {
    pub times: Vec<f64>,
    pub distances: Vec<f64>,
    /// Fitted `d log d / dt` over samples above the solver noise floor.
    pub slope: Option<f64>,
    pub pass: bool,
    pub note: String,
}

/// Distance of a trajectory from the graph, `‖Q_N u(t) - 𝕄(P_N u(t))‖`,
/// and its exponential decay rate. This tests attraction to the manifold;
/// the asymptotic-phase trace itself is not constructed.
pub fn tracking_test(
    u0: &SpectralField,
    map: &dyn GraphMap,
    cfg: &TrackingConfig,
) -> Result<TrackingReport> {
    let s = map.solver();
    let integ = s.integrator();
    let steps = integ.steps_for(cfg.t_end)?;
    let every = cfg.sample_every.max(1);
    let floor = 10.0 * s.config().tol;
    let mut u = u0.clone();
    let (mut times, mut distances) = (Vec::new(), Vec::new());
    for k in 0..=steps {
        if k > 0 {
            u = integ.step(&u)?;
        }
        if k % every == 0 || k == steps {
            let d = s.dist(&s.q_part(&u).sub(&map.graph(&s.p_part(&u))?))?;
            times.push(k as f64 * integ.dt);
            distances.push(d);
        }
    }
    let (ft, fd): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(&distances)
        .filter(|(_, d)| **d > floor)
        .map(|(t, d)| (*t, *d))
        .unzip();
    let end = *distances.last().expect("at least one sample");
    let slope = (ft.len() >= 2).then(|| exp_rate(&ft, &fd));
    let (pass, note) = match slope {
        Some(r) => (
            r <= -cfg.theta_min && end < cfg.end_tol,
            format!("fit over {} samples above {floor:e}", ft.len()),
        ),
        None => (
            end < cfg.end_tol,
            "distance at the solver noise floor throughout".to_string(),
        ),
    };
    Ok(TrackingReport {
        times,
        distances,
        slope,
        pass,
        note,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ReducedReport {
    pub times: Vec<f64>,
    /// `‖P_N u(t) - u₊(t)‖_{H^{-γ}}`.
    pub discrepancy: Vec<f64>,
    pub sup: f64,
    /// `C · (tol + dt²)`.
    pub budget: f64,
    pub pass: bool,
}

/// Integrates the inertial form on `P_N H` with the same exponential step
/// and the full equation from the lifted datum, and compares.
pub fn reduced_vs_full_test(
    u_plus0: &SpectralField,
    horizon: f64,
    map: &dyn GraphMap,
    budget_const: f64,
) -> Result<ReducedReport> {
    let s = map.solver();
    let integ = s.integrator();
    let steps = integ.steps_for(horizon)?;
    let mut full = u_plus0.add(&map.graph(u_plus0)?);
    let mut red = u_plus0.clone();
    let load_p = |x: &SpectralField| -> Result<SpectralField> {
        let lifted = x.add(&map.graph(x)?);
        Ok(s.p_part(&integ.load(&lifted)?))
    };
    let mut times = vec![0.0];
    let mut discrepancy = vec![s.dist(&s.p_part(&full).sub(&red))?];
    for k in 1..=steps {
        full = integ.step(&full)?;
        let n0 = load_p(&red)?;
        let a = integ.propagate(&red, &n0);
        let n1 = load_p(&a)?;
        red = integ.correct(&a, &n1.sub(&n0));
        times.push(k as f64 * integ.dt);
        discrepancy.push(s.dist(&s.p_part(&full).sub(&red))?);
    }
    let sup = discrepancy.iter().cloned().fold(0.0, f64::max);
    let budget = budget_const * (s.config().tol + integ.dt * integ.dt);
    Ok(ReducedReport {
        times,
        discrepancy,
        sup,
        budget,
        pass: sup <= budget,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum InterpRule {
    NearestNeighbor,
}

/// Sampled graph points with nearest-neighbour lookup.
#[derive(Clone, Debug)]
pub struct ManifoldChart {
    pub projector: ProjectorSpec,
    pub op: OperatorSpec,
    pub points: Vec<GraphPoint>,
    pub rule: InterpRule,
    /// Queries farther than this from every sample are re-solved.
    pub radius: f64,
}

/// Real orthonormal basis of `P_N H`.
pub fn p_basis(
    m: usize,
    kind: crate::field::SpaceKind,
    projector: &ProjectorSpec,
) -> Result<Vec<SpectralField>> {
    let mut modes: Vec<ModeVec> = Vec::new();
    for_each_in_window(0, projector.lambda, |n| modes.push(n));
    real_basis(m, kind, &modes)
}

impl ManifoldChart {
    /// Samples a tensor lattice of `per_axis` points in `[-box_radius,
    /// box_radius]` along the first `axes` basis directions of `P_N H`,
    /// plus `cloud` random points in the same box over all directions.
    #[allow(clippy::too_many_arguments)]
    pub fn sample(
        map: &PointwiseManifold,
        axes: usize,
        per_axis: usize,
        box_radius: f64,
        cloud: usize,
        radius: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let s = map.solver();
        let basis = p_basis(s.model().grid_m(), s.model().kind(), s.projector())?;
        let axes = axes.min(basis.len());
        let mut points = Vec::new();
        let ticks: Vec<f64> = if per_axis <= 1 {
            vec![0.0]
        } else {
            (0..per_axis)
                .map(|i| -box_radius + 2.0 * box_radius * i as f64 / (per_axis - 1) as f64)
                .collect()
        };
        let total = ticks.len().pow(axes as u32);
        for mut idx in 0..total {
            let mut u = s.model().zero();
            for e in basis.iter().take(axes) {
                u.axpy(ticks[idx % ticks.len()], e);
                idx /= ticks.len();
            }
            points.push(map.point(&u)?);
        }
        for _ in 0..cloud {
            let mut u = s.model().zero();
            for e in &basis {
                u.axpy(rng.random_range(-box_radius..=box_radius), e);
            }
            points.push(map.point(&u)?);
        }
        Ok(ManifoldChart {
            projector: *s.projector(),
            op: *s.op(),
            points,
            rule: InterpRule::NearestNeighbor,
            radius,
        })
    }

    fn dist(&self, u: &SpectralField) -> f64 {
        self.op
            .sobolev_norm(u, -self.op.gamma)
            .unwrap_or(f64::INFINITY)
    }

    pub fn nearest(&self, u_plus: &SpectralField) -> Option<(&GraphPoint, f64)> {
        self.points
            .iter()
            .map(|p| (p, self.dist(&p.u_plus.sub(u_plus))))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Nearest sample within `radius`, else a direct solve.
    pub fn eval(
        &self,
        u_plus: &SpectralField,
        fallback: &PointwiseManifold,
    ) -> Result<SpectralField> {
        match self.nearest(u_plus) {
            Some((p, d)) if d <= self.radius => Ok(p.m_of_u.clone()),
            _ => fallback.graph(u_plus),
        }
    }
}

/// Largest ratio `‖𝕄(p) - 𝕄(q)‖ / ‖p - q‖` over all pairs of samples.
pub fn lipschitz_estimate(chart: &ManifoldChart) -> f64 {
    let mut best: f64 = 0.0;
    for (i, a) in chart.points.iter().enumerate() {
        for b in &chart.points[i + 1..] {
            let den = chart.dist(&a.u_plus.sub(&b.u_plus));
            if den > 0.0 {
                best = best.max(chart.dist(&a.m_of_u.sub(&b.m_of_u)) / den);
            }
        }
    }
    best
}

#[derive(Clone, Debug, Serialize)]
pub struct DirectionProbe {
    pub hs: Vec<f64>,
    pub remainders: Vec<f64>,
    /// `None` when fewer than two remainders rise above the noise floor.
    pub slope: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SmoothnessReport {
    pub directions: Vec<DirectionProbe>,
    pub min_slope: Option<f64>,
    pub noise_floor: f64,
    pub pass: bool,
    pub note: String,
}

/// Log-log slope of `‖𝕄(p + he) - 𝕄(p) - h D𝕄(p)e‖` against `h`. The
/// derivative is a Richardson combination of centered differences at
/// `h_deriv` and `h_deriv / 2`.
pub fn smoothness_probe(
    map: &PointwiseManifold,
    p: &SpectralField,
    directions: &[SpectralField],
    h_ladder: &[f64],
    h_deriv: f64,
) -> Result<SmoothnessReport> {
    let s = map.solver();
    let floor = 100.0 * s.config().tol;
    let m0 = map.graph(p)?;
    let at = |h: f64, e: &SpectralField| -> Result<SpectralField> {
        let mut x = p.clone();
        x.axpy(h, e);
        map.graph(&x)
    };
    let mut out = Vec::new();
    for e in directions {
        let e = s.p_part(e);
        let central =
            |h: f64| -> Result<SpectralField> { Ok(at(h, &e)?.sub(&at(-h, &e)?).scaled(0.5 / h)) };
        let d1 = central(h_deriv)?;
        let d2 = central(0.5 * h_deriv)?;
        let deriv = d2.scaled(4.0 / 3.0).sub(&d1.scaled(1.0 / 3.0));
        let mut remainders = Vec::new();
        for &h in h_ladder {
            let r = at(h, &e)?.sub(&m0).sub(&deriv.scaled(h));
            remainders.push(s.dist(&r)?);
        }
        let (fh, fr): (Vec<f64>, Vec<f64>) = h_ladder
            .iter()
            .zip(&remainders)
            .filter(|(_, r)| **r > floor)
            .map(|(h, r)| (*h, *r))
            .unzip();
        let slope = (fh.len() >= 2).then(|| loglog_slope(&fh, &fr));
        out.push(DirectionProbe {
            hs: h_ladder.to_vec(),
            remainders,
            slope,
        });
    }
    let slopes: Vec<f64> = out.iter().filter_map(|d| d.slope).collect();
    let min_slope = slopes.iter().cloned().reduce(f64::min);
    let (pass, note) = match min_slope {
        Some(sl) => (
            sl > 1.0,
            format!(
                "{} of {} directions above the noise floor",
                slopes.len(),
                out.len()
            ),
        ),
        None => (
            true,
            "remainder at the noise floor for every h: slope at least the ladder limit".into(),
        ),
    };
    Ok(SmoothnessReport {
        directions: out,
        min_slope,
        noise_floor: floor,
        pass,
        note,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{SpaceKind, C64};
    use crate::nonlinearity::{NonlinearitySpec, Truncation, TruncationParams};
    use crate::random::{random_band_limited, seeded_rng};

    fn forcing(m: usize) -> SpectralField {
        random_band_limited(m, SpaceKind::FullScalar, &mut seeded_rng(11), 12, 1.0)
    }

    fn p_point(m: usize, spec: &ProjectorSpec, seed: u64, size: f64) -> SpectralField {
        let u = random_band_limited(
            m,
            SpaceKind::FullScalar,
            &mut seeded_rng(seed),
            spec.lambda,
            size,
        );
        project(&u, Which::P, spec)
    }

    #[test]
    fn linear_graph_matches_closed_form() {
        let m = 8;
        let spec = ProjectorSpec::new(3, 1, 1).unwrap();
        let model = Model::linear(NonlinearitySpec::rde(vec![]), forcing(m)).unwrap();
        let mut cfg = BvpConfig::new(model.op(), &spec, 0.05);
        cfg.tol = 1e-13;
        let solver = GraphSolver::new(&model, spec, cfg).unwrap();
        let exact = linear_graph(&model, &spec).unwrap();
        assert!(exact.norm() > 1e-3);
        for seed in 0..3 {
            let gp = solver
                .build_graph_point(&p_point(m, &spec, seed, 1.0))
                .unwrap();
            assert!(gp.converged);
            let err = gp.m_of_u.sub(&exact).norm();
            assert!(err < 1e-10, "{err}");
        }
    }

    #[test]
    fn homogeneous_linear_graph_is_zero() {
        let m = 8;
        let spec = ProjectorSpec::new(3, 1, 1).unwrap();
        let model = Model::linear(
            NonlinearitySpec::rde(vec![]),
            SpectralField::zeros(m, SpaceKind::FullScalar),
        )
        .unwrap();
        let solver =
            GraphSolver::new(&model, spec, BvpConfig::new(model.op(), &spec, 0.05)).unwrap();
        let gp = solver
            .build_graph_point(&p_point(m, &spec, 2, 3.0))
            .unwrap();
        assert!(gp.converged);
        assert_eq!(gp.m_of_u.max_abs_coeff(), 0.0);
        let rhs =
            inertial_form_rhs(&gp.u_plus, &PointwiseManifold::new(solver, gp.t_used)).unwrap();
        let expect = model.op().power(&gp.u_plus, 1.0).unwrap().scaled(-1.0);
        assert!(rhs.sub(&expect).max_abs_coeff() < 1e-13);
    }

    fn weak_rde(m: usize, spec: ProjectorSpec) -> Model {
        let params = TruncationParams::from_radii(3.0, 6.0, 12.0);
        let nl = NonlinearitySpec::rde(vec![0.0, 0.0, 0.0, 0.05]);
        Model::new(
            nl,
            Some(Truncation {
                params,
                projector: spec,
            }),
            forcing(m).scaled(0.5),
        )
        .unwrap()
    }

    #[test]
    fn nonlinear_graph_is_invariant_and_attracting() {
        let m = 8;
        let spec = ProjectorSpec::new(7, 1, 1).unwrap();
        let model = weak_rde(m, spec);
        let solver =
            GraphSolver::new(&model, spec, BvpConfig::new(model.op(), &spec, 0.05)).unwrap();
        let u_plus = p_point(m, &spec, 5, 0.5);
        let (map, gp) = PointwiseManifold::calibrated(solver, &u_plus).unwrap();
        assert!(gp.ladder_history.last().unwrap() < &1e-8);
        assert!(gp.m_of_u.norm() > 1e-6);
        let inv = invariance_residual(&u_plus, &map).unwrap();
        assert!(inv < 1e-7, "{inv}");
        let u0 = random_band_limited(m, SpaceKind::FullScalar, &mut seeded_rng(9), 20, 1.0);
        let cfg = TrackingConfig {
            t_end: 1.0,
            sample_every: 4,
            theta_min: 1.0,
            end_tol: 1e-4,
        };
        let rep = tracking_test(&u0, &map, &cfg).unwrap();
        assert!(rep.pass, "{:?} {:?}", rep.slope, rep.distances);
    }

    #[test]
    fn reduced_form_follows_full_flow() {
        let m = 8;
        let spec = ProjectorSpec::new(7, 1, 1).unwrap();
        let model = weak_rde(m, spec);
        let solver =
            GraphSolver::new(&model, spec, BvpConfig::new(model.op(), &spec, 0.05)).unwrap();
        let u_plus = p_point(m, &spec, 6, 0.5);
        let (map, _) = PointwiseManifold::calibrated(solver, &u_plus).unwrap();
        let rep = reduced_vs_full_test(&u_plus, 0.5, &map, 10.0).unwrap();
        assert!(rep.pass, "{} vs {}", rep.sup, rep.budget);
    }

    #[test]
    fn affine_problem_gives_constant_graph_and_zero_lipschitz() {
        let m = 8;
        let spec = ProjectorSpec::new(3, 1, 1).unwrap();
        let model = Model::linear(NonlinearitySpec::rde(vec![]), forcing(m)).unwrap();
        let solver =
            GraphSolver::new(&model, spec, BvpConfig::new(model.op(), &spec, 0.05)).unwrap();
        let (map, _) = PointwiseManifold::calibrated(solver, &p_point(m, &spec, 1, 1.0)).unwrap();
        let chart = ManifoldChart::sample(&map, 2, 3, 1.0, 2, 0.1, &mut seeded_rng(3)).unwrap();
        assert_eq!(chart.points.len(), 11);
        assert!(lipschitz_estimate(&chart) < 1e-8);
        let mut rev = chart.clone();
        rev.points.reverse();
        assert_eq!(lipschitz_estimate(&chart), lipschitz_estimate(&rev));
        let e = p_basis(m, SpaceKind::FullScalar, &spec).unwrap();
        let probe = smoothness_probe(
            &map,
            &chart.points[0].u_plus,
            &e[..2],
            &[0.4, 0.2, 0.1],
            0.05,
        )
        .unwrap();
        assert!(probe.pass);
        assert!(probe.min_slope.is_none());
    }

    #[test]
    fn backward_sweep_rejects_overlong_horizons() {
        let m = 8;
        let spec = ProjectorSpec::new(3, 1, 1).unwrap();
        let model = Model::linear(NonlinearitySpec::rde(vec![]), forcing(m)).unwrap();
        let solver =
            GraphSolver::new(&model, spec, BvpConfig::new(model.op(), &spec, 0.05)).unwrap();
        let mut u = model.zero();
        u.set_pair(0, ModeVec::new(1, 0, 0), C64::new(0.1, 0.0))
            .unwrap();
        assert!(solver.solve_bvp(&u, 1000.0, None).is_err());
        let mut q = model.zero();
        q.set_pair(0, ModeVec::new(2, 1, 0), C64::new(0.1, 0.0))
            .unwrap();
        assert!(solver.solve_bvp(&q, 1.0, None).is_err());
    }
}
