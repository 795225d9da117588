//! The end-to-end chain behind `imlab preset`: absorbing radii, truncation,
//! admissible cut, monitors, cone verification, graph construction and
//! tracking. Every random draw comes from the config seed, and nothing
//! time-dependent reaches the artifacts, so reruns are byte-identical.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::ModelConfig;
use super::presets::preset_config;
use super::snapshot::{snapshot_write, write_atomic, write_many, SnapshotHeader};
use crate::cone::{sa_deviation, strong_cone_check, ConeContext, ConeReport, SaDeviation};
use crate::error::{ImError, Result};
use crate::evolution::{
    ch_mass, lyapunov_check, measure_absorbing_radii, nse_energy, write_monitor_csv,
    AbsorbingRadii, CheckReport, Integrator, TrajectorySegment,
};
use crate::field::SpectralField;
use crate::lattice::{gap_at, search_admissible, ProjectorSpec, TheoremReport};
use crate::manifold::{
    invariance_residual, lipschitz_estimate, shifted_rates, tracking_test, BvpConfig, GraphMap,
    GraphSolver, ManifoldChart, PointwiseManifold, TrackingConfig, TrackingReport,
};
use crate::nonlinearity::{measure_lipschitz, Family, Model, Truncation, TruncationParams};
use crate::random::{random_field, seeded_rng, ImRng};

/// Run lengths and sample counts for one pipeline execution.
#[derive(Clone, Debug, Serialize)]
pub struct Scale {
    pub grid_m: usize,
    pub ensemble: usize,
    pub burn_in: f64,
    pub radius_horizon: f64,
    /// Length of the monitored run of the untruncated model.
    pub monitor_t: f64,
    pub lipschitz_samples: usize,
    pub cone_steps: usize,
    /// BVP step as a fraction of the first ladder horizon.
    pub bvp_steps_per_t0: usize,
    pub chart_per_axis: usize,
    pub track_trials: usize,
    pub track_samples: usize,
}

impl Scale {
    pub fn quick() -> Self {
        Scale {
            grid_m: 16,
            ensemble: 2,
            burn_in: 1.0,
            radius_horizon: 0.1,
            monitor_t: 0.2,
            lipschitz_samples: 8,
            cone_steps: 20,
            bvp_steps_per_t0: 10,
            chart_per_axis: 3,
            track_trials: 1,
            track_samples: 4,
        }
    }

    pub fn full() -> Self {
        Scale {
            grid_m: 32,
            ensemble: 6,
            burn_in: 2.0,
            radius_horizon: 1.0,
            monitor_t: 1.0,
            lipschitz_samples: 64,
            cone_steps: 200,
            bvp_steps_per_t0: 50,
            chart_per_axis: 5,
            track_trials: 10,
            track_samples: 8,
        }
    }
}

/// A directory that receives files whole or not at all.
pub struct Artifacts {
    dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Artifacts { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        let p = self.path(name);
        write_atomic(&p, text.as_bytes())?;
        Ok(p)
    }

    pub fn text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(name);
        write_atomic(&p, text.as_bytes())?;
        Ok(p)
    }

    pub fn csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(|e| ImError::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| ImError::Format(e.to_string()))?;
        let p = self.path(name);
        write_atomic(&p, &bytes)?;
        Ok(p)
    }
}

/// Seeded initial data with `H`-norm `norm` and spectrum `∝ (1+|n|²)^{-3/2}`.
pub fn initial_datum(cfg: &ModelConfig, rng: &mut ImRng, norm: f64) -> SpectralField {
    let mut u = random_field(cfg.grid_m, cfg.equation.space_kind(), rng, |n2| {
        (1.0 + n2).powf(-1.5)
    });
    u.zero_nyquist();
    let s = u.norm();
    if s > 0.0 {
        u.scale(norm / s);
    }
    u
}

/// Smallest `(k = 1, r = 1)` admissible cut whose annulus fits on the grid.
pub fn pick_projector(cfg: &ModelConfig) -> Result<(ProjectorSpec, Vec<u64>)> {
    let h = (cfg.grid_m / 2) as u64 - 1;
    let top = (h * h).saturating_sub(1);
    let list = search_admissible(1, 1, (1, top), None);
    let lambda = *list.first().ok_or_else(|| {
        ImError::invalid(format!(
            "no admissible cut with k=1, r=1 fits grid {}",
            cfg.grid_m
        ))
    })?;
    Ok((ProjectorSpec::new(lambda, 1, cfg.shift())?, list))
}

/// The untruncated model plus everything the truncated one needs; blocks
/// present in the config are used as given, the rest are measured.
pub struct Prepared {
    pub config: ModelConfig,
    pub base: Model,
    pub radii: Option<AbsorbingRadii>,
    pub params: TruncationParams,
    pub projector: ProjectorSpec,
    pub admissible: Vec<u64>,
    pub truncated: Model,
}

pub fn prepare(cfg: &ModelConfig, scale: &Scale) -> Result<Prepared> {
    let base = {
        let mut plain = cfg.clone();
        plain.truncation = None;
        plain.model().map_err(|e| e.at_stage("config"))?
    };
    let (radii, params) = match cfg.truncation {
        Some(p) => (None, p),
        None => {
            let mut rng = seeded_rng(cfg.seed);
            let ens: Vec<SpectralField> = (0..scale.ensemble)
                .map(|_| initial_datum(cfg, &mut rng, 1.0))
                .collect();
            let r = measure_absorbing_radii(
                &base,
                &ens,
                scale.burn_in,
                scale.radius_horizon,
                cfg.dt,
                TruncationParams::DEFAULT_S,
            )
            .map_err(|e| e.at_stage("radii"))?;
            let p = TruncationParams::from_radii(r.h, r.h2, r.hs);
            p.validate().map_err(|e| e.at_stage("truncation"))?;
            (Some(r), p)
        }
    };
    let (projector, admissible) = match cfg.projector {
        Some(p) => (p, vec![p.lambda]),
        None => pick_projector(cfg).map_err(|e| e.at_stage("lattice"))?,
    };
    let truncated = Model::new(
        base.nl.clone(),
        Some(Truncation { params, projector }),
        base.forcing.clone(),
    )
    .map_err(|e| e.at_stage("truncation"))?;
    let mut config = cfg.clone();
    config.truncation = Some(params);
    config.projector = Some(projector);
    Ok(Prepared {
        config,
        base,
        radii,
        params,
        projector,
        admissible,
        truncated,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckSummary {
    pub name: &'static str,
    pub pass: bool,
    pub fitted: Option<f64>,
    pub note: String,
}

impl From<&CheckReport> for CheckSummary {
    fn from(r: &CheckReport) -> Self {
        CheckSummary {
            name: r.name,
            pass: r.pass,
            fitted: r.fitted,
            note: r.note.clone(),
        }
    }
}

/// Family-appropriate monitors on a stored trajectory.
pub fn family_monitors(model: &Model, traj: &TrajectorySegment) -> Result<Vec<CheckReport>> {
    Ok(match model.nl.family {
        Family::Rde => vec![lyapunov_check(model, traj)?],
        Family::Ch => vec![ch_mass(traj), lyapunov_check(model, traj)?],
        Family::Nse => vec![nse_energy(model, traj)?],
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ConeSummary {
    pub lipschitz: f64,
    pub averaging: SaDeviation,
    pub theta: f64,
    pub theorem: TheoremReport,
    pub pass: bool,
    pub worst_slack: f64,
    pub worst_time: f64,
    pub alpha_range: (f64, f64),
}

#[derive(Clone, Debug, Serialize)]
pub struct ConeRow {
    pub t: f64,
    pub slack: f64,
    pub tolerance: f64,
}

pub fn cone_rows(r: &ConeReport) -> Vec<ConeRow> {
    r.times
        .iter()
        .zip(&r.slack)
        .zip(&r.tolerance)
        .map(|((t, s), tol)| ConeRow {
            t: *t,
            slack: *s,
            tolerance: *tol,
        })
        .collect()
}

/// Lipschitz constant, averaging deviation at `u`, theorem constants with
/// `θ` the gap at the cut, and the strong cone inequality along the tangent
/// flow from `(u, v)`.
pub fn verify_cone(
    prep: &Prepared,
    u: &SpectralField,
    v: &SpectralField,
    steps: usize,
    samples: usize,
) -> Result<(ConeSummary, ConeReport)> {
    let model = &prep.truncated;
    let l = measure_lipschitz(model, samples, prep.config.seed)?;
    let sa = sa_deviation(u, &prep.projector, model)?;
    let theta = gap_at(prep.projector.lambda) as f64;
    let (ctx, theorem) =
        ConeContext::from_theorem(*model.op(), prep.projector, theta, sa.delta_est, l);
    let integ = Integrator::new(model, prep.config.dt)?;
    let (us, vs) = integ.run_with_tangent(u, v, steps)?;
    let rep = strong_cone_check(&us, &vs, &ctx, model)?;
    let summary = ConeSummary {
        lipschitz: l,
        averaging: sa,
        theta,
        theorem,
        pass: rep.pass,
        worst_slack: rep.worst_slack,
        worst_time: rep.worst_time,
        alpha_range: rep.alpha_range,
    };
    Ok((summary, rep))
}

/// A graph solver whose step is `T₀ / per_t0`, splitting off the average
/// of `F'` at `base` into the linear part.
pub fn graph_solver(prep: &Prepared, per_t0: usize, base: &SpectralField) -> Result<GraphSolver> {
    let op = prep.truncated.op();
    let c = prep.truncated.average(base)?;
    let (ln, ln1) = shifted_rates(op, &prep.projector, c);
    let dt = 5.0 / (ln1 - ln) / per_t0.max(1) as f64;
    GraphSolver::new(
        &prep.truncated,
        prep.projector,
        BvpConfig::with_linear_shift(op, &prep.projector, dt, c),
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct ManifoldSummary {
    pub bvp: BvpConfig,
    pub t_used: f64,
    pub horizon: f64,
    pub iterations: usize,
    pub residual: f64,
    pub ladder_history: Vec<f64>,
    pub invariance_residual: f64,
    pub chart_points: usize,
    pub chart_lipschitz: f64,
}

/// Stores a chart as alternating `u₊`, `𝕄(u₊)` snapshots, `t` holding the
/// horizon of each solve.
pub fn write_chart(path: &Path, chart: &ManifoldChart, family: Family, m: usize) -> Result<()> {
    let headers: Vec<SnapshotHeader> = chart
        .points
        .iter()
        .map(|p| SnapshotHeader::new(family, &chart.op, m, p.t_used))
        .collect();
    let items: Vec<(SnapshotHeader, &SpectralField)> = chart
        .points
        .iter()
        .zip(&headers)
        .flat_map(|(p, h)| [(*h, &p.u_plus), (*h, &p.m_of_u)])
        .collect();
    write_many(path, &items)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrackingRow {
    pub trial: usize,
    pub t: f64,
    pub distance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrackingSummary {
    pub trial: usize,
    pub slope: Option<f64>,
    pub final_distance: f64,
    pub pass: bool,
    pub note: String,
}

/// Distance-to-graph decay from `trials` seeded initial data.
pub fn track_many(
    map: &dyn GraphMap,
    cfg: &ModelConfig,
    trials: usize,
    samples: usize,
    norm: f64,
) -> Result<(Vec<TrackingReport>, Vec<TrackingRow>)> {
    let dt = map.solver().config().dt;
    let tc = TrackingConfig {
        t_end: samples as f64 * dt,
        sample_every: 1,
        theta_min: 0.0,
        end_tol: f64::INFINITY,
    };
    let mut rng = seeded_rng(cfg.seed.wrapping_add(0x7a11));
    let mut reps = Vec::new();
    let mut rows = Vec::new();
    for trial in 0..trials {
        let u0 = initial_datum(cfg, &mut rng, norm);
        let r = tracking_test(&u0, map, &tc)?;
        rows.extend(r.times.iter().zip(&r.distances).map(|(t, d)| TrackingRow {
            trial,
            t: *t,
            distance: *d,
        }));
        reps.push(r);
    }
    Ok((reps, rows))
}

#[derive(Clone, Debug, Serialize)]
pub struct PresetSummary {
    pub preset: String,
    pub family: Family,
    pub scale: Scale,
    pub radii: Option<AbsorbingRadii>,
    pub truncation: TruncationParams,
    pub projector: ProjectorSpec,
    pub admissible: Vec<u64>,
    pub monitors: Vec<CheckSummary>,
    pub cone: ConeSummary,
    pub manifold: ManifoldSummary,
    pub tracking: Vec<TrackingSummary>,
}

/// Runs the named preset at `scale`, writing artifacts under `out/<name>/`.
pub fn run_preset(
    name: &str,
    scale: &Scale,
    out: &Path,
    seed: Option<u64>,
) -> Result<PresetSummary> {
    let mut cfg = preset_config(name).map_err(|e| e.at_stage("config"))?;
    cfg.grid_m = scale.grid_m;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.output_dir = out.join(name);
    cfg.validate().map_err(|e| e.at_stage("config"))?;
    let art = Artifacts::new(&cfg.output_dir).map_err(|e| e.at_stage("artifacts"))?;
    run_pipeline(name, &cfg, scale, &art)
}

pub fn run_pipeline(
    name: &str,
    cfg: &ModelConfig,
    scale: &Scale,
    art: &Artifacts,
) -> Result<PresetSummary> {
    let prep = prepare(cfg, scale)?;
    // Stored relative to itself so that the file does not depend on where
    // the run was written.
    let mut stored = prep.config.clone();
    stored.output_dir = PathBuf::from(".");
    art.text("config.json", &(stored.normal_form()? + "\n"))
        .map_err(|e| e.at_stage("artifacts"))?;

    // Monitors run on the untruncated model.
    let (monitors, u_att) = {
        let stage = |e: ImError| e.at_stage("monitors");
        let integ = Integrator::new(&prep.base, cfg.dt).map_err(stage)?;
        let steps = integ.steps_for(scale.monitor_t).map_err(stage)?;
        let every = (steps / 20).max(1);
        let mut rng = seeded_rng(cfg.seed.wrapping_add(1));
        let u0 = initial_datum(cfg, &mut rng, 1.0);
        let traj = integ.run(&u0, steps, every, every).map_err(stage)?;
        let mut buf = Vec::new();
        write_monitor_csv(&traj.monitors, &mut buf).map_err(stage)?;
        write_atomic(&art.path("monitors.csv"), &buf).map_err(stage)?;
        let last = traj.last().clone();
        let header = SnapshotHeader::new(
            cfg.equation,
            prep.base.op(),
            cfg.grid_m,
            *traj.times.last().unwrap(),
        );
        snapshot_write(&art.path("final_state.imlb"), &header, &last).map_err(stage)?;
        let checks = family_monitors(&prep.base, &traj).map_err(stage)?;
        (
            checks.iter().map(CheckSummary::from).collect::<Vec<_>>(),
            last,
        )
    };

    let cone = {
        let stage = |e: ImError| e.at_stage("cone");
        let mut rng = seeded_rng(cfg.seed.wrapping_add(2));
        let v0 = initial_datum(cfg, &mut rng, 1.0);
        let (summary, rep) = verify_cone(
            &prep,
            &u_att,
            &v0,
            scale.cone_steps,
            scale.lipschitz_samples,
        )
        .map_err(stage)?;
        art.csv("cone.csv", &cone_rows(&rep)).map_err(stage)?;
        summary
    };

    let (manifold, map) = {
        let stage = |e: ImError| e.at_stage("manifold");
        let solver = graph_solver(&prep, scale.bvp_steps_per_t0, &u_att).map_err(stage)?;
        let bvp = solver.config().clone();
        let u_plus = solver.p_part(&u_att);
        let (map, gp) = PointwiseManifold::calibrated(solver, &u_plus).map_err(stage)?;
        let inv = invariance_residual(&u_plus, &map).map_err(stage)?;
        let box_radius = 0.5 * u_plus.norm().max(0.1);
        let mut rng = seeded_rng(cfg.seed.wrapping_add(3));
        let chart = ManifoldChart::sample(
            &map,
            1,
            scale.chart_per_axis,
            box_radius,
            0,
            box_radius,
            &mut rng,
        )
        .map_err(stage)?;
        write_chart(&art.path("chart.imlb"), &chart, cfg.equation, cfg.grid_m).map_err(stage)?;
        let summary = ManifoldSummary {
            bvp,
            t_used: gp.t_used,
            horizon: map.horizon(),
            iterations: gp.iterations,
            residual: gp.residual,
            ladder_history: gp.ladder_history.clone(),
            invariance_residual: inv,
            chart_points: chart.points.len(),
            chart_lipschitz: lipschitz_estimate(&chart),
        };
        (summary, map)
    };

    let tracking = {
        let stage = |e: ImError| e.at_stage("tracking");
        let (reps, rows) =
            track_many(&map, cfg, scale.track_trials, scale.track_samples, 0.5).map_err(stage)?;
        art.csv("tracking.csv", &rows).map_err(stage)?;
        reps.iter()
            .enumerate()
            .map(|(trial, r)| TrackingSummary {
                trial,
                slope: r.slope,
                final_distance: *r.distances.last().unwrap_or(&f64::NAN),
                pass: r.pass,
                note: r.note.clone(),
            })
            .collect()
    };

    let summary = PresetSummary {
        preset: name.to_string(),
        family: cfg.equation,
        scale: scale.clone(),
        radii: prep.radii,
        truncation: prep.params,
        projector: prep.projector,
        admissible: prep.admissible.clone(),
        monitors,
        cone,
        manifold,
        tracking,
    };
    art.json("summary.json", &summary)
        .map_err(|e| e.at_stage("artifacts"))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(tag: &str) -> PathBuf {
        std::env::temp_dir().join(format!("imlab-pipeline-{tag}-{}", std::process::id()))
    }

    fn tiny() -> Scale {
        Scale {
            grid_m: 8,
            monitor_t: 0.1,
            ..Scale::quick()
        }
    }

    #[test]
    fn rde_chain_completes_and_repeats_exactly() {
        let dir = tmp("rde");
        let a = run_preset("rde-cubic", &tiny(), &dir.join("a"), None).unwrap();
        run_preset("rde-cubic", &tiny(), &dir.join("b"), None).unwrap();
        assert_eq!(a.projector.lambda, 7);
        assert!(a.monitors.iter().all(|m| m.pass));
        assert!(a.tracking.iter().all(|t| t.slope.is_some_and(|s| s < 0.0)));
        for f in [
            "config.json",
            "monitors.csv",
            "cone.csv",
            "tracking.csv",
            "chart.imlb",
            "final_state.imlb",
            "summary.json",
        ] {
            let x = std::fs::read(dir.join("a/rde-cubic").join(f)).unwrap();
            let y = std::fs::read(dir.join("b/rde-cubic").join(f)).unwrap();
            assert!(!x.is_empty() && x == y, "{f} differs between runs");
        }
        let cfg = super::super::config::load_config(&dir.join("a/rde-cubic/config.json")).unwrap();
        assert_eq!(cfg.projector, Some(a.projector));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn failures_name_their_stage() {
        let err = run_preset("burgers", &tiny(), &tmp("none"), None).unwrap_err();
        assert!(
            matches!(
                err,
                ImError::Stage {
                    stage: "config",
                    ..
                }
            ),
            "{err}"
        );
        let dir = tmp("small");
        let small = Scale {
            grid_m: 6,
            ..tiny()
        };
        let err = run_preset("rde-cubic", &small, &dir, None).unwrap_err();
        assert!(
            matches!(
                err,
                ImError::Stage {
                    stage: "lattice",
                    ..
                }
            ),
            "{err}"
        );
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
