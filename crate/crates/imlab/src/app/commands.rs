//! One function per CLI subcommand. Each writes its artifacts and returns a
//! JSON summary for the terminal.

use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use super::config::ModelConfig;
use super::pipeline::{
    cone_rows, family_monitors, graph_solver, initial_datum, prepare, track_many, verify_cone,
    write_chart, Artifacts, CheckSummary, Scale,
};
use super::snapshot::{snapshot_read, snapshot_write, SnapshotHeader};
use crate::cone::sa_deviation;
use crate::error::{ImError, Result};
use crate::evolution::{write_monitor_csv, Integrator};
use crate::lattice::{check_sa_condition, enumerate_shells, search_admissible, spectral_gaps};
use crate::manifold::{
    lipschitz_estimate, reduced_vs_full_test, GraphMap, ManifoldChart, PointwiseManifold,
};
use crate::random::seeded_rng;

#[derive(Serialize)]
struct ShellRow {
    lambda: u64,
    multiplicity: usize,
}

pub fn spectrum(lambda_max: u64, shift: u8, art: &Artifacts) -> Result<Value> {
    if shift > 1 {
        return Err(ImError::invalid(format!(
            "shift must be 0 or 1, got {shift}"
        )));
    }
    let shells = enumerate_shells(lambda_max, shift);
    let rows: Vec<ShellRow> = shells
        .iter()
        .map(|s| ShellRow {
            lambda: s.lambda,
            multiplicity: s.multiplicity(),
        })
        .collect();
    art.csv("shells.csv", &rows)?;
    let gaps = (lambda_max >= 1).then(|| spectral_gaps(lambda_max));
    Ok(json!({
        "lambda_max": lambda_max,
        "shift": shift,
        "occupied_shells": rows.len(),
        "gaps": gaps,
    }))
}

pub fn admissible(
    k: u64,
    r: u64,
    range: (u64, u64),
    min_gap: Option<u64>,
    art: &Artifacts,
) -> Result<Value> {
    if range.0 > range.1 {
        return Err(ImError::invalid(format!(
            "empty range {}..={}",
            range.0, range.1
        )));
    }
    let list = search_admissible(k, r, range, min_gap);
    let verified = list.iter().all(|&l| check_sa_condition(l, k, r));
    let v = json!({
        "k": k,
        "r": r,
        "range": [range.0, range.1],
        "min_gap": min_gap,
        "found": list.len(),
        "admissible": list,
        "reverified": verified,
    });
    art.json("admissible.json", &v)?;
    Ok(v)
}

/// Integrates the untruncated model over `[0, t_max]`.
pub fn simulate(cfg: &ModelConfig, art: &Artifacts) -> Result<Value> {
    let mut plain = cfg.clone();
    plain.truncation = None;
    let model = plain.model()?;
    let integ = Integrator::new(&model, cfg.dt)?;
    let steps = integ.steps_for(cfg.t_max)?;
    let every = (steps / 100).max(1);
    let u0 = initial_datum(cfg, &mut seeded_rng(cfg.seed.wrapping_add(1)), 1.0);
    let traj = integ.run(&u0, steps, every, every)?;
    let mut buf = Vec::new();
    write_monitor_csv(&traj.monitors, &mut buf)?;
    art.text(
        "monitors.csv",
        std::str::from_utf8(&buf).map_err(|e| ImError::Format(e.to_string()))?,
    )?;
    let t = *traj.times.last().expect("nonempty trajectory");
    snapshot_write(
        &art.path("final_state.imlb"),
        &SnapshotHeader::new(cfg.equation, model.op(), cfg.grid_m, t),
        traj.last(),
    )?;
    let checks: Vec<CheckSummary> = family_monitors(&model, &traj)?
        .iter()
        .map(CheckSummary::from)
        .collect();
    Ok(json!({ "steps": steps, "t": t, "monitors": checks }))
}

fn state_or_default(
    cfg: &ModelConfig,
    state: Option<&Path>,
) -> Result<crate::field::SpectralField> {
    match state {
        Some(p) => {
            let (h, u) = snapshot_read(p)?;
            if h.family != cfg.equation || h.grid_m as usize != cfg.grid_m {
                return Err(ImError::mismatch(format!(
                    "snapshot holds {:?} on grid {}, config wants {:?} on grid {}",
                    h.family, h.grid_m, cfg.equation, cfg.grid_m
                )));
            }
            Ok(u)
        }
        None => Ok(initial_datum(
            cfg,
            &mut seeded_rng(cfg.seed.wrapping_add(1)),
            1.0,
        )),
    }
}

pub fn verify_cone_cmd(
    cfg: &ModelConfig,
    scale: &Scale,
    state: Option<&Path>,
    art: &Artifacts,
) -> Result<Value> {
    let prep = prepare(cfg, scale)?;
    let u = state_or_default(cfg, state)?;
    let v = initial_datum(cfg, &mut seeded_rng(cfg.seed.wrapping_add(2)), 1.0);
    let (summary, rep) = verify_cone(&prep, &u, &v, scale.cone_steps, scale.lipschitz_samples)?;
    art.csv("cone.csv", &cone_rows(&rep))?;
    art.json("cone.json", &summary)?;
    Ok(serde_json::to_value(summary)?)
}

pub fn sa_deviation_cmd(
    cfg: &ModelConfig,
    scale: &Scale,
    state: Option<&Path>,
    art: &Artifacts,
) -> Result<Value> {
    let prep = prepare(cfg, scale)?;
    let u = state_or_default(cfg, state)?;
    let sa = sa_deviation(&u, &prep.projector, &prep.truncated)?;
    let v = json!({ "projector": prep.projector, "deviation": sa });
    art.json("sa_deviation.json", &v)?;
    Ok(v)
}

fn calibrated(
    cfg: &ModelConfig,
    scale: &Scale,
) -> Result<(PointwiseManifold, crate::manifold::GraphPoint)> {
    let prep = prepare(cfg, scale)?;
    let u = initial_datum(cfg, &mut seeded_rng(cfg.seed.wrapping_add(1)), 1.0);
    let solver = graph_solver(&prep, scale.bvp_steps_per_t0, &u)?;
    let u_plus = solver.p_part(&u);
    PointwiseManifold::calibrated(solver, &u_plus)
}

pub fn build_im(cfg: &ModelConfig, scale: &Scale, art: &Artifacts) -> Result<Value> {
    let (map, gp) = calibrated(cfg, scale)?;
    let box_radius = 0.5;
    let mut rng = seeded_rng(cfg.seed.wrapping_add(3));
    let chart = ManifoldChart::sample(
        &map,
        2,
        scale.chart_per_axis,
        box_radius,
        0,
        box_radius,
        &mut rng,
    )?;
    write_chart(&art.path("chart.imlb"), &chart, cfg.equation, cfg.grid_m)?;
    let v = json!({
        "horizon": map.horizon(),
        "calibration_t": gp.t_used,
        "ladder_history": gp.ladder_history,
        "points": chart.points.len(),
        "lipschitz": lipschitz_estimate(&chart),
    });
    art.json("build_im.json", &v)?;
    Ok(v)
}

pub fn track(cfg: &ModelConfig, scale: &Scale, art: &Artifacts) -> Result<Value> {
    let (map, _) = calibrated(cfg, scale)?;
    let (reps, rows) = track_many(&map, cfg, scale.track_trials, scale.track_samples, 0.5)?;
    art.csv("tracking.csv", &rows)?;
    let slopes: Vec<Option<f64>> = reps.iter().map(|r| r.slope).collect();
    let v =
        json!({ "trials": reps.len(), "slopes": slopes, "all_pass": reps.iter().all(|r| r.pass) });
    art.json("tracking.json", &v)?;
    Ok(v)
}

pub fn reduce(cfg: &ModelConfig, scale: &Scale, steps: usize, art: &Artifacts) -> Result<Value> {
    let (map, gp) = calibrated(cfg, scale)?;
    let horizon = steps as f64 * map.solver().config().dt;
    let rep = reduced_vs_full_test(&gp.u_plus, horizon, &map, 100.0)?;
    art.json("reduce.json", &rep)?;
    Ok(json!({ "sup": rep.sup, "budget": rep.budget, "pass": rep.pass }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_commands_report_and_persist() {
        let dir = std::env::temp_dir().join(format!("imlab-cmd-{}", std::process::id()));
        let art = Artifacts::new(&dir).unwrap();
        let v = spectrum(30, 0, &art).unwrap();
        assert_eq!(v["gaps"]["max_spacing"], 2);
        let csv = std::fs::read_to_string(dir.join("shells.csv")).unwrap();
        assert!(csv.starts_with("lambda,multiplicity\n0,1\n1,6\n2,12\n"));
        assert!(csv.contains("\n7,0\n"));
        let v = admissible(1, 1, (1, 50), None, &art).unwrap();
        assert_eq!(v["admissible"][0], 7);
        assert_eq!(v["reverified"], true);
        let none = admissible(1, 1, (1, 6), None, &art).unwrap();
        assert_eq!(none["found"], 0);
        assert!(admissible(1, 1, (9, 3), None, &art).is_err());
        assert!(spectrum(5, 2, &art).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
