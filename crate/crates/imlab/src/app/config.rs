//! Strict JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ImError, Result};
use crate::field::{OperatorSpec, SpectralField, C64};
use crate::lattice::{ModeVec, ProjectorSpec};
use crate::nonlinearity::{
    check_dissipative_poly, Family, Model, NonlinearitySpec, Truncation, TruncationParams,
};
use crate::random::{random_field, seeded_rng};

/// One explicitly forced Fourier mode; its conjugate partner is filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcedMode {
    #[serde(default)]
    pub component: usize,
    pub mode: [i64; 3],
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ForcingSpec {
    Zero {},
    Modes {
        modes: Vec<ForcedMode>,
    },
    /// Seeded Gaussian amplitudes `∝ (1 + |n|²)^{-decay/2}` on
    /// `|n|² ≤ max_n2`, rescaled to `‖g‖_H = norm`.
    Random {
        max_n2: u64,
        norm: f64,
        #[serde(default)]
        decay: f64,
        /// Defaults to the config seed.
        #[serde(default)]
        seed: Option<u64>,
    },
}

impl Default for ForcingSpec {
    fn default() -> Self {
        ForcingSpec::Random {
            max_n2: 4,
            norm: 1.0,
            decay: 0.0,
            seed: None,
        }
    }
}

fn default_alpha() -> f64 {
    1.0
}
fn default_grid() -> usize {
    32
}
fn default_dt() -> f64 {
    1e-3
}
fn default_t_max() -> f64 {
    1.0
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub equation: Family,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub gamma_bar: f64,
    #[serde(default = "default_alpha")]
    pub alpha_filter: f64,
    /// `f(u) = Σ poly[i] uⁱ` for the scalar families.
    #[serde(default)]
    pub poly: Vec<f64>,
    #[serde(default)]
    pub forcing: ForcingSpec,
    #[serde(default = "default_grid")]
    pub grid_m: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default)]
    pub truncation: Option<TruncationParams>,
    #[serde(default)]
    pub projector: Option<ProjectorSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

impl ModelConfig {
    /// A config with defaults for everything but the family.
    pub fn for_family(equation: Family) -> Self {
        ModelConfig {
            equation,
            gamma: 0.0,
            gamma_bar: 0.0,
            alpha_filter: default_alpha(),
            poly: Vec::new(),
            forcing: ForcingSpec::default(),
            grid_m: default_grid(),
            dt: default_dt(),
            t_max: default_t_max(),
            truncation: None,
            projector: None,
            seed: 0,
            output_dir: default_out(),
        }
    }

    pub fn shift(&self) -> u8 {
        match self.equation {
            Family::Rde => 1,
            _ => 0,
        }
    }

    /// Every violated invariant, one message each.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let bad = |errs: &mut Vec<String>, cond: bool, msg: String| {
            if cond {
                errs.push(msg);
            }
        };
        let (g, gb) = (self.gamma, self.gamma_bar);
        bad(
            &mut errs,
            !g.is_finite() || !gb.is_finite(),
            "gamma and gamma_bar must be finite".into(),
        );
        match self.equation {
            Family::Rde => {
                bad(
                    &mut errs,
                    g != 0.0,
                    format!("rde fixes gamma = 0 (A = 1 - Δ), got {g}"),
                );
                bad(
                    &mut errs,
                    gb != 0.0,
                    format!("rde has no gamma_bar, got {gb}"),
                );
            }
            Family::Ch => {
                bad(
                    &mut errs,
                    !(g > 0.0),
                    format!("ch requires gamma > 0, got {g}"),
                );
                bad(
                    &mut errs,
                    gb != 0.0,
                    format!("ch has no gamma_bar, got {gb}"),
                );
            }
            Family::Nse => {
                bad(
                    &mut errs,
                    !(0.0..=0.5).contains(&g),
                    format!("nse requires gamma in [0, 1/2], got {g}"),
                );
                bad(
                    &mut errs,
                    (g + gb - 0.5).abs() > 1e-12,
                    format!("nse requires gamma + gamma_bar = 1/2, got {}", g + gb),
                );
                bad(
                    &mut errs,
                    2.0 * g + gb < 0.5 - 1e-12,
                    format!(
                        "nse requires 2 gamma + gamma_bar >= 1/2, got {}",
                        2.0 * g + gb
                    ),
                );
                bad(
                    &mut errs,
                    !(self.alpha_filter > 0.0),
                    format!("nse needs alpha_filter > 0, got {}", self.alpha_filter),
                );
                bad(
                    &mut errs,
                    !self.poly.is_empty(),
                    "nse takes no polynomial".into(),
                );
            }
        }
        if self.equation != Family::Nse {
            if let Err(e) = check_dissipative_poly(&self.poly) {
                errs.push(e.to_string());
            }
        }
        let m = self.grid_m;
        bad(
            &mut errs,
            m < 4 || m % 2 == 1,
            format!("grid_m must be even and at least 4, got {m}"),
        );
        bad(
            &mut errs,
            !(self.dt > 0.0 && self.dt.is_finite()),
            format!("dt must be positive, got {}", self.dt),
        );
        bad(
            &mut errs,
            !(self.t_max >= 0.0 && self.t_max.is_finite()),
            format!("t_max must be nonnegative, got {}", self.t_max),
        );
        if let Some(t) = &self.truncation {
            if let Err(e) = t.validate() {
                errs.push(format!("truncation: {e}"));
            }
        }
        if let Some(p) = &self.projector {
            if let Err(e) = p.validate() {
                errs.push(format!("projector: {e}"));
            }
            if p.shift != self.shift() {
                errs.push(format!(
                    "projector shift must be {} for {:?}, got {}",
                    self.shift(),
                    self.equation,
                    p.shift
                ));
            }
        }
        let comps = self.equation.space_kind().components();
        match &self.forcing {
            ForcingSpec::Zero {} => {}
            ForcingSpec::Modes { modes } => {
                for fm in modes {
                    let h = (m / 2) as i64;
                    if fm.mode.iter().any(|c| c.abs() >= h) {
                        errs.push(format!(
                            "forced mode {:?} does not fit on grid {m}",
                            fm.mode
                        ));
                    }
                    if fm.component >= comps {
                        errs.push(format!(
                            "forced component {} out of range (fields have {comps})",
                            fm.component
                        ));
                    }
                    if !(fm.re.is_finite() && fm.im.is_finite()) {
                        errs.push(format!(
                            "forced mode {:?} has a non-finite amplitude",
                            fm.mode
                        ));
                    }
                }
            }
            ForcingSpec::Random { norm, decay, .. } => {
                bad(
                    &mut errs,
                    !(*norm >= 0.0 && norm.is_finite()),
                    format!("forcing norm must be nonnegative, got {norm}"),
                );
                bad(
                    &mut errs,
                    !decay.is_finite(),
                    "forcing decay must be finite".into(),
                );
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.diagnostics();
        if d.is_empty() {
            Ok(())
        } else {
            Err(ImError::Config(d))
        }
    }

    pub fn nonlinearity(&self) -> NonlinearitySpec {
        let mut nl = match self.equation {
            Family::Rde => NonlinearitySpec::rde(self.poly.clone()),
            Family::Ch => NonlinearitySpec::ch(self.poly.clone(), self.gamma),
            Family::Nse => NonlinearitySpec::nse(self.gamma, self.gamma_bar, self.alpha_filter),
        };
        nl.op.alpha_filter = self.alpha_filter;
        nl
    }

    pub fn operator(&self) -> OperatorSpec {
        self.nonlinearity().op
    }

    pub fn forcing_field(&self) -> Result<SpectralField> {
        let kind = self.equation.space_kind();
        let m = self.grid_m;
        let mut g = match &self.forcing {
            ForcingSpec::Zero {} => SpectralField::zeros(m, kind),
            ForcingSpec::Modes { modes } => {
                let mut g = SpectralField::zeros(m, kind);
                for fm in modes {
                    let n = ModeVec::new(fm.mode[0], fm.mode[1], fm.mode[2]);
                    let z = C64::new(fm.re, fm.im);
                    g.set_pair(fm.component, n, g.coeff(fm.component, n) + z)?;
                }
                g.enforce_kind();
                g
            }
            ForcingSpec::Random {
                max_n2,
                norm,
                decay,
                seed,
            } => {
                let mut rng = seeded_rng(seed.unwrap_or(self.seed));
                let cap = *max_n2 as f64;
                let mut g = random_field(m, kind, &mut rng, |n2| {
                    if n2 <= cap {
                        (1.0 + n2).powf(-decay / 2.0)
                    } else {
                        0.0
                    }
                });
                let s = g.norm();
                if s > 0.0 {
                    g.scale(norm / s);
                }
                g
            }
        };
        g.zero_nyquist();
        Ok(g)
    }

    /// The model, truncated when a truncation block and a projector are
    /// both present.
    pub fn model(&self) -> Result<Model> {
        self.validate()?;
        let trunc = match (&self.truncation, &self.projector) {
            (Some(params), Some(projector)) => Some(Truncation {
                params: *params,
                projector: *projector,
            }),
            _ => None,
        };
        Model::new(self.nonlinearity(), trunc, self.forcing_field()?)
    }

    /// Serialized with every field explicit.
    pub fn normal_form(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: ModelConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}

pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path)?;
    ModelConfig::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err =
            ModelConfig::from_json(r#"{"equation": "rde", "poly": [0, -1, 0, 1], "gama": 0.0}"#)
                .unwrap_err();
        assert!(matches!(err, ImError::Json(_)), "{err}");
        let err = ModelConfig::from_json(
            r#"{"equation": "rde", "poly": [0, -1, 0, 1], "forcing": {"kind": "zero", "norm": 1}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, ImError::Json(_)));
    }

    #[test]
    fn invariants_are_all_reported() {
        let mut c = ModelConfig::for_family(Family::Nse);
        c.gamma = 0.3;
        c.gamma_bar = 0.3;
        c.grid_m = 7;
        c.dt = 0.0;
        let d = c.diagnostics();
        assert_eq!(d.len(), 3, "{d:?}");
        assert!(d[0].contains("gamma + gamma_bar"));

        let mut r = ModelConfig::for_family(Family::Rde);
        r.poly = vec![0.0, -1.0, 0.0, 1.0];
        r.gamma = 1.0;
        assert!(r
            .diagnostics()
            .iter()
            .any(|m| m.contains("rde fixes gamma")));

        let mut ch = ModelConfig::for_family(Family::Ch);
        ch.poly = vec![0.0, -1.0, 0.0, 1.0];
        assert!(ch.diagnostics().iter().any(|m| m.contains("gamma > 0")));
        ch.gamma = 2.0;
        assert!(ch.diagnostics().is_empty());
    }

    #[test]
    fn normal_form_round_trips() {
        let mut c = ModelConfig::for_family(Family::Ch);
        c.gamma = 0.5;
        c.poly = vec![0.0, -1.0, 0.0, 1.0];
        c.projector = Some(ProjectorSpec::new(7, 1, 0).unwrap());
        c.forcing = ForcingSpec::Modes {
            modes: vec![ForcedMode {
                component: 0,
                mode: [1, 0, 0],
                re: 0.5,
                im: 0.0,
            }],
        };
        let text = c.normal_form().unwrap();
        let back = ModelConfig::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.normal_form().unwrap(), text);
    }

    #[test]
    fn default_forcing_is_low_mode_unit_norm() {
        let mut c = ModelConfig::for_family(Family::Rde);
        c.poly = vec![0.0, -1.0, 0.0, 1.0];
        c.grid_m = 8;
        let g = c.forcing_field().unwrap();
        assert!((g.norm() - 1.0).abs() < 1e-14);
        let mut high = g.clone();
        high.retain_by_n2(|n2| n2 > 4);
        assert_eq!(high.max_abs_coeff(), 0.0);
        assert_eq!(g, c.forcing_field().unwrap());
    }
}
