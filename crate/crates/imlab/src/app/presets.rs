//! Named model configurations for the three equation families.

use super::config::{ForcedMode, ForcingSpec, ModelConfig};
use crate::error::{ImError, Result};
use crate::nonlinearity::Family;

pub const PRESETS: [&str; 7] = [
    "rde-cubic",
    "ch-classic",
    "ch-fractional",
    "ch6",
    "nse-leray",
    "nse-hyper",
    "nse-mixed",
];

/// Double-well `u³ - u` for Cahn–Hilliard.
const DOUBLE_WELL: [f64; 4] = [0.0, -1.0, 0.0, 1.0];
/// Pure cubic damping `u³` for reaction–diffusion, so that with `A = 1 - Δ`
/// every mode decays.
const CUBIC: [f64; 4] = [0.0, 0.0, 0.0, 1.0];

pub fn preset_config(name: &str) -> Result<ModelConfig> {
    let mut c = match name {
        "rde-cubic" => {
            let mut c = ModelConfig::for_family(Family::Rde);
            c.poly = CUBIC.to_vec();
            c.forcing = ForcingSpec::Zero {};
            c.dt = 5e-3;
            c
        }
        "ch-classic" | "ch-fractional" | "ch6" => {
            let mut c = ModelConfig::for_family(Family::Ch);
            c.poly = DOUBLE_WELL.to_vec();
            c.gamma = match name {
                "ch-classic" => 1.0,
                "ch-fractional" => 0.5,
                _ => 2.0,
            };
            c.forcing = ForcingSpec::Zero {};
            c.dt = match name {
                "ch-fractional" => 5e-3,
                "ch-classic" => 2e-3,
                _ => 1e-3,
            };
            c
        }
        "nse-leray" | "nse-hyper" | "nse-mixed" => {
            let mut c = ModelConfig::for_family(Family::Nse);
            (c.gamma, c.gamma_bar) = match name {
                "nse-leray" => (0.0, 0.5),
                "nse-hyper" => (0.5, 0.0),
                _ => (0.25, 0.25),
            };
            c.alpha_filter = 1.0;
            c.dt = 5e-3;
            if name == "nse-leray" {
                // A shear force u = (sin y, 0, 0).
                c.forcing = ForcingSpec::Modes {
                    modes: vec![ForcedMode {
                        component: 0,
                        mode: [0, 1, 0],
                        re: 0.0,
                        im: -0.5,
                    }],
                };
            }
            c
        }
        _ => {
            return Err(ImError::invalid(format!(
                "unknown preset '{name}'; choose one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    c.t_max = 1.0;
    c.validate()?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for p in PRESETS {
            let c = preset_config(p).unwrap();
            assert!(c.diagnostics().is_empty(), "{p}");
        }
        assert_eq!(preset_config("ch6").unwrap().gamma, 2.0);
        assert!(preset_config("burgers").is_err());
    }
}
