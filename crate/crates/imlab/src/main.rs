use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use imlab::app::commands;
use imlab::app::config::{load_config, ModelConfig};
use imlab::app::pipeline::{run_preset, Artifacts, Scale};
use imlab::app::presets::{preset_config, PRESETS};
use imlab::{ImError, Result};

#[derive(Parser)]
#[command(
    name = "imlab",
    version,
    about = "Inertial-manifold experiments for dissipative PDEs on the 3-torus"
)]
struct Cli {
    /// JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from a named preset instead of a config file.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    grid: Option<usize>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long = "t-max", global = true)]
    t_max: Option<f64>,
    /// Use the long-running sample sizes.
    #[arg(long, global = true)]
    full: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Shells and gaps of the lattice eigenvalues.
    Spectrum {
        #[arg(long, default_value_t = 100)]
        lambda_max: u64,
        #[arg(long, default_value_t = 0)]
        shift: u8,
    },
    /// Cuts whose annulus differences avoid the ball of radius r.
    Admissible {
        #[arg(long, default_value_t = 1)]
        k: u64,
        #[arg(long, default_value_t = 1)]
        r: u64,
        #[arg(long, default_value_t = 1)]
        from: u64,
        #[arg(long, default_value_t = 10_000)]
        to: u64,
        #[arg(long)]
        min_gap: Option<u64>,
    },
    /// Integrate the model and record monitors.
    Simulate,
    /// Strong cone inequality along a tangent flow.
    VerifyCone {
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Deviation of the annulus block of F' from a multiple of the identity.
    SaDeviation {
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Sample the manifold graph on a small chart.
    BuildIm,
    /// Distance-to-graph decay from random initial data.
    Track {
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Inertial form against the full equation.
    Reduce {
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
    /// Run the whole chain for a named preset.
    Preset { name: String },
}

impl Cli {
    fn scale(&self) -> Scale {
        let mut s = if self.full {
            Scale::full()
        } else {
            Scale::quick()
        };
        if let Some(m) = self.grid {
            s.grid_m = m;
        }
        s
    }

    fn model_config(&self, scale: &Scale) -> Result<ModelConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(p), None) => load_config(p)?,
            (None, Some(name)) => {
                let mut c = preset_config(name)?;
                c.grid_m = scale.grid_m;
                c
            }
            (None, None) => return Err(ImError::invalid("give --config FILE or --preset NAME")),
            (Some(_), Some(_)) => {
                return Err(ImError::invalid(
                    "--config and --preset are mutually exclusive",
                ))
            }
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.grid {
            cfg.grid_m = m;
        }
        if let Some(dt) = self.dt {
            cfg.dt = dt;
        }
        if let Some(t) = self.t_max {
            cfg.t_max = t;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    let mut scale = cli.scale();
    let out = || cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match &cli.command {
        Command::Spectrum { lambda_max, shift } => {
            commands::spectrum(*lambda_max, *shift, &Artifacts::new(out())?)
        }
        Command::Admissible {
            k,
            r,
            from,
            to,
            min_gap,
        } => {
            let v = commands::admissible(*k, *r, (*from, *to), *min_gap, &Artifacts::new(out())?)?;
            if v["found"] == 0 {
                eprintln!("no admissible cut in {from}..={to} for k={k}, r={r}");
            }
            Ok(v)
        }
        Command::Preset { name } => {
            if !PRESETS.contains(&name.as_str()) {
                return Err(ImError::invalid(format!(
                    "unknown preset '{name}'; choose one of {}",
                    PRESETS.join(", ")
                )));
            }
            let s = run_preset(name, &scale, &out(), cli.seed)?;
            Ok(serde_json::to_value(s)?)
        }
        cmd => {
            let cfg = cli.model_config(&scale)?;
            scale.grid_m = cfg.grid_m;
            let art = Artifacts::new(&cfg.output_dir)?;
            match cmd {
                Command::Simulate => commands::simulate(&cfg, &art),
                Command::VerifyCone { state } => {
                    commands::verify_cone_cmd(&cfg, &scale, state.as_deref(), &art)
                }
                Command::SaDeviation { state } => {
                    commands::sa_deviation_cmd(&cfg, &scale, state.as_deref(), &art)
                }
                Command::BuildIm => commands::build_im(&cfg, &scale, &art),
                Command::Track { trials } => {
                    if let Some(n) = trials {
                        scale.track_trials = *n;
                    }
                    commands::track(&cfg, &scale, &art)
                }
                Command::Reduce { steps } => commands::reduce(&cfg, &scale, *steps, &art),
                _ => unreachable!("handled above"),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(v) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&v).expect("JSON values serialize")
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
