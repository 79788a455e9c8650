use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use swapf::distance::build_swdm;
use swapf::eval::{compute_metrics, export_batch, export_report, read_errors, run_batch, RunConfig, Window};
use swapf::measurement::CameraModel;
use swapf::raster::{load_raster, save_raster};
use swapf::sim::{generate_world, run_scenario, save_frames, SensorNoiseSpec, TrajectorySpec, WorldSpec};
use swapf::Error;

/// Environment variable that caps the worker thread count.
const THREADS_ENV: &str = "SWAPF_THREADS";

#[derive(Parser)]
#[command(name = "swapf", version, about = "Semantic map particle filter for UAV localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum WindowArg {
    Pre,
    Post,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario config (all configured trials).
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a world and render a frame stream.
    Simulate {
        /// TOML world spec.
        #[arg(long)]
        world: PathBuf,
        /// TOML trajectory spec.
        #[arg(long)]
        trajectory: PathBuf,
        /// TOML sensor noise spec; defaults apply when absent.
        #[arg(long)]
        noise: Option<PathBuf>,
        #[arg(long, default_value_t = 400)]
        view_side: usize,
        #[arg(long, default_value_t = 60.0)]
        fov: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precompute the distance stack of a map.
    Swdm {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute summary metrics from a frames.csv.
    Metrics {
        #[arg(long)]
        report: PathBuf,
        /// Map side in meters, for the error-to-map ratio.
        #[arg(long, default_value_t = 1000.0)]
        map_dim: f64,
        #[arg(long, value_enum, default_value_t = WindowArg::Post)]
        window: WindowArg,
    },
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Run { config, seed, out } => {
            let mut cfg = RunConfig::load(&config).map_err(|e| match e {
                Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
                other => other,
            })?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = out.or(cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("swapf_out"));
            let reports = run_batch(&cfg)?;
            if reports.len() == 1 {
                export_report(&reports[0], &out)?;
            } else {
                export_batch(&reports, &out)?;
            }
            for r in &reports {
                let s = &r.summary;
                match s.post {
                    Some(m) => println!(
                        "seed {}: fit at frame {}, RMSE {:.3} m, median {:.3} m, Recall@10 {:.1}%, EMR {:.3}",
                        s.seed,
                        s.fitting_frame.unwrap_or(0),
                        m.rmse_m,
                        m.median_m,
                        m.recall10_pct,
                        m.emr_permille
                    ),
                    None => println!("seed {}: never converged, RMSE {:.3} m over all frames", s.seed, s.all.rmse_m),
                }
            }
            println!("results in {}", out.display());
        }
        Command::Simulate {
            world,
            trajectory,
            noise,
            view_side,
            fov,
            seed,
            out,
        } => {
            let world: WorldSpec = read_toml(&world)?;
            let trajectory: TrajectorySpec = read_toml(&trajectory)?;
            let noise: SensorNoiseSpec = match &noise {
                Some(p) => read_toml(p)?,
                None => SensorNoiseSpec::default(),
            };
            let cam = CameraModel {
                fov_deg: fov,
                view_side,
            };
            cam.validate().map_err(|e| Error::Config(e.to_string()))?;
            let map = generate_world(&world)?;
            let frames = run_scenario(&map, &trajectory, &noise, &cam, seed)?;
            save_frames(&out, &frames)?;
            save_raster(out.join("world.smr"), &map)?;
            println!("{} frames and world.smr written to {}", frames.len(), out.display());
        }
        Command::Swdm { map, out } => {
            let map = load_raster(&map)?;
            build_swdm(&map).save(&out)?;
        }
        Command::Metrics { report, map_dim, window } => {
            let window = match window {
                WindowArg::Pre => Window::Pre,
                WindowArg::Post => Window::Post,
                WindowArg::All => Window::All,
            };
            let errors = read_errors(&report, window)?;
            let summary = compute_metrics(&errors, map_dim);
            println!("{}", serde_json::to_string_pretty(&summary).expect("metrics serialise"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
