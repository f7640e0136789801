use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use handeye::experiment::{
    calibration_table, run_cloud_count_sweep, run_rotation_perturbation_sweep, write_calibration_outputs, write_sweep,
    ExperimentConfig, Workcell,
};
use handeye::geom::UnitAxis;
use handeye::reconstruct::{load_reconstructed, save_reconstructed};
use handeye::registration::localize_target_prepared;
use handeye::rng::substream;
use handeye::sim::{load_dataset, save_dataset};
use handeye::{Error, Vec3};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Hand-eye translation calibration of a 2D laser profile sensor on a
/// synthetic workcell.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured number of repetitions.
    #[arg(long)]
    repetitions: Option<usize>,
}

/// Repetitions used by the sweeps unless `--repetitions` is given.
const SWEEP_REPETITIONS: usize = 20;

impl Common {
    fn sweep_config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = self.config()?;
        if self.repetitions.is_none() {
            cfg.repetitions = cfg.repetitions.max(SWEEP_REPETITIONS);
        }
        Ok(cfg)
    }

    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.repetitions {
            cfg.repetitions = r;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scan dataset into OUT/dataset.
    Simulate(Common),
    /// Rotation-only reconstruction of a dataset into OUT/clouds.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Localize the target in reconstructed clouds into OUT/registration.
    Register {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        clouds: PathBuf,
    },
    /// Full pipeline: simulate (or load), reconstruct, register, calibrate.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Use an existing dataset instead of simulating.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Sweep a perturbation of the hand-eye rotation.
    SweepRot {
        #[command(flatten)]
        common: Common,
        /// Perturbation angles in degrees.
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,2,5,10")]
        angles: Vec<f64>,
        /// Perturbation axis in the sensor frame: x, y, z or "ax,ay,az".
        #[arg(long, default_value = "z")]
        axis: String,
    },
    /// Sweep the number of clouds used by the calibration.
    SweepCount {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "3,4,5,6,7,8,9,10")]
        counts: Vec<usize>,
    },
}

fn parse_axis(s: &str) -> anyhow::Result<UnitAxis<f64>> {
    let v = match s {
        "x" => Vec3::x(),
        "y" => Vec3::y(),
        "z" => Vec3::z(),
        _ => {
            let c: Vec<f64> = s
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .with_context(|| format!("invalid axis {s:?}"))?;
            anyhow::ensure!(c.len() == 3, "axis needs three components, got {s:?}");
            Vec3::new(c[0], c[1], c[2])
        }
    };
    Ok(UnitAxis::normalize(v)?)
}

fn list_clouds(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ply"))
        .collect();
    files.sort();
    anyhow::ensure!(!files.is_empty(), "no .ply clouds in {}", dir.display());
    Ok(files)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate(common) => {
            let cfg = common.config()?;
            let cell = Workcell::new(&cfg)?;
            let ds = cell.simulate(cfg.repetition_seed(0))?;
            let dir = common.out.join("dataset");
            save_dataset(&ds, &dir)?;
            fs::write(common.out.join("config.json"), cfg.to_json()?)?;
            log::info!("wrote {} scan passes to {}", ds.records.len(), dir.display());
        }
        Command::Reconstruct { common, dataset } => {
            let cfg = common.config()?;
            let cell = Workcell::new(&cfg)?;
            let ds = load_dataset(&dataset)?;
            let clouds = cell.reconstruct(&ds, &cfg.hand_eye.rotation)?;
            let dir = common.out.join("clouds");
            fs::create_dir_all(&dir)?;
            for (i, rc) in clouds.iter().enumerate() {
                save_reconstructed(rc, &dir.join(format!("cloud_{i:02}.ply")))?;
            }
            log::info!("wrote {} clouds to {}", clouds.len(), dir.display());
        }
        Command::Register { common, clouds } => {
            let cfg = common.config()?;
            let cell = Workcell::new(&cfg)?;
            let dir = common.out.join("registration");
            fs::create_dir_all(&dir)?;
            let seed = cfg.repetition_seed(0);
            for (i, path) in list_clouds(&clouds)?.iter().enumerate() {
                let rc = load_reconstructed(path)?;
                let mut rng = substream(seed, &[1, i as u64]);
                let reg = localize_target_prepared(&rc.cloud, &cell.model, &cell.registration, &mut rng)
                    .with_context(|| format!("registering {}", path.display()))?;
                let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(&reg)?)?;
                println!(
                    "{name}: origin {:.4} {:.4} {:.4}  rms {:.4}  inliers {:.3}",
                    reg.transform.translation.x,
                    reg.transform.translation.y,
                    reg.transform.translation.z,
                    reg.rms_error,
                    reg.inlier_fraction
                );
            }
        }
        Command::Calibrate { common, dataset } => {
            let cfg = common.config()?;
            let cell = Workcell::new(&cfg)?;
            let he = cfg.hand_eye.rotation;
            let runs = match dataset {
                Some(d) => {
                    let ds = load_dataset(&d)?;
                    vec![cell.run_on(&ds, ds.provenance.seed, &he)]
                }
                None => {
                    use rayon::prelude::*;
                    (0..cfg.repetitions)
                        .into_par_iter()
                        .map(|rep| cell.run(cfg.repetition_seed(rep), &he))
                        .collect()
                }
            };
            if let [Err(_)] = runs.as_slice() {
                return Err(runs.into_iter().next().and_then(|r| r.err()).map(Into::into).unwrap());
            }
            write_calibration_outputs(&runs, &common.out)?;
            print!("{}", calibration_table(&runs));
            if let [Ok(run)] = runs.as_slice() {
                let t = run.estimate();
                println!(
                    "hand-eye translation: {:.6} {:.6} {:.6}  (error {:.6} mm)",
                    t.x,
                    t.y,
                    t.z,
                    run.error().norm()
                );
            }
            if runs.iter().all(|r| r.is_err()) {
                anyhow::bail!("every repetition failed");
            }
        }
        Command::SweepRot { common, angles, axis } => {
            let cfg = common.sweep_config()?;
            let report = run_rotation_perturbation_sweep(&cfg, &angles, &parse_axis(&axis)?)?;
            write_sweep(&report, &common.out.join("sweep_rotation.csv"))?;
            print!("{}", report.to_csv());
        }
        Command::SweepCount { common, counts } => {
            let cfg = common.sweep_config()?;
            let report = run_cloud_count_sweep(&cfg, &counts)?;
            write_sweep(&report, &common.out.join("sweep_count.csv"))?;
            print!("{}", report.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            let rank = e.downcast_ref::<Error>().is_some_and(Error::is_rank_condition);
            ExitCode::from(if rank { 2 } else { 1 })
        }
    }
}
