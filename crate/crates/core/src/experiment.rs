//! Experiment runner: configuration, full calibration runs, the rotation
//! perturbation and cloud-count sweeps, and their report files.

use crate::calib::{calibrate, check_rank_conditions, CalibObservation, CalibResult, RankOptions};
use crate::error::{Error, Result, Stage};
use crate::geom::UnitAxis;
use crate::reconstruct::{reconstruct_rotation_only, save_reconstructed, ReconstructedCloud};
use crate::registration::{localize_target_prepared, PreparedModel, RegistrationParams, RegistrationResult};
use crate::rng::{derive_seed, substream};
use crate::sim::{
    acquire_dataset, default_ee_rotations, interpolate_trajectory, plan_trajectory, RobotModel, ScanDataset, ScanPlan,
    ScanScene, SensorModel, Trajectory,
};
use crate::target::{
    image_to_model_cloud, load_image, load_mesh, mesh_to_model_cloud, synth_target, SyntheticTarget, TargetGeometry,
    DEFAULT_INTENSITY_MIN,
};
use crate::{Rotation, Transform, Vec3};
use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Seed used to sample the model cloud from a mesh; the model is part of the
/// configuration, not of a repetition.
const MODEL_SAMPLING_SEED: u64 = 0;

/// One scan pass: `steps + 1` waypoints from `start` to `end` at a fixed
/// end-effector orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub start: Vec3,
    pub end: Vec3,
    pub steps: usize,
    pub ee_rotation: Rotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: SyntheticTarget,
    /// Mesh (`.off`) or image (`.pgm`) file used instead of `target`.
    pub target_file: Option<PathBuf>,
    /// ᴮH_C ground truth.
    pub target_pose: Transform,
    /// ᴱH_S ground truth. Only its rotation is given to the calibration.
    pub hand_eye: Transform,
    pub sensor: SensorModel,
    pub robot: RobotModel,
    /// Explicit scan passes. When empty, `rotations` passes are planned
    /// automatically with `scan_plan`.
    pub trajectories: Vec<TrajectorySpec>,
    pub rotations: usize,
    pub scan_plan: ScanPlan,
    pub registration: RegistrationParams,
    pub rank: RankOptions,
    /// Model cloud sampling density (points per mm²) for mesh targets.
    pub model_density: f64,
    pub seed: u64,
    pub repetitions: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            target: SyntheticTarget::default(),
            target_file: None,
            target_pose: Transform::new(Rotation::about_z(0.35), Vec3::new(1200.0, 150.0, 0.0)),
            hand_eye: Transform::new(
                Rotation::from_matrix_unchecked(Matrix3::new(0.0, 0.0, -1.0, 0.0, -1.0, 0.0, -1.0, 0.0, 0.0)),
                Vec3::new(907.5, 97.0, 40.0),
            ),
            sensor: SensorModel::default(),
            robot: RobotModel::default(),
            trajectories: Vec::new(),
            rotations: 10,
            scan_plan: ScanPlan::default(),
            registration: RegistrationParams::default(),
            rank: RankOptions::default(),
            model_density: 0.5,
            seed: 1,
            repetitions: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        // Relative target files are resolved against the config's directory.
        if let (Some(file), Some(dir)) = (&cfg.target_file, path.parent()) {
            if file.is_relative() {
                cfg.target_file = Some(dir.join(file));
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.cloud_count();
        if m == 0 {
            return Err(Error::InvalidArgument("config needs at least one scan pass".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::InvalidArgument("repetitions must be at least 1".into()));
        }
        if !(self.model_density > 0.0 && self.model_density.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "model_density must be positive, got {}",
                self.model_density
            )));
        }
        if let Some(t) = self.trajectories.iter().find(|t| t.steps == 0) {
            return Err(Error::InvalidArgument(format!(
                "trajectory from {:?} needs at least one step",
                t.start.as_slice()
            )));
        }
        if let Some(f) = &self.target_file {
            if !f.exists() {
                return Err(Error::InvalidArgument(format!("target file {} not found", f.display())));
            }
        }
        self.sensor.validate()?;
        self.registration.validate()
    }

    /// Number of clouds (scan passes) per run.
    pub fn cloud_count(&self) -> usize {
        if self.trajectories.is_empty() {
            self.rotations
        } else {
            self.trajectories.len()
        }
    }

    /// Seed of repetition `rep`.
    pub fn repetition_seed(&self, rep: usize) -> u64 {
        derive_seed(self.seed, &[rep as u64])
    }
}

/// A configured workcell: ground-truth scene, scan passes and the prepared
/// target model, shared by every run of an experiment.
pub struct Workcell {
    pub config: ExperimentConfig,
    pub scene: ScanScene,
    pub trajectories: Vec<Trajectory>,
    pub model: PreparedModel,
    /// Registration parameters, with binarization forced on for image targets.
    pub registration: RegistrationParams,
}

impl Workcell {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        Self::build(config).map_err(|e| e.in_stage(Stage::Config))
    }

    fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let target = match &config.target_file {
            Some(path) => match path.extension().and_then(|e| e.to_str()) {
                Some("off") => TargetGeometry::Mesh(load_mesh(path)?),
                Some("pgm") => TargetGeometry::Image(load_image(path)?),
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "target file {} must be .off or .pgm",
                        path.display()
                    )))
                }
            },
            None => synth_target(&config.target)?,
        };
        let mut registration = config.registration.clone();
        let model = match &target {
            TargetGeometry::Mesh(mesh) => {
                let cloud = mesh_to_model_cloud(mesh, config.model_density, MODEL_SAMPLING_SEED)?;
                PreparedModel::with_mesh(&cloud, mesh)?
            }
            TargetGeometry::Image(img) => {
                registration.binarize = true;
                PreparedModel::new(&image_to_model_cloud(img, DEFAULT_INTENSITY_MIN))?
            }
        };
        let scene = ScanScene {
            target,
            target_pose: config.target_pose,
            hand_eye: config.hand_eye,
        };
        let trajectories = if config.trajectories.is_empty() {
            default_ee_rotations(&config.hand_eye.rotation, config.rotations)
                .iter()
                .map(|r| plan_trajectory(&scene, r, &config.scan_plan))
                .collect::<Result<Vec<_>>>()?
        } else {
            config
                .trajectories
                .iter()
                .map(|t| interpolate_trajectory(t.start, t.end, t.steps, t.ee_rotation))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            config: config.clone(),
            scene,
            trajectories,
            model,
            registration,
        })
    }

    /// Ground truth ᴱo_S.
    pub fn truth(&self) -> Vec3 {
        self.scene.hand_eye.translation
    }

    pub fn simulate(&self, seed: u64) -> Result<ScanDataset> {
        let mut ds = acquire_dataset(
            &self.scene,
            &self.trajectories,
            &self.config.sensor,
            &self.config.robot,
            derive_seed(seed, &[0]),
        )
        .map_err(|e| e.in_stage(Stage::Simulate))?;
        ds.provenance.seed = seed;
        ds.provenance.target = self.config.target_file.is_none().then(|| self.config.target.clone());
        Ok(ds)
    }

    /// Rotation-only reconstruction of every record with `hand_eye_rotation`.
    pub fn reconstruct(&self, ds: &ScanDataset, hand_eye_rotation: &Rotation) -> Result<Vec<ReconstructedCloud>> {
        ds.records
            .iter()
            .map(|rec| reconstruct_rotation_only(&rec.profiles, &rec.trajectory.poses(), hand_eye_rotation))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_stage(Stage::Reconstruct))
    }

    /// Localizes the target in every cloud. Cloud `i` draws from RNG
    /// substream `(seed, 1, i)`, so results do not depend on scheduling.
    pub fn register(&self, clouds: &[ReconstructedCloud], seed: u64) -> Vec<Result<RegistrationResult>> {
        clouds
            .par_iter()
            .enumerate()
            .map(|(i, rc)| {
                let mut rng = substream(seed, &[1, i as u64]);
                localize_target_prepared(&rc.cloud, &self.model, &self.registration, &mut rng)
                    .map_err(|e| Error::RegistrationFailed(format!("cloud {i}: {e}")).in_stage(Stage::Register))
            })
            .collect()
    }

    pub fn calibrate(&self, clouds: &[ReconstructedCloud], regs: &[RegistrationResult]) -> Result<CalibResult<f64>> {
        let obs: Vec<CalibObservation<f64>> = clouds
            .iter()
            .zip(regs)
            .map(|(rc, r)| CalibObservation::new(r.transform.translation, rc.ee_rotation))
            .collect();
        calibrate(&obs, &self.config.rank).map_err(|e| e.in_stage(Stage::Calibrate))
    }

    /// Simulate, reconstruct with `hand_eye_rotation`, register and calibrate.
    pub fn run(&self, seed: u64, hand_eye_rotation: &Rotation) -> Result<CalibrationRun> {
        let ds = self.simulate(seed)?;
        self.run_on(&ds, seed, hand_eye_rotation)
    }

    /// Like [`Workcell::run`] on an existing dataset.
    pub fn run_on(&self, ds: &ScanDataset, seed: u64, hand_eye_rotation: &Rotation) -> Result<CalibrationRun> {
        // Refuse unobservable sets before spending time on registration.
        let rotations: Vec<Rotation> = ds.records.iter().map(|r| r.trajectory.ee_rotation).collect();
        let diag = check_rank_conditions(&rotations, &self.config.rank);
        if !diag.is_solvable() {
            return Err(Error::RankCondition(diag).in_stage(Stage::Calibrate));
        }
        let clouds = self.reconstruct(ds, hand_eye_rotation)?;
        let registrations = self.register(&clouds, seed).into_iter().collect::<Result<Vec<_>>>()?;
        let result = self.calibrate(&clouds, &registrations)?;
        Ok(CalibrationRun {
            seed,
            truth: ds.provenance.hand_eye.translation,
            clouds,
            registrations,
            result,
        })
    }
}

/// Everything produced by one calibration run.
#[derive(Debug, Clone)]
pub struct CalibrationRun {
    pub seed: u64,
    /// Ground truth ᴱo_S.
    pub truth: Vec3,
    pub clouds: Vec<ReconstructedCloud>,
    pub registrations: Vec<RegistrationResult>,
    pub result: CalibResult<f64>,
}

impl CalibrationRun {
    pub fn estimate(&self) -> Vec3 {
        self.result.hand_eye_translation
    }

    /// Signed error `estimate − truth`.
    pub fn error(&self) -> Vec3 {
        self.estimate() - self.truth
    }
}

/// Full calibration of a single repetition with the true hand-eye rotation.
pub fn run_calibration(config: &ExperimentConfig, seed: u64) -> Result<CalibrationRun> {
    let cell = Workcell::new(config)?;
    cell.run(seed, &cell.scene.hand_eye.rotation)
}

/// `config.repetitions` runs with derived seeds, in repetition order.
pub fn run_repetitions(config: &ExperimentConfig) -> Result<Vec<Result<CalibrationRun>>> {
    let cell = Workcell::new(config)?;
    let he = cell.scene.hand_eye.rotation;
    Ok((0..config.repetitions)
        .into_par_iter()
        .map(|rep| {
            let seed = config.repetition_seed(rep);
            log::info!("repetition {rep}: seed {seed}");
            cell.run(seed, &he)
        })
        .collect())
}

// ---------------------------------------------------------------- sweeps

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    /// Mean absolute error per axis (mm) over successful repetitions.
    pub dx: Option<f64>,
    pub dy: Option<f64>,
    pub dz: Option<f64>,
    /// Mean of the three per-axis errors.
    pub mean_error: Option<f64>,
    pub succeeded: usize,
    pub failed: usize,
    /// Signed error `estimate − truth` of each repetition; `None` if it failed.
    #[serde(skip)]
    pub errors: Vec<Option<Vec3>>,
}

impl SweepRow {
    fn from_errors(value: f64, errors: Vec<Option<Vec3>>) -> Self {
        let ok: Vec<Vec3> = errors.iter().flatten().copied().collect();
        let n = ok.len();
        let mean = |f: fn(&Vec3) -> f64| (n > 0).then(|| ok.iter().map(f).sum::<f64>() / n as f64);
        let (dx, dy, dz) = (mean(|e| e.x.abs()), mean(|e| e.y.abs()), mean(|e| e.z.abs()));
        let mean_error = mean(|e| (e.x.abs() + e.y.abs() + e.z.abs()) / 3.0);
        Self {
            value,
            dx,
            dy,
            dz,
            mean_error,
            succeeded: n,
            failed: errors.len() - n,
            errors,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    /// Name of the swept variable, used as the first CSV column.
    pub variable: String,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},dx,dy,dz,mean_error,succeeded,failed\n", self.variable);
        let f = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.value,
                f(r.dx),
                f(r.dy),
                f(r.dz),
                f(r.mean_error),
                r.succeeded,
                r.failed
            );
        }
        s
    }

    pub fn row(&self, value: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.value == value)
    }
}

/// Calibrates with ᴱR_S perturbed to `ᴱR_S · Rot(axis, Δ)` for each Δ (degrees)
/// while the simulator keeps the true rotation.
pub fn run_rotation_perturbation_sweep(
    config: &ExperimentConfig,
    angles_deg: &[f64],
    axis: &UnitAxis<f64>,
) -> Result<SweepReport> {
    if angles_deg.is_empty() || angles_deg.iter().any(|a| !a.is_finite()) {
        return Err(Error::InvalidArgument("sweep needs finite angles".into()));
    }
    let cell = Workcell::new(config)?;
    let he = cell.scene.hand_eye.rotation;
    // per_rep[rep][angle]
    let per_rep: Vec<Vec<Option<Vec3>>> = (0..config.repetitions)
        .into_par_iter()
        .map(|rep| {
            let seed = config.repetition_seed(rep);
            let ds = match cell.simulate(seed) {
                Ok(ds) => ds,
                Err(e) => {
                    log::warn!("repetition {rep}: {e}");
                    return vec![None; angles_deg.len()];
                }
            };
            angles_deg
                .iter()
                .map(|&deg| {
                    let r = he * Rotation::from_axis_angle(axis, deg.to_radians());
                    match cell.run_on(&ds, seed, &r) {
                        Ok(run) => Some(run.error()),
                        Err(e) => {
                            log::warn!("repetition {rep}, {deg}°: {e}");
                            None
                        }
                    }
                })
                .collect()
        })
        .collect();
    let rows = angles_deg
        .iter()
        .enumerate()
        .map(|(k, &deg)| SweepRow::from_errors(deg, per_rep.iter().map(|r| r[k]).collect()))
        .collect();
    Ok(SweepReport {
        variable: "angle_deg".into(),
        rows,
    })
}

/// Calibrates with the first `k` clouds for each `k` in `counts`.
pub fn run_cloud_count_sweep(config: &ExperimentConfig, counts: &[usize]) -> Result<SweepReport> {
    if counts.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one cloud count".into()));
    }
    let cell = Workcell::new(config)?;
    let available = cell.trajectories.len();
    if let Some(&k) = counts.iter().find(|&&k| k > available) {
        return Err(Error::InvalidArgument(format!(
            "cloud count {k} exceeds the {available} configured scan passes"
        )));
    }
    if let Some(&k) = counts.iter().find(|&&k| k < 3) {
        let rotations: Vec<Rotation> = cell.trajectories[..k].iter().map(|t| t.ee_rotation).collect();
        return Err(Error::RankCondition(check_rank_conditions(&rotations, &config.rank)).in_stage(Stage::Config));
    }
    let kmax = counts.iter().copied().max().unwrap_or(0);
    let he = cell.scene.hand_eye.rotation;
    let per_rep: Vec<Vec<Option<Vec3>>> = (0..config.repetitions)
        .into_par_iter()
        .map(|rep| {
            let seed = config.repetition_seed(rep);
            let prepared = cell.simulate(seed).and_then(|mut ds| {
                ds.records.truncate(kmax);
                let clouds = cell.reconstruct(&ds, &he)?;
                let regs = cell.register(&clouds, seed);
                Ok((clouds, regs))
            });
            let (clouds, regs) = match prepared {
                Ok(v) => v,
                Err(e) => {
                    log::warn!("repetition {rep}: {e}");
                    return vec![None; counts.len()];
                }
            };
            counts
                .iter()
                .map(|&k| {
                    let regs_k: Vec<RegistrationResult> = match regs[..k]
                        .iter()
                        .map(|r| r.as_ref().map(Clone::clone))
                        .collect::<std::result::Result<Vec<_>, _>>()
                    {
                        Ok(r) => r,
                        Err(e) => {
                            log::warn!("repetition {rep}, {k} clouds: {e}");
                            return None;
                        }
                    };
                    match cell.calibrate(&clouds[..k], &regs_k) {
                        Ok(res) => Some(res.hand_eye_translation - cell.truth()),
                        Err(e) => {
                            log::warn!("repetition {rep}, {k} clouds: {e}");
                            None
                        }
                    }
                })
                .collect()
        })
        .collect();
    let rows = counts
        .iter()
        .enumerate()
        .map(|(i, &k)| SweepRow::from_errors(k as f64, per_rep.iter().map(|r| r[i]).collect()))
        .collect();
    Ok(SweepReport {
        variable: "clouds".into(),
        rows,
    })
}

// ---------------------------------------------------------------- reports

/// Calibration table in the layout `dataset,x,y,z,dx,dy,dz`, with `mean`
/// and `sd` footer rows over the successful runs. Failed runs keep their row.
pub fn calibration_table(runs: &[Result<CalibrationRun>]) -> String {
    let mut s = String::from("dataset,x,y,z,dx,dy,dz\n");
    let mut rows: Vec<[f64; 6]> = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        match run {
            Ok(run) => {
                let x = run.estimate();
                let e = run.error();
                let row = [x.x, x.y, x.z, e.x.abs(), e.y.abs(), e.z.abs()];
                let _ = writeln!(s, "{},{}", i + 1, join_fixed(&row));
                rows.push(row);
            }
            Err(_) => {
                let _ = writeln!(s, "{},failed,,,,,", i + 1);
            }
        }
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let mean: [f64; 6] = std::array::from_fn(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n);
        let sd: [f64; 6] = std::array::from_fn(|k| {
            if rows.len() < 2 {
                0.0
            } else {
                (rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            }
        });
        let _ = writeln!(s, "mean,{}", join_fixed(&mean));
        let _ = writeln!(s, "sd,{}", join_fixed(&sd));
    }
    s
}

fn join_fixed(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",")
}

#[derive(Serialize)]
struct CloudRegistrationFile<'a> {
    cloud: usize,
    ee_rotation: &'a Rotation,
    registered_origin: Vec3,
    #[serde(flatten)]
    result: &'a RegistrationResult,
}

#[derive(Serialize)]
struct RunFile<'a> {
    seed: u64,
    truth: Vec3,
    error: Vec3,
    #[serde(flatten)]
    result: &'a CalibResult<f64>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Per-cloud PLYs and registration JSON plus the run's `result.json`, in `dir`.
pub fn write_run(run: &CalibrationRun, dir: &Path) -> Result<()> {
    for (i, (rc, reg)) in run.clouds.iter().zip(&run.registrations).enumerate() {
        save_reconstructed_in(rc, &dir.join("clouds").join(format!("cloud_{i:02}.ply")))?;
        let file = CloudRegistrationFile {
            cloud: i,
            ee_rotation: &rc.ee_rotation,
            registered_origin: reg.transform.translation,
            result: reg,
        };
        write_file(
            &dir.join("registration").join(format!("cloud_{i:02}.json")),
            &serde_json::to_string_pretty(&file)?,
        )?;
    }
    let file = RunFile {
        seed: run.seed,
        truth: run.truth,
        error: run.error(),
        result: &run.result,
    };
    write_file(&dir.join("result.json"), &serde_json::to_string_pretty(&file)?)
}

fn save_reconstructed_in(rc: &ReconstructedCloud, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_reconstructed(rc, path)
}

/// Writes `report.csv` and the artifacts of every successful run: directly
/// in `out` for a single run, in `out/rep_XX` otherwise.
pub fn write_calibration_outputs(runs: &[Result<CalibrationRun>], out: &Path) -> Result<()> {
    (|| {
        for (i, run) in runs.iter().enumerate() {
            if let Ok(run) = run {
                let dir = if runs.len() == 1 {
                    out.to_path_buf()
                } else {
                    out.join(format!("rep_{i:02}"))
                };
                write_run(run, &dir)?;
            }
        }
        write_file(&out.join("report.csv"), &calibration_table(runs))
    })()
    .map_err(|e: Error| e.in_stage(Stage::Report))
}

pub fn write_sweep(report: &SweepReport, path: &Path) -> Result<()> {
    write_file(path, &report.to_csv()).map_err(|e| e.in_stage(Stage::Report))
}

