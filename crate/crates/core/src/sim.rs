//! Robot + laser profile sensor simulator.
//!
//! The robot moves stop-and-look along linearly interpolated waypoints with a
//! constant end-effector orientation; at each waypoint the sensor casts a fan
//! of parallel rays (its laser line) along its +z axis and reports the first
//! surface hit in its x-z plane.

use crate::cloud::{load_ply, save_cloud_with_comments, CloudPoint, LaserProfile, PointCloud};
use crate::error::{Error, Result};
use crate::geom::UnitAxis;
use crate::rng::substream;
use crate::target::{SyntheticTarget, TargetGeometry, TriMesh, IMAGE_PLANE_Z};
use crate::{Rotation, Transform, Vec3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorModel {
    /// Laser line length along the sensor x axis (mm).
    pub fov_width: f64,
    pub z_near: f64,
    pub z_far: f64,
    pub samples_per_profile: usize,
    /// Gaussian depth noise (mm).
    pub sigma_z: f64,
    /// Gaussian noise along the laser line (mm).
    pub sigma_x: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            fov_width: 160.0,
            z_near: 100.0,
            z_far: 500.0,
            samples_per_profile: 161,
            sigma_z: 0.1,
            sigma_x: 0.02,
        }
    }
}

impl SensorModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("sensor model: {m}")));
        if !(self.fov_width > 0.0) {
            return bad("fov_width must be positive");
        }
        if !(self.z_near < self.z_far) || self.z_near < 0.0 {
            return bad("need 0 <= z_near < z_far");
        }
        if self.samples_per_profile < 2 {
            return bad("samples_per_profile must be at least 2");
        }
        if !(self.sigma_z >= 0.0 && self.sigma_x >= 0.0) {
            return bad("noise sigmas must be non-negative");
        }
        Ok(())
    }

    pub fn noise_free(&self) -> Self {
        Self {
            sigma_z: 0.0,
            sigma_x: 0.0,
            ..self.clone()
        }
    }

    /// x coordinate of ray `i` in the sensor frame.
    pub fn ray_x(&self, i: usize) -> f64 {
        let n = self.samples_per_profile - 1;
        -0.5 * self.fov_width + self.fov_width * i as f64 / n as f64
    }
}

/// Robot-side error model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobotModel {
    /// Half-width (mm) of the uniform error between the commanded (recorded)
    /// and the actual end-effector position, per axis.
    pub position_jitter: f64,
}

impl Default for RobotModel {
    fn default() -> Self {
        Self {
            position_jitter: 0.05,
        }
    }
}

/// Ground truth for a simulated workcell.
#[derive(Debug, Clone)]
pub struct ScanScene {
    pub target: TargetGeometry,
    /// ᴮH_C: target frame in the robot base frame.
    pub target_pose: Transform,
    /// ᴱH_S: sensor frame in the end-effector frame.
    pub hand_eye: Transform,
}

impl ScanScene {
    /// Axis-aligned bounds of the target in the base frame.
    pub fn target_bounds(&self) -> (Vec3, Vec3) {
        let corners: Vec<Vec3> = match &self.target {
            TargetGeometry::Mesh(m) => m.vertices.clone(),
            TargetGeometry::Image(img) => {
                let ((x0, y0), (x1, y1)) = img.extent_mm();
                vec![
                    Vec3::new(x0, y0, IMAGE_PLANE_Z),
                    Vec3::new(x1, y0, IMAGE_PLANE_Z),
                    Vec3::new(x0, y1, IMAGE_PLANE_Z),
                    Vec3::new(x1, y1, IMAGE_PLANE_Z),
                ]
            }
        };
        let pts: Vec<Vec3> = corners.iter().map(|c| self.target_pose.apply(c)).collect();
        pts.iter()
            .fold((pts[0], pts[0]), |(lo, hi), p| (lo.inf(p), hi.sup(p)))
    }

    /// Nearest surface hit along a ray given in the target frame:
    /// `(distance, intensity)`.
    pub fn cast_ray_local(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        match &self.target {
            TargetGeometry::Mesh(m) => raycast_mesh(m, origin, dir).map(|t| (t, 1.0)),
            TargetGeometry::Image(img) => {
                if dir.z.abs() < 1e-12 {
                    return None;
                }
                let t = (IMAGE_PLANE_Z - origin.z) / dir.z;
                if t <= 0.0 {
                    return None;
                }
                let p = origin + dir * t;
                img.sample_mm(p.x, p.y).map(|i| (t, i))
            }
        }
    }
}

/// Möller–Trumbore, two-sided, nearest hit with `t > 0`.
pub fn raycast_mesh(mesh: &TriMesh, origin: &Vec3, dir: &Vec3) -> Option<f64> {
    let mut best: Option<f64> = None;
    for t in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.corners(t);
        let e1 = b - a;
        let e2 = c - a;
        let p = dir.cross(&e2);
        let det = e1.dot(&p);
        if det.abs() < 1e-14 {
            continue;
        }
        let inv = 1.0 / det;
        let s = origin - a;
        let u = s.dot(&p) * inv;
        if !(0.0..=1.0).contains(&u) {
            continue;
        }
        let q = s.cross(&e1);
        let v = dir.dot(&q) * inv;
        if v < 0.0 || u + v > 1.0 {
            continue;
        }
        let dist = e2.dot(&q) * inv;
        if dist > 1e-12 && best.map_or(true, |b| dist < b) {
            best = Some(dist);
        }
    }
    best
}

/// Constant-orientation end-effector path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub ee_rotation: Rotation,
    pub ee_positions: Vec<Vec3>,
}

impl Trajectory {
    pub fn poses(&self) -> Vec<Transform> {
        self.ee_positions
            .iter()
            .map(|p| Transform::new(self.ee_rotation, *p))
            .collect()
    }
}

/// Waypoints `X_r = X_start + r/N (X_end − X_start)` for `r = 0..=N`.
pub fn interpolate_trajectory(start: Vec3, end: Vec3, steps: usize, ee_rotation: Rotation) -> Result<Trajectory> {
    if steps < 1 {
        return Err(Error::InvalidArgument("trajectory needs at least one step".into()));
    }
    let mut ee_positions: Vec<Vec3> = (0..steps)
        .map(|r| start + (end - start) * (r as f64 / steps as f64))
        .collect();
    ee_positions.push(end);
    Ok(Trajectory {
        ee_rotation,
        ee_positions,
    })
}

/// Acquires one profile with the end effector at `ee_pose`.
pub fn acquire_profile<R: Rng + ?Sized>(
    scene: &ScanScene,
    ee_pose: &Transform,
    sensor: &SensorModel,
    rng: &mut R,
) -> LaserProfile {
    let base_from_sensor = ee_pose.compose(&scene.hand_eye);
    let target_from_sensor = scene.target_pose.inverse().compose(&base_from_sensor);
    let dir = target_from_sensor.rotation.rotate(&Vec3::z());
    let mut points = Vec::new();
    for i in 0..sensor.samples_per_profile {
        // Draw noise for every ray so streams do not depend on hits.
        let nx: f64 = rng.sample(StandardNormal);
        let nz: f64 = rng.sample(StandardNormal);
        let x = sensor.ray_x(i);
        let origin = target_from_sensor.apply(&Vec3::new(x, 0.0, 0.0));
        if let Some((t, intensity)) = scene.cast_ray_local(&origin, &dir) {
            if t >= sensor.z_near && t <= sensor.z_far {
                points.push(CloudPoint::with_intensity(
                    Vec3::new(x + sensor.sigma_x * nx, 0.0, t + sensor.sigma_z * nz),
                    intensity,
                ));
            }
        }
    }
    LaserProfile {
        points,
        sensor_pose_index: 0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    /// Commanded (recorded) poses; the robot actually stops within
    /// `position_jitter` of them.
    pub trajectory: Trajectory,
    pub profiles: Vec<LaserProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub sensor: SensorModel,
    pub robot: RobotModel,
    pub hand_eye: Transform,
    pub target_pose: Transform,
    #[serde(default)]
    pub target: Option<SyntheticTarget>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanDataset {
    pub records: Vec<ScanRecord>,
    pub provenance: Provenance,
}

/// Scans the scene once per trajectory.
///
/// Profile `(i, j)` draws from RNG substream `(seed, i, j)`: first the
/// end-effector jitter, then two normals per ray.
pub fn acquire_dataset(
    scene: &ScanScene,
    trajectories: &[Trajectory],
    sensor: &SensorModel,
    robot: &RobotModel,
    seed: u64,
) -> Result<ScanDataset> {
    if trajectories.is_empty() {
        return Err(Error::InvalidArgument("dataset needs at least one trajectory".into()));
    }
    sensor.validate()?;
    let records = trajectories
        .par_iter()
        .enumerate()
        .map(|(i, traj)| {
            let profiles = traj
                .ee_positions
                .iter()
                .enumerate()
                .map(|(j, pos)| {
                    let mut rng = substream(seed, &[i as u64, j as u64]);
                    let mut jitter = || {
                        if robot.position_jitter > 0.0 {
                            rng.gen_range(-robot.position_jitter..=robot.position_jitter)
                        } else {
                            0.0
                        }
                    };
                    let actual = pos + Vec3::new(jitter(), jitter(), jitter());
                    let pose = Transform::new(traj.ee_rotation, actual);
                    let mut profile = acquire_profile(scene, &pose, sensor, &mut rng);
                    profile.sensor_pose_index = j;
                    profile
                })
                .collect();
            ScanRecord {
                trajectory: traj.clone(),
                profiles,
            }
        })
        .collect();
    Ok(ScanDataset {
        records,
        provenance: Provenance {
            seed,
            sensor: sensor.clone(),
            robot: robot.clone(),
            hand_eye: scene.hand_eye,
            target_pose: scene.target_pose,
            target: None,
        },
    })
}

/// How to lay out a scan pass over the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanPlan {
    /// Distance from the sensor to the target centre along the sensor z axis (mm).
    pub standoff: f64,
    pub steps: usize,
    /// Extra travel beyond the target's diagonal at each end (mm).
    pub margin: f64,
}

impl Default for ScanPlan {
    fn default() -> Self {
        Self {
            standoff: 300.0,
            steps: 100,
            margin: 10.0,
        }
    }
}

/// Plans a straight pass that sweeps the laser line over the whole target
/// with the end effector held at `ee_rotation`. Uses the true hand-eye, as
/// an operator would by jogging the robot until the target is in view.
pub fn plan_trajectory(scene: &ScanScene, ee_rotation: &Rotation, plan: &ScanPlan) -> Result<Trajectory> {
    let (lo, hi) = scene.target_bounds();
    let centre = (lo + hi) * 0.5;
    let sensor_rot = *ee_rotation * scene.hand_eye.rotation;
    let z = sensor_rot.rotate(&Vec3::z());
    let y = sensor_rot.rotate(&Vec3::y());
    let half = 0.5 * (hi - lo).norm() + plan.margin;
    let offset = ee_rotation.rotate(&scene.hand_eye.translation);
    let mid = centre - z * plan.standoff;
    interpolate_trajectory(mid - y * half - offset, mid + y * half - offset, plan.steps, *ee_rotation)
}

/// Orientation that points the sensor straight down (sensor z = −z_B) with the
/// laser line along +x_B.
pub fn nadir_ee_rotation(hand_eye_rotation: &Rotation) -> Rotation {
    let base_from_sensor = Rotation::about_x(std::f64::consts::PI);
    base_from_sensor * hand_eye_rotation.transpose()
}

/// `count` end-effector orientations around the nadir pose, each tilted by
/// 20–30° about a horizontal axis spread around the compass and given a
/// distinct yaw, so every pair of relative rotation axes is non-parallel.
/// Tilted views see the side walls of the target, which pins its position.
pub fn default_ee_rotations(hand_eye_rotation: &Rotation, count: usize) -> Vec<Rotation> {
    let nadir = nadir_ee_rotation(hand_eye_rotation);
    (0..count)
        .map(|i| {
            let k = i as f64;
            let heading = (k * 137.5_f64).to_radians();
            let tilt = (20.0 + 10.0 * ((k * 0.618_034) % 1.0)).to_radians();
            let yaw = (if i % 2 == 0 { -1.0 } else { 1.0 } * (8.0 + 3.0 * k)).to_radians();
            let axis = UnitAxis::new(Vec3::new(heading.cos(), heading.sin(), 0.0))
                .expect("unit by construction");
            Rotation::about_z(yaw) * Rotation::from_axis_angle(&axis, tilt) * nadir
        })
        .collect()
}

// On-disk layout: <dir>/manifest.json and <dir>/record_XXX/profile_YYYY.ply.

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    ee_rotation: Rotation,
    ee_poses: Vec<Transform>,
    profiles: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    provenance: Provenance,
    records: Vec<ManifestRecord>,
}

fn profile_rel_path(record: usize, profile: usize) -> PathBuf {
    PathBuf::from(format!("record_{record:03}")).join(format!("profile_{profile:04}.ply"))
}

pub fn save_dataset(ds: &ScanDataset, dir: &Path) -> Result<()> {
    let mut records = Vec::with_capacity(ds.records.len());
    for (i, rec) in ds.records.iter().enumerate() {
        let rec_dir = dir.join(format!("record_{i:03}"));
        fs::create_dir_all(&rec_dir).map_err(|e| Error::io(&rec_dir, e))?;
        let mut names = Vec::with_capacity(rec.profiles.len());
        for (j, profile) in rec.profiles.iter().enumerate() {
            let rel = profile_rel_path(i, j);
            let cloud = PointCloud::new("S", profile.points.clone())?;
            save_cloud_with_comments(
                &cloud,
                &[format!("sensor_pose_index {}", profile.sensor_pose_index)],
                &dir.join(&rel),
            )?;
            names.push(rel.to_string_lossy().into_owned());
        }
        records.push(ManifestRecord {
            ee_rotation: rec.trajectory.ee_rotation,
            ee_poses: rec.trajectory.poses(),
            profiles: names,
        });
    }
    let manifest = Manifest {
        provenance: ds.provenance.clone(),
        records,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<ScanDataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut records = Vec::with_capacity(manifest.records.len());
    for rec in manifest.records {
        if rec.ee_poses.len() != rec.profiles.len() {
            return Err(Error::InvalidArgument(format!(
                "manifest record has {} poses but {} profiles",
                rec.ee_poses.len(),
                rec.profiles.len()
            )));
        }
        let mut profiles = Vec::with_capacity(rec.profiles.len());
        for (j, name) in rec.profiles.iter().enumerate() {
            let doc = load_ply(&dir.join(name))?;
            let index = doc
                .comments
                .iter()
                .find_map(|c| c.strip_prefix("sensor_pose_index ").and_then(|v| v.trim().parse().ok()))
                .unwrap_or(j);
            profiles.push(LaserProfile::new(doc.cloud.points, index)?);
        }
        records.push(ScanRecord {
            trajectory: Trajectory {
                ee_rotation: rec.ee_rotation,
                ee_positions: rec.ee_poses.iter().map(|p| p.translation).collect(),
            },
            profiles,
        });
    }
    Ok(ScanDataset {
        records,
        provenance: manifest.provenance,
    })
}
