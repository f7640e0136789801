//! Point-cloud reconstruction from profiles and end-effector poses.
//!
//! With the full hand-eye `ᴱH_S` the profiles map to the true cloud `Π`. With
//! only its rotation, the auxiliary frame `E[S]` (sensor orientation, origin
//! at the end effector) gives `Π′`, which differs from `Π` by the constant
//! offset `ᴮR_E · ᴱo_S` as long as the end-effector orientation is fixed.

use crate::cloud::{load_ply, save_cloud_with_comments, CloudPoint, LaserProfile, PointCloud};
use crate::error::{Error, Result};
use crate::{Rotation, Transform, Vec3};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Largest rotation difference (rad) tolerated between poses of one record.
pub const CONSTANT_ROTATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionMode {
    TrueHandEye,
    RotationOnly,
}

impl ReconstructionMode {
    fn as_str(self) -> &'static str {
        match self {
            ReconstructionMode::TrueHandEye => "true_hand_eye",
            ReconstructionMode::RotationOnly => "rotation_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructedCloud {
    /// Cloud in the base frame "B".
    pub cloud: PointCloud,
    /// ᴮR_{E_1}, shared by every pose of the record.
    pub ee_rotation: Rotation,
    pub mode: ReconstructionMode,
}

fn check_inputs(profiles: &[LaserProfile], ee_poses: &[Transform]) -> Result<Rotation> {
    if profiles.len() != ee_poses.len() {
        return Err(Error::InvalidArgument(format!(
            "{} profiles but {} end-effector poses",
            profiles.len(),
            ee_poses.len()
        )));
    }
    let Some(first) = ee_poses.first() else {
        return Ok(Rotation::identity());
    };
    for (j, pose) in ee_poses.iter().enumerate().skip(1) {
        let drift = first.rotation.angle_to(&pose.rotation);
        if drift >= CONSTANT_ROTATION_TOL {
            return Err(Error::AssumptionViolation(format!(
                "end-effector rotation of pose {j} differs from pose 0 by {drift:e} rad"
            )));
        }
    }
    Ok(first.rotation)
}

fn reconstruct_with(
    profiles: &[LaserProfile],
    ee_poses: &[Transform],
    ee_from_sensor: &Transform,
    mode: ReconstructionMode,
) -> Result<ReconstructedCloud> {
    let ee_rotation = check_inputs(profiles, ee_poses)?;
    let total = profiles.iter().map(LaserProfile::len).sum();
    let mut points = Vec::with_capacity(total);
    for (profile, pose) in profiles.iter().zip(ee_poses) {
        let h = pose.compose(ee_from_sensor);
        points.extend(profile.points.iter().map(|p| CloudPoint {
            position: h.apply(&p.position),
            intensity: p.intensity,
        }));
    }
    Ok(ReconstructedCloud {
        cloud: PointCloud::new("B", points)?,
        ee_rotation,
        mode,
    })
}

/// `Π = ⋃_j ᴮH_{E_j} ᴱH_S ᴾ_j`.
pub fn reconstruct_true(
    profiles: &[LaserProfile],
    ee_poses: &[Transform],
    hand_eye: &Transform,
) -> Result<ReconstructedCloud> {
    reconstruct_with(profiles, ee_poses, hand_eye, ReconstructionMode::TrueHandEye)
}

/// `Π′ = ⋃_j ᴮH_{E_j} ᴱH_{E[S]} ᴾ_j`, needing only the hand-eye rotation.
pub fn reconstruct_rotation_only(
    profiles: &[LaserProfile],
    ee_poses: &[Transform],
    hand_eye_rotation: &Rotation,
) -> Result<ReconstructedCloud> {
    reconstruct_with(
        profiles,
        ee_poses,
        &Transform::from_rotation(*hand_eye_rotation),
        ReconstructionMode::RotationOnly,
    )
}

/// Offset `ᴮR_{E_1} ᴱo_S` that maps `Π′` onto `Π`.
pub fn rotation_only_offset(ee_rotation: &Rotation, hand_eye_translation: &Vec3) -> Vec3 {
    ee_rotation.rotate(hand_eye_translation)
}

pub fn save_reconstructed(rc: &ReconstructedCloud, path: &Path) -> Result<()> {
    let m = rc.ee_rotation.matrix();
    let entries: Vec<String> = (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .map(|(i, j)| m[(i, j)].to_string())
        .collect();
    save_cloud_with_comments(
        &rc.cloud,
        &[
            format!("mode {}", rc.mode.as_str()),
            format!("ee_rotation {}", entries.join(" ")),
        ],
        path,
    )
}

pub fn load_reconstructed(path: &Path) -> Result<ReconstructedCloud> {
    let doc = load_ply(path)?;
    let mut mode = None;
    let mut rotation = None;
    for c in &doc.comments {
        if let Some(m) = c.strip_prefix("mode ") {
            mode = match m.trim() {
                "true_hand_eye" => Some(ReconstructionMode::TrueHandEye),
                "rotation_only" => Some(ReconstructionMode::RotationOnly),
                other => return Err(Error::parse(0, format!("unknown mode '{other}'")).with_path(path)),
            };
        } else if let Some(r) = c.strip_prefix("ee_rotation ") {
            let v: Vec<f64> = r
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(0, "non-numeric ee_rotation comment").with_path(path))?;
            if v.len() != 9 {
                return Err(Error::parse(0, "ee_rotation needs 9 values").with_path(path));
            }
            rotation = Some(Rotation::from_matrix(nalgebra::Matrix3::from_row_slice(&v))?);
        }
    }
    match (mode, rotation) {
        (Some(mode), Some(ee_rotation)) => Ok(ReconstructedCloud {
            cloud: doc.cloud,
            ee_rotation,
            mode,
        }),
        _ => Err(Error::parse(0, "missing mode or ee_rotation comment").with_path(path)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(points: &[(f64, f64)]) -> LaserProfile {
        LaserProfile::new(
            points
                .iter()
                .map(|&(x, z)| CloudPoint::with_intensity(Vec3::new(x, 0.0, z), 1.0))
                .collect(),
            0,
        )
        .unwrap()
    }

    #[test]
    fn identity_everywhere() {
        let p = profile(&[(1.0, 2.0), (-3.0, 4.0)]);
        let rc = reconstruct_true(&[p.clone()], &[Transform::identity()], &Transform::identity()).unwrap();
        assert_eq!(rc.cloud.points, p.points);
        assert_eq!(rc.cloud.frame(), "B");
    }

    #[test]
    fn zero_translation_matches_true() {
        let he = Transform::from_rotation(Rotation::about_y(0.3));
        let poses: Vec<Transform> = (0..4)
            .map(|j| Transform::new(Rotation::about_z(0.2), Vec3::new(j as f64, 0.0, 100.0)))
            .collect();
        let profiles: Vec<LaserProfile> = (0..4).map(|j| profile(&[(j as f64, 50.0), (2.0, 60.0)])).collect();
        let a = reconstruct_true(&profiles, &poses, &he).unwrap();
        let b = reconstruct_rotation_only(&profiles, &poses, &he.rotation).unwrap();
        assert_eq!(a.cloud.points, b.cloud.points);
    }

    #[test]
    fn rotation_drift_rejected() {
        let poses = [
            Transform::new(Rotation::about_z(0.2), Vec3::zeros()),
            Transform::new(Rotation::about_z(0.3), Vec3::zeros()),
        ];
        let profiles = [profile(&[(0.0, 1.0)]), profile(&[(0.0, 1.0)])];
        let err = reconstruct_true(&profiles, &poses, &Transform::identity()).unwrap_err();
        assert!(matches!(err, Error::AssumptionViolation(_)));
        let err = reconstruct_true(&profiles[..1], &poses, &Transform::identity()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn empty_input() {
        let rc = reconstruct_rotation_only(&[], &[], &Rotation::identity()).unwrap();
        assert!(rc.cloud.is_empty());
    }

    #[test]
    fn ply_round_trip_keeps_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let rc = reconstruct_rotation_only(
            &[profile(&[(1.0, 2.0)])],
            &[Transform::new(Rotation::about_x(0.7), Vec3::new(1.0, 2.0, 3.0))],
            &Rotation::about_y(-0.2),
        )
        .unwrap();
        save_reconstructed(&rc, &path).unwrap();
        let back = load_reconstructed(&path).unwrap();
        assert_eq!(back.mode, ReconstructionMode::RotationOnly);
        assert!((back.ee_rotation.matrix() - rc.ee_rotation.matrix()).abs().max() < 1e-15);
        assert!((back.cloud.points[0].position - rc.cloud.points[0].position).norm() < 1e-12);
    }
}
