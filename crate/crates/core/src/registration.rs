//! Localizing a target model inside a reconstructed cloud.
//!
//! Pipeline: optional intensity binarization, statistical outlier removal,
//! coarse alignment, then point-to-point ICP. Every transform produced here
//! maps model (frame C) coordinates into scene coordinates, so its
//! translation is the target origin seen in the scene.

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geom::UnitAxis;
use crate::reconstruct::ReconstructedCloud;
use crate::spatial::{KdTree, TriangleBvh};
use crate::target::TriMesh;
use crate::{Rotation, Transform, Vec3};
use nalgebra::{Matrix3, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::OnceLock;

/// Below this inlier fraction a coarse alignment is reported as failed.
pub const MIN_COARSE_INLIER_FRACTION: f64 = 0.2;

/// Runner-up candidates within this relative inlier margin flag a
/// (near-)symmetric target.
pub const AMBIGUITY_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoarseMode {
    /// Centroid translation plus principal-axis alignment.
    PcaCentroid,
    /// Random scene triangles matched to congruent model triangles.
    RansacPoints,
    /// Principal-axis seeded rotation sweep, each seed refined by a short
    /// ICP and scored by the mean truncated distance of the scene.
    MultiStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationParams {
    /// Keep only scene points at or above `intensity_threshold` before
    /// registering (image targets).
    pub binarize: bool,
    pub intensity_threshold: f64,
    pub sor_k: usize,
    pub sor_stddev_mult: f64,
    pub coarse: CoarseMode,
    pub icp_max_iters: usize,
    /// Norm of the `(rotation vector, translation)` update that stops ICP.
    pub icp_tol: f64,
    /// Correspondences farther apart than this (mm) are ignored.
    pub icp_max_corr_dist: f64,
    /// Hypothesis budget of the RANSAC coarse mode.
    pub ransac_iters: usize,
    /// Congruence and inlier distance (mm) for coarse alignment.
    pub ransac_inlier_dist: f64,
    /// Voxel size (mm) used to thin clouds for coarse alignment; 0 picks one
    /// from the model size.
    pub coarse_voxel: f64,
    /// Angular step (degrees) of the multi-start rotation sweep.
    pub multi_start_step_deg: f64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            binarize: false,
            intensity_threshold: 0.5,
            sor_k: 8,
            sor_stddev_mult: 1.0,
            coarse: CoarseMode::MultiStart,
            icp_max_iters: 100,
            icp_tol: 1e-6,
            icp_max_corr_dist: 10.0,
            ransac_iters: 2000,
            ransac_inlier_dist: 1.0,
            coarse_voxel: 0.0,
            multi_start_step_deg: 15.0,
        }
    }
}

impl RegistrationParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sor_stddev_mult", self.sor_stddev_mult),
            ("icp_tol", self.icp_tol),
            ("icp_max_corr_dist", self.icp_max_corr_dist),
            ("ransac_inlier_dist", self.ransac_inlier_dist),
            ("multi_start_step_deg", self.multi_start_step_deg),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.sor_k == 0 || self.icp_max_iters == 0 || self.ransac_iters == 0 {
            return Err(Error::InvalidArgument(
                "sor_k, icp_max_iters and ransac_iters must be at least 1".into(),
            ));
        }
        if !(self.coarse_voxel >= 0.0) {
            return Err(Error::InvalidArgument("coarse_voxel must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    /// Model-to-scene transform, ᴮH_{C'} when the scene is a reconstruction.
    pub transform: Transform,
    /// RMS distance (mm) of the final inlier correspondences.
    pub rms_error: f64,
    /// Fraction of scene points with a correspondence within the cut-off.
    pub inlier_fraction: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// Truncated RMS `sqrt(mean(min(d², c²)))` before each update and after
    /// the last one; non-increasing by construction.
    #[serde(skip)]
    pub objective_history: Vec<f64>,
}

/// Outcome of coarse alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseAlignment {
    pub transform: Transform,
    pub inlier_fraction: f64,
    /// Best score among candidates that differ from the winner.
    pub runner_up_fraction: Option<f64>,
    /// The runner-up scored within [`AMBIGUITY_MARGIN`] of the winner.
    pub ambiguous: bool,
}

// ---------------------------------------------------------------- filters

/// Keeps points with intensity at or above `threshold`.
pub fn binarize_by_intensity(c: &PointCloud, threshold: f64) -> Result<PointCloud> {
    if !c.has_intensity() {
        return Err(Error::InvalidArgument(
            "intensity binarization needs every point to carry an intensity".into(),
        ));
    }
    let kept = c
        .points
        .iter()
        .filter(|p| p.intensity.is_some_and(|i| i >= threshold))
        .copied()
        .collect();
    PointCloud::new(c.frame(), kept)
}

/// Drops points whose mean distance to their `k` nearest neighbours exceeds
/// the global mean of that statistic by more than `stddev_mult` standard
/// deviations.
pub fn statistical_outlier_removal(c: &PointCloud, k: usize, stddev_mult: f64) -> Result<PointCloud> {
    if k == 0 {
        return Err(Error::InvalidArgument("sor_k must be at least 1".into()));
    }
    if c.len() <= k {
        return Err(Error::InvalidArgument(format!(
            "outlier removal with k = {k} needs more than {k} points, got {}",
            c.len()
        )));
    }
    let positions = c.positions();
    let tree = KdTree::new(&positions);
    let stats: Vec<f64> = positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let nbrs = tree.k_nearest(p, k + 1);
            let mut sum = 0.0;
            let mut used = 0;
            for n in nbrs.iter().filter(|n| n.index != i).take(k) {
                sum += n.dist_sq.sqrt();
                used += 1;
            }
            sum / used as f64
        })
        .collect();
    let n = stats.len() as f64;
    let mean = stats.iter().sum::<f64>() / n;
    let var = stats.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let bound = mean + stddev_mult * var.sqrt();
    let kept = c
        .points
        .iter()
        .zip(&stats)
        .filter(|(_, &s)| s <= bound)
        .map(|(p, _)| *p)
        .collect();
    PointCloud::new(c.frame(), kept)
}

/// Centroid of the points falling in each voxel, ordered by the first point
/// that entered the voxel.
pub fn voxel_downsample(points: &[Vec3], voxel: f64) -> Vec<Vec3> {
    if !(voxel > 0.0) {
        return points.to_vec();
    }
    let mut cells: HashMap<[i64; 3], usize> = HashMap::new();
    let mut acc: Vec<(Vec3, usize)> = Vec::new();
    for p in points {
        let key = [
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        ];
        let slot = *cells.entry(key).or_insert_with(|| {
            acc.push((Vec3::zeros(), 0));
            acc.len() - 1
        });
        acc[slot].0 += p;
        acc[slot].1 += 1;
    }
    acc.into_iter().map(|(s, n)| s / n as f64).collect()
}

// ---------------------------------------------------------------- rigid fit

/// Least-squares rigid transform taking `src[i]` onto `dst[i]`.
pub fn kabsch(src: &[Vec3], dst: &[Vec3]) -> Option<Transform> {
    if src.len() != dst.len() || src.is_empty() {
        return None;
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let v = svd.v_t?.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = Rotation::from_matrix_unchecked(v * d * u.transpose());
    let t = cd - r.rotate(&cs);
    Some(Transform::new(r, t))
}

fn twist_norm(from: &Transform, to: &Transform) -> f64 {
    let delta = to.compose(&from.inverse());
    delta.rotation.angle().hypot(delta.translation.norm())
}

// ---------------------------------------------------------------- model cache

/// A model cloud with the search structures registration needs, built once
/// and reused across scenes.
#[derive(Debug)]
pub struct PreparedModel {
    cloud: PointCloud,
    positions: Vec<Vec3>,
    tree: KdTree,
    centroid: Vec3,
    diameter: f64,
    spacing: f64,
    mesh: Option<TriangleBvh>,
    coarse: OnceLock<CoarseModel>,
}

#[derive(Debug)]
struct CoarseModel {
    voxel: f64,
    points: Vec<Vec3>,
    tree: KdTree,
    frame: PcaFrame,
    /// Per point: other points sorted by distance, for congruence search.
    by_distance: OnceLock<Vec<Vec<(f64, u32)>>>,
}

impl PreparedModel {
    pub fn new(model: &PointCloud) -> Result<Self> {
        if model.is_empty() {
            return Err(Error::InvalidArgument("model cloud is empty".into()));
        }
        let positions = model.positions();
        let tree = KdTree::new(&positions);
        let (lo, hi) = model.bounds().expect("non-empty");
        let diameter = (hi - lo).norm();
        let centroid = positions.iter().sum::<Vec3>() / positions.len() as f64;
        // Median nearest-neighbour distance over a strided sample.
        let stride = (positions.len() / 500).max(1);
        let mut nn: Vec<f64> = positions
            .iter()
            .enumerate()
            .step_by(stride)
            .filter_map(|(i, p)| {
                tree.k_nearest(p, 2)
                    .into_iter()
                    .find(|n| n.index != i)
                    .map(|n| n.dist_sq.sqrt())
            })
            .collect();
        nn.sort_by(f64::total_cmp);
        let spacing = nn.get(nn.len() / 2).copied().unwrap_or(0.0);
        Ok(Self {
            cloud: model.clone(),
            positions,
            tree,
            centroid,
            diameter,
            spacing,
            mesh: None,
            coarse: OnceLock::new(),
        })
    }

    /// Like [`PreparedModel::new`], but fine registration pairs scene points
    /// with their exact closest point on `mesh` (in the model frame) instead
    /// of the nearest sample.
    pub fn with_mesh(model: &PointCloud, mesh: &TriMesh) -> Result<Self> {
        mesh.validate()?;
        let mut m = Self::new(model)?;
        let tris = (0..mesh.triangles.len()).map(|t| mesh.corners(t)).collect();
        m.mesh = Some(TriangleBvh::new(tris));
        Ok(m)
    }

    pub fn has_mesh(&self) -> bool {
        self.mesh.is_some()
    }

    fn fine_surface(&self) -> Surface<'_> {
        match &self.mesh {
            Some(bvh) => Surface::Mesh(bvh),
            None => Surface::Points(&self.tree, &self.positions),
        }
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    /// Bounding-box diagonal (mm).
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Median nearest-neighbour distance (mm).
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    fn coarse_voxel(&self, params: &RegistrationParams) -> f64 {
        if params.coarse_voxel > 0.0 {
            params.coarse_voxel
        } else {
            (self.diameter / 25.0).max(self.spacing)
        }
    }

    fn coarse(&self, params: &RegistrationParams) -> &CoarseModel {
        self.coarse.get_or_init(|| {
            let voxel = self.coarse_voxel(params);
            let points = voxel_downsample(&self.positions, voxel);
            let tree = KdTree::new(&points);
            let frame = PcaFrame::of(&points);
            CoarseModel {
                voxel,
                points,
                tree,
                frame,
                by_distance: OnceLock::new(),
            }
        })
    }


    /// Fraction of `scene` points within `dist` of the model under `t`.
    fn inlier_fraction(&self, scene: &[Vec3], t: &Transform, dist: f64) -> f64 {
        fraction_within(scene, t, &self.tree, dist)
    }

    fn score_dist(&self, params: &RegistrationParams) -> f64 {
        params.ransac_inlier_dist.max(2.0 * self.spacing)
    }
}

/// Fraction of `scene` points within `dist` of a point of `tree` under `t`
/// (model to scene).
fn fraction_within(scene: &[Vec3], t: &Transform, tree: &KdTree, dist: f64) -> f64 {
    if scene.is_empty() {
        return 0.0;
    }
    let inv = t.inverse();
    let d2 = dist * dist;
    let hits = scene
        .iter()
        .filter(|s| tree.nearest(&inv.apply(s)).is_some_and(|n| n.dist_sq <= d2))
        .count();
    hits as f64 / scene.len() as f64
}

/// Mean of `min(d, cap)` over `scene`, `d` being the distance to the nearest
/// point of `tree` under `t` (model to scene).
fn mean_truncated_distance(scene: &[Vec3], t: &Transform, tree: &KdTree, cap: f64) -> f64 {
    if scene.is_empty() {
        return cap;
    }
    let inv = t.inverse();
    let sum: f64 = scene
        .iter()
        .map(|s| tree.nearest(&inv.apply(s)).map_or(cap, |n| n.dist_sq.sqrt().min(cap)))
        .sum();
    sum / scene.len() as f64
}

// ---------------------------------------------------------------- PCA

#[derive(Debug, Clone)]
struct PcaFrame {
    centroid: Vec3,
    /// Right-handed principal axes as columns, by decreasing variance.
    axes: Matrix3<f64>,
    variances: [f64; 3],
}

impl PcaFrame {
    fn of(points: &[Vec3]) -> Self {
        let n = points.len().max(1) as f64;
        let centroid = points.iter().sum::<Vec3>() / n;
        let mut cov = Matrix3::zeros();
        for p in points {
            let d = p - centroid;
            cov += d * d.transpose();
        }
        cov /= n;
        let eig = SymmetricEigen::new(cov);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut axes = Matrix3::zeros();
        for (k, &i) in order.iter().enumerate() {
            let mut a = eig.eigenvectors.column(i).into_owned();
            // Third-moment sign test; falls back to a fixed orientation.
            let m3: f64 = points.iter().map(|p| (p - centroid).dot(&a).powi(3)).sum();
            let lead = if m3.abs() > 1e-9 * n { m3 } else { a.iter().copied().find(|v| v.abs() > 1e-12).unwrap_or(1.0) };
            if lead < 0.0 {
                a = -a;
            }
            axes.set_column(k, &a);
        }
        let third = axes.column(0).cross(&axes.column(1));
        axes.set_column(2, &third);
        let variances = [
            eig.eigenvalues[order[0]],
            eig.eigenvalues[order[1]],
            eig.eigenvalues[order[2]],
        ];
        Self {
            centroid,
            axes,
            variances,
        }
    }

    /// Index of the axis whose variance is best separated from the others.
    fn distinct_axis(&self) -> usize {
        let [a, b, c] = self.variances.map(|v| v.max(0.0));
        let gap_low = if b > 0.0 { (b - c) / b } else { 0.0 };
        let gap_high = if a > 0.0 { (a - b) / a } else { 0.0 };
        if gap_low >= gap_high {
            2
        } else {
            0
        }
    }
}

// ---------------------------------------------------------------- coarse

/// Aligns `model` into `scene` without an initial guess.
pub fn coarse_align<R: Rng + ?Sized>(
    scene: &PointCloud,
    model: &PointCloud,
    params: &RegistrationParams,
    rng: &mut R,
) -> Result<CoarseAlignment> {
    let prepared = PreparedModel::new(model)?;
    coarse_align_prepared(scene, &prepared, params, rng)
}

pub fn coarse_align_prepared<R: Rng + ?Sized>(
    scene: &PointCloud,
    model: &PreparedModel,
    params: &RegistrationParams,
    rng: &mut R,
) -> Result<CoarseAlignment> {
    if scene.is_empty() {
        return Err(Error::InvalidArgument("scene cloud is empty".into()));
    }
    params.validate()?;
    let scene_pts = scene.positions();
    match params.coarse {
        CoarseMode::PcaCentroid => Ok(pca_centroid(&scene_pts, model, params)),
        CoarseMode::RansacPoints => ransac_points(&scene_pts, model, params, rng),
        CoarseMode::MultiStart => multi_start(&scene_pts, model, params),
    }
}

fn pca_centroid(scene: &[Vec3], model: &PreparedModel, params: &RegistrationParams) -> CoarseAlignment {
    let fs = PcaFrame::of(scene);
    let fm = PcaFrame::of(&model.positions);
    let r = Rotation::from_matrix_unchecked(fs.axes * fm.axes.transpose());
    let transform = Transform::new(r, fs.centroid - r.rotate(&fm.centroid));
    let probe = probe_subset(scene, 2000);
    CoarseAlignment {
        inlier_fraction: model.inlier_fraction(&probe, &transform, model.score_dist(params)),
        transform,
        runner_up_fraction: None,
        ambiguous: false,
    }
}

/// Evenly strided subset of at most `max` points.
fn probe_subset(points: &[Vec3], max: usize) -> Vec<Vec3> {
    if points.len() <= max {
        return points.to_vec();
    }
    let stride = points.len() as f64 / max as f64;
    (0..max).map(|i| points[(i as f64 * stride) as usize]).collect()
}

struct Candidate {
    transform: Transform,
    score: f64,
}

/// Poses differ by more than `min_angle` or move the model point `centre`
/// apart by more than two voxels.
fn is_distinct(a: &Transform, b: &Transform, centre: &Vec3, voxel: f64, min_angle: f64) -> bool {
    a.rotation.angle_to(&b.rotation) > min_angle || (a.apply(centre) - b.apply(centre)).norm() > 2.0 * voxel
}

/// Best candidate plus the best one that is not a near-duplicate of it.
fn rank_candidates(mut cands: Vec<Candidate>, centre: &Vec3, voxel: f64, min_angle: f64) -> Option<(Candidate, Option<f64>)> {
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut it = cands.into_iter();
    let best = it.next()?;
    let runner_up = it
        .find(|c| is_distinct(&c.transform, &best.transform, centre, voxel, min_angle))
        .map(|c| c.score);
    Some((best, runner_up))
}

fn finish_coarse(best: Candidate, runner_up: Option<f64>) -> Result<CoarseAlignment> {
    if best.score < MIN_COARSE_INLIER_FRACTION {
        return Err(Error::CoarseAlignmentFailed {
            best_inlier_fraction: best.score,
        });
    }
    let ambiguous = runner_up.is_some_and(|r| r >= best.score * (1.0 - AMBIGUITY_MARGIN));
    if ambiguous {
        log::warn!(
            "coarse alignment is ambiguous (best inlier fraction {:.3}, runner-up {:.3}); the target may be symmetric",
            best.score,
            runner_up.unwrap_or(0.0)
        );
    }
    Ok(CoarseAlignment {
        transform: best.transform,
        inlier_fraction: best.score,
        runner_up_fraction: runner_up,
        ambiguous,
    })
}

fn multi_start(scene: &[Vec3], model: &PreparedModel, params: &RegistrationParams) -> Result<CoarseAlignment> {
    let cm = model.coarse(params);
    let voxel = cm.voxel;
    // Raw points, not voxel centroids: averaging across step edges biases
    // the seeds towards tilted poses.
    let thin = probe_subset(scene, MULTI_START_POINTS);
    if thin.len() < 3 {
        return Err(Error::CoarseAlignmentFailed {
            best_inlier_fraction: 0.0,
        });
    }
    let fs = PcaFrame::of(&thin);
    let fm = &cm.frame;
    let step = params.multi_start_step_deg.to_radians();
    let n_phi = ((2.0 * std::f64::consts::PI / step).round() as usize).max(1);

    // Scene axis k is paired with model axis k; the sweep spins about the
    // best-separated axis, for both of its orientations.
    let k = fs.distinct_axis();
    let spin_axis = UnitAxis::new(fs.axes.column(k).into_owned()).unwrap_or_else(|_| UnitAxis::z());
    let flip = {
        let mut d = Matrix3::identity();
        let other = if k == 2 { 1 } else { 2 };
        d[(k, k)] = -1.0;
        d[(other, other)] = -1.0;
        d
    };
    let score_dist = model.score_dist(params);
    let probe = probe_subset(scene, 600);
    let mut cands = Vec::with_capacity(2 * n_phi);
    for d in [Matrix3::identity(), flip] {
        let base = fs.axes * d * fm.axes.transpose();
        for i in 0..n_phi {
            let r = Rotation::from_axis_angle(&spin_axis, i as f64 * step) * Rotation::from_matrix_unchecked(base);
            let init = Transform::new(r, fs.centroid - r.rotate(&fm.centroid));
            let refined = icp_core(&thin, Surface::Points(&cm.tree, &cm.points), init, 3.0 * voxel, 10, 1e-3 * voxel).transform;
            let score = -mean_truncated_distance(&thin, &refined, &model.tree, voxel);
            cands.push(Candidate {
                transform: refined,
                score,
            });
        }
    }
    let polished = polish(cands, model, &probe, voxel, 0.5 * step, score_dist, POLISHED_CANDIDATES, 15);
    let (best, runner_up) = rank_candidates(polished, &model.centroid, voxel, 2.0 * step).expect("at least one candidate");
    finish_coarse(best, runner_up)
}

/// Refines the strongest distinct candidates against the full model and
/// rescores them, so that near-misses of the true pose score as it does.
fn polish(
    mut cands: Vec<Candidate>,
    model: &PreparedModel,
    probe: &[Vec3],
    voxel: f64,
    min_angle: f64,
    score_dist: f64,
    count: usize,
    iters: usize,
) -> Vec<Candidate> {
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut leaders: Vec<Candidate> = Vec::with_capacity(count);
    for c in cands {
        if leaders.len() == count {
            break;
        }
        if leaders.iter().all(|l| is_distinct(&c.transform, &l.transform, &model.centroid, 0.5 * voxel, min_angle)) {
            leaders.push(c);
        }
    }
    let fine = Surface::Points(&model.tree, &model.positions);
    let max_corr = 2.0 * voxel.max(score_dist);
    leaders
        .into_iter()
        .map(|c| {
            let t = icp_core(probe, fine, c.transform, max_corr, iters, 1e-4 * max_corr).transform;
            Candidate {
                transform: t,
                score: model.inlier_fraction(probe, &t, score_dist),
            }
        })
        .collect()
}

/// RANSAC candidates refined against the full model.
const RANSAC_POLISHED_CANDIDATES: usize = 8;

/// Scene triangles the RANSAC hypothesis budget is spread over.
const RANSAC_MIN_TRIANGLES: usize = 40;

/// Scene points used to rank multi-start seeds.
const MULTI_START_POINTS: usize = 200;

/// Candidates refined against the full model in the last multi-start stage.
const POLISHED_CANDIDATES: usize = 3;

fn ransac_points<R: Rng + ?Sized>(
    scene: &[Vec3],
    model: &PreparedModel,
    params: &RegistrationParams,
    rng: &mut R,
) -> Result<CoarseAlignment> {
    // Small clouds are matched point for point; larger ones are thinned.
    let small = model.positions.len() <= 3000 && scene.len() <= 3000;
    let (voxel, mpts, mtree): (f64, &[Vec3], &KdTree) = if small {
        (0.0, &model.positions, &model.tree)
    } else {
        let cm = model.coarse(params);
        (cm.voxel, &cm.points, &cm.tree)
    };
    let spts = if small { scene.to_vec() } else { voxel_downsample(scene, voxel) };
    let tol = params.ransac_inlier_dist + voxel;
    let d_lo = (0.15 * model.diameter).max(3.0 * tol);
    let d_hi = 0.7 * model.diameter;

    let by_distance: Vec<Vec<(f64, u32)>>;
    let lists: &[Vec<(f64, u32)>] = if small {
        by_distance = distance_lists(mpts, d_lo - tol, d_hi + tol);
        &by_distance
    } else {
        model
            .coarse(params)
            .by_distance
            .get_or_init(|| distance_lists(mpts, d_lo - tol, d_hi + tol))
    };

    let score_dist = model.score_dist(params);
    let loose_dist = score_dist + voxel;
    let probe = probe_subset(scene, 600);
    let thin = probe_subset(scene, MULTI_START_POINTS);
    let mut quick: Vec<Vec3> = probe_subset(&spts, 64);
    quick.shuffle(rng);
    quick.truncate(12);
    let stree = KdTree::new(&spts);

    let mut cands: Vec<Candidate> = Vec::new();
    let mut hypotheses = 0usize;
    let mut anchors: Vec<usize> = (0..mpts.len()).collect();
    let max_triangles = params.ransac_iters.max(1);
    // Spread the budget over many scene triangles.
    let per_triangle = (params.ransac_iters / RANSAC_MIN_TRIANGLES).max(1);
    'outer: for _ in 0..max_triangles {
        let mut used = 0usize;
        let Some([a, b, c]) = sample_triangle(&spts, &stree, d_lo, d_hi, rng) else {
            continue;
        };
        let (dab, dac, dbc) = ((spts[a] - spts[b]).norm(), (spts[a] - spts[c]).norm(), (spts[b] - spts[c]).norm());
        anchors.shuffle(rng);
        'triangle: for &ia in &anchors {
            let list = &lists[ia];
            for &(_, ib) in window(list, dab, tol) {
                for &(_, ic) in window(list, dac, tol) {
                    let (pb, pc) = (mpts[ib as usize], mpts[ic as usize]);
                    if ((pb - pc).norm() - dbc).abs() > tol {
                        continue;
                    }
                    hypotheses += 1;
                    used += 1;
                    let Some(t) = kabsch(&[mpts[ia], pb, pc], &[spts[a], spts[b], spts[c]]) else {
                        continue;
                    };
                    let inv = t.inverse();
                    let misses = quick
                        .iter()
                        .filter(|s| mtree.nearest(&inv.apply(s)).map_or(true, |n| n.dist_sq.sqrt() > loose_dist))
                        .count();
                    if misses <= quick.len() / 2 {
                        // A short ICP on the thinned scene absorbs the
                        // triangle's congruence slack before scoring.
                        let t = icp_core(&thin, Surface::Points(mtree, mpts), t, 3.0 * tol, 5, 1e-3 * tol).transform;
                        let score = -mean_truncated_distance(&thin, &t, &model.tree, tol);
                        cands.push(Candidate { transform: t, score });
                    }
                    if hypotheses >= params.ransac_iters {
                        break 'outer;
                    }
                    if used >= per_triangle {
                        break 'triangle;
                    }
                }
            }
        }
    }
    let polished = polish(cands, model, &probe, voxel, 0.1, score_dist, RANSAC_POLISHED_CANDIDATES, 30);
    let Some((best, runner_up)) = rank_candidates(polished, &model.centroid, voxel.max(params.ransac_inlier_dist), 0.2) else {
        return Err(Error::CoarseAlignmentFailed {
            best_inlier_fraction: 0.0,
        });
    };
    finish_coarse(best, runner_up)
}

fn distance_lists(points: &[Vec3], lo: f64, hi: f64) -> Vec<Vec<(f64, u32)>> {
    points
        .iter()
        .map(|p| {
            let mut v: Vec<(f64, u32)> = points
                .iter()
                .enumerate()
                .map(|(j, q)| ((p - q).norm(), j as u32))
                .filter(|&(d, _)| d >= lo && d <= hi)
                .collect();
            v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            v
        })
        .collect()
}

fn window(list: &[(f64, u32)], d: f64, tol: f64) -> &[(f64, u32)] {
    let start = list.partition_point(|e| e.0 < d - tol);
    let end = list.partition_point(|e| e.0 <= d + tol);
    &list[start..end.max(start)]
}

fn sample_triangle<R: Rng + ?Sized>(pts: &[Vec3], tree: &KdTree, d_lo: f64, d_hi: f64, rng: &mut R) -> Option<[usize; 3]> {
    let a = rng.gen_range(0..pts.len());
    let ring: Vec<usize> = tree
        .within_radius(&pts[a], d_hi)
        .into_iter()
        .filter(|&j| (pts[j] - pts[a]).norm() >= d_lo)
        .collect();
    if ring.len() < 2 {
        return None;
    }
    for _ in 0..20 {
        let b = ring[rng.gen_range(0..ring.len())];
        let c = ring[rng.gen_range(0..ring.len())];
        let bc = (pts[b] - pts[c]).norm();
        if b == c || bc < d_lo || bc > d_hi {
            continue;
        }
        let area2 = (pts[b] - pts[a]).cross(&(pts[c] - pts[a])).norm();
        // Reject thin triangles: height over the longest side.
        let longest = (pts[b] - pts[a]).norm().max((pts[c] - pts[a]).norm()).max(bc);
        if area2 / longest < 0.3 * d_lo {
            continue;
        }
        return Some([a, b, c]);
    }
    None
}

// ---------------------------------------------------------------- ICP

/// What scene points are paired with during ICP.
#[derive(Clone, Copy)]
enum Surface<'a> {
    Points(&'a KdTree, &'a [Vec3]),
    Mesh(&'a TriangleBvh),
}

impl Surface<'_> {
    #[inline]
    fn closest(&self, q: &Vec3) -> Option<(Vec3, f64)> {
        match self {
            Surface::Points(tree, pts) => tree.nearest(q).map(|n| (pts[n.index], n.dist_sq)),
            Surface::Mesh(bvh) => bvh.closest(q).map(|h| (h.point, h.dist_sq)),
        }
    }
}

struct IcpOutcome {
    transform: Transform,
    rms: f64,
    inliers: usize,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
}

/// Pairs of (model point, scene point) plus the objective they imply.
struct Pairs {
    src: Vec<Vec3>,
    dst: Vec<Vec3>,
    /// `Σ min(d², c²)` over all scene points.
    truncated: f64,
    /// `Σ d²` over the kept pairs.
    inlier_sq: f64,
}

fn correspond(scene: &[Vec3], surface: Surface<'_>, t: &Transform, c2: f64, out: &mut Pairs) {
    out.src.clear();
    out.dst.clear();
    out.truncated = 0.0;
    out.inlier_sq = 0.0;
    let inv = t.inverse();
    for s in scene {
        let q = inv.apply(s);
        let Some((m, d2)) = surface.closest(&q) else {
            out.truncated += c2;
            continue;
        };
        if d2 <= c2 {
            out.src.push(m);
            out.dst.push(*s);
            out.truncated += d2;
            out.inlier_sq += d2;
        } else {
            out.truncated += c2;
        }
    }
}

/// Rotation vector of `r`.
fn log_rotation(r: &Rotation) -> Vec3 {
    match r.axis_angle() {
        Ok((axis, angle)) => axis.into_inner() * angle,
        Err(_) => {
            let m = r.matrix();
            0.5 * Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
        }
    }
}

fn exp_rotation(v: &Vec3) -> Rotation {
    let angle = v.norm();
    match UnitAxis::normalize(*v) {
        Ok(axis) if angle > 0.0 => Rotation::from_axis_angle(&axis, angle),
        _ => Rotation::identity(),
    }
}

/// Pose as a 6-vector relative to `base`: `t = Δ ∘ base`, `Δ ↦ (log R_Δ, t_Δ)`.
fn to_vec6(t: &Transform, base_inv: &Transform) -> nalgebra::Vector6<f64> {
    let d = t.compose(base_inv);
    let w = log_rotation(&d.rotation);
    nalgebra::Vector6::new(w.x, w.y, w.z, d.translation.x, d.translation.y, d.translation.z)
}

fn from_vec6(v: &nalgebra::Vector6<f64>, base: &Transform) -> Transform {
    let d = Transform::new(
        exp_rotation(&Vec3::new(v[0], v[1], v[2])),
        Vec3::new(v[3], v[4], v[5]),
    );
    d.compose(base)
}

/// Depth of the Anderson acceleration history.
const ANDERSON_DEPTH: usize = 5;

/// Point-to-point ICP. Each scene point is paired with its closest model
/// point (or closest point on the model mesh); pairs farther apart than
/// `max_corr` are ignored.
///
/// The plain ICP update is a fixed-point map; Anderson acceleration is
/// applied on top of it and an accelerated step is only kept when it does
/// not increase the truncated objective, so the objective sequence stays
/// non-increasing.
fn icp_core(
    scene: &[Vec3],
    surface: Surface<'_>,
    init: Transform,
    max_corr: f64,
    max_iters: usize,
    tol: f64,
) -> IcpOutcome {
    let c2 = max_corr * max_corr;
    let n = scene.len().max(1) as f64;
    let base_inv = init.inverse();
    let mut t = init;
    let mut history = Vec::with_capacity(max_iters + 1);
    let mut pairs = Pairs {
        src: Vec::with_capacity(scene.len()),
        dst: Vec::with_capacity(scene.len()),
        truncated: 0.0,
        inlier_sq: 0.0,
    };
    let mut trial = Pairs {
        src: Vec::with_capacity(scene.len()),
        dst: Vec::with_capacity(scene.len()),
        truncated: 0.0,
        inlier_sq: 0.0,
    };
    // (G(x_i), G(x_i) − x_i) for recent iterates.
    let mut aa: Vec<(nalgebra::Vector6<f64>, nalgebra::Vector6<f64>)> = Vec::with_capacity(ANDERSON_DEPTH + 1);
    let mut iterations = 0;
    let mut converged = false;

    correspond(scene, surface, &t, c2, &mut pairs);
    history.push((pairs.truncated / n).sqrt());
    while iterations < max_iters && !pairs.src.is_empty() {
        let Some(plain) = kabsch(&pairs.src, &pairs.dst) else { break };
        iterations += 1;
        let x = to_vec6(&t, &base_inv);
        let g = to_vec6(&plain, &base_inv);
        aa.push((g, g - x));
        if aa.len() > ANDERSON_DEPTH + 1 {
            aa.remove(0);
        }

        let mut next = plain;
        let mut accepted = false;
        if aa.len() >= 2 {
            if let Some(xa) = anderson_step(&aa) {
                let cand = from_vec6(&xa, &init);
                correspond(scene, surface, &cand, c2, &mut trial);
                if !trial.src.is_empty() && trial.truncated <= pairs.truncated {
                    next = cand;
                    accepted = true;
                }
            }
        }
        if !accepted {
            correspond(scene, surface, &plain, c2, &mut trial);
        }
        std::mem::swap(&mut pairs, &mut trial);
        let step = twist_norm(&t, &next);
        t = next;
        history.push((pairs.truncated / n).sqrt());
        if step < tol {
            converged = true;
            break;
        }
    }
    let inliers = pairs.src.len();
    IcpOutcome {
        transform: t,
        rms: if inliers > 0 { (pairs.inlier_sq / inliers as f64).sqrt() } else { 0.0 },
        inliers,
        iterations,
        converged,
        history,
    }
}

/// Anderson mixing: `x = g_k − ΔG γ` with `γ = argmin ‖f_k − ΔF γ‖`.
fn anderson_step(hist: &[(nalgebra::Vector6<f64>, nalgebra::Vector6<f64>)]) -> Option<nalgebra::Vector6<f64>> {
    let k = hist.len() - 1;
    let mut df = nalgebra::DMatrix::<f64>::zeros(6, k);
    let mut dg = nalgebra::DMatrix::<f64>::zeros(6, k);
    for i in 0..k {
        df.set_column(i, &(hist[i + 1].1 - hist[i].1));
        dg.set_column(i, &(hist[i + 1].0 - hist[i].0));
    }
    let fk = nalgebra::DVector::from_column_slice(hist[k].1.as_slice());
    let gamma = df.svd(true, true).solve(&fk, 1e-12).ok()?;
    let x = hist[k].0 - nalgebra::Vector6::from_column_slice((dg * gamma).as_slice());
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Refines `init` (model to scene) by point-to-point ICP.
pub fn icp(scene: &PointCloud, model: &PointCloud, init: &Transform, params: &RegistrationParams) -> Result<RegistrationResult> {
    let prepared = PreparedModel::new(model)?;
    icp_prepared(scene, &prepared, init, params)
}

pub fn icp_prepared(
    scene: &PointCloud,
    model: &PreparedModel,
    init: &Transform,
    params: &RegistrationParams,
) -> Result<RegistrationResult> {
    if scene.is_empty() {
        return Err(Error::InvalidArgument("scene cloud is empty".into()));
    }
    params.validate()?;
    let pts = scene.positions();
    let out = icp_core(
        &pts,
        model.fine_surface(),
        *init,
        params.icp_max_corr_dist,
        params.icp_max_iters,
        params.icp_tol,
    );
    if out.inliers == 0 {
        return Err(Error::RegistrationFailed(format!(
            "no correspondences within {} mm",
            params.icp_max_corr_dist
        )));
    }
    Ok(RegistrationResult {
        transform: out.transform,
        rms_error: out.rms,
        inlier_fraction: out.inliers as f64 / pts.len() as f64,
        iterations_used: out.iterations,
        converged: out.converged,
        objective_history: out.history,
    })
}

// ---------------------------------------------------------------- pipeline

/// Full localization of `model` in a reconstructed cloud: ᴮH_{C'}.
pub fn localize_target<R: Rng + ?Sized>(
    recon: &ReconstructedCloud,
    model: &PointCloud,
    params: &RegistrationParams,
    rng: &mut R,
) -> Result<RegistrationResult> {
    let prepared = PreparedModel::new(model)?;
    localize_target_prepared(&recon.cloud, &prepared, params, rng)
}

pub fn localize_target_prepared<R: Rng + ?Sized>(
    scene: &PointCloud,
    model: &PreparedModel,
    params: &RegistrationParams,
    rng: &mut R,
) -> Result<RegistrationResult> {
    params.validate()?;
    let scene = preprocess(scene, params)?;
    let coarse = coarse_align_prepared(&scene, model, params, rng)?;
    // Converge on a thinned scene first; the full cloud then needs only a
    // few iterations.
    let pts = scene.positions();
    let init = if pts.len() > 2 * PRE_ICP_POINTS {
        let thin = probe_subset(&pts, PRE_ICP_POINTS);
        icp_core(
            &thin,
            model.fine_surface(),
            coarse.transform,
            params.icp_max_corr_dist,
            params.icp_max_iters,
            params.icp_tol,
        )
        .transform
    } else {
        coarse.transform
    };
    icp_prepared(&scene, model, &init, params)
}

const PRE_ICP_POINTS: usize = 1000;

/// Binarization (if enabled) followed by outlier removal.
pub fn preprocess(scene: &PointCloud, params: &RegistrationParams) -> Result<PointCloud> {
    let scene = if params.binarize {
        binarize_by_intensity(scene, params.intensity_threshold)?
    } else {
        scene.clone()
    };
    if scene.len() <= params.sor_k {
        return Err(Error::InvalidArgument(format!(
            "scene has {} points after filtering, too few to register",
            scene.len()
        )));
    }
    statistical_outlier_removal(&scene, params.sor_k, params.sor_stddev_mult)
}
