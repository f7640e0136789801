//! Hand-eye translation solver and its observability analysis.
//!
//! Each reconstructed cloud `i` contributes `ᴮo_C = ᴮo_{C'_i} + ᴮR_i ᴱo_S`,
//! which stacks into `A x = b` with block rows `[I₃ | −ᴮR_i]`,
//! `x = [ᴮo_C; ᴱo_S]` and `b` holding the registered origins `ᴮo_{C'_i}`.

mod qr;

pub use qr::ColPivQr;

use crate::error::{Error, Result};
use crate::geom::Rotation3;
use crate::scalar::Scalar;
use nalgebra::{DMatrix, DVector, Matrix3, SVector, Vector3};
use serde::{Deserialize, Serialize};
use std::fmt;

/// One reconstructed cloud after registration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct CalibObservation<T: Scalar> {
    /// `ᴮo_{C'_i}` in mm.
    pub registered_origin: Vector3<T>,
    /// `ᴮR_{E_1^i}`, the constant end-effector orientation of the cloud.
    pub ee_rotation: Rotation3<T>,
}

impl<T: Scalar> CalibObservation<T> {
    pub fn new(registered_origin: Vector3<T>, ee_rotation: Rotation3<T>) -> Self {
        Self {
            registered_origin,
            ee_rotation,
        }
    }
}

/// Stacked linear system `A x = b`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibSystem<T: Scalar> {
    pub a: DMatrix<T>,
    pub b: DVector<T>,
    pub m: usize,
}

impl<T: Scalar> CalibSystem<T> {
    /// Rotations read back from the `−ᴮR_i` blocks of `A`.
    pub fn rotations(&self) -> Vec<Rotation3<T>> {
        (0..self.m)
            .map(|i| {
                let block: Matrix3<T> = self.a.fixed_view::<3, 3>(3 * i, 3).into_owned();
                Rotation3::from_matrix_unchecked(-block)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankVerdict {
    Ok,
    TooFewClouds,
    IdenticalRotations,
    ParallelAxes,
    NearSingular,
}

impl RankVerdict {
    pub fn as_str(self) -> &'static str {
        match self {
            RankVerdict::Ok => "ok",
            RankVerdict::TooFewClouds => "too_few_clouds",
            RankVerdict::IdenticalRotations => "identical_rotations",
            RankVerdict::ParallelAxes => "parallel_axes",
            RankVerdict::NearSingular => "near_singular",
        }
    }
}

/// Outcome of the observability check on a set of end-effector rotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankDiagnosis {
    pub verdict: RankVerdict,
    /// Number of rotations (clouds).
    pub m: usize,
    /// Rank of `A` from its singular values.
    pub numeric_rank: usize,
    /// Smallest angle (rad) between the lines of two relative rotation axes
    /// `¹R_i`, `i ≥ 2`. `None` when fewer than two axes exist.
    pub min_relative_axis_angle: Option<f64>,
    /// Largest such angle; all axes are parallel when it is below tolerance.
    pub max_relative_axis_angle: Option<f64>,
    /// `σ_max / σ_min` of `A`; infinite when rank deficient.
    pub condition_number: f64,
}

impl RankDiagnosis {
    /// True when the system may be solved (possibly with a warning).
    pub fn is_solvable(&self) -> bool {
        self.numeric_rank == 6
            && matches!(self.verdict, RankVerdict::Ok | RankVerdict::NearSingular)
    }
}

impl fmt::Display for RankDiagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (m = {}, numeric rank {} of 6, condition number {:.3e}",
            self.verdict.as_str(),
            self.m,
            self.numeric_rank,
            self.condition_number
        )?;
        if let (Some(lo), Some(hi)) = (self.min_relative_axis_angle, self.max_relative_axis_angle) {
            write!(f, ", relative axis angles {lo:.3e}..{hi:.3e} rad")?;
        }
        f.write_str(")")
    }
}

/// Thresholds for the observability check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankOptions {
    /// Relative axes closer than this (rad) count as parallel.
    pub axis_parallel_tol: f64,
    /// Singular values below `rank_rtol · σ_max` count as zero.
    pub rank_rtol: f64,
    /// Largest entry difference at which two rotations count as identical.
    pub identical_tol: f64,
    /// Condition number above which a full-rank system is flagged.
    pub condition_warn: f64,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self {
            axis_parallel_tol: 1e-3,
            rank_rtol: 1e-9,
            identical_tol: 1e-9,
            condition_warn: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct CalibResult<T: Scalar> {
    /// `ᴱo_S` in mm.
    pub hand_eye_translation: Vector3<T>,
    /// `ᴮo_C` in mm.
    pub target_origin: Vector3<T>,
    /// `‖A x − b‖` in mm.
    pub residual_norm: T,
    /// Norm of each 3-row residual block, in mm.
    pub per_observation_residuals: Vec<T>,
    pub condition_number: T,
    pub diagnosis: RankDiagnosis,
}

impl<T: Scalar> CalibResult<T> {
    /// Plain-text summary; per-axis errors are listed when `truth` is given.
    pub fn summary(&self, truth: Option<&Vector3<T>>) -> String {
        let x = &self.hand_eye_translation;
        let mut s = format!(
            "hand-eye translation: x {:.6} y {:.6} z {:.6} mm\n",
            x[0], x[1], x[2]
        );
        if let Some(t) = truth {
            let d = (x - t).abs();
            s.push_str(&format!(
                "error vs truth:       dx {:.6} dy {:.6} dz {:.6} mm\n",
                d[0], d[1], d[2]
            ));
        }
        let o = &self.target_origin;
        s.push_str(&format!(
            "target origin:        x {:.6} y {:.6} z {:.6} mm\n",
            o[0], o[1], o[2]
        ));
        s.push_str(&format!(
            "residual norm {:.6e} mm, condition number {:.3e}, {}\n",
            self.residual_norm.as_f64(),
            self.condition_number.as_f64(),
            self.diagnosis
        ));
        s
    }
}

/// Stacks observations into `A x = b`.
pub fn build_system<T: Scalar>(obs: &[CalibObservation<T>]) -> Result<CalibSystem<T>> {
    if obs.is_empty() {
        return Err(Error::InvalidArgument("no calibration observations".into()));
    }
    let rotations: Vec<_> = obs.iter().map(|o| o.ee_rotation).collect();
    let mut sys = system_matrix(&rotations);
    for (i, o) in obs.iter().enumerate() {
        sys.b.fixed_rows_mut::<3>(3 * i).copy_from(&o.registered_origin);
    }
    Ok(sys)
}

fn system_matrix<T: Scalar>(rotations: &[Rotation3<T>]) -> CalibSystem<T> {
    let m = rotations.len();
    let mut a = DMatrix::zeros(3 * m, 6);
    for (i, r) in rotations.iter().enumerate() {
        a.fixed_view_mut::<3, 3>(3 * i, 0).fill_with_identity();
        a.fixed_view_mut::<3, 3>(3 * i, 3).copy_from(&(-r.matrix()));
    }
    CalibSystem {
        a,
        b: DVector::zeros(3 * m),
        m,
    }
}

fn singular_values<T: Scalar>(a: &DMatrix<T>) -> Vec<T> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<T> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    sv
}

/// Numeric rank of `a`: singular values above `rtol · σ_max`.
pub fn numeric_rank<T: Scalar>(a: &DMatrix<T>, rtol: f64) -> usize {
    rank_and_condition(&singular_values(a), rtol).0
}

fn rank_and_condition<T: Scalar>(sv: &[T], rtol: f64) -> (usize, f64) {
    let Some(&smax) = sv.first() else {
        return (0, f64::INFINITY);
    };
    if smax <= T::zero() {
        return (0, f64::INFINITY);
    }
    let cut = smax * T::tol(rtol);
    let rank = sv.iter().filter(|&&s| s > cut).count();
    let cond = if rank == 6 && sv.len() >= 6 {
        (smax / sv[5]).as_f64()
    } else {
        f64::INFINITY
    };
    (rank, cond)
}

fn rotations_identical<T: Scalar>(a: &Rotation3<T>, b: &Rotation3<T>, tol: f64) -> bool {
    (a.matrix() - b.matrix()).abs().max() <= T::tol(tol)
}

/// Observability check for a set of end-effector rotations.
///
/// Fewer than three rotations can never give full column rank; identical
/// rotations add no information; relative rotations `¹R_i = R₁ᵀ R_i` whose
/// axes are all parallel leave a one-dimensional nullspace.
pub fn check_rank_conditions<T: Scalar>(
    rotations: &[Rotation3<T>],
    opts: &RankOptions,
) -> RankDiagnosis {
    let m = rotations.len();
    let sys = system_matrix(rotations);
    let (numeric_rank, condition_number) = rank_and_condition(&singular_values(&sys.a), opts.rank_rtol);

    let mut identical = false;
    for i in 0..m {
        for j in i + 1..m {
            identical |= rotations_identical(&rotations[i], &rotations[j], opts.identical_tol);
        }
    }

    let mut axes = Vec::new();
    if let Some(r1) = rotations.first() {
        for r in &rotations[1..] {
            match (r1.transpose() * *r).axis_angle() {
                Ok((axis, _)) => axes.push(axis),
                Err(_) => identical = true,
            }
        }
    }
    let mut lo: Option<f64> = None;
    let mut hi: Option<f64> = None;
    for i in 0..axes.len() {
        for j in i + 1..axes.len() {
            let ang = axes[i].line_angle(&axes[j]).as_f64();
            lo = Some(lo.map_or(ang, |v| v.min(ang)));
            hi = Some(hi.map_or(ang, |v| v.max(ang)));
        }
    }

    let verdict = if m < 3 {
        RankVerdict::TooFewClouds
    } else if identical {
        RankVerdict::IdenticalRotations
    } else if hi.is_some_and(|h| h <= opts.axis_parallel_tol) {
        RankVerdict::ParallelAxes
    } else if numeric_rank < 6 || condition_number > opts.condition_warn {
        RankVerdict::NearSingular
    } else {
        RankVerdict::Ok
    };

    RankDiagnosis {
        verdict,
        m,
        numeric_rank,
        min_relative_axis_angle: lo,
        max_relative_axis_angle: hi,
        condition_number,
    }
}

/// A nullspace vector of the two-cloud system: with `a` the axis of
/// `R₁ᵀ R₂`, `v = k [R₁ a; a]`.
pub fn nullspace_vector_m2<T: Scalar>(
    r1: &Rotation3<T>,
    r2: &Rotation3<T>,
    k: T,
) -> Result<SVector<T, 6>> {
    let (axis, _) = (r1.transpose() * *r2).axis_angle()?;
    let a = axis.into_inner();
    let top = r1.rotate(&a);
    Ok(SVector::<T, 6>::from_column_slice(&[top[0], top[1], top[2], a[0], a[1], a[2]]) * k)
}

/// Least-squares solution via column-pivoted Householder QR.
pub fn solve_translation<T: Scalar>(sys: &CalibSystem<T>, opts: &RankOptions) -> Result<CalibResult<T>> {
    let qr = ColPivQr::new(&sys.a, T::tol(opts.rank_rtol));
    let Some(x) = qr.solve(&sys.b) else {
        return Err(Error::SingularSystem(check_rank_conditions(&sys.rotations(), opts)));
    };
    Ok(assemble_result(sys, x, opts))
}

/// The same least-squares problem through the normal equations
/// `x = (AᵀA)⁻¹ Aᵀ b`, kept as an independent reference.
pub fn solve_normal_equations<T: Scalar>(sys: &CalibSystem<T>) -> Result<DVector<T>> {
    let at = sys.a.transpose();
    let ata = &at * &sys.a;
    let atb = &at * &sys.b;
    ata.cholesky()
        .map(|c| c.solve(&atb))
        .ok_or_else(|| Error::SingularSystem(check_rank_conditions(&sys.rotations(), &RankOptions::default())))
}

fn assemble_result<T: Scalar>(sys: &CalibSystem<T>, x: DVector<T>, opts: &RankOptions) -> CalibResult<T> {
    let r = &sys.a * &x - &sys.b;
    let per_observation_residuals = (0..sys.m).map(|i| r.fixed_rows::<3>(3 * i).norm()).collect();
    let diagnosis = check_rank_conditions(&sys.rotations(), opts);
    let sv = singular_values(&sys.a);
    let condition_number = match (sv.first(), sv.last()) {
        (Some(&hi), Some(&lo)) if lo > T::zero() => hi / lo,
        _ => T::lit(f64::INFINITY),
    };
    CalibResult {
        target_origin: x.fixed_rows::<3>(0).into_owned(),
        hand_eye_translation: x.fixed_rows::<3>(3).into_owned(),
        residual_norm: r.norm(),
        per_observation_residuals,
        condition_number,
        diagnosis,
    }
}

/// Checks observability, then solves for `ᴱo_S` and `ᴮo_C`.
///
/// Refuses to solve (rather than regularize) when the rotations do not
/// give a full-rank system.
pub fn calibrate<T: Scalar>(obs: &[CalibObservation<T>], opts: &RankOptions) -> Result<CalibResult<T>> {
    let rotations: Vec<_> = obs.iter().map(|o| o.ee_rotation).collect();
    let diag = check_rank_conditions(&rotations, opts);
    if !diag.is_solvable() {
        return Err(Error::RankCondition(diag));
    }
    if diag.verdict == RankVerdict::NearSingular {
        log::warn!("calibration system is poorly conditioned: {diag}");
    }
    let sys = build_system(obs)?;
    solve_translation(&sys, opts)
}
