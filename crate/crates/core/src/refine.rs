//! Gradient descent on the losses over the source poses and, optionally,
//! log-depth.
//!
//! Every iteration recomputes the gates (validity, occlusion, direction and
//! task weights) at the current estimate and takes the step
//! `T <- exp(-step * g) * T` (and `log d <- log d - step * d * g_d`). The
//! trial step is the Barzilai-Borwein step from the previous iteration, at
//! least four times the last accepted step and at most the trust-region step
//! below; it is halved until the loss with this iteration's gates strictly
//! decreases. Starting the search large lets it cross the kinks of the L1
//! terms, where Barzilai-Borwein steps collapse.
//!
//! Rotation and translation move pixels at very different rates (a lateral
//! translation and a rotation about the vertical axis even move them almost
//! identically), so the raw twist gradient points along a narrow valley. With
//! `precondition` each source's twist gradient is multiplied by the inverse of
//! the 6x6 metric `mean_p (J_p^T J_p + e_p e_p^T)`, where `J_p` is the
//! derivative of the rigid reprojection of pixel `p` and `e_p` that of its
//! epipolar residual: steps are measured in image motion rather than in twist
//! units. The metric depends only on geometry, never on image content. The
//! same metric bounds every pose update to `max_update_px` of RMS image
//! motion, a trust region that keeps large steps from jumping across texture
//! periods.
//!
//! The L1 parts of the losses keep the gradient norm away from zero even at
//! the optimum, so besides the gradient tolerance the descent stops once the
//! loss itself falls to `loss_tol`, or when it has improved by less than the
//! relative `stall_tol` over the last `stall_window` iterations.
//!
//! The gates are discontinuous in the estimate: the epipolar task weight
//! re-enables a pixel's depth term once its flow comes close to the epipolar
//! line, which raises the loss even though the estimate improved. Backtracking
//! on the fresh-gate loss can therefore stall far from the optimum, so the
//! search holds the gates fixed within an iteration. The objective of each
//! iteration decreases strictly; the reported loss (fresh gates at each
//! iterate) is non-increasing except where gates switch on.
//!
//! The algebraic epipolar residual is far from convex in the pose, and from a
//! few degrees off its gradient often points away from the truth. The first
//! attempt therefore starts with `warmup_iterations` on the photometric terms
//! (epipolar weights zero, gates unchanged) before switching to the full loss.
//! A moving object can drag that photometric-only descent away, so unless the
//! attempt ends at the gradient or loss tolerance a second attempt descends
//! the full loss from the start, and the lower final loss wins. Both share
//! the iteration budget.

use std::io::Write;

use nalgebra::{Matrix6, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{fundamental_matrix, reproject, reproject_jacobian, so3_exp, Pose, Twist};
use crate::crossloss::{evaluate_gated, loss_gates, LossGates, LossKind};
use crate::error::{Error, Result};
use crate::grid::DepthMap;
use crate::loss::{LossConfig, LossState, NEXT, PREV};

/// Smallest trial step before the line search gives up.
pub const MIN_STEP: f64 = 1e-12;

/// Which loss drives the descent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineLoss {
    Ap,
    Total,
}

impl RefineLoss {
    pub fn kind(self) -> LossKind {
        match self {
            RefineLoss::Ap => LossKind::Ap,
            RefineLoss::Total => LossKind::Total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub optimize_pose: bool,
    /// Optimize log-depth; depth stays positive.
    pub optimize_depth: bool,
    /// Initial trial step.
    pub step: f64,
    pub iterations: usize,
    /// Stop once the gradient norm over the optimized variables drops below this.
    pub grad_tol: f64,
    /// Stop once the loss drops to this value; the losses vanish at an exact solution.
    pub loss_tol: f64,
    pub loss: RefineLoss,
    /// Measure pose steps in image motion (see the module docs).
    pub precondition: bool,
    /// Largest RMS image motion of one pose update, pixels.
    pub max_update_px: f64,
    /// Iterations over which progress is measured; 0 disables the stall rule.
    pub stall_window: usize,
    pub stall_tol: f64,
    /// Iterations run first with the epipolar weights at zero; 0 skips the warm-up.
    pub warmup_iterations: usize,
    /// Taken from the loss section of a run config, never from the refine section.
    #[serde(skip)]
    pub loss_config: LossConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            optimize_pose: true,
            optimize_depth: false,
            step: 1e-2,
            iterations: 500,
            grad_tol: 1e-6,
            loss_tol: 1e-8,
            loss: RefineLoss::Ap,
            precondition: true,
            max_update_px: 1.0,
            stall_window: 30,
            stall_tol: 1e-3,
            warmup_iterations: 100,
            loss_config: LossConfig::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("step must be > 0, got {}", self.step)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::Config(format!("grad_tol must be >= 0, got {}", self.grad_tol)));
        }
        if !(self.loss_tol >= 0.0) {
            return Err(Error::Config(format!("loss_tol must be >= 0, got {}", self.loss_tol)));
        }
        if !(self.max_update_px > 0.0) {
            return Err(Error::Config(format!("max_update_px must be > 0, got {}", self.max_update_px)));
        }
        if !(self.stall_tol >= 0.0) {
            return Err(Error::Config(format!("stall_tol must be >= 0, got {}", self.stall_tol)));
        }
        if !self.optimize_pose && !self.optimize_depth {
            return Err(Error::Config("nothing to optimize: enable pose and/or depth".into()));
        }
        self.loss_config.validate()
    }
}

/// Rotation error in degrees and translation-direction error in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rot_err_deg: f64,
    /// `100 * |t/|t| - t*/|t*||`; 0 when both translations vanish.
    pub trans_err_pct: f64,
}

impl PoseError {
    pub fn between(estimate: &Pose, truth: &Pose) -> Self {
        let rel = estimate.compose(&truth.inverse());
        let dir = |t: &Vector3<f64>| {
            let n = t.norm();
            if n > 0.0 {
                t / n
            } else {
                Vector3::zeros()
            }
        };
        PoseError {
            rot_err_deg: rel.rotation_angle().to_degrees(),
            trans_err_pct: 100.0 * (dir(estimate.translation()) - dir(truth.translation())).norm(),
        }
    }

    /// Worst of both sources, per component.
    pub fn worst(estimates: &[Pose; 2], truth: &[Pose; 2]) -> Self {
        let a = Self::between(&estimates[PREV], &truth[PREV]);
        let b = Self::between(&estimates[NEXT], &truth[NEXT]);
        PoseError {
            rot_err_deg: a.rot_err_deg.max(b.rot_err_deg),
            trans_err_pct: a.trans_err_pct.max(b.trans_err_pct),
        }
    }

    /// Single figure for comparisons: each component relative to its
    /// acceptance bound (0.1 degree, 1 percent), summed.
    pub fn score(&self) -> f64 {
        self.rot_err_deg / 0.1 + self.trans_err_pct
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Step accepted on this iteration; 0 on the last point.
    pub step: f64,
    pub error: Option<PoseError>,
    /// True while the epipolar terms are switched off.
    pub warmup: bool,
}

/// Why the descent stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    LossTolerance,
    IterationCap,
    /// Relative loss improvement over the stall window fell below the tolerance.
    Stalled,
    /// No decrease found above [`MIN_STEP`].
    LineSearch,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    /// Trajectory of the kept attempt.
    pub trajectory: Vec<TrajectoryPoint>,
    pub state: LossState,
    pub stop: StopReason,
    /// Iterations over every attempt.
    pub iterations_used: usize,
    /// True when the attempt without warm-up was kept.
    pub restarted: bool,
}

impl RefineOutcome {
    pub fn final_point(&self) -> &TrajectoryPoint {
        self.trajectory.last().expect("trajectory is never empty")
    }
}

struct Direction {
    gradient: Vec<f64>,
    /// Preconditioned gradient; the update is `-step * descent`.
    twist: [Twist; 2],
    log_depth: Option<Vec<f64>>,
    /// RMS image motion of the larger source per unit step.
    motion: f64,
}

impl Direction {
    fn flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.twist.iter().flat_map(|t| t.0).collect();
        if let Some(d) = &self.log_depth {
            v.extend_from_slice(d);
        }
        v
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `mean_p (J_p^T J_p + e_p e_p^T)` for source `s`, where `J_p` is the
/// derivative of the rigid reprojection of pixel `p` and `e_p` that of the
/// epipolar residual of its flow correspondence.
fn motion_metric(state: &LossState, s: usize) -> Matrix6<f64> {
    let (w, k) = (state.width(), state.intrinsics);
    let view = &state.sources[s];
    let pose = &view.pose;
    let f = fundamental_matrix(pose, &k);
    let df = f.twist_derivatives(pose, &k);
    let mut m = Matrix6::zeros();
    let mut n = 0usize;
    for (i, &d) in state.depth.data().iter().enumerate() {
        let (x, y) = (i % w, i / w);
        let p = Vector2::new(x as f64, y as f64);
        let r = reproject(p, d, pose, &k);
        if !r.in_front {
            continue;
        }
        let j = reproject_jacobian(p, pose, &k, &r.point).twist;
        for row in j {
            let v = Vector6::from(row);
            m += v * v.transpose();
        }
        let (u, v) = view.flow.get(x, y);
        let (pt, qs) = (Vector3::new(p.x, p.y, 1.0), Vector3::new(p.x + u, p.y + v, 1.0));
        if qs.x.is_finite() && qs.y.is_finite() {
            let e = Vector6::from_fn(|c, _| qs.dot(&(df[c] * pt)));
            m += e * e.transpose();
        }
        n += 1;
    }
    if n > 0 {
        m /= n as f64;
    }
    // a small ridge keeps degenerate geometry (no translation parallax) invertible
    m + Matrix6::identity() * (1e-9 * m.trace()).max(1e-300)
}

fn direction(state: &LossState, config: &RefineConfig, gates: &LossGates) -> Result<(f64, Direction)> {
    let bundle = evaluate_gated(state, &config.loss_config, config.loss.kind(), gates, true)?;
    if !bundle.value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {} at the current estimate", bundle.value)));
    }
    let grad_twist = match bundle.grad_twist() {
        Some(g) if config.optimize_pose => *g,
        _ => [Twist::zero(); 2],
    };
    let mut twist = grad_twist;
    let mut motion = 0.0f64;
    if config.optimize_pose {
        for s in [PREV, NEXT] {
            let m = motion_metric(state, s);
            let g = Vector6::from(grad_twist[s].0);
            let d = if config.precondition {
                m.cholesky().map(|c| c.solve(&g)).unwrap_or(g)
            } else {
                g
            };
            twist[s] = Twist(d.into());
            motion = motion.max(d.dot(&(m * d)).max(0.0).sqrt());
        }
    }
    let log_depth: Option<Vec<f64>> = if config.optimize_depth {
        bundle
            .grad_depth()
            .map(|g| g.data().iter().zip(state.depth.data()).map(|(g, d)| g * d).collect())
    } else {
        None
    };
    let mut gradient: Vec<f64> = grad_twist.iter().flat_map(|t| t.0).collect();
    if let Some(d) = &log_depth {
        gradient.extend_from_slice(d);
    }
    Ok((
        bundle.value,
        Direction {
            gradient,
            twist,
            log_depth,
            motion,
        },
    ))
}

fn step_state(state: &LossState, dir: &Direction, step: f64) -> Result<LossState> {
    let mut out = state.clone();
    for s in [PREV, NEXT] {
        out.sources[s].pose = state.sources[s].pose.left_perturbed(&dir.twist[s].scaled(-step));
    }
    if let Some(g) = &dir.log_depth {
        let data = state
            .depth
            .data()
            .iter()
            .zip(g)
            .map(|(d, g)| d * (-step * g).exp())
            .collect();
        out.depth = DepthMap::new(state.width(), state.height(), data)?;
    }
    Ok(out)
}

/// Bounds on the Barzilai-Borwein trial step.
const MAX_STEP: f64 = 1e4;

/// The trial step is at least this multiple of the last accepted step.
const GROWTH: f64 = 4.0;

/// Runs the descent. With `truth` the trajectory carries pose errors.
///
/// With a warm-up the first attempt starts on the photometric terms alone.
/// Unless it ends at the gradient or loss tolerance, a second attempt descends the
/// full loss from the start with the remaining iterations, and the attempt
/// with the lower final loss is kept.
pub fn refine(state: &LossState, config: &RefineConfig, truth: Option<&[Pose; 2]>) -> Result<RefineOutcome> {
    config.validate()?;
    state.validate()?;
    if config.warmup_iterations == 0 || config.warmup_iterations >= config.iterations {
        return attempt(state, config, truth, false);
    }
    let warm = attempt(state, config, truth, true)?;
    let used = warm.iterations_used;
    if matches!(warm.stop, StopReason::GradientTolerance | StopReason::LossTolerance) || used >= config.iterations {
        return Ok(warm);
    }
    let mut rest = config.clone();
    rest.iterations = config.iterations - used;
    let cold = attempt(state, &rest, truth, false)?;
    let total = used + cold.iterations_used;
    let mut kept = if cold.final_point().loss < warm.final_point().loss {
        RefineOutcome {
            restarted: true,
            ..cold
        }
    } else {
        warm
    };
    kept.iterations_used = total;
    Ok(kept)
}

fn attempt(state: &LossState, config: &RefineConfig, truth: Option<&[Pose; 2]>, warmup: bool) -> Result<RefineOutcome> {
    let mut current = state.clone();
    let mut trajectory: Vec<TrajectoryPoint> = Vec::new();
    if warmup {
        let mut warm = config.clone();
        warm.loss_config.lambda_eo = 0.0;
        warm.loss_config.lambda_ed = 0.0;
        warm.iterations = config.warmup_iterations;
        descend(&mut current, &warm, truth, &mut trajectory, true)?;
        // the last warm-up point is re-evaluated with the full loss below
        trajectory.pop();
    }
    let stop = descend(&mut current, config, truth, &mut trajectory, false)?;
    Ok(RefineOutcome {
        iterations_used: trajectory.len() - 1,
        trajectory,
        state: current,
        stop,
        restarted: false,
    })
}

/// One descent phase, appending to `trajectory` and continuing its
/// iteration count; runs until `config.iterations` total points.
fn descend(
    current: &mut LossState,
    config: &RefineConfig,
    truth: Option<&[Pose; 2]>,
    trajectory: &mut Vec<TrajectoryPoint>,
    warmup: bool,
) -> Result<StopReason> {
    let kind = config.loss.kind();
    let first = trajectory.len();
    let mut step = config.step;
    // previous accepted step, descent direction and gradient, for the
    // Barzilai-Borwein rule
    let mut previous: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let error_of = |st: &LossState| truth.map(|t| PoseError::worst(&st.poses(), t));
    for iteration in first.. {
        let gates = loss_gates(current, &config.loss_config, kind)?;
        let (value, dir) = direction(current, config, &gates)?;
        let g = &dir.gradient;
        let norm = dot(g, g).sqrt();
        let mut point = TrajectoryPoint {
            iteration,
            loss: value,
            grad_norm: norm,
            step: 0.0,
            error: error_of(current),
            warmup,
        };
        let stalled = config.stall_window > 0
            && iteration >= first + config.stall_window
            && value >= (1.0 - config.stall_tol) * trajectory[iteration - config.stall_window].loss;
        if value <= config.loss_tol || norm <= config.grad_tol || stalled || iteration == config.iterations {
            trajectory.push(point);
            return Ok(if value <= config.loss_tol {
                StopReason::LossTolerance
            } else if norm <= config.grad_tol {
                StopReason::GradientTolerance
            } else if stalled {
                StopReason::Stalled
            } else {
                StopReason::IterationCap
            });
        }
        let d = dir.flat();
        if let Some((last_step, last_d, last_g)) = &previous {
            // s = -last_step * last_d and y = g - last_g; in the metric where
            // last_d is the gradient, s.s / s.y becomes
            let sms = last_step * dot(last_d, last_g);
            let sy: f64 = last_d.iter().zip(last_g).zip(g).map(|((d, a), b)| d * (a - b)).sum();
            step = if sy > 0.0 { (sms / sy).min(MAX_STEP) } else { 2.0 * last_step };
        }
        if dir.motion > 0.0 {
            let grown = previous.as_ref().map_or(f64::INFINITY, |p| GROWTH * p.0);
            step = step.max(grown).min(config.max_update_px / dir.motion);
        }
        let mut accepted = None;
        while step >= MIN_STEP {
            let trial = step_state(current, &dir, step)?;
            let v = evaluate_gated(&trial, &config.loss_config, kind, &gates, false)?.value;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss is {v} at trial step {step:e} of iteration {iteration}"
                )));
            }
            if v < value {
                accepted = Some(trial);
                break;
            }
            step *= 0.5;
        }
        point.step = step;
        trajectory.push(point);
        match accepted {
            Some(next) => {
                *current = next;
                previous = Some((step, d, dir.gradient));
            }
            None => {
                trajectory.last_mut().expect("just pushed").step = 0.0;
                return Ok(StopReason::LineSearch);
            }
        }
    }
    unreachable!("the loop returns")
}

/// Magnitude of a random pose perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosePerturbation {
    pub rotation_deg: f64,
    /// Translation offset as a percentage of the true translation length.
    pub translation_pct: f64,
    pub seed: u64,
}

impl Default for PosePerturbation {
    fn default() -> Self {
        PosePerturbation {
            rotation_deg: 2.0,
            translation_pct: 5.0,
            seed: 0,
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

impl PosePerturbation {
    pub fn is_zero(&self) -> bool {
        self.rotation_deg == 0.0 && self.translation_pct == 0.0
    }

    /// Rotates each pose by exactly `rotation_deg` about a random axis and
    /// offsets its translation by `translation_pct` of its length in a
    /// random direction.
    pub fn apply(&self, poses: &[Pose; 2]) -> Result<[Pose; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = *poses;
        for pose in out.iter_mut() {
            let r = so3_exp(&(random_unit(&mut rng) * self.rotation_deg.to_radians()));
            let t = pose.translation();
            let dt = random_unit(&mut rng) * (t.norm() * self.translation_pct / 100.0);
            *pose = Pose::new(r * pose.rotation(), t + dt)?;
        }
        Ok(out)
    }
}

/// Writes `iteration,loss,rot_err_deg,trans_err_pct`; errors are empty without truth.
pub fn write_trajectory_csv<W: Write>(trajectory: &[TrajectoryPoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "iteration,loss,rot_err_deg,trans_err_pct")?;
    for p in trajectory {
        match p.error {
            Some(e) => writeln!(out, "{},{:e},{:e},{:e}", p.iteration, p.loss, e.rot_err_deg, e.trans_err_pct)?,
            None => writeln!(out, "{},{:e},,", p.iteration, p.loss)?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{render, rigid_scene};

    #[test]
    fn pose_error_of_identity_is_zero() {
        let p = crate::camera::se3_exp(&Twist([0.01, 0.02, -0.01, 0.2, 0.0, 0.05]));
        let e = PoseError::between(&p, &p);
        assert!(e.rot_err_deg < 1e-6 && e.trans_err_pct < 1e-12);
    }

    #[test]
    fn perturbation_has_requested_size() {
        let p = crate::camera::se3_exp(&Twist([0.0, 0.0, 0.0, 0.2, 0.0, 0.0]));
        let pert = PosePerturbation::default();
        let out = pert.apply(&[p, p]).unwrap();
        for q in out {
            let rel = q.compose(&p.inverse());
            assert!((rel.rotation_angle().to_degrees() - 2.0).abs() < 1e-9);
            let dt = (q.translation() - p.translation()).norm() / p.translation().norm();
            assert!((dt - 0.05).abs() < 1e-12);
        }
        assert_eq!(pert.apply(&[p, p]).unwrap(), out);
    }

    #[test]
    fn truth_converges_immediately() {
        let truth = render(&rigid_scene(48, 36, 2)).unwrap();
        let out = refine(&truth.state(), &RefineConfig::default(), Some(&truth.poses)).unwrap();
        assert_eq!(out.stop, StopReason::LossTolerance);
        assert_eq!(out.trajectory.len(), 1);
        // the gradient vanishes there too
        let cfg = RefineConfig {
            loss_tol: 0.0,
            ..Default::default()
        };
        let out = refine(&truth.state(), &cfg, Some(&truth.poses)).unwrap();
        assert_eq!(out.stop, StopReason::GradientTolerance);
        assert!(out.trajectory.len() <= 2);
        assert!(out.final_point().grad_norm <= 1e-6);
    }

    #[test]
    fn loss_is_monotone() {
        let truth = render(&rigid_scene(48, 36, 4)).unwrap();
        let poses = PosePerturbation {
            rotation_deg: 0.5,
            translation_pct: 5.0,
            seed: 1,
        }
        .apply(&truth.poses)
        .unwrap();
        let cfg = RefineConfig {
            iterations: 20,
            warmup_iterations: 0,
            ..RefineConfig::default()
        };
        let out = refine(&truth.state().with_poses(poses), &cfg, Some(&truth.poses)).unwrap();
        for w in out.trajectory.windows(2) {
            assert!(w[1].loss <= w[0].loss, "{} -> {}", w[0].loss, w[1].loss);
        }
    }

    #[test]
    fn warmup_points_precede_full_loss() {
        let truth = render(&rigid_scene(48, 36, 3)).unwrap();
        let poses = PosePerturbation::default().apply(&truth.poses).unwrap();
        let cfg = RefineConfig {
            iterations: 40,
            warmup_iterations: 10,
            ..RefineConfig::default()
        };
        let out = refine(&truth.state().with_poses(poses), &cfg, Some(&truth.poses)).unwrap();
        assert!(out.iterations_used <= 40);
        if !out.restarted {
            let first_full = out.trajectory.iter().position(|p| !p.warmup).unwrap();
            assert!(out.trajectory[first_full..].iter().all(|p| !p.warmup));
        }
        for (i, p) in out.trajectory.iter().enumerate() {
            assert_eq!(p.iteration, i);
        }
    }

    #[test]
    fn csv_header_and_rows() {
        let t = [TrajectoryPoint {
            iteration: 0,
            loss: 0.5,
            grad_norm: 1.0,
            step: 0.0,
            error: None,
            warmup: false,
        }];
        let mut buf = Vec::new();
        write_trajectory_csv(&t, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iteration,loss,rot_err_deg,trans_err_pct\n0,5e-1,,\n");
    }

    #[test]
    fn invalid_config_is_rejected() {
        let truth = render(&rigid_scene(16, 12, 0)).unwrap();
        let cfg = RefineConfig {
            step: 0.0,
            ..RefineConfig::default()
        };
        assert!(matches!(refine(&truth.state(), &cfg, None), Err(Error::Config(_))));
    }
}
