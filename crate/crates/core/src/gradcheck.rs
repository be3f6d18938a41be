//! Central finite-difference checks of analytic gradients.
//!
//! Loss checks freeze every gate (masks, occlusion maps, direction and task
//! weights) at the unperturbed state, so the numeric derivative differentiates
//! exactly the function the analytic gradient describes.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{se3_exp, Twist};
use crate::crossloss::{evaluate_gated, loss_gates, LossGates, LossKind};
use crate::error::Result;
use crate::grid::{DepthMap, FlowField};
use crate::loss::{LossBundle, LossConfig, LossState, NEXT, PREV};

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub name: String,
    pub max_abs_err: f64,
    /// Maximum of `|a - n| / (1 + |n|)` over the probes.
    pub max_rel_err: f64,
    /// Parameter index of the worst relative error.
    pub worst_index: usize,
    pub probes: usize,
    pub tolerance: f64,
    /// False when a function evaluation was not finite.
    pub valid: bool,
    pub pass: bool,
}

/// Probe settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Random coordinates per check, in addition to the largest analytic entries.
    pub subsample: usize,
    pub seed: u64,
    /// Multiplies every analytic gradient before comparison; 1 except in negative controls.
    pub analytic_scale: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            h: 1e-5,
            tol: 1e-5,
            subsample: 24,
            seed: 7,
            analytic_scale: 1.0,
        }
    }
}

/// Number of largest-magnitude analytic entries always probed.
pub const TOP_ENTRIES: usize = 10;

fn probe_indices(analytic: &[f64], subsample: usize, seed: u64) -> Vec<usize> {
    let n = analytic.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = sample(&mut rng, n, subsample.min(n)).into_vec();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()).then(a.cmp(&b)));
    idx.extend(order.into_iter().take(TOP_ENTRIES));
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Compares `analytic` to central differences of `f` around `x0`.
pub fn check_gradient<F>(name: &str, f: F, analytic: &[f64], x0: &[f64], opts: &CheckOptions) -> GradReport
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    assert_eq!(analytic.len(), x0.len(), "analytic gradient length");
    let idx = probe_indices(analytic, opts.subsample, opts.seed);
    let numeric: Vec<f64> = idx
        .par_iter()
        .map(|&i| {
            let mut x = x0.to_vec();
            x[i] = x0[i] + opts.h;
            let fp = f(&x);
            x[i] = x0[i] - opts.h;
            let fm = f(&x);
            (fp - fm) / (2.0 * opts.h)
        })
        .collect();
    let mut report = GradReport {
        name: name.to_string(),
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst_index: idx.first().copied().unwrap_or(0),
        probes: idx.len(),
        tolerance: opts.tol,
        valid: true,
        pass: false,
    };
    for (&i, &n) in idx.iter().zip(&numeric) {
        if !n.is_finite() {
            report.valid = false;
            report.worst_index = i;
            break;
        }
        let a = analytic[i];
        let abs = (a - n).abs();
        let rel = abs / (1.0 + n.abs());
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    report.pass = report.valid && report.max_rel_err <= opts.tol;
    report
}

/// A parameter group of the loss state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Depth,
    Twist(usize),
    Flow(usize),
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Depth => "depth",
            ParamGroup::Twist(PREV) => "twist_prev",
            ParamGroup::Twist(_) => "twist_next",
            ParamGroup::Flow(PREV) => "flow_prev",
            ParamGroup::Flow(_) => "flow_next",
        }
    }

    /// Groups a loss depends on.
    pub fn for_loss(kind: LossKind) -> &'static [ParamGroup] {
        use ParamGroup::*;
        match kind {
            LossKind::Op => &[Flow(PREV), Flow(NEXT)],
            LossKind::Ap => &[Depth, Twist(PREV), Twist(NEXT), Flow(PREV), Flow(NEXT)],
            LossKind::S => &[Depth],
            LossKind::Total => &[Depth, Twist(PREV), Twist(NEXT), Flow(PREV), Flow(NEXT)],
        }
    }

    fn x0(self, state: &LossState) -> Vec<f64> {
        match self {
            ParamGroup::Depth => state.depth.data().to_vec(),
            ParamGroup::Twist(_) => vec![0.0; 6],
            ParamGroup::Flow(s) => state.sources[s].flow.to_interleaved(),
        }
    }

    fn analytic(self, bundle: &LossBundle) -> Option<Vec<f64>> {
        match self {
            ParamGroup::Depth => bundle.grad_depth().map(|g| g.data().to_vec()),
            ParamGroup::Twist(s) => bundle.grad_twist().map(|t| t[s].0.to_vec()),
            ParamGroup::Flow(s) => bundle.grad_flow().map(|f| f[s].to_interleaved()),
        }
    }

    fn apply(self, state: &LossState, x: &[f64]) -> Result<LossState> {
        let mut out = state.clone();
        match self {
            ParamGroup::Depth => {
                out.depth = DepthMap::new(state.width(), state.height(), x.to_vec())?;
            }
            ParamGroup::Twist(s) => {
                let mut d = [0.0; 6];
                d.copy_from_slice(x);
                out.sources[s].pose = se3_exp(&Twist(d)).compose(&state.sources[s].pose);
            }
            ParamGroup::Flow(s) => {
                out.sources[s].flow = FlowField::from_interleaved(state.width(), state.height(), x)?;
            }
        }
        Ok(out)
    }
}

/// Checks `kind`'s gradient with respect to `group`, gates frozen at `state`.
pub fn check_loss(
    state: &LossState,
    config: &LossConfig,
    kind: LossKind,
    group: ParamGroup,
    gates: &LossGates,
    opts: &CheckOptions,
) -> Result<GradReport> {
    let bundle = evaluate_gated(state, config, kind, gates, true)?;
    let mut analytic = group
        .analytic(&bundle)
        .unwrap_or_else(|| vec![0.0; group.x0(state).len()]);
    for a in analytic.iter_mut() {
        *a *= opts.analytic_scale;
    }
    let f = |x: &[f64]| -> f64 {
        group
            .apply(state, x)
            .and_then(|st| evaluate_gated(&st, config, kind, gates, false))
            .map(|b| b.value)
            .unwrap_or(f64::NAN)
    };
    let name = format!("{}/{}", kind.name(), group.name());
    Ok(check_gradient(&name, f, &analytic, &group.x0(state), opts))
}

/// Every registered (loss, parameter group) check.
pub fn run_suite(state: &LossState, config: &LossConfig, opts: &CheckOptions) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for kind in LossKind::ALL {
        let gates = loss_gates(state, config, kind)?;
        for &group in ParamGroup::for_loss(kind) {
            out.push(check_loss(state, config, kind, group, &gates, opts)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x0 = [0.3, -1.2, 2.5, 0.0];
        let f = |x: &[f64]| 0.5 * x.iter().map(|v| v * v).sum::<f64>();
        let r = check_gradient("quad", f, &x0, &x0, &CheckOptions::default());
        assert!(r.pass);
        assert!(r.max_rel_err <= 1e-10);
    }

    #[test]
    fn cubic_within_taylor_bound() {
        let x0 = [1.0, 2.0];
        let f = |x: &[f64]| x.iter().map(|v| v * v * v).sum::<f64>();
        let r = check_gradient("cubic", f, &[3.0, 12.0], &x0, &CheckOptions::default());
        assert!(r.pass, "{r:?}");
        // the central difference error is h^2 f'''/6 = 1e-10
        assert!(r.max_abs_err < 1e-8);
    }

    #[test]
    fn scaled_gradient_fails() {
        let x0 = [0.5, 1.5, -0.7];
        let f = |x: &[f64]| 0.5 * x.iter().map(|v| v * v).sum::<f64>();
        let wrong: Vec<f64> = x0.iter().map(|v| 2.0 * v).collect();
        let r = check_gradient("wrong", f, &wrong, &x0, &CheckOptions::default());
        assert!(!r.pass);
    }

    #[test]
    fn nan_marks_report_invalid() {
        let r = check_gradient("nan", |_| f64::NAN, &[0.0], &[0.0], &CheckOptions::default());
        assert!(!r.valid && !r.pass);
    }

    #[test]
    fn probes_include_largest_entries() {
        let mut a = vec![0.0; 200];
        a[123] = 5.0;
        a[7] = -9.0;
        let idx = probe_indices(&a, 3, 1);
        assert!(idx.contains(&123) && idx.contains(&7));
        assert_eq!(probe_indices(&a, 3, 1), idx);
    }
}
