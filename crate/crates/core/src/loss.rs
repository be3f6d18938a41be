//! Types shared by the loss producers: the evaluation state, loss bundles and
//! the scalar configuration.

use serde::{Deserialize, Serialize};

use crate::camera::{Intrinsics, Pose, Twist};
use crate::error::{Error, Result};
use crate::grid::{DepthMap, FlowField, ImageGrid, ScalarMap};

/// Residuals and differences at or below this magnitude count as exact zeros
/// when choosing a subgradient of `|.|`.
pub const ABS_DEADZONE: f64 = 1e-9;

/// Subgradient of `|x|` with a round-off dead zone around 0.
#[inline]
pub fn abs_subgradient(x: f64) -> f64 {
    if x.abs() <= ABS_DEADZONE {
        0.0
    } else {
        x.signum()
    }
}

/// Index of the two source frames.
pub const PREV: usize = 0;
pub const NEXT: usize = 1;

/// One source frame `I_s` and everything tied to it.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceView {
    pub image: ImageGrid,
    /// Target-to-source rigid transform.
    pub pose: Pose,
    /// `F_{t->s}` on the target grid.
    pub flow: FlowField,
    /// `F_{s->t}` on the source grid; feeds the occlusion map.
    pub backward_flow: FlowField,
    /// `D_s`, carried along but unused by the losses.
    pub depth: Option<DepthMap>,
}

/// Everything the losses read: target frame, its depth, intrinsics and the
/// previous/next source frames (`sources[PREV]`, `sources[NEXT]`).
#[derive(Debug, Clone, PartialEq)]
pub struct LossState {
    pub target: ImageGrid,
    pub depth: DepthMap,
    pub intrinsics: Intrinsics,
    pub sources: [SourceView; 2],
}

impl LossState {
    pub fn width(&self) -> usize {
        self.target.width()
    }

    pub fn height(&self) -> usize {
        self.target.height()
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width(), self.height());
        self.depth.ensure_size(w, h, "target depth")?;
        for (k, s) in self.sources.iter().enumerate() {
            let name = if k == PREV { "previous" } else { "next" };
            if s.image.channels() != self.target.channels() {
                return Err(Error::DimensionMismatch(format!(
                    "{name} source has {} channels, target has {}",
                    s.image.channels(),
                    self.target.channels()
                )));
            }
            s.flow.ensure_size(w, h, &format!("{name} forward flow"))?;
            s.backward_flow.ensure_size(
                s.image.width(),
                s.image.height(),
                &format!("{name} backward flow"),
            )?;
        }
        Ok(())
    }

    pub fn with_poses(&self, poses: [Pose; 2]) -> LossState {
        let mut out = self.clone();
        out.sources[PREV].pose = poses[PREV];
        out.sources[NEXT].pose = poses[NEXT];
        out
    }

    pub fn poses(&self) -> [Pose; 2] {
        [self.sources[PREV].pose, self.sources[NEXT].pose]
    }
}

/// Flags raised while evaluating a loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    /// Per source: the translation vanished and the epipolar terms were dropped.
    pub pure_rotation: [bool; 2],
}

impl LossFlags {
    pub fn merge(self, other: LossFlags) -> LossFlags {
        LossFlags {
            pure_rotation: [
                self.pure_rotation[0] || other.pure_rotation[0],
                self.pure_rotation[1] || other.pure_rotation[1],
            ],
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.pure_rotation[PREV] {
            out.push("pure_rotation_prev".to_string());
        }
        if self.pure_rotation[NEXT] {
            out.push("pure_rotation_next".to_string());
        }
        out
    }
}

/// Gradients of a loss. Absent entries mean the loss does not depend on that input.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossGradients {
    pub depth: Option<ScalarMap>,
    /// Per source pose, for the left perturbation `exp(delta) * T`.
    pub twist: Option<[Twist; 2]>,
    /// Per source forward flow `F_{t->s}`.
    pub flow: Option<[FlowField; 2]>,
}

/// Value, contribution map, validity and gradients of one loss.
///
/// For single losses `value` is the row-major sum of `per_pixel` divided by
/// the number of valid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub value: f64,
    pub per_pixel: ScalarMap,
    pub validity: ScalarMap,
    pub gradients: LossGradients,
    pub flags: LossFlags,
}

impl LossBundle {
    pub fn zero(width: usize, height: usize) -> Self {
        LossBundle {
            value: 0.0,
            per_pixel: ScalarMap::zeros(width, height),
            validity: ScalarMap::zeros(width, height),
            gradients: LossGradients::default(),
            flags: LossFlags::default(),
        }
    }

    pub fn grad_depth(&self) -> Option<&ScalarMap> {
        self.gradients.depth.as_ref()
    }

    pub fn grad_twist(&self) -> Option<&[Twist; 2]> {
        self.gradients.twist.as_ref()
    }

    pub fn grad_flow(&self) -> Option<&[FlowField; 2]> {
        self.gradients.flow.as_ref()
    }
}

/// Row-major `sum(per_pixel) / sum(validity)`; zero when nothing is valid.
pub fn masked_mean(per_pixel: &ScalarMap, validity: &ScalarMap) -> f64 {
    let n = validity.sum();
    if n > 0.0 {
        per_pixel.sum() / n
    } else {
        0.0
    }
}

/// SSIM/L1 blend parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhotoParams {
    /// Weight of the SSIM term; `1 - alpha` goes to the L1 term.
    pub alpha: f64,
    /// Side of the square SSIM window, odd.
    pub ssim_window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for PhotoParams {
    fn default() -> Self {
        PhotoParams {
            alpha: 0.85,
            ssim_window: 3,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl PhotoParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.ssim_window < 3 || self.ssim_window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "ssim_window must be odd and >= 3, got {}",
                self.ssim_window
            )));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::Config("SSIM stabilizers must be positive".into()));
        }
        Ok(())
    }
}

/// Loss weights and gating threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_ed: f64,
    pub lambda_eo: f64,
    pub lambda_s: f64,
    pub threshold: f64,
    /// When false every task weight is 1 (the ungated ablation).
    pub gating: bool,
    pub photo: PhotoParams,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_ed: 0.002,
            lambda_eo: 0.02,
            lambda_s: 0.001,
            threshold: 0.28,
            gating: true,
            photo: PhotoParams::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ed", self.lambda_ed),
            ("lambda_eo", self.lambda_eo),
            ("lambda_s", self.lambda_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !self.threshold.is_finite() {
            return Err(Error::Config("threshold must be finite".into()));
        }
        self.photo.validate()
    }
}
