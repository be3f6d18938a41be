//! Task weights, epipolar residuals, the cross-weighted depth/pose loss, the
//! edge-aware smoothness term and the total loss.
//!
//! Per source frame `s` and target pixel `p`:
//!
//! ```text
//! L_o  = photo_error(I_t, I_s sampled at p + F_{t->s}(p))
//! L_d  = photo_error(I_t, I_s sampled at reproject(p, D_t(p), T_s, K))
//! L_Eo = |[p + F(p), 1] F_s [p, 1]^T|      L_Ed = |[p_s', 1] F_s [p, 1]^T|
//! term = w_Ed w_o (M L_o + l_ed L_Ed) + w_Eo w_d (M L_d + l_eo L_Eo)
//! ```
//!
//! with `(w_o, w_d)` and `(w_Eo, w_Ed)` from [`task_weights`] and `M` the
//! occlusion map of the source. The per-pixel value averages the terms of the
//! sources valid at that pixel; the loss is the mean over valid pixels.
//! Every weight, mask and count is held constant under differentiation.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{fundamental_matrix, reproject, reproject_jacobian, Fundamental, Twist};
use crate::error::{Error, Result};
use crate::grid::{DepthMap, FlowField, ImageGrid, ScalarMap};
use crate::loss::{
    abs_subgradient, masked_mean, LossBundle, LossConfig, LossFlags, LossGradients, LossState,
    NEXT, PREV,
};
use crate::occlusion::{occlusion_from_flow, OcclusionMap};
use crate::photometric::{
    erode_validity, flow_photo_gates, flow_photometric_loss_gated, photo_error,
    photo_error_backward, FlowPhotoGates, FlowPhotoInput,
};
use crate::sampler::{warp_at, warp_backward, SampleCoords, WarpResult};

/// `ln((1 - threshold) / threshold)`: a task passes when its loss exceeds the
/// rival's by strictly less than this.
fn gate_margin(threshold: f64) -> f64 {
    if threshold <= 0.0 {
        f64::INFINITY
    } else if threshold >= 1.0 {
        f64::NEG_INFINITY
    } else {
        ((1.0 - threshold) / threshold).ln()
    }
}

/// Weight of a task with loss `a` against a rival with loss `b`:
/// 1 when `1 - e^a / (e^a + e^b) > threshold`, else 0.
///
/// Evaluated as `a - b < ln((1 - threshold) / threshold)`, which is the same
/// test without rounding in the softmax.
#[inline]
pub fn task_weight(a: f64, b: f64, threshold: f64) -> f64 {
    if threshold <= 0.0 {
        // the complement of a softmax of finite inputs is always positive
        return if a.is_finite() && b.is_finite() { 1.0 } else { 0.0 };
    }
    if a - b < gate_margin(threshold) {
        1.0
    } else {
        0.0
    }
}

/// Per-pixel binary weights `(w_o, w_d)` for the loss pair `(L_o, L_d)`.
pub fn task_weights(l_o: &ScalarMap, l_d: &ScalarMap, threshold: f64) -> Result<(ScalarMap, ScalarMap)> {
    l_d.ensure_size(l_o.width(), l_o.height(), "task_weights")?;
    let w_o = l_o.zip_map(l_d, |a, b| task_weight(a, b, threshold));
    let w_d = l_d.zip_map(l_o, |a, b| task_weight(a, b, threshold));
    Ok((w_o, w_d))
}

fn config_weights(config: &LossConfig, a: &ScalarMap, b: &ScalarMap) -> Result<(ScalarMap, ScalarMap)> {
    if config.gating {
        task_weights(a, b, config.threshold)
    } else {
        Ok((
            ScalarMap::filled(a.width(), a.height(), 1.0),
            ScalarMap::filled(a.width(), a.height(), 1.0),
        ))
    }
}

/// Absolute epipolar residual of each target pixel against its match.
/// Returns zeros and `true` when the fundamental matrix is degenerate
/// (pure rotation).
pub fn epipolar_loss(matches: &SampleCoords, f: &Fundamental) -> (ScalarMap, bool) {
    let (w, h) = (matches.width(), matches.height());
    if f.is_pure_rotation() {
        return (ScalarMap::zeros(w, h), true);
    }
    let data = matches
        .points()
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let p = Vector2::new((i % w) as f64, (i / w) as f64);
            let r = f.residual(p, *q);
            if r.is_finite() {
                r.abs()
            } else {
                0.0
            }
        })
        .collect();
    (ScalarMap::new(w, h, data).expect("consistent dimensions"), false)
}

/// Frozen quantities of one source frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceGates {
    /// In-bounds mask of the flow-based sample coordinates.
    pub flow_validity: ScalarMap,
    /// In-front and in-bounds mask of the rigid reprojection.
    pub rigid_validity: ScalarMap,
    pub occlusion: OcclusionMap,
    pub w_o: ScalarMap,
    pub w_d: ScalarMap,
    pub w_eo: ScalarMap,
    pub w_ed: ScalarMap,
}

impl SourceGates {
    /// Pixels where both photometric errors are defined.
    pub fn support(&self, window: usize) -> ScalarMap {
        erode_validity(&self.flow_validity, window)
            .zip_map(&erode_validity(&self.rigid_validity, window), |a, b| a * b)
    }
}

/// Frozen quantities of the cross-weighted loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossGates {
    pub sources: [SourceGates; 2],
}

/// Per-source component maps, for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossTerms {
    pub l_o: ScalarMap,
    pub l_d: ScalarMap,
    pub l_eo: ScalarMap,
    pub l_ed: ScalarMap,
    pub pure_rotation: bool,
}

struct SourceEval {
    flow_coords: SampleCoords,
    rigid_coords: SampleCoords,
    /// Source-camera point of each rigid reprojection.
    points: Vec<Vector3<f64>>,
    flow_warp: WarpResult,
    rigid_warp: WarpResult,
    fundamental: Fundamental,
    terms: CrossTerms,
}

fn rigid_coords(state: &LossState, s: usize) -> (SampleCoords, Vec<Vector3<f64>>, ScalarMap) {
    let (w, h) = (state.width(), state.height());
    let src = &state.sources[s];
    let (sw, sh) = (src.image.width() as f64, src.image.height() as f64);
    let mut points = Vec::with_capacity(w * h);
    let mut pixels = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let r = reproject(
                Vector2::new(x as f64, y as f64),
                state.depth.get(x, y),
                &src.pose,
                &state.intrinsics,
            );
            let inside = r.in_front
                && r.pixel.x >= 0.0
                && r.pixel.y >= 0.0
                && r.pixel.x <= sw - 1.0
                && r.pixel.y <= sh - 1.0;
            points.push(r.point);
            pixels.push(r.pixel);
            valid.push(if inside { 1.0 } else { 0.0 });
        }
    }
    (
        SampleCoords::new(w, h, pixels).expect("consistent dimensions"),
        points,
        ScalarMap::new(w, h, valid).expect("consistent dimensions"),
    )
}

fn eval_source(
    state: &LossState,
    config: &LossConfig,
    s: usize,
    frozen: Option<&SourceGates>,
) -> Result<(SourceEval, ScalarMap, ScalarMap)> {
    let src = &state.sources[s];
    let flow_coords = SampleCoords::from_flow(&src.flow);
    let (rigid_coords, points, rigid_valid) = rigid_coords(state, s);
    let flow_valid = flow_coords.validity(src.image.width(), src.image.height());
    let (fv, rv) = match frozen {
        Some(g) => (g.flow_validity.clone(), g.rigid_validity.clone()),
        None => (flow_valid, rigid_valid),
    };
    let flow_warp = warp_at(&src.image, &flow_coords, Some(&fv))?;
    let rigid_warp = warp_at(&src.image, &rigid_coords, Some(&rv))?;
    let l_o = photo_error(&state.target, &flow_warp, &config.photo)?;
    let l_d = photo_error(&state.target, &rigid_warp, &config.photo)?;
    let fundamental = fundamental_matrix(&src.pose, &state.intrinsics);
    let (l_eo, skipped) = epipolar_loss(&flow_coords, &fundamental);
    let (mut l_ed, _) = epipolar_loss(&rigid_coords, &fundamental);
    // the rigid residual is only meaningful in front of the camera
    for (i, p) in points.iter().enumerate() {
        if p.z <= 0.0 {
            l_ed.data_mut()[i] = 0.0;
        }
    }
    Ok((
        SourceEval {
            flow_coords,
            rigid_coords,
            points,
            flow_warp,
            rigid_warp,
            fundamental,
            terms: CrossTerms {
                l_o,
                l_d,
                l_eo,
                l_ed,
                pure_rotation: skipped,
            },
        },
        fv,
        rv,
    ))
}

/// Component maps of both sources at the current state.
pub fn cross_terms(state: &LossState, config: &LossConfig) -> Result<[CrossTerms; 2]> {
    state.validate()?;
    config.validate()?;
    let a = eval_source(state, config, PREV, None)?.0.terms;
    let b = eval_source(state, config, NEXT, None)?.0.terms;
    Ok([a, b])
}

/// Evaluates masks, occlusion maps and task weights at the current state.
pub fn cross_gates(state: &LossState, config: &LossConfig) -> Result<CrossGates> {
    state.validate()?;
    config.validate()?;
    let (w, h) = (state.width(), state.height());
    let mut out = Vec::with_capacity(2);
    for s in [PREV, NEXT] {
        let (ev, fv, rv) = eval_source(state, config, s, None)?;
        let t = &ev.terms;
        let (w_o, w_d) = config_weights(config, &t.l_o, &t.l_d)?;
        let (w_eo, w_ed) = config_weights(config, &t.l_eo, &t.l_ed)?;
        out.push(SourceGates {
            flow_validity: fv,
            rigid_validity: rv,
            occlusion: occlusion_from_flow(&state.sources[s].backward_flow, w, h),
            w_o,
            w_d,
            w_eo,
            w_ed,
        });
    }
    let next = out.pop().expect("two sources");
    let prev = out.pop().expect("two sources");
    Ok(CrossGates {
        sources: [prev, next],
    })
}

/// Cross-weighted loss with frozen gates.
pub fn cross_weighted_loss_gated(
    state: &LossState,
    config: &LossConfig,
    gates: &CrossGates,
    with_gradient: bool,
) -> Result<LossBundle> {
    state.validate()?;
    config.validate()?;
    let (w, h) = (state.width(), state.height());
    let n_px = w * h;
    let window = config.photo.ssim_window;
    let evals = [
        eval_source(state, config, PREV, Some(&gates.sources[PREV]))?.0,
        eval_source(state, config, NEXT, Some(&gates.sources[NEXT]))?.0,
    ];
    let supports = [
        gates.sources[PREV].support(window),
        gates.sources[NEXT].support(window),
    ];
    let mut per_pixel = vec![0.0; n_px];
    let mut validity = vec![0.0; n_px];
    let mut denom = vec![0.0; n_px];
    for i in 0..n_px {
        let count = supports[PREV].data()[i] + supports[NEXT].data()[i];
        denom[i] = count.max(1.0);
        validity[i] = count.min(1.0);
        let mut acc = 0.0;
        for s in [PREV, NEXT] {
            if supports[s].data()[i] == 0.0 {
                continue;
            }
            let g = &gates.sources[s];
            let t = &evals[s].terms;
            let m = g.occlusion.as_map().data()[i];
            acc += g.w_ed.data()[i]
                * g.w_o.data()[i]
                * (m * t.l_o.data()[i] + config.lambda_ed * t.l_ed.data()[i])
                + g.w_eo.data()[i]
                    * g.w_d.data()[i]
                    * (m * t.l_d.data()[i] + config.lambda_eo * t.l_eo.data()[i]);
        }
        per_pixel[i] = acc / denom[i];
    }
    let per_pixel = ScalarMap::new(w, h, per_pixel)?;
    let validity = ScalarMap::new(w, h, validity)?;
    let value = masked_mean(&per_pixel, &validity);
    let flags = LossFlags {
        pure_rotation: [evals[PREV].terms.pure_rotation, evals[NEXT].terms.pure_rotation],
    };
    let mut gradients = LossGradients::default();
    if with_gradient {
        let n = validity.sum();
        let inv_n = if n > 0.0 { 1.0 / n } else { 0.0 };
        let mut grad_depth = vec![0.0; n_px];
        let mut grad_twist = [Twist::zero(), Twist::zero()];
        let mut grad_flow = [FlowField::zeros(w, h), FlowField::zeros(w, h)];
        for s in [PREV, NEXT] {
            let c: Vec<f64> = (0..n_px)
                .map(|i| supports[s].data()[i] * inv_n / denom[i])
                .collect();
            source_gradient(
                state,
                config,
                s,
                &gates.sources[s],
                &evals[s],
                &c,
                &mut grad_depth,
                &mut grad_twist[s],
                &mut grad_flow[s],
            )?;
        }
        gradients = LossGradients {
            depth: Some(ScalarMap::new(w, h, grad_depth)?),
            twist: Some(grad_twist),
            flow: Some(grad_flow),
        };
    }
    Ok(LossBundle {
        value,
        per_pixel,
        validity,
        gradients,
        flags,
    })
}

#[allow(clippy::too_many_arguments)]
fn source_gradient(
    state: &LossState,
    config: &LossConfig,
    s: usize,
    g: &SourceGates,
    ev: &SourceEval,
    c: &[f64],
    grad_depth: &mut [f64],
    grad_twist: &mut Twist,
    grad_flow: &mut FlowField,
) -> Result<()> {
    let (w, h) = (state.width(), state.height());
    let src = &state.sources[s];
    let k = &state.intrinsics;
    let m = g.occlusion.as_map();
    let up_o = ScalarMap::from_fn(w, h, |x, y| {
        let i = y * w + x;
        c[i] * g.w_ed.data()[i] * g.w_o.data()[i] * m.data()[i]
    });
    let up_d = ScalarMap::from_fn(w, h, |x, y| {
        let i = y * w + x;
        c[i] * g.w_eo.data()[i] * g.w_d.data()[i] * m.data()[i]
    });
    let d_flow_warp = photo_error_backward(&state.target, &ev.flow_warp, &config.photo, &up_o)?;
    let d_flow = warp_backward(&src.image, &ev.flow_coords, &ev.flow_warp.validity, &d_flow_warp);
    let d_rigid_warp = photo_error_backward(&state.target, &ev.rigid_warp, &config.photo, &up_d)?;
    let d_rigid = warp_backward(&src.image, &ev.rigid_coords, &ev.rigid_warp.validity, &d_rigid_warp);
    let dfs = ev.fundamental.twist_derivatives(&src.pose, k);
    let epipolar = !ev.fundamental.is_pure_rotation();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let p = Vector2::new(x as f64, y as f64);
            let ph = Vector3::new(p.x, p.y, 1.0);
            // flow branch: photometric + L_Eo
            let mut gq = d_flow[i];
            let b_eo = c[i] * g.w_eo.data()[i] * g.w_d.data()[i] * config.lambda_eo;
            if epipolar && b_eo != 0.0 {
                let q = ev.flow_coords.points()[i];
                let l = ev.fundamental.line(p);
                let sg = b_eo * abs_subgradient(q.x * l.x + q.y * l.y + l.z);
                if sg != 0.0 {
                    gq += Vector2::new(l.x, l.y) * sg;
                    let qh = Vector3::new(q.x, q.y, 1.0);
                    add_twist(grad_twist, &dfs, &qh, &ph, sg);
                }
            }
            if gq.x != 0.0 || gq.y != 0.0 {
                let (u, v) = grad_flow.get(x, y);
                grad_flow.set(x, y, u + gq.x, v + gq.y);
            }
            // rigid branch: photometric + L_Ed
            if g.rigid_validity.data()[i] == 0.0 {
                continue;
            }
            let mut gp = d_rigid[i];
            let b_ed = c[i] * g.w_ed.data()[i] * g.w_o.data()[i] * config.lambda_ed;
            let ps = ev.rigid_coords.points()[i];
            if epipolar && b_ed != 0.0 {
                let l = ev.fundamental.line(p);
                let sg = b_ed * abs_subgradient(ps.x * l.x + ps.y * l.y + l.z);
                if sg != 0.0 {
                    gp += Vector2::new(l.x, l.y) * sg;
                    let qh = Vector3::new(ps.x, ps.y, 1.0);
                    add_twist(grad_twist, &dfs, &qh, &ph, sg);
                }
            }
            if gp.x == 0.0 && gp.y == 0.0 {
                continue;
            }
            let jac = reproject_jacobian(p, &src.pose, k, &ev.points[i]);
            grad_depth[i] += gp.dot(&jac.depth);
            for (kk, t) in grad_twist.0.iter_mut().enumerate() {
                *t += gp.x * jac.twist[0][kk] + gp.y * jac.twist[1][kk];
            }
        }
    }
    Ok(())
}

#[inline]
fn add_twist(out: &mut Twist, dfs: &[Matrix3<f64>; 6], qh: &Vector3<f64>, ph: &Vector3<f64>, scale: f64) {
    for (t, df) in out.0.iter_mut().zip(dfs) {
        *t += scale * qh.dot(&(df * ph));
    }
}

/// Cross-weighted loss with gradients for depth, both poses and both flows.
pub fn cross_weighted_loss(state: &LossState, config: &LossConfig) -> Result<LossBundle> {
    let gates = cross_gates(state, config)?;
    cross_weighted_loss_gated(state, config, &gates, true)
}

/// Forward-difference magnitude of the image, averaged over channels;
/// zero on the last column (`dx`) or row (`dy`).
fn image_gradients(image: &ImageGrid) -> (ScalarMap, ScalarMap) {
    let (w, h, ch) = (image.width(), image.height(), image.channels());
    let diff = |x0: usize, y0: usize, x1: usize, y1: usize| {
        (0..ch)
            .map(|c| (image.get(x1, y1, c) - image.get(x0, y0, c)).abs())
            .sum::<f64>()
            / ch as f64
    };
    let gx = ScalarMap::from_fn(w, h, |x, y| if x + 1 < w { diff(x, y, x + 1, y) } else { 0.0 });
    let gy = ScalarMap::from_fn(w, h, |x, y| if y + 1 < h { diff(x, y, x, y + 1) } else { 0.0 });
    (gx, gy)
}

/// Edge-aware first-order smoothness of the mean-normalized inverse depth.
pub fn smoothness_loss(depth: &DepthMap, image: &ImageGrid) -> Result<LossBundle> {
    let (w, h) = (depth.width(), depth.height());
    depth.ensure_size(image.width(), image.height(), "smoothness depth")?;
    let n = (w * h) as f64;
    let inv: Vec<f64> = depth.data().iter().map(|d| 1.0 / d).collect();
    let mean = inv.iter().sum::<f64>() / n;
    let dn: Vec<f64> = inv.iter().map(|v| v / mean).collect();
    let (gx, gy) = image_gradients(image);
    let ex = gx.map(|g| (-g).exp());
    let ey = gy.map(|g| (-g).exp());
    let mut per_pixel = vec![0.0; w * h];
    // d L / d dn, before the 1/n of the mean
    let mut g_dn = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut v = 0.0;
            if x + 1 < w {
                let d = dn[i + 1] - dn[i];
                v += d.abs() * ex.data()[i];
                let s = abs_subgradient(d) * ex.data()[i];
                g_dn[i + 1] += s;
                g_dn[i] -= s;
            }
            if y + 1 < h {
                let d = dn[i + w] - dn[i];
                v += d.abs() * ey.data()[i];
                let s = abs_subgradient(d) * ey.data()[i];
                g_dn[i + w] += s;
                g_dn[i] -= s;
            }
            per_pixel[i] = v;
        }
    }
    let per_pixel = ScalarMap::new(w, h, per_pixel)?;
    let validity = ScalarMap::filled(w, h, 1.0);
    let value = masked_mean(&per_pixel, &validity);
    // dn_i = inv_i / m, m = mean(inv), inv_k = 1 / D_k
    let cross: f64 = g_dn.iter().zip(&inv).map(|(g, v)| g * v).sum::<f64>();
    let grad: Vec<f64> = (0..w * h)
        .map(|k| {
            let d_inv = (g_dn[k] / mean - cross / (mean * mean * n)) / n;
            -d_inv * inv[k] * inv[k]
        })
        .collect();
    Ok(LossBundle {
        value,
        per_pixel,
        validity,
        gradients: LossGradients {
            depth: Some(ScalarMap::new(w, h, grad)?),
            twist: None,
            flow: None,
        },
        flags: LossFlags::default(),
    })
}

/// Which loss to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Occlusion-aware flow photometric loss.
    Op,
    /// Cross-weighted depth/pose loss.
    Ap,
    /// Smoothness.
    S,
    /// `op + ap + lambda_s * s`.
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Op, LossKind::Ap, LossKind::S, LossKind::Total];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Op => "op",
            LossKind::Ap => "ap",
            LossKind::S => "s",
            LossKind::Total => "total",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(LossKind::Op),
            "ap" => Ok(LossKind::Ap),
            "s" => Ok(LossKind::S),
            "total" => Ok(LossKind::Total),
            other => Err(Error::Config(format!(
                "unknown loss {other:?}; expected op, ap, s or total"
            ))),
        }
    }
}

/// Frozen quantities for any of the losses; only the parts a loss needs are set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossGates {
    pub photo: Option<FlowPhotoGates>,
    pub cross: Option<CrossGates>,
}

/// Evaluates the gates `kind` needs at the current state.
pub fn loss_gates(state: &LossState, config: &LossConfig, kind: LossKind) -> Result<LossGates> {
    state.validate()?;
    config.validate()?;
    let photo = match kind {
        LossKind::Op | LossKind::Total => {
            Some(flow_photo_gates(&FlowPhotoInput::from_state(state), &config.photo)?)
        }
        _ => None,
    };
    let cross = match kind {
        LossKind::Ap | LossKind::Total => Some(cross_gates(state, config)?),
        _ => None,
    };
    Ok(LossGates { photo, cross })
}

fn missing_gate(what: &str) -> Error {
    Error::Contract(format!("{what} gates were not evaluated for this loss"))
}

fn add_maps(a: Option<ScalarMap>, b: Option<&ScalarMap>, scale: f64) -> Option<ScalarMap> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.zip_map(b, |x, y| x + scale * y)),
        (None, Some(b)) => Some(b.map(|y| scale * y)),
        (a, None) => a,
    }
}

fn add_flows(a: Option<[FlowField; 2]>, b: Option<&[FlowField; 2]>) -> Option<[FlowField; 2]> {
    match (a, b) {
        (Some(mut a), Some(b)) => {
            for (fa, fb) in a.iter_mut().zip(b) {
                let (w, h) = (fa.width(), fa.height());
                for y in 0..h {
                    for x in 0..w {
                        let (u0, v0) = fa.get(x, y);
                        let (u1, v1) = fb.get(x, y);
                        fa.set(x, y, u0 + u1, v0 + v1);
                    }
                }
            }
            Some(a)
        }
        (None, Some(b)) => Some(b.clone()),
        (a, None) => a,
    }
}

fn add_twists(a: Option<[Twist; 2]>, b: Option<&[Twist; 2]>) -> Option<[Twist; 2]> {
    match (a, b) {
        (Some(a), Some(b)) => Some([add_twist_pair(&a[0], &b[0]), add_twist_pair(&a[1], &b[1])]),
        (None, Some(b)) => Some(*b),
        (a, None) => a,
    }
}

fn add_twist_pair(a: &Twist, b: &Twist) -> Twist {
    let mut out = *a;
    for (o, v) in out.0.iter_mut().zip(b.0) {
        *o += v;
    }
    out
}

/// `L_op + L_ap + lambda_s L_s` from its component bundles.
///
/// The value is the plain sum of the component values. The per-pixel map
/// spreads each component's mean over the union of the validity masks so that
/// its mean over that union reproduces the value up to rounding.
pub fn combine_total(op: &LossBundle, ap: &LossBundle, s: &LossBundle, lambda_s: f64) -> LossBundle {
    let value = op.value + ap.value + lambda_s * s.value;
    let validity = op
        .validity
        .zip_map(&ap.validity, f64::max)
        .zip_map(&s.validity, f64::max);
    let n_union = validity.sum();
    let share = |b: &LossBundle, scale: f64| {
        let n = b.validity.sum();
        if n > 0.0 {
            scale * n_union / n
        } else {
            0.0
        }
    };
    let (k_op, k_ap, k_s) = (share(op, 1.0), share(ap, 1.0), share(s, lambda_s));
    let per_pixel = op.per_pixel.map(|v| k_op * v);
    let per_pixel = per_pixel.zip_map(&ap.per_pixel, |a, v| a + k_ap * v);
    let per_pixel = per_pixel.zip_map(&s.per_pixel, |a, v| a + k_s * v);
    let mut g = LossGradients::default();
    for (b, scale) in [(op, 1.0), (ap, 1.0), (s, lambda_s)] {
        g.depth = add_maps(g.depth, b.gradients.depth.as_ref(), scale);
        let tw = b.gradients.twist.map(|t| [t[0].scaled(scale), t[1].scaled(scale)]);
        g.twist = add_twists(g.twist, tw.as_ref());
        let fl = b.gradients.flow.as_ref().map(|f| {
            if scale == 1.0 {
                f.clone()
            } else {
                [scale_flow(&f[0], scale), scale_flow(&f[1], scale)]
            }
        });
        g.flow = add_flows(g.flow, fl.as_ref());
    }
    LossBundle {
        value,
        per_pixel,
        validity,
        gradients: g,
        flags: op.flags.merge(ap.flags).merge(s.flags),
    }
}

fn scale_flow(f: &FlowField, s: f64) -> FlowField {
    let u = f.u().iter().map(|v| v * s).collect();
    let v = f.v().iter().map(|v| v * s).collect();
    FlowField::new(f.width(), f.height(), u, v).expect("finite flow gradient")
}

/// Evaluates `kind` with frozen gates.
pub fn evaluate_gated(
    state: &LossState,
    config: &LossConfig,
    kind: LossKind,
    gates: &LossGates,
    with_gradient: bool,
) -> Result<LossBundle> {
    let op = || -> Result<LossBundle> {
        let g = gates.photo.as_ref().ok_or_else(|| missing_gate("photometric"))?;
        flow_photometric_loss_gated(&FlowPhotoInput::from_state(state), &config.photo, g, with_gradient)
    };
    let ap = || -> Result<LossBundle> {
        let g = gates.cross.as_ref().ok_or_else(|| missing_gate("cross-weighted"))?;
        cross_weighted_loss_gated(state, config, g, with_gradient)
    };
    match kind {
        LossKind::Op => op(),
        LossKind::Ap => ap(),
        LossKind::S => smoothness_loss(&state.depth, &state.target),
        LossKind::Total => {
            let s = smoothness_loss(&state.depth, &state.target)?;
            Ok(combine_total(&op()?, &ap()?, &s, config.lambda_s))
        }
    }
}

/// Evaluates `kind` with gates computed at `state`.
pub fn evaluate(state: &LossState, config: &LossConfig, kind: LossKind, with_gradient: bool) -> Result<LossBundle> {
    let gates = loss_gates(state, config, kind)?;
    evaluate_gated(state, config, kind, &gates, with_gradient)
}

/// Total loss with gradients.
pub fn total_loss(state: &LossState, config: &LossConfig) -> Result<LossBundle> {
    evaluate(state, config, LossKind::Total, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, Pose};
    use crate::loss::SourceView;

    #[test]
    fn task_weight_examples() {
        assert_eq!(task_weight(0.4, 0.4, 0.28), 1.0);
        assert_eq!(task_weight(50.0, 0.0, 0.28), 0.0);
        assert_eq!(task_weight(0.0, 50.0, 0.28), 1.0);
        let b = (0.72f64 / 0.28).ln();
        assert_eq!(task_weight(b, 0.0, 0.28), 0.0);
        assert_eq!(task_weight(b - 1e-12, 0.0, 0.28), 1.0);
        // threshold at or above 1 can never be exceeded
        assert_eq!(task_weight(0.0, 0.0, 1.0), 0.0);
    }

    #[test]
    fn epipolar_identity_case() {
        let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let pose = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let f = fundamental_matrix(&pose, &k);
        let coords = SampleCoords::new(1, 1, vec![Vector2::new(1.0, 0.0)]).unwrap();
        let (m, skipped) = epipolar_loss(&coords, &f);
        assert!(!skipped);
        assert_eq!(m.data()[0], 0.0);
        let rot = fundamental_matrix(&Pose::identity(), &k);
        let (m, skipped) = epipolar_loss(&coords, &rot);
        assert!(skipped);
        assert_eq!(m.data()[0], 0.0);
    }

    fn ramp_depth(w: usize, h: usize) -> DepthMap {
        DepthMap::new(w, h, (0..w * h).map(|i| 2.0 + (i % w) as f64 * 0.1).collect()).unwrap()
    }

    #[test]
    fn smoothness_cases() {
        let flat = ImageGrid::filled(8, 6, 3, 0.5);
        let l = smoothness_loss(&DepthMap::constant(8, 6, 3.0).unwrap(), &flat).unwrap();
        assert_eq!(l.value, 0.0);
        let ramp = smoothness_loss(&ramp_depth(8, 6), &flat).unwrap();
        assert!(ramp.value > 0.0);
        let stripes = ImageGrid::from_fn(8, 6, 3, |x, _, _| if x % 2 == 0 { 0.0 } else { 1.0 });
        let edged = smoothness_loss(&ramp_depth(8, 6), &stripes).unwrap();
        assert!(edged.value < ramp.value);
    }

    #[test]
    fn smoothness_gradient_matches_differences() {
        let img = ImageGrid::from_fn(6, 5, 1, |x, y, _| ((x * 3 + y * 7) % 5) as f64 * 0.2);
        let d = DepthMap::new(6, 5, (0..30).map(|i| 1.0 + ((i * 7) % 11) as f64 * 0.13).collect()).unwrap();
        let g = smoothness_loss(&d, &img).unwrap();
        let gd = g.grad_depth().unwrap();
        let h = 1e-6;
        for k in [0usize, 7, 13, 29] {
            let mut p = d.data().to_vec();
            let mut m = d.data().to_vec();
            p[k] += h;
            m[k] -= h;
            let fp = smoothness_loss(&DepthMap::new(6, 5, p).unwrap(), &img).unwrap().value;
            let fm = smoothness_loss(&DepthMap::new(6, 5, m).unwrap(), &img).unwrap().value;
            let num = (fp - fm) / (2.0 * h);
            assert!((num - gd.data()[k]).abs() < 1e-7, "{k}: {num} vs {}", gd.data()[k]);
        }
    }

    fn identical_state() -> LossState {
        let (w, h) = (12, 10);
        let img = ImageGrid::from_fn(w, h, 3, |x, y, c| {
            0.5 + 0.3 * (0.9 * x as f64 + 0.5 * y as f64 + c as f64).sin()
        });
        let view = SourceView {
            image: img.clone(),
            pose: Pose::identity(),
            flow: FlowField::zeros(w, h),
            backward_flow: FlowField::zeros(w, h),
            depth: None,
        };
        LossState {
            target: img,
            depth: DepthMap::constant(w, h, 4.0).unwrap(),
            intrinsics: Intrinsics::new(10.0, 10.0, 6.0, 5.0).unwrap(),
            sources: [view.clone(), view],
        }
    }

    #[test]
    fn identical_frames_are_zero_and_flag_rotation() {
        let st = identical_state();
        let cfg = LossConfig::default();
        let ap = cross_weighted_loss(&st, &cfg).unwrap();
        assert!(ap.value.abs() < 1e-12);
        assert_eq!(ap.flags.pure_rotation, [true, true]);
        let total = total_loss(&st, &cfg).unwrap();
        assert!(total.value.abs() < 1e-12);
    }

    #[test]
    fn total_without_smoothness_is_the_sum() {
        let mut st = identical_state();
        st.sources[NEXT].flow = FlowField::constant(12, 10, 0.3, -0.2).unwrap();
        let cfg = LossConfig {
            lambda_s: 0.0,
            ..LossConfig::default()
        };
        let op = evaluate(&st, &cfg, LossKind::Op, false).unwrap();
        let ap = evaluate(&st, &cfg, LossKind::Ap, false).unwrap();
        let total = evaluate(&st, &cfg, LossKind::Total, false).unwrap();
        assert_eq!(total.value, op.value + ap.value);
        assert!(op.value > 0.0);
    }

    #[test]
    fn loss_kind_parsing() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!("foo".parse::<LossKind>().is_err());
    }
}
