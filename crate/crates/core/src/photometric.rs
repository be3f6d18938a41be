//! Per-pixel photometric error (SSIM + L1 blend), the softmax direction
//! weights and the occlusion-aware photometric loss for optical flow.
//!
//! SSIM statistics use a square box window with mirror padding at the image
//! border. A pixel's photometric error is kept only when every pixel of its
//! window was validly synthesized, so out-of-view samples never leak into
//! neighbouring SSIM values.

use crate::error::Result;
use crate::grid::{FlowField, ImageGrid, ScalarMap};
use crate::loss::{
    abs_subgradient, masked_mean, LossBundle, LossFlags, LossGradients, PhotoParams, NEXT, PREV,
};
use crate::occlusion::{occlusion_from_flow, OcclusionMap};
use crate::sampler::{warp_at, warp_backward, SampleCoords, WarpResult};

/// Mirror index into `0..n` without repeating the edge sample.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

/// Window offsets `-r..=r` for a square window of side `size`.
fn window_offsets(size: usize) -> std::ops::RangeInclusive<isize> {
    let r = (size / 2) as isize;
    -r..=r
}

/// Minimum of `mask` over the SSIM window around each pixel.
pub fn erode_validity(mask: &ScalarMap, window: usize) -> ScalarMap {
    let (w, h) = (mask.width(), mask.height());
    let xs = window_table(w, window);
    let ys = window_table(h, window);
    let d = mask.data();
    ScalarMap::from_fn(w, h, |x, y| {
        let mut m: f64 = 1.0;
        for &yy in &ys[y * window..(y + 1) * window] {
            for &xx in &xs[x * window..(x + 1) * window] {
                m = m.min(d[yy * w + xx]);
            }
        }
        m
    })
}

#[derive(Debug, Clone, Copy, Default)]
struct LocalStats {
    mu_a: f64,
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

/// Reflected window indices for every position along an axis of length `n`.
fn window_table(n: usize, window: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n * window);
    for i in 0..n {
        for d in window_offsets(window) {
            out.push(reflect(i as isize + d, n));
        }
    }
    out
}

/// Window statistics of every pixel and channel, indexed like the image data.
fn stats_field(a: &ImageGrid, b: &ImageGrid, window: usize) -> Vec<LocalStats> {
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    let xs = window_table(w, window);
    let ys = window_table(h, window);
    let n = (window * window) as f64;
    let (da, db) = (a.data(), b.data());
    let mut out = Vec::with_capacity(w * h * ch);
    for y in 0..h {
        let rows = &ys[y * window..(y + 1) * window];
        for x in 0..w {
            let cols = &xs[x * window..(x + 1) * window];
            for c in 0..ch {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for &yy in rows {
                    for &xx in cols {
                        let j = (yy * w + xx) * ch + c;
                        let (va, vb) = (da[j], db[j]);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let mu_a = sa / n;
                let mu_b = sb / n;
                out.push(LocalStats {
                    mu_a,
                    mu_b,
                    var_a: saa / n - mu_a * mu_a,
                    var_b: sbb / n - mu_b * mu_b,
                    cov: sab / n - mu_a * mu_b,
                });
            }
        }
    }
    out
}

struct SsimTerms {
    value: f64,
    d_mu_b: f64,
    d_var_b: f64,
    d_cov: f64,
}

fn ssim_terms(s: &LocalStats, c1: f64, c2: f64) -> SsimTerms {
    let n1 = 2.0 * s.mu_a * s.mu_b + c1;
    let n2 = 2.0 * s.cov + c2;
    let d1 = s.mu_a * s.mu_a + s.mu_b * s.mu_b + c1;
    let d2 = s.var_a + s.var_b + c2;
    let den = d1 * d2;
    let value = n1 * n2 / den;
    SsimTerms {
        value,
        d_mu_b: 2.0 * s.mu_a * n2 / den - value * 2.0 * s.mu_b / d1,
        d_var_b: -value / d2,
        d_cov: 2.0 * n1 / den,
    }
}

/// Channel-averaged SSIM between `a` and `b`.
pub fn ssim_map(a: &ImageGrid, b: &ImageGrid, params: &PhotoParams) -> Result<ScalarMap> {
    a.ensure_same_shape(b, "ssim_map")?;
    params.validate()?;
    let ch = a.channels();
    let stats = stats_field(a, b, params.ssim_window);
    let data = stats
        .chunks(ch)
        .map(|px| px.iter().map(|st| ssim_terms(st, params.c1, params.c2).value).sum::<f64>() / ch as f64)
        .collect();
    ScalarMap::new(a.width(), a.height(), data)
}

/// `alpha (1 - SSIM) / 2 + (1 - alpha) mean_c |target - synthesized|`, times the
/// eroded warp validity.
pub fn photo_error(target: &ImageGrid, synthesized: &WarpResult, params: &PhotoParams) -> Result<ScalarMap> {
    target.ensure_same_shape(&synthesized.warped, "photo_error")?;
    let ssim = ssim_map(target, &synthesized.warped, params)?;
    let mask = erode_validity(&synthesized.validity, params.ssim_window);
    let ch = target.channels();
    let alpha = params.alpha;
    Ok(ScalarMap::from_fn(target.width(), target.height(), |x, y| {
        let m = mask.get(x, y);
        if m == 0.0 {
            return 0.0;
        }
        let l1 = target
            .pixel(x, y)
            .iter()
            .zip(synthesized.warped.pixel(x, y))
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / ch as f64;
        m * (alpha * 0.5 * (1.0 - ssim.get(x, y)) + (1.0 - alpha) * l1)
    }))
}

/// Gradient of `sum_p upstream(p) * photo_error(p)` with respect to the
/// synthesized image samples.
pub fn photo_error_backward(
    target: &ImageGrid,
    synthesized: &WarpResult,
    params: &PhotoParams,
    upstream: &ScalarMap,
) -> Result<ImageGrid> {
    target.ensure_same_shape(&synthesized.warped, "photo_error_backward")?;
    upstream.ensure_size(target.width(), target.height(), "photo_error_backward upstream")?;
    let (w, h, ch) = (target.width(), target.height(), target.channels());
    let b = &synthesized.warped;
    let mask = erode_validity(&synthesized.validity, params.ssim_window);
    let n = (params.ssim_window * params.ssim_window) as f64;
    let alpha = params.alpha;
    let stats = stats_field(target, b, params.ssim_window);
    let win = params.ssim_window;
    let xs = window_table(w, win);
    let ys = window_table(h, win);
    let (bd, td) = (b.data(), target.data());
    let mut grad = vec![0.0; w * h * ch];
    for y in 0..h {
        for x in 0..w {
            let g = upstream.get(x, y) * mask.get(x, y);
            if g == 0.0 {
                continue;
            }
            // L1 part
            let l1_scale = g * (1.0 - alpha) / ch as f64;
            for c in 0..ch {
                let i = (y * w + x) * ch + c;
                grad[i] += l1_scale * abs_subgradient(b.data()[i] - target.data()[i]);
            }
            // SSIM part: d/dS of alpha (1 - S) / 2, S averaged over channels
            let g_s = -g * alpha * 0.5 / ch as f64;
            for c in 0..ch {
                let st = &stats[(y * w + x) * ch + c];
                let t = ssim_terms(st, params.c1, params.c2);
                let k_mu = g_s * t.d_mu_b / n;
                let k_var = g_s * t.d_var_b * 2.0 / n;
                let k_cov = g_s * t.d_cov / n;
                for &yy in &ys[y * win..(y + 1) * win] {
                    for &xx in &xs[x * win..(x + 1) * win] {
                        let j = (yy * w + xx) * ch + c;
                        grad[j] += k_mu + k_var * (bd[j] - st.mu_b) + k_cov * (td[j] - st.mu_a);
                    }
                }
            }
        }
    }
    ImageGrid::new(w, h, ch, grad)
}

/// Softmax-based per-pixel weights of the backward/forward photometric errors:
/// `sigma_bo = e^{L_bo} / (e^{L_bo} + e^{L_fo})`, `omega_bo = e^{(1 - sigma_bo) - 0.5}`,
/// and symmetrically for the forward direction.
pub fn direction_weights(l_bo: &ScalarMap, l_fo: &ScalarMap) -> Result<(ScalarMap, ScalarMap)> {
    l_fo.ensure_size(l_bo.width(), l_bo.height(), "direction_weights")?;
    let n = l_bo.len();
    let mut w_bo = Vec::with_capacity(n);
    let mut w_fo = Vec::with_capacity(n);
    for (&a, &b) in l_bo.data().iter().zip(l_fo.data()) {
        let (sa, sb) = softmax2(a, b);
        w_bo.push((0.5 - sa).exp());
        w_fo.push((0.5 - sb).exp());
    }
    Ok((
        ScalarMap::new(l_bo.width(), l_bo.height(), w_bo)?,
        ScalarMap::new(l_bo.width(), l_bo.height(), w_fo)?,
    ))
}

/// Two-way softmax with max subtraction; symmetric under swapping its arguments.
#[inline]
pub(crate) fn softmax2(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let s = ea + eb;
    (ea / s, eb / s)
}

/// Borrowed inputs of the flow photometric loss.
#[derive(Debug, Clone, Copy)]
pub struct FlowPhotoInput<'a> {
    pub target: &'a ImageGrid,
    /// `I_{t-1}`, `I_{t+1}`.
    pub sources: [&'a ImageGrid; 2],
    /// `F_{t->t-1}`, `F_{t->t+1}`.
    pub flows: [&'a FlowField; 2],
    /// `F_{t-1->t}`, `F_{t+1->t}`.
    pub backward_flows: [&'a FlowField; 2],
}

impl<'a> FlowPhotoInput<'a> {
    pub fn from_state(state: &'a crate::loss::LossState) -> Self {
        FlowPhotoInput {
            target: &state.target,
            sources: [&state.sources[PREV].image, &state.sources[NEXT].image],
            flows: [&state.sources[PREV].flow, &state.sources[NEXT].flow],
            backward_flows: [
                &state.sources[PREV].backward_flow,
                &state.sources[NEXT].backward_flow,
            ],
        }
    }
}

/// Stop-gradient quantities of the flow photometric loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPhotoGates {
    pub warp_validity: [ScalarMap; 2],
    pub occlusion: [OcclusionMap; 2],
    pub omega: [ScalarMap; 2],
}

fn flow_warps(
    input: &FlowPhotoInput<'_>,
    validity: Option<&[ScalarMap; 2]>,
) -> Result<([SampleCoords; 2], [WarpResult; 2])> {
    let coords = [
        SampleCoords::from_flow(input.flows[PREV]),
        SampleCoords::from_flow(input.flows[NEXT]),
    ];
    let warps = [
        warp_at(input.sources[PREV], &coords[PREV], validity.map(|v| &v[PREV]))?,
        warp_at(input.sources[NEXT], &coords[NEXT], validity.map(|v| &v[NEXT]))?,
    ];
    Ok((coords, warps))
}

fn check_input(input: &FlowPhotoInput<'_>) -> Result<()> {
    let (w, h) = (input.target.width(), input.target.height());
    for k in [PREV, NEXT] {
        input.flows[k].ensure_size(w, h, "forward flow")?;
        input.backward_flows[k].ensure_size(
            input.sources[k].width(),
            input.sources[k].height(),
            "backward flow",
        )?;
        if input.sources[k].channels() != input.target.channels() {
            return Err(crate::error::Error::DimensionMismatch(
                "source and target channel counts differ".into(),
            ));
        }
    }
    Ok(())
}

/// Computes the gating quantities (warp validity, occlusion maps, direction weights) at the current flows.
pub fn flow_photo_gates(input: &FlowPhotoInput<'_>, params: &PhotoParams) -> Result<FlowPhotoGates> {
    check_input(input)?;
    let (w, h) = (input.target.width(), input.target.height());
    let (_, warps) = flow_warps(input, None)?;
    let l_bo = photo_error(input.target, &warps[PREV], params)?;
    let l_fo = photo_error(input.target, &warps[NEXT], params)?;
    let (w_bo, w_fo) = direction_weights(&l_bo, &l_fo)?;
    let [wp, wn] = warps;
    Ok(FlowPhotoGates {
        warp_validity: [wp.validity, wn.validity],
        occlusion: [
            occlusion_from_flow(input.backward_flows[PREV], w, h),
            occlusion_from_flow(input.backward_flows[NEXT], w, h),
        ],
        omega: [w_bo, w_fo],
    })
}

/// Occlusion-aware photometric loss with the given (frozen) gates.
pub fn flow_photometric_loss_gated(
    input: &FlowPhotoInput<'_>,
    params: &PhotoParams,
    gates: &FlowPhotoGates,
    with_gradient: bool,
) -> Result<LossBundle> {
    check_input(input)?;
    let (w, h) = (input.target.width(), input.target.height());
    let (coords, warps) = flow_warps(input, Some(&gates.warp_validity))?;
    let errors = [
        photo_error(input.target, &warps[PREV], params)?,
        photo_error(input.target, &warps[NEXT], params)?,
    ];
    let masks = [
        erode_validity(&gates.warp_validity[PREV], params.ssim_window),
        erode_validity(&gates.warp_validity[NEXT], params.ssim_window),
    ];
    let validity = masks[PREV].zip_map(&masks[NEXT], f64::max);
    let per_pixel = ScalarMap::from_fn(w, h, |x, y| {
        let i = y * w + x;
        let mut v = 0.0;
        for k in [PREV, NEXT] {
            v += gates.omega[k].data()[i] * gates.occlusion[k].as_map().data()[i] * errors[k].data()[i];
        }
        v
    });
    let value = masked_mean(&per_pixel, &validity);
    let mut gradients = LossGradients::default();
    if with_gradient {
        let n = validity.sum();
        let scale = if n > 0.0 { 1.0 / n } else { 0.0 };
        let mut flows = [FlowField::zeros(w, h), FlowField::zeros(w, h)];
        for k in [PREV, NEXT] {
            let upstream = gates.omega[k].zip_map(gates.occlusion[k].as_map(), |a, b| a * b * scale);
            let d_warped = photo_error_backward(input.target, &warps[k], params, &upstream)?;
            let d_coords = warp_backward(input.sources[k], &coords[k], &warps[k].validity, &d_warped);
            for (i, d) in d_coords.iter().enumerate() {
                flows[k].set(i % w, i / w, d.x, d.y);
            }
        }
        gradients.flow = Some(flows);
    }
    Ok(LossBundle {
        value,
        per_pixel,
        validity,
        gradients,
        flags: LossFlags::default(),
    })
}

/// Occlusion-aware photometric loss for the optical flows; gradients with
/// respect to both forward flows, gates held constant.
pub fn flow_photometric_loss(input: &FlowPhotoInput<'_>, params: &PhotoParams) -> Result<LossBundle> {
    let gates = flow_photo_gates(input, params)?;
    flow_photometric_loss_gated(input, params, &gates, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::warp_by_flow;

    fn textured(w: usize, h: usize, phase: f64) -> ImageGrid {
        ImageGrid::from_fn(w, h, 3, |x, y, c| {
            0.5 + 0.3 * ((0.7 * x as f64 + 0.4 * y as f64 + phase + c as f64).sin())
        })
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
        assert_eq!(reflect(-1, 1), 0);
    }

    #[test]
    fn self_similarity_is_one() {
        let a = textured(9, 7, 0.0);
        let s = ssim_map(&a, &a, &PhotoParams::default()).unwrap();
        assert!(s.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn constant_images_closed_form() {
        let p = PhotoParams::default();
        let a = ImageGrid::filled(5, 5, 1, 0.0);
        let b = ImageGrid::filled(5, 5, 1, 1.0);
        let s = ssim_map(&a, &b, &p).unwrap();
        let expected = p.c1 / (1.0 + p.c1);
        assert!(s.data().iter().all(|v| (v - expected).abs() < 1e-15));
    }

    #[test]
    fn small_shift_keeps_ssim_high() {
        let a = textured(12, 10, 0.3);
        let b = ImageGrid::from_fn(12, 10, 3, |x, y, c| a.get(x, y, c) + 0.001);
        let s = ssim_map(&a, &b, &PhotoParams::default()).unwrap();
        assert!(s.data().iter().all(|&v| v < 1.0 && v > 0.99));
    }

    #[test]
    fn photo_error_cases() {
        let p = PhotoParams::default();
        let a = textured(8, 6, 0.0);
        let same = warp_by_flow(&a, &FlowField::zeros(8, 6)).unwrap();
        let e = photo_error(&a, &same, &p).unwrap();
        assert!(e.data().iter().all(|&v| v.abs() < 1e-12));

        let l1_only = PhotoParams { alpha: 0.0, ..p };
        let t = ImageGrid::filled(4, 4, 3, 0.2);
        let s = warp_by_flow(&ImageGrid::filled(4, 4, 3, 0.5), &FlowField::zeros(4, 4)).unwrap();
        let e = photo_error(&t, &s, &l1_only).unwrap();
        assert!(e.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));

        // invalid samples contribute exactly zero
        let shifted = warp_by_flow(&textured(8, 6, 1.0), &FlowField::constant(8, 6, 1.0, 0.0).unwrap()).unwrap();
        let e = photo_error(&a, &shifted, &p).unwrap();
        for y in 0..6 {
            assert_eq!(e.get(7, y), 0.0);
        }
    }

    #[test]
    fn direction_weight_values() {
        let eq = ScalarMap::filled(2, 1, 0.37);
        let (a, b) = direction_weights(&eq, &eq).unwrap();
        assert!(a.data().iter().chain(b.data()).all(|&v| v == 1.0));

        let (a, b) = direction_weights(&ScalarMap::filled(1, 1, 1.0), &ScalarMap::filled(1, 1, 0.0)).unwrap();
        let e = std::f64::consts::E;
        let sigma = e / (e + 1.0);
        assert!((a.data()[0] - ((1.0 - sigma) - 0.5).exp()).abs() < 1e-12);
        assert!((a.data()[0] - 0.7937).abs() < 1e-4);
        assert!((a.data()[0] * b.data()[0] - 1.0).abs() < 1e-12);

        let (a, b) = direction_weights(&ScalarMap::filled(1, 1, 800.0), &ScalarMap::filled(1, 1, 0.0)).unwrap();
        assert!((a.data()[0] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((b.data()[0] - 0.5f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn identical_frames_zero_flow_zero_loss() {
        let a = textured(10, 8, 0.2);
        let z = FlowField::zeros(10, 8);
        let input = FlowPhotoInput {
            target: &a,
            sources: [&a, &a],
            flows: [&z, &z],
            backward_flows: [&z, &z],
        };
        let l = flow_photometric_loss(&input, &PhotoParams::default()).unwrap();
        assert!(l.value.abs() < 1e-12);
    }
}
