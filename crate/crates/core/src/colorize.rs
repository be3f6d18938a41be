//! False-color renderings of scalar maps and flow fields.

use crate::error::{Error, Result};
use crate::grid::{FlowField, ImageGrid, ScalarMap};

/// Color scheme for [`colorize_map`] / [`colorize_flow`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    DepthColormap,
    FlowWheel,
}

// anchors with strictly increasing luminance, dark to bright
const RAMP: [[f64; 3]; 4] = [
    [0.05, 0.03, 0.20],
    [0.45, 0.10, 0.50],
    [0.95, 0.50, 0.20],
    [1.00, 1.00, 0.75],
];

/// Ramp color at `t` in `[0, 1]`.
pub fn ramp_color(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (t.floor() as usize).min(RAMP.len() - 2);
    let f = t - i as f64;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    [
        a[0] + f * (b[0] - a[0]),
        a[1] + f * (b[1] - a[1]),
        a[2] + f * (b[2] - a[2]),
    ]
}

/// Maps min to dark and max to bright; a constant map renders as the middle color.
pub fn colorize_map(map: &ScalarMap) -> Result<ImageGrid> {
    if let Some(v) = map.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("cannot colorize non-finite value {v}")));
    }
    let (lo, hi) = map.min_max();
    let span = hi - lo;
    let mut data = Vec::with_capacity(map.len() * 3);
    for &v in map.data() {
        let t = if span > 0.0 { (v - lo) / span } else { 0.5 };
        data.extend_from_slice(&ramp_color(t));
    }
    ImageGrid::new(map.width(), map.height(), 3, data)
}

/// Nearest-rank percentile of `values`, `q` in `(0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// HSV to RGB, hue in degrees.
pub fn hsv_to_rgb(hue: f64, sat: f64, val: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = val * sat;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r + m, g + m, b + m]
}

/// Hue of a flow vector in degrees, `[0, 360)`.
pub fn flow_hue(u: f64, v: f64) -> f64 {
    v.atan2(u).to_degrees().rem_euclid(360.0)
}

/// Hue encodes direction, saturation the magnitude relative to the 99th
/// percentile magnitude; zero flow is white.
pub fn colorize_flow(flow: &FlowField) -> Result<ImageGrid> {
    let mags = flow.magnitudes();
    let scale = percentile(&mags, 0.99);
    let mut data = Vec::with_capacity(mags.len() * 3);
    for (i, m) in mags.iter().enumerate() {
        let sat = if scale > 0.0 { (m / scale).min(1.0) } else { 0.0 };
        let hue = flow_hue(flow.u()[i], flow.v()[i]);
        data.extend_from_slice(&hsv_to_rgb(hue, sat, 1.0));
    }
    ImageGrid::new(flow.width(), flow.height(), 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn luminance(c: [f64; 3]) -> f64 {
        0.2126 * c[0] + 0.7152 * c[1] + 0.0722 * c[2]
    }

    #[test]
    fn ramp_is_monotone_in_brightness() {
        let mut last = -1.0;
        for i in 0..=100 {
            let l = luminance(ramp_color(i as f64 / 100.0));
            assert!(l > last);
            last = l;
        }
    }

    #[test]
    fn constant_map_is_mid_color() {
        let img = colorize_map(&ScalarMap::filled(3, 2, 7.0)).unwrap();
        let mid = ramp_color(0.5);
        for p in img.data().chunks(3) {
            assert_eq!(p, mid);
        }
    }

    #[test]
    fn zero_flow_is_white() {
        let img = colorize_flow(&FlowField::zeros(4, 3)).unwrap();
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn opposite_flows_are_opposite_hues() {
        let d = (flow_hue(1.0, 0.0) - flow_hue(-1.0, 0.0)).abs();
        assert_eq!(d, 180.0);
        let mut f = FlowField::zeros(2, 1);
        f.set(0, 0, 1.0, 0.0);
        f.set(1, 0, -1.0, 0.0);
        let img = colorize_flow(&f).unwrap();
        assert_eq!(img.pixel(0, 0), &[1.0, 0.0, 0.0]);
        assert_eq!(img.pixel(1, 0), &[0.0, 1.0, 1.0]);
    }
}
