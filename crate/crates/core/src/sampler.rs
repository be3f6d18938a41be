//! Bilinear sampling and backward warping with analytic derivatives.
//!
//! A sample at `(x, y)` is valid when `0 <= x <= W-1` and `0 <= y <= H-1`;
//! every corner carrying non-zero weight then lies inside the grid. Invalid
//! samples read as zero and are masked out of every loss, never clamped to the
//! border.
//!
//! The interpolating cell is `x0 = clamp(floor(x), 0, W-2)`, so at exact
//! integer coordinates the derivative is the right-sided one (left-sided on
//! the last column/row). When a frozen validity mask is supplied the same
//! cell rule extrapolates linearly, which keeps loss evaluations with frozen
//! masks continuous under tiny coordinate perturbations.

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::grid::{FlowField, ImageGrid, ScalarMap};

#[derive(Debug, Clone, Copy)]
struct Cell {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: f64,
    fy: f64,
}

#[inline]
fn in_bounds(width: usize, height: usize, x: f64, y: f64) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64
}

#[inline]
fn cell_axis(len: usize, c: f64) -> (usize, usize, f64) {
    if len == 1 {
        return (0, 0, 0.0);
    }
    let f = c.floor();
    let i0 = if f.is_nan() || f < 0.0 {
        0
    } else {
        (f as usize).min(len - 2)
    };
    (i0, i0 + 1, c - i0 as f64)
}

#[inline]
fn cell(width: usize, height: usize, x: f64, y: f64) -> Cell {
    let (x0, x1, fx) = cell_axis(width, x);
    let (y0, y1, fy) = cell_axis(height, y);
    Cell {
        x0,
        y0,
        x1,
        y1,
        fx,
        fy,
    }
}

impl Cell {
    #[inline]
    fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ]
    }

    #[inline]
    fn corners(&self) -> [(usize, usize); 4] {
        [
            (self.x0, self.y0),
            (self.x1, self.y0),
            (self.x0, self.y1),
            (self.x1, self.y1),
        ]
    }

    #[inline]
    fn value(&self, grid: &ImageGrid, c: usize) -> f64 {
        let w = self.weights();
        w[0] * grid.get(self.x0, self.y0, c)
            + w[1] * grid.get(self.x1, self.y0, c)
            + w[2] * grid.get(self.x0, self.y1, c)
            + w[3] * grid.get(self.x1, self.y1, c)
    }

    #[inline]
    fn gradient(&self, grid: &ImageGrid, c: usize) -> (f64, f64) {
        let v00 = grid.get(self.x0, self.y0, c);
        let v10 = grid.get(self.x1, self.y0, c);
        let v01 = grid.get(self.x0, self.y1, c);
        let v11 = grid.get(self.x1, self.y1, c);
        let dx = if self.x1 == self.x0 {
            0.0
        } else {
            (1.0 - self.fy) * (v10 - v00) + self.fy * (v11 - v01)
        };
        let dy = if self.y1 == self.y0 {
            0.0
        } else {
            (1.0 - self.fx) * (v01 - v00) + self.fx * (v11 - v10)
        };
        (dx, dy)
    }
}

/// Per-channel bilinear sample and its validity. Out-of-bounds samples are zero.
pub fn sample_bilinear(grid: &ImageGrid, x: f64, y: f64) -> (Vec<f64>, bool) {
    let valid = in_bounds(grid.width(), grid.height(), x, y);
    if !valid {
        return (vec![0.0; grid.channels()], false);
    }
    let cell = cell(grid.width(), grid.height(), x, y);
    ((0..grid.channels()).map(|c| cell.value(grid, c)).collect(), true)
}

/// Analytic derivatives of a bilinear sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearGrad {
    /// d value / d x, per channel.
    pub dx: Vec<f64>,
    /// d value / d y, per channel.
    pub dy: Vec<f64>,
    /// d value / d grid sample: the four corners `(x, y)` with their weights.
    /// The same weight applies to every channel.
    pub corner_weights: [((usize, usize), f64); 4],
    pub valid: bool,
}

pub fn sample_bilinear_grad(grid: &ImageGrid, x: f64, y: f64) -> BilinearGrad {
    let valid = in_bounds(grid.width(), grid.height(), x, y);
    let cell = cell(grid.width(), grid.height(), x, y);
    let w = cell.weights();
    let corners = cell.corners();
    let mut dx = vec![0.0; grid.channels()];
    let mut dy = vec![0.0; grid.channels()];
    if valid {
        for c in 0..grid.channels() {
            let (gx, gy) = cell.gradient(grid, c);
            dx[c] = gx;
            dy[c] = gy;
        }
    }
    let scale = if valid { 1.0 } else { 0.0 };
    BilinearGrad {
        dx,
        dy,
        corner_weights: [
            (corners[0], w[0] * scale),
            (corners[1], w[1] * scale),
            (corners[2], w[2] * scale),
            (corners[3], w[3] * scale),
        ],
        valid,
    }
}

/// Flat indices and weights of the four corners used for an in-bounds sample,
/// in the order the sampler accumulates them; `None` when out of bounds.
pub fn bilinear_stencil(width: usize, height: usize, x: f64, y: f64) -> Option<[(usize, f64); 4]> {
    if !(x.is_finite() && y.is_finite() && in_bounds(width, height, x, y)) {
        return None;
    }
    let cell = cell(width, height, x, y);
    let w = cell.weights();
    let c = cell.corners();
    Some([
        (c[0].1 * width + c[0].0, w[0]),
        (c[1].1 * width + c[1].0, w[1]),
        (c[2].1 * width + c[2].0, w[2]),
        (c[3].1 * width + c[3].0, w[3]),
    ])
}

/// Synthesized image and the mask of pixels whose sample was in bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    pub warped: ImageGrid,
    pub validity: ScalarMap,
}

/// Sampling locations for every target pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCoords {
    width: usize,
    height: usize,
    points: Vec<Vector2<f64>>,
}

impl SampleCoords {
    pub fn new(width: usize, height: usize, points: Vec<Vector2<f64>>) -> Result<Self> {
        if points.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} sample points for a {width}x{height} grid",
                points.len()
            )));
        }
        Ok(Self {
            width,
            height,
            points,
        })
    }

    /// `p + flow(p)` for every pixel.
    pub fn from_flow(flow: &FlowField) -> Self {
        let (w, h) = (flow.width(), flow.height());
        let mut points = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = flow.get(x, y);
                points.push(Vector2::new(x as f64 + u, y as f64 + v));
            }
        }
        Self {
            width: w,
            height: h,
            points,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn points(&self) -> &[Vector2<f64>] {
        &self.points
    }

    /// In-bounds mask of these coordinates with respect to a `src_w x src_h` source.
    pub fn validity(&self, src_w: usize, src_h: usize) -> ScalarMap {
        let data = self
            .points
            .iter()
            .map(|p| {
                if p.x.is_finite() && p.y.is_finite() && in_bounds(src_w, src_h, p.x, p.y) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        ScalarMap::new(self.width, self.height, data).expect("consistent dimensions")
    }
}

/// Warps `source` at the given coordinates. With `validity = None` the mask is
/// computed from the coordinates; otherwise the supplied (frozen) mask is used.
pub fn warp_at(
    source: &ImageGrid,
    coords: &SampleCoords,
    validity: Option<&ScalarMap>,
) -> Result<WarpResult> {
    let validity = match validity {
        Some(m) => {
            m.ensure_size(coords.width, coords.height, "frozen warp validity")?;
            m.clone()
        }
        None => coords.validity(source.width(), source.height()),
    };
    let ch = source.channels();
    let mut data = vec![0.0; coords.points.len() * ch];
    for (i, p) in coords.points.iter().enumerate() {
        if validity.data()[i] == 0.0 {
            continue;
        }
        let cell = cell(source.width(), source.height(), p.x, p.y);
        for c in 0..ch {
            data[i * ch + c] = cell.value(source, c);
        }
    }
    Ok(WarpResult {
        warped: ImageGrid::new(coords.width, coords.height, ch, data)?,
        validity,
    })
}

/// `warped(p) = sample_bilinear(source, p + flow(p))`.
pub fn warp_by_flow(source: &ImageGrid, flow: &FlowField) -> Result<WarpResult> {
    flow.ensure_size(source.width(), source.height(), "warp_by_flow")?;
    warp_at(source, &SampleCoords::from_flow(flow), None)
}

/// Back-propagates `dL/d warped` to the sampling coordinates. Pixels with zero
/// validity receive zero gradient.
pub fn warp_backward(
    source: &ImageGrid,
    coords: &SampleCoords,
    validity: &ScalarMap,
    grad_warped: &ImageGrid,
) -> Vec<Vector2<f64>> {
    let ch = source.channels();
    coords
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if validity.data()[i] == 0.0 {
                return Vector2::zeros();
            }
            let cell = cell(source.width(), source.height(), p.x, p.y);
            let g = &grad_warped.data()[i * ch..(i + 1) * ch];
            let mut out = Vector2::zeros();
            for (c, gc) in g.iter().enumerate() {
                if *gc == 0.0 {
                    continue;
                }
                let (dx, dy) = cell.gradient(source, c);
                out.x += gc * dx;
                out.y += gc * dy;
            }
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_coordinates_are_exact() {
        let g = ImageGrid::from_fn(4, 3, 2, |x, y, c| (x * 7 + y * 3 + c) as f64 * 0.1);
        for y in 0..3 {
            for x in 0..4 {
                let (v, ok) = sample_bilinear(&g, x as f64, y as f64);
                assert!(ok);
                assert_eq!(v, g.pixel(x, y));
            }
        }
    }

    #[test]
    fn horizontal_midpoint() {
        let g = ImageGrid::new(2, 1, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(sample_bilinear(&g, 0.5, 0.0), (vec![0.5], true));
    }

    #[test]
    fn out_of_bounds_is_invalid_zero() {
        let g = ImageGrid::filled(3, 3, 3, 0.7);
        assert_eq!(sample_bilinear(&g, -0.5, 0.0), (vec![0.0; 3], false));
        assert!(!sample_bilinear(&g, 2.0 + 1e-9, 1.0).1);
        assert!(sample_bilinear(&g, 2.0, 2.0).1);
    }

    #[test]
    fn ramp_gradient() {
        let g = ImageGrid::from_fn(6, 5, 1, |x, _, _| x as f64);
        let d = sample_bilinear_grad(&g, 2.3, 1.7);
        assert_eq!(d.dx, vec![1.0]);
        assert_eq!(d.dy, vec![0.0]);
        let c = ImageGrid::filled(6, 5, 1, 0.4);
        let d = sample_bilinear_grad(&c, 3.6, 2.2);
        assert_eq!((d.dx[0], d.dy[0]), (0.0, 0.0));
    }

    #[test]
    fn right_sided_derivative_at_integers() {
        let g = ImageGrid::new(3, 1, 1, vec![0.0, 1.0, 5.0]).unwrap();
        assert_eq!(sample_bilinear_grad(&g, 1.0, 0.0).dx, vec![4.0]);
        // last column falls back to the left cell
        assert_eq!(sample_bilinear_grad(&g, 2.0, 0.0).dx, vec![4.0]);
        assert_eq!(sample_bilinear_grad(&g, 0.0, 0.0).dx, vec![1.0]);
    }

    #[test]
    fn corner_weights_partition_unity() {
        let g = ImageGrid::filled(5, 5, 1, 0.0);
        let d = sample_bilinear_grad(&g, 1.25, 3.5);
        let s: f64 = d.corner_weights.iter().map(|(_, w)| w).sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_flow_is_identity() {
        let g = ImageGrid::from_fn(5, 4, 3, |x, y, c| ((x + 2 * y + c) % 7) as f64 / 7.0);
        let r = warp_by_flow(&g, &FlowField::zeros(5, 4)).unwrap();
        assert_eq!(r.warped, g);
        assert!(r.validity.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn integer_shift() {
        let g = ImageGrid::from_fn(5, 4, 1, |x, y, _| (x * 10 + y) as f64);
        let r = warp_by_flow(&g, &FlowField::constant(5, 4, 1.0, 0.0).unwrap()).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                if x == 4 {
                    assert_eq!(r.validity.get(x, y), 0.0);
                    assert_eq!(r.warped.get(x, y, 0), 0.0);
                } else {
                    assert_eq!(r.validity.get(x, y), 1.0);
                    assert_eq!(r.warped.get(x, y, 0), g.get(x + 1, y, 0));
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let g = ImageGrid::filled(5, 4, 1, 0.0);
        assert!(matches!(
            warp_by_flow(&g, &FlowField::zeros(4, 4)),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
