//! Dense per-pixel containers.
//!
//! Every container stores its samples row-major (`index = y * width + x`) in
//! 64-bit floats. Reductions over pixels always walk that order so the same
//! input yields a bit-identical sum.

use crate::error::{Error, Result};

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Contract(format!(
            "grid dimensions must be positive, got {width}x{height}"
        )));
    }
    Ok(())
}

/// H x W x C image or feature map, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height)?;
        if channels == 0 {
            return Err(Error::Contract("image needs at least one channel".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} samples for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels])
            .expect("filled grid with positive dimensions")
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data).expect("from_fn with positive dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Samples of the pixel at `(x, y)`, one per channel.
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn ensure_same_shape(&self, other: &ImageGrid, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Single-channel view of this grid, if it has exactly one channel.
    pub fn to_scalar_map(&self) -> Result<ScalarMap> {
        if self.channels != 1 {
            return Err(Error::Format(format!(
                "expected a single-channel grid, found {} channels",
                self.channels
            )));
        }
        ScalarMap::new(self.width, self.height, self.data.clone())
    }
}

/// Single-valued per-pixel map: loss maps, masks, weights, range maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ScalarMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} map",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("positive dimensions")
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data).expect("positive dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_size(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }

    pub fn ensure_size(&self, width: usize, height: usize, what: &str) -> Result<()> {
        if self.same_size(width, height) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "{what}: {}x{} vs {width}x{height}",
                self.width, self.height
            )))
        }
    }

    /// Row-major sum.
    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarMap {
        ScalarMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ScalarMap, f: impl Fn(f64, f64) -> f64) -> ScalarMap {
        debug_assert!(self.same_size(other.width, other.height));
        ScalarMap {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn to_image(&self) -> ImageGrid {
        ImageGrid::new(self.width, self.height, 1, self.data.clone())
            .expect("scalar map has consistent dimensions")
    }
}

/// Dense displacement field in pixels; `u` horizontal, `v` vertical.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        check_dims(width, height)?;
        let n = width * height;
        if u.len() != n || v.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "flow components of length {}/{} for a {width}x{height} field",
                u.len(),
                v.len()
            )));
        }
        if let Some(i) = u
            .iter()
            .zip(&v)
            .position(|(a, b)| !a.is_finite() || !b.is_finite())
        {
            return Err(Error::NonFiniteFlow {
                x: i % width,
                y: i / width,
            });
        }
        Ok(Self {
            width,
            height,
            u,
            v,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![0.0; width * height], vec![0.0; width * height])
            .expect("positive dimensions")
    }

    pub fn constant(width: usize, height: usize, u: f64, v: f64) -> Result<Self> {
        Self::new(width, height, vec![u; width * height], vec![v; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Result<Self> {
        let mut u = Vec::with_capacity(width * height);
        let mut v = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(x, y);
                u.push(a);
                v.push(b);
            }
        }
        Self::new(width, height, u, v)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    /// Mutable access to a single displacement. The caller keeps it finite.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, u: f64, v: f64) {
        debug_assert!(u.is_finite() && v.is_finite());
        let i = y * self.width + x;
        self.u[i] = u;
        self.v[i] = v;
    }

    /// Component `k` (0 = u, 1 = v) of pixel index `i`.
    #[inline]
    pub fn component(&self, i: usize, k: usize) -> f64 {
        if k == 0 {
            self.u[i]
        } else {
            self.v[i]
        }
    }

    #[inline]
    pub fn set_component(&mut self, i: usize, k: usize, value: f64) {
        debug_assert!(value.is_finite());
        if k == 0 {
            self.u[i] = value;
        } else {
            self.v[i] = value;
        }
    }

    pub fn same_size(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }

    pub fn ensure_size(&self, width: usize, height: usize, what: &str) -> Result<()> {
        if self.same_size(width, height) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "{what}: flow is {}x{}, expected {width}x{height}",
                self.width, self.height
            )))
        }
    }

    /// Flattened parameter vector `[u0, v0, u1, v1, ...]`.
    pub fn to_interleaved(&self) -> Vec<f64> {
        self.u
            .iter()
            .zip(&self.v)
            .flat_map(|(&a, &b)| [a, b])
            .collect()
    }

    pub fn from_interleaved(width: usize, height: usize, data: &[f64]) -> Result<Self> {
        if data.len() != 2 * width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} flow",
                data.len()
            )));
        }
        let u = data.iter().step_by(2).copied().collect();
        let v = data.iter().skip(1).step_by(2).copied().collect();
        Self::new(width, height, u, v)
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.u.iter().zip(&self.v).map(|(a, b)| a.hypot(*b)).collect()
    }
}

/// Strictly positive per-pixel scene depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} depths for a {width}x{height} map",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::Contract(format!(
                "depth must be positive and finite, got {} at ({}, {})",
                data[i],
                i % width,
                i / width
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Result<Self> {
        Self::new(width, height, vec![depth; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn to_scalar_map(&self) -> ScalarMap {
        ScalarMap::new(self.width, self.height, self.data.clone()).expect("consistent dimensions")
    }

    pub fn ensure_size(&self, width: usize, height: usize, what: &str) -> Result<()> {
        if self.width == width && self.height == height {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "{what}: depth is {}x{}, expected {width}x{height}",
                self.width, self.height
            )))
        }
    }

    /// Multiplies every depth by the matching factor; factors must keep depths positive.
    pub fn scaled_by(&self, factors: &[f64]) -> Result<DepthMap> {
        if factors.len() != self.data.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} factors for {} depths",
                factors.len(),
                self.data.len()
            )));
        }
        DepthMap::new(
            self.width,
            self.height,
            self.data.iter().zip(factors).map(|(d, f)| d * f).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_wrong_length() {
        assert!(matches!(
            ImageGrid::new(2, 2, 3, vec![0.0; 11]),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(ImageGrid::new(0, 2, 1, vec![]).is_err());
    }

    #[test]
    fn flow_rejects_nan() {
        let err = FlowField::new(2, 1, vec![0.0, f64::NAN], vec![0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteFlow { x: 1, y: 0 }));
    }

    #[test]
    fn depth_must_be_positive() {
        assert!(DepthMap::new(2, 1, vec![1.0, 0.0]).is_err());
        assert!(DepthMap::new(2, 1, vec![1.0, -3.0]).is_err());
        assert!(DepthMap::new(2, 1, vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn interleaved_round_trip() {
        let f = FlowField::from_fn(3, 2, |x, y| (x as f64, -(y as f64))).unwrap();
        let g = FlowField::from_interleaved(3, 2, &f.to_interleaved()).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn row_major_layout() {
        let img = ImageGrid::from_fn(3, 2, 2, |x, y, c| (100 * y + 10 * x + c) as f64);
        assert_eq!(img.get(2, 1, 1), 121.0);
        assert_eq!(img.pixel(1, 1), &[110.0, 111.0]);
    }
}
