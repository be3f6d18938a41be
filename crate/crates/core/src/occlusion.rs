//! Occlusion reasoning from a backward flow field.
//!
//! Each source pixel is splatted into the target grid with the bilinear
//! kernel at the location its backward flow points to. The accumulated mass
//! `R(x, y)` counts correspondences; target pixels that receive no mass are
//! occluded (or out of view) in the source. The occlusion map is
//! `min(1, R)`, kept continuous.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{FlowField, ImageGrid, ScalarMap};

/// Continuous non-occlusion map in `[0, 1]`; values near 0 mark pixels of the
/// target that are not visible in the source.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMap(ScalarMap);

impl OcclusionMap {
    /// Wraps an existing mask after checking it lies in `[0, 1]`.
    pub fn from_mask(mask: ScalarMap) -> Result<Self> {
        if let Some(v) = mask.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("occlusion mask value {v} outside [0, 1]")));
        }
        Ok(Self(mask))
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self(ScalarMap::filled(width, height, 1.0))
    }

    pub fn as_map(&self) -> &ScalarMap {
        &self.0
    }

    pub fn into_map(self) -> ScalarMap {
        self.0
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.0.get(x, y)
    }
}

/// Splats every source pixel of `flow` (a source-to-target flow on the source
/// grid) into a `target_width x target_height` grid with the bilinear kernel.
///
/// Rows of the target are filled independently; each row accumulates its
/// contributions in source row-major order, so the result does not depend on
/// the number of worker threads.
pub fn range_map(flow: &FlowField, target_width: usize, target_height: usize) -> ScalarMap {
    let (sw, sh) = (flow.width(), flow.height());
    // (x0, fx, wy) per target row, pushed in source order
    let mut rows: Vec<Vec<(i64, f64, f64)>> = vec![Vec::new(); target_height];
    for j in 0..sh {
        for i in 0..sw {
            let (u, v) = flow.get(i, j);
            let tx = i as f64 + u;
            let ty = j as f64 + v;
            let x0 = tx.floor();
            let y0 = ty.floor();
            let fx = tx - x0;
            let fy = ty - y0;
            let (x0, y0) = (x0 as i64, y0 as i64);
            for (row, wy) in [(y0, 1.0 - fy), (y0 + 1, fy)] {
                if wy > 0.0 && row >= 0 && (row as usize) < target_height {
                    rows[row as usize].push((x0, fx, wy));
                }
            }
        }
    }
    let mut data = vec![0.0; target_width * target_height];
    data.par_chunks_mut(target_width)
        .zip(rows.par_iter())
        .for_each(|(out, contributions)| {
            for &(x0, fx, wy) in contributions {
                for (col, wx) in [(x0, 1.0 - fx), (x0 + 1, fx)] {
                    if wx > 0.0 && col >= 0 && (col as usize) < target_width {
                        out[col as usize] += wx * wy;
                    }
                }
            }
        });
    ScalarMap::new(target_width, target_height, data).expect("positive dimensions")
}

/// `M = min(1, R)` pointwise.
pub fn occlusion_map(range: &ScalarMap) -> Result<OcclusionMap> {
    if let Some(i) = range.data().iter().position(|r| !(*r >= 0.0)) {
        return Err(Error::Contract(format!(
            "range map must be non-negative, found {} at ({}, {})",
            range.data()[i],
            i % range.width(),
            i / range.width()
        )));
    }
    Ok(OcclusionMap(range.map(|r| r.min(1.0))))
}

/// Occlusion map of the target from the source-to-target flow.
pub fn occlusion_from_flow(backward: &FlowField, target_width: usize, target_height: usize) -> OcclusionMap {
    occlusion_map(&range_map(backward, target_width, target_height))
        .expect("range maps are non-negative")
}

/// `out[c] = features[c] * mask + bias[c]`, the mask broadcast over channels.
pub fn mask_fuse(features: &ImageGrid, mask: &OcclusionMap, bias: &ImageGrid) -> Result<ImageGrid> {
    features.ensure_same_shape(bias, "mask_fuse features vs bias")?;
    mask.0
        .ensure_size(features.width(), features.height(), "mask_fuse mask")?;
    let ch = features.channels();
    let data = features
        .data()
        .iter()
        .zip(bias.data())
        .enumerate()
        .map(|(k, (w, mu))| w * mask.0.data()[k / ch] + mu)
        .collect();
    ImageGrid::new(features.width(), features.height(), ch, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_gives_unit_range() {
        let r = range_map(&FlowField::zeros(7, 5), 7, 5);
        assert!(r.data().iter().all(|&v| v == 1.0));
        let m = occlusion_map(&r).unwrap();
        assert!(m.as_map().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn uniform_shift_empties_first_column() {
        let r = range_map(&FlowField::constant(4, 4, 1.0, 0.0).unwrap(), 4, 4);
        for y in 0..4 {
            assert_eq!(r.get(0, y), 0.0);
            for x in 1..4 {
                assert_eq!(r.get(x, y), 1.0);
            }
        }
    }

    #[test]
    fn two_sources_on_one_target() {
        let mut flow = FlowField::zeros(3, 1);
        flow.set(0, 0, 1.0, 0.0);
        let r = range_map(&flow, 3, 1);
        assert_eq!(r.data(), &[0.0, 2.0, 1.0]);
        let m = occlusion_map(&r).unwrap();
        assert_eq!(m.as_map().data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn fractional_values_are_kept() {
        let r = ScalarMap::new(2, 1, vec![0.3, 1.7]).unwrap();
        assert_eq!(occlusion_map(&r).unwrap().as_map().data(), &[0.3, 1.0]);
    }

    #[test]
    fn negative_range_rejected() {
        let r = ScalarMap::new(2, 1, vec![0.3, -0.1]).unwrap();
        assert!(matches!(occlusion_map(&r), Err(Error::Contract(_))));
    }

    #[test]
    fn fuse_cases() {
        let w = ImageGrid::filled(2, 2, 3, 2.0);
        let mu = ImageGrid::filled(2, 2, 3, 0.25);
        let zero = ImageGrid::filled(2, 2, 3, 0.0);
        let ones = OcclusionMap::ones(2, 2);
        assert_eq!(mask_fuse(&w, &ones, &zero).unwrap(), w);
        let none = OcclusionMap::from_mask(ScalarMap::zeros(2, 2)).unwrap();
        assert_eq!(mask_fuse(&w, &none, &mu).unwrap(), mu);
        let half = OcclusionMap::from_mask(ScalarMap::filled(2, 2, 0.5)).unwrap();
        assert!(mask_fuse(&w, &half, &mu).unwrap().data().iter().all(|&v| v == 1.25));
        assert!(mask_fuse(&w, &half, &ImageGrid::filled(2, 2, 1, 0.0)).is_err());
    }
}
