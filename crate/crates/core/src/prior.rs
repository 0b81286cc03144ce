//! Soft spatial prior built from parsed anatomical regions.
//!
//! Each region contributes a separable tent (product of two clamped linear
//! ramps per axis) sampled at patch centers. The summed tents are min-max
//! normalized and mapped into `[1, lambda_s]`.

use serde::{Deserialize, Serialize};

use crate::anatomy::AnatomicalRegion;
use crate::error::{Error, Result};
use crate::grid::{minmax_normalize, Grid};

const MIN_RANGE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialPriorMap {
    pub grid: Grid,
    pub lambda_s: f64,
    pub regions: Vec<AnatomicalRegion>,
}

#[inline]
fn tent(v: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    ((v - lo) / span).clamp(0.0, 1.0) * ((hi - v) / span).clamp(0.0, 1.0)
}

/// Unnormalized tent weights of one region on an `h × w` patch grid.
/// Each axis factor peaks at 0.25, so the product peaks at 0.0625.
pub fn region_weight_grid(region: &AnatomicalRegion, h: usize, w: usize) -> Result<Grid> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidParameter(format!("prior grid must be at least 1x1, got {h}x{w}")));
    }
    if region.x_max - region.x_min < MIN_RANGE || region.y_max - region.y_min < MIN_RANGE {
        return Err(Error::DegenerateRange(region.label.clone()));
    }
    let wx: Vec<f64> = (0..w)
        .map(|j| tent((j as f64 + 0.5) / w as f64, region.x_min, region.x_max))
        .collect();
    let wy: Vec<f64> = (0..h)
        .map(|i| tent((i as f64 + 0.5) / h as f64, region.y_min, region.y_max))
        .collect();
    Ok(Grid::from_fn(h, w, |i, j| wx[j] * wy[i]))
}

/// `M = 1 + (lambda_s - 1) * minmax(sum of region tents)`, or all ones when
/// there are no regions.
pub fn build_prior(regions: &[AnatomicalRegion], lambda_s: f64, h: usize, w: usize) -> Result<SpatialPriorMap> {
    if !(lambda_s >= 1.0) || !lambda_s.is_finite() {
        return Err(Error::InvalidParameter(format!("lambda_s must be >= 1, got {lambda_s}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::InvalidParameter(format!("prior grid must be at least 1x1, got {h}x{w}")));
    }
    let grid = if regions.is_empty() {
        Grid::filled(h, w, 1.0)
    } else {
        let mut total = Grid::filled(h, w, 0.0);
        for r in regions {
            let g = region_weight_grid(r, h, w)?;
            for (acc, v) in total.data.iter_mut().zip(&g.data) {
                *acc += v;
            }
        }
        minmax_normalize(&total).map(|v| 1.0 + (lambda_s - 1.0) * v)
    };
    Ok(SpatialPriorMap {
        grid,
        lambda_s,
        regions: regions.to_vec(),
    })
}
