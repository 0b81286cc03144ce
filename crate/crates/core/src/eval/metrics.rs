//! Patch masking and localization metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::IntermediatesBundle;
use crate::error::{Error, Result};
use crate::grid::Grid;

use super::oracle::{Mask, ScoreOracle};

/// Floor applied to `|S|` before dividing.
pub const SCORE_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Top,
    Bottom,
}

/// Ground-truth box in normalized image coordinates, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl GroundTruthBox {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
            && self.w > 0.0
            && self.h > 0.0
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x + self.w <= 1.0 + 1e-9
            && self.y + self.h <= 1.0 + 1e-9;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("box {self:?} is not inside the unit square")))
        }
    }

    /// Inclusive containment of a normalized point.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x && x <= self.x + self.w && y >= self.y && y <= self.y + self.h
    }
}

/// Number of patches masked for a fraction of `n`.
pub fn mask_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction.is_finite() && (0.0..=1.0).contains(&fraction) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("mask fraction must be in [0, 1], got {fraction}")))
    }
}

/// Indices of the `ceil(fraction * N)` highest (or lowest) scoring entries,
/// ties broken by lower index first.
pub fn select_indices(scores: &[f64], fraction: f64, mode: MaskMode) -> Result<Vec<usize>> {
    check_fraction(fraction)?;
    let k = mask_count(fraction, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let ord = match mode {
            MaskMode::Top => scores[b].total_cmp(&scores[a]),
            MaskMode::Bottom => scores[a].total_cmp(&scores[b]),
        };
        ord.then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

/// `ceil(fraction * n)` distinct indices drawn uniformly with a seeded RNG,
/// returned in ascending order. Baseline for the ranked masks above.
pub fn random_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    check_fraction(fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, mask_count(fraction, n)).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Boolean patch mask, `true` for masked patches.
pub fn mask_patches(attribution: &Grid, fraction: f64, mode: MaskMode) -> Result<Vec<bool>> {
    let mut mask = vec![false; attribution.len()];
    for i in select_indices(&attribution.data, fraction, mode)? {
        mask[i] = true;
    }
    Ok(mask)
}

fn relative_change(original: f64, masked: f64) -> f64 {
    100.0 * (original - masked) / original.abs().max(SCORE_EPSILON)
}

fn check_patch_map(bundle: &IntermediatesBundle, attribution: &Grid) -> Result<()> {
    if (attribution.h, attribution.w) != (bundle.grid.h_patches, bundle.grid.w_patches) {
        return Err(Error::DimensionMismatch(format!(
            "attribution is {}x{} but the patch grid is {}x{}",
            attribution.h, attribution.w, bundle.grid.h_patches, bundle.grid.w_patches
        )));
    }
    Ok(())
}

/// Percentage score drop after masking the top `fraction` of patches.
pub fn confidence_drop(
    oracle: &dyn ScoreOracle,
    bundle: &IntermediatesBundle,
    attribution: &Grid,
    fraction: f64,
) -> Result<f64> {
    check_patch_map(bundle, attribution)?;
    let idx = select_indices(&attribution.data, fraction, MaskMode::Top)?;
    let masked = oracle.score(&Mask::patches(idx))?;
    Ok(relative_change(bundle.score, masked).max(0.0))
}

/// Percentage score increase after masking the bottom `fraction` of patches.
pub fn confidence_increase(
    oracle: &dyn ScoreOracle,
    bundle: &IntermediatesBundle,
    attribution: &Grid,
    fraction: f64,
) -> Result<f64> {
    check_patch_map(bundle, attribution)?;
    let idx = select_indices(&attribution.data, fraction, MaskMode::Bottom)?;
    let masked = oracle.score(&Mask::patches(idx))?;
    Ok((-relative_change(bundle.score, masked)).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenMetrics {
    pub conf_drop_pct: f64,
    pub conf_incr_pct: f64,
}

/// Confidence drop and increase when masking text tokens ranked by relevance.
pub fn token_confidence_metrics(
    oracle: &dyn ScoreOracle,
    bundle: &IntermediatesBundle,
    scores: &[f64],
    fraction: f64,
) -> Result<TokenMetrics> {
    let top = oracle.score(&Mask::tokens(select_indices(scores, fraction, MaskMode::Top)?))?;
    let bottom = oracle.score(&Mask::tokens(select_indices(scores, fraction, MaskMode::Bottom)?))?;
    Ok(TokenMetrics {
        conf_drop_pct: relative_change(bundle.score, top).max(0.0),
        conf_incr_pct: (-relative_change(bundle.score, bottom)).max(0.0),
    })
}

fn check_boxes(boxes: &[GroundTruthBox]) -> Result<()> {
    if boxes.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    boxes.iter().try_for_each(GroundTruthBox::validate)
}

fn pixel_center(map: &Grid, idx: usize) -> (f64, f64) {
    let (r, c) = (idx / map.w, idx % map.w);
    ((c as f64 + 0.5) / map.w as f64, (r as f64 + 0.5) / map.h as f64)
}

/// Hit when the map's argmax pixel center falls inside any box.
pub fn pointing_game(map: &Grid, boxes: &[GroundTruthBox]) -> Result<bool> {
    check_boxes(boxes)?;
    let (x, y) = pixel_center(map, map.argmax());
    Ok(boxes.iter().any(|b| b.contains(x, y)))
}

/// Fraction of non-negative map mass whose pixel centers fall inside the union of boxes.
pub fn mass_in_box(map: &Grid, boxes: &[GroundTruthBox]) -> Result<f64> {
    check_boxes(boxes)?;
    let mut inside = 0.0;
    let mut total = 0.0;
    for (idx, &v) in map.data.iter().enumerate() {
        let v = v.max(0.0);
        total += v;
        let (x, y) = pixel_center(map, idx);
        if boxes.iter().any(|b| b.contains(x, y)) {
            inside += v;
        }
    }
    if total <= 0.0 {
        return Err(Error::ZeroMass);
    }
    Ok(inside / total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> GroundTruthBox {
        GroundTruthBox {
            x: 0.5,
            y: 0.0,
            w: 0.5,
            h: 0.5,
        }
    }

    #[test]
    fn mask_count_rounds_up() {
        assert_eq!(mask_count(0.1, 49), 5);
        assert_eq!(mask_count(0.1, 50), 5);
        assert_eq!(mask_count(0.0, 49), 0);
        assert_eq!(mask_count(1.0, 49), 49);
        assert_eq!(mask_count(0.3, 10), 3);
    }

    #[test]
    fn ties_break_by_index() {
        let s = [0.5, 0.9, 0.5, 0.9, 0.1];
        assert_eq!(select_indices(&s, 0.4, MaskMode::Top).unwrap(), vec![1, 3]);
        assert_eq!(select_indices(&s, 0.4, MaskMode::Bottom).unwrap(), vec![4, 0]);
        assert!(select_indices(&s, 1.5, MaskMode::Top).is_err());
    }

    #[test]
    fn random_indices_are_seeded_and_distinct() {
        let a = random_indices(49, 0.1, 3).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, random_indices(49, 0.1, 3).unwrap());
        assert!(a.windows(2).all(|p| p[0] < p[1]));
        assert!(random_indices(49, 0.0, 3).unwrap().is_empty());
    }

    #[test]
    fn pointing_uses_pixel_centers() {
        let mut map = Grid::filled(4, 4, 0.0);
        map.data[3] = 1.0; // row 0, col 3 -> (0.875, 0.125)
        assert!(pointing_game(&map, &[unit_box()]).unwrap());
        map.data[3] = 0.0;
        map.data[12] = 1.0;
        assert!(!pointing_game(&map, &[unit_box()]).unwrap());
    }

    #[test]
    fn mass_fraction() {
        let map = Grid::filled(2, 2, 1.0);
        assert!((mass_in_box(&map, &[unit_box()]).unwrap() - 0.25).abs() < 1e-12);
        assert!(matches!(mass_in_box(&Grid::filled(2, 2, 0.0), &[unit_box()]), Err(Error::ZeroMass)));
        assert!(matches!(mass_in_box(&map, &[]), Err(Error::NoGroundTruth)));
    }

    #[test]
    fn box_validation() {
        assert!(unit_box().validate().is_ok());
        let bad = GroundTruthBox {
            x: 0.8,
            y: 0.0,
            w: 0.5,
            h: 0.1,
        };
        assert!(bad.validate().is_err());
    }
}
