//! Dense row-major 2D grids and the two resampling/normalization primitives
//! every attribution map goes through.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A row-major `h × w` grid of reals.
///
/// Serializes as `{"h": .., "w": .., "grid": [..]}`, which is also the
/// external attribution-map file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    #[serde(rename = "grid")]
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::DimensionMismatch(format!("grid dims must be positive, got {h}x{w}")));
        }
        if data.len() != h * w {
            return Err(Error::DimensionMismatch(format!(
                "grid {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: f64) -> Self {
        Self {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                data.push(f(i, j));
            }
        }
        Self { h, w, data }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.w + col]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major index of the largest value; ties resolve to the smallest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (idx, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = idx;
            }
        }
        best
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn ensure_same_dims(&self, other: &Grid, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok(())
    }
}

/// Min-max normalizes to `[0, 1]`. A constant grid maps to all zeros.
pub fn minmax_normalize(grid: &Grid) -> Grid {
    let lo = grid.min();
    let hi = grid.max();
    if !(hi > lo) {
        return Grid::filled(grid.h, grid.w, 0.0);
    }
    let range = hi - lo;
    grid.map(|v| (v - lo) / range)
}

/// Bilinear resampling with half-pixel centers (align-corners off).
///
/// Output values are convex combinations of input values, so the result never
/// leaves the input range.
pub fn upsample_bilinear(grid: &Grid, target_h: usize, target_w: usize) -> Result<Grid> {
    if target_h < grid.h || target_w < grid.w {
        return Err(Error::DimensionMismatch(format!(
            "upsample target {target_h}x{target_w} is smaller than source {}x{}",
            grid.h, grid.w
        )));
    }
    let rows: Vec<(usize, usize, f64)> = (0..target_h)
        .map(|i| source_coord(i, grid.h, target_h))
        .collect();
    let cols: Vec<(usize, usize, f64)> = (0..target_w)
        .map(|j| source_coord(j, grid.w, target_w))
        .collect();
    let mut data = Vec::with_capacity(target_h * target_w);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let top = grid.get(r0, c0) * (1.0 - fx) + grid.get(r0, c1) * fx;
            let bottom = grid.get(r1, c0) * (1.0 - fx) + grid.get(r1, c1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(Grid {
        h: target_h,
        w: target_w,
        data,
    })
}

fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let lo = (pos.floor() as usize).min(src_len - 1);
    let hi = (lo + 1).min(src_len - 1);
    let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
    (lo, hi, frac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minmax_examples() {
        let g = Grid::new(1, 2, vec![1.0, 3.0]).unwrap();
        assert_eq!(minmax_normalize(&g).data, vec![0.0, 1.0]);

        let g = Grid::new(1, 3, vec![5.0; 3]).unwrap();
        assert_eq!(minmax_normalize(&g).data, vec![0.0; 3]);

        let g = Grid::new(2, 2, vec![0.0, 0.25, 1.0, 0.5]).unwrap();
        assert_eq!(minmax_normalize(&g), g);
    }

    #[test]
    fn upsample_constant_and_single_cell() {
        let g = Grid::filled(3, 2, 0.7);
        let up = upsample_bilinear(&g, 9, 5).unwrap();
        assert!(up.data.iter().all(|&v| (v - 0.7).abs() < 1e-15));

        let one = Grid::filled(1, 1, 0.3);
        let up = upsample_bilinear(&one, 4, 4).unwrap();
        assert_eq!(up.data, vec![0.3; 16]);
    }

    #[test]
    fn upsample_two_by_two_ramp() {
        let g = Grid::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let up = upsample_bilinear(&g, 4, 4).unwrap();
        // Half-pixel centers: source x = (j + 0.5) / 2 - 0.5 -> clamp(-0.25, 0.25, 0.75, 1.25).
        let expected_row = [0.0, 0.25, 0.75, 1.0];
        for i in 0..4 {
            for j in 0..4 {
                assert!((up.get(i, j) - expected_row[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_rejects_downsampling() {
        let g = Grid::filled(4, 4, 1.0);
        assert!(matches!(upsample_bilinear(&g, 2, 8), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn argmax_tie_breaks_to_first() {
        let g = Grid::filled(3, 3, 0.5);
        assert_eq!(g.argmax(), 0);
        let g = Grid::new(1, 4, vec![0.0, 2.0, 1.0, 2.0]).unwrap();
        assert_eq!(g.argmax(), 1);
    }

    proptest! {
        #[test]
        fn upsample_stays_within_input_range(
            (h, w, data) in (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
                (Just(h), Just(w), proptest::collection::vec(-5.0f64..5.0, h * w))
            }),
            extra_h in 0usize..20,
            extra_w in 0usize..20,
        ) {
            let g = Grid::new(h, w, data).unwrap();
            let up = upsample_bilinear(&g, h + extra_h, w + extra_w).unwrap();
            prop_assert!(up.min() >= g.min() - 1e-12);
            prop_assert!(up.max() <= g.max() + 1e-12);
        }

        #[test]
        fn minmax_output_in_unit_range(data in proptest::collection::vec(-1e6f64..1e6, 1..64)) {
            let n = data.len();
            let g = Grid::new(1, n, data).unwrap();
            let m = minmax_normalize(&g);
            prop_assert!(m.data.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(minmax_normalize(&m), m);
        }
    }
}
