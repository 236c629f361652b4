//! Pairwise Euclidean distances between source and target rows.

use rayon::prelude::*;

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};

/// Below this fraction of `|a|^2 + |b|^2` the Gram expansion has lost too
/// many digits and the entry is recomputed from the difference vector.
const CANCELLATION_GUARD: f64 = 1e-6;

/// Nonnegative row-major `rows x cols` cost matrix. Produced by
/// [`pairwise_distances`], but any nonnegative finite cost is accepted.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(format!("empty {rows}x{cols} cost matrix")));
        }
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} cost matrix",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "cost entry ({}, {}) is {}",
                i / cols,
                i % cols,
                values[i]
            )));
        }
        Ok(DistanceMatrix { rows, cols, values })
    }

    pub fn from_feature_matrix(m: &FeatureMatrix) -> Result<Self> {
        DistanceMatrix::from_values(m.rows(), m.cols(), m.values().to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> DistanceMatrix {
        let mut values = vec![0.0; self.values.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                values[j * self.rows + i] = self.values[i * self.cols + j];
            }
        }
        DistanceMatrix {
            rows: self.cols,
            cols: self.rows,
            values,
        }
    }

    /// Restriction to the given source rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> DistanceMatrix {
        let mut values = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        DistanceMatrix {
            rows: rows.len(),
            cols: self.cols,
            values,
        }
    }

    pub fn to_feature_matrix(&self) -> Result<FeatureMatrix> {
        FeatureMatrix::new(self.rows, self.cols, self.values.clone())
    }
}

fn direct_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `D_ij = |source_i - target_j|_2` via the Gram expansion
/// `|a|^2 + |b|^2 - 2 a.b`, clamped at zero. Entries that fall into the
/// cancellation regime are recomputed directly so that coincident points
/// get exactly zero.
pub fn pairwise_distances(source: &FeatureMatrix, target: &FeatureMatrix) -> Result<DistanceMatrix> {
    if source.cols() != target.cols() {
        return Err(Error::DimensionMismatch(format!(
            "source has {} features, target has {}",
            source.cols(),
            target.cols()
        )));
    }
    let m = target.rows();
    let target_norms: Vec<f64> = target.iter_rows().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mut values = vec![0.0; source.rows() * m];
    values
        .par_chunks_mut(m)
        .enumerate()
        .for_each(|(i, out)| {
            let a = source.row(i);
            let a_norm: f64 = a.iter().map(|v| v * v).sum();
            for (j, slot) in out.iter_mut().enumerate() {
                let b = target.row(j);
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let scale = a_norm + target_norms[j];
                let sq = scale - 2.0 * dot;
                *slot = if sq <= CANCELLATION_GUARD * scale {
                    direct_distance(a, b)
                } else {
                    sq.sqrt()
                };
            }
        });
    Ok(DistanceMatrix {
        rows: source.rows(),
        cols: m,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> FeatureMatrix {
        let values = (0..rows * cols).map(|_| rng.random_range(-5.0..5.0)).collect();
        FeatureMatrix::new(rows, cols, values).unwrap()
    }

    #[test]
    fn three_four_five() {
        let s = FeatureMatrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let t = FeatureMatrix::from_rows(&[[3.0, 4.0]]).unwrap();
        assert_eq!(pairwise_distances(&s, &t).unwrap().get(0, 0), 5.0);
    }

    #[test]
    fn identical_rows_are_exactly_zero() {
        let s = FeatureMatrix::from_rows(&[[123.456, -7.5, 1e3]]).unwrap();
        assert_eq!(pairwise_distances(&s, &s).unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_matrix(&mut rng, 5, 3);
        let t = random_matrix(&mut rng, 4, 3);
        let d = pairwise_distances(&s, &t).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..3 {
                    let diff = s.row(i)[k] - t.row(j)[k];
                    acc += diff * diff;
                }
                assert!((d.get(i, j) - acc.sqrt()).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn near_coincident_points_keep_relative_accuracy() {
        let s = FeatureMatrix::from_rows(&[[40.0, 30.0]]).unwrap();
        let t = FeatureMatrix::from_rows(&[[40.0 + 1e-5, 30.0]]).unwrap();
        let d = pairwise_distances(&s, &t).unwrap().get(0, 0);
        assert!((d - 1e-5).abs() <= 1e-6 * 1e-5);
    }

    #[test]
    fn dimension_mismatch() {
        let s = FeatureMatrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let t = FeatureMatrix::from_rows(&[[0.0]]).unwrap();
        assert!(matches!(pairwise_distances(&s, &t), Err(Error::DimensionMismatch(_))));
    }

    proptest! {
        #[test]
        fn swap_transposes_and_scaling_is_linear(seed in 0u64..1000, s in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, 4, 3);
            let b = random_matrix(&mut rng, 6, 3);
            let ab = pairwise_distances(&a, &b).unwrap();
            let ba = pairwise_distances(&b, &a).unwrap().transpose();
            for (x, y) in ab.as_slice().iter().zip(ba.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
            let scale = |m: &FeatureMatrix| {
                FeatureMatrix::new(m.rows(), m.cols(), m.values().iter().map(|v| v * s).collect()).unwrap()
            };
            let scaled = pairwise_distances(&scale(&a), &scale(&b)).unwrap();
            for (x, y) in ab.as_slice().iter().zip(scaled.as_slice()) {
                prop_assert!((x * s - y).abs() <= 1e-7 * (x * s).max(1e-12));
            }
        }

        #[test]
        fn triangle_inequality(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = random_matrix(&mut rng, 3, 4);
            let d = pairwise_distances(&pts, &pts).unwrap();
            prop_assert!(d.get(0, 2) <= d.get(0, 1) + d.get(1, 2) + 1e-7);
        }
    }
}
