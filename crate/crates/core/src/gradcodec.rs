//! Gradient normalization into zero-mean unit-variance symbols and the
//! inverse mapping applied at each node after downlink reception.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Relative threshold below which a gradient row counts as constant.
pub const DEGENERATE_REL_TOL: f64 = 1e-12;

/// Per-round gradient statistics shared by the designer and the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBatch {
    /// Local gradients, one row per node (`K x d`).
    pub g: DMatrix<f64>,
    pub g_bar: DVector<f64>,
    pub delta: DVector<f64>,
    /// Rows whose standard deviation fell below the degeneracy threshold.
    /// Such nodes transmit all-zero symbols.
    pub degenerate: Vec<bool>,
    /// Empirical symbol correlation `(1/d) sum_i s_i s_i^T`.
    pub s: DMatrix<f64>,
    /// `delta^T S delta`.
    pub c: f64,
}

impl GradientBatch {
    pub fn nodes(&self) -> usize {
        self.g.nrows()
    }

    pub fn dim(&self) -> usize {
        self.g.ncols()
    }

    pub fn g_bar_sum(&self) -> f64 {
        self.g_bar.sum()
    }

    /// Exact average `(1/K) sum_k g_k`.
    pub fn average(&self) -> DVector<f64> {
        let k = self.nodes() as f64;
        self.g.row_sum().transpose() / k
    }

    pub fn active_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.degenerate.iter().enumerate().filter(|(_, d)| !**d).map(|(k, _)| k)
    }
}

/// Normalizes every row of `g` to zero mean and unit (population) variance.
pub fn normalize(g: &DMatrix<f64>) -> Result<(DMatrix<f64>, GradientBatch)> {
    let (k, d) = g.shape();
    if k == 0 {
        return Err(Error::domain("gradient batch has no nodes"));
    }
    if d < 2 {
        return Err(Error::domain(format!("gradient dimension must be at least 2, got {d}")));
    }
    if !g.iter().all(|x| x.is_finite()) {
        return Err(Error::domain("gradient entries must be finite"));
    }

    let mut symbols = DMatrix::zeros(k, d);
    let mut g_bar = DVector::zeros(k);
    let mut delta = DVector::zeros(k);
    let mut degenerate = vec![false; k];
    for row in 0..k {
        let r = g.row(row);
        let mean = r.sum() / d as f64;
        let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
        let sd = var.sqrt();
        let scale = r.amax().max(1.0);
        g_bar[row] = mean;
        delta[row] = sd;
        if sd < DEGENERATE_REL_TOL * scale {
            degenerate[row] = true;
            continue;
        }
        for i in 0..d {
            symbols[(row, i)] = (g[(row, i)] - mean) / sd;
        }
    }

    let s = (&symbols * symbols.transpose()) / d as f64;
    let s = (&s + s.transpose()) * 0.5;
    let c = (delta.transpose() * &s * &delta)[(0, 0)].max(0.0);
    Ok((
        symbols,
        GradientBatch {
            g: g.clone(),
            g_bar,
            delta,
            degenerate,
            s,
            c,
        },
    ))
}

/// Complex node estimate `(1/K)(r + sum_k g_bar_k)` before real-part extraction.
pub fn reconstruct(received: &[Complex64], g_bar: &DVector<f64>, nodes: usize) -> Result<Vec<Complex64>> {
    Error::check_len("per-node mean statistics", nodes, g_bar.len())?;
    if nodes == 0 {
        return Err(Error::domain("node count must be positive"));
    }
    let offset = g_bar.sum();
    let inv = 1.0 / nodes as f64;
    Ok(received.iter().map(|r| (r + offset) * inv).collect())
}

/// Global-gradient estimate consumed by the model update: the real part of
/// [`reconstruct`]. Taking the real part halves the noise variance relative
/// to the complex error.
pub fn denormalize(received: &[Complex64], g_bar: &DVector<f64>, nodes: usize) -> Result<DVector<f64>> {
    let z = reconstruct(received, g_bar, nodes)?;
    Ok(DVector::from_iterator(z.len(), z.iter().map(|z| z.re)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian, stream_rng};
    use proptest::prelude::*;

    fn superpose(symbols: &DMatrix<f64>, stats: &GradientBatch) -> Vec<Complex64> {
        (0..stats.dim())
            .map(|i| {
                let s: f64 = (0..stats.nodes()).map(|k| stats.delta[k] * symbols[(k, i)]).sum();
                Complex64::new(s, 0.0)
            })
            .collect()
    }

    #[test]
    fn two_point_row() {
        let g = DMatrix::from_row_slice(1, 2, &[0.0, 2.0]);
        let (s, stats) = normalize(&g).unwrap();
        assert_eq!(stats.g_bar[0], 1.0);
        assert_eq!(stats.delta[0], 1.0);
        assert_eq!(s.row(0).iter().copied().collect::<Vec<_>>(), vec![-1.0, 1.0]);
        assert_eq!(stats.s[(0, 0)], 1.0);
        assert_eq!(stats.c, 1.0);
    }

    #[test]
    fn constant_row_is_flagged() {
        let g = DMatrix::from_row_slice(2, 3, &[5.0, 5.0, 5.0, 1.0, 2.0, 3.0]);
        let (s, stats) = normalize(&g).unwrap();
        assert_eq!(stats.delta[0], 0.0);
        assert!(stats.degenerate[0] && !stats.degenerate[1]);
        assert!(s.row(0).iter().all(|&x| x == 0.0));
        assert_eq!(stats.active_nodes().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn dimension_one_is_rejected() {
        assert!(normalize(&DMatrix::from_row_slice(1, 1, &[3.0])).is_err());
    }

    #[test]
    fn random_rows_are_standardized() {
        let mut rng = stream_rng(21, 0);
        let mut g = DMatrix::from_fn(4, 100, |_, _| 3.0 * gaussian(&mut rng) + 0.5);
        let first = g.row(0).into_owned();
        g.set_row(3, &first);
        let (s, stats) = normalize(&g).unwrap();
        for k in 0..4 {
            let row = s.row(k);
            let mean = row.sum() / 100.0;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 100.0;
            assert!(mean.abs() <= 1e-10);
            assert!((var - 1.0).abs() <= 1e-10);
            assert!((stats.s[(k, k)] - 1.0).abs() <= 1e-10);
        }
        assert!((stats.s[(0, 3)] - 1.0).abs() <= 1e-10);
        assert_eq!(stats.s, stats.s.transpose());
    }

    #[test]
    fn identity_pipeline_single_node() {
        let g = DMatrix::from_row_slice(1, 4, &[1.0, -2.0, 0.5, 0.5]);
        let (s, stats) = normalize(&g).unwrap();
        let received: Vec<Complex64> = (0..4).map(|i| Complex64::new(stats.delta[0] * s[(0, i)], 0.0)).collect();
        let out = denormalize(&received, &stats.g_bar, 1).unwrap();
        for i in 0..4 {
            assert!((out[i] - g[(0, i)]).abs() < 1e-15);
        }
    }

    #[test]
    fn length_mismatch_is_reported() {
        let err = denormalize(&[Complex64::new(0.0, 0.0)], &DVector::from_vec(vec![0.0, 1.0]), 3).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    proptest! {
        #[test]
        fn perfect_superposition_recovers_average(
            rows in 1usize..6,
            cols in 2usize..40,
            seed in any::<u64>(),
        ) {
            let mut rng = stream_rng(seed, 0);
            let g = DMatrix::from_fn(rows, cols, |_, _| 2.0 * gaussian(&mut rng));
            let (s, stats) = normalize(&g).unwrap();
            let out = denormalize(&superpose(&s, &stats), &stats.g_bar, rows).unwrap();
            let avg = stats.average();
            for i in 0..cols {
                prop_assert!((out[i] - avg[i]).abs() <= 1e-9);
            }
        }

        #[test]
        fn c_matches_direct_energy(rows in 1usize..6, cols in 2usize..40, seed in any::<u64>()) {
            let mut rng = stream_rng(seed, 0);
            let g = DMatrix::from_fn(rows, cols, |_, _| gaussian(&mut rng));
            let (s, stats) = normalize(&g).unwrap();
            let direct = (0..cols)
                .map(|i| (0..rows).map(|k| stats.delta[k] * s[(k, i)]).sum::<f64>().powi(2))
                .sum::<f64>() / cols as f64;
            prop_assert!(stats.c >= 0.0);
            prop_assert!((stats.c - direct).abs() <= 1e-10 * direct.max(1.0));
        }

        #[test]
        fn constant_shift_leaves_symbols_unchanged(shift in -50.0f64..50.0, seed in any::<u64>()) {
            let mut rng = stream_rng(seed, 0);
            let g = DMatrix::from_fn(3, 25, |_, _| gaussian(&mut rng));
            let (s1, st1) = normalize(&g).unwrap();
            let (s2, st2) = normalize(&g.add_scalar(shift)).unwrap();
            prop_assert!((s1 - s2).amax() <= 1e-9);
            for k in 0..3 {
                prop_assert!((st2.g_bar[k] - st1.g_bar[k] - shift).abs() <= 1e-10 * (1.0 + shift.abs()));
            }
        }
    }
}
