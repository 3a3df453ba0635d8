//! Independent reference computations shared by the integration suites.
//! Nothing here calls into the solver paths it is used to check.
#![allow(dead_code)]

use std::path::PathBuf;

use airfl::chanmodel::{draw_realization, ChannelParams, ChannelRealization};
use airfl::config::ExperimentConfig;
use airfl::dataio::{load_idx, shard_non_iid, LabeledDataset};
use airfl::fltrain::{SoftmaxTask, Task};
use airfl::gradcodec::{normalize, GradientBatch};
use airfl::linalg::{CMatrix, CVector};
use airfl::rng::{complex_gaussian, stream_rng, streams, SimRng};
use airfl::runner::cell_geometry;
use nalgebra::DMatrix;
use num_complex::Complex64;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Directory holding the four IDX files used by the MNIST suites: genuine
/// MNIST when `AIRFL_MNIST_DIR` is set, the bundled subset otherwise.
pub fn mnist_dir() -> (PathBuf, bool) {
    match std::env::var_os("AIRFL_MNIST_DIR") {
        Some(dir) => (PathBuf::from(dir), true),
        None => (repo_root().join("data/mnist-subset"), false),
    }
}

pub fn load_mnist_from(dir: &std::path::Path) -> (LabeledDataset, LabeledDataset) {
    let train = load_idx(dir.join("train-images-idx3-ubyte.gz"), dir.join("train-labels-idx1-ubyte.gz")).unwrap();
    let test = load_idx(dir.join("t10k-images-idx3-ubyte.gz"), dir.join("t10k-labels-idx1-ubyte.gz")).unwrap();
    (train, test)
}

pub fn subset_task(nodes: usize, shard_size: usize) -> SoftmaxTask {
    let (train, test) = load_mnist_from(&repo_root().join("data/mnist-subset"));
    let shards = shard_non_iid::<SimRng>(&train, nodes, shard_size, None).unwrap();
    SoftmaxTask::new(shards, Some(test)).unwrap()
}

/// Local gradients of every node stacked as rows (`K x d`).
pub fn stacked_gradients<T: Task + ?Sized>(task: &T, theta: &nalgebra::DVector<f64>) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(task.nodes(), task.dim());
    for k in 0..task.nodes() {
        g.row_mut(k).copy_from(&task.local_gradient(k, theta).transpose());
    }
    g
}

/// Normalized symbols and statistics of the MNIST-subset gradients at theta = 0
/// (K = 20, 400 samples per node).
pub fn mnist_batch() -> (DMatrix<f64>, GradientBatch) {
    let task = subset_task(20, 400);
    let g = stacked_gradients(&task, &nalgebra::DVector::zeros(task.dim()));
    normalize(&g).unwrap()
}

/// Default link budget with `antennas` server antennas and `server_dbw`.
pub fn default_params(antennas: usize, nodes: usize, server_dbw: f64) -> ChannelParams {
    let mut cfg = ExperimentConfig::default();
    cfg.experiment.nodes = nodes;
    cfg.channel_params(antennas, server_dbw)
}

/// Channel realization `index` for geometry seed `seed` under the default
/// configuration.
pub fn realization(seed: u64, index: u64, params: &ChannelParams) -> ChannelRealization {
    let mut cfg = ExperimentConfig::default();
    cfg.experiment.nodes = params.nodes;
    let geometry = cell_geometry(&cfg, seed).unwrap();
    let mut rng = stream_rng(seed * 1_000_003 + index, streams::CHANNEL);
    draw_realization(&mut rng, &geometry, params).unwrap()
}

/// Random instance with `k` complex Gaussian vectors in `C^n`.
pub fn random_instance(seed: u64, n: usize, k: usize) -> (Vec<CVector>, Vec<f64>) {
    let mut rng = stream_rng(seed, 77);
    let vectors: Vec<CVector> = (0..k).map(|_| CVector::from_fn(n, |_, _| complex_gaussian(&mut rng, 1.0))).collect();
    let weights = (0..k).map(|i| 0.2 + (i as f64 * 0.37).sin().abs()).collect();
    (vectors, weights)
}

pub fn minmax_value(vectors: &[CVector], weights: &[f64], x: &CVector) -> f64 {
    vectors
        .iter()
        .zip(weights)
        .map(|(c, w)| w / c.dotc(x).norm_sqr())
        .fold(f64::NEG_INFINITY, f64::max)
}

fn unit2(alpha: f64, psi: f64) -> CVector {
    CVector::from_vec(vec![Complex64::new(alpha.cos(), 0.0), Complex64::from_polar(alpha.sin(), psi)])
}

/// Minimizes `f` over unit vectors of `C^2` with first coordinate real and
/// non-negative: a `alpha_steps x psi_steps` grid followed by successively
/// finer local grids around the incumbent. Returns the best value and point.
pub fn grid_search_c2<F: Fn(&CVector) -> f64>(f: F, alpha_steps: usize, psi_steps: usize) -> (f64, CVector) {
    let half_pi = std::f64::consts::FRAC_PI_2;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..=alpha_steps {
        let alpha = half_pi * i as f64 / alpha_steps as f64;
        for j in 0..psi_steps {
            let psi = two_pi * j as f64 / psi_steps as f64;
            let v = f(&unit2(alpha, psi));
            if v < best.0 {
                best = (v, alpha, psi);
            }
        }
    }
    let mut da = half_pi / alpha_steps as f64;
    let mut dp = two_pi / psi_steps as f64;
    for _ in 0..12 {
        let (_, a0, p0) = best;
        for i in -10..=10 {
            let alpha = (a0 + da * i as f64 / 5.0).clamp(0.0, half_pi);
            for j in -10..=10 {
                let psi = p0 + dp * j as f64 / 5.0;
                let v = f(&unit2(alpha, psi));
                if v < best.0 {
                    best = (v, alpha, psi);
                }
            }
        }
        da /= 4.0;
        dp /= 4.0;
    }
    (best.0, unit2(best.1, best.2))
}

/// Plain grid over the same parameterization, no refinement.
pub fn coarse_grid_c2<F: Fn(&CVector) -> f64>(f: F, alpha_steps: usize, psi_steps: usize) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..=alpha_steps {
        let alpha = std::f64::consts::FRAC_PI_2 * i as f64 / alpha_steps as f64;
        for j in 0..psi_steps {
            let psi = 2.0 * std::f64::consts::PI * j as f64 / psi_steps as f64;
            best = best.min(f(&unit2(alpha, psi)));
        }
    }
    best
}

fn hermitian_eig(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let eig = nalgebra::SymmetricEigen::new((m + m.adjoint()) * Complex64::new(0.5, 0.0));
    (eig.eigenvalues.iter().copied().collect(), eig.eigenvectors)
}

fn simplex(v: &[f64]) -> Vec<f64> {
    // bisection on the shift; independent of the sort-based library routine
    let (mut lo, mut hi) = (v.iter().copied().fold(f64::INFINITY, f64::min) - 1.0, v.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let s: f64 = v.iter().map(|x| (x - mid).max(0.0)).sum();
        if s > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let shift = 0.5 * (lo + hi);
    v.iter().map(|x| (x - shift).max(0.0)).collect()
}

fn spectraplex(m: &CMatrix) -> CMatrix {
    let (values, vectors) = hermitian_eig(m);
    let clipped = simplex(&values);
    let n = m.nrows();
    let mut out = CMatrix::zeros(n, n);
    for (k, lambda) in clipped.into_iter().enumerate() {
        let col = vectors.column(k);
        out += col * col.adjoint() * Complex64::new(lambda, 0.0);
    }
    out
}

/// Reduced inner objective `max_k w_k / Tr(c_k c_k^H U) + Omega Tr((I - w w^H) U)`.
pub fn reduced_objective(vectors: &[CVector], weights: &[f64], omega_n: &CVector, penalty: f64, u: &CMatrix) -> f64 {
    let lambda = vectors
        .iter()
        .zip(weights)
        .map(|(c, w)| {
            let q = c.dotc(&(u * c)).re;
            if q > 0.0 {
                w / q
            } else {
                f64::INFINITY
            }
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let trace: f64 = (0..u.nrows()).map(|i| u[(i, i)].re).sum();
    lambda + penalty * (trace - omega_n.dotc(&(u * omega_n)).re)
}

/// Projected subgradient descent on the reduced inner objective with
/// normalized diminishing steps, returning the best value seen.
pub fn projected_subgradient(
    vectors: &[CVector],
    weights: &[f64],
    omega_n: &CVector,
    penalty: f64,
    iterations: usize,
) -> f64 {
    let n = omega_n.len();
    let mut u = CMatrix::identity(n, n) / Complex64::new(n as f64, 0.0);
    let mut best = reduced_objective(vectors, weights, omega_n, penalty, &u);
    let ww = omega_n * omega_n.adjoint();
    for it in 0..iterations {
        let (k, q) = vectors
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(k, (c, w))| (k, w / c.dotc(&(&u * c)).re))
            .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        let c = &vectors[k];
        let cq = c.dotc(&(&u * c)).re;
        let _ = q;
        let grad = -(c * c.adjoint()) * Complex64::new(weights[k] / (cq * cq), 0.0)
            + (CMatrix::identity(n, n) - &ww) * Complex64::new(penalty, 0.0);
        let gnorm = grad.norm();
        if gnorm == 0.0 {
            break;
        }
        let step = 0.5 / ((it + 1) as f64).sqrt() / gnorm;
        let candidate = spectraplex(&(&u - grad * Complex64::new(step, 0.0)));
        let value = reduced_objective(vectors, weights, omega_n, penalty, &candidate);
        if value.is_finite() {
            u = candidate;
            best = best.min(value);
        }
    }
    best
}
