//! Federated gradient descent over an AirComp link, plus the convergence
//! bound for strongly convex, smooth objectives.
//!
//! Every round each node computes a full-batch local gradient, the gradients
//! are normalized, a transceiver design is computed for the round's channel,
//! the symbols are pushed through the simulated link and each node updates
//! its own parameters with its own noisy estimate of the average gradient.

use nalgebra::{DMatrix, DMatrixView, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::airsim::transmit_round;
use crate::chanmodel::{draw_realization, ChannelParams, Geometry};
use crate::dataio::{LabeledDataset, Shard, CLASSES};
use crate::dcsolver::{SolverOptions, SolverTrace};
use crate::error::{Error, Result};
use crate::gradcodec::normalize;
use crate::rng::{gaussian, stream_rng, streams};
use crate::txrx::{design, node_mse};

/// A federated objective `F = (1/K) sum_k F_k` with equal-size local datasets.
pub trait Task: Sync {
    fn dim(&self) -> usize;
    fn nodes(&self) -> usize;
    /// `grad F_k(theta)` over node `k`'s whole local dataset.
    fn local_gradient(&self, node: usize, theta: &DVector<f64>) -> DVector<f64>;
    fn global_loss(&self, theta: &DVector<f64>) -> f64;
    fn test_accuracy(&self, _theta: &DVector<f64>) -> Option<f64> {
        None
    }

    /// Global losses for several parameter vectors (columns of `thetas`).
    fn global_losses(&self, thetas: &DMatrix<f64>) -> Vec<f64> {
        thetas.column_iter().map(|c| self.global_loss(&c.into_owned())).collect()
    }

    fn test_accuracies(&self, thetas: &DMatrix<f64>) -> Option<Vec<f64>> {
        thetas.column_iter().map(|c| self.test_accuracy(&c.into_owned())).collect()
    }

    fn global_gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        for k in 0..self.nodes() {
            g += self.local_gradient(k, theta);
        }
        g / self.nodes() as f64
    }
}

fn softmax_rows(logits: &mut DMatrix<f64>) {
    for mut row in logits.row_iter_mut() {
        let top = row.max();
        row.iter_mut().for_each(|x| *x = (*x - top).exp());
        let total = row.sum();
        row.iter_mut().for_each(|x| *x /= total);
    }
}

/// Per-sample cross-entropy `-log softmax(logits)[label]`, averaged.
fn mean_cross_entropy(logits: &DMatrix<f64>, labels: &[u8]) -> f64 {
    let total: f64 = logits
        .row_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let top = row.max();
            let lse = top + row.iter().map(|x| (x - top).exp()).sum::<f64>().ln();
            lse - row[y as usize]
        })
        .sum();
    total / labels.len() as f64
}

fn argmax(row: impl Iterator<Item = f64>) -> usize {
    row.enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Parameter vector viewed as the `features x CLASSES` weight matrix; the
/// block for class `c` is `theta[c*features .. (c+1)*features]`.
fn weights(theta: &DVector<f64>, features: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(features, CLASSES, theta.as_slice())
}

/// Mean softmax cross-entropy gradient of a bias-free linear classifier.
pub fn softmax_gradient(theta: &DVector<f64>, shard: &LabeledDataset) -> Result<DVector<f64>> {
    if shard.is_empty() {
        return Err(Error::Dataset("empty shard".into()));
    }
    Error::check_len("softmax parameters", shard.feature_dim() * CLASSES, theta.len())?;
    Ok(softmax_gradient_rows(theta, shard.features.rows(0, shard.len()), &shard.labels))
}

fn softmax_gradient_rows(theta: &DVector<f64>, features: DMatrixView<'_, f64>, labels: &[u8]) -> DVector<f64> {
    let mut probs = features * weights(theta, features.ncols());
    softmax_rows(&mut probs);
    for (i, &y) in labels.iter().enumerate() {
        probs[(i, y as usize)] -= 1.0;
    }
    let grad = features.tr_mul(&probs) / labels.len() as f64;
    DVector::from_column_slice(grad.as_slice())
}

pub fn softmax_loss(theta: &DVector<f64>, data: &LabeledDataset) -> f64 {
    let logits = &data.features * weights(theta, data.feature_dim());
    mean_cross_entropy(&logits, &data.labels)
}

/// Softmax regression (784 -> 10, no bias) on equal-size per-node shards,
/// stored back to back in one training matrix.
#[derive(Debug, Clone)]
pub struct SoftmaxTask {
    train: LabeledDataset,
    shard_size: usize,
    test: Option<LabeledDataset>,
}

impl SoftmaxTask {
    pub fn new(shards: Vec<Shard>, test: Option<LabeledDataset>) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::Dataset("need at least one shard".into()));
        }
        let size = shards[0].data.len();
        if size == 0 || shards.iter().any(|s| s.data.len() != size) {
            return Err(Error::Dataset("shards must be non-empty and of equal size".into()));
        }
        let features = shards[0].data.feature_dim();
        let total = size * shards.len();
        let mut stacked = DMatrix::zeros(total, features);
        let mut labels = Vec::with_capacity(total);
        for (k, s) in shards.iter().enumerate() {
            stacked.rows_mut(k * size, size).copy_from(&s.data.features);
            labels.extend_from_slice(&s.data.labels);
        }
        if let Some(t) = &test {
            Error::check_len("test feature dimension", features, t.feature_dim())?;
        }
        Ok(Self {
            train: LabeledDataset::new(stacked, labels)?,
            shard_size: size,
            test,
        })
    }

    pub fn features(&self) -> usize {
        self.train.feature_dim()
    }

    pub fn shard_size(&self) -> usize {
        self.shard_size
    }

    pub fn shard(&self, k: usize) -> LabeledDataset {
        let start = k * self.shard_size;
        self.train.subset(&(start..start + self.shard_size).collect::<Vec<_>>())
    }

    fn stacked_logits(&self, data: &LabeledDataset, thetas: &DMatrix<f64>) -> DMatrix<f64> {
        let features = self.features();
        let models = thetas.ncols();
        // features x (CLASSES * models), one weight block per model
        let all = DMatrix::from_column_slice(features, CLASSES * models, thetas.as_slice());
        &data.features * all
    }
}

impl Task for SoftmaxTask {
    fn dim(&self) -> usize {
        self.features() * CLASSES
    }

    fn nodes(&self) -> usize {
        self.train.len() / self.shard_size
    }

    fn local_gradient(&self, node: usize, theta: &DVector<f64>) -> DVector<f64> {
        let start = node * self.shard_size;
        softmax_gradient_rows(
            theta,
            self.train.features.rows(start, self.shard_size),
            &self.train.labels[start..start + self.shard_size],
        )
    }

    fn global_loss(&self, theta: &DVector<f64>) -> f64 {
        softmax_loss(theta, &self.train)
    }

    fn test_accuracy(&self, theta: &DVector<f64>) -> Option<f64> {
        let theta = DMatrix::from_column_slice(theta.len(), 1, theta.as_slice());
        self.test_accuracies(&theta).map(|v| v[0])
    }

    fn global_losses(&self, thetas: &DMatrix<f64>) -> Vec<f64> {
        let logits = self.stacked_logits(&self.train, thetas);
        (0..thetas.ncols())
            .map(|m| mean_cross_entropy(&logits.columns(m * CLASSES, CLASSES).into_owned(), &self.train.labels))
            .collect()
    }

    fn test_accuracies(&self, thetas: &DMatrix<f64>) -> Option<Vec<f64>> {
        let test = self.test.as_ref()?;
        let logits = self.stacked_logits(test, thetas);
        Some(
            (0..thetas.ncols())
                .map(|m| {
                    let block = logits.columns(m * CLASSES, CLASSES);
                    let correct = block
                        .row_iter()
                        .zip(&test.labels)
                        .filter(|(row, &y)| argmax(row.iter().copied()) == y as usize)
                        .count();
                    correct as f64 / test.len() as f64
                })
                .collect(),
        )
    }
}

/// Federated ridge regression: `F_k = ||A_k theta - y_k||^2 / (2D) + (lambda/2) ||theta||^2`.
#[derive(Debug, Clone)]
pub struct RidgeTask {
    designs: Vec<DMatrix<f64>>,
    targets: Vec<DVector<f64>>,
    ridge: f64,
}

impl RidgeTask {
    pub fn new(designs: Vec<DMatrix<f64>>, targets: Vec<DVector<f64>>, ridge: f64) -> Result<Self> {
        if designs.is_empty() {
            return Err(Error::domain("ridge task needs at least one node"));
        }
        Error::check_len("ridge targets", designs.len(), targets.len())?;
        let (rows, cols) = designs[0].shape();
        if rows == 0 || cols < 2 {
            return Err(Error::domain("ridge shards need samples and at least two features"));
        }
        for (a, y) in designs.iter().zip(&targets) {
            if a.shape() != (rows, cols) {
                return Err(Error::domain("ridge shards must share one shape"));
            }
            Error::check_len("ridge target length", rows, y.len())?;
        }
        if !(ridge >= 0.0) {
            return Err(Error::domain("ridge weight must be non-negative"));
        }
        let task = Self { designs, targets, ridge };
        if !(task.curvature().0 > 0.0) {
            return Err(Error::domain("ridge objective is not strongly convex"));
        }
        Ok(task)
    }

    /// Gaussian designs with a planted linear model plus observation noise.
    pub fn synthetic<R: Rng + ?Sized>(rng: &mut R, nodes: usize, samples: usize, features: usize, ridge: f64) -> Result<Self> {
        let truth = DVector::from_fn(features, |_, _| gaussian(rng));
        let mut designs = Vec::with_capacity(nodes);
        let mut targets = Vec::with_capacity(nodes);
        for k in 0..nodes {
            // node-dependent feature scaling keeps the local objectives heterogeneous
            let scale = 0.5 + k as f64 / nodes.max(1) as f64;
            let a = DMatrix::from_fn(samples, features, |_, j| gaussian(rng) * (1.0 + 0.1 * j as f64) * scale);
            let y = &a * &truth + DVector::from_fn(samples, |_, _| 0.5 * gaussian(rng));
            designs.push(a);
            targets.push(y);
        }
        Self::new(designs, targets, ridge)
    }

    pub fn samples_per_node(&self) -> usize {
        self.designs[0].nrows()
    }

    pub fn hessian(&self) -> DMatrix<f64> {
        let p = self.dim();
        let scale = 1.0 / (self.nodes() * self.samples_per_node()) as f64;
        let mut h = DMatrix::identity(p, p) * self.ridge;
        for a in &self.designs {
            h += a.tr_mul(a) * scale;
        }
        h
    }

    /// `(mu, rho)`: extreme eigenvalues of the Hessian of `F`.
    pub fn curvature(&self) -> (f64, f64) {
        let eig = self.hessian().symmetric_eigenvalues();
        (eig.min(), eig.max())
    }

    pub fn contraction(&self) -> f64 {
        let (mu, rho) = self.curvature();
        1.0 - mu / rho
    }

    pub fn optimum(&self) -> DVector<f64> {
        let scale = 1.0 / (self.nodes() * self.samples_per_node()) as f64;
        let mut rhs = DVector::zeros(self.dim());
        for (a, y) in self.designs.iter().zip(&self.targets) {
            rhs += a.tr_mul(y) * scale;
        }
        self.hessian().cholesky().expect("Hessian is positive definite").solve(&rhs)
    }

    pub fn optimal_loss(&self) -> f64 {
        self.global_loss(&self.optimum())
    }
}

/// `A^T (A theta - y) / D + lambda theta`.
pub fn ridge_gradient(theta: &DVector<f64>, design: &DMatrix<f64>, target: &DVector<f64>, ridge: f64) -> DVector<f64> {
    let residual = design * theta - target;
    design.tr_mul(&residual) / design.nrows() as f64 + theta * ridge
}

impl Task for RidgeTask {
    fn dim(&self) -> usize {
        self.designs[0].ncols()
    }

    fn nodes(&self) -> usize {
        self.designs.len()
    }

    fn local_gradient(&self, node: usize, theta: &DVector<f64>) -> DVector<f64> {
        ridge_gradient(theta, &self.designs[node], &self.targets[node], self.ridge)
    }

    fn global_loss(&self, theta: &DVector<f64>) -> f64 {
        let d = self.samples_per_node() as f64;
        let data: f64 = self
            .designs
            .iter()
            .zip(&self.targets)
            .map(|(a, y)| (a * theta - y).norm_squared() / (2.0 * d))
            .sum::<f64>()
            / self.nodes() as f64;
        data + 0.5 * self.ridge * theta.norm_squared()
    }
}

/// Over-the-air link used by [`Aggregation::OverTheAir`].
#[derive(Debug, Clone)]
pub struct AirCompLink {
    pub geometry: Geometry,
    pub params: ChannelParams,
    pub solver: SolverOptions,
    /// Switch both receiver noise sources off in the symbol simulation.
    pub noiseless: bool,
}

#[derive(Debug, Clone)]
pub enum Aggregation {
    /// Every node receives the exact average gradient.
    Ideal,
    OverTheAir(AirCompLink),
    /// Exact average plus real Gaussian noise of the given per-entry
    /// variance for each round (the last value repeats). With `shared`, one
    /// draw is broadcast to all nodes.
    InjectedNoise { variance: Vec<f64>, shared: bool },
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub rounds: usize,
    pub eta: f64,
    pub seed: u64,
}

/// One row of the per-round log. MSE columns are per-entry error variances
/// `E|e_{k,i}|^2` (complex error); `NaN` marks quantities that do not apply.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub train_loss_avg: f64,
    pub test_accuracy_avg: f64,
    pub mse_avg_analytic: f64,
    pub mse_avg_empirical: f64,
    pub mse_max: f64,
    pub phi: f64,
    pub beta: f64,
    pub sca_iters_u: usize,
    pub sca_iters_v: usize,
}

pub const ROUND_LOG_HEADER: [&str; 10] = [
    "round",
    "train_loss_avg",
    "test_accuracy_avg",
    "mse_avg_analytic",
    "mse_avg_empirical",
    "mse_max",
    "phi",
    "beta",
    "sca_iters_u",
    "sca_iters_v",
];

impl RoundLog {
    pub fn record(&self) -> [String; 10] {
        [
            self.round.to_string(),
            format!("{:e}", self.train_loss_avg),
            format!("{:e}", self.test_accuracy_avg),
            format!("{:e}", self.mse_avg_analytic),
            format!("{:e}", self.mse_avg_empirical),
            format!("{:e}", self.mse_max),
            format!("{:e}", self.phi),
            format!("{:e}", self.beta),
            self.sca_iters_u.to_string(),
            self.sca_iters_v.to_string(),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct RoundTraces {
    pub round: usize,
    pub downlink: SolverTrace,
    pub uplink: SolverTrace,
}

#[derive(Debug, Clone)]
pub struct TrainLog {
    pub initial_loss: f64,
    pub rounds: Vec<RoundLog>,
    /// Loss of every node's model after each round (`rounds x K`).
    pub node_losses: Vec<Vec<f64>>,
    pub traces: Vec<RoundTraces>,
    /// Final per-node parameters as columns (`d x K`).
    pub thetas: DMatrix<f64>,
}

pub fn write_round_log<W: std::io::Write>(rounds: &[RoundLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ROUND_LOG_HEADER)?;
    for r in rounds {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

/// Runs federated training from `theta = 0` on every node.
pub fn train<T: Task + ?Sized>(task: &T, config: &TrainConfig, aggregation: &Aggregation) -> Result<TrainLog> {
    let k_count = task.nodes();
    let dim = task.dim();
    if !(config.eta > 0.0) {
        return Err(Error::domain("learning rate must be positive"));
    }
    if let Aggregation::OverTheAir(link) = aggregation {
        Error::check_len("channel node count", k_count, link.params.nodes)?;
    }
    if let Aggregation::InjectedNoise { variance, .. } = aggregation {
        if variance.is_empty() || variance.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::domain("injected noise variances must be non-negative and non-empty"));
        }
    }

    let mut channel_rng = stream_rng(config.seed, streams::CHANNEL);
    let mut noise_rng = stream_rng(config.seed, streams::NOISE);
    let mut injected_rng = stream_rng(config.seed, streams::INJECTED);

    let mut thetas = DMatrix::<f64>::zeros(dim, k_count);
    let initial_loss = task.global_loss(&DVector::zeros(dim));
    let mut rounds = Vec::with_capacity(config.rounds);
    let mut node_losses = Vec::with_capacity(config.rounds);
    let mut traces = Vec::new();

    for round in 1..=config.rounds {
        let gradients: Vec<DVector<f64>> = (0..k_count)
            .into_par_iter()
            .map(|k| task.local_gradient(k, &thetas.column(k).into_owned()))
            .collect();
        let g = DMatrix::from_fn(k_count, dim, |k, i| gradients[k][i]);

        let mut row = RoundLog {
            round,
            train_loss_avg: f64::NAN,
            test_accuracy_avg: f64::NAN,
            mse_avg_analytic: 0.0,
            mse_avg_empirical: 0.0,
            mse_max: 0.0,
            phi: f64::NAN,
            beta: f64::NAN,
            sca_iters_u: 0,
            sca_iters_v: 0,
        };

        let estimates: DMatrix<f64> = match aggregation {
            Aggregation::Ideal => {
                let avg = g.row_sum().transpose() / k_count as f64;
                DMatrix::from_fn(dim, k_count, |i, _| avg[i])
            }
            Aggregation::InjectedNoise { variance, shared } => {
                let v = *variance.get(round - 1).unwrap_or_else(|| variance.last().unwrap());
                let sd = v.sqrt();
                let avg = g.row_sum().transpose() / k_count as f64;
                let mut est = DMatrix::from_fn(dim, k_count, |i, _| avg[i]);
                if *shared {
                    let e = DVector::from_fn(dim, |_, _| sd * gaussian(&mut injected_rng));
                    for mut col in est.column_iter_mut() {
                        col += &e;
                    }
                } else {
                    est.iter_mut().for_each(|x| *x += sd * gaussian(&mut injected_rng));
                }
                let energy: f64 = est
                    .column_iter()
                    .map(|c| (c - &avg).norm_squared())
                    .sum();
                row.mse_avg_analytic = v;
                row.mse_max = v;
                row.mse_avg_empirical = energy / (k_count * dim) as f64;
                est
            }
            Aggregation::OverTheAir(link) => {
                let (symbols, stats) = normalize(&g)?;
                let channel = draw_realization(&mut channel_rng, &link.geometry, &link.params)?;
                let outcome = design(&channel, &stats, &link.solver)?;
                let d = &outcome.design;
                let tx = if link.noiseless {
                    transmit_round::<crate::rng::SimRng>(&symbols, &stats, d, &channel, None)?
                } else {
                    transmit_round(&symbols, &stats, d, &channel, Some(&mut noise_rng))?
                };
                let kk = (k_count * k_count) as f64;
                let per_entry: Vec<f64> = (0..k_count).map(|k| node_mse(d, &channel, k) / kk).collect();
                row.mse_avg_analytic = per_entry.iter().sum::<f64>() / k_count as f64;
                row.mse_max = per_entry.iter().copied().fold(0.0, f64::max);
                row.mse_avg_empirical =
                    (0..k_count).map(|k| tx.error_energy(k)).sum::<f64>() / (k_count * dim) as f64;
                row.phi = d.phi;
                row.beta = d.beta;
                row.sca_iters_u = outcome.trace_u.iterations();
                row.sca_iters_v = outcome.trace_v.iterations();
                traces.push(RoundTraces {
                    round,
                    downlink: outcome.trace_u,
                    uplink: outcome.trace_v,
                });
                let mut est = DMatrix::zeros(dim, k_count);
                for k in 0..k_count {
                    est.set_column(k, &tx.node_estimate(k, &stats)?);
                }
                est
            }
        };

        thetas -= estimates * config.eta;
        if !thetas.iter().all(|x| x.is_finite()) {
            return Err(Error::domain(format!("parameters diverged in round {round}")));
        }
        let losses = task.global_losses(&thetas);
        row.train_loss_avg = losses.iter().sum::<f64>() / k_count as f64;
        if let Some(acc) = task.test_accuracies(&thetas) {
            row.test_accuracy_avg = acc.iter().sum::<f64>() / k_count as f64;
        }
        log::debug!("round {round}: loss {:.6} acc {:.4} mse {:.3e}", row.train_loss_avg, row.test_accuracy_avg, row.mse_avg_analytic);
        node_losses.push(losses);
        rounds.push(row);
    }

    Ok(TrainLog {
        initial_loss,
        rounds,
        node_losses,
        traces,
        thetas,
    })
}

/// Upper bounds on `E[F(theta^{[L+1]}) - F*]` for `L = 1..=error_norms.len()`:
/// `gap0 lambda^L + sum_{l<=L} lambda^{L-l} E||e^{[l]}||^2 / (2 rho)` with
/// `lambda = 1 - mu/rho`. Entry `L-1` holds the bound after `L` rounds.
pub fn theorem1_bound(gap0: f64, mu: f64, rho: f64, error_norms: &[f64]) -> Result<Vec<f64>> {
    if !(mu > 0.0 && mu <= rho && rho.is_finite()) {
        return Err(Error::domain(format!("need 0 < mu <= rho, got mu = {mu}, rho = {rho}")));
    }
    if !(gap0 >= 0.0) {
        return Err(Error::domain("initial gap must be non-negative"));
    }
    if error_norms.iter().any(|e| !(*e >= 0.0)) {
        return Err(Error::domain("error norms must be non-negative"));
    }
    let lambda = 1.0 - mu / rho;
    let mut bound = gap0;
    Ok(error_norms
        .iter()
        .map(|e| {
            bound = lambda * bound + e / (2.0 * rho);
            bound
        })
        .collect())
}
