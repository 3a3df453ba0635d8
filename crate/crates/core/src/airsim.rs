//! Symbol-level simulation of one AirComp round: uplink superposition,
//! rank-one forwarding, downlink reception and per-node reconstruction.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

use crate::chanmodel::ChannelRealization;
use crate::error::{Error, Result};
use crate::gradcodec::{self, GradientBatch};
use crate::linalg::CMatrix;
use crate::rng::complex_gaussian;
use crate::txrx::TransceiverDesign;

#[derive(Debug, Clone)]
pub struct RoundTransmission {
    /// Equalized downlink samples `r_{k,i}` (`K x d`).
    pub received: CMatrix,
    /// Complex node estimates `z_{k,i} = (r_{k,i} + sum_k g_bar_k) / K`.
    pub received_z: CMatrix,
    /// `z_{k,i}` minus the exact average gradient entry.
    pub error: CMatrix,
    pub measured_server_power: f64,
    pub measured_node_power: Vec<f64>,
}

impl RoundTransmission {
    pub fn nodes(&self) -> usize {
        self.received.nrows()
    }

    pub fn dim(&self) -> usize {
        self.received.ncols()
    }

    /// Real-valued global-gradient estimate at node `k`.
    pub fn node_estimate(&self, k: usize, stats: &GradientBatch) -> Result<DVector<f64>> {
        let row: Vec<Complex64> = self.received.row(k).iter().copied().collect();
        gradcodec::denormalize(&row, &stats.g_bar, self.nodes())
    }

    /// `||e_k||^2` using the complex error.
    pub fn error_energy(&self, k: usize) -> f64 {
        self.error.row(k).iter().map(|e| e.norm_sqr()).sum()
    }

    /// `||Re e_k||^2`, the error the model update actually sees.
    pub fn real_error_energy(&self, k: usize) -> f64 {
        self.error.row(k).iter().map(|e| e.re * e.re).sum()
    }
}

/// Simulates one round. `noise = None` switches both noise sources off.
pub fn transmit_round<R: Rng + ?Sized>(
    symbols: &DMatrix<f64>,
    stats: &GradientBatch,
    design: &TransceiverDesign,
    channel: &ChannelRealization,
    noise: Option<&mut R>,
) -> Result<RoundTransmission> {
    let (k_count, dim) = symbols.shape();
    let n = channel.antennas();
    Error::check_len("symbol rows", channel.nodes(), k_count)?;
    Error::check_len("gradient statistics rows", k_count, stats.nodes())?;
    Error::check_len("gradient statistics dimension", dim, stats.dim())?;
    Error::check_len("design node count", k_count, design.nodes())?;
    Error::check_len("forwarding matrix size", n, design.m.nrows())?;

    let symbols_c = symbols.map(|s| Complex64::new(s, 0.0));
    let hb = &channel.h * CMatrix::from_diagonal(&design.b);
    let mut y = &hb * &symbols_c;
    let mut node_noise = CMatrix::zeros(k_count, dim);
    if let Some(rng) = noise {
        for i in 0..dim {
            for row in 0..n {
                y[(row, i)] += complex_gaussian(rng, channel.sigma_s_sq);
            }
        }
        for i in 0..dim {
            for k in 0..k_count {
                node_noise[(k, i)] = complex_gaussian(rng, channel.sigma_k_sq[k]);
            }
        }
    }
    let x = &design.m * &y;
    let mut received = channel.q.adjoint() * &x + node_noise;
    for k in 0..k_count {
        let a = design.a[k];
        received.row_mut(k).iter_mut().for_each(|r| *r *= a);
    }

    let offset = stats.g_bar_sum();
    let inv_k = 1.0 / k_count as f64;
    let received_z = received.map(|r| (r + offset) * inv_k);
    let average = stats.average();
    let error = CMatrix::from_fn(k_count, dim, |k, i| received_z[(k, i)] - average[i]);

    let measured_server_power = x.iter().map(|z| z.norm_sqr()).sum::<f64>() / dim as f64;
    let measured_node_power = (0..k_count)
        .map(|k| symbols.row(k).iter().map(|s| (design.b[k] * s).norm_sqr()).sum::<f64>() / dim as f64)
        .collect();

    Ok(RoundTransmission {
        received,
        received_z,
        error,
        measured_server_power,
        measured_node_power,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForcingAudit {
    /// `|a_k q_k^H M h_j b_j / delta_j - 1|`; degenerate columns are zero.
    pub residual: DMatrix<f64>,
    pub degenerate: Vec<bool>,
}

impl ForcingAudit {
    pub fn max_residual(&self) -> f64 {
        self.residual.max()
    }
}

pub fn audit_uniform_forcing(design: &TransceiverDesign, channel: &ChannelRealization) -> ForcingAudit {
    let k_count = channel.nodes();
    let mut residual = DMatrix::zeros(k_count, k_count);
    for j in 0..k_count {
        if design.degenerate[j] {
            continue;
        }
        let mh = &design.m * channel.uplink(j) * (design.b[j] / design.delta[j]);
        for k in 0..k_count {
            let gain = design.a[k] * channel.downlink(k).dotc(&mh);
            residual[(k, j)] = (gain - 1.0).norm();
        }
    }
    ForcingAudit {
        residual,
        degenerate: design.degenerate.clone(),
    }
}
