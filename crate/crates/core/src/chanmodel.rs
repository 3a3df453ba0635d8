//! Node geometry, large-scale path loss and Rician block fading.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CMatrix, CVector};
use crate::rng::complex_gaussian;

/// Rician factors at or above this are treated as a pure line-of-sight link.
pub const RICIAN_LOS_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub server_position: [f64; 3],
    pub node_positions: Vec<[f64; 3]>,
}

impl Geometry {
    pub fn new(server_position: [f64; 3], node_positions: Vec<[f64; 3]>) -> Result<Self> {
        if node_positions.is_empty() {
            return Err(Error::domain("geometry needs at least one node"));
        }
        let finite = server_position
            .iter()
            .chain(node_positions.iter().flatten())
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::domain("geometry coordinates must be finite"));
        }
        Ok(Self {
            server_position,
            node_positions,
        })
    }

    /// Places `nodes` points uniformly at random in the axis-aligned box
    /// `region` (one `[lo, hi]` interval per axis; a degenerate interval pins
    /// that coordinate).
    pub fn sample_uniform<R: Rng + ?Sized>(
        rng: &mut R,
        server_position: [f64; 3],
        region: [[f64; 2]; 3],
        nodes: usize,
    ) -> Result<Self> {
        for [lo, hi] in region {
            if !(lo <= hi) {
                return Err(Error::domain(format!("invalid region interval [{lo}, {hi}]")));
            }
        }
        let node_positions = (0..nodes)
            .map(|_| {
                let mut p = [0.0; 3];
                for (axis, [lo, hi]) in region.iter().enumerate() {
                    p[axis] = if hi > lo { rng.random_range(*lo..*hi) } else { *lo };
                }
                p
            })
            .collect();
        Self::new(server_position, node_positions)
    }

    pub fn node_count(&self) -> usize {
        self.node_positions.len()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.node_positions
            .iter()
            .map(|p| {
                p.iter()
                    .zip(self.server_position.iter())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

/// Link-budget parameters in linear units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub antennas: usize,
    pub nodes: usize,
    /// Path-loss gain at the reference distance (linear, e.g. 1e-3 for 30 dB).
    pub c0: f64,
    pub reference_distance: f64,
    pub kappa: f64,
    pub rician_chi: f64,
    pub sigma_s_sq: f64,
    pub sigma_k_sq: f64,
    pub node_power: f64,
    pub server_power: f64,
    /// Force the downlink channel to equal the uplink channel.
    #[serde(default)]
    pub reciprocal: bool,
}

/// Channel state of one training round.
///
/// `h` and `q` are `N x K`; column `k` of `q` is `q_k` and the node observes
/// `q_k^H x` on the downlink.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub h: CMatrix,
    pub q: CMatrix,
    pub sigma_s_sq: f64,
    pub sigma_k_sq: Vec<f64>,
    pub node_power: Vec<f64>,
    pub server_power: f64,
}

impl ChannelRealization {
    pub fn new(
        h: CMatrix,
        q: CMatrix,
        sigma_s_sq: f64,
        sigma_k_sq: Vec<f64>,
        node_power: Vec<f64>,
        server_power: f64,
    ) -> Result<Self> {
        let (n, k) = h.shape();
        if n == 0 || k == 0 {
            return Err(Error::domain("channel needs N >= 1 and K >= 1"));
        }
        if q.shape() != (n, k) {
            return Err(Error::domain(format!(
                "uplink is {n}x{k} but downlink is {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        Error::check_len("node noise powers", k, sigma_k_sq.len())?;
        Error::check_len("node power budgets", k, node_power.len())?;
        if !h.iter().chain(q.iter()).all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(Error::domain("channel entries must be finite"));
        }
        let positive = |x: &f64| x.is_finite() && *x > 0.0;
        if !positive(&sigma_s_sq) || !sigma_k_sq.iter().all(positive) {
            return Err(Error::domain("noise powers must be strictly positive"));
        }
        if !positive(&server_power) || !node_power.iter().all(positive) {
            return Err(Error::domain("power budgets must be strictly positive"));
        }
        Ok(Self {
            h,
            q,
            sigma_s_sq,
            sigma_k_sq,
            node_power,
            server_power,
        })
    }

    pub fn antennas(&self) -> usize {
        self.h.nrows()
    }

    pub fn nodes(&self) -> usize {
        self.h.ncols()
    }

    pub fn uplink(&self, k: usize) -> CVector {
        self.h.column(k).into_owned()
    }

    pub fn downlink(&self, k: usize) -> CVector {
        self.q.column(k).into_owned()
    }

    /// Copy with every noise power multiplied by `factor`.
    pub fn with_noise_scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.h.clone(),
            self.q.clone(),
            self.sigma_s_sq * factor,
            self.sigma_k_sq.iter().map(|s| s * factor).collect(),
            self.node_power.clone(),
            self.server_power,
        )
    }
}

/// `c0 * (distance / gamma0)^(-kappa)`.
pub fn path_loss(distance: f64, c0: f64, gamma0: f64, kappa: f64) -> Result<f64> {
    if !(distance > 0.0) || !(gamma0 > 0.0) {
        return Err(Error::domain(format!(
            "path loss needs positive distances (distance {distance}, reference {gamma0})"
        )));
    }
    if distance < gamma0 {
        return Err(Error::domain(format!(
            "distance {distance} is inside the reference distance {gamma0}"
        )));
    }
    Ok(c0 * (distance / gamma0).powf(-kappa))
}

/// Unit-power Rician fade with a zero-phase line-of-sight component.
pub fn sample_rician<R: Rng + ?Sized>(rng: &mut R, chi: f64) -> Result<Complex64> {
    if !(chi >= 0.0) {
        return Err(Error::domain(format!("Rician factor must be non-negative, got {chi}")));
    }
    if chi >= RICIAN_LOS_LIMIT {
        return Ok(Complex64::new(1.0, 0.0));
    }
    let los = (chi / (1.0 + chi)).sqrt();
    let scatter = (1.0 / (1.0 + chi)).sqrt();
    Ok(Complex64::new(los, 0.0) + complex_gaussian(rng, 1.0) * scatter)
}

/// Draws one block-fading realization for a fixed geometry.
pub fn draw_realization<R: Rng + ?Sized>(
    rng: &mut R,
    geometry: &Geometry,
    params: &ChannelParams,
) -> Result<ChannelRealization> {
    let k = params.nodes;
    let n = params.antennas;
    Error::check_len("geometry node count", k, geometry.node_count())?;
    if n == 0 {
        return Err(Error::domain("need at least one antenna"));
    }
    let amplitude = geometry
        .distances()
        .into_iter()
        .map(|d| path_loss(d, params.c0, params.reference_distance, params.kappa).map(f64::sqrt))
        .collect::<Result<Vec<_>>>()?;

    let mut h = CMatrix::zeros(n, k);
    for col in 0..k {
        for row in 0..n {
            h[(row, col)] = sample_rician(rng, params.rician_chi)? * amplitude[col];
        }
    }
    let q = if params.reciprocal {
        h.clone()
    } else {
        let mut q = CMatrix::zeros(n, k);
        for col in 0..k {
            for row in 0..n {
                q[(row, col)] = sample_rician(rng, params.rician_chi)? * amplitude[col];
            }
        }
        q
    };
    ChannelRealization::new(
        h,
        q,
        params.sigma_s_sq,
        vec![params.sigma_k_sq; k],
        vec![params.node_power; k],
        params.server_power,
    )
}
