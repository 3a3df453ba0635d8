//! Joint uplink-downlink transceiver design under uniform forcing.
//!
//! With `K >= N`, uniform forcing makes the forwarding matrix rank one,
//! `M = sqrt(beta) u v^H`. The node coefficients then follow in closed form:
//!
//! ```text
//! b_k = sqrt(phi) delta_k h_k^H v / |v^H h_k|^2
//! a_k = (1 / sqrt(beta phi)) u^H q_k / |u^H q_k|^2
//! ```
//!
//! and the per-node MSE reduces to `sigma_s^2/phi + sigma_k^2/(beta phi |q_k^H u|^2)`.
//! The downlink direction `u` and the uplink pair `(v, phi)` decouple into
//! two instances of the min-max problem solved in [`crate::dcsolver`];
//! `beta` then saturates the server power budget.

use nalgebra::DVector;
use num_complex::Complex64;

use crate::chanmodel::ChannelRealization;
use crate::dcsolver::{self, LiftedProblem, SolverOptions, SolverTrace};
use crate::error::{Error, Result};
use crate::gradcodec::GradientBatch;
use crate::linalg::{canonicalize_phase, CMatrix, CVector};

#[derive(Debug, Clone, PartialEq)]
pub struct TransceiverDesign {
    /// Downlink (forwarding) direction, unit norm.
    pub u: CVector,
    /// Uplink combining direction, unit norm.
    pub v: CVector,
    pub beta: f64,
    pub phi: f64,
    /// Transmit equalization per node; zero for degenerate nodes.
    pub b: CVector,
    /// Receive equalization per node.
    pub a: CVector,
    /// Forwarding matrix `sqrt(beta) u v^H`.
    pub m: CMatrix,
    /// Analytic per-node, per-symbol MSE.
    pub mse: Vec<f64>,
    pub delta: DVector<f64>,
    pub degenerate: Vec<bool>,
}

impl TransceiverDesign {
    pub fn nodes(&self) -> usize {
        self.a.len()
    }

    pub fn max_mse(&self) -> f64 {
        self.mse.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct DesignOutcome {
    pub design: TransceiverDesign,
    pub trace_u: SolverTrace,
    pub trace_v: SolverTrace,
}

/// `P_s / (phi c + sigma_s^2)`.
pub fn beta_star(phi: f64, c: f64, sigma_s_sq: f64, server_power: f64) -> f64 {
    server_power / (phi * c + sigma_s_sq)
}

/// Largest node power scale admitted by `v`: `min_k P_k |v^H h_k|^2 / delta_k^2`
/// over non-degenerate nodes.
pub fn phi_for(v: &CVector, channel: &ChannelRealization, stats: &GradientBatch) -> f64 {
    stats
        .active_nodes()
        .map(|k| channel.node_power[k] * v.dotc(&channel.uplink(k)).norm_sqr() / stats.delta[k].powi(2))
        .fold(f64::INFINITY, f64::min)
}

fn check_inputs(channel: &ChannelRealization, stats: &GradientBatch) -> Result<()> {
    Error::check_len("gradient statistics node count", channel.nodes(), stats.nodes())?;
    if channel.nodes() < channel.antennas() {
        return Err(Error::Unsupported(format!(
            "K = {} nodes is fewer than N = {} antennas; the rank-one forwarding structure requires K >= N",
            channel.nodes(),
            channel.antennas()
        )));
    }
    if stats.active_nodes().next().is_none() {
        return Err(Error::Unsupported("every node has a constant gradient".into()));
    }
    Ok(())
}

/// Builds the complete design for given unit directions `u`, `v`.
///
/// `phi` is taken as large as the node power budgets allow and `beta`
/// saturates the server budget.
pub fn assemble(u: &CVector, v: &CVector, channel: &ChannelRealization, stats: &GradientBatch) -> Result<TransceiverDesign> {
    check_inputs(channel, stats)?;
    let n = channel.antennas();
    let k_count = channel.nodes();
    Error::check_len("downlink direction", n, u.len())?;
    Error::check_len("uplink direction", n, v.len())?;
    let u = u / Complex64::new(u.norm(), 0.0);
    let v = v / Complex64::new(v.norm(), 0.0);

    let phi = phi_for(&v, channel, stats);
    if !(phi > 0.0 && phi.is_finite()) {
        return Err(Error::domain("uplink direction is orthogonal to an active node's channel"));
    }
    let beta = beta_star(phi, stats.c, channel.sigma_s_sq, channel.server_power);

    let mut b = CVector::zeros(k_count);
    let mut a = CVector::zeros(k_count);
    let mut mse = Vec::with_capacity(k_count);
    for k in 0..k_count {
        if !stats.degenerate[k] {
            let h = channel.uplink(k);
            let vh = v.dotc(&h);
            b[k] = vh.conj() * (phi.sqrt() * stats.delta[k] / vh.norm_sqr());
        }
        let uq = u.dotc(&channel.downlink(k));
        if uq.norm_sqr() == 0.0 {
            return Err(Error::domain(format!("downlink direction is orthogonal to node {k}")));
        }
        a[k] = uq * (1.0 / ((beta * phi).sqrt() * uq.norm_sqr()));
        mse.push(channel.sigma_s_sq / phi + channel.sigma_k_sq[k] / (beta * phi * uq.norm_sqr()));
    }
    let m = &u * v.adjoint() * Complex64::new(beta.sqrt(), 0.0);
    Ok(TransceiverDesign {
        u,
        v,
        beta,
        phi,
        b,
        a,
        m,
        mse,
        delta: stats.delta.clone(),
        degenerate: stats.degenerate.clone(),
    })
}

/// Min-max MSE design for one round.
pub fn design(channel: &ChannelRealization, stats: &GradientBatch, opts: &SolverOptions) -> Result<DesignOutcome> {
    check_inputs(channel, stats)?;
    let k_count = channel.nodes();

    let downlink = LiftedProblem::new((0..k_count).map(|k| channel.downlink(k)).collect(), channel.sigma_k_sq.clone())?;
    let active: Vec<usize> = stats.active_nodes().collect();
    let uplink = LiftedProblem::new(
        active.iter().map(|&k| channel.uplink(k)).collect(),
        active.iter().map(|&k| stats.delta[k].powi(2) / channel.node_power[k]).collect(),
    )?;

    let sol_u = dcsolver::solve(&downlink, opts)?;
    let sol_v = dcsolver::solve(&uplink, opts)?;
    let (mut u, mut v) = (sol_u.x, sol_v.x);
    canonicalize_phase(&mut u);
    canonicalize_phase(&mut v);
    let design = assemble(&u, &v, channel, stats)?;
    Ok(DesignOutcome {
        design,
        trace_u: sol_u.trace,
        trace_v: sol_v.trace,
    })
}

/// `|a_k|^2 (sigma_s^2 q_k^H M M^H q_k + sigma_k^2)`, evaluated from the matrices.
pub fn node_mse(design: &TransceiverDesign, channel: &ChannelRealization, k: usize) -> f64 {
    let q = channel.downlink(k);
    let mq = design.m.adjoint() * &q;
    design.a[k].norm_sqr() * (channel.sigma_s_sq * mq.norm_squared() + channel.sigma_k_sq[k])
}

/// Closed form `sigma_s^2/phi + sigma_k^2/(beta phi |q_k^H u|^2)`.
pub fn node_mse_closed_form(design: &TransceiverDesign, channel: &ChannelRealization, k: usize) -> f64 {
    let uq = design.u.dotc(&channel.downlink(k)).norm_sqr();
    channel.sigma_s_sq / design.phi + channel.sigma_k_sq[k] / (design.beta * design.phi * uq)
}

/// `E ||e_k||^2 = (d / K^2) node_mse`.
pub fn expected_error_norm(design: &TransceiverDesign, channel: &ChannelRealization, k: usize, dim: usize) -> f64 {
    let kk = channel.nodes() as f64;
    dim as f64 / (kk * kk) * node_mse(design, channel, k)
}

/// Analytic server transmit power `Tr(M H B S B^H H^H M^H) + sigma_s^2 Tr(M M^H)`.
pub fn server_power(design: &TransceiverDesign, channel: &ChannelRealization, stats: &GradientBatch) -> f64 {
    let k = channel.nodes();
    let b = CMatrix::from_diagonal(&design.b);
    let s = CMatrix::from_fn(k, k, |i, j| Complex64::new(stats.s[(i, j)], 0.0));
    let mhb = &design.m * &channel.h * b;
    let signal = (&mhb * s * mhb.adjoint()).trace().re;
    let noise = channel.sigma_s_sq * (&design.m * design.m.adjoint()).trace().re;
    signal + noise
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chanmodel::{draw_realization, ChannelParams, Geometry};
    use crate::gradcodec::normalize;
    use crate::linalg::singular_values;
    use crate::rng::{gaussian, stream_rng};
    use nalgebra::DMatrix;

    fn setup(seed: u64, n: usize, k: usize) -> (ChannelRealization, GradientBatch) {
        let mut rng = stream_rng(seed, 1);
        let geometry = Geometry::sample_uniform(&mut rng, [-50.0, 0.0, 10.0], [[0.0, 20.0], [-10.0, 10.0], [0.0, 0.0]], k).unwrap();
        let params = ChannelParams {
            antennas: n,
            nodes: k,
            c0: 1e-3,
            reference_distance: 1.0,
            kappa: 2.2,
            rician_chi: 1.0,
            sigma_s_sq: 1e-5,
            sigma_k_sq: 1e-5,
            node_power: 1.0,
            server_power: 100.0,
            reciprocal: false,
        };
        let channel = draw_realization(&mut rng, &geometry, &params).unwrap();
        let g = DMatrix::from_fn(k, 64, |_, _| 0.01 * gaussian(&mut rng));
        (channel, normalize(&g).unwrap().1)
    }

    #[test]
    fn beta_star_arithmetic() {
        assert_eq!(beta_star(1.0, 9.0, 1.0, 10.0), 1.0);
        assert_eq!(beta_star(0.0, 9.0, 2.0, 10.0), 5.0);
    }

    #[test]
    fn single_antenna_design_matches_scalar_formulas() {
        let (channel, stats) = setup(3, 1, 5);
        let out = design(&channel, &stats, &SolverOptions::default()).unwrap();
        let d = &out.design;
        assert_eq!(d.u[0], Complex64::new(1.0, 0.0));
        assert_eq!(d.v[0], Complex64::new(1.0, 0.0));
        let phi = (0..5)
            .map(|k| channel.node_power[k] * channel.h[(0, k)].norm_sqr() / stats.delta[k].powi(2))
            .fold(f64::INFINITY, f64::min);
        assert!((d.phi - phi).abs() <= 1e-12 * phi);
        let beta = channel.server_power / (phi * stats.c + channel.sigma_s_sq);
        assert!((d.beta - beta).abs() <= 1e-12 * beta);
        for k in 0..5 {
            let scalar = channel.sigma_s_sq / phi + channel.sigma_k_sq[k] / (beta * phi * channel.q[(0, k)].norm_sqr());
            // direct evaluation of |a_k|^2 (sigma_s^2 |q_k M|^2 + sigma_k^2)
            let m = d.m[(0, 0)];
            let direct = d.a[k].norm_sqr() * (channel.sigma_s_sq * (channel.q[(0, k)].conj() * m).norm_sqr() + channel.sigma_k_sq[k]);
            assert!((scalar - direct).abs() <= 1e-10 * scalar);
            assert!((d.mse[k] - scalar).abs() <= 1e-10 * scalar);
        }
    }

    #[test]
    fn fewer_nodes_than_antennas_is_unsupported() {
        let (channel, stats) = setup(1, 4, 3);
        assert!(matches!(design(&channel, &stats, &SolverOptions::default()), Err(Error::Unsupported(_))));
    }

    #[test]
    fn structure_invariants_hold() {
        let (channel, stats) = setup(7, 3, 8);
        let d = design(&channel, &stats, &SolverOptions::default()).unwrap().design;
        assert!((d.u.norm() - 1.0).abs() < 1e-9 && (d.v.norm() - 1.0).abs() < 1e-9);
        let sv = singular_values(&d.m);
        assert!(sv[1] <= 1e-9 * sv[0]);
        for j in 0..8 {
            let bj = d.v.dotc(&channel.uplink(j)) * d.b[j] / stats.delta[j];
            assert!((bj - Complex64::new(d.phi.sqrt(), 0.0)).norm() <= 1e-9 * d.phi.sqrt());
            let ak = d.a[j] * channel.downlink(j).dotc(&d.u) * d.beta.sqrt();
            assert!((ak - Complex64::new(1.0 / d.phi.sqrt(), 0.0)).norm() <= 1e-9 / d.phi.sqrt());
        }
        let tight = (0..8).map(|k| d.b[k].norm_sqr() / channel.node_power[k]).fold(0.0, f64::max);
        assert!((tight - 1.0).abs() <= 1e-6);
        let ps = server_power(&d, &channel, &stats);
        assert!((ps / channel.server_power - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn mse_identities() {
        let (channel, stats) = setup(9, 2, 6);
        let d = design(&channel, &stats, &SolverOptions::default()).unwrap().design;
        for k in 0..6 {
            let direct = node_mse(&d, &channel, k);
            let closed = node_mse_closed_form(&d, &channel, k);
            assert!((direct - closed).abs() <= 1e-10 * closed);
            assert!((expected_error_norm(&d, &channel, k, 64) - 64.0 / 36.0 * direct).abs() <= 1e-12 * direct);
        }
        // second term halves when beta doubles
        let mut doubled = d.clone();
        doubled.beta *= 2.0;
        for k in 0..6 {
            let first = channel.sigma_s_sq / d.phi;
            let before = node_mse_closed_form(&d, &channel, k) - first;
            let after = node_mse_closed_form(&doubled, &channel, k) - first;
            assert!((after - 0.5 * before).abs() <= 1e-12 * before);
        }
        // scaling node noise scales the second term; vanishing noise, vanishing mse
        let mut scaled = channel.clone();
        scaled.sigma_k_sq.iter_mut().for_each(|s| *s *= 3.0);
        for k in 0..6 {
            let first = channel.sigma_s_sq / d.phi;
            let base = node_mse_closed_form(&d, &channel, k) - first;
            let tripled = node_mse_closed_form(&d, &scaled, k) - first;
            assert!((tripled - 3.0 * base).abs() <= 1e-12 * base);
        }
        let quiet = channel.with_noise_scaled(1e-30).unwrap();
        assert!(node_mse_closed_form(&d, &quiet, 0) < 1e-30 * d.mse[0] * 1.01);
    }

    #[test]
    fn degenerate_node_is_silent_but_served() {
        let (channel, _) = setup(11, 2, 5);
        let mut rng = stream_rng(2, 9);
        let mut g = DMatrix::from_fn(5, 32, |_, _| gaussian(&mut rng));
        g.row_mut(2).fill(0.25);
        let stats = normalize(&g).unwrap().1;
        let d = design(&channel, &stats, &SolverOptions::default()).unwrap().design;
        assert_eq!(d.b[2], Complex64::new(0.0, 0.0));
        assert!(d.a[2].norm() > 0.0);
        assert!(d.mse[2].is_finite());
    }
}
