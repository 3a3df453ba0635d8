mod common;

use airfl::airsim::{audit_uniform_forcing, transmit_round};
use airfl::dcsolver::SolverOptions;
use airfl::gradcodec::normalize;
use airfl::rng::{gaussian, stream_rng, streams};
use airfl::txrx::{design, expected_error_norm, server_power};
use nalgebra::DMatrix;

use common::{default_params, mnist_batch, realization};

#[test]
fn mnist_symbols_meet_power_and_error_predictions() {
    let (symbols, stats) = mnist_batch();
    let params = default_params(2, 20, 20.0);
    let opts = SolverOptions::default();
    for index in 0..3 {
        let channel = realization(11, index, &params);
        let d = design(&channel, &stats, &opts).unwrap().design;
        let mut rng = stream_rng(100 + index, streams::NOISE);
        let tx = transmit_round(&symbols, &stats, &d, &channel, Some(&mut rng)).unwrap();
        // a second block doubles the sample to 2d symbols per node
        let tx2 = transmit_round(&symbols, &stats, &d, &channel, Some(&mut rng)).unwrap();

        let analytic = server_power(&d, &channel, &stats);
        let rel = (tx.measured_server_power - analytic).abs() / analytic;
        assert!(rel <= 0.02, "realization {index}: measured {} analytic {analytic}", tx.measured_server_power);

        let (mut real_total, mut complex_total) = (0.0, 0.0);
        for k in 0..20 {
            let expected = expected_error_norm(&d, &channel, k, stats.dim());
            let measured = 0.5 * (tx.error_energy(k) + tx2.error_energy(k));
            let rel = (measured - expected).abs() / expected;
            assert!(rel <= 0.03, "realization {index} node {k}: {measured} vs {expected}");
            real_total += 0.5 * (tx.real_error_energy(k) + tx2.real_error_energy(k));
            complex_total += measured;
        }
        // circular noise: the real part carries half the error energy
        let ratio = real_total / complex_total;
        assert!((ratio - 0.5).abs() <= 0.5 * 0.03, "real/complex error energy {ratio}");
        assert!(audit_uniform_forcing(&d, &channel).max_residual() <= 1e-8);
    }
}

#[test]
fn node_transmit_power_never_exceeds_budget() {
    let mut rng = stream_rng(5, streams::DATA);
    let g = DMatrix::from_fn(20, 4000, |k, _| gaussian(&mut rng) * (1.0 + k as f64));
    let (symbols, stats) = normalize(&g).unwrap();
    let params = default_params(4, 20, 10.0);
    let channel = realization(3, 0, &params);
    let d = design(&channel, &stats, &SolverOptions::default()).unwrap().design;
    let tx = transmit_round::<airfl::rng::SimRng>(&symbols, &stats, &d, &channel, None).unwrap();
    for (k, p) in tx.measured_node_power.iter().enumerate() {
        // unit-variance symbols carry exactly |b_k|^2
        assert!((p - d.b[k].norm_sqr()).abs() <= 1e-9 * channel.node_power[k]);
        assert!(*p <= channel.node_power[k] * (1.0 + 1e-9));
    }
    let binding = tx.measured_node_power.iter().copied().fold(0.0, f64::max);
    assert!((binding - 1.0).abs() <= 1e-6);
    // without noise the nodes recover the exact average
    for k in 0..20 {
        assert!(tx.error_energy(k) <= 1e-18 * stats.dim() as f64 * stats.g.norm_squared());
    }
}
