mod oracle;

use d2t_core::filter::proposal::{matched_posterior, unmatched_posterior};
use d2t_core::filter::{FilterConfig, FilterState};
use d2t_core::math::spd_inverse;
use d2t_core::parallel::Execution;
use d2t_core::simulator::{simulate, SimConfig};
use d2t_core::{AnchorObservation, BBox, ModelParams, MotionParams};
use nalgebra::{Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn oracle_params() -> ModelParams {
    ModelParams {
        lambda_death: 0.1,
        lambda_birth: 0.3,
        motion: MotionParams {
            a: Matrix4::identity() * 0.98 + Matrix4::from_element(0.004),
            b: Vector4::new(1.5, -0.5, 1.0, 0.5),
            s: Vector4::repeat(2.0f64.ln()),
        },
        ..ModelParams::default()
    }
}

/// Max abs difference between filter weights and direct density ratios over
/// every frame of one scene.
fn weight_gap(seed: u64, particles: usize, frames: usize) -> f64 {
    let params = oracle_params();
    let sim = SimConfig {
        model: params.clone(),
        frames,
        initial_objects: 2.0,
        clutter_rate: 0.8,
        seed,
        ..SimConfig::default()
    };
    let scene = simulate(&sim, Execution::Sequential).unwrap();
    let mut state = FilterState::new(FilterConfig::new(particles, seed)).unwrap();
    let mut worst: f64 = 0.0;
    for frame in &scene.frames {
        let before = state.particles.clone();
        let snap = state.step(frame, &params).unwrap();
        let log_w: Vec<f64> = before
            .iter()
            .enumerate()
            .map(|(l, p)| {
                p.log_weight
                    + oracle::direct_log_ratio(&p.objects, frame, &snap.clusters, &snap.records[l], &snap.particles[l], &params)
            })
            .collect();
        for (a, b) in oracle::normalize(&log_w).iter().zip(&snap.weights) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

#[test]
fn weights_match_direct_density_ratio() {
    for seed in 0..8 {
        let gap = weight_gap(seed, 8, 5);
        assert!(gap < 1e-6, "seed {seed}: {gap}");
    }
}

#[test]
fn unnormalized_weight_matches_ratio_including_constants() {
    let params = oracle_params();
    let sim = SimConfig {
        model: params.clone(),
        frames: 4,
        initial_objects: 2.0,
        clutter_rate: 1.0,
        seed: 77,
        ..SimConfig::default()
    };
    let scene = simulate(&sim, Execution::Sequential).unwrap();
    let mut state = FilterState::new(FilterConfig::new(6, 3)).unwrap();
    for frame in &scene.frames {
        let before = state.particles.clone();
        let snap = state.step(frame, &params).unwrap();
        let constant: f64 = {
            use d2t_core::filter::weight::cluster_log_constant;
            snap.clusters
                .iter()
                .map(|c| {
                    let m: Vec<&AnchorObservation> = c.anchor_indices.iter().map(|&i| &frame.anchors[i]).collect();
                    cluster_log_constant(&m, c, &params).unwrap()
                })
                .sum()
        };
        for (l, p) in before.iter().enumerate() {
            let direct = oracle::direct_log_ratio(&p.objects, frame, &snap.clusters, &snap.records[l], &snap.particles[l], &params);
            let closed = snap.records[l].log_weight + constant;
            if direct.is_finite() || closed.is_finite() {
                assert!((direct - closed).abs() < 1e-6 * (1.0 + direct.abs()), "{direct} vs {closed}");
            }
        }
    }
}

#[test]
fn log_marginal_close_to_kalman_evidence() {
    let sc = oracle::kalman_scenario(11, 10, 0);
    let exact = oracle::kalman_log_evidence(&sc.params, &sc.label, &sc.forward);
    let estimates: Vec<f64> = (0..10)
        .map(|seed| {
            let mut st = FilterState::from_objects(std::slice::from_ref(&sc.label), 1e-6, FilterConfig::new(300, seed)).unwrap();
            for f in &sc.forward {
                st.step(f, &sc.params).unwrap();
            }
            st.log_marginal
        })
        .collect();
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let sd = (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((mean - exact).abs() < 3.0 * sd / n.sqrt() + 1e-9, "mean {mean}, exact {exact}, sd {sd}");
}

fn random_spd(rng: &mut ChaCha8Rng, scale: f64) -> Matrix4<f64> {
    let m = Matrix4::from_fn(|_, _| rng.random_range(-1.0..1.0));
    (m * m.transpose() + Matrix4::identity() * 0.3) * scale
}

#[test]
fn conjugate_fusion_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let m = rng.random_range(1..4);
        let center = Vector4::new(50.0, 40.0, 90.0, 70.0);
        let anchors: Vec<AnchorObservation> = (0..m)
            .map(|_| {
                let v = center + Vector4::from_fn(|_, _| rng.random_range(-3.0..3.0));
                AnchorObservation::new(BBox::from_vector(&v), 0.8, vec![0.5, 0.5]).unwrap()
            })
            .collect();
        let refs: Vec<&AnchorObservation> = anchors.iter().collect();
        let params = ModelParams {
            num_classes: 2,
            prior_mean: center + Vector4::from_fn(|_, _| rng.random_range(-10.0..10.0)),
            prior_cov: random_spd(&mut rng, 20.0),
            eps_pd: 0.5,
            motion: MotionParams {
                s: Vector4::from_fn(|_, _| rng.random_range(0.0..1.5)),
                ..MotionParams::identity(1.0)
            },
            ..ModelParams::default()
        };
        let cluster = d2t_core::clustering::cluster_statistics(&refs, params.alpha, params.eps_pd);
        let boxes: Vec<Vector4<f64>> = anchors.iter().map(|a| a.bbox.to_vector()).collect();
        let (_, scatter) = oracle::mean_and_scatter(&boxes, params.alpha, params.eps_pd);
        let prev = BBox::from_vector(&(center + Vector4::from_fn(|_, _| rng.random_range(-4.0..4.0))));

        let var = params.motion.variance();
        let g_mean = params.motion.a * prev.to_vector() + params.motion.b;
        let g_cov = Matrix4::from_diagonal(&var);
        let post = matched_posterior(&prev, &cluster, &params.motion).unwrap();
        let f = oracle::log_posterior_factors(&g_mean, &g_cov, &boxes, &scatter);
        let (qm, qc) = oracle::quadrature_moments(f, &post.mean, 1.0, 100_001);
        assert!((qm - post.mean).abs().max() < 1e-8, "{qm} {}", post.mean);
        assert!((qc - post.cov).abs().max() < 1e-8, "{qc} {}", post.cov);

        let post0 = unmatched_posterior(&cluster, &params).unwrap();
        let f0 = oracle::log_posterior_factors(&params.prior_mean, &params.prior_cov, &boxes, &scatter);
        let (qm, qc) = oracle::quadrature_moments(f0, &post0.mean, 1.0, 100_001);
        assert!((qm - post0.mean).abs().max() < 1e-8);
        assert!((qc - post0.cov).abs().max() < 1e-8);
        assert!(spd_inverse(&qc).is_ok());
    }
}
