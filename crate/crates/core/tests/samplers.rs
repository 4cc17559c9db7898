mod common;

use std::collections::BTreeMap;

use common::{moments, simpson_cdf};
use fedpoison::attack::{lie_updates, lie_z};
use fedpoison::client::{apply_ldp, sample_pseudo_items, ClientConfig, Neighborhood};
use fedpoison::data::LocalGraph;
use fedpoison::model::GradientBundle;
use fedpoison::numerics::{inverse_normal_cdf, sample_gaussian, sample_laplacian, SimRng};

const N: usize = 100_000;

#[test]
fn laplace_moments() {
    let mut rng = SimRng::new(11);
    let xs: Vec<f64> = (0..N).map(|_| sample_laplacian(&mut rng, 0.0, 1.0).unwrap()).collect();
    let (mean, var) = moments(&xs);
    assert!(mean.abs() <= 0.02, "mean {mean}");
    assert!((var - 2.0).abs() <= 0.1, "variance {var}");
    // Three standard errors: Var(X) = 2, Var(X^2) = 24 - 4 = 20.
    let n = N as f64;
    assert!(mean.abs() <= 3.0 * (2.0 / n).sqrt());
    assert!((var - 2.0).abs() <= 3.0 * (20.0 / n).sqrt());
}

#[test]
fn gaussian_moments() {
    let mut rng = SimRng::new(12);
    let xs: Vec<f64> = (0..N).map(|_| sample_gaussian(&mut rng, 1.5, 2.0).unwrap()).collect();
    let (mean, var) = moments(&xs);
    let n = N as f64;
    // Var(X) = 4, Var((X - mu)^2) = 2 sigma^4 = 32.
    assert!((mean - 1.5).abs() <= 3.0 * (4.0 / n).sqrt(), "mean {mean}");
    assert!((var - 4.0).abs() <= 3.0 * (32.0 / n).sqrt(), "variance {var}");
}

#[test]
fn ldp_noise_matches_laplace_scale() {
    let model = vec![0.1, -0.2, 0.05, 0.0];
    let cfg = ClientConfig {
        pseudo_item_count: 0,
        clip_threshold: 0.3,
        noise_strength: 0.1,
    };
    let scale = 0.1 * (0.1 + 0.2 + 0.05) / 4.0;
    let mut rng = SimRng::new(13);
    let mut diffs = Vec::with_capacity(N);
    while diffs.len() < N {
        let g = GradientBundle {
            item_grads: BTreeMap::new(),
            user_grads: BTreeMap::new(),
            model_grads: model.clone(),
        };
        let out = apply_ldp(g, &cfg, &mut rng).unwrap();
        diffs.extend(out.model_grads.iter().zip(&model).map(|(o, i)| o - i));
    }
    let (mean, var) = moments(&diffs);
    let n = diffs.len() as f64;
    let v = 2.0 * scale * scale;
    assert!(mean.abs() <= 3.0 * (v / n).sqrt(), "mean {mean}");
    assert!(
        (var - v).abs() <= 3.0 * (20.0 * scale.powi(4) / n).sqrt(),
        "variance {var} vs {v}"
    );
}

#[test]
fn pseudo_items_uniform_over_pool() {
    // Owner 0 rates item 0; neighbors rate items 1..=8 between them.
    let graphs = vec![
        LocalGraph {
            owner: 0,
            rated_items: vec![(0, 3.0)],
            neighbors: vec![1, 2],
        },
        LocalGraph {
            owner: 1,
            rated_items: vec![(0, 1.0), (1, 2.0), (2, 2.0), (3, 2.0), (4, 2.0)],
            neighbors: vec![0],
        },
        LocalGraph {
            owner: 2,
            rated_items: vec![(5, 1.0), (6, 2.0), (7, 2.0), (8, 2.0)],
            neighbors: vec![0],
        },
    ];
    let hood = Neighborhood {
        graphs: &graphs,
        n_items: 12,
    };
    let pool = hood.pool(&graphs[0]);
    assert_eq!(pool, (1..=8).collect::<Vec<_>>());
    let trials = 10_000;
    for p in [1usize, 3] {
        let mut counts = [0usize; 12];
        for seed in 0..trials {
            let got = sample_pseudo_items(&graphs[0], &hood, p, &mut SimRng::new(seed as u64)).unwrap();
            let mut sorted = got.clone();
            sorted.dedup();
            assert_eq!(sorted.len(), p);
            for i in got {
                counts[i] += 1;
            }
        }
        assert_eq!(counts[0] + counts[9] + counts[10] + counts[11], 0);
        let q = p as f64 / pool.len() as f64;
        let se = (q * (1.0 - q) / trials as f64).sqrt();
        for &i in &pool {
            let f = counts[i] as f64 / trials as f64;
            assert!((f - q).abs() <= 3.0 * se, "item {i}: {f} vs {q}");
        }
    }
}

#[test]
fn inverse_cdf_against_integrated_density() {
    for p in [0.001, 0.025, 0.1, 0.3, 0.5, 4.0 / 7.0, 0.8, 0.975, 0.999] {
        let z = inverse_normal_cdf(p).unwrap();
        assert!((simpson_cdf(z) - p).abs() < 1e-9, "p {p}: z {z}");
    }
    assert!(inverse_normal_cdf(0.0).is_err());
    assert!(inverse_normal_cdf(1.0).is_err());
}

#[test]
fn lie_quantile_example() {
    // n = 10, m = 3: s = 3, quantile of 4/7.
    let z = lie_z(10, 3).unwrap();
    assert!((z - 0.180).abs() < 5e-4, "{z}");
    assert!((simpson_cdf(z) - 4.0 / 7.0).abs() < 1e-9);
}

#[test]
fn lie_outputs_identical_and_shifted() {
    let t = |x: f64| GradientBundle {
        item_grads: [(2, vec![x, 0.0])].into_iter().collect(),
        user_grads: BTreeMap::new(),
        model_grads: vec![x],
    };
    let out = lie_updates(&[t(1.0), t(3.0)], 10, 3).unwrap();
    assert_eq!(out.len(), 3);
    assert!(out.windows(2).all(|w| w[0] == w[1]));
    // mean 2, population std 1.
    let want = 2.0 - lie_z(10, 3).unwrap();
    assert!((out[0].model_grads[0] - want).abs() < 1e-12);
    assert!((out[0].item_grads[&2][0] - want).abs() < 1e-12);
}
