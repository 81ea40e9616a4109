mod common;

use common::{fd_max_relative_error, gaussian_params, random_batch, Targets};
use fssda_core::model::{self, ModelSpec, ParamVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gradient_error_over_instances(hidden_dim: usize, instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let d = rng.random_range(2..6);
        let c = rng.random_range(2..5);
        let spec = ModelSpec::new(d, hidden_dim, c).unwrap();
        let params = gaussian_params(&mut rng, spec, 0.5);
        let n = rng.random_range(1..8);
        let targets = if rng.random::<bool>() {
            Targets::Soft
        } else {
            Targets::Hard { fake_fraction: 0.5 }
        };
        let batch = random_batch(&mut rng, n, d, c, targets);
        let t = [1.0, 2.0, 4.0][rng.random_range(0..3)];
        worst = worst.max(fd_max_relative_error(&params, &batch, t));
    }
    worst
}

#[test]
fn linear_gradient_matches_finite_differences() {
    let err = gradient_error_over_instances(0, 100, 11);
    assert!(err < 1e-4, "max relative error {err:e}");
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let err = gradient_error_over_instances(3, 100, 12);
    assert!(err < 1e-4, "max relative error {err:e}");
}

#[test]
fn average_of_one_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = gaussian_params(&mut rng, ModelSpec::new(4, 2, 3).unwrap(), 1.0);
    assert_eq!(model::average_params(std::slice::from_ref(&p)).unwrap(), p);
}

fn params_strategy(k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 10), k)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        logits in prop::collection::vec(-50f64..50.0, 12),
        t in 0.1f64..100.0,
    ) {
        let z = ndarray::Array2::from_shape_vec((3, 4), logits).unwrap();
        let p = model::softmax_t(&z, t).unwrap();
        for row in p.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn fake_rows_contribute_nothing(
        probs in prop::collection::vec(0.01f64..1.0, 8),
    ) {
        let mut p = ndarray::Array2::from_shape_vec((2, 4), probs).unwrap();
        for mut row in p.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let zeros = ndarray::Array2::zeros((2, 4));
        prop_assert_eq!(model::cross_entropy(&zeros, &p).unwrap(), 0.0);
    }

    #[test]
    fn averaging_stays_within_bounds_and_ignores_order(
        locals in (1usize..6).prop_flat_map(params_strategy),
        weights_seed in any::<u64>(),
    ) {
        let spec = ModelSpec::linear(4, 2).unwrap();
        let vs: Vec<ParamVector> = locals
            .into_iter()
            .map(|v| ParamVector::from_vec(spec, v).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
        let weights: Vec<f64> = (0..vs.len()).map(|_| rng.random_range(0.1..5.0)).collect();
        let avg = model::weighted_average_params(&vs, &weights).unwrap();
        for i in 0..spec.num_params() {
            let lo = vs.iter().map(|p| p.values()[i]).fold(f64::INFINITY, f64::min);
            let hi = vs.iter().map(|p| p.values()[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= avg.values()[i] && avg.values()[i] <= hi);
        }
        let mut order: Vec<usize> = (0..vs.len()).collect();
        order.reverse();
        let rv: Vec<ParamVector> = order.iter().map(|&i| vs[i].clone()).collect();
        let rw: Vec<f64> = order.iter().map(|&i| weights[i]).collect();
        prop_assert_eq!(model::weighted_average_params(&rv, &rw).unwrap(), avg);
    }

    #[test]
    fn averaging_identical_params_is_exact(
        v in prop::collection::vec(-1e6f64..1e6, 10),
        k in 1usize..8,
    ) {
        let p = ParamVector::from_vec(ModelSpec::linear(4, 2).unwrap(), v).unwrap();
        let avg = model::average_params(&vec![p.clone(); k]).unwrap();
        prop_assert_eq!(avg, p);
    }
}
