mod common;

use inrct::network::{MlpConfig, MlpGrads, MlpParams};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn projection_gradients_match_finite_differences() {
    let (mut enc, mut mlp) = (Vec::new(), Vec::new());
    for seed in 0..8 {
        let p = common::grad_problem(seed);
        let (e, m) = p.check(15, seed + 100);
        enc.extend(e);
        mlp.extend(m);
    }
    for (name, mut errs) in [("encoder", enc), ("mlp", mlp)] {
        let max = errs.iter().cloned().fold(0.0, f64::max);
        let med = common::median(&mut errs);
        assert!(med < 1e-6 && max < 1e-3, "{name}: median {med:e}, max {max:e}");
    }
}

#[test]
fn mlp_input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = MlpConfig::new(6, 3, 16, 0.05);
    let mut params = MlpParams::<f64>::init(cfg, 3).unwrap();
    params.biases.iter_mut().for_each(|b| b.mapv_inplace(|_| rng.random_range(-0.1..0.1)));
    params.touch();
    let x = Array2::from_shape_fn((4, 6), |_| rng.random_range(-1.0..1.0));
    let up = [0.3, -1.2, 0.7, 2.0];
    let (_, cache) = params.forward_batch(x.clone()).unwrap();
    let mut g = MlpGrads::zeros_like(&params);
    let dx = params.backward_batch(&cache, &up, &mut g).unwrap();
    let loss = |x: &Array2<f64>| -> f64 {
        let (y, _) = params.forward_batch(x.clone()).unwrap();
        y.iter().zip(&up).map(|(a, b)| a * b).sum()
    };
    let h = 1e-6;
    let mut errs = Vec::new();
    for i in 0..4 {
        for j in 0..6 {
            let mut p = x.clone();
            p[[i, j]] += h;
            let mut m = x.clone();
            m[[i, j]] -= h;
            errs.push(common::rel_err(dx[[i, j]], (loss(&p) - loss(&m)) / (2.0 * h)));
        }
    }
    let max = errs.iter().cloned().fold(0.0, f64::max);
    assert!(common::median(&mut errs) < 1e-6 && max < 1e-3, "max {max:e}");
}

#[test]
fn stale_cache_rejected() {
    let cfg = MlpConfig::new(2, 1, 4, 0.05);
    let mut params = MlpParams::<f64>::init(cfg, 3).unwrap();
    let (_, cache) = params.forward(&[0.1, 0.2]).unwrap();
    params.touch();
    let mut g = MlpGrads::zeros_like(&params);
    assert!(matches!(params.backward(&cache, 1.0, &mut g), Err(inrct::Error::StaleCache { .. })));
}

#[test]
fn quadrature_is_second_order() {
    let e = common::quadrature_errors(&[0.8, 0.4, 0.2, 0.1]);
    for w in e.windows(2) {
        let ratio = w[0] / w[1];
        assert!((ratio - 4.0).abs() <= 1.0, "errors {e:?}");
    }
}
