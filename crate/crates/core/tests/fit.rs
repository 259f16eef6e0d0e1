mod common;

use common::{random_grid, random_mask, rng, Instance};
use dspn_core::dspn::{EmbeddingParams, OffsetEstimatorParams, OffsetField};
use dspn_core::gradcheck::{
    dspn_backward, finite_diff_grad, fit_loss_and_grad, toy_fit, DspnTape, FitConfig, FitParams,
    FitScene, OffsetModel,
};
use dspn_core::pipeline::{prepare_suite, SuiteConfig};
use dspn_core::synth::SceneSpec;
use dspn_core::{Error, Grid, KernelSize};
use rand::RngExt;

fn scenes(n: usize) -> Vec<FitScene> {
    let cfg = SuiteConfig {
        scene: SceneSpec {
            width: 12,
            height: 10,
            ..SceneSpec::default()
        },
        scenes: n,
        feature_dim: 6,
        ..SuiteConfig::default()
    };
    prepare_suite(&cfg)
        .unwrap()
        .into_iter()
        .map(|s| FitScene {
            coarse: s.coarse,
            sparse: s.sparse,
            mask: s.mask,
            confidence: s.confidence,
            features: s.features,
            ground_truth: s.ground_truth,
        })
        .collect()
}

fn estimator_params() -> FitParams {
    FitParams {
        embedding: EmbeddingParams::random(4, 6, 0.3, 1),
        offsets: OffsetModel::Estimator(OffsetEstimatorParams::new(6, 4, KernelSize::THREE, 2)),
    }
}

/// Zero offsets put every sample on the pixel lattice, where bilinear
/// sampling is not differentiable; these start off the lattice.
fn off_lattice_estimator_params() -> FitParams {
    let mut est = OffsetEstimatorParams::new(6, 4, KernelSize::THREE, 2);
    let mut v = est.to_vec();
    let mut r = rng(5);
    let n = v.len();
    let last = est.layers()[2].weight.len() + est.layers()[2].bias.len();
    for x in &mut v[n - last..] {
        *x = r.random_range(-0.05..0.05);
    }
    est.set_from_slice(&v).unwrap();
    FitParams {
        embedding: EmbeddingParams::random(4, 6, 0.3, 1),
        offsets: OffsetModel::Estimator(est),
    }
}

fn direct_params(s: &[FitScene]) -> FitParams {
    let mut r = rng(6);
    let fields = s
        .iter()
        .map(|_| {
            let n = 12 * 10 * 16;
            let data = (0..n)
                .map(|_| r.random_range(0.1..0.9) * if r.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            OffsetField::new(12, 10, KernelSize::THREE, data).unwrap()
        })
        .collect();
    FitParams {
        embedding: EmbeddingParams::random(4, 6, 0.3, 1),
        offsets: OffsetModel::Direct(fields),
    }
}

#[test]
fn zero_steps_is_rejected() {
    let s = scenes(2);
    let cfg = FitConfig {
        steps: 0,
        ..FitConfig::default()
    };
    assert!(matches!(
        toy_fit(&s, &estimator_params(), &cfg),
        Err(Error::InvalidConfig(_))
    ));
}

#[test]
fn one_step_moves_by_lr_times_gradient() {
    let s = scenes(2);
    for init in [estimator_params(), direct_params(&s)] {
        let cfg = FitConfig {
            steps: 1,
            lr: 0.3,
            ..FitConfig::default()
        };
        let (_, grad) = fit_loss_and_grad(&s, &init, &cfg).unwrap();
        let out = toy_fit(&s, &init, &cfg).unwrap();
        let before = init.flatten();
        let after = out.params.flatten();
        for ((a, b), g) in after.values.iter().zip(&before.values).zip(&grad.values) {
            assert_eq!(*a, b - 0.3 * g);
        }
        assert_eq!(out.loss_trace.len(), 2);
    }
}

#[test]
fn zero_learning_rate_keeps_params() {
    let s = scenes(2);
    let init = estimator_params();
    let out = toy_fit(
        &s,
        &init,
        &FitConfig {
            steps: 3,
            lr: 0.0,
            ..FitConfig::default()
        },
    )
    .unwrap();
    assert_eq!(out.params, init);
    assert!(out.loss_trace.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn fit_is_deterministic_and_reduces_loss() {
    let s = scenes(3);
    let cfg = FitConfig {
        steps: 5,
        lr: 0.5,
        ..FitConfig::default()
    };
    let a = toy_fit(&s, &estimator_params(), &cfg).unwrap();
    let b = toy_fit(&s, &estimator_params(), &cfg).unwrap();
    assert_eq!(a.loss_trace, b.loss_trace);
    assert_eq!(a.params, b.params);
    assert!(a.loss_trace.last().unwrap() < &a.loss_trace[0]);
}

#[test]
fn huge_learning_rate_diverges() {
    let s = scenes(2);
    let cfg = FitConfig {
        steps: 50,
        lr: 1e200,
        ..FitConfig::default()
    };
    let r = toy_fit(&s, &direct_params(&s), &cfg);
    assert!(matches!(r, Err(Error::Diverged { .. })), "{r:?}");
}

/// The full training gradient, including the offset estimator, against
/// central differences of the training loss.
#[test]
fn training_gradient_matches_finite_differences() {
    let s = scenes(2);
    for init in [off_lattice_estimator_params(), direct_params(&s)] {
        let cfg = FitConfig {
            iters: 2,
            ..FitConfig::default()
        };
        let (_, grad) = fit_loss_and_grad(&s, &init, &cfg).unwrap();
        let p = init.flatten();
        let numeric = finite_diff_grad(
            |v| Ok(fit_loss_and_grad(&s, &init.unflatten(v)?, &cfg)?.0),
            &p,
            1e-5,
        )
        .unwrap();
        let scale = grad.values.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for (a, f) in grad.values.iter().zip(&numeric.values) {
            assert!((a - f).abs() <= 1e-4 * scale.max(1e-8), "{a} vs {f}");
        }
    }
}

#[test]
fn state_jacobian_rows_sum_to_one() {
    for seed in 0..10 {
        let t = Instance::random(seed, KernelSize::THREE);
        let mut tape = DspnTape::new(&t.features, &t.offsets, &t.emb).unwrap();
        tape.step(&t.state).unwrap();
        for p in 0..t.w * t.h {
            let mut up = Grid::zeros(t.w, t.h, 1);
            up.data_mut()[p] = 1.0;
            let g = dspn_backward(&up, &tape).unwrap();
            let total: f64 = g.d_input.data().iter().sum();
            assert!((total - 1.0).abs() <= 1e-12, "seed {seed} pixel {p}");
        }
    }
}

#[test]
fn backward_of_refine_matches_finite_differences_in_state() {
    let mut r = rng(11);
    let t = Instance::random(5, KernelSize::THREE);
    let conf = random_grid(&mut r, t.w, t.h, 1, 0.0, 1.0);
    let m = random_mask(&mut r, t.w, t.h, 0.3);
    let c = random_grid(&mut r, t.w, t.h, 1, -1.0, 1.0);
    let loss = |d0: &Grid| -> f64 {
        let mut tape = DspnTape::new(&t.features, &t.offsets, &t.emb).unwrap();
        let out = tape.refine(d0, &t.sparse, &m, &conf, 3).unwrap();
        out.data().iter().zip(c.data()).map(|(o, w)| o * w).sum()
    };
    let mut tape = DspnTape::new(&t.features, &t.offsets, &t.emb).unwrap();
    tape.refine(&t.state, &t.sparse, &m, &conf, 3).unwrap();
    let g = tape.backward(&c).unwrap();
    for i in 0..t.state.data().len() {
        let h = 1e-5;
        let mut up = t.state.clone();
        up.data_mut()[i] += h;
        let mut down = t.state.clone();
        down.data_mut()[i] -= h;
        let fd = (loss(&up) - loss(&down)) / (2.0 * h);
        assert!((fd - g.d_input.data()[i]).abs() <= 1e-8, "pixel {i}");
    }
}

#[test]
fn full_replacement_blocks_state_gradient() {
    let t = Instance::random(8, KernelSize::THREE);
    let ones = Grid::filled(t.w, t.h, 1, 1.0);
    let mut tape = DspnTape::new(&t.features, &t.offsets, &t.emb).unwrap();
    let out = tape.refine(&t.state, &t.sparse, &ones, &ones, 2).unwrap();
    assert_eq!(out, t.sparse);
    let g = tape.backward(&ones).unwrap();
    assert!(g.d_input.data().iter().all(|&v| v == 0.0));
}
