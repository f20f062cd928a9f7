mod common;

use common::*;
use ctxseg_core::crf::{
    attention_neg_entropy, bound_kernel, energy, equation_form_step, free_energy, fuse, gain_bound, init_state, mf_step,
    pairwise_energy, unary_energy, CrfConfig,
};
use ctxseg_core::ops::{conv3d, ConvKernel};
use ctxseg_core::Tensor;
use proptest::prelude::*;

fn setup(seed: u64, c: usize, e: [usize; 3], gain: f64) -> (Tensor, Tensor, Tensor) {
    let mut r = rng(seed);
    let shape = [1, c, e[0], e[1], e[2]];
    let x_c = random(&shape, &mut r);
    let x_g = random(&shape, &mut r);
    let w = random(&[c, c, 3, 3, 3], &mut r).map(|v| gain * v).unwrap();
    (x_c, x_g, w)
}

#[test]
fn pairwise_energy_matches_double_sum() {
    for seed in 0..10 {
        let (x_c, x_g, w) = setup(seed, 2, [3, 4, 2], 0.5);
        let cfg = CrfConfig::from_weights(2, w.clone()).unwrap();
        let state = fuse(&x_c, &x_g, &cfg).unwrap().final_state;
        let got = pairwise_energy(&state, cfg.kernel()).unwrap();
        let want = pairwise_oracle(&state.h_c, &state.h_g, &state.attention, &w);
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn energy_terms_match_their_formulas() {
    let (x_c, x_g, w) = setup(20, 2, [3, 3, 3], 0.4);
    let cfg = CrfConfig::from_weights(3, w.clone()).unwrap();
    let f = fuse(&x_c, &x_g, &cfg).unwrap();
    let s = &f.final_state;
    let half_sq = |a: &Tensor, b: &Tensor| -0.5 * a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    assert!((unary_energy(&s.h_c, &x_c).unwrap() - half_sq(&s.h_c, &x_c)).abs() < 1e-12);
    let e = energy(s, &x_c, &x_g, cfg.kernel()).unwrap();
    assert!((e.unary_g - half_sq(&s.h_g, &x_g)).abs() < 1e-12);
    assert!((e.total - (e.unary_g + e.unary_c + e.pairwise)).abs() < 1e-12);
    let entropy: f64 = s.attention.data().iter().map(|&a| a * a.ln() + (1.0 - a) * (1.0 - a).ln()).sum();
    assert!((attention_neg_entropy(&s.attention) - entropy).abs() < 1e-10);
    let fe = free_energy(s, &x_c, &x_g, cfg.kernel()).unwrap();
    assert!((fe - (e.total + entropy)).abs() < 1e-10);
    assert_eq!(f.free_energy.len(), 3);
    assert_eq!(*f.free_energy.last().unwrap(), fe);
}

#[test]
fn five_then_two_steps_equal_seven() {
    let (x_c, x_g, w) = setup(30, 2, [4, 3, 3], 0.3);
    let seven = fuse(&x_c, &x_g, &CrfConfig::from_weights(7, w.clone()).unwrap()).unwrap();
    let cfg = CrfConfig::from_weights(7, w).unwrap();
    let mut s = fuse(&x_c, &x_g, &cfg.with_iterations(5).unwrap()).unwrap().final_state;
    for _ in 0..2 {
        s = mf_step(&s, &x_c, &x_g, &cfg).unwrap();
    }
    assert_eq!(s, seven.final_state);
    assert_eq!(s.iteration, 7);
    // The configured count is a hard limit.
    assert!(mf_step(&s, &x_c, &x_g, &cfg).is_err());
}

#[test]
fn equation_form_agrees_at_first_step_without_convolution_input() {
    let (_, x_g, w) = setup(40, 2, [3, 3, 4], 0.5);
    let x_c = Tensor::zeros(x_g.shape()).unwrap();
    let cfg = CrfConfig::from_weights(1, w).unwrap();
    let s0 = init_state(&x_c, &x_g).unwrap();
    let loop_step = mf_step(&s0, &x_c, &x_g, &cfg).unwrap();
    let eq = equation_form_step(&s0, &x_c, &x_g, cfg.kernel()).unwrap();
    // H_c = 0 makes every attention 0.5, so both forms pass K conv (0.5 H_g)
    // to the convolution features.
    assert!(max_abs_diff(loop_step.attention.data(), eq.attention.data()) < 1e-12);
    assert!(max_abs_diff(loop_step.h_c.data(), eq.h_c.data()) < 1e-12);
    let half = conv3d(&x_g, cfg.kernel()).unwrap().map(|v| 0.5 * v).unwrap();
    assert!(max_abs_diff(eq.h_c.data(), half.data()) < 1e-12);
    assert_eq!(eq.h_g, x_g);
}

#[test]
fn deltas_track_fused_state() {
    let (x_c, x_g, w) = setup(50, 1, [4, 4, 4], 0.2);
    let f = fuse(&x_c, &x_g, &CrfConfig::from_weights(4, w).unwrap()).unwrap();
    assert_eq!(f.deltas.len(), 4);
    assert_eq!(f.fused, f.final_state.h_c);
    assert!(f.deltas.iter().all(|d| d.is_finite() && *d >= 0.0));
}

#[test]
fn rejects_mismatched_inputs() {
    let (x_c, _, w) = setup(60, 2, [3, 3, 3], 1.0);
    let other = Tensor::zeros(&[1, 2, 3, 3, 4]).unwrap();
    let cfg = CrfConfig::from_weights(1, w).unwrap();
    assert!(fuse(&x_c, &other, &cfg).is_err());
    assert!(CrfConfig::from_weights(0, Tensor::zeros(&[2, 2, 3, 3, 3]).unwrap()).is_err());
    assert!(CrfConfig::from_weights(1, Tensor::zeros(&[2, 3, 3, 3, 3]).unwrap()).is_err());
}

/// Power iteration on the zero-padded convolution.
fn measured_gain(w: &Tensor, e: [usize; 3]) -> f64 {
    let c = w.shape()[1];
    let k = ConvKernel::same(w.clone(), None).unwrap();
    let mut x = random(&[1, c, e[0], e[1], e[2]], &mut rng(7));
    let mut g = 0.0;
    for _ in 0..50 {
        let y = conv3d(&x, &k).unwrap();
        let n = y.sum_squares().sqrt();
        g = n / x.sum_squares().sqrt();
        x = y.map(|v| v / n).unwrap();
    }
    g
}

#[test]
fn bound_kernel_leaves_small_kernels_alone() {
    let (_, _, w) = setup(70, 2, [2, 2, 2], 0.01);
    assert!(gain_bound(&w) < 0.9);
    assert_eq!(bound_kernel(&w, 0.9), w);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bounded_kernels_contract(seed in 0u64..1000, scale in 0.05f64..4.0, c in 1usize..=2) {
        let (_, _, w) = setup(seed, c, [2, 2, 2], scale);
        let b = bound_kernel(&w, 0.9);
        prop_assert!(gain_bound(&b) <= 0.9 + 1e-12);
        prop_assert!(measured_gain(&b, [5, 4, 5]) <= gain_bound(&b) + 1e-9);
        // Direction is preserved.
        let ratio = b.data()[0] / w.data()[0];
        prop_assert!(b.data().iter().zip(w.data()).all(|(x, y)| (x - ratio * y).abs() < 1e-12));
    }

    #[test]
    fn zero_kernel_is_neutral(seed in 0u64..1000, iters in 1usize..=6) {
        let (x_c, x_g, _) = setup(seed, 2, [2, 3, 2], 1.0);
        let cfg = CrfConfig::from_weights(iters, Tensor::zeros(&[2, 2, 3, 3, 3]).unwrap()).unwrap();
        let f = fuse(&x_c, &x_g, &cfg).unwrap();
        prop_assert_eq!(&f.fused, &x_c);
        prop_assert!(f.final_state.h_g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_matches_literal_loop(seed in 0u64..10_000, gain in 0.1f64..1.5) {
        let (x_c, x_g, w) = setup(seed, 2, [3, 2, 3], gain);
        let cfg = CrfConfig::from_weights(1, w.clone()).unwrap();
        let s = mf_step(&init_state(&x_c, &x_g).unwrap(), &x_c, &x_g, &cfg).unwrap();
        let (hg, hc, a) = algorithm_step(&x_g, &x_c, &x_c, &w);
        prop_assert!(max_abs_diff(s.h_g.data(), hg.data()) <= 1e-12);
        prop_assert!(max_abs_diff(s.h_c.data(), hc.data()) <= 1e-12);
        prop_assert!(max_abs_diff(s.attention.data(), a.data()) <= 1e-12);
    }
}
