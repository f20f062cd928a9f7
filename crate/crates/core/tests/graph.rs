mod common;

use common::*;
use ctxseg_core::graph::{GraphLayout, GraphParams, InteractionGraph, ProjectedFeatures};
use ctxseg_core::ops::trilinear_sample;
use ctxseg_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

const E: [usize; 3] = [4, 5, 3];

fn graph(seed: u64) -> (InteractionGraph, Tensor) {
    let mut r = rng(seed);
    let layout = GraphLayout::lattice(E, [2, 2, 1], 1).unwrap();
    let mut p = GraphParams::init(3, 2, 2, &layout, &mut r).unwrap();
    p.sample_weights = random(p.sample_weights.shape(), &mut r);
    p.affinity = random(p.affinity.shape(), &mut r);
    let f = random(&[3, E[0], E[1], E[2]], &mut r);
    (InteractionGraph::new(layout, p).unwrap(), f)
}

/// `x_n = sum_m w_nm A_nm f'(anchor_n + o_m + d_nm)` with `f' = P f`.
fn projection_oracle(g: &InteractionGraph, f: &Tensor, shift: impl Fn(usize, usize) -> [f64; 3]) -> Vec<f64> {
    let p = &g.params;
    let (cp, c) = (p.input_proj.shape()[0], p.input_proj.shape()[1]);
    let n_vox: usize = E.iter().product();
    let mut mixed = vec![0.0; cp * n_vox];
    for o in 0..cp {
        for i in 0..c {
            for v in 0..n_vox {
                mixed[o * n_vox + v] += p.input_proj.data()[o * c + i] * f.data()[i * n_vox + v];
            }
        }
    }
    let mixed = Tensor::new(&[cp, E[0], E[1], E[2]], mixed).unwrap();
    let (k, m) = (g.layout.nodes(), g.layout.neighbors());
    let mut out = vec![0.0; k * cp];
    for n in 0..k {
        for j in 0..m {
            let (a, o, d) = (g.layout.anchors()[n], g.layout.neighborhood()[j], shift(n, j));
            let s = &trilinear_sample(&mixed, &[[0, 1, 2].map(|i| a[i] + o[i] + d[i])]).unwrap()[0];
            let coef = p.sample_weights.data()[n * m + j] * p.affinity.data()[n * m + j];
            for ch in 0..cp {
                out[n * cp + ch] += coef * s[ch];
            }
        }
    }
    out
}

#[test]
fn naive_projection_matches_oracle() {
    for seed in 0..5 {
        let (g, f) = graph(seed);
        let got = g.project_naive(&f).unwrap();
        assert_eq!(got.0.shape(), [4, 2]);
        assert!(max_abs_diff(got.0.data(), &projection_oracle(&g, &f, |_, _| [0.0; 3])) < 1e-12);
    }
}

#[test]
fn bias_only_offsets_shift_samples() {
    let (mut g, f) = graph(10);
    let m = g.layout.neighbors();
    let mut r = rng(11);
    let b: Vec<f64> = (0..g.layout.nodes() * m * 3).map(|_| r.random_range(-0.7..0.7)).collect();
    g.params.offset_b = Tensor::new(g.params.offset_b.shape(), b.clone()).unwrap();
    let got = g.project_adaptive(&f).unwrap();
    let want = projection_oracle(&g, &f, |n, j| [0, 1, 2].map(|i| b[(n * m + j) * 3 + i]));
    assert!(max_abs_diff(got.0.data(), &want) < 1e-12);
}

#[test]
fn reprojection_rows_are_convex() {
    let layout = GraphLayout::lattice([6, 6, 6], [2, 3, 1], 1).unwrap();
    let w = layout.reprojection_weights();
    assert_eq!(w.shape(), [216, 6]);
    for row in w.data().chunks(6) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn layouts_reject_bad_lattices() {
    assert!(GraphLayout::lattice(E, [5, 1, 1], 1).is_err());
    assert!(GraphLayout::lattice(E, [0, 1, 1], 1).is_err());
    let (g, _) = graph(0);
    assert!(g.project_naive(&Tensor::zeros(&[3, 4, 5, 4]).unwrap()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zero_offsets_reduce_to_naive(seed in 0u64..100_000) {
        let (g, f) = graph(seed);
        let (a, n) = (g.project_adaptive(&f).unwrap(), g.project_naive(&f).unwrap());
        prop_assert!(max_abs_diff(a.0.data(), n.0.data()) <= 1e-12);
    }

    #[test]
    fn plain_reasoning_is_sigmoid(seed in 0u64..100_000) {
        let (g, _) = graph(seed);
        let x = random(&[4, 2], &mut rng(seed + 1)).scale(5.0).unwrap();
        let y = g.graph_reason(&ProjectedFeatures(x.clone())).unwrap();
        prop_assert!(y.0.data().iter().zip(x.data()).all(|(a, b)| (a - 1.0 / (1.0 + (-b).exp())).abs() <= 1e-12));
    }

    #[test]
    fn constant_nodes_reproject_to_constants(seed in 0u64..100_000, c in -3.0f64..3.0) {
        let (g, _) = graph(seed);
        let out = g.reproject(&ProjectedFeatures(Tensor::full(&[4, 2], c).unwrap()), E).unwrap();
        let p = &g.params.output_proj;
        for (o, plane) in out.data().chunks(60).enumerate() {
            let want = c * (p.data()[o * 2] + p.data()[o * 2 + 1]);
            prop_assert!(plane.iter().all(|v| (v - want).abs() <= 1e-12));
        }
    }
}
