mod common;

use common::*;
use ctxseg_core::ops::{conv1x1, conv3d, resize, softmax, trilinear_sample, ConvKernel};
use ctxseg_core::Tensor;
use proptest::prelude::*;

const H: f64 = 1e-5;

#[test]
fn primitive_gradients() {
    let mut r = rng(100);
    let checks: Vec<(&str, f64)> = vec![
        ("conv3d stride 1", tape_grad_err(&[random(&[2, 2, 3, 4, 3], &mut r), random(&[2, 2, 3, 3, 3], &mut r)], H, |t, v| {
            let y = t.conv3d(v[0], v[1], None, 1, 1).unwrap();
            readout(t, y, 1)
        })),
        ("conv1x1", tape_grad_err(&[random(&[1, 3, 2, 3, 2], &mut r), random(&[2, 3], &mut r), random(&[2], &mut r)], H, |t, v| {
            let y = t.conv1x1(v[0], v[1], Some(v[2])).unwrap();
            readout(t, y, 2)
        })),
        ("matmul", tape_grad_err(&[random(&[3, 4], &mut r), random(&[4, 2], &mut r)], H, |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            let y = t.transpose(y).unwrap();
            readout(t, y, 3)
        })),
        ("softmax", tape_grad_err(&[random(&[2, 4, 3], &mut r)], H, |t, v| {
            let y = t.softmax(v[0], 1).unwrap();
            readout(t, y, 4)
        })),
        ("group_norm", tape_grad_err(&[random(&[1, 4, 2, 3, 2], &mut r), random(&[4], &mut r), random(&[4], &mut r)], H, |t, v| {
            let y = t.group_norm(v[0], v[1], v[2], 2).unwrap();
            readout(t, y, 5)
        })),
        ("resize", tape_grad_err(&[random(&[1, 2, 2, 3, 2], &mut r)], H, |t, v| {
            let y = t.resize(v[0], [4, 5, 3]).unwrap();
            readout(t, y, 6)
        })),
        ("sigmoid and mul", tape_grad_err(&[random(&[5, 2], &mut r), random(&[5, 2], &mut r)], H, |t, v| {
            let s = t.sigmoid(v[0]).unwrap();
            let y = t.mul(s, v[1]).unwrap();
            readout(t, y, 7)
        })),
        ("concat and mean", tape_grad_err(&[random(&[1, 1, 2, 2, 2], &mut r), random(&[1, 2, 2, 2, 2], &mut r)], H, |t, v| {
            let c = t.concat_channels(v[0], v[1]).unwrap();
            let y = t.mul(c, c).unwrap();
            t.mean(y).unwrap()
        })),
        ("bound_kernel", tape_grad_err(&[random(&[2, 2, 3, 3, 3], &mut r)], H, |t, v| {
            let y = t.bound_kernel(v[0], 0.9).unwrap();
            readout(t, y, 8)
        })),
    ];
    for (name, err) in checks {
        assert!(err < 1e-6, "{name}: {err:.2e}");
    }
}

#[test]
fn nll_gradient() {
    let mut r = rng(101);
    let targets = [0, 2, 1, 1, 0, 2];
    let err = tape_grad_err(&[random(&[1, 3, 6], &mut r)], H, |t, v| {
        let p = t.softmax(v[0], 1).unwrap();
        t.nll_mean(p, &targets).unwrap()
    });
    assert!(err < 1e-6, "{err:.2e}");
}

#[test]
fn conv_rejects_bad_geometry() {
    let x = Tensor::zeros(&[1, 2, 3, 3, 3]).unwrap();
    let k = ConvKernel::same(Tensor::zeros(&[1, 3, 3, 3, 3]).unwrap(), None).unwrap();
    assert!(conv3d(&x, &k).is_err());
    assert!(ConvKernel::new(Tensor::zeros(&[1, 1, 5, 5, 5]).unwrap(), None, 1, 1).and_then(|k| conv3d(&x, &k)).is_err());
    assert!(conv1x1(&x, &Tensor::zeros(&[2, 3]).unwrap()).is_err());
}

#[test]
fn dirac_kernel_is_identity() {
    let x = random(&[1, 3, 4, 3, 5], &mut rng(102));
    assert_eq!(conv3d(&x, &ConvKernel::dirac(3, 3).unwrap()).unwrap(), x);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_loops(seed in 0u64..100_000, k in 1usize..=3, stride in 1usize..=2, pad in 0usize..=2, ci in 1usize..=3, co in 1usize..=3) {
        prop_assume!(pad < k.max(2));
        let mut r = rng(seed);
        let x = random(&[1, ci, 4, 5, 3], &mut r);
        let w = random(&[co, ci, k, k, k], &mut r);
        let b = random(&[co], &mut r);
        let got = conv3d(&x, &ConvKernel::new(w.clone(), Some(b.clone()), stride, pad).unwrap()).unwrap();
        let want = conv_oracle(&x, &w, Some(&b), stride, pad);
        prop_assert_eq!(got.shape(), want.shape());
        prop_assert!(max_abs_diff(got.data(), want.data()) <= 1e-12);
    }

    #[test]
    fn conv_is_linear(seed in 0u64..100_000, a in -2.0f64..2.0) {
        let mut r = rng(seed);
        let (x, y) = (random(&[1, 2, 3, 3, 3], &mut r), random(&[1, 2, 3, 3, 3], &mut r));
        let k = ConvKernel::same(random(&[2, 2, 3, 3, 3], &mut r), None).unwrap();
        let lhs = conv3d(&x.scale(a).unwrap().add(&y).unwrap(), &k).unwrap();
        let rhs = conv3d(&x, &k).unwrap().scale(a).unwrap().add(&conv3d(&y, &k).unwrap()).unwrap();
        prop_assert!(max_abs_diff(lhs.data(), rhs.data()) <= 1e-12);
    }

    #[test]
    fn sampling_at_grid_points_reads_voxels(seed in 0u64..100_000, z in 0usize..3, y in 0usize..4, x in 0usize..2) {
        let v = random(&[2, 3, 4, 2], &mut rng(seed));
        let got = trilinear_sample(&v, &[[z as f64, y as f64, x as f64]]).unwrap();
        for c in 0..2 {
            prop_assert_eq!(got[0][c], v.get(&[c, z, y, x]));
        }
    }

    #[test]
    fn sampling_is_affine_in_each_axis(seed in 0u64..100_000, t in 0.0f64..1.0) {
        let v = random(&[1, 3, 3, 3], &mut rng(seed));
        let s = |p: [f64; 3]| trilinear_sample(&v, &[p]).unwrap()[0][0];
        let (a, b) = (s([1.0, 0.5, 1.2]), s([2.0, 0.5, 1.2]));
        prop_assert!((s([1.0 + t, 0.5, 1.2]) - (a + t * (b - a))).abs() <= 1e-12);
    }

    #[test]
    fn resize_keeps_constants(seed in 0u64..1000, d in 1usize..6, h in 1usize..6, w in 1usize..6) {
        let c = (seed % 7) as f64 - 3.0;
        let x = Tensor::full(&[1, 2, 3, 2, 4], c).unwrap();
        let y = resize(&x, [d, h, w]).unwrap();
        prop_assert!(y.data().iter().all(|v| (v - c).abs() < 1e-12));
        prop_assert_eq!(resize(&x, [3, 2, 4]).unwrap(), x);
    }

    #[test]
    fn softmax_is_a_distribution(seed in 0u64..100_000, shift in -50.0f64..50.0) {
        let x = random(&[2, 4, 5], &mut rng(seed)).scale(10.0).unwrap();
        let p = softmax(&x, 1).unwrap();
        let q = softmax(&x.map(|v| v + shift).unwrap(), 1).unwrap();
        prop_assert!(max_abs_diff(p.data(), q.data()) <= 1e-12);
        for b in 0..2 {
            for i in 0..5 {
                let s: f64 = (0..4).map(|c| p.get(&[b, c, i])).sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }
}
