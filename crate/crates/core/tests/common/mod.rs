//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ctxseg_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Nested-loop 3D convolution with zero padding.
pub fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let (bn, ci, d, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (co, k) = (ws[0], ws[2]);
    let out_dim = |n: usize| (n + 2 * pad - k) / stride + 1;
    let (od, oh, ow) = (out_dim(d), out_dim(h), out_dim(wd));
    let mut out = vec![0.0; bn * co * od * oh * ow];
    let at = |n: usize, c: usize, z: i64, y: i64, xx: i64| -> f64 {
        if z < 0 || y < 0 || xx < 0 || z >= d as i64 || y >= h as i64 || xx >= wd as i64 {
            return 0.0;
        }
        x.data()[(((n * ci + c) * d + z as usize) * h + y as usize) * wd + xx as usize]
    };
    for n in 0..bn {
        for o in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[o]);
                        for c in 0..ci {
                            for i in 0..k {
                                for j in 0..k {
                                    for l in 0..k {
                                        let wv = w.data()[(((o * ci + c) * k + i) * k + j) * k + l];
                                        let zz = (z * stride + i) as i64 - pad as i64;
                                        let yy = (y * stride + j) as i64 - pad as i64;
                                        let x3 = (xx * stride + l) as i64 - pad as i64;
                                        acc += wv * at(n, c, zz, yy, x3);
                                    }
                                }
                            }
                        }
                        out[(((n * co + o) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(&[bn, co, od, oh, ow], out).unwrap()
}

/// Literal transcription of the convolutional mean-field loop body.
/// Returns `(H_g, H_c, A)` after one pass.
pub fn algorithm_step(h_g: &Tensor, h_c: &Tensor, x_c: &Tensor, w: &Tensor) -> (Tensor, Tensor, Tensor) {
    let pad = w.shape()[2] / 2;
    let conv = conv_oracle(h_g, w, None, 1, pad);
    let n = h_c.len();
    let mut a_hat = vec![0.0; n];
    for i in 0..n {
        a_hat[i] = h_c.data()[i] * conv.data()[i];
    }
    let mut a_bar = vec![0.0; n];
    for i in 0..n {
        a_bar[i] = 1.0 / (1.0 + a_hat[i].exp());
    }
    let new_g = conv;
    let mut h_bar = vec![0.0; n];
    for i in 0..n {
        h_bar[i] = a_bar[i] * new_g.data()[i];
    }
    let mut new_c = vec![0.0; n];
    for i in 0..n {
        new_c[i] = x_c.data()[i] + h_bar[i];
    }
    let s = h_c.shape();
    (new_g, Tensor::new(s, new_c).unwrap(), Tensor::new(s, a_bar).unwrap())
}

/// Explicit double sum over voxels `n` and kernel neighbours `m`:
/// `sum a_m * h_c[n] * K[n, m] * h_g[m]`, channel by channel.
pub fn pairwise_oracle(h_c: &Tensor, h_g: &Tensor, a: &Tensor, w: &Tensor) -> f64 {
    let s = h_c.shape();
    let (c, d, h, wd) = (s[1], s[2], s[3], s[4]);
    let k = w.shape()[2];
    let r = (k / 2) as i64;
    let idx = |ch: usize, z: usize, y: usize, x: usize| ((ch * d + z) * h + y) * wd + x;
    let mut total = 0.0;
    for o in 0..c {
        for z in 0..d {
            for y in 0..h {
                for x in 0..wd {
                    let hc = h_c.data()[idx(o, z, y, x)];
                    for i in 0..c {
                        for dz in -r..=r {
                            for dy in -r..=r {
                                for dx in -r..=r {
                                    let (mz, my, mx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                                    if mz < 0 || my < 0 || mx < 0 || mz >= d as i64 || my >= h as i64 || mx >= wd as i64 {
                                        continue;
                                    }
                                    let m = idx(i, mz as usize, my as usize, mx as usize);
                                    let tap = (((o * c + i) * k + (dz + r) as usize) * k + (dy + r) as usize) * k + (dx + r) as usize;
                                    total += a.data()[m] * hc * w.data()[tap] * h_g.data()[m];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    total
}

/// Central finite differences of `f` at `x` with step `h`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise relative error. Entries far below the gradient's
/// own scale are compared against `1e-3` of that scale instead of their
/// own magnitude.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * scale.max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Voxels of `mask` with a 6-neighbour outside it or on the volume border.
pub fn surface_oracle(mask: &[bool], e: [usize; 3]) -> Vec<[f64; 3]> {
    let mut out = Vec::new();
    for z in 0..e[0] {
        for y in 0..e[1] {
            for x in 0..e[2] {
                if !mask[(z * e[1] + y) * e[2] + x] {
                    continue;
                }
                let p = [z as i64, y as i64, x as i64];
                let mut interior = 0;
                for a in 0..3 {
                    for s in [-1i64, 1] {
                        let mut q = p;
                        q[a] += s;
                        let inside = (0..3).all(|b| q[b] >= 0 && q[b] < e[b] as i64);
                        if inside && mask[((q[0] as usize) * e[1] + q[1] as usize) * e[2] + q[2] as usize] {
                            interior += 1;
                        }
                    }
                }
                if interior < 6 {
                    out.push([z as f64, y as f64, x as f64]);
                }
            }
        }
    }
    out
}

/// All-pairs nearest-rank 95th percentile of the symmetric surface distance.
pub fn hd95_oracle(p: &[bool], t: &[bool], e: [usize; 3], spacing: [f64; 3]) -> f64 {
    let (sp, st) = (surface_oracle(p, e), surface_oracle(t, e));
    let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| {
        let mut d: Vec<f64> = from
            .iter()
            .map(|a| {
                to.iter()
                    .map(|b| (0..3).map(|i| ((a[i] - b[i]) * spacing[i]).powi(2)).sum::<f64>().sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        d.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let rank = (95 * d.len()).div_ceil(100);
        d[rank.max(1) - 1]
    };
    directed(&sp, &st).max(directed(&st, &sp))
}

/// Compares tape gradients of `f` with respect to every input against
/// central differences; returns the worst relative error.
pub fn tape_grad_err(inputs: &[Tensor], h: f64, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let value = |ts: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ts.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs);
        t.value(o).data()[0]
    };
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).unwrap().data().to_vec();
        let numeric = numeric_grad(x.data(), h, |p| {
            let mut ts = inputs.to_vec();
            ts[i] = Tensor::new(x.shape(), p.to_vec()).unwrap();
            value(&ts)
        });
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

/// `sum(y * r)` for a fixed pseudo-random `r`, a generic scalar readout.
pub fn readout(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let r = random(tape.shape(y), &mut rng(seed));
    let r = tape.constant(r);
    let p = tape.mul(y, r).unwrap();
    tape.sum(p).unwrap()
}
