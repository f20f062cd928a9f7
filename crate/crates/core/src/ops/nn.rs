//! Activations, softmax, group normalization and dense matrix products.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest double below one; sigmoid outputs are kept inside `(0, 1)`.
const SIGMOID_HI: f64 = 1.0 - f64::EPSILON / 2.0;

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, SIGMOID_HI)
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map_unchecked(sigmoid_scalar)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map_unchecked(|v| v.max(0.0))
}

/// `(outer, axis, inner)` strides for reductions along `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim("softmax", "axis", format!("< {}", shape.len()), axis));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

pub(crate) fn softmax_forward(data: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let m = (0..n).map(|k| data[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..n {
                let e = (data[at(k)] - m).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..n {
                out[at(k)] /= z;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward(y: &[f64], gy: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let dot: f64 = (0..n).map(|k| y[at(k)] * gy[at(k)]).sum();
            for k in 0..n {
                gx[at(k)] = y[at(k)] * (gy[at(k)] - dot);
            }
        }
    }
    gx
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_split(input.shape(), axis)?;
    Ok(Tensor::from_parts(
        input.shape().to_vec(),
        softmax_forward(input.data(), outer, n, inner),
    ))
}

pub(crate) const GN_EPS: f64 = 1e-5;

/// Saved statistics of a group-norm forward pass.
#[derive(Clone, Debug)]
pub(crate) struct GroupNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) struct GroupGeom {
    pub batch: usize,
    pub channels: usize,
    pub groups: usize,
    pub plane: usize,
}

impl GroupGeom {
    pub fn new(shape: &[usize], groups: usize) -> Result<Self> {
        if shape.len() < 3 {
            return Err(Error::dim("group_norm", "rank", ">= 3", shape.len()));
        }
        if groups == 0 || shape[1] % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {} channels not divisible into {groups} groups",
                shape[1]
            )));
        }
        Ok(GroupGeom {
            batch: shape[0],
            channels: shape[1],
            groups,
            plane: shape[2..].iter().product(),
        })
    }

    fn span(&self) -> usize {
        self.channels / self.groups * self.plane
    }
}

pub(crate) fn group_norm_forward(
    g: &GroupGeom,
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, GroupNormCache) {
    let span = g.span();
    let cpg = g.channels / g.groups;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; g.batch * g.groups];
    let mut y = vec![0.0; x.len()];
    for bg in 0..g.batch * g.groups {
        let xs = &x[bg * span..][..span];
        let mean = xs.iter().sum::<f64>() / span as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / span as f64;
        let r = 1.0 / (var + GN_EPS).sqrt();
        rstd[bg] = r;
        let first_channel = (bg % g.groups) * cpg;
        for (j, &v) in xs.iter().enumerate() {
            let c = first_channel + j / g.plane;
            let h = (v - mean) * r;
            xhat[bg * span + j] = h;
            y[bg * span + j] = gamma[c] * h + beta[c];
        }
    }
    (y, GroupNormCache { xhat, rstd })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn group_norm_backward(
    g: &GroupGeom,
    cache: &GroupNormCache,
    gamma: &[f64],
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let span = g.span();
    let cpg = g.channels / g.groups;
    let mut dx = vec![0.0; gy.len()];
    let mut dgamma = vec![0.0; g.channels];
    let mut dbeta = vec![0.0; g.channels];
    for bg in 0..g.batch * g.groups {
        let first_channel = (bg % g.groups) * cpg;
        let xh = &cache.xhat[bg * span..][..span];
        let go = &gy[bg * span..][..span];
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for j in 0..span {
            let c = first_channel + j / g.plane;
            dgamma[c] += go[j] * xh[j];
            dbeta[c] += go[j];
            let d = go[j] * gamma[c];
            sum_d += d;
            sum_dx += d * xh[j];
        }
        let n = span as f64;
        let r = cache.rstd[bg];
        for j in 0..span {
            let c = first_channel + j / g.plane;
            let d = go[j] * gamma[c];
            dx[bg * span + j] = r / n * (n * d - sum_d - xh[j] * sum_dx);
        }
    }
    (dx, dgamma, dbeta)
}

/// Batched product `[bt, m, k] x [bt, k, n] -> [bt, m, n]`.
pub(crate) fn bmm(a: &[f64], b: &[f64], bt: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; bt * m * n];
    for t in 0..bt {
        let (a, b) = (&a[t * m * k..][..m * k], &b[t * k * n..][..k * n]);
        let o = &mut out[t * m * n..][..m * n];
        for i in 0..m {
            let row = &mut o[i * n..][..n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (r, &bv) in row.iter_mut().zip(&b[p * n..][..n]) {
                    *r += av * bv;
                }
            }
        }
    }
    out
}

/// Per-batch transpose of `[bt, r, c]`.
pub(crate) fn transpose_batched(x: &[f64], bt: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for t in 0..bt {
        for i in 0..r {
            for j in 0..c {
                out[t * r * c + j * r + i] = x[t * r * c + i * c + j];
            }
        }
    }
    out
}

/// Dense `[m, k] x [k, n]` product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 {
        return Err(Error::dim("matmul", "rank", 2, format!("{} and {}", sa.len(), sb.len())));
    }
    if sa[1] != sb[0] {
        return Err(Error::dim("matmul", "inner", sa[1], sb[0]));
    }
    Tensor::new(&[sa[0], sb[1]], bmm(a.data(), b.data(), 1, sa[0], sa[1], sb[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_basics() {
        let t = Tensor::new(&[3], vec![0.0, 800.0, -800.0]).unwrap();
        let s = sigmoid(&t);
        assert_eq!(s.data()[0], 0.5);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn softmax_constant_and_extreme() {
        let t = Tensor::full(&[1, 5, 2], 3.3).unwrap();
        let s = softmax(&t, 1).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let t = Tensor::new(&[2], vec![1000.0, 0.0]).unwrap();
        let s = softmax(&t, 0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1].abs() < 1e-12);
        assert!(softmax(&t, 1).is_err());
    }

    #[test]
    fn group_norm_normalizes() {
        let g = GroupGeom::new(&[1, 4, 3], 2).unwrap();
        let x: Vec<f64> = (0..12).map(|i| (i as f64).powi(2)).collect();
        let (y, _) = group_norm_forward(&g, &x, &[1.0; 4], &[0.0; 4]);
        for grp in y.chunks(6) {
            let m = grp.iter().sum::<f64>() / 6.0;
            let v = grp.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 6.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
        assert!(GroupGeom::new(&[1, 3, 3], 2).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(&[3, 1], vec![1.0, 0.0, -1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[-2.0, -2.0]);
        assert!(matmul(&b, &b).is_err());
    }
}
