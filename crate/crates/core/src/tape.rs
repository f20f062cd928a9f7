//! Define-by-run reverse-mode differentiation.
//!
//! Every operation on a [`Tape`] evaluates eagerly and appends a node, so the
//! node list is always in a valid topological order. [`Tape::backward`] walks
//! it once in reverse and only carries gradients along nodes that depend on a
//! trainable leaf.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::conv::{self, ConvGeom, MixGeom};
use crate::ops::nn::{self, GroupGeom, GroupNormCache};
use crate::ops::sample::{self, ResizePlan};
use crate::tensor::{split4, split5, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    GainBound(Var, f64),
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Conv1x1 {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: MixGeom,
    },
    Bmm {
        a: Var,
        b: Var,
        dims: [usize; 4],
    },
    Transpose {
        x: Var,
        dims: [usize; 3],
    },
    Softmax {
        x: Var,
        split: (usize, usize, usize),
    },
    NllMean {
        probs: Var,
        targets: Vec<usize>,
        split: (usize, usize, usize),
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        geom: GroupGeom,
        cache: GroupNormCache,
    },
    Sample {
        volume: Var,
        coords: Var,
        channels: usize,
        extent: [usize; 3],
    },
    Resize {
        x: Var,
        plan: Box<ResizePlan>,
        planes: usize,
    },
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        inner_a: usize,
        inner_b: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    trainable: bool,
}

/// Recorded computation graph with its values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of every trainable leaf, keyed by the leaf's [`Var`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }
}

fn finite(op: &'static str, data: Vec<f64>) -> Result<Vec<f64>> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{op} produced non-finite value at flat index {i}")));
    }
    Ok(data)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_data(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        let data = finite(op_name, data)?;
        Ok(self.push(Tensor::from_parts(shape, data), op, inputs))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            trainable: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf; no gradient is ever materialized for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(op_name, "shape", format!("{:?}", va.shape()), format!("{:?}", vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        self.push_data(op_name, shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x * factor).collect();
        let shape = v.shape().to_vec();
        self.push_data("scale", shape, data, Op::Scale(a, factor), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = nn::sigmoid(self.value(a));
        Ok(self.push(out, Op::Sigmoid(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = nn::relu(self.value(a));
        Ok(self.push(out, Op::Relu(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push_data("sum", vec![], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.sum() / v.len() as f64;
        self.push_data("mean", vec![], vec![s], Op::Mean(a), &[a])
    }

    /// Squared Frobenius norm.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum_squares();
        self.push_data("sum_squares", vec![], vec![s], Op::SumSquares(a), &[a])
    }

    /// Convolution weights rescaled into a gain bound; see
    /// [`crate::crf::bound_kernel`].
    pub fn bound_kernel(&mut self, w: Var, bound: f64) -> Result<Var> {
        let out = crate::crf::bound_kernel(self.value(w), bound);
        Ok(self.push(out, Op::GainBound(w, bound), &[w]))
    }

    /// 3D convolution of `[B, Cin, D, H, W]` with `[Cout, Cin, k, k, k]`
    /// weights and optional `[Cout]` bias.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Config("convolution stride must be >= 1".into()));
        }
        let ws = self.shape(w);
        if ws.len() == 5 && (ws[2] != ws[3] || ws[3] != ws[4]) {
            return Err(Error::dim("conv3d", "kernel", "cubic", format!("{ws:?}")));
        }
        let geom = ConvGeom::new(self.shape(x), ws, stride, pad)?;
        let bias = match b {
            Some(b) => {
                if self.shape(b) != [geom.cout] {
                    return Err(Error::dim("conv3d", "bias", geom.cout, format!("{:?}", self.shape(b))));
                }
                Some(self.value(b).data())
            }
            None => None,
        };
        let out = conv::conv3d_forward(&geom, self.value(x).data(), self.value(w).data(), bias);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push_data("conv3d", geom.out_shape(), out, Op::Conv3d { x, w, b, geom }, &inputs)
    }

    /// Channel mixing of `[B, Cin, ...]` by `[Cout, Cin]` weights.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let geom = MixGeom::new(self.shape(x), self.shape(w))?;
        let bias = match b {
            Some(b) => {
                if self.shape(b) != [geom.cout] {
                    return Err(Error::dim("conv1x1", "bias", geom.cout, format!("{:?}", self.shape(b))));
                }
                Some(self.value(b).data())
            }
            None => None,
        };
        let out = conv::mix_forward(&geom, self.value(x).data(), self.value(w).data(), bias);
        let shape = geom.out_shape(self.shape(x));
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push_data("conv1x1", shape, out, Op::Conv1x1 { x, w, b, geom }, &inputs)
    }

    /// `[m, k] x [k, n]` or batched `[t, m, k] x [t, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (bt, m, k, k2, n) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[0], sb[1]),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[1], sb[2]),
            _ => return Err(Error::dim("matmul", "rank", format!("{sa:?}"), format!("{sb:?}"))),
        };
        if k != k2 {
            return Err(Error::dim("matmul", "inner", k, k2));
        }
        let out = nn::bmm(self.value(a).data(), self.value(b).data(), bt, m, k, n);
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![bt, m, n] };
        self.push_data("matmul", shape, out, Op::Bmm { a, b, dims: [bt, m, k, n] }, &[a, b])
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (bt, r, c) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            n => return Err(Error::dim("transpose", "rank", "2 or 3", n)),
        };
        let out = nn::transpose_batched(self.value(x).data(), bt, r, c);
        let shape = if s.len() == 2 { vec![c, r] } else { vec![bt, c, r] };
        Ok(self.push(Tensor::from_parts(shape, out), Op::Transpose { x, dims: [bt, r, c] }, &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let split = nn::axis_split(self.shape(x), axis)?;
        let out = nn::softmax_forward(self.value(x).data(), split.0, split.1, split.2);
        let shape = self.shape(x).to_vec();
        self.push_data("softmax", shape, out, Op::Softmax { x, split }, &[x])
    }

    /// Mean negative log-likelihood of `targets` (one class index per
    /// position) under probabilities laid out with classes on axis 1.
    pub fn nll_mean(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(probs);
        let split = nn::axis_split(s, 1)?;
        let (outer, classes, inner) = split;
        if targets.len() != outer * inner {
            return Err(Error::dim("nll_mean", "targets", outer * inner, targets.len()));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Input(format!("class index {t} out of range for {classes} classes")));
        }
        let p = self.value(probs).data();
        let loss = targets
            .iter()
            .enumerate()
            .map(|(pos, &t)| {
                let (o, i) = (pos / inner, pos % inner);
                -p[(o * classes + t) * inner + i].max(f64::MIN_POSITIVE).ln()
            })
            .sum::<f64>()
            / targets.len() as f64;
        let op = Op::NllMean {
            probs,
            targets: targets.to_vec(),
            split,
        };
        self.push_data("nll_mean", vec![], vec![loss], op, &[probs])
    }

    /// Group normalization over `[B, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let geom = GroupGeom::new(self.shape(x), groups)?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [geom.channels] {
                return Err(Error::dim("group_norm", name, geom.channels, format!("{:?}", self.shape(v))));
            }
        }
        let (out, cache) = nn::group_norm_forward(
            &geom,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let shape = self.shape(x).to_vec();
        let op = Op::GroupNorm {
            x,
            gamma,
            beta,
            geom,
            cache,
        };
        self.push_data("group_norm", shape, out, op, &[x, gamma, beta])
    }

    /// Trilinear sample of a `[C, D, H, W]` volume at `[P, 3]` coordinates,
    /// differentiable in both; returns `[P, C]`.
    pub fn trilinear_sample(&mut self, volume: Var, coords: Var) -> Result<Var> {
        let (channels, extent) = split4("trilinear_sample", self.shape(volume))?;
        let cs = self.shape(coords);
        if cs.len() != 2 || cs[1] != 3 {
            return Err(Error::dim("trilinear_sample", "coords", "[P, 3]", format!("{cs:?}")));
        }
        let pts = sample::check_coords(self.value(coords).data())?;
        let out = sample::sample_forward(self.value(volume).data(), channels, extent, &pts);
        let op = Op::Sample {
            volume,
            coords,
            channels,
            extent,
        };
        self.push_data("trilinear_sample", vec![pts.len(), channels], out, op, &[volume, coords])
    }

    /// Trilinear resize of `[B, C, D, H, W]` to new spatial extents.
    pub fn resize(&mut self, x: Var, out: [usize; 3]) -> Result<Var> {
        let (b, c, inp) = split5("resize", self.shape(x))?;
        if inp == out {
            return Ok(x);
        }
        let plan = ResizePlan::new(inp, out);
        let data = plan.forward(self.value(x).data(), b * c);
        let op = Op::Resize {
            x,
            plan: Box::new(plan),
            planes: b * c,
        };
        Ok(self.push(Tensor::from_parts(vec![b, c, out[0], out[1], out[2]], data), op, &[x]))
    }

    /// Concatenates along axis 1; all other axes must agree.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::dim("concat_channels", "shape", format!("{sa:?}"), format!("{sb:?}")));
        }
        let outer = sa[0];
        let plane: usize = sa[2..].iter().product();
        let (inner_a, inner_b) = (sa[1] * plane, sb[1] * plane);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            out.extend_from_slice(&da[o * inner_a..][..inner_a]);
            out.extend_from_slice(&db[o * inner_b..][..inner_b]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let op = Op::Concat {
            a,
            b,
            outer,
            inner_a,
            inner_b,
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, &[a, b]))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns a gradient for every trainable leaf on the tape; leaves the
    /// loss does not depend on receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if node.trainable {
                    out.grads.insert(Var(id), Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.trainable && !out.grads.contains_key(&Var(id)) {
                out.grads.insert(Var(id), Tensor::from_parts(node.value.shape().to_vec(), vec![0.0; node.value.len()]));
            }
        }
        for (v, g) in &out.grads {
            if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("gradient of leaf {} is non-finite at index {i}", v.0)));
            }
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => add_into(existing, &contrib),
                slot => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, f) => acc(*a, g.iter().map(|x| x * f).collect()),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, g.iter().zip(y).map(|(gi, s)| gi * s * (1.0 - s)).collect());
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, g.iter().zip(x).map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 }).collect());
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::SumSquares(a) => acc(*a, val(*a).iter().map(|x| 2.0 * x * g[0]).collect()),
            Op::GainBound(w, bound) => acc(*w, crate::crf::bound_kernel_grad(&self.nodes[w.0].value, *bound, g)),
            Op::Conv3d { x, w, b, geom } => {
                if self.wants(*x) {
                    acc(*x, conv::conv3d_grad_input(geom, g, val(*w)));
                }
                let want_b = b.is_some_and(|b| self.wants(b));
                if self.wants(*w) || want_b {
                    let (gw, gb) = conv::conv3d_grad_weights(geom, g, val(*x));
                    acc(*w, gw);
                    if let Some(b) = b {
                        acc(*b, gb);
                    }
                }
            }
            Op::Conv1x1 { x, w, b, geom } => {
                if self.wants(*x) {
                    acc(*x, conv::mix_grad_input(geom, g, val(*w)));
                }
                let want_b = b.is_some_and(|b| self.wants(b));
                if self.wants(*w) || want_b {
                    let (gw, gb) = conv::mix_grad_weights(geom, g, val(*x));
                    acc(*w, gw);
                    if let Some(b) = b {
                        acc(*b, gb);
                    }
                }
            }
            Op::Bmm { a, b, dims: [bt, m, k, n] } => {
                let (bt, m, k, n) = (*bt, *m, *k, *n);
                if self.wants(*a) {
                    let bt_t = nn::transpose_batched(val(*b), bt, k, n);
                    acc(*a, nn::bmm(g, &bt_t, bt, m, n, k));
                }
                if self.wants(*b) {
                    let at = nn::transpose_batched(val(*a), bt, m, k);
                    acc(*b, nn::bmm(&at, g, bt, k, m, n));
                }
            }
            Op::Transpose { x, dims: [bt, r, c] } => {
                acc(*x, nn::transpose_batched(g, *bt, *c, *r));
            }
            Op::Softmax { x, split: (o, n, i) } => {
                acc(*x, nn::softmax_backward(node.value.data(), g, *o, *n, *i));
            }
            Op::NllMean {
                probs,
                targets,
                split: (_, classes, inner),
            } => {
                let p = val(*probs);
                let mut gp = vec![0.0; p.len()];
                let scale = g[0] / targets.len() as f64;
                for (pos, &t) in targets.iter().enumerate() {
                    let at = ((pos / inner) * classes + t) * inner + pos % inner;
                    if p[at] > f64::MIN_POSITIVE {
                        gp[at] = -scale / p[at];
                    }
                }
                acc(*probs, gp);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                geom,
                cache,
            } => {
                let (dx, dgamma, dbeta) = nn::group_norm_backward(geom, cache, val(*gamma), g);
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Sample {
                volume,
                coords,
                channels,
                extent,
            } => {
                let pts: Vec<[f64; 3]> = val(*coords).chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
                let (gv, gc) = sample::sample_backward(
                    val(*volume),
                    *channels,
                    *extent,
                    &pts,
                    g,
                    self.wants(*volume),
                    self.wants(*coords),
                );
                if self.wants(*volume) {
                    acc(*volume, gv);
                }
                if self.wants(*coords) {
                    acc(*coords, gc);
                }
            }
            Op::Resize { x, plan, planes } => acc(*x, plan.backward(g, *planes)),
            Op::Concat {
                a,
                b,
                outer,
                inner_a,
                inner_b,
            } => {
                let (ia, ib) = (*inner_a, *inner_b);
                if self.wants(*a) {
                    acc(*a, (0..*outer).flat_map(|o| g[o * (ia + ib)..][..ia].to_vec()).collect());
                }
                if self.wants(*b) {
                    acc(*b, (0..*outer).flat_map(|o| g[o * (ia + ib) + ia..][..ib].to_vec()).collect());
                }
            }
        }
    }
}
