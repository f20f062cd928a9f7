//! Feature-interaction graph branch.
//!
//! Backbone features are mixed to the interaction width `C'`, sampled around
//! `K` anchor nodes (optionally at learned displacements), aggregated into
//! node features, passed through one residual graph-convolution step
//! `sigmoid((I - A) X W)`, and finally spread back onto the voxel grid.
//!
//! All coordinates are `(d, h, w)` in voxel units of the feature grid.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::Stencil;
use crate::tape::{Tape, Var};
use crate::tensor::{split4, Tensor};

/// Spatial layout of the graph: anchors and their sampling neighborhood.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphLayout {
    extent: [usize; 3],
    anchors: Vec<[f64; 3]>,
    neighborhood: Vec<[f64; 3]>,
}

impl GraphLayout {
    /// Explicit anchors; each must lie inside `extent`.
    pub fn new(extent: [usize; 3], anchors: Vec<[f64; 3]>, neighborhood: Vec<[f64; 3]>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::Config("interaction graph needs at least one node".into()));
        }
        if neighborhood.is_empty() {
            return Err(Error::Config("sampling neighborhood must not be empty".into()));
        }
        if extent.contains(&0) {
            return Err(Error::Config(format!("feature extent {extent:?} has a zero axis")));
        }
        for (n, a) in anchors.iter().enumerate() {
            let inside = a
                .iter()
                .zip(&extent)
                .all(|(&c, &e)| c.is_finite() && c >= 0.0 && c <= (e - 1) as f64);
            if !inside {
                return Err(Error::Config(format!(
                    "anchor {n} at {a:?} lies outside feature volume {extent:?}"
                )));
            }
        }
        if neighborhood.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Config("neighborhood offsets must be finite".into()));
        }
        Ok(GraphLayout {
            extent,
            anchors,
            neighborhood,
        })
    }

    /// Anchors on a regular `lattice` spanning `extent`, each sampling the
    /// `(2r+1)^3` integer offsets within `radius`.
    pub fn lattice(extent: [usize; 3], lattice: [usize; 3], radius: usize) -> Result<Self> {
        for a in 0..3 {
            if lattice[a] == 0 || lattice[a] > extent[a] {
                return Err(Error::Config(format!(
                    "graph lattice {lattice:?} does not fit feature extent {extent:?}"
                )));
            }
        }
        let pos = |i: usize, a: usize| ((i as f64 + 0.5) * extent[a] as f64 / lattice[a] as f64).floor();
        let mut anchors = Vec::new();
        for i in 0..lattice[0] {
            for j in 0..lattice[1] {
                for k in 0..lattice[2] {
                    anchors.push([pos(i, 0), pos(j, 1), pos(k, 2)]);
                }
            }
        }
        let r = radius as i64;
        let mut neighborhood = Vec::new();
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    neighborhood.push([dz as f64, dy as f64, dx as f64]);
                }
            }
        }
        Self::new(extent, anchors, neighborhood)
    }

    pub fn extent(&self) -> [usize; 3] {
        self.extent
    }

    pub fn anchors(&self) -> &[[f64; 3]] {
        &self.anchors
    }

    pub fn neighborhood(&self) -> &[[f64; 3]] {
        &self.neighborhood
    }

    pub fn nodes(&self) -> usize {
        self.anchors.len()
    }

    pub fn neighbors(&self) -> usize {
        self.neighborhood.len()
    }

    fn voxels(&self) -> usize {
        self.extent.iter().product()
    }

    /// Undeformed sampling positions, node-major: `[K * M, 3]`.
    pub fn base_points(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.nodes() * self.neighbors() * 3);
        for a in &self.anchors {
            for o in &self.neighborhood {
                out.extend((0..3).map(|i| a[i] + o[i]));
            }
        }
        out
    }

    /// Voxel-to-node weights `[N, K]`, rows non-negative and summing to one.
    ///
    /// Each node's undeformed sampling stencil is transposed onto the grid.
    /// Voxels that no stencil touches fall back to their nearest anchor.
    pub fn reprojection_weights(&self) -> Tensor {
        let (n_vox, k) = (self.voxels(), self.nodes());
        let mut w = vec![0.0; n_vox * k];
        for (n, a) in self.anchors.iter().enumerate() {
            for o in &self.neighborhood {
                let p = [a[0] + o[0], a[1] + o[1], a[2] + o[2]];
                for (v, wt) in Stencil::new(p, self.extent).corners() {
                    w[v * k + n] += wt;
                }
            }
        }
        let [_, eh, ew] = self.extent;
        for v in 0..n_vox {
            let row = &mut w[v * k..][..k];
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|x| *x /= total);
                continue;
            }
            let pos = [(v / (eh * ew)) as f64, ((v / ew) % eh) as f64, (v % ew) as f64];
            let dist = |a: &[f64; 3]| (0..3).map(|i| (a[i] - pos[i]).powi(2)).sum::<f64>();
            let nearest = (0..k)
                .min_by(|&i, &j| dist(&self.anchors[i]).total_cmp(&dist(&self.anchors[j])))
                .unwrap();
            row[nearest] = 1.0;
        }
        Tensor::from_parts(vec![n_vox, k], w)
    }
}

/// Learned tensors of the graph branch.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphParams {
    /// `[C', C]` mixing from backbone width to interaction width.
    pub input_proj: Tensor,
    /// `[C_out, C']` mixing from interaction width to the fusion width.
    pub output_proj: Tensor,
    /// `[K, M]` combination weights over each node's neighborhood.
    pub sample_weights: Tensor,
    /// `[K, M]` node-to-neighbor affinities.
    pub affinity: Tensor,
    /// `[K, M*3, C']` displacement weights, one 3-vector per neighbor.
    pub offset_w: Tensor,
    /// `[K, M*3]` displacement biases.
    pub offset_b: Tensor,
    /// `[K, K]` learned adjacency, applied as `I - A`.
    pub adjacency: Tensor,
    /// `[C', C']` node feature transform.
    pub node_weights: Tensor,
}

impl GraphParams {
    /// Random channel projections; uniform sample weights, unit affinity,
    /// zero displacement, zero adjacency and identity node weights.
    pub fn init(c_in: usize, c_out: usize, node_dim: usize, layout: &GraphLayout, rng: &mut impl Rng) -> Result<Self> {
        let (k, m) = (layout.nodes(), layout.neighbors());
        let normal = |fan_in: usize| Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("std > 0");
        let din = normal(c_in);
        let dout = normal(node_dim);
        let input_proj = Tensor::from_fn(&[node_dim, c_in], |_| din.sample(rng))?;
        let output_proj = Tensor::from_fn(&[c_out, node_dim], |_| dout.sample(rng))?;
        Ok(GraphParams {
            input_proj,
            output_proj,
            sample_weights: Tensor::full(&[k, m], 1.0 / m as f64)?,
            affinity: Tensor::ones(&[k, m])?,
            offset_w: Tensor::zeros(&[k, m * 3, node_dim])?,
            offset_b: Tensor::zeros(&[k, m * 3])?,
            adjacency: Tensor::zeros(&[k, k])?,
            node_weights: identity(node_dim),
        })
    }

    pub fn node_dim(&self) -> usize {
        self.node_weights.shape()[0]
    }

    /// Checks every tensor against the layout and channel widths.
    pub fn validate(&self, layout: &GraphLayout) -> Result<()> {
        let (k, m, cp) = (layout.nodes(), layout.neighbors(), self.node_dim());
        let c_in = self.input_proj.shape().get(1).copied().unwrap_or(0);
        let c_out = self.output_proj.shape().first().copied().unwrap_or(0);
        let expect: [(&str, &Tensor, Vec<usize>); 8] = [
            ("input_proj", &self.input_proj, vec![cp, c_in]),
            ("output_proj", &self.output_proj, vec![c_out, cp]),
            ("sample_weights", &self.sample_weights, vec![k, m]),
            ("affinity", &self.affinity, vec![k, m]),
            ("offset_w", &self.offset_w, vec![k, m * 3, cp]),
            ("offset_b", &self.offset_b, vec![k, m * 3]),
            ("adjacency", &self.adjacency, vec![k, k]),
            ("node_weights", &self.node_weights, vec![cp, cp]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("graph", name, format!("{shape:?}"), format!("{:?}", t.shape())));
            }
        }
        Ok(())
    }

    /// Tensors in [`PARAM_NAMES`] order.
    pub fn into_tensors(self) -> [Tensor; 8] {
        [
            self.input_proj,
            self.output_proj,
            self.sample_weights,
            self.affinity,
            self.offset_w,
            self.offset_b,
            self.adjacency,
            self.node_weights,
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> GraphVars {
        GraphVars {
            input_proj: tape.param(self.input_proj.clone()),
            output_proj: tape.param(self.output_proj.clone()),
            sample_weights: tape.param(self.sample_weights.clone()),
            affinity: tape.param(self.affinity.clone()),
            offset_w: tape.param(self.offset_w.clone()),
            offset_b: tape.param(self.offset_b.clone()),
            adjacency: tape.param(self.adjacency.clone()),
            node_weights: tape.param(self.node_weights.clone()),
        }
    }
}

pub(crate) fn identity(n: usize) -> Tensor {
    Tensor::from_parts(vec![n, n], (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect())
}

/// The graph parameters bound as tape leaves.
/// Field names of [`GraphParams`], in [`GraphParams::into_tensors`] order.
pub const PARAM_NAMES: [&str; 8] = [
    "input_proj",
    "output_proj",
    "sample_weights",
    "affinity",
    "offset_w",
    "offset_b",
    "adjacency",
    "node_weights",
];

#[derive(Clone, Copy, Debug)]
pub struct GraphVars {
    pub input_proj: Var,
    pub output_proj: Var,
    pub sample_weights: Var,
    pub affinity: Var,
    pub offset_w: Var,
    pub offset_b: Var,
    pub adjacency: Var,
    pub node_weights: Var,
}

impl GraphVars {
    /// Handles for parameters stored in [`PARAM_NAMES`] order at `slots`.
    pub fn from_slots(slots: &[usize; 8], vars: &[Var]) -> Self {
        let v = |i: usize| vars[slots[i]];
        GraphVars {
            input_proj: v(0),
            output_proj: v(1),
            sample_weights: v(2),
            affinity: v(3),
            offset_w: v(4),
            offset_b: v(5),
            adjacency: v(6),
            node_weights: v(7),
        }
    }
}

/// Mixes `[C, D, H, W]` features to `[C', D, H, W]`.
fn to_interaction_space(tape: &mut Tape, features: Var, vars: &GraphVars, layout: &GraphLayout) -> Result<Var> {
    let (c, extent) = split4("graph projection", tape.shape(features))?;
    if extent != layout.extent {
        return Err(Error::dim(
            "graph projection",
            "spatial",
            format!("{:?}", layout.extent),
            format!("{extent:?}"),
        ));
    }
    let x = tape.reshape(features, &[1, c, extent[0], extent[1], extent[2]])?;
    let mixed = tape.conv1x1(x, vars.input_proj, None)?;
    let cp = tape.shape(mixed)[1];
    tape.reshape(mixed, &[cp, extent[0], extent[1], extent[2]])
}

/// `x_n = sum_m w_nm * A_nm * s_nm` where `s` holds `[K*M, C']` samples.
fn aggregate(tape: &mut Tape, samples: Var, vars: &GraphVars, layout: &GraphLayout) -> Result<Var> {
    let (k, m) = (layout.nodes(), layout.neighbors());
    let cp = tape.shape(samples)[1];
    let coef = tape.mul(vars.sample_weights, vars.affinity)?;
    let coef = tape.reshape(coef, &[k, 1, m])?;
    let s = tape.reshape(samples, &[k, m, cp])?;
    let agg = tape.matmul(coef, s)?;
    tape.reshape(agg, &[k, cp])
}

/// Node features from undeformed neighborhood samples; returns `[K, C']`.
pub fn project_naive(tape: &mut Tape, features: Var, vars: &GraphVars, layout: &GraphLayout) -> Result<Var> {
    let f = to_interaction_space(tape, features, vars, layout)?;
    let n = layout.nodes() * layout.neighbors();
    let coords = tape.constant(Tensor::from_parts(vec![n, 3], layout.base_points()));
    let samples = tape.trilinear_sample(f, coords)?;
    aggregate(tape, samples, vars, layout)
}

/// Node features from samples displaced by `dm = W_nm x_n + b_nm`, where
/// `x_n` is the interaction-space feature at the node's anchor.
pub fn project_adaptive(tape: &mut Tape, features: Var, vars: &GraphVars, layout: &GraphLayout) -> Result<Var> {
    let f = to_interaction_space(tape, features, vars, layout)?;
    let (k, m) = (layout.nodes(), layout.neighbors());
    let cp = tape.shape(f)[0];
    let anchors = tape.constant(Tensor::from_parts(
        vec![k, 3],
        layout.anchors.iter().flatten().copied().collect(),
    ));
    let at_anchor = tape.trilinear_sample(f, anchors)?;
    let x = tape.reshape(at_anchor, &[k, cp, 1])?;
    let disp = tape
        .matmul(vars.offset_w, x)
        .and_then(|d| tape.reshape(d, &[k, m * 3]))
        .and_then(|d| tape.add(d, vars.offset_b))
        .map_err(|e| match e {
            Error::Numeric(_) => locate_bad_displacement(tape, vars, at_anchor, k, m, cp),
            other => other,
        })?;
    let disp = tape.reshape(disp, &[k * m, 3])?;
    let base = tape.constant(Tensor::from_parts(vec![k * m, 3], layout.base_points()));
    let coords = tape.add(base, disp)?;
    let samples = tape.trilinear_sample(f, coords)?;
    aggregate(tape, samples, vars, layout)
}

fn locate_bad_displacement(tape: &Tape, vars: &GraphVars, x: Var, k: usize, m: usize, cp: usize) -> Error {
    let (w, b, x) = (tape.value(vars.offset_w).data(), tape.value(vars.offset_b).data(), tape.value(x).data());
    for n in 0..k {
        for r in 0..m * 3 {
            let d: f64 = (0..cp).map(|c| w[(n * m * 3 + r) * cp + c] * x[n * cp + c]).sum::<f64>() + b[n * m * 3 + r];
            if !d.is_finite() {
                return Error::Input(format!("node {n}: non-finite displacement for neighbor {}", r / 3));
            }
        }
    }
    Error::Input("non-finite displacement".into())
}

/// One residual graph-convolution step: `sigmoid((I - A) X W)`.
pub fn graph_reason(tape: &mut Tape, projected: Var, vars: &GraphVars) -> Result<Var> {
    let xw = tape.matmul(projected, vars.node_weights)?;
    let axw = tape.matmul(vars.adjacency, xw)?;
    let pre = tape.sub(xw, axw)?;
    tape.sigmoid(pre)
}

/// Spreads `[K, C']` node features onto the grid as `[C_out, D, H, W]`.
pub fn reproject(tape: &mut Tape, nodes: Var, vars: &GraphVars, layout: &GraphLayout) -> Result<Var> {
    let k = layout.nodes();
    if tape.shape(nodes).first() != Some(&k) {
        return Err(Error::dim("reproject", "nodes", k, format!("{:?}", tape.shape(nodes))));
    }
    let proj_t = tape.transpose(vars.output_proj)?;
    let mapped = tape.matmul(nodes, proj_t)?;
    let c = tape.shape(mapped)[1];
    let weights = tape.constant(layout.reprojection_weights());
    let grid = tape.matmul(weights, mapped)?;
    let grid = tape.transpose(grid)?;
    let [d, h, w] = layout.extent;
    tape.reshape(grid, &[c, d, h, w])
}

/// Full branch: adaptive projection, reasoning, re-projection.
pub fn graph_branch(tape: &mut Tape, features: Var, vars: &GraphVars, layout: &GraphLayout, adaptive: bool) -> Result<Var> {
    let projected = if adaptive {
        project_adaptive(tape, features, vars, layout)?
    } else {
        project_naive(tape, features, vars, layout)?
    };
    let reasoned = graph_reason(tape, projected, vars)?;
    reproject(tape, reasoned, vars, layout)
}

/// Node features `X^PROJ`, exactly `K` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedFeatures(pub Tensor);

/// Layout plus parameters, for evaluation outside a training tape.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionGraph {
    pub layout: GraphLayout,
    pub params: GraphParams,
}

impl InteractionGraph {
    pub fn new(layout: GraphLayout, params: GraphParams) -> Result<Self> {
        params.validate(&layout)?;
        Ok(InteractionGraph { layout, params })
    }

    fn run(&self, f: impl FnOnce(&mut Tape, &GraphVars) -> Result<Var>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).clone())
    }

    pub fn project_naive(&self, features: &Tensor) -> Result<ProjectedFeatures> {
        self.run(|t, v| {
            let x = t.constant(features.clone());
            project_naive(t, x, v, &self.layout)
        })
        .map(ProjectedFeatures)
    }

    pub fn project_adaptive(&self, features: &Tensor) -> Result<ProjectedFeatures> {
        self.run(|t, v| {
            let x = t.constant(features.clone());
            project_adaptive(t, x, v, &self.layout)
        })
        .map(ProjectedFeatures)
    }

    pub fn graph_reason(&self, projected: &ProjectedFeatures) -> Result<ProjectedFeatures> {
        self.run(|t, v| {
            let x = t.constant(projected.0.clone());
            graph_reason(t, x, v)
        })
        .map(ProjectedFeatures)
    }

    /// `out_shape` must equal the layout's feature extent.
    pub fn reproject(&self, nodes: &ProjectedFeatures, out_shape: [usize; 3]) -> Result<Tensor> {
        if out_shape != self.layout.extent {
            return Err(Error::dim(
                "reproject",
                "out_shape",
                format!("{:?}", self.layout.extent),
                format!("{out_shape:?}"),
            ));
        }
        self.run(|t, v| {
            let x = t.constant(nodes.0.clone());
            reproject(t, x, v, &self.layout)
        })
    }

    pub fn forward(&self, features: &Tensor, adaptive: bool) -> Result<Tensor> {
        self.run(|t, v| {
            let x = t.constant(features.clone());
            graph_branch(t, x, v, &self.layout, adaptive)
        })
    }
}
