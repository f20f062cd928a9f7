//! The end-to-end segmentation network: backbone, graph branch, fusion and
//! classifier, evaluated one case at a time on a tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, BackboneSlots, LossReport};
use crate::crf;
use crate::data::CaseRecord;
use crate::error::{Error, Result};
use crate::graph::{self, GraphLayout, GraphParams, GraphVars};
use crate::metrics::LabelVolume;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub node_dim: usize,
    /// Node anchors per axis on the bottom feature map.
    pub lattice: [usize; 3],
    /// Half-width of each node's sampling cube.
    pub radius: usize,
    /// Learned sampling offsets; `false` samples the undeformed cube.
    pub adaptive: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            node_dim: 8,
            lattice: [2, 2, 2],
            radius: 1,
            adaptive: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    /// Attention-gated mean-field CRF.
    #[default]
    Crf,
    /// Channel concatenation of the two context maps.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrfSettings {
    pub iterations: usize,
    pub kernel_size: usize,
    /// Standard deviation of the initial pairwise kernel.
    pub init_std: f64,
    /// Largest gain bound the effective pairwise kernel may have; the
    /// learned weights are rescaled into it at every forward pass.
    pub gain_bound: f64,
}

impl Default for CrfSettings {
    fn default() -> Self {
        CrfSettings {
            iterations: crf::DEFAULT_ITERATIONS,
            kernel_size: crf::DEFAULT_KERNEL_SIZE,
            init_std: 0.02,
            gain_bound: 0.9,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub graph: GraphConfig,
    pub crf: CrfSettings,
    pub fusion: FusionKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let g = &self.graph;
        if g.node_dim == 0 || g.lattice.contains(&0) {
            return Err(Error::Config("graph.node_dim and graph.lattice must be positive".into()));
        }
        if self.crf.iterations == 0 {
            return Err(Error::Config("crf.iterations must be >= 1".into()));
        }
        if self.crf.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("crf.kernel_size {} must be odd", self.crf.kernel_size)));
        }
        if !(self.crf.init_std.is_finite() && self.crf.init_std >= 0.0) {
            return Err(Error::Config(format!("crf.init_std {} must be >= 0", self.crf.init_std)));
        }
        if !(self.crf.gain_bound > 0.0) {
            return Err(Error::Config(format!("crf.gain_bound {} must be > 0", self.crf.gain_bound)));
        }
        Ok(())
    }

    /// Rejects input extents the network cannot process.
    pub fn check_extent(&self, extent: [usize; 3]) -> Result<()> {
        self.backbone.check_extent(extent)?;
        let bottom = self.backbone.stage_extent(extent, self.backbone.stages() - 1);
        if (0..3).any(|a| self.graph.lattice[a] > bottom[a]) {
            return Err(Error::Config(format!(
                "graph lattice {:?} is finer than the bottom map {bottom:?}",
                self.graph.lattice
            )));
        }
        Ok(())
    }

    pub fn layout(&self, extent: [usize; 3]) -> Result<GraphLayout> {
        self.check_extent(extent)?;
        let bottom = self.backbone.stage_extent(extent, self.backbone.stages() - 1);
        GraphLayout::lattice(bottom, self.graph.lattice, self.graph.radius)
    }
}

/// Parameter slots of the whole model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSlots {
    pub backbone: BackboneSlots,
    pub graph: [usize; 8],
    pub crf_kernel: Option<usize>,
    pub classifier_w: usize,
    pub classifier_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub slots: ModelSlots,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub params: Vec<Var>,
    pub probs: Var,
    pub x_c: Var,
    pub x_g: Var,
    pub fused: Var,
    pub steps: Vec<crf::StepVars>,
    /// `(stage, probabilities)` per supervision head.
    pub heads: Vec<(usize, Var)>,
}

/// Inference result for one case.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: LabelVolume,
    /// `[1, L, D, H, W]` softmax output.
    pub probs: Tensor,
    /// `||H_c(t) - H_c(t-1)||` per mean-field iteration (empty for concat).
    pub deltas: Vec<f64>,
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let bb = backbone::init_params(&config.backbone, &mut store, rng)?;
        let c0 = config.backbone.feature_width();
        // Parameter shapes do not depend on the input extent; any layout
        // with the configured lattice gives the same shapes.
        let probe = GraphLayout::lattice(config.graph.lattice, config.graph.lattice, config.graph.radius)?;
        let gp = GraphParams::init(config.backbone.bottom_width(), c0, config.graph.node_dim, &probe, rng)?;
        let mut gslots = [0; 8];
        for (i, (name, t)) in graph::PARAM_NAMES.iter().zip(gp.into_tensors()).enumerate() {
            gslots[i] = store.push(format!("graph.{name}"), t)?;
        }
        let crf_kernel = match config.fusion {
            FusionKind::Crf => {
                let k = config.crf.kernel_size;
                let w = if config.crf.init_std > 0.0 {
                    let n = Normal::new(0.0, config.crf.init_std).expect("std > 0");
                    Tensor::from_fn(&[c0, c0, k, k, k], |_| n.sample(rng))?
                } else {
                    Tensor::zeros(&[c0, c0, k, k, k])?
                };
                Some(store.push("crf.kernel", w)?)
            }
            FusionKind::Concat => None,
        };
        let cin = match config.fusion {
            FusionKind::Crf => c0,
            FusionKind::Concat => 2 * c0,
        };
        let classes = config.backbone.classes;
        let n = Normal::new(0.0, (1.0 / cin as f64).sqrt()).expect("std > 0");
        let classifier_w = store.push("classifier.w", Tensor::from_fn(&[classes, cin], |_| n.sample(rng))?)?;
        let classifier_b = store.push("classifier.b", Tensor::zeros(&[classes])?)?;
        Ok(Model {
            config,
            store,
            slots: ModelSlots {
                backbone: bb,
                graph: gslots,
                crf_kernel,
                classifier_w,
                classifier_b,
            },
        })
    }

    /// Records a forward pass; parameters are trainable leaves when
    /// `trainable`, constants otherwise.
    pub fn forward_on(&self, tape: &mut Tape, input: &Tensor, trainable: bool, iterations: Option<usize>) -> Result<Forward> {
        let s = input.shape();
        if s.len() != 5 || s[0] != 1 {
            return Err(Error::dim("model", "input", "[1, 4, D, H, W]", format!("{s:?}")));
        }
        let extent = [s[2], s[3], s[4]];
        let layout = self.config.layout(extent)?;
        let params: Vec<Var> = if trainable {
            self.store.bind(tape)
        } else {
            self.store.tensors().iter().map(|t| tape.constant(t.clone())).collect()
        };
        let bb = self.slots.backbone.bind(&params);
        let x = tape.constant(input.clone());
        let out = backbone::encode_decode_on(tape, x, &self.config.backbone, &bb)?;
        let gv = GraphVars::from_slots(&self.slots.graph, &params);
        let bshape = tape.shape(out.bottom).to_vec();
        let bottom = tape.reshape(out.bottom, &bshape[1..])?;
        let g = graph::graph_branch(tape, bottom, &gv, &layout, self.config.graph.adaptive)?;
        let gs = tape.shape(g).to_vec();
        let g = tape.reshape(g, &[1, gs[0], gs[1], gs[2], gs[3]])?;
        let x_g = tape.resize(g, extent)?;
        let (fused, steps) = match self.slots.crf_kernel {
            Some(k) => {
                let iters = iterations.unwrap_or(self.config.crf.iterations);
                let kernel = tape.bound_kernel(params[k], self.config.crf.gain_bound)?;
                let steps = crf::fuse_on(tape, out.x_c, x_g, kernel, iters)?;
                (steps.last().expect("iterations >= 1").h_c, steps)
            }
            None => (tape.concat_channels(out.x_c, x_g)?, Vec::new()),
        };
        let logits = tape.conv1x1(fused, params[self.slots.classifier_w], Some(params[self.slots.classifier_b]))?;
        let probs = tape.softmax(logits, 1)?;
        let mut heads = Vec::new();
        for (h, &deep) in bb.heads.iter().zip(&out.deep) {
            heads.push((h.stage, backbone::head_probs_on(tape, deep, h, extent)?));
        }
        Ok(Forward {
            params,
            probs,
            x_c: out.x_c,
            x_g,
            fused,
            steps,
            heads,
        })
    }

    /// Loss of one labelled case and the gradient of every parameter, in
    /// store order.
    pub fn loss_and_grads(&self, case: &CaseRecord, deltas: &[f64], lambda: f64) -> Result<(LossReport, Vec<Tensor>)> {
        let labels = case.labels()?;
        let mut tape = Tape::new();
        let f = self.forward_on(&mut tape, &case.input(), true, None)?;
        let main = backbone::supervision_loss_on(&mut tape, f.probs, labels)?;
        let mut aux = Vec::with_capacity(f.heads.len());
        for &(stage, p) in &f.heads {
            aux.push((stage, backbone::supervision_loss_on(&mut tape, p, labels)?));
        }
        let (total, report) = backbone::total_loss_on(&mut tape, main, &aux, deltas, &f.params, lambda)?;
        let mut grads = tape.backward(total)?;
        let out = f
            .params
            .iter()
            .zip(self.store.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::from_parts(t.shape().to_vec(), vec![0.0; t.len()])))
            .collect();
        Ok((report, out))
    }

    /// Argmax labels (lowest class wins ties) and class probabilities.
    pub fn predict(&self, case: &CaseRecord, iterations: Option<usize>) -> Result<Prediction> {
        let input = case.input();
        self.config.check_extent(case.extent())?;
        let mut tape = Tape::new();
        let f = self.forward_on(&mut tape, &input, false, iterations)?;
        let probs = tape.value(f.probs).clone();
        let mut deltas = Vec::with_capacity(f.steps.len());
        let mut prev = tape.value(f.x_c);
        for s in &f.steps {
            let cur = tape.value(s.h_c);
            deltas.push(cur.sub(prev)?.norm());
            prev = cur;
        }
        let extent = case.extent();
        Ok(Prediction {
            labels: LabelVolume::from_classes(extent, &argmax_classes(&probs), case.spacing)?,
            probs,
            deltas,
        })
    }
}

impl Model {
    fn effective_kernel(&self, slot: usize) -> Tensor {
        crf::bound_kernel(&self.store.tensors()[slot], self.config.crf.gain_bound)
    }

    /// The pairwise kernel the fusion loop actually applies.
    pub fn crf_kernel(&self) -> Option<Tensor> {
        self.slots.crf_kernel.map(|k| self.effective_kernel(k))
    }
}

/// Mean-field diagnostics of one case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfTrace {
    pub deltas: Vec<f64>,
    pub free_energy: Vec<f64>,
    pub energy: Vec<crf::EnergyReport>,
}

impl Model {
    /// Runs the fusion loop on this case's context maps and records its
    /// diagnostics; `None` for concatenation fusion.
    pub fn crf_trace(&self, case: &CaseRecord, iterations: Option<usize>) -> Result<Option<CrfTrace>> {
        let Some(k) = self.slots.crf_kernel else {
            return Ok(None);
        };
        let mut tape = Tape::new();
        let f = self.forward_on(&mut tape, &case.input(), false, Some(1))?;
        let iters = iterations.unwrap_or(self.config.crf.iterations);
        let cfg = crf::CrfConfig::from_weights(iters, self.effective_kernel(k))?;
        let fusion = crf::fuse(tape.value(f.x_c), tape.value(f.x_g), &cfg)?;
        Ok(Some(CrfTrace {
            deltas: fusion.deltas,
            free_energy: fusion.free_energy,
            energy: fusion.trajectory,
        }))
    }
}

/// Per-voxel argmax over axis 1 of `[1, L, ...]`; ties go to the lower index.
pub fn argmax_classes(probs: &Tensor) -> Vec<usize> {
    let classes = probs.shape()[1];
    let plane: usize = probs.shape()[2..].iter().product();
    let d = probs.data();
    (0..plane)
        .map(|i| {
            let mut best = 0;
            for c in 1..classes {
                if d[c * plane + i] > d[best * plane + i] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
