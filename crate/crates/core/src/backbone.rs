//! UNet-style encoder-decoder, deep-supervision heads and the combined loss.
//!
//! Stage 0 keeps full resolution; every later encoder stage halves it with a
//! stride-2 convolution. Each block is conv (k=3) -> group norm -> ReLU. The
//! decoder upsamples trilinearly, concatenates the matching encoder map and
//! applies one block, ending at full resolution with the stage-0 width. That
//! map is the convolution-context output.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Number of imaging modalities consumed by the encoder.
pub const MODALITIES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Feature width of each encoder stage, shallow to deep.
    pub channels: Vec<usize>,
    pub classes: usize,
    /// Group-norm groups; must divide every stage width.
    pub groups: usize,
    /// Encoder stages that feed a supervision head.
    pub supervision: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: vec![4, 8, 16],
            classes: 4,
            groups: 2,
            supervision: vec![1],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(Error::Config(format!("backbone needs >= 2 stages, got {}", self.channels.len())));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("class count must be >= 2, got {}", self.classes)));
        }
        if self.groups == 0 || self.channels.iter().any(|&c| c == 0 || c % self.groups != 0) {
            return Err(Error::Config(format!(
                "stage widths {:?} must be positive multiples of {} groups",
                self.channels, self.groups
            )));
        }
        if let Some(&s) = self.supervision.iter().find(|&&s| s >= self.stages()) {
            return Err(Error::Config(format!("supervision stage {s} beyond {} stages", self.stages())));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    /// Width of the convolution-context map.
    pub fn feature_width(&self) -> usize {
        self.channels[0]
    }

    /// Width of the deepest encoder map.
    pub fn bottom_width(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    /// Rejects extents not divisible by `2^(stages - 1)`.
    pub fn check_extent(&self, extent: [usize; 3]) -> Result<()> {
        let f = 1usize << (self.stages() - 1);
        if extent.iter().any(|&e| e == 0 || e % f != 0) {
            return Err(Error::Config(format!(
                "extents {extent:?} must be divisible by {f} for {} stages",
                self.stages()
            )));
        }
        Ok(())
    }

    pub fn stage_extent(&self, extent: [usize; 3], stage: usize) -> [usize; 3] {
        extent.map(|e| e >> stage)
    }
}

/// Convolution, bias and group-norm affine of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block<T> {
    pub w: T,
    pub b: T,
    pub gamma: T,
    pub beta: T,
}

/// 1x1 classifier of a supervision head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Head<T> {
    pub stage: usize,
    pub w: T,
    pub b: T,
}

/// Backbone parameters, generic over slots (`usize`) or tape handles (`Var`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneParams<T> {
    pub encoder: Vec<Block<T>>,
    /// `decoder[s]` produces the stage-`s` map, for `s < stages - 1`.
    pub decoder: Vec<Block<T>>,
    pub heads: Vec<Head<T>>,
}

pub type BackboneSlots = BackboneParams<usize>;
pub type BackboneVars = BackboneParams<Var>;

impl BackboneSlots {
    pub fn bind(&self, vars: &[Var]) -> BackboneVars {
        let blk = |b: &Block<usize>| Block {
            w: vars[b.w],
            b: vars[b.b],
            gamma: vars[b.gamma],
            beta: vars[b.beta],
        };
        BackboneParams {
            encoder: self.encoder.iter().map(blk).collect(),
            decoder: self.decoder.iter().map(blk).collect(),
            heads: self
                .heads
                .iter()
                .map(|h| Head {
                    stage: h.stage,
                    w: vars[h.w],
                    b: vars[h.b],
                })
                .collect(),
        }
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("std > 0");
    Tensor::from_fn(shape, |_| n.sample(rng))
}

fn push_block(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<Block<usize>> {
    Ok(Block {
        w: store.push(format!("{name}.w"), he_normal(&[cout, cin, 3, 3, 3], cin * 27, rng)?)?,
        b: store.push(format!("{name}.b"), Tensor::zeros(&[cout])?)?,
        gamma: store.push(format!("{name}.gamma"), Tensor::ones(&[cout])?)?,
        beta: store.push(format!("{name}.beta"), Tensor::zeros(&[cout])?)?,
    })
}

/// He-normal convolutions, zero biases, unit group-norm scale.
pub fn init_params(config: &BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<BackboneSlots> {
    config.validate()?;
    let c = &config.channels;
    let mut encoder = Vec::new();
    for s in 0..c.len() {
        let cin = if s == 0 { MODALITIES } else { c[s - 1] };
        encoder.push(push_block(store, &format!("enc{s}"), cin, c[s], rng)?);
    }
    let mut decoder = Vec::new();
    for s in 0..c.len() - 1 {
        decoder.push(push_block(store, &format!("dec{s}"), c[s + 1] + c[s], c[s], rng)?);
    }
    let mut heads = Vec::new();
    for &stage in &config.supervision {
        let n = Normal::new(0.0, (1.0 / c[stage] as f64).sqrt()).expect("std > 0");
        heads.push(Head {
            stage,
            w: store.push(
                format!("head{stage}.w"),
                Tensor::from_fn(&[config.classes, c[stage]], |_| n.sample(rng))?,
            )?,
            b: store.push(format!("head{stage}.b"), Tensor::zeros(&[config.classes])?)?,
        });
    }
    Ok(BackboneParams { encoder, decoder, heads })
}

/// Tape handles of the backbone outputs.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// Full-resolution decoder output.
    pub x_c: Var,
    /// Encoder maps of stages `0..stages - 1`, consumed by the decoder.
    pub skips: Vec<Var>,
    /// Encoder maps feeding the supervision heads, in head order.
    pub deep: Vec<Var>,
    /// Deepest encoder map, the graph-branch input.
    pub bottom: Var,
}

fn block(tape: &mut Tape, x: Var, p: &Block<Var>, stride: usize, groups: usize) -> Result<Var> {
    let y = tape.conv3d(x, p.w, Some(p.b), stride, 1)?;
    let y = tape.group_norm(y, p.gamma, p.beta, groups)?;
    tape.relu(y)
}

/// Records the encoder and decoder on `tape` for a `[1, 4, D, H, W]` input.
pub fn encode_decode_on(tape: &mut Tape, input: Var, config: &BackboneConfig, p: &BackboneVars) -> Result<BackboneOutput> {
    config.validate()?;
    let s = tape.shape(input).to_vec();
    if s.len() != 5 {
        return Err(Error::dim("encode_decode", "rank", 5, s.len()));
    }
    if s[1] != MODALITIES {
        return Err(Error::dim("encode_decode", "channel (axis 1)", MODALITIES, s[1]));
    }
    let extent = [s[2], s[3], s[4]];
    config.check_extent(extent)?;
    let mut enc = Vec::with_capacity(config.stages());
    let mut x = input;
    for (st, blk) in p.encoder.iter().enumerate() {
        x = block(tape, x, blk, if st == 0 { 1 } else { 2 }, config.groups)?;
        enc.push(x);
    }
    let bottom = x;
    for st in (0..config.stages() - 1).rev() {
        let up = tape.resize(x, config.stage_extent(extent, st))?;
        let cat = tape.concat_channels(up, enc[st])?;
        x = block(tape, cat, &p.decoder[st], 1, config.groups)?;
    }
    let deep = p.heads.iter().map(|h| enc[h.stage]).collect();
    enc.pop();
    Ok(BackboneOutput {
        x_c: x,
        skips: enc,
        deep,
        bottom,
    })
}

/// Softmax probabilities of one supervision head, upsampled to `extent`.
pub fn head_probs_on(tape: &mut Tape, deep: Var, head: &Head<Var>, extent: [usize; 3]) -> Result<Var> {
    let logits = tape.conv1x1(deep, head.w, Some(head.b))?;
    let up = tape.resize(logits, extent)?;
    tape.softmax(up, 1)
}

/// Mean voxelwise cross-entropy of `probs` (`[1, L, D, H, W]`) on the tape.
pub fn supervision_loss_on(tape: &mut Tape, probs: Var, labels: &LabelVolume) -> Result<Var> {
    let s = tape.shape(probs);
    if s.len() != 5 || s[0] != 1 || s[2..] != labels.extent() {
        return Err(Error::dim(
            "supervision_loss",
            "shape",
            format!("[1, L, {:?}]", labels.extent()),
            format!("{s:?}"),
        ));
    }
    tape.nll_mean(probs, &labels.classes())
}

/// Mean voxelwise cross-entropy of softmax probabilities against labels.
pub fn supervision_loss(head_output: &Tensor, labels: &LabelVolume) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(head_output.clone());
    let l = supervision_loss_on(&mut tape, p, labels)?;
    Ok(tape.value(l).data()[0])
}

/// Decaying auxiliary weight `delta0 * max(0, 1 - epoch / total)`.
pub fn supervision_weight(delta0: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return 0.0;
    }
    delta0 * (1.0 - epoch as f64 / total_epochs as f64).max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxLoss {
    pub stage: usize,
    pub delta: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub main: f64,
    pub auxiliary: Vec<AuxLoss>,
    /// `lambda * sum ||w||^2`.
    pub l2_term: f64,
}

fn check_weights(deltas: &[f64], heads: usize, lambda: f64) -> Result<()> {
    if deltas.len() != heads {
        return Err(Error::Config(format!("{} supervision weights for {heads} heads", deltas.len())));
    }
    if let Some(d) = deltas.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
        return Err(Error::Config(format!("supervision weight {d} must be >= 0")));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!("L2 coefficient {lambda} must be >= 0")));
    }
    Ok(())
}

/// `main + sum delta_s * L_s + lambda * sum ||w||^2` on the tape.
/// `aux` pairs each head's stage with its loss handle.
pub fn total_loss_on(
    tape: &mut Tape,
    main: Var,
    aux: &[(usize, Var)],
    deltas: &[f64],
    params: &[Var],
    lambda: f64,
) -> Result<(Var, LossReport)> {
    check_weights(deltas, aux.len(), lambda)?;
    let mut total = main;
    let mut auxiliary = Vec::with_capacity(aux.len());
    for (&(stage, l), &delta) in aux.iter().zip(deltas) {
        auxiliary.push(AuxLoss {
            stage,
            delta,
            loss: tape.value(l).data()[0],
        });
        if delta != 0.0 {
            let t = tape.scale(l, delta)?;
            total = tape.add(total, t)?;
        }
    }
    let mut l2_term = 0.0;
    if lambda != 0.0 && !params.is_empty() {
        let mut sq = tape.sum_squares(params[0])?;
        for &p in &params[1..] {
            let s = tape.sum_squares(p)?;
            sq = tape.add(sq, s)?;
        }
        let reg = tape.scale(sq, lambda)?;
        l2_term = tape.value(reg).data()[0];
        total = tape.add(total, reg)?;
    }
    let report = LossReport {
        total: tape.value(total).data()[0],
        main: tape.value(main).data()[0],
        auxiliary,
        l2_term,
    };
    Ok((total, report))
}

/// Scalar version of [`total_loss_on`].
pub fn total_loss(main: f64, aux: &[(usize, f64)], deltas: &[f64], params: &[&Tensor], lambda: f64) -> Result<LossReport> {
    let mut tape = Tape::new();
    let m = tape.constant(Tensor::scalar(main)?);
    let a = aux
        .iter()
        .map(|&(s, l)| Ok((s, tape.constant(Tensor::scalar(l)?))))
        .collect::<Result<Vec<_>>>()?;
    let p: Vec<Var> = params.iter().map(|t| tape.constant((*t).clone())).collect();
    Ok(total_loss_on(&mut tape, m, &a, deltas, &p, lambda)?.1)
}

/// Tensor-level backbone: configuration plus parameters.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub store: ParamStore,
    pub slots: BackboneSlots,
}

impl Backbone {
    pub fn init(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let slots = init_params(&config, &mut store, rng)?;
        Ok(Backbone { config, store, slots })
    }

    /// Returns `(x_c, skips, deep)`.
    pub fn encode_decode(&self, input: &Tensor) -> Result<(Tensor, Vec<Tensor>, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.store.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let p = self.slots.bind(&vars);
        let x = tape.constant(input.clone());
        let out = encode_decode_on(&mut tape, x, &self.config, &p)?;
        let get = |v: &Var| tape.value(*v).clone();
        Ok((get(&out.x_c), out.skips.iter().map(get).collect(), out.deep.iter().map(get).collect()))
    }

    pub fn bottom(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.store.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let p = self.slots.bind(&vars);
        let x = tape.constant(input.clone());
        let out = encode_decode_on(&mut tape, x, &self.config, &p)?;
        Ok(tape.value(out.bottom).clone())
    }
}
