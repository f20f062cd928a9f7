//! Adam optimizer, learning-rate schedule, the training loop and checkpoints.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::supervision_weight;
use crate::data::{augment, random_crop, AugmentConfig, CaseRecord};
use crate::error::{Error, Result};
use crate::metrics::dice_by_region;
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::serialize::{read_tensor, write_tensor};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs after which the learning rate is multiplied by `factor`.
    pub milestones: Vec<usize>,
    pub factor: f64,
    /// Initial deep-supervision weight.
    pub delta0: f64,
    /// Coefficient of the L2 term in the loss.
    pub lambda: f64,
    /// Decoupled weight decay applied by the optimizer.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Random training crop; `[0, 0, 0]` trains on whole volumes.
    pub crop: [usize; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 2,
            lr: 1e-2,
            milestones: vec![20, 30, 36],
            factor: 0.2,
            delta0: 0.5,
            lambda: 1e-5,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            crop: [0, 0, 0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr {} must be > 0", self.lr)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("train.milestones {:?} must be strictly increasing", self.milestones)));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::Config(format!("train.factor {} must lie in (0, 1)", self.factor)));
        }
        for (name, v) in [("delta0", self.delta0), ("lambda", self.lambda), ("weight_decay", self.weight_decay)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("train.{name} {v} must be >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("train.beta1/beta2 must be in [0, 1) and eps > 0".into()));
        }
        let c = self.crop;
        if c.contains(&0) && c != [0, 0, 0] {
            return Err(Error::Config(format!("train.crop {c:?}: use all zeros for no crop")));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(self.lr, &self.milestones, self.factor, epoch)
    }
}

/// `base / (1 / factor)^k` with `k` the number of milestones already passed.
pub fn lr_at(base: f64, milestones: &[usize], factor: f64, epoch: usize) -> f64 {
    let k = milestones.iter().filter(|&&m| epoch >= m).count();
    base / (1.0 / factor).powi(k as i32)
}

/// Adam moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, lr: f64, weight_decay: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::from_parts(t.shape().to_vec(), vec![0.0; t.len()]))
                .collect()
        };
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn from_config(params: &ParamStore, cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
    }

    /// One bias-corrected Adam update with decoupled weight decay.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::dim("optimizer", "parameters", params.len(), grads.len()));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.tensors()[i].shape() {
                return Err(Error::dim(
                    "optimizer",
                    "gradient",
                    format!("{} {:?}", params.names()[i], params.tensors()[i].shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {}", params.names()[i])));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let names = params.names().to_vec();
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let mut m = self.m[i].data().to_vec();
            let mut v = self.v[i].data().to_vec();
            let mut w = p.data().to_vec();
            for j in 0..w.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                w[j] -= self.lr * (update + self.weight_decay * w[j]);
            }
            let shape = p.shape().to_vec();
            *p = Tensor::new(&shape, w).map_err(|_| Error::Numeric(format!("parameter {} became non-finite", names[i])))?;
            self.m[i] = Tensor::from_parts(shape.clone(), m);
            self.v[i] = Tensor::from_parts(shape, v);
        }
        Ok(())
    }
}

/// Mean Dice of each region over a case list, `[ET, WT, TC]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionDice {
    #[serde(rename = "ET")]
    pub et: f64,
    #[serde(rename = "WT")]
    pub wt: f64,
    #[serde(rename = "TC")]
    pub tc: f64,
}

impl RegionDice {
    pub fn mean(&self) -> f64 {
        (self.et + self.wt + self.tc) / 3.0
    }
}

/// One training-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub total_loss: f64,
    pub main_loss: f64,
    pub aux_losses: Vec<f64>,
    pub l2_term: f64,
    pub val_dice: RegionDice,
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best mean validation Dice.
    pub best: Model,
    pub best_epoch: usize,
    pub last: Model,
    pub optimizer: OptimizerState,
    pub log: Vec<EpochRecord>,
}

/// Independent stream for `(seed, epoch, item)`.
pub fn split_rng(seed: u64, epoch: u64, item: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(0x1_0000_0001).wrapping_add(item).wrapping_add(1));
    rng
}

/// Mean validation Dice of a model.
pub fn validate(model: &Model, cases: &[CaseRecord], iterations: Option<usize>) -> Result<RegionDice> {
    if cases.is_empty() {
        return Ok(RegionDice::default());
    }
    let scores: Vec<[f64; 3]> = cases
        .par_iter()
        .map(|c| {
            let p = model.predict(c, iterations)?;
            dice_by_region(&p.labels, c.labels()?)
        })
        .collect::<Result<_>>()?;
    let n = scores.len() as f64;
    let col = |i: usize| scores.iter().map(|s| s[i]).sum::<f64>() / n;
    Ok(RegionDice {
        et: col(0),
        wt: col(1),
        tc: col(2),
    })
}

fn prepare(case: &CaseRecord, cfg: &TrainConfig, aug: &AugmentConfig, seed: u64, epoch: usize, item: usize) -> Result<CaseRecord> {
    let mut rng = split_rng(seed, epoch as u64 + 1, item as u64);
    let c = augment(case, aug, &mut rng)?;
    if cfg.crop == [0, 0, 0] {
        Ok(c)
    } else {
        random_crop(&c, cfg.crop, &mut rng)
    }
}

/// Trains on already normalized cases. `on_epoch` sees each log record as
/// it is produced.
pub fn train(
    mut model: Model,
    train_set: &[CaseRecord],
    val_set: &[CaseRecord],
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    aug.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    for c in train_set.iter().chain(val_set) {
        c.labels()?;
        let e = if cfg.crop == [0, 0, 0] { c.extent() } else { cfg.crop };
        model.config.check_extent(e)?;
        if (0..3).any(|a| e[a] > c.extent()[a]) {
            return Err(Error::Config(format!("crop {e:?} exceeds case {} extents {:?}", c.case_id, c.extent())));
        }
    }
    let mut opt = OptimizerState::from_config(&model.store, cfg);
    let heads = model.config.backbone.supervision.len();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        let delta = supervision_weight(cfg.delta0, epoch, cfg.epochs);
        let deltas = vec![delta; heads];
        order.shuffle(&mut split_rng(seed, epoch as u64 + 1, u64::MAX));
        let (mut total, mut main, mut l2) = (0.0, 0.0, 0.0);
        let mut aux = vec![0.0; heads];
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| {
                    let c = prepare(&train_set[i], cfg, aug, seed, epoch, i)?;
                    model.loss_and_grads(&c, &deltas, cfg.lambda)
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / results.len() as f64;
            let mut grads: Vec<Vec<f64>> = model.store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            for (rep, g) in &results {
                total += rep.total;
                main += rep.main;
                l2 += rep.l2_term;
                for (a, x) in aux.iter_mut().zip(&rep.auxiliary) {
                    *a += x.loss;
                }
                for (acc, t) in grads.iter_mut().zip(g) {
                    for (a, v) in acc.iter_mut().zip(t.data()) {
                        *a += v * scale;
                    }
                }
            }
            let grads: Vec<Tensor> = grads
                .into_iter()
                .zip(model.store.tensors())
                .map(|(g, t)| Tensor::from_parts(t.shape().to_vec(), g))
                .collect();
            opt.step(&mut model.store, &grads)?;
        }
        let n = train_set.len() as f64;
        let val_dice = validate(&model, val_set, None)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr: opt.lr,
            total_loss: total / n,
            main_loss: main / n,
            aux_losses: aux.iter().map(|a| a / n).collect(),
            l2_term: l2 / n,
            val_dice,
        };
        on_epoch(&rec)?;
        let score = val_dice.mean();
        if best.as_ref().is_none_or(|(s, ..)| score > *s) {
            best = Some((score, epoch + 1, model.clone()));
        }
        log.push(rec);
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        last: model,
        optimizer: opt,
        log,
    })
}

/// Contents of `checkpoint.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub params: Vec<String>,
    pub epoch: usize,
    pub optimizer_step: u64,
    pub lr: f64,
    pub metrics: Option<EpochRecord>,
}

pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<OptimizerState>,
    pub epoch: usize,
    pub metrics: Option<EpochRecord>,
}

pub const CHECKPOINT_META: &str = "checkpoint.json";

fn param_file(dir: &Path, sub: &str, name: &str) -> std::path::PathBuf {
    dir.join(sub).join(format!("{name}.bin"))
}

/// Layout: `checkpoint.json`, `params/<name>.bin`, and when an optimizer
/// is given `optimizer/<name>.m.bin` and `optimizer/<name>.v.bin`.
pub fn save_checkpoint(dir: &Path, ck: &Checkpoint) -> Result<()> {
    for sub in ["params", "optimizer"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let names = ck.model.store.names();
    for (name, t) in names.iter().zip(ck.model.store.tensors()) {
        write_tensor(&param_file(dir, "params", name), t, name)?;
    }
    if let Some(opt) = &ck.optimizer {
        for (i, name) in names.iter().enumerate() {
            write_tensor(&param_file(dir, "optimizer", &format!("{name}.m")), &opt.m[i], name)?;
            write_tensor(&param_file(dir, "optimizer", &format!("{name}.v")), &opt.v[i], name)?;
        }
    }
    let meta = CheckpointMeta {
        model: ck.model.config.clone(),
        params: names.to_vec(),
        epoch: ck.epoch,
        optimizer_step: ck.optimizer.as_ref().map_or(0, |o| o.step),
        lr: ck.optimizer.as_ref().map_or(0.0, |o| o.lr),
        metrics: ck.metrics.clone(),
    };
    let path = dir.join(CHECKPOINT_META);
    fs::write(&path, serde_json::to_string_pretty(&meta).expect("meta serializes")).map_err(|e| Error::io(&path, e))
}

/// Restores a checkpoint. Optimizer moments are loaded when present; the
/// remaining optimizer hyperparameters come from `train`.
pub fn load_checkpoint(dir: &Path, train: &TrainConfig) -> Result<Checkpoint> {
    let path = dir.join(CHECKPOINT_META);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        offset: 0,
        message: e.to_string(),
    })?;
    let mut model = Model::init(meta.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let tensors = meta
        .params
        .iter()
        .map(|n| read_tensor(&param_file(dir, "params", n)))
        .collect::<Result<Vec<_>>>()?;
    model.store.assign(&meta.params, tensors)?;
    let optimizer = if param_file(dir, "optimizer", &format!("{}.m", meta.params[0])).is_file() {
        let mut opt = OptimizerState::from_config(&model.store, train);
        for (i, n) in meta.params.iter().enumerate() {
            opt.m[i] = read_tensor(&param_file(dir, "optimizer", &format!("{n}.m")))?;
            opt.v[i] = read_tensor(&param_file(dir, "optimizer", &format!("{n}.v")))?;
        }
        opt.step = meta.optimizer_step;
        opt.lr = meta.lr;
        Some(opt)
    } else {
        None
    };
    Ok(Checkpoint {
        model,
        optimizer,
        epoch: meta.epoch,
        metrics: meta.metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("p", Tensor::new(&[vals.len()], vals.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = store(&[1.0, -2.0]);
        let mut o = OptimizerState::new(&s, 0.1, 0.0, 0.9, 0.999, 1e-8);
        o.step(&mut s, &[Tensor::zeros(&[2]).unwrap()]).unwrap();
        assert_eq!(s.tensors()[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn one_step_matches_formulas() {
        let mut s = store(&[0.5, -1.5]);
        let g = [0.3, -0.7];
        let mut o = OptimizerState::new(&s, 0.01, 0.1, 0.9, 0.999, 1e-8);
        o.step(&mut s, &[Tensor::new(&[2], g.to_vec()).unwrap()]).unwrap();
        for (j, &p0) in [0.5, -1.5].iter().enumerate() {
            let m = 0.1 * g[j];
            let v = 0.001 * g[j] * g[j];
            let want = p0 - 0.01 * ((m / 0.1) / ((v / 0.001f64).sqrt() + 1e-8) + 0.1 * p0);
            assert!((s.tensors()[0].data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_gradient_direction() {
        let mut s = store(&[0.0]);
        let mut o = OptimizerState::new(&s, 0.01, 0.0, 0.9, 0.999, 1e-8);
        for _ in 0..50 {
            o.step(&mut s, &[Tensor::new(&[1], vec![2.0]).unwrap()]).unwrap();
        }
        assert!(s.tensors()[0].data()[0] < -0.4);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = store(&[0.0]);
        let mut o = OptimizerState::new(&s, 0.01, 0.0, 0.9, 0.999, 1e-8);
        let bad = Tensor::from_parts(vec![1], vec![f64::NAN]);
        match o.step(&mut s, &[bad]) {
            Err(Error::Numeric(m)) => assert!(m.contains("parameter p")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schedule_divides_by_five() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), c.lr);
        assert_eq!(c.lr_at(20), c.lr / 5.0);
        assert_eq!(c.lr_at(30), c.lr / 25.0);
        assert_eq!(c.lr_at(39), c.lr / 125.0);
    }

    #[test]
    fn config_rules() {
        let mut c = TrainConfig::default();
        c.milestones = vec![5, 5];
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.factor = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.crop = [8, 0, 8];
        assert!(c.validate().is_err());
    }

    #[test]
    fn split_streams_differ() {
        use rand::Rng;
        let a: u64 = split_rng(1, 1, 0).random();
        let b: u64 = split_rng(1, 1, 1).random();
        let c: u64 = split_rng(1, 2, 0).random();
        assert!(a != b && a != c && b != c);
        assert_eq!(a, split_rng(1, 1, 0).random::<u64>());
    }
}
