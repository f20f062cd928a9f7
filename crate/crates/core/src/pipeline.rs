//! Command drivers shared by the executable and the end-to-end tests.
//!
//! Every driver takes a validated [`RunConfig`] plus explicit paths and
//! writes only below its output path.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{generate_phantom, normalize, read_case, read_manifest, write_case, write_manifest, CaseManifest, CaseRecord, CASE_MANIFEST, LABELS_FILE};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, to_csv, LabelVolume, MetricReport};
use crate::model::{FusionKind, Model};
use crate::serialize::{read_tensor, write_tensor};
use crate::tensor::Tensor;
use crate::train::{load_checkpoint, save_checkpoint, split_rng, train, Checkpoint, EpochRecord, RegionDice, TrainOutcome};

pub const CASES_MANIFEST: &str = "cases.txt";
pub const PROBS_FILE: &str = "probs.bin";
/// Tolerance on a delta increase that still counts as non-increasing.
pub const CONVERGENCE_SLACK: f64 = 1e-12;
/// Latest iteration from which deltas must stop increasing.
pub const CONVERGENCE_T0: usize = 3;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("record serializes")
}

/// Model initialization stream; distinct from every data stream.
pub fn model_rng(seed: u64) -> ChaCha8Rng {
    split_rng(seed, 0, u64::MAX)
}

/// Writes `dataset.cases` phantoms as `case_NNN/` plus `cases.txt`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    cfg.phantom.validate()?;
    create_dir(out)?;
    let ids: Vec<String> = (0..cfg.dataset.cases).map(|i| format!("case_{i:03}")).collect();
    ids.par_iter()
        .enumerate()
        .try_for_each(|(i, id)| {
            let case = generate_phantom(&cfg.phantom, id, &mut split_rng(cfg.seed, 0, i as u64))?;
            write_case(&case, &out.join(id))
        })?;
    write_manifest(&out.join(CASES_MANIFEST), &ids)?;
    Ok(ids)
}

/// Normalized cases split into training and trailing validation cases.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<CaseRecord>,
    pub val: Vec<CaseRecord>,
}

pub fn load_dataset(manifest: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let paths = read_manifest(manifest)?;
    if paths.len() <= cfg.dataset.validation {
        return Err(Error::Config(format!(
            "dataset.validation = {} leaves no training cases out of {} in {}",
            cfg.dataset.validation,
            paths.len(),
            manifest.display()
        )));
    }
    let mut cases: Vec<CaseRecord> = paths
        .par_iter()
        .map(|p| normalize(&read_case(p)?))
        .collect::<Result<_>>()?;
    let val = cases.split_off(cases.len() - cfg.dataset.validation);
    Ok(Dataset { train: cases, val })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub fusion: FusionKind,
    pub iterations: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub first_total_loss: f64,
    pub final_total_loss: f64,
    /// `1 - final / first`.
    pub loss_reduction: f64,
    pub final_val_dice: RegionDice,
    pub best_val_dice: RegionDice,
}

fn summarize(cfg: &RunConfig, out: &TrainOutcome) -> TrainSummary {
    let first = &out.log[0];
    let last = out.log.last().expect("non-empty log");
    TrainSummary {
        fusion: cfg.model.fusion,
        iterations: cfg.model.crf.iterations,
        epochs: out.log.len(),
        best_epoch: out.best_epoch,
        first_total_loss: first.total_loss,
        final_total_loss: last.total_loss,
        loss_reduction: 1.0 - last.total_loss / first.total_loss,
        final_val_dice: last.val_dice,
        best_val_dice: out.log[out.best_epoch - 1].val_dice,
    }
}

/// Trains a fresh model; `on_epoch` sees each log record.
pub fn run_training(
    cfg: &RunConfig,
    data: &Dataset,
    on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<(TrainOutcome, TrainSummary)> {
    cfg.validate()?;
    let model = Model::init(cfg.model.clone(), &mut model_rng(cfg.seed))?;
    let out = train(model, &data.train, &data.val, &cfg.train, &cfg.augment, cfg.seed, on_epoch)?;
    let summary = summarize(cfg, &out);
    Ok((out, summary))
}

/// Writes `config.toml`, `train_log.jsonl`, `best/`, `last/` and
/// `summary.json` below `out`.
pub fn cmd_train(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = load_dataset(manifest, cfg)?;
    create_dir(out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let log_path = out.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let (outcome, summary) = run_training(cfg, &data, |rec| {
        writeln!(log, "{}", json_line(rec)).map_err(|e| Error::io(&log_path, e))
    })?;
    let best = Checkpoint {
        model: outcome.best,
        optimizer: None,
        epoch: outcome.best_epoch,
        metrics: Some(outcome.log[outcome.best_epoch - 1].clone()),
    };
    save_checkpoint(&out.join("best"), &best)?;
    let last = Checkpoint {
        model: outcome.last,
        optimizer: Some(outcome.optimizer),
        epoch: outcome.log.len(),
        metrics: outcome.log.last().cloned(),
    };
    save_checkpoint(&out.join("last"), &last)?;
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_text(&out.join("summary.json"), &text)?;
    Ok(summary)
}

/// A directory holding `case.json` is one case; anything else is read as
/// a case manifest.
fn case_paths(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        if input.join(CASE_MANIFEST).is_file() {
            return Ok(vec![input.to_path_buf()]);
        }
        return Err(Error::Input(format!("{} holds no {CASE_MANIFEST}", input.display())));
    }
    read_manifest(input)
}

/// Predicts every case of `input` with the checkpoint's model and writes
/// `out/<case_id>/{labels.bin, probs.bin, case.json}`.
pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, input: &Path, out: &Path) -> Result<Vec<String>> {
    let model = load_checkpoint(checkpoint, &cfg.train)?.model;
    let cases: Vec<CaseRecord> = case_paths(input)?.iter().map(|p| read_case(p)).collect::<Result<_>>()?;
    for c in &cases {
        model.config.check_extent(c.extent())?;
    }
    create_dir(out)?;
    cases
        .par_iter()
        .map(|c| {
            let p = model.predict(&normalize(c)?, None)?;
            let dir = out.join(&c.case_id);
            create_dir(&dir)?;
            write_tensor(&dir.join(LABELS_FILE), &p.labels.to_tensor(), "labels")?;
            let s = p.probs.shape();
            write_tensor(&dir.join(PROBS_FILE), &p.probs.reshape(&s[1..])?, "probs")?;
            let manifest = CaseManifest {
                case_id: c.case_id.clone(),
                extent: c.extent(),
                spacing: c.spacing,
                has_labels: true,
            };
            let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
            write_text(&dir.join(CASE_MANIFEST), &json)?;
            Ok(c.case_id.clone())
        })
        .collect()
}

fn read_labels(dir: &Path) -> Result<(String, LabelVolume)> {
    let mpath = dir.join(CASE_MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: CaseManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: mpath.clone(),
        offset: 0,
        message: e.to_string(),
    })?;
    let t = read_tensor(&dir.join(LABELS_FILE))?;
    if t.shape() != m.extent {
        return Err(Error::Parse {
            path: dir.join(LABELS_FILE),
            offset: 12,
            message: format!("extents {:?} disagree with case manifest {:?}", t.shape(), m.extent),
        });
    }
    Ok((m.case_id, LabelVolume::from_tensor(&t, m.spacing)?))
}

/// Label volumes of `dir`: the directory itself when it holds
/// `labels.bin`, otherwise each subdirectory holding `case.json`, sorted.
pub fn label_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(LABELS_FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.join(CASE_MANIFEST).is_file() {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Input(format!("no cases found in {}", dir.display())));
    }
    Ok(out)
}

/// Scores each predicted case against the truth case with the same id.
pub fn cmd_eval(pred: &Path, truth: &Path, out_csv: &Path) -> Result<Vec<MetricReport>> {
    let truths: Vec<(String, PathBuf)> = label_dirs(truth)?
        .into_iter()
        .map(|p| {
            let (id, _) = read_labels(&p)?;
            Ok((id, p))
        })
        .collect::<Result<_>>()?;
    let reports: Vec<MetricReport> = label_dirs(pred)?
        .par_iter()
        .map(|p| {
            let (id, labels) = read_labels(p)?;
            let (_, tdir) = truths
                .iter()
                .find(|(t, _)| *t == id)
                .ok_or_else(|| Error::Input(format!("no ground truth for case {id} in {}", truth.display())))?;
            let (_, t) = read_labels(tdir)?;
            evaluate(&id, &labels, &t)
        })
        .collect::<Result<_>>()?;
    if let Some(parent) = out_csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(out_csv, &to_csv(&reports))?;
    Ok(reports)
}

/// True when the deltas stop increasing no later than iteration
/// `CONVERGENCE_T0` (1-based).
pub fn converges(deltas: &[f64]) -> bool {
    let from = CONVERGENCE_T0 - 1;
    deltas.windows(2).skip(from).all(|w| w[1] <= w[0] + CONVERGENCE_SLACK)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseTrajectory {
    pub iterations: usize,
    pub case_id: String,
    pub deltas: Vec<f64>,
    pub free_energy: Vec<f64>,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub iterations: usize,
    pub epochs: usize,
    pub dice: RegionDice,
    /// Mean over validation cases of the last mean-field delta.
    pub final_delta: f64,
    /// Share of validation cases passing the convergence probe.
    pub converged: f64,
}

pub const SWEEP_CSV_HEADER: &str = "iterations,epochs,ET,WT,TC,final_delta,converged";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iterations, r.epochs, r.dice.et, r.dice.wt, r.dice.tc, r.final_delta, r.converged
        ));
    }
    s
}

/// Scores a trained model on validation cases and records its mean-field
/// trajectories.
pub fn probe(model: &Model, val: &[CaseRecord]) -> Result<(RegionDice, Vec<CaseTrajectory>)> {
    let dice = crate::train::validate(model, val, None)?;
    let iterations = model.config.crf.iterations;
    let traj = val
        .par_iter()
        .map(|c| {
            let t = model
                .crf_trace(c, None)?
                .ok_or_else(|| Error::Config("the sweep needs model.fusion = \"crf\"".into()))?;
            Ok(CaseTrajectory {
                iterations,
                case_id: c.case_id.clone(),
                converged: converges(&t.deltas),
                deltas: t.deltas,
                free_energy: t.free_energy,
            })
        })
        .collect::<Result<_>>()?;
    Ok((dice, traj))
}

/// Trains one model per `sweep.iterations` entry and writes `sweep.csv`,
/// `trajectories.jsonl` and `train_log.jsonl` below `out`.
pub fn cmd_sweep(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if cfg.model.fusion != FusionKind::Crf {
        return Err(Error::Config("the sweep needs model.fusion = \"crf\"".into()));
    }
    if cfg.dataset.validation == 0 {
        return Err(Error::Config("the sweep needs dataset.validation > 0".into()));
    }
    let data = load_dataset(manifest, cfg)?;
    create_dir(out)?;
    let mut log = String::new();
    let mut traj_text = String::new();
    let mut rows = Vec::new();
    for &n in &cfg.sweep.iterations {
        let mut c = cfg.clone();
        c.model.crf.iterations = n;
        if cfg.sweep.epochs > 0 {
            c.train.epochs = cfg.sweep.epochs;
        }
        let (outcome, _) = run_training(&c, &data, |rec| {
            let mut v = serde_json::to_value(rec).expect("record serializes");
            v["iterations"] = n.into();
            log.push_str(&v.to_string());
            log.push('\n');
            Ok(())
        })?;
        let (dice, traj) = probe(&outcome.last, &data.val)?;
        let k = traj.len() as f64;
        rows.push(SweepRow {
            iterations: n,
            epochs: c.train.epochs,
            dice,
            final_delta: traj.iter().map(|t| *t.deltas.last().expect("n > 0")).sum::<f64>() / k,
            converged: traj.iter().filter(|t| t.converged).count() as f64 / k,
        });
        for t in &traj {
            traj_text.push_str(&json_line(t));
            traj_text.push('\n');
        }
        write_text(&out.join("sweep.csv"), &sweep_csv(&rows))?;
        write_text(&out.join("trajectories.jsonl"), &traj_text)?;
        write_text(&out.join("train_log.jsonl"), &log)?;
    }
    Ok(rows)
}

/// Fixed colors per label: enhancing green, edema yellow, necrotic red.
pub fn label_color(label: u8) -> [u8; 3] {
    match label {
        4 => [0, 255, 0],
        2 => [255, 255, 0],
        1 => [255, 0, 0],
        _ => [0, 0, 0],
    }
}

/// The other two axes of a slice, in order; they index rows and columns.
fn plane(axis: usize, extent: [usize; 3], slice: usize) -> Result<(usize, usize)> {
    if axis > 2 {
        return Err(Error::Config(format!("axis must be 0, 1 or 2, got {axis}")));
    }
    if slice >= extent[axis] {
        return Err(Error::Config(format!(
            "slice {slice} out of range for axis {axis} of extent {}",
            extent[axis]
        )));
    }
    let rest: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    Ok((rest[0], rest[1]))
}

fn voxel(axis: usize, slice: usize, (ra, ca): (usize, usize), r: usize, c: usize) -> [usize; 3] {
    let mut p = [0; 3];
    p[axis] = slice;
    p[ra] = r;
    p[ca] = c;
    p
}

/// Binary PPM of one label slice.
pub fn render_labels(labels: &LabelVolume, axis: usize, slice: usize) -> Result<Vec<u8>> {
    let e = labels.extent();
    let rc = plane(axis, e, slice)?;
    let (h, w) = (e[rc.0], e[rc.1]);
    let mut img = format!("P6\n{w} {h}\n255\n").into_bytes();
    for r in 0..h {
        for c in 0..w {
            let [z, y, x] = voxel(axis, slice, rc, r, c);
            img.extend_from_slice(&label_color(labels.voxels()[(z * e[1] + y) * e[2] + x]));
        }
    }
    Ok(img)
}

/// Binary PGM of one probability slice; lighter means less likely. With
/// no class the tumor probability `1 - p(background)` is drawn.
pub fn render_probs(probs: &Tensor, axis: usize, slice: usize, class: Option<usize>) -> Result<Vec<u8>> {
    let s = probs.shape();
    let s = match s.len() {
        4 => s,
        5 if s[0] == 1 => &s[1..],
        _ => return Err(Error::dim("render_probs", "rank", "[C,D,H,W] or [1,C,D,H,W]", format!("{s:?}"))),
    };
    let (l, e) = (s[0], [s[1], s[2], s[3]]);
    if let Some(k) = class.filter(|&k| k >= l) {
        return Err(Error::Config(format!("class {k} out of range for {l} channels")));
    }
    let rc = plane(axis, e, slice)?;
    let (h, w) = (e[rc.0], e[rc.1]);
    let n = e[0] * e[1] * e[2];
    let mut img = format!("P5\n{w} {h}\n255\n").into_bytes();
    for r in 0..h {
        for c in 0..w {
            let [z, y, x] = voxel(axis, slice, rc, r, c);
            let i = (z * e[1] + y) * e[2] + x;
            let p = match class {
                Some(k) => probs.data()[k * n + i],
                None => 1.0 - probs.data()[i],
            };
            if !p.is_finite() {
                return Err(Error::Numeric(format!("probability {p} at voxel {:?}", [z, y, x])));
            }
            img.push((255.0 * (1.0 - p.clamp(0.0, 1.0))).round() as u8);
        }
    }
    Ok(img)
}

/// Renders a slice of a case or prediction directory (its `labels.bin`,
/// else `probs.bin`) or of a tensor file: rank 3 is read as labels,
/// rank 4 or 5 as probabilities.
pub fn cmd_render(input: &Path, axis: usize, slice: usize, out: &Path, class: Option<usize>) -> Result<()> {
    let file = if input.is_dir() {
        if class.is_none() && input.join(LABELS_FILE).is_file() {
            input.join(LABELS_FILE)
        } else {
            input.join(PROBS_FILE)
        }
    } else {
        input.to_path_buf()
    };
    let t = read_tensor(&file)?;
    let img = if t.rank() == 3 {
        if class.is_some() {
            return Err(Error::Config(format!("{} holds labels; --class needs probabilities", file.display())));
        }
        render_labels(&LabelVolume::from_tensor(&t, [1.0; 3])?, axis, slice)?
    } else {
        render_probs(&t, axis, slice, class)?
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(out, img).map_err(|e| Error::io(out, e))
}
