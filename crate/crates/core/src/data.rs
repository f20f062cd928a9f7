//! Cases on disk, intensity normalization, augmentation, cropping and the
//! synthetic phantom generator.
//!
//! A case directory holds `t1.bin`, `t1ce.bin`, `t2.bin`, `flair.bin`, an
//! optional `labels.bin` (all tensor containers of shape `[D, H, W]`) and a
//! `case.json` manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LabelVolume;
use crate::ops::Stencil;
use crate::serialize::{read_tensor, write_tensor};
use crate::tensor::Tensor;

/// Modality file stems in channel order.
pub const MODALITY_NAMES: [&str; 4] = ["t1", "t1ce", "t2", "flair"];

#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    /// T1, T1ce, T2, FLAIR, each `[D, H, W]`.
    pub modalities: [Tensor; 4],
    pub labels: Option<LabelVolume>,
    pub spacing: [f64; 3],
}

fn extent_of(t: &Tensor) -> Result<[usize; 3]> {
    if t.rank() != 3 {
        return Err(Error::dim("case", "rank", 3, t.rank()));
    }
    Ok([t.shape()[0], t.shape()[1], t.shape()[2]])
}

impl CaseRecord {
    pub fn new(case_id: impl Into<String>, modalities: [Tensor; 4], labels: Option<LabelVolume>, spacing: [f64; 3]) -> Result<Self> {
        let e = extent_of(&modalities[0])?;
        for (m, name) in modalities.iter().zip(MODALITY_NAMES) {
            if extent_of(m)? != e {
                return Err(Error::dim("case", name, format!("{e:?}"), format!("{:?}", m.shape())));
            }
        }
        let labels = match labels {
            Some(l) if l.extent() != e => {
                return Err(Error::dim("case", "labels", format!("{e:?}"), format!("{:?}", l.extent())));
            }
            Some(l) => Some(l.with_spacing(spacing)?),
            None => None,
        };
        Ok(CaseRecord {
            case_id: case_id.into(),
            modalities,
            labels,
            spacing,
        })
    }

    pub fn extent(&self) -> [usize; 3] {
        let s = self.modalities[0].shape();
        [s[0], s[1], s[2]]
    }

    /// Stacks the modalities into a `[1, 4, D, H, W]` network input.
    pub fn input(&self) -> Tensor {
        let e = self.extent();
        let mut data = Vec::with_capacity(4 * e.iter().product::<usize>());
        for m in &self.modalities {
            data.extend_from_slice(m.data());
        }
        Tensor::from_parts(vec![1, 4, e[0], e[1], e[2]], data)
    }

    pub fn labels(&self) -> Result<&LabelVolume> {
        self.labels
            .as_ref()
            .ok_or_else(|| Error::Input(format!("case {} has no labels", self.case_id)))
    }
}

/// Floor on the standard deviation used by [`normalize`].
pub const NORM_EPS: f64 = 1e-8;

/// Zero mean and unit variance over the nonzero voxels of each modality;
/// zero voxels stay zero.
pub fn normalize(case: &CaseRecord) -> Result<CaseRecord> {
    let mut out = case.clone();
    for (m, name) in out.modalities.iter_mut().zip(MODALITY_NAMES) {
        let fg: Vec<f64> = m.data().iter().copied().filter(|&v| v != 0.0).collect();
        if fg.is_empty() {
            return Err(Error::Input(format!("case {}: modality {name} is all zero", case.case_id)));
        }
        let n = fg.len() as f64;
        let mean = fg.iter().sum::<f64>() / n;
        let var = fg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt().max(NORM_EPS);
        *m = m.map(|v| if v == 0.0 { 0.0 } else { (v - mean) / sd })?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Rotation angle drawn from `[-r, r]` degrees about one principal axis.
    pub rotation_deg: f64,
    pub scale: f64,
    pub scale_prob: f64,
    /// Per-axis mirror probability.
    pub flip_prob: f64,
    /// Per-modality additive shift drawn from `[-s, s]`.
    pub intensity_shift: f64,
    /// Smoothing width of the elastic displacement field, in voxels.
    pub elastic_sigma: f64,
    /// Largest displacement component of the elastic field, in voxels.
    pub elastic_amplitude: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 20.0,
            scale: 1.1,
            scale_prob: 0.5,
            flip_prob: 0.5,
            intensity_shift: 0.1,
            elastic_sigma: 10.0,
            elastic_amplitude: 2.0,
        }
    }
}

impl AugmentConfig {
    /// Every step disabled.
    pub fn identity() -> Self {
        AugmentConfig {
            rotation_deg: 0.0,
            scale: 1.0,
            scale_prob: 0.0,
            flip_prob: 0.0,
            intensity_shift: 0.0,
            elastic_sigma: 0.0,
            elastic_amplitude: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("scale_prob", self.scale_prob), ("flip_prob", self.flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} = {p} outside [0, 1]")));
            }
        }
        for (name, v) in [
            ("rotation_deg", self.rotation_deg),
            ("intensity_shift", self.intensity_shift),
            ("elastic_sigma", self.elastic_sigma),
            ("elastic_amplitude", self.elastic_amplitude),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("augment.{name} = {v} must be >= 0")));
            }
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Config(format!("augment.scale = {} must be > 0", self.scale)));
        }
        Ok(())
    }
}

/// Concrete draw of one augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPlan {
    /// `(axis, radians)`.
    pub rotation: Option<(usize, f64)>,
    pub scale: Option<f64>,
    pub flips: [bool; 3],
    pub shifts: [f64; 4],
    /// Per-voxel `(dz, dy, dx)` displacement.
    pub elastic: Option<Vec<[f64; 3]>>,
}

impl AugmentPlan {
    fn is_geometric_identity(&self) -> bool {
        self.rotation.is_none() && self.scale.is_none() && !self.flips.iter().any(|&f| f) && self.elastic.is_none()
    }

    pub fn draw(config: &AugmentConfig, extent: [usize; 3], rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let rotation = if config.rotation_deg > 0.0 {
            let axis = rng.random_range(0..3);
            let deg = rng.random_range(-config.rotation_deg..=config.rotation_deg);
            Some((axis, deg.to_radians()))
        } else {
            None
        };
        let scale = (config.scale_prob > 0.0 && config.scale != 1.0 && rng.random_bool(config.scale_prob)).then_some(config.scale);
        let mut flips = [false; 3];
        if config.flip_prob > 0.0 {
            for f in &mut flips {
                *f = rng.random_bool(config.flip_prob);
            }
        }
        let mut shifts = [0.0; 4];
        if config.intensity_shift > 0.0 {
            for s in &mut shifts {
                *s = rng.random_range(-config.intensity_shift..=config.intensity_shift);
            }
        }
        let elastic = (config.elastic_sigma > 0.0 && config.elastic_amplitude > 0.0)
            .then(|| elastic_field(extent, config.elastic_sigma, config.elastic_amplitude, rng));
        Ok(AugmentPlan {
            rotation,
            scale,
            flips,
            shifts,
            elastic,
        })
    }

    /// Source coordinate of output voxel `p`.
    pub fn source(&self, p: [usize; 3], extent: [usize; 3]) -> [f64; 3] {
        let c = extent.map(|e| (e as f64 - 1.0) / 2.0);
        let mut q = p.map(|v| v as f64);
        if let Some(field) = &self.elastic {
            let d = field[(p[0] * extent[1] + p[1]) * extent[2] + p[2]];
            for a in 0..3 {
                q[a] += d[a];
            }
        }
        for a in 0..3 {
            if self.flips[a] {
                q[a] = extent[a] as f64 - 1.0 - q[a];
            }
        }
        if let Some(s) = self.scale {
            for a in 0..3 {
                q[a] = c[a] + (q[a] - c[a]) / s;
            }
        }
        if let Some((axis, theta)) = self.rotation {
            let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
            let (u, v) = (q[i] - c[i], q[j] - c[j]);
            let (sn, cs) = theta.sin_cos();
            q[i] = c[i] + cs * u + sn * v;
            q[j] = c[j] - sn * u + cs * v;
        }
        q
    }

    pub fn apply(&self, case: &CaseRecord) -> Result<CaseRecord> {
        let e = case.extent();
        let mut out = case.clone();
        if !self.is_geometric_identity() {
            let n: usize = e.iter().product();
            let mut sources = Vec::with_capacity(n);
            for z in 0..e[0] {
                for y in 0..e[1] {
                    for x in 0..e[2] {
                        sources.push(self.source([z, y, x], e));
                    }
                }
            }
            for m in out.modalities.iter_mut() {
                let d = m.data();
                let resampled: Vec<f64> = sources
                    .iter()
                    .map(|&q| Stencil::new(q, e).corners().iter().map(|&(o, w)| w * d[o]).sum())
                    .collect();
                *m = Tensor::new(&e, resampled)?;
            }
            if let Some(l) = &case.labels {
                let v = l.voxels();
                let near: Vec<u8> = sources
                    .iter()
                    .map(|q| {
                        let i: Vec<usize> = (0..3).map(|a| q[a].round().clamp(0.0, e[a] as f64 - 1.0) as usize).collect();
                        v[(i[0] * e[1] + i[1]) * e[2] + i[2]]
                    })
                    .collect();
                out.labels = Some(LabelVolume::new(e, near, l.spacing())?);
            }
        }
        for (m, &s) in out.modalities.iter_mut().zip(&self.shifts) {
            if s != 0.0 {
                *m = m.map(|v| v + s)?;
            }
        }
        Ok(out)
    }
}

/// Separable Gaussian smoothing along one axis with clamped borders.
fn smooth_axis(data: &mut [f64], extent: [usize; 3], axis: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    let strides = [extent[1] * extent[2], extent[2], 1];
    let n = extent[axis];
    let mut line = vec![0.0; n];
    for start in 0..data.len() {
        if (start / strides[axis]) % n != 0 {
            continue;
        }
        for (i, l) in line.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &w) in kernel.iter().enumerate() {
                let j = (i as isize + k as isize - r).clamp(0, n as isize - 1) as usize;
                acc += w * data[start + j * strides[axis]];
            }
            *l = acc;
        }
        for (i, &l) in line.iter().enumerate() {
            data[start + i * strides[axis]] = l;
        }
    }
}

/// Smoothed Gaussian noise, rescaled so the largest component is `amplitude`.
pub fn elastic_field(extent: [usize; 3], sigma: f64, amplitude: f64, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let n: usize = extent.iter().product();
    let r = (3.0 * sigma).ceil() as usize;
    let mut kernel: Vec<f64> = (0..=2 * r)
        .map(|i| {
            let x = i as f64 - r as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= z);
    let mut comps: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..n).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    for c in comps.iter_mut() {
        for axis in 0..3 {
            smooth_axis(c, extent, axis, &kernel);
        }
    }
    let peak = comps.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let f = if peak > 0.0 { amplitude / peak } else { 0.0 };
    (0..n).map(|i| [comps[0][i] * f, comps[1][i] * f, comps[2][i] * f]).collect()
}

pub fn augment(case: &CaseRecord, config: &AugmentConfig, rng: &mut impl Rng) -> Result<CaseRecord> {
    AugmentPlan::draw(config, case.extent(), rng)?.apply(case)
}

/// Mirrors every modality and the labels along `axis`.
pub fn flip(case: &CaseRecord, axis: usize) -> Result<CaseRecord> {
    let mut flips = [false; 3];
    flips[axis] = true;
    AugmentPlan {
        rotation: None,
        scale: None,
        flips,
        shifts: [0.0; 4],
        elastic: None,
    }
    .apply(case)
}

/// Sub-volume starting at `origin`.
pub fn crop_at(case: &CaseRecord, origin: [usize; 3], size: [usize; 3]) -> Result<CaseRecord> {
    let e = case.extent();
    if (0..3).any(|a| size[a] == 0 || origin[a] + size[a] > e[a]) {
        return Err(Error::Config(format!("crop {size:?} at {origin:?} exceeds extents {e:?}")));
    }
    let idx = |z: usize, y: usize, x: usize| ((origin[0] + z) * e[1] + origin[1] + y) * e[2] + origin[2] + x;
    let mut offsets = Vec::with_capacity(size.iter().product());
    for z in 0..size[0] {
        for y in 0..size[1] {
            for x in 0..size[2] {
                offsets.push(idx(z, y, x));
            }
        }
    }
    let take = |t: &Tensor| Tensor::new(&size, offsets.iter().map(|&o| t.data()[o]).collect());
    let modalities = [
        take(&case.modalities[0])?,
        take(&case.modalities[1])?,
        take(&case.modalities[2])?,
        take(&case.modalities[3])?,
    ];
    let labels = match &case.labels {
        Some(l) => Some(LabelVolume::new(size, offsets.iter().map(|&o| l.voxels()[o]).collect(), l.spacing())?),
        None => None,
    };
    CaseRecord::new(case.case_id.clone(), modalities, labels, case.spacing)
}

/// Uniformly placed axis-aligned crop of `size`.
pub fn random_crop(case: &CaseRecord, size: [usize; 3], rng: &mut impl Rng) -> Result<CaseRecord> {
    let e = case.extent();
    if (0..3).any(|a| size[a] == 0 || size[a] > e[a]) {
        return Err(Error::Config(format!("crop size {size:?} exceeds extents {e:?}")));
    }
    let origin = [0, 1, 2].map(|a| rng.random_range(0..=e[a] - size[a]));
    crop_at(case, origin, size)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub extent: [usize; 3],
    pub tumors: usize,
    /// Range of the outer (edema) semi-axes, in voxels.
    pub edema_radius: [f64; 2],
    /// Range of the core semi-axes as a fraction of the edema semi-axes.
    pub core_fraction: [f64; 2],
    /// Range of the necrotic semi-axes as a fraction of the core semi-axes.
    pub necrosis_fraction: [f64; 2],
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            extent: [24, 24, 24],
            tumors: 1,
            edema_radius: [4.0, 7.0],
            core_fraction: [0.45, 0.7],
            necrosis_fraction: [0.3, 0.6],
            noise: 0.1,
        }
    }
}

/// Base intensity per modality for tissue, edema, enhancing and necrosis.
const INTENSITY: [[f64; 4]; 4] = [
    [1.0, 0.8, 1.1, 0.5],
    [1.0, 0.9, 2.0, 0.6],
    [1.0, 1.8, 1.4, 1.6],
    [1.0, 2.0, 1.5, 1.2],
];

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.extent.contains(&0) {
            return Err(Error::Config(format!("phantom extent {:?} has a zero axis", self.extent)));
        }
        let ranges = [
            ("edema_radius", self.edema_radius, f64::INFINITY),
            ("core_fraction", self.core_fraction, 1.0),
            ("necrosis_fraction", self.necrosis_fraction, 1.0),
        ];
        for (name, [lo, hi], cap) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi && hi <= cap) {
                return Err(Error::Config(format!("phantom.{name} = [{lo}, {hi}] is not a valid range")));
            }
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config(format!("phantom.noise = {} must be >= 0", self.noise)));
        }
        let min_extent = *self.extent.iter().min().unwrap() as f64;
        if self.tumors > 0 && 2.0 * self.edema_radius[1] + 2.0 > min_extent {
            return Err(Error::Config(format!(
                "edema radius {} does not fit extents {:?}",
                self.edema_radius[1], self.extent
            )));
        }
        Ok(())
    }
}

/// Nested-ellipsoid tumours in uniform tissue. Labels: 2 for the outer
/// shell, 4 for the core shell and 1 for the necrotic centre.
pub fn generate_phantom(spec: &PhantomSpec, case_id: &str, rng: &mut impl Rng) -> Result<CaseRecord> {
    spec.validate()?;
    let e = spec.extent;
    let n: usize = e.iter().product();
    let mut labels = vec![0u8; n];
    for _ in 0..spec.tumors {
        let outer: [f64; 3] = [0; 3].map(|_| rng.random_range(spec.edema_radius[0]..=spec.edema_radius[1]));
        let core_f = rng.random_range(spec.core_fraction[0]..=spec.core_fraction[1]);
        let nec_f = rng.random_range(spec.necrosis_fraction[0]..=spec.necrosis_fraction[1]);
        let center: Vec<f64> = (0..3)
            .map(|a| {
                let lo = outer[a] + 0.5;
                let hi = e[a] as f64 - 1.5 - outer[a];
                if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    (e[a] as f64 - 1.0) / 2.0
                }
            })
            .collect();
        let inside = |p: [usize; 3], f: f64| -> bool {
            (0..3).map(|a| ((p[a] as f64 - center[a]) / (outer[a] * f)).powi(2)).sum::<f64>() <= 1.0
        };
        for z in 0..e[0] {
            for y in 0..e[1] {
                for x in 0..e[2] {
                    let p = [z, y, x];
                    let i = (z * e[1] + y) * e[2] + x;
                    if inside(p, core_f * nec_f) {
                        labels[i] = 1;
                    } else if inside(p, core_f) {
                        labels[i] = 4;
                    } else if inside(p, 1.0) && labels[i] == 0 {
                        // overlapping tumours keep the inner labels of earlier ones
                        labels[i] = 2;
                    }
                }
            }
        }
    }
    let tissue_class = |l: u8| match l {
        0 => 0,
        2 => 1,
        4 => 2,
        _ => 3,
    };
    let mut mods = Vec::with_capacity(4);
    for row in INTENSITY {
        let data: Vec<f64> = labels
            .iter()
            .map(|&l| {
                let base = row[tissue_class(l)];
                if spec.noise > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    base + spec.noise * z
                } else {
                    base
                }
            })
            .collect();
        mods.push(Tensor::new(&e, data)?);
    }
    let modalities: [Tensor; 4] = mods.try_into().expect("four modalities");
    CaseRecord::new(case_id, modalities, Some(LabelVolume::new(e, labels, [1.0; 3])?), [1.0; 3])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseManifest {
    pub case_id: String,
    pub extent: [usize; 3],
    pub spacing: [f64; 3],
    pub has_labels: bool,
}

pub const CASE_MANIFEST: &str = "case.json";
pub const LABELS_FILE: &str = "labels.bin";

pub fn write_case(case: &CaseRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (m, name) in case.modalities.iter().zip(MODALITY_NAMES) {
        write_tensor(&dir.join(format!("{name}.bin")), m, name)?;
    }
    if let Some(l) = &case.labels {
        write_tensor(&dir.join(LABELS_FILE), &l.to_tensor(), "labels")?;
    }
    let manifest = CaseManifest {
        case_id: case.case_id.clone(),
        extent: case.extent(),
        spacing: case.spacing,
        has_labels: case.labels.is_some(),
    };
    let path = dir.join(CASE_MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        offset: 0,
        message: e.to_string(),
    })
}

pub fn read_case(dir: &Path) -> Result<CaseRecord> {
    let mpath = dir.join(CASE_MANIFEST);
    let missing: Vec<String> = MODALITY_NAMES
        .iter()
        .map(|n| format!("{n}.bin"))
        .filter(|f| !dir.join(f).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Input(format!(
            "case {} is missing modality files: {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    let manifest: CaseManifest = parse_json(&mpath)?;
    let mut mods = Vec::with_capacity(4);
    for name in MODALITY_NAMES {
        let path = dir.join(format!("{name}.bin"));
        let t = read_tensor(&path)?;
        if t.shape() != manifest.extent {
            return Err(Error::Parse {
                path,
                offset: 12,
                message: format!("extents {:?} disagree with case manifest {:?}", t.shape(), manifest.extent),
            });
        }
        mods.push(t);
    }
    let lpath = dir.join(LABELS_FILE);
    let labels = if manifest.has_labels || lpath.is_file() {
        let t = read_tensor(&lpath)?;
        if t.shape() != manifest.extent {
            return Err(Error::Parse {
                path: lpath,
                offset: 12,
                message: format!("extents {:?} disagree with case manifest {:?}", t.shape(), manifest.extent),
            });
        }
        Some(LabelVolume::from_tensor(&t, manifest.spacing)?)
    } else {
        None
    };
    let modalities: [Tensor; 4] = mods.try_into().expect("four modalities");
    CaseRecord::new(manifest.case_id, modalities, labels, manifest.spacing)
}

/// Newline-delimited case paths; relative entries resolve against the
/// manifest's directory. Blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let cases: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let p = Path::new(l);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        })
        .collect();
    Ok(cases)
}

pub fn write_manifest(path: &Path, entries: &[String]) -> Result<()> {
    let mut text = entries.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
