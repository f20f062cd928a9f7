//! Tumour regions and overlap / surface-distance metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Legal label values, in class-index order.
pub const LABELS: [u8; 4] = [0, 1, 2, 4];

pub fn label_to_class(label: u8) -> Option<usize> {
    LABELS.iter().position(|&l| l == label)
}

/// Inverse of [`label_to_class`]; panics on an index past the label set.
pub fn class_to_label(class: usize) -> u8 {
    LABELS[class]
}

/// Integer label grid with physical voxel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    extent: [usize; 3],
    voxels: Vec<u8>,
    spacing: [f64; 3],
}

impl LabelVolume {
    pub fn new(extent: [usize; 3], voxels: Vec<u8>, spacing: [f64; 3]) -> Result<Self> {
        let n: usize = extent.iter().product();
        if n == 0 {
            return Err(Error::Input(format!("label volume extent {extent:?} has a zero axis")));
        }
        if voxels.len() != n {
            return Err(Error::dim("label volume", "voxels", n, voxels.len()));
        }
        if let Some(i) = voxels.iter().position(|&v| label_to_class(v).is_none()) {
            return Err(Error::Input(format!(
                "illegal label {} at voxel {i} {:?}",
                voxels[i],
                unflat(extent, i)
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Input(format!("spacing {spacing:?} must be positive and finite")));
        }
        Ok(LabelVolume { extent, voxels, spacing })
    }

    pub fn background(extent: [usize; 3]) -> Result<Self> {
        Self::new(extent, vec![0; extent.iter().product()], [1.0; 3])
    }

    /// Reads integer label values from a `[D, H, W]` tensor.
    pub fn from_tensor(t: &Tensor, spacing: [f64; 3]) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::dim("labels", "rank", 3, t.rank()));
        }
        let extent = [t.shape()[0], t.shape()[1], t.shape()[2]];
        let mut voxels = Vec::with_capacity(t.len());
        for (i, &v) in t.data().iter().enumerate() {
            let l = v as u8;
            if f64::from(l) != v || label_to_class(l).is_none() {
                return Err(Error::Input(format!("illegal label {v} at voxel {i} {:?}", unflat(extent, i))));
            }
            voxels.push(l);
        }
        Self::new(extent, voxels, spacing)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(self.extent.to_vec(), self.voxels.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn from_classes(extent: [usize; 3], classes: &[usize], spacing: [f64; 3]) -> Result<Self> {
        if let Some(&c) = classes.iter().find(|&&c| c >= LABELS.len()) {
            return Err(Error::Input(format!("class index {c} has no label")));
        }
        Self::new(extent, classes.iter().map(|&c| class_to_label(c)).collect(), spacing)
    }

    pub fn classes(&self) -> Vec<usize> {
        self.voxels.iter().map(|&v| label_to_class(v).expect("validated")).collect()
    }

    pub fn extent(&self) -> [usize; 3] {
        self.extent
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        self.spacing = spacing;
        Self::new(self.extent, self.voxels, spacing)
    }
}

fn unflat(extent: [usize; 3], i: usize) -> [usize; 3] {
    [i / (extent[1] * extent[2]), (i / extent[2]) % extent[1], i % extent[2]]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "ET")]
    Et,
    #[serde(rename = "WT")]
    Wt,
    #[serde(rename = "TC")]
    Tc,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Et, Region::Wt, Region::Tc];

    pub fn name(self) -> &'static str {
        match self {
            Region::Et => "ET",
            Region::Wt => "WT",
            Region::Tc => "TC",
        }
    }

    pub fn contains(self, label: u8) -> bool {
        match self {
            Region::Et => label == 4,
            Region::Wt => matches!(label, 1 | 2 | 4),
            Region::Tc => matches!(label, 1 | 4),
        }
    }
}

/// Binary mask of one region.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub region: Region,
    pub extent: [usize; 3],
    pub mask: Vec<bool>,
}

impl RegionMask {
    pub fn new(region: Region, extent: [usize; 3], mask: Vec<bool>) -> Result<Self> {
        if mask.len() != extent.iter().product::<usize>() {
            return Err(Error::dim("region mask", "voxels", extent.iter().product::<usize>(), mask.len()));
        }
        Ok(RegionMask { region, extent, mask })
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    pub fn complement(&self) -> RegionMask {
        RegionMask {
            region: self.region,
            extent: self.extent,
            mask: self.mask.iter().map(|m| !m).collect(),
        }
    }
}

pub fn region_mask(labels: &LabelVolume, region: Region) -> RegionMask {
    RegionMask {
        region,
        extent: labels.extent,
        mask: labels.voxels.iter().map(|&l| region.contains(l)).collect(),
    }
}

/// `(|P1 & T1|, |P1|, |T1|, |P0 & T0|, |P0|, |T0|)`.
fn counts(p: &RegionMask, t: &RegionMask) -> Result<[usize; 6]> {
    if p.extent != t.extent {
        return Err(Error::dim("metric", "extent", format!("{:?}", p.extent), format!("{:?}", t.extent)));
    }
    let mut c = [0usize; 6];
    for (&a, &b) in p.mask.iter().zip(&t.mask) {
        c[0] += (a && b) as usize;
        c[1] += a as usize;
        c[2] += b as usize;
        c[3] += (!a && !b) as usize;
        c[4] += !a as usize;
        c[5] += !b as usize;
    }
    Ok(c)
}

/// `|P1 & T1| / ((|P1| + |T1|) / 2)`; two empty masks score 1.
pub fn dice(p: &RegionMask, t: &RegionMask) -> Result<f64> {
    let [tp, p1, t1, ..] = counts(p, t)?;
    if p1 + t1 == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (p1 + t1) as f64)
}

/// `|P1 & T1| / |T1|`; an empty truth scores 1.
pub fn sensitivity(p: &RegionMask, t: &RegionMask) -> Result<f64> {
    let [tp, _, t1, ..] = counts(p, t)?;
    Ok(if t1 == 0 { 1.0 } else { tp as f64 / t1 as f64 })
}

/// `|P0 & T0| / |T0|`; a truth with no background scores 1.
pub fn specificity(p: &RegionMask, t: &RegionMask) -> Result<f64> {
    let [.., tn, _, t0] = counts(p, t)?;
    Ok(if t0 == 0 { 1.0 } else { tn as f64 / t0 as f64 })
}

/// Hausdorff95 value; `defined` is false when either mask is empty, in which
/// case `value` is the volume diagonal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hd95 {
    pub value: f64,
    pub defined: bool,
}

/// Mask voxels with a 6-neighbour outside the mask or outside the volume.
pub fn surface(mask: &RegionMask) -> Vec<[usize; 3]> {
    let [d, h, w] = mask.extent;
    let at = |z: usize, y: usize, x: usize| mask.mask[(z * h + y) * w + x];
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                if edge
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1)
                {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// 1D squared distance transform along a line with sample step `s`
/// (lower envelope of parabolas).
fn edt_line(f: &[f64], s: f64, v: &mut Vec<usize>, zz: &mut Vec<f64>, out: &mut [f64]) {
    let n = f.len();
    v.clear();
    zz.clear();
    let pos = |i: usize| i as f64 * s;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    zz.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let x = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
                    if x <= *zz.last().unwrap() {
                        v.pop();
                        zz.pop();
                    } else {
                        v.push(q);
                        zz.push(x);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && zz[k + 1] < pos(q) {
            k += 1;
        }
        let dq = pos(q) - pos(v[k]);
        *o = dq * dq + f[v[k]];
    }
}

/// Squared Euclidean distance from every voxel to the nearest site.
fn squared_edt(extent: [usize; 3], sites: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = extent;
    let mut g = vec![f64::INFINITY; d * h * w];
    for s in sites {
        g[(s[0] * h + s[1]) * w + s[2]] = 0.0;
    }
    let strides = [h * w, w, 1];
    let (mut v, mut zz) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = extent[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for start in 0..d * h * w {
            if (start / strides[axis]) % n != 0 {
                continue;
            }
            for i in 0..n {
                line[i] = g[start + i * strides[axis]];
            }
            edt_line(&line, spacing[axis], &mut v, &mut zz, &mut out);
            for i in 0..n {
                g[start + i * strides[axis]] = out[i];
            }
        }
    }
    g
}

/// Nearest-rank percentile of unsorted values; `values` must be non-empty.
pub fn nearest_rank(values: &mut [f64], pct: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    // Multiplying first keeps exact integer ranks exact.
    let rank = ((pct * values.len() as f64) / 100.0).ceil().max(1.0) as usize;
    values[rank.min(values.len()) - 1]
}

fn directed95(from: &[[usize; 3]], to_edt: &[f64], extent: [usize; 3]) -> f64 {
    let [_, h, w] = extent;
    let mut d: Vec<f64> = from.iter().map(|p| to_edt[(p[0] * h + p[1]) * w + p[2]].sqrt()).collect();
    nearest_rank(&mut d, 95.0)
}

/// Symmetric 95th-percentile surface distance in physical units.
pub fn hausdorff95(p: &RegionMask, t: &RegionMask, spacing: [f64; 3]) -> Result<Hd95> {
    if p.extent != t.extent {
        return Err(Error::dim("hausdorff95", "extent", format!("{:?}", p.extent), format!("{:?}", t.extent)));
    }
    if p.is_empty() || t.is_empty() {
        let diag = (0..3).map(|a| (p.extent[a] as f64 * spacing[a]).powi(2)).sum::<f64>().sqrt();
        return Ok(Hd95 { value: diag, defined: false });
    }
    let (sp, st) = (surface(p), surface(t));
    let ep = squared_edt(p.extent, &sp, spacing);
    let et = squared_edt(t.extent, &st, spacing);
    let value = directed95(&sp, &et, p.extent).max(directed95(&st, &ep, p.extent));
    Ok(Hd95 { value, defined: true })
}

/// Metrics of one region of one case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub region: Region,
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub hausdorff95: f64,
    pub hd95_defined: bool,
    pub p1: usize,
    pub t1: usize,
    pub p0: usize,
    pub t0: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub case_id: String,
    pub regions: Vec<RegionMetrics>,
}

impl MetricReport {
    pub fn region(&self, region: Region) -> Option<&RegionMetrics> {
        self.regions.iter().find(|r| r.region == region)
    }
}

pub fn evaluate_region(pred: &LabelVolume, truth: &LabelVolume, region: Region) -> Result<RegionMetrics> {
    let (p, t) = (region_mask(pred, region), region_mask(truth, region));
    let [_, p1, t1, _, p0, t0] = counts(&p, &t)?;
    let hd = hausdorff95(&p, &t, truth.spacing)?;
    Ok(RegionMetrics {
        region,
        dice: dice(&p, &t)?,
        sensitivity: sensitivity(&p, &t)?,
        specificity: specificity(&p, &t)?,
        hausdorff95: hd.value,
        hd95_defined: hd.defined,
        p1,
        t1,
        p0,
        t0,
    })
}

pub fn evaluate(case_id: &str, pred: &LabelVolume, truth: &LabelVolume) -> Result<MetricReport> {
    let regions = Region::ALL
        .iter()
        .map(|&r| evaluate_region(pred, truth, r))
        .collect::<Result<_>>()?;
    Ok(MetricReport {
        case_id: case_id.into(),
        regions,
    })
}

/// Cheaper variant for training-time validation: Dice only.
pub fn dice_by_region(pred: &LabelVolume, truth: &LabelVolume) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (o, r) in out.iter_mut().zip(Region::ALL) {
        *o = dice(&region_mask(pred, r), &region_mask(truth, r))?;
    }
    Ok(out)
}

pub const CSV_HEADER: &str = "case_id,region,dice,sensitivity,specificity,hausdorff95,p1,t1,p0,t0,hd95_defined";

/// One row per case per region, header first.
pub fn to_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for rep in reports {
        for r in &rep.regions {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                rep.case_id,
                r.region.name(),
                r.dice,
                r.sensitivity,
                r.specificity,
                r.hausdorff95,
                r.p1,
                r.t1,
                r.p0,
                r.t0,
                r.hd95_defined
            );
        }
    }
    s
}
