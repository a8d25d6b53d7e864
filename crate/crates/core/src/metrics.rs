//! Region masks and the evaluation metrics: Dice, HD95 and sensitivity.

use serde::{Deserialize, Serialize};

use crate::domain::{Region, LABELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// Probabilities strictly above this are foreground.
pub const THRESHOLD: f64 = 0.5;

/// Human-readable statement of the empty-mask conventions, embedded in reports.
pub const CONVENTIONS: &str = "dice=1 if both masks empty, 0 if exactly one empty; \
sensitivity=1 if target empty; hd95=0 if both empty, undefined (excluded from means) if exactly one empty; \
threshold p>0.5; hd95 = max of directed nearest-rank 95th percentiles, Euclidean pixel units";

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("mask", format!("shape {shape:?} vs {} values", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn empty(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![false; shape.iter().product()] }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> bool) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(f).collect() }
    }

    /// Thresholds a probability map at [`THRESHOLD`].
    pub fn from_probs<T: Scalar>(p: &Tensor<T>) -> Self {
        Self { shape: p.shape().to_vec(), data: p.data().iter().map(|v| v.wide() > THRESHOLD).collect() }
    }

    /// Exact 0/1 tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&self.shape, |i| if self.data[i] { T::one() } else { T::zero() })
    }

    /// Stacks equally shaped masks along a new leading axis.
    pub fn stack(masks: &[BinaryMask]) -> Result<Self> {
        let Some(first) = masks.first() else { return Err(Error::Input("cannot stack zero masks".into())) };
        let mut data = Vec::with_capacity(first.data.len() * masks.len());
        for m in masks {
            if m.shape != first.shape {
                return Err(Error::dim("stack", format!("{:?} vs {:?}", m.shape, first.shape)));
            }
            data.extend_from_slice(&m.data);
        }
        let mut shape = vec![masks.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Whether every foreground pixel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.shape == other.shape && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// Splits a label map into the WT, TC and ET masks.
pub fn labels_to_regions(labels: &[u8], shape: &[usize]) -> Result<[BinaryMask; 3]> {
    if shape.iter().product::<usize>() != labels.len() {
        return Err(Error::dim("labels_to_regions", format!("shape {shape:?} vs {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|l| !LABELS.contains(l)) {
        return Err(Error::Input(format!("illegal label value {bad} (expected 0, 1, 2 or 4)")));
    }
    Ok(Region::ALL.map(|r| BinaryMask { shape: shape.to_vec(), data: labels.iter().map(|&l| r.contains(l)).collect() }))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn new(pred: &BinaryMask, target: &BinaryMask) -> Result<Self> {
        same_shape("confusion", pred, target)?;
        let mut c = Self::default();
        for (&p, &t) in pred.data.iter().zip(&target.data) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn same_shape(op: &'static str, a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

/// `2|P∩T| / (|P| + |T|)`; 1 when both are empty.
pub fn dice_coef(pred: &BinaryMask, target: &BinaryMask) -> Result<f64> {
    let c = ConfusionCounts::new(pred, target)?;
    let denom = 2 * c.tp + c.fp + c.fn_;
    Ok(if denom == 0 { 1.0 } else { 2.0 * c.tp as f64 / denom as f64 })
}

/// `TP / (TP + FN)`; 1 when the target is empty.
pub fn sensitivity(pred: &BinaryMask, target: &BinaryMask) -> Result<f64> {
    let c = ConfusionCounts::new(pred, target)?;
    let pos = c.tp + c.fn_;
    Ok(if pos == 0 { 1.0 } else { c.tp as f64 / pos as f64 })
}

/// How the 95th percentile is formed from the two directed distance sets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hd95Mode {
    /// `max(P95(d(T→P)), P95(d(P→T)))`.
    #[default]
    Directed,
    /// `P95` of the union of both directed distance sets.
    Pooled,
}

/// Squared Euclidean distance from every pixel to the nearest foreground
/// pixel of `mask` (`+∞` if there is none), by separable exact transforms.
pub fn squared_edt(mask: &BinaryMask) -> Vec<f64> {
    let mut d: Vec<f64> = mask.data.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let shape = &mask.shape;
    let mut stride = 1;
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in (0..shape.len()).rev() {
        let n = shape[axis];
        let block = stride * n;
        for base in (0..d.len()).step_by(block.max(1)) {
            for off in 0..stride {
                line.clear();
                line.extend((0..n).map(|i| d[base + off + i * stride]));
                dt1d(&line, &mut out);
                for (i, &v) in out.iter().enumerate() {
                    d[base + off + i * stride] = v;
                }
            }
        }
        stride = block;
    }
    d
}

/// Lower envelope of parabolas rooted at the finite samples of `f`.
fn dt1d(f: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let roots: Vec<usize> = (0..f.len()).filter(|&i| f[i].is_finite()).collect();
    if roots.is_empty() {
        out.resize(f.len(), f64::INFINITY);
        return;
    }
    let mut v: Vec<usize> = Vec::with_capacity(roots.len());
    let mut z: Vec<f64> = Vec::with_capacity(roots.len() + 1);
    let inter = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf))
    };
    for &q in &roots {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = inter(q, p);
                    if s <= *z.last().expect("z tracks v") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    let mut k = 0;
    for q in 0..f.len() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        out.push(dq * dq + f[v[k]]);
    }
}

/// Distance from each foreground pixel of `from` to the nearest foreground pixel of `to`.
pub fn directed_distances(from: &BinaryMask, to: &BinaryMask) -> Result<Vec<f64>> {
    same_shape("hd95", from, to)?;
    let edt = squared_edt(to);
    Ok(from.data.iter().zip(&edt).filter(|(&b, _)| b).map(|(_, &d)| d.sqrt()).collect())
}

/// Nearest-rank percentile `q ∈ (0, 100]` of an unsorted sample.
pub fn nearest_rank(values: &mut [f64], q: usize) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = (q * values.len()).div_ceil(100).max(1);
    values[rank - 1]
}

/// 95th-percentile Hausdorff distance. `None` means undefined: exactly one mask is empty.
pub fn hd95(pred: &BinaryMask, target: &BinaryMask) -> Result<Option<f64>> {
    hd95_with(pred, target, Hd95Mode::Directed)
}

pub fn hd95_with(pred: &BinaryMask, target: &BinaryMask, mode: Hd95Mode) -> Result<Option<f64>> {
    same_shape("hd95", pred, target)?;
    match (pred.is_empty(), target.is_empty()) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let mut a = directed_distances(target, pred)?;
    let mut b = directed_distances(pred, target)?;
    Ok(Some(match mode {
        Hd95Mode::Directed => nearest_rank(&mut a, 95).max(nearest_rank(&mut b, 95)),
        Hd95Mode::Pooled => {
            a.extend(b);
            nearest_rank(&mut a, 95)
        }
    }))
}

/// Dice, HD95 and sensitivity of one prediction against one target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub dice: f64,
    pub hd95: Option<f64>,
    pub sensitivity: f64,
}

pub fn score(pred: &BinaryMask, target: &BinaryMask, mode: Hd95Mode) -> Result<RegionScore> {
    Ok(RegionScore {
        dice: dice_coef(pred, target)?,
        hd95: hd95_with(pred, target, mode)?,
        sensitivity: sensitivity(pred, target)?,
    })
}
