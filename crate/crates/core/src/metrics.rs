//! Pixel-level segmentation scores and box-plot summaries.

use serde::Serialize;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// 2×2 confusion table with oil as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

fn check_binary(t: &Tensor<f32>, which: &str) -> Result<()> {
    match t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::Contract(format!("{which} mask holds non-binary value {v}"))),
        None => Ok(()),
    }
}

pub fn confusion(pred: &Tensor<f32>, truth: &Tensor<f32>) -> Result<ConfusionCounts> {
    if pred.dims() != truth.dims() {
        return Err(Error::Contract(format!(
            "mask dims differ: prediction {:?}, truth {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    check_binary(pred, "predicted")?;
    check_binary(truth, "ground-truth")?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p == 1.0, t == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Fraction of correctly labelled pixels.
pub fn accuracy(c: &ConfusionCounts) -> Result<f64> {
    match c.total() {
        0 => Err(Error::Contract("accuracy of an empty mask".into())),
        n => Ok((c.tp + c.tn) as f64 / n as f64),
    }
}

/// Intersection over union of the oil regions; 1.0 when neither mask
/// contains oil.
pub fn jaccard(c: &ConfusionCounts) -> f64 {
    match c.tp + c.fp + c.fn_ {
        0 => 1.0,
        union => c.tp as f64 / union as f64,
    }
}

/// Five-number summary with 1.5·IQR outliers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub outliers: Vec<f64>,
}

/// Linear-interpolation quantile over sorted data (position `p · (n − 1)`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn box_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() {
        return Err(Error::Contract("box_stats of an empty sample".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Contract("box_stats input contains NaN".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let median = quantile_sorted(&sorted, 0.5);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let (inliers, outliers): (Vec<f64>, Vec<f64>) = sorted.iter().partition(|&&v| v >= lo && v <= hi);
    // With interpolated quartiles the nearest inlier can sit inside the box
    // (e.g. a far-off sample next to a tight cluster); whiskers then stop at
    // the box edge.
    let min = inliers.first().map_or(q1, |&v| v.min(q1));
    let max = inliers.last().map_or(q3, |&v| v.max(q3));
    Ok(BoxStats {
        min,
        q1,
        median,
        q3,
        max,
        outliers,
    })
}

/// One row of the per-scene metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneMetrics {
    pub scene_id: String,
    pub accuracy: f64,
    pub jci: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl SceneMetrics {
    pub fn from_masks(scene_id: impl Into<String>, pred: &Tensor<f32>, truth: &Tensor<f32>) -> Result<Self> {
        let c = confusion(pred, truth)?;
        Ok(Self {
            scene_id: scene_id.into(),
            accuracy: accuracy(&c)?,
            jci: jaccard(&c),
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
        })
    }
}

/// One row of the summary CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method_label: String,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub n_outliers: usize,
}

impl SummaryRow {
    pub fn new(method_label: impl Into<String>, stats: &BoxStats) -> Self {
        Self {
            method_label: method_label.into(),
            min: stats.min,
            q1: stats.q1,
            median: stats.median,
            q3: stats.q3,
            max: stats.max,
            n_outliers: stats.outliers.len(),
        }
    }
}
