//! Binarization, confusion counts and the four pixel scores.
//!
//! Counts are summed globally over every evaluated pixel. Precision, recall
//! and F1 are `None` only when there are no positives at all (neither
//! predicted nor in the ground truth); otherwise a zero true-positive count
//! scores 0.

use std::fmt;
use std::ops::{Add, AddAssign};

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Pixel is changed iff `prob >= threshold`.
pub fn binarize<T: Float>(prob_map: &Tensor<T>, threshold: f64) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("threshold", format!("{threshold} not in (0, 1)")));
    }
    let (h, w) = match *prob_map.shape() {
        [1, h, w] | [h, w] => (h, w),
        _ => return Err(Error::shape("binarize", format!("{:?}", prob_map.shape()))),
    };
    let data = prob_map
        .data()
        .iter()
        .map(|&v| (v.as_f64() >= threshold) as u8)
        .collect();
    Mask::new(h, w, data)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Swaps the roles of the two classes.
    pub fn relabeled(&self) -> Self {
        ConfusionCounts {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

fn check_binary(which: &str, data: &[u8]) -> Result<()> {
    match data.iter().find(|&&v| v > 1) {
        Some(v) => Err(Error::invalid("mask", format!("{which} has non-binary value {v}"))),
        None => Ok(()),
    }
}

/// Confusion counts over raw 0/1 slices.
pub fn confusion_raw(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "confusion",
            format!("{} predictions vs {} labels", pred.len(), gt.len()),
        ));
    }
    check_binary("prediction", pred)?;
    check_binary("ground truth", gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(
            "confusion",
            format!("{}x{} vs {}x{}", pred.height(), pred.width(), gt.height(), gt.width()),
        ));
    }
    confusion_raw(pred.data(), gt.data())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if num == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn scores(c: &ConfusionCounts) -> Result<Scores> {
    if c.total() == 0 {
        return Err(Error::invalid("confusion counts", "no pixels were evaluated"));
    }
    let accuracy = (c.tp + c.tn) as f64 / c.total() as f64;
    if c.tp + c.fp + c.fn_ == 0 {
        return Ok(Scores {
            precision: None,
            recall: None,
            f1: None,
            accuracy,
        });
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if c.tp == 0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Scores {
        precision: Some(precision),
        recall: Some(recall),
        f1: Some(f1),
        accuracy,
    })
}

/// Percentage with two decimals, or `n/a`.
pub fn percent(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.2}", 100.0 * v),
        None => "n/a".to_string(),
    }
}

impl fmt::Display for Scores {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Recall {}  F1 {}  Precision {}  Accuracy {}",
            percent(self.recall),
            percent(self.f1),
            percent(self.precision),
            percent(Some(self.accuracy))
        )
    }
}

/// Global counts plus the per-tile breakdown they were summed from.
#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub tiles: Vec<(String, ConfusionCounts)>,
}

impl Evaluation {
    pub fn push(&mut self, id: impl Into<String>, counts: ConfusionCounts) {
        self.tiles.push((id.into(), counts));
    }

    pub fn global(&self) -> ConfusionCounts {
        self.tiles.iter().map(|(_, c)| *c).sum()
    }

    pub fn scores(&self) -> Result<Scores> {
        scores(&self.global())
    }
}

/// One row of the metrics table: network name, glimpse settings, scores.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub network: String,
    pub glimpse: Option<(f64, f64, f64)>,
    pub scores: Scores,
}

pub const CSV_HEADER: &str = "network,u,s,d,Recall,F1,Precision,Accuracy";

impl MetricsRow {
    pub fn csv(&self) -> String {
        let (u, s, d) = match self.glimpse {
            Some((u, s, d)) => (u.to_string(), s.to_string(), d.to_string()),
            None => ("-".into(), "-".into(), "-".into()),
        };
        format!(
            "{},{u},{s},{d},{},{},{},{}",
            self.network,
            percent(self.scores.recall),
            percent(self.scores.f1),
            percent(self.scores.precision),
            percent(Some(self.scores.accuracy))
        )
    }
}
