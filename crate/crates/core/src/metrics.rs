//! Classification and segmentation scores.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::data::{BinaryMask, FenceLabel};
use crate::error::{Error, Result};

/// `counts[actual][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = labels.len();
        if counts.len() != c || counts.iter().any(|r| r.len() != c) {
            return Err(Error::Data(format!("confusion matrix must be {c}x{c}")));
        }
        Ok(Self { labels, counts })
    }

    /// Two-class fence matrix in report order (double, single).
    pub fn fence(counts: [[u64; 2]; 2]) -> Self {
        Self {
            labels: FenceLabel::CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            counts: counts.iter().map(|r| r.to_vec()).collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn tp(&self, k: usize) -> u64 {
        self.counts[k][k]
    }

    pub fn fp(&self, k: usize) -> u64 {
        (0..self.num_classes()).filter(|&i| i != k).map(|i| self.counts[i][k]).sum()
    }

    pub fn fn_(&self, k: usize) -> u64 {
        (0..self.num_classes()).filter(|&j| j != k).map(|j| self.counts[k][j]).sum()
    }

    pub fn tn(&self, k: usize) -> u64 {
        self.total() - self.tp(k) - self.fp(k) - self.fn_(k)
    }
}

/// Tallies `(actual, predicted)` class indices.
pub fn confusion_matrix(
    actual: &[usize],
    predicted: &[usize],
    labels: &[&str],
) -> Result<ConfusionMatrix> {
    if actual.len() != predicted.len() {
        return Err(Error::Data(format!(
            "{} actual labels but {} predictions",
            actual.len(),
            predicted.len()
        )));
    }
    let c = labels.len();
    let mut counts = vec![vec![0u64; c]; c];
    for (&a, &p) in actual.iter().zip(predicted) {
        if a >= c || p >= c {
            return Err(Error::Data(format!("label index {} outside {c} classes", a.max(p))));
        }
        counts[a][p] += 1;
    }
    Ok(ConfusionMatrix {
        labels: labels.iter().map(|s| s.to_string()).collect(),
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when a zero denominator forced a score to 0.
    pub ill_defined: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub labels: Vec<String>,
    pub classes: Vec<ClassScores>,
    pub accuracy: f64,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn class_report(cm: &ConfusionMatrix) -> Result<ClassReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("no samples in confusion matrix".into()));
    }
    let classes: Vec<ClassScores> = (0..cm.num_classes())
        .map(|k| {
            let tp = cm.tp(k);
            let (precision, p_bad) = ratio(tp, tp + cm.fp(k));
            let (recall, r_bad) = ratio(tp, tp + cm.fn_(k));
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScores {
                precision,
                recall,
                f1,
                support: tp + cm.fn_(k),
                ill_defined: p_bad || r_bad,
            }
        })
        .collect();
    let c = classes.len() as f64;
    let macro_avg = Averages {
        precision: classes.iter().map(|s| s.precision).sum::<f64>() / c,
        recall: classes.iter().map(|s| s.recall).sum::<f64>() / c,
        f1: classes.iter().map(|s| s.f1).sum::<f64>() / c,
        support: total,
    };
    let w = |f: fn(&ClassScores) -> f64| {
        classes.iter().map(|s| f(s) * s.support as f64).sum::<f64>() / total as f64
    };
    let weighted_avg = Averages {
        precision: w(|s| s.precision),
        recall: w(|s| s.recall),
        f1: w(|s| s.f1),
        support: total,
    };
    Ok(ClassReport {
        labels: cm.labels.clone(),
        classes,
        accuracy: cm.trace() as f64 / total as f64,
        macro_avg,
        weighted_avg,
    })
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

impl ClassReport {
    pub fn support(&self) -> u64 {
        self.macro_avg.support
    }

    pub fn scores(&self, label: &str) -> Option<&ClassScores> {
        self.labels.iter().position(|l| l == label).map(|i| &self.classes[i])
    }

    /// Table layout: one row per class, then accuracy, macro and weighted
    /// averages, with scores rounded to two decimals.
    pub fn to_table_json(&self) -> Value {
        let mut obj = Map::new();
        for (label, s) in self.labels.iter().zip(&self.classes) {
            let mut row = json!({
                "precision": round2(s.precision),
                "recall": round2(s.recall),
                "f1-score": round2(s.f1),
                "support": s.support,
            });
            if s.ill_defined {
                row["ill_defined"] = Value::Bool(true);
            }
            obj.insert(label.clone(), row);
        }
        obj.insert("accuracy".into(), json!(round2(self.accuracy)));
        for (name, a) in [("macro avg", &self.macro_avg), ("weighted avg", &self.weighted_avg)] {
            obj.insert(
                name.into(),
                json!({
                    "precision": round2(a.precision),
                    "recall": round2(a.recall),
                    "f1-score": round2(a.f1),
                    "support": a.support,
                }),
            );
        }
        Value::Object(obj)
    }
}

/// Pixel counts of a binary prediction against ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl PixelCounts {
    pub fn of(g: &BinaryMask, p: &BinaryMask) -> Result<Self> {
        g.same_dims(p, "pixel counts")?;
        let mut c = PixelCounts::default();
        for (&a, &b) in g.data().iter().zip(p.data()) {
            match (a != 0, b != 0) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn iou(&self) -> f64 {
        let den = self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            self.tp as f64 / den as f64
        }
    }

    /// IoU of the background class.
    pub fn iou_background(&self) -> f64 {
        let den = self.tn + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            self.tn as f64 / den as f64
        }
    }

    pub fn dice(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.tp + self.fp + self.fn_ + self.tn;
        if total == 0 {
            1.0
        } else {
            (self.tp + self.tn) as f64 / total as f64
        }
    }
}

/// IoU (Jaccard) of the foreground; 1.0 when both masks are empty.
pub fn iou(g: &BinaryMask, p: &BinaryMask) -> Result<f64> {
    Ok(PixelCounts::of(g, p)?.iou())
}

/// Mean over foreground and background IoU.
pub fn miou(g: &BinaryMask, p: &BinaryMask) -> Result<f64> {
    let c = PixelCounts::of(g, p)?;
    Ok((c.iou() + c.iou_background()) / 2.0)
}

/// Dice coefficient; 1.0 when both masks are empty.
pub fn dice(g: &BinaryMask, p: &BinaryMask) -> Result<f64> {
    Ok(PixelCounts::of(g, p)?.dice())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub iou: [f64; 2],
    pub miou: f64,
    pub dice: f64,
    pub accuracy: f64,
}

impl SegScores {
    pub fn from_counts(c: &PixelCounts) -> Self {
        let fg = c.iou();
        let bg = c.iou_background();
        Self {
            iou: [bg, fg],
            miou: (fg + bg) / 2.0,
            dice: c.dice(),
            accuracy: c.accuracy(),
        }
    }
}

pub fn seg_scores(g: &BinaryMask, p: &BinaryMask) -> Result<SegScores> {
    Ok(SegScores::from_counts(&PixelCounts::of(g, p)?))
}
