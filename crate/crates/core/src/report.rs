//! Evaluation records and the summary tables built from them.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::Split;
use crate::error::{Error, Result};
use crate::metrics::ClassReport;
use crate::optim::{EvalResult, TrainingLog};

/// Marker written in place of scores for an empty evaluation set.
pub const NO_SAMPLES: &str = "no samples";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Segmentation,
    Classification,
}

/// Result of evaluating one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task: Task,
    pub split: Split,
    /// Training batch size of the evaluated model, when known.
    pub batch_size: Option<usize>,
    pub samples: usize,
    pub status: String,
    pub result: Option<EvalResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_report: Option<ClassReport>,
    /// Configuration that produced the evaluated model and this run.
    pub config: Value,
}

impl EvalRecord {
    pub fn new(task: Task, split: Split, batch_size: Option<usize>, result: Option<EvalResult>, config: Value) -> Self {
        Self {
            task,
            split,
            batch_size,
            samples: result.map_or(0, |r| r.samples),
            status: if result.is_some() { "ok".into() } else { NO_SAMPLES.into() },
            result,
            class_report: None,
            config,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.result.is_none()
    }
}

/// One row of the loss / mean IoU / accuracy / Dice table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub split: Split,
    pub batch_size: Option<usize>,
    pub samples: usize,
    pub loss: Option<f64>,
    pub mean_iou: Option<f64>,
    pub accuracy: Option<f64>,
    pub dice: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub task: Task,
    pub rows: Vec<ScoreRow>,
    /// Per-record configurations, in row order.
    pub configs: Vec<Value>,
}

const SPLIT_ORDER: [Split; 3] = [Split::Train, Split::Val, Split::Test];

impl ScoreTable {
    /// Rows sorted by batch size, then train/val/test.
    pub fn from_records(records: &[EvalRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Data("no evaluation records to report".into()))?;
        if records.iter().any(|r| r.task != first.task) {
            return Err(Error::Data("cannot mix segmentation and classification records".into()));
        }
        let mut sorted: Vec<&EvalRecord> = records.iter().collect();
        sorted.sort_by_key(|r| (r.batch_size, SPLIT_ORDER.iter().position(|&s| s == r.split)));
        let rows = sorted
            .iter()
            .map(|r| ScoreRow {
                split: r.split,
                batch_size: r.batch_size,
                samples: r.samples,
                loss: r.result.map(|e| e.loss),
                mean_iou: r.result.map(|e| e.miou),
                accuracy: r.result.map(|e| e.accuracy),
                dice: r.result.map(|e| e.dice),
                status: r.status.clone(),
            })
            .collect();
        Ok(Self {
            task: first.task,
            rows,
            configs: sorted.iter().map(|r| r.config.clone()).collect(),
        })
    }

    pub fn has_empty(&self) -> bool {
        self.rows.iter().any(|r| r.status == NO_SAMPLES)
    }

    /// `split,batch_size,loss,mean_iou,accuracy,dice`; empty sets show the
    /// marker in every score cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,batch_size,loss,mean_iou,accuracy,dice\n");
        for r in &self.rows {
            let batch = r.batch_size.map_or(String::new(), |b| b.to_string());
            let cell = |v: Option<f64>| v.map_or(NO_SAMPLES.to_string(), |x| format!("{x:.6}"));
            out.push_str(&format!(
                "{},{batch},{},{},{},{}\n",
                r.split,
                cell(r.loss),
                cell(r.mean_iou),
                cell(r.accuracy),
                cell(r.dice)
            ));
        }
        out
    }
}

/// Long-format curve series `metric,split,epoch,value` for plotting.
pub fn curves_csv(log: &TrainingLog) -> String {
    let mut out = String::from("metric,split,epoch,value\n");
    let metrics: [(&str, fn(&crate::optim::LogRow) -> f64); 4] = [
        ("loss", |r| r.loss),
        ("mean_iou", |r| r.miou),
        ("accuracy", |r| r.accuracy),
        ("dice", |r| r.dice),
    ];
    for (name, get) in metrics {
        for r in &log.rows {
            out.push_str(&format!("{name},{},{},{}\n", r.split, r.epoch, get(r)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::LogRow;
    use serde_json::json;

    fn eval(loss: f64) -> EvalResult {
        EvalResult {
            loss,
            miou: 0.5,
            accuracy: 0.9,
            dice: 0.4,
            samples: 3,
        }
    }

    #[test]
    fn rows_follow_batch_then_split_order() {
        let mut records = Vec::new();
        for batch in [16, 8] {
            for split in [Split::Test, Split::Train, Split::Val] {
                records.push(EvalRecord::new(Task::Segmentation, split, Some(batch), Some(eval(1.0)), json!({"b": batch})));
            }
        }
        let t = ScoreTable::from_records(&records).unwrap();
        let order: Vec<(Option<usize>, Split)> = t.rows.iter().map(|r| (r.batch_size, r.split)).collect();
        assert_eq!(
            order,
            vec![
                (Some(8), Split::Train),
                (Some(8), Split::Val),
                (Some(8), Split::Test),
                (Some(16), Split::Train),
                (Some(16), Split::Val),
                (Some(16), Split::Test),
            ]
        );
        assert_eq!(t.configs[0], json!({"b": 8}));
        let csv = t.to_csv();
        assert!(csv.starts_with("split,batch_size,loss,mean_iou,accuracy,dice\ntrain,8,1.000000,0.500000,0.900000,0.400000\n"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn empty_set_is_marked() {
        let r = EvalRecord::new(Task::Segmentation, Split::Test, None, None, Value::Null);
        assert!(r.is_empty());
        let t = ScoreTable::from_records(&[r]).unwrap();
        assert!(t.has_empty());
        assert_eq!(t.to_csv().lines().nth(1).unwrap(), "test,,no samples,no samples,no samples,no samples");
        assert!(ScoreTable::from_records(&[]).is_err());
    }

    #[test]
    fn curves_are_long_format() {
        let log = TrainingLog {
            rows: vec![LogRow {
                epoch: 1,
                split: Split::Train,
                loss: 0.5,
                miou: 0.25,
                accuracy: 0.75,
                dice: 0.125,
            }],
        };
        assert_eq!(
            curves_csv(&log),
            "metric,split,epoch,value\nloss,train,1,0.5\nmean_iou,train,1,0.25\naccuracy,train,1,0.75\ndice,train,1,0.125\n"
        );
    }
}
