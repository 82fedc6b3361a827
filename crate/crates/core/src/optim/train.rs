use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, backprop, sample_loss, sgd_step, AdamState, LossKind, Sample};
use crate::data::{BinaryMask, Raster, Split};
use crate::error::{Error, Result};
use crate::metrics::{confusion_matrix, PixelCounts, SegScores};
use crate::models::ModelGraph;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossKind,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            loss: LossKind::Dice,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub miou: f64,
    pub accuracy: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,miou,accuracy,dice\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.split, r.loss, r.miou, r.accuracy, r.dice
            ));
        }
        out
    }

    pub fn last(&self, split: Split) -> Option<&LogRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }
}

/// Whether training continues after an epoch callback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochControl {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub miou: f64,
    pub accuracy: f64,
    pub dice: f64,
    pub samples: usize,
}

/// Accumulates per-sample scores for one pass.
struct Scorer {
    segmentation: bool,
    classes: usize,
    seg_sum: [f64; 3],
    seg_n: usize,
    actual: Vec<usize>,
    predicted: Vec<usize>,
}

fn argmax(t: &Tensor) -> usize {
    let mut best = 0;
    for (i, &v) in t.data().iter().enumerate() {
        if v > t.data()[best] {
            best = i;
        }
    }
    best
}

impl Scorer {
    fn new(model: &ModelGraph) -> Self {
        let classes = match model.kind() {
            crate::models::ModelKind::Classifier(c) => c.num_classes,
            crate::models::ModelKind::Linear(c) => c.outputs.max(2),
            crate::models::ModelKind::Unet(_) => 2,
        };
        Self {
            segmentation: model.kind().is_segmentation(),
            classes,
            seg_sum: [0.0; 3],
            seg_n: 0,
            actual: Vec::new(),
            predicted: Vec::new(),
        }
    }

    fn add(&mut self, output: &Tensor, target: &Tensor) -> Result<()> {
        if self.segmentation {
            let (h, w, _) = output.hwc()?;
            let bin = |t: &Tensor| -> Result<BinaryMask> {
                Raster::new(w, h, 1, t.data().iter().map(|&v| u8::from(v >= 0.5)).collect())
            };
            let s = SegScores::from_counts(&PixelCounts::of(&bin(target)?, &bin(output)?)?);
            self.seg_sum[0] += s.miou;
            self.seg_sum[1] += s.accuracy;
            self.seg_sum[2] += s.dice;
            self.seg_n += 1;
        } else {
            self.actual.push(argmax(target));
            self.predicted.push(argmax(output));
        }
        Ok(())
    }

    /// `(miou, accuracy, dice)`. Classification uses per-class label IoU and
    /// macro F1, the label-level analogues of the pixel scores.
    fn finish(&self) -> Result<(f64, f64, f64)> {
        if self.segmentation {
            let n = self.seg_n.max(1) as f64;
            return Ok((self.seg_sum[0] / n, self.seg_sum[1] / n, self.seg_sum[2] / n));
        }
        let names: Vec<String> = (0..self.classes).map(|i| i.to_string()).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let cm = confusion_matrix(&self.actual, &self.predicted, &refs)?;
        let total = cm.total().max(1) as f64;
        let c = self.classes as f64;
        let mut iou = 0.0;
        let mut f1 = 0.0;
        for k in 0..self.classes {
            let (tp, fp, fn_) = (cm.tp(k) as f64, cm.fp(k) as f64, cm.fn_(k) as f64);
            iou += if tp + fp + fn_ == 0.0 { 1.0 } else { tp / (tp + fp + fn_) };
            f1 += if tp + fp + fn_ == 0.0 { 1.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        }
        Ok((iou / c, cm.trace() as f64 / total, f1 / c))
    }
}

/// Mean loss and scores of `model` over `samples`, without updating it.
pub fn evaluate(model: &ModelGraph, samples: &[Sample], loss: LossKind) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let mut scorer = Scorer::new(model);
    let mut total = 0.0;
    for s in samples {
        let (l, out) = sample_loss(model, s, loss)?;
        total += l;
        scorer.add(&out, &s.target)?;
    }
    let (miou, accuracy, dice) = scorer.finish()?;
    Ok(EvalResult {
        loss: total / samples.len() as f64,
        miou,
        accuracy,
        dice,
        samples: samples.len(),
    })
}

/// Mini-batch training with a seeded shuffle per epoch.
///
/// Train rows report running scores over the epoch's batches (outputs taken
/// before each update); val rows evaluate the end-of-epoch weights. The
/// callback runs after each epoch with the epoch number (1-based).
pub fn train(
    model: &mut ModelGraph,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&ModelGraph, &TrainingLog) -> Result<EpochControl>,
) -> Result<TrainingLog> {
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::Config(format!("invalid learning rate {}", cfg.lr)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model, cfg.lr);
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut scorer = Scorer::new(model);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let g = backprop(model, &batch, cfg.loss)?;
            loss_sum += g.loss * batch.len() as f64;
            for (out, s) in g.outputs.iter().zip(&batch) {
                scorer.add(out, &s.target)?;
            }
            match cfg.optimizer {
                OptimizerKind::Adam => adam_step(model, &mut adam)?,
                OptimizerKind::Sgd => sgd_step(model, cfg.lr)?,
            }
        }
        model.meta.epoch += 1;
        let (miou, accuracy, dice) = scorer.finish()?;
        log.rows.push(LogRow {
            epoch,
            split: Split::Train,
            loss: loss_sum / train_set.len() as f64,
            miou,
            accuracy,
            dice,
        });
        if !val_set.is_empty() {
            let e = evaluate(model, val_set, cfg.loss)?;
            log.rows.push(LogRow {
                epoch,
                split: Split::Val,
                loss: e.loss,
                miou: e.miou,
                accuracy: e.accuracy,
                dice: e.dice,
            });
        }
        if on_epoch(model, &log)? == EpochControl::Stop {
            break;
        }
    }
    Ok(log)
}
