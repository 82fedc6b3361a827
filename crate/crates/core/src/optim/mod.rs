//! Optimizers, gradient computation, training loops and meta-learning.

pub mod meta;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelGraph;
use crate::tensor::{Tape, Tensor, Var};

pub use meta::{inner_adapt, meta_outer_step, MetaConfig, MetaOrder, MetaTask};
pub use train::{
    evaluate, train, EpochControl, EvalResult, LogRow, OptimizerKind, TrainConfig, TrainingLog,
};

/// One input with its target: a `[H, W, 1]` mask for segmentation or a
/// one-hot class vector for classification.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub target: Tensor,
}

impl Sample {
    pub fn new(input: Tensor, target: Tensor) -> Self {
        Self { input, target }
    }

    pub fn one_hot(input: Tensor, class: usize, classes: usize) -> Self {
        let target = Tensor::from_fn(&[classes], |i| f64::from(i == class));
        Self { input, target }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Negated soft Dice overlap.
    #[default]
    Dice,
    /// Categorical cross-entropy; binary cross-entropy on sigmoid maps.
    CrossEntropy,
    /// Binary cross-entropy plus negated Dice.
    BceDice,
    /// Sum of squared errors.
    SquaredError,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(LossKind::Dice),
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "bce_dice" => Ok(LossKind::BceDice),
            "squared_error" | "mse" => Ok(LossKind::SquaredError),
            _ => Err(Error::Config(format!("unknown loss {s:?}"))),
        }
    }
}

const DICE_SMOOTH: f64 = 1.0;

pub(crate) fn loss_on(
    tape: &mut Tape,
    kind: LossKind,
    pred: Var,
    target: Var,
    segmentation: bool,
) -> Result<Var> {
    match kind {
        LossKind::Dice => tape.soft_dice_loss(pred, target, DICE_SMOOTH),
        LossKind::CrossEntropy if segmentation => tape.binary_cross_entropy(pred, target),
        LossKind::CrossEntropy => tape.cross_entropy_loss(pred, target),
        LossKind::BceDice => {
            let bce = tape.binary_cross_entropy(pred, target)?;
            let dice = tape.soft_dice_loss(pred, target, DICE_SMOOTH)?;
            tape.add(bce, dice)
        }
        LossKind::SquaredError => tape.squared_error(pred, target),
    }
}

/// Mean loss over a batch and the gradient of that mean for every trainable
/// weight.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    pub grads: BTreeMap<String, Vec<f64>>,
    /// Model output for each sample, computed before any update.
    pub outputs: Vec<Tensor>,
}

/// Runs one tape per sample and sums the scaled gradients in sample order.
pub fn compute_gradients(model: &ModelGraph, samples: &[&Sample], loss: LossKind) -> Result<Gradients> {
    if samples.is_empty() {
        return Err(Error::Data("gradient of an empty batch".into()));
    }
    let seg = model.kind().is_segmentation();
    let scale = 1.0 / samples.len() as f64;
    let mut grads: BTreeMap<String, Vec<f64>> = model
        .weights()
        .iter()
        .filter(|(_, w)| w.requires_grad())
        .map(|(name, w)| (name.clone(), vec![0.0; w.numel()]))
        .collect();
    let mut total = 0.0;
    let mut outputs = Vec::with_capacity(samples.len());
    for s in samples {
        let mut tape = Tape::new();
        let params = model.bind(&mut tape);
        let x = tape.constant(s.input.clone());
        let y = model.forward_on(&mut tape, &params, x)?;
        let t = tape.constant(s.target.clone());
        let l = loss_on(&mut tape, loss, y, t, seg)?;
        total += tape.value(l).item()?;
        tape.backward(l)?;
        for (name, var) in params.iter() {
            if let (Some(acc), Some(g)) = (grads.get_mut(name), tape.grad(var)) {
                acc.iter_mut().zip(g).for_each(|(a, &gv)| *a += scale * gv);
            }
        }
        outputs.push(tape.value(y).clone());
    }
    Ok(Gradients {
        loss: total * scale,
        grads,
        outputs,
    })
}

/// Loss and output for one sample, without tracking gradients.
pub fn sample_loss(model: &ModelGraph, sample: &Sample, loss: LossKind) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let consts: Vec<Var> = model.weights().values().map(|w| tape.constant(w.clone())).collect();
    let params = model.bind_vars(&consts)?;
    let x = tape.constant(sample.input.clone());
    let y = model.forward_on(&mut tape, &params, x)?;
    let t = tape.constant(sample.target.clone());
    let l = loss_on(&mut tape, loss, y, t, model.kind().is_segmentation())?;
    Ok((tape.value(l).item()?, tape.value(y).clone()))
}

/// Clears old gradients and stores the batch gradient on the model weights.
pub fn backprop(model: &mut ModelGraph, samples: &[&Sample], loss: LossKind) -> Result<Gradients> {
    let g = compute_gradients(model, samples, loss)?;
    model.clear_grads();
    for (name, grad) in &g.grads {
        model
            .weight_mut(name)
            .expect("gradient names come from the model")
            .accumulate_grad(grad)?;
    }
    Ok(g)
}

fn trainable_grads(model: &ModelGraph) -> Result<()> {
    for (name, w) in model.weights() {
        if w.requires_grad() && w.grad().is_none() {
            return Err(Error::Contract(format!("weight {name} has no gradient")));
        }
    }
    Ok(())
}

/// `w ← w − lr·grad(w)` for every trainable weight, then clears gradients.
pub fn sgd_step(model: &mut ModelGraph, lr: f64) -> Result<()> {
    trainable_grads(model)?;
    for w in model.weights_mut().values_mut() {
        if !w.requires_grad() {
            continue;
        }
        let g = w.take_grad().expect("checked above");
        w.data_mut().iter_mut().zip(&g).for_each(|(v, gv)| *v -= lr * gv);
    }
    Ok(())
}

/// Adam moments for every weight of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(model: &ModelGraph, lr: f64) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> = model
            .weights()
            .iter()
            .map(|(n, w)| (n.clone(), vec![0.0; w.numel()]))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update; clears gradients.
pub fn adam_step(model: &mut ModelGraph, state: &mut AdamState) -> Result<()> {
    trainable_grads(model)?;
    for (name, w) in model.weights() {
        let ok = state.m.get(name).is_some_and(|m| m.len() == w.numel())
            && state.v.get(name).is_some_and(|v| v.len() == w.numel());
        if !ok {
            return Err(Error::Contract(format!("optimizer state does not match weight {name}")));
        }
    }
    if state.m.len() != model.weights().len() {
        return Err(Error::Contract("optimizer state has extra weights".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (name, w) in model.weights_mut() {
        if !w.requires_grad() {
            continue;
        }
        let g = w.take_grad().expect("checked above");
        let m = state.m.get_mut(name).expect("checked above");
        let v = state.v.get_mut(name).expect("checked above");
        for (i, p) in w.data_mut().iter_mut().enumerate() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *p -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
