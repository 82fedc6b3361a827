//! Gradient-based meta-learning: per-task inner adaptation on a support set,
//! outer update of the shared initialization from query losses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{compute_gradients, evaluate, LossKind, Sample};
use crate::error::{Error, Result};
use crate::models::ModelGraph;

/// Support set for adaptation and a disjoint query set for the outer loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaTask {
    pub support: Vec<Sample>,
    pub query: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaOrder {
    /// Query gradient taken at the adapted weights and applied to θ directly.
    #[default]
    First,
    /// Query gradient pulled back through the inner steps.
    Second,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Inner learning rate α.
    pub inner_lr: f64,
    /// Outer learning rate β.
    pub outer_lr: f64,
    /// Inner steps P.
    pub inner_steps: usize,
    /// Support samples per class N.
    pub shots: usize,
    pub tasks_per_batch: usize,
    pub order: MetaOrder,
    pub loss: LossKind,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.1,
            outer_lr: 0.01,
            inner_steps: 5,
            shots: 5,
            tasks_per_batch: 4,
            order: MetaOrder::First,
            loss: LossKind::CrossEntropy,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::Config("meta-learning needs at least one inner step".into()));
        }
        if !(self.inner_lr >= 0.0 && self.outer_lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

type Direction = BTreeMap<String, Vec<f64>>;

fn step(model: &mut ModelGraph, dir: &Direction, scale: f64) {
    for (name, d) in dir {
        if let Some(w) = model.weight_mut(name) {
            w.data_mut().iter_mut().zip(d).for_each(|(v, dv)| *v += scale * dv);
        }
    }
}

fn refs(samples: &[Sample]) -> Vec<&Sample> {
    samples.iter().collect()
}

fn norm(d: &Direction) -> f64 {
    d.values().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

/// Weights after `inner_steps` gradient steps on the support loss, each
/// evaluated at the current task weights. `model` is left untouched.
pub fn inner_adapt(model: &ModelGraph, task: &MetaTask, cfg: &MetaConfig) -> Result<ModelGraph> {
    Ok(adapt_path(model, task, cfg)?.pop().expect("at least one step"))
}

/// `[θ⁰, θ¹, …, θᴾ]` of one task.
fn adapt_path(model: &ModelGraph, task: &MetaTask, cfg: &MetaConfig) -> Result<Vec<ModelGraph>> {
    cfg.validate()?;
    if task.support.is_empty() {
        return Err(Error::Data("meta task has an empty support set".into()));
    }
    let support = refs(&task.support);
    let mut path = vec![model.clone()];
    for _ in 0..cfg.inner_steps {
        let mut next = path.last().expect("non-empty").clone();
        let g = compute_gradients(&next, &support, cfg.loss)?;
        step(&mut next, &g.grads, -cfg.inner_lr);
        path.push(next);
    }
    Ok(path)
}

/// Hessian of the support loss at `at` times `v`, by central differences of
/// gradients along `v`.
fn hessian_vector(at: &ModelGraph, support: &[&Sample], loss: LossKind, v: &Direction) -> Result<Direction> {
    let vn = norm(v);
    if vn == 0.0 {
        return Ok(v.clone());
    }
    let theta_norm = at.weights().values().flat_map(|w| w.data()).map(|x| x * x).sum::<f64>().sqrt();
    let eps = 1e-5 * (1.0 + theta_norm) / vn;
    let mut plus = at.clone();
    step(&mut plus, v, eps);
    let mut minus = at.clone();
    step(&mut minus, v, -eps);
    let gp = compute_gradients(&plus, support, loss)?.grads;
    let gm = compute_gradients(&minus, support, loss)?.grads;
    Ok(gp
        .into_iter()
        .map(|(name, a)| {
            let b = &gm[&name];
            let hv = a.iter().zip(b).map(|(x, y)| (x - y) / (2.0 * eps)).collect();
            (name, hv)
        })
        .collect())
}

/// One outer update `θ ← θ − β · mean_i ∇L_Q(θᵢᴾ)` over `tasks`, reduced in
/// task order. Returns the mean query loss at the adapted weights.
pub fn meta_outer_step(model: &mut ModelGraph, tasks: &[MetaTask], cfg: &MetaConfig) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::Contract("meta_outer_step needs at least one task".into()));
    }
    cfg.validate()?;
    let mut total: Direction = BTreeMap::new();
    let mut loss = 0.0;
    let scale = 1.0 / tasks.len() as f64;
    for task in tasks {
        if task.query.is_empty() {
            return Err(Error::Data("meta task has an empty query set".into()));
        }
        let path = adapt_path(model, task, cfg)?;
        let q = compute_gradients(path.last().expect("non-empty"), &refs(&task.query), cfg.loss)?;
        loss += q.loss * scale;
        let mut g = q.grads;
        if cfg.order == MetaOrder::Second {
            let support = refs(&task.support);
            // dθʲ/dθʲ⁻¹ = I − α·H(θʲ⁻¹), applied from the last step back.
            for theta in path[..cfg.inner_steps].iter().rev() {
                let hv = hessian_vector(theta, &support, cfg.loss, &g)?;
                for (name, gv) in g.iter_mut() {
                    gv.iter_mut().zip(&hv[name]).for_each(|(a, h)| *a -= cfg.inner_lr * h);
                }
            }
        }
        for (name, gv) in g {
            let acc = total.entry(name).or_insert_with(|| vec![0.0; gv.len()]);
            acc.iter_mut().zip(&gv).for_each(|(a, v)| *a += scale * v);
        }
    }
    step(model, &total, -cfg.outer_lr);
    Ok(loss)
}

/// Query accuracy after adapting `model` to the task's support set.
pub fn adapted_query_accuracy(model: &ModelGraph, task: &MetaTask, cfg: &MetaConfig) -> Result<f64> {
    let adapted = inner_adapt(model, task, cfg)?;
    Ok(evaluate(&adapted, &task.query, cfg.loss)?.accuracy)
}
