//! Network architectures assembled from tape primitives.
//!
//! A [`ModelGraph`] is a flat list of [`Layer`]s interpreted in order plus a
//! name-keyed map of weight tensors. Skip connections use a stack: a pooling
//! layer with `keep_skip` pushes its input, and each [`Layer::Concat`] pops
//! the most recent entry.

mod build;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Activation, OutputActivation, Padding, Tape, Tensor, Var};

pub use build::{build_classifier, build_linear, build_unet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of encoder stages.
    pub depth: usize,
    /// Filters of the first stage; stage `s` uses `base_filters << s`.
    pub base_filters: usize,
    #[serde(default)]
    pub padding: Padding,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            out_channels: 1,
            depth: 3,
            base_filters: 8,
            padding: Padding::Same,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Cnn,
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Conv (or residual) blocks, each followed by 2×2 max pooling.
    pub blocks: usize,
    pub base_filters: usize,
    /// Square input side length.
    pub input_size: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            kind: ClassifierKind::Residual,
            in_channels: 3,
            num_classes: 2,
            blocks: 3,
            base_filters: 8,
            input_size: 512,
        }
    }
}

/// Single affine layer, used for small analytic experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearConfig {
    pub inputs: usize,
    pub outputs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum ModelKind {
    Unet(UNetConfig),
    Classifier(ClassifierConfig),
    Linear(LinearConfig),
}

impl ModelKind {
    pub fn is_segmentation(&self) -> bool {
        matches!(self, ModelKind::Unet(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        name: String,
        kernel: usize,
        in_ch: usize,
        out_ch: usize,
        padding: Padding,
        act: Activation,
    },
    MaxPool {
        keep_skip: bool,
    },
    UpConv {
        name: String,
        in_ch: usize,
        out_ch: usize,
        act: Activation,
    },
    Concat,
    /// conv-relu, conv, add shortcut (1×1 projection when channels change), relu.
    Residual {
        name: String,
        in_ch: usize,
        out_ch: usize,
    },
    GlobalAvgPool,
    Dense {
        name: String,
        inputs: usize,
        outputs: usize,
        act: Activation,
    },
    Sigmoid,
    Softmax,
}

impl Layer {
    /// Short tag used in layer listings.
    pub fn tag(&self) -> &'static str {
        match self {
            Layer::Conv { kernel: 1, .. } => "conv1x1",
            Layer::Conv { .. } => "conv",
            Layer::MaxPool { .. } => "pool",
            Layer::UpConv { .. } => "upconv",
            Layer::Concat => "concat",
            Layer::Residual { .. } => "residual",
            Layer::GlobalAvgPool => "gap",
            Layer::Dense { .. } => "dense",
            Layer::Sigmoid => "sigmoid",
            Layer::Softmax => "softmax",
        }
    }
}

/// Run metadata stored with the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub seed: u64,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    kind: ModelKind,
    layers: Vec<Layer>,
    weights: BTreeMap<String, Tensor>,
    pub meta: ModelMeta,
}

/// Tape handles for every weight of a model, keyed by weight name.
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("weight {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ModelGraph {
    pub(crate) fn from_parts(
        kind: ModelKind,
        layers: Vec<Layer>,
        weights: BTreeMap<String, Tensor>,
        meta: ModelMeta,
    ) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for layer in &layers {
            if let Some(name) = layer_name(layer) {
                if !seen.insert(name.to_owned()) {
                    return Err(Error::Contract(format!("duplicate layer name {name}")));
                }
            }
        }
        Ok(Self {
            kind,
            layers,
            weights,
            meta,
        })
    }

    /// Builds the architecture described by `kind` with seeded weights.
    pub fn build(kind: ModelKind, seed: u64) -> Result<Self> {
        match kind {
            ModelKind::Unet(cfg) => build_unet(cfg, seed),
            ModelKind::Classifier(cfg) => build_classifier(cfg, seed),
            ModelKind::Linear(cfg) => build_linear(cfg, seed),
        }
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_tags(&self) -> Vec<&'static str> {
        self.layers.iter().map(Layer::tag).collect()
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.weights
    }

    pub fn weight(&self, name: &str) -> Option<&Tensor> {
        self.weights.get(name)
    }

    pub fn weight_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.weights.get_mut(name)
    }

    pub fn param_count(&self) -> usize {
        self.weights.values().map(Tensor::numel).sum()
    }

    /// Replaces every weight's values. Shapes and names must match.
    pub fn load_values(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        if values.len() != self.weights.len() {
            return Err(Error::Contract(format!(
                "expected {} weights, got {}",
                self.weights.len(),
                values.len()
            )));
        }
        for (name, w) in &mut self.weights {
            let src = values
                .get(name)
                .ok_or_else(|| Error::Contract(format!("missing weight {name}")))?;
            if src.shape() != w.shape() {
                return Err(Error::Contract(format!(
                    "weight {name}: shape {:?} vs {:?}",
                    src.shape(),
                    w.shape()
                )));
            }
            w.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.weights.values_mut().for_each(Tensor::clear_grad);
    }

    /// Marks everything except the classification head as frozen.
    pub fn freeze_backbone(&mut self) {
        for (name, w) in &mut self.weights {
            w.set_requires_grad(name.starts_with("head."));
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.weights.values_mut().for_each(|w| w.set_requires_grad(true));
    }

    /// Records all weights on `tape`. Frozen weights become constants.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let vars = self
            .weights
            .iter()
            .map(|(name, w)| (name.clone(), tape.leaf(w.clone())))
            .collect();
        Bindings { vars }
    }

    /// Pairs already-recorded variables with weight names, in name order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bindings> {
        if vars.len() != self.weights.len() {
            return Err(Error::Contract(format!(
                "expected {} weight variables, got {}",
                self.weights.len(),
                vars.len()
            )));
        }
        let vars = self.weights.keys().cloned().zip(vars.iter().copied()).collect();
        Ok(Bindings { vars })
    }

    /// Expected input shape, when the architecture fixes one.
    pub fn input_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            ModelKind::Classifier(c) => Some(vec![c.input_size, c.input_size, c.in_channels]),
            ModelKind::Linear(c) => Some(vec![c.inputs]),
            ModelKind::Unet(_) => None,
        }
    }

    /// Shape after each layer for an input of shape `input`, checking that
    /// every layer's declared channel count matches its predecessor.
    pub fn output_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let spatial = |s: &[usize]| -> Result<(usize, usize, usize)> {
            match s {
                &[h, w, c] => Ok((h, w, c)),
                _ => Err(Error::dim("model", format!("expected [H, W, C], got {s:?}"))),
            }
        };
        let check_ch = |name: &str, want: usize, got: usize| -> Result<()> {
            if want != got {
                return Err(Error::dim(
                    "model",
                    format!("layer {name} expects {want} channels, predecessor gives {got}"),
                ));
            }
            Ok(())
        };
        let mut cur = input.to_vec();
        let mut skips: Vec<Vec<usize>> = Vec::new();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv {
                    name,
                    kernel,
                    in_ch,
                    out_ch,
                    padding,
                    ..
                } => {
                    let (h, w, c) = spatial(&cur)?;
                    check_ch(name, *in_ch, c)?;
                    let shrink = match padding {
                        Padding::Same => 0,
                        Padding::Valid => kernel - 1,
                    };
                    if h <= shrink || w <= shrink {
                        return Err(Error::dim("model", format!("layer {name}: {h}x{w} too small")));
                    }
                    vec![h - shrink, w - shrink, *out_ch]
                }
                Layer::MaxPool { keep_skip } => {
                    let (h, w, c) = spatial(&cur)?;
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::dim("model", format!("pooling needs even dims, got {h}x{w}")));
                    }
                    if *keep_skip {
                        skips.push(cur.clone());
                    }
                    vec![h / 2, w / 2, c]
                }
                Layer::UpConv {
                    name, in_ch, out_ch, ..
                } => {
                    let (h, w, c) = spatial(&cur)?;
                    check_ch(name, *in_ch, c)?;
                    vec![2 * h, 2 * w, *out_ch]
                }
                Layer::Concat => {
                    let (h, w, c) = spatial(&cur)?;
                    let skip = skips
                        .pop()
                        .ok_or_else(|| Error::Contract("concat without a saved skip".into()))?;
                    let (sh, sw, sc) = spatial(&skip)?;
                    if sh < h || sw < w {
                        return Err(Error::dim("model", format!("skip {sh}x{sw} smaller than {h}x{w}")));
                    }
                    vec![h, w, c + sc]
                }
                Layer::Residual {
                    name, in_ch, out_ch, ..
                } => {
                    let (h, w, c) = spatial(&cur)?;
                    check_ch(name, *in_ch, c)?;
                    vec![h, w, *out_ch]
                }
                Layer::GlobalAvgPool => {
                    let (_, _, c) = spatial(&cur)?;
                    vec![c]
                }
                Layer::Dense {
                    name,
                    inputs,
                    outputs,
                    ..
                } => {
                    let n: usize = cur.iter().product();
                    check_ch(name, *inputs, n)?;
                    vec![*outputs]
                }
                Layer::Sigmoid | Layer::Softmax => cur.clone(),
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    /// Records the forward pass of `input` on `tape`.
    pub fn forward_on(&self, tape: &mut Tape, params: &Bindings, input: Var) -> Result<Var> {
        let in_shape = tape.shape(input).to_vec();
        if let Some(want) = self.input_shape() {
            if in_shape != want {
                return Err(Error::dim(
                    "forward",
                    format!("model expects input {want:?}, got {in_shape:?}"),
                ));
            }
        }
        self.output_shapes(&in_shape)?;
        let mut x = input;
        let mut skips = Vec::new();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv {
                    name,
                    kernel,
                    padding,
                    act,
                    ..
                } => {
                    let w = params.get(&format!("{name}.w"))?;
                    let b = params.get(&format!("{name}.b"))?;
                    if *kernel == 1 {
                        let y = tape.conv1x1(x, w, b)?;
                        match act {
                            Activation::Relu => tape.relu(y)?,
                            Activation::None => y,
                        }
                    } else {
                        tape.conv2d(x, w, b, *padding, *act)?
                    }
                }
                Layer::MaxPool { keep_skip } => {
                    if *keep_skip {
                        skips.push(x);
                    }
                    tape.maxpool2(x)?
                }
                Layer::UpConv { name, act, .. } => {
                    let w = params.get(&format!("{name}.w"))?;
                    let b = params.get(&format!("{name}.b"))?;
                    tape.upconv2(x, w, b, *act)?
                }
                Layer::Concat => {
                    let skip = skips
                        .pop()
                        .ok_or_else(|| Error::Contract("concat without a saved skip".into()))?;
                    let (h, w, _) = tape.value(x).hwc()?;
                    let (sh, sw, _) = tape.value(skip).hwc()?;
                    let skip = if (sh, sw) == (h, w) {
                        skip
                    } else {
                        tape.crop_center(skip, h, w)?
                    };
                    tape.concat_channels(skip, x)?
                }
                Layer::Residual { name, in_ch, out_ch } => {
                    let w1 = params.get(&format!("{name}.conv1.w"))?;
                    let b1 = params.get(&format!("{name}.conv1.b"))?;
                    let w2 = params.get(&format!("{name}.conv2.w"))?;
                    let b2 = params.get(&format!("{name}.conv2.b"))?;
                    let r = tape.conv2d(x, w1, b1, Padding::Same, Activation::Relu)?;
                    let r = tape.conv2d(r, w2, b2, Padding::Same, Activation::None)?;
                    let shortcut = if in_ch != out_ch {
                        let pw = params.get(&format!("{name}.proj.w"))?;
                        let pb = params.get(&format!("{name}.proj.b"))?;
                        tape.conv1x1(x, pw, pb)?
                    } else {
                        x
                    };
                    let sum = tape.add(r, shortcut)?;
                    tape.relu(sum)?
                }
                Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
                Layer::Dense { name, act, .. } => {
                    let w = params.get(&format!("{name}.w"))?;
                    let b = params.get(&format!("{name}.b"))?;
                    tape.dense(x, w, b, *act)?
                }
                Layer::Sigmoid => tape.activate(x, OutputActivation::Sigmoid)?,
                Layer::Softmax => tape.activate(x, OutputActivation::Softmax)?,
            };
        }
        Ok(x)
    }

    /// Inference: runs the model on `input` and returns its output.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind_frozen(&mut tape);
        let x = tape.constant(input.clone());
        let y = self.forward_on(&mut tape, &params, x)?;
        Ok(tape.value(y).clone())
    }

    fn bind_frozen(&self, tape: &mut Tape) -> Bindings {
        let vars = self
            .weights
            .iter()
            .map(|(name, w)| (name.clone(), tape.constant(w.clone())))
            .collect();
        Bindings { vars }
    }
}

fn layer_name(layer: &Layer) -> Option<&str> {
    match layer {
        Layer::Conv { name, .. }
        | Layer::UpConv { name, .. }
        | Layer::Residual { name, .. }
        | Layer::Dense { name, .. } => Some(name),
        _ => None,
    }
}

#[cfg(test)]
mod tests;
