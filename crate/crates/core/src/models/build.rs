use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    ClassifierConfig, ClassifierKind, Layer, LinearConfig, ModelGraph, ModelKind, ModelMeta,
    UNetConfig,
};
use crate::error::{Error, Result};
use crate::tensor::{Activation, Padding, Tensor};

/// He-normal weights, zero biases, drawn in layer order from one stream.
struct Init {
    rng: ChaCha8Rng,
    weights: BTreeMap<String, Tensor>,
}

impl Init {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            weights: BTreeMap::new(),
        }
    }

    fn add(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let rng = &mut self.rng;
        let w = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .with_requires_grad(true);
        let out = *shape.last().unwrap_or(&1);
        self.weights.insert(format!("{name}.w"), w);
        self.weights.insert(
            format!("{name}.b"),
            Tensor::zeros(&[out]).with_requires_grad(true),
        );
    }

    fn conv(&mut self, layers: &mut Vec<Layer>, name: String, kernel: usize, in_ch: usize, out_ch: usize, padding: Padding, act: Activation) {
        self.add(&name, &[kernel, kernel, in_ch, out_ch], kernel * kernel * in_ch);
        layers.push(Layer::Conv {
            name,
            kernel,
            in_ch,
            out_ch,
            padding,
            act,
        });
    }
}

/// Encoder of `depth` stages (two 3×3 conv-relu then pooling), a two-conv
/// bottleneck, a mirrored decoder (up-convolution, skip concatenation, two
/// conv-relu) and a 1×1 convolution with sigmoid output.
pub fn build_unet(cfg: UNetConfig, seed: u64) -> Result<ModelGraph> {
    if cfg.depth == 0 || cfg.base_filters == 0 || cfg.in_channels == 0 || cfg.out_channels == 0 {
        return Err(Error::Config(format!("invalid U-Net config {cfg:?}")));
    }
    let f = |s: usize| cfg.base_filters << s;
    let mut init = Init::new(seed);
    let mut layers = Vec::new();
    let pad = cfg.padding;
    let mut ch = cfg.in_channels;
    for s in 0..cfg.depth {
        init.conv(&mut layers, format!("enc{s}.conv1"), 3, ch, f(s), pad, Activation::Relu);
        init.conv(&mut layers, format!("enc{s}.conv2"), 3, f(s), f(s), pad, Activation::Relu);
        layers.push(Layer::MaxPool { keep_skip: true });
        ch = f(s);
    }
    let bottom = f(cfg.depth);
    init.conv(&mut layers, "bottleneck.conv1".into(), 3, ch, bottom, pad, Activation::Relu);
    init.conv(&mut layers, "bottleneck.conv2".into(), 3, bottom, bottom, pad, Activation::Relu);
    ch = bottom;
    for s in (0..cfg.depth).rev() {
        let name = format!("dec{s}.up");
        init.add(&name, &[2, 2, ch, f(s)], ch);
        layers.push(Layer::UpConv {
            name,
            in_ch: ch,
            out_ch: f(s),
            act: Activation::Relu,
        });
        layers.push(Layer::Concat);
        init.conv(&mut layers, format!("dec{s}.conv1"), 3, 2 * f(s), f(s), pad, Activation::Relu);
        init.conv(&mut layers, format!("dec{s}.conv2"), 3, f(s), f(s), pad, Activation::Relu);
        ch = f(s);
    }
    init.conv(&mut layers, "out".into(), 1, ch, cfg.out_channels, Padding::Valid, Activation::None);
    layers.push(Layer::Sigmoid);
    ModelGraph::from_parts(
        ModelKind::Unet(cfg),
        layers,
        init.weights,
        ModelMeta { seed, epoch: 0 },
    )
}

/// `blocks` × (conv-relu or residual block, then 2×2 pooling), global
/// average pooling, a dense head and softmax.
pub fn build_classifier(cfg: ClassifierConfig, seed: u64) -> Result<ModelGraph> {
    if cfg.num_classes < 2 {
        return Err(Error::Config("a classifier needs at least two classes".into()));
    }
    if cfg.blocks == 0 || cfg.base_filters == 0 || cfg.in_channels == 0 {
        return Err(Error::Config(format!("invalid classifier config {cfg:?}")));
    }
    if cfg.input_size == 0 || !cfg.input_size.is_multiple_of(1 << cfg.blocks) {
        return Err(Error::Config(format!(
            "input size {} is not divisible by 2^{}",
            cfg.input_size, cfg.blocks
        )));
    }
    let mut init = Init::new(seed);
    let mut layers = Vec::new();
    let mut ch = cfg.in_channels;
    for s in 0..cfg.blocks {
        let out = cfg.base_filters << s;
        match cfg.kind {
            ClassifierKind::Cnn => {
                init.conv(&mut layers, format!("block{s}.conv"), 3, ch, out, Padding::Same, Activation::Relu);
            }
            ClassifierKind::Residual => {
                let name = format!("block{s}");
                init.add(&format!("{name}.conv1"), &[3, 3, ch, out], 9 * ch);
                init.add(&format!("{name}.conv2"), &[3, 3, out, out], 9 * out);
                if ch != out {
                    init.add(&format!("{name}.proj"), &[1, 1, ch, out], ch);
                }
                layers.push(Layer::Residual {
                    name,
                    in_ch: ch,
                    out_ch: out,
                });
            }
        }
        layers.push(Layer::MaxPool { keep_skip: false });
        ch = out;
    }
    layers.push(Layer::GlobalAvgPool);
    init.add("head", &[ch, cfg.num_classes], ch);
    layers.push(Layer::Dense {
        name: "head".into(),
        inputs: ch,
        outputs: cfg.num_classes,
        act: Activation::None,
    });
    layers.push(Layer::Softmax);
    ModelGraph::from_parts(
        ModelKind::Classifier(cfg),
        layers,
        init.weights,
        ModelMeta { seed, epoch: 0 },
    )
}

pub fn build_linear(cfg: LinearConfig, seed: u64) -> Result<ModelGraph> {
    if cfg.inputs == 0 || cfg.outputs == 0 {
        return Err(Error::Config(format!("invalid linear config {cfg:?}")));
    }
    let mut init = Init::new(seed);
    init.add("linear", &[cfg.inputs, cfg.outputs], cfg.inputs);
    let layers = vec![Layer::Dense {
        name: "linear".into(),
        inputs: cfg.inputs,
        outputs: cfg.outputs,
        act: Activation::None,
    }];
    ModelGraph::from_parts(
        ModelKind::Linear(cfg),
        layers,
        init.weights,
        ModelMeta { seed, epoch: 0 },
    )
}
