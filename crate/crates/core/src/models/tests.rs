use proptest::prelude::*;

use super::*;
use crate::tensor::grad_check_sampled;

fn unet(depth: usize, f: usize, in_ch: usize, out_ch: usize) -> UNetConfig {
    UNetConfig {
        in_channels: in_ch,
        out_channels: out_ch,
        depth,
        base_filters: f,
        padding: Padding::Same,
    }
}

fn small_classifier(kind: ClassifierKind) -> ClassifierConfig {
    ClassifierConfig {
        kind,
        in_channels: 3,
        num_classes: 2,
        blocks: 2,
        base_filters: 4,
        input_size: 16,
    }
}

/// Counts U-Net parameters straight from the stage description.
fn unet_params_by_hand(d: usize, f: usize, cin: usize, cout: usize) -> usize {
    let conv3 = |i: usize, o: usize| 9 * i * o + o;
    let mut total = 0;
    let mut prev = cin;
    for s in 0..d {
        let fs = f * 2usize.pow(s as u32);
        total += conv3(prev, fs) + conv3(fs, fs);
        prev = fs;
    }
    let fb = f * 2usize.pow(d as u32);
    total += conv3(prev, fb) + conv3(fb, fb);
    prev = fb;
    for s in (0..d).rev() {
        let fs = f * 2usize.pow(s as u32);
        total += 4 * prev * fs + fs;
        total += conv3(2 * fs, fs) + conv3(fs, fs);
        prev = fs;
    }
    total + prev * cout + cout
}

#[test]
fn micro_unet_layer_sequence() {
    let m = build_unet(unet(1, 1, 1, 1), 0).unwrap();
    assert_eq!(
        m.layer_tags(),
        ["conv", "conv", "pool", "conv", "conv", "upconv", "concat", "conv", "conv", "conv1x1", "sigmoid"]
    );
}

#[test]
fn unet_param_counts() {
    assert_eq!(build_unet(unet(1, 1, 1, 1), 0).unwrap().param_count(), 118);
    assert_eq!(build_unet(unet(1, 2, 1, 1), 0).unwrap().param_count(), 431);
    let m = build_unet(UNetConfig::default(), 0).unwrap();
    assert_eq!(m.param_count(), unet_params_by_hand(3, 8, 3, 1));
}

#[test]
fn single_layer_param_counts() {
    let dense = build_linear(LinearConfig { inputs: 2, outputs: 3 }, 0).unwrap();
    assert_eq!(dense.param_count(), 9);
    let conv = ModelGraph::from_parts(
        ModelKind::Linear(LinearConfig { inputs: 1, outputs: 1 }),
        vec![],
        [
            ("c.w".to_string(), Tensor::zeros(&[3, 3, 1, 1])),
            ("c.b".to_string(), Tensor::zeros(&[1])),
        ]
        .into(),
        ModelMeta { seed: 0, epoch: 0 },
    )
    .unwrap();
    assert_eq!(conv.param_count(), 10);
}

#[test]
fn build_is_deterministic() {
    let a = build_unet(UNetConfig::default(), 7).unwrap();
    let b = build_unet(UNetConfig::default(), 7).unwrap();
    for (name, w) in a.weights() {
        let v = b.weight(name).unwrap();
        let same = w.data().iter().zip(v.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "{name}");
    }
    let c = build_unet(UNetConfig::default(), 8).unwrap();
    assert_ne!(a.weight("enc0.conv1.w"), c.weight("enc0.conv1.w"));
}

#[test]
fn he_init_scale() {
    let m = build_unet(unet(2, 16, 3, 1), 3).unwrap();
    let w = m.weight("enc1.conv2.w").unwrap();
    let n = w.numel() as f64;
    let var = w.data().iter().map(|x| x * x).sum::<f64>() / n;
    let want = 2.0 / (9.0 * 32.0);
    assert!((var / want - 1.0).abs() < 0.1, "{var} vs {want}");
    assert!(m.weight("enc1.conv2.b").unwrap().data().iter().all(|&b| b == 0.0));
}

#[test]
fn zero_weight_unet_outputs_half() {
    let mut m = build_unet(unet(2, 2, 3, 1), 1).unwrap();
    for w in m.weights_mut().values_mut() {
        w.data_mut().fill(0.0);
    }
    let x = Tensor::from_fn(&[8, 8, 3], |i| (i as f64).sin());
    let y = m.forward(&x).unwrap();
    assert_eq!(y.shape(), &[8, 8, 1]);
    assert!(y.data().iter().all(|&v| v == 0.5));
}

#[test]
fn unet_preserves_spatial_dims() {
    let m = build_unet(UNetConfig::default(), 2).unwrap();
    let x = Tensor::from_fn(&[64, 64, 3], |i| ((i * 31) % 17) as f64 / 17.0);
    let y = m.forward(&x).unwrap();
    assert_eq!(y.shape(), &[64, 64, 1]);
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn unet_rejects_indivisible_input() {
    let m = build_unet(UNetConfig::default(), 2).unwrap();
    let err = m.forward(&Tensor::zeros(&[60, 64, 3])).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }), "{err}");
}

#[test]
fn stage_channels_follow_doubling_rule() {
    let m = build_unet(UNetConfig::default(), 0).unwrap();
    let shapes = m.output_shapes(&[32, 32, 3]).unwrap();
    let pools: Vec<_> = m
        .layers()
        .iter()
        .zip(&shapes)
        .enumerate()
        .filter(|(_, (l, _))| matches!(l, Layer::MaxPool { .. }))
        .map(|(i, _)| shapes[i - 1][2])
        .collect();
    assert_eq!(pools, [8, 16, 32]);
    let concats: Vec<_> = m
        .layers()
        .iter()
        .zip(&shapes)
        .filter(|(l, _)| matches!(l, Layer::Concat))
        .map(|(_, s)| s[2])
        .collect();
    assert_eq!(concats, [64, 32, 16]);
}

#[test]
fn valid_padding_unet_crops_skips() {
    let cfg = UNetConfig {
        padding: Padding::Valid,
        ..unet(1, 2, 1, 1)
    };
    let m = build_unet(cfg, 0).unwrap();
    // 20 → 16 → pool 8 → 4 → up 8 → 4
    let y = m.forward(&Tensor::filled(&[20, 20, 1], 0.3)).unwrap();
    assert_eq!(y.shape(), &[4, 4, 1]);
}

#[test]
fn classifier_outputs_distribution() {
    for kind in [ClassifierKind::Cnn, ClassifierKind::Residual] {
        let m = build_classifier(small_classifier(kind), 5).unwrap();
        let x = Tensor::from_fn(&[16, 16, 3], |i| ((i * 7) % 11) as f64 / 11.0);
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2]);
        assert!((y.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn classifier_rejects_wrong_input() {
    let m = build_classifier(small_classifier(ClassifierKind::Cnn), 5).unwrap();
    assert!(m.forward(&Tensor::zeros(&[8, 8, 3])).is_err());
    let bad = ClassifierConfig {
        num_classes: 1,
        ..small_classifier(ClassifierKind::Cnn)
    };
    assert!(matches!(build_classifier(bad, 0), Err(Error::Config(_))));
}

#[test]
fn residual_block_with_zero_branch_is_relu() {
    let cfg = ClassifierConfig {
        in_channels: 4,
        ..small_classifier(ClassifierKind::Residual)
    };
    let m = build_classifier(cfg, 9).unwrap();
    let Layer::Residual { in_ch, out_ch, .. } = m.layers()[0].clone() else {
        panic!("first layer is not residual");
    };
    assert_eq!((in_ch, out_ch), (4, 4));
    let mut weights = m.weights().clone();
    weights.retain(|name, _| name.starts_with("block0."));
    for name in ["block0.conv2.w", "block0.conv2.b"] {
        weights.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let block = ModelGraph::from_parts(*m.kind(), m.layers()[..1].to_vec(), weights, m.meta).unwrap();

    let x = Tensor::from_fn(&[16, 16, 4], |i| ((i * 13) % 9) as f64 - 4.0);
    let mut tape = Tape::new();
    let params = block.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let y = block.forward_on(&mut tape, &params, xv).unwrap();
    let want: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
    assert_eq!(tape.value(y).data(), &want[..]);
}

#[test]
fn freeze_backbone_leaves_only_head_trainable() {
    let mut m = build_classifier(small_classifier(ClassifierKind::Residual), 0).unwrap();
    m.freeze_backbone();
    for (name, w) in m.weights() {
        assert_eq!(w.requires_grad(), name.starts_with("head."), "{name}");
    }
    m.unfreeze_all();
    assert!(m.weights().values().all(Tensor::requires_grad));
}

#[test]
fn load_values_checks_shapes() {
    let mut m = build_linear(LinearConfig { inputs: 2, outputs: 2 }, 0).unwrap();
    let mut other = m.weights().clone();
    other.insert("linear.b".into(), Tensor::zeros(&[3]));
    assert!(m.load_values(&other).is_err());
}

fn grad_check_model(m: &ModelGraph, input: Tensor, coords: usize) -> f64 {
    let target = Tensor::from_fn(m.forward(&input).unwrap().shape(), |i| {
        ((i * 5) % 7) as f64 / 7.0
    });
    // Zero biases put dead units exactly on ReLU kinks.
    let weights: Vec<Tensor> = m
        .weights()
        .iter()
        .map(|(name, w)| {
            if name.ends_with(".b") {
                Tensor::from_fn(w.shape(), |i| 0.05 + 0.01 * i as f64)
            } else {
                w.clone()
            }
        })
        .collect();
    grad_check_sampled(
        |tape, vars| {
            let params = m.bind_vars(vars)?;
            let x = tape.constant(input.clone());
            let y = m.forward_on(tape, &params, x)?;
            let t = tape.constant(target.clone());
            tape.soft_dice_loss(y, t, 1.0)
        },
        &weights,
        1e-6,
        coords,
        11,
    )
    .unwrap()
}

#[test]
fn unet_gradient_check_on_8x8() {
    let m = build_unet(unet(2, 2, 3, 1), 4).unwrap();
    let x = Tensor::from_fn(&[8, 8, 3], |i| ((i * 37) % 23) as f64 / 23.0 - 0.3);
    let err = grad_check_model(&m, x, 12);
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn classifier_gradient_check_on_8x8() {
    let cfg = ClassifierConfig {
        input_size: 8,
        ..small_classifier(ClassifierKind::Residual)
    };
    let m = build_classifier(cfg, 4).unwrap();
    let x = Tensor::from_fn(&[8, 8, 3], |i| ((i * 37) % 23) as f64 / 23.0 - 0.3);
    let err = grad_check_model(&m, x, 12);
    assert!(err <= 1e-5, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn unet_output_matches_input_dims(depth in 1usize..3, hb in 1usize..4, wb in 1usize..4, seed in 0u64..100) {
        let m = build_unet(unet(depth, 2, 1, 1), seed).unwrap();
        let (h, w) = (hb << depth, wb << depth);
        let y = m.forward(&Tensor::filled(&[h, w, 1], 0.5)).unwrap();
        prop_assert_eq!(y.shape(), &[h, w, 1]);
    }

    #[test]
    fn classifier_argmax_ignores_logit_shift(seed in 0u64..50, shift in -5.0f64..5.0) {
        let m = build_classifier(small_classifier(ClassifierKind::Cnn), seed).unwrap();
        let x = Tensor::from_fn(&[16, 16, 3], |i| ((i as u64 * 7 + seed) % 11) as f64 / 11.0);
        let base = m.forward(&x).unwrap();
        let mut shifted = m.clone();
        shifted.weight_mut("head.b").unwrap().data_mut().iter_mut().for_each(|b| *b += shift);
        let y = shifted.forward(&x).unwrap();
        let argmax = |t: &Tensor| if t.data()[0] >= t.data()[1] { 0 } else { 1 };
        prop_assert_eq!(argmax(&base), argmax(&y));
        for (a, b) in base.data().iter().zip(y.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

