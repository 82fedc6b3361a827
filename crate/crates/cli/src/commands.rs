use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fencepipe::data::{
    augment as augment_image, filter_positive, io, reassemble, slice_image, split_dataset, AnnotationDoc,
    AugmentConfig, DatasetManifest, FenceLabel, ManifestEntry, Raster, Source, Split, SplitFractions, TileGrid,
};
use fencepipe::detect::{self, binarize, render_255, render_overlay, residual_mask, Connectivity, DetectConfig, Detections};
use fencepipe::fsutil;
use fencepipe::metrics::{class_report, confusion_matrix, seg_scores, ConfusionMatrix};
use fencepipe::models::{ClassifierConfig, ClassifierKind, ModelGraph, ModelKind, UNetConfig};
use fencepipe::optim::{self, EpochControl, LossKind, OptimizerKind, TrainConfig, TrainingLog};
use fencepipe::report::{curves_csv, EvalRecord, ScoreTable, Task};
use fencepipe::synth::{derive_seed, gen_dataset, DatasetSpec, Insulators, SceneSpec};
use fencepipe::tensor::Padding;
use fencepipe::weights::{load_weights, save_weights};
use fencepipe::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::args::*;
use crate::dataset;
use crate::Outcome;

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{what}: cannot parse {p:?}")))
        })
        .collect()
}

fn config_of<T: Serialize>(command: &str, args: &T) -> Value {
    json!({"command": command, "args": args})
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| fencepipe_io(p, e))
}

fn fencepipe_io(p: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: p.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fsutil::write_atomic(path, text.as_bytes())
}

fn absolute(manifest: &DatasetManifest, rel: &str) -> Result<String> {
    let p = manifest.resolve(rel);
    let abs = std::path::absolute(&p).map_err(|e| fencepipe_io(&p, e))?;
    Ok(abs.to_string_lossy().into_owned())
}

fn loss_kind(l: LossArg) -> LossKind {
    match l {
        LossArg::Dice => LossKind::Dice,
        LossArg::CrossEntropy => LossKind::CrossEntropy,
        LossArg::BceDice => LossKind::BceDice,
        LossArg::SquaredError => LossKind::SquaredError,
    }
}

pub fn gen_synth(a: &GenSynthArgs) -> Result<Outcome> {
    let balance = match &a.balance {
        Some(s) => {
            let v: Vec<usize> = parse_list(s, "--balance")?;
            if v.len() != 2 {
                return Err(Error::Config("--balance takes two counts: single,double".into()));
            }
            Some((v[0], v[1]))
        }
        None => None,
    };
    let spec = DatasetSpec {
        n: a.n,
        balance,
        seed: a.seed,
        scene: SceneSpec {
            width: a.width,
            height: a.height,
            insulators: Insulators::Random(a.insulators),
            insulator_size: (a.insulator_size, a.insulator_size),
            source: match a.source {
                SourceArg::Drone => Source::Drone,
                SourceArg::Still => Source::Still,
            },
            ..SceneSpec::default()
        },
        vary: !a.no_vary,
    };
    let (single, double) = spec.counts()?;
    spec.scene_spec(0)?.validate()?;
    mkdir(&a.out)?;
    let manifest = gen_dataset(&spec, &a.out)?;
    let config = config_of("gen-synth", a);
    fsutil::write_json(&a.out.join("synth_config.json"), &json!({"config": config, "spec": spec}))?;
    Ok(Outcome::ok(json!({
        "command": "gen-synth",
        "config": config,
        "images": manifest.entries.len(),
        "single": single,
        "double": double,
        "manifest": a.out.join("manifest.json"),
    })))
}

pub fn slice(a: &SliceArgs) -> Result<Outcome> {
    let (manifest, entries) = match (&a.manifest, &a.image) {
        (Some(m), _) => {
            let m = DatasetManifest::load(m)?;
            let e = m.entries.clone();
            (m, e)
        }
        (None, Some(img)) => {
            let id = img
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            let entry = ManifestEntry {
                id,
                path: img.to_string_lossy().into_owned(),
                source: Source::Drone,
                fence: FenceLabel::Unknown,
                split: None,
                mask_path: a.mask.as_ref().map(|p| p.to_string_lossy().into_owned()),
            };
            let root = std::env::current_dir().map_err(|e| fencepipe_io(Path::new("."), e))?;
            (DatasetManifest { root, entries: vec![] }, vec![entry])
        }
        (None, None) => return Err(Error::Config("slice needs --manifest or --image".into())),
    };
    mkdir(&a.out.join("tiles"))?;
    mkdir(&a.out.join("tile_masks"))?;
    let mut out_entries = Vec::new();
    let mut grids: BTreeMap<String, TileGrid> = BTreeMap::new();
    let mut discarded = 0;
    for e in &entries {
        let img = io::read_image(&manifest.resolve(&e.path))?;
        let (tiles, grid) = slice_image(&img, a.tile)?;
        let masks = match &e.mask_path {
            Some(m) => {
                let mask = io::read_mask(&manifest.resolve(m))?;
                if mask.dims() != img.dims() {
                    return Err(Error::Data(format!("mask of {} does not match its image", e.id)));
                }
                Some(slice_image(&mask, a.tile)?.0)
            }
            None => None,
        };
        let kept: Vec<(usize, Raster<f64>, Option<fencepipe::data::BinaryMask>)> = match (masks, a.min_positive) {
            (Some(masks), Some(min)) => {
                let f = filter_positive(tiles, masks, min)?;
                discarded += f.discarded;
                f.kept.into_iter().map(|(i, t, m)| (i, t, Some(m))).collect()
            }
            (None, Some(_)) => {
                return Err(Error::Config(format!("--min-positive needs masks; {} has none", e.id)));
            }
            (Some(masks), None) => tiles.into_iter().zip(masks).enumerate().map(|(i, (t, m))| (i, t, Some(m))).collect(),
            (None, None) => tiles.into_iter().enumerate().map(|(i, t)| (i, t, None)).collect(),
        };
        for (i, tile, mask) in kept {
            let (r, c) = grid.position(i)?;
            let id = format!("{}_r{r:02}_c{c:02}", e.id);
            let path = format!("tiles/{id}.png");
            io::write_image(&a.out.join(&path), &tile)?;
            let mask_path = match mask {
                Some(m) => {
                    let p = format!("tile_masks/{id}.png");
                    io::write_mask(&a.out.join(&p), &m)?;
                    Some(p)
                }
                None => None,
            };
            out_entries.push(ManifestEntry {
                id,
                path,
                source: e.source,
                fence: e.fence,
                split: e.split,
                mask_path,
            });
        }
        grids.insert(e.id.clone(), grid);
    }
    let config = config_of("slice", a);
    fsutil::write_json(&a.out.join("grids.json"), &json!({"config": config, "grids": grids}))?;
    let out = DatasetManifest {
        root: a.out.clone(),
        entries: out_entries,
    };
    out.save(&a.out.join("manifest.json"))?;
    Ok(Outcome::ok(json!({
        "command": "slice",
        "config": config,
        "images": entries.len(),
        "tiles": out.entries.len(),
        "discarded": discarded,
        "grids": grids,
        "manifest": a.out.join("manifest.json"),
    })))
}

pub fn import_annotations(a: &ImportArgs) -> Result<Outcome> {
    let doc = AnnotationDoc::load(&a.annotations)?;
    let config = config_of("import-annotations", a);
    if let Some(id) = &a.id {
        let (w, h) = (a.width.unwrap_or(0), a.height.unwrap_or(0));
        let mask = doc.mask_for(id, w, h)?;
        io::write_mask(&a.out, &mask)?;
        return Ok(Outcome::ok(json!({
            "command": "import-annotations",
            "config": config,
            "masks": 1,
            "positive_pixels": mask.count_positive(),
        })));
    }
    let path = a
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("import-annotations needs --manifest or --id".into()))?;
    let manifest = DatasetManifest::load(path)?;
    mkdir(&a.out.join("masks"))?;
    let mut entries = Vec::new();
    let mut positive = 0;
    for e in &manifest.entries {
        let img = io::read_image(&manifest.resolve(&e.path))?;
        let mask = doc.mask_for(&e.id, img.width(), img.height())?;
        positive += mask.count_positive();
        let rel = format!("masks/{}.png", e.id);
        io::write_mask(&a.out.join(&rel), &mask)?;
        entries.push(ManifestEntry {
            path: absolute(&manifest, &e.path)?,
            mask_path: Some(rel),
            ..e.clone()
        });
    }
    let out = DatasetManifest {
        root: a.out.clone(),
        entries,
    };
    out.save(&a.out.join("manifest.json"))?;
    Ok(Outcome::ok(json!({
        "command": "import-annotations",
        "config": config,
        "masks": out.entries.len(),
        "positive_pixels": positive,
        "manifest": a.out.join("manifest.json"),
    })))
}

pub fn augment(a: &AugmentArgs) -> Result<Outcome> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let cfg = AugmentConfig::default();
    mkdir(&a.out.join("images"))?;
    mkdir(&a.out.join("masks"))?;
    let mut entries = Vec::new();
    let mut plans = Vec::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        if a.include_originals {
            entries.push(ManifestEntry {
                path: absolute(&manifest, &e.path)?,
                mask_path: e.mask_path.as_deref().map(|m| absolute(&manifest, m)).transpose()?,
                ..e.clone()
            });
        }
        let img = io::read_image(&manifest.resolve(&e.path))?;
        let mask = e.mask_path.as_deref().map(|m| io::read_mask(&manifest.resolve(m))).transpose()?;
        for k in 0..a.copies {
            let seed = derive_seed(a.seed, (i * a.copies + k) as u64);
            let (out_img, out_mask, plan) = augment_image(&img, mask.as_ref(), &cfg, seed)?;
            let id = format!("{}_aug{k}", e.id);
            let path = format!("images/{id}.png");
            io::write_image(&a.out.join(&path), &out_img)?;
            let mask_path = match out_mask {
                Some(m) => {
                    let p = format!("masks/{id}.png");
                    io::write_mask(&a.out.join(&p), &m)?;
                    Some(p)
                }
                None => None,
            };
            plans.push(json!({"id": id, "seed": seed, "plan": plan}));
            entries.push(ManifestEntry {
                id,
                path,
                mask_path,
                ..e.clone()
            });
        }
    }
    let config = config_of("augment", a);
    fsutil::write_json(&a.out.join("augment_log.json"), &json!({"config": config, "augment": cfg, "plans": plans}))?;
    let out = DatasetManifest {
        root: a.out.clone(),
        entries,
    };
    out.save(&a.out.join("manifest.json"))?;
    Ok(Outcome::ok(json!({
        "command": "augment",
        "config": config,
        "images": out.entries.len(),
        "manifest": a.out.join("manifest.json"),
    })))
}

pub fn split(a: &SplitArgs) -> Result<Outcome> {
    let f: Vec<f64> = parse_list(&a.frac, "--frac")?;
    if f.len() != 3 {
        return Err(Error::Config("--frac takes three fractions: train,val,test".into()));
    }
    let fractions = SplitFractions {
        train: f[0],
        val: f[1],
        test: f[2],
    };
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mut entries = split_dataset(&manifest.entries, fractions, a.seed)?;
    let target = a.out.clone().unwrap_or_else(|| a.manifest.clone());
    let same_dir = target.parent() == a.manifest.parent();
    if !same_dir {
        for e in &mut entries {
            e.path = absolute(&manifest, &e.path)?;
            e.mask_path = e.mask_path.as_deref().map(|m| absolute(&manifest, m)).transpose()?;
        }
    }
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for e in &entries {
        let split = e.split.expect("split assigned").to_string();
        *counts.entry(split).or_default().entry(e.fence.to_string()).or_default() += 1;
    }
    let total = |s: Split| entries.iter().filter(|e| e.split == Some(s)).count();
    let out = DatasetManifest {
        root: target.parent().map(Path::to_path_buf).unwrap_or_default(),
        entries: entries.clone(),
    };
    out.save(&target)?;
    Ok(Outcome::ok(json!({
        "command": "split",
        "config": config_of("split", a),
        "train": total(Split::Train),
        "val": total(Split::Val),
        "test": total(Split::Test),
        "per_class": counts,
        "manifest": target,
    })))
}

#[derive(Debug, Serialize, Deserialize)]
struct LogFile {
    config: Value,
    log: TrainingLog,
}

fn initial_model(common: &TrainCommon, kind: ModelKind) -> Result<ModelGraph> {
    match &common.init {
        Some(p) => {
            let (m, _) = load_weights(p)?;
            if m.kind().is_segmentation() != kind.is_segmentation() {
                return Err(Error::Config(format!("{} holds the wrong kind of model", p.display())));
            }
            Ok(m)
        }
        None => ModelGraph::build(kind, common.seed),
    }
}

fn run_training(
    command: &str,
    args: &Value,
    common: &TrainCommon,
    loss: LossKind,
    mut model: ModelGraph,
    train_set: &[optim::Sample],
    val_set: &[optim::Sample],
) -> Result<Outcome> {
    if train_set.is_empty() {
        return Err(Error::Data("the manifest has no training samples".into()));
    }
    let cfg = TrainConfig {
        epochs: common.epochs,
        batch_size: common.batch_size,
        lr: common.lr,
        loss,
        optimizer: match common.optimizer {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Sgd => OptimizerKind::Sgd,
        },
        seed: common.seed,
    };
    let config = json!({"command": command, "args": args, "train": cfg});
    mkdir(&common.out)?;
    save_weights(&common.out.join("init.wfpv"), &model, &config)?;
    let log = optim::train(&mut model, train_set, val_set, &cfg, |_, log| {
        if let Some(r) = log.rows.last() {
            log::info!("epoch {} {} loss {:.5} dice {:.4}", r.epoch, r.split, r.loss, r.dice);
        }
        Ok(EpochControl::Continue)
    })?;
    save_weights(&common.out.join("model.wfpv"), &model, &config)?;
    fsutil::write_json(&common.out.join("log.json"), &LogFile { config: config.clone(), log: log.clone() })?;
    write_text(&common.out.join("log.csv"), &log.to_csv())?;
    write_text(&common.out.join("curves.csv"), &curves_csv(&log))?;
    Ok(Outcome::ok(json!({
        "command": command,
        "config": config,
        "train_samples": train_set.len(),
        "val_samples": val_set.len(),
        "epochs": log.rows.iter().map(|r| r.epoch).max().unwrap_or(0),
        "last_train": log.last(Split::Train),
        "last_val": log.last(Split::Val),
        "weights": common.out.join("model.wfpv"),
    })))
}

pub fn train_seg(a: &TrainSegArgs) -> Result<Outcome> {
    let kind = ModelKind::Unet(UNetConfig {
        in_channels: 3,
        out_channels: 1,
        depth: a.depth,
        base_filters: a.filters,
        padding: match a.padding {
            PaddingArg::Same => Padding::Same,
            PaddingArg::Valid => Padding::Valid,
        },
    });
    let model = initial_model(&a.common, kind)?;
    let manifest = DatasetManifest::load(&a.common.manifest)?;
    let train_set = dataset::segmentation(&manifest, Split::Train, &model)?;
    let val_set = dataset::segmentation(&manifest, Split::Val, &model)?;
    let args = serde_json::to_value(a).expect("args serialize");
    run_training("train-seg", &args, &a.common, loss_kind(a.loss), model, &train_set, &val_set)
}

pub fn train_cls(a: &TrainClsArgs) -> Result<Outcome> {
    let kind = ModelKind::Classifier(ClassifierConfig {
        kind: match a.arch {
            ArchArg::Cnn => ClassifierKind::Cnn,
            ArchArg::Residual => ClassifierKind::Residual,
        },
        in_channels: 3,
        num_classes: FenceLabel::CLASSES.len(),
        blocks: a.blocks,
        base_filters: a.filters,
        input_size: a.input_size,
    });
    let mut model = initial_model(&a.common, kind)?;
    if a.freeze_backbone {
        model.freeze_backbone();
    }
    let size = match model.kind() {
        ModelKind::Classifier(c) => c.input_size,
        _ => a.input_size,
    };
    let manifest = DatasetManifest::load(&a.common.manifest)?;
    let train_set = dataset::classification(&manifest, Split::Train, size)?;
    let val_set = dataset::classification(&manifest, Split::Val, size)?;
    let args = serde_json::to_value(a).expect("args serialize");
    run_training("train-cls", &args, &a.common, loss_kind(a.loss), model, &train_set, &val_set)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

pub fn eval(a: &EvalArgs) -> Result<Outcome> {
    let config = config_of("eval", a);
    if let Some(counts) = &a.confusion {
        let labels: Vec<String> = a.labels.split(',').map(|s| s.trim().to_string()).collect();
        let flat: Vec<u64> = parse_list(counts, "--confusion")?;
        let k = labels.len();
        if flat.len() != k * k {
            return Err(Error::Config(format!("--confusion needs {} counts for {k} labels", k * k)));
        }
        let rows = flat.chunks(k).map(<[u64]>::to_vec).collect();
        let cm = ConfusionMatrix::new(labels, rows)?;
        let report = class_report(&cm)?;
        return Ok(Outcome::ok(json!({
            "command": "eval",
            "config": config,
            "confusion": cm.counts,
            "report": report.to_table_json(),
        })));
    }
    let (Some(wpath), Some(mpath)) = (&a.weights, &a.manifest) else {
        return Err(Error::Config("eval needs --confusion or --weights with --manifest".into()));
    };
    let split: Split = a.split.parse()?;
    let (model, wcfg) = load_weights(wpath)?;
    let manifest = DatasetManifest::load(mpath)?;
    let train_cfg = &wcfg["train"];
    let loss = match a.loss {
        Some(l) => loss_kind(l),
        None => match train_cfg.get("loss") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(e.to_string()))?,
            None if model.kind().is_segmentation() => LossKind::Dice,
            None => LossKind::CrossEntropy,
        },
    };
    let batch = train_cfg.get("batch_size").and_then(Value::as_u64).map(|b| b as usize);
    let (task, samples) = match model.kind() {
        ModelKind::Unet(_) => (Task::Segmentation, dataset::segmentation(&manifest, split, &model)?),
        ModelKind::Classifier(c) => (Task::Classification, dataset::classification(&manifest, split, c.input_size)?),
        ModelKind::Linear(_) => return Err(Error::Config("linear models cannot be evaluated on images".into())),
    };
    let record_config = json!({"eval": config, "model": wcfg});
    let mut record = if samples.is_empty() {
        EvalRecord::new(task, split, batch, None, record_config)
    } else {
        let result = optim::evaluate(&model, &samples, loss)?;
        EvalRecord::new(task, split, batch, Some(result), record_config)
    };
    if task == Task::Classification && !samples.is_empty() {
        let mut actual = Vec::new();
        let mut predicted = Vec::new();
        for s in &samples {
            actual.push(argmax(s.target.data()));
            predicted.push(argmax(model.forward(&s.input)?.data()));
        }
        let cm = confusion_matrix(&actual, &predicted, &FenceLabel::CLASS_NAMES)?;
        record.class_report = Some(class_report(&cm)?);
    }
    if let Some(out) = &a.out {
        fsutil::write_json(out, &record)?;
    }
    let ok = !record.is_empty();
    let mut doc = serde_json::to_value(&record).expect("record serializes");
    doc["command"] = json!("eval");
    if let Some(r) = &record.class_report {
        doc["report"] = r.to_table_json();
    }
    Ok(Outcome { json: doc, ok })
}

pub fn detect(a: &DetectArgs) -> Result<Outcome> {
    let cfg = DetectConfig {
        threshold: a.threshold,
        pad: a.pad,
        connectivity: Connectivity::from_count(a.connectivity)?,
        min_area: a.min_area,
    };
    cfg.validate()?;
    let img = io::read_image(&a.image)?;
    let mut config = config_of("detect", a);
    let prob = match (&a.weights, &a.predicted) {
        (Some(w), _) => {
            let (model, wcfg) = load_weights(w)?;
            config["model"] = wcfg;
            let depth = match model.kind() {
                ModelKind::Unet(u) if u.padding == Padding::Same => u.depth,
                _ => return Err(Error::Config("detection needs a same-padded U-Net".into())),
            };
            if !a.tile.is_multiple_of(1 << depth) {
                return Err(Error::Config(format!("tile {} is not divisible by 2^{depth}", a.tile)));
            }
            let (tiles, grid) = slice_image(&img, a.tile)?;
            let probs = tiles
                .iter()
                .map(|t| Raster::from_tensor(&model.forward(&t.to_tensor())?))
                .collect::<Result<Vec<_>>>()?;
            reassemble(&probs, &grid)?
        }
        (None, Some(p)) => {
            let m = io::read_image(p)?;
            if m.dims() != img.dims() {
                return Err(Error::Data("predicted mask does not match the image size".into()));
            }
            Raster::from_fn(m.width(), m.height(), 1, |x, y, _| m.get(x, y, 0))
        }
        (None, None) => return Err(Error::Config("detect needs --weights or --predicted".into())),
    };
    let boxes = detect::detect(&prob, &cfg)?;
    let pred = binarize(&prob, cfg.threshold);
    mkdir(&a.out)?;
    let id = a
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let detections = Detections {
        image_id: id,
        boxes,
        threshold: cfg.threshold,
        pad: cfg.pad,
    };
    io::write_mask(&a.out.join("mask.png"), &render_255(&pred))?;
    let overlay = render_overlay(&img, &detections.boxes, &[1.0, 0.0, 0.0], 1)?;
    io::write_image(&a.out.join("overlay.png"), &overlay)?;
    let mut doc = serde_json::to_value(&detections).expect("detections serialize");
    doc["config"] = config;
    if let Some(t) = &a.truth {
        let truth = io::read_mask(t)?;
        let residual = residual_mask(&truth, &pred)?;
        io::write_mask(&a.out.join("residual.png"), &residual)?;
        doc["scores"] = serde_json::to_value(seg_scores(&truth, &pred)?).expect("scores serialize");
    }
    fsutil::write_json(&a.out.join("detections.json"), &doc)?;
    doc["command"] = json!("detect");
    Ok(Outcome::ok(doc))
}

pub fn report(a: &ReportArgs) -> Result<Outcome> {
    let records = a
        .evals
        .iter()
        .map(|p| fsutil::read_json::<EvalRecord>(p))
        .collect::<Result<Vec<_>>>()?;
    let table = ScoreTable::from_records(&records)?;
    let config = config_of("report", a);
    mkdir(&a.out)?;
    let mut files: Vec<PathBuf> = vec![a.out.join("report.json"), a.out.join("report.csv")];
    let class_reports: Vec<Value> = records
        .iter()
        .filter_map(|r| r.class_report.as_ref().map(|c| json!({"split": r.split, "batch_size": r.batch_size, "report": c.to_table_json()})))
        .collect();
    let status = if table.has_empty() { fencepipe::report::NO_SAMPLES } else { "ok" };
    let doc = json!({"config": config, "status": status, "table": table, "classification": class_reports});
    fsutil::write_json(&files[0], &doc)?;
    write_text(&files[1], &table.to_csv())?;
    if let Some(log) = &a.log {
        let lf: LogFile = fsutil::read_json(log)?;
        let p = a.out.join("curves.csv");
        write_text(&p, &curves_csv(&lf.log))?;
        files.push(p);
    }
    Ok(Outcome {
        json: json!({"command": "report", "config": config, "status": status, "rows": table.rows.len(), "files": files}),
        ok: !table.has_empty(),
    })
}
