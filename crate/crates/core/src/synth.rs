//! Seeded synthetic fence scenes with exact insulator ground truth.
//!
//! A scene is a textured field crossed by one (single) or two (double)
//! horizontal fence lines. Each line is a band of dark wires with vertical
//! posts, and bright rectangular insulators sit on post/wire crossings.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    io, AnnotationDoc, BinaryMask, FenceLabel, Image, ManifestEntry, Raster, Region, SceneImage,
    Source,
};
use crate::data::annotation::ImageRegions;
use crate::data::DatasetManifest;
use crate::detect::BBox;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::optim::{MetaTask, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Insulators {
    /// This many insulators on distinct post/wire crossings.
    Random(usize),
    /// Top-left corners of each insulator.
    At(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub fence: FenceLabel,
    pub source: Source,
    pub width: usize,
    pub height: usize,
    /// Wires per fence line.
    pub wire_rows: usize,
    /// Vertical extent of one fence line, top wire to bottom wire.
    pub line_height: usize,
    pub wire_px: usize,
    pub post_spacing: usize,
    pub post_px: usize,
    pub insulators: Insulators,
    /// Insulator `(width, height)`.
    pub insulator_size: (usize, usize),
    /// Amplitude of background noise and field stripes.
    pub texture: f64,
    /// Relative spread of the global brightness and tint.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            fence: FenceLabel::Single,
            source: Source::Drone,
            width: 64,
            height: 64,
            wire_rows: 3,
            line_height: 12,
            wire_px: 1,
            post_spacing: 16,
            post_px: 2,
            insulators: Insulators::Random(3),
            insulator_size: (3, 3),
            texture: 0.08,
            jitter: 0.1,
            seed: 0,
        }
    }
}

/// Exact labels of one generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub fence: FenceLabel,
    pub mask: BinaryMask,
    /// Tight box of each insulator.
    pub boxes: Vec<BBox>,
    pub masks: Vec<BinaryMask>,
    /// Top wire row of each fence line.
    pub line_tops: Vec<usize>,
}

const WIRE: [f64; 3] = [0.12, 0.12, 0.14];
const POST: [f64; 3] = [0.32, 0.24, 0.16];
const INSULATOR: [f64; 3] = [1.0, 0.92, 0.15];

fn spec_err(msg: impl Into<String>) -> Error {
    Error::Spec(msg.into())
}

impl SceneSpec {
    fn lines(&self) -> Result<usize> {
        match self.fence {
            FenceLabel::Single => Ok(1),
            FenceLabel::Double => Ok(2),
            FenceLabel::Unknown => Err(spec_err("scene fence type must be single or double")),
        }
    }

    fn wire_offsets(&self) -> Vec<usize> {
        if self.wire_rows == 1 {
            return vec![0];
        }
        (0..self.wire_rows)
            .map(|k| k * self.line_height / (self.wire_rows - 1))
            .collect()
    }

    /// Vertical room one line needs, including post overhang.
    fn footprint(&self) -> usize {
        self.line_height + self.wire_px + 2 * self.overhang()
    }

    fn overhang(&self) -> usize {
        match self.source {
            Source::Drone => 1,
            Source::Still => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lines = self.lines()?;
        if self.width < 8 || self.height < 8 {
            return Err(spec_err(format!("scene {}x{} is too small", self.width, self.height)));
        }
        if self.wire_rows == 0 || self.wire_px == 0 || self.post_px == 0 || self.post_spacing == 0 {
            return Err(spec_err("wire rows, wire width, post width and spacing must be positive"));
        }
        let (iw, ih) = self.insulator_size;
        if iw == 0 || ih == 0 {
            return Err(spec_err("insulators must be at least 1x1"));
        }
        if self.wire_rows > 1 && self.line_height / (self.wire_rows - 1) <= ih {
            return Err(spec_err("wire spacing must exceed the insulator height"));
        }
        if self.post_spacing <= iw.max(self.post_px) {
            return Err(spec_err("post spacing must exceed the insulator width"));
        }
        if lines * (self.footprint() + ih) + (lines - 1) * 2 > self.height {
            return Err(spec_err(format!("{lines} fence lines do not fit in height {}", self.height)));
        }
        if !(self.texture >= 0.0 && self.jitter >= 0.0 && self.jitter < 1.0) {
            return Err(spec_err("texture must be ≥ 0 and jitter in [0, 1)"));
        }
        Ok(())
    }
}

fn paint(img: &mut Image, x: usize, y: usize, w: usize, h: usize, color: &[f64; 3]) {
    for yy in y..(y + h).min(img.height()) {
        for xx in x..(x + w).min(img.width()) {
            img.pixel_mut(xx, yy).copy_from_slice(color);
        }
    }
}

/// Renders `spec`. The same spec always yields the same pixels and truth.
pub fn gen_scene(spec: &SceneSpec) -> Result<(SceneImage, GroundTruth)> {
    spec.validate()?;
    let lines = spec.lines()?;
    let (w, h) = (spec.width, spec.height);
    let (iw, ih) = spec.insulator_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let base = [0.42, 0.58, 0.30].map(|c: f64| c * (1.0 + spec.jitter * rng.random_range(-1.0..=1.0)));
    let stripe_period = rng.random_range(5.0..11.0);
    let stripe_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut img = Raster::from_fn(w, h, 3, |_, _, _| 0.0);
    for y in 0..h {
        for x in 0..w {
            let stripe = spec.texture * (std::f64::consts::TAU * (x as f64 + 0.5 * y as f64) / stripe_period + stripe_phase).sin();
            for c in 0..3 {
                let noise = spec.texture * rng.random_range(-1.0..=1.0);
                img.set(x, y, c, (base[c] + stripe + noise).clamp(0.0, 1.0));
            }
        }
    }

    // Line tops: evenly spaced slots with a random shift inside each slot.
    let block = spec.footprint() + ih;
    let slack = h - lines * block;
    let mut line_tops = Vec::with_capacity(lines);
    let mut cursor = rng.random_range(0..=slack / (lines + 1));
    for _ in 0..lines {
        line_tops.push(cursor + spec.overhang() + ih / 2);
        cursor += block + rng.random_range(0..=slack / (lines + 1)).max(2);
    }
    let post_phase = rng.random_range(iw..spec.post_spacing.max(iw + 1));
    let posts: Vec<usize> = (post_phase..w.saturating_sub(iw)).step_by(spec.post_spacing).collect();
    let wires = spec.wire_offsets();

    for &top in &line_tops {
        for &off in &wires {
            paint(&mut img, 0, top + off, w, spec.wire_px, &WIRE);
        }
        for &px in &posts {
            let y0 = top - spec.overhang();
            paint(&mut img, px, y0, spec.post_px, spec.footprint(), &POST);
        }
    }

    let corners: Vec<(usize, usize)> = match &spec.insulators {
        Insulators::At(at) => at.clone(),
        Insulators::Random(k) => {
            let mut sites = Vec::new();
            for &top in &line_tops {
                for &px in &posts {
                    for &off in &wires {
                        let x = (px + spec.post_px / 2).saturating_sub(iw / 2);
                        sites.push((x, (top + off).saturating_sub(ih / 2)));
                    }
                }
            }
            if *k > sites.len() {
                return Err(spec_err(format!("{k} insulators requested, only {} crossings", sites.len())));
            }
            sites.shuffle(&mut rng);
            sites.truncate(*k);
            sites.sort_by_key(|&(x, y)| (y, x));
            sites
        }
    };

    let mut mask = BinaryMask::zeros(w, h);
    let mut masks = Vec::with_capacity(corners.len());
    let mut boxes = Vec::with_capacity(corners.len());
    for &(x, y) in &corners {
        if x + iw > w || y + ih > h {
            return Err(spec_err(format!(
                "insulator at ({x},{y}) of size {iw}x{ih} leaves the {w}x{h} image"
            )));
        }
        paint(&mut img, x, y, iw, ih, &INSULATOR);
        let mut one = BinaryMask::zeros(w, h);
        for yy in y..y + ih {
            for xx in x..x + iw {
                one.set(xx, yy, 0, 1);
                mask.set(xx, yy, 0, 1);
            }
        }
        masks.push(one);
        boxes.push(BBox::new(x, y, iw, ih));
    }

    let scene = SceneImage {
        id: format!("scene-{:016x}", spec.seed),
        source: spec.source,
        fence: spec.fence,
        pixels: img,
    };
    let truth = GroundTruth {
        fence: spec.fence,
        mask,
        boxes,
        masks,
        line_tops,
    };
    Ok((scene, truth))
}

/// Annotation regions matching `truth.boxes`.
pub fn regions_of(truth: &GroundTruth) -> Vec<Region> {
    truth.boxes.iter().map(|b| Region::rect(b.x, b.y, b.width, b.height)).collect()
}

/// Seed of the `index`-th item derived from `master`, independent of order.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.random()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n: usize,
    /// `(single, double)` counts; an even split when absent.
    pub balance: Option<(usize, usize)>,
    pub seed: u64,
    /// Template for every scene; fence, seed and the varied fields are
    /// overwritten per image.
    pub scene: SceneSpec,
    /// Draw texture and jitter per image instead of using the template's.
    pub vary: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n: 52,
            balance: None,
            seed: 0,
            scene: SceneSpec::default(),
            vary: true,
        }
    }
}

impl DatasetSpec {
    pub fn counts(&self) -> Result<(usize, usize)> {
        if self.n < 2 {
            return Err(Error::Config(format!("a dataset needs at least 2 images, got {}", self.n)));
        }
        match self.balance {
            Some((s, d)) if s + d == self.n => Ok((s, d)),
            Some((s, d)) => Err(Error::Config(format!("balance {s},{d} does not sum to n = {}", self.n))),
            None => Ok((self.n / 2, self.n - self.n / 2)),
        }
    }

    /// Scene spec of image `index`; singles come first.
    pub fn scene_spec(&self, index: usize) -> Result<SceneSpec> {
        let (single, _) = self.counts()?;
        let seed = derive_seed(self.seed, index as u64);
        let mut spec = self.scene.clone();
        spec.fence = if index < single { FenceLabel::Single } else { FenceLabel::Double };
        spec.seed = seed;
        if self.vary {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7e47);
            spec.texture = rng.random_range(0.02..=0.12);
            spec.jitter = rng.random_range(0.0..=0.2);
        }
        Ok(spec)
    }

    /// Generates every scene in memory.
    pub fn generate(&self) -> Result<Vec<(SceneImage, GroundTruth)>> {
        let (s, d) = self.counts()?;
        (0..s + d)
            .map(|i| {
                let (mut scene, truth) = gen_scene(&self.scene_spec(i)?)?;
                scene.id = format!("{}-{i:03}", scene.fence);
                Ok((scene, truth))
            })
            .collect()
    }
}

/// Writes `images/`, `masks/`, `annotations.json` and `manifest.json` under
/// `out` and returns the manifest.
pub fn gen_dataset(spec: &DatasetSpec, out: &Path) -> Result<DatasetManifest> {
    let scenes = spec.generate()?;
    for dir in ["images", "masks"] {
        let p = out.join(dir);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut doc = AnnotationDoc::default();
    let mut entries = Vec::with_capacity(scenes.len());
    for (scene, truth) in &scenes {
        let img_rel = format!("images/{}.png", scene.id);
        let mask_rel = format!("masks/{}.png", scene.id);
        io::write_image(&out.join(&img_rel), &scene.pixels)?;
        io::write_mask(&out.join(&mask_rel), &truth.mask)?;
        doc.images.insert(
            scene.id.clone(),
            ImageRegions {
                filename: Some(format!("{}.png", scene.id)),
                regions: regions_of(truth),
            },
        );
        entries.push(ManifestEntry {
            id: scene.id.clone(),
            path: img_rel,
            source: scene.source,
            fence: scene.fence,
            split: None,
            mask_path: Some(mask_rel),
        });
    }
    fsutil::write_atomic(&out.join("annotations.json"), format!("{}\n", doc.to_json()).as_bytes())?;
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        entries,
    };
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

/// Few-shot episode settings: two-way tasks whose scenes share one site look
/// (background, tint, texture, layout) drawn per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub scene: SceneSpec,
    /// Support scenes per class.
    pub shots: usize,
    /// Query scenes per class.
    pub queries: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            scene: SceneSpec {
                width: 32,
                height: 32,
                line_height: 5,
                wire_rows: 2,
                post_spacing: 10,
                insulators: Insulators::Random(0),
                insulator_size: (2, 2),
                ..SceneSpec::default()
            },
            shots: 5,
            queries: 5,
        }
    }
}

/// Labeled scenes of one episode: `(support, query)`, each ordered class by
/// class.
pub type Episode = (Vec<(Image, FenceLabel)>, Vec<(Image, FenceLabel)>);

pub fn gen_episode(spec: &EpisodeSpec, task_seed: u64) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
    let mut site = spec.scene.clone();
    site.texture = rng.random_range(0.02..=0.15);
    site.jitter = rng.random_range(0.0..=0.3);
    site.source = if rng.random_bool(0.5) { Source::Drone } else { Source::Still };
    let mut draw = |count: usize, salt: u64| -> Result<Vec<(Image, FenceLabel)>> {
        let mut out = Vec::with_capacity(2 * count);
        for fence in FenceLabel::CLASSES {
            for _ in 0..count {
                let mut s = site.clone();
                s.fence = fence;
                s.seed = rng.random::<u64>() ^ salt;
                let (scene, _) = gen_scene(&s)?;
                out.push((scene.pixels, fence));
            }
        }
        Ok(out)
    };
    let support = draw(spec.shots, 0)?;
    let query = draw(spec.queries, 1)?;
    Ok((support, query))
}

/// Episode as a meta-learning task with one-hot targets.
pub fn gen_task(spec: &EpisodeSpec, task_seed: u64) -> Result<MetaTask> {
    let (support, query) = gen_episode(spec, task_seed)?;
    let to_samples = |set: Vec<(Image, FenceLabel)>| -> Vec<Sample> {
        set.into_iter()
            .map(|(img, fence)| {
                let class = fence.class_index().expect("episodes use labeled fences");
                Sample::one_hot(img.to_tensor(), class, FenceLabel::CLASSES.len())
            })
            .collect()
    };
    Ok(MetaTask {
        support: to_samples(support),
        query: to_samples(query),
    })
}
