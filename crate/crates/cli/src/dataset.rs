//! Manifest entries turned into training samples.

use fencepipe::data::{io, resize_for_classification, DatasetManifest, FenceLabel, ManifestEntry, Split};
use fencepipe::models::ModelGraph;
use fencepipe::optim::Sample;
use fencepipe::{Error, Result};

fn mask_of(manifest: &DatasetManifest, e: &ManifestEntry) -> Result<fencepipe::data::BinaryMask> {
    let rel = e
        .mask_path
        .as_deref()
        .ok_or_else(|| Error::Data(format!("entry {} has no mask", e.id)))?;
    io::read_mask(&manifest.resolve(rel))
}

/// Image/mask pairs of one split. Targets are center-cropped to the model's
/// output size when it differs from the input (valid padding).
pub fn segmentation(manifest: &DatasetManifest, split: Split, model: &ModelGraph) -> Result<Vec<Sample>> {
    manifest
        .in_split(split)
        .map(|e| {
            let img = io::read_image(&manifest.resolve(&e.path))?;
            let mask = mask_of(manifest, e)?;
            if mask.dims() != img.dims() {
                return Err(Error::Data(format!(
                    "mask of {} is {}x{}, image is {}x{}",
                    e.id,
                    mask.width(),
                    mask.height(),
                    img.width(),
                    img.height()
                )));
            }
            let input = img.to_tensor();
            let out = model.output_shapes(input.shape())?;
            let last = out.last().expect("model has layers");
            let (oh, ow) = (last[0], last[1]);
            let target = if (ow, oh) == mask.dims() {
                mask
            } else {
                mask.crop((mask.width() - ow) / 2, (mask.height() - oh) / 2, ow, oh)?
            };
            Ok(Sample::new(input, target.to_tensor()))
        })
        .collect()
}

/// Resized images with one-hot fence labels.
pub fn classification(manifest: &DatasetManifest, split: Split, input_size: usize) -> Result<Vec<Sample>> {
    manifest
        .in_split(split)
        .map(|e| {
            let class = e
                .fence
                .class_index()
                .ok_or_else(|| Error::Data(format!("entry {} has no fence label", e.id)))?;
            let img = io::read_image(&manifest.resolve(&e.path))?;
            let img = resize_for_classification(&img, input_size);
            Ok(Sample::one_hot(img.to_tensor(), class, FenceLabel::CLASSES.len()))
        })
        .collect()
}
