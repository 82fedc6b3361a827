//! Data preparation: rasters, tiling, annotation import, mask assembly,
//! augmentation, resizing, dataset splits and image files.

pub mod annotation;
pub mod augment;
pub mod io;
pub mod manifest;
pub mod masks;
pub mod raster;
pub mod resize;
pub mod split;
pub mod tiling;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use annotation::{import_annotations, AnnotationDoc, Region, Shape};
pub use augment::{augment, AugmentConfig, AugmentPlan};
pub use manifest::{DatasetManifest, ManifestEntry};
pub use masks::{concat_masks, union_masks};
pub use raster::{BinaryMask, Image, ProbabilityMask, Raster};
pub use resize::{resize_bilinear, resize_for_classification};
pub use split::{split_dataset, Split, SplitFractions};
pub use tiling::{filter_positive, reassemble, slice_image, TileGrid};

/// Fence taxonomy. Class indices follow report order: double = 0, single = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FenceLabel {
    Double,
    Single,
    Unknown,
}

impl FenceLabel {
    pub const CLASSES: [FenceLabel; 2] = [FenceLabel::Double, FenceLabel::Single];
    pub const CLASS_NAMES: [&'static str; 2] = ["double", "single"];

    pub fn class_index(self) -> Option<usize> {
        match self {
            FenceLabel::Double => Some(0),
            FenceLabel::Single => Some(1),
            FenceLabel::Unknown => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FenceLabel::Double => "double",
            FenceLabel::Single => "single",
            FenceLabel::Unknown => "unknown",
        }
    }
}

impl fmt::Display for FenceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FenceLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "double" => Ok(FenceLabel::Double),
            "single" => Ok(FenceLabel::Single),
            "unknown" => Ok(FenceLabel::Unknown),
            _ => Err(Error::Data(format!("unknown fence label {s:?}"))),
        }
    }
}

/// Camera that captured a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Drone,
    Still,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Drone => "drone",
            Source::Still => "still",
        })
    }
}

/// A scene photograph with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub id: String,
    pub source: Source,
    pub fence: FenceLabel,
    pub pixels: Image,
}
