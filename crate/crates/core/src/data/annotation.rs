//! VIA-style region annotations and their rasterization.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::raster::BinaryMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum Shape {
    Polygon {
        all_points_x: Vec<f64>,
        all_points_y: Vec<f64>,
    },
    Rect {
        x: f64,
        y: f64,
        width: f64,
        height: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionAttributes {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub shape_attributes: Shape,
    #[serde(default)]
    pub region_attributes: RegionAttributes,
}

impl Region {
    pub fn rect(x: usize, y: usize, width: usize, height: usize) -> Self {
        Self {
            shape_attributes: Shape::Rect {
                x: x as f64,
                y: y as f64,
                width: width as f64,
                height: height as f64,
            },
            region_attributes: RegionAttributes {
                label: Some("insulator".into()),
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageRegions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filename: Option<String>,
    #[serde(default)]
    pub regions: Vec<Region>,
}

/// Annotation file: image id → regions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotationDoc {
    pub images: BTreeMap<String, ImageRegions>,
}

impl AnnotationDoc {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(Error::from_json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("annotation doc serializes")
    }

    /// Regions for `id`, matched by key first and `filename` second.
    pub fn regions_for(&self, id: &str) -> Result<&[Region]> {
        if let Some(entry) = self.images.get(id) {
            return Ok(&entry.regions);
        }
        self.images
            .values()
            .find(|e| e.filename.as_deref() == Some(id))
            .map(|e| e.regions.as_slice())
            .ok_or_else(|| Error::Data(format!("no annotations for image {id}")))
    }

    pub fn mask_for(&self, id: &str, width: usize, height: usize) -> Result<BinaryMask> {
        import_annotations(self.regions_for(id)?, width, height)
    }
}

/// Rasterizes the union of `regions` onto a `width`×`height` mask.
///
/// A pixel is positive when its center lies inside a region or on its
/// boundary (even-odd rule for polygons). Coordinates outside the image are
/// clamped with a warning.
pub fn import_annotations(regions: &[Region], width: usize, height: usize) -> Result<BinaryMask> {
    let mut mask = BinaryMask::zeros(width, height);
    let (wf, hf) = (width as f64, height as f64);
    let clamp = |v: f64, hi: f64, what: &str| -> Result<f64> {
        if !v.is_finite() {
            return Err(Error::Data(format!("non-finite {what} coordinate")));
        }
        if v < 0.0 || v > hi {
            log::warn!("{what} coordinate {v} clamped to [0, {hi}]");
        }
        Ok(v.clamp(0.0, hi))
    };
    for (k, region) in regions.iter().enumerate() {
        match &region.shape_attributes {
            Shape::Rect {
                x,
                y,
                width: w,
                height: h,
            } => {
                if *w < 0.0 || *h < 0.0 {
                    return Err(Error::Data(format!("region {k}: negative rectangle size")));
                }
                let x0 = clamp(*x, wf, "x")?;
                let y0 = clamp(*y, hf, "y")?;
                let x1 = clamp(x + w, wf, "x")?;
                let y1 = clamp(y + h, hf, "y")?;
                for py in span(y0, y1, height) {
                    for px in span(x0, x1, width) {
                        mask.set(px, py, 0, 1);
                    }
                }
            }
            Shape::Polygon {
                all_points_x,
                all_points_y,
            } => {
                if all_points_x.len() != all_points_y.len() {
                    return Err(Error::Data(format!(
                        "region {k}: {} x but {} y coordinates",
                        all_points_x.len(),
                        all_points_y.len()
                    )));
                }
                if all_points_x.len() < 3 {
                    return Err(Error::Data(format!("region {k}: polygon needs 3 points")));
                }
                let pts: Vec<(f64, f64)> = all_points_x
                    .iter()
                    .zip(all_points_y)
                    .map(|(&x, &y)| Ok((clamp(x, wf, "x")?, clamp(y, hf, "y")?)))
                    .collect::<Result<_>>()?;
                fill_polygon(&mut mask, &pts);
            }
        }
    }
    Ok(mask)
}

/// Pixel indices whose centers fall in `[lo, hi]`.
fn span(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    let first = (lo - 0.5).ceil().max(0.0) as usize;
    let last = ((hi - 0.5).floor() + 1.0).max(0.0) as usize;
    first.min(n)..last.min(n)
}

fn fill_polygon(mask: &mut BinaryMask, pts: &[(f64, f64)]) {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    for py in span(y0, y1, mask.height()) {
        for px in span(x0, x1, mask.width()) {
            if point_in_polygon(px as f64 + 0.5, py as f64 + 0.5, pts) {
                mask.set(px, py, 0, 1);
            }
        }
    }
}

/// Even-odd test with boundary points counted as inside.
pub fn point_in_polygon(x: f64, y: f64, pts: &[(f64, f64)]) -> bool {
    let n = pts.len();
    let mut inside = false;
    for i in 0..n {
        let (ax, ay) = pts[i];
        let (bx, by) = pts[(i + 1) % n];
        let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
        if cross == 0.0
            && x >= ax.min(bx)
            && x <= ax.max(bx)
            && y >= ay.min(by)
            && y <= ay.max(by)
        {
            return true;
        }
        if (ay > y) != (by > y) {
            let xc = ax + (y - ay) * (bx - ax) / (by - ay);
            if x < xc {
                inside = !inside;
            }
        }
    }
    inside
}
