//! Post-processing of predicted masks into bounding boxes.

use serde::{Deserialize, Serialize};

use crate::data::{reassemble, BinaryMask, Image, ProbabilityMask, Raster, TileGrid};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_PAD: usize = 3;

/// Pixel is foreground iff `p >= threshold`.
pub fn binarize(mask: &ProbabilityMask, threshold: f64) -> BinaryMask {
    mask.map(|p| u8::from(p >= threshold))
}

/// 0/1 mask scaled to 0/255 for viewing.
pub fn render_255(mask: &BinaryMask) -> BinaryMask {
    mask.map(|v| if v != 0 { 255 } else { 0 })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[default]
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(Error::Config(format!("connectivity must be 4 or 8, got {n}"))),
        }
    }
}

/// A connected set of foreground pixels, listed in scan order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blob {
    pub pixels: Vec<(usize, usize)>,
}

impl Blob {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// Inclusive `(x0, y0, x1, y1)`.
    pub fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let &(fx, fy) = self.pixels.first()?;
        Some(self.pixels.iter().fold((fx, fy, fx, fy), |(x0, y0, x1, y1), &(x, y)| {
            (x0.min(x), y0.min(y), x1.max(x), y1.max(y))
        }))
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Maximal connected foreground sets with at least `min_area` pixels, ordered
/// by their first pixel in scan order. Only channel 0 is read.
pub fn find_components(mask: &BinaryMask, conn: Connectivity, min_area: usize) -> Vec<Blob> {
    let (w, h) = mask.dims();
    let on = |x: usize, y: usize| mask.get(x, y, 0) != 0;
    let mut parent: Vec<usize> = (0..w * h).collect();
    for y in 0..h {
        for x in 0..w {
            if !on(x, y) {
                continue;
            }
            let i = y * w + x;
            if x > 0 && on(x - 1, y) {
                union(&mut parent, i, i - 1);
            }
            if y > 0 {
                if on(x, y - 1) {
                    union(&mut parent, i, i - w);
                }
                if conn == Connectivity::Eight {
                    if x > 0 && on(x - 1, y - 1) {
                        union(&mut parent, i, i - w - 1);
                    }
                    if x + 1 < w && on(x + 1, y - 1) {
                        union(&mut parent, i, i - w + 1);
                    }
                }
            }
        }
    }
    let mut slot = vec![usize::MAX; w * h];
    let mut blobs: Vec<Blob> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !on(x, y) {
                continue;
            }
            let root = find(&mut parent, y * w + x);
            if slot[root] == usize::MAX {
                slot[root] = blobs.len();
                blobs.push(Blob { pixels: Vec::new() });
            }
            blobs[slot[root]].pixels.push((x, y));
        }
    }
    blobs.retain(|b| b.area() >= min_area.max(1));
    blobs
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    #[serde(rename = "w")]
    pub width: usize,
    #[serde(rename = "h")]
    pub height: usize,
    /// Mean foreground probability over the blob.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BBox {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Self {
            x,
            y,
            width,
            height,
            score: None,
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && y >= self.y && x < self.x + self.width && y < self.y + self.height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }
}

/// Tight box around `blob` grown by `pad` on every side and clamped to a
/// `width`×`height` image. Holes inside a blob do not affect its box.
pub fn bbox_of(blob: &Blob, pad: usize, width: usize, height: usize) -> Result<BBox> {
    let (x0, y0, x1, y1) = blob
        .bounds()
        .ok_or_else(|| Error::Contract("bounding box of an empty blob".into()))?;
    if x1 >= width || y1 >= height {
        return Err(Error::Contract(format!(
            "blob extends to ({x1},{y1}) outside a {width}x{height} image"
        )));
    }
    let (bx0, by0) = (x0.saturating_sub(pad), y0.saturating_sub(pad));
    let (bx1, by1) = ((x1 + pad).min(width - 1), (y1 + pad).min(height - 1));
    Ok(BBox::new(bx0, by0, bx1 - bx0 + 1, by1 - by0 + 1))
}

/// Detection settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub threshold: f64,
    pub pad: usize,
    pub connectivity: Connectivity,
    pub min_area: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            pad: DEFAULT_PAD,
            connectivity: Connectivity::Eight,
            min_area: 1,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} is not in (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

fn boxes_for(mask: &BinaryMask, prob: Option<&ProbabilityMask>, cfg: &DetectConfig) -> Result<Vec<BBox>> {
    let (w, h) = mask.dims();
    find_components(mask, cfg.connectivity, cfg.min_area)
        .iter()
        .map(|blob| {
            let mut b = bbox_of(blob, cfg.pad, w, h)?;
            b.score = prob.map(|p| {
                blob.pixels.iter().map(|&(x, y)| p.get(x, y, 0)).sum::<f64>() / blob.area() as f64
            });
            Ok(b)
        })
        .collect()
}

/// Binarize, label and box one probability map.
pub fn detect(prob: &ProbabilityMask, cfg: &DetectConfig) -> Result<Vec<BBox>> {
    cfg.validate()?;
    boxes_for(&binarize(prob, cfg.threshold), Some(prob), cfg)
}

/// Boxes on a binary mask, without scores.
pub fn detect_binary(mask: &BinaryMask, cfg: &DetectConfig) -> Result<Vec<BBox>> {
    boxes_for(mask, None, cfg)
}

/// Shifts tile-local boxes by their tile origin and clamps them to the
/// original image. Boxes lying entirely in the padding are dropped.
pub fn map_to_global(tile_boxes: &[(usize, Vec<BBox>)], grid: &TileGrid) -> Result<Vec<BBox>> {
    let mut out = Vec::new();
    for (index, boxes) in tile_boxes {
        let (r, c) = grid.position(*index)?;
        let (ox, oy) = grid.origin(r, c);
        for b in boxes {
            let (x, y) = (ox + b.x, oy + b.y);
            if x >= grid.width || y >= grid.height {
                continue;
            }
            out.push(BBox {
                x,
                y,
                width: b.width.min(grid.width - x),
                height: b.height.min(grid.height - y),
                score: b.score,
            });
        }
    }
    Ok(out)
}

/// Detection over a tiled image: tile maps are reassembled and labeled as one
/// mask, so a blob cut by a tile edge yields a single box.
pub fn detect_tiled(tiles: &[ProbabilityMask], grid: &TileGrid, cfg: &DetectConfig) -> Result<Vec<BBox>> {
    cfg.validate()?;
    let prob = reassemble(tiles, grid)?;
    detect(&prob, cfg)
}

/// Boxes found in one image, as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detections {
    pub image_id: String,
    pub boxes: Vec<BBox>,
    pub threshold: f64,
    pub pad: usize,
}

/// Copy of `img` with each box outline drawn `stroke` pixels wide (inward).
/// Boxes are clipped to the image.
pub fn render_overlay(img: &Image, boxes: &[BBox], color: &[f64], stroke: usize) -> Result<Image> {
    if color.len() != img.channels() {
        return Err(Error::Data(format!(
            "overlay color has {} channels, image has {}",
            color.len(),
            img.channels()
        )));
    }
    let mut out = img.clone();
    let (w, h) = img.dims();
    for b in boxes {
        if b.width == 0 || b.height == 0 || b.x >= w || b.y >= h {
            continue;
        }
        let (x1, y1) = ((b.x + b.width).min(w), (b.y + b.height).min(h));
        for y in b.y..y1 {
            for x in b.x..x1 {
                let edge = x < b.x + stroke
                    || y < b.y + stroke
                    || x + stroke >= b.x + b.width
                    || y + stroke >= b.y + b.height;
                if edge {
                    out.pixel_mut(x, y).copy_from_slice(color);
                }
            }
        }
    }
    Ok(out)
}

/// Pixelwise `|gt − pred|`.
pub fn residual_mask(gt: &BinaryMask, pred: &BinaryMask) -> Result<BinaryMask> {
    if gt.dims() != pred.dims() || gt.channels() != pred.channels() {
        return Err(Error::Data(format!(
            "residual of {}x{} and {}x{} masks",
            gt.width(),
            gt.height(),
            pred.width(),
            pred.height()
        )));
    }
    let data = gt
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&a, &b)| u8::from((a != 0) != (b != 0)))
        .collect();
    Raster::new(gt.width(), gt.height(), gt.channels(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::slice_image;
    use crate::metrics::PixelCounts;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        Raster::from_fn(w, h, 1, |x, y, _| u8::from(rows[y].as_bytes()[x] == b'#'))
    }

    /// Breadth-first flood fill from every unvisited foreground pixel.
    fn flood_fill(mask: &BinaryMask, conn: Connectivity) -> Vec<Vec<(usize, usize)>> {
        let (w, h) = mask.dims();
        let mut seen = vec![false; w * h];
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y, 0) == 0 || seen[y * w + x] {
                    continue;
                }
                let mut comp = Vec::new();
                let mut queue = std::collections::VecDeque::from([(x, y)]);
                seen[y * w + x] = true;
                while let Some((cx, cy)) = queue.pop_front() {
                    comp.push((cx, cy));
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if (dx == 0 && dy == 0) || (conn == Connectivity::Four && dx != 0 && dy != 0) {
                                continue;
                            }
                            let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                                continue;
                            }
                            let (nx, ny) = (nx as usize, ny as usize);
                            if mask.get(nx, ny, 0) != 0 && !seen[ny * w + nx] {
                                seen[ny * w + nx] = true;
                                queue.push_back((nx, ny));
                            }
                        }
                    }
                }
                comp.sort_by_key(|&(x, y)| (y, x));
                out.push(comp);
            }
        }
        out
    }

    #[test]
    fn binarize_boundary_and_render() {
        let p = |v| Raster::filled(3, 2, 1, v);
        assert!(binarize(&p(0.49), 0.5).data().iter().all(|&v| v == 0));
        let on = binarize(&p(0.51), 0.5);
        assert!(on.data().iter().all(|&v| v == 1));
        assert!(render_255(&on).data().iter().all(|&v| v == 255));
        assert!(binarize(&p(0.5), 0.5).data().iter().all(|&v| v == 1));
    }

    #[test]
    fn empty_mask_has_no_components() {
        assert!(find_components(&BinaryMask::zeros(5, 4), Connectivity::Eight, 1).is_empty());
    }

    #[test]
    fn diagonal_pixels_depend_on_connectivity() {
        let m = mask_from(&["#.", ".#"]);
        assert_eq!(find_components(&m, Connectivity::Eight, 1).len(), 1);
        assert_eq!(find_components(&m, Connectivity::Four, 1).len(), 2);
    }

    #[test]
    fn u_shape_is_one_component_in_scan_order() {
        let m = mask_from(&["#.#..", "#.#.#", "###.."]);
        let blobs = find_components(&m, Connectivity::Four, 1);
        assert_eq!(blobs.len(), 2);
        assert_eq!(blobs[0].area(), 7);
        assert_eq!(blobs[1].pixels, vec![(4, 1)]);
        assert_eq!(find_components(&m, Connectivity::Four, 2).len(), 1);
    }

    #[test]
    fn bbox_arithmetic_and_clamping() {
        let single = Blob { pixels: vec![(10, 10)] };
        assert_eq!(bbox_of(&single, 0, 50, 50).unwrap(), BBox::new(10, 10, 1, 1));
        let square = Blob {
            pixels: (10..13).flat_map(|y| (10..13).map(move |x| (x, y))).collect(),
        };
        assert_eq!(bbox_of(&square, 2, 50, 50).unwrap(), BBox::new(8, 8, 7, 7));
        let corner = Blob { pixels: vec![(0, 0), (1, 0)] };
        assert_eq!(bbox_of(&corner, 3, 50, 50).unwrap(), BBox::new(0, 0, 5, 4));
        let far = Blob { pixels: vec![(49, 49)] };
        assert_eq!(bbox_of(&far, 3, 50, 50).unwrap(), BBox::new(46, 46, 4, 4));
        let empty = Blob { pixels: vec![] };
        assert!(matches!(bbox_of(&empty, 1, 5, 5), Err(Error::Contract(_))));
    }

    #[test]
    fn blob_with_hole_is_boxed_by_outer_extent() {
        let m = mask_from(&["###", "#.#", "###"]);
        let boxes = detect_binary(&m, &DetectConfig { pad: 0, ..DetectConfig::default() }).unwrap();
        assert_eq!(boxes, vec![BBox::new(0, 0, 3, 3)]);
    }

    #[test]
    fn map_to_global_offsets() {
        let grid = TileGrid::new(2048, 1024, 512).unwrap();
        let idx = grid.cols + 2;
        let got = map_to_global(&[(idx, vec![BBox::new(0, 0, 4, 4)])], &grid).unwrap();
        assert_eq!(got, vec![BBox::new(1024, 512, 4, 4)]);

        let single = TileGrid::new(40, 30, 64).unwrap();
        let b = BBox::new(3, 4, 5, 6);
        assert_eq!(map_to_global(&[(0, vec![b])], &single).unwrap(), vec![b]);
        // Entirely in padding, then straddling the right edge.
        let clipped = map_to_global(&[(0, vec![BBox::new(45, 0, 3, 3), BBox::new(38, 0, 5, 2)])], &single).unwrap();
        assert_eq!(clipped, vec![BBox::new(38, 0, 2, 2)]);
        assert!(matches!(map_to_global(&[(1, vec![])], &single), Err(Error::Contract(_))));
    }

    #[test]
    fn blob_across_tile_edges_gives_one_box() {
        let (w, h) = (40, 30);
        let prob = Raster::from_fn(w, h, 1, |x, y, _| {
            if (14..19).contains(&x) && (13..18).contains(&y) {
                0.9
            } else {
                0.1
            }
        });
        let (tiles, grid) = slice_image(&prob, 16).unwrap();
        let cfg = DetectConfig { pad: 1, ..DetectConfig::default() };
        let boxes = detect_tiled(&tiles, &grid, &cfg).unwrap();
        assert_eq!(boxes.len(), 1);
        assert_eq!((boxes[0].x, boxes[0].y, boxes[0].width, boxes[0].height), (13, 12, 7, 7));
        assert!((boxes[0].score.unwrap() - 0.9).abs() < 1e-12);

        // Per-tile boxes would have split the blob into four.
        let per_tile: Vec<(usize, Vec<BBox>)> = tiles
            .iter()
            .enumerate()
            .map(|(i, t)| (i, detect(t, &cfg).unwrap()))
            .collect();
        assert_eq!(map_to_global(&per_tile, &grid).unwrap().len(), 4);
    }

    #[test]
    fn overlay_draws_exact_perimeter() {
        let img = Raster::filled(20, 15, 3, 0.25);
        assert_eq!(render_overlay(&img, &[], &[1.0, 0.0, 0.0], 1).unwrap(), img);
        let b = BBox::new(3, 2, 7, 5);
        let out = render_overlay(&img, &[b], &[1.0, 0.0, 0.0], 1).unwrap();
        let changed = (0..15)
            .flat_map(|y| (0..20).map(move |x| (x, y)))
            .filter(|&(x, y)| out.pixel(x, y) != img.pixel(x, y))
            .count();
        assert_eq!(changed, 2 * 7 + 2 * 5 - 4);
        assert_eq!(img.get(3, 2, 0), 0.25);
        assert!(render_overlay(&img, &[b], &[1.0], 1).is_err());
    }

    #[test]
    fn overlapping_overlays_union_perimeters() {
        let img = Raster::filled(16, 16, 1, 0.0);
        let boxes = [BBox::new(1, 1, 6, 6), BBox::new(4, 3, 8, 9)];
        let out = render_overlay(&img, &boxes, &[1.0], 1).unwrap();
        let on_perimeter = |b: &BBox, x: usize, y: usize| {
            b.contains(x, y) && (x == b.x || y == b.y || x == b.x + b.width - 1 || y == b.y + b.height - 1)
        };
        for y in 0..16 {
            for x in 0..16 {
                let want = boxes.iter().any(|b| on_perimeter(b, x, y));
                assert_eq!(out.get(x, y, 0) == 1.0, want, "({x},{y})");
            }
        }
        assert_eq!(render_overlay(&out, &boxes, &[1.0], 1).unwrap(), out);
    }

    #[test]
    fn residual_examples() {
        let a = mask_from(&["##.", ".#."]);
        assert!(residual_mask(&a, &a).unwrap().data().iter().all(|&v| v == 0));
        let ones = Raster::filled(3, 2, 1, 1u8);
        assert!(residual_mask(&ones, &BinaryMask::zeros(3, 2)).unwrap().data().iter().all(|&v| v == 1));
        assert!(matches!(residual_mask(&a, &BinaryMask::zeros(2, 3)), Err(Error::Data(_))));
    }

    fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, density: f64) -> BinaryMask {
        Raster::from_fn(w, h, 1, |_, _, _| u8::from(rng.random_bool(density)))
    }

    #[test]
    fn components_match_flood_fill_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (w, h) = (rng.random_range(1..24), rng.random_range(1..24));
            let density = rng.random_range(0.1..0.7);
            let m = random_mask(&mut rng, w, h, density);
            for conn in [Connectivity::Four, Connectivity::Eight] {
                let ours: Vec<Vec<(usize, usize)>> =
                    find_components(&m, conn, 1).into_iter().map(|b| b.pixels).collect();
                assert_eq!(ours, flood_fill(&m, conn));
            }
        }
    }

    proptest! {
        #[test]
        fn four_connectivity_never_merges_more(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_mask(&mut rng, 12, 9, 0.4);
            let n4 = find_components(&m, Connectivity::Four, 1).len();
            let n8 = find_components(&m, Connectivity::Eight, 1).len();
            prop_assert!(n4 >= n8);
        }

        #[test]
        fn padded_boxes_hold_their_blobs(seed in any::<u64>(), pad in 0usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (15, 11);
            let m = random_mask(&mut rng, w, h, 0.3);
            for blob in find_components(&m, Connectivity::Eight, 1) {
                let b = bbox_of(&blob, pad, w, h).unwrap();
                prop_assert!(b.width >= 1 && b.height >= 1);
                prop_assert!(b.x + b.width <= w && b.y + b.height <= h);
                prop_assert!(blob.pixels.iter().all(|&(x, y)| b.contains(x, y)));
            }
        }

        #[test]
        fn residual_sum_is_fp_plus_fn(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_mask(&mut rng, 9, 7, 0.5);
            let p = random_mask(&mut rng, 9, 7, 0.5);
            let r = residual_mask(&g, &p).unwrap();
            let c = PixelCounts::of(&g, &p).unwrap();
            prop_assert_eq!(r.count_positive() as u64, c.fp + c.fn_);
        }
    }
}
