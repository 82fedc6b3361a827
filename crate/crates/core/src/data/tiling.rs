use serde::{Deserialize, Serialize};

use super::raster::{BinaryMask, Raster};
use crate::error::{Error, Result};

/// Layout of square tiles covering an image padded up to tile multiples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub tile: usize,
    pub rows: usize,
    pub cols: usize,
    /// Original image width.
    pub width: usize,
    /// Original image height.
    pub height: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl TileGrid {
    pub fn new(width: usize, height: usize, tile: usize) -> Result<Self> {
        if tile == 0 {
            return Err(Error::Config("tile size must be at least 1".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::Data(format!("cannot tile an empty {width}x{height} image")));
        }
        let cols = width.div_ceil(tile);
        let rows = height.div_ceil(tile);
        Ok(Self {
            tile,
            rows,
            cols,
            width,
            height,
            pad_bottom: rows * tile - height,
            pad_right: cols * tile - width,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Global `(x0, y0)` of tile `(row, col)`.
    pub fn origin(&self, row: usize, col: usize) -> (usize, usize) {
        (col * self.tile, row * self.tile)
    }

    /// `(row, col)` of the `index`-th tile in row-major order.
    pub fn position(&self, index: usize) -> Result<(usize, usize)> {
        if index >= self.len() {
            return Err(Error::Contract(format!(
                "tile index {index} outside a {}x{} grid",
                self.rows, self.cols
            )));
        }
        Ok((index / self.cols, index % self.cols))
    }
}

/// Cuts `img` into row-major `tile`×`tile` pieces, replicating the last row
/// and column into the padding.
pub fn slice_image<T: Copy>(img: &Raster<T>, tile: usize) -> Result<(Vec<Raster<T>>, TileGrid)> {
    let grid = TileGrid::new(img.width(), img.height(), tile)?;
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut tiles = Vec::with_capacity(grid.len());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let (x0, y0) = grid.origin(r, c);
            let mut data = Vec::with_capacity(tile * tile * ch);
            for y in 0..tile {
                let sy = (y0 + y).min(h - 1);
                let row = img.row(sy);
                let inside = w.saturating_sub(x0).min(tile);
                data.extend_from_slice(&row[x0 * ch..(x0 + inside) * ch]);
                let last = &row[(w - 1) * ch..w * ch];
                for _ in inside..tile {
                    data.extend_from_slice(last);
                }
            }
            tiles.push(Raster::new(tile, tile, ch, data)?);
        }
    }
    Ok((tiles, grid))
}

/// Inverse of [`slice_image`]: stitches tiles and crops the padding away.
pub fn reassemble<T: Copy + Default>(tiles: &[Raster<T>], grid: &TileGrid) -> Result<Raster<T>> {
    if tiles.len() != grid.len() {
        return Err(Error::Data(format!(
            "grid has {} tiles, got {}",
            grid.len(),
            tiles.len()
        )));
    }
    let ch = tiles.first().map_or(1, Raster::channels);
    for t in tiles {
        if t.dims() != (grid.tile, grid.tile) || t.channels() != ch {
            return Err(Error::Data(format!(
                "tile is {}x{}x{}, expected {}x{}x{ch}",
                t.width(),
                t.height(),
                t.channels(),
                grid.tile,
                grid.tile
            )));
        }
    }
    let mut out = Raster::filled(grid.width, grid.height, ch, T::default());
    for (i, t) in tiles.iter().enumerate() {
        let (r, c) = grid.position(i)?;
        let (x0, y0) = grid.origin(r, c);
        out.blit(t, x0, y0)?;
    }
    Ok(out)
}

/// Outcome of [`filter_positive`].
#[derive(Debug, Clone)]
pub struct Filtered<T> {
    /// Kept pairs together with their original tile index.
    pub kept: Vec<(usize, Raster<T>, BinaryMask)>,
    pub discarded: usize,
}

/// Keeps tiles whose mask has at least `min_positive` positive pixels.
pub fn filter_positive<T: Copy>(
    tiles: Vec<Raster<T>>,
    masks: Vec<BinaryMask>,
    min_positive: usize,
) -> Result<Filtered<T>> {
    if tiles.len() != masks.len() {
        return Err(Error::Data(format!(
            "{} tiles but {} masks",
            tiles.len(),
            masks.len()
        )));
    }
    let mut kept = Vec::new();
    let mut discarded = 0;
    for (i, (t, m)) in tiles.into_iter().zip(masks).enumerate() {
        if m.count_positive() >= min_positive.max(1) {
            kept.push((i, t, m));
        } else {
            discarded += 1;
        }
    }
    Ok(Filtered { kept, discarded })
}
