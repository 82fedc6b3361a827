use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major interleaved pixel buffer, indexed `(y * width + x) * channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

/// RGB image with channel values in [0, 1].
pub type Image = Raster<f64>;
/// Single-channel mask with values in {0, 1}.
pub type BinaryMask = Raster<u8>;
/// Single-channel per-pixel foreground probabilities.
pub type ProbabilityMask = Raster<f64>;

impl<T: Copy> Raster<T> {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Data("raster needs at least one channel".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::Data(format!(
                "{width}x{height}x{channels} raster needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        Self {
            width,
            height,
            channels: channels.max(1),
            data: vec![value; width * height * channels.max(1)],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let channels = channels.max(1);
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(width, height)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: T) {
        let i = self.index(x, y, c);
        self.data[i] = value;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [T] {
        let i = self.index(x, y, 0);
        &mut self.data[i..i + self.channels]
    }

    pub fn row(&self, y: usize) -> &[T] {
        let n = self.width * self.channels;
        &self.data[y * n..(y + 1) * n]
    }

    /// Copies the `w`×`h` window at `(x0, y0)`; the window must lie inside.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Data(format!(
                "crop {w}x{h} at ({x0},{y0}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * self.channels);
        for y in y0..y0 + h {
            let start = self.index(x0, y, 0);
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Ok(Self {
            width: w,
            height: h,
            channels: self.channels,
            data,
        })
    }

    /// Writes `src` with its top-left corner at `(x0, y0)`, clipping at the edges.
    pub fn blit(&mut self, src: &Self, x0: usize, y0: usize) -> Result<()> {
        if src.channels != self.channels {
            return Err(Error::Data("blit channel mismatch".into()));
        }
        let w = src.width.min(self.width.saturating_sub(x0));
        for y in 0..src.height.min(self.height.saturating_sub(y0)) {
            let dst = self.index(x0, y0 + y, 0);
            let s = src.index(0, y, 0);
            self.data[dst..dst + w * self.channels]
                .copy_from_slice(&src.data[s..s + w * self.channels]);
        }
        Ok(())
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn same_dims<U>(&self, other: &Raster<U>, op: &str) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::Data(format!(
                "{op}: dims {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

impl Raster<f64> {
    /// `[H, W, C]` tensor view of the pixels.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, self.channels], self.data.clone())
            .expect("raster length matches its dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w, c) = t.hwc()?;
        Self::new(w, h, c, t.data().to_vec())
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

impl Raster<u8> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 1, 0)
    }

    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Mask as a `[H, W, 1]` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| f64::from(v != 0)).collect();
        Tensor::new(vec![self.height, self.width, self.channels], data)
            .expect("raster length matches its dims")
    }

    /// Mask with exactly the pixels `{0, 1}`; any nonzero becomes 1.
    pub fn normalized(&self) -> Self {
        self.map(|v| u8::from(v != 0))
    }

    /// Single-channel float copy, 1.0 for positive pixels.
    pub fn to_image(&self) -> Raster<f64> {
        self.map(|v| f64::from(v != 0))
    }
}
