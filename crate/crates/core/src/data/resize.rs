use super::raster::{Image, Raster};

/// Bilinear resampling with half-pixel centers and clamped borders.
pub fn resize_bilinear(img: &Image, width: usize, height: usize) -> Image {
    if img.dims() == (width, height) {
        return img.clone();
    }
    let ch = img.channels();
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = axis(width, img.width());
    let ys = axis(height, img.height());
    let mut out = Raster::filled(width, height, ch, 0.0);
    for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..ch {
                let top = img.get(x0, y0, c) * (1.0 - fx) + img.get(x1, y0, c) * fx;
                let bottom = img.get(x0, y1, c) * (1.0 - fx) + img.get(x1, y1, c) * fx;
                out.set(x, y, c, top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Square bilinear resize used to feed the classifier.
pub fn resize_for_classification(img: &Image, size: usize) -> Image {
    resize_bilinear(img, size, size)
}

/// Nearest-neighbor resampling; the source pixel is the one containing the
/// output pixel's center.
pub fn resize_nearest<T: Copy>(img: &Raster<T>, width: usize, height: usize) -> Raster<T> {
    let (w, h) = img.dims();
    Raster::from_fn(width, height, img.channels(), |x, y, c| {
        let sx = ((x * 2 + 1) * w / (2 * width)).min(w - 1);
        let sy = ((y * 2 + 1) * h / (2 * height)).min(h - 1);
        img.get(sx, sy, c)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_unchanged() {
        let img = Raster::from_fn(512, 512, 3, |x, y, c| ((x * 3 + y + c) % 255) as f64 / 255.0);
        assert_eq!(resize_for_classification(&img, 512), img);
    }

    #[test]
    fn constant_stays_constant() {
        let img = Raster::filled(1024, 1024, 3, 0.3);
        let out = resize_for_classification(&img, 512);
        assert_eq!(out.dims(), (512, 512));
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn two_pixel_image_matches_direct_bilinear_evaluation() {
        let (a, b) = (0.2, 0.9);
        let img = Raster::new(2, 1, 1, vec![a, b]).unwrap();
        let out = resize_for_classification(&img, 512);
        for x in 0..512 {
            // Source coordinate of the output column center, clamped to [0, 1].
            let s = (((x as f64) + 0.5) * 2.0 / 512.0 - 0.5).clamp(0.0, 1.0);
            let want = a + (b - a) * s;
            let mean = (0..512).map(|y| out.get(x, y, 0)).sum::<f64>() / 512.0;
            assert!((mean - want).abs() <= 1e-9, "column {x}: {mean} vs {want}");
        }
        assert_eq!(out.get(0, 0, 0), a);
        assert_eq!(out.get(511, 300, 0), b);
        assert!(out.get(200, 0, 0) < (a + b) / 2.0);
        assert!(out.get(311, 0, 0) > (a + b) / 2.0);
    }

    #[test]
    fn nearest_upsample_repeats_pixels() {
        let img = Raster::new(2, 1, 1, vec![1u8, 2]).unwrap();
        let out = resize_nearest(&img, 4, 2);
        assert_eq!(out.data(), &[1, 1, 2, 2, 1, 1, 2, 2]);
    }
}
