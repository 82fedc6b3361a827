//! Dense kernels shared by forward and backward passes.

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Mat<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn fits(&self) -> bool {
        self.rows == 0
            || self.cols == 0
            || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// `c = a · b + (accumulate ? c : 0)`, with `c` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, c: &mut [f64], accumulate: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(a.fits() && b.fits(), "gemm operand out of bounds");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every index touched by dgemm is bounded by the `fits` checks
    // above and by `c.len() == m * n` with unit column stride.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel stride-1 convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kernel: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.kernel * self.kernel * self.k
    }

    pub fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.pad == 0
    }
}

/// Unfolds `x` into a `[ho*wo, kernel*kernel*k]` patch matrix whose column
/// order matches the `[kh, kw, k]` prefix of the weight layout.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.pixels() * patch];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * patch..][..patch];
            for ky in 0..g.kernel {
                let iy = (oy + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.k;
                    let dst = (ky * g.kernel + kx) * g.k;
                    row[dst..dst + g.k].copy_from_slice(&x[src..src + g.k]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds patch gradients back onto the input grid.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let patch = g.patch();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * patch..][..patch];
            for ky in 0..g.kernel {
                let iy = (oy + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.k;
                    let src = (ky * g.kernel + kx) * g.k;
                    out[dst..dst + g.k]
                        .iter_mut()
                        .zip(&row[src..src + g.k])
                        .for_each(|(o, v)| *o += v);
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over contiguous rows of length `width`.
pub(crate) fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if width == 0 {
        return out;
    }
    for (src, dst) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_product_and_transpose_views() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..20).map(|v| (v as f64).sin()).collect();
        let mut c = vec![0.0; 15];
        gemm(Mat::row_major(&a, 3, 4), Mat::row_major(&b, 4, 5), &mut c, false);
        let want = naive(&a, &b, 3, 4, 5);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // aᵀ viewed through strides, multiplied back against a 3×5 matrix.
        let d: Vec<f64> = (0..15).map(|v| v as f64).collect();
        let mut e = vec![0.0; 20];
        gemm(Mat::row_major(&a, 3, 4).t(), Mat::row_major(&d, 3, 5), &mut e, false);
        let at: Vec<f64> = (0..12).map(|i| a[(i % 3) * 4 + i / 3]).collect();
        let want = naive(&at, &d, 4, 3, 5);
        for (x, y) in e.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            h: 4,
            w: 5,
            k: 2,
            kernel: 3,
            pad: 1,
            ho: 4,
            wo: 5,
        };
        let x: Vec<f64> = (0..40).map(|v| (v as f64 * 0.37).cos()).collect();
        let y: Vec<f64> = (0..g.pixels() * g.patch())
            .map(|v| (v as f64 * 0.11).sin())
            .collect();
        let ax = im2col(&x, &g);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut aty = vec![0.0; x.len()];
        col2im_add(&y, &g, &mut aty);
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
