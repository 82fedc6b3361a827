use super::kernels::{gemm, im2col, sigmoid, softmax_rows, ConvGeom, Mat};
use super::tape::{Op, LOG_EPS};
use super::{Activation, OutputActivation, Padding, Tape, Tensor, Var};
use crate::error::{Error, Result};

impl Tape {
    fn feature_map(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize)> {
        let t = self.value(v);
        let dims = t
            .hwc()
            .map_err(|_| Error::dim(op, format!("expected [H, W, C] input, got {:?}", t.shape())))?;
        if t.is_empty() {
            return Err(Error::EmptyInput { op });
        }
        Ok(dims)
    }

    fn expect_shape(&self, op: &'static str, v: Var, shape: &[usize]) -> Result<()> {
        let got = self.shape(v);
        if got != shape {
            return Err(Error::dim(op, format!("expected shape {shape:?}, got {got:?}")));
        }
        Ok(())
    }

    fn conv(
        &mut self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        padding: Padding,
        act: Activation,
    ) -> Result<Var> {
        let (h, wd, k) = self.feature_map(op, x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != kernel || ws[1] != kernel || ws[2] != k {
            return Err(Error::dim(
                op,
                format!("weights {ws:?} incompatible with {kernel}x{kernel} kernel over {k} channels"),
            ));
        }
        let l = ws[3];
        self.expect_shape(op, b, &[l])?;
        let pad = match padding {
            Padding::Same => kernel / 2,
            Padding::Valid => 0,
        };
        if h + 2 * pad < kernel || wd + 2 * pad < kernel {
            return Err(Error::dim(op, format!("{h}x{wd} input smaller than kernel")));
        }
        let geom = ConvGeom {
            h,
            w: wd,
            k,
            kernel,
            pad,
            ho: h + 2 * pad - kernel + 1,
            wo: wd + 2 * pad - kernel + 1,
        };
        let p = geom.pixels();
        let mut out = vec![0.0; p * l];
        {
            let owned;
            let cols: &[f64] = if geom.is_pointwise() {
                self.value(x).data()
            } else {
                owned = im2col(self.value(x).data(), &geom);
                &owned
            };
            gemm(
                Mat::row_major(cols, p, geom.patch()),
                Mat::row_major(self.value(w).data(), geom.patch(), l),
                &mut out,
                false,
            );
        }
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(l.max(1)) {
            row.iter_mut().zip(bias).for_each(|(o, bv)| *o += bv);
        }
        let relu = act == Activation::Relu;
        if relu {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let value = Tensor::new(vec![geom.ho, geom.wo, l], out)?;
        self.push(
            op,
            value,
            Op::Conv {
                x,
                w,
                b,
                geom,
                out_ch: l,
                relu,
            },
        )
    }

    /// 3×3 convolution with weights `[3, 3, K, L]` and bias `[L]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: Padding, act: Activation) -> Result<Var> {
        self.conv("conv2d", x, w, b, 3, padding, act)
    }

    /// Per-pixel linear map across channels, weights `[1, 1, K, L]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.conv("conv1x1", x, w, b, 1, Padding::Valid, Activation::None)
    }

    /// 2×2 max pooling with stride 2. Ties route the gradient to the first
    /// window cell in row-major order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.feature_map("maxpool2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim("maxpool2", format!("{h}x{w} is not even")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; ho * wo * c];
        let mut argmax = vec![0usize; ho * wo * c];
        for y in 0..ho {
            for xx in 0..wo {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = ((2 * y + i) * w + 2 * xx + j) * c + ch;
                        if best == usize::MAX || src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    let o = (y * wo + xx) * c + ch;
                    out[o] = src[best];
                    argmax[o] = best;
                }
            }
        }
        let value = Tensor::new(vec![ho, wo, c], out)?;
        self.push("maxpool2", value, Op::MaxPool { x, argmax })
    }

    /// Stride-2 transposed convolution: every input pixel writes its own
    /// disjoint 2×2 output block. Weights `[2, 2, K, L]`.
    pub fn upconv2(&mut self, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
        let (h, wd, k) = self.feature_map("upconv2", x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != 2 || ws[1] != 2 || ws[2] != k {
            return Err(Error::dim("upconv2", format!("weights {ws:?} incompatible with {k} channels")));
        }
        let l = ws[3];
        self.expect_shape("upconv2", b, &[l])?;
        let xs = self.value(x).data();
        let wts = self.value(w).data();
        let bias = self.value(b).data();
        let mut out = vec![0.0; 4 * h * wd * l];
        let mut tmp = vec![0.0; h * wd * l];
        for i in 0..2 {
            for j in 0..2 {
                let wij = &wts[(i * 2 + j) * k * l..][..k * l];
                gemm(Mat::row_major(xs, h * wd, k), Mat::row_major(wij, k, l), &mut tmp, false);
                for y in 0..h {
                    for xx in 0..wd {
                        let src = (y * wd + xx) * l;
                        let dst = ((2 * y + i) * 2 * wd + 2 * xx + j) * l;
                        out[dst..dst + l].copy_from_slice(&tmp[src..src + l]);
                    }
                }
            }
        }
        for row in out.chunks_exact_mut(l.max(1)) {
            row.iter_mut().zip(bias).for_each(|(o, bv)| *o += bv);
        }
        let relu = act == Activation::Relu;
        if relu {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let value = Tensor::new(vec![2 * h, 2 * wd, l], out)?;
        self.push("upconv2", value, Op::UpConv { x, w, b, relu })
    }

    /// Stacks the channels of `a` before those of `b`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ha, wa, ka) = self.value(a).hwc()?;
        let (hb, wb, kb) = self.value(b).hwc()?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::dim(
                "concat_channels",
                format!("spatial dims {ha}x{wa} vs {hb}x{wb}"),
            ));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ha * wa * (ka + kb));
        for px in 0..ha * wa {
            out.extend_from_slice(&ad[px * ka..(px + 1) * ka]);
            out.extend_from_slice(&bd[px * kb..(px + 1) * kb]);
        }
        let value = Tensor::new(vec![ha, wa, ka + kb], out)?;
        self.push("concat_channels", value, Op::Concat { a, b })
    }

    /// Central `h × w` window of a feature map (offsets round down).
    pub fn crop_center(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (hi, wi, c) = self.value(x).hwc()?;
        if h > hi || w > wi {
            return Err(Error::dim("crop_center", format!("cannot crop {hi}x{wi} to {h}x{w}")));
        }
        let (top, left) = ((hi - h) / 2, (wi - w) / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(h * w * c);
        for y in 0..h {
            let start = ((y + top) * wi + left) * c;
            out.extend_from_slice(&src[start..start + w * c]);
        }
        let value = Tensor::new(vec![h, w, c], out)?;
        self.push("crop_center", value, Op::Crop { x, top, left })
    }

    /// Affine map `x · W + b` with `x` of any shape holding N values,
    /// weights `[N, M]`, bias `[M]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::EmptyInput { op: "dense" });
        }
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[0] != n {
            return Err(Error::dim("dense", format!("weights {ws:?} for {n} inputs")));
        }
        let m = ws[1];
        self.expect_shape("dense", b, &[m])?;
        let mut out = self.value(b).data().to_vec();
        let wts = self.value(w).data();
        for (r, &xv) in self.value(x).data().iter().enumerate() {
            out.iter_mut()
                .zip(&wts[r * m..(r + 1) * m])
                .for_each(|(o, wv)| *o += xv * wv);
        }
        let relu = act == Activation::Relu;
        if relu {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        self.push("dense", Tensor::from_vec(out), Op::Dense { x, w, b, relu })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.max(0.0)).collect())?;
        self.push("relu", out, Op::Relu(x))
    }

    pub fn activate(&mut self, x: Var, kind: OutputActivation) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        match kind {
            OutputActivation::Sigmoid => {
                let out = Tensor::new(shape, t.data().iter().map(|&v| sigmoid(v)).collect())?;
                self.push("sigmoid", out, Op::Sigmoid(x))
            }
            OutputActivation::Softmax => {
                let width = *shape.last().unwrap_or(&1);
                let out = Tensor::new(shape, softmax_rows(t.data(), width))?;
                self.push("softmax", out, Op::Softmax(x))
            }
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(op, out, node)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect())?;
        self.push("scale", out, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(x))
    }

    /// Mean over the spatial dims of `[H, W, C]`, giving `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.feature_map("global_avg_pool", x)?;
        let mut out = vec![0.0; c];
        for px in self.value(x).data().chunks_exact(c) {
            out.iter_mut().zip(px).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / (h * w) as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        self.push("global_avg_pool", Tensor::from_vec(out), Op::GlobalAvgPool(x))
    }

    /// `-Σ t · ln(max(p, 1e-12))` over all elements.
    pub fn cross_entropy_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("cross_entropy_loss", pred, target)?;
        let loss: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| -t * p.max(LOG_EPS).ln())
            .sum();
        self.push("cross_entropy_loss", Tensor::scalar(loss), Op::CrossEntropy { pred, target })
    }

    /// Two-class cross-entropy of a sigmoid map against a {0,1} mask,
    /// averaged over elements.
    pub fn binary_cross_entropy(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("binary_cross_entropy", pred, target)?;
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let total: f64 = p
            .iter()
            .zip(t)
            .map(|(&pv, &tv)| {
                let pc = pv.clamp(LOG_EPS, 1.0 - LOG_EPS);
                -(tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln())
            })
            .sum();
        let loss = total / p.len().max(1) as f64;
        self.push(
            "binary_cross_entropy",
            Tensor::scalar(loss),
            Op::BinaryCrossEntropy { pred, target },
        )
    }

    /// Negated smoothed Dice overlap, `-(2Σpg + s) / (Σp + Σg + s)`.
    pub fn soft_dice_loss(&mut self, pred: Var, target: Var, smooth: f64) -> Result<Var> {
        self.same_shape("soft_dice_loss", pred, target)?;
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
        let denom = p.iter().sum::<f64>() + t.iter().sum::<f64>() + smooth;
        if denom == 0.0 {
            return Err(Error::Contract("soft dice of two empty masks with zero smoothing".into()));
        }
        let loss = -(2.0 * inter + smooth) / denom;
        self.push(
            "soft_dice_loss",
            Tensor::scalar(loss),
            Op::SoftDice {
                pred,
                target,
                smooth,
            },
        )
    }

    /// `Σ (pred - target)²`.
    pub fn squared_error(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.sum(sq)
    }
}
