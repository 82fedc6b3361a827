use super::kernels::{col2im_add, gemm, im2col, ConvGeom, Mat};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        out_ch: usize,
        relu: bool,
    },
    UpConv {
        x: Var,
        w: Var,
        b: Var,
        relu: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
        relu: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    GlobalAvgPool(Var),
    CrossEntropy {
        pred: Var,
        target: Var,
    },
    BinaryCrossEntropy {
        pred: Var,
        target: Var,
    },
    SoftDice {
        pred: Var,
        target: Var,
        smooth: f64,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub needs_grad: bool,
}

/// Ordered record of operations for reverse-mode differentiation.
///
/// A tape owns copies of every value it records and is single-threaded;
/// build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

/// Probabilities are clamped to this floor before taking logarithms.
pub(crate) const LOG_EPS: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push_node(t, Op::Leaf, needs_grad)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push_node(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_node(value, op, needs_grad))
    }

    /// Back-propagates from a one-element `loss`, adding into leaf gradients.
    ///
    /// Calling this twice without [`Tape::zero_grad`] doubles the gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("backward on a var from another tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            propagate(&self.nodes, i, &g, &mut local);
        }
        Ok(())
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Conv { x, w, b, .. } | Op::UpConv { x, w, b, .. } | Op::Dense { x, w, b, .. } => {
            vec![*x, *w, *b]
        }
        Op::MaxPool { x, .. } | Op::Crop { x, .. } => vec![*x],
        Op::Concat { a, b } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Softmax(x)
        | Op::Scale(x, _)
        | Op::Sum(x)
        | Op::Reshape(x)
        | Op::GlobalAvgPool(x) => vec![*x],
        Op::CrossEntropy { pred, target }
        | Op::BinaryCrossEntropy { pred, target }
        | Op::SoftDice { pred, target, .. } => vec![*pred, *target],
    }
}

/// Gradient buffer for `v`, allocated on first touch, or `None` when `v`
/// does not participate in differentiation.
fn slot<'a>(nodes: &[Node], local: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(local[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn add_into(dst: &mut [f64], src: impl IntoIterator<Item = f64>) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Conv {
            x,
            w,
            b,
            geom,
            out_ch,
            relu,
        } => {
            let l = *out_ch;
            let gz = relu_mask(g, out.data(), *relu);
            let p = geom.pixels();
            if let Some(gb) = slot(nodes, local, *b) {
                for row in gz.chunks_exact(l) {
                    add_into(gb, row.iter().copied());
                }
            }
            let need_w = nodes[w.0].needs_grad;
            let need_x = nodes[x.0].needs_grad;
            if !(need_w || need_x) {
                return;
            }
            let owned;
            let cols: &[f64] = if geom.is_pointwise() {
                val(*x)
            } else {
                owned = im2col(val(*x), geom);
                &owned
            };
            let patch = geom.patch();
            let gz_mat = Mat::row_major(&gz, p, l);
            if let Some(gw) = slot(nodes, local, *w) {
                gemm(Mat::row_major(cols, p, patch).t(), gz_mat, gw, true);
            }
            if let Some(gx) = slot(nodes, local, *x) {
                let wmat = Mat::row_major(val(*w), patch, l);
                if geom.is_pointwise() {
                    gemm(gz_mat, wmat.t(), gx, true);
                } else {
                    let mut gcols = vec![0.0; p * patch];
                    gemm(gz_mat, wmat.t(), &mut gcols, false);
                    col2im_add(&gcols, geom, gx);
                }
            }
        }
        Op::UpConv { x, w, b, relu } => {
            let (h, wd, k) = nodes[x.0].value.hwc().expect("upconv input is 3-d");
            let l = out.shape()[2];
            let gz = relu_mask(g, out.data(), *relu);
            if let Some(gb) = slot(nodes, local, *b) {
                for row in gz.chunks_exact(l) {
                    add_into(gb, row.iter().copied());
                }
            }
            let xs = val(*x);
            let ws = val(*w);
            let mut gij = vec![0.0; h * wd * l];
            for i in 0..2 {
                for j in 0..2 {
                    for y in 0..h {
                        for xx in 0..wd {
                            let src = ((2 * y + i) * 2 * wd + 2 * xx + j) * l;
                            let dst = (y * wd + xx) * l;
                            gij[dst..dst + l].copy_from_slice(&gz[src..src + l]);
                        }
                    }
                    let wij = &ws[(i * 2 + j) * k * l..][..k * l];
                    let gmat = Mat::row_major(&gij, h * wd, l);
                    if let Some(gw) = slot(nodes, local, *w) {
                        let gw_ij = &mut gw[(i * 2 + j) * k * l..][..k * l];
                        gemm(Mat::row_major(xs, h * wd, k).t(), gmat, gw_ij, true);
                    }
                    if let Some(gx) = slot(nodes, local, *x) {
                        gemm(gmat, Mat::row_major(wij, k, l).t(), gx, true);
                    }
                }
            }
        }
        Op::MaxPool { x, argmax } => {
            if let Some(gx) = slot(nodes, local, *x) {
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g[o];
                }
            }
        }
        Op::Concat { a, b } => {
            let ka = nodes[a.0].value.shape()[2];
            let kb = nodes[b.0].value.shape()[2];
            let kt = ka + kb;
            if let Some(ga) = slot(nodes, local, *a) {
                for (dst, src) in ga.chunks_exact_mut(ka.max(1)).zip(g.chunks_exact(kt.max(1))) {
                    add_into(dst, src[..ka].iter().copied());
                }
            }
            if kb > 0 {
                if let Some(gb) = slot(nodes, local, *b) {
                    for (dst, src) in gb.chunks_exact_mut(kb).zip(g.chunks_exact(kt)) {
                        add_into(dst, src[ka..].iter().copied());
                    }
                }
            }
        }
        Op::Crop { x, top, left } => {
            let (_, w_in, c) = nodes[x.0].value.hwc().expect("crop input is 3-d");
            let (ho, wo, _) = out.hwc().expect("crop output is 3-d");
            if let Some(gx) = slot(nodes, local, *x) {
                for y in 0..ho {
                    let dst = ((y + top) * w_in + left) * c;
                    add_into(&mut gx[dst..dst + wo * c], g[y * wo * c..(y + 1) * wo * c].iter().copied());
                }
            }
        }
        Op::Dense { x, w, b, relu } => {
            let n = nodes[x.0].value.numel();
            let m = out.numel();
            let gz = relu_mask(g, out.data(), *relu);
            if let Some(gb) = slot(nodes, local, *b) {
                add_into(gb, gz.iter().copied());
            }
            if let Some(gw) = slot(nodes, local, *w) {
                let xs = val(*x);
                for (row, &xv) in gw.chunks_exact_mut(m).zip(xs) {
                    add_into(row, gz.iter().map(|gv| gv * xv));
                }
            }
            if let Some(gx) = slot(nodes, local, *x) {
                let ws = val(*w);
                for (r, gxv) in gx.iter_mut().enumerate().take(n) {
                    *gxv += ws[r * m..(r + 1) * m].iter().zip(&gz).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        Op::Relu(x) => {
            if let Some(gx) = slot(nodes, local, *x) {
                add_into(gx, relu_mask(g, out.data(), true));
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = slot(nodes, local, *x) {
                add_into(gx, g.iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)));
            }
        }
        Op::Softmax(x) => {
            let width = *out.shape().last().unwrap_or(&1);
            if let Some(gx) = slot(nodes, local, *x) {
                for ((dst, ys), gs) in gx
                    .chunks_exact_mut(width)
                    .zip(out.data().chunks_exact(width))
                    .zip(g.chunks_exact(width))
                {
                    let dot: f64 = ys.iter().zip(gs).map(|(y, gv)| y * gv).sum();
                    add_into(dst, ys.iter().zip(gs).map(|(y, gv)| y * (gv - dot)));
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, local, *a) {
                add_into(ga, g.iter().copied());
            }
            if let Some(gb) = slot(nodes, local, *b) {
                add_into(gb, g.iter().copied());
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, local, *a) {
                add_into(ga, g.iter().copied());
            }
            if let Some(gb) = slot(nodes, local, *b) {
                add_into(gb, g.iter().map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
            if let Some(ga) = slot(nodes, local, *a) {
                add_into(ga, g.iter().zip(&bv).map(|(gv, y)| gv * y));
            }
            if let Some(gb) = slot(nodes, local, *b) {
                add_into(gb, g.iter().zip(&av).map(|(gv, y)| gv * y));
            }
        }
        Op::Scale(x, factor) => {
            if let Some(gx) = slot(nodes, local, *x) {
                add_into(gx, g.iter().map(|v| v * factor));
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, local, *x) {
                let g0 = g[0];
                gx.iter_mut().for_each(|v| *v += g0);
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, local, *x) {
                add_into(gx, g.iter().copied());
            }
        }
        Op::GlobalAvgPool(x) => {
            let (h, w, c) = nodes[x.0].value.hwc().expect("pool input is 3-d");
            let inv = 1.0 / (h * w) as f64;
            if let Some(gx) = slot(nodes, local, *x) {
                for px in gx.chunks_exact_mut(c) {
                    add_into(px, g.iter().map(|v| v * inv));
                }
            }
        }
        Op::CrossEntropy { pred, target } => {
            let g0 = g[0];
            let (p, t) = (val(*pred).to_vec(), val(*target).to_vec());
            if let Some(gp) = slot(nodes, local, *pred) {
                add_into(
                    gp,
                    p.iter().zip(&t).map(|(&pv, &tv)| {
                        if pv > LOG_EPS {
                            -g0 * tv / pv
                        } else {
                            0.0
                        }
                    }),
                );
            }
            if let Some(gt) = slot(nodes, local, *target) {
                add_into(gt, p.iter().map(|&pv| -g0 * pv.max(LOG_EPS).ln()));
            }
        }
        Op::BinaryCrossEntropy { pred, target } => {
            let g0 = g[0];
            let (p, t) = (val(*pred).to_vec(), val(*target).to_vec());
            let inv = 1.0 / p.len().max(1) as f64;
            if let Some(gp) = slot(nodes, local, *pred) {
                add_into(
                    gp,
                    p.iter().zip(&t).map(|(&pv, &tv)| {
                        if pv > LOG_EPS && pv < 1.0 - LOG_EPS {
                            g0 * inv * (-tv / pv + (1.0 - tv) / (1.0 - pv))
                        } else {
                            0.0
                        }
                    }),
                );
            }
            if let Some(gt) = slot(nodes, local, *target) {
                add_into(
                    gt,
                    p.iter().map(|&pv| {
                        let pc = pv.clamp(LOG_EPS, 1.0 - LOG_EPS);
                        -g0 * inv * (pc.ln() - (1.0 - pc).ln())
                    }),
                );
            }
        }
        Op::SoftDice {
            pred,
            target,
            smooth,
        } => {
            let g0 = g[0];
            let (p, t) = (val(*pred).to_vec(), val(*target).to_vec());
            let inter: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
            let denom = p.iter().sum::<f64>() + t.iter().sum::<f64>() + smooth;
            let numer = 2.0 * inter + smooth;
            let d2 = denom * denom;
            if let Some(gp) = slot(nodes, local, *pred) {
                add_into(gp, t.iter().map(|tv| -g0 * (2.0 * tv * denom - numer) / d2));
            }
            if let Some(gt) = slot(nodes, local, *target) {
                add_into(gt, p.iter().map(|pv| -g0 * (2.0 * pv * denom - numer) / d2));
            }
        }
    }
}

fn relu_mask(g: &[f64], out: &[f64], relu: bool) -> Vec<f64> {
    if relu {
        g.iter()
            .zip(out)
            .map(|(gv, o)| if *o > 0.0 { *gv } else { 0.0 })
            .collect()
    } else {
        g.to_vec()
    }
}
