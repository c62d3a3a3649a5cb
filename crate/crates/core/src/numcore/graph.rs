//! Tape of recorded operations and the reverse sweep over it.

use std::borrow::Cow;

use super::gemm::{matmul, matmul_at, matmul_bt};
use super::{shape_err, NumError, Result, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub oh: usize,
    pub ow: usize,
    pub out: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c
    }

    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Saved state of a block convolution.
#[derive(Debug)]
struct BlockConv {
    x: Var,
    cells: Option<Var>,
    w: Var,
    b: Var,
    geom: ConvGeom,
    cols: Vec<f64>,
    /// Image slice of the kernel packed as `[out, kh·kw·C_img]`.
    w_img: Vec<f64>,
    /// Cell slice of the kernel summed over space, `[out, K]`.
    w_sum: Vec<f64>,
    k: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Dense { x: Var, w: Var, b: Var, n: usize },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    BlockConv(Box<BlockConv>),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Reshape(Var),
    CenterChannels { x: Var, channels: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Minimum(Var, Var),
    Maximum(Var, Var),
    Sum(Var),
    Mean(Var),
    Column { x: Var, col: usize, width: usize },
    Dueling { value: Var, adv: Var, actions: usize },
    Gather { x: Var, idx: Vec<usize>, width: usize },
    Huber { pred: Var, target: Vec<f64>, delta: f64 },
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
    op: Op,
    tracked: bool,
}

/// One forward pass worth of recorded operations.
///
/// Parameters are borrowed, never copied; everything computed is owned by
/// the graph and dropped with it.
pub struct Graph<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node<'p>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'p, [f64]>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<'p>> {
        self.nodes.get(v.0).ok_or(NumError::UnknownVar(v.0))
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("recorded node is well-formed")
    }

    /// Constant input; no gradient is propagated to it.
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Input, false)
    }

    /// Input whose gradient is kept and retrievable via [`Gradients::wrt`].
    pub fn input_tracked(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Input, true)
    }

    pub fn param(&mut self, index: usize) -> Result<Var> {
        let p = self.params.get(index).ok_or_else(|| {
            shape_err("param", format!("index {index} out of {} parameters", self.params.len()))
        })?;
        Ok(self.push(
            p.shape().to_vec(),
            Cow::Borrowed(p.data()),
            Op::Param(index),
            true,
        ))
    }

    /// Affine map `y = x·Wᵀ + b` with `W: [out, in]`.
    ///
    /// A rank-1 input is a single sample; otherwise the leading dimension is
    /// the batch and the trailing dimensions are flattened.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.node(x)?.shape.clone(),
            self.node(w)?.shape.clone(),
            self.node(b)?.shape.clone(),
        );
        if ws.len() != 2 {
            return Err(shape_err("dense", format!("weight must be rank 2, got {ws:?}")));
        }
        let (out, inp) = (ws[0], ws[1]);
        if bs != [out] {
            return Err(shape_err("dense", format!("bias shape {bs:?}, expected [{out}]")));
        }
        let (n, feat) = if xs.len() == 1 {
            (1, xs[0])
        } else {
            (xs[0], xs[1..].iter().product())
        };
        if feat != inp {
            return Err(shape_err(
                "dense",
                format!("input features {feat} (input shape {xs:?}) != weight in-width {inp}"),
            ));
        }
        let mut y = vec![0.0; n * out];
        for row in y.chunks_exact_mut(out) {
            row.copy_from_slice(self.value(b));
        }
        matmul_bt(n, inp, out, self.value(x), self.value(w), &mut y, true);
        let shape = if xs.len() == 1 { vec![out] } else { vec![n, out] };
        let tracked = self.tracked(&[x, w, b]);
        Ok(self.push(shape, Cow::Owned(y), Op::Dense { x, w, b, n }, tracked))
    }

    /// 2-D convolution over channels-last input `[N, H, W, C]` (or `[H, W, C]`)
    /// with weights `[out, kh, kw, C]`. `pad` selects zero padding of
    /// `(k − 1) / 2` on each side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: bool) -> Result<Var> {
        let (xs, ws, bs) = (
            self.node(x)?.shape.clone(),
            self.node(w)?.shape.clone(),
            self.node(b)?.shape.clone(),
        );
        if ws.len() != 4 {
            return Err(shape_err("conv2d", format!("weight must be rank 4, got {ws:?}")));
        }
        let batched = match xs.len() {
            3 => false,
            4 => true,
            _ => {
                return Err(shape_err(
                    "conv2d",
                    format!("input must be [N,H,W,C] or [H,W,C], got {xs:?}"),
                ))
            }
        };
        let (n, h, wd, c) = if batched {
            (xs[0], xs[1], xs[2], xs[3])
        } else {
            (1, xs[0], xs[1], xs[2])
        };
        let (out, kh, kw, kc) = (ws[0], ws[1], ws[2], ws[3]);
        if kc != c {
            return Err(shape_err(
                "conv2d",
                format!("input channels {c} != kernel channels {kc}"),
            ));
        }
        if bs != [out] {
            return Err(shape_err("conv2d", format!("bias shape {bs:?}, expected [{out}]")));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive"));
        }
        let (pad_h, pad_w) = if pad { ((kh - 1) / 2, (kw - 1) / 2) } else { (0, 0) };
        if h + 2 * pad_h < kh {
            return Err(shape_err(
                "conv2d",
                format!("input height {h} smaller than kernel height {kh}"),
            ));
        }
        if wd + 2 * pad_w < kw {
            return Err(shape_err(
                "conv2d",
                format!("input width {wd} smaller than kernel width {kw}"),
            ));
        }
        let geom = ConvGeom {
            n,
            h,
            w: wd,
            c,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            oh: (h + 2 * pad_h - kh) / stride + 1,
            ow: (wd + 2 * pad_w - kw) / stride + 1,
            out,
        };
        let cols = im2col(self.value(x), &geom);
        let rows = geom.rows();
        let mut y = vec![0.0; rows * out];
        for row in y.chunks_exact_mut(out) {
            row.copy_from_slice(self.value(b));
        }
        matmul_bt(rows, geom.patch_len(), out, &cols, self.value(w), &mut y, true);
        let shape = if batched {
            vec![n, geom.oh, geom.ow, out]
        } else {
            vec![geom.oh, geom.ow, out]
        };
        let tracked = self.tracked(&[x, w, b]);
        Ok(self.push(
            shape,
            Cow::Owned(y),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            tracked,
        ))
    }

    /// Convolution with stride equal to a square kernel and no padding over
    /// `[x | upsample(cells)]`, where `cells: [N, H/k, W/k, K]` holds one
    /// value per kernel block. The kernel `w: [out, k, k, C + K]` covers
    /// both parts. Equals [`Graph::conv2d`] on the materialized input but
    /// never builds it: a block-constant channel contributes its value
    /// times the kernel summed over space.
    pub fn conv2d_blocks(&mut self, x: Var, cells: Option<Var>, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.node(x)?.shape.clone(),
            self.node(w)?.shape.clone(),
            self.node(b)?.shape.clone(),
        );
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err(
                "conv2d_blocks",
                format!("input {xs:?} and kernel {ws:?} must both be rank 4"),
            ));
        }
        let (n, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
        let (out, kh, kw, kc) = (ws[0], ws[1], ws[2], ws[3]);
        if kh != kw || kh == 0 || h % kh != 0 || wd % kw != 0 {
            return Err(shape_err(
                "conv2d_blocks",
                format!("kernel {kh}x{kw} must be square and tile the {h}x{wd} input"),
            ));
        }
        let (oh, ow) = (h / kh, wd / kw);
        let k = match cells {
            Some(cv) => {
                let cs = self.node(cv)?.shape.clone();
                if cs.len() != 4 || cs[..3] != [n, oh, ow] {
                    return Err(shape_err(
                        "conv2d_blocks",
                        format!("cells {cs:?} do not match blocks [{n}, {oh}, {ow}, _]"),
                    ));
                }
                cs[3]
            }
            None => 0,
        };
        if kc != c + k {
            return Err(shape_err(
                "conv2d_blocks",
                format!("kernel channels {kc} != image {c} + cells {k}"),
            ));
        }
        if bs != [out] {
            return Err(shape_err("conv2d_blocks", format!("bias shape {bs:?}, expected [{out}]")));
        }
        let geom = ConvGeom {
            n,
            h,
            w: wd,
            c,
            kh,
            kw,
            stride: kh,
            pad_h: 0,
            pad_w: 0,
            oh,
            ow,
            out,
        };
        let spatial = kh * kw;
        let wv = self.value(w);
        let mut w_img = Vec::with_capacity(out * spatial * c);
        let mut w_sum = vec![0.0; out * k];
        for o in 0..out {
            for s in 0..spatial {
                let at = (o * spatial + s) * kc;
                w_img.extend_from_slice(&wv[at..at + c]);
                for (acc, v) in w_sum[o * k..(o + 1) * k].iter_mut().zip(&wv[at + c..at + kc]) {
                    *acc += v;
                }
            }
        }
        let cols = im2col(self.value(x), &geom);
        let rows = geom.rows();
        let mut y = vec![0.0; rows * out];
        for row in y.chunks_exact_mut(out) {
            row.copy_from_slice(self.value(b));
        }
        matmul_bt(rows, geom.patch_len(), out, &cols, &w_img, &mut y, true);
        if let Some(cv) = cells {
            matmul_bt(rows, k, out, self.value(cv), &w_sum, &mut y, true);
        }
        let mut inputs = vec![x, w, b];
        inputs.extend(cells);
        let tracked = self.tracked(&inputs);
        Ok(self.push(
            vec![n, oh, ow, out],
            Cow::Owned(y),
            Op::BlockConv(Box::new(BlockConv {
                x,
                cells,
                w,
                b,
                geom,
                cols,
                w_img,
                w_sum,
                k,
            })),
            tracked,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let n = self.node(x)?;
        let shape = n.shape.clone();
        let y: Vec<f64> = n.value.iter().map(|&v| f(v)).collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape, Cow::Owned(y), op, tracked))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n = self.node(x)?;
        if shape.iter().product::<usize>() != n.value.len() || shape.contains(&0) {
            return Err(shape_err("reshape", format!("cannot view {:?} as {shape:?}", n.shape)));
        }
        let y = n.value.to_vec();
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape, Cow::Owned(y), Op::Reshape(x), tracked))
    }

    /// Subtracts, per sample, the spatial mean of each of the first
    /// `channels` channels of an `[N,H,W,C]` tensor. Other channels pass
    /// through.
    pub fn center_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        let n = self.node(x)?;
        if n.shape.len() != 4 || channels > n.shape[3] {
            return Err(shape_err(
                "center_channels",
                format!("need [N,H,W,C] with C >= {channels}, got {:?}", n.shape),
            ));
        }
        let shape = n.shape.clone();
        let mut y = n.value.to_vec();
        center(&mut y, &shape, channels);
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape, Cow::Owned(y), Op::CenterChannels { x, channels }, tracked))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape != nb.shape {
            return Err(shape_err(name, format!("{:?} vs {:?}", na.shape, nb.shape)));
        }
        let y: Vec<f64> = na
            .value
            .iter()
            .zip(nb.value.iter())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let shape = na.shape.clone();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(shape, Cow::Owned(y), op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |p, q| p * q, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "minimum", f64::min, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "maximum", f64::max, Op::Maximum(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.iter().sum();
        let tracked = self.tracked(&[x]);
        Ok(self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(x), tracked))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let m = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let tracked = self.tracked(&[x]);
        Ok(self.push(vec![1], Cow::Owned(vec![m]), Op::Mean(x), tracked))
    }

    /// Selects column `col` of a `[N, K]` matrix, giving `[N]`.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let n = self.node(x)?;
        if n.shape.len() != 2 || col >= n.shape[1] {
            return Err(shape_err(
                "column",
                format!("column {col} of shape {:?}", n.shape),
            ));
        }
        let width = n.shape[1];
        let y: Vec<f64> = n.value.chunks_exact(width).map(|r| r[col]).collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(vec![y.len()], Cow::Owned(y), Op::Column { x, col, width }, tracked))
    }

    /// Dueling aggregation `Q = V + A − mean(A)` per row, with `V: [N, 1]`
    /// and `A: [N, actions]`.
    pub fn dueling(&mut self, value: Var, adv: Var) -> Result<Var> {
        let (nv, na) = (self.node(value)?, self.node(adv)?);
        if na.shape.len() != 2 || nv.shape != [na.shape[0], 1] {
            return Err(shape_err(
                "dueling",
                format!("value {:?} vs advantage {:?}", nv.shape, na.shape),
            ));
        }
        let actions = na.shape[1];
        let mut q = Vec::with_capacity(na.value.len());
        for (row, &v) in na.value.chunks_exact(actions).zip(nv.value.iter()) {
            let mean = row.iter().sum::<f64>() / actions as f64;
            q.extend(row.iter().map(|a| v + a - mean));
        }
        let shape = na.shape.clone();
        let tracked = self.tracked(&[value, adv]);
        Ok(self.push(
            shape,
            Cow::Owned(q),
            Op::Dueling {
                value,
                adv,
                actions,
            },
            tracked,
        ))
    }

    /// Picks `x[n, idx[n]]` from a `[N, K]` matrix.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.node(x)?;
        if n.shape.len() != 2 || n.shape[0] != idx.len() {
            return Err(shape_err(
                "gather",
                format!("{} indices into shape {:?}", idx.len(), n.shape),
            ));
        }
        let width = n.shape[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= width) {
            return Err(shape_err("gather", format!("index {bad} >= width {width}")));
        }
        let y: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| n.value[r * width + i])
            .collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            vec![y.len()],
            Cow::Owned(y),
            Op::Gather {
                x,
                idx: idx.to_vec(),
                width,
            },
            tracked,
        ))
    }

    /// Mean Huber loss against a constant target.
    pub fn huber(&mut self, pred: Var, target: &[f64], delta: f64) -> Result<Var> {
        let n = self.node(pred)?;
        if n.value.len() != target.len() {
            return Err(shape_err(
                "huber",
                format!("prediction {:?} vs {} targets", n.shape, target.len()),
            ));
        }
        let loss = n
            .value
            .iter()
            .zip(target)
            .map(|(p, t)| huber_value(p - t, delta))
            .sum::<f64>()
            / target.len() as f64;
        let tracked = self.tracked(&[pred]);
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![loss]),
            Op::Huber {
                pred,
                target: target.to_vec(),
                delta,
            },
            tracked,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let ln = self.node(loss)?;
        if ln.value.len() != 1 {
            return Err(NumError::NotScalar(ln.shape.clone()));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); loss.0 + 1];
        grads[loss.0] = vec![1.0];

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.tracked {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let g = &upper[0];
            if g.is_empty() {
                continue;
            }
            let val = |v: Var| -> &[f64] { &nodes[v.0].value };
            let want = |v: Var| nodes[v.0].tracked;
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Dense { x, w, b, n } => {
                    let (out, inp) = (nodes[w.0].shape[0], nodes[w.0].shape[1]);
                    if want(*x) {
                        let dx = slot(lower, *x, n * inp);
                        matmul(*n, out, inp, g, val(*w), dx, true);
                    }
                    if want(*w) {
                        let dw = slot(lower, *w, out * inp);
                        matmul_at(out, *n, inp, g, val(*x), dw, true);
                    }
                    if want(*b) {
                        let db = slot(lower, *b, out);
                        for row in g.chunks_exact(out) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    let (rows, k, out) = (geom.rows(), geom.patch_len(), geom.out);
                    if want(*x) {
                        let mut dcols = vec![0.0; rows * k];
                        matmul(rows, out, k, g, val(*w), &mut dcols, false);
                        let dx = slot(lower, *x, geom.n * geom.h * geom.w * geom.c);
                        col2im_add(&dcols, geom, dx);
                    }
                    if want(*w) {
                        let dw = slot(lower, *w, out * k);
                        matmul_at(out, rows, k, g, cols, dw, true);
                    }
                    if want(*b) {
                        let db = slot(lower, *b, out);
                        for row in g.chunks_exact(out) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                    }
                }
                Op::BlockConv(bc) => {
                    let BlockConv {
                        x,
                        cells,
                        w,
                        b,
                        geom,
                        cols,
                        w_img,
                        w_sum,
                        k,
                    } = &**bc;
                    let (rows, p, out, k) = (geom.rows(), geom.patch_len(), geom.out, *k);
                    if want(*x) {
                        let mut dcols = vec![0.0; rows * p];
                        matmul(rows, out, p, g, w_img, &mut dcols, false);
                        let dx = slot(lower, *x, geom.n * geom.h * geom.w * geom.c);
                        col2im_add(&dcols, geom, dx);
                    }
                    if let Some(cv) = cells {
                        if want(*cv) {
                            let dc = slot(lower, *cv, rows * k);
                            matmul(rows, out, k, g, w_sum, dc, true);
                        }
                    }
                    if want(*w) {
                        let mut dw_img = vec![0.0; out * p];
                        matmul_at(out, rows, p, g, cols, &mut dw_img, false);
                        let mut dw_sum = vec![0.0; out * k];
                        if let Some(cv) = cells {
                            matmul_at(out, rows, k, g, val(*cv), &mut dw_sum, false);
                        }
                        let (c, kc) = (geom.c, geom.c + k);
                        let spatial = geom.kh * geom.kw;
                        let dw = slot(lower, *w, out * spatial * kc);
                        for o in 0..out {
                            for s in 0..spatial {
                                let at = (o * spatial + s) * kc;
                                let src = (o * spatial + s) * c;
                                for (d, v) in dw[at..at + c].iter_mut().zip(&dw_img[src..src + c]) {
                                    *d += v;
                                }
                                for (d, v) in dw[at + c..at + kc].iter_mut().zip(&dw_sum[o * k..(o + 1) * k]) {
                                    *d += v;
                                }
                            }
                        }
                    }
                    if want(*b) {
                        let db = slot(lower, *b, out);
                        for row in g.chunks_exact(out) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                    }
                }
                Op::Relu(x) => {
                    let y = &node.value;
                    let dx = slot(lower, *x, y.len());
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y.iter()) {
                        if *yi > 0.0 {
                            *d += gi;
                        }
                    }
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let dx = slot(lower, *x, y.len());
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y.iter()) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let dx = slot(lower, *x, y.len());
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y.iter()) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
                Op::Reshape(x) => {
                    let dx = slot(lower, *x, g.len());
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
                Op::CenterChannels { x, channels } => {
                    let mut d = g.to_vec();
                    center(&mut d, &node.shape, *channels);
                    let dx = slot(lower, *x, d.len());
                    dx.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if want(*v) {
                            let d = slot(lower, *v, g.len());
                            d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if want(*a) {
                        let d = slot(lower, *a, g.len());
                        d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                    }
                    if want(*b) {
                        let d = slot(lower, *b, g.len());
                        d.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi);
                    }
                }
                Op::Mul(a, b) => {
                    if want(*a) {
                        let bv = val(*b);
                        let d = slot(lower, *a, g.len());
                        for ((d, gi), q) in d.iter_mut().zip(g).zip(bv) {
                            *d += gi * q;
                        }
                    }
                    if want(*b) {
                        let av = val(*a);
                        let d = slot(lower, *b, g.len());
                        for ((d, gi), p) in d.iter_mut().zip(g).zip(av) {
                            *d += gi * p;
                        }
                    }
                }
                Op::Affine { x, scale } => {
                    let d = slot(lower, *x, g.len());
                    d.iter_mut().zip(g).for_each(|(d, gi)| *d += scale * gi);
                }
                Op::Minimum(a, b) | Op::Maximum(a, b) => {
                    let is_min = matches!(node.op, Op::Minimum(..));
                    let (av, bv) = (val(*a), val(*b));
                    // Ties route the gradient to the first operand.
                    let pick_a: Vec<bool> = av
                        .iter()
                        .zip(bv)
                        .map(|(p, q)| if is_min { p <= q } else { p >= q })
                        .collect();
                    if want(*a) {
                        let d = slot(lower, *a, g.len());
                        for ((d, gi), &pa) in d.iter_mut().zip(g).zip(&pick_a) {
                            if pa {
                                *d += gi;
                            }
                        }
                    }
                    if want(*b) {
                        let d = slot(lower, *b, g.len());
                        for ((d, gi), &pa) in d.iter_mut().zip(g).zip(&pick_a) {
                            if !pa {
                                *d += gi;
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    let len = nodes[x.0].value.len();
                    let d = slot(lower, *x, len);
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Mean(x) => {
                    let len = nodes[x.0].value.len();
                    let s = g[0] / len as f64;
                    let d = slot(lower, *x, len);
                    d.iter_mut().for_each(|d| *d += s);
                }
                Op::Column { x, col, width } => {
                    let d = slot(lower, *x, g.len() * width);
                    for (r, gi) in g.iter().enumerate() {
                        d[r * width + col] += gi;
                    }
                }
                Op::Dueling {
                    value,
                    adv,
                    actions,
                } => {
                    let rows = g.len() / actions;
                    if want(*value) {
                        let d = slot(lower, *value, rows);
                        for (dv, gr) in d.iter_mut().zip(g.chunks_exact(*actions)) {
                            *dv += gr.iter().sum::<f64>();
                        }
                    }
                    if want(*adv) {
                        let d = slot(lower, *adv, g.len());
                        for (dr, gr) in d.chunks_exact_mut(*actions).zip(g.chunks_exact(*actions)) {
                            let m = gr.iter().sum::<f64>() / *actions as f64;
                            dr.iter_mut().zip(gr).for_each(|(d, gi)| *d += gi - m);
                        }
                    }
                }
                Op::Gather { x, idx, width } => {
                    let d = slot(lower, *x, idx.len() * width);
                    for (r, (&i, gi)) in idx.iter().zip(g).enumerate() {
                        d[r * width + i] += gi;
                    }
                }
                Op::Huber {
                    pred,
                    target,
                    delta,
                } => {
                    let pv = val(*pred);
                    let scale = g[0] / target.len() as f64;
                    let d = slot(lower, *pred, target.len());
                    for ((d, p), t) in d.iter_mut().zip(pv).zip(target) {
                        *d += scale * huber_slope(p - t, *delta);
                    }
                }
            }
        }

        let mut params: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];
        for (i, node) in nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Param(p) = node.op {
                if grads[i].is_empty() {
                    continue;
                }
                match &mut params[p] {
                    Some(acc) => acc.iter_mut().zip(&grads[i]).for_each(|(a, g)| *a += g),
                    None => params[p] = Some(std::mem::take(&mut grads[i])),
                }
            }
        }
        let mut inputs = grads;
        for (i, node) in nodes.iter().enumerate().take(inputs.len()) {
            if !matches!(node.op, Op::Input) {
                inputs[i] = Vec::new();
            }
        }
        Ok(Gradients { params, inputs })
    }
}

fn slot(lower: &mut [Vec<f64>], v: Var, len: usize) -> &mut [f64] {
    let buf = &mut lower[v.0];
    if buf.is_empty() {
        *buf = vec![0.0; len];
    }
    buf
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn huber_value(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        0.5 * e * e
    } else {
        delta * (e.abs() - 0.5 * delta)
    }
}

fn huber_slope(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        e
    } else {
        delta * e.signum()
    }
}

/// In-place per-sample spatial centering of the leading `channels` channels.
fn center(data: &mut [f64], shape: &[usize], channels: usize) {
    let (hw, c) = (shape[1] * shape[2], shape[3]);
    let mut mean = vec![0.0; channels];
    for sample in data.chunks_exact_mut(hw * c) {
        mean.iter_mut().for_each(|m| *m = 0.0);
        for px in sample.chunks_exact(c) {
            mean.iter_mut().zip(px).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= hw as f64);
        for px in sample.chunks_exact_mut(c) {
            px.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
        }
    }
}

/// Valid kernel-column range `[lo, hi)` for output column `ox`, and the
/// input column of `lo`.
fn kx_range(g: &ConvGeom, ox: usize) -> (usize, usize, usize) {
    let start = (ox * g.stride) as isize - g.pad_w as isize;
    let lo = (-start).max(0) as usize;
    let hi = ((g.w as isize - start).min(g.kw as isize)).max(0) as usize;
    (lo, hi.max(lo), (start + lo as isize) as usize)
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let k = g.patch_len();
    let mut cols = vec![0.0; g.rows() * k];
    let mut row = 0;
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let dst = &mut cols[row * k..(row + 1) * k];
                let (lo, hi, ix) = kx_range(g, ox);
                let run = (hi - lo) * g.c;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize || run == 0 {
                        continue;
                    }
                    let src = ((n * g.h + iy as usize) * g.w + ix) * g.c;
                    let off = (ky * g.kw + lo) * g.c;
                    dst[off..off + run].copy_from_slice(&x[src..src + run]);
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let k = g.patch_len();
    let mut row = 0;
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let src = &dcols[row * k..(row + 1) * k];
                let (lo, hi, ix) = kx_range(g, ox);
                let run = (hi - lo) * g.c;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize || run == 0 {
                        continue;
                    }
                    let dst = ((n * g.h + iy as usize) * g.w + ix) * g.c;
                    let off = (ky * g.kw + lo) * g.c;
                    dx[dst..dst + run]
                        .iter_mut()
                        .zip(&src[off..off + run])
                        .for_each(|(d, s)| *d += s);
                }
                row += 1;
            }
        }
    }
}

/// Result of a reverse sweep: per-parameter gradients plus gradients of
/// tracked inputs.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Vec<f64>>>,
    inputs: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient of the loss with respect to parameter `index`, if it took
    /// part in the computation.
    pub fn param(&self, index: usize) -> Option<&[f64]> {
        self.params.get(index).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to a tracked input.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.inputs
            .get(v.0)
            .filter(|g| !g.is_empty())
            .map(|g| g.as_slice())
    }

    /// Adds every parameter gradient into the matching tensor's buffer.
    pub fn accumulate_into(&self, params: &mut [Tensor]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(shape_err(
                "accumulate_into",
                format!("{} gradients for {} parameters", self.params.len(), params.len()),
            ));
        }
        for (p, g) in params.iter_mut().zip(&self.params) {
            if let Some(g) = g {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_x() {
        let mut g = Graph::new(&[]);
        let x = g.input_tracked(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x), Some(&[6.0][..]));
    }

    #[test]
    fn sum_of_linear_map_gives_broadcast_input() {
        let params = vec![
            Tensor::new(vec![3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(),
            Tensor::zeros(vec![3]),
        ];
        let mut g = Graph::new(&params);
        let x = g.input(Tensor::new(vec![2], vec![3.0, 7.0]).unwrap());
        let (w, b) = (g.param(0).unwrap(), g.param(1).unwrap());
        let y = g.dense(x, w, b).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param(0).unwrap(), &[3.0, 7.0, 3.0, 7.0, 3.0, 7.0]);
        assert_eq!(grads.param(1).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn centering_removes_spatial_means_of_leading_channels() {
        // one sample, 2×1 pixels, channels (a, b, untouched)
        let x = Tensor::new(vec![1, 2, 1, 3], vec![1.0, 4.0, 9.0, 3.0, 0.0, 5.0]).unwrap();
        let w = Tensor::new(vec![1, 2, 1, 3], vec![2.0, 1.0, 1.0, 0.0, 5.0, 1.0]).unwrap();
        let mut g = Graph::new(&[]);
        let xv = g.input_tracked(x);
        let y = g.center_channels(xv, 2).unwrap();
        assert_eq!(g.value(y), &[-1.0, 2.0, 9.0, 1.0, -2.0, 5.0]);
        let wv = g.input(w);
        let prod = g.mul(y, wv).unwrap();
        let s = g.sum(prod).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(xv), Some(&[1.0, -2.0, 1.0, -1.0, 2.0, 1.0][..]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new(&[]);
        let x = g.input_tracked(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(NumError::NotScalar(_))));
    }

    #[test]
    fn repeated_parameter_use_sums_gradients() {
        let params = vec![Tensor::scalar(2.0)];
        let mut g = Graph::new(&params);
        let p1 = g.param(0).unwrap();
        let p2 = g.param(0).unwrap();
        let y = g.mul(p1, p2).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param(0).unwrap(), &[4.0]);
    }

    #[test]
    fn accumulate_into_adds_across_calls() {
        let mut params = vec![Tensor::scalar(3.0)];
        for _ in 0..2 {
            let mut g = Graph::new(&params);
            let p = g.param(0).unwrap();
            let y = g.mul(p, p).unwrap();
            let grads = g.backward(y).unwrap();
            grads.accumulate_into(&mut params).unwrap();
        }
        assert_eq!(params[0].grad().unwrap(), &[12.0]);
    }

    #[test]
    fn huber_values_and_slopes() {
        assert_eq!(huber_value(0.5, 1.0), 0.125);
        assert_eq!(huber_value(3.0, 1.0), 2.5);
        assert_eq!(huber_value(-3.0, 1.0), 2.5);
        assert_eq!(huber_slope(-3.0, 1.0), -1.0);
    }

    #[test]
    fn dueling_row_mean_of_q_minus_v_is_zero() {
        let mut g = Graph::new(&[]);
        let v = g.input(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let a = g.input(Tensor::new(vec![1, 4], vec![1.0, 0.0, -1.0, 0.0]).unwrap());
        let q = g.dueling(v, a).unwrap();
        assert_eq!(g.value(q), &[3.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut g = Graph::new(&[]);
        let x = g.input(Tensor::zeros(vec![2, 4]));
        assert!(g.gather(x, &[0, 4]).is_err());
        assert!(g.gather(x, &[0]).is_err());
    }

    #[test]
    fn block_conv_matches_materialized_conv() {
        // 2 samples, 6x6 image with 2 channels, 3x3 blocks, 3 cell channels.
        let (n, h, c, k, kk, out) = (2, 6, 2, 3, 3, 4);
        let blocks = h / kk;
        let det = |i: usize, salt: f64| (i as f64 * 0.7123 + salt).sin() * 1.3;
        let img: Vec<f64> = (0..n * h * h * c).map(|i| det(i, 0.1)).collect();
        let cells: Vec<f64> = (0..n * blocks * blocks * k).map(|i| det(i, 2.0)).collect();
        let mut full = Vec::with_capacity(n * h * h * (c + k));
        for s in 0..n {
            for y in 0..h {
                for x in 0..h {
                    let p = ((s * h + y) * h + x) * c;
                    full.extend_from_slice(&img[p..p + c]);
                    let q = ((s * blocks + y / kk) * blocks + x / kk) * k;
                    full.extend_from_slice(&cells[q..q + k]);
                }
            }
        }
        let params = vec![
            Tensor::new(
                vec![out, kk, kk, c + k],
                (0..out * kk * kk * (c + k)).map(|i| det(i, 5.0) * 0.3).collect(),
            )
            .unwrap(),
            Tensor::from_vec(vec![0.1, -0.2, 0.3, 0.0]),
        ];
        let weights: Vec<f64> = (0..n * blocks * blocks * out).map(|i| det(i, 9.0)).collect();
        let run = |blocked: bool| {
            let mut g = Graph::new(&params);
            let (w, b) = (g.param(0).unwrap(), g.param(1).unwrap());
            let (y, xi, ci) = if blocked {
                let xi = g.input_tracked(Tensor::new(vec![n, h, h, c], img.clone()).unwrap());
                let ci = g.input_tracked(Tensor::new(vec![n, blocks, blocks, k], cells.clone()).unwrap());
                (g.conv2d_blocks(xi, Some(ci), w, b).unwrap(), xi, Some(ci))
            } else {
                let xi = g.input_tracked(Tensor::new(vec![n, h, h, c + k], full.clone()).unwrap());
                (g.conv2d(xi, w, b, kk, false).unwrap(), xi, None)
            };
            let y_val = g.value(y).to_vec();
            let wt = g.input(Tensor::new(vec![y_val.len()], weights.clone()).unwrap());
            let yf = g.reshape(y, vec![y_val.len()]).unwrap();
            let prod = g.mul(yf, wt).unwrap();
            let loss = g.sum(prod).unwrap();
            let grads = g.backward(loss).unwrap();
            let dx = grads.wrt(xi).unwrap().to_vec();
            let dc = ci.map(|v| grads.wrt(v).unwrap().to_vec());
            (y_val, grads.param(0).unwrap().to_vec(), grads.param(1).unwrap().to_vec(), dx, dc)
        };
        let (y_a, dw_a, db_a, dx_a, dc_a) = run(true);
        let (y_b, dw_b, db_b, dx_b, _) = run(false);
        let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(&y_a, &y_b));
        assert!(close(&dw_a, &dw_b));
        assert!(close(&db_a, &db_b));
        // Image gradient is the image-channel slice of the full gradient;
        // the cell gradient sums the cell-channel slice over each block.
        let mut dx_img = Vec::new();
        let mut dc_sum = vec![0.0; cells.len()];
        for s in 0..n {
            for y in 0..h {
                for x in 0..h {
                    let p = ((s * h + y) * h + x) * (c + k);
                    dx_img.extend_from_slice(&dx_b[p..p + c]);
                    let q = ((s * blocks + y / kk) * blocks + x / kk) * k;
                    for j in 0..k {
                        dc_sum[q + j] += dx_b[p + c + j];
                    }
                }
            }
        }
        assert!(close(&dx_a, &dx_img));
        assert!(close(&dc_a.unwrap(), &dc_sum));
    }

    #[test]
    fn block_conv_rejects_bad_shapes() {
        let params = vec![Tensor::zeros(vec![1, 3, 3, 2]), Tensor::zeros(vec![1])];
        let mut g = Graph::new(&params);
        let (w, b) = (g.param(0).unwrap(), g.param(1).unwrap());
        let x = g.input(Tensor::zeros(vec![1, 5, 6, 2]));
        assert!(g.conv2d_blocks(x, None, w, b).is_err());
        let x = g.input(Tensor::zeros(vec![1, 6, 6, 1]));
        assert!(g.conv2d_blocks(x, None, w, b).is_err());
        let cells = g.input(Tensor::zeros(vec![1, 2, 2, 1]));
        assert!(g.conv2d_blocks(x, Some(cells), w, b).is_ok());
    }
}
