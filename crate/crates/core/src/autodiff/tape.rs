use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Leaf,
    MatMul,
    Add,
    AddBias,
    Mul,
    Scale,
    Relu,
    Log,
    LogClamped,
    Sum,
    Mean,
    Softmax,
    SoftmaxCrossEntropy,
    Conv2d,
    AvgPool2,
    SpatialMean,
    ChannelScale,
    Grl,
    SelectPerRow,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::AddBias => "add_bias",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Relu => "relu",
            Primitive::Log => "log",
            Primitive::LogClamped => "log_clamped",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Softmax => "softmax",
            Primitive::SoftmaxCrossEntropy => "softmax_cross_entropy",
            Primitive::Conv2d => "conv2d",
            Primitive::AvgPool2 => "avg_pool2",
            Primitive::SpatialMean => "spatial_mean",
            Primitive::ChannelScale => "channel_scale",
            Primitive::Grl => "grl",
            Primitive::SelectPerRow => "select_per_row",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Input offset feeding column `j` of output row `(b, oh, ow)`, if inside the image.
    #[inline]
    fn source(&self, b: usize, oh: usize, ow: usize, j: usize) -> Option<usize> {
        let k2 = self.kernel * self.kernel;
        let ci = j / k2;
        let kh = (j % k2) / self.kernel;
        let kw = j % self.kernel;
        let ih = (oh * self.stride + kh).checked_sub(self.pad)?;
        let iw = (ow * self.stride + kw).checked_sub(self.pad)?;
        if ih >= self.in_h || iw >= self.in_w {
            return None;
        }
        Some(((b * self.in_h + ih) * self.in_w + iw) * self.in_c + ci)
    }
}

/// Output spatial extent of a convolution, or `None` when the kernel does not fit.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Log(usize),
    LogClamped(usize),
    Sum(usize),
    Mean(usize),
    Softmax(usize),
    SoftmaxCe {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AvgPool2(usize),
    SpatialMean(usize),
    ChannelScale {
        input: usize,
        scale: Vec<f64>,
    },
    Grl(usize, f64),
    SelectPerRow {
        input: usize,
        idx: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive applications. Entries are in topological
/// order by construction: an op can only reference vars already on the tape.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(width).zip(out.chunks_mut(width)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        orow.iter_mut().for_each(|o| *o /= z);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, prim: Primitive, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: prim.name() });
        }
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var { tape: self.id, idx })
    }

    fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a leaf. Gradients are kept for it iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        let rg = t.requires_grad;
        self.push(Primitive::Leaf, t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Result<Var> {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    /// Accumulated gradient of a leaf, if any backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.idx].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.node(ia).value.shape(), self.node(ib).value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(
            self.node(ia).value.data(),
            self.node(ib).value.data(),
            n,
            k,
            m,
        );
        let rg = self.rg(&[ia, ib]);
        self.push(
            Primitive::MatMul,
            Tensor::new(vec![n, m], out)?,
            Op::MatMul(ia, ib),
            rg,
        )
    }

    fn same_shape(&self, prim: Primitive, ia: usize, ib: usize) -> Result<()> {
        let (sa, sb) = (self.node(ia).value.shape(), self.node(ib).value.shape());
        if sa != sb {
            return Err(Error::shape(prim.name(), format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(Primitive::Add, ia, ib)?;
        let va = &self.node(ia).value;
        let out: Vec<f64> = va
            .data()
            .iter()
            .zip(self.node(ib).value.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg(&[ia, ib]);
        self.push(Primitive::Add, t, Op::Add(ia, ib), rg)
    }

    /// Adds a bias vector along the last axis. The only broadcast supported.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (sx, sb) = (self.node(ix).value.shape(), self.node(ib).value.shape());
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let w = sb[0];
        let b = self.node(ib).value.data();
        let out: Vec<f64> = self
            .node(ix)
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % w])
            .collect();
        let t = Tensor::new(sx.to_vec(), out)?;
        let rg = self.rg(&[ix, ib]);
        self.push(Primitive::AddBias, t, Op::AddBias(ix, ib), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(Primitive::Mul, ia, ib)?;
        let va = &self.node(ia).value;
        let out: Vec<f64> = va
            .data()
            .iter()
            .zip(self.node(ib).value.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg(&[ia, ib]);
        self.push(Primitive::Mul, t, Op::Mul(ia, ib), rg)
    }

    fn unary(
        &mut self,
        prim: Primitive,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.node(ix).value;
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())?;
        let rg = self.rg(&[ix]);
        self.push(prim, t, op(ix), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(Primitive::Scale, x, |a| a * s, |i| Op::Scale(i, s))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Primitive::Relu, x, |a| a.max(0.0), Op::Relu)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Primitive::Log, x, f64::ln, Op::Log)
    }

    /// `ln(clamp(x, PROB_FLOOR, 1))`.
    pub fn log_clamped(&mut self, x: Var) -> Result<Var> {
        self.unary(
            Primitive::LogClamped,
            x,
            |a| a.clamp(PROB_FLOOR, 1.0).ln(),
            Op::LogClamped,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let s = self.node(ix).value.data().iter().sum();
        let rg = self.rg(&[ix]);
        self.push(Primitive::Sum, Tensor::scalar(s), Op::Sum(ix), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.node(ix).value;
        if v.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[ix]);
        self.push(Primitive::Mean, Tensor::scalar(s), Op::Mean(ix), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.node(ix).value;
        let w = *v
            .shape()
            .last()
            .filter(|&&w| w > 0)
            .ok_or_else(|| Error::shape("softmax", format!("{:?}", v.shape())))?;
        let t = Tensor::new(v.shape().to_vec(), softmax_rows(v.data(), w))?;
        let rg = self.rg(&[ix]);
        self.push(Primitive::Softmax, t, Op::Softmax(ix), rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`. Accepts `[C]` (one
    /// label) or `[B, C]` (B labels).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let v = &self.node(il).value;
        let (rows, c) = match v.shape() {
            [c] => (1, *c),
            [b, c] => (*b, *c),
            s => return Err(Error::shape("softmax_cross_entropy", format!("{s:?}"))),
        };
        if rows != labels.len() || rows == 0 || c == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{rows} rows vs {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let mut total = 0.0;
        for (row, &y) in v.data().chunks(c).zip(labels) {
            let (amax, m) = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc },
                );
            // log-sum-exp split as max + ln(1 + rest) keeps tiny losses exact.
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != amax)
                .map(|(_, &x)| (x - m).exp())
                .sum();
            total += (m - row[y]) + rest.ln_1p();
        }
        let probs = softmax_rows(v.data(), c);
        let loss = total / rows as f64;
        let rg = self.rg(&[il]);
        self.push(
            Primitive::SoftmaxCrossEntropy,
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// NHWC convolution: input `[B,H,W,Cin]`, kernel `[Cout,Cin,k,k]`, bias `[Cout]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (ii, ik, ib) = (self.check(input)?, self.check(kernel)?, self.check(bias)?);
        let (si, sk, sb) = (
            self.node(ii).value.shape(),
            self.node(ik).value.shape(),
            self.node(ib).value.shape(),
        );
        let bad = || {
            Error::shape(
                "conv2d",
                format!("input {si:?}, kernel {sk:?}, bias {sb:?}"),
            )
        };
        if si.len() != 4 || sk.len() != 4 || sk[2] != sk[3] || sk[1] != si[3] || sb != [sk[0]] {
            return Err(bad());
        }
        let k = sk[2];
        let out_h = conv_out_dim(si[1], k, stride, pad).ok_or_else(bad)?;
        let out_w = conv_out_dim(si[2], k, stride, pad).ok_or_else(bad)?;
        let geom = ConvGeom {
            batch: si[0],
            in_h: si[1],
            in_w: si[2],
            in_c: si[3],
            out_h,
            out_w,
            out_c: sk[0],
            kernel: k,
            stride,
            pad,
        };
        let plen = geom.patch_len();
        let x = self.node(ii).value.data();
        let mut cols = vec![0.0; geom.rows() * plen];
        for b in 0..geom.batch {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let r = (b * out_h + oh) * out_w + ow;
                    let crow = &mut cols[r * plen..(r + 1) * plen];
                    for (j, c) in crow.iter_mut().enumerate() {
                        if let Some(s) = geom.source(b, oh, ow, j) {
                            *c = x[s];
                        }
                    }
                }
            }
        }
        // out[r, co] = sum_j cols[r, j] * kernel[co, j] + bias[co]
        let kd = self.node(ik).value.data();
        let bd = self.node(ib).value.data();
        let oc = geom.out_c;
        let mut out = vec![0.0; geom.rows() * oc];
        for (crow, orow) in cols.chunks(plen).zip(out.chunks_mut(oc)) {
            for (co, o) in orow.iter_mut().enumerate() {
                let krow = &kd[co * plen..(co + 1) * plen];
                *o = bd[co] + crow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let t = Tensor::new(vec![geom.batch, out_h, out_w, oc], out)?;
        let rg = self.rg(&[ii, ik, ib]);
        self.push(
            Primitive::Conv2d,
            t,
            Op::Conv2d {
                input: ii,
                kernel: ik,
                bias: ib,
                geom,
                cols,
            },
            rg,
        )
    }

    /// 2x2 average pooling with stride 2 on `[B,H,W,K]`; H and W must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.node(ix).value;
        let s = v.shape();
        if s.len() != 4
            || !s[1].is_multiple_of(2)
            || !s[2].is_multiple_of(2)
            || s[1] == 0
            || s[2] == 0
        {
            return Err(Error::shape("avg_pool2", format!("{s:?}")));
        }
        let (b, h, w, k) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let d = v.data();
        let mut out = vec![0.0; b * oh * ow * k];
        for bi in 0..b {
            for i in 0..oh {
                for j in 0..ow {
                    for c in 0..k {
                        let at = |y: usize, x: usize| d[((bi * h + y) * w + x) * k + c];
                        out[((bi * oh + i) * ow + j) * k + c] = 0.25
                            * (at(2 * i, 2 * j)
                                + at(2 * i + 1, 2 * j)
                                + at(2 * i, 2 * j + 1)
                                + at(2 * i + 1, 2 * j + 1));
                    }
                }
            }
        }
        let t = Tensor::new(vec![b, oh, ow, k], out)?;
        let rg = self.rg(&[ix]);
        self.push(Primitive::AvgPool2, t, Op::AvgPool2(ix), rg)
    }

    /// Mean over the two spatial axes: `[B,H,W,K] -> [B,K]` or `[H,W,K] -> [K]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.node(ix).value;
        let s = v.shape();
        let (b, hw, k, out_shape) = match s {
            [h, w, k] => (1, h * w, *k, vec![*k]),
            [b, h, w, k] => (*b, h * w, *k, vec![*b, *k]),
            _ => return Err(Error::shape("spatial_mean", format!("{s:?}"))),
        };
        if hw == 0 {
            return Err(Error::shape("spatial_mean", "empty spatial extent"));
        }
        let d = v.data();
        let mut out = vec![0.0; b * k];
        for bi in 0..b {
            let o = &mut out[bi * k..(bi + 1) * k];
            for p in 0..hw {
                let px = &d[(bi * hw + p) * k..(bi * hw + p + 1) * k];
                o.iter_mut().zip(px).for_each(|(a, v)| *a += v);
            }
            o.iter_mut().for_each(|a| *a /= hw as f64);
        }
        let t = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[ix]);
        self.push(Primitive::SpatialMean, t, Op::SpatialMean(ix), rg)
    }

    /// Multiplies every spatial position of channel `k` in sample `b` by the
    /// constant `scale[b*K + k]`. The scale carries no gradient. A zero scale
    /// yields `+0.0` regardless of sign.
    pub fn channel_scale(&mut self, x: Var, scale: &[f64]) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.node(ix).value;
        let s = v.shape();
        let (b, k) = match s {
            [_, _, k] => (1, *k),
            [b, _, _, k] => (*b, *k),
            _ => return Err(Error::shape("channel_scale", format!("{s:?}"))),
        };
        if scale.len() != b * k {
            return Err(Error::shape(
                "channel_scale",
                format!(
                    "map {s:?} needs {} scale entries, got {}",
                    b * k,
                    scale.len()
                ),
            ));
        }
        let per_sample = v.len() / b.max(1);
        let out: Vec<f64> = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| match scale[(i / per_sample) * k + i % k] {
                0.0 => 0.0,
                c => a * c,
            })
            .collect();
        let t = Tensor::new(s.to_vec(), out)?;
        let rg = self.rg(&[ix]);
        self.push(
            Primitive::ChannelScale,
            t,
            Op::ChannelScale {
                input: ix,
                scale: scale.to_vec(),
            },
            rg,
        )
    }

    /// Identity forward; the backward pass multiplies the upstream gradient by `-lambda`.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if lambda.is_nan() || lambda < 0.0 || lambda.is_infinite() {
            return Err(Error::InvalidArgument(format!(
                "gradient reversal lambda must be >= 0, got {lambda}"
            )));
        }
        self.unary(Primitive::Grl, x, |a| a, |i| Op::Grl(i, lambda))
    }

    /// Picks `x[b, idx[b]]` from a `[B, C]` tensor.
    pub fn select_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let ix = self.check(x)?;
        let v = &self.node(ix).value;
        let s = v.shape();
        if s.len() != 2 || s[0] != idx.len() {
            return Err(Error::shape(
                "select_per_row",
                format!("{s:?} with {} indices", idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[1]) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: s[1],
            });
        }
        let out = idx.iter().enumerate().map(|(r, &c)| v.row(r)[c]).collect();
        let t = Tensor::new(vec![idx.len()], out)?;
        let rg = self.rg(&[ix]);
        self.push(
            Primitive::SelectPerRow,
            t,
            Op::SelectPerRow {
                input: ix,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added into every
    /// `requires_grad` leaf; leaves the loss does not reach get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.check(loss)?;
        let lv = &self.nodes[il].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; il + 1];
        grads[il] = Some(vec![1.0]);

        for i in (0..=il).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(gy);
                continue;
            }
            for (target, g) in self.local_backward(i, &gy) {
                if self.nodes[target].requires_grad {
                    accumulate(&mut grads[target], g);
                }
            }
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let n = node.value.len();
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; n]);
                accumulate(&mut node.value.grad, g);
            }
        }
        Ok(())
    }

    fn local_backward(&self, i: usize, gy: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let val = |j: usize| self.nodes[j].value.data();
        let shape = |j: usize| self.nodes[j].value.shape();
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (n, k) = (shape(*a)[0], shape(*a)[1]);
                let m = shape(*b)[1];
                let (av, bv) = (val(*a), val(*b));
                // dA = dY B^T
                let mut da = vec![0.0; n * k];
                for r in 0..n {
                    let grow = &gy[r * m..(r + 1) * m];
                    for p in 0..k {
                        let brow = &bv[p * m..(p + 1) * m];
                        da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                // dB = A^T dY
                let mut db = vec![0.0; k * m];
                for r in 0..n {
                    let grow = &gy[r * m..(r + 1) * m];
                    for p in 0..k {
                        let a_rp = av[r * k + p];
                        if a_rp == 0.0 {
                            continue;
                        }
                        db[p * m..(p + 1) * m]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, g)| *d += a_rp * g);
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, gy.to_vec()), (*b, gy.to_vec())],
            Op::AddBias(x, b) => {
                let w = shape(*b)[0];
                let mut db = vec![0.0; w];
                for (j, g) in gy.iter().enumerate() {
                    db[j % w] += g;
                }
                vec![(*x, gy.to_vec()), (*b, db)]
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let da = gy.iter().zip(bv).map(|(g, y)| g * y).collect();
                let db = gy.iter().zip(av).map(|(g, x)| g * x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(x, s) => vec![(*x, gy.iter().map(|g| g * s).collect())],
            Op::Relu(x) => {
                let d = gy
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*x, d)]
            }
            Op::Log(x) => vec![(*x, gy.iter().zip(val(*x)).map(|(g, v)| g / v).collect())],
            Op::LogClamped(x) => {
                let d = gy
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &v)| {
                        if (PROB_FLOOR..=1.0).contains(&v) {
                            g / v
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![(*x, d)]
            }
            Op::Sum(x) => vec![(*x, vec![gy[0]; val(*x).len()])],
            Op::Mean(x) => {
                let n = val(*x).len();
                vec![(*x, vec![gy[0] / n as f64; n])]
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let w = *shape(*x).last().unwrap();
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(w).zip(gy.chunks(w)).zip(d.chunks_mut(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![(*x, d)]
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let rows = labels.len();
                let c = probs.len() / rows;
                let scale = gy[0] / rows as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * c + y] -= scale;
                }
                vec![(*logits, d)]
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let plen = geom.patch_len();
                let oc = geom.out_c;
                let kd = val(*kernel);
                let mut dk = vec![0.0; oc * plen];
                let mut db = vec![0.0; oc];
                let mut dx = vec![0.0; val(*input).len()];
                let mut dcol = vec![0.0; plen];
                let want_dx = self.nodes[*input].requires_grad;
                for r in 0..geom.rows() {
                    let grow = &gy[r * oc..(r + 1) * oc];
                    let crow = &cols[r * plen..(r + 1) * plen];
                    dcol.iter_mut().for_each(|d| *d = 0.0);
                    let mut any = false;
                    for (co, &g) in grow.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        any = true;
                        db[co] += g;
                        let krow = &kd[co * plen..(co + 1) * plen];
                        dk[co * plen..(co + 1) * plen]
                            .iter_mut()
                            .zip(crow)
                            .for_each(|(d, c)| *d += g * c);
                        if want_dx {
                            dcol.iter_mut().zip(krow).for_each(|(d, k)| *d += g * k);
                        }
                    }
                    if !any || !want_dx {
                        continue;
                    }
                    let b = r / (geom.out_h * geom.out_w);
                    let oh = (r / geom.out_w) % geom.out_h;
                    let ow = r % geom.out_w;
                    for (j, &d) in dcol.iter().enumerate() {
                        if let Some(s) = geom.source(b, oh, ow, j) {
                            dx[s] += d;
                        }
                    }
                }
                vec![(*input, dx), (*kernel, dk), (*bias, db)]
            }
            Op::AvgPool2(x) => {
                let s = shape(*x);
                let (h, w, k) = (s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut d = vec![0.0; val(*x).len()];
                for (o, &g) in gy.iter().enumerate() {
                    let c = o % k;
                    let j = (o / k) % ow;
                    let ii = (o / (k * ow)) % oh;
                    let b = o / (k * ow * oh);
                    for (dy, dxo) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        d[((b * h + 2 * ii + dy) * w + 2 * j + dxo) * k + c] += 0.25 * g;
                    }
                }
                vec![(*x, d)]
            }
            Op::SpatialMean(x) => {
                let s = shape(*x);
                let k = *s.last().unwrap();
                let hw = s[s.len() - 3] * s[s.len() - 2];
                let n = val(*x).len();
                let d = (0..n)
                    .map(|idx| {
                        let b = idx / (hw * k);
                        gy[b * k + idx % k] / hw as f64
                    })
                    .collect();
                vec![(*x, d)]
            }
            Op::ChannelScale { input, scale } => {
                let s = shape(*input);
                let k = *s.last().unwrap();
                let b = if s.len() == 4 { s[0] } else { 1 };
                let per_sample = gy.len() / b.max(1);
                let d = gy
                    .iter()
                    .enumerate()
                    .map(|(idx, g)| g * scale[(idx / per_sample) * k + idx % k])
                    .collect();
                vec![(*input, d)]
            }
            Op::Grl(x, lambda) => vec![(*x, gy.iter().map(|g| -lambda * g).collect())],
            Op::SelectPerRow { input, idx } => {
                let c = shape(*input)[1];
                let mut d = vec![0.0; val(*input).len()];
                for (r, &col) in idx.iter().enumerate() {
                    d[r * c + col] += gy[r];
                }
                vec![(*input, d)]
            }
        }
    }
}
