use super::conv::{
    conv2d_backward, conv2d_forward, conv_geom, pool2d_backward, pool2d_forward, pool_geom,
    ConvGeom, PoolGeom,
};
use super::{check_shape, Conv2dCfg, PoolCfg, PoolKind, Tensor};
use crate::error::{GhnError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    MatMul(Var, Var),
    Concat(Vec<Var>, usize),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Conv2d(Var, Var, ConvGeom),
    Pool(Var, PoolKind, PoolGeom, Vec<usize>),
    Upsample(Var, usize),
    GlobalAvgPool(Var),
    ChannelAffine(Var, Var, Var),
    SampleNorm(Var, Vec<f64>),
    SoftmaxCe(Var, Vec<usize>, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Define-by-run recording of a differentiable computation.
///
/// Operations are appended in execution order, so the node list is always a
/// valid topological order and [`Tape::backward`] walks it in reverse. Leaf
/// gradients accumulate across backward calls until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after `mark` (a previous [`Tape::len`]).
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(GhnError::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Sum of several same-shaped values, left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| GhnError::input("add_all of an empty list"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Adds `b` (length = last dimension of `a`) to every row of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap();
        if self.value(b).len() != n {
            return Err(GhnError::dim(format!(
                "add_bias: bias {:?} does not match last dimension of {:?}",
                self.shape(b),
                self.shape(a)
            )));
        }
        let bias = self.data(b);
        let data = self
            .data(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
            .collect();
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::AddBias(a, b), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GhnError::dim(format!(
                "matmul: cannot multiply {sa:?} by {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let value = Tensor {
            shape: vec![m, n],
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Fully-connected layer `x · w + b` with `w` laid out `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Result<Var> {
        let first = *vars
            .first()
            .ok_or_else(|| GhnError::input("concat of an empty list"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(GhnError::dim(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        for &v in vars {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(GhnError::dim(format!(
                    "concat along axis {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in vars {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = vars.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor { shape, data }, Op::Concat(vars.to_vec(), axis), rg))
    }

    /// `out[i] = a[index[i]]`, shaped as `shape`. Covers slicing, cropping,
    /// transposition and row selection.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        check_shape(&shape)?;
        let len = self.value(a).len();
        if shape.iter().product::<usize>() != index.len() {
            return Err(GhnError::dim(format!(
                "gather: {} indices cannot fill shape {shape:?}",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= len) {
            return Err(GhnError::dim(format!(
                "gather: index {bad} out of range for {:?}",
                self.shape(a)
            )));
        }
        let src = self.data(a);
        let data = index.iter().map(|&i| src[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::Gather(a, index), rg))
    }

    /// Row `i` of a 2-d value, as `1 × n`.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || i >= s[0] {
            return Err(GhnError::dim(format!("row {i} out of range for {s:?}")));
        }
        self.gather(a, (i * s[1]..(i + 1) * s[1]).collect(), vec![1, s[1]])
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(GhnError::dim(format!(
                "slice [{start}, {}) along axis {axis} out of range for {s:?}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            index.extend(base + start * inner..base + (start + len) * inner);
        }
        let mut shape = s;
        shape[axis] = len;
        self.gather(a, index, shape)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(GhnError::dim(format!("transpose expects 2-d, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let index = (0..c)
            .flat_map(|j| (0..r).map(move |i| i * c + j))
            .collect();
        self.gather(a, index, vec![c, r])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// 2-d cross-correlation. `x` is `[N, C, H, W]` or `[C, H, W]`; `w` is
    /// `[C_out, C_in / groups, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, cfg: Conv2dCfg) -> Result<Var> {
        let (xs, squeeze) = as_nchw(self.shape(x))?;
        let g = conv_geom(&xs, self.shape(w), cfg)?;
        let data = conv2d_forward(self.data(x), self.data(w), &g);
        let shape = if squeeze {
            vec![g.c_out, g.oh, g.ow]
        } else {
            vec![g.n, g.c_out, g.oh, g.ow]
        };
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor { shape, data }, Op::Conv2d(x, w, g), rg))
    }

    /// Depthwise convolution (one `k × k` filter per channel, "same" padding)
    /// followed by a 1×1 pointwise convolution.
    pub fn separable_conv2d(
        &mut self,
        x: Var,
        depthwise: Var,
        pointwise: Var,
        stride: usize,
        dilation: usize,
    ) -> Result<Var> {
        let (xs, _) = as_nchw(self.shape(x))?;
        let (ds, ps) = (
            self.shape(depthwise).to_vec(),
            self.shape(pointwise).to_vec(),
        );
        let c = xs[1];
        if ds.len() != 4 || ds[0] != c || ds[1] != 1 {
            return Err(GhnError::dim(format!(
                "separable_conv2d: depthwise kernel {ds:?} needs one filter per input channel ({c})"
            )));
        }
        if ps.len() != 4 || ps[1] != c || ps[2] != 1 || ps[3] != 1 {
            return Err(GhnError::dim(format!(
                "separable_conv2d: pointwise kernel {ps:?} must be [C_out, {c}, 1, 1]"
            )));
        }
        let cfg = Conv2dCfg {
            stride,
            padding: (dilation * (ds[2] - 1) / 2, dilation * (ds[3] - 1) / 2),
            dilation,
            groups: c,
        };
        let mid = self.conv2d(x, depthwise, cfg)?;
        self.conv2d(mid, pointwise, Conv2dCfg::default())
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind, cfg: PoolCfg) -> Result<Var> {
        let (xs, squeeze) = as_nchw(self.shape(x))?;
        let g = pool_geom(&xs, cfg)?;
        let (data, aux) = pool2d_forward(self.data(x), kind, &g);
        let shape = if squeeze {
            vec![xs[1], g.oh, g.ow]
        } else {
            vec![xs[0], xs[1], g.oh, g.ow]
        };
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Pool(x, kind, g, aux), rg))
    }

    /// Average-pools by an integer factor (window = stride = factor).
    pub fn downsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 1 {
            return Ok(x);
        }
        self.pool2d(x, PoolKind::Avg, PoolCfg::new(factor, factor, 0))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(GhnError::dim("upsample factor must be >= 1"));
        }
        if factor == 1 {
            return Ok(x);
        }
        let (xs, squeeze) = as_nchw(self.shape(x))?;
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.data(x);
        let mut data = Vec::with_capacity(nc * oh * ow);
        for c in 0..nc {
            for i in 0..oh {
                let row = &src[(c * h + i / factor) * w..][..w];
                for j in 0..ow {
                    data.push(row[j / factor]);
                }
            }
        }
        let shape = if squeeze {
            vec![xs[1], oh, ow]
        } else {
            vec![xs[0], xs[1], oh, ow]
        };
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::Upsample(x, factor), rg))
    }

    /// `[N, C, H, W] → [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(GhnError::dim(format!(
                "global_avg_pool expects 4-d, got {s:?}"
            )));
        }
        let plane = s[2] * s[3];
        let data = self
            .data(x)
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![s[0], s[1]],
                data,
            },
            Op::GlobalAvgPool(x),
            rg,
        ))
    }

    /// Per-channel `x * scale[c] + bias[c]` on `[N, C, H, W]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || self.value(scale).len() != s[1] || self.value(bias).len() != s[1] {
            return Err(GhnError::dim(format!(
                "channel_affine: input {s:?}, scale {:?}, bias {:?}",
                self.shape(scale),
                self.shape(bias)
            )));
        }
        let plane = s[2] * s[3];
        let (sc, bi) = (self.data(scale), self.data(bias));
        let data = self
            .data(x)
            .chunks(plane)
            .enumerate()
            .flat_map(|(i, p)| {
                let c = i % s[1];
                p.iter().map(move |v| v * sc[c] + bi[c])
            })
            .collect();
        let rg = self.rg(x) || self.rg(scale) || self.rg(bias);
        Ok(self.push(
            Tensor { shape: s, data },
            Op::ChannelAffine(x, scale, bias),
            rg,
        ))
    }

    /// Standardizes each sample of a batch to zero mean and unit variance
    /// over all of its non-batch entries.
    pub fn sample_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(GhnError::dim(format!(
                "sample_norm: input {s:?} has no batch axis"
            )));
        }
        let n: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(self.value(x).len());
        let mut inv = Vec::with_capacity(s[0]);
        for row in self.data(x).chunks(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + NORM_EPS).sqrt();
            data.extend(row.iter().map(|v| (v - mu) * r));
            inv.push(r);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: s, data }, Op::SampleNorm(x, inv), rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(GhnError::dim(format!(
                "softmax_cross_entropy: logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(GhnError::input(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let probs = softmax_rows(self.data(logits), c);
        let b = labels.len();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -log_softmax_at(&self.data(logits)[i * c..(i + 1) * c], l))
            .sum::<f64>()
            / b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe(logits, labels.to_vec(), probs),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into differentiable leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(GhnError::dim(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = Vec::new();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.push((i, g));
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        for (i, g) in leaves {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                let len = self.nodes[v.0].value.len();
                f(grads[v.0].get_or_insert_with(|| vec![0.0; len]));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * db[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * da[k];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
            }),
            Op::AddBias(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                let n = self.value(*b).len();
                acc(*b, &mut |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        if x[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * (1.0 - out[k] * out[k]);
                }
            }),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let br = &vb[p * n..(p + 1) * n];
                            d[i * k + p] += dot(gr, br);
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = va[i * k + p];
                            if av != 0.0 {
                                let dr = &mut d[p * n..(p + 1) * n];
                                dr.iter_mut().zip(gr).for_each(|(x, y)| *x += av * y);
                            }
                        }
                    }
                });
            }
            Op::Concat(vars, axis) => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut offset = 0;
                for &v in vars {
                    let chunk = self.shape(v)[*axis] * inner;
                    acc(v, &mut |d| {
                        for o in 0..outer {
                            add_into(
                                &mut d[o * chunk..(o + 1) * chunk],
                                &g[o * total + offset..o * total + offset + chunk],
                            );
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Gather(a, index) => acc(*a, &mut |d| {
                for (k, &src) in index.iter().enumerate() {
                    d[src] += g[k];
                }
            }),
            Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let share = g[0] / self.value(*a).len() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += share));
            }
            Op::Conv2d(x, w, geom) => {
                let (vx, vw) = (self.data(*x), self.data(*w));
                if self.rg(*x) {
                    let mut dx = vec![0.0; vx.len()];
                    conv2d_backward(vx, vw, g, geom, Some(&mut dx), None);
                    acc(*x, &mut |d| add_into(d, &dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; vw.len()];
                    conv2d_backward(vx, vw, g, geom, None, Some(&mut dw));
                    acc(*w, &mut |d| add_into(d, &dw));
                }
            }
            Op::Pool(x, kind, geom, aux) => {
                acc(*x, &mut |d| pool2d_backward(g, aux, *kind, geom, d));
            }
            Op::Upsample(x, f) => {
                let s = node.value.shape();
                let n = s.len();
                let (oh, ow) = (s[n - 2], s[n - 1]);
                let (h, w) = (oh / f, ow / f);
                acc(*x, &mut |d| {
                    for (k, gv) in g.iter().enumerate() {
                        let c = k / (oh * ow);
                        let i = (k / ow) % oh;
                        let j = k % ow;
                        d[(c * h + i / f) * w + j / f] += gv;
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                acc(*x, &mut |d| {
                    for (k, p) in d.chunks_mut(plane).enumerate() {
                        let share = g[k] / plane as f64;
                        p.iter_mut().for_each(|v| *v += share);
                    }
                });
            }
            Op::ChannelAffine(x, scale, bias) => {
                let s = self.shape(*x);
                let (c, plane) = (s[1], s[2] * s[3]);
                let (vx, vs) = (self.data(*x), self.data(*scale));
                acc(*x, &mut |d| {
                    for (k, (dv, gv)) in d.iter_mut().zip(g).enumerate() {
                        *dv += gv * vs[(k / plane) % c];
                    }
                });
                acc(*scale, &mut |d| {
                    for (k, (xv, gv)) in vx.iter().zip(g).enumerate() {
                        d[(k / plane) % c] += gv * xv;
                    }
                });
                acc(*bias, &mut |d| {
                    for (k, gv) in g.iter().enumerate() {
                        d[(k / plane) % c] += gv;
                    }
                });
            }
            Op::SampleNorm(x, inv) => {
                let n = out.len() / inv.len();
                acc(*x, &mut |d| {
                    for (b, &r) in inv.iter().enumerate() {
                        let (gs, ys) = (&g[b * n..(b + 1) * n], &out[b * n..(b + 1) * n]);
                        let sg = gs.iter().sum::<f64>() / n as f64;
                        let sgy = dot(gs, ys) / n as f64;
                        for k in 0..n {
                            d[b * n + k] += r * (gs[k] - sg - ys[k] * sgy);
                        }
                    }
                });
            }
            Op::SoftmaxCe(logits, labels, probs) => {
                let c = self.shape(*logits)[1];
                let b = labels.len() as f64;
                acc(*logits, &mut |d| {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            d[r * c + j] += g[0] * (probs[r * c + j] - onehot) / b;
                        }
                    }
                });
            }
        }
    }
}

fn as_nchw(s: &[usize]) -> Result<(Vec<usize>, bool)> {
    match s.len() {
        3 => Ok((vec![1, s[0], s[1], s[2]], true)),
        4 => Ok((s.to_vec(), false)),
        _ => Err(GhnError::dim(format!(
            "expected [C, H, W] or [N, C, H, W], got {s:?}"
        ))),
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_softmax_at(row: &[f64], j: usize) -> f64 {
    let (arg, max) = row
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(ai, am), (i, &v)| {
            if v > am {
                (i, v)
            } else {
                (ai, am)
            }
        });
    // ln Σ exp(x - max) = ln(1 + Σ_{i≠arg} exp(x_i - max)), kept accurate near zero
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, v)| (v - max).exp())
        .sum();
    (row[j] - max) - rest.ln_1p()
}

pub(crate) fn softmax_rows(data: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    out
}
