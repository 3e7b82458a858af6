use super::{split_at_axis, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities. `Gelu` is the exact Gaussian-CDF form
/// `x * Phi(x)`, not the tanh approximation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Gelu => x * std_normal_cdf(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => std_normal_cdf(x) + x * std_normal_pdf(x),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Invalid(format!("unknown activation '{other}'"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, rows: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    TransposeLast2 { x: Var, batch: usize, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    AddBroadcast { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Activate { x: Var, kind: Activation },
    Softmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Concat { xs: Vec<Var>, lens: Vec<usize>, outer: usize, inner: usize },
    Narrow { x: Var, outer: usize, len_in: usize, start: usize, len: usize, inner: usize },
    Reshape { x: Var },
    Repeat { x: Var, times: usize },
    MeanAxis { x: Var, outer: usize, len: usize, inner: usize },
    SumAll { x: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    AvgPool2 { x: Var, n: usize, h: usize, w: usize, c: usize },
    GlobalAvgPool { x: Var, n: usize, hw: usize, c: usize },
    MeanLoss { x: Var, dloss: Vec<f64> },
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Tape of executed operations.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order; [`Graph::backward`] walks it in reverse once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let requires_grad = self.any_grad(inputs);
        let value = Tensor::new(shape, data).expect("op produced inconsistent shape");
        self.push(value, requires_grad, op)
    }

    /// Matrix product of `a: [.., k]` (leading dims flattened into rows) with `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err!("matmul: cannot multiply {sa:?} by {sb:?}"));
        }
        let (k, n) = (sb[0], sb[1]);
        let rows = self.value(a).numel() / k;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; rows * n];
        matmul_into(av, bv, &mut out, rows, k, n);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        Ok(self.record(shape, out, &[a, b], Op::MatMul { a, b, rows, k, n }))
    }

    /// Batched product `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err!("bmm: cannot multiply {sa:?} by {sb:?}"));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            matmul_into(
                &av[bi * m * k..(bi + 1) * m * k],
                &bv[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.record(vec![batch, m, n], out, &[a, b], Op::BatchMatMul { a, b, batch, m, k, n }))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err!("transpose needs rank >= 2, got {s:?}"));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = self.value(x).numel() / (rows * cols);
        let out = transpose_blocks(self.value(x).data(), batch, rows, cols);
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        Ok(self.record(shape, out, &[x], Op::TransposeLast2 { x, batch, rows, cols }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, out, &[a, b], Op::Add { a, b }))
    }

    /// `a + b` where `b`'s shape equals a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(shape_err!("add_broadcast: {sb:?} is not a suffix of {sa:?}"));
        }
        let bv = self.value(b).data();
        let bn = bv.len();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % bn])
            .collect();
        Ok(self.record(sa, out, &[a, b], Op::AddBroadcast { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.record(shape, out, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.record(shape, out, &[x], Op::Scale { x, factor })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).data().iter().map(|&v| kind.apply(v)).collect();
        let shape = self.shape(x).to_vec();
        self.record(shape, out, &[x], Op::Activate { x, kind })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    /// Softmax over the last dimension, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(shape_err!("softmax_rows needs a last dimension, got scalar"));
        }
        let n = s[s.len() - 1];
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.record(s, out, &[x], Op::Softmax { x }))
    }

    /// Layer normalization over the last dimension with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Invalid(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| shape_err!("layer_norm on scalar"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err!(
                "layer_norm: gain {:?} / bias {:?} do not match width {d}",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for i in 0..d {
                let h = (row[i] - mean) * inv;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g[i] + b[i];
            }
        }
        Ok(self.record(s, out, &[x, gain, bias], Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} out of range for {base:?}"));
        }
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &len) in xs.iter().zip(&lens) {
                let block = len * inner;
                out.extend_from_slice(&self.value(x).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.record(shape, out, xs, Op::Concat { xs: xs.to_vec(), lens, outer, inner }))
    }

    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let rank = self.shape(*first).len();
        if rank == 0 {
            return Err(shape_err!("concat_last on scalars"));
        }
        self.concat(xs, rank - 1)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(shape_err!("narrow({axis}, {start}, {len}) out of range for {s:?}"));
        }
        let (outer, len_in, inner) = split_at_axis(&s, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * len_in * inner + start * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.record(shape, out, &[x], Op::Narrow { x, outer, len_in, start, len, inner }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.contains(&0) {
            return Err(shape_err!("reshape {:?} to {shape:?}", self.shape(x)));
        }
        let out = self.value(x).data().to_vec();
        Ok(self.record(shape.to_vec(), out, &[x], Op::Reshape { x }))
    }

    /// Stacks `times` copies of `x` along a new leading axis.
    pub fn repeat(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(shape_err!("repeat zero times"));
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(x));
        let out = self.value(x).data().repeat(times);
        Ok(self.record(shape, out, &[x], Op::Repeat { x, times }))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err!("mean_axis {axis} out of range for {s:?}"));
        }
        let (outer, len, inner) = split_at_axis(&s, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xv[(o * len + l) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = s;
        shape.remove(axis);
        Ok(self.record(shape, out, &[x], Op::MeanAxis { x, outer, len, inner }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.record(vec![], vec![total], &[x], Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Stride-1 convolution with zero "same" padding.
    ///
    /// `x: [N, H, W, Cin]`, `w: [K, K, Cin, Cout]` with odd `K`, `b: [Cout]`.
    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        let ok = sx.len() == 4
            && sw.len() == 4
            && sw[0] == sw[1]
            && sw[0] % 2 == 1
            && sw[2] == sx[3]
            && sb == [sw[3]];
        if !ok {
            return Err(shape_err!("conv2d: input {sx:?}, kernel {sw:?}, bias {sb:?}"));
        }
        let geom = ConvGeom { n: sx[0], h: sx[1], w: sx[2], cin: sx[3], cout: sw[3], k: sw[0] };
        let out = conv_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), geom);
        Ok(self.record(
            vec![geom.n, geom.h, geom.w, geom.cout],
            out,
            &[x, w, b],
            Op::Conv2d { x, w, b, geom },
        ))
    }

    /// 2x2 average pooling with stride 2 on `[N, H, W, C]` (H, W even).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(shape_err!("avg_pool2 needs [N, even H, even W, C], got {s:?}"));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * oh * ow * c];
        for ni in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = ((ni * oh + oy) * ow + ox) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((ni * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                        for ch in 0..c {
                            out[o + ch] += 0.25 * xv[i + ch];
                        }
                    }
                }
            }
        }
        Ok(self.record(vec![n, oh, ow, c], out, &[x], Op::AvgPool2 { x, n, h, w, c }))
    }

    /// Spatial mean of `[N, H, W, C]`, giving `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err!("global_avg_pool needs [N, H, W, C], got {s:?}"));
        }
        let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for ni in 0..n {
            for p in 0..hw {
                let i = (ni * hw + p) * c;
                for ch in 0..c {
                    out[ni * c + ch] += xv[i + ch];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= hw as f64);
        Ok(self.record(vec![n, c], out, &[x], Op::GlobalAvgPool { x, n, hw, c }))
    }

    /// Mean of a per-element loss `f(i, x_i) -> (value, d value / d x_i)`.
    ///
    /// The derivative is evaluated during the forward pass and replayed by
    /// `backward`, so `f` must return the exact derivative of its value.
    pub fn mean_elementwise_loss<F>(&mut self, x: Var, mut f: F) -> Result<Var>
    where
        F: FnMut(usize, f64) -> Result<(f64, f64)>,
    {
        let xv = self.value(x).data();
        let n = xv.len() as f64;
        let mut total = 0.0;
        let mut dloss = Vec::with_capacity(xv.len());
        for (i, &v) in xv.iter().enumerate() {
            let (value, d) = f(i, v)?;
            total += value;
            dloss.push(d / n);
        }
        Ok(self.record(vec![], vec![total / n], &[x], Op::MeanLoss { x, dloss }))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Clears all previous gradients, seeds `d loss / d loss = 1`, and visits
    /// recorded nodes in reverse execution order. Returns the number of nodes
    /// whose gradient was propagated.
    pub fn backward(&mut self, loss: Var) -> Result<usize> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Contract("loss does not depend on any gradient-requiring input".into()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else { continue };
            visited += 1;
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &gout);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(gout);
        }
        Ok(visited)
    }

    /// Adds a contribution into the gradient buffer of `v`, if it wants one.
    fn acc(&mut self, v: Var, f: impl FnOnce(&[Node], &mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let mut buf = self.nodes[v.0].grad.take().unwrap_or_else(|| vec![0.0; n]);
        f(&self.nodes, &mut buf);
        self.nodes[v.0].grad = Some(buf);
    }

    fn propagate(&mut self, node: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, rows, k, n } => {
                self.acc(a, |nodes, da| {
                    let bv = nodes[b.0].value.data();
                    for i in 0..rows {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                });
                self.acc(b, |nodes, db| {
                    let av = nodes[a.0].value.data();
                    for i in 0..rows {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::BatchMatMul { a, b, batch, m, k, n } => {
                self.acc(a, |nodes, da| {
                    let bv = nodes[b.0].value.data();
                    for bi in 0..batch {
                        let (go, bo, ao) = (bi * m * n, bi * k * n, bi * m * k);
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[go + i * n + j] * bv[bo + p * n + j];
                                }
                                da[ao + i * k + p] += s;
                            }
                        }
                    }
                });
                self.acc(b, |nodes, db| {
                    let av = nodes[a.0].value.data();
                    for bi in 0..batch {
                        let (go, bo, ao) = (bi * m * n, bi * k * n, bi * m * k);
                        for i in 0..m {
                            for p in 0..k {
                                let aip = av[ao + i * k + p];
                                for j in 0..n {
                                    db[bo + p * n + j] += aip * g[go + i * n + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::TransposeLast2 { x, batch, rows, cols } => {
                let back = transpose_blocks(g, batch, cols, rows);
                self.acc(x, |_, dx| add_assign(dx, &back));
            }
            Op::Add { a, b } => {
                self.acc(a, |_, da| add_assign(da, g));
                self.acc(b, |_, db| add_assign(db, g));
            }
            Op::AddBroadcast { a, b } => {
                self.acc(a, |_, da| add_assign(da, g));
                self.acc(b, |_, db| {
                    let bn = db.len();
                    for (i, gi) in g.iter().enumerate() {
                        db[i % bn] += gi;
                    }
                });
            }
            Op::Mul { a, b } => {
                self.acc(a, |nodes, da| {
                    let bv = nodes[b.0].value.data();
                    for i in 0..da.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                self.acc(b, |nodes, db| {
                    let av = nodes[a.0].value.data();
                    for i in 0..db.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale { x, factor } => {
                self.acc(x, |_, dx| {
                    for (d, gi) in dx.iter_mut().zip(g) {
                        *d += gi * factor;
                    }
                });
            }
            Op::Activate { x, kind } => {
                self.acc(x, |nodes, dx| {
                    let xv = nodes[x.0].value.data();
                    match kind {
                        // Reuse the forward output instead of recomputing exp().
                        Activation::Sigmoid => {
                            let yv = nodes[node].value.data();
                            for i in 0..dx.len() {
                                dx[i] += g[i] * yv[i] * (1.0 - yv[i]);
                            }
                        }
                        _ => {
                            for i in 0..dx.len() {
                                dx[i] += g[i] * kind.derivative(xv[i]);
                            }
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                self.acc(x, |nodes, dx| {
                    let y = nodes[node].value.data();
                    let n = nodes[node].value.last_dim();
                    for r in 0..y.len() / n {
                        let s = r * n;
                        let dot: f64 = (0..n).map(|i| g[s + i] * y[s + i]).sum();
                        for i in 0..n {
                            dx[s + i] += y[s + i] * (g[s + i] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, ref xhat, ref rstd } => {
                let d = self.nodes[gain.0].value.numel();
                let rows = rstd.len();
                self.acc(gain, |_, dg| {
                    for r in 0..rows {
                        for i in 0..d {
                            dg[i] += g[r * d + i] * xhat[r * d + i];
                        }
                    }
                });
                self.acc(bias, |_, db| {
                    for r in 0..rows {
                        for i in 0..d {
                            db[i] += g[r * d + i];
                        }
                    }
                });
                self.acc(x, |nodes, dx| {
                    let gv = nodes[gain.0].value.data();
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let s = r * d;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for i in 0..d {
                            dxhat[i] = g[s + i] * gv[i];
                            mean_d += dxhat[i];
                            mean_dx += dxhat[i] * xhat[s + i];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for i in 0..d {
                            dx[s + i] += rstd[r] * (dxhat[i] - mean_d - xhat[s + i] * mean_dx);
                        }
                    }
                });
            }
            Op::Concat { ref xs, ref lens, outer, inner } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&x, &len) in xs.iter().zip(lens) {
                    self.acc(x, |_, dx| {
                        let block = len * inner;
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            add_assign(&mut dx[o * block..(o + 1) * block], &g[src..src + block]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, outer, len_in, start, len, inner } => {
                self.acc(x, |_, dx| {
                    for o in 0..outer {
                        let dst = o * len_in * inner + start * inner;
                        let src = o * len * inner;
                        add_assign(&mut dx[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                });
            }
            Op::Reshape { x } => self.acc(x, |_, dx| add_assign(dx, g)),
            Op::Repeat { x, times } => {
                self.acc(x, |_, dx| {
                    let n = dx.len();
                    for t in 0..times {
                        add_assign(dx, &g[t * n..(t + 1) * n]);
                    }
                });
            }
            Op::MeanAxis { x, outer, len, inner } => {
                self.acc(x, |_, dx| {
                    let scale = 1.0 / len as f64;
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                dx[(o * len + l) * inner + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::SumAll { x } => {
                self.acc(x, |_, dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Conv2d { x, w, b, geom } => {
                self.acc(b, |_, db| {
                    for (i, gi) in g.iter().enumerate() {
                        db[i % geom.cout] += gi;
                    }
                });
                self.acc(w, |nodes, dw| conv_backward_kernel(nodes[x.0].value.data(), g, dw, geom));
                self.acc(x, |nodes, dx| conv_backward_input(nodes[w.0].value.data(), g, dx, geom));
            }
            Op::AvgPool2 { x, n, h, w, c } => {
                self.acc(x, |_, dx| {
                    let (oh, ow) = (h / 2, w / 2);
                    for ni in 0..n {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let o = ((ni * oh + oy) * ow + ox) * c;
                                for (dy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let i = ((ni * h + 2 * oy + dy) * w + 2 * ox + ddx) * c;
                                    for ch in 0..c {
                                        dx[i + ch] += 0.25 * g[o + ch];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool { x, n, hw, c } => {
                self.acc(x, |_, dx| {
                    let scale = 1.0 / hw as f64;
                    for ni in 0..n {
                        for p in 0..hw {
                            let i = (ni * hw + p) * c;
                            for ch in 0..c {
                                dx[i + ch] += g[ni * c + ch] * scale;
                            }
                        }
                    }
                });
            }
            Op::MeanLoss { x, ref dloss } => {
                self.acc(x, |_, dx| {
                    for (d, dl) in dx.iter_mut().zip(dloss) {
                        *d += g[0] * dl;
                    }
                });
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// `out += a[m x k] * b[k x n]`, summing over `k` in increasing order.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

fn transpose_blocks(x: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..batch {
        let o = bi * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[o + c * rows + r] = x[o + r * cols + c];
            }
        }
    }
    out
}

/// Calls `f(out_index, in_index, kernel_row)` for every valid tap.
#[inline]
fn for_each_tap(geom: ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let ConvGeom { n, h, w, cin, cout, k } = geom;
    let pad = (k / 2) as isize;
    for ni in 0..n {
        for oy in 0..h {
            for ox in 0..w {
                let o = ((ni * h + oy) * w + ox) * cout;
                for ky in 0..k {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ox as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = ((ni * h + iy as usize) * w + ix as usize) * cin;
                        let kr = (ky * k + kx) * cin * cout;
                        f(o, i, kr);
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &[f64], w: &[f64], b: &[f64], geom: ConvGeom) -> Vec<f64> {
    let (cin, cout) = (geom.cin, geom.cout);
    let mut out = vec![0.0; geom.n * geom.h * geom.w * cout];
    for chunk in out.chunks_mut(cout) {
        chunk.copy_from_slice(b);
    }
    for_each_tap(geom, |o, i, kr| {
        for ci in 0..cin {
            let xv = x[i + ci];
            let wrow = &w[kr + ci * cout..kr + (ci + 1) * cout];
            let orow = &mut out[o..o + cout];
            for co in 0..cout {
                orow[co] += xv * wrow[co];
            }
        }
    });
    out
}

fn conv_backward_kernel(x: &[f64], g: &[f64], dw: &mut [f64], geom: ConvGeom) {
    let (cin, cout) = (geom.cin, geom.cout);
    for_each_tap(geom, |o, i, kr| {
        let grow = &g[o..o + cout];
        for ci in 0..cin {
            let xv = x[i + ci];
            let drow = &mut dw[kr + ci * cout..kr + (ci + 1) * cout];
            for co in 0..cout {
                drow[co] += xv * grow[co];
            }
        }
    });
}

fn conv_backward_input(w: &[f64], g: &[f64], dx: &mut [f64], geom: ConvGeom) {
    let (cin, cout) = (geom.cin, geom.cout);
    for_each_tap(geom, |o, i, kr| {
        let grow = &g[o..o + cout];
        for ci in 0..cin {
            let wrow = &w[kr + ci * cout..kr + (ci + 1) * cout];
            let mut s = 0.0;
            for co in 0..cout {
                s += wrow[co] * grow[co];
            }
            dx[i + ci] += s;
        }
    });
}
