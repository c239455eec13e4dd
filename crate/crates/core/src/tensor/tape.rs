use super::{dot, gemm_acc, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Gelu(Var),
    Silu(Var),
    Relu(Var),
    LayerNorm { x: Var, gain: Option<Var>, bias: Option<Var>, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    MaxRows { x: Var, argmax: Vec<usize> },
    Sse { pred: Var, target: Vec<T>, row_mask: Option<Vec<bool>> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    /// Gradient flows into this node.
    requires_grad: bool,
    /// Accumulated gradient, kept only for leaves.
    grad: Option<Vec<T>>,
}

/// Records operations in execution order; backward walks them in reverse.
///
/// Leaf gradients accumulate across `backward` calls. Intermediate
/// gradients are rebuilt from scratch on every call.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradient buffer of an input that wants one, created zeroed on first use.
fn grad_buf<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: &Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn shape2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape2(a);
        let (k2, n) = self.shape2(b);
        if k != k2 {
            return Err(dim_err(format!("matmul [{m}x{k}] * [{k2}x{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_rows(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a * b^T` for `a: [m x k]`, `b: [n x k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape2(a);
        let (n, k2) = self.shape2(b);
        if k != k2 {
            return Err(dim_err(format!("matmul_t [{m}x{k}] * [{n}x{k2}]^T")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out.push(dot(ar, &bv[j * k..(j + 1) * k]));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_rows(m, n, out)?, Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape2(a);
        let av = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_rows(n, m, out)?, Op::Transpose(a), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(dim_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    fn row_op(&mut self, x: Var, v: Var, f: impl Fn(T, T) -> T, op: Op<T>, what: &str) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(v).numel() != n {
            return Err(dim_err(format!(
                "{what}: row vector of {} elements against {n} columns",
                self.value(v).numel()
            )));
        }
        let vv = self.value(v).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(n.max(1))
            .flat_map(|r| r.iter().zip(vv).map(|(&a, &b)| f(a, b)))
            .collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    /// Adds a row vector to every row.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_op(x, v, |a, b| a + b, Op::AddRow(x, v), "add_row")
    }

    /// Multiplies every row elementwise by a row vector.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_op(x, v, |a, b| a * b, Op::MulRow(x, v), "mul_row")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let t = &self.nodes[x.0].value;
        let out = Tensor { shape: t.shape().to_vec(), data: t.data().iter().map(|&v| v * s).collect() };
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let t = &self.nodes[x.0].value;
        let out = Tensor { shape: t.shape().to_vec(), data: t.data().iter().map(|&v| v + c).collect() };
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = &self.nodes[x.0].value;
        let out = Tensor { shape: t.shape().to_vec(), data: t.data().iter().map(|&v| f(v)).collect() };
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
        self.map(x, move |v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()), Op::Gelu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, |v| v / (T::one() + (-v).exp()), Op::Silu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    /// Per-row normalization with optional affine gain and bias. Statistics in f64.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: f64) -> Result<Var> {
        let (m, n) = self.shape2(x);
        for p in [gain, bias].into_iter().flatten() {
            if self.value(p).numel() != n {
                return Err(dim_err(format!("layer_norm affine width {} vs {n}", self.value(p).numel())));
            }
        }
        let xv = self.value(x).data();
        let mut xhat = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(T::of(rs));
            xhat.extend(row.iter().map(|v| T::of((v.f64() - mean) * rs)));
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let gv = self.value(g).data();
            for row in out.chunks_exact_mut(n) {
                for (o, &gg) in row.iter_mut().zip(gv) {
                    *o *= gg;
                }
            }
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(n) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(x) || gain.is_some_and(|g| self.rg(g)) || bias.is_some_and(|b| self.rg(b));
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Row-wise softmax over the last dimension. Masked-out columns produce
    /// exactly zero and are excluded from the normalizer; fully masked rows are zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.shape2(x);
        if let Some(mk) = mask {
            if mk.len() != n {
                return Err(dim_err(format!("softmax mask of {} for {n} columns", mk.len())));
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        let keep = |j: usize| mask.is_none_or(|mk| mk[j]);
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mx = (0..n).filter(|&j| keep(j)).map(|j| row[j]).fold(T::neg_infinity(), T::max);
            if mx == T::neg_infinity() {
                continue;
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut z = 0.0f64;
            for j in 0..n {
                if keep(j) {
                    o[j] = (row[j] - mx).exp();
                    z += o[j].f64();
                }
            }
            let inv = T::of(1.0 / z);
            for v in o.iter_mut() {
                *v *= inv;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_rows(m, n, out)?, Op::Softmax(x), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape2(x);
        if start + len > n {
            return Err(dim_err(format!("slice_cols {start}..{} of {n}", start + len)));
        }
        let xv = self.value(x).data();
        let data = (0..m).flat_map(|r| xv[r * n + start..r * n + start + len].iter().copied()).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_rows(m, len, data)?, Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape2(x);
        if start + len > m {
            return Err(dim_err(format!("slice_rows {start}..{} of {m}", start + len)));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_rows(len, n, data)?, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map(|&p| self.shape2(p).0).ok_or_else(|| dim_err("concat of nothing".into()))?;
        if parts.iter().any(|&p| self.shape2(p).0 != m) {
            return Err(dim_err("concat_cols with differing row counts".into()));
        }
        let n: usize = parts.iter().map(|&p| self.shape2(p).1).sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_rows(m, n, data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Column-wise maximum over the rows selected by `row_mask` (all rows when `None`).
    pub fn max_rows(&mut self, x: Var, row_mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.shape2(x);
        let keep = |r: usize| row_mask.is_none_or(|mk| mk[r]);
        if row_mask.is_some_and(|mk| mk.len() != m) || !(0..m).any(keep) {
            return Err(dim_err("max_rows needs at least one selected row".into()));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::neg_infinity(); n];
        let mut argmax = vec![0usize; n];
        for r in (0..m).filter(|&r| keep(r)) {
            for j in 0..n {
                if xv[r * n + j] > out[j] {
                    out[j] = xv[r * n + j];
                    argmax[j] = r;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_rows(1, n, out)?, Op::MaxRows { x, argmax }, rg))
    }

    /// Sum of squared errors against a constant target over unmasked rows.
    pub fn sse(&mut self, pred: Var, target: &[T], row_mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.shape2(pred);
        if target.len() != m * n || row_mask.is_some_and(|mk| mk.len() != m) {
            return Err(dim_err(format!("sse target/mask do not match [{m}x{n}]")));
        }
        let pv = self.value(pred).data();
        let mut acc = 0.0f64;
        for r in 0..m {
            if row_mask.is_some_and(|mk| !mk[r]) {
                continue;
            }
            for j in 0..n {
                let d = pv[r * n + j].f64() - target[r * n + j].f64();
                acc += d * d;
            }
        }
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(T::of(acc)),
            Op::Sse { pred, target: target.to_vec(), row_mask: row_mask.map(<[bool]>::to_vec) },
            rg,
        ))
    }

    /// Mean squared error over the unmasked entries.
    pub fn masked_mse(&mut self, pred: Var, target: &[T], row_mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.shape2(pred);
        let rows = row_mask.map_or(m, |mk| mk.iter().filter(|&&b| b).count());
        let s = self.sse(pred, target, row_mask)?;
        Ok(self.scale(s, 1.0 / (rows * n).max(1) as f64))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, n) = self.shape2(logits);
        if labels.len() != m || labels.iter().any(|&l| l >= n) {
            return Err(dim_err(format!("cross_entropy labels do not match [{m}x{n}]")));
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(m * n);
        let mut nll = 0.0f64;
        for (r, &lab) in labels.iter().enumerate() {
            let row = &lv[r * n..(r + 1) * n];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.f64()));
            let z: f64 = row.iter().map(|v| (v.f64() - mx).exp()).sum();
            nll += z.ln() + mx - row[lab].f64();
            probs.extend(row.iter().map(|v| T::of((v.f64() - mx).exp() / z)));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(T::of(nll / m as f64)),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v.f64()).sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(T::of(s)), Op::Sum(x), rg)
    }

    /// 1x1 convolution over points: `x[N x c_in] * w[c_in x c_out] + b`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Multi-head scaled dot-product attention over already projected
    /// `q: [Nq x D]`, `k, v: [Nk x D]`. `key_mask` excludes keys from every softmax.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, key_mask: Option<&[bool]>) -> Result<Var> {
        let d = self.value(q).cols();
        if heads == 0 || d % heads != 0 || self.value(k).cols() != d || self.value(v).cols() != d {
            return Err(dim_err(format!("attention width {d} with {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (self.slice_cols(q, h * dh, dh)?, self.slice_cols(k, h * dh, dh)?, self.slice_cols(v, h * dh, dh)?)
            };
            let s = self.matmul_t(qh, kh)?;
            let s = self.scale(s, scale);
            let p = self.softmax(s, key_mask)?;
            outs.push(self.matmul(p, vh)?);
        }
        if heads == 1 {
            Ok(outs[0])
        } else {
            self.concat_cols(&outs)
        }
    }

    /// Back-propagates from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = grad_buf(nodes, grads, a) {
                    // ga[i][p] += sum_j g[i][j] b[p][j]
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            ga[r * k + p] += dot(gr, &bv.data()[p * n..(p + 1) * n]);
                        }
                    }
                }
                if let Some(gb) = grad_buf(nodes, grads, b) {
                    // gb[p][j] += sum_i a[i][p] g[i][j]
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let a_rp = av.data()[r * k + p];
                            if a_rp == T::zero() {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                *o += a_rp * gv;
                            }
                        }
                    }
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if let Some(ga) = grad_buf(nodes, grads, a) {
                    gemm_acc(g, bv.data(), ga, m, n, k);
                }
                if let Some(gb) = grad_buf(nodes, grads, b) {
                    // gb[j][p] += sum_i g[i][j] a[i][p]
                    for r in 0..m {
                        let ar = &av.data()[r * k..(r + 1) * k];
                        for j in 0..n {
                            let gij = g[r * n + j];
                            if gij == T::zero() {
                                continue;
                            }
                            for (o, &a_rp) in gb[j * k..(j + 1) * k].iter_mut().zip(ar) {
                                *o += gij * a_rp;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                if let Some(ga) = grad_buf(nodes, grads, a) {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = grad_buf(nodes, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
                if let Some(gb) = grad_buf(nodes, grads, b) {
                    gb.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = grad_buf(nodes, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
                if let Some(gb) = grad_buf(nodes, grads, b) {
                    gb.iter_mut().zip(g).for_each(|(o, &v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = grad_buf(nodes, grads, a) {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                }
                if let Some(gb) = grad_buf(nodes, grads, b) {
                    for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                }
            }
            Op::AddRow(x, v) => {
                let n = nodes[x.0].value.cols();
                if let Some(gx) = grad_buf(nodes, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(o, &q)| *o += q);
                }
                if let Some(gv) = grad_buf(nodes, grads, v) {
                    for row in g.chunks_exact(n) {
                        gv.iter_mut().zip(row).for_each(|(o, &q)| *o += q);
                    }
                }
            }
            Op::MulRow(x, v) => {
                let n = nodes[x.0].value.cols();
                let (xv, vv) = (nodes[x.0].value.data(), nodes[v.0].value.data());
                if let Some(gx) = grad_buf(nodes, grads, x) {
                    for (orow, grow) in gx.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        for ((o, &q), &s) in orow.iter_mut().zip(grow).zip(vv) {
                            *o += q * s;
                        }
                    }
                }
                if let Some(gv) = grad_buf(nodes, grads, v) {
                    for (xrow, grow) in xv.chunks_exact(n).zip(g.chunks_exact(n)) {
                        for ((o, &q), &a) in gv.iter_mut().zip(grow).zip(xrow) {
                            *o += q * a;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = grad_buf(nodes, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(o, &q)| *o += q * *s);
                }
            }
            Op::AddScalar(x) => {
                if let Some(gx) = grad_buf(nodes, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(o, &q)| *o += q);
                }
            }
            Op::Gelu(x) => {
                let xv = nodes[x.0].value.data();
                let (c, a, half, three) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5), T::of(3.0));
                if let Some(gx) = grad_buf(nodes, grads, x) {
                    for ((o, &q), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let th = (c * (v + a * v * v * v)).tanh();
                        let d = half * (T::one() + th)
                            + half * v * (T::one() - th * th) * c * (T::one() + three * a * v * v);
                        *o += q * d;
                    }
                }
            }
            Op::Silu(x) => {
                let xv = nodes[x.0].value.data();
                if let Some(gx) = grad_buf(nodes, grads, x) {
                    for ((o, &q), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let s = T::one() / (T::one() + (-v).exp());
                        *o += q * s * (T::one() + v * (T::one() - s));
                    }
                }
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                if let Some(gx) = grad_buf(nodes, grads, x) {
                    for ((o, &q), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *o += q;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = nodes[x.0].value.cols();
                let gv = gain.map(|gg| nodes[gg.0].value.data());
                if let Some(gg) = gain {
                    if let Some(ggrad) = grad_buf(nodes, grads, gg) {
                        for (grow, xrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                            for ((o, &q), &xh) in ggrad.iter_mut().zip(grow).zip(xrow) {
                                *o += q * xh;
                            }
                        }
                    }
                }
                if let Some(bb) = bias {
                    if let Some(bgrad) = grad_buf(nodes, grads, bb) {
                        for grow in g.chunks_exact(n) {
                            bgrad.iter_mut().zip(grow).for_each(|(o, &q)| *o += q);
                        }
                    }
                }
                if let Some(gx) = grad_buf(nodes, grads, x) {
                    let mut dxhat = vec![0.0f64; n];
                    for (r, (grow, xrow)) in g.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate() {
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..n {
                            let d = grow[j].f64() * gv.map_or(1.0, |gg| gg[j].f64());
                            dxhat[j] = d;
                            m1 += d;
                            m2 += d * xrow[j].f64();
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        let rs = rstd[r].f64();
                        for j in 0..n {
                            gx[r * n + j] += T::of(rs * (dxhat[j] - m1 - xrow[j].f64() * m2));
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                if let Some(gx) = grad_buf(nodes, grads, x) {
                    for (r, (yrow, grow)) in y.chunks_exact(n).zip(g.chunks_exact(n)).enumerate() {
                        let s: f64 = yrow.iter().zip(grow).map(|(a, b)| a.f64() * b.f64()).sum();
                        for j in 0..n {
                            if yrow[j] != T::zero() {
                                gx[r * n + j] += T::of(yrow[j].f64() * (grow[j].f64() - s));
                            }
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let n = nodes[x.0].value.cols();
                let len = node.value.cols();
                if let Some(gx) = grad_buf(nodes, grads, x) {
                    for (r, grow) in g.chunks_exact(len).enumerate() {
                        for (o, &q) in gx[r * n + start..r * n + start + len].iter_mut().zip(grow) {
                            *o += q;
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let n = nodes[x.0].value.cols();
                if let Some(gx) = grad_buf(nodes, grads, x) {
                    for (o, &q) in gx[start * n..start * n + g.len()].iter_mut().zip(g) {
                        *o += q;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    if let Some(gp) = grad_buf(nodes, grads, &p) {
                        for (r, grow) in g.chunks_exact(n).enumerate() {
                            for (o, &q) in gp[r * w..(r + 1) * w].iter_mut().zip(&grow[off..off + w]) {
                                *o += q;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = grad_buf(nodes, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(o, &q)| *o += q);
                }
            }
            Op::MaxRows { x, argmax } => {
                let n = nodes[x.0].value.cols();
                if let Some(gx) = grad_buf(nodes, grads, x) {
                    for (j, &r) in argmax.iter().enumerate() {
                        gx[r * n + j] += g[j];
                    }
                }
            }
            Op::Sse { pred, target, row_mask } => {
                let n = nodes[pred.0].value.cols();
                let pv = nodes[pred.0].value.data();
                let two = T::of(2.0) * g[0];
                if let Some(gp) = grad_buf(nodes, grads, pred) {
                    for (r, ((orow, prow), trow)) in
                        gp.chunks_exact_mut(n).zip(pv.chunks_exact(n)).zip(target.chunks_exact(n)).enumerate()
                    {
                        if row_mask.as_ref().is_some_and(|mk| !mk[r]) {
                            continue;
                        }
                        for ((o, &p), &t) in orow.iter_mut().zip(prow).zip(trow) {
                            *o += two * (p - t);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = nodes[logits.0].value.cols();
                let scale = g[0] / T::of(labels.len() as f64);
                if let Some(gl) = grad_buf(nodes, grads, logits) {
                    for (r, &lab) in labels.iter().enumerate() {
                        for j in 0..n {
                            let target = if j == lab { T::one() } else { T::zero() };
                            gl[r * n + j] += scale * (probs[r * n + j] - target);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = grad_buf(nodes, grads, x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
        }
    }
}
