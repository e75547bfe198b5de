use std::rc::Rc;

use super::{ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    AddConst(Var),
    MulConst(Var, Rc<Vec<f64>>),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sigmoid(Var),
    Relu(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Permute3 {
        x: Var,
        perm: [usize; 3],
    },
    Sum(Var),
    SmoothedCe {
        logits: Var,
        targets: Vec<usize>,
        eps: f64,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Affine(..) => "affine",
            Op::AddConst(..) => "add_const",
            Op::MulConst(..) => "mul_const",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Conv2d { .. } => "conv2d",
            Op::Embedding { .. } => "embedding",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Reshape(..) => "reshape",
            Op::Permute3 { .. } => "permute3",
            Op::Sum(..) => "sum",
            Op::SmoothedCe { .. } => "smoothed_ce",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Nodes are appended in execution order, which is a valid
/// topological order for the reverse sweep.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(op: &'static str, a: &[usize], b: &[usize]) -> Result<T> {
    Err(TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        s => shape_err(op, s, &[]),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// a[m×k] · b[n×k]ᵀ
fn matmul_bt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// a[k×m]ᵀ · b[k×n]
fn matmul_at_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn conv2d_out_dim(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the per-op NaN/Inf check.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Copies a parameter into the graph. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(op, ta.shape(), tb.shape());
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg)
    }

    /// `x[T×d] + b[d]` with `b` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (_, d) = dims2(tx, "add_row")?;
        if tb.len() != d {
            return shape_err("add_row", tx.shape(), tb.shape());
        }
        let bias = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % d])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        self.push(t, Op::AddRow(x, b), rg)
    }

    /// `scale * x + shift` elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| scale * v + shift).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    /// Adds a constant tensor of identical shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != c.shape() {
            return shape_err("add_const", tx.shape(), c.shape());
        }
        let data = tx.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::AddConst(x), rg)
    }

    /// Multiplies elementwise by a constant (used for dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Rc<Vec<f64>>) -> Result<Var> {
        let tx = self.value(x);
        if tx.len() != c.len() {
            return shape_err("mul_const", tx.shape(), &[c.len()]);
        }
        let data = tx.data().iter().zip(c.iter()).map(|(a, b)| a * b).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::MulConst(x, c), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2(ta, "matmul")?;
        let (k2, n) = dims2(tb, "matmul")?;
        if k != k2 || ta.shape().len() != 2 || tb.shape().len() != 2 {
            return shape_err("matmul", ta.shape(), tb.shape());
        }
        let t = Tensor::new(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2(ta, "matmul_bt")?;
        let (n, k2) = dims2(tb, "matmul_bt")?;
        if k != k2 || ta.shape().len() != 2 || tb.shape().len() != 2 {
            return shape_err("matmul_bt", ta.shape(), tb.shape());
        }
        let t = Tensor::new(vec![m, n], matmul_bt_raw(ta.data(), tb.data(), m, k, n))?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::MatMulBt(a, b), rg)
    }

    /// `x·W + b` row-wise.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Softmax over the last axis of a 1-D or 2-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = dims2(tx, "softmax")?;
        if c == 0 {
            return Err(TensorError::Usage("softmax over an empty axis".into()));
        }
        if tx.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let mut out = tx.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Per-row normalisation followed by the `gamma`, `beta` affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (r, d) = dims2(tx, "layer_norm")?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != d || tb.len() != d {
            return shape_err("layer_norm", tx.shape(), tg.shape());
        }
        let mut xhat = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    /// 2-D convolution of `x[C_in×H×W]` with `kernel[C_out×C_in×k×k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let (ci, h, w) = match tx.shape() {
            [a, b, c] => (*a, *b, *c),
            s => return shape_err("conv2d", s, tk.shape()),
        };
        let (co, ci2, kh, kw) = match tk.shape() {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => return shape_err("conv2d", tx.shape(), s),
        };
        if ci != ci2 || kh != kw || kh % 2 == 0 {
            return shape_err("conv2d", tx.shape(), tk.shape());
        }
        if stride == 0 {
            return Err(TensorError::Usage("conv2d stride must be >= 1".into()));
        }
        let (Some(ho), Some(wo)) = (
            conv2d_out_dim(h, kh, stride, padding),
            conv2d_out_dim(w, kw, stride, padding),
        ) else {
            return shape_err("conv2d", tx.shape(), tk.shape());
        };
        if let Some(b) = bias {
            if self.value(b).len() != co {
                return shape_err("conv2d", tk.shape(), self.value(b).shape());
            }
        }
        let (xd, kd) = (tx.data(), tk.data());
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
            for c in 0..ci {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = kd[((o * ci + c) * kh + ki) * kw + kj];
                        for oh in 0..ho {
                            let ih = (oh * stride + ki) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = &xd[(c * h + ih as usize) * w..(c * h + ih as usize + 1) * w];
                            for ow in 0..wo {
                                let iw = (ow * stride + kj) as isize - padding as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                plane[oh * wo + ow] += wv * xrow[iw as usize];
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for o in 0..co {
                out[o * ho * wo..(o + 1) * ho * wo]
                    .iter_mut()
                    .for_each(|v| *v += bd[o]);
            }
        }
        let t = Tensor::new(vec![co, ho, wo], out)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        self.push(
            t,
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                padding,
            },
            rg,
        )
    }

    /// Gathers rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = dims2(tt, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Usage(format!(
                "embedding id {bad} outside table of {v} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(tt.row(i));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(&[table]);
        self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = dims2(tx, "slice_cols")?;
        if start + len > c {
            return shape_err("slice_cols", tx.shape(), &[start, len]);
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let t = Tensor::new(vec![r, len], data)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Usage("concat of zero tensors".into()));
        };
        let (r, _) = dims2(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2(self.value(p), "concat_cols")?;
            if pr != r {
                return shape_err("concat_cols", self.shape(first), self.shape(p));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![r, total], data)?;
        let rg = self.rg(parts);
        self.push(t, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if shape.iter().product::<usize>() != tx.len() {
            return shape_err("reshape", tx.shape(), shape);
        }
        let t = Tensor::new(shape.to_vec(), tx.data().to_vec())?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Axis permutation of a 3-D tensor: output axis `i` is input axis `perm[i]`.
    pub fn permute3(&mut self, x: Var, perm: [usize; 3]) -> Result<Var> {
        let tx = self.value(x);
        let s = match tx.shape() {
            [a, b, c] => [*a, *b, *c],
            s => return shape_err("permute3", s, &perm),
        };
        let mut sorted = perm;
        sorted.sort_unstable();
        if sorted != [0, 1, 2] {
            return shape_err("permute3", tx.shape(), &perm);
        }
        let os = [s[perm[0]], s[perm[1]], s[perm[2]]];
        let mut out = vec![0.0; tx.len()];
        let xd = tx.data();
        for (idx, o) in out.iter_mut().enumerate() {
            let oi = [idx / (os[1] * os[2]), (idx / os[2]) % os[1], idx % os[2]];
            let mut ii = [0usize; 3];
            for a in 0..3 {
                ii[perm[a]] = oi[a];
            }
            *o = xd[(ii[0] * s[1] + ii[1]) * s[2] + ii[2]];
        }
        let t = Tensor::new(os.to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Permute3 { x, perm }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(TensorError::Usage("mean of an empty tensor".into()));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Label-smoothed cross entropy summed over rows of `logits[T×V]`.
    ///
    /// Each row contributes `(1-eps)·NLL(target) + eps·mean_v NLL(v)`.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        eps: f64,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (r, v) = dims2(tl, "smoothed_ce")?;
        if targets.len() != r {
            return shape_err("smoothed_ce", tl.shape(), &[targets.len()]);
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::Usage(format!("target id {bad} >= vocab {v}")));
        }
        let mut probs = vec![0.0; r * v];
        let mut total = 0.0;
        for i in 0..r {
            let row = tl.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            let nll_t = lse - row[targets[i]];
            let mean_nll = lse - row.iter().sum::<f64>() / v as f64;
            total += (1.0 - eps) * nll_t + eps * mean_nll;
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(total),
            Op::SmoothedCe {
                logits,
                targets: targets.to_vec(),
                eps,
                probs,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) if n.requires_grad => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(
        &self,
        node: &Node,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| &nodes[v.0].value;

        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * vb[k];
                    }
                });
                acc(*b, &mut |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * va[k];
                    }
                });
            }
            Op::AddRow(x, b) => {
                acc(*x, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| {
                    let d = g.len();
                    for (k, v) in gy.iter().enumerate() {
                        g[k % d] += v;
                    }
                });
            }
            Op::Affine(x, s) => acc(*x, &mut |g| {
                g.iter_mut().zip(gy).for_each(|(a, y)| *a += s * y)
            }),
            Op::AddConst(x) => acc(*x, &mut |g| add_into(g, gy)),
            Op::MulConst(x, c) => acc(*x, &mut |g| {
                for k in 0..g.len() {
                    g[k] += gy[k] * c[k];
                }
            }),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = dims2(ta, "matmul")?;
                let (_, n) = dims2(tb, "matmul")?;
                acc(*a, &mut |g| add_into(g, &matmul_bt_raw(gy, tb.data(), m, n, k)));
                acc(*b, &mut |g| add_into(g, &matmul_at_raw(ta.data(), gy, m, k, n)));
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = dims2(ta, "matmul_bt")?;
                let (n, _) = dims2(tb, "matmul_bt")?;
                // dA = dY·B, dB = dYᵀ·A
                acc(*a, &mut |g| add_into(g, &matmul_raw(gy, tb.data(), m, n, k)));
                acc(*b, &mut |g| add_into(g, &matmul_at_raw(gy, ta.data(), m, n, k)));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (r, c) = dims2(y, "softmax")?;
                acc(*x, &mut |g| {
                    for i in 0..r {
                        let yr = &y.data()[i * c..(i + 1) * c];
                        let gr = &gy[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            g[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = val(*gamma).len();
                let r = inv_std.len();
                let gd = val(*gamma).data();
                acc(*gamma, &mut |g| {
                    for (k, v) in gy.iter().enumerate() {
                        g[k % d] += v * xhat[k];
                    }
                });
                acc(*beta, &mut |g| {
                    for (k, v) in gy.iter().enumerate() {
                        g[k % d] += v;
                    }
                });
                acc(*x, &mut |g| {
                    for i in 0..r {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gy[i * d + j] * gd[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[i * d + j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gy[i * d + j] * gd[j];
                            g[i * d + j] +=
                                inv_std[i] * (dh - mean_dh - xhat[i * d + j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |g| {
                    for k in 0..g.len() {
                        if xv[k] > 0.0 {
                            g[k] += gy[k];
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (tx, tk) = (val(*x), val(*kernel));
                let [ci, h, w] = [tx.shape()[0], tx.shape()[1], tx.shape()[2]];
                let [co, _, kh, kw] = [tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]];
                let [ho, wo] = [node.value.shape()[1], node.value.shape()[2]];
                let (s, p) = (*stride as isize, *padding as isize);
                let (xd, kd) = (tx.data(), tk.data());
                let visit = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for o in 0..co {
                        for c in 0..ci {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let kidx = ((o * ci + c) * kh + ki) * kw + kj;
                                    for oh in 0..ho {
                                        let ih = oh as isize * s + ki as isize - p;
                                        if ih < 0 || ih >= h as isize {
                                            continue;
                                        }
                                        for ow in 0..wo {
                                            let iw = ow as isize * s + kj as isize - p;
                                            if iw < 0 || iw >= w as isize {
                                                continue;
                                            }
                                            let xidx = (c * h + ih as usize) * w + iw as usize;
                                            f((o * ho + oh) * wo + ow, kidx, xidx);
                                        }
                                    }
                                }
                            }
                        }
                    }
                };
                acc(*x, &mut |g| visit(&mut |yi, ki, xi| g[xi] += gy[yi] * kd[ki]));
                acc(*kernel, &mut |g| visit(&mut |yi, ki, xi| g[ki] += gy[yi] * xd[xi]));
                if let Some(b) = bias {
                    acc(*b, &mut |g| {
                        for o in 0..co {
                            g[o] += gy[o * ho * wo..(o + 1) * ho * wo].iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                let d = val(*table).shape()[1];
                acc(*table, &mut |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut g[id * d..(id + 1) * d], &gy[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).shape()[1];
                let (r, len) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*x, &mut |g| {
                    for i in 0..r {
                        add_into(
                            &mut g[i * c + start..i * c + start + len],
                            &gy[i * len..(i + 1) * len],
                        );
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let r = node.value.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).shape()[1];
                    acc(p, &mut |g| {
                        for i in 0..r {
                            add_into(
                                &mut g[i * pc..(i + 1) * pc],
                                &gy[i * total + offset..i * total + offset + pc],
                            );
                        }
                    });
                    offset += pc;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gy)),
            Op::Permute3 { x, perm } => {
                let s = val(*x).shape();
                let s = [s[0], s[1], s[2]];
                let os = node.value.shape();
                acc(*x, &mut |g| {
                    for (idx, v) in gy.iter().enumerate() {
                        let oi = [idx / (os[1] * os[2]), (idx / os[2]) % os[1], idx % os[2]];
                        let mut ii = [0usize; 3];
                        for a in 0..3 {
                            ii[perm[a]] = oi[a];
                        }
                        g[(ii[0] * s[1] + ii[1]) * s[2] + ii[2]] += v;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|a| *a += gy[0])),
            Op::SmoothedCe {
                logits,
                targets,
                eps,
                probs,
            } => {
                let v = val(*logits).shape()[1];
                let u = eps / v as f64;
                acc(*logits, &mut |g| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let q = if j == t { 1.0 - eps + u } else { u };
                            g[i * v + j] += gy[0] * (probs[i * v + j] - q);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to any node; zeros when the loss does not depend on it.
    pub fn wrt(&self, g: &Graph, v: Var) -> Tensor {
        let shape = g.shape(v).to_vec();
        match &self.grads[v.0] {
            Some(d) => Tensor::new(shape, d.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// `(parameter, gradient)` for every trainable parameter leaf that was reached.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_deref().map(|g| (id, g)))
    }

    pub fn has_non_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .any(|g| g.iter().any(|v| !v.is_finite()))
    }
}

#[cfg(test)]
mod tests;
