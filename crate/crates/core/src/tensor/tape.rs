use std::ops::Range;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddN(Vec<Var>),
    AddRowVector(Var, Var),
    AddScalar(Var, Var),
    ScaleConst(Var, S),
    MulScalar(Var, Var),
    RowScale(Var, Var),
    Tanh(Var),
    Relu(Var),
    Sum(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Pick(Var, usize),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Row(Var, usize),
    Gather(Var, Vec<usize>),
    BroadcastRows(Var),
    Reshape(Var),
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    SegmentMax {
        input: Var,
        // flat source index for every output element; `None` for empty segments
        argmax: Vec<Option<usize>>,
    },
    MaskMul(Var, Vec<S>),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Linear record of executed operations (a Wengert list).
///
/// Values are computed eagerly; [`Tape::backward`] replays the record in
/// reverse. Nodes are appended in execution order, so index order is a valid
/// topological order.
pub struct Tape<S = f64> {
    nodes: Vec<Node<S>>,
}

/// Gradients of a scalar loss with respect to every differentiable leaf.
pub struct Gradients<S = f64> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Raw gradient, `None` when the variable is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with the variable's shape; zeros when unreachable.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn check_same(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, len: usize, f: impl FnOnce(&mut [S])) {
    let g = slot.get_or_insert_with(|| vec![S::zero(); len]);
    f(g);
}

fn softmax_slice<S: Scalar>(x: &[S]) -> Vec<S> {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`; `Var`s past that
    /// point become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = ad[i * k + p];
                if x == S::zero() {
                    continue;
                }
                let brow = &bd[p * m..(p + 1) * m];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), rg))
    }

    /// `M · v` for a matrix and a vector.
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let len = self.value(v).numel();
        let col = self.reshape(v, vec![len, 1])?;
        let out = self.matmul(m, col)?;
        let rows = self.value(out).rows();
        self.reshape(out, vec![rows])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::dim("transpose", format!("{:?}", av.shape())));
        }
        let (n, m) = (av.shape()[0], av.shape()[1]);
        let d = av.data();
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = d[i * m + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Transpose(a), rg))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same(op, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Sum of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("add_n"))?;
        let mut acc = self.value(first).clone();
        for &x in &xs[1..] {
            let xv = self.value(x);
            check_same("add_n", &acc, xv)?;
            for (a, &b) in acc.data_mut().iter_mut().zip(xv.data()) {
                *a += b;
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(acc, Op::AddN(xs.to_vec()), rg))
    }

    /// Adds vector `b` to every row of matrix `a`.
    pub fn add_row_vector(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let cols = av.cols();
        if av.rank() != 2 || bv.numel() != cols {
            return Err(Error::dim(
                "add_row_vector",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut t = av.clone();
        let bd = bv.data();
        for row in t.data_mut().chunks_mut(cols) {
            for (x, &y) in row.iter_mut().zip(bd) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::AddRowVector(a, b), rg))
    }

    /// Adds a one-element tensor to every element of `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Error::dim(
                "add_scalar",
                format!("scalar operand has shape {:?}", sv.shape()),
            ));
        }
        let c = sv.item();
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x += c);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(t, Op::AddScalar(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x *= c);
        let rg = self.rg(a);
        self.push(t, Op::ScaleConst(a, c), rg)
    }

    /// Multiplies every element of `a` by a one-element tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Error::dim(
                "mul_scalar",
                format!("scalar operand has shape {:?}", sv.shape()),
            ));
        }
        let c = sv.item();
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x *= c);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(t, Op::MulScalar(a, s), rg))
    }

    /// Scales row `i` of matrix `a` by `w[i]`.
    pub fn row_scale(&mut self, a: Var, w: Var) -> Result<Var> {
        let (av, wv) = (self.value(a), self.value(w));
        if av.rank() != 2 || wv.numel() != av.rows() {
            return Err(Error::dim("row_scale", format!("{:?} by {:?}", av.shape(), wv.shape())));
        }
        let cols = av.cols();
        let mut t = av.clone();
        for (row, &c) in t.data_mut().chunks_mut(cols).zip(wv.data()) {
            row.iter_mut().for_each(|x| *x *= c);
        }
        let rg = self.rg(a) || self.rg(w);
        Ok(self.push(t, Op::RowScale(a, w), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x = x.tanh());
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x = x.max(S::zero()));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: S = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Max-subtracted softmax over a vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 1 {
            return Err(Error::dim("softmax", format!("expects a vector, got {:?}", av.shape())));
        }
        let t = Tensor::new(av.shape().to_vec(), softmax_slice(av.data()))?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 1 {
            return Err(Error::dim(
                "log_softmax",
                format!("expects a vector, got {:?}", av.shape()),
            ));
        }
        let x = av.data();
        let max = x.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
        let data = x.iter().map(|&v| v - lse).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::LogSoftmax(a), rg))
    }

    /// Single element of a vector, as a one-element tensor.
    pub fn pick(&mut self, a: Var, i: usize) -> Result<Var> {
        let av = self.value(a);
        if i >= av.numel() {
            return Err(Error::index("pick", format!("{i} >= {}", av.numel())));
        }
        let t = Tensor::scalar(av.data()[i]);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Pick(a, i), rg))
    }

    /// `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let ls = self.log_softmax(logits)?;
        let p = self.pick(ls, target)?;
        Ok(self.scale(p, -S::one()))
    }

    /// Concatenation along the last axis. Vectors concatenate end to end;
    /// matrices with equal row counts concatenate column blocks.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("concat"))?;
        let rank = self.value(first).rank();
        let rows = if rank == 1 { 1 } else { self.value(first).rows() };
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let v = self.value(x);
            if v.rank() != rank || (rank == 2 && v.rows() != rows) || rank > 2 {
                return Err(Error::dim(
                    "concat",
                    format!("{:?} vs {:?}", self.value(first).shape(), v.shape()),
                ));
            }
            widths.push(if rank == 1 { v.numel() } else { v.cols() });
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(xs.to_vec()), rg))
    }

    /// Stacks equally sized vectors into the rows of a matrix.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("stack"))?;
        let len = self.value(first).numel();
        let mut data = Vec::with_capacity(len * xs.len());
        for &x in xs {
            let v = self.value(x);
            if v.numel() != len {
                return Err(Error::dim("stack", format!("{len} vs {}", v.numel())));
            }
            data.extend_from_slice(v.data());
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(vec![xs.len(), len], data)?, Op::Stack(xs.to_vec()), rg))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 || i >= av.rows() {
            return Err(Error::index("row", format!("row {i} of {:?}", av.shape())));
        }
        let t = Tensor::new(vec![av.cols()], av.row(i).to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Row(a, i), rg))
    }

    /// Embedding lookup: rows `ids` of `table`, stacked.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::dim("gather", format!("table shape {:?}", tv.shape())));
        }
        if ids.is_empty() {
            return Err(Error::Empty("gather"));
        }
        let cols = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= tv.rows() {
                return Err(Error::index("gather", format!("id {id} >= {} rows", tv.rows())));
            }
            data.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), cols], data)?,
            Op::Gather(table, ids.to_vec()),
            rg,
        ))
    }

    /// Repeats a vector as `n` identical rows.
    pub fn broadcast_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        let vv = self.value(v);
        if n == 0 {
            return Err(Error::Empty("broadcast_rows"));
        }
        let len = vv.numel();
        let data = vv.data().repeat(n);
        let rg = self.rg(v);
        Ok(self.push(Tensor::new(vec![n, len], data)?, Op::BroadcastRows(v), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// 1-D convolution over the rows of `input` (`n × d_in`) with a
    /// `k × d_in × d_out` kernel, odd `k`, and symmetric zero padding so the
    /// output keeps `n` rows.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (xv, kv, bv) = (self.value(input), self.value(kernel), self.value(bias));
        if xv.rank() != 2 || kv.rank() != 3 {
            return Err(Error::dim(
                "conv1d",
                format!("input {:?}, kernel {:?}", xv.shape(), kv.shape()),
            ));
        }
        let (n, d_in) = (xv.shape()[0], xv.shape()[1]);
        let (k, kd_in, d_out) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
        if kd_in != d_in {
            return Err(Error::dim(
                "conv1d",
                format!("kernel expects {kd_in} input features, input has {d_in}"),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::dim("conv1d", format!("window {k} must be odd")));
        }
        if bv.numel() != d_out {
            return Err(Error::dim(
                "conv1d",
                format!("bias {:?} vs {d_out} outputs", bv.shape()),
            ));
        }
        let pad = (k - 1) / 2;
        let (x, w, b) = (xv.data(), kv.data(), bv.data());
        let mut out = vec![S::zero(); n * d_out];
        for t in 0..n {
            let orow = &mut out[t * d_out..(t + 1) * d_out];
            orow.copy_from_slice(b);
            for j in 0..k {
                let src = t + j;
                if src < pad || src - pad >= n {
                    continue;
                }
                let xrow = &x[(src - pad) * d_in..(src - pad + 1) * d_in];
                for (i, &xi) in xrow.iter().enumerate() {
                    if xi == S::zero() {
                        continue;
                    }
                    let wrow = &w[(j * d_in + i) * d_out..(j * d_in + i + 1) * d_out];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xi * wv;
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            Tensor::new(vec![n, d_out], out)?,
            Op::Conv1d { input, kernel, bias },
            rg,
        ))
    }

    /// Column-wise maxima of `input` (`n × h`) over each row range, concatenated
    /// into a vector of `segments.len() · h`. An empty range yields zeros.
    /// Ties go to the lowest row index.
    pub fn segment_max(&mut self, input: Var, segments: &[Range<usize>]) -> Result<Var> {
        let xv = self.value(input);
        if xv.rank() != 2 {
            return Err(Error::dim("segment_max", format!("input {:?}", xv.shape())));
        }
        let (n, h) = (xv.shape()[0], xv.shape()[1]);
        if segments.is_empty() {
            return Err(Error::Empty("segment_max"));
        }
        let x = xv.data();
        let mut out = Vec::with_capacity(segments.len() * h);
        let mut argmax = Vec::with_capacity(segments.len() * h);
        for seg in segments {
            if seg.end > n || seg.start > seg.end {
                return Err(Error::index("segment_max", format!("segment {seg:?} for {n} rows")));
            }
            for c in 0..h {
                let mut best: Option<usize> = None;
                for r in seg.clone() {
                    let idx = r * h + c;
                    if best.is_none_or(|b| x[idx] > x[b]) {
                        best = Some(idx);
                    }
                }
                out.push(best.map_or(S::zero(), |b| x[b]));
                argmax.push(best);
            }
        }
        let rg = self.rg(input);
        let len = out.len();
        Ok(self.push(Tensor::new(vec![len], out)?, Op::SegmentMax { input, argmax }, rg))
    }

    /// Elementwise product with a constant mask (used for dropout).
    pub fn mask_mul(&mut self, a: Var, mask: Vec<S>) -> Result<Var> {
        let av = self.value(a);
        if av.numel() != mask.len() {
            return Err(Error::dim(
                "mask_mul",
                format!("{:?} vs mask of {}", av.shape(), mask.len()),
            ));
        }
        let mut t = av.clone();
        for (x, &m) in t.data_mut().iter_mut().zip(&mask) {
            *x *= m;
        }
        let rg = self.rg(a);
        Ok(self.push(t, Op::MaskMul(a, mask), rg))
    }

    /// Reverse pass from a one-element loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut out: Vec<Option<Vec<S>>> = Vec::with_capacity(self.nodes.len());
        let mut shapes = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let keep = matches!(node.op, Op::Leaf) && node.requires_grad;
            out.push(if keep && i < n { grads[i].take() } else { None });
            shapes.push(node.value.shape().to_vec());
        }
        Ok(Gradients { grads: out, shapes })
    }

    fn backprop_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let len = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    let bd = bv.data();
                    accumulate(&mut grads[a.0], n * k, |ga| {
                        for i in 0..n {
                            let grow = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let brow = &bd[p * m..(p + 1) * m];
                                let mut s = S::zero();
                                for (&x, &y) in grow.iter().zip(brow) {
                                    s += x * y;
                                }
                                ga[i * k + p] += s;
                            }
                        }
                    });
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    let ad = av.data();
                    accumulate(&mut grads[b.0], k * m, |gb| {
                        for i in 0..n {
                            let grow = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let x = ad[i * k + p];
                                if x == S::zero() {
                                    continue;
                                }
                                for (o, &y) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                    *o += x * y;
                                }
                            }
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                if self.rg(*a) {
                    let (n, m) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                    accumulate(&mut grads[a.0], n * m, |ga| {
                        for i in 0..n {
                            for j in 0..m {
                                ga[i * m + j] += g[j * n + i];
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        accumulate(&mut grads[v.0], g.len(), |gv| {
                            gv.iter_mut().zip(g).for_each(|(o, &x)| *o += x)
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.len(), |gv| {
                        gv.iter_mut().zip(g).for_each(|(o, &x)| *o += x)
                    });
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], g.len(), |gv| {
                        gv.iter_mut().zip(g).for_each(|(o, &x)| *o -= x)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.len(), |gv| {
                        for ((o, &x), &y) in gv.iter_mut().zip(g).zip(bd) {
                            *o += x * y;
                        }
                    });
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], g.len(), |gv| {
                        for ((o, &x), &y) in gv.iter_mut().zip(g).zip(ad) {
                            *o += x * y;
                        }
                    });
                }
            }
            Op::AddN(xs) => {
                for v in xs {
                    if self.rg(*v) {
                        accumulate(&mut grads[v.0], g.len(), |gv| {
                            gv.iter_mut().zip(g).for_each(|(o, &x)| *o += x)
                        });
                    }
                }
            }
            Op::AddRowVector(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.len(), |gv| {
                        gv.iter_mut().zip(g).for_each(|(o, &x)| *o += x)
                    });
                }
                if self.rg(*b) {
                    let cols = len(*b);
                    accumulate(&mut grads[b.0], cols, |gb| {
                        for row in g.chunks(cols) {
                            gb.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
                        }
                    });
                }
            }
            Op::AddScalar(a, s) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.len(), |gv| {
                        gv.iter_mut().zip(g).for_each(|(o, &x)| *o += x)
                    });
                }
                if self.rg(*s) {
                    let total: S = g.iter().copied().sum();
                    accumulate(&mut grads[s.0], 1, |gs| gs[0] += total);
                }
            }
            Op::ScaleConst(a, c) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.len(), |gv| {
                        gv.iter_mut().zip(g).for_each(|(o, &x)| *o += x * *c)
                    });
                }
            }
            Op::MulScalar(a, s) => {
                let c = self.value(*s).item();
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.len(), |gv| {
                        gv.iter_mut().zip(g).for_each(|(o, &x)| *o += x * c)
                    });
                }
                if self.rg(*s) {
                    let ad = self.value(*a).data();
                    let total: S = g.iter().zip(ad).map(|(&x, &y)| x * y).sum();
                    accumulate(&mut grads[s.0], 1, |gs| gs[0] += total);
                }
            }
            Op::RowScale(a, w) => {
                let av = self.value(*a);
                let cols = av.cols();
                let wd = self.value(*w).data();
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        for ((orow, grow), &c) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(wd) {
                            orow.iter_mut().zip(grow).for_each(|(o, &x)| *o += x * c);
                        }
                    });
                }
                if self.rg(*w) {
                    let ad = av.data();
                    accumulate(&mut grads[w.0], wd.len(), |gw| {
                        for (i, o) in gw.iter_mut().enumerate() {
                            let s: S = g[i * cols..(i + 1) * cols]
                                .iter()
                                .zip(&ad[i * cols..(i + 1) * cols])
                                .map(|(&x, &y)| x * y)
                                .sum();
                            *o += s;
                        }
                    });
                }
            }
            Op::Tanh(a) => {
                if self.rg(*a) {
                    let y = node.value.data();
                    accumulate(&mut grads[a.0], g.len(), |gv| {
                        for ((o, &x), &t) in gv.iter_mut().zip(g).zip(y) {
                            *o += x * (S::one() - t * t);
                        }
                    });
                }
            }
            Op::Relu(a) => {
                if self.rg(*a) {
                    let xin = self.value(*a).data();
                    accumulate(&mut grads[a.0], g.len(), |gv| {
                        for ((o, &x), &v) in gv.iter_mut().zip(g).zip(xin) {
                            if v > S::zero() {
                                *o += x;
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    let n = len(*a);
                    accumulate(&mut grads[a.0], n, |gv| gv.iter_mut().for_each(|o| *o += g[0]));
                }
            }
            Op::Softmax(a) => {
                if self.rg(*a) {
                    let y = node.value.data();
                    let gy: S = g.iter().zip(y).map(|(&x, &p)| x * p).sum();
                    accumulate(&mut grads[a.0], g.len(), |gv| {
                        for ((o, &x), &p) in gv.iter_mut().zip(g).zip(y) {
                            *o += p * (x - gy);
                        }
                    });
                }
            }
            Op::LogSoftmax(a) => {
                if self.rg(*a) {
                    let y = node.value.data();
                    let total: S = g.iter().copied().sum();
                    accumulate(&mut grads[a.0], g.len(), |gv| {
                        for ((o, &x), &l) in gv.iter_mut().zip(g).zip(y) {
                            *o += x - l.exp() * total;
                        }
                    });
                }
            }
            Op::Pick(a, i) => {
                if self.rg(*a) {
                    let n = len(*a);
                    accumulate(&mut grads[a.0], n, |gv| gv[*i] += g[0]);
                }
            }
            Op::Concat(xs) => {
                let rank = node.value.rank();
                let rows = if rank == 1 { 1 } else { node.value.rows() };
                let total = node.value.numel() / rows;
                let mut offset = 0;
                for v in xs {
                    let w = len(*v) / rows;
                    if self.rg(*v) {
                        accumulate(&mut grads[v.0], w * rows, |gv| {
                            for r in 0..rows {
                                for c in 0..w {
                                    gv[r * w + c] += g[r * total + offset + c];
                                }
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::Stack(xs) => {
                for (r, v) in xs.iter().enumerate() {
                    if self.rg(*v) {
                        let w = len(*v);
                        accumulate(&mut grads[v.0], w, |gv| {
                            gv.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(o, &x)| *o += x)
                        });
                    }
                }
            }
            Op::Row(a, i) => {
                if self.rg(*a) {
                    let n = len(*a);
                    let w = g.len();
                    accumulate(&mut grads[a.0], n, |gv| {
                        gv[i * w..(i + 1) * w].iter_mut().zip(g).for_each(|(o, &x)| *o += x)
                    });
                }
            }
            Op::Gather(t, ids) => {
                if self.rg(*t) {
                    let n = len(*t);
                    let cols = self.value(*t).cols();
                    accumulate(&mut grads[t.0], n, |gt| {
                        for (r, &id) in ids.iter().enumerate() {
                            gt[id * cols..(id + 1) * cols]
                                .iter_mut()
                                .zip(&g[r * cols..(r + 1) * cols])
                                .for_each(|(o, &x)| *o += x);
                        }
                    });
                }
            }
            Op::BroadcastRows(v) => {
                if self.rg(*v) {
                    let w = len(*v);
                    accumulate(&mut grads[v.0], w, |gv| {
                        for row in g.chunks(w) {
                            gv.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
                        }
                    });
                }
            }
            Op::Reshape(a) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.len(), |gv| {
                        gv.iter_mut().zip(g).for_each(|(o, &x)| *o += x)
                    });
                }
            }
            Op::Conv1d { input, kernel, bias } => {
                let (xv, kv) = (self.value(*input), self.value(*kernel));
                let (n, d_in) = (xv.shape()[0], xv.shape()[1]);
                let (k, d_out) = (kv.shape()[0], kv.shape()[2]);
                let pad = (k - 1) / 2;
                let (x, w) = (xv.data(), kv.data());
                if self.rg(*bias) {
                    accumulate(&mut grads[bias.0], d_out, |gb| {
                        for row in g.chunks(d_out) {
                            gb.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
                        }
                    });
                }
                if self.rg(*kernel) {
                    accumulate(&mut grads[kernel.0], k * d_in * d_out, |gk| {
                        for t in 0..n {
                            let grow = &g[t * d_out..(t + 1) * d_out];
                            for j in 0..k {
                                let src = t + j;
                                if src < pad || src - pad >= n {
                                    continue;
                                }
                                let xrow = &x[(src - pad) * d_in..(src - pad + 1) * d_in];
                                for (i, &xi) in xrow.iter().enumerate() {
                                    if xi == S::zero() {
                                        continue;
                                    }
                                    let base = (j * d_in + i) * d_out;
                                    for (o, &gy) in gk[base..base + d_out].iter_mut().zip(grow) {
                                        *o += xi * gy;
                                    }
                                }
                            }
                        }
                    });
                }
                if self.rg(*input) {
                    accumulate(&mut grads[input.0], n * d_in, |gx| {
                        for t in 0..n {
                            let grow = &g[t * d_out..(t + 1) * d_out];
                            for j in 0..k {
                                let src = t + j;
                                if src < pad || src - pad >= n {
                                    continue;
                                }
                                let r = src - pad;
                                for i in 0..d_in {
                                    let base = (j * d_in + i) * d_out;
                                    let s: S = w[base..base + d_out].iter().zip(grow).map(|(&a, &b)| a * b).sum();
                                    gx[r * d_in + i] += s;
                                }
                            }
                        }
                    });
                }
            }
            Op::SegmentMax { input, argmax } => {
                if self.rg(*input) {
                    let n = len(*input);
                    accumulate(&mut grads[input.0], n, |gx| {
                        for (&src, &x) in argmax.iter().zip(g) {
                            if let Some(s) = src {
                                gx[s] += x;
                            }
                        }
                    });
                }
            }
            Op::MaskMul(a, mask) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.len(), |gv| {
                        for ((o, &x), &m) in gv.iter_mut().zip(g).zip(mask) {
                            *o += x * m;
                        }
                    });
                }
            }
        }
    }
}
