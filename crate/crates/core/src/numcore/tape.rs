//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every primitive records its inputs and output on the tape; `backward`
//! replays the records in reverse, visiting each node exactly once. The op
//! set is deliberately small: matrix products, elementwise maps, the two
//! normalisations, and the gather/scatter pair that message passing needs.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use super::NumError;

/// Gradients keyed by parameter name. BTreeMap keeps merge and update order
/// fixed, which the determinism contract relies on.
pub type GradMap = BTreeMap<String, Tensor>;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// y = W x + b for rank-1 x.
    Affine { w: Var, b: Var, x: Var },
    /// C = A Bᵀ with A [m×k], B [n×k].
    MatMulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// Adds a length-n bias to every row of an [m×n] tensor.
    AddRowBias { a: Var, bias: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    /// Per-row layer normalisation with gain/shift; aux caches (mean, inv_std).
    LayerNormRows { a: Var, gain: Var, shift: Var, aux: Vec<(f64, f64)> },
    /// Per-row rescaling to the learned norm `gain`; aux caches row norms.
    ScaleNormRows { a: Var, gain: Var, eps: f64, aux: Vec<f64> },
    ConcatCols { parts: Vec<Var> },
    /// out[r] = a[idx[r]].
    GatherRows { a: Var, idx: Vec<usize> },
    /// out[e,h] = scale · dot(a[e] slice h, b[e] slice h).
    RowDotHeads { a: Var, b: Var, heads: usize, scale: f64 },
    /// out[dst[e]] slice h += w[e,h] · v[e] slice h.
    ScatterWeightedRows { values: Var, weights: Var, dst: Vec<usize> },
    /// Column means: [m×n] → [n].
    MeanRows { a: Var },
    /// Σ x² over all entries → scalar.
    SumSquares { a: Var },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    /// Index into `params` when this node is a named parameter leaf.
    param: Option<usize>,
}

/// Records primitive applications for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// A named, gradient-tracked leaf. Names must be unique per tape.
    pub fn param(&mut self, name: &str, t: Tensor) -> Result<Var, NumError> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(NumError::Contract(format!("duplicate parameter name {name:?}")));
        }
        let v = self.push(Op::Leaf, t, true);
        self.nodes[v.0].param = Some(self.params.len());
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    /// y = W x + b, the rank-1 affine map.
    pub fn affine(&mut self, w: Var, b: Var, x: Var) -> Result<Var, NumError> {
        let (wt, bt, xt) = (self.value(w), self.value(b), self.value(x));
        if wt.rank() != 2 || xt.rank() != 1 || bt.rank() != 1 {
            return Err(NumError::Dim(format!(
                "affine expects matrix, vector, vector; got ranks {}, {}, {}",
                wt.rank(),
                bt.rank(),
                xt.rank()
            )));
        }
        let (m, n) = (wt.shape()[0], wt.shape()[1]);
        if xt.numel() != n || bt.numel() != m {
            return Err(NumError::Dim(format!(
                "affine shape mismatch: W [{m}×{n}], b [{}], x [{}]",
                bt.numel(),
                xt.numel()
            )));
        }
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = wt.row(i);
            let mut acc = 0.0;
            for j in 0..n {
                acc += row[j] * xt.data()[j];
            }
            out[i] = acc + bt.data()[i];
        }
        let grad = self.rg(w) || self.rg(b) || self.rg(x);
        Ok(self.push(Op::Affine { w, b, x }, Tensor::from_op(vec![m], out), grad))
    }

    /// C = A Bᵀ. Keeps weight matrices in their natural [out×in] layout.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rank() != 2 || bt.rank() != 2 || at.shape()[1] != bt.shape()[1] {
            return Err(NumError::Dim(format!(
                "matmul_nt shape mismatch: {:?} · {:?}ᵀ",
                at.shape(),
                bt.shape()
            )));
        }
        let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[0]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = at.row(i);
            for j in 0..n {
                let brow = bt.row(j);
                let mut acc = 0.0;
                for c in 0..k {
                    acc += arow[c] * brow[c];
                }
                out[i * n + j] = acc;
            }
        }
        let grad = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMulNT { a, b }, Tensor::from_op(vec![m, n], out), grad))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var) -> Op,
        name: &str,
    ) -> Result<Var, NumError> {
        let (at, bt) = (self.value(a), self.value(b));
        if !at.same_shape(bt) {
            return Err(NumError::Dim(format!(
                "{name} shape mismatch: {:?} vs {:?}",
                at.shape(),
                bt.shape()
            )));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::from_op(at.shape().to_vec(), data);
        let grad = self.rg(a) || self.rg(b);
        Ok(self.push(make(a, b), value, grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.elementwise(a, b, |x, y| x + y, |a, b| Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.elementwise(a, b, |x, y| x - y, |a, b| Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.elementwise(a, b, |x, y| x * y, |a, b| Op::Mul { a, b }, "mul")
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var, NumError> {
        let (at, bt) = (self.value(a), self.value(bias));
        if at.rank() != 2 || bt.rank() != 1 || bt.numel() != at.shape()[1] {
            return Err(NumError::Dim(format!(
                "add_row_bias shape mismatch: {:?} + {:?}",
                at.shape(),
                bt.shape()
            )));
        }
        let (m, n) = (at.shape()[0], at.shape()[1]);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = at.row(r);
            for c in 0..n {
                out.push(row[c] + bt.data()[c]);
            }
        }
        let grad = self.rg(a) || self.rg(bias);
        Ok(self.push(Op::AddRowBias { a, bias }, Tensor::from_op(vec![m, n], out), grad))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let at = self.value(a);
        let data = at.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Tensor::from_op(at.shape().to_vec(), data);
        let grad = self.rg(a);
        self.push(Op::Relu { a }, value, grad)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let at = self.value(a);
        let data = at
            .data()
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let value = Tensor::from_op(at.shape().to_vec(), data);
        let grad = self.rg(a);
        self.push(Op::Sigmoid { a }, value, grad)
    }

    /// Per-row layer normalisation: gain ⊙ (x − mean) / sqrt(var + eps) + shift.
    /// Rows must have at least two entries for the variance to be meaningful.
    pub fn layer_norm(&mut self, a: Var, gain: Var, shift: Var, eps: f64) -> Result<Var, NumError> {
        let (at, gt, st) = (self.value(a), self.value(gain), self.value(shift));
        let n = at.cols();
        if n < 2 {
            return Err(NumError::Dim(format!("layer_norm needs rows of length ≥ 2, got {n}")));
        }
        if gt.numel() != n || st.numel() != n {
            return Err(NumError::Dim(format!(
                "layer_norm gain/shift length {} / {} does not match row width {n}",
                gt.numel(),
                st.numel()
            )));
        }
        let m = at.rows();
        let mut out = Vec::with_capacity(m * n);
        let mut aux = Vec::with_capacity(m);
        for r in 0..m {
            let row = at.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            aux.push((mean, inv_std));
            for c in 0..n {
                out.push((row[c] - mean) * inv_std * gt.data()[c] + st.data()[c]);
            }
        }
        let value = Tensor::from_op(at.shape().to_vec(), out);
        let grad = self.rg(a) || self.rg(gain) || self.rg(shift);
        Ok(self.push(Op::LayerNormRows { a, gain, shift, aux }, value, grad))
    }

    /// Per-row rescaling: gain · x / max(‖x‖₂, eps). `gain` is a scalar tensor.
    pub fn scale_norm(&mut self, a: Var, gain: Var, eps: f64) -> Result<Var, NumError> {
        let (at, gt) = (self.value(a), self.value(gain));
        if !gt.is_scalar() {
            return Err(NumError::Dim(format!("scale_norm gain must be scalar, got {:?}", gt.shape())));
        }
        let g = gt.data()[0];
        let (m, n) = (at.rows(), at.cols());
        let mut out = Vec::with_capacity(m * n);
        let mut aux = Vec::with_capacity(m);
        for r in 0..m {
            let row = at.row(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            aux.push(norm);
            let denom = norm.max(eps);
            for c in 0..n {
                out.push(g * row[c] / denom);
            }
        }
        let value = Tensor::from_op(at.shape().to_vec(), out);
        let grad = self.rg(a) || self.rg(gain);
        Ok(self.push(Op::ScaleNormRows { a, gain, eps, aux }, value, grad))
    }

    /// Horizontal concatenation of rank-2 tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        if parts.is_empty() {
            return Err(NumError::Contract("concat_cols needs at least one input".into()));
        }
        let m = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != m {
                return Err(NumError::Dim("concat_cols row count mismatch".into()));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let grad = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::ConcatCols { parts: parts.to_vec() },
            Tensor::from_op(vec![m, total], out),
            grad,
        ))
    }

    /// Row gather: out[r] = a[idx[r]]. Indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumError> {
        let at = self.value(a);
        if at.rank() != 2 {
            return Err(NumError::Dim("gather_rows expects a rank-2 input".into()));
        }
        let n = at.shape()[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(NumError::Contract(format!("gather index {bad} out of {n} rows")));
        }
        let c = at.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(at.row(i));
        }
        let grad = self.rg(a);
        Ok(self.push(
            Op::GatherRows { a, idx: idx.to_vec() },
            Tensor::from_op(vec![idx.len(), c], out),
            grad,
        ))
    }

    /// Per-row, per-head scaled dot product: out[e,h] = scale · ⟨a[e], b[e]⟩
    /// restricted to head slice h. Row width must be divisible by `heads`.
    pub fn row_dot_heads(&mut self, a: Var, b: Var, heads: usize, scale: f64) -> Result<Var, NumError> {
        let (at, bt) = (self.value(a), self.value(b));
        if !at.same_shape(bt) || at.rank() != 2 {
            return Err(NumError::Dim("row_dot_heads expects equal-shaped rank-2 inputs".into()));
        }
        let (m, d) = (at.shape()[0], at.shape()[1]);
        if heads == 0 || d % heads != 0 {
            return Err(NumError::Dim(format!("head count {heads} does not divide width {d}")));
        }
        let dh = d / heads;
        let mut out = Vec::with_capacity(m * heads);
        for r in 0..m {
            let (ar, br) = (at.row(r), bt.row(r));
            for h in 0..heads {
                let mut acc = 0.0;
                for c in h * dh..(h + 1) * dh {
                    acc += ar[c] * br[c];
                }
                out.push(acc * scale);
            }
        }
        let grad = self.rg(a) || self.rg(b);
        Ok(self.push(
            Op::RowDotHeads { a, b, heads, scale },
            Tensor::from_op(vec![m, heads], out),
            grad,
        ))
    }

    /// Weighted scatter-add of value rows into `out_rows` destination rows,
    /// one weight per head slice: out[dst[e]]ₕ += w[e,h] · v[e]ₕ.
    pub fn scatter_weighted_rows(
        &mut self,
        values: Var,
        weights: Var,
        dst: &[usize],
        out_rows: usize,
    ) -> Result<Var, NumError> {
        let (vt, wt) = (self.value(values), self.value(weights));
        if vt.rank() != 2 || wt.rank() != 2 || vt.shape()[0] != wt.shape()[0] {
            return Err(NumError::Dim("scatter_weighted_rows expects aligned rank-2 inputs".into()));
        }
        let (e, d) = (vt.shape()[0], vt.shape()[1]);
        let heads = wt.shape()[1];
        if heads == 0 || d % heads != 0 {
            return Err(NumError::Dim(format!("head count {heads} does not divide width {d}")));
        }
        if dst.len() != e {
            return Err(NumError::Contract("destination list length mismatch".into()));
        }
        if let Some(&bad) = dst.iter().find(|&&i| i >= out_rows) {
            return Err(NumError::Contract(format!("scatter index {bad} out of {out_rows} rows")));
        }
        let dh = d / heads;
        let mut out = vec![0.0; out_rows * d];
        for r in 0..e {
            let vrow = vt.row(r);
            let wrow = wt.row(r);
            let base = dst[r] * d;
            for h in 0..heads {
                let w = wrow[h];
                for c in h * dh..(h + 1) * dh {
                    out[base + c] += w * vrow[c];
                }
            }
        }
        let grad = self.rg(values) || self.rg(weights);
        Ok(self.push(
            Op::ScatterWeightedRows { values, weights, dst: dst.to_vec() },
            Tensor::from_op(vec![out_rows, d], out),
            grad,
        ))
    }

    /// Column means of a rank-2 tensor: [m×n] → [n].
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let at = self.value(a);
        if at.rank() != 2 {
            return Err(NumError::Dim("mean_rows expects a rank-2 input".into()));
        }
        let (m, n) = (at.shape()[0], at.shape()[1]);
        let mut out = vec![0.0; n];
        for r in 0..m {
            let row = at.row(r);
            for c in 0..n {
                out[c] += row[c];
            }
        }
        for v in &mut out {
            *v /= m as f64;
        }
        let grad = self.rg(a);
        Ok(self.push(Op::MeanRows { a }, Tensor::from_op(vec![n], out), grad))
    }

    /// Sum of squared entries, as a scalar tensor.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let at = self.value(a);
        let s: f64 = at.data().iter().map(|x| x * x).sum();
        let grad = self.rg(a);
        self.push(Op::SumSquares { a }, Tensor::from_op(vec![1], vec![s]), grad)
    }

    /// All ReLU pre-activation values recorded so far, in tape order. Used by
    /// the finite-difference checker to exclude kink-adjacent coordinates.
    pub fn relu_preacts(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { a } = node.op {
                out.extend_from_slice(self.nodes[a.0].value.data());
            }
        }
        out
    }

    /// Reverse-mode gradients of a scalar loss for every named parameter.
    /// Parameters the loss does not reach get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<GradMap, NumError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(NumError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_op(vec![1], vec![1.0]));

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = grads[idx].take().expect("grad present");
            self.propagate(idx, &g, &mut grads);
            // Parameter leaves keep their accumulated gradient.
            if self.nodes[idx].param.is_some() {
                grads[idx] = Some(g);
            }
        }

        let mut out = GradMap::new();
        for (name, var) in &self.params {
            let g = grads[var.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[var.0].value.shape().to_vec()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        match slot {
            Some(t) => {
                for (dst, src) in t.data_mut().iter_mut().zip(delta) {
                    *dst += src;
                }
            }
            None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                debug_assert_eq!(shape.iter().product::<usize>(), delta.len());
                *slot = Some(Tensor::from_op(shape, delta.to_vec()));
            }
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Affine { w, b, x } => {
                let (wt, xt) = (self.value(*w), self.value(*x));
                let (m, n) = (wt.shape()[0], wt.shape()[1]);
                if self.rg(*w) {
                    let mut dw = vec![0.0; m * n];
                    for i in 0..m {
                        let gi = g.data()[i];
                        for j in 0..n {
                            dw[i * n + j] = gi * xt.data()[j];
                        }
                    }
                    self.accumulate(grads, *w, &dw);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.data());
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; n];
                    for i in 0..m {
                        let gi = g.data()[i];
                        let row = wt.row(i);
                        for j in 0..n {
                            dx[j] += row[j] * gi;
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::MatMulNT { a, b } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k) = (at.shape()[0], at.shape()[1]);
                let n = bt.shape()[0];
                if self.rg(*a) {
                    // dA = dC · B
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g.at(i, j);
                            let brow = bt.row(j);
                            let arow = &mut da[i * k..(i + 1) * k];
                            for c in 0..k {
                                arow[c] += gij * brow[c];
                            }
                        }
                    }
                    self.accumulate(grads, *a, &da);
                }
                if self.rg(*b) {
                    // dB = dCᵀ · A
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        let arow = at.row(i);
                        for j in 0..n {
                            let gij = g.at(i, j);
                            let brow = &mut db[j * k..(j + 1) * k];
                            for c in 0..k {
                                brow[c] += gij * arow[c];
                            }
                        }
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.data());
                self.accumulate(grads, *b, g.data());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.data());
                if self.rg(*b) {
                    let neg: Vec<f64> = g.data().iter().map(|x| -x).collect();
                    self.accumulate(grads, *b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let d: Vec<f64> =
                        g.data().iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, &d);
                }
                if self.rg(*b) {
                    let d: Vec<f64> =
                        g.data().iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, &d);
                }
            }
            Op::AddRowBias { a, bias } => {
                self.accumulate(grads, *a, g.data());
                if self.rg(*bias) {
                    let n = self.value(*bias).numel();
                    let m = g.numel() / n;
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            db[c] += g.data()[r * n + c];
                        }
                    }
                    self.accumulate(grads, *bias, &db);
                }
            }
            Op::Relu { a } => {
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, &d);
            }
            Op::Sigmoid { a } => {
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.nodes[idx].value.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *a, &d);
            }
            Op::LayerNormRows { a, gain, shift, aux } => {
                let at = self.value(*a);
                let gt = self.value(*gain);
                let (m, n) = (at.rows(), at.cols());
                let mut da = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dshift = vec![0.0; n];
                for r in 0..m {
                    let (mean, inv_std) = aux[r];
                    let row = at.row(r);
                    let grow = &g.data()[r * n..(r + 1) * n];
                    // dxhat, plus the two row means the LN backward needs.
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    let mut dxhat = vec![0.0; n];
                    for c in 0..n {
                        let xhat = (row[c] - mean) * inv_std;
                        dgain[c] += grow[c] * xhat;
                        dshift[c] += grow[c];
                        dxhat[c] = grow[c] * gt.data()[c];
                        sum_dxhat += dxhat[c];
                        sum_dxhat_xhat += dxhat[c] * xhat;
                    }
                    let mean_dxhat = sum_dxhat / n as f64;
                    let mean_dxhat_xhat = sum_dxhat_xhat / n as f64;
                    for c in 0..n {
                        let xhat = (row[c] - mean) * inv_std;
                        da[r * n + c] = inv_std * (dxhat[c] - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *gain, &dgain);
                self.accumulate(grads, *shift, &dshift);
            }
            Op::ScaleNormRows { a, gain, eps, aux } => {
                let at = self.value(*a);
                let gv = self.value(*gain).data()[0];
                let (m, n) = (at.rows(), at.cols());
                let mut da = vec![0.0; m * n];
                let mut dg = 0.0;
                for r in 0..m {
                    let norm = aux[r];
                    let row = at.row(r);
                    let grow = &g.data()[r * n..(r + 1) * n];
                    if norm > *eps {
                        let mut dot = 0.0;
                        for c in 0..n {
                            dot += grow[c] * row[c] / norm;
                        }
                        dg += dot;
                        for c in 0..n {
                            let xhat = row[c] / norm;
                            da[r * n + c] = gv / norm * (grow[c] - xhat * dot);
                        }
                    } else {
                        for c in 0..n {
                            dg += grow[c] * row[c] / eps;
                            da[r * n + c] = gv / eps * grow[c];
                        }
                    }
                }
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *gain, &[dg]);
            }
            Op::ConcatCols { parts } => {
                let m = self.nodes[idx].value.rows();
                let total = self.nodes[idx].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut d = vec![0.0; m * w];
                        for r in 0..m {
                            d[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, &d);
                    }
                    offset += w;
                }
            }
            Op::GatherRows { a, idx: rows } => {
                let at = self.value(*a);
                let c = at.cols();
                let mut da = vec![0.0; at.numel()];
                for (r, &i) in rows.iter().enumerate() {
                    let src = &g.data()[r * c..(r + 1) * c];
                    let dst = &mut da[i * c..(i + 1) * c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::RowDotHeads { a, b, heads, scale } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, d) = (at.shape()[0], at.shape()[1]);
                let dh = d / heads;
                let rga = self.rg(*a);
                let rgb = self.rg(*b);
                let mut da = vec![0.0; if rga { m * d } else { 0 }];
                let mut db = vec![0.0; if rgb { m * d } else { 0 }];
                for r in 0..m {
                    let (arow, brow) = (at.row(r), bt.row(r));
                    for h in 0..*heads {
                        let go = g.at(r, h) * scale;
                        for c in h * dh..(h + 1) * dh {
                            if rga {
                                da[r * d + c] += go * brow[c];
                            }
                            if rgb {
                                db[r * d + c] += go * arow[c];
                            }
                        }
                    }
                }
                if rga {
                    self.accumulate(grads, *a, &da);
                }
                if rgb {
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::ScatterWeightedRows { values, weights, dst } => {
                let (vt, wt) = (self.value(*values), self.value(*weights));
                let (e, d) = (vt.shape()[0], vt.shape()[1]);
                let heads = wt.shape()[1];
                let dh = d / heads;
                let rgv = self.rg(*values);
                let rgw = self.rg(*weights);
                let mut dv = vec![0.0; if rgv { e * d } else { 0 }];
                let mut dw = vec![0.0; if rgw { e * heads } else { 0 }];
                for r in 0..e {
                    let gout = &g.data()[dst[r] * d..(dst[r] + 1) * d];
                    let vrow = vt.row(r);
                    let wrow = wt.row(r);
                    for h in 0..heads {
                        for c in h * dh..(h + 1) * dh {
                            if rgv {
                                dv[r * d + c] += wrow[h] * gout[c];
                            }
                            if rgw {
                                dw[r * heads + h] += vrow[c] * gout[c];
                            }
                        }
                    }
                }
                if rgv {
                    self.accumulate(grads, *values, &dv);
                }
                if rgw {
                    self.accumulate(grads, *weights, &dw);
                }
            }
            Op::MeanRows { a } => {
                let at = self.value(*a);
                let (m, n) = (at.shape()[0], at.shape()[1]);
                let inv = 1.0 / m as f64;
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] = g.data()[c] * inv;
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::SumSquares { a } => {
                let gs = g.data()[0];
                let d: Vec<f64> = self.value(*a).data().iter().map(|x| 2.0 * x * gs).collect();
                self.accumulate(grads, *a, &d);
            }
        }
    }
}
