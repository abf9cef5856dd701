use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamId, ParamStore};
use super::{
    gelu_grad_scalar, gelu_scalar, log_softmax_rows, matmul_at_raw, matmul_bt_raw, matmul_raw,
    shape_err, softmax_rows, Result, Tensor, TensorError, LAYER_NORM_EPS,
};

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    GatherRows(Var, Vec<usize>),
    BagRows {
        x: Var,
        groups: Vec<Vec<usize>>,
        mean: bool,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Dropout(Var, Vec<f64>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    SumAll(Var),
    MeanAxis(Var, usize),
    SumAxis(Var, usize),
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Tensor,
        count: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::GatherRows(..) => "gather_rows",
            Op::BagRows { .. } => "bag_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Dropout(..) => "dropout",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Transpose(..) => "transpose",
            Op::SumAll(..) => "sum",
            Op::MeanAxis(..) => "mean_axis",
            Op::SumAxis(..) => "sum_axis",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    // `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
}

/// A single forward pass recorded for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological order and `backward` walks it once from the end.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            dropout: None,
        }
    }

    /// Enable inverted dropout with probability `p`, drawing masks from `rng`.
    pub fn with_dropout(mut self, p: f64, rng: ChaCha8Rng) -> Self {
        if p > 0.0 {
            self.dropout = Some((p, rng));
        }
        self
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => self.params.get(ParamId(*i)),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// First node holding a non-finite value, if any.
    pub fn check_finite(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if let Some(v) = &n.value {
                if !v.is_finite() {
                    return Err(TensorError::NonFinite {
                        node: i,
                        op: n.op.name(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id.0),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self.params.expect_id(name)?;
        Ok(self.param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("lhs axis 1 = {k}, rhs axis 0 = {k2}"),
            ));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(shape_err(
                "matmul_bt",
                format!("lhs axis 1 = {k}, rhs axis 1 = {k2}"),
            ));
        }
        let out = matmul_bt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b)))
    }

    fn same_shape(&self, kernel: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let da = self.value(a).dims2();
        let db = self.value(b).dims2();
        if da != db {
            return Err(shape_err(
                kernel,
                format!("axes {:?} vs {:?}", da, db),
            ));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::Add(a, b)))
    }

    /// Add a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let (rr, rc) = self.value(row).dims2();
        if rr != 1 || rc != c {
            return Err(shape_err(
                "add_row",
                format!("row operand {rr}x{rc} against {r}x{c}"),
            ));
        }
        let mut out = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            for (o, b) in out.row_mut(i).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        out = Tensor::new(vec![r, c], out.into_data())?;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_in_place(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Add a constant (non-differentiable) tensor of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let da = self.value(a).dims2();
        if da != c.dims2() {
            return Err(shape_err(
                "add_const",
                format!("axes {:?} vs {:?}", da, c.dims2()),
            ));
        }
        let mut out = self.value(a).clone();
        out.add_assign(c);
        Ok(self.push(out, Op::AddConst(a)))
    }

    /// Row lookup; `ids` may repeat. This is the embedding gather.
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let rows = self.value(x).rows();
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index {
                kernel: "gather_rows",
                index: bad,
                bound: rows,
            });
        }
        let out = self.value(x).select_rows(ids);
        Ok(self.push(out, Op::GatherRows(x, ids.to_vec())))
    }

    /// One output row per group: the sum (or mean) of the selected rows of `x`.
    pub fn bag_rows(&mut self, x: Var, groups: &[Vec<usize>], mean: bool) -> Result<Var> {
        let (rows, c) = self.value(x).dims2();
        let mut out = Tensor::zeros(&[groups.len(), c]);
        for (gi, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(TensorError::Contract(format!(
                    "bag_rows: group {gi} is empty"
                )));
            }
            let scale = if mean { 1.0 / group.len() as f64 } else { 1.0 };
            for &r in group {
                if r >= rows {
                    return Err(TensorError::Index {
                        kernel: "bag_rows",
                        index: r,
                        bound: rows,
                    });
                }
                let src = self.value(x).row(r).to_vec();
                for (o, s) in out.row_mut(gi).iter_mut().zip(src) {
                    *o += s;
                }
            }
            if mean {
                for o in out.row_mut(gi) {
                    *o *= scale;
                }
            }
        }
        Ok(self.push(
            out,
            Op::BagRows {
                x,
                groups: groups.to_vec(),
                mean,
            },
        ))
    }

    /// Row-wise layer normalisation with `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        for (name, v) in [("gain", gain), ("bias", bias)] {
            if self.value(v).dims2() != (1, c) {
                return Err(shape_err(
                    "layer_norm",
                    format!("{name} is {:?}, expected (1, {c})", self.value(v).dims2()),
                ));
            }
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = xv.row(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| gelu_scalar(a)).collect(),
        )
        .expect("same shape");
        self.push(out, Op::Gelu(x))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        self.push(out, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = log_softmax_rows(self.value(x));
        self.push(out, Op::LogSoftmax(x))
    }

    /// Inverted dropout; identity when the graph has no dropout configured.
    pub fn dropout(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let Some((p, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let p = *p;
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )
        .expect("same shape");
        self.push(out, Op::Dropout(x, mask))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(shape_err(
                    "concat_rows",
                    format!("axis 1: {} vs {}", v.cols(), c),
                ));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        Ok(self.push(
            Tensor::new(vec![rows, c], data)?,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != r {
                return Err(shape_err(
                    "concat_cols",
                    format!("axis 0: {} vs {}", v.rows(), r),
                ));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(
            Tensor::new(vec![r, total], data)?,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if start + len > r {
            return Err(shape_err(
                "slice_rows",
                format!("axis 0: rows {start}..{} of {r}", start + len),
            ));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::new(vec![len, c], data)?, Op::SliceRows(x, start)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if start + len > c {
            return Err(shape_err(
                "slice_cols",
                format!("axis 1: cols {start}..{} of {c}", start + len),
            ));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&v.row(i)[start..start + len]);
        }
        Ok(self.push(Tensor::new(vec![r, len], data)?, Op::SliceCols(x, start)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).dims2();
        let v = self.value(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v.data()[i * c + j];
            }
        }
        self.push(
            Tensor::new(vec![c, r], data).expect("transpose"),
            Op::Transpose(x),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    fn reduce_axis(&self, x: Var, axis: usize, kernel: &'static str) -> Result<Tensor> {
        let (r, c) = self.value(x).dims2();
        let v = self.value(x);
        match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, a) in out.iter_mut().zip(v.row(i)) {
                        *o += a;
                    }
                }
                Tensor::new(vec![1, c], out)
            }
            1 => Tensor::new(
                vec![r, 1],
                (0..r).map(|i| v.row(i).iter().sum()).collect(),
            ),
            _ => Err(shape_err(kernel, format!("axis {axis} on a 2-D tensor"))),
        }
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.reduce_axis(x, axis, "sum_axis")?;
        Ok(self.push(out, Op::SumAxis(x, axis)))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        let n = if axis == 0 { r } else { c };
        let mut out = self.reduce_axis(x, axis, "mean_axis")?;
        out.scale_in_place(1.0 / n.max(1) as f64);
        Ok(self.push(out, Op::MeanAxis(x, axis)))
    }

    /// Mean cross-entropy over rows whose label is `Some`. Returns the scalar
    /// loss and the number of labelled rows; with no labelled rows the loss is
    /// exactly zero and carries no gradient.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<(Var, usize)> {
        let (r, c) = self.value(logits).dims2();
        if labels.len() != r {
            return Err(shape_err(
                "cross_entropy",
                format!("axis 0: {r} logit rows, {} labels", labels.len()),
            ));
        }
        let logp = log_softmax_rows(self.value(logits));
        let mut loss = 0.0;
        let mut count = 0;
        for (i, l) in labels.iter().enumerate() {
            if let Some(l) = *l {
                if l >= c {
                    return Err(TensorError::Index {
                        kernel: "cross_entropy",
                        index: l,
                        bound: c,
                    });
                }
                loss -= logp.data()[i * c + l];
                count += 1;
            }
        }
        if count > 0 {
            loss /= count as f64;
        }
        let probs = Tensor::new(logp.shape().to_vec(), logp.data().iter().map(|v| v.exp()).collect())?;
        let v = self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                count,
            },
        );
        Ok((v, count))
    }

    /// Reverse pass from a scalar `loss`. Gradients for every parameter of the
    /// store are returned; parameters off the loss path stay zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(i) => out.accumulate(*i, &gy),
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2();
                    let n = self.value(*b).cols();
                    let da = matmul_bt_raw(gy.data(), self.value(*b).data(), m, n, k);
                    let db = matmul_at_raw(self.value(*a).data(), gy.data(), m, k, n);
                    acc(&mut grads, *a, Tensor::new(vec![m, k], da)?);
                    acc(&mut grads, *b, Tensor::new(vec![k, n], db)?);
                }
                Op::MatMulBt(a, b) => {
                    let (m, k) = self.value(*a).dims2();
                    let n = self.value(*b).rows();
                    let da = matmul_raw(gy.data(), self.value(*b).data(), m, n, k);
                    let db = matmul_at_raw(gy.data(), self.value(*a).data(), m, n, k);
                    acc(&mut grads, *a, Tensor::new(vec![m, k], da)?);
                    acc(&mut grads, *b, Tensor::new(vec![n, k], db)?);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gy.clone());
                    acc(&mut grads, *b, gy);
                }
                Op::AddRow(a, row) => {
                    let (r, c) = gy.dims2();
                    let mut gb = vec![0.0; c];
                    for i in 0..r {
                        for (o, g) in gb.iter_mut().zip(gy.row(i)) {
                            *o += g;
                        }
                    }
                    acc(&mut grads, *row, Tensor::new(vec![1, c], gb)?);
                    acc(&mut grads, *a, gy);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga: Vec<f64> = gy.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = gy.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    acc(&mut grads, *a, Tensor::new(av.shape().to_vec(), ga)?);
                    acc(&mut grads, *b, Tensor::new(bv.shape().to_vec(), gb)?);
                }
                Op::Scale(a, s) => {
                    let mut g = gy;
                    g.scale_in_place(*s);
                    acc(&mut grads, *a, g);
                }
                Op::AddConst(a) => acc(&mut grads, *a, gy),
                Op::GatherRows(x, ids) => {
                    let xv = self.value(*x);
                    let mut g = Tensor::zeros(&[xv.rows(), xv.cols()]);
                    for (k, &r) in ids.iter().enumerate() {
                        for (o, v) in g.row_mut(r).iter_mut().zip(gy.row(k)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::BagRows { x, groups, mean } => {
                    let xv = self.value(*x);
                    let mut g = Tensor::zeros(&[xv.rows(), xv.cols()]);
                    for (k, group) in groups.iter().enumerate() {
                        let s = if *mean { 1.0 / group.len() as f64 } else { 1.0 };
                        for &r in group {
                            for (o, v) in g.row_mut(r).iter_mut().zip(gy.row(k)) {
                                *o += v * s;
                            }
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (r, c) = gy.dims2();
                    let g = self.value(*gain).data();
                    let mut dx = vec![0.0; r * c];
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        let gyr = gy.row(i);
                        let xh = &xhat[i * c..(i + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let d = gyr[j] * g[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                            dg[j] += gyr[j] * xh[j];
                            db[j] += gyr[j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for j in 0..c {
                            let d = gyr[j] * g[j];
                            dx[i * c + j] = inv_std[i] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(vec![r, c], dx)?);
                    acc(&mut grads, *gain, Tensor::new(vec![1, c], dg)?);
                    acc(&mut grads, *bias, Tensor::new(vec![1, c], db)?);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let g: Vec<f64> = gy
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(g, &a)| g * gelu_grad_scalar(a))
                        .collect();
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), g)?);
                }
                Op::Softmax(x) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let (r, c) = y.dims2();
                    let mut g = vec![0.0; r * c];
                    for i in 0..r {
                        let yr = y.row(i);
                        let gr = gy.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            g[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(vec![r, c], g)?);
                }
                Op::LogSoftmax(x) => {
                    let y = node.value.as_ref().expect("log_softmax value");
                    let (r, c) = y.dims2();
                    let mut g = vec![0.0; r * c];
                    for i in 0..r {
                        let gr = gy.row(i);
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            g[i * c + j] = gr[j] - y.row(i)[j].exp() * total;
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(vec![r, c], g)?);
                }
                Op::Dropout(x, mask) => {
                    let g: Vec<f64> = gy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                    acc(&mut grads, *x, Tensor::new(gy.shape().to_vec(), g)?);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).dims2();
                        let data = gy.data()[offset * c..(offset + r) * c].to_vec();
                        offset += r;
                        acc(&mut grads, p, Tensor::new(vec![r, c], data)?);
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = gy.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let mut data = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            data.extend_from_slice(&gy.row(i)[offset..offset + c]);
                        }
                        offset += c;
                        acc(&mut grads, p, Tensor::new(vec![rows, c], data)?);
                    }
                }
                Op::SliceRows(x, start) => {
                    let (r, c) = self.value(*x).dims2();
                    let mut g = Tensor::zeros(&[r, c]);
                    let len = gy.rows();
                    g.data_mut()[start * c..(start + len) * c].copy_from_slice(gy.data());
                    acc(&mut grads, *x, g);
                }
                Op::SliceCols(x, start) => {
                    let (r, c) = self.value(*x).dims2();
                    let len = gy.cols();
                    let mut g = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        g.row_mut(i)[*start..start + len].copy_from_slice(gy.row(i));
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Transpose(x) => {
                    let (r, c) = gy.dims2();
                    let mut data = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            data[j * r + i] = gy.data()[i * c + j];
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(vec![c, r], data)?);
                }
                Op::SumAll(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(&mut grads, *x, Tensor::full(&shape, gy.item()));
                }
                Op::MeanAxis(x, axis) | Op::SumAxis(x, axis) => {
                    let (r, c) = self.value(*x).dims2();
                    let scale = match (&node.op, axis) {
                        (Op::MeanAxis(..), 0) => 1.0 / r as f64,
                        (Op::MeanAxis(..), _) => 1.0 / c as f64,
                        _ => 1.0,
                    };
                    let mut g = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        for j in 0..c {
                            let src = if *axis == 0 { gy.data()[j] } else { gy.data()[i] };
                            g.data_mut()[i * c + j] = src * scale;
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                    count,
                } => {
                    if *count == 0 {
                        continue;
                    }
                    let (r, c) = probs.dims2();
                    let s = gy.item() / *count as f64;
                    let mut g = vec![0.0; r * c];
                    for (i, l) in labels.iter().enumerate() {
                        if let Some(l) = *l {
                            for j in 0..c {
                                g[i * c + j] = probs.data()[i * c + j] * s;
                            }
                            g[i * c + l] -= s;
                        }
                    }
                    acc(&mut grads, *logits, Tensor::new(vec![r, c], g)?);
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates_checked: usize,
}

/// Compare analytic gradients against central finite differences.
///
/// Up to `coords_per_param` coordinates of each parameter are sampled (all of
/// them when the tensor is smaller). The relative error of one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn grad_check<F>(
    params: &ParamStore,
    eps: f64,
    coords_per_param: usize,
    seed: u64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(TensorError::Contract(format!(
            "grad_check needs eps > 0, got {eps}"
        )));
    }
    let analytic = {
        let mut g = Graph::new(params);
        let loss = build(&mut g)?;
        g.check_finite()?;
        g.backward(loss)?
    };
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(p);
        let loss = build(&mut g)?;
        g.check_finite()?;
        Ok(g.value(loss).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates_checked: 0,
    };
    for id in params.ids() {
        let n = params.get(id).numel();
        let coords: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for k in coords {
            let orig = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).data()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            let err = (a - numeric).abs() / denom;
            report.coordinates_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = params.name(id).to_string();
                report.worst_index = k;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.insert(*n, t.clone());
        }
        s
    }

    #[test]
    fn sum_of_squares_gradient() {
        let p = store(&[("x", Tensor::row_vector(&[1.0, 2.0]))]);
        let mut g = Graph::new(&p);
        let x = g.param_by_name("x").unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p.id("x").unwrap()).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_parameter_has_zero_gradient() {
        let p = store(&[
            ("used", Tensor::row_vector(&[3.0])),
            ("unused", Tensor::row_vector(&[5.0, 6.0])),
        ]);
        let mut g = Graph::new(&p);
        let u = g.param_by_name("used").unwrap();
        let _other = g.param_by_name("unused").unwrap();
        let loss = g.sum(u);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p.id("unused").unwrap()).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let p = store(&[("x", Tensor::row_vector(&[1.0, 2.0]))]);
        let mut g = Graph::new(&p);
        let x = g.param_by_name("x").unwrap();
        assert!(matches!(g.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn uniform_cross_entropy_is_ln2() {
        let p = ParamStore::new();
        let mut g = Graph::new(&p);
        let l = g.input(Tensor::row_vector(&[0.0, 0.0]));
        let (loss, n) = g.cross_entropy(l, &[Some(0)]).unwrap();
        assert_eq!(n, 1);
        assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_with_no_labels_is_zero() {
        let p = ParamStore::new();
        let mut g = Graph::new(&p);
        let l = g.input(Tensor::row_vector(&[1.0, 0.0]));
        let (loss, n) = g.cross_entropy(l, &[None]).unwrap();
        assert_eq!((g.value(loss).item(), n), (0.0, 0));
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let p = ParamStore::new();
        let mut g = Graph::new(&p);
        let x = g.input(Tensor::row_vector(&[1.0; 4]));
        let gain = g.input(Tensor::row_vector(&[1.0; 4]));
        let bias = g.input(Tensor::row_vector(&[0.0; 4]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_kernel() {
        let p = ParamStore::new();
        let mut g = Graph::new(&p);
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(TensorError::Shape { kernel, detail }) => {
                assert_eq!(kernel, "matmul");
                assert!(detail.contains("axis"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn grad_check_rejects_zero_eps() {
        let p = store(&[("w", Tensor::row_vector(&[1.0]))]);
        let r = grad_check(&p, 0.0, 4, 0, |g| {
            let w = g.param_by_name("w")?;
            Ok(g.sum(w))
        });
        assert!(matches!(r, Err(TensorError::Contract(_))));
    }

    #[test]
    fn grad_check_linear_dot_is_exact() {
        let p = store(&[("w", Tensor::row_vector(&[0.3, -1.2, 2.5]))]);
        let x = Tensor::new(vec![3, 1], vec![1.5, 0.25, -2.0]).unwrap();
        // linear: no truncation error, so a wide step only reduces round-off
        let r = grad_check(&p, 1e-3, 8, 0, |g| {
            let w = g.param_by_name("w")?;
            let xv = g.input(x.clone());
            g.matmul(w, xv)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn grad_check_softmax_cross_entropy() {
        let p = store(&[(
            "logits",
            Tensor::from_rows(&[vec![0.2, -0.7, 1.3, 0.05], vec![-1.0, 0.4, 0.0, 2.2]]).unwrap(),
        )]);
        let r = grad_check(&p, 1e-5, 16, 0, |g| {
            let l = g.param_by_name("logits")?;
            Ok(g.cross_entropy(l, &[Some(2), Some(0)])?.0)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn grad_check_reports_non_finite_node() {
        let p = store(&[("w", Tensor::row_vector(&[1.0]))]);
        let r = grad_check(&p, 1e-5, 1, 0, |g| {
            let w = g.param_by_name("w")?;
            let big = g.scale(w, f64::INFINITY);
            Ok(g.sum(big))
        });
        assert!(matches!(r, Err(TensorError::NonFinite { op: "scale", .. })));
    }

    #[test]
    fn every_kernel_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = store(&[
            ("a", Tensor::randn(&[3, 4], 1.0, &mut rng)),
            ("b", Tensor::randn(&[4, 5], 1.0, &mut rng)),
            ("c", Tensor::randn(&[3, 5], 1.0, &mut rng)),
            ("row", Tensor::randn(&[1, 5], 1.0, &mut rng)),
            ("gain", Tensor::randn(&[1, 5], 1.0, &mut rng)),
            ("bias", Tensor::randn(&[1, 5], 1.0, &mut rng)),
            ("table", Tensor::randn(&[6, 5], 1.0, &mut rng)),
        ]);
        let r = grad_check(&p, 1e-5, 64, 1, |g| {
            let a = g.param_by_name("a")?;
            let b = g.param_by_name("b")?;
            let c = g.param_by_name("c")?;
            let row = g.param_by_name("row")?;
            let gain = g.param_by_name("gain")?;
            let bias = g.param_by_name("bias")?;
            let table = g.param_by_name("table")?;
            let ab = g.matmul(a, b)?;
            let abr = g.add_row(ab, row)?;
            let m = g.mul(abr, c)?;
            let ln = g.layer_norm(m, gain, bias)?;
            let ge = g.gelu(ln);
            let sm = g.softmax(ge);
            let bt = g.matmul_bt(sm, c)?;
            let t = g.transpose(bt);
            let sc = g.scale(t, 0.7);
            let bag = g.bag_rows(table, &[vec![0, 2], vec![5]], false)?;
            let mean_bag = g.bag_rows(table, &[vec![1, 3, 4]], true)?;
            let gat = g.gather_rows(table, &[4, 4, 1])?;
            let rows = g.concat_rows(&[bag, mean_bag, gat])?; // 6x5
            let sl = g.slice_rows(rows, 1, 3)?; // 3x5
            let slc = g.slice_cols(sl, 1, 3)?; // 3x3
            let cc = g.concat_cols(&[slc, sc])?; // 3x6
            let ls = g.log_softmax(cc);
            let ma = g.mean_axis(ls, 0)?;
            let sa = g.sum_axis(cc, 1)?;
            let (ce, _) = g.cross_entropy(cc, &[Some(1), None, Some(5)])?;
            let s1 = g.sum(ma);
            let s2 = g.sum(sa);
            let sq = g.mul(s2, s2)?;
            let t1 = g.add(s1, sq)?;
            g.add(t1, ce)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
