//! Reverse-mode automatic differentiation over [`Array`] values.
//!
//! Operations are recorded eagerly on a [`Tape`]; `backward` walks the tape
//! in reverse, visiting each node once. Evaluation is deterministic: the
//! same inputs produce bit-identical values and gradients.

use crate::array::{self, Array};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
const DIST_EPSILON: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

struct BnTrainCtx {
    /// Normalized activations (x - mean) / sqrt(var + eps).
    xhat: Array,
    /// 1 / sqrt(var + eps) per feature.
    inv_std: Vec<f64>,
}

enum Op {
    Param,
    Constant,
    Detach,
    MatMul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddRowBias { x: NodeId, bias: NodeId },
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId },
    Relu { x: NodeId },
    Exp { x: NodeId },
    Ln { x: NodeId },
    LogSoftmax { x: NodeId, softmax: Array },
    Sum { x: NodeId },
    Mean { x: NodeId },
    SqNorm { x: NodeId },
    L1Norm { x: NodeId },
    ReduceMax { x: NodeId, argmax: usize },
    PairwiseDist { x: NodeId },
    RowMaxMasked { x: NodeId, argmax: Vec<usize> },
    RowMinMasked { x: NodeId, argmin: Vec<usize> },
    ConcatRows { a: NodeId, b: NodeId },
    GatherRows { x: NodeId, idx: Vec<usize> },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        ctx: BnTrainCtx,
    },
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Array,
        inv_std: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Constant => "constant",
            Op::Detach => "detach",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Relu { .. } => "relu",
            Op::Exp { .. } => "exp",
            Op::Ln { .. } => "ln",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SqNorm { .. } => "sq_norm",
            Op::L1Norm { .. } => "l1_norm",
            Op::ReduceMax { .. } => "reduce_max",
            Op::PairwiseDist { .. } => "pairwise_dist",
            Op::RowMaxMasked { .. } => "row_max_masked",
            Op::RowMinMasked { .. } => "row_min_masked",
            Op::ConcatRows { .. } => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::BatchNormTrain { .. } => "batch_norm_train",
            Op::BatchNormEval { .. } => "batch_norm_eval",
        }
    }
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation: nodes in evaluation order, leaves first where bound.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.scalar_value()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                node: self.nodes.len(),
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array) -> Result<NodeId> {
        self.push(value, Op::Param, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Array) -> Result<NodeId> {
        self.push(value, Op::Constant, false)
    }

    /// Value copy with the gradient path severed.
    pub fn detach(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).clone();
        self.push(v, Op::Detach, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = array::matmul(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul { a, b }, rg)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).rank() != 2 {
            return Err(Error::ShapeMismatch {
                context: "transpose".into(),
                left: self.value(x).shape().to_vec(),
                right: vec![],
            });
        }
        let v = array::transpose(self.value(x));
        let rg = self.needs(x);
        self.push(v, Op::Transpose { x }, rg)
    }

    fn elementwise(&mut self, a: NodeId, b: NodeId, which: &str) -> Result<Array> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                context: which.into(),
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        Ok(match which {
            "add" => va.zip_map(vb, |x, y| x + y),
            "sub" => va.zip_map(vb, |x, y| x - y),
            "mul" => va.zip_map(vb, |x, y| x * y),
            _ => unreachable!(),
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.elementwise(a, b, "add")?;
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.elementwise(a, b, "sub")?;
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.elementwise(a, b, "mul")?;
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul { a, b }, rg)
    }

    /// `x (r,c) + bias (c)` broadcast over rows; the only broadcast supported.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vx.rank() != 2 || vb.rank() != 1 || vx.cols() != vb.cols() {
            return Err(Error::ShapeMismatch {
                context: "add_row_bias".into(),
                left: vx.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let c = vx.cols();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let v = Array::from_vec(vx.shape().to_vec(), data)?;
        let rg = self.needs(x) || self.needs(bias);
        self.push(v, Op::AddRowBias { x, bias }, rg)
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(x).map(|v| v * c);
        let rg = self.needs(x);
        self.push(v, Op::Scale { x, c }, rg)
    }

    /// Add a constant scalar to every entry.
    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(x).map(|v| v + c);
        let rg = self.needs(x);
        self.push(v, Op::AddScalar { x }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|v| v.max(0.0));
        let rg = self.needs(x);
        self.push(v, Op::Relu { x }, rg)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(f64::exp);
        let rg = self.needs(x);
        self.push(v, Op::Exp { x }, rg)
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(f64::ln);
        let rg = self.needs(x);
        self.push(v, Op::Ln { x }, rg)
    }

    /// Row-wise log-softmax of a rank-2 array.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.rank() != 2 {
            return Err(Error::ShapeMismatch {
                context: "log_softmax".into(),
                left: vx.shape().to_vec(),
                right: vec![],
            });
        }
        let c = vx.cols();
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Array::from_vec(vx.shape().to_vec(), out)?;
        let softmax = value.map(f64::exp);
        let rg = self.needs(x);
        self.push(value, Op::LogSoftmax { x, softmax }, rg)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Array::scalar(self.value(x).data().iter().sum());
        let rg = self.needs(x);
        self.push(v, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len() as f64;
        let v = Array::scalar(self.value(x).data().iter().sum::<f64>() / n);
        let rg = self.needs(x);
        self.push(v, Op::Mean { x }, rg)
    }

    /// Squared L2 norm of the whole array.
    pub fn sq_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Array::scalar(self.value(x).sq_norm());
        let rg = self.needs(x);
        self.push(v, Op::SqNorm { x }, rg)
    }

    /// L1 norm of the whole array; subgradient at 0 is 0.
    pub fn l1_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Array::scalar(self.value(x).data().iter().map(|v| v.abs()).sum());
        let rg = self.needs(x);
        self.push(v, Op::L1Norm { x }, rg)
    }

    /// Maximum entry; on ties the gradient routes to the first.
    pub fn reduce_max(&mut self, x: NodeId) -> Result<NodeId> {
        let data = self.value(x).data();
        let (argmax, &mx) = data
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.partial_cmp(b).unwrap().then(ib.cmp(ia)))
            .expect("non-empty array");
        let rg = self.needs(x);
        self.push(Array::scalar(mx), Op::ReduceMax { x, argmax }, rg)
    }

    /// All-pairs Euclidean distances of the rows of `x (b,n)`, result `(b,b)`.
    ///
    /// A tiny epsilon inside the square root keeps the gradient finite at
    /// coincident rows.
    pub fn pairwise_dist(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.rank() != 2 {
            return Err(Error::ShapeMismatch {
                context: "pairwise_dist".into(),
                left: vx.shape().to_vec(),
                right: vec![],
            });
        }
        let b = vx.rows();
        let mut out = vec![0.0; b * b];
        for i in 0..b {
            for j in (i + 1)..b {
                let mut s = 0.0;
                for (p, q) in vx.row(i).iter().zip(vx.row(j)) {
                    s += (p - q) * (p - q);
                }
                let d = (s + DIST_EPSILON).sqrt();
                out[i * b + j] = d;
                out[j * b + i] = d;
            }
            out[i * b + i] = DIST_EPSILON.sqrt();
        }
        let v = Array::from_vec(vec![b, b], out)?;
        let rg = self.needs(x);
        self.push(v, Op::PairwiseDist { x }, rg)
    }

    /// Per-row maximum over entries where `mask` is true; result `(rows)`.
    pub fn row_max_masked(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        self.row_extreme_masked(x, mask, true)
    }

    /// Per-row minimum over entries where `mask` is true; result `(rows)`.
    pub fn row_min_masked(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        self.row_extreme_masked(x, mask, false)
    }

    fn row_extreme_masked(&mut self, x: NodeId, mask: &[bool], take_max: bool) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.rank() != 2 || mask.len() != vx.len() {
            return Err(Error::Invalid(format!(
                "row_extreme_masked: mask length {} vs array shape {:?}",
                mask.len(),
                vx.shape()
            )));
        }
        let (r, c) = (vx.rows(), vx.cols());
        let mut vals = Vec::with_capacity(r);
        let mut args = Vec::with_capacity(r);
        for i in 0..r {
            let mut best: Option<(usize, f64)> = None;
            for j in 0..c {
                if !mask[i * c + j] {
                    continue;
                }
                let v = vx.at2(i, j);
                let better = match best {
                    None => true,
                    Some((_, bv)) => {
                        if take_max {
                            v > bv
                        } else {
                            v < bv
                        }
                    }
                };
                if better {
                    best = Some((j, v));
                }
            }
            let (j, v) = best.ok_or_else(|| {
                Error::Invalid(format!("row {i} has no unmasked entries"))
            })?;
            vals.push(v);
            args.push(j);
        }
        let v = Array::from_vec(vec![r], vals)?;
        let rg = self.needs(x);
        let op = if take_max {
            Op::RowMaxMasked { x, argmax: args }
        } else {
            Op::RowMinMasked { x, argmin: args }
        };
        self.push(v, op, rg)
    }

    /// Stack two rank-2 arrays with equal column counts along the row axis.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.cols() {
            return Err(Error::ShapeMismatch {
                context: "concat_rows".into(),
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let mut data = va.data().to_vec();
        data.extend_from_slice(vb.data());
        let v = Array::from_vec(vec![va.rows() + vb.rows(), va.cols()], data)?;
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::ConcatRows { a, b }, rg)
    }

    /// Select rows of `x` by index; duplicate indices accumulate gradient.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.rank() != 2 {
            return Err(Error::ShapeMismatch {
                context: "gather_rows".into(),
                left: vx.shape().to_vec(),
                right: vec![],
            });
        }
        let r = vx.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Invalid(format!(
                "gather_rows: index {bad} out of range for {r} rows"
            )));
        }
        let c = vx.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(vx.row(i));
        }
        let v = Array::from_vec(vec![idx.len(), c], data)?;
        let rg = self.needs(x);
        self.push(
            v,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Batch normalization in training mode: per-feature batch statistics,
    /// differentiable through them. Returns the node plus the batch mean and
    /// (biased) variance so the caller can fold them into running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(NodeId, Array, Array)> {
        let vx = self.value(x);
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vx.rank() != 2 || vg.rank() != 1 || vx.cols() != vg.cols() || vb.shape() != vg.shape() {
            return Err(Error::ShapeMismatch {
                context: "batch_norm_train".into(),
                left: vx.shape().to_vec(),
                right: vg.shape().to_vec(),
            });
        }
        let (r, c) = (vx.rows(), vx.cols());
        let rn = r as f64;
        let mut mean = vec![0.0; c];
        for i in 0..r {
            for (m, &v) in mean.iter_mut().zip(vx.row(i)) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= rn;
        }
        let mut var = vec![0.0; c];
        for i in 0..r {
            for ((vv, &v), &m) in var.iter_mut().zip(vx.row(i)).zip(&mean) {
                *vv += (v - m) * (v - m);
            }
        }
        for v in var.iter_mut() {
            *v /= rn;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                let h = (vx.at2(i, j) - mean[j]) * inv_std[j];
                xhat[i * c + j] = h;
                out[i * c + j] = vg.data()[j] * h + vb.data()[j];
            }
        }
        let value = Array::from_vec(vec![r, c], out)?;
        let xhat = Array::from_vec(vec![r, c], xhat)?;
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let mean_arr = Array::from_vec(vec![c], mean)?;
        let var_arr = Array::from_vec(vec![c], var)?;
        let id = self.push(
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                ctx: BnTrainCtx { xhat, inv_std },
            },
            rg,
        )?;
        Ok((id, mean_arr, var_arr))
    }

    /// Batch normalization in eval mode: fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Array,
        running_var: &Array,
    ) -> Result<NodeId> {
        let vx = self.value(x);
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vx.rank() != 2
            || vx.cols() != vg.cols()
            || vb.shape() != vg.shape()
            || running_mean.cols() != vx.cols()
            || running_var.cols() != vx.cols()
        {
            return Err(Error::ShapeMismatch {
                context: "batch_norm_eval".into(),
                left: vx.shape().to_vec(),
                right: vg.shape().to_vec(),
            });
        }
        let (r, c) = (vx.rows(), vx.cols());
        let inv_std: Vec<f64> = running_var
            .data()
            .iter()
            .map(|v| 1.0 / (v + BN_EPSILON).sqrt())
            .collect();
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                let h = (vx.at2(i, j) - running_mean.data()[j]) * inv_std[j];
                xhat[i * c + j] = h;
                out[i * c + j] = vg.data()[j] * h + vb.data()[j];
            }
        }
        let value = Array::from_vec(vec![r, c], out)?;
        let xhat = Array::from_vec(vec![r, c], xhat)?;
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar node. Returns one adjoint per node that the
    /// output depends on; leaves not on the path get zero when queried via
    /// [`Gradients::wrt_or_zeros`].
    pub fn backward(&self, out: NodeId) -> Result<Gradients> {
        if !self.nodes[out.0].value.is_scalar() {
            return Err(Error::Invalid(
                "backward requires a scalar output node".into(),
            ));
        }
        let mut adj: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[out.0] = Some(Array::scalar(1.0));
        for i in (0..=out.0).rev() {
            if adj[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = adj[i].take().unwrap();
            self.accumulate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients { adj })
    }

    fn accumulate(&self, i: usize, g: &Array, adj: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let mut bump = |id: NodeId, delta: Array| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut adj[id.0] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Param | Op::Constant | Op::Detach => {}
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = array::matmul(g, &array::transpose(vb)).unwrap();
                    bump(*a, d);
                }
                if self.needs(*b) {
                    let d = array::matmul(&array::transpose(va), g).unwrap();
                    bump(*b, d);
                }
            }
            Op::Transpose { x } => bump(*x, array::transpose(g)),
            Op::Add { a, b } => {
                bump(*a, g.clone());
                bump(*b, g.clone());
            }
            Op::Sub { a, b } => {
                bump(*a, g.clone());
                bump(*b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    bump(*a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                }
                if self.needs(*b) {
                    bump(*b, g.zip_map(self.value(*a), |gv, av| gv * av));
                }
            }
            Op::AddRowBias { x, bias } => {
                bump(*x, g.clone());
                if self.needs(*bias) {
                    let c = g.cols();
                    let mut cols = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (acc, &v) in cols.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    bump(*bias, Array::from_vec(vec![c], cols).unwrap());
                }
            }
            Op::Scale { x, c } => bump(*x, g.map(|v| v * c)),
            Op::AddScalar { x } => bump(*x, g.clone()),
            Op::Relu { x } => {
                bump(*x, g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::Exp { x } => bump(*x, g.zip_map(&self.nodes[i].value, |gv, ev| gv * ev)),
            Op::Ln { x } => bump(*x, g.zip_map(self.value(*x), |gv, xv| gv / xv)),
            Op::LogSoftmax { x, softmax } => {
                let c = g.cols();
                let mut d = g.data().to_vec();
                for (drow, srow) in d.chunks_mut(c).zip(softmax.data().chunks(c)) {
                    let rowsum: f64 = drow.iter().sum();
                    for (dv, &sv) in drow.iter_mut().zip(srow) {
                        *dv -= sv * rowsum;
                    }
                }
                bump(*x, Array::from_vec(g.shape().to_vec(), d).unwrap());
            }
            Op::Sum { x } => {
                let gs = g.scalar_value();
                bump(*x, Array::filled(self.value(*x).shape().to_vec(), gs));
            }
            Op::Mean { x } => {
                let n = self.value(*x).len() as f64;
                let gs = g.scalar_value() / n;
                bump(*x, Array::filled(self.value(*x).shape().to_vec(), gs));
            }
            Op::SqNorm { x } => {
                let gs = g.scalar_value();
                bump(*x, self.value(*x).map(|v| 2.0 * gs * v));
            }
            Op::L1Norm { x } => {
                let gs = g.scalar_value();
                bump(
                    *x,
                    self.value(*x).map(|v| {
                        if v > 0.0 {
                            gs
                        } else if v < 0.0 {
                            -gs
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::ReduceMax { x, argmax } => {
                let mut d = Array::zeros(self.value(*x).shape().to_vec());
                d.data_mut()[*argmax] = g.scalar_value();
                bump(*x, d);
            }
            Op::PairwiseDist { x } => {
                let vx = self.value(*x);
                let dist = &self.nodes[i].value;
                let (b, n) = (vx.rows(), vx.cols());
                let mut d = vec![0.0; b * n];
                for p in 0..b {
                    for q in 0..b {
                        if p == q {
                            continue;
                        }
                        let w = (g.at2(p, q) + g.at2(q, p)) / dist.at2(p, q);
                        if w == 0.0 {
                            continue;
                        }
                        let (rp, rq) = (vx.row(p), vx.row(q));
                        let drow = &mut d[p * n..(p + 1) * n];
                        for ((dv, &a), &bq) in drow.iter_mut().zip(rp).zip(rq) {
                            *dv += w * (a - bq);
                        }
                    }
                }
                bump(*x, Array::from_vec(vec![b, n], d).unwrap());
            }
            Op::RowMaxMasked { x, argmax } => {
                let mut d = Array::zeros(self.value(*x).shape().to_vec());
                let c = self.value(*x).cols();
                for (row, (&j, &gv)) in argmax.iter().zip(g.data()).enumerate() {
                    d.data_mut()[row * c + j] = gv;
                }
                bump(*x, d);
            }
            Op::RowMinMasked { x, argmin } => {
                let mut d = Array::zeros(self.value(*x).shape().to_vec());
                let c = self.value(*x).cols();
                for (row, (&j, &gv)) in argmin.iter().zip(g.data()).enumerate() {
                    d.data_mut()[row * c + j] = gv;
                }
                bump(*x, d);
            }
            Op::ConcatRows { a, b } => {
                let (ra, c) = (self.value(*a).rows(), self.value(*a).cols());
                let ga = Array::from_vec(vec![ra, c], g.data()[..ra * c].to_vec()).unwrap();
                let rb = self.value(*b).rows();
                let gb = Array::from_vec(vec![rb, c], g.data()[ra * c..].to_vec()).unwrap();
                bump(*a, ga);
                bump(*b, gb);
            }
            Op::GatherRows { x, idx } => {
                let mut d = Array::zeros(self.value(*x).shape().to_vec());
                let c = self.value(*x).cols();
                for (out_row, &src) in idx.iter().enumerate() {
                    let grow = &g.data()[out_row * c..(out_row + 1) * c];
                    let drow = &mut d.data_mut()[src * c..(src + 1) * c];
                    for (dv, &gv) in drow.iter_mut().zip(grow) {
                        *dv += gv;
                    }
                }
                bump(*x, d);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                ctx,
            } => {
                let (r, c) = (g.rows(), g.cols());
                let rn = r as f64;
                let vg = self.value(*gamma);
                // d_gamma, d_beta
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for i2 in 0..r {
                    for j in 0..c {
                        dg[j] += g.at2(i2, j) * ctx.xhat.at2(i2, j);
                        db[j] += g.at2(i2, j);
                    }
                }
                if self.needs(*x) {
                    // dx = gamma*inv_std*(dy - mean(dy) - xhat*mean(dy*xhat)) columnwise
                    let mut d = vec![0.0; r * c];
                    for j in 0..c {
                        let m_dy = db[j] / rn;
                        let m_dyx = dg[j] / rn;
                        let k = vg.data()[j] * ctx.inv_std[j];
                        for i2 in 0..r {
                            d[i2 * c + j] = k
                                * (g.at2(i2, j) - m_dy - ctx.xhat.at2(i2, j) * m_dyx);
                        }
                    }
                    bump(*x, Array::from_vec(vec![r, c], d).unwrap());
                }
                bump(*gamma, Array::from_vec(vec![c], dg).unwrap());
                bump(*beta, Array::from_vec(vec![c], db).unwrap());
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = (g.rows(), g.cols());
                let vg = self.value(*gamma);
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for i2 in 0..r {
                    for j in 0..c {
                        dg[j] += g.at2(i2, j) * xhat.at2(i2, j);
                        db[j] += g.at2(i2, j);
                    }
                }
                if self.needs(*x) {
                    let mut d = vec![0.0; r * c];
                    for i2 in 0..r {
                        for j in 0..c {
                            d[i2 * c + j] = g.at2(i2, j) * vg.data()[j] * inv_std[j];
                        }
                    }
                    bump(*x, Array::from_vec(vec![r, c], d).unwrap());
                }
                bump(*gamma, Array::from_vec(vec![c], dg).unwrap());
                bump(*beta, Array::from_vec(vec![c], db).unwrap());
            }
        }
    }
}

/// Adjoints from a [`Tape::backward`] pass.
pub struct Gradients {
    adj: Vec<Option<Array>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Array> {
        self.adj[id.0].as_ref()
    }

    /// Adjoint of `id`, or zeros of the node's shape when the output does not
    /// depend on it.
    pub fn wrt_or_zeros(&self, tape: &Tape, id: NodeId) -> Array {
        match self.wrt(id) {
            Some(a) => a.clone(),
            None => Array::zeros(tape.value(id).shape().to_vec()),
        }
    }
}

/// Named parameter collection with stable iteration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    items: Vec<(String, Array)>,
}

impl Params {
    pub fn new() -> Self {
        Params { items: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, value: Array) {
        debug_assert!(
            self.get(name).is_none(),
            "duplicate parameter name {name}"
        );
        self.items.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.items.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.items
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.items.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Leaf bindings created by [`value_and_grad`] / [`grad_check`] before the
/// objective closure runs.
pub struct Binding {
    ids: Vec<(String, NodeId)>,
}

impl Binding {
    pub fn from_pairs(ids: Vec<(String, NodeId)>) -> Self {
        Binding { ids }
    }

    pub fn get(&self, name: &str) -> NodeId {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }
}

fn bind(tape: &mut Tape, params: &Params) -> Result<Binding> {
    let mut ids = Vec::with_capacity(params.len());
    for (name, value) in params.iter() {
        let id = tape.param(value.clone())?;
        ids.push((name.to_string(), id));
    }
    Ok(Binding { ids })
}

/// Evaluate a scalar objective and its gradient with respect to every
/// parameter. Gradients keep parameter shapes; parameters the objective does
/// not touch get zero gradients.
pub fn value_and_grad<F>(build: F, params: &Params) -> Result<(f64, Params)>
where
    F: Fn(&mut Tape, &Binding) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let binding = bind(&mut tape, params)?;
    let out = build(&mut tape, &binding)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::Invalid("objective must be scalar".into()));
    }
    let value = tape.scalar(out);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            node: out.0,
            op: "objective",
        });
    }
    let grads = tape.backward(out)?;
    let mut out_params = Params::new();
    for (name, id) in &binding.ids {
        out_params.insert(name, grads.wrt_or_zeros(&tape, *id));
    }
    Ok((value, out_params))
}

fn eval_value<F>(build: &F, params: &Params) -> Result<f64>
where
    F: Fn(&mut Tape, &Binding) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let binding = bind(&mut tape, params)?;
    let out = build(&mut tape, &binding)?;
    Ok(tape.scalar(out))
}

/// Per-parameter worst relative error between analytic and central
/// finite-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, (_, e)| m.max(*e))
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, err) in &self.entries {
            writeln!(f, "{name}: max rel err {err:.3e}")?;
        }
        Ok(())
    }
}

/// Compare analytic gradients against central finite differences.
///
/// Relative error per entry is `|a - f| / max(|a|, |f|, 1e-8)`. The caller is
/// responsible for evaluating away from kinks (ReLU corners, max ties).
pub fn grad_check<F>(build: F, params: &Params, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Binding) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid(format!("grad_check eps must be > 0, got {eps}")));
    }
    let (_, analytic) = value_and_grad(&build, params)?;
    let mut entries = Vec::new();
    for (name, base) in params.iter() {
        let mut worst = 0.0_f64;
        for k in 0..base.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[k] += eps;
            let fp = eval_value(&build, &plus)?;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[k] -= eps;
            let fm = eval_value(&build, &minus)?;
            let fd = (fp - fm) / (2.0 * eps);
            let a = analytic.get(name).unwrap().data()[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        entries.push((name.to_string(), worst));
    }
    Ok(GradCheckReport { entries })
}
