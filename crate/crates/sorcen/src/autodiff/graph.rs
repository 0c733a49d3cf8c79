//! Reverse-mode tape over dense dynamic-dimension arrays.
//!
//! A `Graph` owns every tensor created during one forward pass. Ops append
//! nodes that remember their parents; `backward` walks the tape in reverse
//! creation order, which is a valid topological order because ops can only
//! reference earlier nodes. Parameters are leased in from a [`ParamStore`]
//! at the start of a step and their gradients exported back afterwards.
//!
//! Values, gradients, and op records live in parallel vectors so the
//! backward sweep can borrow a parent's values while accumulating into
//! another parent's gradient without copying either.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, Axis, Ix2, Ix3, IxDyn};

use super::scalar::Scalar;
use super::store::ParamStore;
use crate::error::{Result, SorcenError};
use crate::rng::Prng;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

const LN_EPS: f64 = 1e-6;
const L2_EPS_SQ: f64 = 1e-24;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    MatMul { a: Tensor, b: Tensor, transpose_b: bool },
    BatchMatMul { a: Tensor, b: Tensor, transpose_b: bool },
    Add { a: Tensor, b: Tensor },
    AddBias { x: Tensor, bias: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    Scale { x: Tensor, c: T },
    Gelu { x: Tensor, tanh_u: Vec<T> },
    LayerNorm { x: Tensor, gamma: Tensor, beta: Tensor },
    Softmax { x: Tensor },
    LogSoftmax { x: Tensor },
    Embedding { table: Tensor, ids: Vec<usize> },
    MeanAxis { x: Tensor, axis: usize },
    L2Normalize { x: Tensor },
    Dropout { x: Tensor, scaled_mask: ArrayD<T> },
    SelectRows { x: Tensor, indices: Vec<usize> },
    SplitHeads { x: Tensor, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Tensor, batch: usize, seq: usize, heads: usize },
    Reshape { x: Tensor },
    SumAll { x: Tensor },
    NllPicked { logp: Tensor, targets: Vec<usize>, weights: Vec<T> },
    RowWeightedSumAll { x: Tensor, weights: Vec<T> },
}

pub struct Graph<T: Scalar> {
    values: Vec<ArrayD<T>>,
    grads: Vec<Option<ArrayD<T>>>,
    rg: Vec<bool>,
    ops: Vec<Op<T>>,
    bindings: Vec<(String, Tensor)>,
    grad_enabled: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        crate::tune_allocator();
        Graph {
            values: Vec::new(),
            grads: Vec::new(),
            rg: Vec::new(),
            ops: Vec::new(),
            bindings: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; nothing requires grad and
    /// `backward` is never expected.
    pub fn inference() -> Self {
        Graph { grad_enabled: false, ..Graph::new() }
    }

    fn push(&mut self, values: ArrayD<T>, requires_grad: bool, op: Op<T>) -> Tensor {
        let rg = requires_grad && self.grad_enabled;
        self.values.push(values);
        self.grads.push(None);
        self.rg.push(rg);
        self.ops.push(op);
        Tensor(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self, t: Tensor) -> &ArrayD<T> {
        &self.values[t.0]
    }

    pub fn grad(&self, t: Tensor) -> Option<&ArrayD<T>> {
        self.grads[t.0].as_ref()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.rg[t.0]
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        self.values[t.0].shape()
    }

    // ---- node creation -------------------------------------------------

    pub fn constant(&mut self, values: ArrayD<T>) -> Tensor {
        self.push(values, false, Op::Leaf)
    }

    pub fn leaf(&mut self, values: ArrayD<T>, requires_grad: bool) -> Tensor {
        self.push(values, requires_grad, Op::Leaf)
    }

    /// Lease a named parameter into the graph as a differentiable leaf.
    /// Its gradient is exported by [`Graph::export_grads`].
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Tensor> {
        let p = store
            .get(name)
            .ok_or_else(|| SorcenError::invalid(format!("unknown parameter {name:?}")))?;
        let t = self.push(p.values.clone(), true, Op::Leaf);
        if self.grad_enabled {
            self.bindings.push((name.to_string(), t));
        }
        Ok(t)
    }

    /// Lease a named parameter as a constant (stop-gradient) leaf.
    pub fn frozen_param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Tensor> {
        let p = store
            .get(name)
            .ok_or_else(|| SorcenError::invalid(format!("unknown parameter {name:?}")))?;
        Ok(self.push(p.values.clone(), false, Op::Leaf))
    }

    // ---- shape utilities -----------------------------------------------

    fn want_same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(SorcenError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn dims2(&self, t: Tensor) -> Result<(usize, usize)> {
        let s = self.shape(t);
        if s.len() != 2 {
            return Err(SorcenError::invalid(format!("expected 2-d tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn last_dim(&self, t: Tensor) -> usize {
        *self.shape(t).last().unwrap_or(&1)
    }

    fn flat(&self, t: Tensor) -> &[T] {
        self.values[t.0].as_slice().expect("graph arrays are standard layout")
    }

    // ---- ops -------------------------------------------------------------

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Tensor, b: Tensor, transpose_b: bool) -> Result<Tensor> {
        let (m, ak) = self.dims2(a)?;
        let (b0, b1) = self.dims2(b)?;
        let (bk, n) = if transpose_b { (b1, b0) } else { (b0, b1) };
        if ak != bk {
            return Err(SorcenError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let av = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.values[b.0].view().into_dimensionality::<Ix2>().unwrap();
        let mut out = Array2::<T>::zeros((m, n));
        if transpose_b {
            general_mat_mul(T::one(), &av, &bv.t(), T::zero(), &mut out.view_mut());
        } else {
            general_mat_mul(T::one(), &av, &bv, T::zero(), &mut out.view_mut());
        }
        let rg = self.rg[a.0] || self.rg[b.0];
        Ok(self.push(out.into_dyn(), rg, Op::MatMul { a, b, transpose_b }))
    }

    /// Batched matmul over the leading axis: `(g, n, k) x (g, k, m)`, or
    /// `(g, n, k) x (g, m, k)` with `transpose_b`.
    pub fn bmm(&mut self, a: Tensor, b: Tensor, transpose_b: bool) -> Result<Tensor> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] {
            return Err(SorcenError::ShapeMismatch { op: "bmm", lhs: ash, rhs: bsh });
        }
        let (bk, bm) = if transpose_b { (bsh[2], bsh[1]) } else { (bsh[1], bsh[2]) };
        if ash[2] != bk {
            return Err(SorcenError::ShapeMismatch { op: "bmm", lhs: ash, rhs: bsh });
        }
        let (groups, n, m) = (ash[0], ash[1], bm);
        let mut out = ArrayD::<T>::zeros(IxDyn(&[groups, n, m]));
        {
            let a3 = self.values[a.0].view().into_dimensionality::<Ix3>().unwrap();
            let b3 = self.values[b.0].view().into_dimensionality::<Ix3>().unwrap();
            let mut o3 = out.view_mut().into_dimensionality::<Ix3>().unwrap();
            for i in 0..groups {
                let ai = a3.index_axis(Axis(0), i);
                let bi = b3.index_axis(Axis(0), i);
                let mut oi = o3.index_axis_mut(Axis(0), i);
                if transpose_b {
                    general_mat_mul(T::one(), &ai, &bi.t(), T::zero(), &mut oi);
                } else {
                    general_mat_mul(T::one(), &ai, &bi, T::zero(), &mut oi);
                }
            }
        }
        let rg = self.rg[a.0] || self.rg[b.0];
        Ok(self.push(out, rg, Op::BatchMatMul { a, b, transpose_b }))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.want_same_shape("add", a, b)?;
        let out = &self.values[a.0] + &self.values[b.0];
        let rg = self.rg[a.0] || self.rg[b.0];
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    /// Broadcast-add a 1-d bias over the last axis.
    pub fn add_bias(&mut self, x: Tensor, bias: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if bs.len() != 1 || xs.last() != Some(&bs[0]) {
            return Err(SorcenError::ShapeMismatch { op: "add_bias", lhs: xs, rhs: bs });
        }
        let d = bs[0];
        let mut out = self.values[x.0].clone();
        {
            let flat = out.as_slice_mut().unwrap();
            let bias_v = self.values[bias.0].as_slice().unwrap();
            for row in flat.chunks_exact_mut(d) {
                for (o, &b) in row.iter_mut().zip(bias_v) {
                    *o += b;
                }
            }
        }
        let rg = self.rg[x.0] || self.rg[bias.0];
        Ok(self.push(out, rg, Op::AddBias { x, bias }))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.want_same_shape("sub", a, b)?;
        let out = &self.values[a.0] - &self.values[b.0];
        let rg = self.rg[a.0] || self.rg[b.0];
        Ok(self.push(out, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.want_same_shape("mul", a, b)?;
        let out = &self.values[a.0] * &self.values[b.0];
        let rg = self.rg[a.0] || self.rg[b.0];
        Ok(self.push(out, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Tensor, c: T) -> Tensor {
        let out = self.values[x.0].mapv(|v| v * c);
        let rg = self.rg[x.0];
        self.push(out, rg, Op::Scale { x, c })
    }

    pub fn gelu(&mut self, x: Tensor) -> Tensor {
        let c = T::of_f64(GELU_C);
        let a3 = T::of_f64(GELU_A);
        let half = T::of_f64(0.5);
        let src = self.flat(x);
        let mut tanh_u = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        for &v in src {
            let u = c * (v + a3 * v * v * v);
            let t = rational_tanh(u);
            tanh_u.push(t);
            out.push(half * v * (T::one() + t));
        }
        let out = ArrayD::from_shape_vec(self.values[x.0].raw_dim(), out).unwrap();
        let rg = self.rg[x.0];
        self.push(out, rg, Op::Gelu { x, tanh_u })
    }

    /// Layer normalization over the last axis with learned scale and shift.
    /// Epsilon sits inside the square root, so a zero-variance lane maps to
    /// the shift alone.
    pub fn layer_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| SorcenError::invalid("layer_norm on 0-d tensor"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(SorcenError::ShapeMismatch {
                op: "layer_norm",
                lhs: xs,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let mut out = self.values[x.0].clone();
        {
            let flat = out.as_slice_mut().unwrap();
            let gamma_v = self.values[gamma.0].as_slice().unwrap();
            let beta_v = self.values[beta.0].as_slice().unwrap();
            for lane in flat.chunks_exact_mut(d) {
                let (mean, rstd) = lane_mean_rstd(lane);
                for j in 0..d {
                    lane[j] = (lane[j] - mean) * rstd * gamma_v[j] + beta_v[j];
                }
            }
        }
        let rg = self.rg[x.0] || self.rg[gamma.0] || self.rg[beta.0];
        Ok(self.push(out, rg, Op::LayerNorm { x, gamma, beta }))
    }

    pub fn softmax(&mut self, x: Tensor) -> Tensor {
        let d = self.last_dim(x);
        let mut out = self.values[x.0].clone();
        {
            let flat = out.as_slice_mut().unwrap();
            for lane in flat.chunks_exact_mut(d) {
                let mut max = T::neg_infinity();
                for v in lane.iter() {
                    max = max.max(*v);
                }
                let mut sum = T::zero();
                for v in lane.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                let inv = T::one() / sum;
                for v in lane.iter_mut() {
                    *v *= inv;
                }
            }
        }
        let rg = self.rg[x.0];
        self.push(out, rg, Op::Softmax { x })
    }

    pub fn log_softmax(&mut self, x: Tensor) -> Tensor {
        let d = self.last_dim(x);
        let mut out = self.values[x.0].clone();
        {
            let flat = out.as_slice_mut().unwrap();
            for lane in flat.chunks_exact_mut(d) {
                let mut max = T::neg_infinity();
                for v in lane.iter() {
                    max = max.max(*v);
                }
                let mut sum = T::zero();
                for v in lane.iter() {
                    sum += (*v - max).exp();
                }
                let lse = max + sum.ln();
                for v in lane.iter_mut() {
                    *v -= lse;
                }
            }
        }
        let rg = self.rg[x.0];
        self.push(out, rg, Op::LogSoftmax { x })
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn embedding(&mut self, table: Tensor, ids: &[usize]) -> Result<Tensor> {
        let (rows, d) = self.dims2(table)?;
        let mut out = vec![T::zero(); ids.len() * d];
        {
            let tv = self.flat(table);
            for (i, &id) in ids.iter().enumerate() {
                if id >= rows {
                    return Err(SorcenError::invalid(format!(
                        "embedding id {id} out of range for table with {rows} rows"
                    )));
                }
                out[i * d..(i + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[ids.len(), d]), out).unwrap();
        let rg = self.rg[table.0];
        Ok(self.push(out, rg, Op::Embedding { table, ids: ids.to_vec() }))
    }

    pub fn mean_axis(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(SorcenError::invalid(format!("mean_axis {axis} out of range for {xs:?}")));
        }
        let out = self.values[x.0]
            .mean_axis(Axis(axis))
            .ok_or_else(|| SorcenError::invalid("mean over empty axis"))?;
        let rg = self.rg[x.0];
        Ok(self.push(out, rg, Op::MeanAxis { x, axis }))
    }

    /// Normalize each last-axis lane to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Tensor) -> Tensor {
        let d = self.last_dim(x);
        let mut out = self.values[x.0].clone();
        {
            let flat = out.as_slice_mut().unwrap();
            for lane in flat.chunks_exact_mut(d) {
                let inv = T::one() / lane_safe_norm(lane);
                for v in lane.iter_mut() {
                    *v *= inv;
                }
            }
        }
        let rg = self.rg[x.0];
        self.push(out, rg, Op::L2Normalize { x })
    }

    /// Train-mode dropout with inverted scaling; for `rate == 0` this is the
    /// identity. Eval mode simply never calls it.
    pub fn dropout(&mut self, x: Tensor, rate: f64, rng: &mut Prng) -> Tensor {
        if rate == 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let inv = T::of_f64(1.0 / keep);
        let mask = self.values[x.0]
            .mapv(|_| if rng.uniform() < keep { inv } else { T::zero() });
        let out = &self.values[x.0] * &mask;
        let rg = self.rg[x.0];
        self.push(out, rg, Op::Dropout { x, scaled_mask: mask })
    }

    /// Gather rows of a 2-d tensor; indices may repeat.
    pub fn select_rows(&mut self, x: Tensor, indices: &[usize]) -> Result<Tensor> {
        let (rows, d) = self.dims2(x)?;
        let mut out = vec![T::zero(); indices.len() * d];
        {
            let xv = self.flat(x);
            for (i, &idx) in indices.iter().enumerate() {
                if idx >= rows {
                    return Err(SorcenError::invalid(format!(
                        "select_rows index {idx} out of range for {rows} rows"
                    )));
                }
                out[i * d..(i + 1) * d].copy_from_slice(&xv[idx * d..(idx + 1) * d]);
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[indices.len(), d]), out).unwrap();
        let rg = self.rg[x.0];
        Ok(self.push(out, rg, Op::SelectRows { x, indices: indices.to_vec() }))
    }

    /// `(batch·seq, heads·hd) -> (batch·heads, seq, hd)`.
    pub fn split_heads(&mut self, x: Tensor, batch: usize, seq: usize, heads: usize) -> Result<Tensor> {
        let (rows, cols) = self.dims2(x)?;
        if rows != batch * seq || cols % heads != 0 {
            return Err(SorcenError::invalid(format!(
                "split_heads: shape {:?} incompatible with batch={batch} seq={seq} heads={heads}",
                self.shape(x)
            )));
        }
        let hd = cols / heads;
        let mut out = vec![T::zero(); rows * cols];
        {
            let src = self.flat(x);
            for b in 0..batch {
                for s in 0..seq {
                    let row = (b * seq + s) * heads * hd;
                    for h in 0..heads {
                        let from = row + h * hd;
                        let to = ((b * heads + h) * seq + s) * hd;
                        out[to..to + hd].copy_from_slice(&src[from..from + hd]);
                    }
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[batch * heads, seq, hd]), out).unwrap();
        let rg = self.rg[x.0];
        Ok(self.push(out, rg, Op::SplitHeads { x, batch, seq, heads }))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Tensor, batch: usize, seq: usize, heads: usize) -> Result<Tensor> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[0] != batch * heads || xs[1] != seq {
            return Err(SorcenError::invalid(format!(
                "merge_heads: shape {xs:?} incompatible with batch={batch} seq={seq} heads={heads}"
            )));
        }
        let hd = xs[2];
        let mut out = vec![T::zero(); batch * seq * heads * hd];
        {
            let src = self.flat(x);
            for b in 0..batch {
                for s in 0..seq {
                    let row = (b * seq + s) * heads * hd;
                    for h in 0..heads {
                        let from = ((b * heads + h) * seq + s) * hd;
                        out[row + h * hd..row + (h + 1) * hd]
                            .copy_from_slice(&src[from..from + hd]);
                    }
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[batch * seq, heads * hd]), out).unwrap();
        let rg = self.rg[x.0];
        Ok(self.push(out, rg, Op::MergeHeads { x, batch, seq, heads }))
    }

    /// Reinterpret the buffer with a new shape of equal element count.
    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.values[x.0].len() {
            return Err(SorcenError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.values[x.0]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .map_err(|e| SorcenError::invalid(format!("reshape: {e}")))?;
        let rg = self.rg[x.0];
        Ok(self.push(out, rg, Op::Reshape { x }))
    }

    pub fn sum_all(&mut self, x: Tensor) -> Tensor {
        let s = self.values[x.0].sum();
        let rg = self.rg[x.0];
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), rg, Op::SumAll { x })
    }

    /// `-Σ_i weights[i] · logp[i, targets[i]]` as a scalar.
    pub fn nll_picked(&mut self, logp: Tensor, targets: &[usize], weights: &[T]) -> Result<Tensor> {
        let (rows, cols) = self.dims2(logp)?;
        if targets.len() != rows || weights.len() != rows {
            return Err(SorcenError::invalid(format!(
                "nll_picked: {rows} rows vs {} targets / {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let mut total = T::zero();
        {
            let lv = self.flat(logp);
            for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                if t >= cols {
                    return Err(SorcenError::invalid(format!(
                        "nll_picked: target {t} out of range at row {i}"
                    )));
                }
                total = total - w * lv[i * cols + t];
            }
        }
        let rg = self.rg[logp.0];
        Ok(self.push(
            ArrayD::from_elem(IxDyn(&[1]), total),
            rg,
            Op::NllPicked { logp, targets: targets.to_vec(), weights: weights.to_vec() },
        ))
    }

    /// `Σ_i weights[i] · Σ_j x[i, j]` as a scalar.
    pub fn row_weighted_sum_all(&mut self, x: Tensor, weights: &[T]) -> Result<Tensor> {
        let (rows, cols) = self.dims2(x)?;
        if weights.len() != rows {
            return Err(SorcenError::invalid(format!(
                "row_weighted_sum_all: {rows} rows vs {} weights",
                weights.len()
            )));
        }
        let mut total = T::zero();
        {
            let xv = self.flat(x);
            for (i, &w) in weights.iter().enumerate() {
                let mut s = T::zero();
                for v in &xv[i * cols..(i + 1) * cols] {
                    s += *v;
                }
                total = total + w * s;
            }
        }
        let rg = self.rg[x.0];
        Ok(self.push(
            ArrayD::from_elem(IxDyn(&[1]), total),
            rg,
            Op::RowWeightedSumAll { x, weights: weights.to_vec() },
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Populates gradients of every
    /// reachable node that requires grad; leaves everything else untouched.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(SorcenError::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg[loss.0] {
            return Err(SorcenError::invalid("backward on a tensor that does not require grad"));
        }
        self.grads[loss.0] = Some(ArrayD::from_elem(self.values[loss.0].raw_dim(), T::one()));

        for i in (0..=loss.0).rev() {
            if !self.rg[i] || self.grads[i].is_none() {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            dispatch_backward(&self.ops[i], &self.values[i], &g, &self.values, &mut self.grads, &self.rg);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Accumulate the gradients of every leased parameter into the store.
    pub fn export_grads(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (name, t) in &self.bindings {
            if let Some(g) = self.grads[t.0].as_ref() {
                let p = store.get_mut(name).ok_or_else(|| {
                    SorcenError::invalid(format!("export to unknown parameter {name:?}"))
                })?;
                p.grad += g;
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Branch-free rational approximation of tanh (the classic 7/6-degree
/// minimax pair), accurate to about one f32 ulp. Scalar `tanh` calls a
/// libm routine per element and cannot vectorize; this polynomial form
/// does, and the activation runs over every hidden unit of every batch.
/// The backward pass uses `1 - t^2` with the same cached `t`, so gradients
/// stay consistent with the forward values to the approximation's accuracy.
#[inline]
fn rational_tanh<T: Scalar>(u: T) -> T {
    let clamp = T::of_f64(7.905_339_813_232_422);
    let x = u.min(clamp).max(T::zero() - clamp);
    let x2 = x * x;
    let a1 = T::of_f64(4.893_524_558_917_86e-3);
    let a3 = T::of_f64(6.372_619_288_754_36e-4);
    let a5 = T::of_f64(1.485_722_357_179_79e-5);
    let a7 = T::of_f64(5.122_297_090_371_14e-8);
    let a9 = T::of_f64(-8.604_671_522_137_35e-11);
    let a11 = T::of_f64(2.000_187_904_824_77e-13);
    let a13 = T::of_f64(-2.760_768_477_423_55e-16);
    let b0 = T::of_f64(4.893_525_185_543_85e-3);
    let b2 = T::of_f64(2.268_434_632_439_00e-3);
    let b4 = T::of_f64(1.185_347_056_866_54e-4);
    let b6 = T::of_f64(1.198_258_394_667_02e-6);
    let p = ((((((a13 * x2 + a11) * x2 + a9) * x2 + a7) * x2 + a5) * x2 + a3) * x2 + a1) * x;
    let q = ((b6 * x2 + b4) * x2 + b2) * x2 + b0;
    p / q
}

fn lane_mean_rstd<T: Scalar>(lane: &[T]) -> (T, T) {
    let d = T::of_f64(lane.len() as f64);
    let mut mean = T::zero();
    for v in lane {
        mean += *v;
    }
    mean = mean / d;
    let mut var = T::zero();
    for v in lane {
        let c = *v - mean;
        var += c * c;
    }
    var = var / d;
    let rstd = T::one() / (var + T::of_f64(LN_EPS)).sqrt();
    (mean, rstd)
}

fn lane_safe_norm<T: Scalar>(lane: &[T]) -> T {
    let mut s = T::zero();
    for v in lane {
        s += *v * *v;
    }
    (s + T::of_f64(L2_EPS_SQ)).sqrt()
}

type Grads<T> = [Option<ArrayD<T>>];

fn ensure_grad<'a, T: Scalar>(grads: &'a mut Grads<T>, t: usize, dim: IxDyn) -> &'a mut ArrayD<T> {
    if grads[t].is_none() {
        grads[t] = Some(ArrayD::zeros(dim));
    }
    grads[t].as_mut().unwrap()
}

/// Move `delta` in when the slot is empty, otherwise add.
fn accum_owned<T: Scalar>(grads: &mut Grads<T>, rg: &[bool], t: Tensor, delta: ArrayD<T>) {
    if !rg[t.0] {
        return;
    }
    match &mut grads[t.0] {
        slot @ None => *slot = Some(delta),
        Some(g) => *g += &delta,
    }
}

fn accum_ref<T: Scalar>(grads: &mut Grads<T>, rg: &[bool], t: Tensor, delta: &ArrayD<T>) {
    if !rg[t.0] {
        return;
    }
    match &mut grads[t.0] {
        slot @ None => *slot = Some(delta.clone()),
        Some(g) => *g += delta,
    }
}

fn dispatch_backward<T: Scalar>(
    op: &Op<T>,
    out_values: &ArrayD<T>,
    g: &ArrayD<T>,
    values: &[ArrayD<T>],
    grads: &mut Grads<T>,
    rg: &[bool],
) {
    match op {
        Op::Leaf => {}

        Op::MatMul { a, b, transpose_b } => {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            if rg[a.0] {
                let bv = values[b.0].view().into_dimensionality::<Ix2>().unwrap();
                let ga = ensure_grad(grads, a.0, values[a.0].raw_dim());
                let mut ga2 = ga.view_mut().into_dimensionality::<Ix2>().unwrap();
                if *transpose_b {
                    general_mat_mul(T::one(), &g2, &bv, T::one(), &mut ga2);
                } else {
                    general_mat_mul(T::one(), &g2, &bv.t(), T::one(), &mut ga2);
                }
            }
            if rg[b.0] {
                let av = values[a.0].view().into_dimensionality::<Ix2>().unwrap();
                let gb = ensure_grad(grads, b.0, values[b.0].raw_dim());
                let mut gb2 = gb.view_mut().into_dimensionality::<Ix2>().unwrap();
                if *transpose_b {
                    general_mat_mul(T::one(), &g2.t(), &av, T::one(), &mut gb2);
                } else {
                    general_mat_mul(T::one(), &av.t(), &g2, T::one(), &mut gb2);
                }
            }
        }

        Op::BatchMatMul { a, b, transpose_b } => {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let groups = g3.shape()[0];
            if rg[a.0] {
                let b3 = values[b.0].view().into_dimensionality::<Ix3>().unwrap();
                let ga = ensure_grad(grads, a.0, values[a.0].raw_dim());
                let mut ga3 = ga.view_mut().into_dimensionality::<Ix3>().unwrap();
                for i in 0..groups {
                    let gi = g3.index_axis(Axis(0), i);
                    let bi = b3.index_axis(Axis(0), i);
                    let mut gai = ga3.index_axis_mut(Axis(0), i);
                    if *transpose_b {
                        general_mat_mul(T::one(), &gi, &bi, T::one(), &mut gai);
                    } else {
                        general_mat_mul(T::one(), &gi, &bi.t(), T::one(), &mut gai);
                    }
                }
            }
            if rg[b.0] {
                let a3 = values[a.0].view().into_dimensionality::<Ix3>().unwrap();
                let gb = ensure_grad(grads, b.0, values[b.0].raw_dim());
                let mut gb3 = gb.view_mut().into_dimensionality::<Ix3>().unwrap();
                for i in 0..groups {
                    let gi = g3.index_axis(Axis(0), i);
                    let ai = a3.index_axis(Axis(0), i);
                    let mut gbi = gb3.index_axis_mut(Axis(0), i);
                    if *transpose_b {
                        general_mat_mul(T::one(), &gi.t(), &ai, T::one(), &mut gbi);
                    } else {
                        general_mat_mul(T::one(), &ai.t(), &gi, T::one(), &mut gbi);
                    }
                }
            }
        }

        Op::Add { a, b } => {
            accum_ref(grads, rg, *a, g);
            accum_ref(grads, rg, *b, g);
        }

        Op::AddBias { x, bias } => {
            accum_ref(grads, rg, *x, g);
            if rg[bias.0] {
                let d = values[bias.0].len();
                let gs = g.as_slice().unwrap();
                let gb = ensure_grad(grads, bias.0, values[bias.0].raw_dim());
                let gb = gb.as_slice_mut().unwrap();
                for row in gs.chunks_exact(d) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
        }

        Op::Sub { a, b } => {
            accum_ref(grads, rg, *a, g);
            if rg[b.0] {
                accum_owned(grads, rg, *b, g.mapv(|v| T::zero() - v));
            }
        }

        Op::Mul { a, b } => {
            if rg[a.0] {
                let delta = g * &values[b.0];
                accum_owned(grads, rg, *a, delta);
            }
            if rg[b.0] {
                let delta = g * &values[a.0];
                accum_owned(grads, rg, *b, delta);
            }
        }

        Op::Scale { x, c } => {
            if rg[x.0] {
                accum_owned(grads, rg, *x, g.mapv(|v| v * *c));
            }
        }

        Op::Gelu { x, tanh_u } => {
            if rg[x.0] {
                let c = T::of_f64(GELU_C);
                let a3 = T::of_f64(GELU_A);
                let half = T::of_f64(0.5);
                let three = T::of_f64(3.0);
                let xv = values[x.0].as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut delta = Vec::with_capacity(xv.len());
                for i in 0..xv.len() {
                    let v = xv[i];
                    let t = tanh_u[i];
                    let du = c * (T::one() + three * a3 * v * v);
                    let dy = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
                    delta.push(gs[i] * dy);
                }
                let delta = ArrayD::from_shape_vec(values[x.0].raw_dim(), delta).unwrap();
                accum_owned(grads, rg, *x, delta);
            }
        }

        Op::LayerNorm { x, gamma, beta } => {
            let d = values[gamma.0].len();
            let dn = T::of_f64(d as f64);
            let xv = values[x.0].as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let gamma_v = values[gamma.0].as_slice().unwrap();
            let mut dx = vec![T::zero(); xv.len()];
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            for ((x_lane, g_lane), dx_lane) in xv
                .chunks_exact(d)
                .zip(gs.chunks_exact(d))
                .zip(dx.chunks_exact_mut(d))
            {
                let (mean, rstd) = lane_mean_rstd(x_lane);
                let mut sum_gy = T::zero();
                let mut sum_gy_xhat = T::zero();
                for j in 0..d {
                    let xhat = (x_lane[j] - mean) * rstd;
                    let gy = g_lane[j] * gamma_v[j];
                    sum_gy += gy;
                    sum_gy_xhat += gy * xhat;
                    dgamma[j] += g_lane[j] * xhat;
                    dbeta[j] += g_lane[j];
                }
                let mean_gy = sum_gy / dn;
                let mean_gy_xhat = sum_gy_xhat / dn;
                for j in 0..d {
                    let xhat = (x_lane[j] - mean) * rstd;
                    let gy = g_lane[j] * gamma_v[j];
                    dx_lane[j] = rstd * (gy - mean_gy - xhat * mean_gy_xhat);
                }
            }
            let dx = ArrayD::from_shape_vec(values[x.0].raw_dim(), dx).unwrap();
            accum_owned(grads, rg, *x, dx);
            if rg[gamma.0] {
                let gg = ensure_grad(grads, gamma.0, values[gamma.0].raw_dim());
                let gg = gg.as_slice_mut().unwrap();
                for j in 0..d {
                    gg[j] += dgamma[j];
                }
            }
            if rg[beta.0] {
                let gb = ensure_grad(grads, beta.0, values[beta.0].raw_dim());
                let gb = gb.as_slice_mut().unwrap();
                for j in 0..d {
                    gb[j] += dbeta[j];
                }
            }
        }

        Op::Softmax { x } => {
            if rg[x.0] {
                let d = *out_values.shape().last().unwrap();
                let yv = out_values.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut dx = vec![T::zero(); yv.len()];
                for ((y_lane, g_lane), dx_lane) in yv
                    .chunks_exact(d)
                    .zip(gs.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                {
                    let mut dot = T::zero();
                    for j in 0..d {
                        dot += y_lane[j] * g_lane[j];
                    }
                    for j in 0..d {
                        dx_lane[j] = y_lane[j] * (g_lane[j] - dot);
                    }
                }
                let dx = ArrayD::from_shape_vec(out_values.raw_dim(), dx).unwrap();
                accum_owned(grads, rg, *x, dx);
            }
        }

        Op::LogSoftmax { x } => {
            if rg[x.0] {
                let d = *out_values.shape().last().unwrap();
                let yv = out_values.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut dx = vec![T::zero(); yv.len()];
                for ((y_lane, g_lane), dx_lane) in yv
                    .chunks_exact(d)
                    .zip(gs.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                {
                    let mut gsum = T::zero();
                    for v in g_lane {
                        gsum += *v;
                    }
                    for j in 0..d {
                        dx_lane[j] = g_lane[j] - y_lane[j].exp() * gsum;
                    }
                }
                let dx = ArrayD::from_shape_vec(out_values.raw_dim(), dx).unwrap();
                accum_owned(grads, rg, *x, dx);
            }
        }

        Op::Embedding { table, ids } => {
            if rg[table.0] {
                let d = values[table.0].shape()[1];
                let gs = g.as_slice().unwrap();
                let gt = ensure_grad(grads, table.0, values[table.0].raw_dim());
                let gt = gt.as_slice_mut().unwrap();
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * d..(id + 1) * d];
                    let src = &gs[i * d..(i + 1) * d];
                    for j in 0..d {
                        dst[j] += src[j];
                    }
                }
            }
        }

        Op::MeanAxis { x, axis } => {
            if rg[x.0] {
                let n = values[x.0].shape()[*axis];
                let scale = T::of_f64(1.0 / n as f64);
                let gx = ensure_grad(grads, x.0, values[x.0].raw_dim());
                for mut sub in gx.axis_iter_mut(Axis(*axis)) {
                    sub.zip_mut_with(g, |d, gv| *d += *gv * scale);
                }
            }
        }

        Op::L2Normalize { x } => {
            if rg[x.0] {
                let d = *out_values.shape().last().unwrap();
                let xv = values[x.0].as_slice().unwrap();
                let yv = out_values.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut dx = vec![T::zero(); yv.len()];
                for (((x_lane, y_lane), g_lane), dx_lane) in xv
                    .chunks_exact(d)
                    .zip(yv.chunks_exact(d))
                    .zip(gs.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                {
                    let inv = T::one() / lane_safe_norm(x_lane);
                    let mut dot = T::zero();
                    for j in 0..d {
                        dot += y_lane[j] * g_lane[j];
                    }
                    for j in 0..d {
                        dx_lane[j] = (g_lane[j] - y_lane[j] * dot) * inv;
                    }
                }
                let dx = ArrayD::from_shape_vec(out_values.raw_dim(), dx).unwrap();
                accum_owned(grads, rg, *x, dx);
            }
        }

        Op::Dropout { x, scaled_mask } => {
            if rg[x.0] {
                accum_owned(grads, rg, *x, g * scaled_mask);
            }
        }

        Op::SelectRows { x, indices } => {
            if rg[x.0] {
                let d = values[x.0].shape()[1];
                let gs = g.as_slice().unwrap();
                let gx = ensure_grad(grads, x.0, values[x.0].raw_dim());
                let gx = gx.as_slice_mut().unwrap();
                for (i, &idx) in indices.iter().enumerate() {
                    let dst = &mut gx[idx * d..(idx + 1) * d];
                    let src = &gs[i * d..(i + 1) * d];
                    for j in 0..d {
                        dst[j] += src[j];
                    }
                }
            }
        }

        Op::SplitHeads { x, batch, seq, heads } => {
            if rg[x.0] {
                let hd = g.shape()[2];
                let gs = g.as_slice().unwrap();
                let gx = ensure_grad(grads, x.0, values[x.0].raw_dim());
                let dst = gx.as_slice_mut().unwrap();
                for b in 0..*batch {
                    for s in 0..*seq {
                        let row = (b * seq + s) * heads * hd;
                        for h in 0..*heads {
                            let from = ((b * heads + h) * seq + s) * hd;
                            for j in 0..hd {
                                dst[row + h * hd + j] += gs[from + j];
                            }
                        }
                    }
                }
            }
        }

        Op::MergeHeads { x, batch, seq, heads } => {
            if rg[x.0] {
                let hd = values[x.0].shape()[2];
                let gs = g.as_slice().unwrap();
                let gx = ensure_grad(grads, x.0, values[x.0].raw_dim());
                let dst = gx.as_slice_mut().unwrap();
                for b in 0..*batch {
                    for s in 0..*seq {
                        let row = (b * seq + s) * heads * hd;
                        for h in 0..*heads {
                            let to = ((b * heads + h) * seq + s) * hd;
                            for j in 0..hd {
                                dst[to + j] += gs[row + h * hd + j];
                            }
                        }
                    }
                }
            }
        }

        Op::Reshape { x } => {
            if rg[x.0] {
                let back = g
                    .clone()
                    .into_shape_with_order(values[x.0].raw_dim())
                    .expect("reshape backward: element count preserved");
                accum_owned(grads, rg, *x, back);
            }
        }

        Op::SumAll { x } => {
            if rg[x.0] {
                let gv = g[[0]];
                accum_owned(grads, rg, *x, ArrayD::from_elem(values[x.0].raw_dim(), gv));
            }
        }

        Op::NllPicked { logp, targets, weights } => {
            if rg[logp.0] {
                let cols = values[logp.0].shape()[1];
                let gv = g[[0]];
                let gl = ensure_grad(grads, logp.0, values[logp.0].raw_dim());
                let gl = gl.as_slice_mut().unwrap();
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    gl[i * cols + t] = gl[i * cols + t] - w * gv;
                }
            }
        }

        Op::RowWeightedSumAll { x, weights } => {
            if rg[x.0] {
                let cols = values[x.0].shape()[1];
                let gv = g[[0]];
                let gx = ensure_grad(grads, x.0, values[x.0].raw_dim());
                let gx = gx.as_slice_mut().unwrap();
                for (i, &w) in weights.iter().enumerate() {
                    for v in &mut gx[i * cols..(i + 1) * cols] {
                        *v += w * gv;
                    }
                }
            }
        }
    }
}
