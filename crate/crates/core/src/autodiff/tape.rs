//! Reverse-mode tape over dense tensors.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in reverse creation order, which is a valid topological
//! order because inputs always precede their consumers.

use crate::scalar::Real;

use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{AutodiffError, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) const SCORE_EPS: f64 = 1e-7;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, n: usize, k: usize, m: usize },
    Transpose { x: Var, r: usize, c: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, b: Var },
    MulRow { x: Var, g: Var },
    Scale { x: Var, c: T },
    AddScalar { x: Var },
    Relu(Var),
    Sigmoid(Var),
    Clamp { x: Var, lo: T, hi: T },
    Log(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatCols { parts: Vec<(Var, usize)> },
    ConcatRows { parts: Vec<Var> },
    SliceCols { x: Var, start: usize, cols: usize },
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    WeightedGather { x: Var, offsets: Vec<usize>, idx: Vec<usize>, w: Vec<T> },
    SegmentMax { x: Var, argmax: Vec<usize> },
    SoftmaxRows(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    RowNorm(Var),
    SmoothL1 { pred: Var, target: Var, beta: T },
    Focal { s: Var, targets: Vec<T>, gamma: T },
    Chamfer { a: Var, b: Var, nn_ab: Vec<usize>, nn_ba: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Records a forward computation for gradient accumulation.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err(msg: String) -> AutodiffError {
    AutodiffError::Shape(msg)
}

impl<T: Real> Tape<T> {
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated on a `leaf(.., true)` node by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize), AutodiffError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(shape_err(format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (n, k) = self.dims2(a)?;
        let (k2, m) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_err(format!("matmul inner dims {n}x{k} * {k2}x{m}")));
        }
        let mut out = vec![T::zero(); n * m];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul { a, b, n, k, m }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(c, r, out)?, Op::Transpose { x, r, c }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(format!("{name}: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn row_broadcast(&mut self, x: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, AutodiffError> {
        let (n, m) = self.dims2(x)?;
        let vb = self.value(b);
        if vb.numel() != m {
            return Err(shape_err(format!("row broadcast of {:?} onto {n}x{m}", vb.shape())));
        }
        let bv = vb.data();
        let data = self
            .value(x)
            .data()
            .chunks(m.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(&a, &c)| f(a, c)).collect::<Vec<_>>())
            .collect::<Vec<_>>();
        Tensor::matrix(n, m, data)
    }

    /// `x[n x m] + b[m]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.row_broadcast(x, b, |a, c| a + c)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddRow { x, b }, rg))
    }

    /// `x[n x m] * g[m]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var, AutodiffError> {
        let t = self.row_broadcast(x, g, |a, c| a * c)?;
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(t, Op::MulRow { x, g }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, c }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(t, Op::AddScalar { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    /// Clamps into `[lo, hi]`; clamped entries pass no gradient.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let t = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.rg(x);
        self.push(t, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x).map(|v| v.ln());
        if !t.is_finite() {
            return Err(AutodiffError::NonFinite("log of non-positive value".into()));
        }
        let rg = self.rg(x);
        Ok(self.push(t, Op::Log(x), rg))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, AutodiffError> {
        if self.value(x).data().iter().any(|&v| v < T::zero()) {
            return Err(AutodiffError::NonFinite("sqrt of negative value".into()));
        }
        let t = self.value(x).map(|v| v.sqrt());
        let rg = self.rg(x);
        Ok(self.push(t, Op::Sqrt(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(AutodiffError::Empty("mean of empty tensor".into()));
        }
        let s: T = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::Empty("concat of zero tensors".into()));
        }
        let n = self.dims2(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != n {
                return Err(shape_err(format!("concat_cols: {r} rows vs {n}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let parts = parts.iter().copied().zip(widths).collect();
        Ok(self.push(Tensor::matrix(n, total, out)?, Op::ConcatCols { parts }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::Empty("concat of zero tensors".into()));
        }
        let m = self.dims2(parts[0])?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != m {
                return Err(shape_err(format!("concat_rows: {c} cols vs {m}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, m, out)?, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (n, c) = self.dims2(x)?;
        if start + len > c {
            return Err(shape_err(format!("slice_cols {start}+{len} of {c}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(n, len, out)?, Op::SliceCols { x, start, cols: c }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (n, c) = self.dims2(x)?;
        if start + len > n {
            return Err(shape_err(format!("slice_rows {start}+{len} of {n}")));
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(len, c, out)?, Op::SliceRows { x, start }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let (n, c) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(shape_err(format!("gather index {i} out of {n} rows")));
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(idx.len(), c, out)?,
            Op::GatherRows { x, idx: idx.to_vec() },
            rg,
        ))
    }

    /// `out[r] = sum_j w[j] * x[idx[j]]` for `j` in `offsets[r]..offsets[r + 1]`.
    pub fn weighted_gather(
        &mut self,
        x: Var,
        offsets: Vec<usize>,
        idx: Vec<usize>,
        w: Vec<T>,
    ) -> Result<Var, AutodiffError> {
        let (n, c) = self.dims2(x)?;
        if offsets.is_empty() || idx.len() != w.len() || *offsets.last().unwrap() != idx.len() {
            return Err(shape_err("weighted_gather: malformed offsets".into()));
        }
        let rows = offsets.len() - 1;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); rows * c];
        for r in 0..rows {
            let o = &mut out[r * c..(r + 1) * c];
            for j in offsets[r]..offsets[r + 1] {
                let i = idx[j];
                if i >= n {
                    return Err(shape_err(format!("gather index {i} out of {n} rows")));
                }
                let wj = w[j];
                for (ov, &sv) in o.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                    *ov += wj * sv;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(rows, c, out)?,
            Op::WeightedGather { x, offsets, idx, w },
            rg,
        ))
    }

    /// Channel-wise max over consecutive row segments `offsets[s]..offsets[s + 1]`.
    /// Empty segments yield zero rows; ties route gradient to the first row.
    pub fn segment_max(&mut self, x: Var, offsets: &[usize]) -> Result<Var, AutodiffError> {
        let (n, c) = self.dims2(x)?;
        if offsets.is_empty() || *offsets.last().unwrap() != n {
            return Err(shape_err("segment_max: offsets must end at the row count".into()));
        }
        let segs = offsets.len() - 1;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); segs * c];
        let mut argmax = vec![usize::MAX; segs * c];
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if lo >= hi {
                continue;
            }
            for ch in 0..c {
                let mut best = lo;
                let mut bv = src[lo * c + ch];
                for r in lo + 1..hi {
                    let v = src[r * c + ch];
                    if v > bv {
                        bv = v;
                        best = r;
                    }
                }
                out[s * c + ch] = bv;
                argmax[s * c + ch] = best * c + ch;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(segs, c, out)?, Op::SegmentMax { x, argmax }, rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (n, c) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(n, c, out)?, Op::SoftmaxRows(x), rg))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var, AutodiffError> {
        let (n, c) = self.dims2(x)?;
        let src = self.value(x).data();
        let cf = T::lit(c as f64);
        let mut out = vec![T::zero(); n * c];
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let mu = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mu) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(n, c, out)?, Op::LayerNorm { x, inv_std }, rg))
    }

    /// Euclidean norm of every row, shape `n x 1`.
    pub fn row_norm(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (n, c) = self.dims2(x)?;
        let src = self.value(x).data();
        let out = (0..n)
            .map(|i| src[i * c..(i + 1) * c].iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(n, 1, out)?, Op::RowNorm(x), rg))
    }

    /// Mean smooth-L1 over all elements.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, beta: T) -> Result<Var, AutodiffError> {
        if beta <= T::zero() {
            return Err(AutodiffError::Domain("smooth-L1 beta must be positive".into()));
        }
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(shape_err(format!("smooth_l1: {:?} vs {:?}", p.shape(), t.shape())));
        }
        if p.numel() == 0 {
            return Err(AutodiffError::Empty("smooth_l1 of empty tensor".into()));
        }
        let half = T::lit(0.5);
        let total: T = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| {
                let e = (a - b).abs();
                if e < beta {
                    half * e * e / beta
                } else {
                    e - half * beta
                }
            })
            .sum();
        let v = total / T::lit(p.numel() as f64);
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(v), Op::SmoothL1 { pred, target, beta }, rg))
    }

    /// Elementwise binary focal loss on probabilities, clamped to `[1e-7, 1 - 1e-7]`.
    /// `target = 1`: `-(1-s)^g ln s`; `target = 0`: `-s^g ln(1-s)`.
    pub fn focal(&mut self, s: Var, targets: &[T], gamma: T) -> Result<Var, AutodiffError> {
        let v = self.value(s);
        if v.numel() != targets.len() {
            return Err(shape_err(format!(
                "focal: {} scores vs {} targets",
                v.numel(),
                targets.len()
            )));
        }
        let out: Vec<T> = v
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| focal_value(p, y, gamma))
            .collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(s);
        Ok(self.push(
            t,
            Op::Focal {
                s,
                targets: targets.to_vec(),
                gamma,
            },
            rg,
        ))
    }

    /// Symmetric Chamfer distance between point sets `a[m x 3]` and `b[k x 3]`.
    pub fn chamfer(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, da) = self.dims2(a)?;
        let (k, db) = self.dims2(b)?;
        if da != db {
            return Err(shape_err(format!("chamfer: point widths {da} vs {db}")));
        }
        if m == 0 || k == 0 {
            return Err(AutodiffError::Empty("chamfer of empty point set".into()));
        }
        let (pa, pb) = (self.value(a).data(), self.value(b).data());
        let d2 = |i: usize, j: usize| -> T {
            (0..da)
                .map(|c| {
                    let e = pa[i * da + c] - pb[j * da + c];
                    e * e
                })
                .sum()
        };
        let mut nn_ab = vec![0; m];
        let mut nn_ba = vec![0; k];
        let mut best_ba = vec![T::infinity(); k];
        let mut sum_a = T::zero();
        for i in 0..m {
            let mut best = T::infinity();
            for j in 0..k {
                let d = d2(i, j);
                if d < best {
                    best = d;
                    nn_ab[i] = j;
                }
                if d < best_ba[j] {
                    best_ba[j] = d;
                    nn_ba[j] = i;
                }
            }
            sum_a += best;
        }
        let sum_b: T = best_ba.iter().copied().sum();
        let v = sum_a / T::lit(m as f64) + sum_b / T::lit(k as f64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), Op::Chamfer { a, b, nn_ab, nn_ba }, rg))
    }

    /// Propagates d(loss)/d(node) to every reachable node that requires a gradient.
    /// Parameter gradients accumulate into `store`; leaf gradients accumulate on the tape.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<(), AutodiffError> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.value(loss).is_finite() {
            return Err(AutodiffError::NonFinite("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            match self.nodes[id].op {
                Op::Param(pid) => store.accumulate(pid, &g),
                Op::Leaf => {
                    let node = &mut self.nodes[id];
                    match &mut node.grad {
                        Some(existing) => existing.add_assign(&g),
                        None => {
                            let mut t = Tensor::zeros(node.value.shape());
                            t.data_mut().copy_from_slice(&g);
                            node.grad = Some(t);
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(slot);
        };
        let out = &nodes[id].value;
        match &nodes[id].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, n, k, m } => {
                let (n, k, m) = (*n, *k, *m);
                let va = nodes[a.0].value.data();
                let vb = nodes[b.0].value.data();
                acc(*a, &mut |ga| matmul_bt_acc(g, vb, ga, n, k, m));
                acc(*b, &mut |gb| matmul_at_acc(va, g, gb, n, k, m));
            }
            Op::Transpose { x, r, c } => {
                let (r, c) = (*r, *c);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let va = nodes[a.0].value.data();
                let vb = nodes[b.0].value.data();
                acc(*a, &mut |ga| {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *o += gv * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(va) {
                        *o += gv * x;
                    }
                });
            }
            Op::AddRow { x, b } => {
                let m = nodes[b.0].value.numel();
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*b, &mut |gb| {
                    for row in g.chunks(m.max(1)) {
                        add_into(gb, row);
                    }
                });
            }
            Op::MulRow { x, g: gam } => {
                let m = nodes[gam.0].value.numel();
                let vx = nodes[x.0].value.data();
                let vg = nodes[gam.0].value.data();
                acc(*x, &mut |gx| {
                    for (i, (o, &gv)) in gx.iter_mut().zip(g).enumerate() {
                        *o += gv * vg[i % m];
                    }
                });
                acc(*gam, &mut |gg| {
                    for (i, (&gv, &xv)) in g.iter().zip(vx).enumerate() {
                        gg[i % m] += gv * xv;
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                acc(*x, &mut |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += v * c;
                    }
                });
            }
            Op::AddScalar { x } | Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Relu(x) => {
                let vx = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        if xv > T::zero() {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                acc(*x, &mut |gx| {
                    for ((o, &gv), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *o += gv * yv * (T::one() - yv);
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let vx = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        if xv >= *lo && xv <= *hi {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Log(x) => {
                let vx = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        *o += gv / xv;
                    }
                });
            }
            Op::Sqrt(x) => {
                let y = out.data();
                acc(*x, &mut |gx| {
                    for ((o, &gv), &yv) in gx.iter_mut().zip(g).zip(y) {
                        if yv > T::zero() {
                            *o += gv / (T::lit(2.0) * yv);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g0));
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel();
                let g0 = g[0] / T::lit(n as f64);
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g0));
            }
            Op::ConcatCols { parts } => {
                let n = out.rows();
                let total = out.cols();
                let mut off = 0;
                for &(p, w) in parts {
                    acc(p, &mut |gp| {
                        for i in 0..n {
                            add_into(&mut gp[i * w..(i + 1) * w], &g[i * total + off..i * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(p, &mut |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceCols { x, start, cols } => {
                let (start, cols) = (*start, *cols);
                let n = out.rows();
                let len = out.cols();
                acc(*x, &mut |gx| {
                    for i in 0..n {
                        add_into(&mut gx[i * cols + start..i * cols + start + len], &g[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                let off = start * c;
                acc(*x, &mut |gx| add_into(&mut gx[off..off + g.len()], g));
            }
            Op::GatherRows { x, idx } => {
                let c = out.cols();
                acc(*x, &mut |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::WeightedGather { x, offsets, idx, w } => {
                let c = out.cols();
                acc(*x, &mut |gx| {
                    for r in 0..offsets.len() - 1 {
                        let gr = &g[r * c..(r + 1) * c];
                        for j in offsets[r]..offsets[r + 1] {
                            let (i, wj) = (idx[j], w[j]);
                            for (o, &gv) in gx[i * c..(i + 1) * c].iter_mut().zip(gr) {
                                *o += wj * gv;
                            }
                        }
                    }
                });
            }
            Op::SegmentMax { x, argmax } => {
                acc(*x, &mut |gx| {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        if src != usize::MAX {
                            gx[src] += gv;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let c = out.cols();
                let y = out.data();
                acc(*x, &mut |gx| {
                    for (i, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let c = out.cols();
                let cf = T::lit(c as f64);
                let y = out.data();
                acc(*x, &mut |gx| {
                    for (i, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                        let mean_g = gr.iter().copied().sum::<T>() / cf;
                        let mean_gy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() / cf;
                        for j in 0..c {
                            gx[i * c + j] += inv_std[i] * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                });
            }
            Op::RowNorm(x) => {
                let vx = nodes[x.0].value.data();
                let c = nodes[x.0].value.cols();
                let y = out.data();
                acc(*x, &mut |gx| {
                    for (i, (&yv, &gv)) in y.iter().zip(g).enumerate() {
                        if yv > T::zero() {
                            for j in 0..c {
                                gx[i * c + j] += gv * vx[i * c + j] / yv;
                            }
                        }
                    }
                });
            }
            Op::SmoothL1 { pred, target, beta } => {
                let beta = *beta;
                let vp = nodes[pred.0].value.data();
                let vt = nodes[target.0].value.data();
                let scale = g[0] / T::lit(vp.len() as f64);
                let d: Vec<T> = vp
                    .iter()
                    .zip(vt)
                    .map(|(&a, &b)| {
                        let e = a - b;
                        if e.abs() < beta {
                            e / beta * scale
                        } else {
                            e.signum() * scale
                        }
                    })
                    .collect();
                acc(*pred, &mut |gp| add_into(gp, &d));
                acc(*target, &mut |gt| {
                    for (o, &v) in gt.iter_mut().zip(&d) {
                        *o -= v;
                    }
                });
            }
            Op::Focal { s, targets, gamma } => {
                let vs = nodes[s.0].value.data();
                acc(*s, &mut |gs| {
                    for (((o, &gv), &p), &y) in gs.iter_mut().zip(g).zip(vs).zip(targets) {
                        *o += gv * focal_derivative(p, y, *gamma);
                    }
                });
            }
            Op::Chamfer { a, b, nn_ab, nn_ba } => {
                let pa = nodes[a.0].value.data();
                let pb = nodes[b.0].value.data();
                let d = nodes[a.0].value.cols();
                let (m, k) = (nn_ab.len(), nn_ba.len());
                let sa = T::lit(2.0) * g[0] / T::lit(m as f64);
                let sb = T::lit(2.0) * g[0] / T::lit(k as f64);
                // d/dx ||x - y||^2 = 2(x - y)
                acc(*a, &mut |ga| {
                    for (i, &j) in nn_ab.iter().enumerate() {
                        for c in 0..d {
                            ga[i * d + c] += sa * (pa[i * d + c] - pb[j * d + c]);
                        }
                    }
                    for (j, &i) in nn_ba.iter().enumerate() {
                        for c in 0..d {
                            ga[i * d + c] += sb * (pa[i * d + c] - pb[j * d + c]);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, &j) in nn_ab.iter().enumerate() {
                        for c in 0..d {
                            gb[j * d + c] -= sa * (pa[i * d + c] - pb[j * d + c]);
                        }
                    }
                    for (j, &i) in nn_ba.iter().enumerate() {
                        for c in 0..d {
                            gb[j * d + c] -= sb * (pa[i * d + c] - pb[j * d + c]);
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

fn clamp_score<T: Real>(p: T) -> (T, bool) {
    let eps = T::lit(SCORE_EPS);
    if p < eps {
        (eps, true)
    } else if p > T::one() - eps {
        (T::one() - eps, true)
    } else {
        (p, false)
    }
}

/// Focal loss of a single probability; `target` is 0 or 1 (soft targets interpolate).
pub fn focal_value<T: Real>(p: T, target: T, gamma: T) -> T {
    let (p, _) = clamp_score(p);
    let one = T::one();
    let pos = -(one - p).powf(gamma) * p.ln();
    let neg = -p.powf(gamma) * (one - p).ln();
    target * pos + (one - target) * neg
}

fn focal_derivative<T: Real>(p: T, target: T, gamma: T) -> T {
    let (p, clamped) = clamp_score(p);
    if clamped {
        return T::zero();
    }
    let one = T::one();
    let q = one - p;
    let pos = if gamma == T::zero() {
        -one / p
    } else {
        gamma * q.powf(gamma - one) * p.ln() - q.powf(gamma) / p
    };
    let neg = if gamma == T::zero() {
        one / q
    } else {
        -gamma * p.powf(gamma - one) * q.ln() + p.powf(gamma) / q
    };
    target * pos + (one - target) * neg
}
