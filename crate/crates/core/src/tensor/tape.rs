//! Operation recording and reverse-mode gradient computation.
//!
//! A [`Tape`] records one forward pass. Each operation computes eagerly,
//! and—only when some input requires gradients—appends a record holding
//! exactly the intermediates its backward rule needs. Subgraphs whose
//! inputs are all constant (frozen parameters, detached features) leave no
//! records and retain nothing, so the allocation meter sees their true
//! transient footprint.

use std::rc::Rc;

use super::dense::{Scalar, Tensor};
use super::ops::{self, Activation, PoolKind};
use super::{Result, TensorError};

pub type VarId = usize;

/// Handle to a value on (or feeding) a tape.
pub struct Var<T: Scalar> {
    id: VarId,
    value: Rc<Tensor<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Var<T> {
    pub fn id(&self) -> VarId {
        self.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    fn rc(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }
}

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var {
            id: self.id,
            value: Rc::clone(&self.value),
            requires_grad: self.requires_grad,
        }
    }
}

enum Record<T: Scalar> {
    Add {
        a: VarId,
        b: VarId,
        out: VarId,
    },
    Sub {
        a: VarId,
        b: VarId,
        out: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
        out: VarId,
        a_val: Rc<Tensor<T>>,
        b_val: Rc<Tensor<T>>,
    },
    Scale {
        a: VarId,
        out: VarId,
        c: T,
    },
    Matmul {
        a: VarId,
        b: VarId,
        out: VarId,
        a_val: Rc<Tensor<T>>,
        b_val: Rc<Tensor<T>>,
    },
    Transpose {
        a: VarId,
        out: VarId,
    },
    Reshape {
        a: VarId,
        out: VarId,
        from: Vec<usize>,
    },
    AddRowBias {
        a: VarId,
        bias: VarId,
        out: VarId,
    },
    SliceCols {
        a: VarId,
        out: VarId,
        rows: usize,
        cols: usize,
        start: usize,
    },
    ConcatCols {
        parts: Vec<(VarId, usize)>,
        out: VarId,
    },
    ConcatAxis0 {
        parts: Vec<(VarId, usize)>, // (id, element count)
        out: VarId,
        part_shapes: Vec<Vec<usize>>,
    },
    GatherRows {
        a: VarId,
        out: VarId,
        rows: usize,
        idx: Vec<usize>,
    },
    AddGathered {
        base: VarId,
        table: VarId,
        out: VarId,
        table_len: usize,
        idx: Rc<Vec<usize>>,
    },
    Im2Patches {
        a: VarId,
        out: VarId,
        shape: Vec<usize>,
        p: usize,
    },
    Conv2d {
        x: VarId,
        w: VarId,
        bias: Option<VarId>,
        out: VarId,
        x_val: Rc<Tensor<T>>,
        w_val: Rc<Tensor<T>>,
        stride: usize,
        padding: usize,
    },
    Softmax {
        a: VarId,
        out: VarId,
        out_val: Rc<Tensor<T>>,
    },
    LayerNorm {
        x: VarId,
        gain: VarId,
        bias: VarId,
        out: VarId,
        x_val: Rc<Tensor<T>>,
        gain_val: Rc<Tensor<T>>,
    },
    Pool {
        x: VarId,
        out: VarId,
        shape: Vec<usize>,
        kind: PoolKind,
        k: usize,
        stride: usize,
        argmax: Option<Vec<usize>>,
    },
    Upsample2x {
        x: VarId,
        out: VarId,
        shape: Vec<usize>,
    },
    RoiBilinear {
        x: VarId,
        out: VarId,
        shape: Vec<usize>,
        bx: [f64; 4],
        out_size: usize,
    },
    Act {
        x: VarId,
        out: VarId,
        f: Activation,
        x_val: Rc<Tensor<T>>,
    },
    SumAll {
        a: VarId,
        out: VarId,
        shape: Vec<usize>,
    },
    MeanAll {
        a: VarId,
        out: VarId,
        shape: Vec<usize>,
    },
    CrossEntropy {
        logits: VarId,
        out: VarId,
        logits_val: Rc<Tensor<T>>,
        labels: Vec<usize>,
    },
    BceWithLogits {
        logits: VarId,
        out: VarId,
        logits_val: Rc<Tensor<T>>,
        targets: Rc<Tensor<T>>,
    },
    SmoothL1 {
        pred: VarId,
        out: VarId,
        pred_val: Rc<Tensor<T>>,
        target: Rc<Tensor<T>>,
        beta: T,
    },
}

/// Per-leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    by_id: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.by_id.get(var.id()).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        self.by_id.get_mut(var.id()).and_then(|g| g.take())
    }
}

/// Records the operations of one forward pass; consumed by `backward`.
pub struct Tape<T: Scalar> {
    records: Vec<Record<T>>,
    rg: Vec<bool>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            records: Vec::new(),
            rg: Vec::new(),
            consumed: false,
        }
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    fn fresh(&mut self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<T> {
        let id = self.rg.len();
        self.rg.push(requires_grad);
        Var {
            id,
            value,
            requires_grad,
        }
    }

    fn emit(&mut self, value: Tensor<T>, rg: bool, rec: impl FnOnce(VarId) -> Record<T>) -> Var<T> {
        let var = self.fresh(Rc::new(value), rg);
        if rg {
            self.records.push(rec(var.id));
        }
        var
    }

    /// Introduce a tensor as a leaf. Gradients accumulate on leaves with
    /// `requires_grad` set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        self.fresh(Rc::new(value), requires_grad)
    }

    /// Leaf over shared storage: no copy, so parameters register once with
    /// the allocation meter no matter how many passes read them.
    pub fn leaf_shared(&mut self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<T> {
        self.fresh(value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value.add(&b.value)?;
        let rg = a.requires_grad || b.requires_grad;
        Ok(self.emit(out, rg, |id| Record::Add {
            a: a.id,
            b: b.id,
            out: id,
        }))
    }

    pub fn sub(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value.sub(&b.value)?;
        let rg = a.requires_grad || b.requires_grad;
        Ok(self.emit(out, rg, |id| Record::Sub {
            a: a.id,
            b: b.id,
            out: id,
        }))
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value.mul(&b.value)?;
        let rg = a.requires_grad || b.requires_grad;
        Ok(self.emit(out, rg, |id| Record::Mul {
            a: a.id,
            b: b.id,
            out: id,
            a_val: a.rc(),
            b_val: b.rc(),
        }))
    }

    pub fn scale(&mut self, a: &Var<T>, c: T) -> Var<T> {
        let out = a.value.scale(c);
        self.emit(out, a.requires_grad, |id| Record::Scale {
            a: a.id,
            out: id,
            c,
        })
    }

    pub fn matmul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = ops::matmul(&a.value, &b.value)?;
        let rg = a.requires_grad || b.requires_grad;
        Ok(self.emit(out, rg, |id| Record::Matmul {
            a: a.id,
            b: b.id,
            out: id,
            a_val: a.rc(),
            b_val: b.rc(),
        }))
    }

    pub fn transpose(&mut self, a: &Var<T>) -> Result<Var<T>> {
        let out = ops::transpose2d(&a.value)?;
        Ok(self.emit(out, a.requires_grad, |id| Record::Transpose { a: a.id, out: id }))
    }

    pub fn reshape(&mut self, a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let out = a.value.reshaped(shape)?;
        let from = a.value.shape().to_vec();
        Ok(self.emit(out, a.requires_grad, |id| Record::Reshape {
            a: a.id,
            out: id,
            from,
        }))
    }

    pub fn add_row_bias(&mut self, a: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
        let out = ops::add_row_bias(&a.value, &bias.value)?;
        let rg = a.requires_grad || bias.requires_grad;
        Ok(self.emit(out, rg, |id| Record::AddRowBias {
            a: a.id,
            bias: bias.id,
            out: id,
        }))
    }

    pub fn slice_cols(&mut self, a: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        let out = ops::slice_cols(&a.value, start, len)?;
        let (rows, cols) = (a.value.shape()[0], a.value.shape()[1]);
        Ok(self.emit(out, a.requires_grad, |id| Record::SliceCols {
            a: a.id,
            out: id,
            rows,
            cols,
            start,
        }))
    }

    pub fn concat_cols(&mut self, parts: &[&Var<T>]) -> Result<Var<T>> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let out = ops::concat_cols(&vals)?;
        let rg = parts.iter().any(|p| p.requires_grad);
        let meta: Vec<(VarId, usize)> = parts.iter().map(|p| (p.id, p.shape()[1])).collect();
        Ok(self.emit(out, rg, |id| Record::ConcatCols { parts: meta, out: id }))
    }

    /// Concatenate along the leading axis; trailing dimensions must agree.
    pub fn concat_axis0(&mut self, parts: &[&Var<T>]) -> Result<Var<T>> {
        let first = parts[0].shape();
        let trailing = &first[1..];
        let mut lead = 0usize;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape()[1..] != trailing {
                return Err(TensorError::ShapeMismatch {
                    left: first.to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            lead += p.shape()[0];
            data.extend_from_slice(p.value().data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(trailing);
        let out = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|p| p.requires_grad);
        let meta: Vec<(VarId, usize)> = parts.iter().map(|p| (p.id, p.value().numel())).collect();
        let part_shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Ok(self.emit(out, rg, |id| Record::ConcatAxis0 {
            parts: meta,
            out: id,
            part_shapes,
        }))
    }

    pub fn gather_rows(&mut self, a: &Var<T>, idx: &[usize]) -> Result<Var<T>> {
        let out = ops::gather_rows(&a.value, idx)?;
        let rows = a.value.shape()[0];
        let idx = idx.to_vec();
        Ok(self.emit(out, a.requires_grad, |id| Record::GatherRows {
            a: a.id,
            out: id,
            rows,
            idx,
        }))
    }

    /// out[i] = base[i] + table[idx[i]]; used for relative position bias.
    pub fn add_gathered(
        &mut self,
        base: &Var<T>,
        table: &Var<T>,
        idx: Rc<Vec<usize>>,
    ) -> Result<Var<T>> {
        let out = ops::add_gathered(&base.value, &table.value, &idx)?;
        let rg = base.requires_grad || table.requires_grad;
        let table_len = table.value.numel();
        Ok(self.emit(out, rg, |id| Record::AddGathered {
            base: base.id,
            table: table.id,
            out: id,
            table_len,
            idx,
        }))
    }

    pub fn im2patches(&mut self, a: &Var<T>, p: usize) -> Result<Var<T>> {
        let out = ops::im2patches(&a.value, p)?;
        let shape = a.value.shape().to_vec();
        Ok(self.emit(out, a.requires_grad, |id| Record::Im2Patches {
            a: a.id,
            out: id,
            shape,
            p,
        }))
    }

    pub fn conv2d(
        &mut self,
        x: &Var<T>,
        w: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<T>> {
        let out = ops::conv2d(&x.value, &w.value, bias.map(|b| b.value()), stride, padding)?;
        let rg = x.requires_grad
            || w.requires_grad
            || bias.map(|b| b.requires_grad).unwrap_or(false);
        Ok(self.emit(out, rg, |id| Record::Conv2d {
            x: x.id,
            w: w.id,
            bias: bias.map(|b| b.id),
            out: id,
            x_val: x.rc(),
            w_val: w.rc(),
            stride,
            padding,
        }))
    }

    pub fn softmax(&mut self, a: &Var<T>) -> Result<Var<T>> {
        let out = ops::softmax_last(&a.value)?;
        let var = self.fresh(Rc::new(out), a.requires_grad);
        if a.requires_grad {
            self.records.push(Record::Softmax {
                a: a.id,
                out: var.id,
                out_val: var.rc(),
            });
        }
        Ok(var)
    }

    pub fn layer_norm(&mut self, x: &Var<T>, gain: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
        let out = ops::layer_norm(&x.value, &gain.value, &bias.value)?;
        let rg = x.requires_grad || gain.requires_grad || bias.requires_grad;
        Ok(self.emit(out, rg, |id| Record::LayerNorm {
            x: x.id,
            gain: gain.id,
            bias: bias.id,
            out: id,
            x_val: x.rc(),
            gain_val: gain.rc(),
        }))
    }

    pub fn pool2d(&mut self, x: &Var<T>, kind: PoolKind, k: usize, stride: usize) -> Result<Var<T>> {
        let (out, argmax) = ops::pool2d(&x.value, kind, k, stride)?;
        let shape = x.value.shape().to_vec();
        Ok(self.emit(out, x.requires_grad, |id| Record::Pool {
            x: x.id,
            out: id,
            shape,
            kind,
            k,
            stride,
            argmax,
        }))
    }

    pub fn upsample2x(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let out = ops::upsample2x(&x.value)?;
        let shape = x.value.shape().to_vec();
        Ok(self.emit(out, x.requires_grad, |id| Record::Upsample2x {
            x: x.id,
            out: id,
            shape,
        }))
    }

    /// Bilinear RoI pooling. The box is in feature-map coordinates and is
    /// treated as a constant: gradients flow to the features only.
    pub fn roi_bilinear(&mut self, x: &Var<T>, bx: [f64; 4], out_size: usize) -> Result<Var<T>> {
        let out = ops::roi_bilinear(&x.value, bx, out_size)?;
        let shape = x.value.shape().to_vec();
        Ok(self.emit(out, x.requires_grad, |id| Record::RoiBilinear {
            x: x.id,
            out: id,
            shape,
            bx,
            out_size,
        }))
    }

    pub fn apply(&mut self, x: &Var<T>, f: Activation) -> Var<T> {
        let out = ops::activation(&x.value, f);
        self.emit(out, x.requires_grad, |id| Record::Act {
            x: x.id,
            out: id,
            f,
            x_val: x.rc(),
        })
    }

    pub fn sum_all(&mut self, a: &Var<T>) -> Var<T> {
        let out = Tensor::scalar(a.value.sum());
        let shape = a.value.shape().to_vec();
        self.emit(out, a.requires_grad, |id| Record::SumAll {
            a: a.id,
            out: id,
            shape,
        })
    }

    pub fn mean_all(&mut self, a: &Var<T>) -> Var<T> {
        let n = T::from_f64(a.value.numel() as f64);
        let out = Tensor::scalar(a.value.sum() / n);
        let shape = a.value.shape().to_vec();
        self.emit(out, a.requires_grad, |id| Record::MeanAll {
            a: a.id,
            out: id,
            shape,
        })
    }

    pub fn cross_entropy_mean(&mut self, logits: &Var<T>, labels: &[usize]) -> Result<Var<T>> {
        let loss = ops::cross_entropy_mean(&logits.value, labels)?;
        let labels = labels.to_vec();
        Ok(self.emit(Tensor::scalar(loss), logits.requires_grad, |id| {
            Record::CrossEntropy {
                logits: logits.id,
                out: id,
                logits_val: logits.rc(),
                labels,
            }
        }))
    }

    pub fn bce_with_logits_mean(&mut self, logits: &Var<T>, targets: &Tensor<T>) -> Result<Var<T>> {
        let loss = ops::bce_with_logits_mean(&logits.value, targets)?;
        let targets = Rc::new(targets.clone());
        Ok(self.emit(Tensor::scalar(loss), logits.requires_grad, |id| {
            Record::BceWithLogits {
                logits: logits.id,
                out: id,
                logits_val: logits.rc(),
                targets,
            }
        }))
    }

    pub fn smooth_l1_mean(&mut self, pred: &Var<T>, target: &Tensor<T>, beta: T) -> Result<Var<T>> {
        let loss = ops::smooth_l1_mean(&pred.value, target, beta)?;
        let target = Rc::new(target.clone());
        Ok(self.emit(Tensor::scalar(loss), pred.requires_grad, |id| {
            Record::SmoothL1 {
                pred: pred.id,
                out: id,
                pred_val: pred.rc(),
                target,
                beta,
            }
        }))
    }

    /// Reverse sweep from a scalar loss. Visits each recorded operation
    /// exactly once, accumulates gradients onto `requires_grad` leaves, and
    /// consumes the tape (all saved intermediates are released).
    pub fn backward(&mut self, loss: &Var<T>) -> Result<Gradients<T>> {
        if !loss.value.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss.value.shape().to_vec()));
        }
        if !loss.requires_grad || self.consumed {
            return Err(TensorError::DetachedLoss);
        }
        self.consumed = true;

        let n = self.rg.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut produced = vec![false; n];
        for rec in &self.records {
            produced[record_out(rec)] = true;
        }
        grads[loss.id] = Some(Tensor::scalar(T::one()));

        let records = std::mem::take(&mut self.records);
        for rec in records.into_iter().rev() {
            let out_id = record_out(&rec);
            let Some(dout) = grads[out_id].take() else {
                continue; // this node does not influence the loss
            };
            self.step_backward(rec, &dout, &mut grads)?;
        }

        // Only leaves keep their gradients.
        for (id, g) in grads.iter_mut().enumerate() {
            if produced[id] || !self.rg[id] {
                *g = None;
            }
        }
        if loss.id < n && !produced[loss.id] && self.rg[loss.id] {
            // A bare leaf used directly as the loss.
            grads[loss.id] = Some(Tensor::scalar(T::one()));
        }
        Ok(Gradients { by_id: grads })
    }

    fn step_backward(
        &self,
        rec: Record<T>,
        dout: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match rec {
            Record::Add { a, b, .. } => {
                self.acc(grads, a, dout.clone())?;
                self.acc(grads, b, dout.clone())?;
            }
            Record::Sub { a, b, .. } => {
                self.acc(grads, a, dout.clone())?;
                self.acc(grads, b, dout.scale(-T::one()))?;
            }
            Record::Mul {
                a,
                b,
                a_val,
                b_val,
                ..
            } => {
                if self.rg[a] {
                    self.acc(grads, a, dout.mul(&b_val)?)?;
                }
                if self.rg[b] {
                    self.acc(grads, b, dout.mul(&a_val)?)?;
                }
            }
            Record::Scale { a, c, .. } => {
                self.acc(grads, a, dout.scale(c))?;
            }
            Record::Matmul {
                a,
                b,
                a_val,
                b_val,
                ..
            } => {
                if self.rg[a] {
                    let bt = ops::transpose2d(&b_val)?;
                    self.acc(grads, a, ops::matmul(dout, &bt)?)?;
                }
                if self.rg[b] {
                    let at = ops::transpose2d(&a_val)?;
                    self.acc(grads, b, ops::matmul(&at, dout)?)?;
                }
            }
            Record::Transpose { a, .. } => {
                self.acc(grads, a, ops::transpose2d(dout)?)?;
            }
            Record::Reshape { a, from, .. } => {
                self.acc(grads, a, dout.reshaped(&from)?)?;
            }
            Record::AddRowBias { a, bias, .. } => {
                if self.rg[a] {
                    self.acc(grads, a, dout.clone())?;
                }
                if self.rg[bias] {
                    self.acc(grads, bias, ops::column_sum(dout))?;
                }
            }
            Record::SliceCols {
                a,
                rows,
                cols,
                start,
                ..
            } => {
                self.acc(grads, a, ops::slice_cols_backward(rows, cols, start, dout))?;
            }
            Record::ConcatCols { parts, .. } => {
                let mut off = 0usize;
                for (id, width) in parts {
                    if self.rg[id] {
                        self.acc(grads, id, ops::slice_cols(dout, off, width)?)?;
                    }
                    off += width;
                }
            }
            Record::ConcatAxis0 {
                parts, part_shapes, ..
            } => {
                let mut off = 0usize;
                for ((id, count), shape) in parts.into_iter().zip(part_shapes) {
                    if self.rg[id] {
                        let piece = Tensor::new(shape, dout.data()[off..off + count].to_vec())?;
                        self.acc(grads, id, piece)?;
                    }
                    off += count;
                }
            }
            Record::GatherRows { a, rows, idx, .. } => {
                self.acc(grads, a, ops::gather_rows_backward(rows, &idx, dout))?;
            }
            Record::AddGathered {
                base,
                table,
                table_len,
                idx,
                ..
            } => {
                if self.rg[base] {
                    self.acc(grads, base, dout.clone())?;
                }
                if self.rg[table] {
                    let dt = ops::add_gathered_backward_table(table_len, &idx, dout);
                    self.acc(grads, table, dt.reshaped(&[table_len])?)?;
                }
            }
            Record::Im2Patches { a, shape, p, .. } => {
                self.acc(grads, a, ops::im2patches_backward(&shape, p, dout))?;
            }
            Record::Conv2d {
                x,
                w,
                bias,
                x_val,
                w_val,
                stride,
                padding,
                ..
            } => {
                let (dx, dw, db) =
                    ops::conv2d_backward(&x_val, &w_val, dout, bias.is_some(), stride, padding)?;
                if self.rg[x] {
                    self.acc(grads, x, dx)?;
                }
                if self.rg[w] {
                    self.acc(grads, w, dw)?;
                }
                if let (Some(bid), Some(db)) = (bias, db) {
                    if self.rg[bid] {
                        self.acc(grads, bid, db)?;
                    }
                }
            }
            Record::Softmax { a, out_val, .. } => {
                self.acc(grads, a, ops::softmax_backward(&out_val, dout))?;
            }
            Record::LayerNorm {
                x,
                gain,
                bias,
                x_val,
                gain_val,
                ..
            } => {
                let (dx, dg, db) = ops::layer_norm_backward(&x_val, &gain_val, dout);
                if self.rg[x] {
                    self.acc(grads, x, dx)?;
                }
                if self.rg[gain] {
                    self.acc(grads, gain, dg)?;
                }
                if self.rg[bias] {
                    self.acc(grads, bias, db)?;
                }
            }
            Record::Pool {
                x,
                shape,
                kind,
                k,
                stride,
                argmax,
                ..
            } => {
                let dx = ops::pool2d_backward(&shape, kind, k, stride, argmax.as_deref(), dout);
                self.acc(grads, x, dx)?;
            }
            Record::Upsample2x { x, shape, .. } => {
                self.acc(grads, x, ops::upsample2x_backward(&shape, dout))?;
            }
            Record::RoiBilinear {
                x,
                shape,
                bx,
                out_size,
                ..
            } => {
                self.acc(
                    grads,
                    x,
                    ops::roi_bilinear_backward(&shape, bx, out_size, dout),
                )?;
            }
            Record::Act { x, f, x_val, .. } => {
                let dx = x_val
                    .zip_map(dout, |xv, g| ops::activation_derivative(xv, f) * g)?;
                self.acc(grads, x, dx)?;
            }
            Record::SumAll { a, shape, .. } => {
                let g = dout.item()?;
                self.acc(grads, a, Tensor::full(&shape, g))?;
            }
            Record::MeanAll { a, shape, .. } => {
                let n: usize = shape.iter().product();
                let g = dout.item()? / T::from_f64(n as f64);
                self.acc(grads, a, Tensor::full(&shape, g))?;
            }
            Record::CrossEntropy {
                logits,
                logits_val,
                labels,
                ..
            } => {
                let g = ops::cross_entropy_backward(&logits_val, &labels, dout.item()?);
                self.acc(grads, logits, g)?;
            }
            Record::BceWithLogits {
                logits,
                logits_val,
                targets,
                ..
            } => {
                let g = ops::bce_with_logits_backward(&logits_val, &targets, dout.item()?);
                self.acc(grads, logits, g)?;
            }
            Record::SmoothL1 {
                pred,
                pred_val,
                target,
                beta,
                ..
            } => {
                let g = ops::smooth_l1_backward(&pred_val, &target, beta, dout.item()?);
                self.acc(grads, pred, g)?;
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], id: VarId, g: Tensor<T>) -> Result<()> {
        match &mut grads[id] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }
}

fn record_out<T: Scalar>(rec: &Record<T>) -> VarId {
    match rec {
        Record::Add { out, .. }
        | Record::Sub { out, .. }
        | Record::Mul { out, .. }
        | Record::Scale { out, .. }
        | Record::Matmul { out, .. }
        | Record::Transpose { out, .. }
        | Record::Reshape { out, .. }
        | Record::AddRowBias { out, .. }
        | Record::SliceCols { out, .. }
        | Record::ConcatCols { out, .. }
        | Record::ConcatAxis0 { out, .. }
        | Record::GatherRows { out, .. }
        | Record::AddGathered { out, .. }
        | Record::Im2Patches { out, .. }
        | Record::Conv2d { out, .. }
        | Record::Softmax { out, .. }
        | Record::LayerNorm { out, .. }
        | Record::Pool { out, .. }
        | Record::Upsample2x { out, .. }
        | Record::RoiBilinear { out, .. }
        | Record::Act { out, .. }
        | Record::SumAll { out, .. }
        | Record::MeanAll { out, .. }
        | Record::CrossEntropy { out, .. }
        | Record::BceWithLogits { out, .. }
        | Record::SmoothL1 { out, .. } => *out,
    }
}
