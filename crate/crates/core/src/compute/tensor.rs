//! Graph nodes and differentiable operations.
//!
//! A `Tensor` is a shared handle to a graph node holding dense f64 values.
//! Ops record a backward closure that maps the output gradient to one
//! gradient per parent; `backward` walks the graph in reverse topological
//! order and accumulates. Graphs are rebuilt for every loss evaluation and
//! freed when the loss handle is dropped, only leaves live across steps.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Gradient of each parent given the gradient of the output.
type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

pub struct Tensor {
    inner: Rc<RefCell<Node>>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.inner.borrow();
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            n.id, n.shape, n.requires_grad
        )
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new_node(
        shape: Vec<usize>,
        values: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), values.len());
        Tensor {
            inner: Rc::new(RefCell::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                values,
                grad: None,
                requires_grad,
                parents,
                backward,
            })),
        }
    }

    /// Non-trainable tensor; gradients never flow into it.
    pub fn constant(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != values.len() {
            return Err(Error::dim(format!(
                "constant: shape {:?} holds {} values, got {}",
                shape,
                numel(shape),
                values.len()
            )));
        }
        Ok(Tensor::new_node(shape.to_vec(), values, false, vec![], None))
    }

    /// Trainable leaf; participates in backward and optimizer steps.
    pub fn parameter(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != values.len() {
            return Err(Error::dim(format!(
                "parameter: shape {:?} holds {} values, got {}",
                shape,
                numel(shape),
                values.len()
            )));
        }
        Ok(Tensor::new_node(shape.to_vec(), values, true, vec![], None))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new_node(vec![1], vec![v], false, vec![], None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new_node(shape.to_vec(), vec![0.0; numel(shape)], false, vec![], None)
    }

    fn from_op(
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Tensor::new_node(shape, values, true, parents, Some(backward))
        } else {
            // Dead branch for autograd: drop lineage so inference graphs stay flat.
            Tensor::new_node(shape, values, false, vec![], None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn values(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    /// Scalar value; contract error when the tensor has more than one element.
    pub fn item(&self) -> Result<f64> {
        let n = self.inner.borrow();
        if n.values.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                n.shape
            )));
        }
        Ok(n.values[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite leaf values in place. Only meaningful between graph builds;
    /// nodes derived from the old values are not recomputed.
    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        let mut n = self.inner.borrow_mut();
        if n.values.len() != values.len() {
            return Err(Error::dim(format!(
                "set_values: expected {} values, got {}",
                n.values.len(),
                values.len()
            )));
        }
        n.values.copy_from_slice(values);
        Ok(())
    }

    pub fn set_value_at(&self, index: usize, value: f64) -> Result<()> {
        let mut n = self.inner.borrow_mut();
        if index >= n.values.len() {
            return Err(Error::dim(format!(
                "set_value_at: index {} out of {}",
                index,
                n.values.len()
            )));
        }
        n.values[index] = value;
        Ok(())
    }

    pub fn value_at(&self, index: usize) -> f64 {
        self.inner.borrow().values[index]
    }

    fn accumulate_grad(&self, delta: &[f64]) {
        let mut n = self.inner.borrow_mut();
        debug_assert_eq!(n.values.len(), delta.len());
        match &mut n.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => n.grad = Some(delta.to_vec()),
        }
    }

    fn rank2(&self, op: &str) -> Result<(usize, usize)> {
        let n = self.inner.borrow();
        if n.shape.len() != 2 {
            return Err(Error::dim(format!("{op}: expected rank 2, got {:?}", n.shape)));
        }
        Ok((n.shape[0], n.shape[1]))
    }

    // ----- elementwise binary ops -----

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "{op}: shape {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let out: Vec<f64> = {
            let a = self.inner.borrow();
            let b = other.inner.borrow();
            a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect()
        };
        Ok(Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![g.to_vec(), g.to_vec()]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let out: Vec<f64> = {
            let a = self.inner.borrow();
            let b = other.inner.borrow();
            a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect()
        };
        Ok(Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![g.to_vec(), g.iter().map(|v| -v).collect()]),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let out: Vec<f64> = {
            let a = self.inner.borrow();
            let b = other.inner.borrow();
            a.values.iter().zip(&b.values).map(|(x, y)| x * y).collect()
        };
        let a = self.clone();
        let b = other.clone();
        Ok(Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let av = a.inner.borrow();
                let bv = b.inner.borrow();
                let ga = g.iter().zip(&bv.values).map(|(gi, y)| gi * y).collect();
                let gb = g.iter().zip(&av.values).map(|(gi, x)| gi * x).collect();
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.inner.borrow().values.iter().map(|x| x * c).collect();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g| vec![g.iter().map(|gi| gi * c).collect()]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.inner.borrow().values.iter().map(|x| x + c).collect();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(|g| vec![g.to_vec()]),
        )
    }

    // ----- linear algebra -----

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rank2("matmul lhs")?;
        let (k2, n) = other.rank2("matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner dims {k} vs {k2} (shapes {:?} x {:?})",
                self.shape(),
                other.shape()
            )));
        }
        let out = {
            let a = self.inner.borrow();
            let b = other.inner.borrow();
            mat_mul_raw(&a.values, &b.values, m, k, n)
        };
        let a = self.clone();
        let b = other.clone();
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let av = a.inner.borrow();
                let bv = b.inner.borrow();
                // dA = G B^T, dB = A^T G
                let ga = mat_mul_nt(g, &bv.values, m, n, k);
                let gb = mat_mul_tn(&av.values, g, m, k, n);
                vec![ga, gb]
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.rank2("transpose")?;
        let vals = self.inner.borrow();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = vals.values[i * n + j];
            }
        }
        drop(vals);
        Ok(Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gi = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        gi[i * n + j] = g[j * m + i];
                    }
                }
                vec![gi]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(Error::dim(format!(
                "reshape: {:?} -> {:?}",
                self.shape(),
                shape
            )));
        }
        let out = self.values();
        Ok(Tensor::from_op(
            shape.to_vec(),
            out,
            vec![self.clone()],
            Box::new(|g| vec![g.to_vec()]),
        ))
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows: empty input"));
        }
        let cols = parts[0].rank2("concat_rows")?.1;
        let mut total_rows = 0;
        let mut row_counts = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.rank2("concat_rows")?;
            if c != cols {
                return Err(Error::dim(format!(
                    "concat_rows: column mismatch {c} vs {cols}"
                )));
            }
            total_rows += r;
            row_counts.push(r);
        }
        let mut out = Vec::with_capacity(total_rows * cols);
        for p in parts {
            out.extend_from_slice(&p.inner.borrow().values);
        }
        Ok(Tensor::from_op(
            vec![total_rows, cols],
            out,
            parts.to_vec(),
            Box::new(move |g| {
                let mut grads = Vec::with_capacity(row_counts.len());
                let mut offset = 0;
                for &r in &row_counts {
                    grads.push(g[offset..offset + r * cols].to_vec());
                    offset += r * cols;
                }
                grads
            }),
        ))
    }

    /// Stack matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: empty input"));
        }
        let rows = parts[0].rank2("concat_cols")?.0;
        let mut col_counts = Vec::with_capacity(parts.len());
        let mut total_cols = 0;
        for p in parts {
            let (r, c) = p.rank2("concat_cols")?;
            if r != rows {
                return Err(Error::dim(format!(
                    "concat_cols: row mismatch {r} vs {rows}"
                )));
            }
            col_counts.push(c);
            total_cols += c;
        }
        let mut out = vec![0.0; rows * total_cols];
        {
            let mut col_off = 0;
            for p in parts {
                let pv = p.inner.borrow();
                let c = pv.shape[1];
                for i in 0..rows {
                    out[i * total_cols + col_off..i * total_cols + col_off + c]
                        .copy_from_slice(&pv.values[i * c..(i + 1) * c]);
                }
                col_off += c;
            }
        }
        Ok(Tensor::from_op(
            vec![rows, total_cols],
            out,
            parts.to_vec(),
            Box::new(move |g| {
                let mut grads = Vec::with_capacity(col_counts.len());
                let mut col_off = 0;
                for &c in &col_counts {
                    let mut gp = vec![0.0; rows * c];
                    for i in 0..rows {
                        gp[i * c..(i + 1) * c].copy_from_slice(
                            &g[i * total_cols + col_off..i * total_cols + col_off + c],
                        );
                    }
                    grads.push(gp);
                    col_off += c;
                }
                grads
            }),
        ))
    }

    // ----- activations -----

    pub fn relu(&self) -> Tensor {
        let vals = self.values();
        let out: Vec<f64> = vals.iter().map(|x| x.max(0.0)).collect();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(&vals)
                    .map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 })
                    .collect()]
            }),
        )
    }

    /// Smooth gaussian-error unit, tanh form. Preferred over relu inside the
    /// models here so finite-difference checks stay clean.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        let vals = self.values();
        let out: Vec<f64> = vals
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let gi = g
                    .iter()
                    .zip(&vals)
                    .map(|(gv, &x)| {
                        let u = C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                        gv * d
                    })
                    .collect();
                vec![gi]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self
            .inner
            .borrow()
            .values
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let saved = out.clone();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(&saved)
                    .map(|(gi, s)| gi * s * (1.0 - s))
                    .collect()]
            }),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let out: Vec<f64> = self.inner.borrow().values.iter().map(|x| x.tanh()).collect();
        let saved = out.clone();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(&saved)
                    .map(|(gi, t)| gi * (1.0 - t * t))
                    .collect()]
            }),
        )
    }

    /// Row-wise softmax over the last axis with max-shift. Additive masks of
    /// -1e9 underflow to an exact zero probability.
    pub fn softmax(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::dim("softmax: rank 0"));
        }
        let cols = *shape.last().unwrap();
        if cols == 0 {
            return Err(Error::dim("softmax: empty rows"));
        }
        let rows = self.len() / cols;
        let vals = self.values();
        let mut out = vec![0.0; vals.len()];
        for r in 0..rows {
            let row = &vals[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                out[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                out[r * cols + j] /= sum;
            }
        }
        let saved = out.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gi = vec![0.0; g.len()];
                for r in 0..rows {
                    let s = &saved[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = s.iter().zip(gr).map(|(si, gi)| si * gi).sum();
                    for j in 0..cols {
                        gi[r * cols + j] = s[j] * (gr[j] - dot);
                    }
                }
                vec![gi]
            }),
        ))
    }

    /// Layer normalisation over the last axis, y = gamma * (x - mu) / sqrt(var + eps) + beta.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let shape = self.shape();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::dim("layer_norm: rank 0"))?;
        if gamma.len() != cols || beta.len() != cols {
            return Err(Error::dim(format!(
                "layer_norm: feature dim {cols}, gamma {} beta {}",
                gamma.len(),
                beta.len()
            )));
        }
        let rows = self.len() / cols;
        let vals = self.values();
        let gv = gamma.values();
        let bv = beta.values();
        let mut out = vec![0.0; vals.len()];
        let mut xhat = vec![0.0; vals.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &vals[r * cols..(r + 1) * cols];
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                let xh = (row[j] - mu) * is;
                xhat[r * cols + j] = xh;
                out[r * cols + j] = gv[j] * xh + bv[j];
            }
        }
        let gamma_c = gamma.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let gval = gamma_c.inner.borrow();
                let mut gx = vec![0.0; g.len()];
                let mut ggamma = vec![0.0; cols];
                let mut gbeta = vec![0.0; cols];
                for r in 0..rows {
                    let xh = &xhat[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut sum_gy = 0.0;
                    let mut sum_gy_xh = 0.0;
                    for j in 0..cols {
                        let gy = gr[j] * gval.values[j];
                        sum_gy += gy;
                        sum_gy_xh += gy * xh[j];
                        ggamma[j] += gr[j] * xh[j];
                        gbeta[j] += gr[j];
                    }
                    let inv_n = 1.0 / cols as f64;
                    for j in 0..cols {
                        let gy = gr[j] * gval.values[j];
                        gx[r * cols + j] =
                            inv_std[r] * (gy - inv_n * sum_gy - xh[j] * inv_n * sum_gy_xh);
                    }
                }
                vec![gx, ggamma, gbeta]
            }),
        ))
    }

    // ----- lookups and reductions -----

    /// Row lookup into an id-indexed table, the embedding layer primitive.
    pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (vocab, dim) = table.rank2("embedding")?;
        for &id in ids {
            if id >= vocab {
                return Err(Error::dim(format!(
                    "embedding: id {id} out of vocabulary {vocab}"
                )));
            }
        }
        let tv = table.inner.borrow();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(&tv.values[id * dim..(id + 1) * dim]);
        }
        drop(tv);
        let ids_saved = ids.to_vec();
        Ok(Tensor::from_op(
            vec![ids.len(), dim],
            out,
            vec![table.clone()],
            Box::new(move |g| {
                let mut gt = vec![0.0; vocab * dim];
                for (row, &id) in ids_saved.iter().enumerate() {
                    for j in 0..dim {
                        gt[id * dim + j] += g[row * dim + j];
                    }
                }
                vec![gt]
            }),
        ))
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.inner.borrow().values.iter().sum();
        let n = self.len();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g| vec![vec![g[0]; n]]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len();
        let s: f64 = self.inner.borrow().values.iter().sum();
        Tensor::from_op(
            vec![1],
            vec![s / n as f64],
            vec![self.clone()],
            Box::new(move |g| vec![vec![g[0] / n as f64; n]]),
        )
    }

    /// Frobenius norm, sqrt of the sum of squares over all entries.
    pub fn norm_l2(&self) -> Tensor {
        let vals = self.values();
        let norm = vals.iter().map(|x| x * x).sum::<f64>().sqrt();
        Tensor::from_op(
            vec![1],
            vec![norm],
            vec![self.clone()],
            Box::new(move |g| {
                let denom = norm.max(1e-12);
                vec![vals.iter().map(|x| g[0] * x / denom).collect()]
            }),
        )
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let vals = self.values();
        let out: Vec<f64> = vals.iter().map(|x| x.clamp(lo, hi)).collect();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(&vals)
                    .map(|(gi, &x)| if x >= lo && x <= hi { *gi } else { 0.0 })
                    .collect()]
            }),
        )
    }

    // ----- broadcast helpers -----

    /// Multiply row i of a [rows, cols] tensor by mask[i]. The mask must be
    /// a constant; it carries no gradient by construction.
    pub fn mask_rows(&self, mask: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.rank2("mask_rows")?;
        if mask.len() != rows {
            return Err(Error::dim(format!(
                "mask_rows: {} mask entries for {rows} rows",
                mask.len()
            )));
        }
        if mask.requires_grad() {
            return Err(Error::contract("mask_rows: mask must not require grad"));
        }
        let mv = mask.values();
        let out: Vec<f64> = {
            let a = self.inner.borrow();
            (0..rows * cols)
                .map(|i| a.values[i] * mv[i / cols])
                .collect()
        };
        Ok(Tensor::from_op(
            vec![rows, cols],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![(0..rows * cols).map(|i| g[i] * mv[i / cols]).collect()]
            }),
        ))
    }

    /// Multiply each row elementwise by a constant vector over the last axis.
    pub fn mul_cols(&self, weights: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.rank2("mul_cols")?;
        if weights.len() != cols {
            return Err(Error::dim(format!(
                "mul_cols: {} weights for {cols} columns",
                weights.len()
            )));
        }
        if weights.requires_grad() {
            return Err(Error::contract("mul_cols: weights must not require grad"));
        }
        let wv = weights.values();
        let out: Vec<f64> = {
            let a = self.inner.borrow();
            (0..rows * cols)
                .map(|i| a.values[i] * wv[i % cols])
                .collect()
        };
        Ok(Tensor::from_op(
            vec![rows, cols],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![(0..rows * cols).map(|i| g[i] * wv[i % cols]).collect()]
            }),
        ))
    }

    /// Add a bias row vector to every row; the standard linear-layer bias.
    pub fn add_bias_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.rank2("add_bias_row")?;
        if bias.len() != cols {
            return Err(Error::dim(format!(
                "add_bias_row: bias {} for {cols} columns",
                bias.len()
            )));
        }
        let bv = bias.values();
        let out: Vec<f64> = {
            let a = self.inner.borrow();
            (0..rows * cols)
                .map(|i| a.values[i] + bv[i % cols])
                .collect()
        };
        Ok(Tensor::from_op(
            vec![rows, cols],
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                let mut gb = vec![0.0; cols];
                for i in 0..rows * cols {
                    gb[i % cols] += g[i];
                }
                vec![g.to_vec(), gb]
            }),
        ))
    }

    // ----- convolution -----

    /// 2D convolution, stride 1, symmetric zero padding. Input [C, H, W],
    /// kernel [O, C, kh, kw], optional bias [O]; output [O, H', W'] with
    /// H' = H + 2 pad - kh + 1.
    pub fn conv2d(&self, kernel: &Tensor, bias: Option<&Tensor>, pad: usize) -> Result<Tensor> {
        let in_shape = self.shape();
        if in_shape.len() != 3 {
            return Err(Error::dim(format!("conv2d: input rank {:?}", in_shape)));
        }
        let k_shape = kernel.shape();
        if k_shape.len() != 4 {
            return Err(Error::dim(format!("conv2d: kernel rank {:?}", k_shape)));
        }
        let (c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        let (c_out, kc, kh, kw) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
        if kc != c_in {
            return Err(Error::dim(format!(
                "conv2d: kernel expects {kc} input channels, got {c_in}"
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim("conv2d: kernel larger than padded input"));
        }
        if let Some(b) = bias {
            if b.len() != c_out {
                return Err(Error::dim(format!(
                    "conv2d: bias {} for {c_out} output channels",
                    b.len()
                )));
            }
        }
        let oh = h + 2 * pad - kh + 1;
        let ow = w + 2 * pad - kw + 1;
        let xv = self.values();
        let kv = kernel.values();
        let bv = bias.map(|b| b.values());
        let mut out = vec![0.0; c_out * oh * ow];
        for o in 0..c_out {
            let base_b = bv.as_ref().map(|b| b[o]).unwrap_or(0.0);
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = base_b;
                    for c in 0..c_in {
                        for i in 0..kh {
                            let sy = y + i;
                            if sy < pad || sy >= h + pad {
                                continue;
                            }
                            let iy = sy - pad;
                            for j in 0..kw {
                                let sx = x + j;
                                if sx < pad || sx >= w + pad {
                                    continue;
                                }
                                let ix = sx - pad;
                                acc += xv[c * h * w + iy * w + ix]
                                    * kv[((o * c_in + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[o * oh * ow + y * ow + x] = acc;
                }
            }
        }
        let mut parents = vec![self.clone(), kernel.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        let xv_saved = xv;
        let kv_saved = kv;
        Ok(Tensor::from_op(
            vec![c_out, oh, ow],
            out,
            parents,
            Box::new(move |g| {
                let mut gx = vec![0.0; c_in * h * w];
                let mut gk = vec![0.0; c_out * c_in * kh * kw];
                let mut gb = vec![0.0; c_out];
                for o in 0..c_out {
                    for y in 0..oh {
                        for x in 0..ow {
                            let go = g[o * oh * ow + y * ow + x];
                            if go == 0.0 {
                                continue;
                            }
                            gb[o] += go;
                            for c in 0..c_in {
                                for i in 0..kh {
                                    let sy = y + i;
                                    if sy < pad || sy >= h + pad {
                                        continue;
                                    }
                                    let iy = sy - pad;
                                    for j in 0..kw {
                                        let sx = x + j;
                                        if sx < pad || sx >= w + pad {
                                            continue;
                                        }
                                        let ix = sx - pad;
                                        let kidx = ((o * c_in + c) * kh + i) * kw + j;
                                        gx[c * h * w + iy * w + ix] += go * kv_saved[kidx];
                                        gk[kidx] += go * xv_saved[c * h * w + iy * w + ix];
                                    }
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![gx, gk];
                if has_bias {
                    grads.push(gb);
                }
                grads
            }),
        ))
    }

    /// Add a per-channel bias to a [C, H, W] tensor.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 3 {
            return Err(Error::dim(format!("add_channel_bias: rank {:?}", shape)));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if bias.len() != c {
            return Err(Error::dim(format!(
                "add_channel_bias: bias {} for {c} channels",
                bias.len()
            )));
        }
        let bv = bias.values();
        let out: Vec<f64> = {
            let a = self.inner.borrow();
            (0..c * h * w).map(|i| a.values[i] + bv[i / (h * w)]).collect()
        };
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                let mut gb = vec![0.0; c];
                for i in 0..c * h * w {
                    gb[i / (h * w)] += g[i];
                }
                vec![g.to_vec(), gb]
            }),
        ))
    }

    fn parents(&self) -> Vec<Tensor> {
        self.inner.borrow().parents.clone()
    }
}

// Raw matrix kernels over flat row-major slices.

fn mat_mul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// a [m, n] times b^T where b is [k, n]; result [m, k].
fn mat_mul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for p in 0..n {
                acc += arow[p] * brow[p];
            }
            out[i * k + j] = acc;
        }
    }
    out
}

/// a^T times b where a is [m, k] and b is [m, n]; result [k, n].
fn mat_mul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = arow[p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// Reverse-mode sweep from a scalar loss. Accumulates gradients into every
/// reachable tensor with `requires_grad`, leaves included.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.len() != 1 {
        return Err(Error::contract(format!(
            "backward: loss must be scalar, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Err(Error::contract(
            "backward: loss does not depend on any trainable tensor",
        ));
    }
    let order = topo_order(loss);
    loss.accumulate_grad(&[1.0]);
    for t in order.iter().rev() {
        let grad = {
            let n = t.inner.borrow();
            if n.backward.is_none() {
                continue;
            }
            match &n.grad {
                Some(g) => g.clone(),
                None => continue,
            }
        };
        let parent_grads = {
            let n = t.inner.borrow();
            (n.backward.as_ref().unwrap())(&grad)
        };
        let parents = t.parents();
        debug_assert_eq!(parents.len(), parent_grads.len());
        for (p, pg) in parents.iter().zip(parent_grads.iter()) {
            if p.requires_grad() {
                p.accumulate_grad(pg);
            }
        }
    }
    Ok(())
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        let id = t.id();
        if !visited.insert(id) {
            continue;
        }
        stack.push((t.clone(), true));
        for p in t.parents() {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p, false));
            }
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn constant_shape_mismatch_is_rejected() {
        assert!(Tensor::constant(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn add_mul_values_and_grads() {
        let a = Tensor::parameter(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::parameter(&[3], vec![4.0, 5.0, 6.0]).unwrap();
        let y = a.add(&b).unwrap().mul(&b).unwrap().sum();
        assert_close(y.item().unwrap(), 5.0 * 4.0 + 7.0 * 5.0 + 9.0 * 6.0, 1e-12);
        backward(&y).unwrap();
        assert_eq!(a.grad().unwrap(), vec![4.0, 5.0, 6.0]);
        // d/db (a+b)*b = a + 2b
        assert_eq!(b.grad().unwrap(), vec![9.0, 12.0, 15.0]);
    }

    #[test]
    fn duplicate_parent_accumulates() {
        let x = Tensor::parameter(&[2], vec![3.0, -1.0]).unwrap();
        let y = x.mul(&x).unwrap().sum(); // sum x^2
        backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, -2.0]);
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let a = Tensor::parameter(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::parameter(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.values(), vec![58.0, 64.0, 139.0, 154.0]);
        let loss = c.sum();
        backward(&loss).unwrap();
        // dA = ones(2,2) @ B^T
        assert_eq!(a.grad().unwrap(), vec![15.0, 19.0, 23.0, 15.0, 19.0, 23.0]);
        assert_eq!(b.grad().unwrap(), vec![5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_mask_zeroes() {
        let x = Tensor::constant(&[2, 3], vec![0.3, -0.2, 1.5, -1e9, 0.0, 0.5]).unwrap();
        let s = x.softmax().unwrap();
        let v = s.values();
        assert_close(v[0] + v[1] + v[2], 1.0, 1e-12);
        assert_close(v[3] + v[4] + v[5], 1.0, 1e-12);
        assert_eq!(v[3], 0.0, "-1e9 logit must underflow to exactly zero");
    }

    #[test]
    fn layer_norm_standardises_rows() {
        let x = Tensor::parameter(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 9.0]).unwrap();
        let gamma = Tensor::constant(&[4], vec![1.0; 4]).unwrap();
        let beta = Tensor::constant(&[4], vec![0.0; 4]).unwrap();
        let y = x.layer_norm(&gamma, &beta, 1e-5).unwrap();
        let v = y.values();
        for r in 0..2 {
            let row = &v[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
            assert_close(mean, 0.0, 1e-9);
            assert_close(var, 1.0, 1e-3);
        }
    }

    #[test]
    fn embedding_scatters_gradients() {
        let table = Tensor::parameter(&[3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let e = Tensor::embedding(&table, &[2, 0, 2]).unwrap();
        assert_eq!(e.values(), vec![4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        backward(&e.sum()).unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let table = Tensor::zeros(&[3, 2]);
        assert!(Tensor::embedding(&table, &[3]).is_err());
    }

    #[test]
    fn conv2d_matches_hand_computation() {
        // 1x3x3 input, single 2x2 kernel, no padding
        let x = Tensor::parameter(&[1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let k = Tensor::parameter(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        let y = x.conv2d(&k, None, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 2]);
        // each output = x[i][j] - x[i+1][j+1] = -4
        assert_eq!(y.values(), vec![-4.0; 4]);
    }

    #[test]
    fn conv2d_padding_grows_output() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let y = x.conv2d(&k, None, 1).unwrap();
        assert_eq!(y.shape(), vec![3, 4, 4]);
    }

    #[test]
    fn mask_rows_zeroes_whole_rows() {
        let x = Tensor::parameter(&[3, 2], vec![1.0; 6]).unwrap();
        let m = Tensor::constant(&[3], vec![1.0, 0.0, 1.0]).unwrap();
        let y = x.mask_rows(&m).unwrap();
        assert_eq!(y.values(), vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        backward(&y.sum()).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn mask_rows_rejects_trainable_mask() {
        let x = Tensor::zeros(&[2, 2]);
        let m = Tensor::parameter(&[2], vec![1.0, 1.0]).unwrap();
        assert!(x.mask_rows(&m).is_err());
    }

    #[test]
    fn concat_rows_roundtrips_gradients() {
        let a = Tensor::parameter(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::parameter(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = Tensor::concat_rows(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.shape(), vec![3, 2]);
        let w = Tensor::constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        backward(&c.mask_rows(&w).unwrap().sum()).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn concat_cols_splits_gradients() {
        let a = Tensor::parameter(&[2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::parameter(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = Tensor::concat_cols(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.values(), vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        backward(&c.sum()).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn transpose_and_reshape_grads_flow() {
        let a = Tensor::parameter(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = a.transpose().unwrap();
        assert_eq!(t.values(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let r = t.reshape(&[6]).unwrap();
        backward(&r.sum()).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn norm_l2_is_frobenius() {
        let a = Tensor::parameter(&[2, 2], vec![3.0, 0.0, 0.0, 4.0]).unwrap();
        let n = a.norm_l2();
        assert_close(n.item().unwrap(), 5.0, 1e-12);
        backward(&n).unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.6, 0.0, 0.0, 0.8]);
    }

    #[test]
    fn inference_graph_without_parameters_has_no_lineage() {
        let a = Tensor::constant(&[2], vec![1.0, 2.0]).unwrap();
        let b = a.scale(2.0).add_scalar(1.0);
        assert!(!b.requires_grad());
        assert!(b.parents().is_empty());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let a = Tensor::parameter(&[2], vec![1.0, 2.0]).unwrap();
        assert!(backward(&a).is_err());
    }

    #[test]
    fn diamond_graph_accumulates_through_both_paths() {
        let x = Tensor::parameter(&[1], vec![2.0]).unwrap();
        let a = x.scale(3.0);
        let b = x.scale(5.0);
        let y = a.add(&b).unwrap().sum();
        backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0]);
    }

    #[test]
    fn zero_grad_clears_accumulation() {
        let x = Tensor::parameter(&[1], vec![2.0]).unwrap();
        backward(&x.scale(3.0).sum()).unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
        backward(&x.scale(3.0).sum()).unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0]);
    }
}
