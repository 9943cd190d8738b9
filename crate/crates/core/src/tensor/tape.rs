//! Reverse-mode autodiff over a recorded computation.
//!
//! A [`Tape`] owns an append-only list of nodes; each op pushes its output
//! value plus a closure mapping the output gradient to parent gradients.
//! [`Tape::backward`] walks the list in reverse, accumulating gradients and
//! collecting those that land on named parameter leaves. With recording off
//! (inference) the same ops run but store no parents or closures.
//!
//! Every op validates shapes (reporting both on mismatch) and rejects
//! non-finite outputs.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::params::GradientRecord;
use crate::tensor::TensorBase;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<T> =
    Box<dyn Fn(&TensorBase<T>, &[&TensorBase<T>], &TensorBase<T>) -> Vec<TensorBase<T>>>;

struct Node<T: Scalar> {
    value: Arc<TensorBase<T>>,
    parents: Vec<Var>,
    backward: Option<BackFn<T>>,
    /// Set on parameter leaves; backward() collects their gradients by name.
    param: Option<String>,
}

/// Recorded computation; create one per forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    /// A tape that runs the same ops without storing gradient information.
    pub fn inference() -> Self {
        let t = Self::new();
        t.recording.set(false);
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    /// Value of a recorded node (cheap Arc clone).
    pub fn value(&self, v: Var) -> Arc<TensorBase<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    fn push(
        &self,
        op: &'static str,
        value: TensorBase<T>,
        parents: Vec<Var>,
        backward: Option<BackFn<T>>,
        param: Option<String>,
    ) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        self.push_arc(Arc::new(value), parents, backward, param)
    }

    fn push_arc(
        &self,
        value: Arc<TensorBase<T>>,
        parents: Vec<Var>,
        backward: Option<BackFn<T>>,
        param: Option<String>,
    ) -> Result<Var, TensorError> {
        let mut nodes = self.nodes.borrow_mut();
        let keep = self.recording.get();
        nodes.push(Node {
            value,
            parents: if keep { parents } else { Vec::new() },
            backward: if keep { backward } else { None },
            param: if keep { param } else { None },
        });
        Ok(Var(nodes.len() - 1))
    }

    // ==== leaves ====

    /// Constant input: participates in the graph but receives no gradient.
    pub fn leaf(&self, value: TensorBase<T>) -> Result<Var, TensorError> {
        self.push("leaf", value, vec![], None, None)
    }

    /// Shared-storage constant (no copy).
    pub fn leaf_arc(&self, value: Arc<TensorBase<T>>) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.push_arc(value, vec![], None, None)
    }

    /// Named trainable leaf; its gradient appears in the backward record.
    /// No finiteness scan here: parameters are validated where they change
    /// (the training loop aborts on a non-finite loss, and backward rejects
    /// non-finite gradients), and binding the full set happens on every
    /// forward pass.
    pub fn param(&self, name: &str, value: Arc<TensorBase<T>>) -> Result<Var, TensorError> {
        self.push_arc(value, vec![], None, Some(name.to_string()))
    }

    // ==== elementwise ====

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.add(&vb)?;
        self.push(
            "add",
            out,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
            None,
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.sub(&vb)?;
        self.push(
            "sub",
            out,
            vec![a, b],
            Some(Box::new(|g, _, _| {
                vec![g.clone(), g.scale(T::from_f64(-1.0).unwrap())]
            })),
            None,
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.hadamard(&vb)?;
        self.push(
            "mul",
            out,
            vec![a, b],
            Some(Box::new(|g, p, _| {
                vec![
                    g.hadamard(p[1]).expect("mul backward"),
                    g.hadamard(p[0]).expect("mul backward"),
                ]
            })),
            None,
        )
    }

    pub fn scale(&self, a: Var, c: T) -> Result<Var, TensorError> {
        let out = self.value(a).scale(c);
        self.push(
            "scale",
            out,
            vec![a],
            Some(Box::new(move |g, _, _| vec![g.scale(c)])),
            None,
        )
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Result<Var, TensorError> {
        let out = self.value(a).map(|v| v + c);
        self.push(
            "add_scalar",
            out,
            vec![a],
            Some(Box::new(|g, _, _| vec![g.clone()])),
            None,
        )
    }

    // ==== products ====

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.matmul(&vb)?;
        self.push(
            "matmul",
            out,
            vec![a, b],
            Some(Box::new(|g, p, _| {
                vec![
                    g.matmul_nt(p[1]).expect("matmul backward dA"),
                    p[0].matmul_tn(g).expect("matmul backward dB"),
                ]
            })),
            None,
        )
    }

    /// `a · bᵀ` — the attention-score product.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.matmul_nt(&vb)?;
        self.push(
            "matmul_nt",
            out,
            vec![a, b],
            Some(Box::new(|g, p, _| {
                vec![
                    g.matmul(p[1]).expect("matmul_nt backward dA"),
                    g.matmul_tn(p[0]).expect("matmul_nt backward dB"),
                ]
            })),
            None,
        )
    }

    // ==== broadcasts ====

    /// Adds a `[1×d]` row vector to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (va, vr) = (self.value(a), self.value(row));
        let out = va.add_row_broadcast(&vr)?;
        self.push(
            "add_row",
            out,
            vec![a, row],
            Some(Box::new(|g, _, _| vec![g.clone(), g.col_sum()])),
            None,
        )
    }

    /// Multiplies every row of `a` elementwise by a `[1×d]` row vector.
    pub fn mul_row(&self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (va, vr) = (self.value(a), self.value(row));
        let out = va.mul_row_broadcast(&vr)?;
        self.push(
            "mul_row",
            out,
            vec![a, row],
            Some(Box::new(|g, p, _| {
                vec![
                    g.mul_row_broadcast(p[1]).expect("mul_row backward dA"),
                    g.hadamard(p[0]).expect("mul_row backward dR").col_sum(),
                ]
            })),
            None,
        )
    }

    // ==== row-wise nonlinear ====

    pub fn softmax_rows(&self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let mut out = TensorBase::zeros(va.rows(), va.cols());
        for i in 0..va.rows() {
            let row = va.row(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            let orow = out.row_mut(i);
            for (o, &x) in orow.iter_mut().zip(row) {
                let e = (x - m).exp();
                *o = e;
                denom += e;
            }
            for o in orow.iter_mut() {
                *o = *o / denom;
            }
        }
        self.push(
            "softmax_rows",
            out,
            vec![a],
            Some(Box::new(|g, _, s| {
                let mut dx = TensorBase::zeros(s.rows(), s.cols());
                for i in 0..s.rows() {
                    let (srow, grow) = (s.row(i), g.row(i));
                    let dot: T = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
                    for ((d, &sv), &gv) in dx.row_mut(i).iter_mut().zip(srow).zip(grow) {
                        *d = sv * (gv - dot);
                    }
                }
                vec![dx]
            })),
            None,
        )
    }

    /// Row-wise layer normalization without a learned affine part.
    pub fn layer_norm_rows(&self, a: Var, eps: T) -> Result<Var, TensorError> {
        let va = self.value(a);
        let (n, d) = va.shape();
        let dd = T::from_usize(d).unwrap();
        let mut out = TensorBase::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = va.row(i);
            let mu = row.iter().copied().sum::<T>() / dd;
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / dd;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &x) in out.row_mut(i).iter_mut().zip(row) {
                *o = (x - mu) * is;
            }
        }
        let inv_std = Arc::new(inv_std);
        self.push(
            "layer_norm_rows",
            out,
            vec![a],
            Some(Box::new(move |g, _, y| {
                // dx = inv_std · (g − mean(g) − y·mean(g⊙y)) per row.
                let (n, d) = y.shape();
                let dd = T::from_usize(d).unwrap();
                let mut dx = TensorBase::zeros(n, d);
                for i in 0..n {
                    let (yrow, grow) = (y.row(i), g.row(i));
                    let gmean = grow.iter().copied().sum::<T>() / dd;
                    let gymean = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum::<T>() / dd;
                    let is = inv_std[i];
                    for ((o, &gv), &yv) in dx.row_mut(i).iter_mut().zip(grow).zip(yrow) {
                        *o = is * (gv - gmean - yv * gymean);
                    }
                }
                vec![dx]
            })),
            None,
        )
    }

    // ==== smooth nonlinearities ====

    pub fn gelu(&self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt()).unwrap();
        let k = T::from_f64(0.044715).unwrap();
        let half = T::from_f64(0.5).unwrap();
        let out = va.map(|x| {
            let u = c * (x + k * x * x * x);
            half * x * (T::one() + u.tanh())
        });
        self.push(
            "gelu",
            out,
            vec![a],
            Some(Box::new(move |g, p, _| {
                let three = T::from_f64(3.0).unwrap();
                let dx = p[0].map(|x| {
                    let u = c * (x + k * x * x * x);
                    let t = u.tanh();
                    let sech2 = T::one() - t * t;
                    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
                });
                vec![g.hadamard(&dx).expect("gelu backward")]
            })),
            None,
        )
    }

    pub fn silu(&self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let sig = |x: T| T::one() / (T::one() + (-x).exp());
        let out = va.map(|x| x * sig(x));
        self.push(
            "silu",
            out,
            vec![a],
            Some(Box::new(move |g, p, _| {
                let dx = p[0].map(|x| {
                    let s = sig(x);
                    s * (T::one() + x * (T::one() - s))
                });
                vec![g.hadamard(&dx).expect("silu backward")]
            })),
            None,
        )
    }

    // ==== concatenation and slicing ====

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::invalid("concat_rows", "empty part list"));
        }
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let cols = vals[0].cols();
        let mut rows = 0;
        for v in &vals {
            if v.cols() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vals[0].shape(),
                    rhs: v.shape(),
                });
            }
            rows += v.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for v in &vals {
            data.extend_from_slice(v.data());
        }
        let sizes: Vec<usize> = vals.iter().map(|v| v.rows()).collect();
        self.push(
            "concat_rows",
            TensorBase::from_vec(rows, cols, data),
            parts.to_vec(),
            Some(Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut at = 0;
                for &sz in &sizes {
                    out.push(g.slice_rows(at, sz));
                    at += sz;
                }
                out
            })),
            None,
        )
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let va = self.value(a);
        if start + len > va.rows() {
            return Err(TensorError::invalid(
                "slice_rows",
                format!("rows {}..{} of {}", start, start + len, va.rows()),
            ));
        }
        let total = va.rows();
        let out = va.slice_rows(start, len);
        self.push(
            "slice_rows",
            out,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut dx = TensorBase::zeros(total, g.cols());
                for i in 0..g.rows() {
                    dx.row_mut(start + i).copy_from_slice(g.row(i));
                }
                vec![dx]
            })),
            None,
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::invalid("concat_cols", "empty part list"));
        }
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let rows = vals[0].rows();
        let mut cols = 0;
        for v in &vals {
            if v.rows() != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vals[0].shape(),
                    rhs: v.shape(),
                });
            }
            cols += v.cols();
        }
        let mut out = TensorBase::zeros(rows, cols);
        for i in 0..rows {
            let orow = out.row_mut(i);
            let mut at = 0;
            for v in &vals {
                orow[at..at + v.cols()].copy_from_slice(v.row(i));
                at += v.cols();
            }
        }
        let sizes: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
        self.push(
            "concat_cols",
            out,
            parts.to_vec(),
            Some(Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut at = 0;
                for &sz in &sizes {
                    out.push(g.slice_cols(at, sz));
                    at += sz;
                }
                out
            })),
            None,
        )
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let va = self.value(a);
        if start + len > va.cols() {
            return Err(TensorError::invalid(
                "slice_cols",
                format!("cols {}..{} of {}", start, start + len, va.cols()),
            ));
        }
        if start == 0 && len == va.cols() {
            return Ok(a); // full slice is the identity
        }
        let total = va.cols();
        let out = va.slice_cols(start, len);
        self.push(
            "slice_cols",
            out,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut dx = TensorBase::zeros(g.rows(), total);
                for i in 0..g.rows() {
                    dx.row_mut(i)[start..start + g.cols()].copy_from_slice(g.row(i));
                }
                vec![dx]
            })),
            None,
        )
    }

    // ==== index selection ====

    /// Picks rows by index (duplicates allowed); the adjoint scatter-adds.
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let va = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&ix| ix >= va.rows()) {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("index {bad} out of {} rows", va.rows()),
            ));
        }
        let total = va.rows();
        let out = va.take_rows(indices);
        let idx: Arc<Vec<usize>> = Arc::new(indices.to_vec());
        self.push(
            "gather_rows",
            out,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut dx = TensorBase::zeros(total, g.cols());
                for (j, &ix) in idx.iter().enumerate() {
                    for (o, &gv) in dx.row_mut(ix).iter_mut().zip(g.row(j)) {
                        *o += gv;
                    }
                }
                vec![dx]
            })),
            None,
        )
    }

    /// `out[i] = Σ src[j] over j with indices[j] == i`; the adjoint gathers.
    pub fn scatter_add_rows(
        &self,
        src: Var,
        indices: &[usize],
        out_rows: usize,
    ) -> Result<Var, TensorError> {
        let vs = self.value(src);
        if indices.len() != vs.rows() {
            return Err(TensorError::invalid(
                "scatter_add_rows",
                format!("{} indices for {} source rows", indices.len(), vs.rows()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&ix| ix >= out_rows) {
            return Err(TensorError::invalid(
                "scatter_add_rows",
                format!("index {bad} out of {out_rows} output rows"),
            ));
        }
        let mut out = TensorBase::zeros(out_rows, vs.cols());
        for (j, &ix) in indices.iter().enumerate() {
            for (o, &v) in out.row_mut(ix).iter_mut().zip(vs.row(j)) {
                *o += v;
            }
        }
        let idx: Arc<Vec<usize>> = Arc::new(indices.to_vec());
        self.push(
            "scatter_add_rows",
            out,
            vec![src],
            Some(Box::new(move |g, _, _| vec![g.take_rows(&idx)])),
            None,
        )
    }

    // ==== reductions ====

    /// Mean over rows: `[n×d] -> [1×d]`.
    pub fn mean_rows(&self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let n = va.rows();
        if n == 0 {
            return Err(TensorError::invalid("mean_rows", "empty tensor"));
        }
        let inv = T::one() / T::from_usize(n).unwrap();
        let out = va.col_sum().scale(inv);
        self.push(
            "mean_rows",
            out,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut dx = TensorBase::zeros(n, g.cols());
                for i in 0..n {
                    for (o, &gv) in dx.row_mut(i).iter_mut().zip(g.row(0)) {
                        *o = gv * inv;
                    }
                }
                vec![dx]
            })),
            None,
        )
    }

    /// Mean over all elements: `[n×d] -> [1×1]`.
    pub fn mean_all(&self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let (n, d) = va.shape();
        if n * d == 0 {
            return Err(TensorError::invalid("mean_all", "empty tensor"));
        }
        let inv = T::one() / T::from_usize(n * d).unwrap();
        let out = TensorBase::scalar(va.sum() * inv);
        self.push(
            "mean_all",
            out,
            vec![a],
            Some(Box::new(move |g, _, _| {
                vec![TensorBase::filled(n, d, g.item() * inv)]
            })),
            None,
        )
    }

    /// Per-row mean over the last axis: `[n×d] -> [n×1]`.
    pub fn mean_last(&self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let (n, d) = va.shape();
        if d == 0 {
            return Err(TensorError::invalid("mean_last", "zero columns"));
        }
        let inv = T::one() / T::from_usize(d).unwrap();
        let out = TensorBase::from_fn(n, 1, |i, _| {
            va.row(i).iter().copied().sum::<T>() * inv
        });
        self.push(
            "mean_last",
            out,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut dx = TensorBase::zeros(n, d);
                for i in 0..n {
                    let gv = g.get(i, 0) * inv;
                    for o in dx.row_mut(i) {
                        *o = gv;
                    }
                }
                vec![dx]
            })),
            None,
        )
    }

    /// Per-row population variance over the last axis: `[n×d] -> [n×1]`.
    pub fn var_last(&self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let (n, d) = va.shape();
        if d == 0 {
            return Err(TensorError::invalid("var_last", "zero columns"));
        }
        let inv = T::one() / T::from_usize(d).unwrap();
        let out = TensorBase::from_fn(n, 1, |i, _| {
            let row = va.row(i);
            let mu = row.iter().copied().sum::<T>() * inv;
            row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() * inv
        });
        self.push(
            "var_last",
            out,
            vec![a],
            Some(Box::new(move |g, p, _| {
                let x = p[0];
                let two = T::from_f64(2.0).unwrap();
                let mut dx = TensorBase::zeros(n, d);
                for i in 0..n {
                    let row = x.row(i);
                    let mu = row.iter().copied().sum::<T>() * inv;
                    let gv = g.get(i, 0);
                    for (o, &xv) in dx.row_mut(i).iter_mut().zip(row) {
                        *o = gv * two * (xv - mu) * inv;
                    }
                }
                vec![dx]
            })),
            None,
        )
    }

    // ==== rotary position encoding ====

    /// Rotates feature pairs `(2p, 2p+1)` of each row by the angles whose
    /// cosines/sines are given per (row, pair) in `cos`/`sin` tables of shape
    /// `[n × d/2]`. Norm-preserving; the adjoint is the inverse rotation.
    pub fn rope(
        &self,
        a: Var,
        cos: Arc<TensorBase<T>>,
        sin: Arc<TensorBase<T>>,
    ) -> Result<Var, TensorError> {
        let va = self.value(a);
        let (n, d) = va.shape();
        if d % 2 != 0 {
            return Err(TensorError::invalid("rope", format!("odd width {d}")));
        }
        if cos.shape() != (n, d / 2) || sin.shape() != (n, d / 2) {
            return Err(TensorError::ShapeMismatch {
                op: "rope",
                lhs: (n, d / 2),
                rhs: cos.shape(),
            });
        }
        let mut out = TensorBase::zeros(n, d);
        for i in 0..n {
            let (row, crow, srow) = (va.row(i), cos.row(i), sin.row(i));
            let orow = out.row_mut(i);
            for p in 0..d / 2 {
                let (x1, x2) = (row[2 * p], row[2 * p + 1]);
                let (c, s) = (crow[p], srow[p]);
                orow[2 * p] = x1 * c - x2 * s;
                orow[2 * p + 1] = x1 * s + x2 * c;
            }
        }
        let (cos_b, sin_b) = (Arc::clone(&cos), Arc::clone(&sin));
        self.push(
            "rope",
            out,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let (n, d) = g.shape();
                let mut dx = TensorBase::zeros(n, d);
                for i in 0..n {
                    let (grow, crow, srow) = (g.row(i), cos_b.row(i), sin_b.row(i));
                    let orow = dx.row_mut(i);
                    for p in 0..d / 2 {
                        let (g1, g2) = (grow[2 * p], grow[2 * p + 1]);
                        let (c, s) = (crow[p], srow[p]);
                        orow[2 * p] = g1 * c + g2 * s;
                        orow[2 * p + 1] = -(g1 * s) + g2 * c;
                    }
                }
                vec![dx]
            })),
            None,
        )
    }

    // ==== backward ====

    /// Reverse sweep from a `[1×1]` root; returns gradients of every named
    /// parameter reached. Parameters not on any path are absent (meaning a
    /// zero gradient).
    pub fn backward(&self, root: Var) -> Result<GradientRecord<T>, TensorError> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.0].value.shape();
        if root_shape != (1, 1) {
            return Err(TensorError::invalid(
                "backward",
                format!("root must be scalar, got {root_shape:?}"),
            ));
        }
        let mut grads: Vec<Option<TensorBase<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(TensorBase::scalar(T::one()));
        let mut record = GradientRecord::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(name) = &node.param {
                if !g.all_finite() {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
                record.accumulate_one(name, g);
                continue;
            }
            if let Some(back) = &node.backward {
                let pvals: Vec<&TensorBase<T>> =
                    node.parents.iter().map(|p| nodes[p.0].value.as_ref()).collect();
                let pgrads = back(&g, &pvals, node.value.as_ref());
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(pgrads) {
                    match &mut grads[p.0] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Ok(record)
    }
}
