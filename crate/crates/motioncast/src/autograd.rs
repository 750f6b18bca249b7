//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation in execution order; [`Tensor`] handles
//! index into it. Calling [`Tensor::backward`] on a scalar walks the tape in
//! reverse creation order (reverse topological order by construction) and
//! accumulates gradients into the leaf tensors that were created with
//! `requires_grad`.
//!
//! The op set is exactly what the forecaster needs: 2-D matmul, elementwise
//! arithmetic, slicing/concatenation, row softmax, row layer norm, GELU/ReLU,
//! inverted dropout, and mean/sum reductions. Tensors are immutable once
//! written; a tape is single-threaded, but independent tapes can run on
//! separate threads concurrently.

use std::cell::RefCell;
use std::ops::Range;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Scalar element type of a tape: `f32` for training, `f64` for testing and
/// gradient checks.
pub trait Element: num_traits::Float + Send + Sync + std::fmt::Debug + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

type BackFn<E> = Box<dyn Fn(&[E], &mut GradStore<E>)>;

struct Node<E: Element> {
    values: Rc<[E]>,
    /// True when this node can influence a gradient (a `requires_grad` leaf
    /// or anything computed from one).
    needs_grad: bool,
    /// Set only on leaves created with `requires_grad`.
    requires_grad: bool,
    /// Filled for `requires_grad` leaves by `backward`.
    grad: Option<Box<[E]>>,
    back: Option<BackFn<E>>,
}

/// Gradient accumulators, one slot per tape node, allocated lazily.
struct GradStore<E> {
    slots: Vec<Option<Box<[E]>>>,
}

impl<E: Element> GradStore<E> {
    fn accum(&mut self, id: usize, len: usize, f: impl FnOnce(&mut [E])) {
        let slot = self.slots[id].get_or_insert_with(|| vec![E::zero(); len].into_boxed_slice());
        f(slot);
    }
}

/// Operation recorder. Create one per forward/backward pass.
pub struct Tape<E: Element> {
    nodes: RefCell<Vec<Node<E>>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one tape node.
pub struct Tensor<'t, E: Element> {
    tape: &'t Tape<E>,
    id: usize,
    shape: Vec<usize>,
}

impl<E: Element> Clone for Tensor<'_, E> {
    fn clone(&self) -> Self {
        Tensor {
            tape: self.tape,
            id: self.id,
            shape: self.shape.clone(),
        }
    }
}

impl<E: Element> std::fmt::Debug for Tensor<'_, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, values: Vec<E>, needs_grad: bool, back: Option<BackFn<E>>) -> Tensor<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            values: Rc::from(values),
            needs_grad,
            requires_grad: false,
            grad: None,
            back,
        });
        Tensor { tape: self, id, shape }
    }

    /// Differentiable input. Rejects non-finite values.
    pub fn leaf(&self, shape: &[usize], values: &[E], requires_grad: bool) -> Result<Tensor<'_, E>> {
        if numel(shape) != values.len() {
            return Err(Error::Shape(format!(
                "leaf: shape {shape:?} holds {} elements, got {}",
                numel(shape),
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("leaf: non-finite input value {v:?}")));
        }
        let t = self.push(shape.to_vec(), values.to_vec(), requires_grad, None);
        self.nodes.borrow_mut()[t.id].requires_grad = requires_grad;
        Ok(t)
    }

    /// Non-differentiable input. Unlike [`Tape::leaf`], infinities are
    /// allowed so attention masks can carry `-inf`.
    pub fn constant(&self, shape: &[usize], values: &[E]) -> Result<Tensor<'_, E>> {
        if numel(shape) != values.len() {
            return Err(Error::Shape(format!(
                "constant: shape {shape:?} holds {} elements, got {}",
                numel(shape),
                values.len()
            )));
        }
        Ok(self.push(shape.to_vec(), values.to_vec(), false, None))
    }

    pub fn scalar(&self, v: E) -> Tensor<'_, E> {
        self.push(vec![], vec![v], false, None)
    }
}

// Accumulating matrix kernels. Loop order keeps the innermost loop running
// over contiguous rows of both operands so the compiler can vectorize it;
// the source dimension is unrolled so each output element is stored once per
// several multiply-adds. The unrolled sums associate left to right, which is
// the same rounding order as repeated `+=`, so results stay bit-identical
// whichever path a given size takes.

/// c[n,m] += a[n,k] . b[k,m]
fn gemm_acc<E: Element>(c: &mut [E], a: &[E], b: &[E], n: usize, k: usize, m: usize) {
    let k4 = k - k % 4;
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * m..(i + 1) * m];
        let mut kk = 0;
        while kk < k4 {
            let a0 = arow[kk];
            let a1 = arow[kk + 1];
            let a2 = arow[kk + 2];
            let a3 = arow[kk + 3];
            let (b0, rest) = b[kk * m..].split_at(m);
            let (b1, rest) = rest.split_at(m);
            let (b2, rest) = rest.split_at(m);
            let b3 = &rest[..m];
            for ((((cv, &v0), &v1), &v2), &v3) in
                crow.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3)
            {
                *cv = *cv + a0 * v0 + a1 * v1 + a2 * v2 + a3 * v3;
            }
            kk += 4;
        }
        for (kk, &aik) in arow.iter().enumerate().skip(k4) {
            let brow = &b[kk * m..(kk + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aik * bv;
            }
        }
    }
}

/// c[k,m] += aᵀ . g, with a[n,k], g[n,m]
fn gemm_tn_acc<E: Element>(c: &mut [E], a: &[E], g: &[E], n: usize, k: usize, m: usize) {
    let n2 = n - n % 2;
    let mut i = 0;
    while i < n2 {
        let arow0 = &a[i * k..(i + 1) * k];
        let arow1 = &a[(i + 1) * k..(i + 2) * k];
        let grow0 = &g[i * m..(i + 1) * m];
        let grow1 = &g[(i + 1) * m..(i + 2) * m];
        for kk in 0..k {
            let a0 = arow0[kk];
            let a1 = arow1[kk];
            let crow = &mut c[kk * m..(kk + 1) * m];
            for ((cv, &g0), &g1) in crow.iter_mut().zip(grow0).zip(grow1) {
                *cv = *cv + a0 * g0 + a1 * g1;
            }
        }
        i += 2;
    }
    for i in n2..n {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * m..(i + 1) * m];
        for (kk, &aik) in arow.iter().enumerate() {
            let crow = &mut c[kk * m..(kk + 1) * m];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv = *cv + aik * gv;
            }
        }
    }
}

fn transpose_into<E: Element>(src: &[E], rows: usize, cols: usize, dst: &mut [E]) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

impl<'t, E: Element> Tensor<'t, E> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.tape.nodes.borrow()[self.id].values.to_vec()
    }

    fn values(&self) -> Rc<[E]> {
        self.tape.nodes.borrow()[self.id].values.clone()
    }

    fn needs_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "item: tensor of shape {:?} is not a scalar",
                self.shape
            )));
        }
        Ok(self.tape.nodes.borrow()[self.id].values[0])
    }

    /// Gradient accumulated by the last `backward`, for `requires_grad` leaves.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.tape.nodes.borrow()[self.id].grad.as_ref().map(|g| g.to_vec())
    }

    fn check_2d(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [n, m] => Ok((n, m)),
            _ => Err(Error::Shape(format!("{op}: expected a 2-D tensor, got shape {:?}", self.shape))),
        }
    }

    /// Propagate gradients from this scalar back to every `requires_grad`
    /// leaf. Gradients of a leaf used several times accumulate additively;
    /// a fresh `backward` call replaces previously stored leaf gradients.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape
            )));
        }
        let mut nodes = self.tape.nodes.borrow_mut();
        let mut store = GradStore {
            slots: (0..nodes.len()).map(|_| None).collect(),
        };
        store.accum(self.id, 1, |g| g[0] = E::one());
        for id in (0..=self.id).rev() {
            let Some(g) = store.slots[id].take() else { continue };
            if !nodes[id].needs_grad && !nodes[id].requires_grad {
                continue;
            }
            match &nodes[id].back {
                Some(back) => back(&g, &mut store),
                None => {
                    if nodes[id].requires_grad {
                        nodes[id].grad = Some(g);
                    }
                }
            }
        }
        Ok(())
    }

    /// 2-D matrix product.
    pub fn matmul(&self, rhs: &Tensor<'t, E>) -> Result<Tensor<'t, E>> {
        let (n, k) = self.check_2d("matmul")?;
        let (k2, m) = rhs.check_2d("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", &self.shape, &rhs.shape));
        }
        let a = self.values();
        let b = rhs.values();
        let mut out = vec![E::zero(); n * m];
        gemm_acc(&mut out, &a, &b, n, k, m);

        let needs = self.needs_grad() || rhs.needs_grad();
        let back: Option<BackFn<E>> = if needs {
            let (a_id, b_id) = (self.id, rhs.id);
            let (a_needs, b_needs) = (self.needs_grad(), rhs.needs_grad());
            Some(Box::new(move |g, store| {
                if a_needs {
                    // ga += g . bᵀ, materializing bᵀ keeps the kernel contiguous
                    let mut bt = vec![E::zero(); k * m];
                    transpose_into(&b, k, m, &mut bt);
                    store.accum(a_id, n * k, |ga| gemm_acc(ga, g, &bt, n, m, k));
                }
                if b_needs {
                    store.accum(b_id, k * m, |gb| gemm_tn_acc(gb, &a, g, n, k, m));
                }
            }))
        } else {
            None
        };
        Ok(self.tape.push(vec![n, m], out, needs, back))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, rhs: &Tensor<'t, E>) -> Result<Tensor<'t, E>> {
        if self.shape != rhs.shape {
            return Err(shape_err("add", &self.shape, &rhs.shape));
        }
        let a = self.values();
        let b = rhs.values();
        let out: Vec<E> = a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect();
        let needs = self.needs_grad() || rhs.needs_grad();
        let back: Option<BackFn<E>> = if needs {
            let (a_id, b_id) = (self.id, rhs.id);
            let (a_needs, b_needs) = (self.needs_grad(), rhs.needs_grad());
            let len = out.len();
            Some(Box::new(move |g, store| {
                if a_needs {
                    store.accum(a_id, len, |ga| {
                        for (gv, &gg) in ga.iter_mut().zip(g) {
                            *gv = *gv + gg;
                        }
                    });
                }
                if b_needs {
                    store.accum(b_id, len, |gb| {
                        for (gv, &gg) in gb.iter_mut().zip(g) {
                            *gv = *gv + gg;
                        }
                    });
                }
            }))
        } else {
            None
        };
        Ok(self.tape.push(self.shape.clone(), out, needs, back))
    }

    /// Elementwise difference.
    pub fn sub(&self, rhs: &Tensor<'t, E>) -> Result<Tensor<'t, E>> {
        if self.shape != rhs.shape {
            return Err(shape_err("sub", &self.shape, &rhs.shape));
        }
        let a = self.values();
        let b = rhs.values();
        let out: Vec<E> = a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect();
        let needs = self.needs_grad() || rhs.needs_grad();
        let back: Option<BackFn<E>> = if needs {
            let (a_id, b_id) = (self.id, rhs.id);
            let (a_needs, b_needs) = (self.needs_grad(), rhs.needs_grad());
            let len = out.len();
            Some(Box::new(move |g, store| {
                if a_needs {
                    store.accum(a_id, len, |ga| {
                        for (gv, &gg) in ga.iter_mut().zip(g) {
                            *gv = *gv + gg;
                        }
                    });
                }
                if b_needs {
                    store.accum(b_id, len, |gb| {
                        for (gv, &gg) in gb.iter_mut().zip(g) {
                            *gv = *gv - gg;
                        }
                    });
                }
            }))
        } else {
            None
        };
        Ok(self.tape.push(self.shape.clone(), out, needs, back))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: f64) -> Result<Tensor<'t, E>> {
        let cc = E::from_f64(c);
        let out: Vec<E> = self.values().iter().map(|&x| x * cc).collect();
        let needs = self.needs_grad();
        let back: Option<BackFn<E>> = if needs {
            let id = self.id;
            let len = out.len();
            Some(Box::new(move |g, store| {
                store.accum(id, len, |ga| {
                    for (gv, &gg) in ga.iter_mut().zip(g) {
                        *gv = *gv + cc * gg;
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.tape.push(self.shape.clone(), out, needs, back))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor<'t, E>> {
        let (n, m) = self.check_2d("transpose")?;
        let a = self.values();
        let mut out = vec![E::zero(); n * m];
        transpose_into(&a, n, m, &mut out);
        let needs = self.needs_grad();
        let back: Option<BackFn<E>> = if needs {
            let id = self.id;
            Some(Box::new(move |g, store| {
                store.accum(id, n * m, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[j * m + i] = ga[j * m + i] + g[i * n + j];
                        }
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.tape.push(vec![m, n], out, needs, back))
    }

    /// Reinterpret the value buffer under a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<'t, E>> {
        if numel(shape) != self.len() {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        let out = self.to_vec();
        let needs = self.needs_grad();
        let back: Option<BackFn<E>> = if needs {
            let id = self.id;
            let len = out.len();
            Some(Box::new(move |g, store| {
                store.accum(id, len, |ga| {
                    for (gv, &gg) in ga.iter_mut().zip(g) {
                        *gv = *gv + gg;
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.tape.push(shape.to_vec(), out, needs, back))
    }

    /// Contiguous row range of a 2-D tensor.
    pub fn slice_rows(&self, rows: Range<usize>) -> Result<Tensor<'t, E>> {
        let (n, m) = self.check_2d("slice_rows")?;
        if rows.start >= rows.end || rows.end > n {
            return Err(Error::Shape(format!(
                "slice_rows: range {rows:?} out of bounds for {n} rows"
            )));
        }
        let a = self.values();
        let out = a[rows.start * m..rows.end * m].to_vec();
        let nr = rows.end - rows.start;
        let needs = self.needs_grad();
        let back: Option<BackFn<E>> = if needs {
            let id = self.id;
            let start = rows.start;
            Some(Box::new(move |g, store| {
                store.accum(id, n * m, |ga| {
                    for (gv, &gg) in ga[start * m..start * m + nr * m].iter_mut().zip(g) {
                        *gv = *gv + gg;
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.tape.push(vec![nr, m], out, needs, back))
    }

    /// Contiguous column range of a 2-D tensor.
    pub fn slice_cols(&self, cols: Range<usize>) -> Result<Tensor<'t, E>> {
        let (n, m) = self.check_2d("slice_cols")?;
        if cols.start >= cols.end || cols.end > m {
            return Err(Error::Shape(format!(
                "slice_cols: range {cols:?} out of bounds for {m} columns"
            )));
        }
        let a = self.values();
        let nc = cols.end - cols.start;
        let mut out = Vec::with_capacity(n * nc);
        for i in 0..n {
            out.extend_from_slice(&a[i * m + cols.start..i * m + cols.end]);
        }
        let needs = self.needs_grad();
        let back: Option<BackFn<E>> = if needs {
            let id = self.id;
            let start = cols.start;
            Some(Box::new(move |g, store| {
                store.accum(id, n * m, |ga| {
                    for i in 0..n {
                        for j in 0..nc {
                            ga[i * m + start + j] = ga[i * m + start + j] + g[i * nc + j];
                        }
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.tape.push(vec![n, nc], out, needs, back))
    }

    /// Stack 2-D tensors with equal column counts on top of each other.
    pub fn concat_rows(parts: &[&Tensor<'t, E>]) -> Result<Tensor<'t, E>> {
        let first = parts.first().ok_or_else(|| Error::Parameter("concat_rows: empty input".into()))?;
        let (_, m) = first.check_2d("concat_rows")?;
        let mut total = 0;
        for p in parts {
            let (pn, pm) = p.check_2d("concat_rows")?;
            if pm != m {
                return Err(shape_err("concat_rows", &first.shape, &p.shape));
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(total * m);
        for p in parts {
            out.extend_from_slice(&p.values());
        }
        let needs = parts.iter().any(|p| p.needs_grad());
        let back: Option<BackFn<E>> = if needs {
            let meta: Vec<(usize, usize, bool)> = parts
                .iter()
                .map(|p| (p.id, p.shape[0], p.needs_grad()))
                .collect();
            Some(Box::new(move |g, store| {
                let mut row = 0;
                for &(id, pn, pneeds) in &meta {
                    if pneeds {
                        store.accum(id, pn * m, |ga| {
                            for (gv, &gg) in ga.iter_mut().zip(&g[row * m..(row + pn) * m]) {
                                *gv = *gv + gg;
                            }
                        });
                    }
                    row += pn;
                }
            }))
        } else {
            None
        };
        Ok(first.tape.push(vec![total, m], out, needs, back))
    }

    /// Concatenate 2-D tensors with equal row counts side by side.
    pub fn concat_cols(parts: &[&Tensor<'t, E>]) -> Result<Tensor<'t, E>> {
        let first = parts.first().ok_or_else(|| Error::Parameter("concat_cols: empty input".into()))?;
        let (n, _) = first.check_2d("concat_cols")?;
        let mut total = 0;
        for p in parts {
            let (pn, pm) = p.check_2d("concat_cols")?;
            if pn != n {
                return Err(shape_err("concat_cols", &first.shape, &p.shape));
            }
            total += pm;
        }
        let vals: Vec<Rc<[E]>> = parts.iter().map(|p| p.values()).collect();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape[1]).collect();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (v, &w) in vals.iter().zip(&widths) {
                out.extend_from_slice(&v[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|p| p.needs_grad());
        let back: Option<BackFn<E>> = if needs {
            let meta: Vec<(usize, usize, bool)> = parts
                .iter()
                .map(|p| (p.id, p.shape[1], p.needs_grad()))
                .collect();
            Some(Box::new(move |g, store| {
                let mut col = 0;
                for &(id, w, pneeds) in &meta {
                    if pneeds {
                        store.accum(id, n * w, |ga| {
                            for i in 0..n {
                                for j in 0..w {
                                    ga[i * w + j] = ga[i * w + j] + g[i * total + col + j];
                                }
                            }
                        });
                    }
                    col += w;
                }
            }))
        } else {
            None
        };
        Ok(first.tape.push(vec![n, total], out, needs, back))
    }

    /// Row-wise softmax of a 2-D tensor (normalizes along the last axis).
    ///
    /// `-inf` entries (attention masks) come out as exact zeros. A row whose
    /// maximum is not finite is a numeric error.
    pub fn softmax(&self) -> Result<Tensor<'t, E>> {
        let (n, m) = self.check_2d("softmax")?;
        let a = self.values();
        let mut out = vec![E::zero(); n * m];
        for i in 0..n {
            let row = &a[i * m..(i + 1) * m];
            let max = row.iter().cloned().fold(E::neg_infinity(), E::max);
            if !max.is_finite() {
                return Err(Error::Numeric(format!("softmax: row {i} has no finite entry")));
            }
            let orow = &mut out[i * m..(i + 1) * m];
            let mut sum = E::zero();
            for (o, &x) in orow.iter_mut().zip(row) {
                let e = (x - max).exp();
                *o = e;
                sum = sum + e;
            }
            let inv = E::one() / sum;
            for o in orow.iter_mut() {
                *o = *o * inv;
            }
        }
        let needs = self.needs_grad();
        let back: Option<BackFn<E>> = if needs {
            let id = self.id;
            let s: Rc<[E]> = Rc::from(out.clone());
            Some(Box::new(move |g, store| {
                store.accum(id, n * m, |ga| {
                    for i in 0..n {
                        let srow = &s[i * m..(i + 1) * m];
                        let grow = &g[i * m..(i + 1) * m];
                        let dot: E = srow
                            .iter()
                            .zip(grow)
                            .fold(E::zero(), |acc, (&sv, &gv)| acc + sv * gv);
                        let garow = &mut ga[i * m..(i + 1) * m];
                        for ((gv, &sv), &gg) in garow.iter_mut().zip(srow).zip(grow) {
                            *gv = *gv + sv * (gg - dot);
                        }
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.tape.push(vec![n, m], out, needs, back))
    }

    /// Row-wise layer normalization with learnable gain and bias, both of
    /// shape `[m]`: `y = gain * (x - mean) / sqrt(var + eps) + bias`.
    pub fn layer_norm(&self, gain: &Tensor<'t, E>, bias: &Tensor<'t, E>, eps: f64) -> Result<Tensor<'t, E>> {
        let (n, m) = self.check_2d("layer_norm")?;
        if gain.shape != [m] {
            return Err(shape_err("layer_norm gain", &self.shape, &gain.shape));
        }
        if bias.shape != [m] {
            return Err(shape_err("layer_norm bias", &self.shape, &bias.shape));
        }
        let a = self.values();
        let gv = gain.values();
        let bv = bias.values();
        let epse = E::from_f64(eps);
        let inv_m = E::one() / E::from_f64(m as f64);
        let mut out = vec![E::zero(); n * m];
        let mut xhat = vec![E::zero(); n * m];
        let mut inv_sigma = vec![E::zero(); n];
        for i in 0..n {
            let row = &a[i * m..(i + 1) * m];
            let mean = row.iter().fold(E::zero(), |s, &x| s + x) * inv_m;
            let var = row.iter().fold(E::zero(), |s, &x| {
                let d = x - mean;
                s + d * d
            }) * inv_m;
            let inv_s = E::one() / (var + epse).sqrt();
            inv_sigma[i] = inv_s;
            for j in 0..m {
                let xh = (row[j] - mean) * inv_s;
                xhat[i * m + j] = xh;
                out[i * m + j] = gv[j] * xh + bv[j];
            }
        }
        let needs = self.needs_grad() || gain.needs_grad() || bias.needs_grad();
        let back: Option<BackFn<E>> = if needs {
            let (x_id, g_id, b_id) = (self.id, gain.id, bias.id);
            let (x_needs, g_needs, b_needs) = (self.needs_grad(), gain.needs_grad(), bias.needs_grad());
            let xhat: Rc<[E]> = Rc::from(xhat);
            let inv_sigma: Rc<[E]> = Rc::from(inv_sigma);
            Some(Box::new(move |g, store| {
                if x_needs {
                    store.accum(x_id, n * m, |ga| {
                        for i in 0..n {
                            let xrow = &xhat[i * m..(i + 1) * m];
                            let grow = &g[i * m..(i + 1) * m];
                            let mut m1 = E::zero();
                            let mut m2 = E::zero();
                            for j in 0..m {
                                let dxh = grow[j] * gv[j];
                                m1 = m1 + dxh;
                                m2 = m2 + dxh * xrow[j];
                            }
                            m1 = m1 * inv_m;
                            m2 = m2 * inv_m;
                            let garow = &mut ga[i * m..(i + 1) * m];
                            for j in 0..m {
                                let dxh = grow[j] * gv[j];
                                garow[j] = garow[j] + inv_sigma[i] * (dxh - m1 - xrow[j] * m2);
                            }
                        }
                    });
                }
                if g_needs {
                    store.accum(g_id, m, |gg| {
                        for i in 0..n {
                            for j in 0..m {
                                gg[j] = gg[j] + g[i * m + j] * xhat[i * m + j];
                            }
                        }
                    });
                }
                if b_needs {
                    store.accum(b_id, m, |gb| {
                        for i in 0..n {
                            for j in 0..m {
                                gb[j] = gb[j] + g[i * m + j];
                            }
                        }
                    });
                }
            }))
        } else {
            None
        };
        Ok(self.tape.push(vec![n, m], out, needs, back))
    }

    /// Rectified linear unit.
    pub fn relu(&self) -> Result<Tensor<'t, E>> {
        let a = self.values();
        let out: Vec<E> = a.iter().map(|&x| if x > E::zero() { x } else { E::zero() }).collect();
        let needs = self.needs_grad();
        let back: Option<BackFn<E>> = if needs {
            let id = self.id;
            let a = a.clone();
            let len = out.len();
            Some(Box::new(move |g, store| {
                store.accum(id, len, |ga| {
                    for ((gv, &x), &gg) in ga.iter_mut().zip(a.iter()).zip(g) {
                        if x > E::zero() {
                            *gv = *gv + gg;
                        }
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.tape.push(self.shape.clone(), out, needs, back))
    }

    /// GELU activation, tanh approximation.
    pub fn gelu(&self) -> Result<Tensor<'t, E>> {
        let a = self.values();
        let c = E::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = E::from_f64(0.044715);
        let half = E::from_f64(0.5);
        let out: Vec<E> = a
            .iter()
            .map(|&x| {
                let u = c * (x + k * x * x * x);
                half * x * (E::one() + u.tanh())
            })
            .collect();
        let needs = self.needs_grad();
        let back: Option<BackFn<E>> = if needs {
            let id = self.id;
            let a = a.clone();
            let len = out.len();
            Some(Box::new(move |g, store| {
                store.accum(id, len, |ga| {
                    let three = E::from_f64(3.0);
                    for ((gv, &x), &gg) in ga.iter_mut().zip(a.iter()).zip(g) {
                        let u = c * (x + k * x * x * x);
                        let t = u.tanh();
                        let du = c * (E::one() + three * k * x * x);
                        let d = half * (E::one() + t) + half * x * (E::one() - t * t) * du;
                        *gv = *gv + d * gg;
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.tape.push(self.shape.clone(), out, needs, back))
    }

    /// Inverted dropout: in training mode each element survives with
    /// probability `1 - p` and is scaled by `1 / (1 - p)`, so the
    /// expectation is preserved. Outside training (or at `p = 0`) this is
    /// the identity. The mask is a pure function of `seed`.
    pub fn dropout(&self, p: f64, training: bool, seed: u64) -> Result<Tensor<'t, E>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout: rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep_scale = E::from_f64(1.0 / (1.0 - p));
        let mask: Vec<E> = (0..self.len())
            .map(|_| if rng.gen::<f64>() < p { E::zero() } else { keep_scale })
            .collect();
        let a = self.values();
        let out: Vec<E> = a.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let needs = self.needs_grad();
        let back: Option<BackFn<E>> = if needs {
            let id = self.id;
            let mask: Rc<[E]> = Rc::from(mask);
            let len = out.len();
            Some(Box::new(move |g, store| {
                store.accum(id, len, |ga| {
                    for ((gv, &m), &gg) in ga.iter_mut().zip(mask.iter()).zip(g) {
                        *gv = *gv + m * gg;
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.tape.push(self.shape.clone(), out, needs, back))
    }

    /// Add a `[m]` row vector to every row of an `[n, m]` tensor.
    pub fn add_row(&self, row: &Tensor<'t, E>) -> Result<Tensor<'t, E>> {
        let (n, m) = self.check_2d("add_row")?;
        if row.shape != [m] {
            return Err(shape_err("add_row", &self.shape, &row.shape));
        }
        let a = self.values();
        let r = row.values();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(a[i * m + j] + r[j]);
            }
        }
        let needs = self.needs_grad() || row.needs_grad();
        let back: Option<BackFn<E>> = if needs {
            let (a_id, r_id) = (self.id, row.id);
            let (a_needs, r_needs) = (self.needs_grad(), row.needs_grad());
            Some(Box::new(move |g, store| {
                if a_needs {
                    store.accum(a_id, n * m, |ga| {
                        for (gv, &gg) in ga.iter_mut().zip(g) {
                            *gv = *gv + gg;
                        }
                    });
                }
                if r_needs {
                    store.accum(r_id, m, |gr| {
                        for i in 0..n {
                            for j in 0..m {
                                gr[j] = gr[j] + g[i * m + j];
                            }
                        }
                    });
                }
            }))
        } else {
            None
        };
        Ok(self.tape.push(vec![n, m], out, needs, back))
    }

    /// Mean along the last axis of a 2-D tensor: `[n, m] -> [n]`.
    pub fn mean_axis1(&self) -> Result<Tensor<'t, E>> {
        let (n, m) = self.check_2d("mean_axis1")?;
        let a = self.values();
        let inv_m = E::one() / E::from_f64(m as f64);
        let out: Vec<E> = (0..n)
            .map(|i| a[i * m..(i + 1) * m].iter().fold(E::zero(), |s, &x| s + x) * inv_m)
            .collect();
        let needs = self.needs_grad();
        let back: Option<BackFn<E>> = if needs {
            let id = self.id;
            Some(Box::new(move |g, store| {
                store.accum(id, n * m, |ga| {
                    for i in 0..n {
                        let gi = g[i] * inv_m;
                        for gv in &mut ga[i * m..(i + 1) * m] {
                            *gv = *gv + gi;
                        }
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.tape.push(vec![n], out, needs, back))
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean_all(&self) -> Result<Tensor<'t, E>> {
        let len = self.len();
        if len == 0 {
            return Err(Error::Parameter("mean_all: empty tensor".into()));
        }
        let inv = E::one() / E::from_f64(len as f64);
        let a = self.values();
        let out = vec![a.iter().fold(E::zero(), |s, &x| s + x) * inv];
        let needs = self.needs_grad();
        let back: Option<BackFn<E>> = if needs {
            let id = self.id;
            Some(Box::new(move |g, store| {
                store.accum(id, len, |ga| {
                    let gi = g[0] * inv;
                    for gv in ga.iter_mut() {
                        *gv = *gv + gi;
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.tape.push(vec![], out, needs, back))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&self) -> Result<Tensor<'t, E>> {
        let len = self.len();
        let a = self.values();
        let out = vec![a.iter().fold(E::zero(), |s, &x| s + x)];
        let needs = self.needs_grad();
        let back: Option<BackFn<E>> = if needs {
            let id = self.id;
            Some(Box::new(move |g, store| {
                store.accum(id, len, |ga| {
                    for gv in ga.iter_mut() {
                        *gv = *gv + g[0];
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.tape.push(vec![], out, needs, back))
    }

    /// Elementwise square root. Inputs must be non-negative.
    pub fn sqrt_elem(&self) -> Result<Tensor<'t, E>> {
        let a = self.values();
        if a.iter().any(|&x| x < E::zero()) {
            return Err(Error::Numeric("sqrt: negative input".into()));
        }
        let out: Vec<E> = a.iter().map(|&x| x.sqrt()).collect();
        let needs = self.needs_grad();
        let back: Option<BackFn<E>> = if needs {
            let id = self.id;
            let s: Rc<[E]> = Rc::from(out.clone());
            let half = E::from_f64(0.5);
            let len = out.len();
            Some(Box::new(move |g, store| {
                store.accum(id, len, |ga| {
                    for ((gv, &sv), &gg) in ga.iter_mut().zip(s.iter()).zip(g) {
                        *gv = *gv + half / sv * gg;
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.tape.push(self.shape.clone(), out, needs, back))
    }

    /// Elementwise square.
    pub fn square(&self) -> Result<Tensor<'t, E>> {
        let a = self.values();
        let out: Vec<E> = a.iter().map(|&x| x * x).collect();
        let needs = self.needs_grad();
        let back: Option<BackFn<E>> = if needs {
            let id = self.id;
            let a = a.clone();
            let two = E::from_f64(2.0);
            let len = out.len();
            Some(Box::new(move |g, store| {
                store.accum(id, len, |ga| {
                    for ((gv, &x), &gg) in ga.iter_mut().zip(a.iter()).zip(g) {
                        *gv = *gv + two * x * gg;
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.tape.push(self.shape.clone(), out, needs, back))
    }

    /// True if every value is finite.
    pub fn all_finite(&self) -> bool {
        self.tape.nodes.borrow()[self.id].values.iter().all(|v| v.is_finite())
    }
}

/// Compare the analytic gradient of a scalar function against central finite
/// differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`, in 64-bit.
///
/// Returns the maximum over all coordinates of
/// `|g_a - g_n| / max(1, |g_a|, |g_n|)`.
pub fn gradcheck<F>(f: F, points: &[(Vec<usize>, Vec<f64>)], eps: f64) -> Result<f64>
where
    F: for<'a> Fn(&'a Tape<f64>, &[Tensor<'a, f64>]) -> Result<Tensor<'a, f64>>,
{
    // Analytic gradients.
    let tape = Tape::new();
    let leaves: Vec<Tensor<'_, f64>> = points
        .iter()
        .map(|(shape, vals)| tape.leaf(shape, vals, true))
        .collect::<Result<_>>()?;
    let loss = f(&tape, &leaves)?;
    if loss.len() != 1 {
        return Err(Error::Contract(format!(
            "gradcheck: function must be scalar-valued, got shape {:?}",
            loss.shape()
        )));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.len()]))
        .collect();

    let eval = |vals: &[Vec<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Tensor<'_, f64>> = points
            .iter()
            .zip(vals)
            .map(|((shape, _), v)| tape.leaf(shape, v, false))
            .collect::<Result<_>>()?;
        f(&tape, &leaves)?.item()
    };

    let mut vals: Vec<Vec<f64>> = points.iter().map(|(_, v)| v.clone()).collect();
    let mut max_rel = 0.0_f64;
    for pi in 0..vals.len() {
        for ci in 0..vals[pi].len() {
            let orig = vals[pi][ci];
            vals[pi][ci] = orig + eps;
            let fp = eval(&vals)?;
            vals[pi][ci] = orig - eps;
            let fm = eval(&vals)?;
            vals[pi][ci] = orig;
            let gn = (fp - fm) / (2.0 * eps);
            let ga = analytic[pi][ci];
            let rel = (ga - gn).abs() / 1.0_f64.max(ga.abs()).max(gn.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
