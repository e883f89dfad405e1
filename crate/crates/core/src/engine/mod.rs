//! Reverse-mode scalar-loss autodiff on dense f64 buffers.
//!
//! A `Tape` owns every buffer created during one forward pass and records
//! each operation in execution order. `backward` replays the record in
//! reverse, accumulating gradients into per-buffer slots. One tape per
//! training step; parameters are re-registered on the next step's tape.

mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, grad_check_params, primitive_gradient_reports, GRAD_STEP, GRAD_TOL};
pub use ops::Op;

use std::sync::Arc;

/// Floor for arguments of `ln` so the loss stays finite on degenerate rows.
pub const LOG_EPS: f64 = 1e-9;

/// Slope used by every leaky ReLU in the codebase.
pub const LEAKY_SLOPE: f64 = 0.1;

// ── plain dense arrays ──────────────────────────────────────────────────────

/// Dense row-major f64 array used outside the tape (parameters, images,
/// ground-truth flows, masks).
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Array { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "array shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Array { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: f64) -> Self {
        Array { shape: vec![], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Index into a [c, h, w] array.
    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        debug_assert!(y < h && x < w);
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x] = v;
    }
}

// ── tape and tensors ────────────────────────────────────────────────────────

/// Handle to a buffer on a `Tape`. The shape travels with the handle so
/// callers can build follow-up ops without consulting the tape; `reshape`
/// is therefore free.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub id: usize,
    pub shape: Vec<usize>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Same buffer, reinterpreted shape. Element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            self.numel(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        Tensor { id: self.id, shape: shape.to_vec() }
    }
}

pub(crate) struct Buf {
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub leaf: bool,
    pub grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    pub(crate) bufs: Vec<Buf>,
    pub(crate) ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push_buf(&mut self, data: Vec<f64>, requires_grad: bool, leaf: bool) -> usize {
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite value entered the tape");
        self.bufs.push(Buf { data, requires_grad, leaf, grad: None });
        self.bufs.len() - 1
    }

    /// Constant input; gradients are not tracked through it.
    pub fn input(&mut self, a: &Array) -> Tensor {
        let id = self.push_buf(a.data.clone(), false, true);
        Tensor { id, shape: a.shape.clone() }
    }

    /// Leaf whose gradient is retained by `backward`.
    pub fn param(&mut self, a: &Array) -> Tensor {
        let id = self.push_buf(a.data.clone(), true, true);
        Tensor { id, shape: a.shape.clone() }
    }

    /// Copies current values into a fresh constant leaf: identity forward,
    /// no gradient flows back through it.
    pub fn detach(&mut self, t: &Tensor) -> Tensor {
        let data = self.bufs[t.id].data.clone();
        let id = self.push_buf(data, false, true);
        Tensor { id, shape: t.shape.clone() }
    }

    pub fn val(&self, t: &Tensor) -> &[f64] {
        &self.bufs[t.id].data
    }

    pub fn scalar_val(&self, t: &Tensor) -> f64 {
        assert_eq!(t.numel(), 1, "expected scalar tensor, got shape {:?}", t.shape);
        self.bufs[t.id].data[0]
    }

    /// Gradient accumulated on a leaf by `backward`, if any reached it.
    /// Only leaves (`input`, `param`, `detach`) retain gradients.
    pub fn grad(&self, t: &Tensor) -> Option<&[f64]> {
        self.bufs[t.id].grad.as_deref()
    }

    pub fn requires_grad(&self, t: &Tensor) -> bool {
        self.bufs[t.id].requires_grad
    }

    pub(crate) fn record(&mut self, out_data: Vec<f64>, out_shape: Vec<usize>, op_requires: bool, op: Op) -> Tensor {
        let id = self.push_buf(out_data, op_requires, false);
        self.ops.push(op);
        Tensor { id, shape: out_shape }
    }

    /// Seeds d(loss)/d(loss) = 1 and replays the op record backwards.
    /// Intermediate gradients live only for the duration of the call; leaf
    /// gradients accumulate across calls.
    pub fn backward(&mut self, loss: &Tensor) {
        assert_eq!(loss.numel(), 1, "backward target must be scalar, got {:?}", loss.shape);
        let mut flow: Vec<Option<Vec<f64>>> = (0..self.bufs.len()).map(|_| None).collect();
        flow[loss.id] = Some(vec![1.0]);
        for i in (0..self.ops.len()).rev() {
            self.backward_op(&self.ops[i], &mut flow);
        }
        for (id, g) in flow.into_iter().enumerate() {
            let buf = &mut self.bufs[id];
            if !(buf.leaf && buf.requires_grad) {
                continue;
            }
            if let Some(g) = g {
                match &mut buf.grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => buf.grad = Some(g),
                }
            }
        }
    }
}

impl Tape {
    /// [c,h,w] -> [h*w, c] pixel-major rows, as a permutation gather.
    pub fn chw_to_rows(&mut self, t: &Tensor) -> Tensor {
        assert_eq!(t.shape.len(), 3, "chw_to_rows expects [c,h,w], got {:?}", t.shape);
        let (c, n) = (t.shape[0], t.shape[1] * t.shape[2]);
        let mut idx = Vec::with_capacity(n * c);
        for p in 0..n {
            for ch in 0..c {
                idx.push(ch * n + p);
            }
        }
        let flat = self.gather(t, &arc_idx(idx));
        flat.reshape(&[n, c])
    }

    /// [n, c] -> [c, h, w] with n = h*w, inverse of `chw_to_rows`.
    pub fn rows_to_chw(&mut self, t: &Tensor, h: usize, w: usize) -> Tensor {
        assert_eq!(t.shape.len(), 2, "rows_to_chw expects [n,c], got {:?}", t.shape);
        let (n, c) = (t.shape[0], t.shape[1]);
        assert_eq!(n, h * w, "rows_to_chw: {n} rows vs {h}x{w}");
        let mut idx = Vec::with_capacity(n * c);
        for ch in 0..c {
            for p in 0..n {
                idx.push(p * c + ch);
            }
        }
        let flat = self.gather(t, &arc_idx(idx));
        flat.reshape(&[c, h, w])
    }
}

/// Adds `g` into the in-flight gradient slot for buffer `id`.
pub(crate) fn acc_flow(flow: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    match &mut flow[id] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => flow[id] = Some(g.to_vec()),
    }
}

// ── named parameter sets ────────────────────────────────────────────────────

/// Ordered, named collection of parameter arrays. The order is the canonical
/// serialization and optimizer order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    pub entries: Vec<(String, Array)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: &str, a: Array) {
        assert!(self.get(name).is_none(), "duplicate parameter name {name}");
        self.entries.push((name.to_string(), a));
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Registers every entry as a tape parameter, in order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut tensors = Vec::with_capacity(self.entries.len());
        for (name, a) in &self.entries {
            tensors.push((name.clone(), tape.param(a)));
        }
        BoundParams { tensors }
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.numel()).sum()
    }
}

/// Tape-bound view of a `ParamSet` for one forward pass.
pub struct BoundParams {
    pub tensors: Vec<(String, Tensor)>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Gradients in entry order, zeros where no gradient reached the leaf.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|(_, t)| tape.grad(t).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }
}

pub(crate) fn arc_idx(v: Vec<usize>) -> Arc<Vec<usize>> {
    Arc::new(v)
}

#[cfg(test)]
mod tests;
