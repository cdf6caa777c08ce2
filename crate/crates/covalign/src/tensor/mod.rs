//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Differentiable programs are built define-by-run: every operation is a
//! method on [`Tape`], which records the information needed to replay the
//! pass in reverse order. A fresh tape is built per forward pass; model
//! parameters are plain [`Tensor`]s that outlive tapes and accumulate
//! gradients across [`Tape::backward`] calls until explicitly zeroed.
//!
//! Contracts:
//! - Gradients on leaf tensors accumulate additively. Calling `backward`
//!   twice on the same loss doubles them; reset with [`Tensor::zero_grad`].
//! - Gradient buffers of tensors produced by tape operations are
//!   per-backward-call scratch and are cleared at the start of each
//!   `backward`, so only leaves accumulate across calls.
//! - Every operation validates its output for NaN/Inf and panics naming
//!   the operation; non-finite values never propagate silently.
//! - [`Tensor::detach`] is the stop-gradient marker: the forward value is
//!   a bit-exact copy and no gradient reaches the producers of the
//!   original tensor through it.
//! - A tape and the tensors recorded on it are confined to one thread;
//!   `backward` must be called on the tape that recorded the loss.
//!   Mutating a leaf's data between forward and backward invalidates the
//!   pending tape.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

pub mod check;
mod spatial;

pub use check::grad_check;

struct TensorData {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Shared handle to a dense `f64` buffer with optional gradient storage.
///
/// Cloning a `Tensor` clones the handle, not the buffer: both handles see
/// the same data and gradient.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorData>>,
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        let numel: usize = shape.iter().product();
        assert!(
            shape.iter().all(|&e| e > 0),
            "tensor shape has a zero extent: {shape:?}"
        );
        assert_eq!(
            data.len(),
            numel,
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                data,
                grad: None,
                requires_grad,
            })),
        }
    }

    /// Constant tensor from raw data. Panics on shape/data mismatch or
    /// non-finite values.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert!(
            data.iter().all(|v| v.is_finite()),
            "tensor literal contains a non-finite value"
        );
        Tensor::new(shape.to_vec(), data, false)
    }

    /// Trainable tensor (participates in differentiation).
    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert!(
            data.iter().all(|v| v.is_finite()),
            "parameter contains a non-finite value"
        );
        Tensor::new(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n], false)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        assert!(v.is_finite());
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![v; n], false)
    }

    /// Rank-1 tensor of one element.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Borrow the underlying values.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |d| d.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.inner.borrow();
        assert_eq!(d.data.len(), 1, "item() on non-scalar shape {:?}", d.shape);
        d.data[0]
    }

    pub fn value_at(&self, idx: usize) -> f64 {
        self.inner.borrow().data[idx]
    }

    /// Overwrite one element in place. Intended for optimizers and
    /// finite-difference probes on leaves.
    pub fn set_value_at(&self, idx: usize, v: f64) {
        assert!(v.is_finite());
        self.inner.borrow_mut().data[idx] = v;
    }

    /// Replace the whole buffer, keeping the shape.
    pub fn set_data(&self, values: &[f64]) {
        let mut d = self.inner.borrow_mut();
        assert_eq!(values.len(), d.data.len(), "set_data length mismatch");
        d.data.copy_from_slice(values);
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.borrow_mut().requires_grad = flag;
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut d = self.inner.borrow_mut();
        assert_eq!(delta.len(), d.data.len(), "gradient shape mismatch");
        match &mut d.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => d.grad = Some(delta.to_vec()),
        }
    }

    /// Stop-gradient: a new constant tensor holding a bit-exact copy of
    /// the current values. Nothing upstream of `self` receives gradient
    /// through the returned tensor.
    pub fn detach(&self) -> Tensor {
        let d = self.inner.borrow();
        Tensor::new(d.shape.clone(), d.data.clone(), false)
    }

    /// Identity of the underlying buffer (for maps keyed by tensor).
    pub fn buffer_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub fn is_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &d.shape)
            .field("requires_grad", &d.requires_grad)
            .field("data", &d.data)
            .finish()
    }
}

struct Record {
    output: Tensor,
    pull: Box<dyn Fn()>,
}

/// Wengert list of executed operations for one forward/backward pass.
///
/// Operations are recorded only when gradients can flow (the tape is in
/// grad mode and at least one input requires grad). [`Tape::backward`]
/// replays the records in exact reverse execution order.
pub struct Tape {
    records: RefCell<Vec<Record>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            records: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that records nothing; use for frozen-model inference.
    pub fn inference() -> Tape {
        Tape {
            records: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn num_records(&self) -> usize {
        self.records.borrow().len()
    }

    /// Reverse pass from a scalar loss recorded on this tape.
    ///
    /// Scratch gradients of all intermediate outputs are cleared first, so
    /// repeated calls accumulate only into leaves.
    pub fn backward(&self, loss: &Tensor) {
        assert_eq!(
            loss.numel(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        );
        let v = loss.item();
        assert!(v.is_finite(), "backward on non-finite loss {v}");
        let records = self.records.borrow();
        for r in records.iter() {
            r.output.zero_grad();
        }
        loss.accumulate_grad(&[1.0]);
        for r in records.iter().rev() {
            (r.pull)();
        }
    }

    fn wants_grad(&self, inputs: &[&Tensor]) -> bool {
        self.grad_enabled && inputs.iter().any(|t| t.requires_grad())
    }

    fn emit(&self, op: &'static str, shape: Vec<usize>, data: Vec<f64>, rg: bool) -> Tensor {
        assert!(
            data.iter().all(|v| v.is_finite()),
            "{op}: non-finite value in output"
        );
        Tensor::new(shape, data, rg)
    }

    fn record(&self, output: &Tensor, pull: impl Fn() + 'static) {
        self.records.borrow_mut().push(Record {
            output: output.clone(),
            pull: Box::new(pull),
        });
    }

    // ── Elementwise binary ───────────────────────────────────────────

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Tensor {
        same_shape("add", a, b);
        let data: Vec<f64> = {
            let (xa, xb) = (a.data(), b.data());
            xa.iter().zip(xb.iter()).map(|(x, y)| x + y).collect()
        };
        let rg = self.wants_grad(&[a, b]);
        let out = self.emit("add", a.shape(), data, rg);
        if rg {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                if a.requires_grad() {
                    a.accumulate_grad(&g);
                }
                if b.requires_grad() {
                    b.accumulate_grad(&g);
                }
            });
        }
        out
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Tensor {
        same_shape("sub", a, b);
        let data: Vec<f64> = {
            let (xa, xb) = (a.data(), b.data());
            xa.iter().zip(xb.iter()).map(|(x, y)| x - y).collect()
        };
        let rg = self.wants_grad(&[a, b]);
        let out = self.emit("sub", a.shape(), data, rg);
        if rg {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                if a.requires_grad() {
                    a.accumulate_grad(&g);
                }
                if b.requires_grad() {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    b.accumulate_grad(&neg);
                }
            });
        }
        out
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        same_shape("mul", a, b);
        let data: Vec<f64> = {
            let (xa, xb) = (a.data(), b.data());
            xa.iter().zip(xb.iter()).map(|(x, y)| x * y).collect()
        };
        let rg = self.wants_grad(&[a, b]);
        let out = self.emit("mul", a.shape(), data, rg);
        if rg {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                if a.requires_grad() {
                    let da: Vec<f64> = {
                        let xb = b.data();
                        g.iter().zip(xb.iter()).map(|(gi, y)| gi * y).collect()
                    };
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let db: Vec<f64> = {
                        let xa = a.data();
                        g.iter().zip(xa.iter()).map(|(gi, x)| gi * x).collect()
                    };
                    b.accumulate_grad(&db);
                }
            });
        }
        out
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Tensor {
        same_shape("div", a, b);
        let data: Vec<f64> = {
            let (xa, xb) = (a.data(), b.data());
            xa.iter().zip(xb.iter()).map(|(x, y)| x / y).collect()
        };
        let rg = self.wants_grad(&[a, b]);
        let out = self.emit("div", a.shape(), data, rg);
        if rg {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                if a.requires_grad() {
                    let da: Vec<f64> = {
                        let xb = b.data();
                        g.iter().zip(xb.iter()).map(|(gi, y)| gi / y).collect()
                    };
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let db: Vec<f64> = {
                        let (xb, xo) = (b.data(), o.data());
                        g.iter()
                            .zip(xo.iter().zip(xb.iter()))
                            .map(|(gi, (oi, y))| -gi * oi / y)
                            .collect()
                    };
                    b.accumulate_grad(&db);
                }
            });
        }
        out
    }

    // ── Elementwise with a constant ──────────────────────────────────

    pub fn scalar_mul(&self, t: &Tensor, c: f64) -> Tensor {
        assert!(c.is_finite(), "scalar_mul: non-finite factor");
        let data: Vec<f64> = t.data().iter().map(|x| x * c).collect();
        let rg = self.wants_grad(&[t]);
        let out = self.emit("scalar_mul", t.shape(), data, rg);
        if rg {
            let (t, o) = (t.clone(), out.clone());
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                let d: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                t.accumulate_grad(&d);
            });
        }
        out
    }

    pub fn add_scalar(&self, t: &Tensor, c: f64) -> Tensor {
        assert!(c.is_finite(), "add_scalar: non-finite addend");
        let data: Vec<f64> = t.data().iter().map(|x| x + c).collect();
        let rg = self.wants_grad(&[t]);
        let out = self.emit("add_scalar", t.shape(), data, rg);
        if rg {
            let (t, o) = (t.clone(), out.clone());
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                t.accumulate_grad(&g);
            });
        }
        out
    }

    // ── Elementwise unary ────────────────────────────────────────────

    pub fn relu(&self, t: &Tensor) -> Tensor {
        let data: Vec<f64> = t.data().iter().map(|x| x.max(0.0)).collect();
        let rg = self.wants_grad(&[t]);
        let out = self.emit("relu", t.shape(), data, rg);
        if rg {
            let (t, o) = (t.clone(), out.clone());
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                let d: Vec<f64> = {
                    let x = t.data();
                    g.iter()
                        .zip(x.iter())
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect()
                };
                t.accumulate_grad(&d);
            });
        }
        out
    }

    pub fn exp(&self, t: &Tensor) -> Tensor {
        let data: Vec<f64> = t.data().iter().map(|x| x.exp()).collect();
        let rg = self.wants_grad(&[t]);
        let out = self.emit("exp", t.shape(), data, rg);
        if rg {
            let (t, o) = (t.clone(), out.clone());
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                let d: Vec<f64> = {
                    let y = o.data();
                    g.iter().zip(y.iter()).map(|(gi, yi)| gi * yi).collect()
                };
                t.accumulate_grad(&d);
            });
        }
        out
    }

    /// Natural log. Input must be strictly positive; callers clamp first.
    pub fn log(&self, t: &Tensor) -> Tensor {
        let data: Vec<f64> = t
            .data()
            .iter()
            .map(|&x| {
                assert!(x > 0.0, "log: non-positive input {x}; clamp before log");
                x.ln()
            })
            .collect();
        let rg = self.wants_grad(&[t]);
        let out = self.emit("log", t.shape(), data, rg);
        if rg {
            let (t, o) = (t.clone(), out.clone());
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                let d: Vec<f64> = {
                    let x = t.data();
                    g.iter().zip(x.iter()).map(|(gi, xi)| gi / xi).collect()
                };
                t.accumulate_grad(&d);
            });
        }
        out
    }

    /// Elementwise square root. Gradient at exactly 0 is defined as 0.
    pub fn sqrt(&self, t: &Tensor) -> Tensor {
        let data: Vec<f64> = t
            .data()
            .iter()
            .map(|&x| {
                assert!(x >= 0.0, "sqrt: negative input {x}");
                x.sqrt()
            })
            .collect();
        let rg = self.wants_grad(&[t]);
        let out = self.emit("sqrt", t.shape(), data, rg);
        if rg {
            let (t, o) = (t.clone(), out.clone());
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                let d: Vec<f64> = {
                    let y = o.data();
                    g.iter()
                        .zip(y.iter())
                        .map(|(gi, yi)| if *yi > 0.0 { 0.5 * gi / yi } else { 0.0 })
                        .collect()
                };
                t.accumulate_grad(&d);
            });
        }
        out
    }

    /// `max(x, floor)` elementwise; zero gradient in the clamped region.
    pub fn clamp_min(&self, t: &Tensor, floor: f64) -> Tensor {
        assert!(floor.is_finite(), "clamp_min: non-finite floor");
        let data: Vec<f64> = t.data().iter().map(|x| x.max(floor)).collect();
        let rg = self.wants_grad(&[t]);
        let out = self.emit("clamp_min", t.shape(), data, rg);
        if rg {
            let (t, o) = (t.clone(), out.clone());
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                let d: Vec<f64> = {
                    let x = t.data();
                    g.iter()
                        .zip(x.iter())
                        .map(|(gi, xi)| if *xi > floor { *gi } else { 0.0 })
                        .collect()
                };
                t.accumulate_grad(&d);
            });
        }
        out
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum(&self, t: &Tensor) -> Tensor {
        let s: f64 = t.data().iter().sum();
        let rg = self.wants_grad(&[t]);
        let out = self.emit("sum", vec![1], vec![s], rg);
        if rg {
            let (t, o) = (t.clone(), out.clone());
            let n = t.numel();
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                t.accumulate_grad(&vec![g[0]; n]);
            });
        }
        out
    }

    pub fn mean(&self, t: &Tensor) -> Tensor {
        let n = t.numel();
        let s: f64 = t.data().iter().sum::<f64>() / n as f64;
        let rg = self.wants_grad(&[t]);
        let out = self.emit("mean", vec![1], vec![s], rg);
        if rg {
            let (t, o) = (t.clone(), out.clone());
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                t.accumulate_grad(&vec![g[0] / n as f64; n]);
            });
        }
        out
    }

    // ── Linear algebra ───────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        let (sa, sb) = (a.shape(), b.shape());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = {
            let (xa, xb) = (a.data(), b.data());
            matmul_raw(&xa, &xb, m, k, n)
        };
        let rg = self.wants_grad(&[a, b]);
        let out = self.emit("matmul", vec![m, n], data, rg);
        if rg {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                if a.requires_grad() {
                    // dA = g · Bᵀ
                    let da = {
                        let xb = b.data();
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                for kk in 0..k {
                                    da[i * k + kk] += gij * xb[kk * n + j];
                                }
                            }
                        }
                        da
                    };
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    // dB = Aᵀ · g
                    let db = {
                        let xa = a.data();
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            for kk in 0..k {
                                let aik = xa[i * k + kk];
                                if aik == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    db[kk * n + j] += aik * g[i * n + j];
                                }
                            }
                        }
                        db
                    };
                    b.accumulate_grad(&db);
                }
            });
        }
        out
    }

    /// `[r,c] -> [c,r]`.
    pub fn transpose(&self, t: &Tensor) -> Tensor {
        let s = t.shape();
        assert_eq!(s.len(), 2, "transpose: expected rank 2, got {s:?}");
        let (r, c) = (s[0], s[1]);
        let data = {
            let x = t.data();
            let mut y = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    y[j * r + i] = x[i * c + j];
                }
            }
            y
        };
        let rg = self.wants_grad(&[t]);
        let out = self.emit("transpose", vec![c, r], data, rg);
        if rg {
            let (t, o) = (t.clone(), out.clone());
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                let mut d = vec![0.0; r * c];
                for j in 0..c {
                    for i in 0..r {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                t.accumulate_grad(&d);
            });
        }
        out
    }

    /// Same data, new shape of identical element count.
    pub fn reshape(&self, t: &Tensor, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, t.numel(), "reshape: {:?} -> {shape:?}", t.shape());
        let rg = self.wants_grad(&[t]);
        let out = self.emit("reshape", shape.to_vec(), t.to_vec(), rg);
        if rg {
            let (t, o) = (t.clone(), out.clone());
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                t.accumulate_grad(&g);
            });
        }
        out
    }

    // ── Gathers ──────────────────────────────────────────────────────

    /// Row `i` of a rank-2 tensor as a rank-1 tensor.
    pub fn slice_row(&self, t: &Tensor, i: usize) -> Tensor {
        let s = t.shape();
        assert_eq!(s.len(), 2, "slice_row: expected rank 2, got {s:?}");
        let (r, c) = (s[0], s[1]);
        assert!(i < r, "slice_row: row {i} out of {r}");
        let data = t.data()[i * c..(i + 1) * c].to_vec();
        let rg = self.wants_grad(&[t]);
        let out = self.emit("slice_row", vec![c], data, rg);
        if rg {
            let (t, o) = (t.clone(), out.clone());
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                let mut d = vec![0.0; r * c];
                d[i * c..(i + 1) * c].copy_from_slice(&g);
                t.accumulate_grad(&d);
            });
        }
        out
    }

    /// One element by flat index, as a scalar tensor.
    pub fn get(&self, t: &Tensor, idx: usize) -> Tensor {
        let n = t.numel();
        assert!(idx < n, "get: index {idx} out of {n}");
        let v = t.value_at(idx);
        let rg = self.wants_grad(&[t]);
        let out = self.emit("get", vec![1], vec![v], rg);
        if rg {
            let (t, o) = (t.clone(), out.clone());
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                let mut d = vec![0.0; n];
                d[idx] = g[0];
                t.accumulate_grad(&d);
            });
        }
        out
    }

    /// Repeat a scalar tensor into a rank-1 tensor of length `n`; the
    /// gradient is the sum of the incoming flow.
    pub fn broadcast_scalar(&self, s: &Tensor, n: usize) -> Tensor {
        assert_eq!(s.numel(), 1, "broadcast_scalar: expected a scalar");
        assert!(n > 0, "broadcast_scalar: empty target");
        let v = s.item();
        let rg = self.wants_grad(&[s]);
        let out = self.emit("broadcast_scalar", vec![n], vec![v; n], rg);
        if rg {
            let (s, o) = (s.clone(), out.clone());
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                s.accumulate_grad(&[g.iter().sum()]);
            });
        }
        out
    }

    /// Stack scalar tensors into a rank-1 tensor.
    pub fn stack_scalars(&self, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "stack_scalars: empty input");
        let data: Vec<f64> = parts
            .iter()
            .map(|p| {
                assert_eq!(p.numel(), 1, "stack_scalars: non-scalar part");
                p.item()
            })
            .collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        let rg = self.wants_grad(&refs);
        let out = self.emit("stack_scalars", vec![parts.len()], data, rg);
        if rg {
            let parts: Vec<Tensor> = parts.to_vec();
            let o = out.clone();
            self.record(&out, move || {
                let Some(g) = o.grad() else { return };
                for (i, p) in parts.iter().enumerate() {
                    if p.requires_grad() {
                        p.accumulate_grad(&[g[i]]);
                    }
                }
            });
        }
        out
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bj) in orow.iter_mut().zip(brow.iter()) {
                *o += aik * bj;
            }
        }
    }
    out
}
