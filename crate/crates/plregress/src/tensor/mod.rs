//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every executed operation; [`Tensor`] handles index into
//! it. Calling [`Tensor::backward`] on a scalar replays the tape in reverse,
//! accumulating exact vector-Jacobian products into every `requires_grad`
//! node. The operator set is exactly what the regression branches and losses
//! need: dense 2-D matrices in double precision, no broadcasting beyond
//! row-vector bias addition.
//!
//! Shape violations are programmer errors and panic with a "shape mismatch"
//! message; data-dependent failures (behind-camera projections and the like)
//! are handled inside the ops where they arise.
//!
//! A tape and its tensors are confined to one thread; independent passes on
//! independent tapes can run in parallel. Individual kernels parallelize
//! internally with fixed chunk boundaries, so results are bit-identical
//! regardless of thread count.

mod kernels;
mod step;

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::concatenate;
use ndarray::prelude::*;

use crate::geometry::{Intrinsics, LineSegment2, Pose};
use step::Step;

/// Dense matrix of doubles; scalars are 1×1, row vectors 1×w.
pub type Arr = Array2<f64>;

/// Builds a 1×1 array.
pub fn scalar_arr(v: f64) -> Arr {
    Array2::from_elem((1, 1), v)
}

/// ndarray ops occasionally hand back transposed-layout results (e.g. `dot`
/// computing (BᵀAᵀ)ᵀ); the kernels want contiguous row-major storage.
fn standardize(a: Arr) -> Arr {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

struct Node {
    value: Arr,
    grad: Option<Arr>,
    requires_grad: bool,
    step: Step,
}

struct TapeInner {
    nodes: Vec<Node>,
    corrupt_hook: bool,
}

/// Records operations for reverse-mode differentiation.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

thread_local! {
    static CORRUPT_OVERRIDE: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Verification hook: forces one backward rule to be wrong on tapes created
/// on this thread, so the finite-difference suite must fail. The
/// `PLR_CORRUPT_GRAD=1` environment variable has the same process-wide effect.
pub fn set_backward_corruption_for_tests(on: bool) {
    CORRUPT_OVERRIDE.with(|c| c.set(on));
}

impl Tape {
    pub fn new() -> Self {
        let corrupt_hook = CORRUPT_OVERRIDE.with(|c| c.get())
            || std::env::var_os("PLR_CORRUPT_GRAD").is_some_and(|v| v == "1");
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                corrupt_hook,
            })),
        }
    }

    fn push(&self, value: Arr, requires_grad: bool, step: Step) -> Tensor {
        let value = standardize(value);
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            step,
        });
        Tensor {
            tape: self.clone(),
            idx: inner.nodes.len() - 1,
        }
    }

    /// Differentiable (or frozen) input node.
    pub fn leaf(&self, value: Arr, requires_grad: bool) -> Tensor {
        self.push(value, requires_grad, Step::Leaf)
    }

    /// Non-differentiable input node.
    pub fn constant(&self, value: Arr) -> Tensor {
        self.push(value, false, Step::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(scalar_arr(v))
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears accumulated gradients on every node.
    pub fn zero_grads(&self) {
        for node in self.inner.borrow_mut().nodes.iter_mut() {
            node.grad = None;
        }
    }
}

/// Handle to one node of a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    idx: usize,
}

impl Tensor {
    pub fn shape(&self) -> (usize, usize) {
        let inner = self.tape.inner.borrow();
        let d = inner.nodes[self.idx].value.dim();
        (d.0, d.1)
    }

    pub fn value(&self) -> Arr {
        self.tape.inner.borrow().nodes[self.idx].value.clone()
    }

    /// Reads the value without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&Arr) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.idx].value)
    }

    pub fn scalar_value(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        let v = &inner.nodes[self.idx].value;
        assert_eq!(v.dim(), (1, 1), "scalar_value on non-scalar tensor");
        v[(0, 0)]
    }

    pub fn grad(&self) -> Option<Arr> {
        self.tape.inner.borrow().nodes[self.idx].grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.idx].requires_grad
    }

    /// Reverse pass from this scalar. Gradients accumulate: repeated calls
    /// without [`Tape::zero_grads`] sum their results.
    ///
    /// Panics if the tensor is not 1×1.
    pub fn backward(&self) {
        assert_eq!(
            self.shape(),
            (1, 1),
            "backward requires a scalar loss (got {:?})",
            self.shape()
        );
        let mut inner = self.tape.inner.borrow_mut();
        // Seed; preserve any pre-existing accumulation semantics by seeding
        // a fresh unit adjoint for this call only.
        let mut seeds: Vec<Option<Arr>> = vec![None; self.idx + 1];
        seeds[self.idx] = Some(scalar_arr(1.0));
        inner.run_backward(self.idx, &mut seeds);
    }

    fn same_tape(&self, other: &Tensor) {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "tensors belong to different tapes"
        );
    }

    fn binary_shapes(&self, rhs: &Tensor, op: &str) -> (usize, usize) {
        self.same_tape(rhs);
        let a = self.shape();
        let b = rhs.shape();
        assert_eq!(a, b, "shape mismatch in {op}: {a:?} vs {b:?}");
        a
    }

    // ---- arithmetic ----

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        self.binary_shapes(rhs, "add");
        let v = self.with_value(|a| rhs.with_value(|b| kernels::zip2(a, b, |x, y| x + y)));
        self.tape.push(
            v,
            self.requires_grad() || rhs.requires_grad(),
            Step::Add {
                a: self.idx,
                b: rhs.idx,
            },
        )
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        self.binary_shapes(rhs, "sub");
        let v = self.with_value(|a| rhs.with_value(|b| kernels::zip2(a, b, |x, y| x - y)));
        self.tape.push(
            v,
            self.requires_grad() || rhs.requires_grad(),
            Step::Sub {
                a: self.idx,
                b: rhs.idx,
            },
        )
    }

    pub fn mul_elem(&self, rhs: &Tensor) -> Tensor {
        self.binary_shapes(rhs, "mul_elem");
        let v = self.with_value(|a| rhs.with_value(|b| kernels::zip2(a, b, |x, y| x * y)));
        self.tape.push(
            v,
            self.requires_grad() || rhs.requires_grad(),
            Step::MulElem {
                a: self.idx,
                b: rhs.idx,
            },
        )
    }

    /// Adds a 1×w row vector to every row of an n×w matrix.
    pub fn add_row(&self, row: &Tensor) -> Tensor {
        self.same_tape(row);
        let (n, w) = self.shape();
        let (rn, rw) = row.shape();
        assert!(
            rn == 1 && rw == w,
            "shape mismatch in add_row: {:?} + {:?}",
            (n, w),
            (rn, rw)
        );
        let v = self.with_value(|a| row.with_value(|r| kernels::add_row(a, r)));
        self.tape.push(
            v,
            self.requires_grad() || row.requires_grad(),
            Step::AddRow {
                a: self.idx,
                row: row.idx,
            },
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let v = self.with_value(|a| kernels::map(a, |x| c * x));
        self.tape
            .push(v, self.requires_grad(), Step::Scale { a: self.idx, c })
    }

    /// `self @ rhs`.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        self.matmul_general(rhs, false, false)
    }

    /// `self @ rhsᵀ`.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Tensor {
        self.matmul_general(rhs, false, true)
    }

    fn matmul_general(&self, rhs: &Tensor, ta: bool, tb: bool) -> Tensor {
        self.same_tape(rhs);
        let (am, ak) = self.shape();
        let (bk, bn) = rhs.shape();
        let k1 = if ta { am } else { ak };
        let k2 = if tb { bn } else { bk };
        assert_eq!(
            k1, k2,
            "shape mismatch in matmul: {:?} (ta={ta}) @ {:?} (tb={tb})",
            (am, ak),
            (bk, bn)
        );
        let v = self.with_value(|a| {
            rhs.with_value(|b| {
                let av = if ta { a.t() } else { a.view() };
                let bv = if tb { b.t() } else { b.view() };
                av.dot(&bv)
            })
        });
        self.tape.push(
            v,
            self.requires_grad() || rhs.requires_grad(),
            Step::Matmul {
                a: self.idx,
                b: rhs.idx,
                ta,
                tb,
            },
        )
    }

    // ---- shape surgery ----

    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let (_, w) = self.shape();
        assert!(start < end && end <= w, "slice_cols range out of bounds");
        let v = self.with_value(|a| a.slice(s![.., start..end]).to_owned());
        self.tape.push(
            v,
            self.requires_grad(),
            Step::SliceCols {
                a: self.idx,
                start,
                end,
            },
        )
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let (n, _) = self.shape();
        assert!(start < end && end <= n, "slice_rows range out of bounds");
        let v = self.with_value(|a| a.slice(s![start..end, ..]).to_owned());
        self.tape.push(
            v,
            self.requires_grad(),
            Step::SliceRows {
                a: self.idx,
                start,
                end,
            },
        )
    }

    /// Selects rows by index (duplicates allowed). Backward scatter-adds.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let (n, _) = self.shape();
        assert!(idx.iter().all(|&i| i < n), "gather_rows index out of bounds");
        let v = self.with_value(|a| a.select(Axis(0), idx));
        self.tape.push(
            v,
            self.requires_grad(),
            Step::GatherRows {
                a: self.idx,
                idx: idx.to_vec(),
            },
        )
    }

    /// Mean over rows: n×w → 1×w. Requires n ≥ 1.
    pub fn mean_rows(&self) -> Tensor {
        let (n, _) = self.shape();
        assert!(n > 0, "mean_rows over empty set");
        let v = self.with_value(|a| a.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0)));
        self.tape
            .push(v, self.requires_grad(), Step::MeanRows { a: self.idx, n })
    }

    /// Sum of all entries, as a 1×1 tensor.
    pub fn sum_all(&self) -> Tensor {
        let v = self.with_value(|a| scalar_arr(kernels::sum_det(a)));
        self.tape
            .push(v, self.requires_grad(), Step::SumAll { a: self.idx })
    }

    // ---- nonlinearities ----

    pub fn relu(&self) -> Tensor {
        let v = self.with_value(|a| kernels::map(a, |x| if x > 0.0 { x } else { 0.0 }));
        self.tape
            .push(v, self.requires_grad(), Step::Relu { a: self.idx })
    }

    pub fn sigmoid(&self) -> Tensor {
        let v = self.with_value(|a| kernels::map(a, kernels::sigmoid));
        self.tape
            .push(v, self.requires_grad(), Step::Sigmoid { a: self.idx })
    }

    pub fn tanh(&self) -> Tensor {
        let v = self.with_value(|a| kernels::map(a, f64::tanh));
        self.tape
            .push(v, self.requires_grad(), Step::Tanh { a: self.idx })
    }

    /// Row-wise softmax over the column axis (the "set" axis in attention).
    ///
    /// Panics on an empty reduction axis.
    pub fn softmax_rows(&self) -> Tensor {
        let (n, w) = self.shape();
        assert!(n > 0 && w > 0, "softmax over empty set");
        let v = self.with_value(kernels::softmax_rows);
        self.tape
            .push(v, self.requires_grad(), Step::SoftmaxRows { a: self.idx })
    }

    /// Row-wise layer normalization with learned gain/shift (both 1×w).
    pub fn layer_norm_rows(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        self.same_tape(gamma);
        self.same_tape(beta);
        let (_, w) = self.shape();
        assert_eq!(gamma.shape(), (1, w), "layer_norm gamma must be 1×w");
        assert_eq!(beta.shape(), (1, w), "layer_norm beta must be 1×w");
        let (xhat, inv_std) = self.with_value(|a| kernels::layer_norm_stats(a, eps));
        let v = gamma.with_value(|g| {
            beta.with_value(|b| {
                let mut out = xhat.clone();
                for mut row in out.rows_mut() {
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = *x * g[(0, j)] + b[(0, j)];
                    }
                }
                out
            })
        });
        self.tape.push(
            v,
            self.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
            Step::LayerNormRows {
                a: self.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                xhat,
                inv_std,
            },
        )
    }

    /// Σ over rows of the Euclidean row norm, as 1×1.
    pub fn sum_row_norms(&self) -> Tensor {
        let v = self.with_value(|a| {
            let s: f64 = a.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum();
            scalar_arr(s)
        });
        self.tape
            .push(v, self.requires_grad(), Step::SumRowNorms { a: self.idx })
    }

    /// Summed binary cross entropy of n×1 probabilities against 0/1 labels,
    /// with probabilities clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_sum(&self, labels: &[f64]) -> Tensor {
        let (n, w) = self.shape();
        assert_eq!(w, 1, "bce_sum expects an n×1 probability column");
        assert_eq!(n, labels.len(), "bce_sum label count mismatch");
        const CLAMP: f64 = 1e-7;
        let v = self.with_value(|a| {
            let mut s = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                let p = a[(i, 0)].clamp(CLAMP, 1.0 - CLAMP);
                s -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            }
            scalar_arr(s)
        });
        self.tape.push(
            v,
            self.requires_grad(),
            Step::Bce {
                a: self.idx,
                labels: labels.to_vec(),
                clamp: CLAMP,
            },
        )
    }

    /// Pixel reprojection residual per predicted 3D point (n×3 → n×1).
    ///
    /// Rows whose camera-frame depth is at or below [`crate::geometry::MIN_DEPTH`]
    /// contribute the fixed `penalty` with zero gradient.
    pub fn point_reproj_residuals(
        &self,
        pose: &Pose,
        k: &Intrinsics,
        observed: &Arr,
        penalty: f64,
    ) -> Tensor {
        let (n, w) = self.shape();
        assert_eq!(w, 3, "point_reproj_residuals expects n×3 predictions");
        assert_eq!(
            observed.dim(),
            (n, 2),
            "observed pixel matrix must be n×2 (got {:?})",
            observed.dim()
        );
        let v = self.with_value(|a| kernels::point_reproj_forward(a, pose, k, observed, penalty));
        self.tape.push(
            v,
            self.requires_grad(),
            Step::PointReproj {
                a: self.idx,
                pose: *pose,
                intr: *k,
                observed: observed.clone(),
            },
        )
    }

    /// ψ line reprojection residual per predicted 3D segment (n×6 → n×1):
    /// the summed perpendicular distances of both projected endpoints to the
    /// observed segment's supporting line. Behind-camera rows contribute the
    /// fixed `penalty` with zero gradient.
    pub fn line_reproj_residuals(
        &self,
        pose: &Pose,
        k: &Intrinsics,
        observed: &[LineSegment2],
        penalty: f64,
    ) -> Tensor {
        let (n, w) = self.shape();
        assert_eq!(w, 6, "line_reproj_residuals expects n×6 predictions");
        assert_eq!(n, observed.len(), "observed segment count mismatch");
        let lines: Vec<(f64, f64, f64)> = observed
            .iter()
            .map(|seg| {
                let (nvec, c) = crate::geometry::infinite_line_coeffs(seg)
                    .expect("observed segments must be non-degenerate");
                (nvec.x, nvec.y, c)
            })
            .collect();
        let v = self.with_value(|a| kernels::line_reproj_forward(a, pose, k, &lines, penalty));
        self.tape.push(
            v,
            self.requires_grad(),
            Step::LineReproj {
                a: self.idx,
                pose: *pose,
                intr: *k,
                lines,
            },
        )
    }
}

/// Concatenates along the column axis.
pub fn concat_cols(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let tape = parts[0].tape.clone();
    let n = parts[0].shape().0;
    for p in parts {
        parts[0].same_tape(p);
        assert_eq!(p.shape().0, n, "shape mismatch in concat_cols");
    }
    let views: Vec<Arr> = parts.iter().map(|p| p.value()).collect();
    let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
    let v = concatenate(Axis(1), &view_refs).expect("concat_cols");
    tape.push(
        v,
        parts.iter().any(|p| p.requires_grad()),
        Step::ConcatCols {
            parts: parts.iter().map(|p| p.idx).collect(),
            widths: parts.iter().map(|p| p.shape().1).collect(),
        },
    )
}

/// Concatenates along the row axis.
pub fn concat_rows(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let tape = parts[0].tape.clone();
    let w = parts[0].shape().1;
    for p in parts {
        parts[0].same_tape(p);
        assert_eq!(p.shape().1, w, "shape mismatch in concat_rows");
    }
    let views: Vec<Arr> = parts.iter().map(|p| p.value()).collect();
    let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
    let v = concatenate(Axis(0), &view_refs).expect("concat_rows");
    tape.push(
        v,
        parts.iter().any(|p| p.requires_grad()),
        Step::ConcatRows {
            parts: parts.iter().map(|p| p.idx).collect(),
            heights: parts.iter().map(|p| p.shape().0).collect(),
        },
    )
}

/// Max over coordinates of `|analytic - central difference| / max(1, |analytic|)`
/// for the gradient of the scalar `f(x)` with respect to `x`.
pub fn gradcheck<F>(f: F, x: &Arr, h: f64) -> f64
where
    F: Fn(&Tape, &Tensor) -> Tensor,
{
    let tape = Tape::new();
    let xt = tape.leaf(x.clone(), true);
    let loss = f(&tape, &xt);
    assert_eq!(loss.shape(), (1, 1), "gradcheck requires a scalar function");
    loss.backward();
    let analytic = xt
        .grad()
        .unwrap_or_else(|| Array2::zeros(x.raw_dim()));

    let eval = |arr: &Arr| -> f64 {
        let t = Tape::new();
        let xt = t.leaf(arr.clone(), false);
        f(&t, &xt).scalar_value()
    };

    let mut max_rel: f64 = 0.0;
    let mut xp = x.clone();
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let orig = xp[(i, j)];
            xp[(i, j)] = orig + h;
            let fp = eval(&xp);
            xp[(i, j)] = orig - h;
            let fm = eval(&xp);
            xp[(i, j)] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[(i, j)];
            let rel = (a - fd).abs() / a.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}

impl TapeInner {
    /// Reverse sweep from `root`, with per-call adjoint seeds. Gradients land
    /// in `Node::grad` (accumulating across calls).
    fn run_backward(&mut self, root: usize, seeds: &mut Vec<Option<Arr>>) {
        // Per-call adjoints live in `seeds`; node.grad receives the final
        // adjoint of each requires_grad node as it is processed.
        for idx in (0..=root).rev() {
            let Some(adj) = seeds[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            // Record the adjoint on the node itself.
            match &mut self.nodes[idx].grad {
                Some(g) => *g += &adj,
                slot @ None => *slot = Some(adj.clone()),
            }
            let step = self.nodes[idx].step.clone();
            step.backward(self, idx, &adj, seeds);
        }
    }

    fn value(&self, idx: usize) -> &Arr {
        &self.nodes[idx].value
    }

    fn needs_grad(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn accumulate(seeds: &mut [Option<Arr>], idx: usize, delta: Arr) {
        match &mut seeds[idx] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(standardize(delta)),
        }
    }
}
