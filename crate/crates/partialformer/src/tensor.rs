//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are contiguous row-major buffers with shapes checked at op
//! boundaries (shape bugs are programmer errors and panic). Every operation
//! that consumes tracked tensors appends a node to an implicit define-by-run
//! graph; calling [`Tensor::backward`] on a scalar loss sweeps that graph in
//! reverse creation order and accumulates gradients into every tracked
//! ancestor, so parameters used several times (shared embeddings, logit maps
//! reused by many layers) receive the sum of all path contributions.
//!
//! Masked attention uses an additive sentinel of [`MASK_VALUE`]; by the time
//! the row max is subtracted inside the softmax, masked entries underflow to
//! exactly zero probability. Rows where *every* entry is masked are detected
//! (row max below `-1e8`), produce an all-zero row instead of NaN, and bump a
//! thread-local diagnostic counter readable via [`fully_masked_row_count`].

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// Additive logit mask: entries carrying this value are excluded from
/// attention with exactly zero probability after the softmax.
pub const MASK_VALUE: f64 = -1e9;

/// A row whose maximum logit is at or below this threshold is considered
/// fully masked.
const FULLY_MASKED_THRESHOLD: f64 = -1e8;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static FULLY_MASKED_ROWS: Cell<u64> = const { Cell::new(0) };
}

// ── gradient mode ───────────────────────────────────────────────────────────

/// While alive, newly created tensors record no graph edges; forwards run as
/// plain numerics. Restores the previous mode on drop (guards nest).
pub struct NoGrad {
    prev: bool,
}

/// Disable gradient tracking on this thread until the guard is dropped.
pub fn no_grad() -> NoGrad {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGrad { prev }
}

impl Drop for NoGrad {
    fn drop(&mut self) {
        let prev = self.prev;
        GRAD_ENABLED.with(|g| g.set(prev));
    }
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Number of fully-masked softmax rows zeroed on this thread since the last
/// reset. A nonzero count usually indicates a malformed mask upstream.
pub fn fully_masked_row_count() -> u64 {
    FULLY_MASKED_ROWS.with(|c| c.get())
}

pub fn reset_fully_masked_row_count() {
    FULLY_MASKED_ROWS.with(|c| c.set(0));
}

// ── activations ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the *output* value (cheap for all four).
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

// ── tensor and graph node ───────────────────────────────────────────────────

/// Backward closure: receives the gradient flowing into this node and the
/// node's forward output, and accumulates into the parents it captured.
type BackwardFn = Box<dyn Fn(&[f64], &[f64])>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Cheaply clonable handle to a graph node. Clones share storage.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

fn make(
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
) -> Tensor {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    Tensor {
        node: Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward,
        }),
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl Tensor {
    // ── constructors ──

    /// Untracked tensor (no gradient ever flows into it).
    pub fn constant(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "constant: shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        make(shape, data, false, vec![], None)
    }

    /// Tracked leaf parameter; gradients accumulate here across backward calls
    /// until [`Tensor::zero_grad`].
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "param: shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        make(shape, data, true, vec![], None)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::constant(shape, vec![0.0; n])
    }

    pub fn zeros_param(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::param(shape, vec![0.0; n])
    }

    pub fn filled_param(shape: Vec<usize>, value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::param(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::constant(vec![1], vec![value])
    }

    /// Leaf parameter with Xavier-uniform entries: bound √(6 / (rows + cols)).
    pub fn xavier_param(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
        Tensor::param(vec![rows, cols], data)
    }

    // ── accessors ──

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.node.data.borrow()
    }

    pub fn data_clone(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    /// Replace the stored values (same length). Intended for leaves; calling
    /// it on an intermediate invalidates any graph built from it.
    pub fn set_data(&self, values: &[f64]) {
        let mut d = self.node.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data: length mismatch");
        d.copy_from_slice(values);
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item: tensor has shape {:?}", self.node.shape);
        self.node.data.borrow()[0]
    }

    pub fn grad_clone(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Run `f` over `(data, grad)` if a gradient is present (optimizer hook).
    pub fn update_with(&self, f: impl FnOnce(&mut [f64], &[f64])) {
        let grad = self.node.grad.borrow();
        if let Some(g) = grad.as_ref() {
            let mut d = self.node.data.borrow_mut();
            f(&mut d, g);
        }
    }

    fn dims2(&self, ctx: &str) -> (usize, usize) {
        match self.node.shape[..] {
            [a, b] => (a, b),
            _ => panic!("{ctx}: expected rank-2 tensor, got shape {:?}", self.node.shape),
        }
    }

    fn dims3(&self, ctx: &str) -> (usize, usize, usize) {
        match self.node.shape[..] {
            [a, b, c] => (a, b, c),
            _ => panic!("{ctx}: expected rank-3 tensor, got shape {:?}", self.node.shape),
        }
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        if !self.node.requires_grad {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    // ── backward engine ──

    /// Reverse sweep from a scalar loss. Gradients of intermediates are freed
    /// as soon as consumed; leaf gradients accumulate (call `zero_grad`
    /// between optimization steps). Leaf data must not be mutated between the
    /// forward that built this graph and the sweep.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward: loss must be scalar, got {:?}", self.node.shape);
        assert!(self.node.requires_grad, "backward: loss is not connected to any tracked tensor");

        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if seen.insert(t.node.id) {
                for p in &t.node.parents {
                    if p.node.requires_grad {
                        stack.push(p.clone());
                    }
                }
                order.push(t);
            }
        }
        // Creation order is a topological order: every consumer has a larger
        // id than its inputs, so a descending sweep finishes all consumers
        // before touching the node they feed.
        order.sort_unstable_by(|a, b| b.node.id.cmp(&a.node.id));

        *self.node.grad.borrow_mut() = Some(vec![1.0]);
        for t in &order {
            let Some(back) = t.node.backward.as_ref() else { continue };
            let Some(g) = t.node.grad.borrow_mut().take() else { continue };
            let y = t.node.data.borrow();
            back(&g, &y);
        }
    }

    // ── elementwise ops ──

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "add: shape mismatch");
        let out: Vec<f64> =
            self.data().iter().zip(rhs.data().iter()).map(|(a, b)| a + b).collect();
        let rg = grad_enabled() && (self.requires_grad() || rhs.requires_grad());
        let back: Option<BackwardFn> = if rg {
            let (a, b) = (self.clone(), rhs.clone());
            Some(Box::new(move |g, _| {
                a.accumulate_grad(g);
                b.accumulate_grad(g);
            }))
        } else {
            None
        };
        let parents = if rg { vec![self.clone(), rhs.clone()] } else { vec![] };
        make(self.node.shape.clone(), out, rg, parents, back)
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "sub: shape mismatch");
        let out: Vec<f64> =
            self.data().iter().zip(rhs.data().iter()).map(|(a, b)| a - b).collect();
        let rg = grad_enabled() && (self.requires_grad() || rhs.requires_grad());
        let back: Option<BackwardFn> = if rg {
            let (a, b) = (self.clone(), rhs.clone());
            Some(Box::new(move |g, _| {
                a.accumulate_grad(g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                b.accumulate_grad(&neg);
            }))
        } else {
            None
        };
        let parents = if rg { vec![self.clone(), rhs.clone()] } else { vec![] };
        make(self.node.shape.clone(), out, rg, parents, back)
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "mul: shape mismatch");
        let out: Vec<f64> =
            self.data().iter().zip(rhs.data().iter()).map(|(a, b)| a * b).collect();
        let rg = grad_enabled() && (self.requires_grad() || rhs.requires_grad());
        let back: Option<BackwardFn> = if rg {
            let (a, b) = (self.clone(), rhs.clone());
            Some(Box::new(move |g, _| {
                {
                    let bd = b.node.data.borrow();
                    let da: Vec<f64> = g.iter().zip(bd.iter()).map(|(gi, bi)| gi * bi).collect();
                    a.accumulate_grad(&da);
                }
                let ad = a.node.data.borrow();
                let db: Vec<f64> = g.iter().zip(ad.iter()).map(|(gi, ai)| gi * ai).collect();
                b.accumulate_grad(&db);
            }))
        } else {
            None
        };
        let parents = if rg { vec![self.clone(), rhs.clone()] } else { vec![] };
        make(self.node.shape.clone(), out, rg, parents, back)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|a| a * c).collect();
        let rg = grad_enabled() && self.requires_grad();
        let back: Option<BackwardFn> = if rg {
            let a = self.clone();
            Some(Box::new(move |g, _| {
                let da: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                a.accumulate_grad(&da);
            }))
        } else {
            None
        };
        let parents = if rg { vec![self.clone()] } else { vec![] };
        make(self.node.shape.clone(), out, rg, parents, back)
    }

    pub fn activation(&self, kind: Activation) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| kind.apply(x)).collect();
        let rg = grad_enabled() && self.requires_grad();
        let back: Option<BackwardFn> = if rg {
            let a = self.clone();
            Some(Box::new(move |g, y| {
                let da: Vec<f64> =
                    g.iter().zip(y.iter()).map(|(gi, &yi)| gi * kind.grad_from_output(yi)).collect();
                a.accumulate_grad(&da);
            }))
        } else {
            None
        };
        let parents = if rg { vec![self.clone()] } else { vec![] };
        make(self.node.shape.clone(), out, rg, parents, back)
    }

    pub fn relu(&self) -> Tensor {
        self.activation(Activation::Relu)
    }

    /// Inverted-scaling dropout: each element is zeroed with probability `p`,
    /// survivors are scaled by 1/(1-p) so expectations match evaluation mode.
    pub fn dropout(&self, p: f64, rng: &mut Rng) -> Tensor {
        assert!((0.0..1.0).contains(&p), "dropout: p must be in [0,1), got {p}");
        if p == 0.0 {
            return self.clone();
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> =
            (0..self.numel()).map(|_| if rng.chance(p) { 0.0 } else { keep_scale }).collect();
        let out: Vec<f64> = self.data().iter().zip(mask.iter()).map(|(a, m)| a * m).collect();
        let rg = grad_enabled() && self.requires_grad();
        let back: Option<BackwardFn> = if rg {
            let a = self.clone();
            let mask = mask.clone();
            Some(Box::new(move |g, _| {
                let da: Vec<f64> = g.iter().zip(mask.iter()).map(|(gi, m)| gi * m).collect();
                a.accumulate_grad(&da);
            }))
        } else {
            None
        };
        let parents = if rg { vec![self.clone()] } else { vec![] };
        make(self.node.shape.clone(), out, rg, parents, back)
    }

    // ── matrix products ──

    /// `[m,k] · [k,n] -> [m,n]`
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let (m, k) = self.dims2("matmul lhs");
        let (k2, n) = rhs.dims2("matmul rhs");
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        mm_acc(&self.data(), &rhs.data(), m, k, n, &mut out);
        let rg = grad_enabled() && (self.requires_grad() || rhs.requires_grad());
        let back: Option<BackwardFn> = if rg {
            let (a, b) = (self.clone(), rhs.clone());
            Some(Box::new(move |g, _| {
                if a.requires_grad() {
                    let mut da = vec![0.0; m * k];
                    mm_nt_acc(g, &b.node.data.borrow(), m, n, k, &mut da);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; k * n];
                    mm_tn_acc(&a.node.data.borrow(), g, m, k, n, &mut db);
                    b.accumulate_grad(&db);
                }
            }))
        } else {
            None
        };
        let parents = if rg { vec![self.clone(), rhs.clone()] } else { vec![] };
        make(vec![m, n], out, rg, parents, back)
    }

    /// `[m,k] · [n,k]ᵀ -> [m,n]` without materializing the transpose.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Tensor {
        let (m, k) = self.dims2("matmul_nt lhs");
        let (n, k2) = rhs.dims2("matmul_nt rhs");
        assert_eq!(k, k2, "matmul_nt: inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        mm_nt_acc(&self.data(), &rhs.data(), m, k, n, &mut out);
        let rg = grad_enabled() && (self.requires_grad() || rhs.requires_grad());
        let back: Option<BackwardFn> = if rg {
            let (a, b) = (self.clone(), rhs.clone());
            Some(Box::new(move |g, _| {
                if a.requires_grad() {
                    let mut da = vec![0.0; m * k];
                    mm_acc(g, &b.node.data.borrow(), m, n, k, &mut da);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; n * k];
                    mm_tn_acc(g, &a.node.data.borrow(), m, n, k, &mut db);
                    b.accumulate_grad(&db);
                }
            }))
        } else {
            None
        };
        let parents = if rg { vec![self.clone(), rhs.clone()] } else { vec![] };
        make(vec![m, n], out, rg, parents, back)
    }

    /// Batched `[h,m,k] · [h,k,n] -> [h,m,n]`.
    pub fn bmm(&self, rhs: &Tensor) -> Tensor {
        let (h, m, k) = self.dims3("bmm lhs");
        let (h2, k2, n) = rhs.dims3("bmm rhs");
        assert_eq!(h, h2, "bmm: batch dimensions {h} vs {h2}");
        assert_eq!(k, k2, "bmm: inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; h * m * n];
        {
            let a = self.data();
            let b = rhs.data();
            for i in 0..h {
                mm_acc(
                    &a[i * m * k..(i + 1) * m * k],
                    &b[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let rg = grad_enabled() && (self.requires_grad() || rhs.requires_grad());
        let back: Option<BackwardFn> = if rg {
            let (a, b) = (self.clone(), rhs.clone());
            Some(Box::new(move |g, _| {
                if a.requires_grad() {
                    let bd = b.node.data.borrow();
                    let mut da = vec![0.0; h * m * k];
                    for i in 0..h {
                        mm_nt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let ad = a.node.data.borrow();
                    let mut db = vec![0.0; h * k * n];
                    for i in 0..h {
                        mm_tn_acc(
                            &ad[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                    b.accumulate_grad(&db);
                }
            }))
        } else {
            None
        };
        let parents = if rg { vec![self.clone(), rhs.clone()] } else { vec![] };
        make(vec![h, m, n], out, rg, parents, back)
    }

    /// Batched `[h,m,k] · [h,n,k]ᵀ -> [h,m,n]` (e.g. query·keyᵀ).
    pub fn bmm_nt(&self, rhs: &Tensor) -> Tensor {
        let (h, m, k) = self.dims3("bmm_nt lhs");
        let (h2, n, k2) = rhs.dims3("bmm_nt rhs");
        assert_eq!(h, h2, "bmm_nt: batch dimensions {h} vs {h2}");
        assert_eq!(k, k2, "bmm_nt: inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; h * m * n];
        {
            let a = self.data();
            let b = rhs.data();
            for i in 0..h {
                mm_nt_acc(
                    &a[i * m * k..(i + 1) * m * k],
                    &b[i * n * k..(i + 1) * n * k],
                    m,
                    k,
                    n,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let rg = grad_enabled() && (self.requires_grad() || rhs.requires_grad());
        let back: Option<BackwardFn> = if rg {
            let (a, b) = (self.clone(), rhs.clone());
            Some(Box::new(move |g, _| {
                if a.requires_grad() {
                    let bd = b.node.data.borrow();
                    let mut da = vec![0.0; h * m * k];
                    for i in 0..h {
                        mm_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * n * k..(i + 1) * n * k],
                            m,
                            n,
                            k,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let ad = a.node.data.borrow();
                    let mut db = vec![0.0; h * n * k];
                    for i in 0..h {
                        mm_tn_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &ad[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                            &mut db[i * n * k..(i + 1) * n * k],
                        );
                    }
                    b.accumulate_grad(&db);
                }
            }))
        } else {
            None
        };
        let parents = if rg { vec![self.clone(), rhs.clone()] } else { vec![] };
        make(vec![h, m, n], out, rg, parents, back)
    }

    /// Add a length-`n` bias vector to every length-`n` row of `self`.
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        let n = *self.node.shape.last().expect("add_bias: scalar input");
        assert_eq!(bias.shape(), [n], "add_bias: bias shape {:?} vs row length {n}", bias.shape());
        let rows = self.numel() / n;
        let mut out = self.data_clone();
        {
            let b = bias.data();
            for r in 0..rows {
                for j in 0..n {
                    out[r * n + j] += b[j];
                }
            }
        }
        let rg = grad_enabled() && (self.requires_grad() || bias.requires_grad());
        let back: Option<BackwardFn> = if rg {
            let (a, b) = (self.clone(), bias.clone());
            Some(Box::new(move |g, _| {
                a.accumulate_grad(g);
                if b.requires_grad() {
                    let mut db = vec![0.0; n];
                    for r in 0..rows {
                        for j in 0..n {
                            db[j] += g[r * n + j];
                        }
                    }
                    b.accumulate_grad(&db);
                }
            }))
        } else {
            None
        };
        let parents = if rg { vec![self.clone(), bias.clone()] } else { vec![] };
        make(self.node.shape.clone(), out, rg, parents, back)
    }

    // ── row reductions and normalizations ──

    /// Softmax over the last axis. Masked entries ([`MASK_VALUE`]) come out as
    /// exactly zero; fully-masked rows come out all-zero and are counted.
    pub fn softmax_rows(&self) -> Tensor {
        let n = *self.node.shape.last().expect("softmax_rows: scalar input");
        let rows = self.numel() / n;
        let mut out = vec![0.0; self.numel()];
        {
            let x = self.data();
            for r in 0..rows {
                let row = &x[r * n..(r + 1) * n];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if max <= FULLY_MASKED_THRESHOLD {
                    FULLY_MASKED_ROWS.with(|c| c.set(c.get() + 1));
                    continue; // leave the output row at exact zero
                }
                let orow = &mut out[r * n..(r + 1) * n];
                let mut sum = 0.0;
                for (o, &v) in orow.iter_mut().zip(row) {
                    *o = (v - max).exp();
                    sum += *o;
                }
                for o in orow.iter_mut() {
                    *o /= sum;
                }
            }
        }
        let rg = grad_enabled() && self.requires_grad();
        let back: Option<BackwardFn> = if rg {
            let a = self.clone();
            Some(Box::new(move |g, y| {
                let mut da = vec![0.0; g.len()];
                for r in 0..rows {
                    let (gr, yr) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                    let dot: f64 = gr.iter().zip(yr).map(|(gi, yi)| gi * yi).sum();
                    for j in 0..n {
                        da[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                a.accumulate_grad(&da);
            }))
        } else {
            None
        };
        let parents = if rg { vec![self.clone()] } else { vec![] };
        make(self.node.shape.clone(), out, rg, parents, back)
    }

    /// Log-softmax over the last axis (numerically stable; used on vocabulary
    /// logits, which are never masked).
    pub fn log_softmax_rows(&self) -> Tensor {
        let n = *self.node.shape.last().expect("log_softmax_rows: scalar input");
        let rows = self.numel() / n;
        let mut out = vec![0.0; self.numel()];
        {
            let x = self.data();
            for r in 0..rows {
                let row = &x[r * n..(r + 1) * n];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[r * n + j] = row[j] - lse;
                }
            }
        }
        let rg = grad_enabled() && self.requires_grad();
        let back: Option<BackwardFn> = if rg {
            let a = self.clone();
            Some(Box::new(move |g, y| {
                let mut da = vec![0.0; g.len()];
                for r in 0..rows {
                    let (gr, yr) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        da[r * n + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                a.accumulate_grad(&da);
            }))
        } else {
            None
        };
        let parents = if rg { vec![self.clone()] } else { vec![] };
        make(self.node.shape.clone(), out, rg, parents, back)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
        let n = *self.node.shape.last().expect("layer_norm: scalar input");
        assert_eq!(gain.shape(), [n], "layer_norm: gain shape {:?} vs width {n}", gain.shape());
        assert_eq!(bias.shape(), [n], "layer_norm: bias shape {:?} vs width {n}", bias.shape());
        let rows = self.numel() / n;
        let mut out = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut normalized = vec![0.0; self.numel()];
        {
            let x = self.data();
            let gn = gain.data();
            let bs = bias.data();
            for r in 0..rows {
                let row = &x[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[r] = istd;
                for j in 0..n {
                    let xhat = (row[j] - mean) * istd;
                    normalized[r * n + j] = xhat;
                    out[r * n + j] = gn[j] * xhat + bs[j];
                }
            }
        }
        let rg =
            grad_enabled() && (self.requires_grad() || gain.requires_grad() || bias.requires_grad());
        let back: Option<BackwardFn> = if rg {
            let (a, gn, bs) = (self.clone(), gain.clone(), bias.clone());
            Some(Box::new(move |g, _| {
                let gnd = gn.node.data.borrow();
                if gn.requires_grad() || bs.requires_grad() {
                    let mut dgain = vec![0.0; n];
                    let mut dbias = vec![0.0; n];
                    for r in 0..rows {
                        for j in 0..n {
                            dgain[j] += g[r * n + j] * normalized[r * n + j];
                            dbias[j] += g[r * n + j];
                        }
                    }
                    gn.accumulate_grad(&dgain);
                    bs.accumulate_grad(&dbias);
                }
                if a.requires_grad() {
                    let mut da = vec![0.0; rows * n];
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let xh = &normalized[r * n..(r + 1) * n];
                        // dxhat = g * gain; dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..n {
                            let dxh = gr[j] * gnd[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= n as f64;
                        mean_dxh_xh /= n as f64;
                        for j in 0..n {
                            let dxh = gr[j] * gnd[j];
                            da[r * n + j] = inv_std[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }))
        } else {
            None
        };
        let parents = if rg { vec![self.clone(), gain.clone(), bias.clone()] } else { vec![] };
        make(self.node.shape.clone(), out, rg, parents, back)
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let rg = grad_enabled() && self.requires_grad();
        let back: Option<BackwardFn> = if rg {
            let a = self.clone();
            let n = self.numel();
            Some(Box::new(move |g, _| {
                a.accumulate_grad(&vec![g[0]; n]);
            }))
        } else {
            None
        };
        let parents = if rg { vec![self.clone()] } else { vec![] };
        make(vec![1], vec![s], rg, parents, back)
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Row sums of a rank-2 tensor: `[r,c] -> [r]`.
    pub fn row_sums(&self) -> Tensor {
        let (r, c) = self.dims2("row_sums");
        let x = self.data();
        let out: Vec<f64> = (0..r).map(|i| x[i * c..(i + 1) * c].iter().sum()).collect();
        drop(x);
        let rg = grad_enabled() && self.requires_grad();
        let back: Option<BackwardFn> = if rg {
            let a = self.clone();
            Some(Box::new(move |g, _| {
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[i];
                    }
                }
                a.accumulate_grad(&da);
            }))
        } else {
            None
        };
        let parents = if rg { vec![self.clone()] } else { vec![] };
        make(vec![r], out, rg, parents, back)
    }

    /// Per-row gather: `out[i] = self[i, idx[i]]`.
    pub fn pick(&self, idx: &[usize]) -> Tensor {
        let (r, c) = self.dims2("pick");
        assert_eq!(idx.len(), r, "pick: {} indices for {} rows", idx.len(), r);
        for (i, &j) in idx.iter().enumerate() {
            assert!(j < c, "pick: index {j} out of range {c} at row {i}");
        }
        let x = self.data();
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| x[i * c + j]).collect();
        drop(x);
        let rg = grad_enabled() && self.requires_grad();
        let back: Option<BackwardFn> = if rg {
            let a = self.clone();
            let idx = idx.to_vec();
            Some(Box::new(move |g, _| {
                let mut da = vec![0.0; r * c];
                for (i, &j) in idx.iter().enumerate() {
                    da[i * c + j] = g[i];
                }
                a.accumulate_grad(&da);
            }))
        } else {
            None
        };
        let parents = if rg { vec![self.clone()] } else { vec![] };
        make(vec![r], out, rg, parents, back)
    }

    /// Row lookup into an embedding table: `self[v,d]` gathered at `ids`
    /// yields `[len(ids), d]`; the backward scatter-adds row gradients.
    pub fn gather_rows(&self, ids: &[usize]) -> Tensor {
        let (v, d) = self.dims2("gather_rows");
        let t = ids.len();
        for (pos, &id) in ids.iter().enumerate() {
            assert!(id < v, "gather_rows: id {id} out of range {v} at position {pos}");
        }
        let table = self.data();
        let mut out = vec![0.0; t * d];
        for (pos, &id) in ids.iter().enumerate() {
            out[pos * d..(pos + 1) * d].copy_from_slice(&table[id * d..(id + 1) * d]);
        }
        drop(table);
        let rg = grad_enabled() && self.requires_grad();
        let back: Option<BackwardFn> = if rg {
            let a = self.clone();
            let ids = ids.to_vec();
            Some(Box::new(move |g, _| {
                let mut da = vec![0.0; v * d];
                for (pos, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        da[id * d + j] += g[pos * d + j];
                    }
                }
                a.accumulate_grad(&da);
            }))
        } else {
            None
        };
        let parents = if rg { vec![self.clone()] } else { vec![] };
        make(vec![t, d], out, rg, parents, back)
    }

    // ── shape ops ──

    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(),
            "reshape: {:?} incompatible with {:?}",
            shape,
            self.node.shape
        );
        let out = self.data_clone();
        let rg = grad_enabled() && self.requires_grad();
        let back: Option<BackwardFn> = if rg {
            let a = self.clone();
            Some(Box::new(move |g, _| a.accumulate_grad(g)))
        } else {
            None
        };
        let parents = if rg { vec![self.clone()] } else { vec![] };
        make(shape, out, rg, parents, back)
    }

    /// `[r, c] -> [c, r]` matrix transpose.
    pub fn transpose_2d(&self) -> Tensor {
        let (r, c) = self.dims2("transpose_2d");
        let x = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        drop(x);
        let rg = grad_enabled() && self.requires_grad();
        let back: Option<BackwardFn> = if rg {
            let a = self.clone();
            Some(Box::new(move |g, _| {
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                a.accumulate_grad(&da);
            }))
        } else {
            None
        };
        let parents = if rg { vec![self.clone()] } else { vec![] };
        make(vec![c, r], out, rg, parents, back)
    }

    /// `[t, h·dk] -> [h, t, dk]`: regroup packed per-position head columns
    /// into one contiguous block per head.
    pub fn split_heads(&self, h: usize) -> Tensor {
        let (t, hd) = self.dims2("split_heads");
        assert!(h > 0 && hd % h == 0, "split_heads: width {hd} not divisible by {h} heads");
        let dk = hd / h;
        let x = self.data();
        let mut out = vec![0.0; t * hd];
        for hi in 0..h {
            for ti in 0..t {
                for ki in 0..dk {
                    out[(hi * t + ti) * dk + ki] = x[ti * hd + hi * dk + ki];
                }
            }
        }
        drop(x);
        let rg = grad_enabled() && self.requires_grad();
        let back: Option<BackwardFn> = if rg {
            let a = self.clone();
            Some(Box::new(move |g, _| {
                let mut da = vec![0.0; t * hd];
                for hi in 0..h {
                    for ti in 0..t {
                        for ki in 0..dk {
                            da[ti * hd + hi * dk + ki] = g[(hi * t + ti) * dk + ki];
                        }
                    }
                }
                a.accumulate_grad(&da);
            }))
        } else {
            None
        };
        let parents = if rg { vec![self.clone()] } else { vec![] };
        make(vec![h, t, dk], out, rg, parents, back)
    }

    /// `[h, t, dk] -> [t, h·dk]`, inverse of [`Tensor::split_heads`].
    pub fn merge_heads(&self) -> Tensor {
        let (h, t, dk) = self.dims3("merge_heads");
        let hd = h * dk;
        let x = self.data();
        let mut out = vec![0.0; t * hd];
        for hi in 0..h {
            for ti in 0..t {
                for ki in 0..dk {
                    out[ti * hd + hi * dk + ki] = x[(hi * t + ti) * dk + ki];
                }
            }
        }
        drop(x);
        let rg = grad_enabled() && self.requires_grad();
        let back: Option<BackwardFn> = if rg {
            let a = self.clone();
            Some(Box::new(move |g, _| {
                let mut da = vec![0.0; t * hd];
                for hi in 0..h {
                    for ti in 0..t {
                        for ki in 0..dk {
                            da[(hi * t + ti) * dk + ki] = g[ti * hd + hi * dk + ki];
                        }
                    }
                }
                a.accumulate_grad(&da);
            }))
        } else {
            None
        };
        let parents = if rg { vec![self.clone()] } else { vec![] };
        make(vec![t, hd], out, rg, parents, back)
    }

    /// Stack equal-shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "stack: empty input");
        let shape = parts[0].node.shape.clone();
        let len = parts[0].numel();
        let mut out = Vec::with_capacity(parts.len() * len);
        for p in parts {
            assert_eq!(p.shape(), &shape[..], "stack: mismatched member shapes");
            out.extend_from_slice(&p.data());
        }
        let mut full_shape = vec![parts.len()];
        full_shape.extend_from_slice(&shape);
        let rg = grad_enabled() && parts.iter().any(|p| p.requires_grad());
        let back: Option<BackwardFn> = if rg {
            let members: Vec<Tensor> = parts.to_vec();
            Some(Box::new(move |g, _| {
                for (i, p) in members.iter().enumerate() {
                    p.accumulate_grad(&g[i * len..(i + 1) * len]);
                }
            }))
        } else {
            None
        };
        let parents = if rg { parts.to_vec() } else { vec![] };
        make(full_shape, out, rg, parents, back)
    }

    /// Repeat the whole tensor `h` times along a new leading axis
    /// (broadcast helper; the backward sums over copies).
    pub fn repeat_leading(&self, h: usize) -> Tensor {
        assert!(h > 0, "repeat_leading: zero repeats");
        let len = self.numel();
        let x = self.data();
        let mut out = Vec::with_capacity(h * len);
        for _ in 0..h {
            out.extend_from_slice(&x);
        }
        drop(x);
        let mut shape = vec![h];
        shape.extend_from_slice(&self.node.shape);
        let rg = grad_enabled() && self.requires_grad();
        let back: Option<BackwardFn> = if rg {
            let a = self.clone();
            Some(Box::new(move |g, _| {
                let mut da = vec![0.0; len];
                for i in 0..h {
                    for j in 0..len {
                        da[j] += g[i * len + j];
                    }
                }
                a.accumulate_grad(&da);
            }))
        } else {
            None
        };
        let parents = if rg { vec![self.clone()] } else { vec![] };
        make(shape, out, rg, parents, back)
    }
}

// ── raw kernels ─────────────────────────────────────────────────────────────
// i-k-j loop order keeps the innermost loop streaming over contiguous rows of
// both the output and the right-hand operand, which auto-vectorizes well.

/// `out[m,n] += a[m,k] · b[k,n]`
fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ` (row-by-row dot products)
fn mm_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
fn mm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// ── numeric gradient oracle ─────────────────────────────────────────────────

/// Central finite differences of `eval` with respect to every entry of
/// `param`: perturbs the stored data in place (restoring it afterwards) and
/// re-evaluates under a no-grad guard. `eval` must be deterministic.
pub fn numeric_gradient(param: &Tensor, h: f64, mut eval: impl FnMut() -> f64) -> Vec<f64> {
    let _guard = no_grad();
    let original = param.data_clone();
    let mut grad = vec![0.0; original.len()];
    let mut work = original.clone();
    for i in 0..original.len() {
        work[i] = original[i] + h;
        param.set_data(&work);
        let up = eval();
        work[i] = original[i] - h;
        param.set_data(&work);
        let down = eval();
        work[i] = original[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    param.set_data(&original);
    grad
}

/// |a-b| relative to max(|a|, |b|, 1): relative error above unit magnitude,
/// absolute error below it (central differences on f64 carry ~1e-6 noise).
pub fn gradient_mismatch(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient_mismatch: length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
        (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }

    /// Independent naive j-loop matmul used as the oracle for the kernels.
    fn naive_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64, ctx: &str) {
        assert_eq!(a.len(), b.len(), "{ctx}: length");
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "{ctx}: index {i}: {x} vs {y}");
        }
    }

    /// Check the analytic gradient of `loss_fn` w.r.t. each param against
    /// central differences. `loss_fn` must rebuild the graph on every call.
    fn check_grads(params: &[&Tensor], mut loss_fn: impl FnMut() -> Tensor, tol: f64, ctx: &str) {
        for p in params {
            p.zero_grad();
        }
        let loss = loss_fn();
        loss.backward();
        for (pi, p) in params.iter().enumerate() {
            let analytic = p.grad_clone().unwrap_or_else(|| panic!("{ctx}: param {pi} got no gradient"));
            let numeric = numeric_gradient(p, 1e-5, || loss_fn().item());
            let err = gradient_mismatch(&analytic, &numeric);
            assert!(err < tol, "{ctx}: param {pi} gradient mismatch {err:.3e} (tol {tol:.1e})");
        }
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let mut rng = Rng::from_seed(11);
        for &(m, k, n) in &[(1, 1, 1), (2, 3, 4), (5, 7, 3), (8, 8, 8)] {
            let a = rand_vec(m * k, &mut rng);
            let b = rand_vec(k * n, &mut rng);
            let ta = Tensor::constant(vec![m, k], a.clone());
            let tb = Tensor::constant(vec![k, n], b.clone());
            let got = ta.matmul(&tb);
            assert_close(&got.data(), &naive_mm(&a, &b, m, k, n), 1e-12, "matmul");
        }
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut rng = Rng::from_seed(12);
        let (m, k, n) = (4, 6, 5);
        let a = rand_vec(m * k, &mut rng);
        let b = rand_vec(n * k, &mut rng);
        let mut bt = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                bt[p * n + j] = b[j * k + p];
            }
        }
        let got = Tensor::constant(vec![m, k], a.clone())
            .matmul_nt(&Tensor::constant(vec![n, k], b));
        assert_close(&got.data(), &naive_mm(&a, &bt, m, k, n), 1e-12, "matmul_nt");
    }

    #[test]
    fn bmm_is_per_slice_matmul() {
        let mut rng = Rng::from_seed(13);
        let (h, m, k, n) = (3, 4, 5, 2);
        let a = rand_vec(h * m * k, &mut rng);
        let b = rand_vec(h * k * n, &mut rng);
        let got = Tensor::constant(vec![h, m, k], a.clone())
            .bmm(&Tensor::constant(vec![h, k, n], b.clone()));
        for i in 0..h {
            let want = naive_mm(&a[i * m * k..(i + 1) * m * k], &b[i * k * n..(i + 1) * k * n], m, k, n);
            assert_close(&got.data()[i * m * n..(i + 1) * m * n], &want, 1e-12, "bmm slice");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_mask_zeroes_exactly() {
        let x = Tensor::constant(
            vec![2, 4],
            vec![0.3, -1.2, 2.0, 0.0, 1.0, MASK_VALUE, -0.5, MASK_VALUE],
        );
        let y = x.softmax_rows();
        let d = y.data();
        assert!((d[0..4].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((d[4..8].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(d[5], 0.0, "masked entry must be exactly zero");
        assert_eq!(d[7], 0.0, "masked entry must be exactly zero");
        assert!(d[4] > d[6], "higher logit, higher probability");
    }

    #[test]
    fn softmax_fully_masked_row_zeroes_and_counts() {
        reset_fully_masked_row_count();
        let x = Tensor::constant(vec![2, 3], vec![MASK_VALUE, MASK_VALUE, MASK_VALUE, 1.0, 0.0, -1.0]);
        let y = x.softmax_rows();
        assert_eq!(&y.data()[0..3], &[0.0, 0.0, 0.0]);
        assert!((y.data()[3..6].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(fully_masked_row_count(), 1);
        reset_fully_masked_row_count();
        assert_eq!(fully_masked_row_count(), 0);
    }

    #[test]
    fn softmax_closed_form_two_entries() {
        // softmax([z, 0]) = [e^z/(e^z+1), 1/(e^z+1)] = [sigmoid(z), sigmoid(-z)]
        let z = 0.7;
        let y = Tensor::constant(vec![1, 2], vec![z, 0.0]).softmax_rows();
        let sig = 1.0 / (1.0 + (-z as f64).exp());
        assert!((y.data()[0] - sig).abs() < 1e-15);
        assert!((y.data()[1] - (1.0 - sig)).abs() < 1e-15);
    }

    #[test]
    fn softmax_closed_form_examples() {
        // Uniform logits → uniform distribution.
        let y = Tensor::constant(vec![1, 4], vec![0.0; 4]).softmax_rows();
        assert_close(&y.data(), &[0.25; 4], 1e-15, "uniform");
        // Large equal logits must not overflow: max-subtraction keeps this exact.
        let y = Tensor::constant(vec![1, 2], vec![1000.0, 1000.0]).softmax_rows();
        assert_close(&y.data(), &[0.5, 0.5], 1e-15, "large equal");
        // softmax([0, ln 3]) = [1/4, 3/4].
        let y = Tensor::constant(vec![1, 2], vec![0.0, 3.0f64.ln()]).softmax_rows();
        assert_close(&y.data(), &[0.25, 0.75], 1e-12, "ln3");
    }

    #[test]
    fn matmul_identity_round_trip() {
        let mut rng = Rng::from_seed(21);
        let n = 5;
        let x = rand_vec(n * n, &mut rng);
        let mut eye = vec![0.0; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        let tx = Tensor::constant(vec![n, n], x.clone());
        let ti = Tensor::constant(vec![n, n], eye);
        assert_close(&tx.matmul(&ti).data(), &x, 0.0, "X·I");
        assert_close(&ti.matmul(&tx).data(), &x, 0.0, "I·X");
    }

    #[test]
    fn layer_norm_constant_row_maps_to_bias() {
        // A constant row has zero variance; with gain=1, bias=0 the output is
        // (x-μ)/√eps = 0 exactly, so only the bias survives.
        let d = 6;
        let x = Tensor::constant(vec![1, d], vec![3.25; d]);
        let gain = Tensor::constant(vec![d], vec![1.0; d]);
        let bias = Tensor::constant(vec![d], vec![0.0; d]);
        assert_close(&x.layer_norm(&gain, &bias, 1e-6).data(), &[0.0; 6], 1e-12, "constant row");
        // [1, -1]: μ=0, var=1 → output ≈ [1, -1] up to the eps shrinkage.
        let x = Tensor::constant(vec![1, 2], vec![1.0, -1.0]);
        let g2 = Tensor::constant(vec![2], vec![1.0; 2]);
        let b2 = Tensor::constant(vec![2], vec![0.0; 2]);
        let out = x.layer_norm(&g2, &b2, 1e-6).data_clone();
        assert!((out[0] - 1.0).abs() < 1e-6 && (out[1] + 1.0).abs() < 1e-6, "{out:?}");
    }

    #[test]
    fn transpose_2d_matches_index_swap_and_involutes() {
        let mut rng = Rng::from_seed(22);
        let (r, c) = (3, 5);
        let x = rand_vec(r * c, &mut rng);
        let t = Tensor::constant(vec![r, c], x.clone());
        let tt = t.transpose_2d();
        assert_eq!(tt.shape(), &[c, r]);
        for i in 0..r {
            for j in 0..c {
                assert_eq!(tt.data()[j * r + i], x[i * c + j]);
            }
        }
        assert_close(&tt.transpose_2d().data(), &x, 0.0, "involution");
    }

    #[test]
    fn log_softmax_agrees_with_softmax_log() {
        let mut rng = Rng::from_seed(14);
        let x = rand_vec(12, &mut rng);
        let t = Tensor::constant(vec![3, 4], x);
        let a = t.log_softmax_rows();
        let b = t.softmax_rows();
        for (la, pb) in a.data().iter().zip(b.data().iter()) {
            assert!((la.exp() - pb).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = Rng::from_seed(15);
        let (t, d) = (3, 8);
        let x = rand_vec(t * d, &mut rng);
        let gain = rand_vec(d, &mut rng);
        let bias = rand_vec(d, &mut rng);
        let eps = 1e-6;
        let out = Tensor::constant(vec![t, d], x.clone()).layer_norm(
            &Tensor::constant(vec![d], gain.clone()),
            &Tensor::constant(vec![d], bias.clone()),
            eps,
        );
        for r in 0..t {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            for j in 0..d {
                let want = gain[j] * (row[j] - mean) / (var + eps).sqrt() + bias[j];
                assert!((out.data()[r * d + j] - want).abs() < 1e-12, "row {r} col {j}");
            }
        }
    }

    #[test]
    fn split_merge_heads_roundtrip_and_layout() {
        let (t, h, dk) = (3, 2, 2);
        let x: Vec<f64> = (0..t * h * dk).map(|v| v as f64).collect();
        let tens = Tensor::constant(vec![t, h * dk], x.clone());
        let split = tens.split_heads(h);
        assert_eq!(split.shape(), [h, t, dk]);
        // head 1, position 0 holds columns [dk..2dk) of row 0
        assert_eq!(&split.data()[(t * dk)..(t * dk + dk)], &x[dk..2 * dk]);
        let merged = split.merge_heads();
        assert_eq!(merged.shape(), [t, h * dk]);
        assert_close(&merged.data(), &x, 0.0, "roundtrip");
    }

    #[test]
    fn gather_rows_and_pick_select_expected_entries() {
        let table = Tensor::constant(vec![4, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0, 30.0, 31.0]);
        let got = table.gather_rows(&[3, 0, 3]);
        assert_close(&got.data(), &[30.0, 31.0, 0.0, 1.0, 30.0, 31.0], 0.0, "gather");

        let m = Tensor::constant(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let picked = m.pick(&[2, 0]);
        assert_close(&picked.data(), &[3.0, 4.0], 0.0, "pick");
    }

    #[test]
    fn dropout_eval_mode_is_identity_and_train_mode_masks() {
        let mut rng = Rng::from_seed(21);
        let x = Tensor::constant(vec![100], rand_vec(100, &mut rng));
        let same = x.dropout(0.0, &mut rng);
        assert_close(&same.data(), &x.data(), 0.0, "p=0 identity");

        let p = 0.4;
        let dropped = x.dropout(p, &mut rng);
        let scale = 1.0 / (1.0 - p);
        let mut zeros = 0;
        for (o, i) in dropped.data().iter().zip(x.data().iter()) {
            if *o == 0.0 {
                zeros += 1;
            } else {
                assert!((o - i * scale).abs() < 1e-12, "survivor must be scaled");
            }
        }
        assert!(zeros > 20 && zeros < 60, "zeroed {zeros}/100 at p=0.4");
    }

    #[test]
    fn xavier_bounds_and_determinism() {
        let (rows, cols) = (30, 50);
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let a = Tensor::xavier_param(rows, cols, &mut Rng::from_seed(5));
        let b = Tensor::xavier_param(rows, cols, &mut Rng::from_seed(5));
        assert_close(&a.data(), &b.data(), 0.0, "same seed");
        assert!(a.data().iter().all(|v| v.abs() <= bound));
        let spread = a.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - a.data().iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread > bound, "values should spread across the interval");
    }

    #[test]
    fn backward_accumulates_over_shared_use() {
        // loss = sum(w*x) + sum(w*x) uses w twice: grad must be 2x.
        let w = Tensor::param(vec![2], vec![3.0, -1.0]);
        let x = Tensor::constant(vec![2], vec![2.0, 5.0]);
        let once = w.mul(&x);
        let loss = once.sum_all().add(&once.sum_all());
        loss.backward();
        assert_close(&w.grad_clone().unwrap(), &[4.0, 10.0], 1e-12, "shared-use grad");
    }

    #[test]
    fn backward_accumulates_across_calls_until_zero_grad() {
        let w = Tensor::param(vec![1], vec![2.0]);
        for _ in 0..3 {
            w.mul(&w).sum_all().backward(); // d(w^2)/dw = 2w = 4
        }
        assert_close(&w.grad_clone().unwrap(), &[12.0], 1e-12, "3 backward calls");
        w.zero_grad();
        assert!(w.grad_clone().is_none());
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let w = Tensor::param(vec![2], vec![1.0, 2.0]);
        let out = {
            let _g = no_grad();
            w.scale(3.0)
        };
        assert!(!out.requires_grad());
        // Mode restored after guard drop:
        assert!(w.scale(3.0).requires_grad());
    }

    // ── finite-difference checks, one per differentiable op ──

    #[test]
    fn grad_matmul_chain() {
        let mut rng = Rng::from_seed(31);
        let a = Tensor::param(vec![3, 4], rand_vec(12, &mut rng));
        let b = Tensor::param(vec![4, 2], rand_vec(8, &mut rng));
        let w = Tensor::constant(vec![3, 2], rand_vec(6, &mut rng));
        check_grads(&[&a, &b], || a.matmul(&b).mul(&w).sum_all(), 1e-6, "matmul");
    }

    #[test]
    fn grad_matmul_nt() {
        let mut rng = Rng::from_seed(32);
        let a = Tensor::param(vec![3, 5], rand_vec(15, &mut rng));
        let b = Tensor::param(vec![4, 5], rand_vec(20, &mut rng));
        let w = Tensor::constant(vec![3, 4], rand_vec(12, &mut rng));
        check_grads(&[&a, &b], || a.matmul_nt(&b).mul(&w).sum_all(), 1e-6, "matmul_nt");
    }

    #[test]
    fn grad_bmm_both_variants() {
        let mut rng = Rng::from_seed(33);
        let a = Tensor::param(vec![2, 3, 4], rand_vec(24, &mut rng));
        let b = Tensor::param(vec![2, 4, 2], rand_vec(16, &mut rng));
        let w = Tensor::constant(vec![2, 3, 2], rand_vec(12, &mut rng));
        check_grads(&[&a, &b], || a.bmm(&b).mul(&w).sum_all(), 1e-6, "bmm");

        let c = Tensor::param(vec![2, 5, 4], rand_vec(40, &mut rng));
        let w2 = Tensor::constant(vec![2, 3, 5], rand_vec(30, &mut rng));
        check_grads(&[&a, &c], || a.bmm_nt(&c).mul(&w2).sum_all(), 1e-6, "bmm_nt");
    }

    #[test]
    fn grad_elementwise_and_bias() {
        let mut rng = Rng::from_seed(34);
        let a = Tensor::param(vec![3, 4], rand_vec(12, &mut rng));
        let b = Tensor::param(vec![3, 4], rand_vec(12, &mut rng));
        let bias = Tensor::param(vec![4], rand_vec(4, &mut rng));
        let w = Tensor::constant(vec![3, 4], rand_vec(12, &mut rng));
        check_grads(
            &[&a, &b, &bias],
            || a.mul(&b).add(&a).sub(&b).add_bias(&bias).scale(1.3).mul(&w).sum_all(),
            1e-6,
            "elementwise",
        );
    }

    #[test]
    fn grad_activations() {
        let mut rng = Rng::from_seed(35);
        for kind in [Activation::Relu, Activation::Sigmoid, Activation::Tanh, Activation::Identity] {
            // Offset away from 0 so relu's kink does not sit on a sample point.
            let vals: Vec<f64> =
                rand_vec(12, &mut rng).iter().map(|v| v + 0.3 * v.signum()).collect();
            let a = Tensor::param(vec![3, 4], vals);
            let w = Tensor::constant(vec![3, 4], rand_vec(12, &mut rng));
            check_grads(&[&a], || a.activation(kind).mul(&w).sum_all(), 1e-6, "activation");
        }
    }

    #[test]
    fn grad_softmax_and_log_softmax() {
        let mut rng = Rng::from_seed(36);
        let a = Tensor::param(vec![3, 5], rand_vec(15, &mut rng));
        let w = Tensor::constant(vec![3, 5], rand_vec(15, &mut rng));
        check_grads(&[&a], || a.softmax_rows().mul(&w).sum_all(), 1e-6, "softmax");
        check_grads(&[&a], || a.log_softmax_rows().mul(&w).sum_all(), 1e-6, "log_softmax");
    }

    #[test]
    fn grad_softmax_with_partial_mask() {
        let mut rng = Rng::from_seed(37);
        let vals = rand_vec(8, &mut rng);
        let a = Tensor::param(vec![2, 4], vals);
        let mask = Tensor::constant(vec![2, 4], vec![0.0, 0.0, MASK_VALUE, 0.0, 0.0, MASK_VALUE, 0.0, 0.0]);
        let w = Tensor::constant(vec![2, 4], rand_vec(8, &mut rng));
        check_grads(&[&a], || a.add(&mask).softmax_rows().mul(&w).sum_all(), 1e-6, "masked softmax");
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = Rng::from_seed(38);
        let a = Tensor::param(vec![3, 6], rand_vec(18, &mut rng));
        let gain = Tensor::param(vec![6], rand_vec(6, &mut rng));
        let bias = Tensor::param(vec![6], rand_vec(6, &mut rng));
        let w = Tensor::constant(vec![3, 6], rand_vec(18, &mut rng));
        check_grads(
            &[&a, &gain, &bias],
            || a.layer_norm(&gain, &bias, 1e-6).mul(&w).sum_all(),
            1e-5,
            "layer_norm",
        );
    }

    #[test]
    fn grad_gather_pick_rowsums_reshape_stack_repeat() {
        let mut rng = Rng::from_seed(39);
        let table = Tensor::param(vec![5, 3], rand_vec(15, &mut rng));
        let w = Tensor::constant(vec![4, 3], rand_vec(12, &mut rng));
        check_grads(
            &[&table],
            || table.gather_rows(&[1, 1, 4, 0]).mul(&w).sum_all(),
            1e-6,
            "gather_rows (repeated id)",
        );

        let m = Tensor::param(vec![4, 5], rand_vec(20, &mut rng));
        let wv = Tensor::constant(vec![4], rand_vec(4, &mut rng));
        check_grads(&[&m], || m.pick(&[0, 2, 4, 1]).mul(&wv).sum_all(), 1e-6, "pick");
        check_grads(&[&m], || m.row_sums().mul(&wv).sum_all(), 1e-6, "row_sums");
        check_grads(&[&m], || m.reshape(vec![2, 10]).sum_all(), 1e-6, "reshape");

        let p1 = Tensor::param(vec![2, 3], rand_vec(6, &mut rng));
        let p2 = Tensor::param(vec![2, 3], rand_vec(6, &mut rng));
        let ws = Tensor::constant(vec![2, 2, 3], rand_vec(12, &mut rng));
        check_grads(
            &[&p1, &p2],
            || Tensor::stack(&[p1.clone(), p2.clone()]).mul(&ws).sum_all(),
            1e-6,
            "stack",
        );
        let wr = Tensor::constant(vec![3, 2, 3], rand_vec(18, &mut rng));
        check_grads(&[&p1], || p1.repeat_leading(3).mul(&wr).sum_all(), 1e-6, "repeat_leading");
    }

    #[test]
    fn grad_split_merge_heads() {
        let mut rng = Rng::from_seed(40);
        let x = Tensor::param(vec![4, 6], rand_vec(24, &mut rng));
        let w = Tensor::constant(vec![3, 4, 2], rand_vec(24, &mut rng));
        check_grads(&[&x], || x.split_heads(3).mul(&w).sum_all(), 1e-6, "split_heads");
        let y = Tensor::param(vec![3, 4, 2], rand_vec(24, &mut rng));
        let w2 = Tensor::constant(vec![4, 6], rand_vec(24, &mut rng));
        check_grads(&[&y], || y.merge_heads().mul(&w2).sum_all(), 1e-6, "merge_heads");
    }

    #[test]
    fn grad_dropout_uses_frozen_mask() {
        // With a fixed seed per rebuild, dropout draws the same mask, so the
        // finite-difference oracle sees a deterministic function.
        let mut rng = Rng::from_seed(41);
        let x = Tensor::param(vec![6, 6], rand_vec(36, &mut rng));
        let w = Tensor::constant(vec![6, 6], rand_vec(36, &mut rng));
        check_grads(
            &[&x],
            || x.dropout(0.3, &mut Rng::from_seed(77)).mul(&w).sum_all(),
            1e-6,
            "dropout",
        );
    }

    #[test]
    fn grad_transpose_2d() {
        let mut rng = Rng::from_seed(42);
        let x = Tensor::param(vec![3, 5], rand_vec(15, &mut rng));
        let w = Tensor::constant(vec![5, 3], rand_vec(15, &mut rng));
        check_grads(&[&x], || x.transpose_2d().mul(&w).sum_all(), 1e-6, "transpose_2d");
    }

    #[test]
    fn grad_many_seeds_composite_graph() {
        // Property-style sweep: a composite graph mixing most ops must pass
        // the finite-difference oracle for every seed.
        for seed in 0..100 {
            let mut rng = Rng::from_seed(seed);
            let a = Tensor::param(vec![3, 4], rand_vec(12, &mut rng));
            let b = Tensor::param(vec![4, 4], rand_vec(16, &mut rng));
            let gain = Tensor::param(vec![4], rand_vec(4, &mut rng));
            let bias = Tensor::zeros_param(vec![4]);
            let w = Tensor::constant(vec![3, 4], rand_vec(12, &mut rng));
            check_grads(
                &[&a, &b, &gain, &bias],
                || {
                    let h = a.matmul(&b).layer_norm(&gain, &bias, 1e-6).relu();
                    let s = h.transpose_2d().transpose_2d().softmax_rows();
                    h.mul(&s).mul(&w).sum_all()
                },
                1e-5,
                &format!("composite seed {seed}"),
            );
        }
    }
}
