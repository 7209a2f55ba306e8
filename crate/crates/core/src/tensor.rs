//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! The graph is dynamic: every op that produces a gradient-requiring output
//! records its parents and a backward closure. `backward` walks the graph in
//! reverse topological order and accumulates gradients additively, so calling
//! it twice doubles the gradients of every leaf.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled (inference / finite differences).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward rule of one recorded op: given the output gradient, return one
/// optional gradient buffer per parent (None for parents that do not need one).
type BackwardFn = Box<dyn Fn(&[f32]) -> Vec<Option<Vec<f32>>>>;

struct BackwardOp {
    parents: Vec<Tensor>,
    apply: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
    op: Option<BackwardOp>,
}

/// Shared handle to a tensor; `clone` is shallow.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

/// Initialization modes for `Tensor::create`.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f32),
    Uniform { seed: u64, lo: f32, hi: f32 },
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, op: Option<BackwardOp>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: None,
                op,
            })),
        }
    }

    pub fn create(shape: &[usize], init: Init) -> Result<Tensor> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("invalid tensor shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(v) => vec![v; n],
            Init::Uniform { seed, lo, hi } => {
                if lo >= hi {
                    return Err(Error::Contract(format!("uniform init requires lo < hi, got [{lo}, {hi})")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n).map(|_| rng.gen_range(lo..hi)).collect()
            }
        };
        Ok(Tensor::from_parts(shape.to_vec(), data, false, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::create(shape, Init::Zeros).expect("valid shape")
    }

    pub fn full(shape: &[usize], v: f32) -> Tensor {
        Tensor::create(shape, Init::Const(v)).expect("valid shape")
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::from_parts(vec![1], vec![v], false, None)
    }

    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} does not match data length {}",
                data.len()
            )));
        }
        Ok(Tensor::from_parts(shape.to_vec(), data, false, None))
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.borrow_mut().requires_grad = flag;
    }

    pub fn with_requires_grad(self) -> Tensor {
        self.set_requires_grad(true);
        self
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn data(&self) -> Ref<'_, [f32]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.borrow().data.clone()
    }

    /// Overwrites the raw buffer of a leaf (used by finite differences and
    /// the optimizer). The autodiff graph link, if any, is left untouched.
    pub fn set_data(&self, data: &[f32]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len());
        inner.data.copy_from_slice(data);
    }

    pub fn set_value_at(&self, idx: usize, v: f32) {
        self.inner.borrow_mut().data[idx] = v;
    }

    pub fn value_at(&self, idx: usize) -> f32 {
        self.inner.borrow().data[idx]
    }

    /// Scalar extraction; panics if the tensor has more than one element.
    pub fn item(&self) -> f32 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// New leaf with copied data and no graph history.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::from_parts(inner.shape.clone(), inner.data.clone(), false, None)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        let this = self.clone();
        Ok(make_result(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            move |gy| vec![if this.requires_grad() { Some(gy.to_vec()) } else { None }],
        ))
    }

    fn accumulate_persistent_grad(&self, g: &[f32]) {
        let mut inner = self.inner.borrow_mut();
        match inner.grad {
            Some(ref mut buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => inner.grad = Some(g.to_vec()),
        }
    }

    /// Reverse-mode gradient accumulation starting from a scalar loss.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        // Topological order via iterative DFS over parents.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<u64, bool> = HashMap::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        while let Some((node, child_idx)) = stack.pop() {
            let id = node.id();
            if child_idx == 0 {
                match visited.get(&id) {
                    Some(_) => continue,
                    None => {
                        visited.insert(id, false);
                    }
                }
            }
            let nparents = node.inner.borrow().op.as_ref().map_or(0, |o| o.parents.len());
            if child_idx < nparents {
                let parent = node.inner.borrow().op.as_ref().unwrap().parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if !visited.contains_key(&parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                visited.insert(id, true);
                order.push(node);
            }
        }

        // Per-call gradient buffers; persistent grads only receive the new pass.
        let mut local: HashMap<u64, Vec<f32>> = HashMap::new();
        local.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let gy = match local.remove(&node.id()) {
                Some(g) => g,
                None => continue,
            };
            if node.requires_grad() {
                node.accumulate_persistent_grad(&gy);
            }
            let inner = node.inner.borrow();
            if let Some(op) = inner.op.as_ref() {
                let parent_grads = (op.apply)(&gy);
                for (parent, pg) in op.parents.iter().zip(parent_grads) {
                    if let Some(pg) = pg {
                        if parent.requires_grad() || parent.inner.borrow().op.is_some() {
                            match local.entry(parent.id()) {
                                std::collections::hash_map::Entry::Occupied(mut e) => {
                                    for (a, b) in e.get_mut().iter_mut().zip(&pg) {
                                        *a += b;
                                    }
                                }
                                std::collections::hash_map::Entry::Vacant(e) => {
                                    e.insert(pg);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Builds an op result, recording the graph link only when some parent needs
/// gradients and recording is enabled.
pub(crate) fn make_result(
    shape: Vec<usize>,
    data: Vec<f32>,
    parents: Vec<Tensor>,
    backward: impl Fn(&[f32]) -> Vec<Option<Vec<f32>>> + 'static,
) -> Tensor {
    let track = grad_enabled() && parents.iter().any(|p| p.requires_grad() || p.inner.borrow().op.is_some());
    if track {
        Tensor::from_parts(
            shape,
            data,
            true,
            Some(BackwardOp {
                parents,
                apply: Box::new(backward),
            }),
        )
    } else {
        Tensor::from_parts(shape, data, false, None)
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

fn binary_shapes(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() && a.numel() != 1 && b.numel() != 1 {
        return Err(Error::Shape(format!(
            "{op}: shape mismatch {:?} vs {:?} (no scalar broadcast applies)",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Elementwise binary op with scalar broadcast on either side.
fn binary(
    a: &Tensor,
    b: &Tensor,
    name: &str,
    fwd: impl Fn(f32, f32) -> f32,
    // gradients of output element w.r.t. the two input elements
    dfd: impl Fn(f32, f32) -> (f32, f32) + 'static,
) -> Result<Tensor> {
    binary_shapes(a, b, name)?;
    let (ad, bd) = (a.data(), b.data());
    let n = ad.len().max(bd.len());
    let shape = if ad.len() >= bd.len() { a.shape() } else { b.shape() };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x = ad[if ad.len() == 1 { 0 } else { i }];
        let y = bd[if bd.len() == 1 { 0 } else { i }];
        out.push(fwd(x, y));
    }
    drop(ad);
    drop(bd);
    let (ac, bc) = (a.clone(), b.clone());
    Ok(make_result(shape, out, vec![a.clone(), b.clone()], move |gy| {
        let ad = ac.data();
        let bd = bc.data();
        let n = gy.len();
        let mut ga = vec![0.0f32; ad.len()];
        let mut gb = vec![0.0f32; bd.len()];
        for i in 0..n {
            let x = ad[if ad.len() == 1 { 0 } else { i }];
            let y = bd[if bd.len() == 1 { 0 } else { i }];
            let (dx, dy) = dfd(x, y);
            ga[if ad.len() == 1 { 0 } else { i }] += gy[i] * dx;
            gb[if bd.len() == 1 { 0 } else { i }] += gy[i] * dy;
        }
        vec![
            if ac.requires_grad() { Some(ga) } else { None },
            if bc.requires_grad() { Some(gb) } else { None },
        ]
    }))
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, "add", |x, y| x + y, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, "sub", |x, y| x - y, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, "mul", |x, y| x * y, |x, y| (y, x))
    }

    pub fn add_scalar(&self, v: f32) -> Tensor {
        self.add(&Tensor::scalar(v)).expect("scalar broadcast")
    }

    pub fn scale(&self, v: f32) -> Tensor {
        self.mul(&Tensor::scalar(v)).expect("scalar broadcast")
    }

    pub fn relu(&self) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|&x| x.max(0.0)).collect();
        let this = self.clone();
        make_result(self.shape(), data, vec![self.clone()], move |gy| {
            let xd = this.data();
            let g = gy
                .iter()
                .zip(xd.iter())
                .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                .collect();
            vec![Some(g)]
        })
    }

    pub fn exp(&self) -> Tensor {
        let out: Vec<f32> = self.data().iter().map(|&x| x.exp()).collect();
        let saved = out.clone();
        make_result(self.shape(), out, vec![self.clone()], move |gy| {
            vec![Some(gy.iter().zip(&saved).map(|(&g, &e)| g * e).collect())]
        })
    }

    pub fn log(&self) -> Result<Tensor> {
        if self.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain("log of non-positive value".into()));
        }
        let out: Vec<f32> = self.data().iter().map(|&x| x.ln()).collect();
        let this = self.clone();
        Ok(make_result(self.shape(), out, vec![self.clone()], move |gy| {
            let xd = this.data();
            vec![Some(gy.iter().zip(xd.iter()).map(|(&g, &x)| g / x).collect())]
        }))
    }

    /// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
    pub fn clip(&self, lo: f32, hi: f32) -> Result<Tensor> {
        if lo >= hi {
            return Err(Error::Contract(format!("clip requires lo < hi, got [{lo}, {hi}]")));
        }
        let out: Vec<f32> = self.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let this = self.clone();
        Ok(make_result(self.shape(), out, vec![self.clone()], move |gy| {
            let xd = this.data();
            vec![Some(
                gy.iter()
                    .zip(xd.iter())
                    .map(|(&g, &x)| if x > lo && x < hi { g } else { 0.0 })
                    .collect(),
            )]
        }))
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

impl Tensor {
    pub fn sum_all(&self) -> Tensor {
        self.reduce(ReduceKind::Sum, None).expect("full reduce")
    }

    pub fn mean_all(&self) -> Tensor {
        self.reduce(ReduceKind::Mean, None).expect("full reduce")
    }

    pub fn max_all(&self) -> Tensor {
        self.reduce(ReduceKind::Max, None).expect("full reduce")
    }

    /// Reduce over the given axes (or all axes when `axes` is None).
    /// Mean backpropagates 1/n per element; max routes the gradient to the
    /// first maximal element of each group (lowest linear index).
    pub fn reduce(&self, kind: ReduceKind, axes: Option<&[usize]>) -> Result<Tensor> {
        let shape = self.shape();
        let rank = shape.len();
        let axes: Vec<usize> = match axes {
            None => (0..rank).collect(),
            Some(a) => {
                for &ax in a {
                    if ax >= rank {
                        return Err(Error::Shape(format!("axis {ax} out of range for rank {rank}")));
                    }
                }
                let mut v = a.to_vec();
                v.sort_unstable();
                v.dedup();
                v
            }
        };
        let reduced: Vec<bool> = (0..rank).map(|i| axes.contains(&i)).collect();
        let out_shape: Vec<usize> = if axes.len() == rank {
            vec![1]
        } else {
            shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !reduced[*i])
                .map(|(_, &e)| e)
                .collect()
        };
        let group: usize = axes.iter().map(|&a| shape[a]).product();
        let out_n: usize = out_shape.iter().product();
        let full = axes.len() == rank;

        // input linear index -> output linear index (empty when fully reduced)
        let index_map: Vec<u32> = if full {
            Vec::new()
        } else {
            let mut in_strides = vec![1usize; rank];
            for i in (0..rank - 1).rev() {
                in_strides[i] = in_strides[i + 1] * shape[i + 1];
            }
            let kept: Vec<usize> = (0..rank).filter(|i| !reduced[*i]).collect();
            let mut out_strides = vec![0usize; rank];
            let mut s = 1usize;
            for &k in kept.iter().rev() {
                out_strides[k] = s;
                s *= shape[k];
            }
            (0..self.numel())
                .map(|lin| {
                    let mut rem = lin;
                    let mut o = 0usize;
                    for i in 0..rank {
                        let c = rem / in_strides[i];
                        rem %= in_strides[i];
                        o += c * out_strides[i];
                    }
                    o as u32
                })
                .collect()
        };
        let out_index = move |lin: usize| -> usize {
            if full {
                0
            } else {
                index_map[lin] as usize
            }
        };

        let xd = self.data();
        let mut out = vec![
            match kind {
                ReduceKind::Max => f32::NEG_INFINITY,
                _ => 0.0,
            };
            out_n
        ];
        let mut argmax = if kind == ReduceKind::Max { vec![usize::MAX; out_n] } else { Vec::new() };
        for (lin, &v) in xd.iter().enumerate() {
            let o = out_index(lin);
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => out[o] += v,
                ReduceKind::Max => {
                    if v > out[o] {
                        out[o] = v;
                        argmax[o] = lin;
                    }
                }
            }
        }
        if kind == ReduceKind::Mean {
            let inv = 1.0 / group as f32;
            for v in &mut out {
                *v *= inv;
            }
        }
        drop(xd);

        let n_in = self.numel();
        let this = self.clone();
        Ok(make_result(out_shape, out, vec![self.clone()], move |gy| {
            if !this.requires_grad() && this.inner.borrow().op.is_none() {
                return vec![None];
            }
            let mut gx = vec![0.0f32; n_in];
            match kind {
                ReduceKind::Sum => {
                    for (lin, g) in gx.iter_mut().enumerate() {
                        *g = gy[out_index(lin)];
                    }
                }
                ReduceKind::Mean => {
                    let inv = 1.0 / group as f32;
                    for (lin, g) in gx.iter_mut().enumerate() {
                        *g = gy[out_index(lin)] * inv;
                    }
                }
                ReduceKind::Max => {
                    for (o, &am) in argmax.iter().enumerate() {
                        if am != usize::MAX {
                            gx[am] += gy[o];
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

// ---------------------------------------------------------------------------
// Index helpers
// ---------------------------------------------------------------------------

/// Row-major linear index of a multi-index.
pub fn linear_index(shape: &[usize], idx: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), idx.len());
    let mut lin = 0usize;
    for (e, i) in shape.iter().zip(idx) {
        debug_assert!(i < e);
        lin = lin * e + i;
    }
    lin
}

/// Inverse of `linear_index`.
pub fn multi_index(shape: &[usize], mut lin: usize) -> Vec<usize> {
    let mut idx = vec![0usize; shape.len()];
    for i in (0..shape.len()).rev() {
        idx[i] = lin % shape[i];
        lin /= shape[i];
    }
    idx
}
