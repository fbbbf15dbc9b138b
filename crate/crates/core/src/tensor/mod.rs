//! Dense row-major float tensors with a small recorded-tape autodiff kernel set.
//!
//! Values are stored as `f64` so that finite-difference gradient checks are
//! meaningful; the on-disk container (see [`container`]) stores `f32`.
//! Every operation the rest of the pipeline differentiates through lives in
//! [`ops`]; higher-level modules only compose these kernels.

pub mod alloc;
pub mod container;
pub mod ops;

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use indexmap::IndexMap;

use crate::error::{Error, Result};

pub(crate) struct BackCtx<'a> {
    pub out_data: &'a [f64],
    pub out_grad: &'a [f64],
    pub parents: &'a [Tensor],
}

type BackFn = Box<dyn Fn(&BackCtx) -> Vec<Vec<f64>>>;

pub(crate) struct Inner {
    dims: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    parents: Vec<Tensor>,
    backward: Option<BackFn>,
}

impl Drop for Inner {
    fn drop(&mut self) {
        alloc::record_free(self.data.len() * std::mem::size_of::<f64>());
    }
}

/// Dense n-dimensional tensor, row-major, cheap to clone (shared handle).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

/// Row-major linear index: ((i0*d1 + i1)*d2 + ...).
pub fn linear_index(dims: &[usize], idx: &[usize]) -> usize {
    debug_assert_eq!(dims.len(), idx.len());
    let mut lin = 0;
    for (d, i) in dims.iter().zip(idx) {
        debug_assert!(i < d);
        lin = lin * d + i;
    }
    lin
}

impl Tensor {
    fn from_parts(
        dims: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackFn>,
    ) -> Tensor {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "dims/data length mismatch"
        );
        alloc::record_alloc(data.len() * std::mem::size_of::<f64>());
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                dims,
                data,
                requires_grad,
                grad: None,
                parents,
                backward,
            })),
        }
    }

    /// Constant leaf tensor.
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "dims {:?} require {} values, got {}",
                dims,
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor::from_parts(dims.to_vec(), data, false, vec![], None))
    }

    /// Trainable leaf tensor (gradient slot is filled by `backward`).
    pub fn param(dims: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(dims, data)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn zeros(dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor::from_parts(dims.to_vec(), vec![0.0; n], false, vec![], None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_parts(vec![], vec![v], false, vec![], None)
    }

    pub(crate) fn computed(dims: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, back: BackFn) -> Tensor {
        Tensor::from_parts(dims, data, false, parents, Some(back))
    }

    pub fn dims(&self) -> Vec<usize> {
        self.inner.borrow().dims.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Borrow the raw row-major values.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn value(&self) -> f64 {
        let i = self.inner.borrow();
        assert_eq!(i.data.len(), 1, "value() on non-scalar tensor");
        i.data[0]
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        let i = self.inner.borrow();
        i.data[linear_index(&i.dims, idx)]
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// In-place overwrite of the stored values (shape must be unchanged).
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let mut i = self.inner.borrow_mut();
        if data.len() != i.data.len() {
            return Err(Error::Shape("set_data length mismatch".into()));
        }
        i.data = data;
        Ok(())
    }

    /// Detached copy: same values, no recorded history.
    pub fn detach(&self) -> Tensor {
        let i = self.inner.borrow();
        Tensor::from_parts(i.dims.clone(), i.data.clone(), false, vec![], None)
    }

    fn ptr(&self) -> *const Inner {
        self.inner.as_ptr()
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Inner> = HashSet::new();
        // iterative post-order DFS
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.ptr()) {
                continue;
            }
            let parents = t.inner.borrow().parents.clone();
            stack.push((t, true));
            for p in parents {
                if !seen.contains(&p.ptr()) {
                    stack.push((p, false));
                }
            }
        }
        order
    }

    /// Reverse-mode gradient accumulation from a recorded scalar.
    ///
    /// Leaf tensors with `requires_grad` accumulate across calls; call
    /// [`Tensor::zero_grad`] (or [`ParamStore::zero_grads`]) between steps.
    pub fn backward(&self) -> Result<()> {
        {
            let i = self.inner.borrow();
            if i.data.len() != 1 {
                return Err(Error::Shape("backward requires a scalar loss".into()));
            }
            if i.backward.is_none() {
                return Err(Error::Graph);
            }
        }
        let order = self.topo_order();
        // intermediate grads are scratch for this pass; leaves keep accumulating
        for t in &order {
            let mut i = t.inner.borrow_mut();
            if i.backward.is_some() {
                i.grad = Some(vec![0.0; i.data.len()]);
            }
        }
        self.inner.borrow_mut().grad.as_mut().unwrap()[0] = 1.0;
        for t in order.iter().rev() {
            let (grads, parents) = {
                let i = t.inner.borrow();
                let Some(f) = &i.backward else { continue };
                let g = match &i.grad {
                    Some(g) => g.clone(),
                    None => continue,
                };
                let ctx = BackCtx {
                    out_data: &i.data,
                    out_grad: &g,
                    parents: &i.parents,
                };
                (f(&ctx), i.parents.clone())
            };
            debug_assert_eq!(grads.len(), parents.len());
            for (p, g) in parents.iter().zip(grads) {
                let mut pi = p.inner.borrow_mut();
                if pi.backward.is_none() && !pi.requires_grad {
                    continue; // plain constant, no grad wanted
                }
                let n = pi.data.len();
                let slot = pi.grad.get_or_insert_with(|| vec![0.0; n]);
                debug_assert_eq!(slot.len(), g.len());
                for (s, v) in slot.iter_mut().zip(&g) {
                    *s += v;
                }
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let i = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("dims", &i.dims)
            .field("requires_grad", &i.requires_grad)
            .finish()
    }
}

/// Ordered set of named tensors; insertion order is iteration order.
#[derive(Default)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Param(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Param(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Entries marked trainable (frozen trunk weights are skipped).
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|(_, t)| t.requires_grad())
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.iter() {
            t.zero_grad();
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
