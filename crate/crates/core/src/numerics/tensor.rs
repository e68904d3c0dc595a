use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::Scalar;
use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on the current thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Maps the upstream gradient to one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

pub(crate) struct GradFn<T: Scalar> {
    pub(crate) parents: Vec<Tensor<T>>,
    pub(crate) backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

/// Dense row-major array participating in reverse-mode differentiation.
///
/// Cloning is cheap (shared storage). Data is immutable once built; only the
/// gradient accumulator of a leaf changes, and only through [`Tensor::backward`]
/// or [`Tensor::zero_grad`].
pub struct Tensor<T: Scalar = f32>(Arc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data().iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("data", &preview)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            grad_fn,
        }))
    }

    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::of(v)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![v; n], false, None)
    }

    pub fn scalar(v: T) -> Self {
        Self::build(vec![], vec![v], false, None)
    }

    /// Leaf that accumulates gradients.
    pub fn leaf(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self::build(shape.to_vec(), data, true, None))
    }

    /// Same values, fresh leaf with `requires_grad = true`.
    pub fn to_leaf(&self) -> Self {
        Self::build(self.shape().to_vec(), self.data().to_vec(), true, None)
    }

    /// Same values, no history and no gradient tracking.
    pub fn detach(&self) -> Self {
        Self::build(self.shape().to_vec(), self.data().to_vec(), false, None)
    }

    /// Result of an op: records `grad_fn` only when a parent needs gradients
    /// and recording is enabled on this thread.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            Self::build(
                shape,
                data,
                true,
                Some(GradFn {
                    parents,
                    backward: Box::new(backward),
                }),
            )
        } else {
            Self::build(shape, data, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec_f64(&self) -> Vec<f64> {
        self.data().iter().map(|v| v.f64()).collect()
    }

    pub fn item(&self) -> T {
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Accumulated gradient of a leaf, if any has been propagated.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    fn accumulate(&self, g: &[T]) {
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar. Gradients ADD to whatever the leaves
    /// already hold; call [`Tensor::zero_grad`] between independent steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Topological order by iterative post-order DFS.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if visited.insert(t.id(), ()).is_some() {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !visited.contains_key(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.0.grad_fn {
                None => t.accumulate(&g),
                Some(gf) => {
                    let parent_grads = (gf.backward)(&g);
                    debug_assert_eq!(parent_grads.len(), gf.parents.len());
                    for (p, pg) in gf.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
