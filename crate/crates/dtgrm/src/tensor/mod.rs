//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every operation records its parents and a backward closure on the
//! result node. `backward` on a scalar loss walks the recorded graph once
//! in reverse topological order and adds exact gradients into every
//! reachable tensor that requires them. Gradients accumulate across calls
//! until `zero_grad`.

mod ops;

pub use ops::{compose_scalars, stack_cols};

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Propagates an output gradient into the parents' scratch slots.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &mut GradStore<T>)>;

pub(crate) struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Cheap clonable handle onto a graph node.
pub struct Tensor<T: Scalar> {
    node: Rc<RefCell<Node<T>>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.node.borrow();
        f.debug_struct("Tensor")
            .field("id", &n.id)
            .field("shape", &n.shape)
            .field("requires_grad", &n.requires_grad)
            .finish()
    }
}

fn check_numel(shape: &[usize], len: usize) {
    let numel: usize = shape.iter().product();
    assert_eq!(
        numel, len,
        "shape {shape:?} wants {numel} elements, got {len}"
    );
}

impl<T: Scalar> Tensor<T> {
    /// Leaf tensor. `requires_grad` marks it as a differentiation target.
    pub fn leaf(shape: Vec<usize>, values: Vec<T>, requires_grad: bool) -> Self {
        check_numel(&shape, values.len());
        Tensor {
            node: Rc::new(RefCell::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                values,
                grad: None,
                requires_grad,
                parents: Vec::new(),
                backward: None,
            })),
        }
    }

    pub fn from_vec(shape: Vec<usize>, values: Vec<T>) -> Self {
        Tensor::leaf(shape, values, false)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::leaf(shape, vec![T::zero(); numel], false)
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let numel = shape.iter().product();
        Tensor::leaf(shape, vec![v; numel], false)
    }

    pub fn scalar(v: T) -> Self {
        Tensor::leaf(vec![], vec![v], false)
    }

    /// Result node of an operation. Parents and the backward closure are
    /// dropped when no parent participates in differentiation, so pure
    /// data paths record no graph.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        values: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        check_numel(&shape, values.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward) = if requires_grad {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Tensor {
            node: Rc::new(RefCell::new(Node {
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

    pub fn id(&self) -> u64 {
        self.node.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.node.borrow().values.len()
    }

    pub fn ndim(&self) -> usize {
        self.node.borrow().shape.len()
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self, what: &str) -> (usize, usize) {
        let n = self.node.borrow();
        assert_eq!(n.shape.len(), 2, "{what}: expected 2-d, got {:?}", n.shape);
        (n.shape[0], n.shape[1])
    }

    pub fn requires_grad(&self) -> bool {
        self.node.borrow().requires_grad
    }

    /// Borrow of the raw values. Do not hold across operations that
    /// mutate this tensor.
    pub fn values(&self) -> Ref<'_, [T]> {
        Ref::map(self.node.borrow(), |n| n.values.as_slice())
    }

    pub fn values_vec(&self) -> Vec<T> {
        self.node.borrow().values.clone()
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> T {
        let n = self.node.borrow();
        assert_eq!(n.values.len(), 1, "item() on shape {:?}", n.shape);
        n.values[0]
    }

    pub fn value_at(&self, flat: usize) -> T {
        self.node.borrow().values[flat]
    }

    /// Overwrite values in place. Only meaningful for leaves; the graph
    /// never mutates interior nodes.
    pub fn set_values(&self, values: &[T]) {
        let mut n = self.node.borrow_mut();
        assert_eq!(n.values.len(), values.len(), "set_values length mismatch");
        n.values.copy_from_slice(values);
    }

    pub fn set_value_at(&self, flat: usize, v: T) {
        self.node.borrow_mut().values[flat] = v;
    }

    /// Accumulated gradient, if any backward pass reached this tensor.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.node.borrow_mut().grad = None;
    }

    /// Mutable access to values and current gradient together, for
    /// optimizer updates.
    pub fn with_values_and_grad<R>(&self, f: impl FnOnce(&mut [T], Option<&[T]>) -> R) -> R {
        let mut n = self.node.borrow_mut();
        let Node { values, grad, .. } = &mut *n;
        f(values.as_mut_slice(), grad.as_deref())
    }

    pub fn all_finite(&self) -> bool {
        self.node.borrow().values.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode differentiation from a scalar.
    ///
    /// Gradients of every reachable `requires_grad` tensor are increased
    /// by this call's contribution; callers zero grads between steps.
    /// The recorded graph is acyclic by construction (nodes only point at
    /// pre-existing parents), so the traversal always terminates.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward needs a scalar, got shape {:?}",
            self.shape()
        );
        if !self.requires_grad() {
            return;
        }

        // Post-order DFS; reversed it yields loss-first topological order.
        let mut topo: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        enum Step<T: Scalar> {
            Enter(Tensor<T>),
            Exit(Tensor<T>),
        }
        let mut stack = vec![Step::Enter(self.clone())];
        while let Some(step) = stack.pop() {
            match step {
                Step::Enter(t) => {
                    if !visited.insert(t.id()) {
                        continue;
                    }
                    stack.push(Step::Exit(t.clone()));
                    let n = t.node.borrow();
                    for p in &n.parents {
                        if p.requires_grad() && !visited.contains(&p.id()) {
                            stack.push(Step::Enter(p.clone()));
                        }
                    }
                }
                Step::Exit(t) => topo.push(t),
            }
        }

        let mut store = GradStore::new();
        store.seed(self.id(), vec![T::one()]);
        for t in topo.iter().rev() {
            let Some(g) = store.take(t.id()) else {
                continue;
            };
            {
                let n = t.node.borrow();
                if let Some(back) = &n.backward {
                    back(&g, &mut store);
                }
            }
            let mut n = t.node.borrow_mut();
            if n.requires_grad {
                let len = n.values.len();
                let grad = n.grad.get_or_insert_with(|| vec![T::zero(); len]);
                for (dst, src) in grad.iter_mut().zip(g.iter()) {
                    *dst += *src;
                }
            }
        }
    }
}

/// Scratch gradients keyed by node id, alive for one backward pass.
pub(crate) struct GradStore<T: Scalar> {
    slots: HashMap<u64, Vec<T>>,
}

impl<T: Scalar> GradStore<T> {
    fn new() -> Self {
        GradStore {
            slots: HashMap::new(),
        }
    }

    fn seed(&mut self, id: u64, g: Vec<T>) {
        self.slots.insert(id, g);
    }

    fn take(&mut self, id: u64) -> Option<Vec<T>> {
        self.slots.remove(&id)
    }

    /// Add a contribution into `target`'s slot. Skipped entirely when the
    /// target does not require gradients.
    pub(crate) fn accum(&mut self, target: &Tensor<T>, add: impl FnOnce(&mut [T])) {
        if !target.requires_grad() {
            return;
        }
        let slot = self
            .slots
            .entry(target.id())
            .or_insert_with(|| vec![T::zero(); target.numel()]);
        add(slot.as_mut_slice());
    }
}
