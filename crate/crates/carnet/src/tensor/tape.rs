use std::cell::RefCell;

use indexmap::IndexMap;

use super::{numel, Elem, Params, Result, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<E: Elem> {
    pub shape: Vec<usize>,
    pub data: Vec<E>,
    pub needs_grad: bool,
    pub back: Option<BackFn<E>>,
}

/// Backward rule of one op: receives all nodes, the output gradient, and the
/// gradient store to accumulate parent gradients into.
pub(crate) type BackFn<E> = Box<dyn Fn(&[Node<E>], &[E], &mut GradStore<E>)>;

/// Per-node gradient accumulator used during the single reverse sweep.
pub struct GradStore<E: Elem> {
    slots: Vec<Option<Vec<E>>>,
}

impl<E: Elem> GradStore<E> {
    fn new(n: usize) -> Self {
        GradStore {
            slots: (0..n).map(|_| None).collect(),
        }
    }
    /// Zero-initialized gradient slot for node `id` (length `len`).
    pub fn acc(&mut self, id: usize, len: usize) -> &mut [E] {
        self.slots[id].get_or_insert_with(|| vec![E::zero(); len])
    }
    fn take(&mut self, id: usize) -> Option<Vec<E>> {
        self.slots[id].take()
    }
}

struct Bind {
    name: String,
    id: usize,
    trainable: bool,
}

struct TapeInner<E: Elem> {
    nodes: Vec<Node<E>>,
    binds: Vec<Bind>,
}

/// Ordered record of forward ops; replaying it backward visits each node once.
pub struct Tape<E: Elem> {
    inner: RefCell<TapeInner<E>>,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                binds: Vec::new(),
            }),
        }
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        data: Vec<E>,
        needs_grad: bool,
        back: Option<BackFn<E>>,
    ) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            shape,
            data,
            needs_grad,
            back,
        });
        Var(inner.nodes.len() - 1)
    }

    /// Record a constant input (no gradient).
    pub fn leaf(&self, shape: &[usize], data: Vec<E>) -> Var {
        assert_eq!(numel(shape), data.len(), "leaf: shape/data length mismatch");
        self.push(shape.to_vec(), data, false, None)
    }

    /// Record an input that participates in differentiation.
    pub fn leaf_grad(&self, shape: &[usize], data: Vec<E>) -> Var {
        assert_eq!(numel(shape), data.len(), "leaf: shape/data length mismatch");
        self.push(shape.to_vec(), data, true, None)
    }

    pub fn scalar(&self, x: E) -> Var {
        self.leaf(&[], vec![x])
    }

    /// Bind a named parameter as a trainable leaf.
    pub fn param(&self, params: &Params<E>, name: &str) -> Result<Var> {
        self.bind(params, name, true)
    }

    /// Bind a named parameter as a frozen (non-differentiated) leaf.
    pub fn param_frozen(&self, params: &Params<E>, name: &str) -> Result<Var> {
        self.bind(params, name, false)
    }

    fn bind(&self, params: &Params<E>, name: &str, trainable: bool) -> Result<Var> {
        let p = params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let v = self.push(p.shape.clone(), p.data.clone(), trainable, None);
        self.inner.borrow_mut().binds.push(Bind {
            name: name.to_string(),
            id: v.0,
            trainable,
        });
        Ok(v)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.0].shape.clone()
    }

    pub fn len_of(&self, v: Var) -> usize {
        self.inner.borrow().nodes[v.0].data.len()
    }

    /// Clone out the value of a node.
    pub fn value(&self, v: Var) -> Vec<E> {
        self.inner.borrow().nodes[v.0].data.clone()
    }

    /// Scalar value of a 0-d/1-element node.
    pub fn scalar_value(&self, v: Var) -> E {
        let inner = self.inner.borrow();
        debug_assert_eq!(inner.nodes[v.0].data.len(), 1);
        inner.nodes[v.0].data[0]
    }

    /// Borrow the value of a node without cloning.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&[E]) -> R) -> R {
        f(&self.inner.borrow().nodes[v.0].data)
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].needs_grad
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Reverse sweep from a scalar loss. Consumes the tape; gradients of all
    /// differentiable leaves (including bound parameters) are returned.
    pub fn backward(self, loss: Var) -> Result<Gradients<E>> {
        let inner = self.inner.into_inner();
        let nodes = inner.nodes;
        if nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss(nodes[loss.0].shape.clone()));
        }
        let mut store = GradStore::new(nodes.len());
        store.slots[loss.0] = Some(vec![E::one()]);
        for id in (0..=loss.0).rev() {
            if !nodes[id].needs_grad {
                store.slots[id] = None;
                continue;
            }
            if nodes[id].back.is_some() {
                if let Some(g) = store.take(id) {
                    let back = nodes[id].back.as_ref().unwrap();
                    back(&nodes, &g, &mut store);
                }
            }
            // leaves keep their accumulated slot
        }
        let mut by_id = IndexMap::new();
        let mut param_grads: IndexMap<String, Vec<E>> = IndexMap::new();
        for b in &inner.binds {
            if b.trainable {
                let g = store.slots[b.id]
                    .clone()
                    .unwrap_or_else(|| vec![E::zero(); nodes[b.id].data.len()]);
                // repeated binds of the same name accumulate
                match param_grads.get_mut(&b.name) {
                    Some(acc) => {
                        for (a, x) in acc.iter_mut().zip(&g) {
                            *a += *x;
                        }
                    }
                    None => {
                        param_grads.insert(b.name.clone(), g);
                    }
                }
            }
        }
        for (id, slot) in store.slots.iter_mut().enumerate() {
            if let Some(g) = slot.take() {
                by_id.insert(id, g);
            }
        }
        Ok(Gradients {
            by_id,
            param_grads,
        })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<E: Elem> {
    by_id: IndexMap<usize, Vec<E>>,
    param_grads: IndexMap<String, Vec<E>>,
}

impl<E: Elem> Gradients<E> {
    /// Gradient with respect to a leaf recorded with `leaf_grad`/`param`.
    pub fn wrt(&self, v: Var) -> Option<&[E]> {
        self.by_id.get(&v.0).map(|g| g.as_slice())
    }

    /// Gradients keyed by parameter name, in bind order.
    pub fn params(&self) -> &IndexMap<String, Vec<E>> {
        &self.param_grads
    }

    pub fn into_params(self) -> IndexMap<String, Vec<E>> {
        self.param_grads
    }
}
