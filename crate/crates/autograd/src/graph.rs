use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use ndarray::ArrayD;

use crate::real::Real;

/// Pullback of one node: maps the gradient of the node's output to gradients of its parents
/// (in parent order). `None` marks a parent that receives no gradient.
pub type Pullback<T> = Box<dyn FnOnce(&ArrayD<T>) -> Vec<Option<ArrayD<T>>>>;

struct Node<T: Real> {
    value: Arc<ArrayD<T>>,
    parents: Vec<usize>,
    pullback: Option<Pullback<T>>,
    requires_grad: bool,
}

/// Define-by-run tape. Every operation on a [`Var`] appends a node; [`Graph::backward`]
/// walks the tape in reverse.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::with_capacity(512)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.leaf_shared(Arc::new(contiguous(value)), false)
    }

    /// A value whose gradient is tracked (inputs of a gradient check, parameters).
    pub fn leaf(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.leaf_shared(Arc::new(contiguous(value)), true)
    }

    pub fn leaf_shared(&self, value: Arc<ArrayD<T>>, requires_grad: bool) -> Var<'_, T> {
        debug_assert!(value.is_standard_layout());
        let id = self.push(Node {
            value,
            parents: Vec::new(),
            pullback: None,
            requires_grad,
        });
        Var { graph: self, id }
    }

    /// Records an operation. The pullback is dropped unless some parent tracks gradients.
    pub fn record<'g, F>(&'g self, value: ArrayD<T>, parents: &[Var<'g, T>], pullback: F) -> Var<'g, T>
    where
        F: FnOnce(&ArrayD<T>) -> Vec<Option<ArrayD<T>>> + 'static,
    {
        let value = contiguous(value);
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let pullback: Option<Pullback<T>> = if requires_grad { Some(Box::new(pullback)) } else { None };
        let id = self.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            pullback,
            requires_grad,
        });
        Var { graph: self, id }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<ArrayD<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from `root`, seeded with ones. Consumes the pullbacks, so a graph can be
    /// differentiated once.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let n = self.len();
        let mut grads: Vec<Option<ArrayD<T>>> = (0..n).map(|_| None).collect();
        let root_shape = self.value_of(root.id).raw_dim();
        grads[root.id] = Some(ArrayD::from_elem(root_shape, T::one()));
        for id in (0..=root.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let (pullback, parents) = {
                let mut nodes = self.nodes.borrow_mut();
                let node = &mut nodes[id];
                (node.pullback.take(), node.parents.clone())
            };
            let parent_grads = pullback.map(|pb| pb(&grad));
            grads[id] = Some(grad);
            let Some(parent_grads) = parent_grads else {
                continue;
            };
            debug_assert_eq!(parent_grads.len(), parents.len());
            for (pid, pg) in parents.into_iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.requires_grad(pid) {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => {
                        assert_eq!(acc.shape(), pg.shape(), "gradient shape mismatch at node {pid}");
                        *acc += &pg;
                    }
                    slot @ None => *slot = Some(contiguous(pg)),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients produced by one reverse sweep, indexed by node.
pub struct Gradients<T: Real> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&ArrayD<T>> {
        self.by_id(var.id)
    }

    pub fn by_id(&self, id: usize) -> Option<&ArrayD<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take_by_id(&mut self, id: usize) -> Option<ArrayD<T>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, shape={:?})", self.id, self.shape())
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Arc<ArrayD<T>> {
        self.graph.value_of(self.id)
    }

    pub fn to_array(&self) -> ArrayD<T> {
        (*self.value()).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        let s = self.shape();
        assert_eq!(s.len(), 4, "expected a 4-d tensor, got {s:?}");
        (s[0], s[1], s[2], s[3])
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on tensor of shape {:?}", v.shape());
        *v.iter().next().expect("one element")
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.leaf_shared(self.value(), false)
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }
}

pub(crate) fn contiguous<T: Real>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}
