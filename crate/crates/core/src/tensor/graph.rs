use std::cell::RefCell;
use std::rc::Rc;

use super::{Real, Tensor};
use crate::error::{invalid, Error, Result};

/// Backward rule: receives the output gradient and which parents need a
/// gradient, returns one optional gradient buffer per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    tracked: bool,
    leaf: bool,
}

/// Append-only tape of one forward pass. Confined to a single thread.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input; its gradient is kept by [`Graph::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf_shared(Rc::new(value))
    }

    /// Like [`Graph::leaf`] without copying a value the caller keeps.
    pub fn leaf_shared(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        self.insert(Node {
            value,
            parents: Vec::new(),
            backward: None,
            tracked: true,
            leaf: true,
        })
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.constant_shared(Rc::new(value))
    }

    pub fn constant_shared(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        self.insert(Node {
            value,
            parents: Vec::new(),
            backward: None,
            tracked: false,
            leaf: false,
        })
    }

    pub(crate) fn push(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Result<Var<'_, T>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let tracked = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].tracked)
        };
        Ok(self.insert(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: tracked.then_some(backward),
            tracked,
            leaf: false,
        }))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar output. Returns gradients of all leaves.
    pub fn backward(&self, output: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.numel() != 1 {
            return Err(invalid!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; output.id + 1];
        grads[output.id] = Some(vec![T::one()]);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                grads[id] = None;
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].tracked).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].tracked {
                    continue;
                }
                debug_assert_eq!(pg.len(), nodes[p].value.numel());
                match grads[p].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                    None => grads[p] = Some(pg),
                }
            }
        }
        let mut leaves = Vec::new();
        for (id, g) in grads.into_iter().enumerate() {
            if nodes[id].leaf {
                let g = g.unwrap_or_else(|| vec![T::zero(); nodes[id].value.numel()]);
                leaves.push((id, g));
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients<T> {
    leaves: Vec<(usize, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.leaves
            .binary_search_by_key(&var.id, |(id, _)| *id)
            .ok()
            .map(|i| self.leaves[i].1.as_slice())
    }

    pub fn wrt(&self, var: Var<'_, T>) -> Result<Tensor<T>> {
        let g = self
            .get(var)
            .ok_or_else(|| invalid!("{var:?} is not a leaf of this graph"))?;
        Tensor::new(var.value().shape(), g.to_vec())
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.graph.nodes.borrow()[self.id].tracked
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }
}
