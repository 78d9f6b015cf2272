//! A small reverse-mode differentiation tape.
//!
//! Every operation records its output value together with a closure mapping
//! the output gradient to gradients of its parents. A [`Graph`] lives for one
//! forward/backward pass; parameters enter as leaves through [`Graph::param`].

use std::cell::RefCell;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

mod conv;
pub mod gradcheck;
mod loss;
mod ops;
mod spatial;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the output gradient to one optional gradient per parent. The flags
/// say which parents need a gradient at all.
pub(crate) type BackwardFn<S> = Box<dyn Fn(&Tensor<S>, &[bool]) -> Vec<Option<Tensor<S>>>>;

struct Node<S: Scalar> {
    value: Rc<Tensor<S>>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<S>>,
    requires_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), parents: vec![], backward: None, requires_grad });
        Var(nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf sharing an existing value (no copy).
    pub fn leaf_rc(&self, value: Rc<Tensor<S>>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents: vec![], backward: None, requires_grad });
        Var(nodes.len() - 1)
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// Same value, cut off from gradient flow.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents: vec![], backward: None, requires_grad: false });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<S>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub(crate) fn push(&self, value: Tensor<S>, parents: Vec<Var>, backward: BackwardFn<S>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        let backward = if requires_grad { Some(backward) } else { None };
        nodes.push(Node { value: Rc::new(value), parents, backward, requires_grad });
        Var(nodes.len() - 1)
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Gradients<S> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape().to_vec(), S::one()));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|p| nodes[p.0].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p.0].value.shape(), "gradient shape for node {}", p.0);
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Leaf gradients from one backward pass.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
