use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::Tensor;

/// Computes parent gradients from `(grad_out, parent values, output value)`.
pub(crate) type BackwardFn = Box<dyn Fn(&[f32], &[&Tensor], &Tensor) -> Vec<Option<Vec<f32>>>>;

struct Node {
    value: Tensor,
    grad: RefCell<Option<Vec<f32>>>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// A node on the autodiff tape.
///
/// Vars built only from constants record nothing, so inference pays no
/// bookkeeping beyond the forward values.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    /// Trainable leaf.
    pub fn leaf(value: Tensor) -> Self {
        Self::make(value, Vec::new(), None, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(value: Tensor) -> Self {
        Self::make(value, Vec::new(), None, false)
    }

    pub(crate) fn from_op(value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Self {
        if parents.iter().any(|p| p.0.requires_grad) {
            Self::make(value, parents, Some(backward), true)
        } else {
            Self::constant(value)
        }
    }

    fn make(value: Tensor, parents: Vec<Var>, backward: Option<BackwardFn>, requires_grad: bool) -> Self {
        Var(Rc::new(Node { value, grad: RefCell::new(None), parents, backward, requires_grad }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn data(&self) -> &[f32] {
        self.0.value.data()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Accumulated gradient, if backward reached this node.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.borrow().clone()
    }

    pub fn ptr_eq(&self, other: &Var) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self) {
        assert_eq!(self.value().numel(), 1, "backward needs a scalar output");
        if !self.requires_grad() {
            return;
        }
        let order = self.topo_order();
        *self.0.grad.borrow_mut() = Some(vec![1.0]);
        for node in order.iter().rev() {
            let Some(backward) = node.0.backward.as_ref() else { continue };
            // interior gradients are dropped once propagated
            let Some(grad) = node.0.grad.borrow_mut().take() else { continue };
            let parent_values: Vec<&Tensor> = node.0.parents.iter().map(|p| p.value()).collect();
            let grads = backward(&grad, &parent_values, node.value());
            debug_assert_eq!(grads.len(), node.0.parents.len());
            for (parent, g) in node.0.parents.iter().zip(grads) {
                let Some(g) = g else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), parent.value().numel());
                let mut slot = parent.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
            }
        }
    }

    fn topo_order(&self) -> Vec<Var> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        // iterative post-order DFS; deep U-Net graphs would overflow recursion
        let mut stack: Vec<(Var, bool)> = vec![(self.clone(), false)];
        while let Some((var, expanded)) = stack.pop() {
            if expanded {
                order.push(var);
                continue;
            }
            if !seen.insert(Rc::as_ptr(&var.0)) {
                continue;
            }
            stack.push((var.clone(), true));
            for p in &var.0.parents {
                if p.requires_grad() && !seen.contains(&Rc::as_ptr(&p.0)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}
