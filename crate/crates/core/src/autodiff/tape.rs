use std::cell::RefCell;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Maps the gradient of a node's output to gradients of its parents
/// (`None` for parents that need none).
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    op: &'static str,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Define-by-run record of a computation. Build a fresh tape per forward
/// pass; node ids increase in creation order, so the graph is acyclic by
/// construction.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
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

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let id = self.push(Node {
            value,
            requires_grad: true,
            op: "leaf",
            parents: Vec::new(),
            backward: None,
        });
        Var { tape: self, id }
    }

    /// Input that receives no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        let id = self.push(Node {
            value,
            requires_grad: false,
            op: "constant",
            parents: Vec::new(),
            backward: None,
        });
        Var { tape: self, id }
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(v))
    }

    /// Registers every tensor as a leaf (or constant when `requires_grad` is false).
    pub fn inputs(&self, values: &[Tensor<T>], requires_grad: bool) -> Vec<Var<'_, T>> {
        values
            .iter()
            .map(|t| {
                if requires_grad {
                    self.leaf(t.clone())
                } else {
                    self.constant(t.clone())
                }
            })
            .collect()
    }

    /// Records an operation computed outside the tape.
    ///
    /// `value` must be finite; the NaN policy is to fail at the op that
    /// produced the bad value. The backward closure is dropped when no
    /// parent requires a gradient.
    pub fn custom<'t, F>(
        &'t self,
        op: &'static str,
        parents: &[Var<'t, T>],
        value: Tensor<T>,
        backward: F,
    ) -> Result<Var<'t, T>>
    where
        F: Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    {
        value.ensure_finite(op)?;
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let id = self.push(Node {
            value,
            requires_grad,
            op,
            parents: ids,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Ok(Var { tape: self, id })
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::contract("loss belongs to another tape"));
        }
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), T::ONE));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(backward) = &node.backward {
                let parent_grads = backward(&g)?;
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !nodes[pid].requires_grad {
                        continue;
                    }
                    if pg.shape() != nodes[pid].value.shape() {
                        return Err(Error::Dimension {
                            op: node.op,
                            lhs: pg.shape().to_vec(),
                            rhs: nodes[pid].value.shape().to_vec(),
                        });
                    }
                    if !pg.is_finite() {
                        return Err(Error::numeric(format!("{} (backward)", node.op)));
                    }
                    grads[pid] = Some(match grads[pid].take() {
                        Some(acc) => acc.add(&pg)?,
                        None => pg,
                    });
                }
            }
            // Keep gradients of leaves; interior ones are no longer needed.
            if node.backward.is_none() && node.requires_grad {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when `v` was not reachable from the loss.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    pub fn wrt_all(&self, vars: &[Var<'_, T>]) -> Vec<Tensor<T>> {
        vars.iter().map(|&v| self.wrt(v)).collect()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Scalar value; panics if this node is not a single element.
    pub fn item(&self) -> T {
        self.tape.nodes.borrow()[self.id].value.item()
    }
}
