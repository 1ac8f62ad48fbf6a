use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Gradient rule of one operator: maps the output gradient to one optional
/// gradient per input (same length as that input's data).
pub trait BackwardOp {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    op: Option<Box<dyn BackwardOp>>,
    requires_grad: bool,
}

/// Append-only tape. Nodes are created in topological order, so a reverse
/// sweep over the node list visits every node after all of its consumers.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; len])
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<Var>,
        op: Option<Box<dyn BackwardOp>>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers an operator result computed outside the graph together with
    /// its gradient rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn BackwardOp>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = requires_grad.then_some(op);
        self.push(value, inputs.to_vec(), op, requires_grad)
    }

    /// Reverse sweep from a one-element loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(Error::param("loss does not belong to this graph"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node
                .parents
                .iter()
                .map(|p| &self.nodes[p.0].value)
                .collect();
            let parent_grads = op.backward(&inputs, &node.value, &grad);
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.len(), self.nodes[parent.0].value.len());
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, g)| *a += g),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}
