//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its value, its input node ids and a
//! hand-written adjoint. Node ids are assigned in creation order, so the tape
//! is topologically sorted by construction and [`Tape::backward`] is a single
//! reverse sweep that visits each node once.

mod fdcheck;
mod ops;
mod optim;
mod params;

pub use fdcheck::{fd_check, fd_check_coords, fd_check_params, FdReport};
pub use optim::{clip_grad_norm, Adam};
pub use params::{load_checkpoint, save_checkpoint, CheckpointManifest, ParamId, ParamStore};
pub use ops::norm_corr;
pub use ops::sigmoid;
#[cfg(test)]
pub(crate) use ops::gelu;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&mut GradCtx<'_>) -> Result<()> + Send + Sync>;

struct Node {
    op: &'static str,
    value: Tensor,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// View handed to an op's adjoint: input values, the op output, the incoming
/// gradient and lazily allocated accumulators for each input.
pub struct GradCtx<'a> {
    nodes: &'a [Node],
    inputs: &'a [usize],
    grads: &'a mut [Option<Tensor>],
    pub out: &'a Tensor,
    pub grad: &'a Tensor,
}

impl<'a> GradCtx<'a> {
    pub fn input(&self, k: usize) -> &'a Tensor {
        &self.nodes[self.inputs[k]].value
    }

    /// Whether input `k` needs a gradient at all.
    pub fn wants(&self, k: usize) -> bool {
        self.nodes[self.inputs[k]].requires_grad
    }

    /// Accumulator for input `k`, zero-initialised on first use.
    pub fn grad_mut(&mut self, k: usize) -> &mut Tensor {
        let id = self.inputs[k];
        let shape = self.nodes[id].value.shape();
        self.grads[id].get_or_insert_with(|| Tensor::zeros(shape))
    }

    pub fn accumulate(&mut self, k: usize, g: Tensor) {
        if !self.wants(k) {
            return;
        }
        let id = self.inputs[k];
        match &mut self.grads[id] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.into_dtype(crate::tensor::DType::F64)),
        }
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. a leaf, exact zeros when the loss does not reach it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, op: &'static str, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            op,
            value,
            inputs: Vec::new(),
            requires_grad,
            backward: None,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that does not take part in differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf("constant", value, false, None)
    }

    /// Differentiable input leaf.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.leaf("var", value, true, None)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.leaf("param", store.value(id).clone(), true, Some(id))
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf("stop_gradient", value, false, None)
    }

    /// Appends an op node. The adjoint is dropped when no input needs a gradient.
    pub fn push<F>(&mut self, op: &'static str, value: Tensor, inputs: &[Var], backward: F) -> Var
    where
        F: Fn(&mut GradCtx<'_>) -> Result<()> + Send + Sync + 'static,
    {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss. Only leaf gradients are retained.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let mut ctx = GradCtx {
                nodes: &self.nodes,
                inputs: &node.inputs,
                grads: &mut grads,
                out: &node.value,
                grad: &grad,
            };
            backward(&mut ctx)?;
            // interior gradients are dropped once propagated
        }
        Ok(Gradients { grads })
    }

    /// Parameter leaves on this tape, in creation order.
    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (Var(i), p)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut tape = Tape::new();
        let p = tape.var(Tensor::new(&[3], vec![1.0, -2.0, 5.0]).unwrap());
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&tape, p).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gives_twice_p() {
        let mut tape = Tape::new();
        let p = tape.var(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&tape, p).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::new();
        let p = tape.var(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaves_get_exact_zero() {
        let mut tape = Tape::new();
        let a = tape.var(Tensor::full(&[2], 1.0));
        let b = tape.var(Tensor::full(&[2], 1.0));
        let loss = tape.sum(a);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(b).is_none());
        assert_eq!(g.wrt(&tape, b).data(), &[0.0, 0.0]);
    }

    #[test]
    fn repeated_backward_is_identical_and_linear() {
        let mut tape = Tape::new();
        let p = tape.var(Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap());
        let t = tape.tanh(p);
        let l1 = tape.sum(t);
        let sq = tape.mul(p, p).unwrap();
        let l2 = tape.sum(sq);
        let total = tape.add(l1, l2).unwrap();
        let g1 = tape.backward(total).unwrap().wrt(&tape, p);
        let g2 = tape.backward(total).unwrap().wrt(&tape, p);
        assert!(g1.bit_eq(&g2));
        let ga = tape.backward(l1).unwrap().wrt(&tape, p);
        let gb = tape.backward(l2).unwrap().wrt(&tape, p);
        let summed = ga.zip_map(&gb, |a, b| a + b).unwrap();
        assert!(summed.bit_eq(&g1));
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut tape = Tape::new();
        let p = tape.var(Tensor::full(&[2], 2.0));
        let s = tape.stop_gradient(p);
        let prod = tape.mul(p, s).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&tape, p).data(), &[2.0, 2.0]);
    }
}
