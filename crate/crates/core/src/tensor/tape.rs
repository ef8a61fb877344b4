use std::cell::RefCell;
use std::rc::{Rc, Weak};

use super::{rules, Op, Tensor};
use crate::error::{contract, Result};

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) output: Tensor,
}

#[derive(Default)]
pub(crate) struct TapeInner {
    pub(crate) nodes: Vec<Node>,
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) tape: Weak<RefCell<TapeInner>>,
    pub(crate) index: usize,
}

/// An explicitly scoped recording of primitive operations.
///
/// Only tensors registered through [`Tape::watch`] (and everything computed
/// from them) are recorded. Tensors hold weak references back to the tape,
/// so dropping the `Tape` handle frees the whole graph and turns any
/// surviving tensors into constants.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Result of [`grad_report`]: gradients plus the positions of `wrt` entries
/// that the output does not depend on.
pub struct Gradients {
    pub grads: Vec<Tensor>,
    pub unreached: Vec<usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a leaf. The returned tensor shares values with `t` but is
    /// tracked on this tape.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let index = inner.nodes.len();
        let leaf = Tensor::with_node(
            t.shape().to_vec(),
            t.shared_values(),
            Some(NodeRef {
                tape: Rc::downgrade(&self.inner),
                index,
            }),
        );
        inner.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            output: leaf.clone(),
        });
        leaf
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn push_node(
    tape: &Rc<RefCell<TapeInner>>,
    op: Op,
    inputs: Vec<Tensor>,
    shape: Vec<usize>,
    values: Rc<[f64]>,
) -> Tensor {
    let mut inner = tape.borrow_mut();
    let index = inner.nodes.len();
    let out = Tensor::with_node(
        shape,
        values,
        Some(NodeRef {
            tape: Rc::downgrade(tape),
            index,
        }),
    );
    inner.nodes.push(Node {
        op,
        inputs,
        output: out.clone(),
    });
    out
}

/// Gradient of a scalar `output` with respect to each tensor in `wrt`.
///
/// With `create_graph` the adjoint computations are themselves recorded on
/// the tape, so the returned gradients can be differentiated again.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    let report = grad_report(output, wrt, create_graph)?;
    if !report.unreached.is_empty() {
        log::debug!(
            "unreached leaf: {} of {} wrt tensors receive zero gradient",
            report.unreached.len(),
            wrt.len()
        );
    }
    Ok(report.grads)
}

pub fn grad_report(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Gradients> {
    if output.numel() != 1 {
        return Err(contract(format!(
            "grad requires a scalar output, got shape {:?}",
            output.shape()
        )));
    }
    let zeros = |unreached: Vec<usize>| Gradients {
        grads: wrt.iter().map(|w| Tensor::zeros(w.shape())).collect(),
        unreached,
    };
    let Some(node) = output.node_ref() else {
        return Ok(zeros((0..wrt.len()).collect()));
    };
    let Some(tape_rc) = node.tape.upgrade() else {
        return Ok(zeros((0..wrt.len()).collect()));
    };
    let out_idx = node.index;
    let mut adjoints: Vec<Option<Tensor>> = vec![None; out_idx + 1];
    adjoints[out_idx] = Some(Tensor::ones(output.shape()));

    for idx in (0..=out_idx).rev() {
        let Some(g) = adjoints[idx].clone() else {
            continue;
        };
        let (op, inputs, out) = {
            let inner = tape_rc.borrow();
            let n = &inner.nodes[idx];
            if matches!(n.op, Op::Leaf) {
                continue;
            }
            (n.op.clone(), n.inputs.clone(), n.output.clone())
        };
        let input_grads = if create_graph {
            rules::backward(&op, &inputs, &out, &g)?
        } else {
            let detached: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
            rules::backward(&op, &detached, &out.detach(), &g.detach())?
        };
        for (inp, gi) in inputs.iter().zip(input_grads) {
            let Some(gi) = gi else { continue };
            let Some(r) = inp.node_ref() else { continue };
            if !Weak::ptr_eq(&r.tape, &node.tape) {
                continue;
            }
            let slot = &mut adjoints[r.index];
            *slot = Some(match slot.take() {
                Some(acc) => acc.add(&gi)?,
                None => gi,
            });
        }
    }

    let mut grads = Vec::with_capacity(wrt.len());
    let mut unreached = Vec::new();
    for (i, w) in wrt.iter().enumerate() {
        let hit = w
            .node_ref()
            .filter(|r| Weak::ptr_eq(&r.tape, &node.tape) && r.index <= out_idx)
            .and_then(|r| adjoints[r.index].clone());
        match hit {
            Some(g) => grads.push(g),
            None => {
                unreached.push(i);
                grads.push(Tensor::zeros(w.shape()));
            }
        }
    }
    Ok(Gradients { grads, unreached })
}
