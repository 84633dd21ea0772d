//! Dynamic tape for reverse-mode differentiation.
//!
//! Ops append one node per recorded output; append order is the topological
//! order. `backward` walks nodes in strict reverse append order and each node
//! pushes gradients into its input tensors' shared gradient cells, so the
//! accumulation order is fixed and single-threaded replays are bit-identical.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{Element, GradCell, Tensor};

/// Backward rule of one recorded op. Implementations hold clones of whatever
/// the rule needs (inputs for products, masks for gating) and nothing more.
pub(crate) trait TapeOp<E: Element> {
    fn backward(&self, grad_out: &[E]);
}

struct TapeNode<E: Element> {
    out_grad: GradCell<E>,
    op: Box<dyn TapeOp<E>>,
}

/// Append-only op recorder; one per forward/backward cycle.
pub struct Tape<E: Element> {
    nodes: RefCell<Vec<TapeNode<E>>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records `op` as the producer of `out` and flags `out` as requiring
    /// gradients. Called by ops only when some input requires gradients.
    pub(crate) fn record(&self, out: &mut Tensor<E>, op: Box<dyn TapeOp<E>>) {
        out.set_requires(true);
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(TapeNode {
            out_grad: out.grad_cell(),
            op,
        });
        out.set_node(id);
    }

    /// Reverse sweep from a scalar root; populates the gradient of every
    /// reachable tensor that requires gradients. Unreachable gradients are
    /// left untouched. Intermediate node gradients are consumed during the
    /// sweep; leaf gradients accumulate and persist.
    pub fn backward(&self, root: &Tensor<E>) -> Result<()> {
        if !root.is_scalar() {
            return Err(Error::NonScalarBackward {
                elements: root.len(),
            });
        }
        let Some(root_id) = root.node_id() else {
            // A scalar leaf has no recorded ancestry: nothing to do.
            return Ok(());
        };
        root.accumulate_grad(&[E::one()]);
        let nodes = self.nodes.borrow();
        for node in nodes[..=root_id].iter().rev() {
            let taken = node.out_grad.borrow_mut().take();
            if let Some(g) = taken {
                node.op.backward(&g);
            }
        }
        Ok(())
    }
}

/// Gradient target of one op input: accumulate only if the input wanted
/// gradients. Keeps backward rules free of `requires_grad` bookkeeping.
pub(crate) struct InputSlot<E: Element> {
    grad: Option<GradCell<E>>,
    len: usize,
}

impl<E: Element> InputSlot<E> {
    pub fn of(t: &Tensor<E>) -> Self {
        InputSlot {
            grad: t.needs_grad().then(|| t.grad_cell()),
            len: t.len(),
        }
    }

    pub fn wants_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Adds `g` into the slot (no-op when the input did not require grads).
    pub fn add(&self, g: &[E]) {
        debug_assert_eq!(g.len(), self.len);
        if let Some(cell) = &self.grad {
            let mut slot = cell.borrow_mut();
            match slot.as_mut() {
                Some(buf) => {
                    for (dst, src) in buf.iter_mut().zip(g) {
                        *dst = *dst + *src;
                    }
                }
                None => *slot = Some(g.to_vec()),
            }
        }
    }

    /// Runs `fill` against the accumulation buffer directly, avoiding a
    /// temporary when the rule can scatter in place.
    pub fn add_with(&self, fill: impl FnOnce(&mut [E])) {
        if let Some(cell) = &self.grad {
            let mut slot = cell.borrow_mut();
            if slot.is_none() {
                *slot = Some(vec![E::zero(); self.len]);
            }
            fill(slot.as_mut().expect("just filled"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().requires_grad();
        let y = ops::relu(&tape, &x);
        assert!(matches!(
            tape.backward(&y),
            Err(Error::NonScalarBackward { elements: 2 })
        ));
    }

    #[test]
    fn sum_backward_is_ones() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.5])
            .unwrap()
            .requires_grad();
        let s = ops::sum(&tape, &x);
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn sum_of_square_backward_is_two_x() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5])
            .unwrap()
            .requires_grad();
        let sq = ops::mul(&tape, &x, &x).unwrap();
        let s = ops::sum(&tape, &sq);
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn unreachable_grads_untouched() {
        let tape = Tape::<f64>::new();
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().requires_grad();
        let y = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap().requires_grad();
        let sx = ops::sum(&tape, &x);
        let _sy = ops::sum(&tape, &y); // recorded after the root, not reachable
        tape.backward(&sx).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
        assert!(y.grad().is_none());
    }
}
