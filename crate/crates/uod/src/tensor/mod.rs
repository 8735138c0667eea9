//! Minimal reverse-mode autodiff over `ndarray` arrays in f64.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes; each
//! node owns its value and a backward closure that maps the node's output
//! gradient to gradient contributions for its parents. Nodes are created in
//! topological order, so [`Tape::backward`] is a single reverse sweep.
//!
//! The tape lives for one optimization step (or one inference pass) and is
//! then dropped. Kernels parallelize internally through [`crate::exec`];
//! graph construction and the backward sweep are single-threaded, which keeps
//! accumulation order fixed and results bit-identical across thread counts.

mod basic;
mod conv;
mod linalg;
mod loss;
mod norm;
mod tokens;

pub mod gradcheck;

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::ArrayD;

type BackFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<(usize, ArrayD<f64>)>>;

/// Force contiguous row-major storage so kernels can take flat slices.
fn standardize(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

struct Node {
    value: Rc<ArrayD<f64>>,
    back: Option<BackFn>,
}

/// Records one forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<ArrayD<f64>>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a leaf (input or parameter). Leaves have no backward function;
    /// their gradients are read off after [`Tape::backward`].
    pub fn leaf(&self, value: ArrayD<f64>) -> Var<'_> {
        self.push(value, None)
    }

    fn push(&self, value: ArrayD<f64>, back: Option<BackFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            // Ops index values as contiguous row-major slices, so normalize
            // layouts here (e.g. `concatenate` can produce permuted strides).
            value: Rc::new(standardize(value)),
            back,
        });
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar loss. Gradients of every reachable node
    /// are retained and can be read with [`Tape::grad`] / [`Tape::take_grad`].
    pub fn backward(&self, loss: Var<'_>) {
        assert!(
            std::ptr::eq(loss.tape, self),
            "backward called with a Var from a different tape"
        );
        let n = self.len();
        assert_eq!(
            loss.value().len(),
            1,
            "backward requires a scalar loss node"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(ndarray::ArrayD::ones(loss.value().shape().to_vec()));

        let nodes = self.nodes.borrow();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = &nodes[id].back {
                for (pid, contrib) in back(&g) {
                    debug_assert!(pid < id, "backward produced a non-topological edge");
                    match &mut grads[pid] {
                        Some(acc) => *acc += &contrib,
                        slot @ None => *slot = Some(standardize(contrib)),
                    }
                }
            }
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
    }

    /// Gradient of `v` from the last [`Tape::backward`] call, cloned.
    pub fn grad(&self, v: Var<'_>) -> Option<ArrayD<f64>> {
        self.grads.borrow().get(v.id).and_then(|g| g.clone())
    }

    /// Move the gradient of `v` out of the tape (used by the optimizer to
    /// avoid copies).
    pub fn take_grad(&self, v: Var<'_>) -> Option<ArrayD<f64>> {
        self.grads.borrow_mut().get_mut(v.id).and_then(|g| g.take())
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<ArrayD<f64>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Node index on the tape (stable for the tape's lifetime).
    pub fn id(&self) -> usize {
        self.id
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on a non-scalar node");
        *v.iter().next().unwrap()
    }

    fn unary(
        self,
        value: ArrayD<f64>,
        back: impl Fn(&ArrayD<f64>) -> ArrayD<f64> + 'static,
    ) -> Var<'t> {
        let pid = self.id;
        self.tape
            .push(value, Some(Box::new(move |g| vec![(pid, back(g))])))
    }

    fn binary(
        self,
        other: Var<'t>,
        value: ArrayD<f64>,
        back: impl Fn(&ArrayD<f64>) -> (ArrayD<f64>, ArrayD<f64>) + 'static,
    ) -> Var<'t> {
        assert!(std::ptr::eq(self.tape, other.tape));
        let (a, b) = (self.id, other.id);
        self.tape.push(
            value,
            Some(Box::new(move |g| {
                let (ga, gb) = back(g);
                vec![(a, ga), (b, gb)]
            })),
        )
    }

    fn ternary(
        self,
        second: Var<'t>,
        third: Var<'t>,
        value: ArrayD<f64>,
        back: impl Fn(&ArrayD<f64>) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) + 'static,
    ) -> Var<'t> {
        assert!(std::ptr::eq(self.tape, second.tape));
        assert!(std::ptr::eq(self.tape, third.tape));
        let (a, b, c) = (self.id, second.id, third.id);
        self.tape.push(
            value,
            Some(Box::new(move |g| {
                let (ga, gb, gc) = back(g);
                vec![(a, ga), (b, gb), (c, gc)]
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn backward_accumulates_over_fanout() {
        // loss = sum(x * x + x) => dloss/dx = 2x + 1
        let tape = Tape::new();
        let x = tape.leaf(arr1(&[1.0, -2.0, 3.0]).into_dyn());
        let y = x.mul(x).add(x);
        let loss = y.sum_all();
        tape.backward(loss);
        let g = tape.grad(x).unwrap();
        assert_eq!(g, arr1(&[3.0, -3.0, 7.0]).into_dyn());
    }

    #[test]
    fn grads_of_unreached_nodes_are_none() {
        let tape = Tape::new();
        let x = tape.leaf(arr1(&[1.0]).into_dyn());
        let unused = tape.leaf(arr1(&[5.0]).into_dyn());
        let loss = x.sum_all();
        tape.backward(loss);
        assert!(tape.grad(unused).is_none());
        assert!(tape.grad(x).is_some());
    }
}
