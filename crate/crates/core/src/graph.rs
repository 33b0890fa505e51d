//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! a closure mapping the output gradient to one gradient per parent. The tape
//! is append-only, so node ids are already in topological order and the
//! backward pass is a single reverse sweep.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) id: usize,
    pub(crate) graph: &'g Graph,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A graph that only evaluates; [`Graph::backward`] yields no gradients.
    pub fn inference() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Rc::new(value), Vec::new(), None)
    }

    pub(crate) fn push(
        &self,
        value: Rc<Tensor>,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let backward = if self.record { backward } else { None };
        nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var { id, graph: self }
    }

    /// Records an op. `backward` receives the output gradient and must return
    /// one gradient per parent, in order.
    pub(crate) fn op<'g, F>(&'g self, value: Tensor, parents: &[Var<'g>], backward: F) -> Var<'g>
    where
        F: Fn(&Tensor) -> Vec<Tensor> + 'static,
    {
        let ids = parents.iter().map(|p| p.id).collect();
        let backward: Option<BackwardFn> = if self.record {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push(Rc::new(value), ids, backward)
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Back-propagates `seed` (the gradient of some scalar objective with
    /// respect to `output`) through the tape.
    pub fn backward_with(&self, output: Var<'_>, seed: Tensor) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if !self.record {
            return Gradients { grads };
        }
        debug_assert_eq!(seed.shape(), nodes[output.id].value.shape());
        grads[output.id] = Some(seed);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            // keep the gradient of the output itself around for inspection
            if id == output.id {
                grads[id] = Some(g);
            }
        }
        Gradients { grads }
    }

    /// Back-propagates from a scalar output with seed 1.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let shape = output.value().shape().to_vec();
        self.backward_with(output, Tensor::ones(&shape))
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// The gradient, or zeros when `var` did not influence the output.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl<'g> Var<'g> {
    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }
}
