//! The tape itself: node storage, gradient slots, backward pass.

use ndarray::ArrayD;

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

type BackFn = Box<dyn Fn(&Tape, &ArrayD<f64>, &ArrayD<f64>, &mut Grads) + Send>;

pub(crate) struct BackStep {
    /// Called as `run(tape, own_value, upstream_grad, grads)`.
    pub(crate) run: BackFn,
}

struct Node {
    value: ArrayD<f64>,
    requires_grad: bool,
    back: Option<BackStep>,
}

/// A single-use computation graph. Values are computed eagerly as ops are
/// pushed; `backward` runs once over the finished tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a differentiable leaf (a parameter or probed input).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, true, None)
    }

    /// Insert a constant; nothing upstream of it receives gradient.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, false, None)
    }

    /// Copy a node's value into a fresh constant, severing the gradient path.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<f64>,
        requires_grad: bool,
        back: Option<BackStep>,
    ) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            back,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Push an op node; gradient tracking is inherited from the parents.
    /// When no parent is tracked the backward step is dropped entirely, so
    /// inference-style forwards carry no backward machinery.
    pub(crate) fn push_op(&mut self, value: ArrayD<f64>, parents: &[NodeId], back: BackStep) -> NodeId {
        let req = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, req, req.then_some(back))
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a length-1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1, "scalar() on a non-scalar node");
        v.iter().next().copied().unwrap()
    }

    /// Whether gradient with respect to this node is being tracked.
    pub fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse pass from a scalar root. Returns one gradient slot per node;
    /// untracked nodes and nodes outside the root's ancestry stay `None`.
    pub fn backward(&self, root: NodeId) -> Grads {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads = Grads {
            slots: vec![None; self.nodes.len()],
        };
        grads.slots[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(step) = &node.back else { continue };
            // Temporarily take the slot so the closure may mutate other slots.
            let Some(g) = grads.slots[i].take() else {
                continue;
            };
            (step.run)(self, &node.value, &g, &mut grads);
            grads.slots[i] = Some(g);
        }
        grads
    }
}

/// Gradient slots produced by [`Tape::backward`], indexed by [`NodeId`].
pub struct Grads {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    /// Gradient of the root with respect to the node, if any flowed there.
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.slots[id.0].as_ref()
    }

    /// Gradient as a dense array, with structural zeros materialized.
    pub fn dense(&self, tape: &Tape, id: NodeId) -> ArrayD<f64> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(tape.value(id).raw_dim()),
        }
    }

    pub(crate) fn accum(&mut self, id: NodeId, contrib: ArrayD<f64>) {
        match &mut self.slots[id.0] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), contrib.shape(), "gradient shape mismatch");
                *acc += &contrib;
            }
            slot @ None => *slot = Some(contrib),
        }
    }
}
