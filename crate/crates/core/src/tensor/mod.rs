//! A small reverse-mode autodiff engine over `ndarray` with `f64` storage.
//!
//! Tensors are immutable nodes in a dynamically built computation graph.
//! Calling [`Tensor::backward`] walks the graph in reverse topological order
//! and returns a [`Gradients`] map keyed by node id, so gradient storage is
//! external to the graph and forward passes stay shareable across threads.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use ndarray::{ArrayD, IxDyn};

pub mod check;
mod conv;
mod losses;
mod ops;

pub use losses::Reduction;
pub use losses::dice_cost;
pub(crate) use ops::stable_sigmoid;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Computes gradients flowing to each parent given the gradient at the output.
/// Entries align with the node's parent list; `None` marks a parent that
/// requires no gradient.
pub(crate) type GradFn =
    Box<dyn Fn(&ArrayD<f64>) -> Vec<Option<ArrayD<f64>>> + Send + Sync>;

pub(crate) struct Node {
    id: u64,
    data: Arc<ArrayD<f64>>,
    parents: Vec<Tensor>,
    grad_fn: Option<GradFn>,
    requires_grad: bool,
}

/// A reference-counted handle to one node of the computation graph.
#[derive(Clone)]
pub struct Tensor {
    node: Arc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// Constant leaf: carries no gradient.
    pub fn constant(data: ArrayD<f64>) -> Self {
        Tensor {
            node: Arc::new(Node {
                id: fresh_id(),
                data: Arc::new(data),
                parents: Vec::new(),
                grad_fn: None,
                requires_grad: false,
            }),
        }
    }

    /// Leaf that participates in gradient computation (used by tests and by
    /// [`Param::tensor`]).
    pub fn variable(data: ArrayD<f64>) -> Self {
        Tensor {
            node: Arc::new(Node {
                id: fresh_id(),
                data: Arc::new(data),
                parents: Vec::new(),
                grad_fn: None,
                requires_grad: true,
            }),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::constant(ndarray::arr0(v).into_dyn())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub(crate) fn from_op(
        data: ArrayD<f64>,
        parents: Vec<Tensor>,
        grad_fn: GradFn,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.node.requires_grad);
        Tensor {
            node: Arc::new(Node {
                id: fresh_id(),
                data: Arc::new(data),
                parents,
                grad_fn: if requires_grad { Some(grad_fn) } else { None },
                requires_grad,
            }),
        }
    }

    pub(crate) fn leaf_with_id(id: u64, data: Arc<ArrayD<f64>>, requires_grad: bool) -> Self {
        Tensor {
            node: Arc::new(Node {
                id,
                data,
                parents: Vec::new(),
                grad_fn: None,
                requires_grad,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn data(&self) -> &ArrayD<f64> {
        &self.node.data
    }

    pub fn shape(&self) -> &[usize] {
        self.node.data.shape()
    }

    pub fn len(&self) -> usize {
        self.node.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        *self.node.data.iter().next().expect("empty tensor")
    }

    /// New leaf sharing this tensor's data but cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor {
            node: Arc::new(Node {
                id: fresh_id(),
                data: Arc::clone(&self.node.data),
                parents: Vec::new(),
                grad_fn: None,
                requires_grad: false,
            }),
        }
    }

    /// Reverse-mode sweep seeded with `d(loss)/d(self) = seed` on a scalar.
    pub fn backward_scaled(&self, seed: f64) -> Gradients {
        assert_eq!(
            self.len(),
            1,
            "backward requires a scalar root, got shape {:?}",
            self.shape()
        );
        let seed_arr = ArrayD::from_elem(self.node.data.raw_dim(), seed);
        self.backward_with(seed_arr)
    }

    pub fn backward(&self) -> Gradients {
        self.backward_scaled(1.0)
    }

    pub fn backward_with(&self, seed: ArrayD<f64>) -> Gradients {
        assert_eq!(seed.shape(), self.shape(), "seed gradient shape mismatch");
        let order = self.topo_order();
        let mut grads: HashMap<u64, ArrayD<f64>> = HashMap::new();
        grads.insert(self.node.id, seed);
        // Reverse topological order: every node is settled before its parents.
        for node in order.iter().rev() {
            let Some(grad_fn) = node.node.grad_fn.as_ref() else {
                continue;
            };
            let Some(out_grad) = grads.get(&node.node.id).cloned() else {
                continue;
            };
            let parent_grads = grad_fn(&out_grad);
            debug_assert_eq!(parent_grads.len(), node.node.parents.len());
            for (parent, pg) in node.node.parents.iter().zip(parent_grads) {
                if !parent.node.requires_grad {
                    continue;
                }
                let Some(pg) = pg else { continue };
                debug_assert_eq!(
                    pg.shape(),
                    parent.shape(),
                    "gradient shape mismatch for parent {}",
                    parent.id()
                );
                match grads.entry(parent.node.id) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        *e.get_mut() += &pg;
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(pg);
                    }
                }
            }
        }
        Gradients { map: grads }
    }

    /// Post-order DFS over grad-requiring ancestry (iterative; graphs get deep).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // stack holds (tensor, expanded?)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.node.id) {
                continue;
            }
            if !t.node.requires_grad {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.node.parents {
                if p.node.requires_grad && !visited.contains(&p.node.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

/// Gradients of one backward sweep, keyed by tensor/parameter id.
pub struct Gradients {
    map: HashMap<u64, ArrayD<f64>>,
}

impl Gradients {
    pub fn empty() -> Self {
        Gradients { map: HashMap::new() }
    }

    pub fn get(&self, id: u64) -> Option<&ArrayD<f64>> {
        self.map.get(&id)
    }

    pub fn wrt(&self, t: &Tensor) -> Option<&ArrayD<f64>> {
        self.map.get(&t.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Scale every stored gradient (used to turn an accumulated batch sum
    /// into a batch mean).
    pub fn scale_all(&mut self, s: f64) {
        for g in self.map.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }

    /// Element-wise accumulate another sweep's gradients (used to reduce
    /// per-image gradients into a batch gradient in a fixed order).
    pub fn accumulate(&mut self, other: Gradients) {
        for (id, g) in other.map {
            match self.map.entry(id) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    *e.get_mut() += &g;
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(g);
                }
            }
        }
    }
}

/// A trainable (or frozen) parameter: stable id plus interior-mutable value.
///
/// Forward passes wrap the current value into a leaf tensor carrying the
/// parameter's id, so gradients land under that id in [`Gradients`]. The
/// optimizer is the single writer; concurrent readers are fine.
#[derive(Clone)]
pub struct Param {
    inner: Arc<ParamInner>,
}

struct ParamInner {
    id: u64,
    value: RwLock<Arc<ArrayD<f64>>>,
    trainable: AtomicBool,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        Param {
            inner: Arc::new(ParamInner {
                id: fresh_id(),
                value: RwLock::new(Arc::new(value)),
                trainable: AtomicBool::new(true),
            }),
        }
    }

    pub fn frozen(value: ArrayD<f64>) -> Self {
        let p = Param::new(value);
        p.set_trainable(false);
        p
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn trainable(&self) -> bool {
        self.inner.trainable.load(Ordering::Relaxed)
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.inner.trainable.store(trainable, Ordering::Relaxed);
    }

    pub fn value(&self) -> Arc<ArrayD<f64>> {
        Arc::clone(&self.inner.value.read().expect("param lock poisoned"))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn set(&self, value: ArrayD<f64>) {
        let mut guard = self.inner.value.write().expect("param lock poisoned");
        assert_eq!(
            guard.shape(),
            value.shape(),
            "parameter update must preserve shape"
        );
        *guard = Arc::new(value);
    }

    /// Graph leaf for the current value.
    pub fn tensor(&self) -> Tensor {
        Tensor::leaf_with_id(self.inner.id, self.value(), self.trainable())
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param")
            .field("id", &self.inner.id)
            .field("shape", &self.shape())
            .field("trainable", &self.trainable())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn add_mul_backward() {
        let a = Tensor::variable(arr1(&[1.0, 2.0, 3.0]).into_dyn());
        let b = Tensor::variable(arr1(&[4.0, 5.0, 6.0]).into_dyn());
        // loss = sum(a * b + a)
        let loss = a.mul(&b).add(&a).sum_all();
        assert_eq!(loss.item(), 4.0 + 10.0 + 18.0 + 6.0);
        let grads = loss.backward();
        let ga = grads.wrt(&a).unwrap();
        let gb = grads.wrt(&b).unwrap();
        assert_eq!(ga.as_slice().unwrap(), &[5.0, 6.0, 7.0]);
        assert_eq!(gb.as_slice().unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        let a = Tensor::variable(arr1(&[2.0]).into_dyn());
        // loss = a*a + 3a -> dloss/da = 2a + 3 = 7
        let loss = a.mul(&a).add(&a.scale(3.0)).sum_all();
        let grads = loss.backward();
        assert_eq!(grads.wrt(&a).unwrap()[[0]], 7.0);
    }

    #[test]
    fn constant_branch_gets_no_grad() {
        let a = Tensor::variable(arr1(&[1.0, 1.0]).into_dyn());
        let c = Tensor::constant(arr1(&[5.0, 5.0]).into_dyn());
        let loss = a.mul(&c).sum_all();
        let grads = loss.backward();
        assert!(grads.wrt(&c).is_none());
        assert_eq!(grads.wrt(&a).unwrap().as_slice().unwrap(), &[5.0, 5.0]);
    }

    #[test]
    fn param_roundtrip_and_freeze() {
        let p = Param::new(arr1(&[1.0, 2.0]).into_dyn());
        let loss = p.tensor().sum_all();
        let grads = loss.backward();
        assert!(grads.get(p.id()).is_some());

        p.set_trainable(false);
        let loss = p.tensor().sum_all();
        let grads = loss.backward();
        assert!(grads.get(p.id()).is_none());

        p.set(arr1(&[3.0, 4.0]).into_dyn());
        assert_eq!(p.tensor().data().as_slice().unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let a = Tensor::variable(arr1(&[2.0]).into_dyn());
        let loss = a.detach().mul(&a).sum_all();
        let grads = loss.backward();
        // only the non-detached use contributes
        assert_eq!(grads.wrt(&a).unwrap()[[0]], 2.0);
    }
}
