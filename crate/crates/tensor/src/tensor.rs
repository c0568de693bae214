use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Computes the gradient contribution of every parent from the gradient of
/// the node's output. The `needs` mask mirrors `parents` and tells the closure
/// which parent gradients are actually consumed.
pub(crate) type BackwardFn = Box<dyn Fn(&[f32], &[bool]) -> Vec<Option<Vec<f32>>>>;

struct GradNode {
    op: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<f32>>>,
    node: Option<GradNode>,
}

/// Dense row-major f32 tensor.
///
/// Cloning is cheap and shares storage. Leaves created with
/// [`Tensor::param`] collect gradients when a downstream scalar calls
/// [`Tensor::backward`]; every other tensor is immutable after construction.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, node: Option<GradNode>) -> Self {
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            requires_grad: Cell::new(requires_grad),
            grad: RefCell::new(None),
            node,
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::InvalidArgument {
                op: "from_vec",
                msg: format!("shape {:?} needs {} values, got {}", shape, numel(shape), data.len()),
            });
        }
        if shape.contains(&0) {
            return Err(TensorError::InvalidArgument {
                op: "from_vec",
                msg: format!("zero-sized dimension in {shape:?}"),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "from_vec" });
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf: gradients accumulate into it on `backward`.
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        t.0.requires_grad.set(true);
        Ok(t)
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_vec(vec![value], &[]).expect("finite scalar")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![0.0; numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self::build(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Registers the result of an operation. Parents that do not require
    /// gradients are dropped from the graph entirely.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Self> {
        debug_assert_eq!(numel(&shape), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let tracked = parents.iter().any(Tensor::requires_grad);
        let node = tracked.then(|| GradNode {
            op,
            parents,
            backward,
        });
        Ok(Self::build(shape, data, tracked, node))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.shape());
        d[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Toggles gradient collection on a leaf. Used to freeze parameters.
    pub fn set_requires_grad(&self, on: bool) -> Result<()> {
        if !self.is_leaf() {
            return Err(TensorError::NotALeaf);
        }
        self.0.requires_grad.set(on);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_tensor(&self) -> Option<Tensor> {
        self.grad()
            .map(|g| Self::build(self.0.shape.clone(), g, false, None))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Copy without graph history.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.to_vec(), false, None)
    }

    /// In-place update of a leaf's values (optimizers, finite differences).
    pub fn update_data(&self, f: impl FnOnce(&mut [f32])) -> Result<()> {
        if !self.is_leaf() {
            return Err(TensorError::NotALeaf);
        }
        let mut d = self.0.data.borrow_mut();
        f(&mut d);
        Ok(())
    }

    pub fn assign(&self, values: &[f32]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "assign",
                lhs: self.shape().to_vec(),
                rhs: vec![values.len()],
            });
        }
        self.update_data(|d| d.copy_from_slice(values))
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    /// Reverse-mode sweep from a single-element tensor. Gradients are added
    /// to whatever the leaves already hold; call [`Tensor::zero_grad`] to reset.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f32>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            match &t.0.node {
                None => {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(node) => {
                    let needs: Vec<bool> = node.parents.iter().map(Tensor::requires_grad).collect();
                    let grads = (node.backward)(&g, &needs);
                    debug_assert_eq!(grads.len(), node.parents.len(), "{}", node.op);
                    for ((p, gp), need) in node.parents.iter().zip(grads).zip(needs) {
                        let Some(gp) = gp else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(gp.len(), p.numel(), "{} grad size", node.op);
                        match pending.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&gp).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(p.id(), gp);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (tensor, children_pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for p in node.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.data();
        let preview: Vec<f32> = d.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.op_name())
            .field("data", &preview)
            .finish()
    }
}
