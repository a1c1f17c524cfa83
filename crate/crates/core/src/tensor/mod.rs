//! Flat `f64` tensors with reverse-mode automatic differentiation.
//!
//! Values live in reference-counted cells; a [`Graph`] is a tape that records
//! one backward step per operation, in creation order. Creation order is a
//! topological order, so a single reverse sweep visits every node after all
//! of its consumers. Tensors participate in a graph only when they are
//! tracked on it (directly via [`Graph::track`] or transitively as the output
//! of an op with a tracked input); ops over untracked tensors compute values
//! only and record nothing, which is how frozen teacher models run without
//! gradient bookkeeping.
//!
//! Gradients accumulate additively: nothing is zeroed implicitly, so a
//! parameter used twice (or reused across micro-batches) sums contributions
//! until [`Tensor::zero_grad`] is called.

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::{Rc, Weak};

use crate::error::{invalid, Error, Result};

mod gradcheck;
mod ops;

pub use gradcheck::{finite_difference_check, finite_difference_check_params};
pub use ops::{concat_last, cross_entropy};

fn shape_numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) struct TensorCell {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Vec<f64>>,
    track: RefCell<Option<TrackInfo>>,
}

struct TrackInfo {
    graph: Weak<RefCell<GraphInner>>,
    node: usize,
}

/// A dense tensor of `f64` values in row-major order.
///
/// Cloning a `Tensor` clones the handle, not the storage: clones share data
/// and gradient buffers. Data is interior-mutable so optimizers can update
/// parameters in place between steps.
#[derive(Clone)]
pub struct Tensor {
    cell: Rc<TensorCell>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.cell.shape)
            .field("node", &self.node_id())
            .finish()
    }
}

impl Tensor {
    /// Build a tensor from a shape and row-major data.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(invalid!("tensor shape must have at least one axis"));
        }
        if shape_numel(&shape) != data.len() {
            return Err(invalid!(
                "shape {:?} implies {} elements but {} were provided",
                shape,
                shape_numel(&shape),
                data.len()
            ));
        }
        let n = data.len();
        Ok(Tensor {
            cell: Rc::new(TensorCell {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(vec![0.0; n]),
                track: RefCell::new(None),
            }),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape_numel(&shape);
        Tensor::from_vec(shape, vec![0.0; n]).expect("consistent by construction")
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape_numel(&shape);
        Tensor::from_vec(shape, vec![value; n]).expect("consistent by construction")
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(vec![1], vec![value]).expect("consistent by construction")
    }

    pub fn shape(&self) -> &[usize] {
        &self.cell.shape
    }

    pub fn ndim(&self) -> usize {
        self.cell.shape.len()
    }

    pub fn numel(&self) -> usize {
        shape_numel(&self.cell.shape)
    }

    /// Borrow the values. The borrow must be released before any op writes
    /// to this tensor (ops never write to their inputs).
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.cell.data.borrow(), Vec::as_slice)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.cell.data.borrow().clone()
    }

    /// Borrow the accumulated gradient (same layout as the values).
    pub fn grad(&self) -> Ref<'_, [f64]> {
        Ref::map(self.cell.grad.borrow(), Vec::as_slice)
    }

    pub fn grad_vec(&self) -> Vec<f64> {
        self.cell.grad.borrow().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(invalid!("item() on tensor of shape {:?}", self.shape()));
        }
        Ok(self.cell.data.borrow()[0])
    }

    /// Overwrite the values in place (shape is fixed at construction).
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(invalid!(
                "set_data with {} values on tensor of {} elements",
                values.len(),
                self.numel()
            ));
        }
        self.cell.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn set_element(&self, index: usize, value: f64) {
        self.cell.data.borrow_mut()[index] = value;
    }

    pub fn zero_grad(&self) {
        for g in self.cell.grad.borrow_mut().iter_mut() {
            *g = 0.0;
        }
    }

    /// A new tensor with copied values and no graph membership: a constant.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(self.cell.shape.clone(), self.to_vec())
            .expect("consistent by construction")
    }

    /// Node id within the graph this tensor is tracked on, if that graph is
    /// still alive.
    pub fn node_id(&self) -> Option<usize> {
        let track = self.cell.track.borrow();
        track
            .as_ref()
            .filter(|t| t.graph.strong_count() > 0)
            .map(|t| t.node)
    }

    fn live_graph(&self) -> Option<Rc<RefCell<GraphInner>>> {
        self.cell.track.borrow().as_ref().and_then(|t| t.graph.upgrade())
    }

    /// Whether this tensor currently participates in a live graph.
    pub fn is_tracked(&self) -> bool {
        self.live_graph().is_some()
    }

    pub(crate) fn cell(&self) -> &Rc<TensorCell> {
        &self.cell
    }
}

impl TensorCell {
    pub(crate) fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.data.borrow(), Vec::as_slice)
    }

    pub(crate) fn grad(&self) -> Ref<'_, [f64]> {
        Ref::map(self.grad.borrow(), Vec::as_slice)
    }

    pub(crate) fn grad_mut(&self) -> std::cell::RefMut<'_, Vec<f64>> {
        self.grad.borrow_mut()
    }
}

/// Integer tensor for token ids and targets. Immutable after creation and
/// never differentiated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<u32>,
}

impl IntTensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<u32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(invalid!("int tensor shape must have at least one axis"));
        }
        if shape_numel(&shape) != data.len() {
            return Err(invalid!(
                "shape {:?} implies {} elements but {} were provided",
                shape,
                shape_numel(&shape),
                data.len()
            ));
        }
        Ok(IntTensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }
}

type BackwardFn = Box<dyn Fn()>;

struct Step {
    op: &'static str,
    #[allow(dead_code)] // recorded for debugging and graph inspection
    inputs: Vec<usize>,
    apply: BackwardFn,
}

pub(crate) struct GraphInner {
    steps: Vec<Step>,
    node_count: usize,
    backward_done: bool,
}

/// A reverse-mode tape.
///
/// Operations involving at least one tracked tensor append a backward step;
/// [`Graph::backward`] seeds the loss gradient with 1 and replays the steps
/// in reverse. A graph runs backward at most once; build a fresh graph per
/// training step.
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                steps: Vec::new(),
                node_count: 0,
                backward_done: false,
            })),
        }
    }

    /// Register `tensor` as a leaf of this graph so gradients reach it.
    /// Tracking the same tensor twice is a no-op; a tensor cannot belong to
    /// two live graphs at once.
    pub fn track(&self, tensor: &Tensor) -> Result<()> {
        if let Some(existing) = tensor.live_graph() {
            if Rc::ptr_eq(&existing, &self.inner) {
                return Ok(());
            }
            return Err(Error::State(
                "tensor is already tracked on a different live graph".into(),
            ));
        }
        let node = self.fresh_node();
        *tensor.cell.track.borrow_mut() = Some(TrackInfo {
            graph: Rc::downgrade(&self.inner),
            node,
        });
        Ok(())
    }

    fn fresh_node(&self) -> usize {
        let mut inner = self.inner.borrow_mut();
        let id = inner.node_count;
        inner.node_count += 1;
        id
    }

    /// Attach `out` as the result of `op` over `inputs` and record the
    /// backward step. `inputs` lists the tracked inputs only.
    pub(crate) fn record(&self, out: &Tensor, op: &'static str, inputs: &[&Tensor], apply: BackwardFn) {
        let node = self.fresh_node();
        *out.cell.track.borrow_mut() = Some(TrackInfo {
            graph: Rc::downgrade(&self.inner),
            node,
        });
        let input_ids = inputs.iter().filter_map(|t| t.node_id()).collect();
        self.inner.borrow_mut().steps.push(Step {
            op,
            inputs: input_ids,
            apply,
        });
    }

    /// Number of operations recorded so far.
    pub fn op_count(&self) -> usize {
        self.inner.borrow().steps.len()
    }

    /// Names of recorded operations, in insertion (topological) order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.inner.borrow().steps.iter().map(|s| s.op).collect()
    }

    /// Propagate gradients from a scalar loss to every tracked tensor.
    ///
    /// Seeds the loss gradient with 1 and applies the recorded steps in
    /// reverse insertion order. Gradients add onto whatever the buffers
    /// already hold. Errors if the loss is not a one-element tensor tracked
    /// on this graph, or if backward already ran.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(invalid!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            ));
        }
        match loss.live_graph() {
            Some(g) if Rc::ptr_eq(&g, &self.inner) => {}
            _ => {
                return Err(invalid!(
                    "backward requires a loss tracked on this graph"
                ))
            }
        }
        {
            let mut inner = self.inner.borrow_mut();
            if inner.backward_done {
                return Err(Error::State(
                    "backward already ran on this graph; build a new graph per step".into(),
                ));
            }
            inner.backward_done = true;
        }
        loss.cell.grad.borrow_mut()[0] += 1.0;
        // Steps must not be borrowed from the RefCell while closures run
        // (closures only touch tensor cells, but keep the borrow local anyway).
        let inner = self.inner.borrow();
        for step in inner.steps.iter().rev() {
            (step.apply)();
        }
        Ok(())
    }

    pub(crate) fn same_inner(&self, other: &Rc<RefCell<GraphInner>>) -> bool {
        Rc::ptr_eq(&self.inner, other)
    }

    pub(crate) fn clone_ref(inner: &Rc<RefCell<GraphInner>>) -> Graph {
        Graph {
            inner: Rc::clone(inner),
        }
    }
}

/// The live graph shared by the tracked members of `tensors`, if any.
/// Errors when two inputs are tracked on different live graphs.
pub(crate) fn joint_graph(tensors: &[&Tensor]) -> Result<Option<Graph>> {
    let mut found: Option<Rc<RefCell<GraphInner>>> = None;
    for t in tensors {
        if let Some(g) = t.live_graph() {
            match &found {
                None => found = Some(g),
                Some(existing) if Rc::ptr_eq(existing, &g) => {}
                Some(_) => {
                    return Err(Error::State(
                        "operation mixes tensors from two different live graphs".into(),
                    ))
                }
            }
        }
    }
    Ok(found.map(|inner| Graph::clone_ref(&inner)))
}
