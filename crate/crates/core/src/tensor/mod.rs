//! N-dimensional arrays with reverse-mode automatic differentiation.
//!
//! Every operation whose inputs include a gradient-tracking tensor records a
//! node on a dynamic tape. Nodes carry a monotonically increasing sequence
//! number, so the recording order of any graph is recoverable from the nodes
//! themselves; [`Tensor::backward`] replays that order in reverse.

mod autograd;
mod conv;
mod element;
mod elementwise;
mod linalg;
mod norm;
mod reduce;
mod shape_ops;

use std::fmt;
use std::sync::Arc;

pub use autograd::{is_grad_enabled, no_grad, Tape};
pub(crate) use autograd::{BackwardFn, Node};
pub use conv::{conv_output_size, conv_transpose_output_size};
pub use element::Element;
pub(crate) use element::{gemm, MatRef};
pub use norm::BatchStats;

use crate::error::{Error, Result};

/// Row-major real-valued N-dimensional array.
///
/// Cloning is cheap: the buffer is shared, and a clone of a gradient-tracking
/// leaf refers to the same gradient slot.
#[derive(Clone)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    node: Option<Arc<Node<T>>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("from_vec", format!("zero-sized dim in {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    /// Builds a tensor from `f64` values, converting to the element type.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel(shape)]),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn ones_like(&self) -> Self {
        Self::ones(&self.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    /// Converts element type, dropping any tape attachment.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::from_f64(v.as_f64())).collect()),
            node: None,
        }
    }

    /// Returns a copy of this tensor that is not attached to any tape.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Marks this tensor as a differentiable leaf with an empty gradient slot.
    pub fn requires_grad(mut self) -> Self {
        self.node = Some(Arc::new(Node::leaf(self.shape.clone())));
        self
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// True for a leaf created with [`Tensor::requires_grad`].
    pub fn is_leaf(&self) -> bool {
        self.node.as_ref().is_some_and(|n| n.is_leaf())
    }

    /// Accumulated gradient of a leaf, if any backward pass has reached it.
    pub fn grad(&self) -> Option<Tensor<T>> {
        let node = self.node.as_ref()?;
        let grad = node.leaf_grad()?;
        Some(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(grad),
            node: None,
        })
    }

    pub fn zero_grad(&self) {
        if let Some(node) = &self.node {
            node.clear_grad();
        }
    }

    /// Mutates the values of this tensor in place, keeping its tape identity.
    ///
    /// Graphs recorded before the call keep the old values.
    pub fn update_data(&mut self, f: impl FnOnce(&mut [T])) {
        f(Arc::make_mut(&mut self.data).as_mut_slice());
    }

    /// Overwrites the values with `values` (same element count).
    pub fn assign(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::shape(
                "assign",
                format!("{} values into shape {:?}", values.len(), self.shape),
            ));
        }
        self.update_data(|d| d.copy_from_slice(values));
        Ok(())
    }

    pub(crate) fn node(&self) -> Option<&Arc<Node<T>>> {
        self.node.as_ref()
    }

    /// Wraps an op result, recording a tape node when any input is tracked.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        name: &'static str,
        inputs: &[&Tensor<T>],
        backward: impl Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "{name}: result size");
        let node = if is_grad_enabled() && inputs.iter().any(|t| t.node.is_some()) {
            let parents = inputs.iter().map(|t| t.node.clone()).collect();
            Some(Arc::new(Node::op(
                name,
                shape.clone(),
                parents,
                Box::new(backward) as BackwardFn<T>,
            )))
        } else {
            None
        };
        Tensor {
            shape,
            data: Arc::new(data),
            node,
        }
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("dtype", &T::NAME)
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .field("data", &preview)
            .finish()
    }
}
