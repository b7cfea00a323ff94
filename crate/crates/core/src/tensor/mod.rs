//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every operation on a tensor that requires a gradient records a node with
//! its inputs and a backward rule. Node ids are allocated monotonically, so
//! sorting reachable nodes by descending id is a valid reverse topological
//! order. Graphs are single-use: [`Tensor::backward`] walks the graph once and
//! accumulates into the `grad` buffers of leaf tensors; those buffers keep
//! accumulating across calls until [`Tensor::zero_grad`].

mod float;
pub mod gradcheck;
mod linalg;
mod nn;
mod ops;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

pub use float::{DType, Float};
pub(crate) use float::{gemm, MatView};
pub use nn::ssim_window;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    Config { op: &'static str, msg: String },
    #[error("{op}: invalid input: {msg}")]
    Input { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Backward rule: `(output data, output gradient, which inputs need a gradient)`
/// to one optional gradient per input.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[T], &[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct GradFn<T: Float> {
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Float> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

/// A reference-counted, immutable n-dimensional array.
///
/// Cloning is cheap and shares the underlying buffer.
pub struct Tensor<T: Float = f32> {
    node: Arc<Node<T>>,
}

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self { node: Arc::clone(&self.node) }
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Float> Tensor<T> {
    fn leaf(data: Arc<Vec<T>>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Self {
            node: Arc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                grad_fn: None,
            }),
        }
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Input {
                op: "from_vec",
                msg: format!("dimensions must be positive, got {shape:?}"),
            });
        }
        if numel(shape) != data.len() {
            return Err(TensorError::Input {
                op: "from_vec",
                msg: format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            });
        }
        Ok(Self::leaf(Arc::new(data), shape.to_vec(), false))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&x| T::of(x)).collect(), shape)
    }

    pub fn scalar(x: T) -> Self {
        Self::leaf(Arc::new(vec![x]), Vec::new(), false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::leaf(Arc::new(vec![value; numel(shape)]), shape.to_vec(), false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// A fresh leaf sharing this tensor's data that participates in autodiff.
    pub fn requires_grad(self) -> Self {
        Self::leaf(Arc::clone(&self.node.data), self.node.shape.clone(), true)
    }

    /// A fresh leaf sharing this tensor's data, cut off from any graph.
    pub fn detach(&self) -> Self {
        Self::leaf(Arc::clone(&self.node.data), self.node.shape.clone(), false)
    }

    /// Builds an op output. Records `backward` only when some input needs a gradient.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        inputs: &[&Tensor<T>],
        backward: impl Fn(&[T], &[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = inputs.iter().any(|t| t.node.requires_grad);
        let grad_fn = requires_grad.then(|| GradFn {
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward: Box::new(backward),
        });
        Self {
            node: Arc::new(Node {
                id: next_id(),
                shape,
                data: Arc::new(data),
                requires_grad,
                grad: Mutex::new(None),
                grad_fn,
            }),
        }
    }

    /// Same data under a new shape, sharing the buffer.
    pub(crate) fn share_with_shape(&self, shape: Vec<usize>) -> Self {
        let requires_grad = self.node.requires_grad;
        let grad_fn = requires_grad.then(|| GradFn {
            inputs: vec![self.clone()],
            backward: Box::new(|_: &[T], g: &[T], _: &[bool]| vec![Some(g.to_vec())])
                as BackwardFn<T>,
        });
        Self {
            node: Arc::new(Node {
                id: next_id(),
                shape,
                data: Arc::clone(&self.node.data),
                requires_grad,
                grad: Mutex::new(None),
                grad_fn,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.node.data)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.iter().map(|x| x.f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    /// Adds `g` into this leaf's gradient buffer.
    pub fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.node.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Scales the accumulated gradient in place.
    pub fn scale_grad(&self, s: T) {
        if let Some(acc) = self.node.grad.lock().expect("grad lock").as_mut() {
            acc.iter_mut().for_each(|a| *a *= s);
        }
    }

    /// Mutable access to the data of an unshared leaf; copies the buffer when
    /// it is still referenced elsewhere. The gradient buffer is kept.
    pub fn data_mut(&mut self) -> &mut [T] {
        if Arc::get_mut(&mut self.node).is_none() {
            let grad = self.grad();
            let fresh = Self::leaf(
                Arc::new(self.node.data.to_vec()),
                self.node.shape.clone(),
                self.node.requires_grad,
            );
            *fresh.node.grad.lock().expect("grad lock") = grad;
            *self = fresh;
        }
        let node = Arc::get_mut(&mut self.node).expect("unique node");
        Arc::make_mut(&mut node.data).as_mut_slice()
    }

    /// Reverse-mode sweep from a scalar loss into every reachable leaf that
    /// requires a gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.node.requires_grad {
            return Ok(());
        }
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(f) = &t.node.grad_fn {
                for inp in &f.inputs {
                    if inp.node.requires_grad && !seen.contains(&inp.id()) {
                        stack.push(inp.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_by_key(|t| std::cmp::Reverse(t.id()));

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for t in &order {
            let Some(g) = grads.remove(&t.id()) else { continue };
            match &t.node.grad_fn {
                Some(f) => {
                    let needs: Vec<bool> = f.inputs.iter().map(|i| i.node.requires_grad).collect();
                    let input_grads = (f.backward)(&t.node.data, &g, &needs);
                    debug_assert_eq!(input_grads.len(), f.inputs.len());
                    for (inp, ig) in f.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !inp.node.requires_grad {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), inp.numel());
                        match grads.get_mut(&inp.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                            None => {
                                grads.insert(inp.id(), ig);
                            }
                        }
                    }
                }
                None => t.accumulate_grad(&g),
            }
        }
        Ok(())
    }
}

pub(crate) fn check_same_shape<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::<f64>::from_f64(&[1.0, -2.0, 3.5], &[3]).unwrap().requires_grad();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let x = Tensor::<f64>::from_f64(&[1.0, 2.0], &[2]).unwrap().requires_grad();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::<f64>::ones(&[2]).requires_grad();
        assert!(matches!(x.backward(), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let x = Tensor::<f64>::from_f64(&[3.0], &[1]).unwrap().requires_grad();
        for _ in 0..2 {
            x.mul_scalar(2.0).sum().backward().unwrap();
        }
        assert_eq!(x.grad().unwrap(), vec![4.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn shared_subexpression_gets_both_paths() {
        let x = Tensor::<f64>::from_f64(&[2.0], &[1]).unwrap().requires_grad();
        let y = x.exp();
        let z = y.add(&y).unwrap().sum();
        z.backward().unwrap();
        approx::assert_relative_eq!(x.grad().unwrap()[0], 2.0 * 2f64.exp(), epsilon = 1e-12);
    }

    #[test]
    fn shape_must_be_positive() {
        assert!(Tensor::<f32>::from_vec(vec![], &[0]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![1.0], &[2]).is_err());
    }

    #[test]
    fn data_mut_keeps_gradient() {
        let mut x = Tensor::<f64>::from_f64(&[1.0, 2.0], &[2]).unwrap().requires_grad();
        x.sum().backward().unwrap();
        let keep = x.clone();
        x.data_mut()[0] = 5.0;
        assert_eq!(x.data(), &[5.0, 2.0]);
        assert_eq!(keep.data(), &[1.0, 2.0]);
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
    }
}
