//! Standard network layers. Each layer caches what its backward pass needs
//! during `forward` and accumulates parameter gradients in `backward`.

mod activation;
mod batchnorm;
mod conv;
mod dense;
mod loss;
mod pool;
mod transpose;

pub use activation::Relu;
pub use batchnorm::{BatchNorm, BN_EPS, BN_MOMENTUM};
pub use conv::Conv2d;
pub use dense::Dense;
pub use loss::softmax_xent;
pub use pool::{pool_out_dim, FixedPool, PoolMode};
pub use transpose::ConvTranspose2d;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor with its gradient buffer and optimizer multipliers.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: &'static str,
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
    pub lr_factor: f64,
    pub wd_factor: f64,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: &'static str, value: Tensor4<T>) -> Self {
        let grad = value.zeros_like();
        Self {
            name,
            value,
            grad,
            lr_factor: 1.0,
            wd_factor: 1.0,
        }
    }

    pub fn with_factors(mut self, lr_factor: f64, wd_factor: f64) -> Self {
        self.lr_factor = lr_factor;
        self.wd_factor = wd_factor;
        self
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

pub trait Layer<T: Scalar>: Send {
    fn kind(&self) -> &'static str;

    fn output_shape(&self, input: Shape4) -> Result<Shape4>;

    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>>;

    /// Returns the input gradient and accumulates parameter gradients.
    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>>;

    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }

    /// Non-trainable state that must survive a checkpoint (running statistics).
    fn buffers(&self) -> Vec<&Tensor4<T>> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor4<T>> {
        Vec::new()
    }

    /// Whether `x` sits far enough from any non-differentiable point for a
    /// finite-difference probe of width ~1e-5 to be meaningful.
    fn smooth_at(&mut self, _x: &Tensor4<T>) -> bool {
        true
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Distance from a kink below which finite differences become unreliable.
pub const KINK_MARGIN: f64 = 1e-3;

pub(crate) fn expect_shape(what: &str, got: Shape4, want: Shape4) -> Result<()> {
    if got != want {
        return Err(Error::shape(format!("{what}: expected {want}, got {got}")));
    }
    Ok(())
}

pub(crate) fn cached<'a, T>(slot: &'a Option<T>, layer: &str) -> Result<&'a T> {
    slot.as_ref()
        .ok_or_else(|| Error::shape(format!("{layer}: backward called without a matching forward")))
}
