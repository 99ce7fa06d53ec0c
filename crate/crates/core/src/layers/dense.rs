use rand::Rng;

use super::{cached, expect_shape, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::init::glorot_init;
use crate::tensor::{gemm, Scalar, Shape4, Tensor4};

/// Fully connected layer. Treats each batch item as a flat feature vector and
/// emits `(batch, out_features, 1, 1)`.
pub struct Dense<T: Scalar> {
    in_features: usize,
    out_features: usize,
    weight: Param<T>,
    bias: Param<T>,
    input: Option<Tensor4<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Result<Self> {
        let w = glorot_init::<T, R>(in_features * out_features, in_features, out_features, rng)?;
        let weight = Tensor4::from_vec(Shape4::new(1, 1, out_features, in_features), w)?;
        let bias = Tensor4::zeros(Shape4::new(1, 1, 1, out_features))?;
        Self::from_params(weight, bias)
    }

    /// `weight` holds `out × in` values row-major.
    pub fn from_params(weight: Tensor4<T>, bias: Tensor4<T>) -> Result<Self> {
        let out_features = bias.len();
        if !weight.len().is_multiple_of(out_features) {
            return Err(Error::shape(format!(
                "dense weight of {} values does not split into {out_features} rows",
                weight.len()
            )));
        }
        let in_features = weight.len() / out_features;
        Ok(Self {
            in_features,
            out_features,
            weight: Param::new("weight", weight.reshape(Shape4::new(1, 1, out_features, in_features))?),
            bias: Param::new("bias", bias.reshape(Shape4::new(1, 1, 1, out_features))?),
            input: None,
        })
    }
}

impl<T: Scalar> Layer<T> for Dense<T> {
    fn kind(&self) -> &'static str {
        "dense"
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        if input.item_len() != self.in_features {
            return Err(Error::shape(format!(
                "dense expects {} features, got {} from {input}",
                self.in_features,
                input.item_len()
            )));
        }
        Ok(Shape4::new(input.batch, self.out_features, 1, 1))
    }

    fn forward(&mut self, x: &Tensor4<T>, _mode: Mode) -> Result<Tensor4<T>> {
        let os = self.output_shape(x.shape())?;
        let (n, i, o) = (os.batch, self.in_features, self.out_features);
        let mut out = Tensor4::zeros(os)?;
        for row in out.data_mut().chunks_exact_mut(o) {
            row.copy_from_slice(self.bias.value.data());
        }
        // Y (n×o) = X (n×i) · Wᵀ (i×o)
        gemm(
            n,
            i,
            o,
            (x.data(), i, 1),
            (self.weight.value.data(), 1, i),
            T::one(),
            out.data_mut(),
        );
        self.input = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = cached(&self.input, "dense")?;
        let os = self.output_shape(x.shape())?;
        expect_shape("dense grad_out", grad_out.shape(), os)?;
        let (n, i, o) = (os.batch, self.in_features, self.out_features);
        let dy = grad_out.data();
        // dW (o×i) += dYᵀ (o×n) · X (n×i)
        gemm(
            o,
            n,
            i,
            (dy, 1, o),
            (x.data(), i, 1),
            T::one(),
            self.weight.grad.data_mut(),
        );
        for row in dy.chunks_exact(o) {
            for (g, &v) in self.bias.grad.data_mut().iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut grad_in = x.zeros_like();
        // dX (n×i) = dY (n×o) · W (o×i)
        gemm(
            n,
            o,
            i,
            (dy, o, 1),
            (self.weight.value.data(), i, 1),
            T::zero(),
            grad_in.data_mut(),
        );
        Ok(grad_in)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
