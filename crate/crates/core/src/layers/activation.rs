use super::{cached, expect_shape, Layer, Mode, KINK_MARGIN};
use crate::error::Result;
use crate::tensor::{Scalar, Shape4, Tensor4};

#[derive(Default)]
pub struct Relu<T: Scalar> {
    input: Option<Tensor4<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { input: None }
    }
}

impl<T: Scalar> Layer<T> for Relu<T> {
    fn kind(&self) -> &'static str {
        "relu"
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        Ok(input)
    }

    fn forward(&mut self, x: &Tensor4<T>, _mode: Mode) -> Result<Tensor4<T>> {
        self.input = Some(x.clone());
        Ok(x.map(|v| v.max(T::zero())))
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = cached(&self.input, "relu")?;
        expect_shape("relu grad_out", grad_out.shape(), x.shape())?;
        let mut g = grad_out.clone();
        for (g, &v) in g.data_mut().iter_mut().zip(x.data()) {
            if v <= T::zero() {
                *g = T::zero();
            }
        }
        Ok(g)
    }

    fn smooth_at(&mut self, x: &Tensor4<T>) -> bool {
        x.data().iter().all(|v| v.f64().abs() > KINK_MARGIN)
    }
}
