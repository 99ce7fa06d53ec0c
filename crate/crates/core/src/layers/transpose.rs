use rand::Rng;

use super::{cached, expect_shape, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::init::glorot_init;
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Transposed convolution with kernel == stride (non-overlapping `u×u` blocks),
/// the usual learned ×u upscaling baseline.
pub struct ConvTranspose2d<T: Scalar> {
    in_channels: usize,
    out_channels: usize,
    factor: usize,
    /// `(in, out, u, u)`
    weight: Param<T>,
    bias: Param<T>,
    input: Option<Tensor4<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, factor: usize, rng: &mut R) -> Result<Self> {
        if factor < 2 {
            return Err(Error::config("transposed convolution factor must be at least 2"));
        }
        let taps = factor * factor;
        let w = glorot_init::<T, R>(
            in_channels * out_channels * taps,
            in_channels * taps,
            out_channels * taps,
            rng,
        )?;
        Ok(Self {
            in_channels,
            out_channels,
            factor,
            weight: Param::new(
                "weight",
                Tensor4::from_vec(Shape4::new(in_channels, out_channels, factor, factor), w)?,
            ),
            bias: Param::new("bias", Tensor4::zeros(Shape4::new(1, 1, 1, out_channels))?),
            input: None,
        })
    }
}

impl<T: Scalar> Layer<T> for ConvTranspose2d<T> {
    fn kind(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        if input.channels != self.in_channels {
            return Err(Error::shape(format!(
                "transposed conv expects {} channels, got {}",
                self.in_channels, input.channels
            )));
        }
        Ok(Shape4::new(
            input.batch,
            self.out_channels,
            input.height * self.factor,
            input.width * self.factor,
        ))
    }

    fn forward(&mut self, x: &Tensor4<T>, _mode: Mode) -> Result<Tensor4<T>> {
        let s = x.shape();
        let os = self.output_shape(s)?;
        let u = self.factor;
        let w = &self.weight.value;
        let mut out = Tensor4::zeros(os)?;
        for b in 0..s.batch {
            for o in 0..self.out_channels {
                let bias = self.bias.value.data()[o];
                for i in 0..s.height {
                    for j in 0..s.width {
                        for dy in 0..u {
                            for dx in 0..u {
                                let mut acc = bias;
                                for c in 0..s.channels {
                                    acc += w.get(c, o, dy, dx) * x.get(b, c, i, j);
                                }
                                out.set(b, o, i * u + dy, j * u + dx, acc);
                            }
                        }
                    }
                }
            }
        }
        self.input = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = cached(&self.input, "conv_transpose2d")?;
        let s = x.shape();
        expect_shape("transposed conv grad_out", grad_out.shape(), self.output_shape(s)?)?;
        let u = self.factor;
        let mut grad_in = x.zeros_like();
        let ws = self.weight.value.shape();
        for b in 0..s.batch {
            for o in 0..self.out_channels {
                for i in 0..s.height {
                    for j in 0..s.width {
                        for dy in 0..u {
                            for dx in 0..u {
                                let g = grad_out.get(b, o, i * u + dy, j * u + dx);
                                self.bias.grad.data_mut()[o] += g;
                                for c in 0..s.channels {
                                    let wi = ws.offset(c, o, dy, dx);
                                    self.weight.grad.data_mut()[wi] += g * x.get(b, c, i, j);
                                    let xi = s.offset(b, c, i, j);
                                    grad_in.data_mut()[xi] += g * self.weight.value.data()[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(grad_in)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_and_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut up = ConvTranspose2d::<f64>::new(3, 2, 2, &mut rng).unwrap();
        assert_eq!(up.param_count(), 3 * 2 * 4 + 2);
        let y = up
            .forward(&Tensor4::new(Shape4::new(2, 3, 4, 5), 1.0).unwrap(), Mode::Train)
            .unwrap();
        assert_eq!(y.shape(), Shape4::new(2, 2, 8, 10));
    }
}
