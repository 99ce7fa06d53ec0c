use super::{cached, expect_shape, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

struct Saved<T: Scalar> {
    mode: Mode,
    xhat: Tensor4<T>,
    inv_std: Vec<T>,
}

/// Per-channel batch normalization over (batch, row, column).
pub struct BatchNorm<T: Scalar> {
    channels: usize,
    eps: f64,
    momentum: f64,
    gamma: Param<T>,
    beta: Param<T>,
    running_mean: Tensor4<T>,
    running_var: Tensor4<T>,
    saved: Option<Saved<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Self::with_hyper(channels, BN_EPS, BN_MOMENTUM)
    }

    pub fn with_hyper(channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        if eps <= 0.0 || !(0.0..1.0).contains(&momentum) || momentum == 0.0 {
            return Err(Error::config(format!(
                "batchnorm eps {eps} / momentum {momentum} out of range"
            )));
        }
        let vec_shape = Shape4::new(1, 1, 1, channels);
        Ok(Self {
            channels,
            eps,
            momentum,
            gamma: Param::new("gamma", Tensor4::new(vec_shape, T::one())?),
            beta: Param::new("beta", Tensor4::zeros(vec_shape)?),
            running_mean: Tensor4::zeros(vec_shape)?,
            running_var: Tensor4::new(vec_shape, T::one())?,
            saved: None,
        })
    }

    pub fn gamma_mut(&mut self) -> &mut Param<T> {
        &mut self.gamma
    }

    pub fn beta_mut(&mut self) -> &mut Param<T> {
        &mut self.beta
    }

    pub fn running_mean(&self) -> &Tensor4<T> {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Tensor4<T> {
        &self.running_var
    }
}

impl<T: Scalar> Layer<T> for BatchNorm<T> {
    fn kind(&self) -> &'static str {
        "batchnorm"
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        if input.channels != self.channels {
            return Err(Error::shape(format!(
                "batchnorm expects {} channels, got {}",
                self.channels, input.channels
            )));
        }
        Ok(input)
    }

    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let s = self.output_shape(x.shape())?;
        let plane = s.plane();
        let count = s.batch * plane;
        let eps = T::of(self.eps);
        let mut mean = vec![T::zero(); s.channels];
        let mut var = vec![T::zero(); s.channels];
        match mode {
            Mode::Train => {
                let n = T::of(count as f64);
                for b in 0..s.batch {
                    for (c, m) in mean.iter_mut().enumerate() {
                        let o = s.offset(b, c, 0, 0);
                        *m += x.data()[o..o + plane].iter().copied().sum::<T>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                for b in 0..s.batch {
                    for c in 0..s.channels {
                        let o = s.offset(b, c, 0, 0);
                        for &v in &x.data()[o..o + plane] {
                            var[c] += (v - mean[c]) * (v - mean[c]);
                        }
                    }
                }
                var.iter_mut().for_each(|v| *v /= n);
                let m = T::of(self.momentum);
                let unbias = if count > 1 {
                    T::of(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                for c in 0..s.channels {
                    let rm = &mut self.running_mean.data_mut()[c];
                    *rm = (T::one() - m) * *rm + m * mean[c];
                    let rv = &mut self.running_var.data_mut()[c];
                    *rv = (T::one() - m) * *rv + m * var[c] * unbias;
                }
            }
            Mode::Eval => {
                mean.copy_from_slice(self.running_mean.data());
                var.copy_from_slice(self.running_var.data());
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = x.zeros_like();
        let mut out = x.zeros_like();
        for b in 0..s.batch {
            for c in 0..s.channels {
                let o = s.offset(b, c, 0, 0);
                let (g, bt) = (self.gamma.value.data()[c], self.beta.value.data()[c]);
                for k in o..o + plane {
                    let h = (x.data()[k] - mean[c]) * inv_std[c];
                    xhat.data_mut()[k] = h;
                    out.data_mut()[k] = g * h + bt;
                }
            }
        }
        self.saved = Some(Saved { mode, xhat, inv_std });
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let saved = cached(&self.saved, "batchnorm")?;
        let s = saved.xhat.shape();
        expect_shape("batchnorm grad_out", grad_out.shape(), s)?;
        let plane = s.plane();
        let n = T::of((s.batch * plane) as f64);
        let mut sum_dy = vec![T::zero(); s.channels];
        let mut sum_dy_xhat = vec![T::zero(); s.channels];
        for b in 0..s.batch {
            for c in 0..s.channels {
                let o = s.offset(b, c, 0, 0);
                for k in o..o + plane {
                    let dy = grad_out.data()[k];
                    sum_dy[c] += dy;
                    sum_dy_xhat[c] += dy * saved.xhat.data()[k];
                }
            }
        }
        for c in 0..s.channels {
            self.gamma.grad.data_mut()[c] += sum_dy_xhat[c];
            self.beta.grad.data_mut()[c] += sum_dy[c];
        }
        let mut grad_in = grad_out.zeros_like();
        for b in 0..s.batch {
            for c in 0..s.channels {
                let o = s.offset(b, c, 0, 0);
                let scale = self.gamma.value.data()[c] * saved.inv_std[c];
                for k in o..o + plane {
                    let dy = grad_out.data()[k];
                    grad_in.data_mut()[k] = match saved.mode {
                        Mode::Eval => scale * dy,
                        Mode::Train => scale * (dy - sum_dy[c] / n - saved.xhat.data()[k] * sum_dy_xhat[c] / n),
                    };
                }
            }
        }
        Ok(grad_in)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<&Tensor4<T>> {
        vec![&self.running_mean, &self.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor4<T>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}
