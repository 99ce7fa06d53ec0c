use rand::Rng;

use super::{cached, expect_shape, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::init::glorot_init;
use crate::tensor::{gemm, Scalar, Shape4, Tensor4};

/// 2-D cross-correlation with zero padding, lowered to im2col + GEMM.
pub struct Conv2d<T: Scalar> {
    in_channels: usize,
    out_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    pad: usize,
    weight: Param<T>,
    bias: Param<T>,
    input: Option<Tensor4<T>>,
}

#[derive(Clone, Copy)]
struct Geometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Calls `f(col_row, col_col, input_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let p = self.positions();
        for c in 0..self.in_c {
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let row = (c * self.kh + dy) * self.kw + dx;
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + dy) as isize - self.pad as isize;
                        if y < 0 || y >= self.in_h as isize {
                            continue;
                        }
                        let base = (c * self.in_h + y as usize) * self.in_w;
                        for ox in 0..self.out_w {
                            let x = (ox * self.stride + dx) as isize - self.pad as isize;
                            if x < 0 || x >= self.in_w as isize {
                                continue;
                            }
                            f(row * p, oy * self.out_w + ox, base + x as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, item: &[T], col: &mut [T]) {
        col.fill(T::zero());
        self.for_each_tap(|r, p, i| col[r + p] = item[i]);
    }

    fn col2im<T: Scalar>(&self, col: &[T], item: &mut [T]) {
        self.for_each_tap(|r, p, i| item[i] += col[r + p]);
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let fan_out = out_channels * kernel * kernel;
        let w = glorot_init::<T, R>(out_channels * fan_in, fan_in, fan_out, rng)?;
        let weight = Tensor4::from_vec(Shape4::new(out_channels, in_channels, kernel, kernel), w)?;
        let bias = Tensor4::zeros(Shape4::new(1, 1, 1, out_channels))?;
        Self::from_params(weight, bias, stride, pad)
    }

    /// Builds a layer from explicit `(out, in, kh, kw)` weights and a bias of `out` values.
    pub fn from_params(weight: Tensor4<T>, bias: Tensor4<T>, stride: usize, pad: usize) -> Result<Self> {
        let ws = weight.shape();
        if bias.len() != ws.batch {
            return Err(Error::shape(format!(
                "conv bias has {} values for {} output channels",
                bias.len(),
                ws.batch
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv stride must be at least 1"));
        }
        let bias = bias.reshape(Shape4::new(1, 1, 1, ws.batch))?;
        Ok(Self {
            in_channels: ws.channels,
            out_channels: ws.batch,
            kernel_h: ws.height,
            kernel_w: ws.width,
            stride,
            pad,
            weight: Param::new("weight", weight),
            bias: Param::new("bias", bias),
            input: None,
        })
    }

    pub fn weight(&self) -> &Param<T> {
        &self.weight
    }

    pub fn bias(&self) -> &Param<T> {
        &self.bias
    }

    fn geometry(&self, s: Shape4) -> Result<Geometry> {
        if s.channels != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, s.channels
            )));
        }
        let out = |dim: usize, k: usize| -> Result<usize> {
            let padded = dim + 2 * self.pad;
            if padded < k {
                return Err(Error::shape(format!(
                    "conv kernel {k} larger than padded input {padded}"
                )));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok(Geometry {
            in_c: s.channels,
            in_h: s.height,
            in_w: s.width,
            kh: self.kernel_h,
            kw: self.kernel_w,
            stride: self.stride,
            pad: self.pad,
            out_h: out(s.height, self.kernel_h)?,
            out_w: out(s.width, self.kernel_w)?,
        })
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn kind(&self) -> &'static str {
        "conv2d"
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        let g = self.geometry(input)?;
        Ok(Shape4::new(input.batch, self.out_channels, g.out_h, g.out_w))
    }

    fn forward(&mut self, x: &Tensor4<T>, _mode: Mode) -> Result<Tensor4<T>> {
        let s = x.shape();
        let g = self.geometry(s)?;
        let (k, p) = (g.patch(), g.positions());
        let mut out = Tensor4::zeros(Shape4::new(s.batch, self.out_channels, g.out_h, g.out_w))?;
        let mut col = vec![T::zero(); k * p];
        let out_item = self.out_channels * p;
        let bias = self.bias.value.data();
        for b in 0..s.batch {
            let item = &x.data()[b * s.item_len()..(b + 1) * s.item_len()];
            g.im2col(item, &mut col);
            let dst = &mut out.data_mut()[b * out_item..(b + 1) * out_item];
            for (o, chunk) in dst.chunks_exact_mut(p).enumerate() {
                chunk.fill(bias[o]);
            }
            gemm(
                self.out_channels,
                k,
                p,
                (self.weight.value.data(), k, 1),
                (&col, p, 1),
                T::one(),
                dst,
            );
        }
        self.input = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = cached(&self.input, "conv2d")?;
        let s = x.shape();
        let g = self.geometry(s)?;
        expect_shape(
            "conv2d grad_out",
            grad_out.shape(),
            Shape4::new(s.batch, self.out_channels, g.out_h, g.out_w),
        )?;
        let (k, p) = (g.patch(), g.positions());
        let out_item = self.out_channels * p;
        let mut grad_in = x.zeros_like();
        let mut col = vec![T::zero(); k * p];
        let mut dcol = vec![T::zero(); k * p];
        for b in 0..s.batch {
            let item = &x.data()[b * s.item_len()..(b + 1) * s.item_len()];
            let dy = &grad_out.data()[b * out_item..(b + 1) * out_item];
            g.im2col(item, &mut col);
            // dW (out×k) += dY (out×p) · colᵀ (p×k)
            gemm(
                self.out_channels,
                p,
                k,
                (dy, p, 1),
                (&col, 1, p),
                T::one(),
                self.weight.grad.data_mut(),
            );
            for (o, chunk) in dy.chunks_exact(p).enumerate() {
                let s: T = chunk.iter().copied().sum();
                self.bias.grad.data_mut()[o] += s;
            }
            // dcol (k×p) = Wᵀ (k×out) · dY (out×p)
            gemm(
                k,
                self.out_channels,
                p,
                (self.weight.value.data(), 1, k),
                (dy, p, 1),
                T::zero(),
                &mut dcol,
            );
            let dst = &mut grad_in.data_mut()[b * s.item_len()..(b + 1) * s.item_len()];
            g.col2im(&dcol, dst);
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

    fn tensor(shape: Shape4, data: Vec<f64>) -> Tensor4<f64> {
        Tensor4::from_vec(shape, data).unwrap()
    }

    /// Direct nested-loop cross-correlation.
    #[allow(clippy::needless_range_loop)]
    fn conv_oracle(x: &Tensor4<f64>, w: &Tensor4<f64>, bias: &[f64], stride: usize, pad: usize) -> Tensor4<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let oh = (xs.height + 2 * pad - ws.height) / stride + 1;
        let ow = (xs.width + 2 * pad - ws.width) / stride + 1;
        let mut out = Tensor4::zeros(Shape4::new(xs.batch, ws.batch, oh, ow)).unwrap();
        for b in 0..xs.batch {
            for o in 0..ws.batch {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = bias[o];
                        for c in 0..xs.channels {
                            for dy in 0..ws.height {
                                for dx in 0..ws.width {
                                    let y = (i * stride + dy) as isize - pad as isize;
                                    let xx = (j * stride + dx) as isize - pad as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < xs.height && (xx as usize) < xs.width {
                                        acc += w.get(o, c, dy, dx) * x.get(b, c, y as usize, xx as usize);
                                    }
                                }
                            }
                        }
                        out.set(b, o, i, j, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn scalar_kernel() {
        let w = tensor(Shape4::new(1, 1, 1, 1), vec![2.0]);
        let b = tensor(Shape4::new(1, 1, 1, 1), vec![0.0]);
        let mut conv = Conv2d::from_params(w, b, 1, 0).unwrap();
        let y = conv
            .forward(&tensor(Shape4::new(1, 1, 1, 1), vec![3.0]), Mode::Train)
            .unwrap();
        assert_eq!(y.data(), &[6.0]);
        let gi = conv.backward(&tensor(Shape4::new(1, 1, 1, 1), vec![1.5])).unwrap();
        assert_eq!(gi.data(), &[3.0]);
    }

    #[test]
    fn ones_kernel_stride_two_sums() {
        let w = tensor(Shape4::new(1, 1, 2, 2), vec![1.0; 4]);
        let b = tensor(Shape4::new(1, 1, 1, 1), vec![0.0]);
        let mut conv = Conv2d::from_params(w, b, 2, 0).unwrap();
        let y = conv
            .forward(&tensor(Shape4::new(1, 1, 2, 2), vec![1., 2., 3., 4.]), Mode::Train)
            .unwrap();
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = crate::init::uniform_tensor::<f64, _>(Shape4::new(2, 2, 3, 3), -1.0, 1.0, &mut rng);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let mut conv = Conv2d::<f64>::new(2, 3, 2, stride, pad, &mut rng).unwrap();
            for v in conv.bias.value.data_mut() {
                *v = rand::Rng::random_range(&mut rng, -1.0..1.0);
            }
            let want = conv_oracle(&x, &conv.weight.value, conv.bias.value.data(), stride, pad);
            let got = conv.forward(&x, Mode::Train).unwrap();
            assert!(got.max_abs_diff(&want) < 1e-12, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::<f64>::new(2, 2, 3, 1, 1, &mut rng).unwrap();
        let x = crate::init::uniform_tensor::<f64, _>(Shape4::new(1, 2, 4, 4), -1.0, 1.0, &mut rng);
        let y = conv.forward(&x, Mode::Train).unwrap();
        let gi = conv.backward(&y.zeros_like()).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(conv.weight.grad.data().iter().all(|&v| v == 0.0));
        assert!(conv.bias.grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f32>::new(3, 4, 3, 1, 1, &mut rng).unwrap();
        let x = Tensor4::zeros(Shape4::new(1, 2, 4, 4)).unwrap();
        assert!(conv.forward(&x, Mode::Train).is_err());
        assert!(Conv2d::<f32>::new(3, 4, 3, 1, 1, &mut rng)
            .unwrap()
            .backward(&x)
            .is_err());
    }
}
