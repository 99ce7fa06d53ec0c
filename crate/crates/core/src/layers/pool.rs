use super::{cached, expect_shape, Layer, Mode, KINK_MARGIN};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Output extent of a pooling window. Pooling never pads, so the window must tile
/// the input exactly.
pub fn pool_out_dim(in_dim: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(Error::config("pooling window and stride must be at least 1"));
    }
    if in_dim < window {
        return Err(Error::config(format!(
            "pooling window {window} exceeds input extent {in_dim}"
        )));
    }
    if !(in_dim - window).is_multiple_of(stride) {
        return Err(Error::config(format!(
            "pooling window {window} with stride {stride} does not tile input extent {in_dim}"
        )));
    }
    Ok((in_dim - window) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Average,
}

enum Saved {
    Max {
        input: Shape4,
        argmax: Vec<usize>,
        output: Shape4,
    },
    Average {
        input: Shape4,
        output: Shape4,
    },
}

/// Parameter-free max or average pooling.
pub struct FixedPool {
    mode: PoolMode,
    window_h: usize,
    window_w: usize,
    stride: usize,
    saved: Option<Saved>,
}

impl FixedPool {
    pub fn new(mode: PoolMode, window_h: usize, window_w: usize, stride: usize) -> Self {
        Self {
            mode,
            window_h,
            window_w,
            stride,
            saved: None,
        }
    }

    pub fn max(window: usize, stride: usize) -> Self {
        Self::new(PoolMode::Max, window, window, stride)
    }

    pub fn average(window: usize, stride: usize) -> Self {
        Self::new(PoolMode::Average, window, window, stride)
    }

    pub fn mode(&self) -> PoolMode {
        self.mode
    }

    fn out_shape(&self, s: Shape4) -> Result<Shape4> {
        Ok(Shape4::new(
            s.batch,
            s.channels,
            pool_out_dim(s.height, self.window_h, self.stride)?,
            pool_out_dim(s.width, self.window_w, self.stride)?,
        ))
    }

    /// Flat input offsets of the window feeding output `(plane, i, j)`, row-major.
    fn window<'a>(&'a self, s: Shape4, plane: usize, i: usize, j: usize) -> impl Iterator<Item = usize> + 'a {
        let base = plane * s.plane();
        (0..self.window_h).flat_map(move |dy| {
            let row = base + (i * self.stride + dy) * s.width + j * self.stride;
            (0..self.window_w).map(move |dx| row + dx)
        })
    }
}

impl<T: Scalar> Layer<T> for FixedPool {
    fn kind(&self) -> &'static str {
        match self.mode {
            PoolMode::Max => "max_pool",
            PoolMode::Average => "avg_pool",
        }
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        self.out_shape(input)
    }

    fn forward(&mut self, x: &Tensor4<T>, _mode: Mode) -> Result<Tensor4<T>> {
        let s = x.shape();
        let os = self.out_shape(s)?;
        let mut out = Tensor4::zeros(os)?;
        let src = x.data();
        let inv = T::of(1.0 / (self.window_h * self.window_w) as f64);
        let mut argmax = Vec::new();
        if self.mode == PoolMode::Max {
            argmax.reserve(os.len());
        }
        let mut o = 0;
        for plane in 0..s.batch * s.channels {
            for i in 0..os.height {
                for j in 0..os.width {
                    let v = match self.mode {
                        PoolMode::Max => {
                            let mut best = usize::MAX;
                            for idx in self.window(s, plane, i, j) {
                                // strict `>` keeps the first maximum in scan order
                                if best == usize::MAX || src[idx] > src[best] {
                                    best = idx;
                                }
                            }
                            argmax.push(best);
                            src[best]
                        }
                        PoolMode::Average => self.window(s, plane, i, j).map(|idx| src[idx]).sum::<T>() * inv,
                    };
                    out.data_mut()[o] = v;
                    o += 1;
                }
            }
        }
        self.saved = Some(match self.mode {
            PoolMode::Max => Saved::Max {
                input: s,
                argmax,
                output: os,
            },
            PoolMode::Average => Saved::Average { input: s, output: os },
        });
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        match cached(&self.saved, "fixed pool")? {
            Saved::Max { input, argmax, output } => {
                expect_shape("max pool grad_out", grad_out.shape(), *output)?;
                let mut grad_in = Tensor4::zeros(*input)?;
                let dst = grad_in.data_mut();
                for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
                    dst[idx] += g;
                }
                Ok(grad_in)
            }
            Saved::Average { input, output } => {
                expect_shape("avg pool grad_out", grad_out.shape(), *output)?;
                let (input, output) = (*input, *output);
                let mut grad_in = Tensor4::zeros(input)?;
                let inv = T::of(1.0 / (self.window_h * self.window_w) as f64);
                let mut o = 0;
                for plane in 0..input.batch * input.channels {
                    for i in 0..output.height {
                        for j in 0..output.width {
                            let g = grad_out.data()[o] * inv;
                            o += 1;
                            for idx in self.window(input, plane, i, j) {
                                grad_in.data_mut()[idx] += g;
                            }
                        }
                    }
                }
                Ok(grad_in)
            }
        }
    }

    fn smooth_at(&mut self, x: &Tensor4<T>) -> bool {
        if self.mode == PoolMode::Average {
            return true;
        }
        let s = x.shape();
        let Ok(os) = self.out_shape(s) else {
            return true;
        };
        // the top two values of every window must be well separated
        for plane in 0..s.batch * s.channels {
            for i in 0..os.height {
                for j in 0..os.width {
                    let mut vals: Vec<f64> = self.window(s, plane, i, j).map(|k| x.data()[k].f64()).collect();
                    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    if vals.len() > 1 && vals[0] - vals[1] < KINK_MARGIN {
                        return false;
                    }
                }
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::uniform_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square(data: Vec<f64>) -> Tensor4<f64> {
        let n = (data.len() as f64).sqrt() as usize;
        Tensor4::from_vec(Shape4::new(1, 1, n, n), data).unwrap()
    }

    #[test]
    fn out_dim_arithmetic() {
        assert_eq!(pool_out_dim(32, 2, 2).unwrap(), 16);
        assert_eq!(pool_out_dim(8, 8, 8).unwrap(), 1);
        assert_eq!(pool_out_dim(16, 4, 4).unwrap(), 4);
        assert!(matches!(pool_out_dim(7, 2, 2), Err(Error::Config(_))));
        assert!(pool_out_dim(2, 3, 1).is_err());
    }

    #[test]
    fn forward_small() {
        let x = square(vec![1., 2., 3., 4.]);
        let mut avg = FixedPool::average(2, 2);
        assert_eq!(avg.forward(&x, Mode::Train).unwrap().data(), &[2.5]);
        let mut max = FixedPool::max(2, 2);
        assert_eq!(max.forward(&x, Mode::Train).unwrap().data(), &[4.0]);
    }

    #[test]
    fn backward_routing() {
        let x = square(vec![1., 2., 3., 4.]);
        let g = square(vec![1.0]);
        let mut avg = FixedPool::average(2, 2);
        avg.forward(&x, Mode::Train).unwrap();
        assert_eq!(avg.backward(&g).unwrap().data(), &[0.25; 4]);
        let mut max = FixedPool::max(2, 2);
        max.forward(&x, Mode::Train).unwrap();
        assert_eq!(max.backward(&g).unwrap().data(), &[0., 0., 0., 1.]);
    }

    #[test]
    fn max_ties_route_to_first() {
        let x = square(vec![5., 5., 5., 5.]);
        let mut max = FixedPool::max(2, 2);
        max.forward(&x, Mode::Train).unwrap();
        assert_eq!(max.backward(&square(vec![1.0])).unwrap().data(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn overlapping_windows_accumulate() {
        let x = Tensor4::<f64>::from_vec(Shape4::new(1, 1, 1, 3), vec![1., 2., 3.]).unwrap();
        let mut avg = FixedPool::new(PoolMode::Average, 1, 2, 1);
        avg.forward(&x, Mode::Train).unwrap();
        let g = Tensor4::from_vec(Shape4::new(1, 1, 1, 2), vec![1.0, 1.0]).unwrap();
        assert_eq!(avg.backward(&g).unwrap().data(), &[0.5, 1.0, 0.5]);
    }

    #[test]
    fn stale_state_is_rejected() {
        let mut max = FixedPool::max(2, 2);
        assert!(Layer::<f64>::backward(&mut max, &square(vec![1.0])).is_err());
        max.forward(&square(vec![1., 2., 3., 4.]), Mode::Train).unwrap();
        assert!(max.backward(&square(vec![1., 1., 1., 1.])).is_err());
    }

    #[test]
    fn average_is_linear_and_max_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = Shape4::new(2, 3, 6, 6);
        for _ in 0..20 {
            let a = uniform_tensor::<f64, _>(s, -2.0, 2.0, &mut rng);
            let b = uniform_tensor::<f64, _>(s, -2.0, 2.0, &mut rng);
            let (alpha, beta) = (0.7, -1.3);
            let mut combo = a.scale(alpha);
            combo.axpy(beta, &b).unwrap();
            let mut avg = FixedPool::average(2, 2);
            let lhs = avg.forward(&combo, Mode::Eval).unwrap();
            let mut rhs = avg.forward(&a, Mode::Eval).unwrap().scale(alpha);
            rhs.axpy(beta, &avg.forward(&b, Mode::Eval).unwrap()).unwrap();
            assert!(lhs.max_abs_diff(&rhs) < 1e-12);

            let mut max = FixedPool::max(3, 3);
            let c = 4.25;
            let shifted = max.forward(&a.map(|v| v + c), Mode::Eval).unwrap();
            let base = max.forward(&a, Mode::Eval).unwrap().map(|v| v + c);
            assert!(shifted.max_abs_diff(&base) < 1e-12);
        }
    }
}
