use super::{block_side, PerceptronPool, PerceptronSpec};
use crate::error::{Error, Result};
use crate::layers::{Layer, Mode, Param};
use crate::tensor::{Scalar, Shape4, Tensor4};

fn at_layer(index: usize, e: Error) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("mlp pooling layer {index}: {m}")),
        Error::Config(m) => Error::Config(format!("mlp pooling layer {index}: {m}")),
        other => other,
    }
}

/// Perceptron pooling layers applied in sequence, each reading the restructured
/// output of the previous one.
pub struct MlpPoolStack<T: Scalar> {
    layers: Vec<PerceptronPool<T>>,
}

impl<T: Scalar> MlpPoolStack<T> {
    /// Layer `l` is initialized from `seed + l`.
    pub fn new(specs: Vec<PerceptronSpec>, seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::config("mlp pooling stack needs at least one layer"));
        }
        let layers = specs
            .into_iter()
            .enumerate()
            .map(|(l, s)| PerceptronPool::new(s, seed.wrapping_add(l as u64)).map_err(|e| at_layer(l, e)))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// NN-`hidden`-1: `hidden` perceptrons on a 2×2 window at stride 2, then one
    /// perceptron on each restructured `√hidden × √hidden` block.
    pub fn nn_specs(hidden: usize, base: &PerceptronSpec) -> Result<Vec<PerceptronSpec>> {
        let q = block_side(hidden)?;
        Ok(vec![
            base.clone().window(2, 2, 2).units(hidden),
            base.clone().window(q, q, q).units(1),
        ])
    }

    pub fn nn_4_1(base: &PerceptronSpec, seed: u64) -> Result<Self> {
        Self::new(Self::nn_specs(4, base)?, seed)
    }

    pub fn nn_16_1(base: &PerceptronSpec, seed: u64) -> Result<Self> {
        Self::new(Self::nn_specs(16, base)?, seed)
    }

    pub fn layers(&self) -> &[PerceptronPool<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [PerceptronPool<T>] {
        &mut self.layers
    }

    /// Input shape followed by the output shape of every layer.
    pub fn shapes(&self, input: Shape4) -> Result<Vec<Shape4>> {
        let mut out = vec![input];
        for (l, layer) in self.layers.iter().enumerate() {
            let next = layer.output_shape(*out.last().unwrap()).map_err(|e| at_layer(l, e))?;
            out.push(next);
        }
        Ok(out)
    }
}

impl<T: Scalar> Layer<T> for MlpPoolStack<T> {
    fn kind(&self) -> &'static str {
        "mlp_pool"
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        Ok(*self.shapes(input)?.last().unwrap())
    }

    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        self.shapes(x.shape())?;
        let mut h = x.clone();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            h = layer.forward(&h, mode).map_err(|e| at_layer(l, e))?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut g = grad_out.clone();
        for (l, layer) in self.layers.iter_mut().enumerate().rev() {
            g = layer.backward(&g).map_err(|e| at_layer(l, e))?;
        }
        Ok(g)
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn smooth_at(&mut self, x: &Tensor4<T>) -> bool {
        let mut h = x.clone();
        for layer in &mut self.layers {
            if !layer.smooth_at(&h) {
                return false;
            }
            match layer.forward(&h, Mode::Train) {
                Ok(next) => h = next,
                Err(_) => return true,
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::uniform_tensor;
    use crate::layers::FixedPool;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nn_4_1_halves() {
        let mut s = MlpPoolStack::<f64>::nn_4_1(&PerceptronSpec::default(), 0).unwrap();
        let y = s
            .forward(&Tensor4::zeros(Shape4::new(1, 1, 8, 8)).unwrap(), Mode::Train)
            .unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 4, 4));
        assert_eq!(s.param_count(), 25);
    }

    #[test]
    fn nn_16_1_shapes_and_count() {
        let s = MlpPoolStack::<f64>::nn_16_1(&PerceptronSpec::default(), 0).unwrap();
        let shapes = s.shapes(Shape4::new(1, 1, 8, 8)).unwrap();
        assert_eq!(shapes[1], Shape4::new(1, 1, 16, 16));
        assert_eq!(shapes[2], Shape4::new(1, 1, 4, 4));
        assert_eq!(s.param_count(), 97);
    }

    #[test]
    fn broken_chain_names_layer() {
        let specs = vec![
            PerceptronSpec::default().units(4),
            PerceptronSpec::default().window(3, 3, 3),
        ];
        let s = MlpPoolStack::<f64>::new(specs, 0).unwrap();
        let err = s.shapes(Shape4::new(1, 1, 8, 8)).unwrap_err().to_string();
        assert!(err.contains("layer 1"), "{err}");
    }

    #[test]
    fn average_init_composes_like_fixed_pools() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = uniform_tensor::<f64, _>(Shape4::new(2, 3, 8, 8), -1.0, 1.0, &mut rng);
        let mut avg = FixedPool::average(2, 2);
        let pooled = avg.forward(&x, Mode::Eval).unwrap();
        for hidden in [4, 16] {
            let q = (hidden as f64).sqrt() as usize;
            let mut s = MlpPoolStack::<f64>::new(
                MlpPoolStack::<f64>::nn_specs(hidden, &PerceptronSpec::default()).unwrap(),
                0,
            )
            .unwrap();
            // hidden layer alone: every unit averages its window, so each q×q block
            // repeats the 2×2 average; the output perceptron averages that block back
            let hidden_out = s.layers_mut()[0].forward(&x, Mode::Eval).unwrap();
            for b in 0..2 {
                for c in 0..3 {
                    for yy in 0..hidden_out.shape().height {
                        for xx in 0..hidden_out.shape().width {
                            let want = pooled.get(b, c, yy / q, xx / q);
                            assert!((hidden_out.get(b, c, yy, xx) - want).abs() < 1e-12);
                        }
                    }
                }
            }
            let mut block_avg = FixedPool::average(q, q);
            let composed = block_avg.forward(&hidden_out, Mode::Eval).unwrap();
            let y = s.forward(&x, Mode::Eval).unwrap();
            assert!(y.max_abs_diff(&composed) < 1e-12);
            assert!(y.max_abs_diff(&pooled) < 1e-12);
        }
    }
}
