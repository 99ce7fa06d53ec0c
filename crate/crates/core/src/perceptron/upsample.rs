use super::{block_side, Engine, Grid, PerceptronBank, PerceptronSpec};
use crate::error::{Error, Result};
use crate::layers::{Layer, Mode, Param};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Perceptron upscaling: `u²` perceptrons evaluated at stride 1 on a zero-padded
/// window, each position expanded into a `u×u` block.
///
/// Even windows are padded one extra row/column on the top/left.
pub struct PerceptronUpsample<T: Scalar> {
    engine: Engine<T>,
}

impl<T: Scalar> PerceptronUpsample<T> {
    /// `spec.units` must be `u²` with `u ≥ 2`; the stride is forced to 1.
    pub fn new(mut spec: PerceptronSpec, seed: u64) -> Result<Self> {
        let u = block_side(spec.units)?;
        if u < 2 {
            return Err(Error::config("upsampling needs at least four perceptrons"));
        }
        spec.stride = 1;
        Ok(Self {
            engine: Engine::new(spec, seed)?,
        })
    }

    /// `u²` perceptrons on the default 2×2 window.
    pub fn with_factor(factor: usize, base: &PerceptronSpec, seed: u64) -> Result<Self> {
        Self::new(base.clone().window(2, 2, 1).units(factor * factor), seed)
    }

    pub fn factor(&self) -> usize {
        block_side(self.engine.spec.units).expect("validated")
    }

    pub fn spec(&self) -> &PerceptronSpec {
        &self.engine.spec
    }

    pub fn bank_for(&mut self, input: Shape4) -> Result<&mut PerceptronBank<T>> {
        let g = self.grid(input);
        self.engine.bind(&g)?;
        Ok(self.engine.bank.as_mut().expect("bound"))
    }

    fn grid(&self, s: Shape4) -> Grid {
        let spec = &self.engine.spec;
        Grid {
            channels: s.channels,
            in_h: s.height,
            in_w: s.width,
            stride: 1,
            pad_top: spec.window_h / 2,
            pad_left: spec.window_w / 2,
            grid_h: s.height,
            grid_w: s.width,
            q: self.factor(),
        }
    }
}

impl<T: Scalar> Layer<T> for PerceptronUpsample<T> {
    fn kind(&self) -> &'static str {
        "perceptron_upsample"
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        Ok(self.grid(input).out_shape(input.batch))
    }

    fn forward(&mut self, x: &Tensor4<T>, _mode: Mode) -> Result<Tensor4<T>> {
        let g = self.grid(x.shape());
        self.engine.forward(x, g)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.engine.backward(grad_out)
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.engine.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.engine.params_mut()
    }

    fn smooth_at(&mut self, x: &Tensor4<T>) -> bool {
        let g = self.grid(x.shape());
        self.engine.smooth_at(x, g)
    }
}
