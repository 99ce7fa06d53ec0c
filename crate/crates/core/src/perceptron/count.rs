use super::{PerceptronSpec, SharingMode};
use crate::error::Result;
use crate::layers::pool_out_dim;
use crate::tensor::Shape4;

/// Number of independent perceptron sets for a sharing mode on a
/// `channels × grid_h × grid_w` window grid.
pub fn instance_count(sharing: SharingMode, channels: usize, grid_h: usize, grid_w: usize) -> usize {
    match sharing {
        SharingMode::Global => 1,
        SharingMode::PerChannel => channels,
        SharingMode::PerField => grid_h * grid_w,
        SharingMode::PerTensor => channels * grid_h * grid_w,
    }
}

/// `instances · p · (W·H + 1)`, without the `+1` when the layer has no bias.
pub fn perceptron_param_count(spec: &PerceptronSpec, instances: usize) -> usize {
    instances * spec.units * (spec.window_h * spec.window_w + spec.bias_taps())
}

impl PerceptronSpec {
    /// Parameters of this layer for a pooling input of shape `input`.
    pub fn pool_param_count(&self, input: Shape4) -> Result<usize> {
        let gh = pool_out_dim(input.height, self.window_h, self.stride)?;
        let gw = pool_out_dim(input.width, self.window_w, self.stride)?;
        Ok(perceptron_param_count(
            self,
            instance_count(self.sharing, input.channels, gh, gw),
        ))
    }

    /// Output shape of this layer as a pooling layer.
    pub fn pool_output_shape(&self, input: Shape4) -> Result<Shape4> {
        let q = self.block_side()?;
        Ok(Shape4::new(
            input.batch,
            input.channels,
            pool_out_dim(input.height, self.window_h, self.stride)? * q,
            pool_out_dim(input.width, self.window_w, self.stride)? * q,
        ))
    }
}
