//! Reference architectures with interchangeable pooling slots.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, ConvTranspose2d, Dense, FixedPool, Layer, Mode, Param, PoolMode, Relu};
use crate::perceptron::{MlpPoolStack, PerceptronPool, PerceptronSpec, PerceptronUpsample, SharingMode};
use crate::tensor::{Scalar, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Two 3×3 conv blocks (64, 128) with batchnorm, two pooling slots.
    ModelALike,
    /// Three 3×3 conv blocks (64, 128, 256) without batchnorm, three pooling slots.
    ModelCLike,
    /// One 3×3 conv block (8) and one pooling slot for 16×16 inputs.
    TinySynth,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::ModelALike => "model_a_like",
            Arch::ModelCLike => "model_c_like",
            Arch::TinySynth => "tiny_synth",
        }
    }

    pub fn input_side(self) -> usize {
        match self {
            Arch::TinySynth => 16,
            _ => 32,
        }
    }

    fn widths(self) -> &'static [usize] {
        match self {
            Arch::ModelALike => &[64, 128],
            Arch::ModelCLike => &[64, 128, 256],
            Arch::TinySynth => &[8],
        }
    }

    fn batchnorm(self) -> bool {
        self == Arch::ModelALike
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolPreset {
    Max,
    Average,
    /// 2×2 stride-2 convolution keeping the channel count, followed by ReLU.
    StridedConv,
    /// One perceptron with the configured sharing mode.
    Perceptron,
    #[serde(rename = "nn_4_1")]
    Nn4_1,
    #[serde(rename = "nn_16_1")]
    Nn16_1,
    /// One perceptron per channel.
    NnZ,
    /// One perceptron per output position.
    NnField,
    /// One perceptron per channel and output position.
    NnTensor,
}

impl PoolPreset {
    pub fn name(self) -> &'static str {
        match self {
            PoolPreset::Max => "max",
            PoolPreset::Average => "average",
            PoolPreset::StridedConv => "strided_conv",
            PoolPreset::Perceptron => "perceptron",
            PoolPreset::Nn4_1 => "nn_4_1",
            PoolPreset::Nn16_1 => "nn_16_1",
            PoolPreset::NnZ => "nn_z",
            PoolPreset::NnField => "nn_field",
            PoolPreset::NnTensor => "nn_tensor",
        }
    }

    pub fn all() -> [PoolPreset; 9] {
        [
            PoolPreset::Max,
            PoolPreset::Average,
            PoolPreset::StridedConv,
            PoolPreset::Perceptron,
            PoolPreset::Nn4_1,
            PoolPreset::Nn16_1,
            PoolPreset::NnZ,
            PoolPreset::NnField,
            PoolPreset::NnTensor,
        ]
    }

    pub fn is_learned(self) -> bool {
        !matches!(self, PoolPreset::Max | PoolPreset::Average)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleKind {
    #[default]
    None,
    TransposeLike,
    NnUp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Flatten the last feature map into the dense classifier.
    #[default]
    Flatten,
    /// Global average pooling, then the classifier.
    GapAverage,
    /// Global perceptron over the whole last feature map, then the classifier.
    GapPerceptron,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub pooling: PoolPreset,
    #[serde(default)]
    pub upsample: UpsampleKind,
    #[serde(default = "default_upsample_factor")]
    pub upsample_factor: usize,
    #[serde(default)]
    pub head: HeadKind,
    /// Base hyperparameters for every perceptron the presets create.
    #[serde(default)]
    pub perceptron: PerceptronSpec,
}

fn default_upsample_factor() -> usize {
    2
}

impl ModelConfig {
    pub fn new(arch: Arch, pooling: PoolPreset) -> Self {
        Self {
            arch,
            pooling,
            upsample: UpsampleKind::None,
            upsample_factor: default_upsample_factor(),
            head: HeadKind::Flatten,
            perceptron: PerceptronSpec::default(),
        }
    }

    pub fn input_shape(&self, batch: usize) -> Shape4 {
        let s = self.arch.input_side();
        Shape4::new(batch, 3, s, s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Backbone,
    /// Pooling slot, numbered from 0.
    Pool(usize),
    Upsample,
    Gap,
    Head,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Backbone => f.write_str("backbone"),
            Role::Pool(s) => write!(f, "pool{s}"),
            Role::Upsample => f.write_str("upsample"),
            Role::Gap => f.write_str("gap"),
            Role::Head => f.write_str("head"),
        }
    }
}

pub struct Block<T: Scalar> {
    pub name: String,
    pub role: Role,
    pub layer: Box<dyn Layer<T>>,
}

/// A chain of named layers.
pub struct Network<T: Scalar> {
    blocks: Vec<Block<T>>,
    input: Shape4,
}

impl<T: Scalar> Network<T> {
    /// Builds the chain and runs one batch-1 evaluation pass so every lazily
    /// sized parameter bank exists before an optimizer is attached.
    pub fn new(blocks: Vec<Block<T>>, input: Shape4) -> Result<Self> {
        let mut net = Self { blocks, input };
        net.shapes(input)?;
        net.forward(&Tensor4::zeros(Shape4 { batch: 1, ..input })?, Mode::Eval)?;
        Ok(net)
    }

    pub fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block<T>] {
        &mut self.blocks
    }

    pub fn input_shape(&self) -> Shape4 {
        self.input
    }

    /// Input shape followed by the output shape of every block.
    pub fn shapes(&self, input: Shape4) -> Result<Vec<Shape4>> {
        let mut out = vec![input];
        for b in &self.blocks {
            let s = b
                .layer
                .output_shape(*out.last().unwrap())
                .map_err(|e| block_error(b, e))?;
            out.push(s);
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.layer.forward(&h, mode).map_err(|e| block_error(b, e))?;
        }
        Ok(h)
    }

    /// Forward pass that stops at the first block emitting a non-finite value.
    pub fn forward_checked(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        if !x.all_finite() {
            return Err(Error::NonFinite("network input".into()));
        }
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.layer.forward(&h, mode).map_err(|e| block_error(b, e))?;
            if !h.all_finite() {
                return Err(Error::NonFinite(format!(
                    "output of layer {} ({})",
                    b.name,
                    b.layer.kind()
                )));
            }
        }
        Ok(h)
    }

    pub fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut g = grad.clone();
        for b in self.blocks.iter_mut().rev() {
            g = b.layer.backward(&g).map_err(|e| block_error(b, e))?;
        }
        Ok(g)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.blocks.iter().flat_map(|b| b.layer.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.blocks.iter_mut().flat_map(|b| b.layer.params_mut()).collect()
    }

    /// Every persisted tensor with a stable name: parameters, then buffers.
    pub fn state(&self) -> Vec<(String, &Tensor4<T>)> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for p in b.layer.params() {
                out.push((format!("{}.{}", b.name, p.name), &p.value));
            }
            for (k, t) in b.layer.buffers().into_iter().enumerate() {
                out.push((format!("{}.buffer{k}", b.name), t));
            }
        }
        out
    }

    /// Overwrites the tensors listed by [`Network::state`], in the same order.
    pub fn load_state(&mut self, values: Vec<Tensor4<T>>) -> Result<()> {
        let expected = self.state().len();
        if values.len() != expected {
            return Err(Error::Format(format!(
                "{} tensors for a model holding {expected}",
                values.len()
            )));
        }
        let mut it = values.into_iter();
        let mut assign = |name: &str, slot: &mut Tensor4<T>| -> Result<()> {
            let v = it.next().expect("count checked");
            if v.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "{name}: stored {} but model has {}",
                    v.shape(),
                    slot.shape()
                )));
            }
            *slot = v;
            Ok(())
        };
        for b in &mut self.blocks {
            for p in b.layer.params_mut() {
                assign(&b.name, &mut p.value)?;
            }
            for t in b.layer.buffers_mut() {
                assign(&b.name, t)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.blocks.iter_mut().for_each(|b| b.layer.zero_grad());
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn role_param_count(&self, role: Role) -> usize {
        self.blocks
            .iter()
            .filter(|b| b.role == role)
            .map(|b| b.layer.param_count())
            .sum()
    }

    pub fn pool_slots(&self) -> usize {
        self.blocks
            .iter()
            .filter_map(|b| match b.role {
                Role::Pool(s) => Some(s + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }
}

fn block_error(b: &Block<impl Scalar>, e: Error) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("layer {}: {m}", b.name)),
        Error::Config(m) => Error::Config(format!("layer {}: {m}", b.name)),
        other => other,
    }
}

fn block<T: Scalar>(name: impl Into<String>, role: Role, layer: impl Layer<T> + 'static) -> Block<T> {
    Block {
        name: name.into(),
        role,
        layer: Box::new(layer),
    }
}

/// Layers filling one pooling slot that halves the spatial extent of `channels` maps.
pub fn pool_slot<T: Scalar>(
    preset: PoolPreset,
    base: &PerceptronSpec,
    channels: usize,
    slot: usize,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Block<T>>> {
    let role = Role::Pool(slot);
    let name = format!("pool{slot}");
    let with_sharing = |sharing: SharingMode| PerceptronSpec {
        sharing,
        ..base.clone()
    };
    let b = match preset {
        PoolPreset::Max => block(name, role, FixedPool::max(2, 2)),
        PoolPreset::Average => block(name, role, FixedPool::average(2, 2)),
        PoolPreset::StridedConv => {
            return Ok(vec![
                block(name.clone(), role, Conv2d::<T>::new(channels, channels, 2, 2, 0, rng)?),
                block(format!("{name}_relu"), role, Relu::<T>::new()),
            ])
        }
        PoolPreset::Perceptron => block(name, role, PerceptronPool::<T>::new(base.clone(), seed)?),
        PoolPreset::NnZ => block(
            name,
            role,
            PerceptronPool::<T>::new(with_sharing(SharingMode::PerChannel), seed)?,
        ),
        PoolPreset::NnField => block(
            name,
            role,
            PerceptronPool::<T>::new(with_sharing(SharingMode::PerField), seed)?,
        ),
        PoolPreset::NnTensor => block(
            name,
            role,
            PerceptronPool::<T>::new(with_sharing(SharingMode::PerTensor), seed)?,
        ),
        PoolPreset::Nn4_1 => block(name, role, MlpPoolStack::<T>::nn_4_1(base, seed)?),
        PoolPreset::Nn16_1 => block(name, role, MlpPoolStack::<T>::nn_16_1(base, seed)?),
    };
    Ok(vec![b])
}

/// Seed of the perceptron bank in pooling slot `slot`, kept apart from the
/// stream that initializes the convolutions.
fn slot_seed(seed: u64, slot: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(101 * (slot as u64 + 1))
}

pub fn build_model<T: Scalar>(config: &ModelConfig, classes: usize, seed: u64) -> Result<Network<T>> {
    if classes < 2 {
        return Err(Error::config("a classifier needs at least two classes"));
    }
    config.perceptron.validate()?;
    let arch = config.arch;
    let input = config.input_shape(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks: Vec<Block<T>> = Vec::new();
    let mut shape = input;
    let widths = arch.widths();
    for (i, &w) in widths.iter().enumerate() {
        blocks.push(block(
            format!("conv{i}"),
            Role::Backbone,
            Conv2d::<T>::new(shape.channels, w, 3, 1, 1, &mut rng)?,
        ));
        if arch.batchnorm() {
            blocks.push(block(format!("bn{i}"), Role::Backbone, BatchNorm::<T>::new(w)?));
        }
        blocks.push(block(format!("relu{i}"), Role::Backbone, Relu::<T>::new()));
        shape = Shape4::new(1, w, shape.height, shape.width);
        for b in pool_slot::<T>(config.pooling, &config.perceptron, w, i, slot_seed(seed, i), &mut rng)? {
            shape = b.layer.output_shape(shape).map_err(|e| {
                Error::config(format!(
                    "pooling preset {} does not fit slot {i}: {e}",
                    config.pooling.name()
                ))
            })?;
            blocks.push(b);
        }
    }
    match config.upsample {
        UpsampleKind::None => {}
        UpsampleKind::TransposeLike => {
            let up = ConvTranspose2d::<T>::new(shape.channels, shape.channels, config.upsample_factor, &mut rng)?;
            shape = up.output_shape(shape)?;
            blocks.push(block("upsample", Role::Upsample, up));
        }
        UpsampleKind::NnUp => {
            let up =
                PerceptronUpsample::<T>::with_factor(config.upsample_factor, &config.perceptron, slot_seed(seed, 99))?;
            shape = up.output_shape(shape)?;
            blocks.push(block("upsample", Role::Upsample, up));
        }
    }
    if config.head == HeadKind::GapAverage {
        let gap = FixedPool::new(
            PoolMode::Average,
            shape.height,
            shape.width,
            shape.height.max(shape.width),
        );
        shape = Layer::<T>::output_shape(&gap, shape)?;
        blocks.push(block("gap", Role::Gap, gap));
    }
    if config.head == HeadKind::GapPerceptron {
        let spec = PerceptronSpec {
            init: config.perceptron.init,
            ..PerceptronSpec::global_pool(shape.height, shape.width)
        };
        let gap = PerceptronPool::<T>::new(spec, slot_seed(seed, 98))?;
        shape = gap.output_shape(shape)?;
        blocks.push(block("gap", Role::Gap, gap));
    }
    let features = shape.item_len();
    blocks.push(block("head", Role::Head, Dense::<T>::new(features, classes, &mut rng)?));
    Network::new(blocks, input)
}
