//! Learnable pooling with perceptrons.
//!
//! A pooling perceptron slides a `W×H` window over every channel plane and
//! computes `act(Σ w·x + b)` per window. With `p = q²` perceptrons per window
//! the `p` outputs are written as a `q×q` block, so stacking such layers builds a
//! small multilayer network inside the pooling slot, and with stride 1 the same
//! mechanism upsamples by `q`.

mod bench;
mod count;
mod stack;
mod upsample;

pub use bench::{complexity_probe, fit_loglog_slope, ProbeRow, MEASUREMENT_FLOOR_SECS};
pub use count::{instance_count, perceptron_param_count};
pub use stack::MlpPoolStack;
pub use upsample::PerceptronUpsample;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::InitScheme;
use crate::layers::{cached, expect_shape, pool_out_dim, Layer, Mode, Param, KINK_MARGIN};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Default learning-rate multiplier for pooling perceptrons.
pub const POOL_LR_FACTOR: f64 = 0.1;
/// Learning-rate multiplier for a perceptron replacing global average pooling.
pub const GAP_LR_FACTOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    /// One perceptron for every channel and position.
    #[default]
    Global,
    /// One per channel.
    PerChannel,
    /// One per output position, shared over channels.
    PerField,
    /// One per (channel, output position).
    PerTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
}

impl Activation {
    fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(T::zero()),
        }
    }

    fn derivative<T: Scalar>(self, pre: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu if pre > T::zero() => T::one(),
            Activation::Relu => T::zero(),
        }
    }
}

/// Hyperparameters of one perceptron layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptronSpec {
    pub window_h: usize,
    pub window_w: usize,
    pub stride: usize,
    pub units: usize,
    pub use_bias: bool,
    pub activation: Activation,
    pub sharing: SharingMode,
    pub lr_factor: f64,
    pub wd_factor: f64,
    pub init: InitScheme,
}

impl Default for PerceptronSpec {
    fn default() -> Self {
        Self {
            window_h: 2,
            window_w: 2,
            stride: 2,
            units: 1,
            use_bias: true,
            activation: Activation::Identity,
            sharing: SharingMode::Global,
            lr_factor: POOL_LR_FACTOR,
            wd_factor: 0.0,
            init: InitScheme::Average,
        }
    }
}

impl PerceptronSpec {
    pub fn window(mut self, h: usize, w: usize, stride: usize) -> Self {
        self.window_h = h;
        self.window_w = w;
        self.stride = stride;
        self
    }

    pub fn units(mut self, units: usize) -> Self {
        self.units = units;
        self
    }

    /// A window covering an entire `h×w` feature map, trained at the reduced
    /// global-pooling learning rate.
    pub fn global_pool(h: usize, w: usize) -> Self {
        Self {
            window_h: h,
            window_w: w,
            stride: h.max(w),
            lr_factor: GAP_LR_FACTOR,
            ..Self::default()
        }
    }

    /// Side of the square block the unit outputs are arranged in.
    pub fn block_side(&self) -> Result<usize> {
        block_side(self.units)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_h == 0 || self.window_w == 0 || self.stride == 0 {
            return Err(Error::config("perceptron window and stride must be at least 1"));
        }
        self.block_side()?;
        if self.lr_factor < 0.0 || self.wd_factor < 0.0 {
            return Err(Error::config("lr_factor and wd_factor must be non-negative"));
        }
        Ok(())
    }

    fn bias_taps(&self) -> usize {
        usize::from(self.use_bias)
    }
}

/// `q` such that `q² == units`.
pub fn block_side(units: usize) -> Result<usize> {
    let q = (units as f64).sqrt().round() as usize;
    if units == 0 || q * q != units {
        return Err(Error::config(format!(
            "{units} perceptrons cannot be arranged in a square block"
        )));
    }
    Ok(q)
}

/// Output-grid coordinate of unit `k` at window position `(i, j)` when `q×q`
/// outputs are arranged row-major by unit index.
pub fn restructure(i: usize, j: usize, k: usize, q: usize) -> (usize, usize) {
    (i * q + k / q, j * q + k % q)
}

/// Weights and biases of all perceptrons in one layer:
/// weights `(instances, units, window_h, window_w)`, biases `(1, 1, instances, units)`.
#[derive(Debug, Clone)]
pub struct PerceptronBank<T: Scalar> {
    window_h: usize,
    window_w: usize,
    units: usize,
    instances: usize,
    weight: Param<T>,
    bias: Option<Param<T>>,
}

impl<T: Scalar> PerceptronBank<T> {
    /// Zero-initialized bank.
    pub fn new(spec: &PerceptronSpec, instances: usize) -> Result<Self> {
        spec.validate()?;
        if instances == 0 {
            return Err(Error::config("perceptron bank needs at least one instance"));
        }
        let weight = Tensor4::zeros(Shape4::new(instances, spec.units, spec.window_h, spec.window_w))?;
        let bias = if spec.use_bias {
            let b = Tensor4::zeros(Shape4::new(1, 1, instances, spec.units))?;
            Some(Param::new("bias", b).with_factors(spec.lr_factor, spec.wd_factor))
        } else {
            None
        };
        Ok(Self {
            window_h: spec.window_h,
            window_w: spec.window_w,
            units: spec.units,
            instances,
            weight: Param::new("weight", weight).with_factors(spec.lr_factor, spec.wd_factor),
            bias,
        })
    }

    pub fn window(&self) -> (usize, usize) {
        (self.window_h, self.window_w)
    }

    pub fn window_len(&self) -> usize {
        self.window_h * self.window_w
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn instances(&self) -> usize {
        self.instances
    }

    pub fn weight(&self) -> &Param<T> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Param<T> {
        &mut self.weight
    }

    pub fn bias(&self) -> Option<&Param<T>> {
        self.bias.as_ref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Param<T>> {
        self.bias.as_mut()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Param::len)
    }

    fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Window placement shared by the pooling and upsampling layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Grid {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    /// Window positions before restructuring.
    pub grid_h: usize,
    pub grid_w: usize,
    pub q: usize,
}

impl Grid {
    pub fn out_shape(&self, batch: usize) -> Shape4 {
        Shape4::new(batch, self.channels, self.grid_h * self.q, self.grid_w * self.q)
    }

    pub fn instance(&self, sharing: SharingMode, c: usize, i: usize, j: usize) -> usize {
        match sharing {
            SharingMode::Global => 0,
            SharingMode::PerChannel => c,
            SharingMode::PerField => i * self.grid_w + j,
            SharingMode::PerTensor => (c * self.grid_h + i) * self.grid_w + j,
        }
    }
}

/// Shape binding recorded at first use for the sharing modes whose instance
/// count depends on the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Binding {
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Common forward/backward engine for perceptron layers.
pub(crate) struct Engine<T: Scalar> {
    pub spec: PerceptronSpec,
    pub seed: u64,
    pub bank: Option<PerceptronBank<T>>,
    pub binding: Option<Binding>,
    saved: Option<(Tensor4<T>, Tensor4<T>, Grid)>,
}

impl<T: Scalar> Engine<T> {
    pub fn new(spec: PerceptronSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut engine = Self {
            spec,
            seed,
            bank: None,
            binding: None,
            saved: None,
        };
        if engine.spec.sharing == SharingMode::Global {
            engine.allocate(1)?;
        }
        Ok(engine)
    }

    fn allocate(&mut self, instances: usize) -> Result<()> {
        let mut bank = PerceptronBank::new(&self.spec, instances)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.spec.init.apply(&mut bank, &mut rng)?;
        self.bank = Some(bank);
        Ok(())
    }

    /// Instantiates the perceptrons for an input geometry; later calls must agree.
    pub fn bind(&mut self, grid: &Grid) -> Result<()> {
        let want = Binding {
            channels: grid.channels,
            grid_h: grid.grid_h,
            grid_w: grid.grid_w,
        };
        let relevant = |b: Binding| match self.spec.sharing {
            SharingMode::Global => (0, 0, 0),
            SharingMode::PerChannel => (b.channels, 0, 0),
            SharingMode::PerField => (0, b.grid_h, b.grid_w),
            SharingMode::PerTensor => (b.channels, b.grid_h, b.grid_w),
        };
        match self.binding {
            Some(have) if relevant(have) != relevant(want) => Err(Error::shape(format!(
                "{:?} perceptrons were bound to {} channels on a {}×{} grid, input needs {} channels on {}×{}",
                self.spec.sharing, have.channels, have.grid_h, have.grid_w, want.channels, want.grid_h, want.grid_w
            ))),
            Some(_) => Ok(()),
            None => {
                if self.spec.sharing != SharingMode::Global {
                    let n = instance_count(self.spec.sharing, grid.channels, grid.grid_h, grid.grid_w);
                    self.allocate(n)?;
                }
                self.binding = Some(want);
                Ok(())
            }
        }
    }

    pub fn bank(&self) -> Option<&PerceptronBank<T>> {
        self.bank.as_ref()
    }

    /// Pre-activations and outputs in restructured layout.
    fn evaluate(&self, x: &Tensor4<T>, g: &Grid) -> Result<(Tensor4<T>, Tensor4<T>)> {
        let bank = self.bank.as_ref().expect("bound before evaluation");
        let s = x.shape();
        let os = g.out_shape(s.batch);
        let mut pre = Tensor4::zeros(os)?;
        let (kh, kw) = (self.spec.window_h, self.spec.window_w);
        let units = self.spec.units;
        let w = bank.weight.value.data();
        let bias = bank.bias.as_ref().map(|b| b.value.data());
        let src = x.data();
        let dst = pre.data_mut();
        for b in 0..s.batch {
            for c in 0..s.channels {
                let plane = &src[s.offset(b, c, 0, 0)..][..s.plane()];
                let out_base = os.offset(b, c, 0, 0);
                for i in 0..g.grid_h {
                    for j in 0..g.grid_w {
                        let inst = g.instance(self.spec.sharing, c, i, j);
                        let y0 = (i * g.stride) as isize - g.pad_top as isize;
                        let x0 = (j * g.stride) as isize - g.pad_left as isize;
                        for k in 0..units {
                            let wk = &w[(inst * units + k) * kh * kw..][..kh * kw];
                            let mut acc = bias.map_or(T::zero(), |b| b[inst * units + k]);
                            for dy in 0..kh {
                                let y = y0 + dy as isize;
                                if y < 0 || y >= g.in_h as isize {
                                    continue;
                                }
                                let row = &plane[y as usize * g.in_w..][..g.in_w];
                                for dx in 0..kw {
                                    let xx = x0 + dx as isize;
                                    if xx >= 0 && xx < g.in_w as isize {
                                        acc += wk[dy * kw + dx] * row[xx as usize];
                                    }
                                }
                            }
                            let (oy, ox) = restructure(i, j, k, g.q);
                            dst[out_base + oy * os.width + ox] = acc;
                        }
                    }
                }
            }
        }
        let act = self.spec.activation;
        let out = pre.map(|v| act.apply(v));
        Ok((pre, out))
    }

    pub fn forward(&mut self, x: &Tensor4<T>, g: Grid) -> Result<Tensor4<T>> {
        self.bind(&g)?;
        let (pre, out) = self.evaluate(x, &g)?;
        self.saved = Some((x.clone(), pre, g));
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (x, pre, g) = cached(&self.saved, "perceptron")?;
        let g = *g;
        let s = x.shape();
        let os = g.out_shape(s.batch);
        expect_shape("perceptron grad_out", grad_out.shape(), os)?;
        let bank = self.bank.as_mut().expect("bound by forward");
        let (kh, kw) = (self.spec.window_h, self.spec.window_w);
        let units = self.spec.units;
        let act = self.spec.activation;
        let mut grad_in = x.zeros_like();
        let w = bank.weight.value.data();
        let wgrad = bank.weight.grad.data_mut();
        let mut bgrad = bank.bias.as_mut().map(|b| b.grad.data_mut());
        for b in 0..s.batch {
            for c in 0..s.channels {
                let in_base = s.offset(b, c, 0, 0);
                let out_base = os.offset(b, c, 0, 0);
                for i in 0..g.grid_h {
                    for j in 0..g.grid_w {
                        let inst = g.instance(self.spec.sharing, c, i, j);
                        let y0 = (i * g.stride) as isize - g.pad_top as isize;
                        let x0 = (j * g.stride) as isize - g.pad_left as isize;
                        for k in 0..units {
                            let (oy, ox) = restructure(i, j, k, g.q);
                            let o = out_base + oy * os.width + ox;
                            let delta = grad_out.data()[o] * act.derivative(pre.data()[o]);
                            if delta == T::zero() {
                                continue;
                            }
                            let unit = inst * units + k;
                            if let Some(bg) = bgrad.as_deref_mut() {
                                bg[unit] += delta;
                            }
                            let wbase = unit * kh * kw;
                            for dy in 0..kh {
                                let y = y0 + dy as isize;
                                if y < 0 || y >= g.in_h as isize {
                                    continue;
                                }
                                for dx in 0..kw {
                                    let xx = x0 + dx as isize;
                                    if xx < 0 || xx >= g.in_w as isize {
                                        continue;
                                    }
                                    let xi = in_base + y as usize * g.in_w + xx as usize;
                                    let wi = wbase + dy * kw + dx;
                                    wgrad[wi] += delta * x.data()[xi];
                                    grad_in.data_mut()[xi] += delta * w[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(grad_in)
    }

    pub fn smooth_at(&mut self, x: &Tensor4<T>, g: Grid) -> bool {
        if self.spec.activation == Activation::Identity {
            return true;
        }
        if self.bind(&g).is_err() {
            return true;
        }
        match self.evaluate(x, &g) {
            Ok((pre, _)) => pre.data().iter().all(|v| v.f64().abs() > KINK_MARGIN),
            Err(_) => true,
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.bank.as_ref().map(|b| b.params()).unwrap_or_default()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.bank.as_mut().map(|b| b.params_mut()).unwrap_or_default()
    }
}

/// Perceptron pooling: `units` perceptrons per `W×H` window at the given stride,
/// outputs restructured into `√units × √units` blocks.
pub struct PerceptronPool<T: Scalar> {
    engine: Engine<T>,
}

impl<T: Scalar> PerceptronPool<T> {
    /// `seed` drives the initializer when the perceptrons are instantiated.
    pub fn new(spec: PerceptronSpec, seed: u64) -> Result<Self> {
        Ok(Self {
            engine: Engine::new(spec, seed)?,
        })
    }

    pub fn spec(&self) -> &PerceptronSpec {
        &self.engine.spec
    }

    pub fn bank(&self) -> Option<&PerceptronBank<T>> {
        self.engine.bank()
    }

    /// Mutable access to the perceptrons, instantiating them for `input` if needed.
    pub fn bank_for(&mut self, input: Shape4) -> Result<&mut PerceptronBank<T>> {
        let g = self.grid(input)?;
        self.engine.bind(&g)?;
        Ok(self.engine.bank.as_mut().expect("bound"))
    }

    pub(crate) fn grid(&self, s: Shape4) -> Result<Grid> {
        let spec = &self.engine.spec;
        Ok(Grid {
            channels: s.channels,
            in_h: s.height,
            in_w: s.width,
            stride: spec.stride,
            pad_top: 0,
            pad_left: 0,
            grid_h: pool_out_dim(s.height, spec.window_h, spec.stride)?,
            grid_w: pool_out_dim(s.width, spec.window_w, spec.stride)?,
            q: spec.block_side()?,
        })
    }
}

impl<T: Scalar> Layer<T> for PerceptronPool<T> {
    fn kind(&self) -> &'static str {
        "perceptron_pool"
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        Ok(self.grid(input)?.out_shape(input.batch))
    }

    fn forward(&mut self, x: &Tensor4<T>, _mode: Mode) -> Result<Tensor4<T>> {
        let g = self.grid(x.shape())?;
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
        match self.grid(x.shape()) {
            Ok(g) => self.engine.smooth_at(x, g),
            Err(_) => true,
        }
    }
}
