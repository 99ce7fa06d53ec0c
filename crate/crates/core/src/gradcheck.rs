//! Central finite-difference gradients for verifying hand-written backward passes.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init::uniform_tensor;
use crate::layers::{Layer, Mode};
use crate::tensor::{Shape4, Tensor4};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

const MAX_RESAMPLES: usize = 200;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(θ + h·eᵢ) − f(θ − h·eᵢ)) / 2h` for every coordinate.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> Result<f64>, params: &[f64], h: f64) -> Result<Vec<f64>> {
    if h <= 0.0 {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let mut theta = params.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let plus = f(&theta)?;
        theta[i] = orig - h;
        let minus = f(&theta)?;
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub len: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub layer: String,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Group name and flat index of the worst coordinate.
    pub worst: (String, usize),
    pub groups: Vec<GroupReport>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    fn from_groups(layer: String, tolerance: f64, groups: Vec<GroupReport>) -> Self {
        let mut worst = (String::new(), 0);
        let mut max_rel = 0.0;
        let mut max_abs: f64 = 0.0;
        for g in &groups {
            max_abs = max_abs.max(g.max_abs_err);
            if g.max_rel_err > max_rel || worst.0.is_empty() {
                max_rel = g.max_rel_err.max(max_rel);
                worst = (g.name.clone(), g.worst_index);
            }
        }
        Self {
            layer,
            tolerance,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            worst,
            groups,
        }
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "layer: {}", self.layer)?;
        writeln!(
            f,
            "{:<14} {:>8} {:>13} {:>13} {:>11}",
            "group", "len", "max_abs_err", "max_rel_err", "worst_index"
        )?;
        for g in &self.groups {
            writeln!(
                f,
                "{:<14} {:>8} {:>13.3e} {:>13.3e} {:>11}",
                g.name, g.len, g.max_abs_err, g.max_rel_err, g.worst_index
            )?;
        }
        write!(
            f,
            "result: {} (max_rel_err {:.3e} at {}[{}], tolerance {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.worst.0,
            self.worst.1,
            self.tolerance
        )
    }
}

fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> GroupReport {
    let mut g = GroupReport {
        name: name.to_string(),
        len: analytic.len(),
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst_index: 0,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let r = rel_err(a, n);
        g.max_abs_err = g.max_abs_err.max((a - n).abs());
        if r > g.max_rel_err {
            g.max_rel_err = r;
            g.worst_index = i;
        }
    }
    g
}

fn projected_loss(layer: &mut dyn Layer<f64>, x: &Tensor4<f64>, proj: &Tensor4<f64>) -> Result<f64> {
    let y = layer.forward(x, Mode::Train)?;
    Ok(y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
}

/// Compares a layer's backward pass against central differences of the scalar
/// `L = Σ r ⊙ layer(x)` for a random projection `r`, over the input and every
/// parameter tensor. Inputs are resampled until the layer reports it is away
/// from any kink.
pub fn check_layer(layer: &mut dyn Layer<f64>, input_shape: Shape4, seed: u64, tolerance: f64) -> Result<GradReport> {
    check_layer_with(layer, input_shape, seed, tolerance, DEFAULT_STEP)
}

pub fn check_layer_with(
    layer: &mut dyn Layer<f64>,
    input_shape: Shape4,
    seed: u64,
    tolerance: f64,
    h: f64,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = uniform_tensor::<f64, _>(input_shape, -1.0, 1.0, &mut rng);
    let mut tries = 0;
    while !layer.smooth_at(&x) {
        tries += 1;
        if tries > MAX_RESAMPLES {
            return Err(Error::config(format!(
                "{}: no input away from non-differentiable points after {MAX_RESAMPLES} draws",
                layer.kind()
            )));
        }
        x = uniform_tensor::<f64, _>(input_shape, -1.0, 1.0, &mut rng);
    }
    let out_shape = layer.output_shape(input_shape)?;
    let proj = uniform_tensor::<f64, _>(out_shape, -1.0, 1.0, &mut rng);

    layer.zero_grad();
    layer.forward(&x, Mode::Train)?;
    let grad_in = layer.backward(&proj)?;
    let analytic: Vec<(String, Vec<f64>)> = layer
        .params()
        .iter()
        .map(|p| (p.name.to_string(), p.grad.data().to_vec()))
        .collect();

    let mut groups = Vec::new();
    let numeric_in = fd_gradient(
        |v| {
            let xt = Tensor4::from_vec(input_shape, v.to_vec())?;
            projected_loss(layer, &xt, &proj)
        },
        x.data(),
        h,
    )?;
    groups.push(compare("input", grad_in.data(), &numeric_in));

    for (gi, (name, grad)) in analytic.iter().enumerate() {
        let start = layer.params()[gi].value.data().to_vec();
        let numeric = fd_gradient(
            |v| {
                layer.params_mut()[gi].value.data_mut().copy_from_slice(v);
                projected_loss(layer, &x, &proj)
            },
            &start,
            h,
        )?;
        layer.params_mut()[gi].value.data_mut().copy_from_slice(&start);
        let label = if analytic.iter().filter(|(n, _)| n == name).count() > 1 {
            format!("{name}#{gi}")
        } else {
            name.clone()
        };
        groups.push(compare(&label, grad, &numeric));
    }
    Ok(GradReport::from_groups(layer.kind().to_string(), tolerance, groups))
}

/// Layers reachable by name for command-line and suite checks.
pub const LAYER_KINDS: &[&str] = &[
    "conv2d",
    "dense",
    "batchnorm",
    "max_pool",
    "avg_pool",
    "strided_conv",
    "perceptron",
    "nn_4_1",
    "nn_16_1",
    "upsample",
    "transpose",
];

/// Specs covering every layer with a hand-written backward pass.
pub const SUITE: &[&str] = &[
    "conv2d",
    "conv2d:stride=2",
    "dense",
    "batchnorm",
    "max_pool",
    "avg_pool",
    "strided_conv",
    "perceptron:sharing=global",
    "perceptron:sharing=per_channel",
    "perceptron:sharing=per_field",
    "perceptron:sharing=per_tensor",
    "perceptron:sharing=global,units=4,activation=relu",
    "nn_4_1",
    "nn_16_1",
    "upsample:units=4",
    "upsample:units=16",
    "transpose",
];

pub struct NamedLayer {
    pub spec: String,
    pub layer: Box<dyn Layer<f64>>,
    pub input: Shape4,
}

fn parse_options(spec: &str) -> Result<(&str, Vec<(&str, &str)>)> {
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let mut opts = Vec::new();
    for item in rest.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::config(format!("layer option {item:?} is not key=value")))?;
        opts.push((k.trim(), v.trim()));
    }
    Ok((kind.trim(), opts))
}

fn parse_value<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::config(format!("bad value {v:?} for {key}")))
}

/// Builds a layer from `kind[:key=value,...]`, sized for a quick check.
///
/// Perceptron options: `sharing`, `units`, `activation`, `bias`, `init`
/// (default `glorot`). Convolution option: `stride`.
pub fn named_layer(spec: &str, seed: u64) -> Result<NamedLayer> {
    use crate::init::InitScheme;
    use crate::layers::{BatchNorm, Conv2d, ConvTranspose2d, Dense, FixedPool, Relu};
    use crate::perceptron::{
        Activation, MlpPoolStack, PerceptronPool, PerceptronSpec, PerceptronUpsample, SharingMode,
    };

    let (kind, opts) = parse_options(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = PerceptronSpec {
        init: InitScheme::Glorot,
        ..PerceptronSpec::default()
    };
    let mut stride = 1;
    for &(k, v) in &opts {
        let as_enum = |what: &str| Error::config(format!("unknown {what} {v:?}"));
        match k {
            "sharing" => {
                p.sharing = toml::Value::from(v)
                    .try_into::<SharingMode>()
                    .map_err(|_| as_enum("sharing mode"))?
            }
            "activation" => {
                p.activation = toml::Value::from(v)
                    .try_into::<Activation>()
                    .map_err(|_| as_enum("activation"))?
            }
            "init" => {
                p.init = toml::Value::from(v)
                    .try_into::<InitScheme>()
                    .map_err(|_| as_enum("init scheme"))?
            }
            "units" => p.units = parse_value(k, v)?,
            "bias" => p.use_bias = parse_value(k, v)?,
            "stride" => stride = parse_value(k, v)?,
            _ => return Err(Error::config(format!("unknown layer option {k:?}"))),
        }
    }
    let (layer, input): (Box<dyn Layer<f64>>, Shape4) = match kind {
        "conv2d" => (
            Box::new(Conv2d::new(3, 4, 3, stride, 1, &mut rng)?),
            Shape4::new(2, 3, 6, 6),
        ),
        "dense" => (Box::new(Dense::new(12, 5, &mut rng)?), Shape4::new(2, 3, 2, 2)),
        "batchnorm" => {
            let mut bn = BatchNorm::new(3)?;
            for q in bn.params_mut() {
                let shape = q.value.shape();
                q.value = uniform_tensor(shape, 0.5, 1.5, &mut rng);
            }
            (Box::new(bn), Shape4::new(4, 3, 3, 3))
        }
        "max_pool" => (Box::new(FixedPool::max(2, 2)), Shape4::new(2, 3, 4, 4)),
        "avg_pool" => (Box::new(FixedPool::average(2, 2)), Shape4::new(2, 3, 4, 4)),
        "strided_conv" => {
            let conv = Conv2d::new(3, 3, 2, 2, 0, &mut rng)?;
            (
                Box::new(Chain(vec![Box::new(conv), Box::new(Relu::new())])),
                Shape4::new(2, 3, 4, 4),
            )
        }
        "perceptron" => (Box::new(PerceptronPool::new(p, seed)?), Shape4::new(2, 3, 4, 4)),
        "nn_4_1" => (Box::new(MlpPoolStack::nn_4_1(&p, seed)?), Shape4::new(1, 2, 8, 8)),
        "nn_16_1" => (Box::new(MlpPoolStack::nn_16_1(&p, seed)?), Shape4::new(1, 2, 8, 8)),
        "upsample" => {
            if !opts.iter().any(|(k, _)| *k == "units") {
                p.units = 4;
            }
            (Box::new(PerceptronUpsample::new(p, seed)?), Shape4::new(1, 2, 3, 3))
        }
        "transpose" => (
            Box::new(ConvTranspose2d::new(2, 3, 2, &mut rng)?),
            Shape4::new(2, 2, 3, 3),
        ),
        other => {
            return Err(Error::config(format!(
                "unknown layer kind {other:?}; expected one of {}",
                LAYER_KINDS.join(", ")
            )))
        }
    };
    Ok(NamedLayer {
        spec: spec.to_string(),
        layer,
        input,
    })
}

/// Runs [`check_layer`] on a named layer.
pub fn check_named(spec: &str, seed: u64, tolerance: f64) -> Result<GradReport> {
    let mut named = named_layer(spec, seed)?;
    let mut report = check_layer(named.layer.as_mut(), named.input, seed, tolerance)?;
    report.layer = spec.to_string();
    Ok(report)
}

/// Sequential composition used for compound check targets.
struct Chain(Vec<Box<dyn Layer<f64>>>);

impl Layer<f64> for Chain {
    fn kind(&self) -> &'static str {
        "chain"
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        self.0.iter().try_fold(input, |s, l| l.output_shape(s))
    }

    fn forward(&mut self, x: &Tensor4<f64>, mode: Mode) -> Result<Tensor4<f64>> {
        let mut h = x.clone();
        for l in &mut self.0 {
            h = l.forward(&h, mode)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad_out: &Tensor4<f64>) -> Result<Tensor4<f64>> {
        let mut g = grad_out.clone();
        for l in self.0.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    fn params(&self) -> Vec<&crate::layers::Param<f64>> {
        self.0.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut crate::layers::Param<f64>> {
        self.0.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn smooth_at(&mut self, x: &Tensor4<f64>) -> bool {
        let mut h = x.clone();
        for l in &mut self.0 {
            if !l.smooth_at(&h) {
                return false;
            }
            match l.forward(&h, Mode::Eval) {
                Ok(next) => h = next,
                Err(_) => return true,
            }
        }
        true
    }
}
