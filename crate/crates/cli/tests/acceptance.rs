//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! criterion fails. CIFAR-10 checks run only when `POOLNET_DATA_ROOT` points
//! at the binary dataset; otherwise they report NOT RUN.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use poolnet::audit::audit_params;
use poolnet::config::{DatasetKind, TrainConfig, DATA_ROOT_ENV};
use poolnet::data::{class_histogram, load_cifar10, Normalizer, RECORD_BYTES};
use poolnet::gradcheck::{check_named, DEFAULT_STEP};
use poolnet::init::uniform_tensor;
use poolnet::layers::{FixedPool, Layer, Mode};
use poolnet::model::{build_model, Arch, HeadKind, ModelConfig, PoolPreset, Role};
use poolnet::perceptron::{
    complexity_probe, fit_loglog_slope, MlpPoolStack, PerceptronPool, PerceptronSpec, PerceptronUpsample, SharingMode,
};
use poolnet::train::{load_datasets, train, train_on, CHECKPOINT_FILE, METRICS_FILE};
use poolnet::Shape4;

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

type Check = Result<Outcome, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn within(budget: Duration, started: Instant, outcome: Outcome) -> Outcome {
    let took = started.elapsed();
    match outcome {
        Outcome::Pass(d) if took > budget => Outcome::Fail(format!("{d}; took {took:.1?}, budget {budget:?}")),
        Outcome::Pass(d) => Outcome::Pass(format!("{d}; {took:.1?}")),
        other => other,
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

/// 1. Perceptron pooling with average init and identity activation equals
///    average pooling on 100 random f64 tensors.
fn average_equivalence() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let modes = [
        SharingMode::Global,
        SharingMode::PerChannel,
        SharingMode::PerField,
        SharingMode::PerTensor,
    ];
    let mut worst: f64 = 0.0;
    for n in 0..100 {
        let win = rng.random_range(1..=4);
        let s = Shape4::new(
            rng.random_range(1..=3),
            rng.random_range(1..=4),
            win * rng.random_range(1..=6),
            win * rng.random_range(1..=6),
        );
        let x = uniform_tensor::<f64, _>(s, -10.0, 10.0, &mut rng);
        let spec = PerceptronSpec {
            sharing: modes[n % 4],
            ..PerceptronSpec::default()
        }
        .window(win, win, win);
        let mut p = PerceptronPool::<f64>::new(spec, n as u64).map_err(e)?;
        let mut avg = FixedPool::average(win, win);
        let d = p
            .forward(&x, Mode::Eval)
            .map_err(e)?
            .max_abs_diff(&avg.forward(&x, Mode::Eval).map_err(e)?);
        worst = worst.max(d);
    }
    Ok(within(
        Duration::from_secs(1),
        started,
        verdict(
            worst <= 1e-12,
            format!("max |diff| {worst:.2e} over 100 tensors (tol 1e-12)"),
        ),
    ))
}

/// 2. Finite-difference gradient suite at tolerance 1e-4.
fn gradient_suite() -> Check {
    let started = Instant::now();
    let named = [
        "conv2d",
        "dense",
        "batchnorm",
        "max_pool",
        "avg_pool",
        "strided_conv",
        "perceptron:sharing=global",
        "perceptron:sharing=per_channel",
        "perceptron:sharing=per_field",
        "perceptron:sharing=per_tensor",
        "nn_4_1",
        "nn_16_1",
        "upsample:units=4",
        "upsample:units=16",
    ];
    let mut failed = Vec::new();
    let mut worst: f64 = 0.0;
    for spec in named {
        let r = check_named(spec, 0, 1e-4).map_err(e)?;
        worst = worst.max(r.max_rel_err);
        if !r.passed() {
            failed.push(format!("{spec} ({:.2e})", r.max_rel_err));
        }
    }
    let ok = failed.is_empty() && DEFAULT_STEP == 1e-5;
    Ok(within(
        Duration::from_secs(120),
        started,
        verdict(
            ok,
            if ok {
                format!("{} layers, worst rel err {worst:.2e} (tol 1e-4, h 1e-5)", named.len())
            } else {
                format!("failing: {}", failed.join(", "))
            },
        ),
    ))
}

/// 3. Parameter audit.
fn parameter_audit() -> Check {
    let pool = |arch, preset, bias: bool| -> Result<usize, String> {
        let mut cfg = ModelConfig::new(arch, preset);
        cfg.perceptron.use_bias = bias;
        Ok(audit_params(&cfg, 10).map_err(e)?.pooling_total)
    };
    let total = |head| -> Result<usize, String> {
        let mut cfg = ModelConfig::new(Arch::ModelALike, PoolPreset::Max);
        cfg.head = head;
        Ok(audit_params(&cfg, 10).map_err(e)?.model_total)
    };
    use Arch::*;
    use PoolPreset::*;
    let checks: Vec<(&str, usize, usize)> = vec![
        ("a/perceptron", pool(ModelALike, Perceptron, true)?, 10),
        ("a/perceptron no bias", pool(ModelALike, Perceptron, false)?, 8),
        ("a/nn_4_1", pool(ModelALike, Nn4_1, true)?, 50),
        ("a/nn_field", pool(ModelALike, NnField, true)?, 1600),
        ("a/nn_tensor", pool(ModelALike, NnTensor, true)?, 122_880),
        ("a/strided_conv", pool(ModelALike, StridedConv, true)?, 82_112),
        ("a/nn_16_1", pool(ModelALike, Nn16_1, true)?, 194),
        (
            "gap perceptron increment",
            total(HeadKind::GapPerceptron)? - total(HeadKind::GapAverage)?,
            65,
        ),
        ("c/perceptron", pool(ModelCLike, Perceptron, true)?, 15),
        ("c/nn_4_1", pool(ModelCLike, Nn4_1, true)?, 75),
        ("c/strided_conv", pool(ModelCLike, StridedConv, true)?, 344_512),
    ];
    let wrong: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| got != want)
        .map(|(n, got, want)| format!("{n} {got} != {want}"))
        .collect();
    let nn_z = pool(ModelALike, NnZ, true)?;
    Ok(verdict(
        wrong.is_empty(),
        if wrong.is_empty() {
            format!(
                "{} counts exact; nn_z {nn_z} = (64+128)*5 by formula (770 excluded as inconsistent with these widths)",
                checks.len()
            )
        } else {
            wrong.join(", ")
        },
    ))
}

/// 4. Shape laws on 32×32 inputs for 20 random channel/batch combinations.
fn shape_laws() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let base = PerceptronSpec::default();
    let nn4 = MlpPoolStack::<f32>::nn_4_1(&base, 0).map_err(e)?;
    let nn16 = MlpPoolStack::<f32>::nn_16_1(&base, 0).map_err(e)?;
    let up = PerceptronUpsample::<f32>::with_factor(2, &base, 0).map_err(e)?;
    let mut bad = Vec::new();
    let mut intermediate = None;
    for _ in 0..20 {
        let (b, c) = (rng.random_range(1..=8), rng.random_range(1..=16));
        let s = Shape4::new(b, c, 32, 32);
        let side = |t: Shape4| (t.height, t.width);
        let n4 = nn4.output_shape(s).map_err(e)?;
        let n16 = nn16.shapes(s).map_err(e)?;
        let u = up.output_shape(s).map_err(e)?;
        intermediate = Some(side(n16[1]));
        if side(n4) != (16, 16) || side(n16[2]) != (16, 16) || side(n16[1]) != (64, 64) || side(u) != (64, 64) {
            bad.push(format!("b={b} c={c}: nn_4_1 {n4}, nn_16_1 {:?}, up {u}", n16));
        }
        if n4.batch != b || n4.channels != c || u.channels != c || n16[2].channels != c {
            bad.push(format!("b={b} c={c}: batch/channels changed"));
        }
    }
    let (ih, iw) = intermediate.unwrap_or((0, 0));
    Ok(verdict(
        bad.is_empty(),
        if bad.is_empty() {
            format!(
                "20 combos: nn_4_1 16x16, nn_16_1 16x16 via {ih}x{iw} (16 units on 2x2/2 double each side), upsample p=4 64x64"
            )
        } else {
            bad.join("; ")
        },
    ))
}

fn tiny_config(dir: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::new(ModelConfig::new(Arch::TinySynth, PoolPreset::Perceptron));
    cfg.seed = 1;
    cfg.epochs = 20;
    cfg.data.classes = 4;
    cfg.data.train_count = 800;
    cfg.data.val_count = 400;
    cfg.data.batch_size = 20;
    cfg.output.dir = dir.to_path_buf();
    cfg.output.deterministic = true;
    cfg
}

/// 5. tiny_synth with perceptron pooling learns; lr_factor 0 freezes pooling.
fn desk_learning(scratch: &Path) -> Check {
    let started = Instant::now();
    let cfg = tiny_config(&scratch.join("learn"));
    let out = train(&cfg).map_err(e)?;
    let best_epoch = out.metrics.iter().find(|r| r.val_acc >= 0.95).map(|r| r.epoch);
    let took = started.elapsed();

    let mut frozen = tiny_config(&scratch.join("frozen"));
    frozen.model.perceptron.lr_factor = 0.0;
    let initial = build_model::<f32>(&frozen.model, frozen.data.classes, frozen.seed).map_err(e)?;
    let pool_values = |net: &poolnet::model::Network<f32>| -> Vec<Vec<u32>> {
        net.blocks()
            .iter()
            .filter(|b| matches!(b.role, Role::Pool(_)))
            .flat_map(|b| b.layer.params())
            .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
            .collect()
    };
    let data = load_datasets(&frozen).map_err(e)?;
    let trained = train_on(&frozen, &data, |_| {}).map_err(e)?;
    let identical = pool_values(&initial) == pool_values(&trained.net) && !pool_values(&initial).is_empty();
    let ok = best_epoch.is_some() && out.final_val_acc() >= 0.95 && took < Duration::from_secs(120) && identical;
    Ok(verdict(
        ok,
        format!(
            "val_acc {:.4} after 20 epochs (>= 0.95 first at epoch {}), {took:.1?} (< 120s); lr_factor 0 pooling weights {}",
            out.final_val_acc(),
            best_epoch.map_or("never".into(), |e| e.to_string()),
            if identical { "bit-identical" } else { "CHANGED" }
        ),
    ))
}

fn cifar_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

/// 6. Scaled CIFAR-10: perceptron pooling within one point of average pooling.
fn cifar_ordering(scratch: &Path) -> Check {
    let Some(root) = cifar_root() else {
        return Ok(Outcome::NotRun(format!(
            "set {DATA_ROOT_ENV} to the CIFAR-10 binary directory"
        )));
    };
    let started = Instant::now();
    let mut accs = Vec::new();
    let mut data = None;
    for pooling in [PoolPreset::Average, PoolPreset::Perceptron] {
        let mut cfg = TrainConfig::new(ModelConfig::new(Arch::ModelCLike, pooling));
        cfg.seed = 0;
        cfg.epochs = 15;
        cfg.data.dataset = DatasetKind::Cifar10;
        cfg.data.root = Some(root.clone());
        cfg.data.classes = 10;
        cfg.data.train_per_class = Some(500);
        cfg.data.val_per_class = Some(200);
        cfg.data.batch_size = 50;
        cfg.data.augment = true;
        cfg.output.dir = scratch.join(format!("cifar_{}", pooling.name()));
        if data.is_none() {
            data = Some(load_datasets(&cfg).map_err(e)?);
        }
        accs.push(
            train_on(&cfg, data.as_ref().unwrap(), |_| {})
                .map_err(e)?
                .final_val_acc(),
        );
    }
    let (avg, per) = (accs[0], accs[1]);
    Ok(within(
        Duration::from_secs(30 * 60),
        started,
        verdict(
            per >= avg - 0.01,
            format!("perceptron {per:.4} vs average {avg:.4} on 5000 training images, 15 epochs (margin 1.0 pt)"),
        ),
    ))
}

/// 7. Perceptron pooling time grows linearly with input area.
fn complexity() -> Check {
    let started = Instant::now();
    let sides = [64, 128, 256, 512];
    let rows = complexity_probe(
        || Ok(Box::new(PerceptronPool::<f32>::new(PerceptronSpec::default(), 0)?) as Box<dyn Layer<f32>>),
        &sides,
        4,
    )
    .map_err(e)?;
    let slope = fit_loglog_slope(&rows).ok_or("too few sizes above the timer floor")?;
    Ok(within(
        Duration::from_secs(60),
        started,
        verdict(
            (0.8..=1.3).contains(&slope),
            format!("log-log slope {slope:.3} over areas 64^2..512^2 (range [0.8, 1.3])"),
        ),
    ))
}

/// 8. Two seeded runs of the criterion-5 configuration write identical files.
fn determinism(scratch: &Path) -> Check {
    let mut files = Vec::new();
    for run in ["det_a", "det_b"] {
        let cfg = tiny_config(&scratch.join(run));
        train(&cfg).map_err(e)?;
        let m = std::fs::read(cfg.output.dir.join(METRICS_FILE)).map_err(e)?;
        let c = std::fs::read(cfg.output.dir.join(CHECKPOINT_FILE)).map_err(e)?;
        files.push((m, c));
    }
    let metrics_same = files[0].0 == files[1].0;
    let ckpt_same = files[0].1 == files[1].1;
    Ok(verdict(
        metrics_same && ckpt_same,
        format!(
            "metrics {} ({} bytes), checkpoint {} ({} bytes)",
            if metrics_same { "identical" } else { "DIFFER" },
            files[0].0.len(),
            if ckpt_same { "identical" } else { "DIFFER" },
            files[0].1.len()
        ),
    ))
}

fn write_fixture(dir: &Path) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let names = [
        "data_batch_1.bin",
        "data_batch_2.bin",
        "data_batch_3.bin",
        "data_batch_4.bin",
        "data_batch_5.bin",
        "test_batch.bin",
    ];
    for (f, name) in names.iter().enumerate() {
        let mut bytes = vec![0u8; 10_000 * RECORD_BYTES];
        for (i, rec) in bytes.chunks_exact_mut(RECORD_BYTES).enumerate() {
            rec[0] = ((i + f) % 10) as u8;
            rec[1..].iter_mut().step_by(97).for_each(|b| *b = rng.random());
        }
        std::fs::write(dir.join(name), bytes).map_err(e)?;
    }
    Ok(())
}

/// 9. CIFAR-10 ingestion on a fixture in the official layout, and on the real
///    dataset when present.
fn cifar_ingestion(scratch: &Path) -> Check {
    let norm = Normalizer::cifar10();
    let zero = norm.value(0, 122.782);
    let fixture = scratch.join("cifar_fixture");
    std::fs::create_dir_all(&fixture).map_err(e)?;
    write_fixture(&fixture)?;
    let set = load_cifar10(&fixture).map_err(e)?;
    let fixture_ok = set.train.len() == 50_000
        && set.test.len() == 10_000
        && class_histogram(&set.train, 10).iter().all(|&c| c == 5000)
        && zero == 0.0;
    let mut detail = format!(
        "layout fixture {}/{} records, 5000 per class: {}; red 122.782 -> {zero}",
        set.train.len(),
        set.test.len(),
        fixture_ok
    );
    drop(set);
    let _ = std::fs::remove_dir_all(&fixture);
    let Some(root) = cifar_root() else {
        if !fixture_ok {
            return Ok(Outcome::Fail(detail));
        }
        return Ok(Outcome::NotRun(format!(
            "{detail}; official files not checked, set {DATA_ROOT_ENV}"
        )));
    };
    let real = load_cifar10(&root).map_err(e)?;
    let hist = class_histogram(&real.train, 10);
    let real_ok = real.train.len() == 50_000 && real.test.len() == 10_000 && hist.iter().all(|&c| c == 5000);
    detail.push_str(&format!(
        "; official {}/{} records, per class {hist:?}",
        real.train.len(),
        real.test.len()
    ));
    Ok(verdict(fixture_ok && real_ok, detail))
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("scratch directory");
    let s = scratch.path();
    let criteria: Vec<Criterion> = vec![
        ("average equivalence", Box::new(average_equivalence)),
        ("gradient suite", Box::new(gradient_suite)),
        ("parameter audit", Box::new(parameter_audit)),
        ("shape laws", Box::new(shape_laws)),
        ("desk-scale learning", Box::new(|| desk_learning(s))),
        ("CIFAR-10 ordering", Box::new(|| cifar_ordering(s))),
        ("complexity linearity", Box::new(complexity)),
        ("determinism", Box::new(|| determinism(s))),
        ("CIFAR-10 ingestion", Box::new(|| cifar_ingestion(s))),
    ];
    let (mut pass, mut fail, mut not_run) = (0, 0, 0);
    for (i, (name, check)) in criteria.iter().enumerate() {
        let line = match check() {
            Ok(Outcome::Pass(d)) => {
                pass += 1;
                format!("PASS     {name}: {d}")
            }
            Ok(Outcome::Fail(d)) => {
                fail += 1;
                format!("FAIL     {name}: {d}")
            }
            Ok(Outcome::NotRun(d)) => {
                not_run += 1;
                format!("NOT RUN  {name}: {d}")
            }
            Err(err) => {
                fail += 1;
                format!("FAIL     {name}: error: {err}")
            }
        };
        println!("criterion {}  {line}", i + 1);
    }
    println!("acceptance: {pass} passed, {fail} failed, {not_run} not run");
    if fail == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
