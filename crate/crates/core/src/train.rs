//! Training, evaluation and metrics.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::config::{DatasetKind, TrainConfig};
use crate::data::{
    balanced_subset, load_cifar10, make_batches, stack_images, synth_dataset, BatchSpec, LabeledImage, Normalizer,
};
use crate::error::{Error, Result};
use crate::layers::{softmax_xent, Mode};
use crate::model::{build_model, Network};
use crate::optim::Optimizer;
use crate::tensor::Tensor4;

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_acc,lr,wall_seconds";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.train_acc, self.val_acc, self.lr, self.wall_seconds
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(Error::Format(format!("metrics row needs 6 fields: {line:?}")));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .map_err(|_| Error::Format(format!("bad number {:?} in metrics row", f[i])))
        };
        Ok(Self {
            epoch: f[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad epoch {:?}", f[0])))?,
            train_loss: num(1)?,
            train_acc: num(2)?,
            val_acc: num(3)?,
            lr: num(4)?,
            wall_seconds: num(5)?,
        })
    }
}

/// Reads a metrics file, skipping `#` provenance lines and checking the header.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => return Err(Error::Format(format!("metrics header is {other:?}"))),
    }
    lines.map(MetricsRow::parse).collect()
}

pub struct Datasets {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub classes: usize,
}

pub fn load_datasets(cfg: &TrainConfig) -> Result<Datasets> {
    let d = &cfg.data;
    match d.dataset {
        DatasetKind::Synth => Ok(Datasets {
            train: synth_dataset(d.classes, d.train_count, d.seed)?,
            val: synth_dataset(d.classes, d.val_count, d.seed.wrapping_add(1))?,
            classes: d.classes,
        }),
        DatasetKind::Cifar10 => {
            let root = d.resolved_root().ok_or_else(|| {
                Error::config(format!("CIFAR-10 needs data.root or {}", crate::config::DATA_ROOT_ENV))
            })?;
            let all = load_cifar10(&root)?;
            let pick = |imgs: Vec<LabeledImage>, per: Option<usize>| match per {
                Some(n) => balanced_subset(&imgs, d.classes, n),
                None => imgs,
            };
            Ok(Datasets {
                train: pick(all.train, d.train_per_class),
                val: pick(all.test, d.val_per_class),
                classes: d.classes,
            })
        }
    }
}

/// Normalization applied to every dataset.
pub fn normalizer() -> Normalizer {
    Normalizer::cifar10()
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

fn count_correct(logits: &Tensor4<f32>, labels: &[usize]) -> usize {
    let k = logits.shape().item_len();
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Top-1 accuracy in evaluation mode.
pub fn evaluate(net: &mut Network<f32>, images: &[LabeledImage], classes: usize, batch: usize) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(img) = images.iter().find(|i| i.label >= classes) {
        return Err(Error::Label {
            label: img.label,
            classes,
        });
    }
    let norm = normalizer();
    let mut correct = 0;
    for chunk in images.chunks(batch.max(1)) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let x = stack_images(&refs, &norm)?;
        let logits = net.forward(&x, Mode::Eval)?;
        if logits.shape().item_len() != classes {
            return Err(Error::config(format!(
                "model predicts {} classes, dataset expects {classes}",
                logits.shape().item_len()
            )));
        }
        let labels: Vec<usize> = chunk.iter().map(|i| i.label).collect();
        correct += count_correct(&logits, &labels);
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Loads a checkpoint and evaluates it on `images`.
pub fn evaluate_checkpoint(path: &Path, images: &[LabeledImage]) -> Result<f64> {
    let (cfg, mut net) = Checkpoint::load(path)?.restore()?;
    evaluate(&mut net, images, cfg.data.classes, cfg.data.eval_batch_size)
}

pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub net: Network<f32>,
}

impl TrainOutcome {
    pub fn final_val_acc(&self) -> f64 {
        self.metrics.last().map_or(0.0, |r| r.val_acc)
    }
}

fn write_line(file: &mut File, path: &Path, line: &str) -> Result<()> {
    writeln!(file, "{line}")
        .and_then(|_| file.flush())
        .map_err(|e| Error::io(path, e))
}

/// Trains on the configured dataset.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let data = load_datasets(cfg)?;
    train_on(cfg, &data, |_| {})
}

/// Trains on already loaded data, calling `on_epoch` after each metrics row.
pub fn train_on(cfg: &TrainConfig, data: &Datasets, mut on_epoch: impl FnMut(&MetricsRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics_path = dir.join(METRICS_FILE);
    let checkpoint_path = dir.join(CHECKPOINT_FILE);
    let mut metrics_file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    for line in cfg.provenance() {
        write_line(&mut metrics_file, &metrics_path, &format!("# {line}"))?;
    }
    write_line(&mut metrics_file, &metrics_path, METRICS_HEADER)?;

    let mut net = build_model::<f32>(&cfg.model, data.classes, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optim.clone(), &net.params());
    let norm = normalizer();
    let spec = BatchSpec {
        batch_size: cfg.data.batch_size,
        balanced: cfg.data.balanced,
        augment: cfg.data.augment,
        seed: cfg.seed,
    };
    let start = Instant::now();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = cfg.schedule.lr(cfg.optim.lr, epoch);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, batch) in make_batches(&data.train, data.classes, &spec, epoch, &norm)?.enumerate() {
            let (x, labels) = batch?;
            net.zero_grad();
            let logits = net.forward(&x, Mode::Train)?;
            let (loss, grad) = softmax_xent(&logits, &labels)?;
            if !loss.is_finite() {
                let place = match net.forward_checked(&x, Mode::Train) {
                    Err(Error::NonFinite(m)) => m,
                    _ => "loss".into(),
                };
                return Err(Error::NonFinite(format!("epoch {epoch} batch {b}: non-finite {place}")));
            }
            net.backward(&grad)?;
            opt.step(net.params_mut(), lr)?;
            loss_sum += loss * labels.len() as f64;
            correct += count_correct(&logits, &labels);
            seen += labels.len();
        }
        if seen == 0 {
            return Err(Error::config(
                "the batch plan is empty; the training set is smaller than one batch",
            ));
        }
        let val_acc = evaluate(&mut net, &data.val, data.classes, cfg.data.eval_batch_size)?;
        let row = MetricsRow {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_acc,
            lr,
            wall_seconds: if cfg.output.deterministic {
                0.0
            } else {
                start.elapsed().as_secs_f64()
            },
        };
        write_line(&mut metrics_file, &metrics_path, &row.to_csv())?;
        on_epoch(&row);
        metrics.push(row);
        if cfg.output.checkpoint_decays && epoch < cfg.epochs && cfg.schedule.is_decay_epoch(epoch + 1) {
            Checkpoint::capture(cfg, &net).save(&dir.join(format!("checkpoint_epoch{epoch}.bin")))?;
        }
    }
    Checkpoint::capture(cfg, &net).save(&checkpoint_path)?;
    Ok(TrainOutcome {
        metrics,
        metrics_path,
        checkpoint_path,
        net,
    })
}

/// Repeats training `runs` times with seeds `seed, seed + 1, …`, each run
/// writing to `run<r>` below the configured output directory.
pub fn train_runs(
    cfg: &TrainConfig,
    runs: usize,
    mut on_epoch: impl FnMut(usize, &MetricsRow),
) -> Result<Vec<TrainOutcome>> {
    if runs == 0 {
        return Err(Error::config("at least one run is needed"));
    }
    let data = load_datasets(cfg)?;
    (0..runs)
        .map(|r| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(r as u64);
            if runs > 1 {
                c.output.dir = cfg.output.dir.join(format!("run{r}"));
            }
            train_on(&c, &data, |row| on_epoch(r, row))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, ModelConfig, PoolPreset};

    fn quick(dir: &Path) -> TrainConfig {
        let mut cfg = TrainConfig::new(ModelConfig::new(Arch::TinySynth, PoolPreset::Perceptron));
        cfg.epochs = 2;
        cfg.data.classes = 2;
        cfg.data.train_count = 80;
        cfg.data.val_count = 40;
        cfg.data.batch_size = 10;
        cfg.output.dir = dir.to_path_buf();
        cfg.output.deterministic = true;
        cfg
    }

    #[test]
    fn metrics_row_round_trip() {
        let r = MetricsRow {
            epoch: 3,
            train_loss: 0.25,
            train_acc: 0.5,
            val_acc: 0.75,
            lr: 1e-3,
            wall_seconds: 1.5,
        };
        assert_eq!(MetricsRow::parse(&r.to_csv()).unwrap(), r);
        assert!(MetricsRow::parse("1,2,3").is_err());
    }

    #[test]
    fn short_run_writes_metrics_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&quick(dir.path())).unwrap();
        let rows = read_metrics(&out.metrics_path).unwrap();
        assert_eq!(rows, out.metrics);
        assert_eq!(rows.len(), 2);
        assert!(rows
            .iter()
            .all(|r| (0.0..=1.0).contains(&r.val_acc) && r.wall_seconds == 0.0));
        let data = load_datasets(&quick(dir.path())).unwrap();
        let acc = evaluate_checkpoint(&out.checkpoint_path, &data.val).unwrap();
        assert_eq!(acc, out.final_val_acc());
    }

    #[test]
    fn decay_epochs_checkpoint_and_scale_lr() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick(dir.path());
        cfg.epochs = 3;
        cfg.schedule.epochs = vec![2];
        let out = train(&cfg).unwrap();
        assert!(dir.path().join("checkpoint_epoch1.bin").exists());
        let lrs: Vec<f64> = out.metrics.iter().map(|r| r.lr).collect();
        assert_eq!(lrs[0], 1e-3);
        assert!((lrs[1] - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn evaluation_errors() {
        let mut net = build_model::<f32>(&ModelConfig::new(Arch::TinySynth, PoolPreset::Max), 2, 0).unwrap();
        assert!(matches!(evaluate(&mut net, &[], 2, 10), Err(Error::EmptyDataset)));
        let imgs = synth_dataset(4, 8, 0).unwrap();
        assert!(matches!(evaluate(&mut net, &imgs, 2, 10), Err(Error::Label { .. })));
        assert!(evaluate(&mut net, &imgs, 4, 10).is_err());
    }

    #[test]
    fn diverging_run_names_a_layer() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick(dir.path());
        cfg.optim.kind = crate::optim::OptimizerKind::Sgd;
        cfg.optim.lr = 1e30;
        let err = train(&cfg).err().unwrap().to_string();
        assert!(err.contains("non-finite"), "{err}");
        assert!(err.contains("layer") || err.contains("loss"), "{err}");
    }
}
