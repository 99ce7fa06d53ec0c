use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{augment_crop, LabeledImage, Normalizer};
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub batch_size: usize,
    /// Every batch holds `batch_size / classes` images of each class.
    pub balanced: bool,
    pub augment: bool,
    pub seed: u64,
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

/// Index lists for one epoch. Incomplete batches are dropped: in balanced mode
/// that is the per-class remainder, otherwise the final partial batch.
pub fn plan_epoch(labels: &[usize], classes: usize, spec: &BatchSpec, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if spec.batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label: bad, classes });
    }
    let mut rng = epoch_rng(spec.seed, epoch, 0);
    if !spec.balanced {
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng);
        return Ok(order.chunks_exact(spec.batch_size).map(<[usize]>::to_vec).collect());
    }
    if !spec.batch_size.is_multiple_of(classes) {
        return Err(Error::config(format!(
            "balanced batches need a batch size divisible by {classes} classes, got {}",
            spec.batch_size
        )));
    }
    let per_class = spec.batch_size / classes;
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for pool in &mut by_class {
        pool.shuffle(&mut rng);
    }
    let batches = by_class.iter().map(|p| p.len() / per_class).min().unwrap_or(0);
    let mut plan = Vec::with_capacity(batches);
    for b in 0..batches {
        let mut batch: Vec<usize> = by_class
            .iter()
            .flat_map(|p| p[b * per_class..(b + 1) * per_class].iter().copied())
            .collect();
        batch.shuffle(&mut rng);
        plan.push(batch);
    }
    Ok(plan)
}

/// Normalized `(batch, c, h, w)` tensor for the given images.
pub fn stack_images(images: &[&LabeledImage], norm: &Normalizer) -> Result<Tensor4<f32>> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let (c, h, w) = (first.channels, first.height, first.width);
    if norm.mean.len() != c {
        return Err(Error::shape(format!(
            "normalizer has {} channel means for {c} channels",
            norm.mean.len()
        )));
    }
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(Error::shape("images in one batch must share a shape"));
        }
        let plane = h * w;
        data.extend(
            img.pixels
                .iter()
                .enumerate()
                .map(|(k, &p)| norm.value(k / plane, p as f64) as f32),
        );
    }
    Tensor4::from_vec(Shape4::new(images.len(), c, h, w), data)
}

/// Yields normalized (and optionally crop-augmented) training batches.
pub struct BatchIter<'a> {
    images: &'a [LabeledImage],
    plan: std::vec::IntoIter<Vec<usize>>,
    norm: &'a Normalizer,
    augment: Option<ChaCha8Rng>,
    len: usize,
}

impl BatchIter<'_> {
    pub fn batches(&self) -> usize {
        self.len
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<(Tensor4<f32>, Vec<usize>)>;

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.plan.next()?;
        let labels = idx.iter().map(|&i| self.images[i].label).collect();
        let batch = match &mut self.augment {
            Some(rng) => {
                let cropped: Vec<LabeledImage> = idx.iter().map(|&i| augment_crop(&self.images[i], rng)).collect();
                stack_images(&cropped.iter().collect::<Vec<_>>(), self.norm)
            }
            None => stack_images(&idx.iter().map(|&i| &self.images[i]).collect::<Vec<_>>(), self.norm),
        };
        Some(batch.map(|t| (t, labels)))
    }
}

pub fn make_batches<'a>(
    images: &'a [LabeledImage],
    classes: usize,
    spec: &BatchSpec,
    epoch: usize,
    norm: &'a Normalizer,
) -> Result<BatchIter<'a>> {
    let labels: Vec<usize> = images.iter().map(|i| i.label).collect();
    let plan = plan_epoch(&labels, classes, spec, epoch)?;
    Ok(BatchIter {
        images,
        len: plan.len(),
        plan: plan.into_iter(),
        norm,
        augment: spec.augment.then(|| epoch_rng(spec.seed, epoch, 1)),
    })
}
