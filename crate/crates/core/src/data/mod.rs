//! Datasets: CIFAR-10 binary ingestion, preprocessing, augmentation, batching
//! and a synthetic blob dataset for quick experiments.

mod augment;
mod batch;
mod cifar;
mod synth;

pub use augment::{augment_crop, augment_crop_at, CROP_PAD};
pub use batch::{make_batches, plan_epoch, stack_images, BatchIter, BatchSpec};
pub use cifar::{load_cifar10, parse_cifar10_records, read_cifar10_file, Cifar10, CIFAR10_CLASSES, RECORD_BYTES};
pub use synth::synth_dataset;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// One image with byte-valued pixels in `(channel, row, column)` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImage {
    pub label: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl LabeledImage {
    pub fn new(label: usize, channels: usize, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{} pixels for a {channels}×{height}×{width} image",
                pixels.len()
            )));
        }
        Ok(Self {
            label,
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn shape(&self) -> Shape4 {
        Shape4::new(1, self.channels, self.height, self.width)
    }

    /// Raw pixel values promoted to float, still in `[0, 255]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor4<T> {
        let data = self.pixels.iter().map(|&p| T::of(p as f64)).collect();
        Tensor4::from_vec(self.shape(), data).expect("consistent image")
    }
}

/// Per-channel mean subtraction followed by division by a constant.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl Normalizer {
    /// Red, green and blue means used for CIFAR-10, divided by 256.
    pub fn cifar10() -> Self {
        Self {
            mean: vec![122.782, 117.001, 104.298],
            scale: 256.0,
        }
    }

    pub fn value(&self, channel: usize, raw: f64) -> f64 {
        (raw - self.mean[channel]) / self.scale
    }

    pub fn invert(&self, channel: usize, v: f64) -> f64 {
        v * self.scale + self.mean[channel]
    }

    /// Normalizes every item of a raw `(batch, channel, row, col)` tensor.
    pub fn apply<T: Scalar>(&self, raw: &Tensor4<T>) -> Result<Tensor4<T>> {
        let s = raw.shape();
        if s.channels != self.mean.len() {
            return Err(Error::shape(format!(
                "normalizer has {} channel means, image has {} channels",
                self.mean.len(),
                s.channels
            )));
        }
        let mut out = raw.clone();
        let plane = s.plane();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let c = (k / plane) % s.channels;
            *v = T::of(self.value(c, v.f64()));
        }
        Ok(out)
    }

    pub fn invert_tensor<T: Scalar>(&self, t: &Tensor4<T>) -> Tensor4<T> {
        let s = t.shape();
        let mut out = t.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let c = (k / s.plane()) % s.channels;
            *v = T::of(self.invert(c, v.f64()));
        }
        out
    }
}

/// Normalizes one image.
pub fn normalize<T: Scalar>(img: &LabeledImage, norm: &Normalizer) -> Result<Tensor4<T>> {
    norm.apply(&img.to_tensor::<T>())
}

pub fn class_histogram(images: &[LabeledImage], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for img in images {
        if img.label < classes {
            h[img.label] += 1;
        }
    }
    h
}

/// First `per_class` images of every class, in original order.
pub fn balanced_subset(images: &[LabeledImage], classes: usize, per_class: usize) -> Vec<LabeledImage> {
    let mut taken = vec![0; classes];
    images
        .iter()
        .filter(|img| {
            let ok = img.label < classes && taken[img.label] < per_class;
            if ok {
                taken[img.label] += 1;
            }
            ok
        })
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_normalization_constants() {
        let n = Normalizer::cifar10();
        assert_eq!(n.value(0, 122.782), 0.0);
        assert!((n.value(2, 0.0) - (-0.40741)).abs() < 1e-5);
        assert!((n.value(1, 255.0) - 0.53906).abs() < 1e-5);
    }

    #[test]
    fn normalize_round_trips_bytes() {
        let pixels: Vec<u8> = (0..=255u8).cycle().take(3 * 4 * 4).collect();
        let img = LabeledImage::new(3, 3, 4, 4, pixels.clone()).unwrap();
        let n = Normalizer::cifar10();
        let t = normalize::<f64>(&img, &n).unwrap();
        let back = n.invert_tensor(&t);
        let bytes: Vec<u8> = back.data().iter().map(|v| v.round() as u8).collect();
        assert_eq!(bytes, pixels);
        assert!(back
            .data()
            .iter()
            .zip(&pixels)
            .all(|(v, &p)| (v - p as f64).abs() < 1e-9));
    }

    #[test]
    fn subset_is_balanced() {
        let imgs: Vec<_> = (0..30)
            .map(|i| LabeledImage::new(i % 3, 1, 1, 1, vec![0]).unwrap())
            .collect();
        let sub = balanced_subset(&imgs, 3, 4);
        assert_eq!(class_histogram(&sub, 3), vec![4, 4, 4]);
    }
}
