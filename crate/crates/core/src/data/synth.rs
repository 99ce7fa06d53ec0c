use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LabeledImage;
use crate::error::{Error, Result};

/// Coarse 4×4 cells (row, col) used for class centers: corners first, so with
/// two classes class 0 sits top-left and class 1 bottom-right.
const CELLS: [(usize, usize); 16] = [
    (0, 0),
    (3, 3),
    (0, 3),
    (3, 0),
    (1, 1),
    (2, 2),
    (1, 2),
    (2, 1),
    (0, 1),
    (3, 2),
    (1, 0),
    (2, 3),
    (0, 2),
    (3, 1),
    (2, 0),
    (1, 3),
];

const SIDE: usize = 16;
const CHANNELS: usize = 3;
const SIGMA: f64 = 1.5;
const PEAK: f64 = 200.0;
const NOISE: f64 = 40.0;

/// Labelled 3×16×16 byte images, each a Gaussian blob near its class center
/// over uniform background noise. Labels cycle so every class is balanced.
pub fn synth_dataset(classes: usize, count: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    if classes < 2 || classes > CELLS.len() {
        return Err(Error::config(format!(
            "synthetic dataset supports 2..=16 classes, got {classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|n| {
            let label = n % classes;
            let (cy, cx) = CELLS[label];
            let y0 = (cy * 4) as f64 + 1.5 + rng.random_range(-1.0..=1.0);
            let x0 = (cx * 4) as f64 + 1.5 + rng.random_range(-1.0..=1.0);
            let mut pixels = vec![0u8; CHANNELS * SIDE * SIDE];
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let d2 = (y as f64 - y0).powi(2) + (x as f64 - x0).powi(2);
                    let blob = PEAK * (-d2 / (2.0 * SIGMA * SIGMA)).exp();
                    for c in 0..CHANNELS {
                        let v = blob + rng.random_range(0.0..NOISE);
                        pixels[(c * SIDE + y) * SIDE + x] = v.round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
            LabeledImage::new(label, CHANNELS, SIDE, SIDE, pixels)
        })
        .collect()
}
