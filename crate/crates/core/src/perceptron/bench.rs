use std::hint::black_box;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::layers::{Layer, Mode};
use crate::tensor::{Shape4, Tensor4};

/// Per-call times below this are dominated by timer and call overhead.
pub const MEASUREMENT_FLOOR_SECS: f64 = 2e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub side: usize,
    /// Input elements per forward call.
    pub elements: usize,
    pub seconds: f64,
    pub below_floor: bool,
}

impl ProbeRow {
    pub fn ns_per_element(&self) -> f64 {
        self.seconds * 1e9 / self.elements as f64
    }
}

fn time_forward(layer: &mut dyn Layer<f32>, x: &Tensor4<f32>) -> Result<f64> {
    const ROUNDS: usize = 5;
    const ROUND_BUDGET: Duration = Duration::from_millis(20);
    black_box(layer.forward(x, Mode::Eval)?);
    let mut best = f64::INFINITY;
    for _ in 0..ROUNDS {
        let start = Instant::now();
        let mut calls = 0u32;
        while calls == 0 || start.elapsed() < ROUND_BUDGET {
            black_box(layer.forward(black_box(x), Mode::Eval)?);
            calls += 1;
        }
        best = best.min(start.elapsed().as_secs_f64() / calls as f64);
    }
    Ok(best)
}

/// Forward wall-clock time on `channels × side × side` inputs for each side in
/// `sides`. `make` builds a fresh layer per size so shape-bound sharing modes work.
pub fn complexity_probe(
    mut make: impl FnMut() -> Result<Box<dyn Layer<f32>>>,
    sides: &[usize],
    channels: usize,
) -> Result<Vec<ProbeRow>> {
    if sides.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("probe sizes must be strictly increasing"));
    }
    let mut rows = Vec::with_capacity(sides.len());
    for &side in sides {
        let x = Tensor4::new(Shape4::new(1, channels, side, side), 0.5f32)?;
        let mut layer = make()?;
        let seconds = time_forward(layer.as_mut(), &x)?;
        rows.push(ProbeRow {
            side,
            elements: x.len(),
            seconds,
            below_floor: seconds < MEASUREMENT_FLOOR_SECS,
        });
    }
    Ok(rows)
}

/// Least-squares slope of log(time) against log(elements), ignoring rows under
/// the measurement floor. `None` with fewer than two usable rows.
pub fn fit_loglog_slope(rows: &[ProbeRow]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| !r.below_floor)
        .map(|r| ((r.elements as f64).ln(), r.seconds.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}
