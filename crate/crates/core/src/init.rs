//! Parameter initializers: Glorot-uniform for standard layers, average-pool
//! initialization and sign-pattern initialization for pooling perceptrons.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perceptron::PerceptronBank;
use crate::tensor::{Scalar, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    Glorot,
    #[default]
    Average,
    Pattern,
}

/// Uniform samples in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_init<T: Scalar, R: Rng + ?Sized>(
    len: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<Vec<T>> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::config(format!(
            "glorot fans must be positive, got {fan_in}/{fan_out}"
        )));
    }
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Ok((0..len).map(|_| T::of(rng.random_range(-bound..=bound))).collect())
}

pub fn uniform_tensor<T: Scalar, R: Rng + ?Sized>(shape: Shape4, lo: f64, hi: f64, rng: &mut R) -> Tensor4<T> {
    let data = (0..shape.len()).map(|_| T::of(rng.random_range(lo..hi))).collect();
    Tensor4::from_vec(shape, data).expect("valid shape")
}

/// Every weight `1/(W·H)`, every bias 0: the perceptron starts as average pooling.
pub fn average_init<T: Scalar>(bank: &mut PerceptronBank<T>) {
    let v = T::of(1.0 / bank.window_len() as f64);
    bank.weight_mut().value.fill(v);
    if let Some(b) = bank.bias_mut() {
        b.value.fill(T::zero());
    }
}

pub fn glorot_bank_init<T: Scalar, R: Rng + ?Sized>(bank: &mut PerceptronBank<T>, rng: &mut R) -> Result<()> {
    let fan_in = bank.window_len();
    let fan_out = bank.units();
    let w = bank.weight_mut();
    let vals = glorot_init::<T, R>(w.value.len(), fan_in, fan_out, rng)?;
    w.value.data_mut().copy_from_slice(&vals);
    if let Some(b) = bank.bias_mut() {
        b.value.fill(T::zero());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternClass {
    AllSame,
    Diagonal,
    XSplit,
    YSplit,
}

/// A `height × width` grid of ±1 signs, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SignPattern {
    pub height: usize,
    pub width: usize,
    pub signs: Vec<i8>,
}

impl SignPattern {
    fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let signs = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .map(|(y, x)| if f(y, x) { 1 } else { -1 })
            .collect();
        Self { height, width, signs }
    }

    pub fn get(&self, y: usize, x: usize) -> i8 {
        self.signs[y * self.width + x]
    }

    fn negated(&self) -> Self {
        Self {
            signs: self.signs.iter().map(|s| -s).collect(),
            ..*self
        }
    }

    fn on_diagonal(height: usize, width: usize, y: usize, x: usize, anti: bool) -> bool {
        let x = if anti { width - 1 - x } else { x };
        // a cell is on the diagonal when the line through the grid corners crosses it
        if height >= width {
            x == (y * width) / height
        } else {
            y == (x * height) / width
        }
    }

    /// Builds a pattern of the given class. `split` is the first column (row) of
    /// the second sign band for the split classes; `positive` picks the sign of
    /// the majority/first region.
    pub fn build(class: PatternClass, height: usize, width: usize, split: usize, positive: bool) -> Self {
        let p = match class {
            PatternClass::AllSame => Self::from_fn(height, width, |_, _| true),
            PatternClass::Diagonal => {
                Self::from_fn(height, width, |y, x| !Self::on_diagonal(height, width, y, x, false))
            }
            PatternClass::XSplit => Self::from_fn(height, width, |_, x| x < split),
            PatternClass::YSplit => Self::from_fn(height, width, |y, _| y < split),
        };
        if positive {
            p
        } else {
            p.negated()
        }
    }

    /// Which of the four declared classes this grid belongs to, if any. Both
    /// diagonals, their mirror images and both sign polarities are accepted.
    pub fn classify(&self) -> Option<PatternClass> {
        let (h, w) = (self.height, self.width);
        let first = self.signs[0];
        if self.signs.iter().all(|&s| s == first) {
            return Some(PatternClass::AllSame);
        }
        // on non-square grids the rasterized anti-diagonal differs from the
        // mirrored diagonal, so every mirror image counts
        for anti in [false, true] {
            let diag = Self::from_fn(h, w, |y, x| !Self::on_diagonal(h, w, y, x, anti));
            for image in diag.orbit() {
                if *self == image || *self == image.negated() {
                    return Some(PatternClass::Diagonal);
                }
            }
        }
        let columns_constant = (0..w).all(|x| (0..h).all(|y| self.get(y, x) == self.get(0, x)));
        if columns_constant && (1..w).filter(|&x| self.get(0, x) != self.get(0, x - 1)).count() == 1 {
            return Some(PatternClass::XSplit);
        }
        let rows_constant = (0..h).all(|y| (0..w).all(|x| self.get(y, x) == self.get(y, 0)));
        if rows_constant && (1..h).filter(|&y| self.get(y, 0) != self.get(y - 1, 0)).count() == 1 {
            return Some(PatternClass::YSplit);
        }
        None
    }

    pub fn mirror_x(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x) > 0)
    }

    pub fn mirror_y(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(self.height - 1 - y, x) > 0)
    }

    /// Quarter turn clockwise; swaps height and width.
    pub fn rotate90(&self) -> Self {
        let (h, w) = (self.height, self.width);
        Self::from_fn(w, h, |y, x| self.get(h - 1 - x, y) > 0)
    }

    /// Distinct images of this pattern under rotations and mirrors, starting with
    /// the pattern itself, then its x-mirror, y-mirror and half turn. Quarter
    /// turns are only included for square grids.
    pub fn orbit(&self) -> Vec<SignPattern> {
        let mut out: Vec<SignPattern> = Vec::with_capacity(8);
        let mut push = |p: SignPattern| {
            if !out.contains(&p) {
                out.push(p);
            }
        };
        push(self.clone());
        push(self.mirror_x());
        push(self.mirror_y());
        push(self.mirror_x().mirror_y());
        if self.height == self.width {
            let r = self.rotate90();
            push(r.clone());
            push(r.mirror_x());
            push(r.mirror_y());
            push(r.mirror_x().mirror_y());
        }
        out
    }
}

/// Uniformly chooses one of the classes that can be expressed on the grid.
pub fn random_pattern<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> (PatternClass, SignPattern) {
    let mut classes = vec![PatternClass::AllSame];
    if height > 1 && width > 1 {
        classes.push(PatternClass::Diagonal);
    }
    if width > 1 {
        classes.push(PatternClass::XSplit);
    }
    if height > 1 {
        classes.push(PatternClass::YSplit);
    }
    let class = classes[rng.random_range(0..classes.len())];
    let split = match class {
        PatternClass::XSplit => rng.random_range(1..width),
        PatternClass::YSplit => rng.random_range(1..height),
        _ => 0,
    };
    let positive = rng.random_bool(0.5);
    (class, SignPattern::build(class, height, width, split, positive))
}

/// Outcome of assigning sign grids to several perceptrons.
#[derive(Debug, Clone)]
pub struct PatternAssignment {
    pub grids: Vec<SignPattern>,
    pub bases_consumed: usize,
}

/// Assigns `units` sign grids: transforms of a random base pattern first, a fresh
/// base once its orbit is used up, never repeating a grid while unused ones can
/// still be found.
pub fn assign_patterns<R: Rng + ?Sized>(height: usize, width: usize, units: usize, rng: &mut R) -> PatternAssignment {
    // consecutive bases that contributed nothing before repeats are allowed
    const STALL_LIMIT: usize = 64;
    let mut grids = Vec::with_capacity(units);
    let mut used = HashSet::new();
    let mut bases = 0;
    let mut stalled = 0;
    while grids.len() < units {
        let (_, base) = random_pattern(height, width, rng);
        bases += 1;
        let before = grids.len();
        for g in base.orbit() {
            if grids.len() == units {
                break;
            }
            if used.insert(g.clone()) {
                grids.push(g);
            }
        }
        if grids.len() == before {
            stalled += 1;
            if stalled >= STALL_LIMIT {
                used.clear();
                stalled = 0;
            }
        } else {
            stalled = 0;
        }
    }
    PatternAssignment {
        grids,
        bases_consumed: bases,
    }
}

fn signed_magnitudes<'a, T: Scalar, R: Rng + ?Sized>(
    grid: &'a SignPattern,
    cap: f64,
    rng: &'a mut R,
) -> impl Iterator<Item = T> + 'a {
    let mags: Vec<f64> = grid.signs.iter().map(|_| (1.0 - rng.random::<f64>()) * cap).collect();
    grid.signs.iter().zip(mags).map(|(&s, m)| T::of(s as f64 * m))
}

/// Random magnitudes in `(0, 2/(W·H)]` with signs from one random pattern per
/// perceptron instance. Requires one unit per instance.
pub fn pattern_init<T: Scalar, R: Rng + ?Sized>(bank: &mut PerceptronBank<T>, rng: &mut R) -> Result<()> {
    if bank.units() != 1 {
        return Err(Error::config(
            "pattern_init handles single perceptrons; use pattern_init_multi",
        ));
    }
    let (h, w) = bank.window();
    let cap = 2.0 / (h * w) as f64;
    let len = h * w;
    for inst in 0..bank.instances() {
        let (_, grid) = random_pattern(h, w, rng);
        let vals: Vec<T> = signed_magnitudes(&grid, cap, rng).collect();
        bank.weight_mut().value.data_mut()[inst * len..(inst + 1) * len].copy_from_slice(&vals);
    }
    if let Some(b) = bank.bias_mut() {
        b.value.fill(T::zero());
    }
    Ok(())
}

/// Multi-perceptron variant: within each instance the units receive distinct
/// rotated/mirrored sign grids.
pub fn pattern_init_multi<T: Scalar, R: Rng + ?Sized>(
    bank: &mut PerceptronBank<T>,
    rng: &mut R,
) -> Result<PatternAssignment> {
    let units = bank.units();
    if units < 2 {
        return Err(Error::config("pattern_init_multi needs at least two perceptrons"));
    }
    let (h, w) = bank.window();
    let cap = 2.0 / (h * w) as f64;
    let len = h * w;
    let mut last = None;
    for inst in 0..bank.instances() {
        let assignment = assign_patterns(h, w, units, rng);
        for (k, grid) in assignment.grids.iter().enumerate() {
            let vals: Vec<T> = signed_magnitudes(grid, cap, rng).collect();
            let start = (inst * units + k) * len;
            bank.weight_mut().value.data_mut()[start..start + len].copy_from_slice(&vals);
        }
        last = Some(assignment);
    }
    if let Some(b) = bank.bias_mut() {
        b.value.fill(T::zero());
    }
    Ok(last.expect("at least one instance"))
}

impl InitScheme {
    pub fn apply<T: Scalar, R: Rng + ?Sized>(self, bank: &mut PerceptronBank<T>, rng: &mut R) -> Result<()> {
        match self {
            InitScheme::Average => average_init(bank),
            InitScheme::Glorot => glorot_bank_init(bank, rng)?,
            InitScheme::Pattern if bank.units() == 1 => pattern_init(bank, rng)?,
            InitScheme::Pattern => {
                pattern_init_multi(bank, rng)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perceptron::{PerceptronSpec, SharingMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank(window: usize, units: usize) -> PerceptronBank<f64> {
        let spec = PerceptronSpec {
            window_h: window,
            window_w: window,
            stride: window,
            units,
            ..PerceptronSpec::default()
        };
        PerceptronBank::new(&spec, 1).unwrap()
    }

    #[test]
    fn glorot_bounds_and_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = glorot_init::<f64, _>(1000, 3, 3, &mut rng).unwrap();
        assert!(v.iter().all(|x| x.abs() <= 1.0));
        assert!(glorot_init::<f64, _>(10, 24, 0, &mut rng).is_err());
    }

    #[test]
    fn glorot_mean_is_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let bound = (6.0f64 / 20.0).sqrt();
        let v = glorot_init::<f64, _>(100_000, 10, 10, &mut rng).unwrap();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.01 * bound, "mean {mean}");
    }

    #[test]
    fn average_init_values() {
        let mut b = bank(2, 1);
        average_init(&mut b);
        assert!(b.weight().value.data().iter().all(|&w| w == 0.25));
        assert!(b.bias().unwrap().value.data().iter().all(|&w| w == 0.0));
        let mut g = bank(8, 1);
        average_init(&mut g);
        assert!(g.weight().value.data().iter().all(|&w| w == 1.0 / 64.0));
    }

    #[test]
    fn pattern_builders() {
        let pos = SignPattern::build(PatternClass::AllSame, 2, 2, 0, true);
        assert_eq!(pos.signs, vec![1, 1, 1, 1]);
        let ys = SignPattern::build(PatternClass::YSplit, 2, 2, 1, true);
        assert_eq!(ys.signs, vec![1, 1, -1, -1]);
        let diag = SignPattern::build(PatternClass::Diagonal, 3, 3, 0, true);
        assert_eq!(diag.signs, vec![-1, 1, 1, 1, -1, 1, 1, 1, -1]);
        for p in [pos, ys, diag] {
            assert!(p.classify().is_some());
        }
        let junk = SignPattern {
            height: 2,
            width: 2,
            signs: vec![1, -1, -1, -1],
        };
        assert_eq!(junk.classify(), None);
    }

    #[test]
    fn rotation_orbit_is_distinct() {
        let base = SignPattern {
            height: 2,
            width: 2,
            signs: vec![1, -1, 1, -1],
        };
        let orbit = base.orbit();
        assert_eq!(orbit.len(), 4);
        let set: HashSet<_> = orbit.iter().collect();
        assert_eq!(set.len(), 4);
        assert_eq!(orbit[1], base.mirror_x());
        assert_eq!(orbit[1].signs, vec![-1, 1, -1, 1]);
    }

    #[test]
    fn pattern_init_single_stays_in_classes_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = bank(2, 1);
        let mut worst = 0.0f64;
        for _ in 0..10_000 {
            pattern_init(&mut b, &mut rng).unwrap();
            let w = b.weight().value.data();
            let grid = SignPattern {
                height: 2,
                width: 2,
                signs: w.iter().map(|&v| if v > 0.0 { 1 } else { -1 }).collect(),
            };
            assert!(grid.classify().is_some());
            assert!(w.iter().all(|&v| v != 0.0 && v.abs() <= 0.5));
            worst = worst.max(w.iter().sum::<f64>().abs());
        }
        assert!(worst <= 2.0);
    }

    #[test]
    fn multi_assignment_distinct_and_counts_bases() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let a = assign_patterns(3, 3, 4, &mut rng);
            let set: HashSet<_> = a.grids.iter().collect();
            assert_eq!(set.len(), 4);
            assert!(a.grids.iter().all(|g| g.classify().is_some()));
        }
        // a 2×2 orbit holds at most four grids, so sixteen units need several bases
        let a = assign_patterns(2, 2, 16, &mut rng);
        assert!(a.bases_consumed >= 2);
        assert_eq!(a.grids.len(), 16);
    }

    #[test]
    fn multi_never_repeats_while_grids_remain() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        // a 2×2 window admits exactly eight class grids
        let a = assign_patterns(2, 2, 8, &mut rng);
        let set: HashSet<_> = a.grids.iter().collect();
        assert_eq!(set.len(), 8);
    }

    #[test]
    fn initializers_are_deterministic() {
        let mut a = bank(2, 4);
        let mut b = bank(2, 4);
        InitScheme::Pattern
            .apply(&mut a, &mut ChaCha8Rng::seed_from_u64(77))
            .unwrap();
        InitScheme::Pattern
            .apply(&mut b, &mut ChaCha8Rng::seed_from_u64(77))
            .unwrap();
        assert_eq!(a.weight().value, b.weight().value);
    }

    #[test]
    fn sharing_modes_are_initialized_per_instance() {
        let spec = PerceptronSpec {
            sharing: SharingMode::PerChannel,
            ..PerceptronSpec::default()
        };
        let mut b = PerceptronBank::<f64>::new(&spec, 3).unwrap();
        pattern_init(&mut b, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(b.weight().value.data().iter().all(|&w| w != 0.0));
    }
}
