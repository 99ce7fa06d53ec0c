use poolnet::gradcheck::{check_layer, check_named, DEFAULT_TOLERANCE, SUITE};
use poolnet::init::InitScheme;
use poolnet::layers::{FixedPool, PoolMode};
use poolnet::perceptron::{Activation, MlpPoolStack, PerceptronPool, PerceptronSpec, PerceptronUpsample, SharingMode};
use poolnet::Shape4;

const MODES: [SharingMode; 4] = [
    SharingMode::Global,
    SharingMode::PerChannel,
    SharingMode::PerField,
    SharingMode::PerTensor,
];

#[test]
fn every_sharing_mode_and_unit_count() {
    for (m, sharing) in MODES.into_iter().enumerate() {
        for units in [1, 4, 16] {
            for activation in [Activation::Identity, Activation::Relu] {
                let spec = PerceptronSpec {
                    sharing,
                    activation,
                    init: InitScheme::Glorot,
                    ..PerceptronSpec::default()
                }
                .units(units);
                let mut layer = PerceptronPool::<f64>::new(spec, 40 + m as u64).unwrap();
                let r = check_layer(&mut layer, Shape4::new(2, 3, 4, 4), units as u64, DEFAULT_TOLERANCE).unwrap();
                assert!(r.passed(), "{sharing:?} p={units} {activation:?}\n{r}");
            }
        }
    }
}

#[test]
fn overlapping_and_rectangular_windows() {
    let spec = PerceptronSpec {
        init: InitScheme::Pattern,
        ..PerceptronSpec::default()
    }
    .window(3, 2, 1)
    .units(4);
    let mut layer = PerceptronPool::<f64>::new(spec, 1).unwrap();
    let r = check_layer(&mut layer, Shape4::new(1, 2, 5, 4), 2, DEFAULT_TOLERANCE).unwrap();
    assert!(r.passed(), "{r}");

    let mut avg = FixedPool::new(PoolMode::Average, 3, 2, 1);
    assert!(check_layer(&mut avg, Shape4::new(1, 2, 5, 4), 2, 1e-8)
        .unwrap()
        .passed());
}

#[test]
fn stacks_and_upsampling() {
    let base = PerceptronSpec {
        init: InitScheme::Glorot,
        activation: Activation::Relu,
        ..PerceptronSpec::default()
    };
    let mut s4 = MlpPoolStack::<f64>::nn_4_1(&base, 3).unwrap();
    assert!(check_layer(&mut s4, Shape4::new(2, 2, 8, 8), 4, DEFAULT_TOLERANCE)
        .unwrap()
        .passed());
    let mut s16 = MlpPoolStack::<f64>::nn_16_1(&base, 5).unwrap();
    assert!(check_layer(&mut s16, Shape4::new(1, 2, 8, 8), 6, DEFAULT_TOLERANCE)
        .unwrap()
        .passed());
    for (u, sharing) in [
        (2, SharingMode::PerChannel),
        (4, SharingMode::PerTensor),
        (3, SharingMode::Global),
    ] {
        let spec = PerceptronSpec {
            sharing,
            ..base.clone()
        };
        let mut up = PerceptronUpsample::<f64>::with_factor(u, &spec, 7).unwrap();
        let r = check_layer(&mut up, Shape4::new(1, 2, 3, 3), 8, DEFAULT_TOLERANCE).unwrap();
        assert!(r.passed(), "u={u}\n{r}");
    }
}

#[test]
fn named_suite_over_seeds() {
    for seed in 0..3 {
        for spec in SUITE {
            let r = check_named(spec, seed, DEFAULT_TOLERANCE).unwrap();
            assert!(r.passed(), "seed {seed}\n{r}");
        }
    }
}

#[test]
fn reports_repeat_for_a_seed() {
    let a = check_named("nn_4_1", 11, DEFAULT_TOLERANCE).unwrap();
    let b = check_named("nn_4_1", 11, DEFAULT_TOLERANCE).unwrap();
    assert_eq!(a.to_string(), b.to_string());
}
