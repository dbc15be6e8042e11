mod common;

use gentron::guidance::{sample, sample_batch, sample_unguided, GuidanceConfig};
use gentron::model::{Frames, Variant};
use gentron::numerics::Rng;
use gentron::schedule::ScheduleState;
use gentron::Error;

fn sched() -> ScheduleState {
    ScheduleState::scaled_linear(50).unwrap()
}

#[test]
fn unit_scale_matches_unguided_bitwise() {
    let m = common::random_model(Variant::CrossAttention, 1);
    let cond = m.encode("cross top left");
    let g = GuidanceConfig { lambda_t: 1.0, ..GuidanceConfig::default() };
    let guided = sample(&m, &sched(), &cond, &g, &mut Rng::new(9)).unwrap();
    let plain = sample_unguided(&m, &sched(), &[cond], &Frames::Image, &mut Rng::new(9)).unwrap();
    assert_eq!(guided.data(), plain.data());
}

#[test]
fn sampling_deterministic_and_params_untouched() {
    let m = common::random_model(Variant::AdalnZero, 2);
    let before = m.store().clone();
    let cond = m.encode("square bottom right");
    let g = GuidanceConfig::default();
    let a = sample(&m, &sched(), &cond, &g, &mut Rng::new(3)).unwrap();
    let b = sample(&m, &sched(), &cond, &g, &mut Rng::new(3)).unwrap();
    assert!(a.bitwise_eq(&b));
    assert_eq!(a.shape(), &[8, 8, 4]);
    assert!(m.store().bitwise_eq(&before));
}

#[test]
fn video_sampling_with_motion_guidance() {
    let mut m = common::random_model(Variant::CrossAttention, 4).inflate(&mut Rng::new(5)).unwrap();
    common::perturb(&mut m, 6, 0.05);
    let before = m.store().clone();
    let cond = m.encode("square moving left");
    let g = GuidanceConfig { motion_enabled: true, frames: 4, ..GuidanceConfig::default() };
    let clip = sample(&m, &sched(), &cond, &g, &mut Rng::new(7)).unwrap();
    assert_eq!(clip.shape(), &[4, 8, 8, 4]);
    assert!(clip.is_finite());
    assert!(m.store().bitwise_eq(&before));
    let two = sample_batch(&m, &sched(), &[cond.clone(), cond], &g, &mut Rng::new(7)).unwrap();
    assert_eq!(two.shape(), &[8, 8, 8, 4]);
}

#[test]
fn inconsistent_modes_rejected() {
    let m = common::random_model(Variant::AdalnZero, 8);
    let cond = m.encode("x");
    let g = GuidanceConfig { motion_enabled: true, ..GuidanceConfig::default() };
    assert!(matches!(sample(&m, &sched(), &cond, &g, &mut Rng::new(0)), Err(Error::ModeMismatch(_))));
    let g = GuidanceConfig { steps: 20, ..GuidanceConfig::default() };
    assert!(sample(&m, &sched(), &cond, &g, &mut Rng::new(0)).is_err());
    let d = GuidanceConfig::default();
    assert_eq!(d.lambda_t, 7.5);
    assert!((1.0..=1.3).contains(&d.lambda_m));
}
