mod common;

use gentron::model::{Frames, GenTron, Variant};
use gentron::numerics::{Rng, Tensor};
use gentron::schedule::{q_sample_batch, ScheduleState};
use gentron::trainer::{
    compute_gradients, draw_branch, finetune_t2v, load_checkpoint, save_checkpoint, train_t2i, Branch, Checkpoint,
    CheckpointError, ImageTextPair, TrainConfig, VideoTextPair,
};
use gentron::video::pseudo_video;
use gentron::Error;

fn dataset(n: usize, seed: u64) -> Vec<ImageTextPair> {
    let mut rng = Rng::new(seed);
    let prompts = ["square top left", "cross bottom right", "square bottom left", "cross top right"];
    (0..n)
        .map(|i| ImageTextPair { latent: rng.randn(&[8, 8, 4]), prompt: prompts[i % 4].into() })
        .collect()
}

fn videos(n: usize, seed: u64) -> Vec<VideoTextPair> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| VideoTextPair { frames: rng.randn(&[4, 8, 8, 4]), prompt: format!("square moving {}", ["left", "right"][i % 2]) })
        .collect()
}

fn cfg(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig { steps, batch: 4, lr: 1e-3, seed, t_frames: 4, ..TrainConfig::default() }
}

fn fresh(variant: Variant) -> GenTron {
    GenTron::new(common::desk(variant), &mut Rng::new(0)).unwrap()
}

#[test]
fn initial_loss_is_unit_noise_energy() {
    let sched = ScheduleState::scaled_linear(50).unwrap();
    let mut m = fresh(Variant::CrossAttention);
    let c = TrainConfig { steps: 1, batch: 16, seed: 3, ..TrainConfig::default() };
    let out = train_t2i(&mut m, &dataset(16, 1), &sched, &c).unwrap();
    assert!((out.losses[0] - 1.0).abs() < 0.1, "{}", out.losses[0]);
}

#[test]
fn training_is_deterministic_and_learns() {
    let sched = ScheduleState::scaled_linear(50).unwrap();
    let data = dataset(8, 2);
    let run = |seed| {
        let mut m = fresh(Variant::AdalnZero);
        let out = train_t2i(&mut m, &data, &sched, &cfg(30, seed)).unwrap();
        (m, out.losses)
    };
    let (m1, l1) = run(5);
    let (m2, l2) = run(5);
    let (_, l3) = run(6);
    assert!(l1.iter().zip(&l2).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(m1.store().bitwise_eq(m2.store()));
    assert_ne!(l1, l3);
    assert!(l1.iter().all(|l| l.is_finite()));
}

#[test]
fn empty_dataset_rejected() {
    let sched = ScheduleState::scaled_linear(50).unwrap();
    let mut m = fresh(Variant::AdalnZero);
    assert!(matches!(train_t2i(&mut m, &[], &sched, &cfg(1, 0)), Err(Error::EmptyDataset(_))));
}

#[test]
fn motion_free_step_blocks_temporal_gradients() {
    let sched = ScheduleState::scaled_linear(50).unwrap();
    let mut m = common::random_model(Variant::CrossAttention, 3).inflate(&mut Rng::new(4)).unwrap();
    let img: Tensor = Rng::new(5).randn(&[8, 8, 4]);
    let clip = pseudo_video(&img, 4).unwrap().frames;
    let eps: Tensor = Rng::new(6).randn(clip.shape());
    let x_t = q_sample_batch(&clip, &[20], &eps, &sched).unwrap();
    let conds = [m.encode("square top left")];
    compute_gradients(&mut m, &x_t, &[20], &eps, &conds, &Frames::motion_free(4)).unwrap();
    let mut checked = 0;
    for p in m.store().iter().filter(|p| p.name.contains(".temporal.attn.") && !p.name.contains(".out.")) {
        assert!(p.tensor.grad().unwrap().iter().all(|&g| g == 0.0), "{}", p.name);
        checked += 1;
    }
    assert_eq!(checked, 2 * 6);
    let out_grad = m.store().by_name("blocks.0.temporal.attn.out.weight").unwrap().grad().unwrap();
    assert!(out_grad.iter().any(|&g| g != 0.0));
}

#[test]
fn branch_frequency_within_binomial_bound() {
    let mut rng = Rng::new(42);
    let n = 10_000;
    let hits = (0..n).filter(|_| draw_branch(&mut rng, 0.1) == Branch::MotionFree).count();
    let frac = hits as f64 / n as f64;
    assert!((0.08..=0.12).contains(&frac), "{frac}");
}

#[test]
fn finetune_branch_selection() {
    let sched = ScheduleState::scaled_linear(50).unwrap();
    let base = fresh(Variant::CrossAttention).inflate(&mut Rng::new(1)).unwrap();
    let (imgs, vids) = (dataset(4, 7), videos(4, 8));

    let mut m = base.clone();
    let c = TrainConfig { p_motion_free: 0.0, ..cfg(3, 1) };
    let out = finetune_t2v(&mut m, &[], &vids, &sched, &c).unwrap();
    assert!(out.branches.iter().all(|&b| b == Branch::Video));

    let mut m = base.clone();
    let c = TrainConfig { p_motion_free: 1.0, ..cfg(3, 1) };
    let out = finetune_t2v(&mut m, &imgs, &[], &sched, &c).unwrap();
    assert!(out.branches.iter().all(|&b| b == Branch::MotionFree));

    let mut m = base.clone();
    let c = TrainConfig { p_motion_free: 0.0, ..cfg(1, 1) };
    assert!(matches!(finetune_t2v(&mut m, &imgs, &[], &sched, &c), Err(Error::EmptyDataset(_))));

    let mut t2i = fresh(Variant::CrossAttention);
    assert!(matches!(finetune_t2v(&mut t2i, &imgs, &vids, &sched, &c), Err(Error::NotInflated)));
}

#[test]
fn config_validation() {
    assert!(TrainConfig { p_text_drop: 1.5, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { p_motion_free: -0.1, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig::default().validate().is_ok());
    let d = TrainConfig::default();
    assert_eq!((d.lr, d.betas, d.weight_decay, d.t_frames), (1e-4, (0.9, 0.999), 0.01, 8));
}

#[test]
fn checkpoint_roundtrip_bitwise() {
    let sched = ScheduleState::scaled_linear(50).unwrap();
    let mut m = fresh(Variant::CrossAttention);
    let out = train_t2i(&mut m, &dataset(4, 1), &sched, &cfg(3, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&m, Some(&out.optimizer), &path).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.optimizer.as_ref().unwrap(), &out.optimizer);
    let back = ck.into_t2i().unwrap();
    assert!(back.store().bitwise_eq(m.store()));
    assert_eq!(back.config(), m.config());

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"GTRNCKPT");
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
}

#[test]
fn damaged_checkpoints_rejected_distinctly() {
    let m = common::random_model(Variant::AdalnZero, 1);
    let bytes = Checkpoint::from_model(&m, None).to_bytes();
    for cut in [3, 12, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::Truncated(_))), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::UnsupportedVersion(9))));
    let mut bad = bytes.clone();
    let n = bad.len();
    bad[n - 2] = b'#';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Corrupt(_))));
    let mut bad = bytes.clone();
    bad.push(0);
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Corrupt(_))));
    let missing = load_checkpoint("/nonexistent/model.ckpt");
    assert!(matches!(missing, Err(CheckpointError::Io(_))));
}

#[test]
fn checkpoint_schema_discipline() {
    let t2i = common::random_model(Variant::CrossAttention, 2);
    let t2v = t2i.clone().inflate(&mut Rng::new(3)).unwrap();
    let bytes = Checkpoint::from_model(&t2i, None).to_bytes();
    let inflated = Checkpoint::from_bytes(&bytes).unwrap().into_t2v(&mut Rng::new(3)).unwrap();
    assert!(inflated.store().bitwise_eq(t2v.store()));

    let vbytes = Checkpoint::from_model(&t2v, None).to_bytes();
    let err = Checkpoint::from_bytes(&vbytes).unwrap().into_t2i().unwrap_err();
    assert!(matches!(err, CheckpointError::ShapeTable(_)));
    let back = Checkpoint::from_bytes(&vbytes).unwrap().into_model().unwrap();
    assert!(back.is_inflated() && back.store().bitwise_eq(t2v.store()));

    let mut other = Checkpoint::from_bytes(&bytes).unwrap();
    other.config.width = 64;
    other.config.heads = 1;
    assert!(matches!(other.into_t2i(), Err(CheckpointError::ShapeTable(_))));
}
