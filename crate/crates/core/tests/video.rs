mod common;

use gentron::model::{count_parameters, Frames, Variant};
use gentron::numerics::{Rng, Tensor};
use gentron::video::{
    full_motion_mask, inflate_t2i, motion_free_mask, pseudo_video, temp_self_attn, TempAttnParams,
};
use gentron::Error;

fn image(seed: u64) -> Tensor {
    Rng::new(seed).randn(&[1, 8, 8, 4])
}

#[test]
fn inflation_preserves_image_outputs() {
    for variant in [Variant::AdalnZero, Variant::CrossAttention] {
        let t2i = common::random_model(variant, 1);
        let img = image(2);
        let cond = t2i.encode("square top left");
        let want = t2i.predict(&img, &[23], std::slice::from_ref(&cond), &Frames::Image).unwrap();
        let t2v = inflate_t2i(t2i.clone(), &mut Rng::new(3)).unwrap();
        let clip = pseudo_video(&img.clone().reshape(&[8, 8, 4]).unwrap(), 8).unwrap();
        let out = t2v.predict(&clip.frames, &[23], std::slice::from_ref(&cond), &Frames::full_motion(8)).unwrap();
        for f in 0..8 {
            assert!(out.slice_leading(f, 1).unwrap().max_abs_diff(&want) < 1e-6);
        }
        // Inflated model on plain images agrees too.
        let img_out = t2v.predict(&img, &[23], &[cond], &Frames::Image).unwrap();
        assert!(img_out.max_abs_diff(&want) < 1e-6);
    }
}

#[test]
fn inflation_keeps_shared_tensors_and_adds_zero_outputs() {
    let t2i = common::random_model(Variant::CrossAttention, 4);
    let t2v = t2i.clone().inflate(&mut Rng::new(5)).unwrap();
    for p in t2i.store().iter() {
        assert!(t2v.store().by_name(&p.name).unwrap().bitwise_eq(&p.tensor));
    }
    let cfg = t2i.config();
    assert_eq!(
        t2v.num_parameters() - t2i.num_parameters(),
        cfg.depth * TempAttnParams::numel(cfg.width)
    );
    assert_eq!(gentron::model::count_parameters_inflated(cfg) - count_parameters(cfg), cfg.depth * TempAttnParams::numel(cfg.width));
    for i in 0..cfg.depth {
        for suffix in ["weight", "bias"] {
            let t = t2v.store().by_name(&format!("blocks.{i}.temporal.attn.out.{suffix}")).unwrap();
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }
    assert!(matches!(t2v.inflate(&mut Rng::new(0)), Err(Error::AlreadyInflated)));
}

#[test]
fn video_layout_needs_inflation() {
    let m = common::random_model(Variant::AdalnZero, 6);
    let clip: Tensor = Rng::new(1).randn(&[4, 8, 8, 4]);
    let c = m.encode("cross");
    assert!(matches!(
        m.predict(&clip, &[3], &[c], &Frames::full_motion(4)),
        Err(Error::NotInflated)
    ));
}

#[test]
fn motion_free_mask_equals_independent_frames() {
    for variant in [Variant::AdalnZero, Variant::CrossAttention] {
        let mut m = common::random_model(variant, 7).inflate(&mut Rng::new(8)).unwrap();
        common::perturb(&mut m, 9, 0.1);
        let clip: Tensor = Rng::new(10).randn(&[8, 8, 8, 4]);
        let cond = m.encode("cross moving left");
        let joint = m.predict(&clip, &[31], std::slice::from_ref(&cond), &Frames::motion_free(8)).unwrap();
        let full = m.predict(&clip, &[31], std::slice::from_ref(&cond), &Frames::full_motion(8)).unwrap();
        assert!(joint.max_abs_diff(&full) > 1e-4, "temporal layer should matter with full mask");
        for f in 0..8 {
            let frame = clip.slice_leading(f, 1).unwrap();
            let alone = m.predict(&frame, &[31], std::slice::from_ref(&cond), &Frames::Image).unwrap();
            assert!(joint.slice_leading(f, 1).unwrap().max_abs_diff(&alone) < 1e-5);
        }
    }
}

#[test]
fn eager_temporal_attention_masks() {
    let m = common::random_model(Variant::AdalnZero, 11).inflate(&mut Rng::new(12)).unwrap();
    let mut m = m;
    common::perturb(&mut m, 13, 0.1);
    let tp = m.layout().blocks[0].temporal.clone().unwrap();
    let x: Tensor = Rng::new(14).randn(&[3, 4, 32]);
    let full = temp_self_attn(&x, m.store(), &tp, &full_motion_mask(4)).unwrap();
    let free = temp_self_attn(&x, m.store(), &tp, &motion_free_mask(4)).unwrap();
    assert_eq!(full.shape(), x.shape());
    assert!(full.max_abs_diff(&free) > 1e-4);
    // With the identity mask each frame only sees itself.
    for f in 0..4 {
        let mut data = Vec::new();
        for s in 0..3 {
            data.extend_from_slice(&x.data()[(s * 4 + f) * 32..(s * 4 + f + 1) * 32]);
        }
        let single = temp_self_attn(&Tensor::new(&[3, 1, 32], data).unwrap(), m.store(), &tp, &Tensor::ones(&[1, 1])).unwrap();
        for s in 0..3 {
            for c in 0..32 {
                let a = free.data()[(s * 4 + f) * 32 + c];
                let b = single.data()[s * 32 + c];
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
    assert!(temp_self_attn(&x, m.store(), &tp, &Tensor::zeros(&[4, 4])).is_err());
}
