use proptest::prelude::*;

use gentron::guidance::{cfg_epsilon, mfg_epsilon};
use gentron::model::{patchify, unpatchify};
use gentron::numerics::{Rng, Tensor};
use gentron::trainer::Checkpoint;
use gentron::video::{from_temporal, to_temporal};
use gentron::{GenTron, GenTronConfig, Variant};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patchify_roundtrips(b in 1usize..4, gh in 1usize..4, gw in 1usize..4, c in 1usize..5, p in 1usize..4, seed: u64) {
        let shape = [gh * p, gw * p, c];
        let x: Tensor = Rng::new(seed).randn(&[b, shape[0], shape[1], shape[2]]);
        let tokens = patchify(&x, p).unwrap();
        prop_assert_eq!(tokens.shape(), &[b * gh * gw, p * p * c][..]);
        let back = unpatchify(&tokens, p, shape).unwrap();
        prop_assert!(back.reshape(x.shape()).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn temporal_rearrange_roundtrips(b in 1usize..4, t in 1usize..6, n in 1usize..6, d in 1usize..4, seed: u64) {
        let x: Tensor = Rng::new(seed).randn(&[b * t, n, d]);
        let y = to_temporal(&x, b, t).unwrap();
        prop_assert_eq!(y.shape(), &[b * n, t, d][..]);
        // Token ν of frame τ in clip β keeps its vector.
        for beta in 0..b {
            for tau in 0..t {
                for nu in 0..n {
                    let src = ((beta * t + tau) * n + nu) * d;
                    let dst = ((beta * n + nu) * t + tau) * d;
                    prop_assert_eq!(&x.data()[src..src + d], &y.data()[dst..dst + d]);
                }
            }
        }
        prop_assert!(from_temporal(&y, b, t).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn guidance_reduces_to_direct_form(c in -5.0f64..5.0, u in -5.0f64..5.0, m in -5.0f64..5.0, lt in 0.0f64..10.0, lm in 0.0f64..3.0) {
        let s = Tensor::<f64>::scalar;
        let cfg = cfg_epsilon(&s(c), &s(u), lt).unwrap().item();
        prop_assert!((cfg - (u + lt * (c - u))).abs() < 1e-9);
        let mfg = mfg_epsilon(&s(u), &s(c), &s(m), lt, lm).unwrap().item();
        prop_assert!((mfg - (u + lt * (c - m) + lm * (m - u))).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_bytes_roundtrip(seed in 0u64..1000, adaln: bool) {
        let variant = if adaln { Variant::AdalnZero } else { Variant::CrossAttention };
        let m = GenTron::new(GenTronConfig::desk(1, 16, variant), &mut Rng::new(seed)).unwrap();
        let bytes = Checkpoint::from_model(&m, None).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert!(back.into_t2i().unwrap().store().bitwise_eq(m.store()));
    }
}
