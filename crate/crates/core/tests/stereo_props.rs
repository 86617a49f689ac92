use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splatstereo::grid::FeatureMap;
use splatstereo::nn::Conv2d;
use splatstereo::stereo::{
    build_cost_volume, epipolar_attention, iterative_update, EpipolarAttentionWeights, HandcraftedUpdate,
    UpdateOperator,
};

fn random_map(w: usize, h: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
    FeatureMap::from_vec(w, h, d, (0..w * h * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn volume_equals_brute_force(w in 1usize..=8, h in 1usize..=8, d in 1usize..=16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, r) = (random_map(w, h, d, &mut rng), random_map(w, h, d, &mut rng));
        let v = build_cost_volume(&l, &r, 4).unwrap();
        for i in 0..h {
            for j in 0..w {
                for k in 0..w {
                    let want: f64 = (0..d).map(|c| l.pixel(j, i)[c] * r.pixel(k, i)[c]).sum();
                    prop_assert!((v.get(i, j, k) - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn updates_stay_finite_and_in_range(w in 2usize..=24, h in 1usize..=6, iters in 1usize..=6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, r) = (random_map(w, h, 6, &mut rng), random_map(w, h, 6, &mut rng));
        let v = build_cost_volume(&l, &r, 4).unwrap();
        let out = iterative_update(&v, &l, iters, &UpdateOperator::Handcrafted(HandcraftedUpdate::new(4))).unwrap();
        prop_assert_eq!(out.trace.len(), iters);
        for d in &out.trace {
            prop_assert!(d.data().iter().all(|&x| x.is_finite() && x >= 0.0 && x <= (w - 1) as f64));
        }
    }

    #[test]
    fn zero_value_projection_is_identity(w in 1usize..=10, h in 1usize..=4, heads in 1usize..=4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4 * heads;
        let (l, r) = (random_map(w, h, d, &mut rng), random_map(w, h, d, &mut rng));
        let mut m = || (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>();
        let (wq, wk) = (m(), m());
        let weights = EpipolarAttentionWeights::new(d, heads, wq, wk, vec![0.0; d * d], Conv2d::identity(d)).unwrap();
        let (a, b) = epipolar_attention(&l, &r, &weights).unwrap();
        prop_assert_eq!(a, l);
        prop_assert_eq!(b, r);
    }
}
