use geoprior_core::correspondence::{
    dataset_score, scene_score, scene_score_bruteforce, score_cloud, voxelize, TokenCloud,
};
use geoprior_core::synth::{gen_token_scene, FeatureModel, TokenSceneConfig};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cloud(seed: u64, max_views: usize, max_tokens: usize, max_c: usize) -> TokenCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = rng.random_range(1..=max_views);
    let per_view = rng.random_range(1..=max_tokens);
    let c = rng.random_range(1..=max_c);
    let extent = rng.random_range(0.2..1.5);
    let n = views * per_view;
    let coords = Array2::from_shape_fn((n, 3), |_| rng.random_range(-extent..extent));
    let features = Array2::from_shape_fn((n, c), |_| rng.random_range(-1.0..1.0));
    let view_ids = (0..n).map(|i| i / per_view).collect();
    let valid = (0..n).map(|_| rng.random_bool(0.9)).collect();
    TokenCloud::new(features, coords, view_ids, valid).unwrap()
}

fn same(a: f64, b: f64) -> bool {
    (a.is_nan() && b.is_nan()) || (a - b).abs() <= 1e-9
}

#[test]
fn hash_path_matches_bruteforce_on_seeded_clouds() {
    for seed in 0..120 {
        let cloud = random_cloud(seed, 12, 80, 24);
        let fast = scene_score(&voxelize(&cloud, 0.1).unwrap());
        let slow = scene_score_bruteforce(&cloud, 0.1).unwrap();
        assert!(same(fast.score, slow.score), "seed {seed}: {fast:?} vs {slow:?}");
        assert_eq!(fast.pair_count, slow.pair_count, "seed {seed}");
        assert_eq!(fast.multiview_voxel_count, slow.multiview_voxel_count);
    }
}

#[test]
fn view_relabeling_is_exact() {
    for seed in 0..20 {
        let cloud = random_cloud(1000 + seed, 8, 60, 8);
        let base = score_cloud(&cloud, 0.1).unwrap();
        let k = cloud.view_ids().iter().max().unwrap() + 1;
        let permuted = cloud.relabel_views(|v| (k - 1 - v) * 7 + 3);
        let s = score_cloud(&permuted, 0.1).unwrap();
        assert_eq!(base.score.to_bits(), s.score.to_bits());
        assert_eq!(base.pair_count, s.pair_count);
    }
}

#[test]
fn integer_cell_translation_is_bit_identical() {
    let s = 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 400;
    // Token 0 pins the origin exactly at a lattice point; the rest sit in the
    // interior of their cells.
    let coords = Array2::from_shape_fn((n, 3), |(i, _)| {
        if i == 0 {
            0.0
        } else {
            (rng.random_range(0..6) as f64 + rng.random_range(0.2..0.8)) * s
        }
    });
    let features = Array2::from_shape_fn((n, 6), |_| rng.random_range(-1.0..1.0));
    let views = (0..n).map(|i| i % 5).collect();
    let cloud = TokenCloud::from_parts(features, coords, views).unwrap();
    let base = score_cloud(&cloud, s).unwrap();
    for k in [-7i32, 3, 25, 1000] {
        let shift = f64::from(k) * s;
        let moved = cloud.map_coords(|p| [p[0] + shift, p[1] - shift, p[2] + 2.0 * shift]).unwrap();
        let m = score_cloud(&moved, s).unwrap();
        assert_eq!(base.score.to_bits(), m.score.to_bits(), "k={k}");
    }
}

#[test]
fn voxel_function_features_are_perfectly_consistent() {
    for seed in 0..5 {
        let cloud = gen_token_scene(&TokenSceneConfig {
            seed,
            n_views: 6,
            tokens_per_view: 150,
            feature_dim: 32,
            ..Default::default()
        })
        .unwrap();
        let s = score_cloud(&cloud, 0.1).unwrap();
        assert!((s.score - 1.0).abs() <= 1e-9, "{s:?}");
    }
}

#[test]
fn iid_features_score_near_zero() {
    let cloud = gen_token_scene(&TokenSceneConfig {
        seed: 4,
        features: FeatureModel::IidNoise,
        ..Default::default()
    })
    .unwrap();
    let s = score_cloud(&cloud, 0.1).unwrap();
    assert!(s.pair_count >= 1000, "{s:?}");
    assert!(s.score.abs() <= 0.05, "{s:?}");
}

#[test]
fn single_observer_voxels_never_self_match() {
    let n = 50;
    let coords = Array2::from_shape_fn((n, 3), |(i, a)| if a == 0 { i as f64 } else { 0.0 });
    let features = Array2::from_elem((n, 4), 1.0);
    let views = (0..n).map(|i| i % 2).collect();
    let cloud = TokenCloud::from_parts(features, coords, views).unwrap();
    let s = score_cloud(&cloud, 0.1).unwrap();
    assert!(s.score.is_nan());
    assert_eq!(s.pair_count, 0);
    let summary = dataset_score(&[s]);
    assert_eq!(summary.valid_count, 0);
    assert_eq!(summary.nan_count, 1);
}

#[test]
fn dataset_reduction_ignores_order() {
    let scores: Vec<_> = (0..30)
        .map(|seed| score_cloud(&random_cloud(500 + seed, 4, 40, 4), 0.2).unwrap())
        .collect();
    let mut reversed = scores.clone();
    reversed.reverse();
    let a = dataset_score(&scores);
    let b = dataset_score(&reversed);
    assert_eq!(a.mean.to_bits(), b.mean.to_bits());
    assert_eq!(a.std.map(f64::to_bits), b.std.map(f64::to_bits));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn oracle_equivalence(seed in any::<u64>(), s in 0.05f64..0.5) {
        let cloud = random_cloud(seed, 6, 40, 8);
        let fast = scene_score(&voxelize(&cloud, s).unwrap());
        let slow = scene_score_bruteforce(&cloud, s).unwrap();
        prop_assert!(same(fast.score, slow.score));
        prop_assert_eq!(fast.pair_count, slow.pair_count);
    }

    #[test]
    fn prototypes_are_unit_and_keys_nonnegative(seed in any::<u64>()) {
        let table = voxelize(&random_cloud(seed, 5, 30, 5), 0.1).unwrap();
        for (key, protos) in &table.entries {
            prop_assert!(key.iter().all(|&k| k >= 0));
            for p in protos {
                let n: f64 = p.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn score_is_nan_iff_no_pairs(seed in any::<u64>()) {
        let s = score_cloud(&random_cloud(seed, 3, 10, 3), 0.3).unwrap();
        prop_assert_eq!(s.score.is_nan(), s.pair_count == 0);
        if !s.score.is_nan() {
            prop_assert!((-1.0..=1.0).contains(&s.score));
        }
    }
}
