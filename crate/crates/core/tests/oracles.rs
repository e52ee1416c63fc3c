//! Naive-loop and exhaustive-sort oracles for fusion and top-k pooling, and
//! the attention and pooling invariants.

use cafusion::data::batch::FeatureBatch;
use cafusion::fusion::{fuse, AttentionScale, FusionParams, Variant};
use cafusion::gradcheck::GradCheckConfig;
use cafusion::mil::topk_pool;
use cafusion::model::Model;
use cafusion::nn::Mode;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{fuse_oracle, randomise, topk_oracle};

#[test]
fn fuse_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..120 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let d = heads * rng.random_range(1..4);
        let n = rng.random_range(1..7);
        let n_img = rng.random_range(1..4);
        let mut p = FusionParams::<f64>::init(d, heads, 0.1, AttentionScale::SqrtN, 0.6, &mut rng).unwrap();
        randomise(&mut p, &mut rng);
        let zl = Array3::from_shape_simple_fn((n_img, n, d), || rng.random_range(-2.0..2.0));
        let zg = Array3::from_shape_simple_fn((n_img, 1, d), || rng.random_range(-2.0..2.0));
        let (out, map) = fuse(&zl, &zg, &p, &mut Mode::Eval).unwrap();
        let (expect, weights) = fuse_oracle(&zl, &zg, &p);
        for (a, b) in out.iter().zip(&expect) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in map.weights.iter().zip(&weights) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-12, "max deviation {worst:e}");
}

#[test]
fn topk_matches_exhaustive_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let (n_img, n, c) = (rng.random_range(1..4), rng.random_range(1..12), rng.random_range(2..6));
        // coarse values so ties occur
        let cam = Array3::from_shape_simple_fn((n_img, n, c), || rng.random_range(-4..4) as f64 * 0.5);
        let k = rng.random_range(1..=n);
        let got = topk_pool(&cam, k, None).unwrap();
        let expect = topk_oracle(&cam, k);
        for (a, b) in got.o_pred.iter().zip(expect.iter()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn k_extremes_are_max_and_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let (n_img, n, c) = (rng.random_range(1..4), rng.random_range(1..10), 3);
        let cam = Array3::from_shape_simple_fn((n_img, n, c), || rng.random_range(-3.0..3.0));
        let max = topk_pool(&cam, 1, None).unwrap().o_pred;
        let mean = topk_pool(&cam, n, None).unwrap().o_pred;
        for i in 0..n_img {
            for cls in 0..c {
                let col: Vec<f64> = (0..n).map(|j| cam[[i, j, cls]]).collect();
                assert_eq!(max[[i, cls]], col.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
                let mut sorted = col.clone();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                assert_eq!(mean[[i, cls]], sorted.iter().sum::<f64>() / n as f64);
                let plain = col.iter().sum::<f64>() / n as f64;
                assert!((mean[[i, cls]] - plain).abs() <= 1e-15 * plain.abs().max(1.0));
            }
        }
    }
}

#[test]
fn attention_weights_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..100 {
        let n = rng.random_range(1..40);
        let p = FusionParams::<f32>::init(16, 4, 0.1, AttentionScale::SqrtN, 1.0, &mut rng).unwrap();
        let zl = Array3::from_shape_simple_fn((3, n, 16), || rng.random_range(-3.0f32..3.0));
        let zg = Array3::from_shape_simple_fn((3, 1, 16), || rng.random_range(-3.0f32..3.0));
        let (_, map) = fuse(&zl, &zg, &p, &mut Mode::Eval).unwrap();
        for i in 0..3 {
            for h in 0..4 {
                let s: f32 = (0..n).map(|j| map.weights[[i, h, j]]).sum();
                assert!((s - 1.0).abs() <= 1e-6, "{s}");
            }
        }
    }
}

fn permutation_check(variant: Variant) {
    let cfg = GradCheckConfig {
        variant,
        images: 3,
        slots: 6,
        k: 2,
        ..GradCheckConfig::default()
    };
    let model = Model::<f64>::init(cfg.model_config(), 5).unwrap();
    let batch: FeatureBatch<f64> = cfg.batch();
    let base = model.forward(&batch, &mut Mode::Eval).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut perm: Vec<usize> = (0..cfg.slots).collect();
    for _ in 0..100 {
        perm.shuffle(&mut rng);
        let out = model.forward(&batch.permute_slots(&perm), &mut Mode::Eval).unwrap();
        assert_eq!(out.predictions(), base.predictions(), "{variant}");
        for (a, b) in out.topk.o_pred.iter().zip(base.topk.o_pred.iter()) {
            assert!((a - b).abs() <= 1e-12, "{variant}: {a} vs {b}");
        }
    }
}

#[test]
fn predictions_ignore_concept_order() {
    for v in Variant::ALL {
        permutation_check(v);
    }
}
