use heba_core::adapters::{
    grid_to_tokens, text_adapter_forward, tokens_to_grid, visual_adapter_forward, AdapterConfig,
    InitMode, TextAdapter, VisualAdapter,
};
use heba_core::data::{generate_dataset, split_base_novel, DataConfig, SplitConfig};
use heba_core::objective::{lsce_value, subsample_negatives};
use heba_core::optim::cosine_lr;
use heba_core::serialize::{decode_tensors, encode_tensors};
use heba_core::{Graph, Rng, Tensor};
use proptest::prelude::*;
use std::path::Path;

fn small_adapter_cfg() -> AdapterConfig {
    AdapterConfig {
        embed_dim: 8,
        reduction: 4,
        grid_side: 7,
        ..AdapterConfig::default()
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut Rng::new(seed))
}

fn run_text(a: &TextAdapter<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let b = a.bind(&mut g);
    let xv = g.constant(x.clone());
    let y = text_adapter_forward(&mut g, &b, xv).unwrap();
    g.value(y).clone()
}

fn run_visual(a: &VisualAdapter<f64>, x: &Tensor<f64>, cfg: &AdapterConfig) -> Tensor<f64> {
    let mut g = Graph::new();
    let b = a.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let y = visual_adapter_forward(&mut g, &b, xv, cfg).unwrap();
    g.value(y).clone()
}

fn permute_tokens(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        for &p in perm {
            let start = (bi * n + p) * d;
            out.extend_from_slice(&x.data()[start..start + d]);
        }
    }
    Tensor::new(vec![b, n, d], out).unwrap()
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut p);
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn text_adapter_is_token_permutation_equivariant(seed in any::<u64>(), n in 2usize..12) {
        let cfg = small_adapter_cfg();
        let mut rng = Rng::new(seed);
        let mut a = TextAdapter::<f64>::new(&cfg, InitMode::Kaiming, &mut rng);
        a.b_down = Tensor::randn(&[2], 0.3, &mut rng);
        a.b_up = Tensor::randn(&[8], 0.3, &mut rng);
        let x = Tensor::randn(&[2, n, 8], 1.0, &mut rng);
        let perm = shuffled(n, seed ^ 1);
        let lhs = run_text(&a, &permute_tokens(&x, &perm));
        let rhs = permute_tokens(&run_text(&a, &x), &perm);
        prop_assert!(lhs.bitwise_eq(&rhs));
    }

    #[test]
    fn visual_adapter_is_not_permutation_equivariant(seed in any::<u64>()) {
        let cfg = small_adapter_cfg();
        let a = VisualAdapter::<f64>::new(&cfg, InitMode::Kaiming, &mut Rng::new(seed));
        let x = randn(&[1, 49, 8], seed.wrapping_add(7));
        let mut perm: Vec<usize> = (0..49).collect();
        perm.reverse();
        perm.swap(0, 13);
        let lhs = run_visual(&a, &permute_tokens(&x, &perm), &cfg);
        let rhs = permute_tokens(&run_visual(&a, &x, &cfg), &perm);
        prop_assert!(lhs.max_abs_diff(&rhs) > 1e-6);
    }

    #[test]
    fn visual_receptive_field_is_3x3(seed in any::<u64>(), row in 0usize..7, col in 0usize..7) {
        let cfg = small_adapter_cfg();
        let a = VisualAdapter::<f64>::new(&cfg, InitMode::Kaiming, &mut Rng::new(seed));
        let x = randn(&[1, 49, 8], seed.wrapping_add(3));
        let mut bumped = x.clone();
        let tok = row * 7 + col;
        for c in 0..8 {
            bumped.data_mut()[tok * 8 + c] += 1.0;
        }
        let (y0, y1) = (run_visual(&a, &x, &cfg), run_visual(&a, &bumped, &cfg));
        for t in 0..49 {
            let (r, c): (usize, usize) = (t / 7, t % 7);
            let near = r.abs_diff(row) <= 1 && c.abs_diff(col) <= 1;
            let changed = (0..8).any(|k| y0.data()[t * 8 + k] != y1.data()[t * 8 + k]);
            if !near {
                prop_assert!(!changed, "token ({r},{c}) changed for bump at ({row},{col})");
            }
        }
        let centre_changed = (0..8).any(|k| y0.data()[tok * 8 + k] != y1.data()[tok * 8 + k]);
        prop_assert!(centre_changed);
    }

    #[test]
    fn grid_roundtrip_is_exact(seed in any::<u64>(), side in 1usize..6, d in 1usize..5) {
        let x = randn(&[2, side * side, d], seed);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let grid = tokens_to_grid(&mut g, xv, side).unwrap();
        let back = grid_to_tokens(&mut g, grid).unwrap();
        prop_assert!(g.value(back).bitwise_eq(&x));
        prop_assert_eq!(g.grid_reshapes(), 1);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_log_softmax_agrees(seed in any::<u64>(), k in 1usize..12) {
        let x = Tensor::<f64>::uniform(&[4, k], -30.0, 30.0, &mut Rng::new(seed));
        let mut g = Graph::new();
        let xv = g.constant(x);
        let s = g.softmax(xv);
        let ls = g.log_softmax(xv);
        let (s, ls) = (g.value(s).clone(), g.value(ls).clone());
        for (row, lrow) in s.data().chunks(k).zip(ls.data().chunks(k)) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (p, lp) in row.iter().zip(lrow) {
                if *p > 0.0 {
                    prop_assert!((p.ln() - lp).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn pointwise_conv_equals_channel_matmul(seed in any::<u64>(), cin in 1usize..6, cout in 1usize..6) {
        let mut rng = Rng::new(seed);
        let x = Tensor::<f64>::randn(&[2, cin, 3, 3], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[cout, cin], 1.0, &mut rng);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d_pointwise(xv, wv).unwrap();
        let y = g.value(y).clone();
        for b in 0..2 {
            for o in 0..cout {
                for p in 0..9 {
                    let direct: f64 = (0..cin).map(|i| w.data()[o * cin + i] * x.data()[(b * cin + i) * 9 + p]).sum();
                    prop_assert!((y.data()[(b * cout + o) * 9 + p] - direct).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn lsce_is_nonnegative(seed in any::<u64>(), k in 2usize..20, eps in 0.0f64..0.99) {
        let mut rng = Rng::new(seed);
        let logits = Tensor::<f64>::uniform(&[3, k], -20.0, 20.0, &mut rng);
        let targets: Vec<usize> = (0..3).map(|_| rng.below(k)).collect();
        prop_assert!(lsce_value(&logits, &targets, eps, None).unwrap() >= 0.0);
    }

    #[test]
    fn subsampled_loss_with_all_negatives_equals_full(seed in any::<u64>(), k in 2usize..15) {
        let mut rng = Rng::new(seed);
        let logits = Tensor::<f64>::randn(&[4, k], 2.0, &mut rng);
        let targets: Vec<usize> = (0..4).map(|_| rng.below(k)).collect();
        let subsets: Vec<Vec<usize>> = targets
            .iter()
            .map(|&t| subsample_negatives(k, t, k - 1, &mut rng).unwrap())
            .collect();
        let full = lsce_value(&logits, &targets, 0.1, None).unwrap();
        let sub = lsce_value(&logits, &targets, 0.1, Some(&subsets)).unwrap();
        prop_assert!((full - sub).abs() < 1e-12);
    }

    #[test]
    fn cosine_lr_is_non_increasing(lr in 1e-5f64..1.0, total in 1usize..500) {
        let mut prev = f64::INFINITY;
        for t in 0..=total + 2 {
            let v = cosine_lr(lr, t, total);
            prop_assert!(v <= prev && v >= 0.0);
            prev = v;
        }
    }

    #[test]
    fn tensor_blob_roundtrip(seed in any::<u64>(), dims in proptest::collection::vec(1usize..5, 0..4)) {
        let a = randn(&dims, seed);
        let b = randn(&[3], seed ^ 9);
        let (blob, entries) = encode_tensors(&[("a".into(), &a), ("b".into(), &b)]);
        let back = decode_tensors::<f64>(&blob, &entries, Path::new("mem")).unwrap();
        prop_assert!(back[0].1.bitwise_eq(&a));
        prop_assert!(back[1].1.bitwise_eq(&b));
    }
}

#[test]
fn subsample_properties_over_1000_trials() {
    let mut rng = Rng::new(42);
    for trial in 0..1000 {
        let k = 2 + rng.below(30);
        let target = rng.below(k);
        let ratio = rng.below(k);
        let s = subsample_negatives(k, target, ratio, &mut rng).unwrap();
        assert_eq!(s.len(), ratio + 1, "trial {trial}");
        assert!(s.contains(&target));
        assert!(s.windows(2).all(|w| w[0] < w[1]), "sorted and unique");
        assert!(s.iter().all(|&c| c < k));
    }
}

#[test]
fn split_partitions_classes_for_100_seeds() {
    let ds = generate_dataset(&DataConfig {
        num_classes: 8,
        images_per_class: 20,
        ..DataConfig::default()
    })
    .unwrap();
    for seed in 0..100 {
        let sp = split_base_novel(
            &ds,
            &SplitConfig {
                seed,
                shots: 4,
                ..SplitConfig::default()
            },
        )
        .unwrap();
        let mut all: Vec<usize> = sp
            .base_classes
            .iter()
            .chain(&sp.novel_classes)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..8).collect::<Vec<_>>(), "seed {seed}");
        assert_eq!(sp.base_classes.len(), 4);
        assert_eq!(sp.train.len(), 16);
        sp.check_disjoint(&ds).unwrap();
    }
}

#[test]
fn images_in_unit_range_and_prompts_in_vocab() {
    let ds = generate_dataset(&DataConfig::default()).unwrap();
    assert!(ds.images.iter().all(|&p| (0.0..=1.0).contains(&p)));
    for c in &ds.manifest.classes {
        assert!(c.prompt_tokens.iter().all(|&t| t < 64));
    }
}
