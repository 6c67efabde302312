use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;

use speatforge::compression::{prune_heads, prune_rows, weight_prune_event};
use speatforge::harness::{
    decode_container, encode_container, records_from_csv, records_to_csv, CategoryBias, EmbeddingTensor, TrajectoryRecord,
};
use speatforge::model::{decode_checkpoint, init_model, BatchSampler, Masks, ModelConfig, Positional, TransformerModel};
use speatforge::speat::{classify_bias, effect_size, BiasLabel, BiasTest, EmbeddingSequence};

fn matrix(frames: usize, dim: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-5.0f64..5.0, frames * dim).prop_map(move |v| Array2::from_shape_vec((frames, dim), v).unwrap())
}

fn stimuli(set: &'static str, n: std::ops::RangeInclusive<usize>, dim: usize) -> impl Strategy<Value = Vec<EmbeddingSequence>> {
    prop::collection::vec((1usize..4).prop_flat_map(move |f| matrix(f, dim)), n).prop_map(move |ms| {
        ms.into_iter()
            .enumerate()
            .map(|(i, m)| EmbeddingSequence::new(vec![m], format!("{set}{i}"), "g").unwrap())
            .collect()
    })
}

fn bias_test() -> impl Strategy<Value = BiasTest> {
    (2usize..6)
        .prop_flat_map(|dim| {
            (
                stimuli("x", 2..=6, dim),
                stimuli("y", 2..=6, dim),
                stimuli("a", 1..=5, dim),
                stimuli("b", 1..=5, dim),
            )
        })
        .prop_filter_map("degenerate", |(x, y, a, b)| {
            let t = BiasTest::new("p", x, y, a, b).ok()?;
            effect_size(&t).ok().map(|_| t)
        })
}

fn toy_model(seed: u64) -> TransformerModel<f64> {
    let cfg = ModelConfig {
        n_layers: 2,
        hidden_dim: 8,
        ffw_dim: 12,
        n_heads: 4,
        n_clusters: 3,
        input_dim: 3,
        positional: Positional::Sinusoidal,
    };
    init_model(&cfg, seed).unwrap()
}

/// No entry kept in `after` unless it was kept in `before`.
fn subset(after: &Masks, before: &Masks) -> bool {
    after.blocks.iter().zip(&before.blocks).all(|(a, b)| {
        a.iter().zip(b.iter()).all(|(ma, mb)| {
            ma.weight
                .iter()
                .zip(mb.weight.iter())
                .chain(ma.bias.iter().zip(mb.bias.iter()))
                .all(|(&x, &y)| !x || y)
        })
    })
}

fn label() -> impl Strategy<Value = f64> {
    -3.0f64..3.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn effect_size_is_antisymmetric(t in bias_test()) {
        let d = effect_size(&t).unwrap().d_aggregate;
        prop_assert!((d + effect_size(&t.swap_targets()).unwrap().d_aggregate).abs() < 1e-12);
        prop_assert!((d + effect_size(&t.swap_attributes()).unwrap().d_aggregate).abs() < 1e-12);
    }

    #[test]
    fn effect_size_is_bounded(t in bias_test()) {
        // reached when each target group collapses to a single score
        let (nx, ny) = (t.x.len() as f64, t.y.len() as f64);
        let n = nx + ny;
        let d = effect_size(&t).unwrap().d_aggregate;
        prop_assert!(d.is_finite() && d.abs() <= (n * (n - 1.0) / (nx * ny)).sqrt() + 1e-9, "d = {}", d);
    }

    #[test]
    fn effect_size_ignores_stimulus_scale(t in bias_test(), k in 0.01f64..100.0, which in 0usize..4) {
        let d = effect_size(&t).unwrap().d_aggregate;
        let mut s = t.clone();
        let set = [&mut s.x, &mut s.y, &mut s.a, &mut s.b].into_iter().nth(which).unwrap();
        for l in &mut set[0].layers {
            l.mapv_inplace(|v| v * k);
        }
        prop_assert!((effect_size(&s).unwrap().d_aggregate - d).abs() < 1e-9);
    }

    #[test]
    fn classification_is_consistent(d in -4.0f64..4.0) {
        let c = classify_bias(d).unwrap();
        prop_assert_eq!(c.reverse, d < -0.2);
        let want = if d < -0.2 {
            BiasLabel::Reverse
        } else if d > 0.8 {
            BiasLabel::Large
        } else if d > 0.5 {
            BiasLabel::Medium
        } else if d > 0.2 {
            BiasLabel::Small
        } else {
            BiasLabel::Negligible
        };
        prop_assert_eq!(c.label(), want);
        prop_assert_eq!(classify_bias(-d).unwrap().magnitude, c.magnitude);
    }

    #[test]
    fn pruning_only_removes(seed in any::<u64>(), heads in 1usize..=3, rows in 1usize..=5, frac in 0.01f64..0.9) {
        let mut m = toy_model(seed);
        let mut before = m.masks.clone();
        let mut kept = m.masks.kept_prunable();
        prune_heads(&mut m, heads).unwrap();
        prune_rows(&mut m, rows).unwrap();
        weight_prune_event(&mut m, frac).unwrap();
        for step in 0..3 {
            prop_assert!(subset(&m.masks, &before), "step {} unmasked an entry", step);
            prop_assert!(m.masks.kept_prunable() < kept);
            before = m.masks.clone();
            kept = m.masks.kept_prunable();
            weight_prune_event(&mut m, frac).unwrap();
        }
    }

    #[test]
    fn pruned_weights_are_zero(seed in any::<u64>(), frac in 0.01f64..0.9) {
        let mut m = toy_model(seed);
        weight_prune_event(&mut m, frac).unwrap();
        for (b, bm) in m.weights.blocks.iter().zip(&m.masks.blocks) {
            for (lin, mask) in b.linears().into_iter().zip(bm.iter()) {
                prop_assert!(lin.weight.iter().zip(mask.weight.iter()).all(|(&v, &k)| k || v == 0.0));
            }
        }
    }

    #[test]
    fn container_round_trips(n_layers in 1usize..4, frames in 1usize..6, dim in 1usize..6, seed in any::<u64>()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<Array2<f64>> = (0..n_layers)
            .map(|_| Array2::from_shape_fn((frames, dim), |_| rand::Rng::random_range(&mut rng, -10.0f32..10.0) as f64))
            .collect();
        let t = EmbeddingTensor::from_f64(&layers).unwrap();
        let back = decode_container(&encode_container(&t).unwrap()).unwrap();
        prop_assert_eq!(back.to_f64(), layers);
    }

    #[test]
    fn container_decode_never_panics(tail in prop::collection::vec(any::<u8>(), 0..64)) {
        let mut bytes = b"SPEB".to_vec();
        bytes.extend(tail);
        let _ = decode_container(&bytes);
    }

    #[test]
    fn checkpoint_decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_checkpoint::<f32>(&bytes);
        let _ = decode_checkpoint::<f64>(&bytes);
    }

    #[test]
    fn records_csv_round_trips(
        rows in prop::collection::vec((0u64..1000, 0.0f64..1.0, proptest::option::of(0.0f64..10.0), label(), prop::collection::vec(label(), 1..4)), 1..6)
    ) {
        let records: Vec<TrajectoryRecord> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (step, sparsity, loss, d, per_layer))| TrajectoryRecord {
                series: "weight".into(),
                step: step + 1000 * i as u64,
                point: sparsity,
                sparsity,
                loss,
                nonzero_params: 17 * i,
                biases: vec![CategoryBias {
                    category: "Gender".into(),
                    d,
                    label: classify_bias(d).unwrap().label(),
                    p_value: loss.map(|l| l / 10.0),
                    d_per_layer: per_layer,
                }],
            })
            .collect();
        let back = records_from_csv(&records_to_csv(&records).unwrap()).unwrap();
        prop_assert_eq!(back, records);
    }

    #[test]
    fn sampler_epochs_are_permutations(n in 1usize..40, batch in 1usize..9, seed in any::<u64>()) {
        let mut s = BatchSampler::new(n, seed, "prop").unwrap();
        let drawn: Vec<usize> = (0..(3 * n).div_ceil(batch)).flat_map(|_| s.next_batch(batch)).collect();
        for epoch in drawn.chunks_exact(n) {
            let mut e = epoch.to_vec();
            e.sort_unstable();
            prop_assert_eq!(e, (0..n).collect::<Vec<_>>());
        }
    }
}
