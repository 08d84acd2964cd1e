use adformer_core::attention::{attention_cost, CostReport};
use adformer_core::augment::AugmentationConfig;
use adformer_core::embedding::{build_all, patch_partition, GranularitySpec, TokenSet};
use adformer_core::model::{
    load_checkpoint, loss, save_checkpoint, Ablation, AdFormer, ModelConfig,
};
use adformer_core::numerics::{Tape, Tensor};
use adformer_core::signal::Segment;
use adformer_core::training::{batch_gradients, AdamW};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(ablation: Ablation) -> ModelConfig {
    let mut c = ModelConfig::desk(4, 16, 2);
    c.spec = GranularitySpec::new(vec![4, 8], vec![4, 8], 8, 16);
    c.layers = 1;
    c.heads = 2;
    c.d_ff = 16;
    c.ablation = ablation;
    c.augmentation = AugmentationConfig::disabled();
    c
}

fn window(t: usize, c: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![t, c], (0..t * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Encodes `x`, optionally adding `delta` to the tokens of set `perturb`
/// before the encoder; returns (tokens, router) values per set.
fn encode_with(model: &AdFormer<f64>, x: &Tensor<f64>, perturb: Option<(usize, f64)>) -> Vec<(Tensor<f64>, Tensor<f64>)> {
    let tape = Tape::new();
    let bound = model.store.bind(&tape, false);
    let mut sets = build_all(&tape, &bound, &model.embedding, x, None).unwrap();
    if let Some((j, delta)) = perturb {
        let s = sets[j];
        let shape = s.tokens.shape();
        let bump = tape.constant(Tensor::filled(&shape, delta).map(|v| v * 0.37));
        sets[j] = TokenSet {
            tokens: s.tokens.add(bump).unwrap(),
            ..s
        };
    }
    model
        .encode(&bound, &sets, false)
        .unwrap()
        .iter()
        .map(|s| (s.tokens.value(), s.router.value()))
        .collect()
}

#[test]
fn no_inter_keeps_granularities_isolated() {
    let mut cfg = tiny(Ablation::NoInter);
    cfg.layers = 3;
    let model = AdFormer::<f64>::new(cfg, 3).unwrap();
    let x = window(16, 4, 1);
    let base = encode_with(&model, &x, None);
    for j in 0..4 {
        let pert = encode_with(&model, &x, Some((j, 0.5)));
        for i in 0..4 {
            if i == j {
                assert_ne!(pert[i].0, base[i].0);
            } else {
                assert_eq!(pert[i], base[i], "set {i} changed when set {j} was perturbed");
            }
        }
    }
}

#[test]
fn with_inter_tokens_change_only_through_routers() {
    let mut cfg = tiny(Ablation::Full);
    cfg.layers = 1;
    let one = AdFormer::<f64>::new(cfg.clone(), 3).unwrap();
    cfg.layers = 2;
    let two = AdFormer::<f64>::new(cfg, 3).unwrap();
    let x = window(16, 4, 2);
    // temporal set 0 perturbed
    let (b1, p1) = (encode_with(&one, &x, None), encode_with(&one, &x, Some((0, 0.5))));
    assert_eq!(p1[1].0, b1[1].0, "tokens of another granularity moved within one layer");
    assert_ne!(p1[1].1, b1[1].1, "router of another granularity did not react");
    // the spatial branch never sees temporal tokens
    assert_eq!(p1[2], b1[2]);
    assert_eq!(p1[3], b1[3]);
    let (b2, p2) = (encode_with(&two, &x, None), encode_with(&two, &x, Some((0, 0.5))));
    assert_ne!(p2[1].0, b2[1].0, "router-mediated influence missing after two layers");
    assert_eq!(p2[2], b2[2]);
}

#[test]
fn perturbing_one_projection_moves_one_router_without_inter() {
    let model = AdFormer::<f64>::new(tiny(Ablation::NoInter), 5).unwrap();
    let x = window(16, 4, 3);
    let rep = |m: &AdFormer<f64>| {
        let tape = Tape::new();
        let bound = m.store.bind(&tape, false);
        m.forward(&tape, &bound, &x, None).unwrap().representation.value()
    };
    let base = rep(&model);
    let mut bumped = model.clone();
    let id = bumped.store.find("temporal.embed.1.projection").unwrap();
    bumped.store.get_mut(id).value.data_mut()[0] += 0.25;
    let after = rep(&bumped);
    for r in 0..4 {
        let same = base.row(r) == after.row(r);
        assert_eq!(same, r != 1, "row {r}");
    }
}

#[test]
fn score_entries_match_cost_report_exactly() {
    let mut cfg = ModelConfig::desk(3, 128, 2);
    cfg.spec.d_model = 16;
    cfg.heads = 4;
    cfg.d_ff = 16;
    cfg.layers = 2;
    cfg.augmentation = AugmentationConfig::disabled();
    let model = AdFormer::<f64>::new(cfg.clone(), 0).unwrap();
    let tape = Tape::new();
    let bound = model.store.bind(&tape, false);
    model.forward(&tape, &bound, &window(128, 3, 4), None).unwrap();
    let temporal = attention_cost(&cfg.spec, 128);
    assert_eq!(temporal, CostReport::from_counts(&[64, 32, 16]));
    let spatial = CostReport::from_counts(&cfg.spec.scaled_channels);
    let per_layer = temporal.router_entries + spatial.router_entries;
    assert_eq!(tape.score_entries(), 2 * per_layer);
}

#[test]
fn full_model_gradient_check() {
    let model = AdFormer::<f64>::new(tiny(Ablation::Full), 7).unwrap();
    let x = window(16, 4, 5);
    let check = model.gradient_check(&x, 1, 250, 1e-5, 11).unwrap();
    assert!(check.coordinates >= 200);
    assert!(check.passes(1e-4), "{check:?}");
}

#[test]
fn granularity_processing_order_is_irrelevant() {
    let model = AdFormer::<f64>::new(tiny(Ablation::Full), 8).unwrap();
    let x = window(16, 4, 6);
    let run = |reversed| {
        let tape = Tape::new();
        let bound = model.store.bind(&tape, false);
        model.forward_ordered(&tape, &bound, &x, None, reversed).unwrap().logits.value()
    };
    assert_eq!(run(false), run(true));
}

#[test]
fn positional_tables_never_get_gradient_but_learned_embeddings_do() {
    let model = AdFormer::<f64>::new(tiny(Ablation::Full), 9).unwrap();
    let pos = model.embedding.pos_table.clone();
    let tape = Tape::new();
    let bound = model.store.bind(&tape, true);
    let out = model.forward(&tape, &bound, &window(16, 4, 7), None).unwrap();
    let grads = loss(out.logits, 0).unwrap().backward().unwrap();
    for p in model.store.iter().filter(|p| p.name.contains(".embed.")) {
        let id = model.store.find(&p.name).unwrap();
        let g = grads.get(bound[id]).expect("embedding parameter has a gradient");
        assert!(g.data().iter().any(|&v| v != 0.0), "{} has zero gradient", p.name);
    }
    assert_eq!(model.embedding.pos_table, pos);
    assert!(model.store.iter().all(|p| !p.name.contains("pos")));
}

#[test]
fn no_inter_flag_equals_skipping_the_stage() {
    // same seed → same parameter draws; the inter parameters exist but are unused
    let full = AdFormer::<f64>::new(tiny(Ablation::Full), 4).unwrap();
    let mut skip = full.clone();
    skip.config.ablation = Ablation::NoInter;
    let fresh = AdFormer::<f64>::new(tiny(Ablation::NoInter), 4).unwrap();
    let x = window(16, 4, 8);
    assert_eq!(skip.logits(&x).unwrap(), fresh.logits(&x).unwrap());
    assert_ne!(full.logits(&x).unwrap(), fresh.logits(&x).unwrap());
}

#[test]
fn loss_drops_on_a_fixed_batch() {
    let model_cfg = tiny(Ablation::Full);
    let mut model = AdFormer::<f64>::new(model_cfg, 1).unwrap();
    let segs: Vec<Segment<f64>> = (0..8)
        .map(|i| Segment {
            subject_id: format!("s{i}"),
            label: i % 2,
            data: window(16, 4, 100 + i as u64).map(|v| v + if i % 2 == 0 { 1.0 } else { -1.0 }),
            window_index: 0,
        })
        .collect();
    let batch: Vec<&Segment<f64>> = segs.iter().collect();
    let mut opt = AdamW::new(&model.store, 0.9, 0.999, 1e-8, 0.0);
    let first = batch_gradients(&mut model, &batch, None).unwrap();
    opt.step(&mut model.store, 1e-2).unwrap();
    let mut last = first;
    for _ in 0..9 {
        last = batch_gradients(&mut model, &batch, None).unwrap();
        opt.step(&mut model.store, 1e-2).unwrap();
    }
    assert!(last < 0.9 * first, "{first} -> {last}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = AdFormer::<f64>::new(tiny(Ablation::NoSpatial), 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint::<f64>(&path).unwrap();
    let x = window(16, 4, 9);
    assert_eq!(model.logits(&x).unwrap(), back.logits(&x).unwrap());
}

#[test]
fn single_precision_model_runs() {
    let model = AdFormer::<f32>::new(tiny(Ablation::Full), 1).unwrap();
    let p = model.predict_proba(&window(16, 4, 10).cast()).unwrap();
    assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-5);
}

#[test]
fn training_mode_augmentation_is_seeded() {
    let mut cfg = tiny(Ablation::Full);
    cfg.augmentation = AugmentationConfig::default();
    let model = AdFormer::<f64>::new(cfg, 2).unwrap();
    let x = window(16, 4, 11);
    let run = |seed: u64| {
        let tape = Tape::new();
        let bound = model.store.bind(&tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.forward(&tape, &bound, &x, Some(&mut rng)).unwrap().logits.value()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
    assert_eq!(model.logits(&x).unwrap(), model.logits(&x).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn token_counts(t in 1usize..300, l in 1usize..64, c in 1usize..5, f in 1usize..20) {
        let p = patch_partition(&Tensor::<f64>::zeros(&[t, c]), l).unwrap();
        prop_assert_eq!(p.shape(), &[t.div_ceil(l), l * c]);
        let mut cfg = ModelConfig::desk(c, t, 2);
        cfg.spec = GranularitySpec::new(vec![l], vec![f], 8, t);
        cfg.heads = 2;
        cfg.layers = 1;
        cfg.d_ff = 8;
        cfg.augmentation = AugmentationConfig::disabled();
        let model = AdFormer::<f64>::new(cfg, 0).unwrap();
        let tape = Tape::new();
        let bound = model.store.bind(&tape, false);
        let sets = build_all(&tape, &bound, &model.embedding, &Tensor::zeros(&[t, c]), None).unwrap();
        prop_assert_eq!(sets[0].len(), t.div_ceil(l));
        prop_assert_eq!(sets[1].len(), f);
    }
}

#[test]
fn census_lists_router_stage_only_when_used() {
    let full = AdFormer::<f64>::new(tiny(Ablation::Full), 0).unwrap().parameter_census();
    let skip = AdFormer::<f64>::new(tiny(Ablation::NoInter), 0).unwrap().parameter_census();
    assert!(full.keys().any(|k| k.contains(".inter")));
    assert!(!skip.keys().any(|k| k.contains(".inter")));
    let shared: Vec<_> = skip.keys().collect();
    assert!(shared.iter().all(|k| full[k.as_str()] == skip[k.as_str()]));
}
