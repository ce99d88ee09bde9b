use std::collections::BTreeSet;

use indexmap::IndexMap;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ftlab_core::data::{generate_synth, SynthTaskSpec};
use ftlab_core::encoder::{EncoderConfig, ParamMap};
use ftlab_core::strategies::{build_param_groups, LlrdSetup, FOUR_GROUP_MULTIPLIERS};
use ftlab_core::trainer::{
    finetune, history_rows, initial_params, lr_at_step, masked_token_accuracy, pretrain_toy, split_indices,
    variance_study, warmup_steps, AdamW, Checkpoint, CheckpointKind, Dataset, Metadata, PretrainConfig, Summary,
    TrainConfig, HISTORY_HEADER,
};
use ftlab_core::{Error, Tensor, Vocabulary};

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        hidden: 16,
        heads: 2,
        ff_dim: 32,
        vocab_size: 64,
        max_seq_len: 16,
        dropout_p: 0.1,
    }
}

fn synth(n: usize, seed: u64) -> Dataset {
    let spec = SynthTaskSpec {
        num_examples: n,
        seed,
        ..SynthTaskSpec::default()
    };
    Dataset {
        examples: generate_synth(&spec).unwrap(),
        num_classes: 2,
    }
}

fn pretrained(steps: usize) -> Checkpoint {
    let corpus: Vec<String> = synth(300, 99).examples.into_iter().map(|e| e.text).collect();
    let cfg = PretrainConfig {
        encoder: small_encoder(),
        steps,
        ..PretrainConfig::default()
    };
    pretrain_toy(&corpus, &cfg, 7).unwrap()
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        base_lr: 1e-3,
        epochs: 1,
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    }
}

proptest! {
    #[test]
    fn split_sizes_follow_counting_rule(counts in prop::collection::vec(5usize..60, 1..5), seed in any::<u64>()) {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, n)| std::iter::repeat_n(c, *n)).collect();
        let [tr, va, te] = split_indices(&labels, seed).unwrap();
        for (c, &n) in counts.iter().enumerate() {
            let count = |idx: &[usize]| idx.iter().filter(|i| labels[**i] == c).count();
            prop_assert_eq!(count(&va), n / 5);
            prop_assert_eq!(count(&te), n / 5);
            prop_assert_eq!(count(&tr), n - 2 * (n / 5));
        }
        let all: BTreeSet<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        prop_assert_eq!(all.len(), labels.len());
        prop_assert_eq!(tr.len() + va.len() + te.len(), labels.len());
    }

    #[test]
    fn schedule_is_a_triangle(total in 1usize..400, frac in 0.0f64..0.99) {
        let w = warmup_steps(total, frac);
        let lrs: Vec<f64> = (0..=total).map(|s| lr_at_step(s, total, 1.0, frac).unwrap()).collect();
        prop_assert!(lrs.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(lrs[total], 0.0);
        for s in 1..=total {
            // The final step is always 0, even when warmup spans the run.
            if s <= w && s < total {
                prop_assert!(lrs[s] >= lrs[s - 1]);
            } else {
                prop_assert!(lrs[s] <= lrs[s - 1]);
            }
        }
        if w < total {
            prop_assert_eq!(lrs[w], 1.0);
        }
    }

    #[test]
    fn group_ratios_hold_at_every_step(total in 1usize..200, frac in 0.0f64..0.5, base in 1e-6f64..1e-2) {
        let names: Vec<String> = small_encoder()
            .param_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .chain(["head.out.weight".to_string()])
            .collect();
        let groups = build_param_groups(&names, 2, LlrdSetup::FourGroup, base).unwrap();
        for s in 0..total {
            let scale = lr_at_step(s, total, 1.0, frac).unwrap();
            if scale == 0.0 {
                continue;
            }
            for (g, m) in groups.iter().zip(FOUR_GROUP_MULTIPLIERS) {
                let ratio = (g.lr * scale) / (groups[1].lr * scale);
                prop_assert!((ratio - m).abs() <= 1e-12 * m);
            }
        }
    }
}

#[test]
fn schedule_rejects_bad_input() {
    assert!(matches!(lr_at_step(11, 10, 1.0, 0.1), Err(Error::Contract(_))));
    assert!(matches!(lr_at_step(0, 10, 1.0, 1.0), Err(Error::Contract(_))));
}

fn toy_params() -> ParamMap {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut p = ParamMap::new();
    p.insert("a.weight".into(), Tensor::randn(&[3, 4], 1.0, &mut rng));
    p.insert("a.bias".into(), Tensor::randn(&[4], 1.0, &mut rng));
    p.insert("n.gain".into(), Tensor::randn(&[4], 1.0, &mut rng));
    p
}

fn zeros_like(p: &ParamMap) -> IndexMap<String, Vec<f64>> {
    p.iter().map(|(n, t)| (n.clone(), vec![0.0; t.numel()])).collect()
}

#[test]
fn zero_gradient_leaves_parameters_alone() {
    let p0 = toy_params();
    let mut p = p0.clone();
    let mut opt = AdamW::with_decay(&p, 0.0);
    for _ in 0..5 {
        opt.step(&mut p, &zeros_like(&p0), |_| 1e-2).unwrap();
    }
    for (n, t) in &p {
        assert!(t.bit_eq(&p0[n]), "{n}");
    }
    // With decay on, only weights shrink, by exactly (1 - lr·wd) per step.
    let mut p = p0.clone();
    let mut opt = AdamW::new(&p);
    opt.step(&mut p, &zeros_like(&p0), |_| 0.1).unwrap();
    for (a, b) in p["a.weight"].data().iter().zip(p0["a.weight"].data()) {
        assert!((a - b * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }
    assert!(p["a.bias"].bit_eq(&p0["a.bias"]));
    assert!(p["n.gain"].bit_eq(&p0["n.gain"]));
}

#[test]
fn first_adam_step_moves_by_lr() {
    // With bias correction the first update is lr · g / (|g| + eps').
    let p0 = toy_params();
    let mut p = p0.clone();
    let mut opt = AdamW::with_decay(&p, 0.0);
    let grads: IndexMap<String, Vec<f64>> = p0
        .iter()
        .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v * 3.0).collect()))
        .collect();
    opt.step(&mut p, &grads, |_| 1e-3).unwrap();
    for (n, t) in &p {
        for ((a, b), g) in t.data().iter().zip(p0[n].data()).zip(&grads[n]) {
            let want = b - 1e-3 * g / (g.abs() + 1e-8);
            assert!((a - want).abs() < 1e-15, "{n}");
        }
    }
    let mut missing = grads.clone();
    missing.shift_remove("a.bias");
    assert!(matches!(opt.step(&mut p, &missing, |_| 1e-3), Err(Error::MissingParameter(_))));
}

#[test]
fn summary_matches_two_pass() {
    let xs = [0.71, 0.74, 0.69, 0.80, 0.77];
    let s = Summary::of(xs);
    let mean = xs.iter().sum::<f64>() / 5.0;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
    assert!((s.mean - mean).abs() <= 1e-12);
    assert!((s.std - std).abs() <= 1e-12);
    assert_eq!(Summary::of([7.0, 7.0]).std, 0.0);
}

fn sample_checkpoint(seed: u64, extra: &[(String, String)]) -> Checkpoint {
    let enc = small_encoder();
    let vocab = Vocabulary::build(["alpha beta gamma", "beta delta"], 64).unwrap();
    let mut metadata = Metadata::new(CheckpointKind::Pretrained, enc.clone(), &vocab, seed);
    metadata.extra.extend(extra.iter().cloned());
    Checkpoint {
        tensors: enc.init_params(&mut ChaCha8Rng::seed_from_u64(seed), 0.02),
        metadata,
    }
}

#[test]
fn checkpoint_bytes_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let ck = sample_checkpoint(3, &[]);
    let (a, b) = (dir.path().join("a.ftlb"), dir.path().join("b.ftlb"));
    ftlab_core::trainer::save_checkpoint(&ck, &a).unwrap();
    ftlab_core::trainer::save_checkpoint(&ck, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let back = ftlab_core::trainer::load_checkpoint(&a).unwrap();
    assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn checkpoint_round_trip(
        seed in any::<u64>(),
        extra in prop::collection::btree_map("[a-z_]{1,8}", "[ -~]{0,20}", 0..4),
        cut in 0usize..1000,
    ) {
        let extra: Vec<(String, String)> = extra.into_iter().map(|(k, v)| (k, v.trim().to_string())).collect();
        let ck = sample_checkpoint(seed, &extra);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        for (n, t) in &ck.tensors {
            prop_assert!(back.tensors[n].bit_eq(t));
        }
        prop_assert_eq!(&back.metadata, &ck.metadata);
        // Any strict prefix is rejected as a format error.
        let cut = cut % bytes.len();
        let truncated = matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format { .. }));
        prop_assert!(truncated, "prefix of {} bytes accepted", cut);
    }
}

#[test]
fn variance_needs_two_seeds() {
    let ck = pretrained(0);
    let err = variance_study(&ck, &synth(60, 1), &quick_config(0), &[4]).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn duplicate_seeds_have_zero_spread() {
    let ck = pretrained(0);
    let r = variance_study(&ck, &synth(80, 1), &quick_config(0), &[4, 4]).unwrap();
    assert_eq!(r.accuracy.std, 0.0);
    assert_eq!(r.f_score.std, 0.0);
    assert_eq!(r.runs.len(), 2);
}

#[test]
fn zero_epochs_returns_initial_parameters() {
    let ck = pretrained(0);
    let mut cfg = quick_config(5);
    cfg.epochs = 0;
    cfg.strategy.reinit_n = 1;
    let out = finetune(&ck, &synth(60, 2), &cfg).unwrap();
    let init = initial_params(&ck, 2, &cfg).unwrap();
    assert_eq!(out.total_steps, 0);
    assert!(out.history.is_empty());
    for (n, t) in &init {
        assert!(out.checkpoint.tensors[n].bit_eq(t), "{n}");
    }
    // Only the top block was re-initialized.
    let pre = ck.encoder_params();
    assert!(init["layer.0.ffn.input.weight"].bit_eq(&pre["layer.0.ffn.input.weight"]));
    assert!(!init["layer.1.ffn.input.weight"].bit_eq(&pre["layer.1.ffn.input.weight"]));
}

#[test]
fn finetune_is_deterministic_and_seed_sensitive() {
    let ck = pretrained(20);
    let data = synth(80, 3);
    let run = |seed| finetune(&ck, &data, &quick_config(seed)).unwrap();
    let (a, b, c) = (run(1), run(1), run(2));
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.test, b.test);
    assert_ne!(a.checkpoint.to_bytes().unwrap(), c.checkpoint.to_bytes().unwrap());
}

#[test]
fn history_has_one_row_per_epoch() {
    let ck = pretrained(0);
    let mut cfg = quick_config(1);
    cfg.epochs = 3;
    let out = finetune(&ck, &synth(60, 4), &cfg).unwrap();
    assert_eq!(out.history.len(), 3);
    let rows = history_rows("abc", 1, &out);
    assert_eq!(rows.len(), 4);
    let width = HISTORY_HEADER.split(',').count();
    assert!(rows.iter().all(|r| r.split(',').count() == width));
    assert!(rows[3].contains(",test,"));
    let counts = ftlab_core::data::corpus_stats(&synth(60, 4).examples, 2).unwrap().class_counts;
    let held: usize = counts.iter().map(|n| n / 5).sum();
    assert_eq!(out.split_sizes, [60 - 2 * held, held, held]);
    assert_eq!(out.total_steps, 3 * out.split_sizes[0].div_ceil(16));
}

#[test]
fn zero_mixout_is_no_mixout() {
    let ck = pretrained(0);
    let data = synth(60, 5);
    let plain = finetune(&ck, &data, &quick_config(2)).unwrap();
    let mut cfg = quick_config(2);
    cfg.strategy.mixout_p = Some(0.0);
    let zero = finetune(&ck, &data, &cfg).unwrap();
    for (n, t) in &plain.checkpoint.tensors {
        assert!(zero.checkpoint.tensors[n].bit_eq(t), "{n}");
    }
}

#[test]
fn mixout_run_trains_and_differs() {
    let ck = pretrained(0);
    let data = synth(60, 5);
    let plain = finetune(&ck, &data, &quick_config(2)).unwrap();
    let mut cfg = quick_config(2);
    cfg.strategy.mixout_p = Some(0.5);
    let mixed = finetune(&ck, &data, &cfg).unwrap();
    let w = "layer.1.ffn.output.weight";
    assert!(!mixed.checkpoint.tensors[w].bit_eq(&plain.checkpoint.tensors[w]));
    assert!(mixed.checkpoint.tensors[w].is_finite());
}

#[test]
fn masked_token_accuracy_beats_chance() {
    // Four classes with a single marker each: a marker is predictable from
    // the other markers of its sequence.
    let spec = SynthTaskSpec {
        num_classes: 4,
        markers_per_class: 1,
        vocab_size: 24,
        priors: vec![0.25; 4],
        num_examples: 600,
        seed: 40,
        ..SynthTaskSpec::default()
    };
    let corpus: Vec<String> = generate_synth(&spec).unwrap().into_iter().map(|e| e.text).collect();
    let cfg = PretrainConfig {
        encoder: EncoderConfig {
            dropout_p: 0.0,
            ..small_encoder()
        },
        steps: 300,
        ..PretrainConfig::default()
    };
    let ck = pretrain_toy(&corpus, &cfg, 8).unwrap();
    let held_out: Vec<String> = generate_synth(&SynthTaskSpec { seed: 41, num_examples: 200, ..spec })
        .unwrap()
        .into_iter()
        .map(|e| e.text)
        .collect();
    let acc = masked_token_accuracy(&ck, &held_out, 0.15, 3).unwrap();
    let chance = 1.0 / ck.metadata.encoder.vocab_size as f64;
    assert!(acc >= 10.0 * chance, "accuracy {acc}, chance {chance}");
}

#[test]
fn pretraining_is_reproducible() {
    let (a, b) = (pretrained(5), pretrained(5));
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(a.metadata.vocabulary().unwrap().len(), a.metadata.encoder.vocab_size);
}
