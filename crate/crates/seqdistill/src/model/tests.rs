use super::*;
use crate::data::{batch_iterator, ParallelCorpus};
use crate::model::loss::{batch_loss_graph, LossKind};
use crate::model::net::BoundParams;
use crate::tensor::Tape;
use crate::testutil::chain_model;

fn tiny_cfg() -> ModelConfig {
    ModelConfig::new(1, 3, 9, 8).with_dropout(0.0)
}

fn tiny_corpus() -> ParallelCorpus {
    ParallelCorpus::new(
        vec![
            (vec![4, 5, 6], vec![5, 4]),
            (vec![7], vec![6, 7, 5]),
            (vec![5, 8, 4, 6], vec![4]),
        ],
        9,
        8,
    )
    .unwrap()
}

#[test]
fn init_is_deterministic() {
    let cfg = ModelConfig::new(2, 4, 10, 12);
    let a = init_params(&cfg, 9).unwrap();
    let b = init_params(&cfg, 9).unwrap();
    assert_eq!(a, b);
    let c = init_params(&cfg, 10).unwrap();
    assert_ne!(a, c);
}

#[test]
fn init_range_zero_gives_zero_weights() {
    let cfg = ModelConfig::new(1, 4, 8, 8);
    let p = init_params_with_range(&cfg, 3, 0.0).unwrap();
    assert!(p.src_embed.data().iter().all(|&w| w == 0.0));
    assert!(p.out_w.data().iter().all(|&w| w == 0.0));
    // Forget-gate bias block stays at 1 by construction.
    assert_eq!(&p.enc[0].bias.data()[4..8], &[1.0; 4]);
    assert_eq!(&p.enc[0].bias.data()[0..4], &[0.0; 4]);
}

#[test]
fn init_weight_mean_is_centered() {
    let cfg = ModelConfig::new(2, 64, 300, 300);
    let p = init_params(&cfg, 4).unwrap();
    let mut total = 0.0;
    let mut count = 0usize;
    for (name, t) in p.named_tensors() {
        if name.ends_with("bias") || name == "out.b" {
            continue;
        }
        total += t.data().iter().sum::<f64>();
        count += t.numel();
    }
    assert!(count >= 100_000, "need at least 1e5 weights, got {count}");
    let mean = total / count as f64;
    assert!(mean.abs() < 0.005, "weight mean {mean}");
}

#[test]
fn encode_shapes_and_vocab_check() {
    let cfg = tiny_cfg();
    let params = init_params(&cfg, 1).unwrap();
    let batch = &batch_iterator(&tiny_corpus(), 3, false, None)[0];
    let (enc, state) = encode(&params, &batch.src, &batch.src_lens).unwrap();
    assert_eq!(enc.annotations.len(), 4);
    assert_eq!(enc.annotations[0].shape(), &[3, 3]);
    assert_eq!(state.layers.len(), 1);

    let mut bad = batch.src.clone();
    bad.ids[0] = 100;
    assert!(encode(&params, &bad, &batch.src_lens).is_err());
}

#[test]
fn encode_identical_rows_agree() {
    let cfg = tiny_cfg();
    let params = init_params(&cfg, 2).unwrap();
    let corpus =
        ParallelCorpus::new(vec![(vec![4, 5, 6], vec![4]), (vec![4, 5, 6], vec![5])], 9, 8)
            .unwrap();
    let batch = &batch_iterator(&corpus, 2, false, None)[0];
    let (enc, _) = encode(&params, &batch.src, &batch.src_lens).unwrap();
    for ann in &enc.annotations {
        assert_eq!(ann.row(0), ann.row(1));
    }
}

#[test]
fn encode_zero_model_gives_zero_annotations() {
    let cfg = tiny_cfg();
    let params = init_params_with_range(&cfg, 0, 0.0).unwrap();
    let batch = &batch_iterator(&tiny_corpus(), 3, false, None)[0];
    let (enc, _) = encode(&params, &batch.src, &batch.src_lens).unwrap();
    for ann in &enc.annotations {
        assert!(ann.data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn decode_step_single_position_attention_is_one() {
    let cfg = tiny_cfg();
    let params = init_params(&cfg, 3).unwrap();
    let corpus = ParallelCorpus::new(vec![(vec![5], vec![4])], 9, 8).unwrap();
    let batch = &batch_iterator(&corpus, 1, false, None)[0];
    let (enc, state) = encode(&params, &batch.src, &batch.src_lens).unwrap();
    let (_, attn, _) = decode_step(&params, &enc, &state, &[2]).unwrap();
    assert_eq!(attn.data(), &[1.0]);
}

#[test]
fn decode_step_log_dist_normalized_and_pure() {
    let cfg = tiny_cfg();
    let params = init_params(&cfg, 5).unwrap();
    let batch = &batch_iterator(&tiny_corpus(), 3, false, None)[0];
    let (enc, state) = encode(&params, &batch.src, &batch.src_lens).unwrap();
    let (logp, attn, next) = decode_step(&params, &enc, &state, &[2, 2, 2]).unwrap();
    for r in 0..3 {
        let total: f64 = logp.row(r).iter().map(|&x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
    let (logp2, attn2, next2) = decode_step(&params, &enc, &state, &[2, 2, 2]).unwrap();
    assert_eq!(logp, logp2);
    assert_eq!(attn, attn2);
    assert_eq!(next.feed, next2.feed);
}

#[test]
fn attention_respects_padding() {
    let cfg = tiny_cfg();
    let params = init_params(&cfg, 7).unwrap();
    let corpus =
        ParallelCorpus::new(vec![(vec![4, 5, 6, 7], vec![4]), (vec![5, 6], vec![5])], 9, 8)
            .unwrap();
    let batch = &batch_iterator(&corpus, 2, false, None)[0];
    let (enc, state) = encode(&params, &batch.src, &batch.src_lens).unwrap();
    let (_, attn, _) = decode_step(&params, &enc, &state, &[2, 2]).unwrap();
    assert_eq!(attn.row(1)[2], 0.0);
    assert_eq!(attn.row(1)[3], 0.0);
    let valid: f64 = attn.row(1)[..2].iter().sum();
    assert!((valid - 1.0).abs() < 1e-9);
    let full: f64 = attn.row(0).iter().sum();
    assert!((full - 1.0).abs() < 1e-9);
}

#[test]
fn uniform_model_nll_is_log_vocab() {
    let cfg = ModelConfig::new(1, 4, 8, 50).with_dropout(0.0);
    let params = init_params_with_range(&cfg, 0, 0.0).unwrap();
    let corpus = ParallelCorpus::new(vec![(vec![4, 5], vec![10, 20, 30])], 8, 50).unwrap();
    let batch = &batch_iterator(&corpus, 1, false, None)[0];
    let out = word_nll_loss(&params, batch).unwrap();
    assert!((out.mean - (50.0_f64).ln()).abs() < 1e-12);
}

#[test]
fn near_deterministic_model_nll_is_near_zero() {
    // Walk 2 -> 4 -> 5 -> 3 with probability ~1 at each step.
    let params = chain_model(6, &[0, 1, 4, 0, 5, 3]);
    let corpus = ParallelCorpus::new(vec![(vec![4], vec![4, 5])], 6, 6).unwrap();
    let batch = &batch_iterator(&corpus, 1, false, None)[0];
    let out = word_nll_loss(&params, batch).unwrap();
    assert!(out.mean.abs() < 1e-9, "loss {}", out.mean);
}

#[test]
fn batch_nll_decomposes_over_sentences() {
    let cfg = tiny_cfg();
    let params = init_params(&cfg, 11).unwrap();
    let corpus = tiny_corpus();
    let batch = &batch_iterator(&corpus, 3, false, None)[0];
    let out = word_nll_loss(&params, batch).unwrap();
    let total: f64 = out.per_sentence_sum.iter().sum();
    assert!((out.mean - total / out.token_count as f64).abs() < 1e-12);

    // Per-sentence sums match single-sentence batches.
    for (i, pair) in corpus.pairs().iter().enumerate() {
        let single = ParallelCorpus::new(vec![pair.clone()], 9, 8).unwrap();
        let sb = &batch_iterator(&single, 1, false, None)[0];
        let so = word_nll_loss(&params, sb).unwrap();
        assert!((so.per_sentence_sum[0] - out.per_sentence_sum[i]).abs() < 1e-9);
    }
}

#[test]
fn word_kd_alpha_zero_equals_nll() {
    let cfg = tiny_cfg();
    let student = init_params(&cfg, 21).unwrap();
    let teacher = init_params(&ModelConfig::new(1, 5, 9, 8).with_dropout(0.0), 22).unwrap();
    let batch = &batch_iterator(&tiny_corpus(), 3, false, None)[0];
    let kd = word_kd_loss(&student, &teacher, batch, 0.0, 1.0).unwrap();
    let nll = word_nll_loss(&student, batch).unwrap().mean;
    assert_eq!(kd, nll);
}

#[test]
fn word_kd_self_distillation_is_teacher_entropy() {
    let cfg = tiny_cfg();
    let params = init_params(&cfg, 23).unwrap();
    let corpus = tiny_corpus();
    let batch = &batch_iterator(&corpus, 3, false, None)[0];
    let kd = word_kd_loss(&params, &params, batch, 1.0, 1.0).unwrap();

    // Mean per-token entropy of the model's own step distributions.
    let mut entropy_sum = 0.0;
    let mut tokens = 0usize;
    for pair in corpus.pairs() {
        let single = ParallelCorpus::new(vec![pair.clone()], 9, 8).unwrap();
        let sb = &batch_iterator(&single, 1, false, None)[0];
        let (enc, mut state) = encode(&params, &sb.src, &sb.src_lens).unwrap();
        for j in 0..sb.dec_input.cols {
            let prev = sb.dec_input.row(0)[j];
            let (logp, _, next) = decode_step(&params, &enc, &state, &[prev]).unwrap();
            entropy_sum -= logp.data().iter().map(|&lp| lp.exp() * lp).sum::<f64>();
            state = next;
            tokens += 1;
        }
    }
    assert!((kd - entropy_sum / tokens as f64).abs() < 1e-9);
}

#[test]
fn word_kd_high_temperature_approaches_uniform() {
    let cfg = tiny_cfg();
    let student = init_params(&cfg, 31).unwrap();
    let teacher = init_params(&cfg, 32).unwrap();
    let batch = &batch_iterator(&tiny_corpus(), 3, false, None)[0];
    let kd = word_kd_loss(&student, &teacher, batch, 1.0, 1e6).unwrap();
    assert!((kd - (8.0_f64).ln()).abs() < 1e-3, "kd {kd}");
}

#[test]
fn word_kd_linear_in_alpha() {
    let cfg = tiny_cfg();
    let student = init_params(&cfg, 41).unwrap();
    let teacher = init_params(&cfg, 42).unwrap();
    let batch = &batch_iterator(&tiny_corpus(), 3, false, None)[0];
    let l0 = word_kd_loss(&student, &teacher, batch, 0.0, 1.0).unwrap();
    let l1 = word_kd_loss(&student, &teacher, batch, 1.0, 1.0).unwrap();
    for alpha in [0.25, 0.5, 0.9] {
        let la = word_kd_loss(&student, &teacher, batch, alpha, 1.0).unwrap();
        assert!((la - ((1.0 - alpha) * l0 + alpha * l1)).abs() < 1e-9);
    }
}

#[test]
fn word_kd_rejects_vocab_mismatch() {
    let student = init_params(&tiny_cfg(), 1).unwrap();
    let teacher = init_params(&ModelConfig::new(1, 3, 9, 12), 1).unwrap();
    let batch = &batch_iterator(&tiny_corpus(), 3, false, None)[0];
    assert!(word_kd_loss(&student, &teacher, batch, 0.5, 1.0).is_err());
}

#[test]
fn sequence_logprob_uniform_model() {
    let cfg = ModelConfig::new(1, 4, 8, 10).with_dropout(0.0);
    let params = init_params_with_range(&cfg, 0, 0.0).unwrap();
    let lp = sequence_logprob(&params, &[4, 5], &[6, 7, 3]).unwrap();
    assert!((lp + 3.0 * (10.0_f64).ln()).abs() < 1e-12);
}

#[test]
fn sequence_logprob_matches_word_nll_sum() {
    let cfg = ModelConfig::new(2, 4, 9, 8).with_dropout(0.0);
    let params = init_params(&cfg, 51).unwrap();
    for (src, tgt) in tiny_corpus().pairs() {
        let mut scored = tgt.clone();
        scored.push(3);
        let lp = sequence_logprob(&params, src, &scored).unwrap();
        let single = ParallelCorpus::new(vec![(src.clone(), tgt.clone())], 9, 8).unwrap();
        let batch = &batch_iterator(&single, 1, false, None)[0];
        let nll = word_nll_loss(&params, batch).unwrap().per_sentence_sum[0];
        assert!((lp + nll).abs() < 1e-6, "lp {lp} nll {nll}");
    }
}

#[test]
fn sequence_logprob_strictly_decreases_per_token() {
    let cfg = tiny_cfg();
    let params = init_params(&cfg, 61).unwrap();
    let src = vec![4, 5];
    let mut tgt: Vec<u32> = Vec::new();
    let mut last = 0.0;
    for tok in [5u32, 6, 7, 4, 3] {
        tgt.push(tok);
        let lp = sequence_logprob(&params, &src, &tgt).unwrap();
        assert!(lp < last, "appending should lower log-prob: {lp} vs {last}");
        last = lp;
    }
}

#[test]
fn perplexity_uniform_model_is_vocab_size() {
    let cfg = ModelConfig::new(1, 4, 9, 8).with_dropout(0.0);
    let params = init_params_with_range(&cfg, 0, 0.0).unwrap();
    let ppl = perplexity(&params, &tiny_corpus()).unwrap();
    assert!((ppl - 8.0).abs() < 1e-9);
}

#[test]
fn perplexity_invariant_to_order() {
    let cfg = tiny_cfg();
    let params = init_params(&cfg, 71).unwrap();
    let corpus = tiny_corpus();
    let mut pairs = corpus.pairs().to_vec();
    pairs.reverse();
    let shuffled = ParallelCorpus::new(pairs, 9, 8).unwrap();
    let a = perplexity(&params, &corpus).unwrap();
    let b = perplexity(&params, &shuffled).unwrap();
    assert!(((a - b) / a).abs() < 1e-9);
}

#[test]
fn train_with_zero_lr_keeps_params() {
    let cfg = tiny_cfg();
    let params = init_params(&cfg, 81).unwrap();
    let corpus = tiny_corpus();
    let tcfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        learning_rate: 0.0,
        ..Default::default()
    };
    let (trained, _) = train(params.clone(), &corpus, &corpus, &LossKind::Nll, &tcfg).unwrap();
    assert_eq!(params, trained);
}

#[test]
fn train_returns_best_dev_checkpoint() {
    let cfg = tiny_cfg();
    let params = init_params(&cfg, 91).unwrap();
    let corpus = tiny_corpus();
    let init_ppl = perplexity(&params, &corpus).unwrap();
    let tcfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        learning_rate: 0.5,
        seed: 5,
        ..Default::default()
    };
    let (trained, log) = train(params, &corpus, &corpus, &LossKind::Nll, &tcfg).unwrap();
    let final_ppl = perplexity(&trained, &corpus).unwrap();
    assert!(final_ppl <= init_ppl + 1e-9);
    assert!((final_ppl - log.best_dev_ppl).abs() < 1e-9);
}

#[test]
fn training_reduces_loss_on_tiny_task() {
    let cfg = ModelConfig::new(1, 8, 9, 9).with_dropout(0.0);
    let params = init_params(&cfg, 101).unwrap();
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = (0..20)
        .map(|i| {
            let a = 4 + (i % 5) as u32;
            (vec![a, 4 + ((i / 5) % 4) as u32], vec![a])
        })
        .collect();
    let corpus = ParallelCorpus::new(pairs, 9, 9).unwrap();
    let tcfg = TrainConfig {
        epochs: 15,
        batch_size: 4,
        learning_rate: 1.0,
        seed: 3,
        ..Default::default()
    };
    let before = perplexity(&params, &corpus).unwrap();
    let (trained, _) = train(params, &corpus, &corpus, &LossKind::Nll, &tcfg).unwrap();
    let after = perplexity(&trained, &corpus).unwrap();
    assert!(after < before * 0.7, "ppl {before} -> {after}");
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let cfg = ModelConfig::new(1, 3, 7, 6).with_dropout(0.0);
    let params = init_params(&cfg, 111).unwrap();
    let corpus = ParallelCorpus::new(vec![(vec![4, 6], vec![5, 4]), (vec![5], vec![4])], 7, 6)
        .unwrap();
    let batch = &batch_iterator(&corpus, 2, false, None)[0];

    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params, true);
    let out = batch_loss_graph(&mut tape, &bound, batch, &LossKind::Nll, &mut None).unwrap();
    tape.backward(out.mean).unwrap();
    let grads: Vec<_> = bound.leaf_ids().iter().map(|&id| tape.grad(id).unwrap()).collect();

    let h = 1e-5;
    let names: Vec<String> = params.named_tensors().iter().map(|(n, _)| n.clone()).collect();
    for (k, name) in names.iter().enumerate() {
        let numel = grads[k].numel();
        for j in 0..numel {
            let mut plus = params.clone();
            plus.named_tensors_mut()[k].1.data_mut()[j] += h;
            let mut minus = params.clone();
            minus.named_tensors_mut()[k].1.data_mut()[j] -= h;
            let fp = word_nll_loss(&plus, batch).unwrap().mean;
            let fm = word_nll_loss(&minus, batch).unwrap().mean;
            let fd = (fp - fm) / (2.0 * h);
            let a = grads[k].data()[j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "{name}[{j}]: analytic {a} vs fd {fd}");
        }
    }
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let cfg = ModelConfig::new(2, 4, 9, 8).with_dropout(0.15);
    let params = init_params(&cfg, 121).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &params, "aaa", "bbb").unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.params, params);
    assert_eq!(loaded.src_vocab_sha256, "aaa");
    assert_eq!(loaded.tgt_vocab_sha256, "bbb");

    let text = std::fs::read(&path).unwrap();
    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}
