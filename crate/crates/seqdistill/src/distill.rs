//! Knowledge-transfer regimes and their combinations: word-level mixture
//! training, sequence-level data generation from the teacher's beam, and
//! fine-tuning toward the beam hypothesis closest to the gold target.

use std::fmt::Write as _;

use crate::bleu::smoothed_sentence_bleu;
use crate::cfgfile::KvFile;
use crate::data::ParallelCorpus;
use crate::decode::{
    beam_search_corpus, mode_mass, sample_sequence, translate_corpus, DecodeConfig, Hypothesis,
    KBestList,
};
use crate::error::{Error, Result};
use crate::model::{
    init_params_with_range, perplexity, train_weighted, LossKind, ModelConfig, ModelParams,
    TrainConfig, TrainLog,
};
use crate::seed::mix;

/// Fine-tuning is ordinary fixed-rate continuation training.
pub use crate::model::fine_tune;

/// How the sequence-level training targets are drawn from the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SeqKdMode {
    /// The approximate mode: highest-scoring completed beam hypothesis.
    #[default]
    Beam,
    /// One ancestral sample per source (Monte-Carlo estimate).
    Sample,
    /// Every completed beam hypothesis, weighted by the renormalized
    /// probabilities; expands the corpus by up to the beam width.
    RenormalizedKBest,
}

impl SeqKdMode {
    pub fn parse(s: &str) -> Result<SeqKdMode> {
        match s {
            "beam" => Ok(SeqKdMode::Beam),
            "sample" => Ok(SeqKdMode::Sample),
            "renorm" => Ok(SeqKdMode::RenormalizedKBest),
            _ => Err(Error::Config(format!(
                "unknown seq_kd_mode {s:?} (expected beam, sample, or renorm)"
            ))),
        }
    }
}

/// Which regimes to apply and with what knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillRecipe {
    pub use_word_kd: bool,
    pub use_seq_kd: bool,
    pub use_seq_inter: bool,
    pub alpha: f64,
    pub tau: f64,
    pub seq_kd_beam: usize,
    pub seq_inter_beam: usize,
    pub fine_tune_lr: f64,
    pub seq_inter_fraction: f64,
    pub seq_kd_mode: SeqKdMode,
}

impl Default for DistillRecipe {
    fn default() -> Self {
        DistillRecipe {
            use_word_kd: false,
            use_seq_kd: true,
            use_seq_inter: false,
            alpha: 0.5,
            tau: 1.0,
            seq_kd_beam: 5,
            seq_inter_beam: 35,
            fine_tune_lr: 0.1,
            seq_inter_fraction: 1.0,
            seq_kd_mode: SeqKdMode::Beam,
        }
    }
}

impl DistillRecipe {
    pub fn validate(&self) -> Result<()> {
        if !(self.use_word_kd || self.use_seq_kd || self.use_seq_inter) {
            return Err(Error::Config("recipe enables no distillation regime".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.tau < 1.0 {
            return Err(Error::Config(format!("tau {} must be >= 1", self.tau)));
        }
        if self.seq_kd_beam < 1 || self.seq_inter_beam < 1 {
            return Err(Error::Config("beam widths must be >= 1".into()));
        }
        if !(self.seq_inter_fraction > 0.0 && self.seq_inter_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "seq_inter_fraction {} outside (0, 1]",
                self.seq_inter_fraction
            )));
        }
        if self.fine_tune_lr < 0.0 {
            return Err(Error::Config("fine_tune_lr must be nonnegative".into()));
        }
        Ok(())
    }

    /// Reads a recipe from `key = value` text; unknown keys are errors.
    pub fn from_kv(mut kv: KvFile) -> Result<DistillRecipe> {
        let d = DistillRecipe::default();
        let recipe = DistillRecipe {
            use_word_kd: kv.get_bool_or("use_word_kd", d.use_word_kd)?,
            use_seq_kd: kv.get_bool_or("use_seq_kd", d.use_seq_kd)?,
            use_seq_inter: kv.get_bool_or("use_seq_inter", d.use_seq_inter)?,
            alpha: kv.get_or("alpha", d.alpha)?,
            tau: kv.get_or("tau", d.tau)?,
            seq_kd_beam: kv.get_or("seq_kd_beam", d.seq_kd_beam)?,
            seq_inter_beam: kv.get_or("seq_inter_beam", d.seq_inter_beam)?,
            fine_tune_lr: kv.get_or("fine_tune_lr", d.fine_tune_lr)?,
            seq_inter_fraction: kv.get_or("seq_inter_fraction", d.seq_inter_fraction)?,
            seq_kd_mode: match kv.get_str("seq_kd_mode") {
                Some(s) => SeqKdMode::parse(&s)?,
                None => d.seq_kd_mode,
            },
        };
        kv.finish()?;
        recipe.validate()?;
        Ok(recipe)
    }

    /// Row label in the combination grid, e.g. "seq-kd+word-kd".
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.use_seq_kd {
            parts.push("seq-kd");
        }
        if self.use_seq_inter {
            parts.push("seq-inter");
        }
        if self.use_word_kd {
            parts.push("word-kd");
        }
        parts.join("+")
    }
}

/// Diagnostics from teacher-side data generation.
#[derive(Debug, Clone, Default)]
pub struct DistillDataStats {
    /// Sentences where no hypothesis completed and a length-capped one was
    /// used instead.
    pub fallback_truncated: usize,
    /// Sentences where every hypothesis was empty and the gold target was
    /// kept (degenerate teachers only).
    pub fallback_gold: usize,
    /// Mean similarity of the selected target to gold.
    pub mean_sim_selected: f64,
    /// Mean similarity of the teacher's top-scoring hypothesis to gold.
    pub mean_sim_top: f64,
}

/// Hypotheses eligible as training targets: completed ones with at least
/// one content token, falling back to length-capped ones.
fn eligible(list: &KBestList) -> Vec<&Hypothesis> {
    let finished: Vec<&Hypothesis> = list
        .hypotheses
        .iter()
        .filter(|h| h.is_finished() && !h.content_tokens().is_empty())
        .collect();
    if !finished.is_empty() {
        return finished;
    }
    list.hypotheses
        .iter()
        .filter(|h| !h.is_finished() && !h.tokens.is_empty())
        .collect()
}

fn decode_cfg(beam: usize) -> DecodeConfig {
    DecodeConfig::default().with_beam(beam)
}

/// Replaces each target with the teacher's highest-scoring completed beam
/// hypothesis. Sources are preserved byte for byte and in order.
pub fn generate_seq_kd_corpus(
    teacher: &ModelParams,
    corpus: &ParallelCorpus,
    beam: usize,
) -> Result<(ParallelCorpus, DistillDataStats)> {
    let srcs: Vec<Vec<u32>> = corpus.sources().map(|s| s.to_vec()).collect();
    let lists = beam_search_corpus(teacher, &srcs, &decode_cfg(beam))?;
    let mut stats = DistillDataStats::default();
    let mut pairs = Vec::with_capacity(corpus.len());
    for (list, (src, gold)) in lists.iter().zip(corpus.pairs()) {
        let target = match eligible(list).first() {
            Some(h) => {
                if !h.is_finished() {
                    stats.fallback_truncated += 1;
                }
                h.content_tokens().to_vec()
            }
            None => {
                stats.fallback_gold += 1;
                gold.clone()
            }
        };
        pairs.push((src.clone(), target));
    }
    let out = ParallelCorpus::new(pairs, teacher.cfg.src_vocab_size, teacher.cfg.tgt_vocab_size)?;
    Ok((out, stats))
}

/// Sequence-level targets drawn by ancestral sampling instead of beam
/// search (the Monte-Carlo variant); one sample per source.
pub fn generate_seq_kd_sampled_corpus(
    teacher: &ModelParams,
    corpus: &ParallelCorpus,
    seed: u64,
) -> Result<(ParallelCorpus, DistillDataStats)> {
    use rayon::prelude::*;
    let cfg = decode_cfg(1);
    let hyps: Vec<Hypothesis> = corpus
        .pairs()
        .par_iter()
        .enumerate()
        .map(|(i, (src, _))| sample_sequence(teacher, src, &cfg, mix(seed, i as u64)))
        .collect::<Result<_>>()?;
    let mut stats = DistillDataStats::default();
    let mut pairs = Vec::with_capacity(corpus.len());
    for (h, (src, gold)) in hyps.iter().zip(corpus.pairs()) {
        let content = h.content_tokens();
        let target = if content.is_empty() {
            stats.fallback_gold += 1;
            gold.clone()
        } else {
            if !h.is_finished() {
                stats.fallback_truncated += 1;
            }
            content.to_vec()
        };
        pairs.push((src.clone(), target));
    }
    let out = ParallelCorpus::new(pairs, teacher.cfg.src_vocab_size, teacher.cfg.tgt_vocab_size)?;
    Ok((out, stats))
}

/// The K-best renormalization variant: every eligible hypothesis becomes a
/// training pair, weighted by its share of the teacher's K-best mass. The
/// corpus grows by up to a factor of the beam width.
pub fn generate_seq_kd_renorm_corpus(
    teacher: &ModelParams,
    corpus: &ParallelCorpus,
    beam: usize,
) -> Result<(ParallelCorpus, Vec<f64>, DistillDataStats)> {
    let srcs: Vec<Vec<u32>> = corpus.sources().map(|s| s.to_vec()).collect();
    let lists = beam_search_corpus(teacher, &srcs, &decode_cfg(beam))?;
    let mut stats = DistillDataStats::default();
    let mut pairs = Vec::new();
    let mut weights = Vec::new();
    for (list, (src, gold)) in lists.iter().zip(corpus.pairs()) {
        let keep = eligible(list);
        if keep.is_empty() {
            stats.fallback_gold += 1;
            pairs.push((src.clone(), gold.clone()));
            weights.push(1.0);
            continue;
        }
        if !keep[0].is_finished() {
            stats.fallback_truncated += 1;
        }
        let max = keep.iter().map(|h| h.logprob).fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = keep.iter().map(|h| (h.logprob - max).exp()).collect();
        let total: f64 = unnorm.iter().sum();
        for (h, w) in keep.iter().zip(unnorm) {
            pairs.push((src.clone(), h.content_tokens().to_vec()));
            weights.push(w / total);
        }
    }
    let out = ParallelCorpus::new(pairs, teacher.cfg.src_vocab_size, teacher.cfg.tgt_vocab_size)?;
    Ok((out, weights, stats))
}

/// The K-best hypothesis most similar to the gold target (smoothed
/// sentence BLEU), ties broken by higher log-probability, then by token
/// order. Always a member of the list.
pub fn select_seq_inter<'a>(kbest: &'a KBestList, gold: &[u32]) -> Result<&'a Hypothesis> {
    if kbest.hypotheses.is_empty() {
        return Err(Error::Validation("cannot select from an empty K-best list".into()));
    }
    let candidates = eligible(kbest);
    let pool: Vec<&Hypothesis> = if candidates.is_empty() {
        kbest.hypotheses.iter().collect()
    } else {
        candidates
    };
    let mut best = pool[0];
    let mut best_sim = smoothed_sentence_bleu(best.content_tokens(), gold)?.score;
    for &h in &pool[1..] {
        let sim = smoothed_sentence_bleu(h.content_tokens(), gold)?.score;
        let better = sim > best_sim
            || (sim == best_sim
                && (h.logprob > best.logprob
                    || (h.logprob == best.logprob && h.tokens < best.tokens)));
        if better {
            best = h;
            best_sim = sim;
        }
    }
    Ok(best)
}

/// Replaces targets with the most-gold-like beam hypothesis over the first
/// `ceil(fraction * N)` sentences; the output corpus is that prefix.
pub fn generate_seq_inter_corpus(
    teacher: &ModelParams,
    corpus: &ParallelCorpus,
    beam: usize,
    fraction: f64,
) -> Result<(ParallelCorpus, DistillDataStats)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = ((fraction * corpus.len() as f64).ceil() as usize).min(corpus.len());
    let head = corpus.head(n);
    let srcs: Vec<Vec<u32>> = head.sources().map(|s| s.to_vec()).collect();
    let lists = beam_search_corpus(teacher, &srcs, &decode_cfg(beam))?;
    let mut stats = DistillDataStats::default();
    let mut pairs = Vec::with_capacity(n);
    let mut sim_selected_sum = 0.0;
    let mut sim_top_sum = 0.0;
    for (list, (src, gold)) in lists.iter().zip(head.pairs()) {
        let pool = eligible(list);
        let target = if pool.is_empty() {
            stats.fallback_gold += 1;
            sim_selected_sum += 1.0;
            sim_top_sum += 1.0;
            gold.clone()
        } else {
            if !pool[0].is_finished() {
                stats.fallback_truncated += 1;
            }
            let selected = select_seq_inter(list, gold)?;
            sim_selected_sum += smoothed_sentence_bleu(selected.content_tokens(), gold)?.score;
            sim_top_sum += smoothed_sentence_bleu(pool[0].content_tokens(), gold)?.score;
            selected.content_tokens().to_vec()
        };
        pairs.push((src.clone(), target));
    }
    stats.mean_sim_selected = sim_selected_sum / n as f64;
    stats.mean_sim_top = sim_top_sum / n as f64;
    let out = ParallelCorpus::new(pairs, teacher.cfg.src_vocab_size, teacher.cfg.tgt_vocab_size)?;
    Ok((out, stats))
}

/// Evaluation columns reported for every trained model.
#[derive(Debug, Clone)]
pub struct ModelEval {
    pub bleu_k1: f64,
    pub bleu_k5: f64,
    pub ppl: f64,
    pub mode_mass: f64,
    pub params: usize,
}

pub fn evaluate_model(params: &ModelParams, test: &ParallelCorpus) -> Result<ModelEval> {
    let srcs: Vec<Vec<u32>> = test.sources().map(|s| s.to_vec()).collect();
    let refs: Vec<Vec<u32>> = test.targets().map(|t| t.to_vec()).collect();
    let hyp1: Vec<Vec<u32>> = translate_corpus(params, &srcs, &decode_cfg(1))?
        .into_iter()
        .map(|(t, _)| t)
        .collect();
    let hyp5: Vec<Vec<u32>> = translate_corpus(params, &srcs, &decode_cfg(5))?
        .into_iter()
        .map(|(t, _)| t)
        .collect();
    Ok(ModelEval {
        bleu_k1: crate::bleu::corpus_bleu(&hyp1, &refs)?.score,
        bleu_k5: crate::bleu::corpus_bleu(&hyp5, &refs)?.score,
        ppl: perplexity(params, test)?,
        mode_mass: mode_mass(params, test, &decode_cfg(1))?,
        params: params.param_count(),
    })
}

/// Outcome of one recipe run.
#[derive(Debug, Clone)]
pub struct RecipeReport {
    pub label: String,
    pub eval: ModelEval,
    pub data_stats: Option<DistillDataStats>,
    pub train_log: TrainLog,
}

impl RecipeReport {
    /// Machine-readable `metric<TAB>value` lines.
    pub fn tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "label\t{}", self.label);
        let _ = writeln!(out, "bleu_k1\t{}", self.eval.bleu_k1);
        let _ = writeln!(out, "bleu_k5\t{}", self.eval.bleu_k5);
        let _ = writeln!(out, "ppl\t{}", self.eval.ppl);
        let _ = writeln!(out, "mode_mass\t{}", self.eval.mode_mass);
        let _ = writeln!(out, "params\t{}", self.eval.params);
        out
    }

    pub fn rendered(&self) -> String {
        format!(
            "{:<28} BLEU_K1 {:>6.2}  BLEU_K5 {:>6.2}  PPL {:>8.2}  p(mode) {:>6.2}%  params {}",
            self.label,
            self.eval.bleu_k1,
            self.eval.bleu_k5,
            self.eval.ppl,
            100.0 * self.eval.mode_mass,
            self.eval.params
        )
    }
}

/// Pre-generated corpora shared across recipe runs.
pub struct DistillData<'a> {
    pub train: &'a ParallelCorpus,
    pub dev: &'a ParallelCorpus,
    /// Sequence-level training data and optional per-pair weights.
    pub seq_kd: Option<(&'a ParallelCorpus, Option<&'a [f64]>)>,
    pub seq_inter: Option<&'a ParallelCorpus>,
}

/// Trains a student under a recipe with already-generated data:
/// sequence-level data (if enabled) replaces the base corpus, the word
/// mixture loss (if enabled) replaces plain NLL, and fine-tuning toward
/// the most-gold-like beam data (if enabled) runs last with the same loss
/// family.
pub fn train_student(
    recipe: &DistillRecipe,
    teacher: &ModelParams,
    student_cfg: &ModelConfig,
    data: &DistillData<'_>,
    tcfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    recipe.validate()?;
    if teacher.cfg.src_vocab_size != student_cfg.src_vocab_size
        || teacher.cfg.tgt_vocab_size != student_cfg.tgt_vocab_size
    {
        return Err(Error::Validation(
            "teacher and student must share vocabularies".into(),
        ));
    }
    let loss = if recipe.use_word_kd {
        LossKind::WordKd {
            teacher,
            alpha: recipe.alpha,
            tau: recipe.tau,
        }
    } else {
        LossKind::Nll
    };
    let (base_corpus, base_weights) = if recipe.use_seq_kd {
        let (corpus, weights) = data
            .seq_kd
            .ok_or_else(|| Error::Validation("recipe needs sequence-level data".into()))?;
        (corpus, weights)
    } else {
        (data.train, None)
    };
    let student = init_params_with_range(student_cfg, tcfg.seed, tcfg.init_range)?;
    let (mut student, mut log) =
        train_weighted(student, base_corpus, base_weights, data.dev, &loss, tcfg)?;
    if recipe.use_seq_inter {
        let corpus = data
            .seq_inter
            .ok_or_else(|| Error::Validation("recipe needs interpolation data".into()))?;
        let (tuned, tune_log) = fine_tune(
            student,
            corpus,
            data.dev,
            &loss,
            recipe.fine_tune_lr,
            mix(tcfg.seed, 0x5e91),
        )?;
        student = tuned;
        log.epochs.extend(tune_log.epochs);
        log.best_dev_ppl = tune_log.best_dev_ppl.min(log.best_dev_ppl);
    }
    Ok((student, log))
}

/// End-to-end recipe run: generates whatever teacher-side data the recipe
/// needs, trains the student, and evaluates it on the test set.
pub fn run_recipe(
    recipe: &DistillRecipe,
    teacher: &ModelParams,
    student_cfg: &ModelConfig,
    train_corpus: &ParallelCorpus,
    dev: &ParallelCorpus,
    test: &ParallelCorpus,
    tcfg: &TrainConfig,
) -> Result<(ModelParams, RecipeReport)> {
    recipe.validate()?;
    let mut stats = None;
    let mut seq_kd_owned: Option<(ParallelCorpus, Option<Vec<f64>>)> = None;
    if recipe.use_seq_kd {
        let (corpus, weights, s) = match recipe.seq_kd_mode {
            SeqKdMode::Beam => {
                let (c, s) = generate_seq_kd_corpus(teacher, train_corpus, recipe.seq_kd_beam)?;
                (c, None, s)
            }
            SeqKdMode::Sample => {
                let (c, s) =
                    generate_seq_kd_sampled_corpus(teacher, train_corpus, mix(tcfg.seed, 0x5a))?;
                (c, None, s)
            }
            SeqKdMode::RenormalizedKBest => {
                let (c, w, s) =
                    generate_seq_kd_renorm_corpus(teacher, train_corpus, recipe.seq_kd_beam)?;
                (c, Some(w), s)
            }
        };
        stats = Some(s);
        seq_kd_owned = Some((corpus, weights));
    }
    let mut seq_inter_owned = None;
    if recipe.use_seq_inter {
        let (corpus, s) = generate_seq_inter_corpus(
            teacher,
            train_corpus,
            recipe.seq_inter_beam,
            recipe.seq_inter_fraction,
        )?;
        if stats.is_none() {
            stats = Some(s);
        }
        seq_inter_owned = Some(corpus);
    }
    let data = DistillData {
        train: train_corpus,
        dev,
        seq_kd: seq_kd_owned.as_ref().map(|(c, w)| (c, w.as_deref())),
        seq_inter: seq_inter_owned.as_ref(),
    };
    let (student, train_log) = train_student(recipe, teacher, student_cfg, &data, tcfg)?;
    let eval = evaluate_model(&student, test)?;
    let report = RecipeReport {
        label: recipe.label(),
        eval,
        data_stats: stats,
        train_log,
    };
    Ok((student, report))
}
