//! Back-translation: turning monolingual text into synthetic parallel data,
//! filtering it, mixing it with real data and running finetuning rounds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::corpus::io::corpus_set;
use crate::corpus::{
    sample_mixture, Corpus, DevSet, Direction, LanguageId, MixtureSpec, MonoCorpus, Origin, SentencePair,
    SourceRef,
};
use crate::decoding::{DecodeStrategy, NmtSystem, StopRule, Translator};
use crate::error::{Error, Result, ResultExt};
use crate::evaluation::{distinct_n, score_matrix, ScoreMatrix};
use crate::model::{ModelConfig, ModelParams};
use crate::rng;
use crate::tokenizer::BpeVocab;
use crate::training::{select_model, train, CheckpointStore, Selection, TrainConfig, TrainData, TrainOutcome};

/// Acceptance thresholds for synthetic pairs, both exclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticFilterConfig {
    /// Maximum length in whitespace words (exclusive).
    pub max_len: usize,
    /// Maximum longer/shorter length ratio (exclusive).
    pub max_ratio: f64,
}

impl Default for SyntheticFilterConfig {
    fn default() -> Self {
        SyntheticFilterConfig {
            max_len: 250,
            max_ratio: 1.8,
        }
    }
}

impl SyntheticFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len < 1 {
            return Err(Error::config("filter max_len must be at least 1"));
        }
        if !(self.max_ratio > 1.0) {
            return Err(Error::config("filter max_ratio must exceed 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    Length,
    Ratio,
}

/// Result of filtering: accepted pairs in input order, rejected pairs with
/// their reason, and the tally.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub accepted: Vec<SentencePair>,
    pub rejected: Vec<(SentencePair, RejectReason)>,
    pub rejected_length: usize,
    pub rejected_ratio: usize,
}

/// Classifies one pair; `None` means accepted. Length is checked first.
pub fn check_pair(src_words: usize, tgt_words: usize, cfg: &SyntheticFilterConfig) -> Option<RejectReason> {
    let (lo, hi) = (src_words.min(tgt_words), src_words.max(tgt_words));
    if hi >= cfg.max_len {
        return Some(RejectReason::Length);
    }
    if lo == 0 || hi as f64 / lo as f64 >= cfg.max_ratio {
        return Some(RejectReason::Ratio);
    }
    None
}

pub fn filter_synthetic(pairs: &[SentencePair], cfg: &SyntheticFilterConfig) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for p in pairs {
        let ls = p.src.split_whitespace().count();
        let lt = p.tgt.split_whitespace().count();
        match check_pair(ls, lt, cfg) {
            None => out.accepted.push(p.clone()),
            Some(reason) => {
                match reason {
                    RejectReason::Length => out.rejected_length += 1,
                    RejectReason::Ratio => out.rejected_ratio += 1,
                }
                out.rejected.push((p.clone(), reason));
            }
        }
    }
    out
}

/// Synthetic pairs for `direction` from monolingual text in its target
/// language: each sentence becomes a target whose source is the
/// generator's translation into the direction's source language.
/// Generations with no words are dropped; compare the result length with
/// the input to count them.
pub fn back_translate(
    generator: &dyn Translator,
    mono: &MonoCorpus,
    direction: &Direction,
    strategy: DecodeStrategy,
    round: u32,
    seed: u64,
) -> Result<Vec<SentencePair>> {
    if mono.lang != direction.tgt {
        return Err(Error::config(format!(
            "back-translation for {direction} needs {} text, got {}",
            direction.tgt, mono.lang
        )));
    }
    if !generator.supports(&direction.tgt, &direction.src) {
        return Err(Error::config(format!(
            "generator cannot translate {}-{} needed for {direction}",
            direction.tgt, direction.src
        )));
    }
    if mono.is_empty() {
        return Err(Error::invalid(format!("no monolingual {} text to back-translate", mono.lang)));
    }
    let stream_seed = rng::mix(seed, rng::label(&direction.to_string()));
    let origin = Origin::Synthetic { strategy, round };
    let mut out = Vec::with_capacity(mono.len());
    for (i, sentence) in mono.sentences().iter().enumerate() {
        let src = generator
            .translate(sentence, &direction.tgt, &direction.src, strategy, stream_seed, i as u64)
            .with_context(|| format!("back-translating {} line {}", mono.lang, i + 1))?;
        if src.split_whitespace().next().is_none() {
            continue;
        }
        out.push(SentencePair::new(
            direction.src.clone(),
            direction.tgt.clone(),
            src,
            sentence.clone(),
            origin,
        )?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BtRoundConfig {
    pub round: u32,
    pub strategy: DecodeStrategy,
    /// Monolingual sentences to back-translate per target language.
    pub mono_caps: BTreeMap<LanguageId, usize>,
    pub filter: SyntheticFilterConfig,
    /// Parallel to synthetic ratio; synthetic pairs per direction are capped
    /// at `floor(parallel / ratio)`.
    pub mix_ratio: f64,
    pub seed: u64,
}

impl BtRoundConfig {
    pub fn new(round: u32, strategy: DecodeStrategy) -> Self {
        BtRoundConfig {
            round,
            strategy,
            mono_caps: BTreeMap::new(),
            filter: SyntheticFilterConfig::default(),
            mix_ratio: 5.0,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.round < 1 {
            return Err(Error::config("round numbers start at 1"));
        }
        self.strategy.validate().map_err(|e| Error::config(e.to_string()))?;
        self.filter.validate()?;
        if !(self.mix_ratio > 0.0) || !self.mix_ratio.is_finite() {
            return Err(Error::config("mix_ratio must be positive"));
        }
        Ok(())
    }
}

/// Per-direction bookkeeping for a round.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DirectionStats {
    pub parallel: usize,
    pub mono_used: usize,
    pub generated: usize,
    pub accepted: usize,
    pub rejected_length: usize,
    pub rejected_ratio: usize,
    /// Synthetic pairs admitted to the mixture after the ratio cap.
    pub mixed: usize,
    /// distinct-2 of the synthetic sources, when there are enough words.
    pub distinct2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: u32,
    pub strategy: DecodeStrategy,
    pub directions: BTreeMap<Direction, DirectionStats>,
    pub mixture_size: usize,
    pub dev_before: Option<ScoreMatrix>,
    pub dev_after: ScoreMatrix,
}

impl RoundReport {
    /// Structured `key = value` text with one section per direction.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "[round]\nround = {}\nstrategy = {}\nmixture_size = {}", self.round, self.strategy, self.mixture_size).unwrap();
        for (d, s) in &self.directions {
            writeln!(out, "\n[direction.{d}]").unwrap();
            writeln!(out, "parallel = {}", s.parallel).unwrap();
            writeln!(out, "mono_used = {}", s.mono_used).unwrap();
            writeln!(out, "generated = {}", s.generated).unwrap();
            writeln!(out, "accepted = {}", s.accepted).unwrap();
            writeln!(out, "rejected_length = {}", s.rejected_length).unwrap();
            writeln!(out, "rejected_ratio = {}", s.rejected_ratio).unwrap();
            writeln!(out, "mixed = {}", s.mixed).unwrap();
            if let Some(d2) = s.distinct2 {
                writeln!(out, "distinct2 = {d2:.6}").unwrap();
            }
        }
        writeln!(out, "\n[dev]").unwrap();
        for (d, after) in &self.dev_after.scores {
            let before = self.dev_before.as_ref().and_then(|m| m.get(d));
            match before {
                Some(b) => writeln!(out, "{d} = {b:.4} -> {after:.4}").unwrap(),
                None => writeln!(out, "{d} = {after:.4}").unwrap(),
            }
        }
        writeln!(out, "mean = {:.4}", self.dev_after.mean()).unwrap();
        out
    }
}

/// How finished models are scored on the dev set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub strategy: DecodeStrategy,
    pub max_sentences: usize,
    pub directions: Vec<Direction>,
    pub seed: u64,
}

/// Everything a round needs besides its own configuration.
pub struct RoundInputs<'a> {
    pub vocab: &'a BpeVocab,
    pub model_config: &'a ModelConfig,
    /// Translates from each mono language back into the source languages.
    pub generator: &'a dyn Translator,
    /// The model finetuned by this round.
    pub previous: &'a ModelParams<f32>,
    pub parallel: &'a [Corpus],
    pub mono: &'a [MonoCorpus],
    pub dev: &'a DevSet,
    pub train: &'a TrainConfig,
    pub temperature: f64,
    pub selection: Selection,
    pub eval: EvalSettings,
    pub dev_before: Option<ScoreMatrix>,
}

pub struct RoundOutcome {
    pub mixture: MixtureSpec,
    pub corpora: BTreeMap<String, Corpus>,
    pub training: TrainOutcome,
    pub model: ModelParams<f32>,
    pub report: RoundReport,
}

/// Builds the parallel-plus-synthetic mixture for a round. Returns the
/// spec, the named corpora it refers to and per-direction statistics.
pub fn build_round_mixture(
    cfg: &BtRoundConfig,
    generator: &dyn Translator,
    parallel: &[Corpus],
    mono: &[MonoCorpus],
    temperature: f64,
) -> Result<(MixtureSpec, BTreeMap<String, Corpus>, BTreeMap<Direction, DirectionStats>)> {
    cfg.validate()?;
    let mut corpora = corpus_set(parallel);
    let mut spec = MixtureSpec::new(temperature, 0, rng::mix(cfg.seed, cfg.round as u64));
    let mut stats: BTreeMap<Direction, DirectionStats> = BTreeMap::new();
    for (name, c) in &corpora {
        if !c.is_empty() {
            spec.add(c.direction.clone(), SourceRef::whole(name.clone()));
            stats.entry(c.direction.clone()).or_default().parallel = c.len();
        }
    }
    for (lang, &cap) in &cfg.mono_caps {
        if cap == 0 {
            continue;
        }
        let m = mono
            .iter()
            .find(|m| &m.lang == lang)
            .ok_or_else(|| Error::config(format!("round {}: no monolingual corpus for {lang}", cfg.round)))?;
        if cap > m.len() {
            return Err(Error::config(format!(
                "round {}: mono cap {cap} for {lang} exceeds the {} available sentences",
                cfg.round,
                m.len()
            )));
        }
        let text = m.truncated(cap);
        let targets: Vec<Direction> = stats.keys().filter(|d| &d.tgt == lang).cloned().collect();
        for dir in targets {
            let pairs = back_translate(generator, &text, &dir, cfg.strategy, cfg.round, cfg.seed)
                .with_context(|| format!("round {}", cfg.round))?;
            let filtered = filter_synthetic(&pairs, &cfg.filter);
            let s = stats.get_mut(&dir).unwrap();
            s.mono_used = cap;
            s.generated = cap;
            s.accepted = filtered.accepted.len();
            s.rejected_length = filtered.rejected_length;
            s.rejected_ratio = filtered.rejected_ratio + (cap - pairs.len());
            let srcs: Vec<String> = filtered.accepted.iter().map(|p| p.src.clone()).collect();
            s.distinct2 = distinct_n(&srcs, 2).ok();
            let allowed = (s.parallel as f64 / cfg.mix_ratio).floor() as usize;
            s.mixed = allowed.min(filtered.accepted.len());
            if s.mixed > 0 {
                let name = format!("synthetic.r{}.{dir}", cfg.round);
                corpora.insert(name.clone(), Corpus::from_pairs(dir.clone(), filtered.accepted)?);
                spec.add(dir.clone(), SourceRef::capped(name, s.mixed));
            }
        }
    }
    let counts = spec.counts(&corpora)?;
    spec.total_size = counts.values().sum::<u64>() as usize;
    Ok((spec, corpora, stats))
}

/// Runs one round: back-translate, filter, mix, finetune from the previous
/// model and score on the dev set.
pub fn run_bt_round(
    cfg: &BtRoundConfig,
    inputs: &RoundInputs<'_>,
    store: Option<&mut CheckpointStore>,
) -> Result<RoundOutcome> {
    let round = cfg.round;
    let (mixture, corpora, stats) =
        build_round_mixture(cfg, inputs.generator, inputs.parallel, inputs.mono, inputs.temperature)?;
    let pairs = sample_mixture(&mixture, &corpora).with_context(|| format!("round {round} mixture"))?;
    let data = TrainData {
        vocab: inputs.vocab,
        pairs: &pairs,
        dev: inputs.dev,
        valid_directions: inputs.eval.directions.clone(),
    };
    let training = train(inputs.model_config, inputs.previous.clone(), &data, inputs.train, store)
        .with_context(|| format!("round {round} training"))?;
    let model = select_model(&training, inputs.selection)?;
    let dev_after = evaluate_model(inputs.model_config, &model, inputs.vocab, inputs.dev, &inputs.eval)
        .with_context(|| format!("round {round} evaluation"))?;
    let report = RoundReport {
        round,
        strategy: cfg.strategy,
        directions: stats,
        mixture_size: pairs.len(),
        dev_before: inputs.dev_before.clone(),
        dev_after,
    };
    Ok(RoundOutcome {
        mixture,
        corpora,
        training,
        model,
        report,
    })
}

/// Scores a model on (a prefix of) the dev set.
pub fn evaluate_model(
    config: &ModelConfig,
    params: &ModelParams<f32>,
    vocab: &BpeVocab,
    dev: &DevSet,
    eval: &EvalSettings,
) -> Result<ScoreMatrix> {
    let system = NmtSystem::new(config, params, vocab, StopRule::default())?;
    score_matrix(&system, vocab, &dev.truncated(eval.max_sentences), &eval.directions, eval.strategy, eval.seed)
}
