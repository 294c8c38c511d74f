//! Optimisation: Adam with decoupled weight decay, the warmup plus inverse
//! square root schedule, token-budgeted batching and the training loop.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::corpus::{tag_target, DevSet, Direction, SentencePair};
use crate::decoding::{DecodeStrategy, NmtSystem, StopRule};
use crate::error::{Error, Result, ResultExt};
use crate::evaluation::score_matrix;
use crate::kv::Section;
use crate::model::transformer::loss_and_grad_counted;
use crate::model::{Checkpoint, Example, ModelConfig, ModelParams, Scalar};
use crate::rng;
use crate::tokenizer::{bpe_encode, BpeVocab, TokenId};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Budget of target tokens per batch.
    pub tokens_per_batch: usize,
    pub max_steps: u64,
    /// Optional cap on passes over the data; training stops at whichever
    /// of `max_steps` and `max_epochs` comes first.
    pub max_epochs: Option<u64>,
    pub validate_every: u64,
    pub keep_last_k_checkpoints: usize,
    pub seed: u64,
    /// Dev sentences per direction used for validation scores.
    pub valid_max_sentences: usize,
    /// Beam width used for validation decoding.
    pub valid_beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta1: 0.90,
            beta2: 0.98,
            adam_epsilon: 1e-8,
            weight_decay: 0.0001,
            label_smoothing: 0.1,
            peak_lr: 0.0003,
            warmup_steps: 200,
            tokens_per_batch: 2048,
            max_steps: 1000,
            max_epochs: None,
            validate_every: 200,
            keep_last_k_checkpoints: 15,
            seed: 1,
            valid_max_sentences: 100,
            valid_beam: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::config("beta1 and beta2 must lie strictly between 0 and 1"));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::config("adam_epsilon must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing must lie in [0, 1)"));
        }
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            return Err(Error::config("peak_lr must be positive"));
        }
        if self.warmup_steps == 0 {
            return Err(Error::config("warmup_steps must be at least 1"));
        }
        if self.tokens_per_batch == 0 {
            return Err(Error::config("tokens_per_batch must be positive"));
        }
        if self.validate_every == 0 {
            return Err(Error::config("validate_every must be positive"));
        }
        if self.keep_last_k_checkpoints == 0 {
            return Err(Error::config("keep_last_k_checkpoints must be positive"));
        }
        if self.valid_beam == 0 {
            return Err(Error::config("valid_beam must be positive"));
        }
        Ok(())
    }

    /// Reads a `[train]` section; missing keys keep their defaults.
    pub fn from_section(section: &Section) -> Result<Self> {
        section.check_keys(&[
            "beta1",
            "beta2",
            "adam_epsilon",
            "weight_decay",
            "label_smoothing",
            "peak_lr",
            "warmup_steps",
            "tokens_per_batch",
            "max_steps",
            "max_epochs",
            "validate_every",
            "keep_last_k",
            "seed",
            "valid_max_sentences",
            "valid_beam",
        ])?;
        let d = TrainConfig::default();
        let max_epochs = section.parse::<u64>("max_epochs")?;
        let cfg = TrainConfig {
            beta1: section.parse_or("beta1", d.beta1)?,
            beta2: section.parse_or("beta2", d.beta2)?,
            adam_epsilon: section.parse_or("adam_epsilon", d.adam_epsilon)?,
            weight_decay: section.parse_or("weight_decay", d.weight_decay)?,
            label_smoothing: section.parse_or("label_smoothing", d.label_smoothing)?,
            peak_lr: section.parse_or("peak_lr", d.peak_lr)?,
            warmup_steps: section.parse_or("warmup_steps", d.warmup_steps)?,
            tokens_per_batch: section.parse_or("tokens_per_batch", d.tokens_per_batch)?,
            max_steps: section.parse_or("max_steps", d.max_steps)?,
            max_epochs,
            validate_every: section.parse_or("validate_every", d.validate_every)?,
            keep_last_k_checkpoints: section.parse_or("keep_last_k", d.keep_last_k_checkpoints)?,
            seed: section.parse_or("seed", d.seed)?,
            valid_max_sentences: section.parse_or("valid_max_sentences", d.valid_max_sentences)?,
            valid_beam: section.parse_or("valid_beam", d.valid_beam)?,
        };
        cfg.validate().map_err(|e| section.error(e.to_string()))?;
        Ok(cfg)
    }
}

/// `peak_lr * min(step / warmup, sqrt(warmup / step))`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let s = step.max(1) as f64;
    let w = cfg.warmup_steps.max(1) as f64;
    cfg.peak_lr * (s / w).min((w / s).sqrt())
}

/// Adam step counter and moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F: Scalar = f32> {
    pub t: u64,
    pub m: ModelParams<F>,
    pub v: ModelParams<F>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        AdamState {
            t: 0,
            m: ModelParams::zeros_like(params),
            v: ModelParams::zeros_like(params),
        }
    }
}

/// One bias-corrected Adam update at `lr_at(t + 1)`, with weight decay
/// applied to the parameters before the Adam delta.
pub fn adam_step<F: Scalar>(
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
    state: &mut AdamState<F>,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.tensors.len() != grads.tensors.len() || params.tensors.len() != state.m.tensors.len() {
        return Err(Error::invalid("adam_step: parameter, gradient and state layouts differ"));
    }
    let step = state.t + 1;
    for (p, g) in params.tensors.iter().zip(&grads.tensors) {
        if p.shape != g.shape || p.name != g.name {
            return Err(Error::invalid(format!("adam_step: gradient for {} has the wrong shape", p.name)));
        }
        if g.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Training {
                step,
                tensor: g.name.clone(),
                message: "non-finite gradient".into(),
            });
        }
    }
    state.t = step;
    let lr = lr_at(step, cfg);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(step.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - b2.powi(step.min(i32::MAX as u64) as i32);
    let decay = F::of(1.0 - lr * cfg.weight_decay);
    let (fb1, fb2) = (F::of(b1), F::of(b2));
    let (ob1, ob2) = (F::of(1.0 - b1), F::of(1.0 - b2));
    let step_size = F::of(lr / c1);
    let inv_c2 = F::of(1.0 / c2);
    let eps = F::of(cfg.adam_epsilon);
    for ((p, g), (m, v)) in params
        .tensors
        .iter_mut()
        .zip(&grads.tensors)
        .zip(state.m.tensors.iter_mut().zip(state.v.tensors.iter_mut()))
    {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = fb1 * m.data[i] + ob1 * gi;
            v.data[i] = fb2 * v.data[i] + ob2 * gi * gi;
            let vhat = v.data[i] * inv_c2;
            p.data[i] = p.data[i] * decay - step_size * m.data[i] / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Encodes a pair for training: source ids, and `<s> tag target </s>`.
pub fn encode_pair(vocab: &BpeVocab, pair: &SentencePair, max_positions: usize) -> Result<Option<Example>> {
    let tagged = tag_target(pair)?;
    let mut src = bpe_encode(vocab, &pair.src);
    src.truncate(max_positions);
    let mut tgt = vec![vocab.bos()];
    tgt.extend(bpe_encode(vocab, &tagged.tgt));
    tgt.truncate(max_positions);
    tgt.push(vocab.eos());
    if src.is_empty() {
        return Ok(None);
    }
    Ok(Some(Example { src, tgt }))
}

/// Groups examples into batches of at most `budget` target tokens (a single
/// longer example forms its own batch). Examples are shuffled, sorted by
/// length so batches hold similar lengths, and the batch order shuffled.
pub fn bucket_batches(examples: &[Example], budget: usize, rng: &mut rng::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| (examples[i].tgt.len(), examples[i].src.len()));
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut tokens = 0;
    for i in order {
        let n = examples[i].tgt.len() - 1;
        if !cur.is_empty() && tokens + n > budget {
            batches.push(std::mem::take(&mut cur));
            tokens = 0;
        }
        cur.push(i);
        tokens += n;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(rng);
    batches
}

/// One validation event.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    /// Mean training loss over the steps since the previous event.
    pub train_loss: f64,
    pub dev_spbleu: f64,
}

/// Log rows as tab-separated text with a header line.
pub fn log_tsv(rows: &[LogRow]) -> String {
    let mut out = String::from("step\tlr\ttrain_loss\tdev_spbleu\n");
    for r in rows {
        writeln!(out, "{}\t{:.6e}\t{:.6}\t{:.4}", r.step, r.lr, r.train_loss, r.dev_spbleu).unwrap();
    }
    out
}

/// Keeps the most recent checkpoints on disk, deleting older ones.
#[derive(Debug)]
pub struct CheckpointStore {
    dir: PathBuf,
    keep: usize,
    paths: VecDeque<PathBuf>,
}

impl CheckpointStore {
    pub fn new(dir: impl Into<PathBuf>, keep: usize) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(CheckpointStore {
            dir,
            keep: keep.max(1),
            paths: VecDeque::new(),
        })
    }

    pub fn path_for(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step{step:08}.ckpt"))
    }

    pub fn push(&mut self, ckpt: &Checkpoint) -> Result<PathBuf> {
        let path = self.path_for(ckpt.step);
        ckpt.save(&path)?;
        self.paths.push_back(path.clone());
        while self.paths.len() > self.keep {
            let old = self.paths.pop_front().unwrap();
            std::fs::remove_file(&old).with_context(|| format!("removing {}", old.display()))?;
        }
        Ok(path)
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.paths.iter().cloned().collect()
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

/// What a training run returns.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub optimizer: AdamState<f32>,
    /// The retained checkpoints, oldest first.
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<LogRow>,
    pub steps: u64,
    pub epochs_completed: u64,
    pub final_loss: Option<f64>,
}

impl TrainOutcome {
    /// `key = value` run summary.
    pub fn summary(&self) -> String {
        let mut out = String::from("[summary]\n");
        writeln!(out, "steps = {}", self.steps).unwrap();
        writeln!(out, "epochs_completed = {}", self.epochs_completed).unwrap();
        match self.final_loss {
            Some(l) => writeln!(out, "final_loss = {l:.6}").unwrap(),
            None => writeln!(out, "final_loss = none").unwrap(),
        }
        let best = self.log.iter().map(|r| r.dev_spbleu).fold(f64::NAN, f64::max);
        writeln!(out, "best_dev_spbleu = {best:.4}").unwrap();
        if let Some(last) = self.log.last() {
            writeln!(out, "last_dev_spbleu = {:.4}", last.dev_spbleu).unwrap();
        }
        writeln!(out, "checkpoints = {}", self.checkpoints.len()).unwrap();
        out
    }
}

/// Training inputs besides the hyperparameters.
pub struct TrainData<'a> {
    pub vocab: &'a BpeVocab,
    pub pairs: &'a [SentencePair],
    pub dev: &'a DevSet,
    /// Directions scored at validation; empty means those of the pairs.
    pub valid_directions: Vec<Direction>,
}

/// Trains from `init` (fresh optimizer and schedule). Every
/// `validate_every` steps, and after the final step, the model is scored on
/// the dev set and a checkpoint is appended; the last `keep_last_k` are
/// retained in the outcome and in `store` when given.
pub fn train(
    config: &ModelConfig,
    init: ModelParams<f32>,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    mut store: Option<&mut CheckpointStore>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    config.validate()?;
    init.check_config(config)?;
    if data.vocab.len() != config.vocab_size {
        return Err(Error::invalid(format!(
            "vocab of {} tokens does not match model vocab_size {}",
            data.vocab.len(),
            config.vocab_size
        )));
    }
    if data.dev.is_empty() {
        return Err(Error::config("training needs a non-empty dev set"));
    }
    let mut examples = Vec::with_capacity(data.pairs.len());
    for p in data.pairs {
        if let Some(e) = encode_pair(data.vocab, p, config.max_positions)? {
            examples.push(e);
        }
    }
    let mut params = init;
    let mut opt = AdamState::new(&params);
    let mut outcome_ckpts: VecDeque<Checkpoint> = VecDeque::new();
    let mut log = Vec::new();
    if cfg.max_steps == 0 || cfg.max_epochs == Some(0) {
        return Ok(TrainOutcome {
            params,
            optimizer: opt,
            checkpoints: Vec::new(),
            log,
            steps: 0,
            epochs_completed: 0,
            final_loss: None,
        });
    }
    if examples.is_empty() {
        return Err(Error::config("training mixture is empty"));
    }
    let mut directions = data.valid_directions.clone();
    if directions.is_empty() {
        let mut set: Vec<Direction> = data
            .pairs
            .iter()
            .filter_map(|p| Direction::new(p.src_lang.clone(), p.tgt_lang.clone()).ok())
            .collect();
        set.sort();
        set.dedup();
        directions = set;
    }
    let dev = data.dev.truncated(cfg.valid_max_sentences);
    let fingerprint = data.vocab.fingerprint();
    let mut step = 0u64;
    let mut epoch = 0u64;
    let mut loss_sum = 0.0;
    let mut loss_n = 0u64;
    let mut final_loss = None;
    'outer: loop {
        if cfg.max_epochs.is_some_and(|m| epoch >= m) {
            break;
        }
        let mut r = rng::stream(rng::mix(cfg.seed, rng::label("batches")), epoch);
        let batches = bucket_batches(&examples, cfg.tokens_per_batch, &mut r);
        for b in &batches {
            let batch: Vec<Example> = b.iter().map(|&i| examples[i].clone()).collect();
            let (loss, grads, _) =
                loss_and_grad_counted(&params, config, &batch, cfg.label_smoothing, rng::mix(cfg.seed, step + 1))
                    .with_context(|| format!("training step {}", step + 1))?;
            adam_step(&mut params, &grads, &mut opt, cfg)?;
            step += 1;
            let loss = loss as f64;
            final_loss = Some(loss);
            loss_sum += loss;
            loss_n += 1;
            let last = step == cfg.max_steps;
            if step % cfg.validate_every == 0 || last {
                let system = NmtSystem::new(config, &params, data.vocab, StopRule::default())?;
                let strategy = DecodeStrategy::Beam { size: cfg.valid_beam };
                let score = score_matrix(&system, data.vocab, &dev, &directions, strategy, cfg.seed)
                    .with_context(|| format!("validation at step {step}"))?
                    .mean();
                log::info!(
                    "step {step} lr {:.3e} loss {:.4} dev spBLEU {score:.2}",
                    lr_at(step, cfg),
                    loss_sum / loss_n as f64
                );
                log.push(LogRow {
                    step,
                    lr: lr_at(step, cfg),
                    train_loss: loss_sum / loss_n as f64,
                    dev_spbleu: score,
                });
                loss_sum = 0.0;
                loss_n = 0;
                let ckpt = Checkpoint {
                    config: config.clone(),
                    vocab_fingerprint: fingerprint,
                    step,
                    params: params.clone(),
                    optimizer: None,
                };
                if let Some(s) = store.as_deref_mut() {
                    s.push(&ckpt)?;
                }
                outcome_ckpts.push_back(ckpt);
                while outcome_ckpts.len() > cfg.keep_last_k_checkpoints {
                    outcome_ckpts.pop_front();
                }
            }
            if last {
                break 'outer;
            }
        }
        epoch += 1;
    }
    if loss_n > 0 {
        // Epoch limit reached between validation events: close the log.
        let system = NmtSystem::new(config, &params, data.vocab, StopRule::default())?;
        let strategy = DecodeStrategy::Beam { size: cfg.valid_beam };
        let score = score_matrix(&system, data.vocab, &dev, &directions, strategy, cfg.seed)?.mean();
        log.push(LogRow {
            step,
            lr: lr_at(step, cfg),
            train_loss: loss_sum / loss_n as f64,
            dev_spbleu: score,
        });
        let ckpt = Checkpoint {
            config: config.clone(),
            vocab_fingerprint: fingerprint,
            step,
            params: params.clone(),
            optimizer: None,
        };
        if let Some(s) = store.as_deref_mut() {
            s.push(&ckpt)?;
        }
        outcome_ckpts.push_back(ckpt);
        while outcome_ckpts.len() > cfg.keep_last_k_checkpoints {
            outcome_ckpts.pop_front();
        }
    }
    if let Some(last) = outcome_ckpts.back_mut() {
        last.optimizer = Some(opt.clone());
    }
    Ok(TrainOutcome {
        params,
        optimizer: opt,
        checkpoints: outcome_ckpts.into_iter().collect(),
        log,
        steps: step,
        epochs_completed: epoch,
        final_loss,
    })
}

/// Which parameters a finished run hands on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// The parameters after the final step.
    Last,
    /// The retained checkpoint with the best dev score.
    Best,
    /// Elementwise mean of the last `k` retained checkpoints.
    Average { k: usize },
}

impl std::str::FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "last" => Ok(Selection::Last),
            "best" => Ok(Selection::Best),
            other => match other.strip_prefix("average:").map(|k| k.parse::<usize>()) {
                Some(Ok(k)) if k > 0 => Ok(Selection::Average { k }),
                _ => Err(Error::config(format!(
                    "unknown model selection {other:?} (expected last, best or average:K)"
                ))),
            },
        }
    }
}

impl std::fmt::Display for Selection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Selection::Last => f.write_str("last"),
            Selection::Best => f.write_str("best"),
            Selection::Average { k } => write!(f, "average:{k}"),
        }
    }
}

/// Applies `selection` to a finished run.
pub fn select_model(outcome: &TrainOutcome, selection: Selection) -> Result<ModelParams<f32>> {
    match selection {
        Selection::Last => Ok(outcome.params.clone()),
        Selection::Best if outcome.checkpoints.is_empty() => Ok(outcome.params.clone()),
        Selection::Best => {
            let score = |step: u64| {
                outcome
                    .log
                    .iter()
                    .find(|r| r.step == step)
                    .map_or(f64::NEG_INFINITY, |r| r.dev_spbleu)
            };
            let mut best = &outcome.checkpoints[0];
            for c in &outcome.checkpoints[1..] {
                if score(c.step) >= score(best.step) {
                    best = c;
                }
            }
            Ok(best.params.clone())
        }
        Selection::Average { .. } if outcome.checkpoints.is_empty() => Ok(outcome.params.clone()),
        Selection::Average { k } => {
            crate::model::average_checkpoints(crate::model::select_last(&outcome.checkpoints, k))
        }
    }
}

/// Single tokens ids used by tests and benches to build toy batches.
pub fn toy_examples(n: usize, vocab_size: usize, seed: u64) -> Vec<Example> {
    use rand::Rng as _;
    let mut r = rng::stream(seed, 0);
    (0..n)
        .map(|_| {
            let len = r.random_range(3..9);
            let src: Vec<TokenId> = (0..len).map(|_| r.random_range(4..vocab_size as TokenId)).collect();
            let mut tgt = vec![1];
            tgt.extend(&src);
            tgt.push(2);
            Example { src, tgt }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f64) -> ModelParams<f64> {
        ModelParams {
            tensors: vec![crate::model::Tensor {
                name: "w".into(),
                shape: vec![1],
                data: vec![v],
            }],
        }
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig {
            warmup_steps: 2500,
            ..TrainConfig::default()
        };
        assert!((lr_at(2500, &cfg) - 0.0003).abs() < 1e-18);
        assert!((lr_at(10_000, &cfg) - 0.00015).abs() < 1e-18);
        assert!((lr_at(1250, &cfg) - 0.00015).abs() < 1e-18);
        let mut prev = lr_at(2500, &cfg);
        for s in 2501..2600 {
            let cur = lr_at(s, &cfg);
            assert!(cur < prev);
            prev = cur;
        }
        // Continuity at the warmup boundary.
        assert!((lr_at(2499, &cfg) - lr_at(2501, &cfg)).abs() < 1e-3 * 0.0003);
    }

    #[test]
    fn adam_zero_grads() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = scalar_params(0.7);
        let g = scalar_params(0.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        assert_eq!(p.tensors[0].data[0], 0.7);
        assert_eq!(s.t, 1);

        let cfg = TrainConfig::default();
        let mut p = scalar_params(0.7);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        let lr = lr_at(1, &cfg);
        assert!((p.tensors[0].data[0] - 0.7 * (1.0 - lr * 0.0001)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = scalar_params(0.0);
        let g = scalar_params(1.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        let lr = lr_at(1, &cfg);
        let expected = -lr / (1.0 + 1e-8);
        assert!((p.tensors[0].data[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn non_finite_gradient_is_a_training_error() {
        let cfg = TrainConfig::default();
        let mut p = scalar_params(0.0);
        let g = scalar_params(f64::NAN);
        let mut s = AdamState::new(&p);
        match adam_step(&mut p, &g, &mut s, &cfg) {
            Err(Error::Training { step, tensor, .. }) => {
                assert_eq!(step, 1);
                assert_eq!(tensor, "w");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.t, 0);
    }

    #[test]
    fn batches_cover_every_example_once_within_budget() {
        let ex = toy_examples(200, 30, 4);
        let mut r = rng::stream(0, 0);
        let batches = bucket_batches(&ex, 64, &mut r);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, (0..200).collect::<Vec<_>>());
        for b in &batches {
            let tokens: usize = b.iter().map(|&i| ex[i].tgt.len() - 1).sum();
            assert!(tokens <= 64 || b.len() == 1);
        }
    }

    #[test]
    fn store_keeps_last_k() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = CheckpointStore::new(dir.path(), 15).unwrap();
        let config = ModelConfig::preset("tiny", 10).unwrap();
        let params = ModelParams::init(&config, 0).unwrap();
        for step in 1..=20 {
            store
                .push(&Checkpoint {
                    config: config.clone(),
                    vocab_fingerprint: [0; 32],
                    step,
                    params: params.clone(),
                    optimizer: None,
                })
                .unwrap();
            assert!(store.paths().len() <= 15);
        }
        let mut on_disk: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        on_disk.sort();
        let expected: Vec<String> = (6..=20).map(|s| format!("step{s:08}.ckpt")).collect();
        assert_eq!(on_disk, expected);
    }
}
