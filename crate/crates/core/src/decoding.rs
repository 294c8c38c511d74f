//! Beam search and sampling decoders.
//!
//! Decoders talk to the model through [`StepScorer`], so they can be driven
//! by the Transformer ([`NmtSystem`]) or by small hand-built distributions in
//! tests. The first generated token is always forced to the target language
//! tag; the tag step contributes no score and no rank.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::corpus::LanguageId;
use crate::error::{Error, Result, ResultExt};
use crate::model::{DecoderState, ModelConfig, ModelParams};
use crate::rng;
use crate::tokenizer::{bpe_decode, bpe_encode, BpeVocab, TokenId};

/// How target sentences are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DecodeStrategy {
    Beam { size: usize },
    TopK { k: usize },
    Unconstrained,
}

impl DecodeStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DecodeStrategy::Beam { size: 0 } => Err(Error::invalid("beam size must be at least 1")),
            DecodeStrategy::TopK { k: 0 } => Err(Error::invalid("top-k needs k of at least 1")),
            _ => Ok(()),
        }
    }

    pub fn is_sampling(&self) -> bool {
        !matches!(self, DecodeStrategy::Beam { .. })
    }
}

impl fmt::Display for DecodeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeStrategy::Beam { size } => write!(f, "beam:{size}"),
            DecodeStrategy::TopK { k } => write!(f, "topk:{k}"),
            DecodeStrategy::Unconstrained => write!(f, "unconstrained"),
        }
    }
}

impl FromStr for DecodeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "unconstrained" {
            return Ok(DecodeStrategy::Unconstrained);
        }
        let parsed = match s.split_once(':') {
            Some(("beam", n)) => n.parse().ok().map(|size| DecodeStrategy::Beam { size }),
            Some(("topk", n)) => n.parse().ok().map(|k| DecodeStrategy::TopK { k }),
            _ => None,
        };
        let strategy = parsed.ok_or_else(|| {
            Error::invalid(format!(
                "unknown decode strategy {s:?} (expected beam:N, topk:N or unconstrained)"
            ))
        })?;
        strategy.validate()?;
        Ok(strategy)
    }
}

/// Maximum target length as a function of the source length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub slope: f64,
    pub intercept: f64,
    pub hard_cap: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule {
            slope: 1.5,
            intercept: 20.0,
            hard_cap: 256,
        }
    }
}

impl StopRule {
    pub fn validate(&self) -> Result<()> {
        if !(self.slope > 0.0) || !(self.intercept >= 0.0) || !self.intercept.is_finite() || !self.slope.is_finite() {
            return Err(Error::invalid(format!(
                "stop rule needs slope > 0 and intercept >= 0, got {} and {}",
                self.slope, self.intercept
            )));
        }
        if self.hard_cap == 0 {
            return Err(Error::invalid("stop rule hard cap must be positive"));
        }
        Ok(())
    }
}

/// `floor(slope * l_src + intercept)`, clamped to the hard cap.
pub fn max_target_len(l_src: usize, rule: &StopRule) -> usize {
    let raw = (rule.slope * l_src as f64 + rule.intercept).floor();
    if raw >= rule.hard_cap as f64 {
        rule.hard_cap
    } else {
        raw as usize
    }
}

/// A conditional next-token distribution over target prefixes.
pub trait StepScorer {
    type State<'s>: Clone
    where
        Self: 's;

    fn vocab_size(&self) -> usize;
    fn eos(&self) -> TokenId;
    /// State with the source encoded and the `<s>` token consumed; returns
    /// the distribution for the first target position.
    fn start<'s>(&'s self, src: &[TokenId]) -> Result<(Self::State<'s>, Vec<f64>)>;
    /// Consumes `token` and returns the next-token log-probabilities.
    fn advance<'s>(&'s self, state: &mut Self::State<'s>, token: TokenId) -> Result<Vec<f64>>;
}

/// A decoded target: the forced tag followed by generated tokens, without
/// `<s>` or `</s>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    /// Sum of log-probabilities of the generated tokens (including `</s>`
    /// when present, excluding the forced tag).
    pub log_prob: f64,
    pub ended_with_eos: bool,
}

/// A sampled target plus the rank (1 = most likely) of every chosen token.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub hypothesis: Hypothesis,
    pub ranks: Vec<usize>,
}

fn check_distribution(lp: &[f64], vocab: usize) -> Result<()> {
    if lp.len() != vocab {
        return Err(Error::invalid(format!(
            "scorer returned {} log-probabilities for a vocab of {vocab}",
            lp.len()
        )));
    }
    Ok(())
}

/// Tokens ordered by decreasing log-probability, ties toward lower ids.
pub fn ranked(lp: &[f64]) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (0..lp.len() as TokenId).collect();
    ids.sort_by(|&a, &b| {
        lp[b as usize]
            .partial_cmp(&lp[a as usize])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids
}

struct Live<S> {
    tokens: Vec<TokenId>,
    score: f64,
    state: S,
    next: Vec<f64>,
}

/// Orders candidates best first: higher score, then lexicographically lower
/// token sequence (a prefix counting as lower, so shorter wins).
fn better(a: (f64, &[TokenId]), b: (f64, &[TokenId])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

/// Length-unnormalised beam search. `max_len` bounds the number of decoding
/// steps, counting the forced tag and `</s>`; a hypothesis reaching it
/// finishes without `</s>`.
pub fn beam_search<S: StepScorer>(
    scorer: &S,
    src: &[TokenId],
    size: usize,
    max_len: usize,
    forced: TokenId,
) -> Result<Hypothesis> {
    if size == 0 {
        return Err(Error::invalid("beam size must be at least 1"));
    }
    if src.is_empty() {
        return Err(Error::invalid("beam search: empty source"));
    }
    if max_len == 0 {
        return Err(Error::invalid("beam search: max length must be positive"));
    }
    let v = scorer.vocab_size();
    if forced as usize >= v {
        return Err(Error::invalid(format!("forced token {forced} outside vocab of {v}")));
    }
    let eos = scorer.eos();
    let (mut state, first) = scorer.start(src)?;
    check_distribution(&first, v)?;
    if max_len == 1 {
        return Ok(Hypothesis {
            tokens: vec![forced],
            log_prob: 0.0,
            ended_with_eos: false,
        });
    }
    let next = scorer.advance(&mut state, forced)?;
    check_distribution(&next, v)?;
    let mut live = vec![Live {
        tokens: vec![forced],
        score: 0.0,
        state,
        next,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 2..=max_len {
        let mut cands: Vec<(f64, usize, TokenId)> = Vec::with_capacity(live.len() * v);
        for (h, l) in live.iter().enumerate() {
            for (t, &lp) in l.next.iter().enumerate() {
                if lp.is_finite() {
                    cands.push((l.score + lp, h, t as TokenId));
                }
            }
        }
        // Every live prefix has the same length, so comparing the parent
        // prefix and then the new token is the lexicographic order.
        let order = |a: &(f64, usize, TokenId), b: &(f64, usize, TokenId)| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| live[a.1].tokens.cmp(&live[b.1].tokens))
                .then(a.2.cmp(&b.2))
        };
        if cands.len() > size {
            cands.select_nth_unstable_by(size - 1, order);
            cands.truncate(size);
        }
        cands.sort_by(order);
        let mut next_live = Vec::new();
        for (score, h, t) in cands {
            let mut tokens = live[h].tokens.clone();
            if t == eos {
                finished.push(Hypothesis {
                    tokens,
                    log_prob: score,
                    ended_with_eos: true,
                });
                continue;
            }
            tokens.push(t);
            if step == max_len {
                finished.push(Hypothesis {
                    tokens,
                    log_prob: score,
                    ended_with_eos: false,
                });
                continue;
            }
            let mut state = live[h].state.clone();
            let next = scorer.advance(&mut state, t)?;
            check_distribution(&next, v)?;
            next_live.push(Live {
                tokens,
                score,
                state,
                next,
            });
        }
        live = next_live;
        let best_finished = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || best_finished >= best_live {
            break;
        }
    }
    finished
        .into_iter()
        .min_by(|a, b| better((a.log_prob, &full(a, eos)), (b.log_prob, &full(b, eos))))
        .ok_or_else(|| Error::invalid("beam search produced no hypothesis"))
}

/// The decoded tokens including the trailing `</s>`, used for tie-breaks.
fn full(h: &Hypothesis, eos: TokenId) -> Vec<TokenId> {
    let mut t = h.tokens.clone();
    if h.ended_with_eos {
        t.push(eos);
    }
    t
}

/// Draws the next token from `lp` restricted to the top `k` (all when
/// `None`). Returns the token and its 1-based rank.
pub fn sample_step(lp: &[f64], k: Option<usize>, rng: &mut rng::Rng) -> Result<(TokenId, usize)> {
    let order = ranked(lp);
    let keep = match k {
        Some(0) => return Err(Error::invalid("top-k needs k of at least 1")),
        Some(k) if k > lp.len() => {
            return Err(Error::invalid(format!("top-k of {k} exceeds vocab of {}", lp.len())))
        }
        Some(k) => k,
        None => lp.len(),
    };
    let cand = &order[..keep];
    let max = lp[cand[0] as usize];
    if !max.is_finite() {
        return Err(Error::invalid("distribution has no finite log-probability"));
    }
    let weights: Vec<f64> = cand.iter().map(|&t| (lp[t as usize] - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>() * z;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return Ok((cand[i], i + 1));
        }
    }
    let last = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
    Ok((cand[last], last + 1))
}

/// Ancestral sampling with the top-k or unconstrained strategy.
pub fn sample_decode<S: StepScorer>(
    scorer: &S,
    src: &[TokenId],
    strategy: DecodeStrategy,
    max_len: usize,
    forced: TokenId,
    rng: &mut rng::Rng,
) -> Result<Sampled> {
    let k = match strategy {
        DecodeStrategy::TopK { k } => Some(k),
        DecodeStrategy::Unconstrained => None,
        DecodeStrategy::Beam { .. } => {
            return Err(Error::invalid("sample_decode needs a sampling strategy"))
        }
    };
    if src.is_empty() {
        return Err(Error::invalid("sampling: empty source"));
    }
    if max_len == 0 {
        return Err(Error::invalid("sampling: max length must be positive"));
    }
    let v = scorer.vocab_size();
    if let Some(k) = k {
        if k == 0 || k > v {
            return Err(Error::invalid(format!("top-k of {k} is invalid for vocab of {v}")));
        }
    }
    if forced as usize >= v {
        return Err(Error::invalid(format!("forced token {forced} outside vocab of {v}")));
    }
    let eos = scorer.eos();
    let (mut state, first) = scorer.start(src)?;
    check_distribution(&first, v)?;
    let mut tokens = vec![forced];
    let mut ranks = Vec::new();
    let mut log_prob = 0.0;
    let mut ended_with_eos = false;
    if max_len > 1 {
        let mut lp = scorer.advance(&mut state, forced)?;
        for step in 2..=max_len {
            check_distribution(&lp, v)?;
            let (t, rank) = sample_step(&lp, k, rng)?;
            log_prob += lp[t as usize];
            ranks.push(rank);
            if t == eos {
                ended_with_eos = true;
                break;
            }
            tokens.push(t);
            if step < max_len {
                lp = scorer.advance(&mut state, t)?;
            }
        }
    }
    Ok(Sampled {
        hypothesis: Hypothesis {
            tokens,
            log_prob,
            ended_with_eos,
        },
        ranks,
    })
}

/// Decodes with any strategy; sampling draws from `rng`.
pub fn decode<S: StepScorer>(
    scorer: &S,
    src: &[TokenId],
    strategy: DecodeStrategy,
    max_len: usize,
    forced: TokenId,
    rng: &mut rng::Rng,
) -> Result<Hypothesis> {
    strategy.validate()?;
    match strategy {
        DecodeStrategy::Beam { size } => beam_search(scorer, src, size, max_len, forced),
        _ => Ok(sample_decode(scorer, src, strategy, max_len, forced, rng)?.hypothesis),
    }
}

/// Anything that can translate sentences between languages.
pub trait Translator {
    fn supports(&self, src: &LanguageId, tgt: &LanguageId) -> bool;

    /// Translates one sentence. `seed` and `index` select the random stream
    /// for sampling strategies, so output does not depend on batching.
    fn translate(
        &self,
        text: &str,
        src: &LanguageId,
        tgt: &LanguageId,
        strategy: DecodeStrategy,
        seed: u64,
        index: u64,
    ) -> Result<String>;

    fn translate_all(
        &self,
        texts: &[String],
        src: &LanguageId,
        tgt: &LanguageId,
        strategy: DecodeStrategy,
        seed: u64,
    ) -> Result<Vec<String>> {
        if !self.supports(src, tgt) {
            return Err(Error::config(format!("translator cannot translate {src}-{tgt}")));
        }
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                self.translate(t, src, tgt, strategy, seed, i as u64)
                    .with_context(|| format!("translating line {} for {src}-{tgt}", i + 1))
            })
            .collect()
    }
}

/// Returns every sentence unchanged; useful as a degenerate generator.
#[derive(Debug, Clone, Default)]
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn supports(&self, _src: &LanguageId, _tgt: &LanguageId) -> bool {
        true
    }

    fn translate(
        &self,
        text: &str,
        _src: &LanguageId,
        _tgt: &LanguageId,
        _strategy: DecodeStrategy,
        _seed: u64,
        _index: u64,
    ) -> Result<String> {
        Ok(text.to_string())
    }
}

/// A trained model together with its vocabulary.
#[derive(Clone, Copy)]
pub struct NmtSystem<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a ModelParams<f32>,
    pub vocab: &'a BpeVocab,
    pub rule: StopRule,
}

impl<'a> NmtSystem<'a> {
    pub fn new(
        config: &'a ModelConfig,
        params: &'a ModelParams<f32>,
        vocab: &'a BpeVocab,
        rule: StopRule,
    ) -> Result<Self> {
        if vocab.len() != config.vocab_size {
            return Err(Error::invalid(format!(
                "vocab has {} tokens but the model expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        params.check_config(config)?;
        rule.validate()?;
        Ok(NmtSystem {
            config,
            params,
            vocab,
            rule,
        })
    }

    fn tag(&self, lang: &LanguageId) -> Result<TokenId> {
        self.vocab
            .lang_tag(lang)
            .ok_or_else(|| Error::invalid(format!("vocab has no tag for language {lang}")))
    }

    /// Source ids for a sentence, truncated to the model's position limit.
    pub fn encode_source(&self, text: &str) -> Vec<TokenId> {
        let mut ids = bpe_encode(self.vocab, text);
        ids.truncate(self.config.max_positions);
        ids
    }

    fn max_len(&self, src_len: usize) -> usize {
        max_target_len(src_len, &self.rule).min(self.config.max_positions).max(1)
    }

    pub fn beam_search(&self, src: &[TokenId], size: usize, forced_tag: &LanguageId) -> Result<Hypothesis> {
        let tag = self.tag(forced_tag)?;
        beam_search(self, src, size, self.max_len(src.len()), tag)
    }

    pub fn sample_decode(
        &self,
        src: &[TokenId],
        strategy: DecodeStrategy,
        forced_tag: &LanguageId,
        seed: u64,
    ) -> Result<Sampled> {
        let tag = self.tag(forced_tag)?;
        let mut r = rng::stream(seed, 0);
        sample_decode(self, src, strategy, self.max_len(src.len()), tag, &mut r)
    }

    /// Decodes token ids of `text` into target token ids.
    pub fn decode_ids(
        &self,
        src: &[TokenId],
        tgt: &LanguageId,
        strategy: DecodeStrategy,
        seed: u64,
        index: u64,
    ) -> Result<Hypothesis> {
        let tag = self.tag(tgt)?;
        let mut r = rng::stream(seed, index);
        decode(self, src, strategy, self.max_len(src.len()), tag, &mut r)
    }
}

impl<'a> StepScorer for NmtSystem<'a> {
    type State<'s>
        = DecoderState<'s, f32>
    where
        Self: 's;

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn eos(&self) -> TokenId {
        self.vocab.eos()
    }

    fn start<'s>(&'s self, src: &[TokenId]) -> Result<(Self::State<'s>, Vec<f64>)> {
        let mut state = DecoderState::new(self.params, self.config, src)?;
        let lp = self.advance(&mut state, self.vocab.bos())?;
        Ok((state, lp))
    }

    fn advance<'s>(&'s self, state: &mut Self::State<'s>, token: TokenId) -> Result<Vec<f64>> {
        Ok(state.step(token)?.into_iter().map(|x| x as f64).collect())
    }
}

impl Translator for NmtSystem<'_> {
    fn supports(&self, src: &LanguageId, tgt: &LanguageId) -> bool {
        src != tgt && self.vocab.lang_tag(src).is_some() && self.vocab.lang_tag(tgt).is_some()
    }

    fn translate(
        &self,
        text: &str,
        src: &LanguageId,
        tgt: &LanguageId,
        strategy: DecodeStrategy,
        seed: u64,
        index: u64,
    ) -> Result<String> {
        if !self.supports(src, tgt) {
            return Err(Error::config(format!("model cannot translate {src}-{tgt}")));
        }
        let ids = self.encode_source(text);
        if ids.is_empty() {
            return Ok(String::new());
        }
        let hyp = self.decode_ids(&ids, tgt, strategy, seed, index)?;
        bpe_decode(self.vocab, &hyp.tokens[1..])
    }
}

/// A hand-built scorer whose next-token distribution is a fixed pseudo-random
/// function of the source and prefix. Used to test decoders exhaustively.
#[derive(Debug, Clone)]
pub struct ToyScorer {
    pub vocab: usize,
    pub eos: TokenId,
    pub seed: u64,
    /// Larger values make the distributions peakier.
    pub sharpness: f64,
}

impl ToyScorer {
    pub fn distribution(&self, src: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
        let mut h = rng::mix(self.seed, prefix.len() as u64);
        for &t in src.iter().chain(std::iter::once(&TokenId::MAX)).chain(prefix) {
            h = rng::mix(h, t as u64);
        }
        let mut r = rng::stream(h, 0);
        let mut logits: Vec<f64> = (0..self.vocab).map(|_| r.random::<f64>() * self.sharpness).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
        logits.iter_mut().for_each(|l| *l -= z);
        logits
    }
}

impl StepScorer for ToyScorer {
    type State<'s> = (Vec<TokenId>, Vec<TokenId>);

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn eos(&self) -> TokenId {
        self.eos
    }

    fn start<'s>(&'s self, src: &[TokenId]) -> Result<(Self::State<'s>, Vec<f64>)> {
        let lp = self.distribution(src, &[]);
        Ok(((src.to_vec(), Vec::new()), lp))
    }

    fn advance<'s>(&'s self, state: &mut Self::State<'s>, token: TokenId) -> Result<Vec<f64>> {
        state.1.push(token);
        Ok(self.distribution(&state.0, &state.1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(vocab: usize, seed: u64) -> ToyScorer {
        ToyScorer {
            vocab,
            eos: 2,
            seed,
            sharpness: 3.0,
        }
    }

    /// Exhaustive search over every completion, written independently of
    /// the beam implementation.
    fn exhaustive(s: &ToyScorer, src: &[TokenId], max_len: usize, forced: TokenId) -> (f64, Vec<TokenId>) {
        let mut best: Option<(f64, Vec<TokenId>)> = None;
        let mut stack = vec![(vec![forced], 0.0)];
        while let Some((prefix, score)) = stack.pop() {
            if prefix.len() == max_len {
                consider(&mut best, score, prefix);
                continue;
            }
            let lp = s.distribution(src, &prefix);
            for t in 0..s.vocab as TokenId {
                let sc = score + lp[t as usize];
                let mut seq = prefix.clone();
                seq.push(t);
                if t == s.eos {
                    consider(&mut best, sc, seq);
                } else {
                    stack.push((seq, sc));
                }
            }
        }
        best.unwrap()
    }

    fn consider(best: &mut Option<(f64, Vec<TokenId>)>, score: f64, seq: Vec<TokenId>) {
        let replace = match best {
            None => true,
            Some((b, bs)) => score > *b || (score == *b && seq < *bs),
        };
        if replace {
            *best = Some((score, seq));
        }
    }

    fn with_eos(h: &Hypothesis) -> Vec<TokenId> {
        let mut t = h.tokens.clone();
        if h.ended_with_eos {
            t.push(2);
        }
        t
    }

    #[test]
    fn stop_rule_examples() {
        let r = StopRule::default();
        assert_eq!(max_target_len(20, &r), 50);
        assert_eq!(max_target_len(0, &r), 20);
        assert_eq!(max_target_len(7, &r), 30);
        assert_eq!(max_target_len(1000, &r), 256);
        assert!(StopRule { slope: 0.0, ..r }.validate().is_err());
        assert!(StopRule { intercept: -1.0, ..r }.validate().is_err());
    }

    #[test]
    fn strategy_text_roundtrip() {
        for s in [
            DecodeStrategy::Beam { size: 5 },
            DecodeStrategy::TopK { k: 10 },
            DecodeStrategy::Unconstrained,
        ] {
            assert_eq!(s.to_string().parse::<DecodeStrategy>().unwrap(), s);
        }
        assert!("beam:0".parse::<DecodeStrategy>().is_err());
        assert!("nucleus:0.9".parse::<DecodeStrategy>().is_err());
    }

    #[test]
    fn full_width_beam_is_exact() {
        for inst in 0..40u64 {
            let v = 3 + (inst % 3) as usize;
            let max_len = 2 + (inst % 5) as usize;
            let s = toy(v, inst);
            let src = [inst as TokenId % 7, 1];
            let width = v.pow(max_len as u32);
            let beam = beam_search(&s, &src, width, max_len, 0).unwrap();
            let (score, seq) = exhaustive(&s, &src, max_len, 0);
            assert_eq!(with_eos(&beam), seq, "instance {inst}");
            assert!((beam.log_prob - score).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_one_topk_one_and_greedy_agree() {
        for inst in 0..30u64 {
            let s = toy(5, inst + 100);
            let src = [3, 4, inst as TokenId % 5];
            let max_len = 6;
            let beam = beam_search(&s, &src, 1, max_len, 1).unwrap();
            let mut r = rng::stream(inst, 9);
            let top1 = sample_decode(&s, &src, DecodeStrategy::TopK { k: 1 }, max_len, 1, &mut r).unwrap();
            let mut greedy = vec![1];
            let mut ended = false;
            while greedy.len() < max_len {
                let lp = s.distribution(&src, &greedy);
                let t = ranked(&lp)[0];
                if t == 2 {
                    ended = true;
                    break;
                }
                greedy.push(t);
            }
            assert_eq!(beam.tokens, greedy);
            assert_eq!(top1.hypothesis.tokens, greedy);
            assert_eq!(beam.ended_with_eos, ended);
            assert!(top1.ranks.iter().all(|&r| r == 1));
        }
    }

    #[test]
    fn topk_ranks_replay_and_stay_within_k() {
        let s = ToyScorer {
            vocab: 30,
            eos: 2,
            seed: 5,
            sharpness: 1.0,
        };
        let mut r = rng::stream(1, 1);
        let mut steps = 0;
        for i in 0..200 {
            let src = [i as TokenId % 30, 7];
            let out = sample_decode(&s, &src, DecodeStrategy::TopK { k: 10 }, 25, 0, &mut r).unwrap();
            let tokens = with_eos(&out.hypothesis);
            for (j, &rank) in out.ranks.iter().enumerate() {
                assert!((1..=10).contains(&rank));
                let lp = s.distribution(&src, &tokens[..j + 1]);
                assert_eq!(ranked(&lp)[rank - 1], tokens[j + 1]);
                steps += 1;
            }
            assert!(tokens.len() <= 25);
            assert!(out.hypothesis.tokens.len() <= 25);
        }
        assert!(steps > 1000);
    }

    #[test]
    fn topk_full_vocab_equals_unconstrained() {
        let s = toy(6, 3);
        for seed in 0..20 {
            let a = sample_decode(&s, &[1, 2], DecodeStrategy::TopK { k: 6 }, 10, 0, &mut rng::stream(seed, 0)).unwrap();
            let b = sample_decode(&s, &[1, 2], DecodeStrategy::Unconstrained, 10, 0, &mut rng::stream(seed, 0)).unwrap();
            assert_eq!(a, b);
        }
        assert!(sample_decode(&s, &[1], DecodeStrategy::TopK { k: 7 }, 10, 0, &mut rng::stream(0, 0)).is_err());
    }

    #[test]
    fn topk_frequencies_match_renormalised_probabilities() {
        let lp: Vec<f64> = [0.3, 0.05, 0.25, 0.1, 0.2, 0.1].iter().map(|p: &f64| p.ln()).collect();
        let k = 3;
        let mut counts = [0usize; 6];
        let mut r = rng::stream(42, 0);
        let n = 100_000;
        for _ in 0..n {
            counts[sample_step(&lp, Some(k), &mut r).unwrap().0 as usize] += 1;
        }
        let z = 0.3 + 0.25 + 0.2;
        let expected = [0.3 / z, 0.0, 0.25 / z, 0.0, 0.2 / z, 0.0];
        for t in 0..6 {
            assert!((counts[t] as f64 / n as f64 - expected[t]).abs() < 0.01, "token {t}");
        }
    }

    #[test]
    fn ties_prefer_lower_ids() {
        let lp = vec![(0.25f64).ln(); 4];
        assert_eq!(ranked(&lp), vec![0, 1, 2, 3]);
        let mut r = rng::stream(0, 0);
        for _ in 0..50 {
            assert_eq!(sample_step(&lp, Some(1), &mut r).unwrap(), (0, 1));
        }
    }

    #[test]
    fn forced_token_and_length_cap() {
        let s = toy(5, 8);
        for len in 1..6 {
            let b = beam_search(&s, &[4], 3, len, 4).unwrap();
            assert_eq!(b.tokens[0], 4);
            assert!(b.tokens.len() + b.ended_with_eos as usize <= len.max(1));
        }
        assert!(beam_search(&s, &[], 3, 4, 4).is_err());
        assert!(beam_search(&s, &[1], 0, 4, 4).is_err());
        assert!(sample_decode(&s, &[1], DecodeStrategy::Beam { size: 2 }, 4, 0, &mut rng::stream(0, 0)).is_err());
    }

    #[test]
    fn identity_translator_passes_text_through() {
        let a = LanguageId::new("aa").unwrap();
        let b = LanguageId::new("bb").unwrap();
        let out = IdentityTranslator
            .translate_all(&["x y".to_string()], &a, &b, DecodeStrategy::Unconstrained, 0)
            .unwrap();
        assert_eq!(out, vec!["x y".to_string()]);
    }
}
