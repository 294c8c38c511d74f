//! Corpus data structures, temperature-balanced mixing and language tags.

pub mod cipher;
pub mod io;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::decoding::DecodeStrategy;
use crate::error::{Error, Result};
use crate::rng;

/// Short lowercase language code such as `"id"` or `"jv"`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LanguageId(String);

impl LanguageId {
    pub fn new(code: impl Into<String>) -> Result<Self> {
        let code = code.into();
        if code.is_empty() || !code.bytes().all(|b| b.is_ascii_lowercase()) {
            return Err(Error::invalid(format!(
                "language code {code:?} must be non-empty ASCII lowercase"
            )));
        }
        Ok(LanguageId(code))
    }

    pub fn code(&self) -> &str {
        &self.0
    }

    /// The reserved token `__<code>__` that marks the target language.
    pub fn tag_token(&self) -> String {
        format!("__{}__", self.0)
    }
}

impl fmt::Display for LanguageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for LanguageId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LanguageId::new(s)
    }
}

/// Returns true if `word` has the shape of a language tag token.
pub fn is_tag_token(word: &str) -> bool {
    word.len() > 4
        && word.starts_with("__")
        && word.ends_with("__")
        && word[2..word.len() - 2].bytes().all(|b| b.is_ascii_lowercase())
}

/// An ordered translation direction `src -> tgt`, rendered as `src-tgt`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Direction {
    pub src: LanguageId,
    pub tgt: LanguageId,
}

impl Direction {
    pub fn new(src: LanguageId, tgt: LanguageId) -> Result<Self> {
        if src == tgt {
            return Err(Error::invalid(format!("direction {src}-{tgt} has equal languages")));
        }
        Ok(Direction { src, tgt })
    }

    pub fn reversed(&self) -> Direction {
        Direction {
            src: self.tgt.clone(),
            tgt: self.src.clone(),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('-')
            .ok_or_else(|| Error::invalid(format!("direction {s:?} must look like `src-tgt`")))?;
        Direction::new(a.trim().parse()?, b.trim().parse()?)
    }
}

/// Where a sentence pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Parallel,
    Synthetic { strategy: DecodeStrategy, round: u32 },
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Parallel => f.write_str("parallel"),
            Origin::Synthetic { strategy, round } => write!(f, "synthetic/{strategy}/r{round}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub src_lang: LanguageId,
    pub tgt_lang: LanguageId,
    pub src: String,
    pub tgt: String,
    pub origin: Origin,
}

impl SentencePair {
    pub fn new(
        src_lang: LanguageId,
        tgt_lang: LanguageId,
        src: impl Into<String>,
        tgt: impl Into<String>,
        origin: Origin,
    ) -> Result<Self> {
        let (src, tgt) = (src.into(), tgt.into());
        if src_lang == tgt_lang {
            return Err(Error::invalid(format!("pair has equal languages {src_lang}")));
        }
        if src.trim().is_empty() || tgt.trim().is_empty() {
            return Err(Error::invalid(format!(
                "pair {src_lang}-{tgt_lang} has an empty side: {src:?} / {tgt:?}"
            )));
        }
        if let Origin::Synthetic { round: 0, .. } = origin {
            return Err(Error::invalid("synthetic rounds start at 1"));
        }
        Ok(SentencePair {
            src_lang,
            tgt_lang,
            src,
            tgt,
            origin,
        })
    }

    pub fn direction(&self) -> Direction {
        Direction {
            src: self.src_lang.clone(),
            tgt: self.tgt_lang.clone(),
        }
    }
}

/// Sentence pairs sharing one direction, in stable order.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub direction: Direction,
    pairs: Vec<SentencePair>,
}

impl Corpus {
    pub fn new(direction: Direction) -> Self {
        Corpus {
            direction,
            pairs: Vec::new(),
        }
    }

    pub fn from_pairs(direction: Direction, pairs: Vec<SentencePair>) -> Result<Self> {
        let mut c = Corpus::new(direction);
        for p in pairs {
            c.push(p)?;
        }
        Ok(c)
    }

    pub fn push(&mut self, pair: SentencePair) -> Result<()> {
        if pair.src_lang != self.direction.src || pair.tgt_lang != self.direction.tgt {
            return Err(Error::invalid(format!(
                "pair {}-{} does not belong to corpus {}",
                pair.src_lang, pair.tgt_lang, self.direction
            )));
        }
        self.pairs.push(pair);
        Ok(())
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The same sentences read in the opposite direction.
    pub fn reversed(&self) -> Corpus {
        Corpus {
            direction: self.direction.reversed(),
            pairs: self
                .pairs
                .iter()
                .map(|p| SentencePair {
                    src_lang: p.tgt_lang.clone(),
                    tgt_lang: p.src_lang.clone(),
                    src: p.tgt.clone(),
                    tgt: p.src.clone(),
                    origin: p.origin,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonoCorpus {
    pub lang: LanguageId,
    sentences: Vec<String>,
}

impl MonoCorpus {
    pub fn new(lang: LanguageId, sentences: Vec<String>) -> Result<Self> {
        if let Some(i) = sentences.iter().position(|s| s.trim().is_empty()) {
            return Err(Error::invalid(format!("monolingual {lang} sentence {i} is empty")));
        }
        Ok(MonoCorpus { lang, sentences })
    }

    pub fn sentences(&self) -> &[String] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// First `n` sentences (the volume knob for back-translation).
    pub fn truncated(&self, n: usize) -> MonoCorpus {
        MonoCorpus {
            lang: self.lang.clone(),
            sentences: self.sentences[..n.min(self.sentences.len())].to_vec(),
        }
    }
}

/// An n-way parallel evaluation set: `sentences[l][i]` is sentence `i` in
/// language `langs[l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DevSet {
    pub langs: Vec<LanguageId>,
    pub sentences: Vec<Vec<String>>,
}

impl DevSet {
    pub fn new(langs: Vec<LanguageId>, sentences: Vec<Vec<String>>) -> Result<Self> {
        if langs.len() != sentences.len() {
            return Err(Error::invalid("dev set needs one sentence list per language"));
        }
        if let Some(first) = sentences.first() {
            if sentences.iter().any(|s| s.len() != first.len()) {
                return Err(Error::invalid("dev set languages are not aligned"));
            }
        }
        Ok(DevSet { langs, sentences })
    }

    pub fn len(&self) -> usize {
        self.sentences.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self, lang: &LanguageId) -> Option<&[String]> {
        self.langs
            .iter()
            .position(|l| l == lang)
            .map(|i| self.sentences[i].as_slice())
    }

    /// Keeps the first `n` sentences of every language.
    pub fn truncated(&self, n: usize) -> DevSet {
        DevSet {
            langs: self.langs.clone(),
            sentences: self
                .sentences
                .iter()
                .map(|s| s[..n.min(s.len())].to_vec())
                .collect(),
        }
    }

    /// All ordered pairs of distinct languages.
    pub fn directions(&self) -> Vec<Direction> {
        let mut out = Vec::new();
        for a in &self.langs {
            for b in &self.langs {
                if a != b {
                    out.push(Direction {
                        src: a.clone(),
                        tgt: b.clone(),
                    });
                }
            }
        }
        out
    }
}

/// Normalised temperature-sampling probabilities.
///
/// Each entry's share `D_i / sum D` is raised to `1/T` and the results are
/// renormalised. `T = 1` reproduces the raw proportions and large `T`
/// approaches the uniform distribution.
pub fn temperature_weights<K>(counts: &BTreeMap<K, u64>, temperature: f64) -> Result<BTreeMap<K, f64>>
where
    K: Ord + Clone + fmt::Display,
{
    if counts.is_empty() {
        return Err(Error::invalid("temperature_weights: no counts given"));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature_weights: temperature {temperature} must be positive"
        )));
    }
    if let Some((k, _)) = counts.iter().find(|(_, &c)| c == 0) {
        return Err(Error::invalid(format!("temperature_weights: entry {k} has count zero")));
    }
    let total: f64 = counts.values().map(|&c| c as f64).sum();
    let ln_total = total.ln();
    // Log space keeps tiny shares representable at high temperature.
    let logs: Vec<f64> = counts
        .values()
        .map(|&c| ((c as f64).ln() - ln_total) / temperature)
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = unnorm.iter().sum();
    Ok(counts
        .keys()
        .cloned()
        .zip(unnorm.into_iter().map(|u| u / z))
        .collect())
}

/// One part of a mixture direction: a named corpus, optionally truncated to
/// its first `cap` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceRef {
    pub corpus: String,
    pub cap: Option<usize>,
}

impl SourceRef {
    pub fn whole(corpus: impl Into<String>) -> Self {
        SourceRef {
            corpus: corpus.into(),
            cap: None,
        }
    }

    pub fn capped(corpus: impl Into<String>, cap: usize) -> Self {
        SourceRef {
            corpus: corpus.into(),
            cap: Some(cap),
        }
    }
}

/// Recipe for one training set.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub sources: BTreeMap<Direction, Vec<SourceRef>>,
    pub temperature: f64,
    pub total_size: usize,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn new(temperature: f64, total_size: usize, seed: u64) -> Self {
        MixtureSpec {
            sources: BTreeMap::new(),
            temperature,
            total_size,
            seed,
        }
    }

    pub fn add(&mut self, direction: Direction, source: SourceRef) {
        self.sources.entry(direction).or_default().push(source);
    }

    /// Per-direction pool sizes after caps, checked against `corpora`.
    pub fn counts(&self, corpora: &BTreeMap<String, Corpus>) -> Result<BTreeMap<Direction, u64>> {
        let mut out = BTreeMap::new();
        for (dir, refs) in &self.sources {
            let mut n = 0u64;
            for r in refs {
                n += resolve(dir, r, corpora)?.len() as u64;
            }
            out.insert(dir.clone(), n);
        }
        Ok(out)
    }
}

fn resolve<'a>(
    dir: &Direction,
    source: &SourceRef,
    corpora: &'a BTreeMap<String, Corpus>,
) -> Result<&'a [SentencePair]> {
    let corpus = corpora.get(&source.corpus).ok_or_else(|| {
        Error::config(format!("mixture direction {dir}: corpus `{}` is not loaded", source.corpus))
    })?;
    if &corpus.direction != dir {
        return Err(Error::config(format!(
            "mixture direction {dir}: corpus `{}` has direction {}",
            source.corpus, corpus.direction
        )));
    }
    match source.cap {
        Some(cap) if cap > corpus.len() => Err(Error::config(format!(
            "mixture direction {dir}: cap {cap} exceeds the {} pairs of `{}`",
            corpus.len(),
            source.corpus
        ))),
        Some(cap) => Ok(&corpus.pairs()[..cap]),
        None => Ok(corpus.pairs()),
    }
}

/// Draw order for one direction. Each pass visits every pooled pair exactly
/// once; parts are shuffled independently and interleaved in proportion to
/// their sizes, so any prefix of a pass holds each part's share of draws to
/// within one pair.
struct DirectionPool<'a> {
    parts: Vec<&'a [SentencePair]>,
    order: Vec<(usize, usize)>,
    pos: usize,
    pass: u64,
    stream: u64,
    seed: u64,
}

impl<'a> DirectionPool<'a> {
    fn next(&mut self) -> &'a SentencePair {
        if self.pos == self.order.len() {
            self.refill();
        }
        let (part, idx) = self.order[self.pos];
        self.pos += 1;
        &self.parts[part][idx]
    }

    fn refill(&mut self) {
        let mut keyed: Vec<(u64, u64, usize, usize)> = Vec::new();
        for (p, part) in self.parts.iter().enumerate() {
            let mut idx: Vec<usize> = (0..part.len()).collect();
            let mut r = rng::stream(rng::mix(self.seed, self.stream), self.pass * 64 + p as u64);
            idx.shuffle(&mut r);
            let n = part.len() as u64;
            for (k, i) in idx.into_iter().enumerate() {
                // Fractional position (2k+1)/(2n), compared exactly below.
                keyed.push((2 * k as u64 + 1, 2 * n, p, i));
            }
        }
        keyed.sort_by(|a, b| {
            let lhs = a.0 as u128 * b.1 as u128;
            let rhs = b.0 as u128 * a.1 as u128;
            lhs.cmp(&rhs).then(a.2.cmp(&b.2))
        });
        self.order = keyed.into_iter().map(|(_, _, p, i)| (p, i)).collect();
        self.pos = 0;
        self.pass += 1;
    }
}

/// Draws `spec.total_size` pairs: each draw picks a direction with its
/// temperature probability, then the next pair from that direction's pool.
/// Pools are consumed without replacement and reshuffled when exhausted.
pub fn sample_mixture(
    spec: &MixtureSpec,
    corpora: &BTreeMap<String, Corpus>,
) -> Result<Vec<SentencePair>> {
    if spec.sources.is_empty() {
        return Err(Error::config("mixture has no sources"));
    }
    let counts = spec.counts(corpora)?;
    if let Some((dir, _)) = counts.iter().find(|(_, &c)| c == 0) {
        return Err(Error::config(format!("mixture direction {dir} has no pairs")));
    }
    let weights = temperature_weights(&counts, spec.temperature)?;
    let mut pools = Vec::new();
    for (i, (dir, refs)) in spec.sources.iter().enumerate() {
        let parts = refs
            .iter()
            .map(|r| resolve(dir, r, corpora))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| !p.is_empty())
            .collect();
        pools.push(DirectionPool {
            parts,
            order: Vec::new(),
            pos: 0,
            pass: 0,
            stream: i as u64 + 1,
            seed: spec.seed,
        });
    }
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights.values() {
        acc += w;
        cumulative.push(acc);
    }
    let mut picker = rng::stream(spec.seed, 0);
    let mut out = Vec::with_capacity(spec.total_size);
    for _ in 0..spec.total_size {
        let u: f64 = picker.random();
        let d = cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(cumulative.len() - 1);
        out.push(pools[d].next().clone());
    }
    Ok(out)
}

/// Prefixes the target side with the target language tag.
pub fn tag_target(pair: &SentencePair) -> Result<SentencePair> {
    if pair.tgt.split_whitespace().next().is_some_and(is_tag_token) {
        return Err(Error::Invariant(format!(
            "target {:?} is already tagged",
            pair.tgt
        )));
    }
    let mut out = pair.clone();
    out.tgt = format!("{} {}", pair.tgt_lang.tag_token(), pair.tgt);
    Ok(out)
}

/// Collapses runs of whitespace to single spaces and trims.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lang(c: &str) -> LanguageId {
        LanguageId::new(c).unwrap()
    }

    fn dir(a: &str, b: &str) -> Direction {
        Direction::new(lang(a), lang(b)).unwrap()
    }

    fn corpus(a: &str, b: &str, n: usize) -> Corpus {
        let pairs = (0..n)
            .map(|i| {
                SentencePair::new(lang(a), lang(b), format!("s{i}"), format!("t{i}"), Origin::Parallel)
                    .unwrap()
            })
            .collect();
        Corpus::from_pairs(dir(a, b), pairs).unwrap()
    }

    #[test]
    fn language_codes_are_validated() {
        assert!(LanguageId::new("").is_err());
        assert!(LanguageId::new("En").is_err());
        assert!(LanguageId::new("e1").is_err());
        assert_eq!(lang("id").tag_token(), "__id__");
        assert!(is_tag_token("__id__"));
        assert!(!is_tag_token("____"));
        assert!(!is_tag_token("id"));
    }

    #[test]
    fn pair_invariants() {
        assert!(SentencePair::new(lang("a"), lang("a"), "x", "y", Origin::Parallel).is_err());
        assert!(SentencePair::new(lang("a"), lang("b"), "  ", "y", Origin::Parallel).is_err());
        let mut c = Corpus::new(dir("a", "b"));
        let wrong = SentencePair::new(lang("b"), lang("a"), "x", "y", Origin::Parallel).unwrap();
        assert!(c.push(wrong).is_err());
    }

    #[test]
    fn temperature_one_is_raw_proportion() {
        let counts = BTreeMap::from([("a", 100u64), ("b", 1)]);
        let w = temperature_weights(&counts, 1.0).unwrap();
        assert!((w["a"] - 100.0 / 101.0).abs() < 1e-12);
        assert!((w["b"] - 1.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn huge_temperature_is_uniform() {
        let counts = BTreeMap::from([("a", 100u64), ("b", 1)]);
        let w = temperature_weights(&counts, 1e9).unwrap();
        assert!((w["a"] - 0.5).abs() < 1e-6);
        assert!((w["b"] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn table_counts_golden_values() {
        // Exact evaluation with 50-digit arithmetic:
        // t = (54100000/54166000)^(1/5), u = (66000/54166000)^(1/5), p = t/(t+u).
        let counts = BTreeMap::from([("en-id", 54_100_000u64), ("jv-ta", 66_000)]);
        let w = temperature_weights(&counts, 5.0).unwrap();
        assert!((w["en-id"] - 0.7927836502308179).abs() < 1e-12, "{}", w["en-id"]);
        assert!((w["jv-ta"] - 0.2072163497691821).abs() < 1e-12, "{}", w["jv-ta"]);
    }

    #[test]
    fn temperature_errors_name_the_entry() {
        let empty: BTreeMap<&str, u64> = BTreeMap::new();
        assert!(temperature_weights(&empty, 5.0).is_err());
        let zero = BTreeMap::from([("ok", 3u64), ("bad", 0)]);
        let err = temperature_weights(&zero, 5.0).unwrap_err();
        assert!(err.to_string().contains("bad"));
        let one = BTreeMap::from([("x", 3u64)]);
        assert!(temperature_weights(&one, 0.0).is_err());
        assert!(temperature_weights(&one, -1.0).is_err());
    }

    #[test]
    fn single_source_mixture() {
        let corpora = BTreeMap::from([("ab".to_string(), corpus("a", "b", 5))]);
        let mut spec = MixtureSpec::new(5.0, 12, 3);
        spec.add(dir("a", "b"), SourceRef::whole("ab"));
        let mix = sample_mixture(&spec, &corpora).unwrap();
        assert_eq!(mix.len(), 12);
        assert!(mix.iter().all(|p| p.direction() == dir("a", "b")));
        // The first pass visits every pair once.
        let mut first: Vec<_> = mix[..5].iter().map(|p| p.src.clone()).collect();
        first.sort();
        assert_eq!(first, vec!["s0", "s1", "s2", "s3", "s4"]);
        assert_eq!(mix, sample_mixture(&spec, &corpora).unwrap());
    }

    #[test]
    fn mixture_errors() {
        let corpora = BTreeMap::from([("ab".to_string(), corpus("a", "b", 5))]);
        let mut spec = MixtureSpec::new(5.0, 10, 3);
        spec.add(dir("a", "b"), SourceRef::whole("missing"));
        assert!(sample_mixture(&spec, &corpora).unwrap_err().is_config());
        let mut spec = MixtureSpec::new(5.0, 10, 3);
        spec.add(dir("b", "a"), SourceRef::whole("ab"));
        assert!(sample_mixture(&spec, &corpora).unwrap_err().is_config());
        let mut spec = MixtureSpec::new(5.0, 10, 3);
        spec.add(dir("a", "b"), SourceRef::capped("ab", 6));
        assert!(sample_mixture(&spec, &corpora).unwrap_err().is_config());
    }

    #[test]
    fn caps_restrict_the_pool() {
        let corpora = BTreeMap::from([("ab".to_string(), corpus("a", "b", 50))]);
        let mut spec = MixtureSpec::new(5.0, 40, 9);
        spec.add(dir("a", "b"), SourceRef::capped("ab", 4));
        let mix = sample_mixture(&spec, &corpora).unwrap();
        let allowed = ["s0", "s1", "s2", "s3"];
        assert!(mix.iter().all(|p| allowed.contains(&p.src.as_str())));
    }

    #[test]
    fn tagging() {
        let p = SentencePair::new(lang("en"), lang("id"), "hello world", "halo dunia", Origin::Parallel)
            .unwrap();
        let t = tag_target(&p).unwrap();
        assert_eq!(t.tgt, "__id__ halo dunia");
        assert_eq!(t.src, "hello world");
        assert!(matches!(tag_target(&t), Err(Error::Invariant(_))));
    }
}
