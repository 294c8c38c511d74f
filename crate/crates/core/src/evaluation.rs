//! Corpus BLEU over the shared subword segmentation, diversity statistics
//! and per-direction score matrices.
//!
//! The BLEU variant here counts n-grams of BPE token ids produced by the
//! experiment's own vocabulary, so scores are comparable only between runs
//! sharing a vocabulary ("spBLEU-internal").

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use crate::corpus::{DevSet, Direction, LanguageId};
use crate::decoding::{DecodeStrategy, Translator};
use crate::error::{Error, Result, ResultExt};
use crate::tokenizer::{bpe_encode, BpeVocab, TokenId};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// Score in `[0, 100]`.
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: u64,
    pub ref_len: u64,
}

fn ngram_counts(tokens: &[TokenId], n: usize) -> HashMap<&[TokenId], u64> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 over token sequences, without smoothing.
///
/// An order at which neither side has any n-gram (every sentence shorter
/// than n) is vacuous and counts as precision 1; an order where only the
/// hypotheses lack n-grams has precision 0.
pub fn corpus_bleu(hyps: &[Vec<TokenId>], refs: &[Vec<TokenId>]) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::invalid(format!(
            "BLEU needs as many hypotheses as references ({} vs {})",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::invalid("BLEU needs at least one sentence"));
    }
    let mut matches = [0u64; MAX_ORDER];
    let mut totals = [0u64; MAX_ORDER];
    let mut ref_totals = [0u64; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0u64, 0u64);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len() as u64;
        ref_len += r.len() as u64;
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            totals[n - 1] += (h.len() + 1).saturating_sub(n) as u64;
            ref_totals[n - 1] += (r.len() + 1).saturating_sub(n) as u64;
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<u64>();
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = if totals[n] > 0 {
            matches[n] as f64 / totals[n] as f64
        } else if ref_totals[n] == 0 {
            1.0
        } else {
            0.0
        };
    }
    let brevity_penalty = if hyp_len < ref_len {
        if hyp_len == 0 {
            0.0
        } else {
            (1.0 - ref_len as f64 / hyp_len as f64).exp()
        }
    } else {
        1.0
    };
    let score = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        if precisions.iter().all(|&p| p == 1.0) {
            100.0 * brevity_penalty
        } else {
            100.0 * brevity_penalty * mean.exp()
        }
    };
    Ok(BleuReport {
        score,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// BLEU of detokenized hypotheses against references, both segmented with
/// `vocab`.
pub fn spbleu(hyps: &[String], refs: &[String], vocab: &BpeVocab) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::invalid(format!(
            "spbleu: {} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let h: Vec<Vec<TokenId>> = hyps.iter().map(|s| bpe_encode(vocab, s)).collect();
    let r: Vec<Vec<TokenId>> = refs.iter().map(|s| bpe_encode(vocab, s)).collect();
    corpus_bleu(&h, &r)
}

/// Distinct n-grams over total n-grams of whitespace tokens.
pub fn distinct_n(sentences: &[String], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("distinct_n needs n >= 1"));
    }
    let mut seen: HashSet<Vec<&str>> = HashSet::new();
    let mut total = 0u64;
    for s in sentences {
        let words: Vec<&str> = s.split_whitespace().collect();
        if words.len() >= n {
            for w in words.windows(n) {
                total += 1;
                seen.insert(w.to_vec());
            }
        }
    }
    if total == 0 {
        return Err(Error::invalid(format!("distinct_n: no sentence has {n} words")));
    }
    Ok(seen.len() as f64 / total as f64)
}

/// spBLEU for a set of translation directions.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub langs: Vec<LanguageId>,
    pub scores: BTreeMap<Direction, f64>,
}

impl ScoreMatrix {
    pub fn get(&self, dir: &Direction) -> Option<f64> {
        self.scores.get(dir).copied()
    }

    /// Plain mean over all scored directions.
    pub fn mean(&self) -> f64 {
        if self.scores.is_empty() {
            return 0.0;
        }
        self.scores.values().sum::<f64>() / self.scores.len() as f64
    }

    /// Grid with sources as rows and targets as columns; unscored cells and
    /// the diagonal are empty.
    pub fn grid_tsv(&self) -> String {
        let mut out = String::from("src\\tgt");
        for l in &self.langs {
            write!(out, "\t{l}").unwrap();
        }
        out.push('\n');
        for s in &self.langs {
            out.push_str(s.code());
            for t in &self.langs {
                out.push('\t');
                if s != t {
                    if let Some(v) = self.scores.get(&Direction {
                        src: s.clone(),
                        tgt: t.clone(),
                    }) {
                        write!(out, "{v:.2}").unwrap();
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// `src<TAB>tgt<TAB>score` lines.
    pub fn flat_tsv(&self) -> String {
        let mut out = String::from("src\ttgt\tspbleu\n");
        for (d, v) in &self.scores {
            writeln!(out, "{}\t{}\t{v:.4}", d.src, d.tgt).unwrap();
        }
        out
    }
}

/// Translates the dev set along each direction and scores it. An empty
/// `directions` list means every ordered pair of the dev set's languages.
pub fn score_matrix(
    translator: &dyn Translator,
    vocab: &BpeVocab,
    dev: &DevSet,
    directions: &[Direction],
    strategy: DecodeStrategy,
    seed: u64,
) -> Result<ScoreMatrix> {
    if dev.is_empty() {
        return Err(Error::config("score matrix needs a non-empty dev set"));
    }
    let dirs = if directions.is_empty() {
        dev.directions()
    } else {
        directions.to_vec()
    };
    let mut scores = BTreeMap::new();
    for d in dirs {
        let (Some(src), Some(refs)) = (dev.side(&d.src), dev.side(&d.tgt)) else {
            return Err(Error::config(format!("dev set does not cover direction {d}")));
        };
        let hyps = translator
            .translate_all(src, &d.src, &d.tgt, strategy, seed)
            .with_context(|| format!("scoring direction {d}"))?;
        scores.insert(d.clone(), spbleu(&hyps, refs, vocab)?.score);
    }
    Ok(ScoreMatrix {
        langs: dev.langs.clone(),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::cipher::{generate_cipher_task, CipherTaskConfig};
    use crate::rng;
    use crate::tokenizer::bpe_train;
    use rand::Rng as _;

    /// Naive BLEU written from the definition: explicit window lists and
    /// linear-scan clipping.
    fn brute_bleu(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> f64 {
        let mut m = [0f64; 4];
        let mut t = [0f64; 4];
        let mut rt = [0f64; 4];
        let (mut hl, mut rl) = (0f64, 0f64);
        for (h, r) in hyps.iter().zip(refs) {
            hl += h.len() as f64;
            rl += r.len() as f64;
            for n in 1..=4 {
                let hw: Vec<&[u32]> = if h.len() >= n { h.windows(n).collect() } else { vec![] };
                let mut rw: Vec<Option<&[u32]>> = if r.len() >= n { r.windows(n).map(Some).collect() } else { vec![] };
                rt[n - 1] += rw.len() as f64;
                t[n - 1] += hw.len() as f64;
                for g in hw {
                    if let Some(slot) = rw.iter_mut().find(|x| **x == Some(g)) {
                        *slot = None;
                        m[n - 1] += 1.0;
                    }
                }
            }
        }
        let mut logsum = 0.0;
        for n in 0..4 {
            let p = if t[n] == 0.0 {
                if rt[n] == 0.0 { 1.0 } else { 0.0 }
            } else {
                m[n] / t[n]
            };
            if p == 0.0 {
                return 0.0;
            }
            logsum += p.ln();
        }
        let bp = if hl < rl { (1.0 - rl / hl).exp() } else { 1.0 };
        100.0 * bp * (logsum / 4.0).exp()
    }

    fn random_corpus(r: &mut rng::Rng, sents: usize, vocab: u32) -> Vec<Vec<u32>> {
        (0..sents)
            .map(|_| {
                let len = r.random_range(1..9);
                (0..len).map(|_| r.random_range(0..vocab)).collect()
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_on_random_corpora() {
        let mut r = rng::stream(2024, 0);
        for _ in 0..50 {
            let n = r.random_range(1..8);
            let hyps = random_corpus(&mut r, n, 4);
            let mut refs = random_corpus(&mut r, n, 4);
            // Make some references share material with the hypotheses.
            for (h, rf) in hyps.iter().zip(refs.iter_mut()) {
                if r.random_bool(0.5) {
                    *rf = h.clone();
                    rf.push(1);
                }
            }
            let got = corpus_bleu(&hyps, &refs).unwrap().score;
            let want = brute_bleu(&hyps, &refs);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn identity_scores_100_and_disjoint_scores_0() {
        let c = vec![vec![1, 2, 3, 4, 5], vec![6, 7]];
        let rep = corpus_bleu(&c, &c).unwrap();
        assert_eq!(rep.score, 100.0);
        assert_eq!(rep.brevity_penalty, 1.0);
        assert!(rep.precisions.iter().all(|&p| p == 1.0));
        let short = vec![vec![1], vec![2, 3]];
        assert_eq!(corpus_bleu(&short, &short).unwrap().score, 100.0);
        let other = vec![vec![8, 9, 10, 11, 12], vec![13, 14]];
        assert_eq!(corpus_bleu(&c, &other).unwrap().score, 0.0);
        assert!(corpus_bleu(&c, &other[..1]).is_err());
    }

    #[test]
    fn permutation_and_duplication_invariance() {
        let mut r = rng::stream(5, 5);
        let hyps = random_corpus(&mut r, 6, 3);
        let refs = random_corpus(&mut r, 6, 3);
        let base = corpus_bleu(&hyps, &refs).unwrap().score;
        let (mut h2, mut r2) = (hyps.clone(), refs.clone());
        h2.reverse();
        r2.reverse();
        assert!((corpus_bleu(&h2, &r2).unwrap().score - base).abs() < 1e-9);
        let hd: Vec<_> = hyps.iter().chain(&hyps).cloned().collect();
        let rd: Vec<_> = refs.iter().chain(&refs).cloned().collect();
        assert!((corpus_bleu(&hd, &rd).unwrap().score - base).abs() < 1e-9);
    }

    #[test]
    fn brevity_penalty_applies_to_short_output() {
        let hyps = vec![vec![1, 2, 3, 4]];
        let refs = vec![vec![1, 2, 3, 4, 5, 6, 7, 8]];
        let rep = corpus_bleu(&hyps, &refs).unwrap();
        assert!((rep.brevity_penalty - (-1.0f64).exp()).abs() < 1e-15);
        assert!((rep.score - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn distinct_n_examples() {
        let s = vec!["a b c".to_string(); 4];
        assert!((distinct_n(&s, 2).unwrap() - 0.25).abs() < 1e-15);
        let u = vec!["a b c".to_string(), "d e f".to_string()];
        assert_eq!(distinct_n(&u, 2).unwrap(), 1.0);
        assert!(distinct_n(&["a".to_string()], 2).is_err());
    }

    #[test]
    fn oracle_translator_scores_100_everywhere() {
        let langs: Vec<LanguageId> = ["xa", "xb", "xc"].iter().map(|c| LanguageId::new(*c).unwrap()).collect();
        let mut cfg = CipherTaskConfig::minimal(langs[0].clone(), langs[1].clone());
        cfg.languages = langs.clone();
        cfg.dev_size = 30;
        let task = generate_cipher_task(&cfg).unwrap();
        let text: Vec<&str> = task.dev.sentences.iter().flatten().map(|s| s.as_str()).collect();
        let vocab = bpe_train([text.iter().copied()], 200, &langs).unwrap();
        let m = score_matrix(&task, &vocab, &task.dev, &[], DecodeStrategy::Beam { size: 5 }, 0).unwrap();
        assert_eq!(m.scores.len(), 6);
        assert!(m.scores.values().all(|&s| s == 100.0));
        assert_eq!(m.mean(), 100.0);
        let grid = m.grid_tsv();
        assert_eq!(grid.lines().count(), 4);
        assert_eq!(m.flat_tsv().lines().count(), 7);
    }
}
