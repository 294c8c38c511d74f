//! Synthetic cipher languages with exactly known translations.
//!
//! Latent sentences are drawn from a small phrase grammar. Every language
//! renders a latent sentence through its own bijective word table, and some
//! languages also move adjectives behind their noun. Designated "similar"
//! language pairs share a fraction of their surface forms. Because rendering
//! is invertible, any sentence can be translated exactly into any language.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{Corpus, DevSet, Direction, LanguageId, MonoCorpus, Origin, SentencePair};
use crate::decoding::{DecodeStrategy, Translator};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Category {
    Det,
    Adj,
    Noun,
    Verb,
    Prep,
    Adv,
}

/// Shortest and longest sentences the grammar can produce.
const GRAMMAR_LEN: (usize, usize) = (3, 12);

#[derive(Debug, Clone, PartialEq)]
pub struct CipherTaskConfig {
    pub languages: Vec<LanguageId>,
    pub base_vocab_size: usize,
    /// Fraction of latent words whose surface form is shared by each
    /// similar pair.
    pub overlap: f64,
    pub similar_pairs: Vec<(LanguageId, LanguageId)>,
    /// Languages that place adjectives after the noun.
    pub reordered: Vec<LanguageId>,
    pub sentence_len_range: (usize, usize),
    /// Parallel sentence counts per language pair (generated as `a -> b`).
    pub parallel_sizes: BTreeMap<(LanguageId, LanguageId), usize>,
    pub mono_sizes: BTreeMap<LanguageId, usize>,
    pub dev_size: usize,
    pub devtest_size: usize,
    pub seed: u64,
}

impl CipherTaskConfig {
    /// A two-language task with no parallel or monolingual data.
    pub fn minimal(a: LanguageId, b: LanguageId) -> Self {
        CipherTaskConfig {
            languages: vec![a, b],
            base_vocab_size: 40,
            overlap: 0.0,
            similar_pairs: Vec::new(),
            reordered: Vec::new(),
            sentence_len_range: (3, 8),
            parallel_sizes: BTreeMap::new(),
            mono_sizes: BTreeMap::new(),
            dev_size: 500,
            devtest_size: 500,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.languages.len() < 2 {
            return Err(Error::invalid("cipher task needs at least two languages"));
        }
        let distinct: BTreeSet<_> = self.languages.iter().collect();
        if distinct.len() != self.languages.len() {
            return Err(Error::invalid("cipher task languages must be distinct"));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::invalid(format!(
                "overlap {} must lie in [0, 1]",
                self.overlap
            )));
        }
        if self.base_vocab_size < 12 {
            return Err(Error::invalid("base_vocab_size must be at least 12"));
        }
        let (lo, hi) = self.sentence_len_range;
        if lo > hi || hi < GRAMMAR_LEN.0 || lo > GRAMMAR_LEN.1 {
            return Err(Error::invalid(format!(
                "sentence_len_range ({lo}, {hi}) does not meet the grammar's range {GRAMMAR_LEN:?}"
            )));
        }
        let known = |l: &LanguageId| self.languages.contains(l);
        for (a, b) in self.similar_pairs.iter().chain(self.parallel_sizes.keys()) {
            if !known(a) || !known(b) || a == b {
                return Err(Error::invalid(format!("language pair {a}-{b} is not valid")));
            }
        }
        if let Some(l) = self
            .reordered
            .iter()
            .chain(self.mono_sizes.keys())
            .find(|l| !known(l))
        {
            return Err(Error::invalid(format!("unknown language {l}")));
        }
        Ok(())
    }
}

/// A latent word: category plus index within the category.
type Latent = Vec<(Category, usize)>;

#[derive(Debug, Clone)]
struct Lexicon {
    /// `(category, count)` in category order.
    sizes: Vec<(Category, usize)>,
}

impl Lexicon {
    fn new(vocab: usize) -> Self {
        let pct = |p: usize| (vocab * p / 100).max(1);
        let det = pct(8);
        let adj = pct(20);
        let verb = pct(20);
        let prep = pct(7);
        let adv = pct(10);
        let noun = vocab - det - adj - verb - prep - adv;
        Lexicon {
            sizes: vec![
                (Category::Det, det),
                (Category::Adj, adj),
                (Category::Noun, noun),
                (Category::Verb, verb),
                (Category::Prep, prep),
                (Category::Adv, adv),
            ],
        }
    }

    fn count(&self, c: Category) -> usize {
        self.sizes.iter().find(|(k, _)| *k == c).map_or(0, |(_, n)| *n)
    }

    /// Flat id of a latent word.
    fn id(&self, c: Category, i: usize) -> usize {
        let mut base = 0;
        for &(k, n) in &self.sizes {
            if k == c {
                return base + i;
            }
            base += n;
        }
        unreachable!("every category is listed")
    }

    fn word(&self, id: usize) -> (Category, usize) {
        let mut base = 0;
        for &(k, n) in &self.sizes {
            if id < base + n {
                return (k, id - base);
            }
            base += n;
        }
        panic!("latent id {id} out of range")
    }

    fn total(&self) -> usize {
        self.sizes.iter().map(|(_, n)| n).sum()
    }

    fn pick(&self, c: Category, rng: &mut Rng) -> (Category, usize) {
        (c, rng.random_range(0..self.count(c) as u32) as usize)
    }

    fn noun_phrase(&self, rng: &mut Rng, out: &mut Latent) {
        out.push(self.pick(Category::Det, rng));
        if rng.random_bool(0.5) {
            out.push(self.pick(Category::Adj, rng));
        }
        out.push(self.pick(Category::Noun, rng));
    }

    fn sentence(&self, rng: &mut Rng, (lo, hi): (usize, usize)) -> Latent {
        loop {
            let mut s = Vec::with_capacity(12);
            self.noun_phrase(rng, &mut s);
            s.push(self.pick(Category::Verb, rng));
            if rng.random_bool(0.6) {
                self.noun_phrase(rng, &mut s);
            }
            if rng.random_bool(0.4) {
                s.push(self.pick(Category::Prep, rng));
                self.noun_phrase(rng, &mut s);
            }
            if rng.random_bool(0.3) {
                s.push(self.pick(Category::Adv, rng));
            }
            if (lo..=hi).contains(&s.len()) {
                return s;
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Cipher {
    forms: Vec<String>,
    inverse: HashMap<String, usize>,
    reorder: bool,
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "ch", "sh",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "", "", "n", "k", "r", "s"];

fn pseudo_word(rng: &mut Rng) -> String {
    let syllables = 1 + rng.random_range(0..3u32) as usize;
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.random_range(0..ONSETS.len() as u32) as usize]);
        w.push_str(VOWELS[rng.random_range(0..VOWELS.len() as u32) as usize]);
        w.push_str(CODAS[rng.random_range(0..CODAS.len() as u32) as usize]);
    }
    w
}

/// The generated task: corpora plus the ground-truth ciphers.
#[derive(Debug, Clone)]
pub struct CipherTask {
    pub config: CipherTaskConfig,
    lexicon: Lexicon,
    ciphers: Vec<Cipher>,
    pub parallel: Vec<Corpus>,
    pub mono: Vec<MonoCorpus>,
    pub dev: DevSet,
    pub devtest: DevSet,
}

pub fn generate_cipher_task(cfg: &CipherTaskConfig) -> Result<CipherTask> {
    cfg.validate()?;
    let lexicon = Lexicon::new(cfg.base_vocab_size);
    let n_words = lexicon.total();

    // Shared latent words for each similar pair.
    let mut shared: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
    let n_shared = (cfg.overlap * n_words as f64).round() as usize;
    for (k, (a, b)) in cfg.similar_pairs.iter().enumerate() {
        let ia = cfg.languages.iter().position(|l| l == a).expect("validated");
        let ib = cfg.languages.iter().position(|l| l == b).expect("validated");
        let (lo, hi) = (ia.min(ib), ia.max(ib));
        let mut ids: Vec<usize> = (0..n_words).collect();
        ids.shuffle(&mut rng::stream(cfg.seed, rng::label("cipher/overlap") + k as u64));
        shared.entry((lo, hi)).or_default().extend(ids.into_iter().take(n_shared));
    }

    let mut used: BTreeSet<String> = BTreeSet::new();
    let mut ciphers: Vec<Cipher> = Vec::with_capacity(cfg.languages.len());
    for (li, lang) in cfg.languages.iter().enumerate() {
        let mut r = rng::stream(cfg.seed, rng::label(&format!("cipher/forms/{lang}")));
        let mut forms = Vec::with_capacity(n_words);
        let mut own: BTreeSet<String> = BTreeSet::new();
        for w in 0..n_words {
            let borrowed = shared
                .iter()
                .filter(|((_, hi), ids)| *hi == li && ids.contains(&w))
                .map(|((lo, _), _)| ciphers[*lo].forms[w].clone())
                .find(|f| !own.contains(f));
            let form = match borrowed {
                Some(f) => f,
                None => loop {
                    let f = pseudo_word(&mut r);
                    if !used.contains(&f) {
                        break f;
                    }
                },
            };
            used.insert(form.clone());
            own.insert(form.clone());
            forms.push(form);
        }
        let inverse = forms.iter().enumerate().map(|(i, f)| (f.clone(), i)).collect();
        ciphers.push(Cipher {
            forms,
            inverse,
            reorder: cfg.reordered.contains(lang),
        });
    }

    let mut task = CipherTask {
        config: cfg.clone(),
        lexicon,
        ciphers,
        parallel: Vec::new(),
        mono: Vec::new(),
        dev: DevSet::new(Vec::new(), Vec::new())?,
        devtest: DevSet::new(Vec::new(), Vec::new())?,
    };

    for ((a, b), &n) in &cfg.parallel_sizes {
        let mut r = rng::stream(cfg.seed, rng::label(&format!("cipher/parallel/{a}-{b}")));
        let (ia, ib) = (task.index(a)?, task.index(b)?);
        let mut corpus = Corpus::new(Direction::new(a.clone(), b.clone())?);
        for _ in 0..n {
            let latent = task.lexicon.sentence(&mut r, cfg.sentence_len_range);
            corpus.push(SentencePair::new(
                a.clone(),
                b.clone(),
                task.render(&latent, ia),
                task.render(&latent, ib),
                Origin::Parallel,
            )?)?;
        }
        task.parallel.push(corpus);
    }
    for (lang, &n) in &cfg.mono_sizes {
        let mut r = rng::stream(cfg.seed, rng::label(&format!("cipher/mono/{lang}")));
        let li = task.index(lang)?;
        let sentences = (0..n)
            .map(|_| task.render(&task.lexicon.sentence(&mut r, cfg.sentence_len_range), li))
            .collect();
        task.mono.push(MonoCorpus::new(lang.clone(), sentences)?);
    }
    task.dev = task.multiway("dev", cfg.dev_size)?;
    task.devtest = task.multiway("devtest", cfg.devtest_size)?;
    Ok(task)
}

impl CipherTask {
    fn index(&self, lang: &LanguageId) -> Result<usize> {
        self.config
            .languages
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| Error::invalid(format!("language {lang} is not part of the task")))
    }

    fn multiway(&self, split: &str, n: usize) -> Result<DevSet> {
        let mut r = rng::stream(self.config.seed, rng::label(&format!("cipher/{split}")));
        let latents: Vec<Latent> = (0..n)
            .map(|_| self.lexicon.sentence(&mut r, self.config.sentence_len_range))
            .collect();
        let sentences = (0..self.config.languages.len())
            .map(|li| latents.iter().map(|s| self.render(s, li)).collect())
            .collect();
        DevSet::new(self.config.languages.clone(), sentences)
    }

    fn render(&self, latent: &[(Category, usize)], lang: usize) -> String {
        let cipher = &self.ciphers[lang];
        let mut order: Vec<(Category, usize)> = latent.to_vec();
        if cipher.reorder {
            let mut i = 0;
            while i + 1 < order.len() {
                if order[i].0 == Category::Adj && order[i + 1].0 == Category::Noun {
                    order.swap(i, i + 1);
                    i += 2;
                } else {
                    i += 1;
                }
            }
        }
        order
            .iter()
            .map(|&(c, i)| cipher.forms[self.lexicon.id(c, i)].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn parse(&self, text: &str, lang: usize) -> Option<Latent> {
        let cipher = &self.ciphers[lang];
        let mut words: Vec<(Category, usize)> = text
            .split_whitespace()
            .map(|w| cipher.inverse.get(w).map(|&id| self.lexicon.word(id)))
            .collect::<Option<_>>()?;
        if cipher.reorder {
            let mut i = 0;
            while i + 1 < words.len() {
                if words[i].0 == Category::Noun && words[i + 1].0 == Category::Adj {
                    words.swap(i, i + 1);
                    i += 2;
                } else {
                    i += 1;
                }
            }
        }
        Some(words)
    }

    /// Ground-truth translation, or `None` if `text` is not a sentence of
    /// `from`'s surface vocabulary.
    pub fn translate_exact(&self, text: &str, from: &LanguageId, to: &LanguageId) -> Option<String> {
        let (f, t) = (self.index(from).ok()?, self.index(to).ok()?);
        let latent = self.parse(text, f)?;
        Some(self.render(&latent, t))
    }

    /// Surface vocabulary of `lang`.
    pub fn surface_forms(&self, lang: &LanguageId) -> Option<&[String]> {
        self.index(lang).ok().map(|i| self.ciphers[i].forms.as_slice())
    }

    pub fn languages(&self) -> &[LanguageId] {
        &self.config.languages
    }
}

impl Translator for CipherTask {
    fn supports(&self, src: &LanguageId, tgt: &LanguageId) -> bool {
        self.index(src).is_ok() && self.index(tgt).is_ok()
    }

    fn translate(
        &self,
        text: &str,
        src: &LanguageId,
        tgt: &LanguageId,
        _strategy: DecodeStrategy,
        _seed: u64,
        _index: u64,
    ) -> Result<String> {
        self.translate_exact(text, src, tgt).ok_or_else(|| {
            Error::invalid(format!("{text:?} is not a {src} sentence of this cipher task"))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lang(c: &str) -> LanguageId {
        LanguageId::new(c).unwrap()
    }

    fn config() -> CipherTaskConfig {
        let (a, b, c) = (lang("xa"), lang("xb"), lang("xc"));
        let mut cfg = CipherTaskConfig::minimal(a.clone(), b.clone());
        cfg.languages.push(c.clone());
        cfg.similar_pairs = vec![(b.clone(), c.clone())];
        cfg.overlap = 0.5;
        cfg.reordered = vec![c.clone()];
        cfg.parallel_sizes = BTreeMap::from([((a.clone(), b.clone()), 30), ((b.clone(), c.clone()), 20)]);
        cfg.mono_sizes = BTreeMap::from([(a, 10), (c, 7)]);
        cfg.dev_size = 25;
        cfg.devtest_size = 5;
        cfg.seed = 11;
        cfg
    }

    #[test]
    fn parallel_pairs_decode_exactly() {
        let task = generate_cipher_task(&config()).unwrap();
        assert_eq!(task.parallel.len(), 2);
        for corpus in &task.parallel {
            for p in corpus.pairs() {
                assert_eq!(
                    task.translate_exact(&p.src, &p.src_lang, &p.tgt_lang).as_deref(),
                    Some(p.tgt.as_str())
                );
                assert_eq!(
                    task.translate_exact(&p.tgt, &p.tgt_lang, &p.src_lang).as_deref(),
                    Some(p.src.as_str())
                );
            }
        }
        assert_eq!(task.dev.len(), 25);
        assert_eq!(task.mono.iter().map(|m| m.len()).collect::<Vec<_>>(), vec![10, 7]);
    }

    #[test]
    fn lengths_respect_range() {
        let mut cfg = config();
        cfg.sentence_len_range = (5, 6);
        let task = generate_cipher_task(&cfg).unwrap();
        for s in &task.dev.sentences[0] {
            let n = s.split_whitespace().count();
            assert!((5..=6).contains(&n), "{s}");
        }
    }

    #[test]
    fn overlap_extremes() {
        let mut cfg = config();
        cfg.overlap = 0.0;
        let task = generate_cipher_task(&cfg).unwrap();
        let b: BTreeSet<_> = task.surface_forms(&lang("xb")).unwrap().iter().collect();
        let c: BTreeSet<_> = task.surface_forms(&lang("xc")).unwrap().iter().collect();
        assert!(b.is_disjoint(&c));

        cfg.overlap = 1.0;
        cfg.reordered.clear();
        let task = generate_cipher_task(&cfg).unwrap();
        assert_eq!(task.surface_forms(&lang("xb")), task.surface_forms(&lang("xc")));
        for s in &task.dev.sentences[1] {
            assert_eq!(task.translate_exact(s, &lang("xb"), &lang("xc")).as_deref(), Some(s.as_str()));
        }

        cfg.overlap = 1.5;
        assert!(matches!(generate_cipher_task(&cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_cipher_task(&config()).unwrap();
        let b = generate_cipher_task(&config()).unwrap();
        assert_eq!(a.parallel, b.parallel);
        assert_eq!(a.mono, b.mono);
        assert_eq!(a.dev, b.dev);
        let mut other = config();
        other.seed = 12;
        assert_ne!(generate_cipher_task(&other).unwrap().dev, a.dev);
    }

    #[test]
    fn frozen_output_for_pinned_seed() {
        let task = generate_cipher_task(&config()).unwrap();
        let first = &task.parallel[0].pairs()[0];
        // Guards cross-platform stability of the generator.
        assert_eq!(first.src, "zetoustoun kon lunrainmai widai vou zigonshaik");
        assert_eq!(first.tgt, "haikpegu kouguk kasno baishu bunfe chur");
        assert_eq!(task.mono[0].sentences[0], "vou wairshoshour fidin widai");
    }
}
