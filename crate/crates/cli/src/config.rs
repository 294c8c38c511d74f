//! Experiment configuration files.
//!
//! A config is a `[section]` / `key = value` document. Validation errors
//! carry the line number of the offending key or section.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mbt_core::backtranslation::SyntheticFilterConfig;
use mbt_core::kv::{Document, Section};
use mbt_core::training::Selection;
use mbt_core::{CipherTaskConfig, DecodeStrategy, Direction, Error, LanguageId, ModelConfig, Result, TrainConfig};

/// Where the corpora of an experiment come from.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskSource {
    /// Generated by the cipher-language task generator.
    Cipher(CipherTaskConfig),
    /// Read through a corpus manifest; files live next to it.
    Manifest(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerBlock {
    /// Vocabulary sizes trained and compared.
    pub vocab_sizes: Vec<usize>,
    /// The size used by all later stages.
    pub use_size: usize,
    /// Training steps per model in the vocabulary comparison.
    pub compare_steps: u64,
}

/// Which model generates a round's synthetic data.
#[derive(Debug, Clone, PartialEq)]
pub enum GeneratorRef {
    /// The model trained from scratch on all parallel data.
    Teacher,
    /// The parallel-only finetuned model.
    Baseline,
    /// The model produced by the preceding round (the baseline for the
    /// first listed round).
    Previous,
    /// A checkpoint file.
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundSpec {
    pub round: u32,
    pub generator: GeneratorRef,
    pub strategy: DecodeStrategy,
    pub mono_caps: BTreeMap<LanguageId, usize>,
    pub filter: SyntheticFilterConfig,
    pub mix_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepBlock {
    pub strategies: Vec<DecodeStrategy>,
    /// Monolingual sentences per language at each sweep point.
    pub volumes: Vec<usize>,
    pub generator: GeneratorRef,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalBlock {
    pub strategy: DecodeStrategy,
    pub dev_max_sentences: usize,
    pub devtest_max_sentences: usize,
    /// Direction singled out in reports as the low-resource one.
    pub low_resource: Option<Direction>,
    /// Direction singled out in reports as a high-resource one.
    pub high_resource: Option<Direction>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub temperature: f64,
    pub selection: Selection,
    pub task: TaskSource,
    pub tokenizer: TokenizerBlock,
    /// Kept as a section: the model dimensions depend on the vocab size.
    pub model: Section,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub rounds: Vec<RoundSpec>,
    pub sweep: Option<SweepBlock>,
    pub eval: EvalBlock,
    /// The config text exactly as read, used for the run hash.
    pub source: String,
}

fn section<'a>(doc: &'a Document, name: &str) -> Result<&'a Section> {
    doc.section(name)
        .ok_or_else(|| Error::config(format!("config has no [{name}] section")))
}

fn parse_pair(s: &Section, key: &str, text: &str) -> Result<(LanguageId, LanguageId)> {
    let d: Direction = text.parse().map_err(|e| s.key_error(key, e))?;
    Ok((d.src, d.tgt))
}

/// `a:1, b:2` → map.
fn parse_caps(s: &Section, key: &str) -> Result<BTreeMap<LanguageId, usize>> {
    let mut out = BTreeMap::new();
    let Some(v) = s.get(key) else { return Ok(out) };
    for item in v.split(',').map(str::trim).filter(|i| !i.is_empty()) {
        let (l, n) = item
            .split_once(':')
            .ok_or_else(|| s.key_error(key, format!("item {item:?} is not lang:count")))?;
        let lang: LanguageId = l.trim().parse().map_err(|e| s.key_error(key, e))?;
        let n: usize = n.trim().parse().map_err(|e| s.key_error(key, format!("{item:?}: {e}")))?;
        if out.insert(lang.clone(), n).is_some() {
            return Err(s.key_error(key, format!("language {lang} listed twice")));
        }
    }
    Ok(out)
}

fn parse_generator(s: &Section, key: &str, default: GeneratorRef, base: &Path) -> GeneratorRef {
    match s.get(key) {
        None => default,
        Some("teacher") => GeneratorRef::Teacher,
        Some("baseline") => GeneratorRef::Baseline,
        Some("previous") => GeneratorRef::Previous,
        Some(p) => GeneratorRef::Path(base.join(p)),
    }
}

fn parse_cipher(doc: &Document, s: &Section, seed: u64) -> Result<CipherTaskConfig> {
    let languages: Vec<LanguageId> = s
        .parse_list("languages")?
        .ok_or_else(|| s.key_error("languages", "missing"))?;
    if languages.len() < 2 {
        return Err(s.key_error("languages", "need at least two languages"));
    }
    let mut cfg = CipherTaskConfig::minimal(languages[0].clone(), languages[1].clone());
    cfg.languages = languages.clone();
    cfg.base_vocab_size = s.parse_or("base_vocab_size", cfg.base_vocab_size)?;
    cfg.overlap = s.parse_or("overlap", cfg.overlap)?;
    if let Some(v) = s.get("similar_pairs") {
        for item in v.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            cfg.similar_pairs.push(parse_pair(s, "similar_pairs", item)?);
        }
    }
    cfg.reordered = s.parse_list("reordered")?.unwrap_or_default();
    if let Some(v) = s.get("sentence_len") {
        let (lo, hi) = v
            .split_once('-')
            .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)))
            .ok_or_else(|| s.key_error("sentence_len", "expected MIN-MAX"))?;
        cfg.sentence_len_range = (lo, hi);
    }
    cfg.dev_size = s.parse_or("dev_size", cfg.dev_size)?;
    cfg.devtest_size = s.parse_or("devtest_size", cfg.devtest_size)?;
    cfg.seed = s.parse_or("seed", seed)?;
    let known = |l: &LanguageId| languages.contains(l);
    if let Some(p) = doc.section("task.parallel") {
        for e in &p.entries {
            let pair = parse_pair(p, &e.key, &e.key)?;
            if !known(&pair.0) || !known(&pair.1) {
                return Err(p.key_error(&e.key, "pair uses a language not listed in [task] languages"));
            }
            let n: usize = p.parse(&e.key)?.unwrap();
            cfg.parallel_sizes.insert(pair, n);
        }
    }
    if let Some(m) = doc.section("task.mono") {
        for e in &m.entries {
            let lang: LanguageId = e.key.parse().map_err(|err| m.key_error(&e.key, err))?;
            if !known(&lang) {
                return Err(m.key_error(&e.key, "language not listed in [task] languages"));
            }
            cfg.mono_sizes.insert(lang, m.parse(&e.key)?.unwrap());
        }
    }
    for (l, k) in cfg.reordered.iter().map(|l| (l, "reordered")) {
        if !known(l) {
            return Err(s.key_error(k, format!("unknown language {l}")));
        }
    }
    if cfg.parallel_sizes.is_empty() {
        return Err(s.error("cipher task needs a [task.parallel] section with at least one pair"));
    }
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| e.context(path.display()))
    }

    /// Parses and validates a config. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let doc = Document::parse(text)?;
        for s in &doc.sections {
            let known = matches!(
                s.name.as_str(),
                "experiment" | "task" | "task.parallel" | "task.mono" | "tokenizer" | "model" | "pretrain" | "finetune" | "sweep" | "eval"
            ) || s.name.starts_with("round.");
            if !known {
                return Err(s.error("unknown section"));
            }
        }
        let exp = section(&doc, "experiment")?;
        exp.check_keys(&["name", "seed", "temperature", "selection"])?;
        let name = exp.require("name")?.to_string();
        let seed = exp.parse_or("seed", 1u64)?;
        let temperature: f64 = exp.parse_or("temperature", 5.0)?;
        if !(temperature > 0.0) {
            return Err(exp.key_error("temperature", "must be positive"));
        }
        let selection = exp.parse_or("selection", Selection::Average { k: 15 })?;

        let task_s = section(&doc, "task")?;
        let task = match (task_s.get("kind"), task_s.get("manifest")) {
            (Some("cipher"), None) => {
                task_s.check_keys(&[
                    "kind",
                    "languages",
                    "base_vocab_size",
                    "overlap",
                    "similar_pairs",
                    "reordered",
                    "sentence_len",
                    "dev_size",
                    "devtest_size",
                    "seed",
                ])?;
                TaskSource::Cipher(parse_cipher(&doc, task_s, seed)?)
            }
            (None, Some(m)) => {
                task_s.check_keys(&["manifest"])?;
                let p = base.join(m);
                if !p.is_file() {
                    return Err(task_s.key_error("manifest", format!("{} does not exist", p.display())));
                }
                TaskSource::Manifest(p)
            }
            (Some(k), None) => return Err(task_s.key_error("kind", format!("unknown task kind {k:?}"))),
            _ => return Err(task_s.error("exactly one of `kind = cipher` or `manifest = PATH` is required")),
        };

        let tok = section(&doc, "tokenizer")?;
        tok.check_keys(&["vocab_sizes", "use", "compare_steps"])?;
        let vocab_sizes: Vec<usize> = tok
            .parse_list("vocab_sizes")?
            .ok_or_else(|| tok.key_error("vocab_sizes", "missing"))?;
        if vocab_sizes.is_empty() {
            return Err(tok.key_error("vocab_sizes", "list is empty"));
        }
        let use_size = tok.parse_or("use", *vocab_sizes.last().unwrap())?;
        if !vocab_sizes.contains(&use_size) {
            return Err(tok.key_error("use", "must be one of vocab_sizes"));
        }
        let tokenizer = TokenizerBlock {
            vocab_sizes,
            use_size,
            compare_steps: tok.parse_or("compare_steps", 0)?,
        };

        let model = section(&doc, "model")?.clone();
        // Validate the model block against a placeholder vocab size.
        ModelConfig::from_section(&model, use_size)?;

        let train_block = |name: &str| -> Result<TrainConfig> {
            match doc.section(name) {
                None => Ok(TrainConfig {
                    seed,
                    ..TrainConfig::default()
                }),
                Some(s) => {
                    let mut c = TrainConfig::from_section(s)?;
                    if s.get("seed").is_none() {
                        c.seed = seed;
                    }
                    Ok(c)
                }
            }
        };
        let pretrain = train_block("pretrain")?;
        let finetune = train_block("finetune")?;

        let mut rounds: Vec<RoundSpec> = Vec::new();
        for s in doc.sections_with_prefix("round.") {
            s.check_keys(&["generator", "strategy", "mono", "filter_max_len", "filter_max_ratio", "mix_ratio"])?;
            let round: u32 = s.name["round.".len()..]
                .parse()
                .map_err(|_| s.error("round sections are named [round.N]"))?;
            if round == 0 {
                return Err(s.error("round numbers start at 1"));
            }
            if let Some(prev) = rounds.last() {
                if round <= prev.round {
                    return Err(s.error(format!("round {round} follows round {}: rounds must increase", prev.round)));
                }
            }
            let strategy: DecodeStrategy = s
                .parse("strategy")?
                .ok_or_else(|| s.key_error("strategy", "missing"))?;
            strategy.validate().map_err(|e| s.key_error("strategy", e))?;
            let default_gen = if rounds.is_empty() {
                GeneratorRef::Teacher
            } else {
                GeneratorRef::Previous
            };
            let filter = SyntheticFilterConfig {
                max_len: s.parse_or("filter_max_len", 250)?,
                max_ratio: s.parse_or("filter_max_ratio", 1.8)?,
            };
            filter.validate().map_err(|e| s.error(e))?;
            let mix_ratio: f64 = s.parse_or("mix_ratio", 5.0)?;
            if !(mix_ratio > 0.0) {
                return Err(s.key_error("mix_ratio", "must be positive"));
            }
            rounds.push(RoundSpec {
                round,
                generator: parse_generator(s, "generator", default_gen, base),
                strategy,
                mono_caps: parse_caps(s, "mono")?,
                filter,
                mix_ratio,
            });
        }

        let sweep = match doc.section("sweep") {
            None => None,
            Some(s) => {
                s.check_keys(&["strategies", "volumes", "generator"])?;
                let strategies = s.parse_list("strategies")?.unwrap_or_else(|| {
                    vec![
                        DecodeStrategy::Beam { size: 5 },
                        DecodeStrategy::TopK { k: 10 },
                        DecodeStrategy::Unconstrained,
                    ]
                });
                let volumes: Vec<usize> = s.parse_list("volumes")?.ok_or_else(|| s.key_error("volumes", "missing"))?;
                for st in &strategies {
                    st.validate().map_err(|e| s.key_error("strategies", e))?;
                }
                if volumes.is_empty() || strategies.is_empty() {
                    return Err(s.error("sweep needs at least one strategy and one volume"));
                }
                Some(SweepBlock {
                    strategies,
                    volumes,
                    generator: parse_generator(s, "generator", GeneratorRef::Teacher, base),
                })
            }
        };

        let eval = match doc.section("eval") {
            None => EvalBlock {
                strategy: DecodeStrategy::Beam { size: 5 },
                dev_max_sentences: usize::MAX,
                devtest_max_sentences: usize::MAX,
                low_resource: None,
                high_resource: None,
            },
            Some(s) => {
                s.check_keys(&["strategy", "dev_max_sentences", "devtest_max_sentences", "low_resource", "high_resource"])?;
                if let Some(st) = s.parse::<DecodeStrategy>("strategy")? {
                    st.validate().map_err(|e| s.key_error("strategy", e))?;
                }
                EvalBlock {
                    strategy: s.parse_or("strategy", DecodeStrategy::Beam { size: 5 })?,
                    dev_max_sentences: s.parse_or("dev_max_sentences", usize::MAX)?,
                    devtest_max_sentences: s.parse_or("devtest_max_sentences", usize::MAX)?,
                    low_resource: s.parse("low_resource")?,
                    high_resource: s.parse("high_resource")?,
                }
            }
        };

        let cfg = ExperimentConfig {
            name,
            seed,
            temperature,
            selection,
            task,
            tokenizer,
            model,
            pretrain,
            finetune,
            rounds,
            sweep,
            eval,
            source: text.to_string(),
        };
        cfg.check_languages(&doc)?;
        Ok(cfg)
    }

    /// Languages of a cipher task; `None` for manifest tasks until loaded.
    pub fn cipher_languages(&self) -> Option<&[LanguageId]> {
        match &self.task {
            TaskSource::Cipher(c) => Some(&c.languages),
            TaskSource::Manifest(_) => None,
        }
    }

    fn check_languages(&self, doc: &Document) -> Result<()> {
        let Some(langs) = self.cipher_languages() else { return Ok(()) };
        let TaskSource::Cipher(c) = &self.task else { return Ok(()) };
        for r in &self.rounds {
            let s = doc.section(&format!("round.{}", r.round)).unwrap();
            for (l, &cap) in &r.mono_caps {
                if !langs.contains(l) {
                    return Err(s.key_error("mono", format!("unknown language {l}")));
                }
                let avail = c.mono_sizes.get(l).copied().unwrap_or(0);
                if cap > avail {
                    return Err(s.key_error("mono", format!("cap {cap} for {l} exceeds the {avail} monolingual sentences")));
                }
            }
        }
        if let Some(f) = &self.sweep {
            let s = doc.section("sweep").unwrap();
            for &v in &f.volumes {
                if let Some((l, &avail)) = c.mono_sizes.iter().find(|(_, &n)| v > n) {
                    return Err(s.key_error("volumes", format!("volume {v} exceeds the {avail} monolingual sentences of {l}")));
                }
            }
        }
        if let Some(s) = doc.section("eval") {
            for (key, d) in [("low_resource", &self.eval.low_resource), ("high_resource", &self.eval.high_resource)] {
                if let Some(d) = d {
                    if !langs.contains(&d.src) || !langs.contains(&d.tgt) {
                        return Err(s.key_error(key, format!("direction {d} uses an unknown language")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Model configuration for a vocabulary of `vocab_size` tokens.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        ModelConfig::from_section(&self.model, vocab_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
[experiment]
name = t
seed = 3

[task]
kind = cipher
languages = aa, bb

[task.parallel]
aa-bb = 20

[task.mono]
bb = 10

[tokenizer]
vocab_sizes = 100

[model]
preset = tiny

[round.1]
strategy = topk:10
mono = bb:10
";

    #[test]
    fn parses_minimal_config() {
        let c = ExperimentConfig::parse(MINIMAL, Path::new(".")).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.tokenizer.use_size, 100);
        assert_eq!(c.rounds.len(), 1);
        assert_eq!(c.rounds[0].generator, GeneratorRef::Teacher);
        assert_eq!(c.pretrain.seed, 3);
        assert_eq!(c.temperature, 5.0);
    }

    fn err_line(text: &str) -> String {
        let e = ExperimentConfig::parse(text, Path::new(".")).unwrap_err();
        assert!(e.is_config(), "{e}");
        e.to_string()
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = MINIMAL.replace("strategy = topk:10", "strategy = nucleus");
        assert!(err_line(&bad).contains("line 22"), "{}", err_line(&bad));
        let bad = MINIMAL.replace("mono = bb:10", "mono = bb:11");
        assert!(err_line(&bad).contains("line 23"));
        let bad = MINIMAL.replace("vocab_sizes = 100", "vocab_sizes = 100\ncolour = red");
        assert!(err_line(&bad).contains("line 17"));
    }

    #[test]
    fn rounds_must_increase() {
        let bad = format!("{}\n[round.1]\nstrategy = beam:5\n", MINIMAL.replace("[round.1]", "[round.2]"));
        assert!(err_line(&bad).contains("must increase"), "{}", err_line(&bad));
        let dup = format!("{MINIMAL}\n[round.1]\nstrategy = beam:5\n");
        assert!(err_line(&dup).contains("duplicate section"));
    }

    #[test]
    fn exactly_one_task_source() {
        let bad = MINIMAL.replace("kind = cipher", "kind = cipher\nmanifest = x.txt");
        assert!(err_line(&bad).contains("exactly one"));
        let missing = MINIMAL.replace("kind = cipher", "manifest = does/not/exist.txt");
        assert!(ExperimentConfig::parse(&missing, Path::new(".")).is_err());
    }
}
