//! The staged experiment pipeline and its run directory.
//!
//! Every stage reads its inputs from the run directory and writes its
//! outputs back to it, so a resumed run behaves exactly like a fresh one.
//!
//! Layout:
//!
//! ```text
//! data/                 corpora + data/manifest.txt
//! vocab/bpeN.txt        one vocabulary per configured size
//! vocab/comparison.tsv  vocabulary-size comparison
//! models/<stage>/       model.ckpt, log.tsv, summary.txt, dev.tsv, checkpoints/
//! rounds/roundN/        report.txt and the synthetic corpora
//! sweep/<cell>/         report.txt per strategy and volume; sweep.tsv
//! matrix_grid.tsv       devtest spBLEU grid of the final model
//! matrix_flat.tsv       the same scores as src/tgt/score lines
//! stages/<stage>.done   completion markers used by --resume
//! manifest.txt          inputs, seed, tool version and artifact hashes
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use mbt_core::backtranslation::{build_round_mixture, evaluate_model, EvalSettings, RoundInputs};
use mbt_core::corpus::io::{read_lines, write_devset, write_lines, write_mono, write_parallel, CorpusManifest, LoadedCorpora, MonoEntry, ParallelEntry};
use mbt_core::decoding::IdentityTranslator;
use mbt_core::error::ResultExt;
use mbt_core::rng;
use mbt_core::training::{log_tsv, select_model, CheckpointStore, TrainData};
use mbt_core::{
    bpe_encode, bpe_train, distinct_n, generate_cipher_task, run_bt_round, sample_mixture, score_matrix, train,
    BpeVocab, BtRoundConfig, Checkpoint, DecodeStrategy, Direction, Error, LanguageId, ModelConfig, ModelParams,
    NmtSystem, Result, ScoreMatrix, StopRule, TrainConfig, TrainOutcome,
};

use crate::config::{ExperimentConfig, GeneratorRef, RoundSpec, TaskSource};

/// Name of the corpora written by `prepare`.
const DATA_NAME: &str = "train";

/// One unit of work with on-disk outputs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Prepare,
    Bpe,
    VocabExp,
    Teacher,
    Baseline,
    Round(u32),
    Sweep,
    Matrix,
}

impl Stage {
    pub fn name(&self) -> String {
        match self {
            Stage::Prepare => "prepare".into(),
            Stage::Bpe => "bpe".into(),
            Stage::VocabExp => "vocab-exp".into(),
            Stage::Teacher => "teacher".into(),
            Stage::Baseline => "baseline".into(),
            Stage::Round(r) => format!("round-{r}"),
            Stage::Sweep => "sweep".into(),
            Stage::Matrix => "matrix".into(),
        }
    }
}

/// SHA-256 of `bytes` as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash identifying a config at a given seed.
pub fn config_hash(config: &ExperimentConfig) -> String {
    sha256_hex(format!("{}\n#seed={}\n", config.source, config.seed).as_bytes())
}

/// Parses the `src<TAB>tgt<TAB>score` listing written by [`ScoreMatrix::flat_tsv`].
pub fn read_flat_scores(path: &Path, langs: Vec<LanguageId>) -> Result<ScoreMatrix> {
    let mut scores = BTreeMap::new();
    for (i, line) in read_lines(path)?.iter().enumerate().skip(1) {
        let bad = || Error::format(format!("{} line {}: expected src, tgt, score", path.display(), i + 1));
        let mut it = line.split('\t');
        let (Some(s), Some(t), Some(v), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(bad());
        };
        let d = Direction::new(s.parse()?, t.parse()?)?;
        scores.insert(d, v.parse::<f64>().map_err(|_| bad())?);
    }
    Ok(ScoreMatrix { langs, scores })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Every regular file below `root`, as sorted `/`-separated relative paths.
pub fn list_files(root: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("below root");
                out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

/// Artifact hashes recorded in a manifest, keyed by relative path.
pub fn manifest_artifacts(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc = mbt_core::kv::Document::parse(&text)?;
    let s = doc
        .section("artifacts")
        .ok_or_else(|| Error::format(format!("{} has no [artifacts] section", path.display())))?;
    Ok(s.entries.iter().map(|e| (e.key.clone(), e.value.clone())).collect())
}

/// Inputs every stage shares once `prepare` and `bpe` have run.
struct Context {
    data: LoadedCorpora,
    vocab: BpeVocab,
    model: ModelConfig,
}

impl Context {
    fn dev(&self) -> Result<&mbt_core::DevSet> {
        self.data.dev.as_ref().ok_or_else(|| Error::config("the task has no dev set"))
    }

    /// Directions with parallel data, both reading directions.
    fn train_directions(&self) -> Vec<Direction> {
        let mut d: Vec<Direction> = self
            .data
            .parallel
            .iter()
            .flat_map(|c| [c.direction.clone(), c.direction.reversed()])
            .collect();
        d.sort();
        d.dedup();
        d
    }
}

/// A run directory bound to a config.
pub struct Run {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    /// Skip stages that have a completion marker.
    pub resume: bool,
}

impl Run {
    /// Picks the run directory: `out` when given, otherwise
    /// `<runs_root>/<hash12>-<unix time>`; with `resume` and no `out`, the
    /// newest existing directory for this config.
    pub fn locate(config: ExperimentConfig, out: Option<&Path>, runs_root: &Path, resume: bool) -> Result<Run> {
        let prefix = format!("{}-", &config_hash(&config)[..12]);
        let dir = match out {
            Some(o) => o.to_path_buf(),
            None => {
                let existing = if resume && runs_root.is_dir() {
                    let mut names: Vec<String> = fs::read_dir(runs_root)?
                        .filter_map(|e| e.ok())
                        .map(|e| e.file_name().to_string_lossy().into_owned())
                        .filter(|n| n.starts_with(&prefix))
                        .collect();
                    names.sort_by_key(|n| n[prefix.len()..].parse::<u64>().unwrap_or(0));
                    names.pop()
                } else {
                    None
                };
                match existing {
                    Some(n) => runs_root.join(n),
                    None => {
                        let now = std::time::SystemTime::now()
                            .duration_since(std::time::UNIX_EPOCH)
                            .map(|d| d.as_secs())
                            .unwrap_or(0);
                        runs_root.join(format!("{prefix}{now}"))
                    }
                }
            }
        };
        Ok(Run { dir, config, resume })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn marker(&self, stage: &Stage) -> PathBuf {
        self.dir.join("stages").join(format!("{}.done", stage.name()))
    }

    pub fn is_done(&self, stage: &Stage) -> bool {
        self.marker(stage).is_file()
    }

    /// Stages in execution order, from the data up to `last` inclusive. Only
    /// configured rounds and blocks are included.
    pub fn plan_through(&self, last: &Stage) -> Vec<Stage> {
        let mut all = vec![Stage::Prepare, Stage::Bpe];
        if self.config.tokenizer.compare_steps > 0 && self.config.tokenizer.vocab_sizes.len() > 1 {
            all.push(Stage::VocabExp);
        }
        all.push(Stage::Teacher);
        all.push(Stage::Baseline);
        all.extend(self.config.rounds.iter().map(|r| Stage::Round(r.round)));
        if self.config.sweep.is_some() {
            all.push(Stage::Sweep);
        }
        all.push(Stage::Matrix);
        match all.iter().position(|s| s == last) {
            Some(i) => all.truncate(i + 1),
            None => {}
        }
        all
    }

    /// Runs `stages` in order, then rewrites the manifest.
    pub fn execute(&self, stages: &[Stage]) -> Result<()> {
        create_dir(&self.dir)?;
        for stage in stages {
            if self.resume && self.is_done(stage) {
                log::info!("stage {} already complete; skipping", stage.name());
                continue;
            }
            log::info!("stage {} starting", stage.name());
            let t0 = std::time::Instant::now();
            self.run_stage(stage).with_context(|| format!("stage {}", stage.name()))?;
            write_text(&self.marker(stage), "done\n")?;
            log::info!("stage {} finished in {:.1}s", stage.name(), t0.elapsed().as_secs_f64());
        }
        self.write_manifest()
    }

    fn run_stage(&self, stage: &Stage) -> Result<()> {
        match stage {
            Stage::Prepare => self.prepare(),
            Stage::Bpe => self.bpe(),
            Stage::VocabExp => self.vocab_exp(),
            Stage::Teacher => self.teacher(),
            Stage::Baseline => self.baseline(),
            Stage::Round(r) => self.round(*r),
            Stage::Sweep => self.sweep(),
            Stage::Matrix => self.matrix(),
        }
    }

    fn seed_for(&self, what: &str) -> u64 {
        rng::mix(self.config.seed, rng::label(what))
    }

    // ----- data -----

    fn prepare(&self) -> Result<()> {
        let dir = self.path("data");
        create_dir(&dir)?;
        let data = match &self.config.task {
            TaskSource::Cipher(c) => {
                let task = generate_cipher_task(c)?;
                LoadedCorpora {
                    languages: task.config.languages.clone(),
                    parallel: task.parallel,
                    mono: task.mono,
                    dev: Some(task.dev),
                    devtest: Some(task.devtest),
                }
            }
            TaskSource::Manifest(p) => {
                let m = CorpusManifest::read(p)?;
                m.load(p.parent().unwrap_or(Path::new(".")))?
            }
        };
        let dev = data.dev.as_ref().ok_or_else(|| Error::config("the task needs a dev set"))?;
        for c in &data.parallel {
            write_parallel(&dir, DATA_NAME, c)?;
        }
        for m in &data.mono {
            write_mono(&dir, DATA_NAME, m)?;
        }
        write_devset(&dir, "dev", dev)?;
        if let Some(t) = &data.devtest {
            write_devset(&dir, "devtest", t)?;
        }
        let manifest = CorpusManifest {
            name: DATA_NAME.into(),
            languages: data.languages.clone(),
            parallel: data
                .parallel
                .iter()
                .map(|c| ParallelEntry {
                    direction: c.direction.clone(),
                    count: c.len(),
                    cap: None,
                })
                .collect(),
            mono: data
                .mono
                .iter()
                .map(|m| MonoEntry {
                    lang: m.lang.clone(),
                    count: m.len(),
                    cap: None,
                })
                .collect(),
            dev: Some("dev".into()),
            devtest: data.devtest.as_ref().map(|_| "devtest".into()),
        };
        manifest.write(&dir.join("manifest.txt"))?;
        log::info!(
            "prepared {} parallel corpora ({} pairs), {} monolingual corpora",
            data.parallel.len(),
            data.parallel.iter().map(|c| c.len()).sum::<usize>(),
            data.mono.len()
        );
        Ok(())
    }

    fn load_data(&self) -> Result<LoadedCorpora> {
        let dir = self.path("data");
        CorpusManifest::read(&dir.join("manifest.txt"))?.load(&dir)
    }

    fn vocab_path(&self, size: usize) -> PathBuf {
        self.path(&format!("vocab/bpe{size}.txt"))
    }

    fn bpe(&self) -> Result<()> {
        let data = self.load_data()?;
        create_dir(&self.path("vocab"))?;
        let mut texts: Vec<&[String]> = Vec::new();
        let owned: Vec<Vec<String>> = data
            .parallel
            .iter()
            .map(|c| c.pairs().iter().flat_map(|p| [p.src.clone(), p.tgt.clone()]).collect())
            .collect();
        texts.extend(owned.iter().map(|v| v.as_slice()));
        texts.extend(data.mono.iter().map(|m| m.sentences()));
        for &size in &self.config.tokenizer.vocab_sizes {
            let vocab = bpe_train(texts.iter().map(|t| t.iter()), size, &data.languages)?;
            log::info!("vocab target {size}: {} tokens, {} merges", vocab.len(), vocab.merges().len());
            vocab.save(&self.vocab_path(size))?;
        }
        Ok(())
    }

    fn context(&self) -> Result<Context> {
        let data = self.load_data()?;
        let vocab = BpeVocab::load(&self.vocab_path(self.config.tokenizer.use_size))?;
        let model = self.config.model_config(vocab.len())?;
        Ok(Context { data, vocab, model })
    }

    fn eval_settings(&self, ctx: &Context) -> EvalSettings {
        EvalSettings {
            strategy: self.config.eval.strategy,
            max_sentences: self.config.eval.dev_max_sentences,
            directions: ctx.train_directions(),
            seed: self.seed_for("eval"),
        }
    }

    // ----- models -----

    fn model_dir(&self, stage: &str) -> PathBuf {
        self.path(&format!("models/{stage}"))
    }

    fn save_model(&self, stage: &str, ctx: &Context, outcome: &TrainOutcome, model: &ModelParams<f32>) -> Result<ScoreMatrix> {
        let dir = self.model_dir(stage);
        create_dir(&dir)?;
        Checkpoint {
            config: ctx.model.clone(),
            vocab_fingerprint: ctx.vocab.fingerprint(),
            step: outcome.steps,
            params: model.clone(),
            optimizer: None,
        }
        .save(&dir.join("model.ckpt"))?;
        write_text(&dir.join("log.tsv"), &log_tsv(&outcome.log))?;
        let dev = evaluate_model(&ctx.model, model, &ctx.vocab, ctx.dev()?, &self.eval_settings(ctx))?;
        let mut summary = outcome.summary();
        writeln!(summary, "selection = {}", self.config.selection).unwrap();
        writeln!(summary, "dev_mean_spbleu = {:.4}", dev.mean()).unwrap();
        write_text(&dir.join("summary.txt"), &summary)?;
        write_text(&dir.join("dev.tsv"), &dev.flat_tsv())?;
        log::info!("{stage}: dev mean spBLEU {:.2}", dev.mean());
        Ok(dev)
    }

    fn load_model(&self, stage: &str, ctx: &Context) -> Result<ModelParams<f32>> {
        load_checkpoint(&self.model_dir(stage).join("model.ckpt"), ctx)
    }

    fn load_dev(&self, stage: &str, ctx: &Context) -> Result<ScoreMatrix> {
        read_flat_scores(&self.model_dir(stage).join("dev.tsv"), ctx.dev()?.langs.clone())
    }

    fn store(&self, stage: &str, cfg: &TrainConfig) -> Result<CheckpointStore> {
        let dir = self.model_dir(stage).join("checkpoints");
        if dir.is_dir() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        CheckpointStore::new(dir, cfg.keep_last_k_checkpoints)
    }

    /// The temperature-sampled parallel-only mixture.
    fn parallel_mixture(&self, ctx: &Context, seed: u64) -> Result<Vec<mbt_core::SentencePair>> {
        let mut cfg = BtRoundConfig::new(1, DecodeStrategy::Beam { size: 1 });
        cfg.seed = seed;
        let (spec, corpora, _) =
            build_round_mixture(&cfg, &IdentityTranslator, &ctx.data.parallel, &ctx.data.mono, self.config.temperature)?;
        sample_mixture(&spec, &corpora)
    }

    fn train_stage(&self, stage: &str, ctx: &Context, init: ModelParams<f32>, cfg: &TrainConfig) -> Result<()> {
        let pairs = self.parallel_mixture(ctx, self.seed_for(&format!("{stage}/mixture")))?;
        let data = TrainData {
            vocab: &ctx.vocab,
            pairs: &pairs,
            dev: ctx.dev()?,
            valid_directions: ctx.train_directions(),
        };
        let mut store = self.store(stage, cfg)?;
        let outcome = train(&ctx.model, init, &data, cfg, Some(&mut store))?;
        let model = select_model(&outcome, self.config.selection)?;
        self.save_model(stage, ctx, &outcome, &model)?;
        Ok(())
    }

    fn teacher(&self) -> Result<()> {
        let ctx = self.context()?;
        let init = ModelParams::init(&ctx.model, self.seed_for("init"))?;
        self.train_stage("teacher", &ctx, init, &self.config.pretrain)
    }

    fn baseline(&self) -> Result<()> {
        let ctx = self.context()?;
        let init = self.load_model("teacher", &ctx)?;
        let mut cfg = self.config.finetune.clone();
        cfg.seed = rng::mix(cfg.seed, rng::label("baseline"));
        self.train_stage("baseline", &ctx, init, &cfg)
    }

    fn vocab_exp(&self) -> Result<()> {
        let ctx = self.context()?;
        let dev = ctx.dev()?;
        let mut out = String::from("vocab_target\tvocab_size\tmerges\tsubwords_per_sentence\tsteps\tdev_spbleu\n");
        for &size in &self.config.tokenizer.vocab_sizes {
            let vocab = BpeVocab::load(&self.vocab_path(size))?;
            let side = dev.side(&dev.langs[0]).unwrap_or(&[]);
            let subwords: usize = side.iter().map(|s| bpe_encode(&vocab, s).len()).sum();
            let per = subwords as f64 / side.len().max(1) as f64;
            let model = self.config.model_config(vocab.len())?;
            let local = Context {
                data: ctx.data.clone(),
                vocab: vocab.clone(),
                model: model.clone(),
            };
            let pairs = self.parallel_mixture(&local, self.seed_for("vocab-exp/mixture"))?;
            let mut cfg = self.config.pretrain.clone();
            cfg.max_steps = self.config.tokenizer.compare_steps;
            cfg.validate_every = cfg.max_steps;
            let data = TrainData {
                vocab: &vocab,
                pairs: &pairs,
                dev,
                valid_directions: local.train_directions(),
            };
            let outcome = train(&model, ModelParams::init(&model, self.seed_for("init"))?, &data, &cfg, None)?;
            // Score every vocabulary with the segmentation of the vocabulary in
            // use, so the numbers are comparable.
            let system = NmtSystem::new(&model, &outcome.params, &vocab, StopRule::default())?;
            let eval = self.eval_settings(&ctx);
            let scores = score_matrix(
                &system,
                &ctx.vocab,
                &dev.truncated(eval.max_sentences),
                &eval.directions,
                eval.strategy,
                eval.seed,
            )?;
            writeln!(
                out,
                "{size}\t{}\t{}\t{per:.3}\t{}\t{:.4}",
                vocab.len(),
                vocab.merges().len(),
                outcome.steps,
                scores.mean()
            )
            .unwrap();
            log::info!("vocab {size}: dev mean spBLEU {:.2}", scores.mean());
        }
        write_text(&self.path("vocab/comparison.tsv"), &out)
    }

    // ----- back-translation -----

    fn previous_stage(&self, round: u32) -> String {
        let idx = self.config.rounds.iter().position(|r| r.round == round).expect("configured round");
        if idx == 0 {
            "baseline".into()
        } else {
            Stage::Round(self.config.rounds[idx - 1].round).name()
        }
    }

    fn generator(&self, g: &GeneratorRef, previous: &str, ctx: &Context) -> Result<ModelParams<f32>> {
        match g {
            GeneratorRef::Teacher => self.load_model("teacher", ctx),
            GeneratorRef::Baseline => self.load_model("baseline", ctx),
            GeneratorRef::Previous => self.load_model(previous, ctx),
            GeneratorRef::Path(p) => load_checkpoint(p, ctx),
        }
    }

    fn bt_config(&self, spec: &RoundSpec, seed: u64) -> BtRoundConfig {
        BtRoundConfig {
            round: spec.round,
            strategy: spec.strategy,
            mono_caps: spec.mono_caps.clone(),
            filter: spec.filter,
            mix_ratio: spec.mix_ratio,
            seed,
        }
    }

    fn round(&self, round: u32) -> Result<()> {
        let spec = self
            .config
            .rounds
            .iter()
            .find(|r| r.round == round)
            .ok_or_else(|| Error::config(format!("round {round} is not configured")))?;
        let ctx = self.context()?;
        let prev = self.previous_stage(round);
        let previous = self.load_model(&prev, &ctx)?;
        let generator = self.generator(&spec.generator, &prev, &ctx)?;
        let gen_system = NmtSystem::new(&ctx.model, &generator, &ctx.vocab, StopRule::default())?;
        let stage = Stage::Round(round).name();
        let mut train_cfg = self.config.finetune.clone();
        train_cfg.seed = rng::mix(train_cfg.seed, rng::label(&stage));
        let inputs = RoundInputs {
            vocab: &ctx.vocab,
            model_config: &ctx.model,
            generator: &gen_system,
            previous: &previous,
            parallel: &ctx.data.parallel,
            mono: &ctx.data.mono,
            dev: ctx.dev()?,
            train: &train_cfg,
            temperature: self.config.temperature,
            selection: self.config.selection,
            eval: self.eval_settings(&ctx),
            dev_before: Some(self.load_dev(&prev, &ctx)?),
        };
        let mut store = self.store(&stage, &train_cfg)?;
        let outcome = run_bt_round(&self.bt_config(spec, self.seed_for(&stage)), &inputs, Some(&mut store))?;
        let rdir = self.path(&format!("rounds/round{round}"));
        create_dir(&rdir)?;
        for (name, c) in outcome.corpora.iter().filter(|(n, _)| n.starts_with("synthetic.")) {
            let prefix = name.rsplit_once('.').map_or(name.as_str(), |(p, _)| p);
            write_parallel(&rdir, prefix, c)?;
        }
        write_text(&rdir.join("report.txt"), &outcome.report.to_text())?;
        self.save_model(&stage, &ctx, &outcome.training, &outcome.model)?;
        Ok(())
    }

    fn sweep(&self) -> Result<()> {
        let f = self.config.sweep.as_ref().ok_or_else(|| Error::config("no [sweep] block"))?;
        let ctx = self.context()?;
        let baseline = self.load_model("baseline", &ctx)?;
        let generator = self.generator(&f.generator, "baseline", &ctx)?;
        let gen_system = NmtSystem::new(&ctx.model, &generator, &ctx.vocab, StopRule::default())?;
        let dev_before = self.load_dev("baseline", &ctx)?;
        let eval = self.eval_settings(&ctx);
        let low = self.config.eval.low_resource.clone();
        let high = self.config.eval.high_resource.clone();
        let fmt_dir = |m: &ScoreMatrix, d: &Option<Direction>| {
            d.as_ref().and_then(|d| m.get(d)).map_or("-".to_string(), |v| format!("{v:.4}"))
        };
        let mut out = String::from("strategy\tvolume\tsynthetic_accepted\tsynthetic_mixed\tdistinct2\tdev_mean\tdev_low_resource\tdev_high_resource\n");
        writeln!(
            out,
            "none\t0\t0\t0\t-\t{:.4}\t{}\t{}",
            dev_before.mean(),
            fmt_dir(&dev_before, &low),
            fmt_dir(&dev_before, &high)
        )
        .unwrap();
        for &strategy in &f.strategies {
            for &volume in &f.volumes {
                let cell = format!("{}-v{volume}", strategy.to_string().replace(':', ""));
                let caps: BTreeMap<LanguageId, usize> = ctx
                    .data
                    .mono
                    .iter()
                    .map(|m| {
                        if volume > m.len() {
                            Err(Error::config(format!("sweep volume {volume} exceeds the {} sentences of {}", m.len(), m.lang)))
                        } else {
                            Ok((m.lang.clone(), volume))
                        }
                    })
                    .collect::<Result<_>>()?;
                let spec = RoundSpec {
                    round: 1,
                    generator: f.generator.clone(),
                    strategy,
                    mono_caps: caps,
                    filter: Default::default(),
                    mix_ratio: self.config.rounds.first().map_or(5.0, |r| r.mix_ratio),
                };
                let mut train_cfg = self.config.finetune.clone();
                train_cfg.seed = rng::mix(train_cfg.seed, rng::label("sweep"));
                let inputs = RoundInputs {
                    vocab: &ctx.vocab,
                    model_config: &ctx.model,
                    generator: &gen_system,
                    previous: &baseline,
                    parallel: &ctx.data.parallel,
                    mono: &ctx.data.mono,
                    dev: ctx.dev()?,
                    train: &train_cfg,
                    temperature: self.config.temperature,
                    selection: self.config.selection,
                    eval: eval.clone(),
                    dev_before: Some(dev_before.clone()),
                };
                // Same seed for every cell: cells differ only in strategy and volume.
                let outcome = run_bt_round(&self.bt_config(&spec, self.seed_for("sweep")), &inputs, None)
                    .with_context(|| format!("sweep cell {cell}"))?;
                let sources: Vec<String> = outcome
                    .corpora
                    .iter()
                    .filter(|(n, _)| n.starts_with("synthetic."))
                    .flat_map(|(_, c)| c.pairs().iter().map(|p| p.src.clone()))
                    .collect();
                let d2 = distinct_n(&sources, 2).map_or("-".to_string(), |v| format!("{v:.6}"));
                let r = &outcome.report;
                let accepted: usize = r.directions.values().map(|s| s.accepted).sum();
                let mixed: usize = r.directions.values().map(|s| s.mixed).sum();
                writeln!(
                    out,
                    "{strategy}\t{volume}\t{accepted}\t{mixed}\t{d2}\t{:.4}\t{}\t{}",
                    r.dev_after.mean(),
                    fmt_dir(&r.dev_after, &low),
                    fmt_dir(&r.dev_after, &high)
                )
                .unwrap();
                write_text(&self.path(&format!("sweep/{cell}/report.txt")), &r.to_text())?;
                log::info!("sweep {cell}: distinct-2 {d2}, dev mean {:.2}", r.dev_after.mean());
            }
        }
        write_text(&self.path("sweep.tsv"), &out)
    }

    /// Stage whose model is the final result of the configured pipeline.
    pub fn final_stage(&self) -> String {
        self.config
            .rounds
            .last()
            .map_or("baseline".into(), |r| Stage::Round(r.round).name())
    }

    fn matrix(&self) -> Result<()> {
        let ctx = self.context()?;
        let stage = self.final_stage();
        let model = self.load_model(&stage, &ctx)?;
        let set = ctx.data.devtest.as_ref().or(ctx.data.dev.as_ref()).expect("dev checked at prepare");
        let system = NmtSystem::new(&ctx.model, &model, &ctx.vocab, StopRule::default())?;
        let m = score_matrix(
            &system,
            &ctx.vocab,
            &set.truncated(self.config.eval.devtest_max_sentences),
            &[],
            self.config.eval.strategy,
            self.seed_for("matrix"),
        )?;
        write_text(&self.path("matrix_grid.tsv"), &m.grid_tsv())?;
        write_text(&self.path("matrix_flat.tsv"), &m.flat_tsv())?;
        log::info!("matrix ({stage}): {} directions, mean spBLEU {:.2}", m.scores.len(), m.mean());
        Ok(())
    }

    // ----- manifest -----

    /// Writes `manifest.txt`: config hash, seed, tool version, input hashes
    /// and the hash of every artifact in the run directory.
    pub fn write_manifest(&self) -> Result<()> {
        let mut out = String::from("[run]\n");
        writeln!(out, "name = {}", self.config.name).unwrap();
        writeln!(out, "tool = mbt {}", env!("CARGO_PKG_VERSION")).unwrap();
        writeln!(out, "seed = {}", self.config.seed).unwrap();
        writeln!(out, "config_sha256 = {}", config_hash(&self.config)).unwrap();
        writeln!(out, "\n[inputs]").unwrap();
        writeln!(out, "config = {}", sha256_hex(self.config.source.as_bytes())).unwrap();
        if let TaskSource::Manifest(p) = &self.config.task {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            writeln!(out, "corpus_manifest = {}", sha256_hex(&bytes)).unwrap();
        }
        writeln!(out, "\n[stages]").unwrap();
        let stages = self.plan_through(&Stage::Matrix);
        for s in &stages {
            writeln!(out, "{} = {}", s.name(), if self.is_done(s) { "done" } else { "pending" }).unwrap();
        }
        writeln!(out, "\n[artifacts]").unwrap();
        for rel in list_files(&self.dir)? {
            if rel == "manifest.txt" || rel.starts_with("stages/") {
                continue;
            }
            let bytes = fs::read(self.dir.join(&rel))?;
            writeln!(out, "{rel} = {}", sha256_hex(&bytes)).unwrap();
        }
        write_text(&self.path("manifest.txt"), &out)
    }
}

/// Loads a checkpoint and checks it against the run's model and vocabulary.
fn load_checkpoint(path: &Path, ctx: &Context) -> Result<ModelParams<f32>> {
    let c = Checkpoint::load(path)?;
    if c.config != ctx.model {
        return Err(Error::config(format!("{} was trained with a different model config", path.display())));
    }
    if c.vocab_fingerprint != ctx.vocab.fingerprint() {
        return Err(Error::config(format!("{} was trained with a different vocabulary", path.display())));
    }
    Ok(c.params)
}

/// Averages checkpoint files into one model without optimizer state.
pub fn average_checkpoint_files(paths: &[PathBuf], out: &Path) -> Result<Checkpoint> {
    if paths.is_empty() {
        return Err(Error::config("no checkpoints to average"));
    }
    let ckpts = paths
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    for (p, c) in paths.iter().zip(&ckpts).skip(1) {
        if c.vocab_fingerprint != ckpts[0].vocab_fingerprint {
            return Err(Error::config(format!("{} uses a different vocabulary", p.display())));
        }
    }
    let params = mbt_core::average_checkpoints(&ckpts)?;
    let avg = Checkpoint {
        config: ckpts[0].config.clone(),
        vocab_fingerprint: ckpts[0].vocab_fingerprint,
        step: ckpts.iter().map(|c| c.step).max().unwrap_or(0),
        params,
        optimizer: None,
    };
    avg.save(out)?;
    Ok(avg)
}

/// Translation of one file with per-line scores.
pub struct TranslateJob<'a> {
    pub checkpoint: &'a Path,
    pub vocab: &'a Path,
    pub input: &'a Path,
    pub output: &'a Path,
    pub src: LanguageId,
    pub tgt: LanguageId,
    pub strategy: DecodeStrategy,
    pub seed: u64,
}

/// Translates `input` line by line. Writes the translations to `output` and
/// `logprob<TAB>length` per line to `output.scores`.
pub fn translate_file(job: &TranslateJob<'_>) -> Result<usize> {
    let vocab = BpeVocab::load(job.vocab)?;
    let ckpt = Checkpoint::load(job.checkpoint)?;
    if ckpt.vocab_fingerprint != vocab.fingerprint() {
        return Err(Error::config(format!(
            "{} was not trained with vocabulary {}",
            job.checkpoint.display(),
            job.vocab.display()
        )));
    }
    for l in [&job.src, &job.tgt] {
        if vocab.lang_tag(l).is_none() {
            return Err(Error::config(format!("vocabulary has no tag for language {l}")));
        }
    }
    job.strategy.validate().map_err(|e| Error::config(e.to_string()))?;
    let system = NmtSystem::new(&ckpt.config, &ckpt.params, &vocab, StopRule::default())?;
    let lines = read_lines(job.input)?;
    let mut outputs = Vec::with_capacity(lines.len());
    let mut scores = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let src = system.encode_source(line);
        let h = system
            .decode_ids(&src, &job.tgt, job.strategy, job.seed, i as u64)
            .with_context(|| format!("{} line {}", job.input.display(), i + 1))?;
        let body = h.tokens.get(1..).unwrap_or(&[]);
        outputs.push(mbt_core::bpe_decode(&vocab, body)?);
        scores.push(format!("{:.6}\t{}", h.log_prob, body.len()));
    }
    write_lines(job.output, &outputs)?;
    let mut side = job.output.as_os_str().to_owned();
    side.push(".scores");
    write_lines(Path::new(&side), &scores)?;
    Ok(lines.len())
}

/// Checks that everything a config implies is well-formed without touching
/// the disk: builds the task and the model shapes and validates every block.
pub fn dry_run(config: &ExperimentConfig) -> Result<Vec<String>> {
    let mut notes = Vec::new();
    let vocab = config.tokenizer.use_size;
    let model = config.model_config(vocab)?;
    notes.push(format!(
        "model: d_model {} d_ff {} layers {}+{} heads {} (vocab about {vocab})",
        model.d_model, model.d_ff, model.n_layers_enc, model.n_layers_dec, model.n_heads
    ));
    config.pretrain.validate().map_err(|e| e.context("[pretrain]"))?;
    config.finetune.validate().map_err(|e| e.context("[finetune]"))?;
    for r in &config.rounds {
        BtRoundConfig {
            round: r.round,
            strategy: r.strategy,
            mono_caps: r.mono_caps.clone(),
            filter: r.filter,
            mix_ratio: r.mix_ratio,
            seed: config.seed,
        }
        .validate()?;
        if let GeneratorRef::Path(p) = &r.generator {
            if !p.is_file() {
                return Err(Error::config(format!("round {}: generator {} does not exist", r.round, p.display())));
            }
        }
        notes.push(format!("round {}: {} with {} mono languages", r.round, r.strategy, r.mono_caps.len()));
    }
    match &config.task {
        TaskSource::Cipher(c) => {
            let mut probe = c.clone();
            probe.parallel_sizes.values_mut().for_each(|n| *n = (*n).min(1));
            probe.mono_sizes.values_mut().for_each(|n| *n = (*n).min(1));
            probe.dev_size = 1;
            probe.devtest_size = 1;
            generate_cipher_task(&probe).map_err(|e| Error::config(format!("[task]: {e}")))?;
            notes.push(format!("task: cipher with {} languages", c.languages.len()));
        }
        TaskSource::Manifest(p) => {
            let m = CorpusManifest::read(p)?;
            notes.push(format!("task: manifest {} with {} languages", p.display(), m.languages.len()));
        }
    }
    Ok(notes)
}
