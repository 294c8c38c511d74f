//! Command-line interface: subcommands, global flags and exit codes.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use mbt_core::{DecodeStrategy, Error, LanguageId, Result};

use crate::config::ExperimentConfig;
use crate::pipeline::{self, Run, Stage, TranslateJob};

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Exit status for invalid configs and arguments.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for failures while running.
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mbt", version, about = "Multilingual back-translation experiments at desk scale")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Validate the config and report the plan without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Skip stages already completed in the run directory.
    #[arg(long, global = true)]
    pub resume: bool,
    /// Run directory (default: runs/<config hash>-<unix time>).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the task's corpora and train the vocabularies.
    Prepare,
    /// Train the vocabularies and run the vocabulary-size comparison.
    TrainBpe,
    /// Train the teacher from scratch and finetune the baseline.
    Train {
        /// Stop after this stage (teacher or baseline).
        #[arg(long, default_value = "baseline")]
        stage: String,
    },
    /// Translate a file with a checkpoint.
    Translate(TranslateArgs),
    /// Run the configured back-translation rounds.
    Backtranslate {
        /// Stop after this round (default: all configured rounds).
        #[arg(long)]
        round: Option<u32>,
    },
    /// Score the final model on the devtest set of every direction.
    Evaluate,
    /// Average checkpoint files into one model.
    AverageCkpt {
        /// Output checkpoint.
        #[arg(long, value_name = "FILE")]
        output: PathBuf,
        /// Checkpoints to average.
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Run every configured stage.
    Pipeline,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    /// Model checkpoint.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// BPE vocabulary the model was trained with.
    #[arg(long, value_name = "FILE")]
    pub vocab: PathBuf,
    /// Source sentences, one per line.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Translations; scores go to `<output>.scores`.
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
    /// Source language code.
    #[arg(long)]
    pub src: String,
    /// Target language code.
    #[arg(long)]
    pub tgt: String,
    /// beam:N, topk:K or unconstrained.
    #[arg(long, default_value = "beam:5")]
    pub strategy: String,
}

fn load_config(g: &GlobalArgs) -> Result<ExperimentConfig> {
    let path = g
        .config
        .as_deref()
        .ok_or_else(|| Error::config("this command needs --config PATH"))?;
    let mut c = ExperimentConfig::from_file(path)?;
    if let Some(s) = g.seed {
        c.seed = s;
    }
    Ok(c)
}

fn stage_target(cmd: &Command, config: &ExperimentConfig) -> Result<Stage> {
    Ok(match cmd {
        Command::Prepare => Stage::Bpe,
        Command::TrainBpe => {
            if config.tokenizer.compare_steps > 0 && config.tokenizer.vocab_sizes.len() > 1 {
                Stage::VocabExp
            } else {
                Stage::Bpe
            }
        }
        Command::Train { stage } => match stage.as_str() {
            "teacher" => Stage::Teacher,
            "baseline" => Stage::Baseline,
            other => return Err(Error::config(format!("unknown training stage {other:?} (teacher or baseline)"))),
        },
        Command::Backtranslate { round } => {
            let r = match round {
                Some(r) => *r,
                None => config
                    .rounds
                    .last()
                    .ok_or_else(|| Error::config("the config has no [round.N] sections"))?
                    .round,
            };
            if !config.rounds.iter().any(|s| s.round == r) {
                return Err(Error::config(format!("round {r} is not configured")));
            }
            Stage::Round(r)
        }
        Command::Evaluate | Command::Pipeline => Stage::Matrix,
        Command::Translate(_) | Command::AverageCkpt { .. } => unreachable!("not a pipeline stage"),
    })
}

fn stages_for(run: &Run, cmd: &Command, target: &Stage) -> Vec<Stage> {
    let plan = run.plan_through(target);
    match cmd {
        // Only the stages the command stands for, with their prerequisites
        // implied by the plan.
        Command::Evaluate => plan
            .into_iter()
            .filter(|s| !matches!(s, Stage::Sweep | Stage::VocabExp))
            .collect(),
        Command::Backtranslate { .. } | Command::Train { .. } => {
            plan.into_iter().filter(|s| !matches!(s, Stage::VocabExp)).collect()
        }
        _ => plan,
    }
}

fn run_command(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Translate(t) => {
            let strategy: DecodeStrategy = t.strategy.parse().map_err(|e: Error| Error::config(e.to_string()))?;
            let src = LanguageId::new(t.src.clone()).map_err(|e| Error::config(e.to_string()))?;
            let tgt = LanguageId::new(t.tgt.clone()).map_err(|e| Error::config(e.to_string()))?;
            for p in [&t.model, &t.vocab, &t.input] {
                if !p.is_file() {
                    return Err(Error::config(format!("{} does not exist", p.display())));
                }
            }
            if g.dry_run {
                log::info!("dry run: would translate {} from {src} to {tgt}", t.input.display());
                return Ok(());
            }
            let n = pipeline::translate_file(&TranslateJob {
                checkpoint: &t.model,
                vocab: &t.vocab,
                input: &t.input,
                output: &t.output,
                src,
                tgt,
                strategy,
                seed: g.seed.unwrap_or(1),
            })?;
            log::info!("translated {n} lines into {}", t.output.display());
            Ok(())
        }
        Command::AverageCkpt { output, checkpoints } => {
            if let Some(p) = checkpoints.iter().find(|p| !p.is_file()) {
                return Err(Error::config(format!("{} does not exist", p.display())));
            }
            if g.dry_run {
                log::info!("dry run: would average {} checkpoints", checkpoints.len());
                return Ok(());
            }
            pipeline::average_checkpoint_files(checkpoints, output)?;
            log::info!("averaged {} checkpoints into {}", checkpoints.len(), output.display());
            Ok(())
        }
        cmd => {
            let config = load_config(g)?;
            let target = stage_target(cmd, &config)?;
            if g.dry_run {
                for note in pipeline::dry_run(&config)? {
                    log::info!("{note}");
                }
                let run = Run::locate(config, g.out.as_deref(), Path::new("runs"), g.resume)?;
                let names: Vec<String> = stages_for(&run, cmd, &target).iter().map(Stage::name).collect();
                log::info!("dry run: config is valid; stages {}", names.join(", "));
                return Ok(());
            }
            let run = Run::locate(config, g.out.as_deref(), Path::new("runs"), g.resume)?;
            log::info!("run directory {}", run.dir.display());
            let stages = stages_for(&run, cmd, &target);
            run.execute(&stages)
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run_command(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
