//! The `ctc-distill` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::corpus::{load_manifest, load_utterances, read_feature_file, synth_corpus, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{decode, dump_posteriors, evaluate_utterances};
use crate::gradcheck::run_suite;
use crate::trainer::pipeline::{report_path, PipelineConfig};
use crate::trainer::{checkpoint::Checkpoint, pipeline, run_stage, Stage, TrainingConfig};

#[derive(Debug, Parser)]
#[command(
    name = "ctc-distill",
    version,
    about = "Train and evaluate online CTC recognizers with teacher-student initialization",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus of feature files and manifests.
    SynthData(SynthArgs),
    /// Train one stage.
    Train(TrainArgs),
    /// Run teacher-ctc, distill-kl and finetune-ctc in sequence.
    Pipeline(PipelineArgs),
    /// Print the greedy hypothesis of every utterance in a manifest.
    Decode(EvalArgs),
    /// Report WER and CER over a manifest.
    Eval(EvalArgs),
    /// Finite-difference checks of every gradient.
    Gradcheck(GradcheckArgs),
    /// Write one utterance's posteriors as CSV.
    DumpPosteriors(DumpArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory for train.tsv, dev.tsv and feats/.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    prototype_dim: Option<String>,
    #[arg(long)]
    prototype_range: Option<String>,
    #[arg(long)]
    frames_per_char_min: Option<String>,
    #[arg(long)]
    frames_per_char_max: Option<String>,
    #[arg(long)]
    noise_stddev: Option<String>,
    /// Comma-separated vocabulary.
    #[arg(long)]
    words: Option<String>,
    #[arg(long)]
    words_per_utterance_min: Option<String>,
    #[arg(long)]
    words_per_utterance_max: Option<String>,
    #[arg(long)]
    train_utterances: Option<String>,
    #[arg(long)]
    dev_utterances: Option<String>,
}

/// Flags mirroring the training config keys.
#[derive(Debug, Args, Default)]
struct TrainOverrides {
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    cells: Option<String>,
    #[arg(long)]
    projection: Option<String>,
    #[arg(long)]
    stack_factor: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    lr_decay: Option<String>,
    #[arg(long)]
    max_epochs: Option<String>,
    #[arg(long)]
    lr_floor: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    /// none, short-first or reduced-labels.
    #[arg(long)]
    curriculum: Option<String>,
    #[arg(long)]
    curriculum_percentile: Option<String>,
    #[arg(long)]
    curriculum_epochs: Option<String>,
    #[arg(long)]
    train_manifest: Option<String>,
    #[arg(long)]
    dev_manifest: Option<String>,
    #[arg(long)]
    teacher_checkpoint: Option<String>,
    #[arg(long)]
    init_checkpoint: Option<String>,
    #[arg(long)]
    clip_norm: Option<String>,
    #[arg(long)]
    accumulate: Option<String>,
    #[arg(long)]
    init_range: Option<String>,
}

impl TrainOverrides {
    fn pairs(&self) -> Vec<(&'static str, &str)> {
        let all = [
            ("layers", &self.layers),
            ("cells", &self.cells),
            ("projection", &self.projection),
            ("stack_factor", &self.stack_factor),
            ("learning_rate", &self.learning_rate),
            ("momentum", &self.momentum),
            ("lr_decay", &self.lr_decay),
            ("max_epochs", &self.max_epochs),
            ("lr_floor", &self.lr_floor),
            ("alpha", &self.alpha),
            ("curriculum", &self.curriculum),
            ("curriculum_percentile", &self.curriculum_percentile),
            ("curriculum_epochs", &self.curriculum_epochs),
            ("train_manifest", &self.train_manifest),
            ("dev_manifest", &self.dev_manifest),
            ("teacher_checkpoint", &self.teacher_checkpoint),
            ("init_checkpoint", &self.init_checkpoint),
            ("clip_norm", &self.clip_norm),
            ("accumulate", &self.accumulate),
            ("init_range", &self.init_range),
        ];
        all.into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// teacher-ctc, distill-kl or finetune-ctc.
    #[arg(long)]
    stage: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Directory for `<stage>.ckpt` and `<stage>.report.txt`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Flags apply to every stage and take precedence over the config file.
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Defaults to the factor implied by the checkpoint's input size.
    #[arg(long)]
    stack_factor: Option<usize>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Debug, Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Utterance id; defaults to the first one in the manifest.
    #[arg(long)]
    utterance: Option<String>,
    #[arg(long)]
    stack_factor: Option<usize>,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
}

fn flag_error(key: &str, message: String) -> Error {
    Error::usage(format!("--{}: {message}", key.replace('_', "-")))
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::from_file(p)?,
        None => SynthConfig::default(),
    };
    let seed = a.seed.map(|s| s.to_string());
    let flags = [
        ("prototype_dim", &a.prototype_dim),
        ("prototype_range", &a.prototype_range),
        ("frames_per_char_min", &a.frames_per_char_min),
        ("frames_per_char_max", &a.frames_per_char_max),
        ("noise_stddev", &a.noise_stddev),
        ("words", &a.words),
        ("words_per_utterance_min", &a.words_per_utterance_min),
        ("words_per_utterance_max", &a.words_per_utterance_max),
        ("train_utterances", &a.train_utterances),
        ("dev_utterances", &a.dev_utterances),
        ("seed", &seed),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v).map_err(|m| flag_error(k, m))?;
        }
    }
    let m = synth_corpus(&cfg, &a.out)?;
    println!("train manifest {}", m.train.display());
    println!("dev manifest {}", m.dev.display());
    Ok(())
}

fn common_overrides(seed: Option<u64>, workers: Option<usize>, o: &TrainOverrides) -> Vec<(&'static str, String)> {
    let mut pairs: Vec<(&'static str, String)> = o.pairs().into_iter().map(|(k, v)| (k, v.to_string())).collect();
    if let Some(s) = seed {
        pairs.push(("seed", s.to_string()));
    }
    if let Some(w) = workers {
        pairs.push(("workers", w.to_string()));
    }
    pairs
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainingConfig::from_file(p)?,
        None => TrainingConfig::default(),
    };
    let mut pairs = common_overrides(a.seed, a.workers, &a.overrides);
    if let Some(s) = &a.stage {
        pairs.insert(0, ("stage", s.clone()));
    }
    for (k, v) in &pairs {
        cfg.set(k, v).map_err(|m| flag_error(k, m))?;
    }
    let (ckpt, report) = run_stage(&cfg)?;
    let name = pipeline::checkpoint_path(&a.out, cfg.stage);
    ckpt.save(&name)?;
    let rp = report_path(&a.out, cfg.stage);
    fs::write(&rp, report.to_string()).map_err(|e| Error::io(&rp, e))?;
    print!("{report}");
    println!("checkpoint {}", name.display());
    Ok(())
}

fn run_pipeline(a: PipelineArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    for (k, v) in common_overrides(a.seed, a.workers, &a.overrides) {
        cfg.set_all(k, &v).map_err(|m| flag_error(k, m))?;
    }
    let summary = pipeline::run_pipeline(&cfg, &a.out)?;
    for (stage, c) in Stage::ALL.into_iter().zip(cfg.stages()) {
        println!("[{stage}] effective config:");
        for line in c.to_text().lines() {
            println!("  {line}");
        }
    }
    print!("{summary}");
    Ok(())
}

/// Stack factor that maps the manifest's raw feature size onto the model's
/// input size.
fn infer_stack_factor(ckpt: &Checkpoint, manifest: &Path) -> Result<usize> {
    let records = load_manifest(manifest)?;
    let first = records
        .first()
        .ok_or_else(|| Error::Validation(format!("{} lists no utterances", manifest.display())))?;
    let raw = read_feature_file(&first.feature_path)?.dim();
    let input = ckpt.model.arch().input_dim;
    if input % raw != 0 {
        return Err(Error::usage(format!(
            "model input {input} is not a multiple of the feature size {raw}; pass --stack-factor"
        )));
    }
    Ok(input / raw)
}

fn decode_or_eval(a: EvalArgs, print_hyps: bool) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let stack = match a.stack_factor {
        Some(s) => s,
        None => infer_stack_factor(&ckpt, &a.manifest)?,
    };
    let utts = load_utterances(&a.manifest, stack)?;
    if print_hyps {
        for u in &utts {
            println!("{}\t{}", u.id, decode(&ckpt.model, &ckpt.inventory, &u.features)?);
        }
        return Ok(());
    }
    let report = evaluate_utterances(&ckpt.model, &ckpt.inventory, &utts)?;
    println!("checkpoint {} ({})", a.checkpoint.display(), ckpt.stage);
    println!("manifest {} (stack factor {stack})", a.manifest.display());
    print!("{report}");
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let reports = run_suite(a.seed)?;
    for r in &reports {
        println!("{r}");
    }
    let worst = reports.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    println!("max relative error {worst:.3e}");
    if reports.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed: max relative error {worst:.3e}")))
    }
}

fn dump(a: DumpArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let stack = match a.stack_factor {
        Some(s) => s,
        None => infer_stack_factor(&ckpt, &a.manifest)?,
    };
    let utts = load_utterances(&a.manifest, stack)?;
    let utt = match &a.utterance {
        Some(id) => utts
            .iter()
            .find(|u| &u.id == id)
            .ok_or_else(|| Error::usage(format!("no utterance {id:?} in {}", a.manifest.display())))?,
        None => utts
            .first()
            .ok_or_else(|| Error::Validation("empty manifest".into()))?,
    };
    dump_posteriors(&ckpt.model, &ckpt.inventory, &utt.features, &a.out)?;
    println!("{} -> {}", utt.id, a.out.display());
    Ok(())
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code: 0 success, 1 usage, 2 data or format, 3 numeric.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::Pipeline(a) => run_pipeline(a),
        Command::Decode(a) => decode_or_eval(a, true),
        Command::Eval(a) => decode_or_eval(a, false),
        Command::Gradcheck(a) => gradcheck(a),
        Command::DumpPosteriors(a) => dump(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
