use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::error::{Error, Result};
use crate::keyval::{self, Entry};
use crate::trainer::checkpoint::{Checkpoint, Fingerprint};
use crate::trainer::config::{Stage, TrainingConfig};
use crate::trainer::stage::{run_stage_with, stage_fingerprint, Dataset, StageInputs, StageReport};

/// One config per stage. In the source text, unprefixed keys apply to every
/// stage and `teacher.`, `distill.` or `finetune.` keys to one stage only,
/// whatever their order. The stage key itself is implied.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub teacher: TrainingConfig,
    pub distill: TrainingConfig,
    pub finetune: TrainingConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let with = |stage| TrainingConfig {
            stage,
            ..TrainingConfig::default()
        };
        PipelineConfig {
            teacher: with(Stage::TeacherCtc),
            distill: with(Stage::DistillKl),
            finetune: with(Stage::FinetuneCtc),
        }
    }
}

fn prefix(stage: Stage) -> &'static str {
    match stage {
        Stage::TeacherCtc => "teacher.",
        Stage::DistillKl => "distill.",
        Stage::FinetuneCtc => "finetune.",
    }
}

impl PipelineConfig {
    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        cfg.apply(&keyval::parse(text, origin)?, origin)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        cfg.apply(&keyval::read(path)?, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn stages(&self) -> [&TrainingConfig; 3] {
        [&self.teacher, &self.distill, &self.finetune]
    }

    fn stages_mut(&mut self) -> [&mut TrainingConfig; 3] {
        [&mut self.teacher, &mut self.distill, &mut self.finetune]
    }

    pub fn apply(&mut self, entries: &[Entry], origin: &str) -> Result<()> {
        let err = |e: &Entry, message: String| Error::Parse {
            path: origin.to_string(),
            line: e.line,
            message,
        };
        let scoped = |e: &Entry| Stage::ALL.into_iter().find(|&s| e.key.starts_with(prefix(s)));
        for e in entries.iter().filter(|e| scoped(e).is_none()) {
            self.set_all(&e.key, &e.value).map_err(|m| err(e, m))?;
        }
        for e in entries {
            if let Some(stage) = scoped(e) {
                let key = &e.key[prefix(stage).len()..];
                self.set_stage(stage, key, &e.value).map_err(|m| err(e, m))?;
            }
        }
        Ok(())
    }

    /// Sets a key on every stage.
    pub fn set_all(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        if key == "stage" {
            return Err("the stage of each pipeline step is fixed".into());
        }
        for c in self.stages_mut() {
            c.set(key, value)?;
        }
        Ok(())
    }

    pub fn set_stage(&mut self, stage: Stage, key: &str, value: &str) -> std::result::Result<(), String> {
        if key == "stage" {
            return Err("the stage of each pipeline step is fixed".into());
        }
        let c = match stage {
            Stage::TeacherCtc => &mut self.teacher,
            Stage::DistillKl => &mut self.distill,
            Stage::FinetuneCtc => &mut self.finetune,
        };
        c.set(key, value)
    }

    fn check_shared_data(&self) -> Result<()> {
        let t = &self.teacher;
        for c in self.stages() {
            if (&c.train_manifest, &c.dev_manifest, c.stack_factor)
                != (&t.train_manifest, &t.dev_manifest, t.stack_factor)
            {
                return Err(Error::usage(
                    "pipeline stages must share train_manifest, dev_manifest and stack_factor",
                ));
            }
        }
        Ok(())
    }

    /// Shared data settings.
    fn data_settings(&self) -> Result<(PathBuf, PathBuf, usize)> {
        self.check_shared_data()?;
        let t = &self.teacher;
        match (&t.train_manifest, &t.dev_manifest) {
            (Some(a), Some(b)) => Ok((a.clone(), b.clone(), t.stack_factor)),
            _ => Err(Error::usage("train_manifest and dev_manifest are required")),
        }
    }
}

pub fn checkpoint_path(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join(format!("{}.ckpt", prefix(stage).trim_end_matches('.')))
}

pub fn report_path(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join(format!("{}.report.txt", prefix(stage).trim_end_matches('.')))
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub stage: Stage,
    pub path: PathBuf,
    pub checkpoint: Checkpoint,
    /// `None` when an existing checkpoint was reused.
    pub report: Option<StageReport>,
}

#[derive(Clone, Debug)]
pub struct PipelineSummary {
    pub stages: Vec<StageOutcome>,
}

impl PipelineSummary {
    pub fn get(&self, stage: Stage) -> &StageOutcome {
        self.stages.iter().find(|s| s.stage == stage).expect("every stage runs")
    }
}

impl fmt::Display for PipelineSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.stages {
            let how = match &s.report {
                Some(r) => format!("trained {} epochs in {:.1} s", r.epochs.len(), r.seconds),
                None => "reused existing checkpoint".into(),
            };
            writeln!(
                f,
                "{:<13} {}  {}  best dev {}",
                s.stage,
                s.path.display(),
                how,
                s.checkpoint
                    .best_dev
                    .map(|d| format!("{d:.6}"))
                    .unwrap_or_else(|| "n/a".into())
            )?;
        }
        Ok(())
    }
}

fn load_external(path: &Option<PathBuf>) -> Result<Option<Checkpoint>> {
    path.as_deref().map(Checkpoint::load).transpose()
}

/// Loads the corpus named in the config and runs every stage.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<PipelineSummary> {
    let (train, dev, stack) = cfg.data_settings()?;
    let data = Dataset::load(&train, &dev, stack)?;
    run_pipeline_with(cfg, &data, out_dir)
}

/// Runs teacher-ctc, distill-kl and finetune-ctc in order, each starting from
/// the previous checkpoint, and writes `<stage>.ckpt` and `<stage>.report.txt`
/// under `out_dir`.
///
/// Checkpoints already present are verified before anything trains: a
/// corrupt file is a format error and one from a different configuration is
/// a fingerprint mismatch. Matching checkpoints are reused.
pub fn run_pipeline_with(cfg: &PipelineConfig, data: &Dataset, out_dir: &Path) -> Result<PipelineSummary> {
    cfg.check_shared_data()?;
    let mut configs = [cfg.teacher.clone(), cfg.distill.clone(), cfg.finetune.clone()];
    configs[1].teacher_checkpoint = None;
    configs[2].init_checkpoint = None;
    for c in &configs {
        c.validate()?;
    }
    let externals = [
        load_external(&configs[0].init_checkpoint)?,
        load_external(&configs[1].init_checkpoint)?,
    ];

    let fp_teacher = stage_fingerprint(&configs[0], data.digest(), externals[0].as_ref().map(|c| &c.fingerprint), None);
    let fp_distill = stage_fingerprint(
        &configs[1],
        data.digest(),
        externals[1].as_ref().map(|c| &c.fingerprint),
        Some(&fp_teacher),
    );
    let fp_finetune = stage_fingerprint(&configs[2], data.digest(), Some(&fp_distill), None);
    let expected: [Fingerprint; 3] = [fp_teacher, fp_distill, fp_finetune];

    let mut existing: Vec<Option<Checkpoint>> = Vec::new();
    for (stage, fp) in Stage::ALL.into_iter().zip(&expected) {
        let path = checkpoint_path(out_dir, stage);
        if !path.exists() {
            existing.push(None);
            continue;
        }
        let c = Checkpoint::load(&path)?;
        if &c.fingerprint != fp || c.stage != stage {
            return Err(Error::FingerprintMismatch {
                path: path.display().to_string(),
                found: c.fingerprint_hex(),
                expected: hex::encode(fp),
            });
        }
        existing.push(Some(c));
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut outcomes: Vec<StageOutcome> = Vec::new();
    for (i, stage) in Stage::ALL.into_iter().enumerate() {
        let path = checkpoint_path(out_dir, stage);
        if let Some(c) = existing[i].take() {
            info!("{stage}: reusing {}", path.display());
            outcomes.push(StageOutcome {
                stage,
                path,
                checkpoint: c,
                report: None,
            });
            continue;
        }
        let prev = outcomes.last().map(|o| &o.checkpoint);
        let inputs = match stage {
            Stage::TeacherCtc => StageInputs {
                data,
                init: externals[0].as_ref(),
                teacher: None,
            },
            Stage::DistillKl => StageInputs {
                data,
                init: externals[1].as_ref(),
                teacher: prev,
            },
            Stage::FinetuneCtc => StageInputs {
                data,
                init: prev,
                teacher: None,
            },
        };
        info!("{stage}: training");
        let (ckpt, report) = run_stage_with(&configs[i], inputs)?;
        debug_assert_eq!(ckpt.fingerprint, expected[i]);
        ckpt.save(&path)?;
        let rp = report_path(out_dir, stage);
        fs::write(&rp, report.to_string()).map_err(|e| Error::io(&rp, e))?;
        outcomes.push(StageOutcome {
            stage,
            path,
            checkpoint: ckpt,
            report: Some(report),
        });
    }
    Ok(PipelineSummary { stages: outcomes })
}
