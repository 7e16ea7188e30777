use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::keyval::{self, Entry};
use crate::model::{Direction, DEFAULT_INIT_RANGE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    TeacherCtc,
    DistillKl,
    FinetuneCtc,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::TeacherCtc, Stage::DistillKl, Stage::FinetuneCtc];

    pub fn direction(self) -> Direction {
        match self {
            Stage::TeacherCtc => Direction::Bidirectional,
            Stage::DistillKl | Stage::FinetuneCtc => Direction::Unidirectional,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::TeacherCtc => "teacher-ctc",
            Stage::DistillKl => "distill-kl",
            Stage::FinetuneCtc => "finetune-ctc",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Stage::TeacherCtc => 0,
            Stage::DistillKl => 1,
            Stage::FinetuneCtc => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.code() == c)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?} (teacher-ctc, distill-kl, finetune-ctc)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurriculumKind {
    None,
    ShortFirst,
    ReducedLabels,
}

impl CurriculumKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CurriculumKind::None => "none",
            CurriculumKind::ShortFirst => "short-first",
            CurriculumKind::ReducedLabels => "reduced-labels",
        }
    }
}

impl FromStr for CurriculumKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(CurriculumKind::None),
            "short-first" => Ok(CurriculumKind::ShortFirst),
            "reduced-labels" => Ok(CurriculumKind::ReducedLabels),
            other => Err(format!(
                "unknown curriculum {other:?} (none, short-first, reduced-labels)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Curriculum {
    None,
    /// Utterances no longer than the given length percentile first.
    ShortFirst { percentile: f64, epochs: usize },
    /// A blank/vowel/consonant/space output layer first.
    ReducedLabels { epochs: usize },
}

/// Everything that determines a training stage.
///
/// Parsed from `key = value` text; the keys are the field names. Every key
/// has a default except the manifests.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub stage: Stage,
    pub layers: usize,
    pub cells: usize,
    pub projection: usize,
    pub stack_factor: usize,
    /// Per-sample learning rate.
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    pub max_epochs: usize,
    pub lr_floor: f64,
    pub alpha: f64,
    pub curriculum: CurriculumKind,
    pub curriculum_percentile: f64,
    pub curriculum_epochs: usize,
    pub seed: u64,
    pub train_manifest: Option<PathBuf>,
    pub dev_manifest: Option<PathBuf>,
    pub teacher_checkpoint: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub clip_norm: f64,
    /// Utterances summed into one update.
    pub accumulate: usize,
    pub init_range: f64,
    /// Worker threads for gradient accumulation. Not part of the fingerprint.
    pub workers: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            stage: Stage::FinetuneCtc,
            layers: 2,
            cells: 64,
            projection: 32,
            stack_factor: 3,
            learning_rate: 1e-4,
            momentum: 0.9,
            lr_decay: 0.7,
            max_epochs: 30,
            lr_floor: 1e-7,
            alpha: 0.0,
            curriculum: CurriculumKind::None,
            curriculum_percentile: 50.0,
            curriculum_epochs: 1,
            seed: 1,
            train_manifest: None,
            dev_manifest: None,
            teacher_checkpoint: None,
            init_checkpoint: None,
            clip_norm: 10.0,
            accumulate: 1,
            init_range: DEFAULT_INIT_RANGE,
            workers: 1,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "stage",
    "layers",
    "cells",
    "projection",
    "stack_factor",
    "learning_rate",
    "momentum",
    "lr_decay",
    "max_epochs",
    "lr_floor",
    "alpha",
    "curriculum",
    "curriculum_percentile",
    "curriculum_epochs",
    "seed",
    "train_manifest",
    "dev_manifest",
    "teacher_checkpoint",
    "init_checkpoint",
    "clip_norm",
    "accumulate",
    "init_range",
    "workers",
];

/// Keys that never enter the fingerprint: checkpoints are identified by their
/// own fingerprints, data by its content, and the worker count does not change
/// results.
const UNHASHED_KEYS: &[&str] = &[
    "train_manifest",
    "dev_manifest",
    "teacher_checkpoint",
    "init_checkpoint",
    "workers",
];

fn opt_path(v: &str) -> Option<PathBuf> {
    if v.is_empty() || v == "none" {
        None
    } else {
        Some(PathBuf::from(v))
    }
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "none".into())
}

impl TrainingConfig {
    /// Parses a config file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = TrainingConfig::default();
        cfg.apply(&keyval::read(path)?, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = TrainingConfig::default();
        cfg.apply(&keyval::parse(text, origin)?, origin)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, entries: &[Entry], origin: &str) -> Result<()> {
        for e in entries {
            self.set(&e.key, &e.value).map_err(|message| Error::Parse {
                path: origin.to_string(),
                line: e.line,
                message,
            })?;
        }
        Ok(())
    }

    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        use keyval::value as v;
        match key {
            "stage" => self.stage = value.parse()?,
            "layers" => self.layers = v(key, value)?,
            "cells" => self.cells = v(key, value)?,
            "projection" => self.projection = v(key, value)?,
            "stack_factor" => self.stack_factor = v(key, value)?,
            "learning_rate" => self.learning_rate = v(key, value)?,
            "momentum" => self.momentum = v(key, value)?,
            "lr_decay" => self.lr_decay = v(key, value)?,
            "max_epochs" => self.max_epochs = v(key, value)?,
            "lr_floor" => self.lr_floor = v(key, value)?,
            "alpha" => self.alpha = v(key, value)?,
            "curriculum" => self.curriculum = value.parse()?,
            "curriculum_percentile" => self.curriculum_percentile = v(key, value)?,
            "curriculum_epochs" => self.curriculum_epochs = v(key, value)?,
            "seed" => self.seed = v(key, value)?,
            "train_manifest" => self.train_manifest = opt_path(value),
            "dev_manifest" => self.dev_manifest = opt_path(value),
            "teacher_checkpoint" => self.teacher_checkpoint = opt_path(value),
            "init_checkpoint" => self.init_checkpoint = opt_path(value),
            "clip_norm" => self.clip_norm = v(key, value)?,
            "accumulate" => self.accumulate = v(key, value)?,
            "init_range" => self.init_range = v(key, value)?,
            "workers" => self.workers = v(key, value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "stage" => self.stage.to_string(),
            "layers" => self.layers.to_string(),
            "cells" => self.cells.to_string(),
            "projection" => self.projection.to_string(),
            "stack_factor" => self.stack_factor.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "momentum" => self.momentum.to_string(),
            "lr_decay" => self.lr_decay.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "lr_floor" => self.lr_floor.to_string(),
            "alpha" => self.alpha.to_string(),
            "curriculum" => self.curriculum.as_str().to_string(),
            "curriculum_percentile" => self.curriculum_percentile.to_string(),
            "curriculum_epochs" => self.curriculum_epochs.to_string(),
            "seed" => self.seed.to_string(),
            "train_manifest" => show_path(&self.train_manifest),
            "dev_manifest" => show_path(&self.dev_manifest),
            "teacher_checkpoint" => show_path(&self.teacher_checkpoint),
            "init_checkpoint" => show_path(&self.init_checkpoint),
            "clip_norm" => self.clip_norm.to_string(),
            "accumulate" => self.accumulate.to_string(),
            "init_range" => self.init_range.to_string(),
            "workers" => self.workers.to_string(),
            _ => return None,
        })
    }

    pub fn curriculum(&self) -> Curriculum {
        match self.curriculum {
            CurriculumKind::None => Curriculum::None,
            CurriculumKind::ShortFirst => Curriculum::ShortFirst {
                percentile: self.curriculum_percentile,
                epochs: self.curriculum_epochs,
            },
            CurriculumKind::ReducedLabels => Curriculum::ReducedLabels {
                epochs: self.curriculum_epochs,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::usage(m));
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if self.layers == 0 || self.cells == 0 || self.projection == 0 {
            return bad("layers, cells and projection must be positive".into());
        }
        if self.stack_factor == 0 {
            return bad("stack_factor must be positive".into());
        }
        if !positive(self.learning_rate) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad(format!("lr_decay {} outside (0, 1)", self.lr_decay));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor.is_finite()) {
            return bad(format!("lr_floor {} must be finite and >= 0", self.lr_floor));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.curriculum_percentile > 0.0 && self.curriculum_percentile <= 100.0) {
            return bad(format!(
                "curriculum_percentile {} outside (0, 100]",
                self.curriculum_percentile
            ));
        }
        if self.curriculum != CurriculumKind::None
            && (self.curriculum_epochs == 0 || self.curriculum_epochs >= self.max_epochs)
        {
            return bad(format!(
                "curriculum_epochs {} must be in 1..{} so the full set gets trained",
                self.curriculum_epochs, self.max_epochs
            ));
        }
        if !positive(self.clip_norm) {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if self.accumulate == 0 || self.workers == 0 {
            return bad("accumulate and workers must be positive".into());
        }
        if !positive(self.init_range) {
            return bad(format!("init_range {} must be positive", self.init_range));
        }
        match self.stage {
            Stage::DistillKl => {
                if self.alpha != 0.0 {
                    return bad("alpha applies to the ctc stages only".into());
                }
                if self.curriculum == CurriculumKind::ReducedLabels {
                    return bad("reduced-labels curriculum needs a ctc stage".into());
                }
            }
            Stage::TeacherCtc | Stage::FinetuneCtc => {
                if self.teacher_checkpoint.is_some() {
                    return bad(format!("{} does not take a teacher_checkpoint", self.stage));
                }
            }
        }
        Ok(())
    }

    /// Every key in a fixed order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// The lines that enter the fingerprint.
    pub fn canonical(&self) -> String {
        CONFIG_KEYS
            .iter()
            .filter(|k| !UNHASHED_KEYS.contains(k))
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }
}
