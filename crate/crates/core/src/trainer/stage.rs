use std::fmt;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::corpus::{load_utterances, Utterance};
use crate::error::{Error, Result};
use crate::labelset::{encode_reduced, encode_transcript, InventoryMode, LabelInventory, LabelSequence};
use crate::losses::{distill_loss_and_grad, smoothed_ctc_loss_and_grad, DistillBatch};
use crate::model::{init_model, ArchConfig, Model};
use crate::numerics::Rng;
use crate::trainer::checkpoint::{Checkpoint, Fingerprint};
use crate::trainer::config::{Stage, TrainingConfig};
use crate::trainer::curriculum::curriculum_plan;
use crate::trainer::optim::{clip_global_norm, sgd_momentum_step, EpochDecision, LrSchedule, StopReason};

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const REINIT_STREAM: u64 = 2;

/// One utterance with its targets under both inventories.
#[derive(Clone, Debug)]
pub struct Example {
    pub utt: Utterance,
    pub full: LabelSequence,
    pub reduced: LabelSequence,
}

impl Example {
    pub fn new(utt: Utterance) -> Result<Self> {
        let full = encode_transcript(&LabelInventory::full(), &utt.transcript)?;
        let reduced = encode_reduced(&utt.transcript)?;
        Ok(Example { utt, full, reduced })
    }

    fn target(&self, mode: InventoryMode) -> &LabelSequence {
        match mode {
            InventoryMode::Full => &self.full,
            InventoryMode::Reduced => &self.reduced,
        }
    }
}

/// Stacked training and dev utterances with a digest of their content.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    digest: Fingerprint,
}

fn digest_split(h: &mut Sha256, name: &str, split: &[Example]) {
    h.update(format!("{name} {}\n", split.len()).as_bytes());
    for ex in split {
        let f = &ex.utt.features;
        h.update(format!("{}\t{}\t{}x{}\n", ex.utt.id, ex.utt.transcript, f.frames(), f.dim()).as_bytes());
        for v in f.matrix().as_slice() {
            h.update(v.to_le_bytes());
        }
    }
}

impl Dataset {
    pub fn new(train: Vec<Utterance>, dev: Vec<Utterance>) -> Result<Self> {
        if train.is_empty() || dev.is_empty() {
            return Err(Error::Validation("training and dev sets must be non-empty".into()));
        }
        let dim = train[0].features.dim();
        if let Some(u) = train.iter().chain(&dev).find(|u| u.features.dim() != dim) {
            return Err(Error::Validation(format!(
                "utterance {} has feature dim {}, expected {dim}",
                u.id,
                u.features.dim()
            )));
        }
        let train = train.into_iter().map(Example::new).collect::<Result<Vec<_>>>()?;
        let dev = dev.into_iter().map(Example::new).collect::<Result<Vec<_>>>()?;
        let mut h = Sha256::new();
        digest_split(&mut h, "train", &train);
        digest_split(&mut h, "dev", &dev);
        Ok(Dataset {
            train,
            dev,
            digest: h.finalize().into(),
        })
    }

    pub fn load(train_manifest: &Path, dev_manifest: &Path, stack_factor: usize) -> Result<Self> {
        Dataset::new(
            load_utterances(train_manifest, stack_factor)?,
            load_utterances(dev_manifest, stack_factor)?,
        )
    }

    pub fn input_dim(&self) -> usize {
        self.train[0].utt.features.dim()
    }

    pub fn digest(&self) -> &Fingerprint {
        &self.digest
    }
}

/// Identity of a stage run: its config, its data and whatever it starts from.
pub fn stage_fingerprint(
    cfg: &TrainingConfig,
    data: &Fingerprint,
    init: Option<&Fingerprint>,
    teacher: Option<&Fingerprint>,
) -> Fingerprint {
    let show = |f: Option<&Fingerprint>| f.map(hex::encode).unwrap_or_else(|| "none".into());
    let mut h = Sha256::new();
    h.update(cfg.canonical().as_bytes());
    h.update(format!("data = {}\n", hex::encode(data)).as_bytes());
    h.update(format!("init = {}\n", show(init)).as_bytes());
    h.update(format!("teacher = {}\n", show(teacher)).as_bytes());
    h.finalize().into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub mode: InventoryMode,
    /// Rate used during the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub dev_criterion: f64,
    pub updates: u64,
    pub skipped: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub fingerprint: String,
    /// The effective configuration.
    pub config: String,
    pub epochs: Vec<EpochReport>,
    pub stop: StopReason,
    /// Rate after the last annealing decision.
    pub final_lr: f64,
    pub seconds: f64,
}

impl StageReport {
    /// The rate of every epoch followed by the final rate.
    pub fn lr_trajectory(&self) -> Vec<f64> {
        self.epochs
            .iter()
            .map(|e| e.lr)
            .chain(std::iter::once(self.final_lr))
            .collect()
    }
}

impl fmt::Display for StageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "stage {}  fingerprint {}", self.stage, self.fingerprint)?;
        writeln!(f, "config:")?;
        for line in self.config.lines() {
            writeln!(f, "  {line}")?;
        }
        writeln!(f, "epoch  labels   lr          train_loss    dev_criterion  updates  skipped  seconds")?;
        for e in &self.epochs {
            writeln!(
                f,
                "{:>5}  {:<7}  {:<10.4e}  {:<12.6}  {:<13.6}  {:>7}  {:>7}  {:>7.1}",
                e.epoch, e.mode, e.lr, e.train_loss, e.dev_criterion, e.updates, e.skipped, e.seconds
            )?;
        }
        let stop = match self.stop {
            StopReason::MaxEpochs => "max epochs",
            StopReason::LrFloor => "learning rate floor",
        };
        writeln!(f, "stopped: {stop}; final lr {:.4e}; {:.1} s", self.final_lr, self.seconds)
    }
}

/// What a stage starts from besides its config.
#[derive(Clone, Copy, Debug)]
pub struct StageInputs<'a> {
    pub data: &'a Dataset,
    pub init: Option<&'a Checkpoint>,
    pub teacher: Option<&'a Checkpoint>,
}

/// Loss of one utterance, with parameter gradients when requested. `None`
/// when the CTC target cannot be aligned.
type Step = Option<(f64, Option<Model>)>;

struct Objective<'a> {
    stage: Stage,
    alpha: f64,
    teacher: Option<&'a Model>,
}

impl Objective<'_> {
    fn eval(&self, model: &Model, ex: &Example, mode: InventoryMode, want_grad: bool) -> Result<Step> {
        let feats = &ex.utt.features;
        let (post, cache) = model.forward(feats)?;
        let (loss, d_logits) = match self.stage {
            Stage::DistillKl => {
                let teacher = self.teacher.expect("checked before training").posteriors(feats)?;
                distill_loss_and_grad(&DistillBatch::new(&teacher, &post)?)
            }
            Stage::TeacherCtc | Stage::FinetuneCtc => {
                let r = smoothed_ctc_loss_and_grad(&post, ex.target(mode), self.alpha)?;
                if !r.is_feasible() {
                    return Ok(None);
                }
                (r.loss, r.grad)
            }
        };
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss {loss} on utterance {}", ex.utt.id)));
        }
        if !want_grad {
            return Ok(Some((loss, None)));
        }
        let mut grads = model.zeros_like();
        model.accumulate_backward(&cache, &d_logits, &mut grads, false)?;
        Ok(Some((loss, Some(grads))))
    }
}

fn map_ordered<T, F>(pool: Option<&rayon::ThreadPool>, items: &[usize], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match pool {
        Some(p) => p.install(|| items.par_iter().map(|&i| f(i)).collect()),
        None => items.iter().map(|&i| f(i)).collect(),
    }
}

fn arch_for(cfg: &TrainingConfig, input_dim: usize, output_dim: usize) -> ArchConfig {
    ArchConfig {
        direction: cfg.stage.direction(),
        input_dim,
        layers: cfg.layers,
        cells: cfg.cells,
        projection: cfg.projection,
        output_dim,
    }
}

/// Swaps the output layer for a fresh one sized for `mode`, keeping the
/// velocities of every other block.
fn switch_output(model: &mut Model, velocity: &mut Model, mode: InventoryMode, rng: &mut Rng, range: f64) -> Result<()> {
    model.replace_output_layer(LabelInventory::for_mode(mode).len(), rng, range)?;
    let mut v = model.zeros_like();
    for (dst, src) in v.blocks_mut().into_iter().zip(velocity.blocks()) {
        if dst.shape() == src.shape() {
            *dst = src.clone();
        }
    }
    *velocity = v;
    Ok(())
}

fn mode_of(model: &Model) -> InventoryMode {
    if model.arch().output_dim == LabelInventory::reduced().len() {
        InventoryMode::Reduced
    } else {
        InventoryMode::Full
    }
}

fn check_inputs(cfg: &TrainingConfig, inputs: &StageInputs<'_>, arch: &ArchConfig) -> Result<()> {
    let full = LabelInventory::full();
    match (cfg.stage, inputs.teacher) {
        (Stage::DistillKl, None) => return Err(Error::usage("distill-kl needs a teacher checkpoint")),
        (Stage::DistillKl, Some(t)) => {
            if t.inventory != full {
                return Err(Error::usage("teacher must use the full label inventory"));
            }
            if t.model.arch().input_dim != arch.input_dim {
                return Err(Error::usage(format!(
                    "teacher expects {}-dim input, data has {}",
                    t.model.arch().input_dim,
                    arch.input_dim
                )));
            }
        }
        (_, Some(_)) => return Err(Error::usage(format!("{} does not take a teacher", cfg.stage))),
        _ => {}
    }
    if let Some(init) = inputs.init {
        if init.model.arch() != arch || init.inventory != full {
            return Err(Error::usage(format!(
                "initial checkpoint has architecture {:?}, stage needs {:?}",
                init.model.arch(),
                arch
            )));
        }
    }
    Ok(())
}

/// Trains one stage. Single-worker runs are bitwise reproducible; any worker
/// count gives the same result because gradients are summed in utterance
/// order.
pub fn run_stage_with(cfg: &TrainingConfig, inputs: StageInputs<'_>) -> Result<(Checkpoint, StageReport)> {
    let started = Instant::now();
    cfg.validate()?;
    let data = inputs.data;
    let full = LabelInventory::full();
    let arch = arch_for(cfg, data.input_dim(), full.len());
    check_inputs(cfg, &inputs, &arch)?;
    let fingerprint = stage_fingerprint(
        cfg,
        data.digest(),
        inputs.init.map(|c| &c.fingerprint),
        inputs.teacher.map(|c| &c.fingerprint),
    );

    let mut model = match inputs.init {
        Some(c) => c.model.clone(),
        None => init_model(arch, &mut Rng::with_stream(cfg.seed, INIT_STREAM), cfg.init_range)?,
    };
    let mut velocity = model.zeros_like();
    let mut shuffle_rng = Rng::with_stream(cfg.seed, SHUFFLE_STREAM);
    let mut reinit_rng = Rng::with_stream(cfg.seed, REINIT_STREAM);
    let objective = Objective {
        stage: cfg.stage,
        alpha: cfg.alpha,
        teacher: inputs.teacher.map(|t| &t.model),
    };
    let pool = if cfg.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build()
                .map_err(|e| Error::usage(format!("worker pool: {e}")))?,
        )
    } else {
        None
    };

    let lengths: Vec<usize> = data.train.iter().map(|e| e.utt.features.frames()).collect();
    let plan = curriculum_plan(&lengths, &cfg.curriculum(), cfg.max_epochs)?;
    let mut schedule = LrSchedule::new(cfg.learning_rate, cfg.lr_decay, cfg.lr_floor, cfg.max_epochs);
    let mut epochs = Vec::new();
    let mut updates: u64 = 0;
    let dev_ids: Vec<usize> = (0..data.dev.len()).collect();

    let stop = loop {
        let phase = plan
            .iter()
            .find(|p| p.epochs.contains(&schedule.epoch))
            .expect("the last phase runs to max_epochs");
        if mode_of(&model) != phase.mode {
            if schedule.epoch > 0 {
                // The criterion changes with the inventory; earlier dev
                // values are not comparable.
                schedule.reset_best();
            }
            switch_output(&mut model, &mut velocity, phase.mode, &mut reinit_rng, cfg.init_range)?;
        }
        let epoch_start = Instant::now();
        let lr = schedule.lr;
        let mut order = phase.subset.clone();
        shuffle_rng.shuffle(&mut order);

        let (mut train_sum, mut counted, mut skipped, mut epoch_updates) = (0.0, 0usize, 0usize, 0u64);
        for chunk in order.chunks(cfg.accumulate) {
            let steps = map_ordered(pool.as_ref(), chunk, |i| {
                objective.eval(&model, &data.train[i], phase.mode, true)
            });
            let mut total: Option<Model> = None;
            for (step, &i) in steps.into_iter().zip(chunk) {
                match step? {
                    None => {
                        skipped += 1;
                        warn!("skipping {}: no ctc alignment fits its frames", data.train[i].utt.id);
                    }
                    Some((loss, grads)) => {
                        train_sum += loss;
                        counted += 1;
                        let g = grads.expect("requested");
                        match total.as_mut() {
                            None => total = Some(g),
                            Some(t) => t.add_scaled(&g, 1.0)?,
                        }
                    }
                }
            }
            if let Some(mut g) = total {
                clip_global_norm(&mut g, cfg.clip_norm);
                sgd_momentum_step(&mut model, &g, &mut velocity, lr, cfg.momentum)?;
                epoch_updates += 1;
            }
        }
        if !model.is_finite() {
            return Err(Error::Numeric(format!("parameters diverged in epoch {}", schedule.epoch + 1)));
        }
        updates += epoch_updates;

        let dev_steps = map_ordered(pool.as_ref(), &dev_ids, |i| {
            objective.eval(&model, &data.dev[i], phase.mode, false)
        });
        let (mut dev_sum, mut dev_count) = (0.0, 0usize);
        for s in dev_steps {
            if let Some((loss, _)) = s? {
                dev_sum += loss;
                dev_count += 1;
            }
        }
        let train_loss = train_sum / counted.max(1) as f64;
        let dev_criterion = if dev_count == 0 { f64::INFINITY } else { dev_sum / dev_count as f64 };
        let decision = schedule.end_of_epoch(dev_criterion)?;
        let report = EpochReport {
            epoch: schedule.epoch,
            mode: phase.mode,
            lr,
            train_loss,
            dev_criterion,
            updates: epoch_updates,
            skipped,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        info!(
            "{} epoch {}: lr {:.3e} train {:.4} dev {:.4} ({} updates, {} skipped, {:.1}s)",
            cfg.stage, report.epoch, lr, train_loss, dev_criterion, epoch_updates, skipped, report.seconds
        );
        epochs.push(report);
        if let EpochDecision::Stop(reason) = decision {
            break reason;
        }
    };

    let ckpt = Checkpoint::new(
        fingerprint,
        cfg.stage,
        full,
        model,
        velocity,
        schedule.lr,
        schedule.epoch as u32,
        updates,
        schedule.best,
    )?;
    let report = StageReport {
        stage: cfg.stage,
        fingerprint: ckpt.fingerprint_hex(),
        config: cfg.to_text(),
        epochs,
        stop,
        final_lr: schedule.lr,
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok((ckpt, report))
}

/// Loads the manifests and checkpoints named in `cfg` and trains the stage.
pub fn run_stage(cfg: &TrainingConfig) -> Result<(Checkpoint, StageReport)> {
    let (train, dev) = match (&cfg.train_manifest, &cfg.dev_manifest) {
        (Some(t), Some(d)) => (t, d),
        _ => return Err(Error::usage("train_manifest and dev_manifest are required")),
    };
    let data = Dataset::load(train, dev, cfg.stack_factor)?;
    let init = cfg.init_checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let teacher = cfg.teacher_checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    run_stage_with(
        cfg,
        StageInputs {
            data: &data,
            init: init.as_ref(),
            teacher: teacher.as_ref(),
        },
    )
}
