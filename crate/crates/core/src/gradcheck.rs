//! Central finite-difference checks of every hand-derived gradient.
//!
//! Each check builds a small seeded instance, evaluates the analytic gradient,
//! and compares it entrywise against `(f(θ+h) − f(θ−h)) / 2h` with `h = 1e-5`.

use std::fmt;

use crate::corpus::FeatureMatrix;
use crate::ctc::ctc_loss_and_grad;
use crate::error::{Error, Result};
use crate::labelset::{LabelInventory, LabelSequence};
use crate::losses::{distill_loss_and_grad, smoothed_ctc_loss_and_grad, DistillBatch};
use crate::model::{init_model, ArchConfig, Direction, Model, PosteriorMatrix};
use crate::numerics::{uniform_fill, Matrix, Rng};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Denominator floor for the relative error. Central differences at this step
/// carry about 1e-10 of absolute rounding noise (machine epsilon times the
/// loss, over `h`), so entries smaller than the floor are held to an absolute
/// bound of `TOLERANCE · FLOOR = 1e-9` instead.
pub const FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_relative_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= TOLERANCE
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<32} {:>6} entries  max rel err {:.3e}  {}",
            self.name,
            self.checked,
            self.max_relative_error,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Loss of a posterior matrix plus its logit gradient.
type LossFn<'a> = dyn Fn(&PosteriorMatrix) -> Result<(f64, Matrix)> + 'a;

fn check_logits(name: &str, logits: &Matrix, loss: &LossFn<'_>) -> Result<GradCheckReport> {
    let (_, grad) = loss(&PosteriorMatrix::from_logits(logits.clone())?)?;
    let mut worst: f64 = 0.0;
    let mut work = logits.clone();
    for i in 0..logits.as_slice().len() {
        let orig = work.as_slice()[i];
        work.as_mut_slice()[i] = orig + STEP;
        let hi = loss(&PosteriorMatrix::from_logits(work.clone())?)?.0;
        work.as_mut_slice()[i] = orig - STEP;
        let lo = loss(&PosteriorMatrix::from_logits(work.clone())?)?.0;
        work.as_mut_slice()[i] = orig;
        worst = worst.max(relative_error(grad.as_slice()[i], (hi - lo) / (2.0 * STEP)));
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        checked: logits.as_slice().len(),
        max_relative_error: worst,
    })
}

fn check_model(
    name: &str,
    model: &Model,
    features: &FeatureMatrix,
    loss: &LossFn<'_>,
) -> Result<GradCheckReport> {
    let (post, cache) = model.forward(features)?;
    let (l0, d_logits) = loss(&post)?;
    if !l0.is_finite() {
        return Err(Error::Numeric(format!("{name}: loss is not finite")));
    }
    let (grads, _) = model.backward(&cache, &d_logits)?;
    let analytic: Vec<f64> = grads
        .blocks()
        .iter()
        .flat_map(|m| m.as_slice().iter().copied())
        .collect();

    let eval = |m: &Model| -> Result<f64> { Ok(loss(&m.posteriors(features)?)?.0) };
    let mut work = model.clone();
    let mut worst: f64 = 0.0;
    let mut flat = 0;
    let n_blocks = work.blocks().len();
    for b in 0..n_blocks {
        let len = work.blocks()[b].as_slice().len();
        for i in 0..len {
            let orig = work.blocks()[b].as_slice()[i];
            work.blocks_mut()[b].as_mut_slice()[i] = orig + STEP;
            let hi = eval(&work)?;
            work.blocks_mut()[b].as_mut_slice()[i] = orig - STEP;
            let lo = eval(&work)?;
            work.blocks_mut()[b].as_mut_slice()[i] = orig;
            worst = worst.max(relative_error(analytic[flat], (hi - lo) / (2.0 * STEP)));
            flat += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        checked: flat,
        max_relative_error: worst,
    })
}

fn small_arch(direction: Direction, layers: usize) -> ArchConfig {
    ArchConfig {
        direction,
        input_dim: 6,
        layers,
        cells: 8,
        projection: 5,
        output_dim: 5,
    }
}

fn random_features(rng: &mut Rng, frames: usize, dim: usize) -> Result<FeatureMatrix> {
    FeatureMatrix::new(uniform_fill(rng, frames, dim, -1.0, 1.0)?)
}

fn random_target(rng: &mut Rng, len: usize, labels: usize) -> Result<LabelSequence> {
    let ids = (0..len).map(|_| 1 + rng.below(labels - 1)).collect();
    LabelSequence::new(&LabelInventory::full(), ids)
}

/// CTC loss through a randomly initialized model, against every parameter.
pub fn check_model_ctc(direction: Direction, layers: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let arch = small_arch(direction, layers);
    // A wider init range than training uses keeps the gates away from the
    // linear regime so the check exercises the full cell derivative.
    let model = init_model(arch, &mut rng, 0.5)?;
    let features = random_features(&mut rng, 10, arch.input_dim)?;
    let target = random_target(&mut rng, 4, arch.output_dim)?;
    let name = format!("ctc via {direction} {layers}x{}", arch.cells);
    check_model(&name, &model, &features, &|p| {
        let r = ctc_loss_and_grad(p, &target)?;
        Ok((r.loss, r.grad))
    })
}

/// Smoothed CTC through a unidirectional model.
pub fn check_model_smoothed(alpha: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let arch = small_arch(Direction::Unidirectional, 2);
    let model = init_model(arch, &mut rng, 0.5)?;
    let features = random_features(&mut rng, 10, arch.input_dim)?;
    let target = random_target(&mut rng, 4, arch.output_dim)?;
    check_model(&format!("smoothed ctc (alpha={alpha}) via model"), &model, &features, &|p| {
        let r = smoothed_ctc_loss_and_grad(p, &target, alpha)?;
        Ok((r.loss, r.grad))
    })
}

/// Smoothed CTC wrt raw logits.
pub fn check_smoothed_logits(alpha: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let logits = uniform_fill(&mut rng, 8, 5, -2.0, 2.0)?;
    let target = random_target(&mut rng, 3, 5)?;
    check_logits(&format!("smoothed ctc (alpha={alpha}) logits"), &logits, &|p| {
        let r = smoothed_ctc_loss_and_grad(p, &target, alpha)?;
        Ok((r.loss, r.grad))
    })
}

/// Distillation cross entropy wrt the student logits.
pub fn check_distill(seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let teacher = PosteriorMatrix::from_logits(uniform_fill(&mut rng, 8, 5, -3.0, 3.0)?)?;
    let logits = uniform_fill(&mut rng, 8, 5, -2.0, 2.0)?;
    check_logits("distill ce wrt student logits", &logits, &|q| {
        Ok(distill_loss_and_grad(&DistillBatch::new(&teacher, q)?))
    })
}

/// Distillation cross entropy through a unidirectional student.
pub fn check_model_distill(seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let arch = small_arch(Direction::Unidirectional, 2);
    let model = init_model(arch, &mut rng, 0.5)?;
    let features = random_features(&mut rng, 10, arch.input_dim)?;
    let teacher = PosteriorMatrix::from_logits(uniform_fill(&mut rng, 10, arch.output_dim, -3.0, 3.0)?)?;
    check_model("distill ce via model", &model, &features, &|q| {
        Ok(distill_loss_and_grad(&DistillBatch::new(&teacher, q)?))
    })
}

/// Every check, in a fixed order.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    Ok(vec![
        check_model_ctc(Direction::Unidirectional, 2, seed)?,
        check_model_ctc(Direction::Bidirectional, 1, seed.wrapping_add(1))?,
        check_model_ctc(Direction::Bidirectional, 2, seed.wrapping_add(2))?,
        check_distill(seed.wrapping_add(3))?,
        check_model_distill(seed.wrapping_add(4))?,
        check_smoothed_logits(0.05, seed.wrapping_add(5))?,
        check_model_smoothed(0.05, seed.wrapping_add(6))?,
    ])
}
