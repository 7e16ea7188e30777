//! Teacher-student distillation and uniform label smoothing.

use crate::ctc::{ctc_loss_and_grad, CtcResult};
use crate::error::{Error, Result};
use crate::labelset::LabelSequence;
use crate::model::PosteriorMatrix;
use crate::numerics::Matrix;

/// `Σ_k p_k ln(p_k / q_k)` with `0 ln 0 = 0`; `+inf` when `q` misses mass
/// that `p` has.
pub fn frame_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::usage(format!(
            "distributions over {} and {} labels",
            p.len(),
            q.len()
        )));
    }
    let mut kl = 0.0;
    for (&pk, &qk) in p.iter().zip(q) {
        if pk > 0.0 {
            if qk <= 0.0 {
                return Ok(f64::INFINITY);
            }
            kl += pk * (pk / qk).ln();
        }
    }
    Ok(kl)
}

/// Frozen teacher posteriors paired with the student's.
#[derive(Clone, Copy, Debug)]
pub struct DistillBatch<'a> {
    pub teacher: &'a PosteriorMatrix,
    pub student: &'a PosteriorMatrix,
}

impl<'a> DistillBatch<'a> {
    pub fn new(teacher: &'a PosteriorMatrix, student: &'a PosteriorMatrix) -> Result<Self> {
        if (teacher.frames(), teacher.labels()) != (student.frames(), student.labels()) {
            return Err(Error::usage(format!(
                "teacher posteriors {}x{} vs student {}x{}",
                teacher.frames(),
                teacher.labels(),
                student.frames(),
                student.labels()
            )));
        }
        Ok(DistillBatch { teacher, student })
    }
}

/// Frame-level cross entropy `-Σ_t Σ_k P_t(k) ln Q_t(k)` between teacher `P`
/// and student `Q`, with gradient `Q − P` wrt the student logits. The teacher
/// entropy is left out; it does not depend on the student.
pub fn distill_loss_and_grad(batch: &DistillBatch<'_>) -> (f64, Matrix) {
    let p = batch.teacher.probs();
    let log_q = batch.student.log_probs();
    let loss = p
        .as_slice()
        .iter()
        .zip(log_q.as_slice())
        .map(|(&pk, &lq)| if pk > 0.0 { -pk * lq } else { 0.0 })
        .sum();
    let mut grad = batch.student.probs().clone();
    grad.add_scaled(p, -1.0).expect("shapes checked by DistillBatch");
    (loss, grad)
}

/// `Σ_t D_KL(P_t || U)` for `U` uniform over all `K+1` labels, blank
/// included, and its gradient wrt the logits.
pub fn uniform_kl_and_grad(post: &PosteriorMatrix) -> (f64, Matrix) {
    let labels = post.labels();
    let log_k = (labels as f64).ln();
    let mut grad = Matrix::zeros(post.frames(), labels);
    let mut total = 0.0;
    for t in 0..post.frames() {
        let p = post.probs().row(t);
        let lp = post.log_probs().row(t);
        // Σ p ln p = -H(P_t)
        let neg_entropy: f64 = p.iter().zip(lp).map(|(a, b)| a * b).sum();
        total += log_k + neg_entropy;
        for (k, g) in grad.row_mut(t).iter_mut().enumerate() {
            *g = p[k] * (lp[k] - neg_entropy);
        }
    }
    (total, grad)
}

/// `(1−α)·L_CTC + α·Σ_t D_KL(P_t || U)`.
///
/// An infeasible alignment yields an infinite loss and zero gradient unless
/// `α = 1`, where the CTC term drops out.
pub fn smoothed_ctc_loss_and_grad(
    post: &PosteriorMatrix,
    target: &LabelSequence,
    alpha: f64,
) -> Result<CtcResult> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::usage(format!("smoothing weight {alpha} outside [0, 1]")));
    }
    let ctc = ctc_loss_and_grad(post, target)?;
    if alpha == 0.0 {
        return Ok(ctc);
    }
    let (reg, reg_grad) = uniform_kl_and_grad(post);
    if alpha == 1.0 {
        return Ok(CtcResult {
            loss: reg,
            grad: reg_grad,
        });
    }
    if !ctc.is_feasible() {
        return Ok(ctc);
    }
    let mut grad = ctc.grad;
    grad.scale(1.0 - alpha);
    grad.add_scaled(&reg_grad, alpha)?;
    Ok(CtcResult {
        loss: (1.0 - alpha) * ctc.loss + alpha * reg,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelset::LabelInventory;
    use crate::numerics::{uniform_fill, Rng};

    fn random_post(rng: &mut Rng, frames: usize, labels: usize) -> PosteriorMatrix {
        PosteriorMatrix::from_logits(uniform_fill(rng, frames, labels, -2.0, 2.0).unwrap()).unwrap()
    }

    fn entropy(p: &[f64]) -> f64 {
        -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
    }

    fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
        -p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * b.ln()).sum::<f64>()
    }

    #[test]
    fn frame_kl_examples() {
        assert_eq!(frame_kl(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert!((frame_kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(frame_kl(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), f64::INFINITY);
        assert!(matches!(frame_kl(&[1.0], &[0.5, 0.5]), Err(Error::Usage(_))));
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let post = random_post(&mut rng, 2, 6);
            let (p, q) = (post.probs().row(0), post.probs().row(1));
            let kl = frame_kl(p, q).unwrap();
            assert!(kl >= 0.0);
            assert!((kl - (cross_entropy(p, q) - entropy(p))).abs() < 1e-12);
        }
    }

    #[test]
    fn distill_at_equality_is_the_entropy_floor() {
        let mut rng = Rng::new(2);
        let post = random_post(&mut rng, 5, 4);
        let (loss, grad) = distill_loss_and_grad(&DistillBatch::new(&post, &post).unwrap());
        let floor: f64 = (0..5).map(|t| entropy(post.probs().row(t))).sum();
        assert!((loss - floor).abs() < 1e-12);
        assert!(grad.as_slice().iter().all(|&g| g == 0.0));

        let u = PosteriorMatrix::from_logits(Matrix::zeros(1, 2)).unwrap();
        let (loss, _) = distill_loss_and_grad(&DistillBatch::new(&u, &u).unwrap());
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn distill_batch_requires_matching_shapes() {
        let a = PosteriorMatrix::from_logits(Matrix::zeros(3, 4)).unwrap();
        let b = PosteriorMatrix::from_logits(Matrix::zeros(3, 5)).unwrap();
        assert!(matches!(DistillBatch::new(&a, &b), Err(Error::Usage(_))));
    }

    #[test]
    fn distill_gradient_rows_sum_to_zero() {
        let mut rng = Rng::new(3);
        let (p, q) = (random_post(&mut rng, 6, 5), random_post(&mut rng, 6, 5));
        let (_, g) = distill_loss_and_grad(&DistillBatch::new(&p, &q).unwrap());
        for t in 0..6 {
            assert!(g.row(t).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_descent_on_student_logits_matches_teacher() {
        let mut rng = Rng::new(4);
        let teacher = random_post(&mut rng, 4, 5);
        let mut logits = Matrix::zeros(4, 5);
        for _ in 0..1000 {
            let student = PosteriorMatrix::from_logits(logits.clone()).unwrap();
            let (_, g) = distill_loss_and_grad(&DistillBatch::new(&teacher, &student).unwrap());
            logits.add_scaled(&g, -1.0).unwrap();
        }
        let student = PosteriorMatrix::from_logits(logits).unwrap();
        let gap = teacher
            .probs()
            .as_slice()
            .iter()
            .zip(student.probs().as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-3, "gap {gap}");
    }

    #[test]
    fn smoothing_limits() {
        let inv = LabelInventory::full();
        let y = LabelSequence::new(&inv, vec![1, 2]).unwrap();
        let mut rng = Rng::new(5);
        let post = random_post(&mut rng, 5, 3);
        let plain = ctc_loss_and_grad(&post, &y).unwrap();
        let zero = smoothed_ctc_loss_and_grad(&post, &y, 0.0).unwrap();
        assert_eq!(plain.loss, zero.loss);
        assert_eq!(plain.grad, zero.grad);

        let uniform = PosteriorMatrix::from_logits(Matrix::zeros(5, 3)).unwrap();
        let one = smoothed_ctc_loss_and_grad(&uniform, &y, 1.0).unwrap();
        assert!(one.loss.abs() < 1e-14, "{}", one.loss);
        assert!(one.grad.as_slice().iter().all(|g| g.abs() < 1e-15));

        for bad in [-0.1, 1.5, f64::NAN] {
            assert!(matches!(
                smoothed_ctc_loss_and_grad(&post, &y, bad),
                Err(Error::Usage(_))
            ));
        }
    }

    #[test]
    fn smoothing_composes_ctc_and_entropy() {
        let inv = LabelInventory::full();
        let y = LabelSequence::new(&inv, vec![2, 1, 3]).unwrap();
        let mut rng = Rng::new(6);
        let post = random_post(&mut rng, 8, 4);
        let ctc = ctc_loss_and_grad(&post, &y).unwrap().loss;
        let reg: f64 = (0..8).map(|t| 4f64.ln() - entropy(post.probs().row(t))).sum();
        for alpha in [0.0, 0.05, 0.25, 0.5, 1.0] {
            let got = smoothed_ctc_loss_and_grad(&post, &y, alpha).unwrap().loss;
            let want = (1.0 - alpha) * ctc + alpha * reg;
            assert!((got - want).abs() < 1e-12, "alpha {alpha}: {got} vs {want}");
        }
    }

    #[test]
    fn infeasible_target_stays_infinite_below_alpha_one() {
        let inv = LabelInventory::full();
        let y = LabelSequence::new(&inv, vec![1, 2, 1]).unwrap();
        let post = PosteriorMatrix::from_logits(Matrix::zeros(2, 3)).unwrap();
        let r = smoothed_ctc_loss_and_grad(&post, &y, 0.05).unwrap();
        assert_eq!(r.loss, f64::INFINITY);
        assert_eq!(r.grad.sum_of_squares(), 0.0);
    }
}
