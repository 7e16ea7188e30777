//! Connectionist temporal classification: loss, gradient and greedy decoding.

use crate::error::{Error, Result};
use crate::labelset::{LabelSequence, BLANK};
use crate::model::PosteriorMatrix;
use crate::numerics::{argmax, log_add, Matrix};

/// Largest path count [`ctc_brute_force`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u64 = 10_000_000;

/// Negative log-likelihood of a target and its gradient wrt the logits.
#[derive(Clone, Debug)]
pub struct CtcResult {
    /// Nats; `+inf` when no alignment fits in the available frames.
    pub loss: f64,
    /// `T × (K+1)`, all zero for impossible alignments.
    pub grad: Matrix,
}

impl CtcResult {
    pub fn is_feasible(&self) -> bool {
        self.loss.is_finite()
    }
}

/// Target with a blank before, between and after its symbols (`2U+1` long).
pub fn extended_labels(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &y in target {
        ext.push(y);
        ext.push(BLANK);
    }
    ext
}

/// Shortest path length able to emit `target`: one frame per symbol plus a
/// separating blank between equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_target(post: &PosteriorMatrix, target: &LabelSequence) -> Result<()> {
    if let Some(&bad) = target.ids().iter().find(|&&id| id == BLANK || id >= post.labels()) {
        return Err(Error::usage(format!(
            "target id {bad} invalid for {} output labels",
            post.labels()
        )));
    }
    Ok(())
}

/// Removes repeats, then blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Forward variables in the log domain. `alpha[t][s]` includes the emission
/// at frame `t`.
fn log_alpha(lp: &Matrix, ext: &[usize]) -> Vec<Vec<f64>> {
    let frames = lp.rows();
    let s_len = ext.len();
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; frames];
    alpha[0][0] = lp.get(0, ext[0]);
    if s_len > 1 {
        alpha[0][1] = lp.get(0, ext[1]);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t);
        let prev = &prev[t - 1];
        let cur = &mut cur[0];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                a = log_add(a, prev[s - 2]);
            }
            if a != f64::NEG_INFINITY {
                cur[s] = a + lp.get(t, ext[s]);
            }
        }
    }
    alpha
}

/// Backward variables in the log domain. `beta[t][s]` covers frames after
/// `t` only, so `alpha[t][s] + beta[t][s]` is the log mass of all paths that
/// occupy state `s` at frame `t`.
fn log_beta(lp: &Matrix, ext: &[usize]) -> Vec<Vec<f64>> {
    let frames = lp.rows();
    let s_len = ext.len();
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; frames];
    beta[frames - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[frames - 1][s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut(t + 1);
        let next = &next[0];
        let cur = &mut cur[t];
        for s in 0..s_len {
            let mut b = next[s] + lp.get(t + 1, ext[s]);
            if s + 1 < s_len {
                b = log_add(b, next[s + 1] + lp.get(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                b = log_add(b, next[s + 2] + lp.get(t + 1, ext[s + 2]));
            }
            cur[s] = b;
        }
    }
    beta
}

/// `-ln P(target | x)` by the forward-backward recursion, with the gradient
/// `P_t(k) − Σ_{s: ext_s = k} α_t(s) β_t(s) / P(target | x)` wrt each logit.
pub fn ctc_loss_and_grad(post: &PosteriorMatrix, target: &LabelSequence) -> Result<CtcResult> {
    check_target(post, target)?;
    let (frames, labels) = (post.frames(), post.labels());
    let infeasible = || CtcResult {
        loss: f64::INFINITY,
        grad: Matrix::zeros(frames, labels),
    };
    if frames < min_frames(target.ids()) {
        return Ok(infeasible());
    }
    let lp = post.log_probs();
    let ext = extended_labels(target.ids());
    let alpha = log_alpha(lp, &ext);
    let s_len = ext.len();
    let log_lik = log_add(alpha[frames - 1][s_len - 1], alpha[frames - 1][s_len - 2]);
    if log_lik == f64::NEG_INFINITY {
        return Ok(infeasible());
    }
    let beta = log_beta(lp, &ext);

    let mut grad = post.probs().clone();
    let mut occupancy = vec![f64::NEG_INFINITY; labels];
    for t in 0..frames {
        occupancy.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        for s in 0..s_len {
            let v = alpha[t][s] + beta[t][s];
            occupancy[ext[s]] = log_add(occupancy[ext[s]], v);
        }
        let row = grad.row_mut(t);
        for (k, g) in row.iter_mut().enumerate() {
            if occupancy[k] != f64::NEG_INFINITY {
                *g -= (occupancy[k] - log_lik).exp();
            }
        }
    }
    Ok(CtcResult {
        loss: -log_lik,
        grad,
    })
}

/// `-ln P(target | x)` by summing every length-`T` path that collapses to the
/// target. Exponential in `T`; refuses more than [`BRUTE_FORCE_LIMIT`] paths.
pub fn ctc_brute_force(post: &PosteriorMatrix, target: &LabelSequence) -> Result<f64> {
    check_target(post, target)?;
    let (frames, labels) = (post.frames(), post.labels());
    let count = (labels as u64).checked_pow(frames as u32).unwrap_or(u64::MAX);
    if count > BRUTE_FORCE_LIMIT {
        return Err(Error::usage(format!(
            "{labels}^{frames} paths exceed the enumeration limit"
        )));
    }
    let probs = post.probs();
    let mut path = vec![0usize; frames];
    let mut total = 0.0f64;
    for _ in 0..count {
        if collapse(&path) == target.ids() {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &k)| probs.get(t, k))
                .product::<f64>();
        }
        // odometer increment
        for digit in path.iter_mut().rev() {
            *digit += 1;
            if *digit < labels {
                break;
            }
            *digit = 0;
        }
    }
    Ok(-total.ln())
}

/// Per-frame argmax (lowest id wins ties), then [`collapse`].
pub fn greedy_decode(post: &PosteriorMatrix) -> Vec<usize> {
    let path: Vec<usize> = (0..post.frames())
        .map(|t| argmax(post.probs().row(t)))
        .collect();
    collapse(&path)
}
