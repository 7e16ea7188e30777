use crate::error::{Error, Result};
use crate::model::Model;

fn check_shapes(a: &Model, b: &Model, what: &str) -> Result<()> {
    let same = a.arch() == b.arch()
        && a.blocks()
            .iter()
            .zip(b.blocks())
            .all(|(x, y)| x.shape() == y.shape());
    if same {
        Ok(())
    } else {
        Err(Error::usage(format!("{what} do not match the parameter shapes")))
    }
}

/// `v ← μ·v − lr·g`, then `θ ← θ + v`.
pub fn sgd_momentum_step(
    params: &mut Model,
    grads: &Model,
    velocity: &mut Model,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    check_shapes(params, grads, "gradients")?;
    check_shapes(params, velocity, "velocities")?;
    for ((p, g), v) in params
        .blocks_mut()
        .into_iter()
        .zip(grads.blocks())
        .zip(velocity.blocks_mut())
    {
        for ((pi, gi), vi) in p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(v.as_mut_slice())
        {
            *vi = momentum * *vi - lr * gi;
            *pi += *vi;
        }
    }
    Ok(())
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Model, max_norm: f64) -> f64 {
    let norm = grads.sum_of_squares().sqrt();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    LrFloor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpochDecision {
    Continue,
    Stop(StopReason),
}

/// Dev-driven learning rate annealing.
///
/// After each epoch the dev criterion is compared with the best seen so far;
/// a worse value multiplies the rate by `decay`. Weights are never rolled
/// back.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr: f64,
    pub decay: f64,
    pub floor: f64,
    pub max_epochs: usize,
    pub epoch: usize,
    pub best: Option<f64>,
}

impl LrSchedule {
    pub fn new(lr: f64, decay: f64, floor: f64, max_epochs: usize) -> Self {
        LrSchedule {
            lr,
            decay,
            floor,
            max_epochs,
            epoch: 0,
            best: None,
        }
    }

    pub fn end_of_epoch(&mut self, dev: f64) -> Result<EpochDecision> {
        if !dev.is_finite() {
            return Err(Error::Numeric(format!(
                "dev criterion {dev} after epoch {}",
                self.epoch + 1
            )));
        }
        self.epoch += 1;
        match self.best {
            Some(best) if dev > best => self.lr *= self.decay,
            _ => self.best = Some(dev),
        }
        Ok(if self.lr < self.floor {
            EpochDecision::Stop(StopReason::LrFloor)
        } else if self.epoch >= self.max_epochs {
            EpochDecision::Stop(StopReason::MaxEpochs)
        } else {
            EpochDecision::Continue
        })
    }

    /// Forgets the best criterion, for when the objective itself changes.
    pub fn reset_best(&mut self) {
        self.best = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ArchConfig, Direction};
    use crate::numerics::Rng;

    fn tiny() -> Model {
        let arch = ArchConfig {
            direction: Direction::Unidirectional,
            input_dim: 3,
            layers: 1,
            cells: 2,
            projection: 2,
            output_dim: 3,
        };
        init_model(arch, &mut Rng::new(1), 0.5).unwrap()
    }

    fn diff(a: &Model, b: &Model) -> Vec<f64> {
        a.blocks()
            .iter()
            .zip(b.blocks())
            .flat_map(|(x, y)| x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| p - q))
            .collect()
    }

    #[test]
    fn plain_sgd_subtracts_the_gradient() {
        let start = tiny();
        let g = init_model(*start.arch(), &mut Rng::new(2), 1.0).unwrap();
        let mut p = start.clone();
        let mut v = start.zeros_like();
        sgd_momentum_step(&mut p, &g, &mut v, 1.0, 0.0).unwrap();
        let mut want = start.clone();
        want.add_scaled(&g, -1.0).unwrap();
        assert_eq!(p, want);

        let mut q = start.clone();
        let mut v = start.zeros_like();
        sgd_momentum_step(&mut q, &start.zeros_like(), &mut v, 1.0, 0.9).unwrap();
        assert_eq!(q, start);
    }

    #[test]
    fn momentum_unrolls() {
        let start = tiny();
        let mut g = start.zeros_like();
        g.fill(0.5);
        let mut p = start.clone();
        let mut v = start.zeros_like();
        sgd_momentum_step(&mut p, &g, &mut v, 1.0, 0.9).unwrap();
        assert!(diff(&p, &start).iter().all(|d| (d + 0.5).abs() < 1e-15));
        let mid = p.clone();
        sgd_momentum_step(&mut p, &g, &mut v, 1.0, 0.9).unwrap();
        assert!(diff(&p, &mid).iter().all(|d| (d + 0.95).abs() < 1e-15));
    }

    #[test]
    fn shape_mismatch_is_a_usage_error() {
        let mut p = tiny();
        let mut other_arch = *p.arch();
        other_arch.cells = 3;
        let g = Model::zeros(other_arch).unwrap();
        let mut v = p.zeros_like();
        assert!(matches!(
            sgd_momentum_step(&mut p, &g, &mut v, 1.0, 0.9),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = tiny();
        g.fill(1.0);
        let n = g.param_count() as f64;
        assert!((clip_global_norm(&mut g, 1.0) - n.sqrt()).abs() < 1e-12);
        assert!((g.sum_of_squares().sqrt() - 1.0).abs() < 1e-12);
        let before = g.clone();
        clip_global_norm(&mut g, 10.0);
        assert_eq!(g, before);
    }

    #[test]
    fn degraded_dev_decays_the_rate() {
        let mut s = LrSchedule::new(1e-4, 0.7, 1e-7, 30);
        assert_eq!(s.end_of_epoch(1.0).unwrap(), EpochDecision::Continue);
        assert_eq!(s.lr, 1e-4);
        s.end_of_epoch(1.1).unwrap();
        assert_eq!(s.lr, 1e-4 * 0.7);
        assert_eq!(s.best, Some(1.0));
    }

    #[test]
    fn improving_dev_keeps_the_rate() {
        let mut s = LrSchedule::new(1e-4, 0.7, 1e-7, 30);
        for d in [5.0, 4.0, 3.0, 3.0, 2.0] {
            s.end_of_epoch(d).unwrap();
        }
        assert_eq!(s.lr, 1e-4);
        assert_eq!(s.best, Some(2.0));
    }

    #[test]
    fn stops_at_floor_and_max_epochs() {
        let mut s = LrSchedule::new(1.5e-7, 0.5, 1e-7, 30);
        s.end_of_epoch(1.0).unwrap();
        assert_eq!(s.end_of_epoch(2.0).unwrap(), EpochDecision::Stop(StopReason::LrFloor));
        let mut s = LrSchedule::new(1e-4, 0.7, 1e-7, 2);
        assert_eq!(s.end_of_epoch(1.0).unwrap(), EpochDecision::Continue);
        assert_eq!(s.end_of_epoch(0.5).unwrap(), EpochDecision::Stop(StopReason::MaxEpochs));
        assert!(matches!(s.end_of_epoch(f64::NAN), Err(Error::Numeric(_))));
    }
}
