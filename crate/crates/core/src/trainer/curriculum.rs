use std::ops::Range;

use crate::error::{Error, Result};
use crate::labelset::InventoryMode;
use crate::trainer::config::Curriculum;

/// A run of epochs sharing one training subset and output inventory.
#[derive(Clone, Debug, PartialEq)]
pub struct Phase {
    /// 0-based epoch indices; the last phase is open-ended and runs to the
    /// end of training.
    pub epochs: Range<usize>,
    /// Indices into the training set, in corpus order.
    pub subset: Vec<usize>,
    pub mode: InventoryMode,
}

/// Length threshold at the nearest-rank percentile of `lengths`.
pub fn percentile_threshold(lengths: &[usize], percentile: f64) -> Result<usize> {
    if lengths.is_empty() {
        return Err(Error::usage("percentile of an empty corpus"));
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::usage(format!("percentile {percentile} outside (0, 100]")));
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let rank = ((percentile / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Splits training into phases. `lengths` are the stacked frame counts of the
/// training utterances.
pub fn curriculum_plan(lengths: &[usize], curriculum: &Curriculum, max_epochs: usize) -> Result<Vec<Phase>> {
    if lengths.is_empty() {
        return Err(Error::usage("empty training set"));
    }
    let all: Vec<usize> = (0..lengths.len()).collect();
    let full = |start: usize| Phase {
        epochs: start..max_epochs,
        subset: all.clone(),
        mode: InventoryMode::Full,
    };
    Ok(match *curriculum {
        Curriculum::None => vec![full(0)],
        Curriculum::ShortFirst { percentile, epochs } => {
            let limit = percentile_threshold(lengths, percentile)?;
            let subset: Vec<usize> = all.iter().copied().filter(|&i| lengths[i] <= limit).collect();
            if subset.is_empty() {
                return Err(Error::usage("short-first phase selects no utterances"));
            }
            vec![
                Phase {
                    epochs: 0..epochs,
                    subset,
                    mode: InventoryMode::Full,
                },
                full(epochs),
            ]
        }
        Curriculum::ReducedLabels { epochs } => vec![
            Phase {
                epochs: 0..epochs,
                subset: all.clone(),
                mode: InventoryMode::Reduced,
            },
            full(epochs),
        ],
    })
}
