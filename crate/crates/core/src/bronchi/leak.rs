use serde::{Deserialize, Serialize};

use crate::components::connected_components;
use crate::error::{BroncoError, Result};
use crate::grid::{BinaryMask, Connectivity};
use crate::morphology::{dilate, erode, StructuringElement};

pub const DEFAULT_MAX_EROSIONS: usize = 5;

#[derive(Clone, Debug)]
pub enum LeakRepair {
    /// The segmentation split after `erosions` erosions.
    Split {
        erosions: usize,
        /// Original segmentation minus the re-dilated seed component.
        separation: BinaryMask,
        /// Re-dilated seed component, clipped to the segmentation.
        kept: BinaryMask,
    },
    /// No split within the erosion budget, or the mask vanished first.
    Unrepairable { erosions: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakOutcome {
    Split,
    Unrepairable,
}

impl LeakRepair {
    pub fn erosions(&self) -> usize {
        match self {
            LeakRepair::Split { erosions, .. } | LeakRepair::Unrepairable { erosions } => *erosions,
        }
    }

    pub fn outcome(&self) -> LeakOutcome {
        match self {
            LeakRepair::Split { .. } => LeakOutcome::Split,
            LeakRepair::Unrepairable { .. } => LeakOutcome::Unrepairable,
        }
    }
}

/// Cut a leaked segmentation at its narrowest neck.
///
/// Erodes with a radius-1 ball until the 26-component count rises, then
/// dilates the component holding the seed back by the same number of
/// steps. If erosion removed the seed itself, the component nearest to it
/// is kept.
pub fn repair_leak(segmentation: &BinaryMask, seed: usize, max_erosions: usize) -> Result<LeakRepair> {
    let g = *segmentation.geometry();
    if segmentation.none() {
        return Err(BroncoError::param("cannot repair an empty segmentation"));
    }
    if seed >= g.len() {
        return Err(BroncoError::param("seed lies outside the volume"));
    }
    let ball = StructuringElement::ball(1);
    let mut current = segmentation.clone();
    let mut cc = connected_components(&current, Connectivity::TwentySix);
    let mut erosions = 0;
    if cc.len() < 2 {
        let mut split = false;
        while erosions < max_erosions {
            let next = erode(&current, &ball)?;
            erosions += 1;
            if next.none() || next == current {
                return Ok(LeakRepair::Unrepairable { erosions });
            }
            let next_cc = connected_components(&next, Connectivity::TwentySix);
            let rose = next_cc.len() > cc.len();
            current = next;
            cc = next_cc;
            if rose {
                split = true;
                break;
            }
        }
        if !split {
            return Ok(LeakRepair::Unrepairable { erosions });
        }
    }

    let label = match cc.labels.data()[seed] {
        0 => nearest_label(&cc.labels, seed),
        l => l,
    };
    let mut kept = cc.mask_of(label);
    for _ in 0..erosions {
        kept = dilate(&kept, &ball)?;
    }
    let kept = kept.intersection(segmentation)?;
    let separation = segmentation.difference(&kept)?;
    Ok(LeakRepair::Split {
        erosions,
        separation,
        kept,
    })
}

fn nearest_label(labels: &crate::grid::LabelMap, seed: usize) -> u32 {
    let g = labels.geometry();
    let mut best = (f64::INFINITY, 0u32);
    for (i, &l) in labels.data().iter().enumerate() {
        if l != 0 {
            let d = g.distance_mm(i, seed);
            if d < best.0 {
                best = (d, l);
            }
        }
    }
    best.1
}
