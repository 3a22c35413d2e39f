//! Experiment state machine: the condition grid, 2-up-1-down staircases,
//! block plans and ABX trial construction.

mod plan;
mod staircase;

use serde::{Deserialize, Serialize};

use crate::backbone::TapId;
use crate::synthesis::Direction;

pub use plan::{
    plan_session, AbOrder, Block, PlanLayout, SessionPlan, StimulusTiming, TrialOutcome, TrialSpec, XIs,
    STIMULUS_SIZE_DEG,
};
pub use staircase::{
    compute_bounds, init_staircase, staircase_update, threshold_estimate, Move, StaircaseConfig, StaircaseState,
    StaircaseStatus, TapStaircase,
};

pub const ECCENTRICITIES_DEG: [u32; 3] = [4, 8, 12];
pub const COMPONENTS_PER_TAP: usize = 3;

/// One cell of the 3 taps × 3 components × 2 directions × 3 eccentricities grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Condition {
    pub tap: TapId,
    pub component: usize,
    pub direction: Direction,
    pub eccentricity_deg: u32,
}

/// The eccentricity-free part of a condition; the 18 cells interleaved
/// within one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Axis {
    pub tap: TapId,
    pub component: usize,
    pub direction: Direction,
}

impl Axis {
    pub fn all() -> Vec<Axis> {
        let mut out = Vec::with_capacity(18);
        for tap in TapId::ALL {
            for component in 0..COMPONENTS_PER_TAP {
                for direction in Direction::BOTH {
                    out.push(Axis {
                        tap,
                        component,
                        direction,
                    });
                }
            }
        }
        out
    }

    pub fn at(self, eccentricity_deg: u32) -> Condition {
        Condition {
            tap: self.tap,
            component: self.component,
            direction: self.direction,
            eccentricity_deg,
        }
    }
}

impl Condition {
    /// All 54 conditions in canonical order (tap, component, direction,
    /// eccentricity).
    pub fn all() -> Vec<Condition> {
        Axis::all()
            .into_iter()
            .flat_map(|a| ECCENTRICITIES_DEG.map(|e| a.at(e)))
            .collect()
    }

    pub fn axis(&self) -> Axis {
        Axis {
            tap: self.tap,
            component: self.component,
            direction: self.direction,
        }
    }

    /// Position in [`Condition::all`].
    pub fn index(&self) -> usize {
        let tap = TapId::ALL.iter().position(|t| *t == self.tap).unwrap();
        let dir = Direction::BOTH.iter().position(|d| *d == self.direction).unwrap();
        let ecc = ECCENTRICITIES_DEG
            .iter()
            .position(|e| *e == self.eccentricity_deg)
            .expect("eccentricity on the grid");
        ((tap * COMPONENTS_PER_TAP + self.component) * 2 + dir) * 3 + ecc
    }

    pub fn label(&self) -> String {
        let sign = match self.direction {
            Direction::Positive => '+',
            Direction::Negative => '-',
        };
        format!("{}/c{}{}/{}deg", self.tap, self.component, sign, self.eccentricity_deg)
    }
}
