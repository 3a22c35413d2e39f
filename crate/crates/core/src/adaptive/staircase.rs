use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Condition, TrialOutcome};
use crate::backbone::TapId;
use crate::error::{Error, Result};

/// Per-tap staircase parameters, in ICA component units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TapStaircase {
    pub step: f64,
    /// Raw `[min, max]` search limits before the 0.4-step inset.
    pub search_range: [f64; 2],
    /// Starting target; the midpoint of `search_range` when absent.
    #[serde(default)]
    pub initial: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StaircaseConfig {
    pub taps: BTreeMap<TapId, TapStaircase>,
    pub reversal_quota: usize,
}

impl StaircaseConfig {
    /// Reference step sizes: 10 early, 0.3 mid, 0.02 late. The search ranges
    /// bracket the reference human thresholds.
    pub fn paper_defaults() -> Self {
        let tap = |step: f64, max: f64| TapStaircase {
            step,
            search_range: [0.0, max],
            initial: None,
        };
        Self {
            taps: [
                (TapId::Early, tap(10.0, 120.0)),
                (TapId::Mid, tap(0.3, 1.5)),
                (TapId::Late, tap(0.02, 0.4)),
            ]
            .into(),
            reversal_quota: 5,
        }
    }

    /// Calibrated for the desk backbone, whose components all have unit
    /// variance over the corpus: one grid for every tap.
    pub fn desk_default() -> Self {
        let tap = TapStaircase {
            step: 2.0,
            search_range: [0.0, 20.0],
            initial: None,
        };
        Self {
            taps: TapId::ALL.into_iter().map(|t| (t, tap.clone())).collect(),
            reversal_quota: 5,
        }
    }

    pub fn tap(&self, tap: TapId) -> Result<&TapStaircase> {
        self.taps
            .get(&tap)
            .ok_or_else(|| Error::Config(format!("no staircase parameters for tap {tap}")))
    }
}

impl Default for StaircaseConfig {
    fn default() -> Self {
        Self::paper_defaults()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Move {
    Up,
    Down,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StaircaseStatus {
    Running,
    Converged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StaircaseState {
    pub condition: Condition,
    pub current_target: f64,
    pub step_size: f64,
    pub correct_streak: u8,
    /// Target values at which the movement direction flipped.
    pub reversals: Vec<f64>,
    pub last_move: Move,
    pub bounds: [f64; 2],
    pub trial_count: usize,
    pub reversal_quota: usize,
    pub status: StaircaseStatus,
}

/// `[min + 0.4·step, max − 0.4·step]`
pub fn compute_bounds(search_range: [f64; 2], step: f64) -> Result<[f64; 2]> {
    let lower = search_range[0] + 0.4 * step;
    let upper = search_range[1] - 0.4 * step;
    if !(upper > lower) {
        return Err(Error::Staircase(format!(
            "search range {search_range:?} with step {step} leaves no room: [{lower}, {upper}]"
        )));
    }
    Ok([lower, upper])
}

pub fn init_staircase(condition: Condition, config: &StaircaseConfig) -> Result<StaircaseState> {
    let tap = config.tap(condition.tap)?;
    if !(tap.step > 0.0) {
        return Err(Error::Staircase(format!("step must be positive, got {}", tap.step)));
    }
    if config.reversal_quota == 0 {
        return Err(Error::Staircase("reversal quota must be positive".into()));
    }
    let bounds = compute_bounds(tap.search_range, tap.step)?;
    let initial = tap
        .initial
        .unwrap_or(0.5 * (tap.search_range[0] + tap.search_range[1]));
    if !(bounds[0]..=bounds[1]).contains(&initial) {
        return Err(Error::Staircase(format!(
            "initial target {initial} outside bounds [{}, {}]",
            bounds[0], bounds[1]
        )));
    }
    Ok(StaircaseState {
        condition,
        current_target: initial,
        step_size: tap.step,
        correct_streak: 0,
        reversals: Vec::new(),
        last_move: Move::None,
        bounds,
        trial_count: 0,
        reversal_quota: config.reversal_quota,
        status: StaircaseStatus::Running,
    })
}

/// Two consecutive valid correct responses move the target down one step; any
/// valid error moves it up one step. Gaze-invalid trials only count.
pub fn staircase_update(state: &StaircaseState, outcome: &TrialOutcome) -> Result<StaircaseState> {
    if state.status == StaircaseStatus::Converged {
        return Err(Error::Staircase(format!(
            "update on converged staircase {}",
            state.condition.label()
        )));
    }
    let mut next = state.clone();
    next.trial_count += 1;
    if !outcome.gaze_valid {
        return Ok(next);
    }
    let movement = if outcome.correct {
        next.correct_streak += 1;
        if next.correct_streak >= 2 {
            next.correct_streak = 0;
            Move::Down
        } else {
            Move::None
        }
    } else {
        next.correct_streak = 0;
        Move::Up
    };
    if movement == Move::None {
        return Ok(next);
    }
    if next.last_move != Move::None && next.last_move != movement {
        next.reversals.push(next.current_target);
    }
    let delta = if movement == Move::Down { -next.step_size } else { next.step_size };
    next.current_target = (next.current_target + delta).clamp(next.bounds[0], next.bounds[1]);
    next.last_move = movement;
    if next.reversals.len() >= next.reversal_quota {
        next.status = StaircaseStatus::Converged;
    }
    Ok(next)
}

/// Mean of the last `reversal_quota` reversal values.
pub fn threshold_estimate(state: &StaircaseState) -> Result<f64> {
    let need = state.reversal_quota;
    let have = state.reversals.len();
    if have < need || need == 0 {
        return Err(Error::InsufficientReversals { have, need });
    }
    let tail = &state.reversals[have - need..];
    Ok(tail.iter().sum::<f64>() / need as f64)
}
