use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Axis, Condition, StaircaseState, ECCENTRICITIES_DEG};
use crate::error::{Error, Result};

pub const STIMULUS_SIZE_DEG: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PlanLayout {
    pub blocks_per_eccentricity: usize,
    /// Presentations of each of the 18 axes within a block.
    pub repeats_per_block: usize,
}

impl Default for PlanLayout {
    fn default() -> Self {
        Self {
            blocks_per_eccentricity: 5,
            repeats_per_block: 5,
        }
    }
}

impl PlanLayout {
    pub fn trials_per_block(&self) -> usize {
        18 * self.repeats_per_block
    }

    pub fn total_trials(&self) -> usize {
        3 * self.blocks_per_eccentricity * self.trials_per_block()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks_per_eccentricity == 0 || self.repeats_per_block == 0 {
            return Err(Error::Config(format!("empty plan layout {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Block {
    pub eccentricity_deg: u32,
    pub axes: Vec<Axis>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionPlan {
    pub seed: u64,
    pub layout: PlanLayout,
    pub blocks: Vec<Block>,
}

/// Which stimulus appears first in the A/B pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum AbOrder {
    ReferenceFirst,
    PerturbedFirst,
}

/// A or B; used both for the identity of X and for the observer's answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum XIs {
    A,
    B,
}

impl XIs {
    pub fn other(self) -> Self {
        match self {
            XIs::A => XIs::B,
            XIs::B => XIs::A,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StimulusTiming {
    pub stimulus_ms: u32,
    pub blank_ms: u32,
}

impl Default for StimulusTiming {
    fn default() -> Self {
        Self {
            stimulus_ms: 200,
            blank_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrialSpec {
    pub trial_index: usize,
    pub block: usize,
    pub block_trial: usize,
    pub condition: Condition,
    pub reference_id: String,
    pub target: f64,
    pub ab_order: AbOrder,
    pub x_is: XIs,
    pub timing: StimulusTiming,
    pub size_deg: f64,
}

impl TrialSpec {
    /// Whether X shows the perturbed image.
    pub fn x_is_perturbed(&self) -> bool {
        matches!(
            (self.ab_order, self.x_is),
            (AbOrder::PerturbedFirst, XIs::A) | (AbOrder::ReferenceFirst, XIs::B)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrialOutcome {
    pub response: XIs,
    pub correct: bool,
    pub gaze_valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_timings: Option<serde_json::Value>,
}

impl TrialOutcome {
    pub fn scored(spec: &TrialSpec, response: XIs, gaze_valid: bool) -> Self {
        Self {
            response,
            correct: response == spec.x_is,
            gaze_valid,
            client_timings: None,
        }
    }
}

const STREAM_BLOCK_ORDER: u64 = 1;
const STREAM_BLOCK: u64 = 1 << 20;
const STREAM_POOL: u64 = 2 << 20;
const STREAM_TRIAL: u64 = 3 << 20;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Each eccentricity gets `blocks_per_eccentricity` blocks, in shuffled
/// order; each block holds every axis `repeats_per_block` times, shuffled.
pub fn plan_session(seed: u64, layout: PlanLayout) -> Result<SessionPlan> {
    layout.validate()?;
    let mut eccs: Vec<u32> = ECCENTRICITIES_DEG
        .iter()
        .flat_map(|&e| std::iter::repeat(e).take(layout.blocks_per_eccentricity))
        .collect();
    eccs.shuffle(&mut rng(seed, STREAM_BLOCK_ORDER));
    let blocks = eccs
        .into_iter()
        .enumerate()
        .map(|(b, eccentricity_deg)| {
            let mut axes: Vec<Axis> = Axis::all()
                .into_iter()
                .flat_map(|a| std::iter::repeat(a).take(layout.repeats_per_block))
                .collect();
            axes.shuffle(&mut rng(seed, STREAM_BLOCK + b as u64));
            Block {
                eccentricity_deg,
                axes,
            }
        })
        .collect();
    Ok(SessionPlan { seed, layout, blocks })
}

impl SessionPlan {
    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.axes.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(block, position within block)`.
    pub fn locate(&self, index: usize) -> Result<(usize, usize)> {
        let mut rest = index;
        for (b, block) in self.blocks.iter().enumerate() {
            if rest < block.axes.len() {
                return Ok((b, rest));
            }
            rest -= block.axes.len();
        }
        Err(Error::PlanExhausted(index))
    }

    pub fn condition(&self, index: usize) -> Result<Condition> {
        let (b, k) = self.locate(index)?;
        let block = &self.blocks[b];
        Ok(block.axes[k].at(block.eccentricity_deg))
    }

    /// Full description of trial `index`. Reference images are drawn without
    /// replacement within a block, reshuffling whenever the pool runs out.
    /// Everything is a pure function of the seed, the index and the
    /// staircase targets, so replays reproduce it exactly.
    pub fn trial_spec(&self, index: usize, staircases: &[StaircaseState], pool: &[String]) -> Result<TrialSpec> {
        if pool.is_empty() {
            return Err(Error::Config("empty reference pool".into()));
        }
        let (block, block_trial) = self.locate(index)?;
        let condition = self.condition(index)?;
        let staircase = staircases
            .get(condition.index())
            .filter(|s| s.condition == condition)
            .ok_or_else(|| Error::Staircase(format!("no staircase for {}", condition.label())))?;

        let cycle = block_trial / pool.len();
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng(self.seed, STREAM_POOL + ((block as u64) << 12) + cycle as u64));
        let reference_id = pool[order[block_trial % pool.len()]].clone();

        let mut r = rng(self.seed, STREAM_TRIAL + index as u64);
        let ab_order = if r.gen::<bool>() { AbOrder::ReferenceFirst } else { AbOrder::PerturbedFirst };
        let x_is = if r.gen::<bool>() { XIs::A } else { XIs::B };
        Ok(TrialSpec {
            trial_index: index,
            block,
            block_trial,
            condition,
            reference_id,
            target: staircase.current_target,
            ab_order,
            x_is,
            timing: StimulusTiming::default(),
            size_deg: STIMULUS_SIZE_DEG,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptive::{init_staircase, StaircaseConfig};
    use std::collections::{BTreeMap, BTreeSet};

    fn staircases() -> Vec<StaircaseState> {
        let cfg = StaircaseConfig::paper_defaults();
        Condition::all().into_iter().map(|c| init_staircase(c, &cfg).unwrap()).collect()
    }

    #[test]
    fn paper_design_counts() {
        let plan = plan_session(7, PlanLayout::default()).unwrap();
        assert_eq!(plan.blocks.len(), 15);
        assert!(plan.blocks.iter().all(|b| b.axes.len() == 90));
        assert_eq!(plan.len(), 1350);
        let mut per_ecc = BTreeMap::new();
        for b in &plan.blocks {
            *per_ecc.entry(b.eccentricity_deg).or_insert(0) += 1;
            let mut counts = BTreeMap::new();
            for a in &b.axes {
                *counts.entry(*a).or_insert(0) += 1;
            }
            assert_eq!(counts.len(), 18);
            assert!(counts.values().all(|&n| n == 5));
        }
        assert_eq!(per_ecc, BTreeMap::from([(4, 5), (8, 5), (12, 5)]));
        let mut per_condition = BTreeMap::new();
        for i in 0..plan.len() {
            *per_condition.entry(plan.condition(i).unwrap()).or_insert(0) += 1;
        }
        assert_eq!(per_condition.len(), 54);
        assert!(per_condition.values().all(|&n| n == 25));
        assert!(matches!(plan.locate(1350), Err(Error::PlanExhausted(1350))));
    }

    #[test]
    fn plans_are_seeded() {
        let a = plan_session(1, PlanLayout::default()).unwrap();
        assert_eq!(a, plan_session(1, PlanLayout::default()).unwrap());
        assert_ne!(a, plan_session(2, PlanLayout::default()).unwrap());
    }

    #[test]
    fn references_without_replacement_within_block() {
        let plan = plan_session(3, PlanLayout::default()).unwrap();
        let s = staircases();
        let pool: Vec<String> = (0..40).map(|i| format!("r{i}")).collect();
        for b in 0..2 {
            let ids: Vec<String> = (0..90)
                .map(|k| plan.trial_spec(b * 90 + k, &s, &pool).unwrap().reference_id)
                .collect();
            assert_eq!(ids[..40].iter().collect::<BTreeSet<_>>().len(), 40);
            assert_eq!(ids[40..80].iter().collect::<BTreeSet<_>>().len(), 40);
        }
    }

    #[test]
    fn ab_order_and_x_are_balanced() {
        let plan = plan_session(11, PlanLayout::default()).unwrap();
        let s = staircases();
        let pool = vec!["only".to_string()];
        let (mut ref_first, mut x_a, mut n) = (0, 0, 0);
        for seed in 0..8u64 {
            let plan = SessionPlan { seed, ..plan.clone() };
            for i in 0..1350 {
                let t = plan.trial_spec(i, &s, &pool).unwrap();
                ref_first += (t.ab_order == AbOrder::ReferenceFirst) as usize;
                x_a += (t.x_is == XIs::A) as usize;
                n += 1;
            }
        }
        assert!(n >= 10_000);
        for count in [ref_first, x_a] {
            let f = count as f64 / n as f64;
            assert!((f - 0.5).abs() < 0.02, "frequency {f}");
        }
    }

    #[test]
    fn spec_uses_staircase_target_and_paper_timing() {
        let plan = plan_session(5, PlanLayout::default()).unwrap();
        let mut s = staircases();
        let c = plan.condition(0).unwrap();
        s[c.index()].current_target = 0.123;
        let t = plan.trial_spec(0, &s, &["a".into()]).unwrap();
        assert_eq!(t.target, 0.123);
        assert_eq!(t.timing, StimulusTiming { stimulus_ms: 200, blank_ms: 500 });
        assert_eq!(t.size_deg, 4.0);
        assert_eq!(t, plan.trial_spec(0, &s, &["a".into()]).unwrap());
    }

    #[test]
    fn scoring() {
        let plan = plan_session(5, PlanLayout::default()).unwrap();
        let t = plan.trial_spec(0, &staircases(), &["a".into()]).unwrap();
        assert!(TrialOutcome::scored(&t, t.x_is, true).correct);
        assert!(!TrialOutcome::scored(&t, t.x_is.other(), true).correct);
    }
}
