//! Closed-loop sessions driven by the simulated observer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adaptive::{Axis, PlanLayout, StaircaseConfig, TrialSpec};
use crate::backbone::TapId;
use crate::error::{Error, Result};
use crate::observer::{perceptual_distance, DistanceMetric, ObserverModel};
use crate::session::{Session, SessionHeader, TrialRecord};
use crate::stimuli::{StimulusKey, StimulusSource};

/// Header for an offline session; the id and timestamp are fixed so that
/// repeated runs are byte-identical.
pub fn simulation_header(
    subject_id: &str,
    seed: u64,
    layout: PlanLayout,
    staircase: StaircaseConfig,
    reference_pool: Vec<String>,
) -> SessionHeader {
    SessionHeader {
        session_id: format!("sim-{subject_id}-{seed}"),
        subject_id: subject_id.to_string(),
        config_ref: "offline".into(),
        seed,
        created_at: 0,
        layout,
        staircase,
        reference_pool,
        idempotency_key: None,
    }
}

/// Runs every trial of the plan. `distance` maps a trial to the perceptual
/// distance between its reference and perturbed stimuli.
pub fn run_session(
    header: SessionHeader,
    observer: &ObserverModel,
    mut distance: impl FnMut(&TrialSpec) -> Result<f64>,
) -> Result<(Session, Vec<TrialRecord>)> {
    observer.validate()?;
    let seed = header.seed;
    let mut session = Session::new(header)?;
    let mut log = Vec::with_capacity(session.total_trials());
    while !session.is_complete() {
        let spec = session.current_trial()?;
        let d = distance(&spec)?;
        let mut rng = observer.trial_rng(seed, spec.trial_index);
        let outcome = observer.respond_at_distance(&spec, d, &mut rng);
        log.push(session.apply(outcome)?);
    }
    Ok((session, log))
}

/// Distance between the actual reference and synthesized images of a trial.
pub fn image_distance<'a>(
    source: &'a dyn StimulusSource,
    metric: DistanceMetric,
) -> impl FnMut(&TrialSpec) -> Result<f64> + 'a {
    move |spec| {
        let reference = source.reference(&spec.reference_id)?;
        let perturbed = source.perturbed(&StimulusKey::for_trial(spec))?;
        perceptual_distance(&reference, &perturbed.image, metric)
    }
}

/// Mean perceptual distance against target value, per axis, sampled on a
/// grid and linearly interpolated between grid points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DistanceCurve {
    pub metric: DistanceMetric,
    pub points: BTreeMap<String, Vec<(f64, f64)>>,
}

fn axis_key(a: &Axis) -> String {
    let sign = if a.direction.sign() > 0.0 { '+' } else { '-' };
    format!("{}/c{}{}", a.tap, a.component, sign)
}

impl DistanceCurve {
    /// Synthesizes each reference in `references` at each grid target of
    /// every axis and averages the distances.
    pub fn calibrate(
        source: &dyn StimulusSource,
        grids: &BTreeMap<TapId, Vec<f64>>,
        references: &[String],
        metric: DistanceMetric,
    ) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Config("distance calibration needs references".into()));
        }
        let mut points = BTreeMap::new();
        for axis in Axis::all() {
            let grid = grids
                .get(&axis.tap)
                .ok_or_else(|| Error::Config(format!("no calibration grid for tap {}", axis.tap)))?;
            let mut curve = Vec::with_capacity(grid.len());
            for &t in grid {
                let mut sum = 0.0;
                for id in references {
                    let reference = source.reference(id)?;
                    let perturbed = source.perturbed(&StimulusKey::new(axis, id.clone(), t))?;
                    sum += perceptual_distance(&reference, &perturbed.image, metric)?;
                }
                curve.push((t, sum / references.len() as f64));
            }
            Self::check_grid(&curve)?;
            points.insert(axis_key(&axis), curve);
        }
        Ok(Self { metric, points })
    }

    fn check_grid(curve: &[(f64, f64)]) -> Result<()> {
        if curve.len() < 2 || curve.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::Config("calibration grid needs at least two increasing targets".into()));
        }
        Ok(())
    }

    fn curve(&self, axis: &Axis) -> Result<&[(f64, f64)]> {
        self.points
            .get(&axis_key(axis))
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Config(format!("no distance curve for {}", axis_key(axis))))
    }

    /// Piecewise-linear, extended linearly past the grid ends and floored at 0.
    pub fn distance(&self, axis: &Axis, t: f64) -> Result<f64> {
        let c = self.curve(axis)?;
        let i = c.partition_point(|p| p.0 <= t).clamp(1, c.len() - 1);
        let ((t0, d0), (t1, d1)) = (c[i - 1], c[i]);
        Ok((d0 + (d1 - d0) * (t - t0) / (t1 - t0)).max(0.0))
    }

    /// Smallest target at which the interpolated distance reaches `d`.
    pub fn target_at(&self, axis: &Axis, d: f64) -> Result<f64> {
        let c = self.curve(axis)?;
        for w in c.windows(2) {
            let ((t0, d0), (t1, d1)) = (w[0], w[1]);
            if (d0..=d1).contains(&d) && d1 > d0 {
                return Ok(t0 + (t1 - t0) * (d - d0) / (d1 - d0));
            }
        }
        Err(Error::Config(format!(
            "distance {d} not reached on the {} curve",
            axis_key(axis)
        )))
    }

    pub fn distance_fn(&self) -> impl FnMut(&TrialSpec) -> Result<f64> + '_ {
        move |spec| self.distance(&spec.condition.axis(), spec.target)
    }
}
