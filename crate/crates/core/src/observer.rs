//! Simulated ABX respondent with a Weibull psychometric function over a
//! perceptual image distance.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptive::{TrialOutcome, TrialSpec};
use crate::analysis::{difference_image, rms_contrast, ssim, to_grayscale, SsimConfig};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Target accuracy of a 2-up-1-down staircase.
pub const TRACKED_ACCURACY: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum DistanceMetric {
    RmsDiff,
    OneMinusSsim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ObserverModel {
    pub metric: DistanceMetric,
    pub alpha: f64,
    pub beta: f64,
    pub lapse: f64,
    pub seed: u64,
    #[serde(default = "default_invalid_rate")]
    pub invalid_rate: f64,
}

fn default_invalid_rate() -> f64 {
    0.05
}

impl Default for ObserverModel {
    fn default() -> Self {
        Self {
            metric: DistanceMetric::RmsDiff,
            alpha: 0.02,
            beta: 4.0,
            lapse: 0.02,
            seed: 0,
            invalid_rate: default_invalid_rate(),
        }
    }
}

impl ObserverModel {
    /// Parameters placing desk staircase thresholds inside their search
    /// range for either metric.
    pub fn desk_default(metric: DistanceMetric) -> Self {
        let alpha = match metric {
            DistanceMetric::RmsDiff => 0.02,
            DistanceMetric::OneMinusSsim => 0.012,
        };
        Self {
            metric,
            alpha,
            beta: 4.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta > 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "observer alpha and beta must be positive, got {} and {}",
                self.alpha, self.beta
            )));
        }
        if !(0.0..=0.1).contains(&self.lapse) {
            return Err(Error::Config(format!("observer lapse {} outside [0, 0.1]", self.lapse)));
        }
        if !(0.0..1.0).contains(&self.invalid_rate) {
            return Err(Error::Config(format!("invalid-gaze rate {} outside [0, 1)", self.invalid_rate)));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }

    /// `0.5 + (0.5 − λ)(1 − exp(−(d/α)^β))`
    pub fn p_correct(&self, distance: f64) -> f64 {
        let d = distance.max(0.0);
        0.5 + (0.5 - self.lapse) * (1.0 - (-(d / self.alpha).powf(self.beta)).exp())
    }

    /// Inverse of [`Self::p_correct`] for `p` in `[0.5, 1 − λ)`.
    pub fn distance_at(&self, p: f64) -> Result<f64> {
        let q = (p - 0.5) / (0.5 - self.lapse);
        if !(0.0..1.0).contains(&q) {
            return Err(Error::Config(format!(
                "accuracy {p} unreachable with lapse {}",
                self.lapse
            )));
        }
        Ok(self.alpha * (-(1.0 - q).ln()).powf(1.0 / self.beta))
    }

    /// Distance at which a 2-up-1-down staircase settles.
    pub fn threshold_distance(&self) -> Result<f64> {
        self.distance_at(TRACKED_ACCURACY)
    }

    /// Random stream for one trial of one session.
    pub fn trial_rng(&self, session_seed: u64, trial_index: usize) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed ^ session_seed.wrapping_mul(0xA076_1D64_78BD_642F));
        r.set_stream(trial_index as u64);
        r
    }

    pub fn respond_at_distance(&self, spec: &TrialSpec, distance: f64, rng: &mut impl Rng) -> TrialOutcome {
        let correct = rng.gen::<f64>() < self.p_correct(distance);
        let gaze_valid = rng.gen::<f64>() >= self.invalid_rate;
        let response = if correct { spec.x_is } else { spec.x_is.other() };
        TrialOutcome {
            response,
            correct,
            gaze_valid,
            client_timings: None,
        }
    }

    pub fn respond(
        &self,
        spec: &TrialSpec,
        reference: &ImageTensor,
        perturbed: &ImageTensor,
        rng: &mut impl Rng,
    ) -> Result<TrialOutcome> {
        let d = perceptual_distance(reference, perturbed, self.metric)?;
        Ok(self.respond_at_distance(spec, d, rng))
    }
}

pub fn perceptual_distance(reference: &ImageTensor, perturbed: &ImageTensor, metric: DistanceMetric) -> Result<f64> {
    match metric {
        DistanceMetric::RmsDiff => rms_contrast(&difference_image(perturbed, reference)?),
        DistanceMetric::OneMinusSsim => {
            if reference.shape() != perturbed.shape() {
                return Err(Error::dim(
                    format!("{:?}", reference.shape()),
                    format!("{:?}", perturbed.shape()),
                ));
            }
            Ok(1.0 - ssim(&to_grayscale(reference), &to_grayscale(perturbed), &SsimConfig::default())?)
        }
    }
}
