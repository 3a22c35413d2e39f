use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{difference_image, rms_contrast, ssim, to_grayscale, SsimConfig};
use crate::backbone::{Backbone, TapId};
use crate::error::{Error, Result};
use crate::ica::IcaModel;
use crate::image::ImageTensor;
use crate::synthesis::{synthesize, Direction, OptimConfig, SynthesisSpec};

/// Component/direction pairs cycled across references, so `n` references
/// cover all six axes of a tap evenly.
pub const PROFILE_AXES: [(usize, Direction); 6] = [
    (0, Direction::Positive),
    (0, Direction::Negative),
    (1, Direction::Positive),
    (1, Direction::Negative),
    (2, Direction::Positive),
    (2, Direction::Negative),
];

const MAX_FAILURE_RATE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProfileThreshold {
    pub tap: TapId,
    pub eccentricity_deg: u32,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProfileRow {
    pub tap: TapId,
    pub eccentricity_deg: u32,
    pub target: f64,
    pub mean_rms: f64,
    pub std_rms: f64,
    pub mean_ssim: f64,
    pub std_ssim: f64,
    pub n: usize,
    pub failures: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Synthesizes every reference at each threshold and summarizes the RMS
/// contrast of the grayscale difference image and the SSIM against the
/// reference.
pub fn boundary_profile(
    backbone: &Backbone,
    models: &BTreeMap<TapId, IcaModel>,
    references: &[(String, ImageTensor)],
    thresholds: &[ProfileThreshold],
    optim: &OptimConfig,
    ssim_cfg: &SsimConfig,
) -> Result<Vec<ProfileRow>> {
    if references.is_empty() {
        return Err(Error::Config("boundary profile needs at least one reference".into()));
    }
    let mut rows = Vec::with_capacity(thresholds.len());
    for th in thresholds {
        let model = models
            .get(&th.tap)
            .ok_or_else(|| Error::Config(format!("no ICA model for tap {}", th.tap)))?;
        let mut rms = Vec::new();
        let mut sim = Vec::new();
        let mut errors = Vec::new();
        for (i, (id, reference)) in references.iter().enumerate() {
            let (component, direction) = PROFILE_AXES[i % PROFILE_AXES.len()];
            let spec = SynthesisSpec {
                tap: th.tap,
                component,
                direction,
                target: th.target,
            };
            match synthesize(backbone, model, reference, &spec, optim) {
                Ok(out) => {
                    rms.push(rms_contrast(&difference_image(&out.image, reference)?)?);
                    sim.push(ssim(&to_grayscale(reference), &to_grayscale(&out.image), ssim_cfg)?);
                }
                Err(e) => errors.push(format!("{id}: {e}")),
            }
        }
        let rate = errors.len() as f64 / references.len() as f64;
        if rate > MAX_FAILURE_RATE {
            return Err(Error::SynthesisFailureRate {
                rate,
                context: format!(
                    "tap {} at {}deg, t = {}: {}",
                    th.tap,
                    th.eccentricity_deg,
                    th.target,
                    errors.join("; ")
                ),
            });
        }
        let (mean_rms, std_rms) = mean_std(&rms);
        let (mean_ssim, std_ssim) = mean_std(&sim);
        rows.push(ProfileRow {
            tap: th.tap,
            eccentricity_deg: th.eccentricity_deg,
            target: th.target,
            mean_rms,
            std_rms,
            mean_ssim,
            std_ssim,
            n: rms.len(),
            failures: errors.len(),
        });
    }
    Ok(rows)
}
