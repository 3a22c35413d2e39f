//! Pixel-space synthesis of perturbed stimuli.
//!
//! Starting from the reference image, Adam updates the pixels (clamped to
//! `[0, 1]` after every step) so that the ICA components of the current
//! image's Gram vector approach `y_t = y_o ± t·e_p`, where `y_o` are the
//! reference's components. The backbone is never modified.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeatureMap, TapId, TapLoss};
use crate::error::{Error, Result};
use crate::features::{gram, gram_backward};
use crate::ica::IcaModel;
use crate::image::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "+")]
    Positive,
    #[serde(rename = "-")]
    Negative,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Positive, Direction::Negative];

    pub fn sign(self) -> f64 {
        match self {
            Direction::Positive => 1.0,
            Direction::Negative => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSpec {
    pub tap: TapId,
    /// Position in the model's selected-component list.
    pub component: usize,
    pub direction: Direction,
    /// Shift magnitude in component units.
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    #[serde(alias = "adamBeta1")]
    pub beta1: f64,
    #[serde(alias = "adamBeta2")]
    pub beta2: f64,
    #[serde(alias = "adamEpsilon")]
    pub epsilon: f64,
    /// Early exit once the loss is at or below this value.
    pub stop_loss: f64,
    /// Wall-clock limit in seconds; `None` means unlimited.
    pub time_budget: Option<f64>,
    /// Match every component instead of only the selected ones.
    pub match_all_components: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            iterations: 300,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            stop_loss: 1e-6,
            time_budget: Some(3.0),
            match_all_components: false,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.beta1, self.beta2, self.epsilon, self.stop_loss];
        if positive.iter().any(|v| !(*v > 0.0)) || self.iterations == 0 || self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config(format!("invalid optimizer configuration {self:?}")));
        }
        if let Some(b) = self.time_budget {
            if !(b > 0.0) {
                return Err(Error::Config(format!("time budget must be positive, got {b}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub image: ImageTensor,
    /// Components of `image` at the indices the loss covers.
    pub achieved: Vec<f64>,
    pub target: Vec<f64>,
    /// Model component indices `achieved`/`target` refer to.
    pub components: Vec<usize>,
    pub final_loss: f64,
    pub loss_trace: Vec<f64>,
    pub elapsed: f64,
    pub converged: bool,
}

/// `(y_o, y_t)` over all model components.
pub fn make_target(
    backbone: &Backbone,
    model: &IcaModel,
    reference: &ImageTensor,
    spec: &SynthesisSpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = target_component(model, spec)?;
    if !(spec.target >= 0.0) || !spec.target.is_finite() {
        return Err(Error::Config(format!("target value must be finite and nonnegative, got {}", spec.target)));
    }
    let maps = backbone.forward(reference, &[spec.tap])?;
    let y_o = model.transform(&gram(&maps[&spec.tap]).values)?;
    let mut y_t = y_o.clone();
    y_t[p] += spec.direction.sign() * spec.target;
    Ok((y_o, y_t))
}

fn target_component(model: &IcaModel, spec: &SynthesisSpec) -> Result<usize> {
    if model.tap != spec.tap {
        return Err(Error::Config(format!("model is for tap {}, spec asks for {}", model.tap, spec.tap)));
    }
    model
        .selected
        .get(spec.component)
        .copied()
        .ok_or(Error::ComponentOutOfRange {
            index: spec.component,
            count: model.selected.len(),
        })
}

/// MSE between selected components of the current image and their targets.
struct ComponentLoss<'a> {
    model: &'a IcaModel,
    tap: TapId,
    indices: &'a [usize],
    target: &'a [f64],
}

impl ComponentLoss<'_> {
    fn components(&self, map: &FeatureMap) -> Result<Vec<f64>> {
        self.model.transform_components(&gram(map).values, self.indices)
    }
}

impl TapLoss for ComponentLoss<'_> {
    fn taps(&self) -> Vec<TapId> {
        vec![self.tap]
    }

    fn term(&self, _tap: TapId, map: &FeatureMap) -> (f64, Vec<f64>) {
        let Ok(y) = self.components(map) else {
            return (f64::NAN, vec![0.0; map.values.len()]);
        };
        let n = self.indices.len() as f64;
        let mut loss = 0.0;
        let mut grad_gram = vec![0.0; self.model.dim()];
        for ((&i, yc), yt) in self.indices.iter().zip(&y).zip(self.target) {
            let r = yc - yt;
            loss += r * r / n;
            let coeff = 2.0 * r / n;
            for (g, w) in grad_gram.iter_mut().zip(self.model.combined.row(i).iter()) {
                *g += coeff * w;
            }
        }
        (loss, gram_backward(map, &grad_gram))
    }
}

pub fn synthesize(
    backbone: &Backbone,
    model: &IcaModel,
    reference: &ImageTensor,
    spec: &SynthesisSpec,
    optim: &OptimConfig,
) -> Result<SynthesisResult> {
    optim.validate()?;
    let start = Instant::now();
    let (_, y_t) = make_target(backbone, model, reference, spec)?;
    let indices: Vec<usize> = if optim.match_all_components {
        (0..model.n_components()).collect()
    } else {
        model.selected.clone()
    };
    let target: Vec<f64> = indices.iter().map(|&i| y_t[i]).collect();
    let loss = ComponentLoss {
        model,
        tap: spec.tap,
        indices: &indices,
        target: &target,
    };

    let (h, w, c) = reference.shape();
    let mut pixels = reference.data().to_vec();
    let mut m = vec![0.0; pixels.len()];
    let mut v = vec![0.0; pixels.len()];
    let mut best = (f64::INFINITY, pixels.clone());
    let mut trace = Vec::new();
    let mut converged = false;

    for iteration in 0..optim.iterations {
        let image = ImageTensor::new(h, w, c, pixels.clone())?;
        let out = backbone.grad_wrt_input(&image, &loss).map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::Diverged { iteration, what },
            other => other,
        })?;
        if out.gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                iteration,
                what: "non-finite pixel gradient".into(),
            });
        }
        trace.push(out.loss);
        if out.loss < best.0 {
            best = (out.loss, pixels.clone());
        }
        if out.loss <= optim.stop_loss {
            converged = true;
            break;
        }
        if optim.time_budget.is_some_and(|b| start.elapsed().as_secs_f64() > b) {
            break;
        }
        let t = (iteration + 1) as i32;
        let bias1 = 1.0 - optim.beta1.powi(t);
        let bias2 = 1.0 - optim.beta2.powi(t);
        for (((p, g), mi), vi) in pixels.iter_mut().zip(&out.gradient).zip(&mut m).zip(&mut v) {
            *mi = optim.beta1 * *mi + (1.0 - optim.beta1) * g;
            *vi = optim.beta2 * *vi + (1.0 - optim.beta2) * g * g;
            let step = optim.learning_rate * (*mi / bias1) / ((*vi / bias2).sqrt() + optim.epsilon);
            *p = (*p - step).clamp(0.0, 1.0);
        }
    }

    let image = ImageTensor::new(h, w, c, best.1)?;
    let maps = backbone.forward(&image, &[spec.tap])?;
    let achieved = loss.components(&maps[&spec.tap])?;
    Ok(SynthesisResult {
        image,
        achieved,
        target,
        components: indices,
        final_loss: best.0,
        loss_trace: trace,
        elapsed: start.elapsed().as_secs_f64(),
        converged,
    })
}
