//! A small deterministic convolutional feature extractor.
//!
//! The network is a chain of stages. Each stage runs one or more valid
//! (unpadded) convolutions, each followed by the stage activation, and then an
//! optional pooling step. Three stages are tapped (`early`, `mid`, `late`); a
//! tap exposes the stage output after pooling as a [`FeatureMap`].
//!
//! Only gradients with respect to the input image are computed. Weights are
//! fixed after construction.

mod layers;
mod weights;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

use layers::{ConvLayer, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TapId {
    Early,
    Mid,
    Late,
}

impl TapId {
    pub const ALL: [TapId; 3] = [TapId::Early, TapId::Mid, TapId::Late];

    pub fn as_str(self) -> &'static str {
        match self {
            TapId::Early => "early",
            TapId::Mid => "mid",
            TapId::Late => "late",
        }
    }
}

impl fmt::Display for TapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TapId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(TapId::Early),
            "mid" => Ok(TapId::Mid),
            "late" => Ok(TapId::Late),
            other => Err(Error::Config(format!("unknown tap `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub filters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Pooling {
    None,
    /// Non-overlapping `size × size` max pooling; trailing rows/columns that
    /// do not fill a window are dropped.
    Max { size: usize },
    GlobalAverage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub convs: Vec<ConvSpec>,
    pub activation: Activation,
    pub pooling: Pooling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input: InputShape,
    pub stages: Vec<StageSpec>,
    /// Stage index whose output each tap exposes.
    pub taps: BTreeMap<TapId, usize>,
    pub seed: u64,
}

/// Spatial/channel extent of a stage output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapShape {
    pub height: usize,
    pub width: usize,
    pub filters: usize,
}

impl BackboneConfig {
    /// 64×64 RGB input; 7×7/2 conv (16) → two 3×3 convs (32) + 2×2 max pool →
    /// 3×3 conv (64) + global average pool.
    pub fn desk_default(seed: u64) -> Self {
        let relu = Activation::Relu;
        Self {
            input: InputShape {
                height: 64,
                width: 64,
                channels: 3,
            },
            stages: vec![
                StageSpec {
                    name: "stage1".into(),
                    convs: vec![ConvSpec {
                        kernel: 7,
                        stride: 2,
                        filters: 16,
                    }],
                    activation: relu,
                    pooling: Pooling::None,
                },
                StageSpec {
                    name: "stage2".into(),
                    convs: vec![
                        ConvSpec {
                            kernel: 3,
                            stride: 1,
                            filters: 32,
                        };
                        2
                    ],
                    activation: relu,
                    pooling: Pooling::Max { size: 2 },
                },
                StageSpec {
                    name: "stage3".into(),
                    convs: vec![ConvSpec {
                        kernel: 3,
                        stride: 1,
                        filters: 64,
                    }],
                    activation: relu,
                    pooling: Pooling::GlobalAverage,
                },
            ],
            taps: [(TapId::Early, 0), (TapId::Mid, 1), (TapId::Late, 2)].into(),
            seed,
        }
    }

    /// Output shape of every stage, validating the geometry on the way.
    pub fn stage_shapes(&self) -> Result<Vec<TapShape>> {
        let InputShape {
            mut height,
            mut width,
            channels,
        } = self.input;
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Config(format!(
                "input shape {height}x{width}x{channels} is not a positive 1- or 3-channel size"
            )));
        }
        let mut filters = channels;
        let mut shapes = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let bad = |reason: String| Error::StageGeometry {
                stage: stage.name.clone(),
                reason,
            };
            if stage.convs.is_empty() {
                return Err(bad("stage has no convolutions".into()));
            }
            for conv in &stage.convs {
                if conv.kernel == 0 || conv.stride == 0 || conv.filters == 0 {
                    return Err(bad(format!("non-positive conv parameter {conv:?}")));
                }
                if conv.kernel > height || conv.kernel > width || conv.stride > height || conv.stride > width {
                    return Err(bad(format!(
                        "kernel {} / stride {} does not fit a {height}x{width} input",
                        conv.kernel, conv.stride
                    )));
                }
                height = (height - conv.kernel) / conv.stride + 1;
                width = (width - conv.kernel) / conv.stride + 1;
                filters = conv.filters;
            }
            match stage.pooling {
                Pooling::None => {}
                Pooling::Max { size } => {
                    if size == 0 || size > height || size > width {
                        return Err(bad(format!("pool size {size} does not fit a {height}x{width} map")));
                    }
                    height /= size;
                    width /= size;
                }
                Pooling::GlobalAverage => {
                    height = 1;
                    width = 1;
                }
            }
            shapes.push(TapShape {
                height,
                width,
                filters,
            });
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<Vec<TapShape>> {
        let shapes = self.stage_shapes()?;
        if self.taps.len() != 3 || TapId::ALL.iter().any(|t| !self.taps.contains_key(t)) {
            return Err(Error::Config("exactly the taps early, mid and late must be defined".into()));
        }
        for (tap, &stage) in &self.taps {
            if stage >= self.stages.len() {
                return Err(Error::Config(format!(
                    "tap {tap} refers to stage {stage}, but only {} stages exist",
                    self.stages.len()
                )));
            }
        }
        Ok(shapes)
    }
}

/// Activations of one tapped stage: `filters × positions`, filter-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub tap: TapId,
    pub filters: usize,
    pub positions: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn filter(&self, j: usize) -> &[f64] {
        &self.values[j * self.positions..(j + 1) * self.positions]
    }
}

/// A scalar loss that is a sum of per-tap terms.
pub trait TapLoss {
    fn taps(&self) -> Vec<TapId>;

    /// Value of this tap's term and its gradient with respect to `map.values`.
    fn term(&self, tap: TapId, map: &FeatureMap) -> (f64, Vec<f64>);
}

/// Adapts a closure into a [`TapLoss`].
pub struct FnLoss<F> {
    taps: Vec<TapId>,
    f: F,
}

impl<F> FnLoss<F>
where
    F: Fn(TapId, &FeatureMap) -> (f64, Vec<f64>),
{
    pub fn new(taps: Vec<TapId>, f: F) -> Self {
        Self { taps, f }
    }
}

impl<F> TapLoss for FnLoss<F>
where
    F: Fn(TapId, &FeatureMap) -> (f64, Vec<f64>),
{
    fn taps(&self) -> Vec<TapId> {
        self.taps.clone()
    }

    fn term(&self, tap: TapId, map: &FeatureMap) -> (f64, Vec<f64>) {
        (self.f)(tap, map)
    }
}

/// Loss value together with its gradient in image layout (`h × w × c`).
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradient {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Stage {
    convs: Vec<ConvLayer>,
    activation: Activation,
    pooling: Pooling,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    shapes: Vec<TapShape>,
    stages: Vec<Stage>,
}

impl Backbone {
    /// Builds the network with weights drawn from `U(-b, b)`, `b = sqrt(6 / fan_in)`,
    /// rounded to `f32`, and zero biases.
    pub fn new(config: BackboneConfig) -> Result<Self> {
        let shapes = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut in_c = config.input.channels;
        let mut stages = Vec::with_capacity(config.stages.len());
        for spec in &config.stages {
            let mut convs = Vec::with_capacity(spec.convs.len());
            for conv in &spec.convs {
                let fan_in = (in_c * conv.kernel * conv.kernel) as f64;
                let bound = (6.0 / fan_in).sqrt();
                let n = conv.filters * in_c * conv.kernel * conv.kernel;
                let weights = (0..n)
                    .map(|_| rng.gen_range(-bound..bound) as f32 as f64)
                    .collect();
                convs.push(ConvLayer {
                    in_channels: in_c,
                    out_channels: conv.filters,
                    kernel: conv.kernel,
                    stride: conv.stride,
                    weights,
                    bias: vec![0.0; conv.filters],
                });
                in_c = conv.filters;
            }
            stages.push(Stage {
                convs,
                activation: spec.activation,
                pooling: spec.pooling,
            });
        }
        Ok(Self {
            config,
            shapes,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn tap_shape(&self, tap: TapId) -> TapShape {
        self.shapes[self.config.taps[&tap]]
    }

    pub fn tap_filters(&self, tap: TapId) -> usize {
        self.tap_shape(tap).filters
    }

    fn check_input(&self, image: &ImageTensor) -> Result<()> {
        let InputShape {
            height,
            width,
            channels,
        } = self.config.input;
        if image.shape() != (height, width, channels) {
            return Err(Error::dim(
                format!("{height}x{width}x{channels}"),
                format!("{}x{}x{}", image.height(), image.width(), image.channels()),
            ));
        }
        Ok(())
    }

    fn deepest_stage(&self, taps: &[TapId]) -> Option<usize> {
        taps.iter().map(|t| self.config.taps[t]).max()
    }

    pub fn forward(&self, image: &ImageTensor, taps: &[TapId]) -> Result<BTreeMap<TapId, FeatureMap>> {
        self.check_input(image)?;
        let Some(last) = self.deepest_stage(taps) else {
            return Ok(BTreeMap::new());
        };
        let trace = self.run(image, last, false);
        Ok(taps
            .iter()
            .map(|&tap| (tap, trace.stage_outputs[self.config.taps[&tap]].to_feature_map(tap)))
            .collect())
    }

    /// Gradient of `loss` with respect to every input pixel.
    pub fn grad_wrt_input(&self, image: &ImageTensor, loss: &dyn TapLoss) -> Result<InputGradient> {
        self.check_input(image)?;
        let taps = loss.taps();
        let Some(last) = self.deepest_stage(&taps) else {
            return Ok(InputGradient {
                loss: 0.0,
                gradient: vec![0.0; image.data().len()],
            });
        };
        let trace = self.run(image, last, true);

        let mut total = 0.0;
        let mut stage_grads: Vec<Option<Vec<f64>>> = vec![None; last + 1];
        for &tap in &taps {
            let stage = self.config.taps[&tap];
            let map = trace.stage_outputs[stage].to_feature_map(tap);
            let (value, grad) = loss.term(tap, &map);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    tap,
                    what: format!("loss term is {value}"),
                });
            }
            if grad.len() != map.values.len() {
                return Err(Error::dim(map.values.len(), grad.len()));
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    tap,
                    what: "loss gradient".into(),
                });
            }
            total += value;
            match &mut stage_grads[stage] {
                Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                slot @ None => *slot = Some(grad),
            }
        }

        let mut grad: Option<Vec<f64>> = None;
        for stage_idx in (0..=last).rev() {
            if let Some(extra) = stage_grads[stage_idx].take() {
                match &mut grad {
                    Some(g) => g.iter_mut().zip(&extra).for_each(|(a, b)| *a += b),
                    None => grad = Some(extra),
                }
            }
            let Some(g) = grad.take() else { continue };
            grad = Some(self.backward_stage(stage_idx, &trace, g));
        }
        let chw = grad.unwrap_or_else(|| vec![0.0; image.data().len()]);
        Ok(InputGradient {
            loss: total,
            gradient: chw_to_hwc(&chw, self.config.input),
        })
    }

    fn run(&self, image: &ImageTensor, last: usize, keep: bool) -> Trace {
        let mut x = Tensor3::from_image(image);
        let mut trace = Trace::default();
        for stage in &self.stages[..=last] {
            let mut cache = StageCache::default();
            for conv in &stage.convs {
                let y = conv.forward(&x);
                let y = match stage.activation {
                    Activation::Relu => layers::relu(y),
                    Activation::Identity => y,
                };
                if keep {
                    cache.conv_inputs.push(std::mem::replace(&mut x, y));
                    cache.conv_outputs.push(x.clone());
                } else {
                    x = y;
                }
            }
            match stage.pooling {
                Pooling::None => {}
                Pooling::Max { size } => {
                    let (y, argmax) = layers::max_pool(&x, size);
                    if keep {
                        cache.pool_input_shape = Some((x.c, x.h, x.w));
                        cache.argmax = argmax;
                    }
                    x = y;
                }
                Pooling::GlobalAverage => {
                    if keep {
                        cache.pool_input_shape = Some((x.c, x.h, x.w));
                    }
                    x = layers::global_average(&x);
                }
            }
            trace.stage_outputs.push(x.clone());
            trace.caches.push(cache);
        }
        trace
    }

    fn backward_stage(&self, idx: usize, trace: &Trace, grad_out: Vec<f64>) -> Vec<f64> {
        let stage = &self.stages[idx];
        let cache = &trace.caches[idx];
        let mut g = match (stage.pooling, cache.pool_input_shape) {
            (Pooling::None, _) | (_, None) => grad_out,
            (Pooling::Max { .. }, Some((c, h, w))) => layers::max_pool_backward(&grad_out, &cache.argmax, c * h * w),
            (Pooling::GlobalAverage, Some((c, h, w))) => layers::global_average_backward(&grad_out, c, h * w),
        };
        for (i, conv) in stage.convs.iter().enumerate().rev() {
            if stage.activation == Activation::Relu {
                layers::relu_backward(&mut g, &cache.conv_outputs[i].data);
            }
            g = conv.backward_input(&cache.conv_inputs[i], &g);
        }
        g
    }

    #[cfg(test)]
    pub(crate) fn conv_layers(&self) -> impl Iterator<Item = (&str, &ConvLayer)> {
        self.config
            .stages
            .iter()
            .zip(&self.stages)
            .flat_map(|(spec, stage)| stage.convs.iter().map(move |c| (spec.name.as_str(), c)))
    }

    #[cfg(test)]
    pub(crate) fn conv_layers_mut(&mut self) -> impl Iterator<Item = (&str, &mut ConvLayer)> {
        self.config
            .stages
            .iter()
            .zip(&mut self.stages)
            .flat_map(|(spec, stage)| stage.convs.iter_mut().map(move |c| (spec.name.as_str(), c)))
    }
}

#[derive(Default)]
struct StageCache {
    conv_inputs: Vec<Tensor3>,
    conv_outputs: Vec<Tensor3>,
    pool_input_shape: Option<(usize, usize, usize)>,
    argmax: Vec<usize>,
}

#[derive(Default)]
struct Trace {
    stage_outputs: Vec<Tensor3>,
    caches: Vec<StageCache>,
}

fn chw_to_hwc(chw: &[f64], shape: InputShape) -> Vec<f64> {
    let InputShape {
        height: h,
        width: w,
        channels: c,
    } = shape;
    let mut out = vec![0.0; h * w * c];
    for ch in 0..c {
        for p in 0..h * w {
            out[p * c + ch] = chw[ch * h * w + p];
        }
    }
    out
}
