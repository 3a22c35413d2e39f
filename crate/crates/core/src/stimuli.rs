//! Stimulus provisioning for sessions: reference lookup and cached,
//! 8-bit quantized perturbed images.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::adaptive::{Axis, TrialSpec};
use crate::backbone::{Backbone, TapId};
use crate::error::{Error, Result};
use crate::ica::IcaModel;
use crate::image::ImageTensor;
use crate::synthesis::{synthesize, OptimConfig, SynthesisSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SynthesisSummary {
    pub achieved: Vec<f64>,
    pub target: Vec<f64>,
    pub components: Vec<usize>,
    pub final_loss: f64,
    pub iterations: usize,
    pub elapsed: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stimulus {
    /// Quantized so that serving it as PNG is lossless.
    pub image: ImageTensor,
    pub summary: SynthesisSummary,
}

/// Identifies a perturbed image independently of eccentricity, which does
/// not affect synthesis.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StimulusKey {
    pub axis: Axis,
    pub reference_id: String,
    target_bits: u64,
}

impl StimulusKey {
    pub fn new(axis: Axis, reference_id: impl Into<String>, target: f64) -> Self {
        Self {
            axis,
            reference_id: reference_id.into(),
            target_bits: target.to_bits(),
        }
    }

    pub fn for_trial(spec: &TrialSpec) -> Self {
        Self::new(spec.condition.axis(), spec.reference_id.clone(), spec.target)
    }

    pub fn target(&self) -> f64 {
        f64::from_bits(self.target_bits)
    }
}

pub trait StimulusSource: Send + Sync {
    fn reference_pool(&self) -> Vec<String>;
    fn reference(&self, id: &str) -> Result<Arc<ImageTensor>>;
    fn perturbed(&self, key: &StimulusKey) -> Result<Arc<Stimulus>>;
}

struct Cache {
    map: HashMap<StimulusKey, Arc<Stimulus>>,
    order: VecDeque<StimulusKey>,
    capacity: usize,
}

impl Cache {
    fn insert(&mut self, key: StimulusKey, value: Arc<Stimulus>) {
        if self.map.insert(key.clone(), value).is_none() {
            self.order.push_back(key);
        }
        while self.order.len() > self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.map.remove(&old);
            }
        }
    }
}

/// Online synthesis against fitted models, with a bounded FIFO cache.
pub struct SynthesisStimuli {
    backbone: Backbone,
    models: BTreeMap<TapId, IcaModel>,
    references: BTreeMap<String, Arc<ImageTensor>>,
    pool: Vec<String>,
    optim: OptimConfig,
    cache: Mutex<Cache>,
}

impl SynthesisStimuli {
    /// `pool` lists the ids trials may draw; every one must be in `references`.
    pub fn new(
        backbone: Backbone,
        models: BTreeMap<TapId, IcaModel>,
        references: Vec<(String, ImageTensor)>,
        pool: Vec<String>,
        optim: OptimConfig,
    ) -> Result<Self> {
        optim.validate()?;
        for tap in TapId::ALL {
            let m = models
                .get(&tap)
                .ok_or_else(|| Error::Config(format!("no ICA model for tap {tap}")))?;
            if m.tap != tap {
                return Err(Error::Config(format!("model for {} registered under {tap}", m.tap)));
            }
            if m.selected.len() < 3 {
                return Err(Error::Config(format!("model for {tap} selects fewer than 3 components")));
            }
        }
        let references: BTreeMap<String, Arc<ImageTensor>> = references
            .into_iter()
            .map(|(id, img)| (id, Arc::new(img.quantized())))
            .collect();
        if pool.is_empty() {
            return Err(Error::Config("empty reference pool".into()));
        }
        if let Some(missing) = pool.iter().find(|id| !references.contains_key(*id)) {
            return Err(Error::Config(format!("reference {missing} has no image")));
        }
        Ok(Self {
            backbone,
            models,
            references,
            pool,
            optim,
            cache: Mutex::new(Cache {
                map: HashMap::new(),
                order: VecDeque::new(),
                capacity: 512,
            }),
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn models(&self) -> &BTreeMap<TapId, IcaModel> {
        &self.models
    }

    pub fn optim(&self) -> &OptimConfig {
        &self.optim
    }

    pub fn is_cached(&self, key: &StimulusKey) -> bool {
        self.cache.lock().unwrap().map.contains_key(key)
    }
}

impl StimulusSource for SynthesisStimuli {
    fn reference_pool(&self) -> Vec<String> {
        self.pool.clone()
    }

    fn reference(&self, id: &str) -> Result<Arc<ImageTensor>> {
        self.references
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Config(format!("unknown reference image {id}")))
    }

    fn perturbed(&self, key: &StimulusKey) -> Result<Arc<Stimulus>> {
        if let Some(hit) = self.cache.lock().unwrap().map.get(key) {
            return Ok(hit.clone());
        }
        let reference = self.reference(&key.reference_id)?;
        let spec = SynthesisSpec {
            tap: key.axis.tap,
            component: key.axis.component,
            direction: key.axis.direction,
            target: key.target(),
        };
        let out = synthesize(&self.backbone, &self.models[&key.axis.tap], &reference, &spec, &self.optim)?;
        let stimulus = Arc::new(Stimulus {
            image: out.image.quantized(),
            summary: SynthesisSummary {
                achieved: out.achieved,
                target: out.target,
                components: out.components,
                final_loss: out.final_loss,
                iterations: out.loss_trace.len(),
                elapsed: out.elapsed,
                converged: out.converged,
            },
        });
        self.cache.lock().unwrap().insert(key.clone(), stimulus.clone());
        Ok(stimulus)
    }
}
