#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use mame_core::backbone::{Activation, ConvSpec, InputShape, Pooling, StageSpec};
use mame_core::corpus::desk_corpus;
use mame_core::features::extract_corpus;
use mame_core::ica::{fit_ica, IcaFitConfig, IcaModel};
use mame_core::pipeline::{BackboneSource, CorpusSource, PipelineConfig};
use mame_core::stimuli::SynthesisStimuli;
use mame_core::synthesis::OptimConfig;
use mame_core::{Backbone, BackboneConfig, ImageTensor, TapId};

pub const SIZE: usize = 16;

/// 16×16 RGB; 3×3 conv (4) → 3×3 conv (6) + 2×2 max pool → 3×3 conv (8) +
/// global average.
pub fn tiny_config(seed: u64) -> BackboneConfig {
    let stage = |name: &str, filters, pooling| StageSpec {
        name: name.into(),
        convs: vec![ConvSpec {
            kernel: 3,
            stride: 1,
            filters,
        }],
        activation: Activation::Relu,
        pooling,
    };
    BackboneConfig {
        input: InputShape {
            height: SIZE,
            width: SIZE,
            channels: 3,
        },
        stages: vec![
            stage("a", 4, Pooling::None),
            stage("b", 6, Pooling::Max { size: 2 }),
            stage("c", 8, Pooling::GlobalAverage),
        ],
        taps: [(TapId::Early, 0), (TapId::Mid, 1), (TapId::Late, 2)].into(),
        seed,
    }
}

pub struct Tiny {
    pub backbone: Backbone,
    pub models: BTreeMap<TapId, IcaModel>,
    pub corpus: Vec<(String, ImageTensor)>,
}

pub fn tiny() -> Tiny {
    let backbone = Backbone::new(tiny_config(3)).unwrap();
    let corpus = desk_corpus(80, SIZE, 5);
    let features = extract_corpus(&backbone, &corpus, &TapId::ALL).unwrap();
    let cfg = IcaFitConfig {
        n_components: 6,
        seed: 3,
        ..Default::default()
    };
    let models = features
        .iter()
        .map(|(t, fm)| (*t, fit_ica(fm, &cfg).unwrap()))
        .collect();
    Tiny {
        backbone,
        models,
        corpus,
    }
}

pub fn exact_optim() -> OptimConfig {
    OptimConfig {
        time_budget: None,
        ..Default::default()
    }
}

/// Stimulus source over the first five corpus images.
pub fn tiny_stimuli(optim: OptimConfig) -> SynthesisStimuli {
    let t = tiny();
    let pool = t.corpus.iter().take(5).map(|(id, _)| id.clone()).collect();
    SynthesisStimuli::new(t.backbone, t.models, t.corpus, pool, optim).unwrap()
}
/// Pipeline over the tiny network and an 80-image 16×16 corpus, rooted at
/// `dir`. Writes the backbone description; runs no stage.
pub fn tiny_pipeline_config(dir: &Path) -> PipelineConfig {
    let backbone_path = dir.join("backbone.json");
    std::fs::write(&backbone_path, serde_json::to_vec_pretty(&tiny_config(3)).unwrap()).unwrap();
    PipelineConfig {
        seed: 5,
        out_dir: dir.join("out"),
        backbone: BackboneSource {
            config: Some(backbone_path),
            weights: None,
        },
        corpus: CorpusSource {
            manifest: None,
            desk_count: 80,
            desk_size: SIZE,
        },
        ica: IcaFitConfig {
            n_components: 6,
            ..IcaFitConfig::default()
        },
        optim: exact_optim(),
        ..PipelineConfig::default()
    }
}

pub mod http;
pub mod oracles;
