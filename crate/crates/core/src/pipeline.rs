//! Artifact-producing stages shared by the CLI and the acceptance suite,
//! with run manifests that record inputs, outputs and their hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptive::{PlanLayout, StaircaseConfig};
use crate::analysis::{aggregate_thresholds, records_to_csv, AggregateTable, ThresholdRecord};
use crate::backbone::{Backbone, BackboneConfig, TapId};
use crate::corpus::{desk_corpus, load_manifest_images, read_manifest, write_corpus};
use crate::error::{Error, Result};
use crate::features::{extract_corpus, sidecar_path, FeatureMatrix};
use crate::ica::{fit_ica, metadata_path, select_reference_images, IcaFitConfig, IcaModel, ReferenceSelection};
use crate::image::ImageTensor;
use crate::observer::{DistanceMetric, ObserverModel};
use crate::service::Experiment;
use crate::simulate::{image_distance, run_session, simulation_header, DistanceCurve};
use crate::stimuli::{StimulusSource, SynthesisStimuli};
use crate::synthesis::OptimConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct BackboneSource {
    /// JSON [`BackboneConfig`]; the seeded desk network when absent.
    pub config: Option<PathBuf>,
    /// MAMEW1 weights; seeded initialization when absent.
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct CorpusSource {
    /// JSON list of `{id, path}`; the generated desk corpus when absent.
    pub manifest: Option<PathBuf>,
    pub desk_count: usize,
    pub desk_size: usize,
}

impl Default for CorpusSource {
    fn default() -> Self {
        Self {
            manifest: None,
            desk_count: 200,
            desk_size: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum StimulusMode {
    /// Distances interpolated from a calibration grid of real syntheses.
    Curve,
    /// Every trial synthesized.
    Synthesize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SimulationConfig {
    pub stimuli: StimulusMode,
    pub calibration_grid: Vec<f64>,
    pub calibration_references: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            stimuli: StimulusMode::Curve,
            calibration_grid: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            calibration_references: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub backbone: BackboneSource,
    pub corpus: CorpusSource,
    pub ica: IcaFitConfig,
    pub taps: Vec<TapId>,
    pub reference_percentile: f64,
    pub staircase: StaircaseConfig,
    pub layout: PlanLayout,
    pub optim: OptimConfig,
    pub observer: ObserverModel,
    pub simulation: SimulationConfig,
    pub profile_references: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("mame-out"),
            backbone: BackboneSource::default(),
            corpus: CorpusSource::default(),
            ica: IcaFitConfig::default(),
            taps: TapId::ALL.to_vec(),
            reference_percentile: 20.0,
            staircase: StaircaseConfig::desk_default(),
            layout: PlanLayout::default(),
            optim: OptimConfig::default(),
            observer: ObserverModel::desk_default(DistanceMetric::RmsDiff),
            simulation: SimulationConfig::default(),
            profile_references: 30,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut taps = self.taps.clone();
        taps.sort();
        if taps != TapId::ALL {
            return Err(Error::Config(format!("taps must be early, mid and late; got {:?}", self.taps)));
        }
        if self.ica.select < 3 {
            return Err(Error::Config("at least 3 components must be selected per tap".into()));
        }
        for path in [&self.backbone.config, &self.backbone.weights, &self.corpus.manifest]
            .into_iter()
            .flatten()
        {
            if !path.exists() {
                return Err(Error::Config(format!("{} does not exist", path.display())));
            }
        }
        self.optim.validate()?;
        self.observer.validate()?;
        self.layout.validate()?;
        Ok(())
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn artifacts(&self) -> Artifacts {
        Artifacts::new(&self.out_dir)
    }

    fn ica_config(&self) -> IcaFitConfig {
        IcaFitConfig {
            seed: self.seed,
            ..self.ica.clone()
        }
    }
}

/// Fixed file layout under the output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub root: PathBuf,
}

impl Artifacts {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn corpus_manifest(&self) -> PathBuf {
        self.root.join("corpus").join("manifest.json")
    }

    pub fn backbone_config(&self) -> PathBuf {
        self.root.join("backbone.json")
    }

    pub fn backbone_weights(&self) -> PathBuf {
        self.root.join("backbone.mamew")
    }

    pub fn features(&self, tap: TapId) -> PathBuf {
        self.root.join("features").join(format!("{tap}.fm"))
    }

    pub fn ica(&self, tap: TapId) -> PathBuf {
        self.root.join("ica").join(format!("{tap}.ica"))
    }

    pub fn references(&self) -> PathBuf {
        self.root.join("references.json")
    }

    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }

    pub fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.clone(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl Artifacts {
    pub fn manifest_path(&self, command: &str) -> PathBuf {
        self.manifests().join(format!("{command}.json"))
    }

    pub fn read_manifests(&self) -> Result<Vec<RunManifest>> {
        let dir = self.manifests();
        let Ok(entries) = std::fs::read_dir(&dir) else {
            return Ok(Vec::new());
        };
        let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        paths.sort();
        paths
            .iter()
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .map(|p| {
                let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                Ok(serde_json::from_slice(&bytes)?)
            })
            .collect()
    }

    /// Fails when a recorded producer output no longer matches the file on
    /// disk.
    pub fn verify_inputs(&self, inputs: &[PathBuf]) -> Result<()> {
        let manifests = self.read_manifests()?;
        for input in inputs {
            if !input.exists() {
                return Err(Error::Config(format!(
                    "missing artifact {}; run the producing stage first",
                    input.display()
                )));
            }
            for m in &manifests {
                if let Some(d) = m.outputs.iter().find(|d| d.path == *input) {
                    let found = sha256_file(input)?;
                    if found != d.sha256 {
                        return Err(Error::Provenance(format!(
                            "{} was produced by `{}` with sha256 {}, found {found}",
                            input.display(),
                            m.command,
                            d.sha256
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn record(
        &self,
        command: &str,
        cfg: &PipelineConfig,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            inputs: digests(inputs)?,
            outputs: digests(outputs)?,
        };
        write_file(&self.manifest_path(command), &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    /// Manifests reachable backwards from `file`, nearest producer first.
    pub fn provenance(&self, file: &Path) -> Result<Vec<RunManifest>> {
        let manifests = self.read_manifests()?;
        let mut chain = Vec::new();
        let mut frontier = vec![file.to_path_buf()];
        let mut seen = std::collections::BTreeSet::new();
        while let Some(path) = frontier.pop() {
            for m in &manifests {
                if m.outputs.iter().any(|d| d.path == path) && seen.insert(m.command.clone()) {
                    frontier.extend(m.inputs.iter().map(|d| d.path.clone()));
                    chain.push(m.clone());
                }
            }
        }
        Ok(chain)
    }
}

/// Stage 1: corpus, backbone and Gram features for every tap.
pub fn run_extract(cfg: &PipelineConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let art = cfg.artifacts();
    let mut inputs = Vec::new();
    let images = match &cfg.corpus.manifest {
        Some(path) => {
            inputs.push(path.clone());
            let entries = read_manifest(path)?;
            inputs.extend(entries.iter().map(|e| e.path.clone()));
            let images = load_manifest_images(&entries)?;
            write_corpus(&art.dir("corpus"), &images)?;
            images
        }
        None => {
            let images = desk_corpus(cfg.corpus.desk_count, cfg.corpus.desk_size, cfg.seed);
            write_corpus(&art.dir("corpus"), &images)?;
            images
        }
    };
    let backbone_cfg = match &cfg.backbone.config {
        Some(path) => {
            inputs.push(path.clone());
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => BackboneConfig::desk_default(cfg.seed),
    };
    let mut backbone = Backbone::new(backbone_cfg)?;
    if let Some(w) = &cfg.backbone.weights {
        inputs.push(w.clone());
        backbone = backbone.load_weights(w)?;
    }
    write_file(&art.backbone_config(), &serde_json::to_vec_pretty(backbone.config())?)?;
    backbone.export_weights(&art.backbone_weights())?;

    let features = extract_corpus(&backbone, &images, &cfg.taps)?;
    let mut outputs = vec![art.corpus_manifest(), art.backbone_config(), art.backbone_weights()];
    for (tap, fm) in &features {
        let path = art.features(*tap);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fm.save(&path)?;
        outputs.push(path.clone());
        outputs.push(sidecar_path(&path));
    }
    art.record("corpus-extract", cfg, &inputs, &outputs)
}

pub fn load_backbone(art: &Artifacts) -> Result<Backbone> {
    let path = art.backbone_config();
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Backbone::new(serde_json::from_str(&text)?)?.load_weights(&art.backbone_weights())
}

pub fn load_features(art: &Artifacts) -> Result<BTreeMap<TapId, FeatureMatrix>> {
    TapId::ALL
        .into_iter()
        .map(|t| Ok((t, FeatureMatrix::load(&art.features(t))?)))
        .collect()
}

pub fn load_models(art: &Artifacts) -> Result<BTreeMap<TapId, IcaModel>> {
    TapId::ALL
        .into_iter()
        .map(|t| Ok((t, IcaModel::load(&art.ica(t))?)))
        .collect()
}

/// Stage 2: one ICA model per tap.
pub fn run_fit(cfg: &PipelineConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let art = cfg.artifacts();
    let inputs: Vec<PathBuf> = TapId::ALL.iter().map(|&t| art.features(t)).collect();
    art.verify_inputs(&inputs)?;
    let features = load_features(&art)?;
    let mut outputs = Vec::new();
    for (tap, fm) in &features {
        // The requested count is a ceiling: small corpora fit min(count, rank).
        let model = match fit_ica(fm, &cfg.ica_config()) {
            Err(Error::InsufficientRank { rank, requested }) if rank > 0 => {
                tracing::warn!(%tap, rank, requested, "fitting fewer components than requested");
                fit_ica(
                    fm,
                    &IcaFitConfig {
                        n_components: rank,
                        ..cfg.ica_config()
                    },
                )?
            }
            other => other?,
        };
        if !model.converged {
            tracing::warn!(%tap, iterations = model.iterations, "FastICA hit the iteration cap");
        }
        let path = art.ica(*tap);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        model.save(&path)?;
        outputs.push(path.clone());
        outputs.push(metadata_path(&path));
    }
    art.record("ica-fit", cfg, &inputs, &outputs)
}

/// Stage 3: the reference pool.
pub fn run_select(cfg: &PipelineConfig) -> Result<(RunManifest, ReferenceSelection)> {
    cfg.validate()?;
    let art = cfg.artifacts();
    let inputs: Vec<PathBuf> = TapId::ALL
        .iter()
        .flat_map(|&t| [art.features(t), art.ica(t)])
        .collect();
    art.verify_inputs(&inputs)?;
    let selection = select_reference_images(&load_models(&art)?, &load_features(&art)?, cfg.reference_percentile)?;
    write_file(&art.references(), &serde_json::to_vec_pretty(&selection)?)?;
    let m = art.record("select-refs", cfg, &inputs, &[art.references()])?;
    Ok((m, selection))
}

pub fn load_references(art: &Artifacts) -> Result<ReferenceSelection> {
    let path = art.references();
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load_corpus(art: &Artifacts) -> Result<Vec<(String, ImageTensor)>> {
    load_manifest_images(&read_manifest(&art.corpus_manifest())?)
}

fn stimulus_inputs(art: &Artifacts) -> Vec<PathBuf> {
    let mut v = vec![art.backbone_config(), art.backbone_weights(), art.corpus_manifest(), art.references()];
    v.extend(TapId::ALL.iter().map(|&t| art.ica(t)));
    v
}

/// Backbone, models and reference pool wired into a stimulus source.
pub fn load_stimuli(cfg: &PipelineConfig, optim: OptimConfig) -> Result<SynthesisStimuli> {
    let art = cfg.artifacts();
    art.verify_inputs(&stimulus_inputs(&art))?;
    let pool = load_references(&art)?.image_ids;
    let corpus = load_corpus(&art)?;
    SynthesisStimuli::new(load_backbone(&art)?, load_models(&art)?, corpus, pool, optim)
}

pub fn load_experiment(cfg: &PipelineConfig) -> Result<Experiment> {
    cfg.validate()?;
    Ok(Experiment {
        source: std::sync::Arc::new(load_stimuli(cfg, cfg.optim.clone())?),
        staircase: cfg.staircase.clone(),
        layout: cfg.layout,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput {
    pub records: Vec<ThresholdRecord>,
    pub table: AggregateTable,
    /// Conditions without enough reversals, per subject.
    pub missing: BTreeMap<String, usize>,
    pub manifest: RunManifest,
}

pub fn subject_id(k: usize) -> String {
    format!("sim{:02}", k + 1)
}

/// Runs `sessions` simulated subjects. Subject `k` uses session seed
/// `seed·1000 + k` and observer seed `observer.seed + k`.
pub fn run_simulation(cfg: &PipelineConfig, sessions: usize) -> Result<SimulationOutput> {
    cfg.validate()?;
    if sessions == 0 {
        return Err(Error::Config("at least one session is required".into()));
    }
    let art = cfg.artifacts();
    let deterministic = OptimConfig {
        time_budget: None,
        ..cfg.optim.clone()
    };
    let source = load_stimuli(cfg, deterministic)?;
    let pool = source.reference_pool();
    let out_dir = art.dir("simulate");
    let mut outputs = Vec::new();

    let curve = match cfg.simulation.stimuli {
        StimulusMode::Curve => {
            let n = cfg.simulation.calibration_references.clamp(1, pool.len());
            let grids = TapId::ALL
                .iter()
                .map(|&t| (t, cfg.simulation.calibration_grid.clone()))
                .collect();
            let curve = DistanceCurve::calibrate(&source, &grids, &pool[..n], cfg.observer.metric)?;
            let path = out_dir.join("curve.json");
            write_file(&path, &serde_json::to_vec_pretty(&curve)?)?;
            outputs.push(path);
            Some(curve)
        }
        StimulusMode::Synthesize => None,
    };

    let mut records = Vec::new();
    let mut missing = BTreeMap::new();
    for k in 0..sessions {
        let subject = subject_id(k);
        let header = simulation_header(
            &subject,
            cfg.seed.wrapping_mul(1000).wrapping_add(k as u64),
            cfg.layout,
            cfg.staircase.clone(),
            pool.clone(),
        );
        let observer = ObserverModel {
            seed: cfg.observer.seed.wrapping_add(k as u64),
            ..cfg.observer.clone()
        };
        let (session, _) = match &curve {
            Some(c) => run_session(header, &observer, c.distance_fn())?,
            None => run_session(header, &observer, image_distance(&source, observer.metric))?,
        };
        let got = session.results();
        missing.insert(subject, 54 - got.len());
        records.extend(got);
    }
    let subset = missing.values().any(|&m| m > 0);
    if subset {
        tracing::warn!(?missing, "some staircases did not reach the reversal quota; aggregating the subset");
    }
    let table = aggregate_thresholds(&records, subset)?;
    let records_path = out_dir.join("records.csv");
    let table_csv = out_dir.join("aggregate.csv");
    let table_json = out_dir.join("aggregate.json");
    write_file(&records_path, records_to_csv(&records).as_bytes())?;
    write_file(&table_csv, table.to_csv().as_bytes())?;
    write_file(&table_json, &serde_json::to_vec_pretty(&table)?)?;
    outputs.extend([records_path, table_csv, table_json]);
    let manifest = art.record("simulate", cfg, &stimulus_inputs(&art), &outputs)?;
    Ok(SimulationOutput {
        records,
        table,
        missing,
        manifest,
    })
}
