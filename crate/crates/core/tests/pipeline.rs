mod common;

use std::collections::BTreeMap;
use std::path::Path;

use mame_core::adaptive::PlanLayout;
use mame_core::pipeline::{
    load_models, load_references, run_extract, run_fit, run_select, run_simulation, sha256_file, PipelineConfig,
};
use mame_core::{Error, TapId};

use common::tiny_pipeline_config;

fn all_stages(cfg: &PipelineConfig) {
    run_extract(cfg).unwrap();
    run_fit(cfg).unwrap();
    run_select(cfg).unwrap();
}

/// sha256 of every recorded output, keyed by path relative to the output
/// directory.
fn output_digests(cfg: &PipelineConfig) -> BTreeMap<String, String> {
    let art = cfg.artifacts();
    art.read_manifests()
        .unwrap()
        .iter()
        .flat_map(|m| m.outputs.clone())
        .map(|d| {
            let rel = d.path.strip_prefix(&cfg.out_dir).unwrap().display().to_string();
            (rel, d.sha256)
        })
        .collect()
}

#[test]
fn stages_record_a_provenance_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_pipeline_config(tmp.path());
    all_stages(&cfg);
    let art = cfg.artifacts();
    let manifests = art.read_manifests().unwrap();
    let commands: Vec<&str> = manifests.iter().map(|m| m.command.as_str()).collect();
    assert_eq!(commands, ["corpus-extract", "ica-fit", "select-refs"]);
    for m in &manifests {
        assert_eq!(m.config_hash, cfg.hash());
        assert_eq!(m.seed, 5);
        for d in m.outputs.iter().chain(&m.inputs) {
            assert_eq!(sha256_file(&d.path).unwrap(), d.sha256, "{}", d.path.display());
        }
    }
    let chain = art.provenance(&art.references()).unwrap();
    let names: Vec<&str> = chain.iter().map(|m| m.command.as_str()).collect();
    assert_eq!(names, ["select-refs", "ica-fit", "corpus-extract"]);

    let models = load_models(&art).unwrap();
    for tap in TapId::ALL {
        assert_eq!(models[&tap].n_components(), 6);
        assert_eq!(models[&tap].selected.len(), 3);
    }
    let pool = load_references(&art).unwrap().image_ids;
    assert!(!pool.is_empty() && pool.len() < 80);
    assert!(pool.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn stages_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ca, cb) = (tiny_pipeline_config(a.path()), tiny_pipeline_config(b.path()));
    all_stages(&ca);
    all_stages(&cb);
    let (da, db) = (output_digests(&ca), output_digests(&cb));
    assert!(da.len() > 10);
    assert_eq!(da, db);
}

#[test]
fn component_count_is_capped_at_rank() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_pipeline_config(tmp.path());
    cfg.ica.n_components = 100;
    run_extract(&cfg).unwrap();
    run_fit(&cfg).unwrap();
    let models = load_models(&cfg.artifacts()).unwrap();
    // 4, 6 and 8 filters give 10, 21 and 36 Gram entries.
    for (tap, dim) in [(TapId::Early, 10), (TapId::Mid, 21), (TapId::Late, 36)] {
        let n = models[&tap].n_components();
        assert!(n >= 3 && n <= dim, "{tap}: {n} components");
    }
}

#[test]
fn modified_artifact_is_rejected_downstream() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_pipeline_config(tmp.path());
    run_extract(&cfg).unwrap();
    run_fit(&cfg).unwrap();
    let path = cfg.artifacts().ica(TapId::Mid);
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(run_select(&cfg), Err(Error::Provenance(_))));
}

#[test]
fn stages_need_their_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_pipeline_config(tmp.path());
    assert!(matches!(run_fit(&cfg), Err(Error::Config(_))));
    run_extract(&cfg).unwrap();
    assert!(matches!(run_select(&cfg), Err(Error::Config(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tiny_pipeline_config(tmp.path());
    let mut c = base.clone();
    c.taps = vec![TapId::Early, TapId::Late];
    assert!(matches!(run_extract(&c), Err(Error::Config(_))));
    let mut c = base.clone();
    c.ica.select = 2;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = base.clone();
    c.backbone.weights = Some(tmp.path().join("absent.bin"));
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = base;
    c.optim.learning_rate = 0.0;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
}

#[test]
fn config_files_use_camel_case_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("cfg.json");
    std::fs::write(
        &path,
        r#"{"seed": 9, "outDir": "x", "corpus": {"deskCount": 12},
            "ica": {"nComponents": 7, "maxIterations": 50},
            "optim": {"learningRate": 0.01, "adamBeta1": 0.8, "stopLoss": 1e-7, "timeBudget": null},
            "layout": {"blocksPerEccentricity": 1, "repeatsPerBlock": 2},
            "referencePercentile": 30}"#,
    )
    .unwrap();
    let cfg = PipelineConfig::load(&path).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.corpus.desk_count, 12);
    assert_eq!(cfg.corpus.desk_size, 64);
    assert_eq!((cfg.ica.n_components, cfg.ica.max_iterations), (7, 50));
    assert_eq!((cfg.optim.learning_rate, cfg.optim.beta1, cfg.optim.stop_loss), (0.01, 0.8, 1e-7));
    assert_eq!(cfg.optim.time_budget, None);
    assert_eq!(cfg.optim.iterations, 300);
    assert_eq!(cfg.layout.total_trials(), 3 * 36);
    assert_eq!(cfg.reference_percentile, 30.0);
    let round: PipelineConfig = serde_json::from_slice(&serde_json::to_vec(&cfg).unwrap()).unwrap();
    assert_eq!(round, cfg);
    assert_eq!(round.hash(), cfg.hash());

    std::fs::write(&path, r#"{"seed": "one"}"#).unwrap();
    assert!(matches!(PipelineConfig::load(&path), Err(Error::Config(_))));
}

fn simulate(dir: &Path) -> mame_core::pipeline::SimulationOutput {
    let mut cfg = tiny_pipeline_config(dir);
    cfg.layout = PlanLayout {
        blocks_per_eccentricity: 2,
        repeats_per_block: 3,
    };
    all_stages(&cfg);
    run_simulation(&cfg, 2).unwrap()
}

#[test]
fn simulation_is_reproducible_and_recorded() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (sa, sb) = (simulate(a.path()), simulate(b.path()));
    assert_eq!(sa.records, sb.records);
    assert_eq!(sa.table, sb.table);
    assert_eq!(sa.missing.keys().collect::<Vec<_>>(), ["sim01", "sim02"]);
    for (subject, missing) in &sa.missing {
        let have = sa.records.iter().filter(|r| &r.subject_id == subject).count();
        assert_eq!(have + missing, 54);
    }
    assert_eq!(sa.manifest.command, "simulate");
    let names: Vec<String> = sa
        .manifest
        .outputs
        .iter()
        .map(|d| d.path.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["curve.json", "records.csv", "aggregate.csv", "aggregate.json"]);
    assert_eq!(sa.table.subset, sa.missing.values().any(|&m| m > 0));
}

#[test]
fn simulation_needs_a_session() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_pipeline_config(tmp.path());
    assert!(matches!(run_simulation(&cfg, 0), Err(Error::Config(_))));
}
