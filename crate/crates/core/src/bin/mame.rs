use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mame_core::analysis::{
    aggregate_thresholds, boundary_profile, read_records_csv, AggregateTable, ProfileThreshold, SsimConfig,
    PUBLISHED_SUBJECT_FIXTURE, PUBLISHED_THRESHOLD_TABLE,
};
use mame_core::pipeline::{self, PipelineConfig};
use mame_core::service::{self, ServerConfig, ServiceState};
use mame_core::synthesis::{synthesize, Direction, SynthesisSpec};
use mame_core::{Error, TapId};

/// Tolerance for reproducing the published group table from its fixture.
const FIXTURE_TOLERANCE: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "mame", version, about = "Metamer exploration pipeline and experiment server")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (JSON). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the corpus and backbone, then extract Gram features per tap.
    CorpusExtract {
        /// JSON list of {id, path} images instead of the generated corpus.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Fit one ICA model per tap.
    IcaFit {
        #[arg(long)]
        components: Option<usize>,
        #[arg(long)]
        select: Option<usize>,
    },
    /// Select the reference pool.
    SelectRefs {
        #[arg(long)]
        percentile: Option<f64>,
    },
    /// Synthesize one perturbed image.
    Synth {
        /// Corpus image id; defaults to the first reference.
        #[arg(long)]
        reference: Option<String>,
        #[arg(long)]
        tap: TapId,
        #[arg(long, default_value_t = 0)]
        component: usize,
        /// `+` or `-`.
        #[arg(long, default_value = "+", allow_hyphen_values = true)]
        direction: String,
        #[arg(long)]
        target: f64,
        /// Output PNG; a JSON summary is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run simulated observer sessions and aggregate their thresholds.
    Simulate {
        #[arg(long, default_value_t = 8)]
        sessions: usize,
    },
    /// Aggregate threshold records and optionally profile the boundary.
    Analyze {
        /// Threshold records CSV.
        #[arg(long, conflicts_with = "fixtures")]
        records: Option<PathBuf>,
        /// Built-in record set; `paper-table1` checks the aggregator against
        /// the published group table.
        #[arg(long)]
        fixtures: Option<String>,
        /// Aggregate whatever cells are present.
        #[arg(long)]
        allow_subset: bool,
        /// Synthesize references at each aggregate threshold and report image
        /// metrics.
        #[arg(long)]
        profile: bool,
    },
    /// Serve the experiment API, using the pipeline artifacts as config
    /// `default`.
    Serve {
        /// Server configuration (JSON).
        #[arg(long)]
        server_config: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        bind: Option<String>,
        /// Overrides the data directory, including MAME_DATA_DIR.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Print the chain of runs that produced a file.
    Report { file: PathBuf },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::StageGeometry { .. }
        | Error::Provenance(_)
        | Error::MissingCells(_)
        | Error::ComponentOutOfRange { .. } => 2,
        _ => 1,
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::CorpusExtract { manifest } => {
            if manifest.is_some() {
                cfg.corpus.manifest = manifest;
            }
            let m = pipeline::run_extract(&cfg)?;
            print_outputs(&m);
        }
        Command::IcaFit { components, select } => {
            if let Some(n) = components {
                cfg.ica.n_components = n;
            }
            if let Some(k) = select {
                cfg.ica.select = k;
            }
            let m = pipeline::run_fit(&cfg)?;
            for tap in TapId::ALL {
                let model = mame_core::ica::IcaModel::load(&cfg.artifacts().ica(tap))?;
                let ev: Vec<String> = model
                    .selected
                    .iter()
                    .map(|&i| format!("{i}:{:.4}", model.explained_variance[i]))
                    .collect();
                println!("{tap}: selected {}", ev.join(" "));
            }
            print_outputs(&m);
        }
        Command::SelectRefs { percentile } => {
            if let Some(p) = percentile {
                cfg.reference_percentile = p;
            }
            let (m, sel) = pipeline::run_select(&cfg)?;
            for (tap, t) in &sel.thresholds {
                println!("{tap}: threshold {t:.4}");
            }
            println!("{} reference images", sel.image_ids.len());
            print_outputs(&m);
        }
        Command::Synth {
            reference,
            tap,
            component,
            direction,
            target,
            out,
        } => synth(&cfg, reference, tap, component, &direction, target, &out)?,
        Command::Simulate { sessions } => {
            let out = pipeline::run_simulation(&cfg, sessions)?;
            for (subject, missing) in &out.missing {
                if *missing > 0 {
                    println!("{subject}: {missing} condition(s) without a threshold");
                }
            }
            print!("{}", out.table.to_csv());
            print_outputs(&out.manifest);
        }
        Command::Analyze {
            records,
            fixtures,
            allow_subset,
            profile,
        } => analyze(&cfg, records, fixtures, allow_subset, profile)?,
        Command::Serve {
            server_config,
            port,
            bind,
            data_dir,
        } => {
            let mut server = match &server_config {
                Some(p) => ServerConfig::load(p)?,
                None => ServerConfig::default(),
            }
            .with_env_overrides();
            if let Some(p) = port {
                server.port = p;
            }
            if let Some(b) = bind {
                server.bind = b;
            }
            if let Some(d) = data_dir {
                server.data_dir = d;
            }
            serve(&cfg, server)?;
        }
        Command::Report { file } => {
            let chain = cfg.artifacts().provenance(&file)?;
            if chain.is_empty() {
                return Err(Error::Provenance(format!(
                    "no recorded run produced {}",
                    file.display()
                )));
            }
            for m in &chain {
                println!("{} (v{}, seed {}, config {})", m.command, m.version, m.seed, &m.config_hash[..12]);
                for d in &m.inputs {
                    println!("  in  {} {}", &d.sha256[..16], d.path.display());
                }
                for d in &m.outputs {
                    println!("  out {} {}", &d.sha256[..16], d.path.display());
                }
            }
            let mut inputs: Vec<PathBuf> = chain.iter().flat_map(|m| m.inputs.iter().map(|d| d.path.clone())).collect();
            inputs.push(file);
            cfg.artifacts().verify_inputs(&inputs)?;
            println!("all recorded hashes match");
        }
    }
    Ok(())
}

fn print_outputs(m: &pipeline::RunManifest) {
    for d in &m.outputs {
        println!("wrote {}", d.path.display());
    }
}

fn synth(
    cfg: &PipelineConfig,
    reference: Option<String>,
    tap: TapId,
    component: usize,
    direction: &str,
    target: f64,
    out: &Path,
) -> Result<(), Error> {
    cfg.validate()?;
    let direction = match direction {
        "+" | "positive" => Direction::Positive,
        "-" | "negative" => Direction::Negative,
        other => return Err(Error::Config(format!("direction must be + or -, got `{other}`"))),
    };
    let art = cfg.artifacts();
    let mut inputs = vec![art.backbone_config(), art.backbone_weights(), art.corpus_manifest(), art.ica(tap)];
    let id = match reference {
        Some(id) => id,
        None => {
            inputs.push(art.references());
            art.verify_inputs(&inputs)?;
            pipeline::load_references(&art)?
                .image_ids
                .first()
                .cloned()
                .ok_or_else(|| Error::Config("reference pool is empty".into()))?
        }
    };
    art.verify_inputs(&inputs)?;
    let image = pipeline::load_corpus(&art)?
        .into_iter()
        .find(|(i, _)| *i == id)
        .map(|(_, img)| img)
        .ok_or_else(|| Error::Config(format!("no corpus image `{id}`")))?;
    let backbone = pipeline::load_backbone(&art)?;
    let model = mame_core::ica::IcaModel::load(&art.ica(tap))?;
    let spec = SynthesisSpec {
        tap,
        component,
        direction,
        target,
    };
    let res = synthesize(&backbone, &model, &image, &spec, &cfg.optim)?;
    res.image.write_png(out)?;
    let summary = serde_json::json!({
        "reference": id,
        "spec": spec,
        "achieved": res.achieved,
        "target": res.target,
        "components": res.components,
        "finalLoss": res.final_loss,
        "iterations": res.loss_trace.len(),
        "elapsed": res.elapsed,
        "converged": res.converged,
    });
    let summary_path = out.with_extension("json");
    std::fs::write(&summary_path, serde_json::to_vec_pretty(&summary)?).map_err(|e| mame_core::error::io_error(&summary_path, e))?;
    println!(
        "{id} {tap} c{component}{} t={target}: loss {:.3e} after {} iterations ({:.2}s), converged {}",
        if direction == Direction::Positive { "+" } else { "-" },
        res.final_loss,
        res.loss_trace.len(),
        res.elapsed,
        res.converged
    );
    art.record("synth", cfg, &inputs, &[out.to_path_buf(), summary_path])?;
    Ok(())
}

fn analyze(
    cfg: &PipelineConfig,
    records: Option<PathBuf>,
    fixtures: Option<String>,
    allow_subset: bool,
    profile: bool,
) -> Result<(), Error> {
    let (text, published) = match (&records, fixtures.as_deref()) {
        (Some(path), None) => (
            std::fs::read_to_string(path).map_err(|e| mame_core::error::io_error(path, e))?,
            false,
        ),
        (None, Some("paper-table1")) => (PUBLISHED_SUBJECT_FIXTURE.to_string(), true),
        (None, Some(other)) => return Err(Error::Config(format!("unknown fixture set `{other}`"))),
        _ => return Err(Error::Config("one of --records or --fixtures is required".into())),
    };
    let recs = read_records_csv(&text)?;
    let table = aggregate_thresholds(&recs, allow_subset)?;
    print!("{}", table.to_csv());
    if published {
        check_published(&table)?;
    }
    if profile {
        run_profile(cfg, &table, records.as_deref())?;
    }
    Ok(())
}

fn check_published(table: &AggregateTable) -> Result<(), Error> {
    let mut worst: f64 = 0.0;
    for (tap, ecc, mean, std) in PUBLISHED_THRESHOLD_TABLE {
        let row = table
            .row(tap, ecc)
            .ok_or_else(|| Error::MissingCells(format!("{tap} at {ecc}deg")))?;
        worst = worst.max((row.mean - mean).abs()).max((row.std - std).abs());
    }
    if worst > FIXTURE_TOLERANCE {
        return Err(Error::Config(format!(
            "aggregate differs from the published table by {worst:.2e}"
        )));
    }
    println!("matches the published table (max abs difference {worst:.2e})");
    Ok(())
}

fn run_profile(cfg: &PipelineConfig, table: &AggregateTable, records: Option<&Path>) -> Result<(), Error> {
    cfg.validate()?;
    let art = cfg.artifacts();
    let mut inputs = vec![art.backbone_config(), art.backbone_weights(), art.corpus_manifest(), art.references()];
    inputs.extend(TapId::ALL.iter().map(|&t| art.ica(t)));
    art.verify_inputs(&inputs)?;
    if let Some(r) = records {
        inputs.push(r.to_path_buf());
    }
    let pool = pipeline::load_references(&art)?.image_ids;
    let n = cfg.profile_references.min(pool.len());
    let corpus: BTreeMap<String, _> = pipeline::load_corpus(&art)?.into_iter().collect();
    let references: Vec<_> = pool[..n]
        .iter()
        .map(|id| (id.clone(), corpus[id].clone()))
        .collect();
    let thresholds: Vec<ProfileThreshold> = table
        .rows
        .iter()
        .map(|r| ProfileThreshold {
            tap: r.tap,
            eccentricity_deg: r.eccentricity_deg,
            target: r.mean,
        })
        .collect();
    let rows = boundary_profile(
        &pipeline::load_backbone(&art)?,
        &pipeline::load_models(&art)?,
        &references,
        &thresholds,
        &cfg.optim,
        &SsimConfig::default(),
    )?;
    let mut csv = String::from("tap,eccentricity_deg,target,mean_rms,std_rms,mean_ssim,std_ssim,n,failures\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.tap, r.eccentricity_deg, r.target, r.mean_rms, r.std_rms, r.mean_ssim, r.std_ssim, r.n, r.failures
        ));
    }
    print!("{csv}");
    let path = art.dir("analyze").join("profile.csv");
    std::fs::create_dir_all(art.dir("analyze")).map_err(|e| mame_core::error::io_error(&path, e))?;
    std::fs::write(&path, &csv).map_err(|e| mame_core::error::io_error(&path, e))?;
    art.record("analyze", cfg, &inputs, &[path])?;
    Ok(())
}

fn serve(cfg: &PipelineConfig, server: ServerConfig) -> Result<(), Error> {
    let experiment = pipeline::load_experiment(cfg)?;
    let state = ServiceState::open(server.clone(), BTreeMap::from([("default".to_string(), experiment)]))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::Config(format!("tokio runtime: {e}")))?;
    runtime.block_on(async move {
        let addr = format!("{}:{}", server.bind, server.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| mame_core::error::io_error(&addr, e))?;
        let local = listener.local_addr().map_err(|e| mame_core::error::io_error(&addr, e))?;
        tracing::info!(addr = %local, data_dir = %server.data_dir.display(), "serving");
        // Parsed by supervisors that bind port 0.
        println!("listening on http://{local}");
        use std::io::Write;
        let _ = std::io::stdout().flush();
        service::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        })
        .await
        .map_err(|e| mame_core::error::io_error(&addr, e))
    })
}
