//! The four subcommands. Arg structs double as the programmatic API so
//! integration tests drive the exact code the binary runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use skipspec_core::engine::DraftConfig;
use skipspec_core::metrics::{aggregate, project_2d, read_records, write_records, SpeedupReport};
use skipspec_core::model::corpus::{read_corpus_dir, synth_corpus, write_corpus, Prompt};
use skipspec_core::model::spec::default_planted_spec;
use skipspec_core::model::{build_model, extract_last_hidden, Model, ModelSpec};
use skipspec_core::router::{
    fit_router, read_anchors, write_anchors, FitConfig, Registry, RouterModel,
};
use skipspec_core::search::{BOConfig, ObjectiveMode};
use skipspec_core::stream::{generate_stream, write_manifest, InitialDomain, StreamConfig};
use skipspec_core::Error as CoreError;

use crate::modes::{run_stream, Mode, RunResult, StreamRunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ObjectiveArg {
    Analytic,
    Wallclock,
}

impl From<ObjectiveArg> for ObjectiveMode {
    fn from(a: ObjectiveArg) -> Self {
        match a {
            ObjectiveArg::Analytic => ObjectiveMode::Analytic,
            ObjectiveArg::Wallclock => ObjectiveMode::Wallclock,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DraftModeArg {
    Adaptive,
    Fixed,
}

fn draft_config(mode: DraftModeArg, gamma: usize, tau: f64) -> DraftConfig {
    match mode {
        DraftModeArg::Adaptive => DraftConfig::adaptive(gamma, tau),
        DraftModeArg::Fixed => DraftConfig::fixed(gamma),
    }
}

/// `synth`: build a planted model spec and one JSONL corpus per domain.
#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    /// Where to write the model spec JSON.
    #[arg(long)]
    pub model_spec: PathBuf,
    /// Directory for the per-domain corpus files.
    #[arg(long)]
    pub corpora_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub num_domains: usize,
    /// Prompts per domain.
    #[arg(long, default_value_t = 200)]
    pub per_domain: usize,
    #[arg(long, default_value_t = 16)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SynthManifest {
    model_spec: PathBuf,
    corpora_dir: PathBuf,
    num_domains: usize,
    per_domain: usize,
    prompt_len: usize,
    seed: u64,
    fingerprint: String,
    corpus_files: Vec<PathBuf>,
}

pub fn cmd_synth(args: &SynthArgs) -> RunResult<()> {
    let spec = default_planted_spec(args.num_domains, args.seed)?;
    if let Some(parent) = args.model_spec.parent() {
        std::fs::create_dir_all(parent).map_err(CoreError::from)?;
    }
    std::fs::create_dir_all(&args.corpora_dir).map_err(CoreError::from)?;
    spec.save(&args.model_spec)?;
    let model = build_model(&spec)?;
    let layout = model.layout().expect("planted backend").clone();
    let mut corpus_files = Vec::new();
    for d in 0..args.num_domains {
        let prompts = synth_corpus(&layout, d, args.per_domain, args.prompt_len, args.seed)?;
        let path = args.corpora_dir.join(format!("domain-{d}.jsonl"));
        write_corpus(&path, &prompts)?;
        corpus_files.push(path);
    }
    let manifest = SynthManifest {
        model_spec: args.model_spec.clone(),
        corpora_dir: args.corpora_dir.clone(),
        num_domains: args.num_domains,
        per_domain: args.per_domain,
        prompt_len: args.prompt_len,
        seed: args.seed,
        fingerprint: spec.fingerprint(),
        corpus_files: corpus_files.clone(),
    };
    write_json(&args.corpora_dir.join("synth-manifest.json"), &manifest)?;
    println!(
        "synth: spec {} ({} domains), {} prompts/domain -> {}",
        args.model_spec.display(),
        args.num_domains,
        args.per_domain,
        args.corpora_dir.display()
    );
    Ok(())
}

/// `search`: cluster corpus hidden states, pick anchors, search one mask
/// per domain, and persist the registry + anchors + traces.
#[derive(Debug, clap::Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub model_spec: PathBuf,
    #[arg(long)]
    pub corpora_dir: PathBuf,
    /// Registry, anchors, fit report, and traces land here.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Total objective evaluations per domain, initial probes included.
    #[arg(long, default_value_t = 200)]
    pub iterations: usize,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Analytic)]
    pub objective: ObjectiveArg,
    #[arg(long, default_value_t = 2.3)]
    pub beta: f64,
    /// Max draft tokens per round.
    #[arg(long, default_value_t = 8)]
    pub gamma: usize,
    /// Draft confidence threshold (adaptive mode).
    #[arg(long, default_value_t = 0.4)]
    pub tau: f64,
    #[arg(long, value_enum, default_value_t = DraftModeArg::Adaptive)]
    pub draft_mode: DraftModeArg,
    /// Tokens generated per objective probe.
    #[arg(long, default_value_t = 48)]
    pub max_new: usize,
    /// Cluster count; defaults to the number of corpus files.
    #[arg(long)]
    pub k_clusters: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub k_anchors: usize,
    /// Anchor prompts fed to each domain's objective.
    #[arg(long, default_value_t = 8)]
    pub bo_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SearchManifest {
    model_spec: PathBuf,
    corpora_dir: PathBuf,
    out_dir: PathBuf,
    iterations: usize,
    objective: String,
    beta: f64,
    seed: u64,
    fingerprint: String,
    registry: PathBuf,
    anchors: PathBuf,
    fit_report: PathBuf,
    traces: Vec<PathBuf>,
}

pub fn cmd_search(args: &SearchArgs) -> RunResult<()> {
    let spec = ModelSpec::load(&args.model_spec)?;
    let model = build_model(&spec)?;
    let corpora = read_corpus_dir(&args.corpora_dir)?;
    let cfg = FitConfig {
        k_clusters: args.k_clusters,
        k_anchors: args.k_anchors,
        bo_samples: args.bo_samples,
        kmeans_max_iters: 100,
        seed: args.seed,
        bo: BOConfig {
            iterations: args.iterations,
            seed: args.seed,
            ..BOConfig::default()
        },
        draft_cfg: draft_config(args.draft_mode, args.gamma, args.tau),
        objective_mode: args.objective.into(),
        objective_max_new: args.max_new,
        beta: args.beta,
    };
    let out = fit_router(&model, &corpora, &cfg)?;

    std::fs::create_dir_all(&args.out_dir).map_err(CoreError::from)?;
    let registry_path = args.out_dir.join("registry.json");
    let anchors_path = args.out_dir.join("anchors.jsonl");
    let report_path = args.out_dir.join("fit-report.json");
    out.registry.save(&registry_path)?;
    write_anchors(&anchors_path, out.router.anchors())?;
    write_json(&report_path, &out.report)?;
    let mut trace_paths = Vec::new();
    for (domain, trace) in &out.traces {
        let path = args.out_dir.join(format!("trace-domain-{domain}.csv"));
        std::fs::write(&path, trace.to_csv()).map_err(CoreError::from)?;
        trace_paths.push(path);
    }
    let manifest = SearchManifest {
        model_spec: args.model_spec.clone(),
        corpora_dir: args.corpora_dir.clone(),
        out_dir: args.out_dir.clone(),
        iterations: args.iterations,
        objective: format!("{:?}", args.objective).to_lowercase(),
        beta: args.beta,
        seed: args.seed,
        fingerprint: spec.fingerprint(),
        registry: registry_path,
        anchors: anchors_path,
        fit_report: report_path,
        traces: trace_paths,
    };
    write_json(&args.out_dir.join("search-manifest.json"), &manifest)?;

    if out.report.purity < 1.0 {
        eprintln!(
            "warning: cluster purity {:.3} < 1.0 — clusters mix domain labels",
            out.report.purity
        );
    }
    for entry in &out.registry.domains {
        let objective = out.report.domain_objectives.get(&entry.id);
        println!(
            "search: domain {} mask {} objective {}",
            entry.id,
            entry.mask_bits,
            objective.map_or("n/a".into(), |v| format!("{v:.4}")),
        );
    }
    Ok(())
}

/// `run-stream`: generate a mixed stream, decode it under one mode with a
/// paired greedy baseline, and write records + per-run report.
#[derive(Debug, clap::Args)]
pub struct RunStreamArgs {
    #[arg(long)]
    pub model_spec: PathBuf,
    #[arg(long)]
    pub corpora_dir: PathBuf,
    /// Directory produced by `search` (registry.json + anchors.jsonl).
    #[arg(long)]
    pub registry: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Mode,
    #[arg(long, default_value_t = 0.3)]
    pub mix_ratio: f64,
    #[arg(long, default_value_t = 100)]
    pub stream_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2.3)]
    pub beta: f64,
    #[arg(long, default_value_t = 8)]
    pub gamma: usize,
    #[arg(long, default_value_t = 0.4)]
    pub tau: f64,
    #[arg(long, value_enum, default_value_t = DraftModeArg::Adaptive)]
    pub draft_mode: DraftModeArg,
    /// Tokens generated per stream item.
    #[arg(long, default_value_t = 12)]
    pub max_new: usize,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Analytic)]
    pub objective: ObjectiveArg,
    /// Budget for the pooled mask search (ssd-mixed only).
    #[arg(long, default_value_t = 200)]
    pub iterations: usize,
    /// Anchors pooled per stream domain (ssd-mixed only).
    #[arg(long, default_value_t = 2)]
    pub pooled_per_domain: usize,
    /// Shard items across threads; zeroes wallclock columns.
    #[arg(long)]
    pub parallel: bool,
}

/// Machine-readable record of one `run-stream` invocation.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub model_spec: PathBuf,
    pub corpora_dir: PathBuf,
    pub registry: PathBuf,
    pub out_dir: PathBuf,
    pub mode: String,
    pub objective: String,
    pub mix_ratio: f64,
    pub stream_len: usize,
    pub max_new: usize,
    pub seed: u64,
    pub beta: f64,
    pub gamma: usize,
    pub tau: f64,
    pub draft_mode: String,
    pub parallel: bool,
    pub fingerprint: String,
    pub stream_path: PathBuf,
    pub records_path: PathBuf,
    pub vanilla_path: PathBuf,
    pub report_json: PathBuf,
    pub report_csv: PathBuf,
}

pub fn cmd_run_stream(args: &RunStreamArgs) -> RunResult<()> {
    let spec = ModelSpec::load(&args.model_spec)?;
    let model = build_model(&spec)?;
    let corpora = read_corpus_dir(&args.corpora_dir)?;
    let registry = Registry::load(&args.registry.join("registry.json"))?;
    let router = RouterModel::new(read_anchors(&args.registry.join("anchors.jsonl"))?)?;
    registry.check_model(&spec)?;

    let stream_cfg = StreamConfig {
        mix_ratio: args.mix_ratio,
        num_domains: corpora.len(),
        length: args.stream_len,
        seed: args.seed,
        initial: InitialDomain::Uniform,
    };
    let items = generate_stream(&corpora, &stream_cfg)?;

    let run_cfg = StreamRunConfig {
        mode: args.mode,
        draft: draft_config(args.draft_mode, args.gamma, args.tau),
        max_new: args.max_new,
        beta: args.beta,
        objective: args.objective.into(),
        pooled_bo: BOConfig {
            iterations: args.iterations,
            seed: args.seed,
            ..BOConfig::default()
        },
        pooled_per_domain: args.pooled_per_domain,
        parallel: args.parallel,
    };
    let out = run_stream(&model, &items, &registry, &router, &corpora, &run_cfg)?;
    let report = aggregate(&out.records, Some(&out.vanilla), args.beta)?;

    std::fs::create_dir_all(&args.out_dir).map_err(CoreError::from)?;
    let tag = format!("{}-r{:.2}-seed{}", args.mode, args.mix_ratio, args.seed);
    let stream_path = args.out_dir.join(format!("stream-{tag}.jsonl"));
    let records_path = args.out_dir.join(format!("records-{tag}.jsonl"));
    let vanilla_path = args.out_dir.join(format!("vanilla-{tag}.jsonl"));
    let report_json = args.out_dir.join(format!("report-{tag}.json"));
    let report_csv = args.out_dir.join(format!("report-{tag}.csv"));
    write_manifest(&stream_path, &items)?;
    write_records(&records_path, &out.records)?;
    write_records(&vanilla_path, &out.vanilla)?;
    write_json(&report_json, &report)?;
    std::fs::write(&report_csv, skipspec_core::metrics::report_to_csv(&report))
        .map_err(CoreError::from)?;
    if let Some(trace) = &out.pooled_trace {
        std::fs::write(
            args.out_dir.join(format!("pooled-trace-{tag}.csv")),
            trace.to_csv(),
        )
        .map_err(CoreError::from)?;
    }
    let manifest = RunManifest {
        model_spec: args.model_spec.clone(),
        corpora_dir: args.corpora_dir.clone(),
        registry: args.registry.clone(),
        out_dir: args.out_dir.clone(),
        mode: args.mode.name().into(),
        objective: format!("{:?}", args.objective).to_lowercase(),
        mix_ratio: args.mix_ratio,
        stream_len: args.stream_len,
        max_new: args.max_new,
        seed: args.seed,
        beta: args.beta,
        gamma: args.gamma,
        tau: args.tau,
        draft_mode: format!("{:?}", args.draft_mode).to_lowercase(),
        parallel: args.parallel,
        fingerprint: spec.fingerprint(),
        stream_path,
        records_path,
        vanilla_path,
        report_json,
        report_csv,
    };
    write_json(&args.out_dir.join(format!("run-{tag}.json")), &manifest)?;

    let wallclock = report
        .overall
        .measured_speedup_wallclock
        .map_or("n/a".into(), |v| format!("{v:.3}"));
    println!(
        "run-stream: mode {} r {:.2} items {} -> M {:.3} expected {:.3} analytic {:.3} wallclock {}",
        args.mode,
        args.mix_ratio,
        args.stream_len,
        report.overall.m,
        report.overall.expected_speedup,
        report.overall.measured_speedup_analytic,
        wallclock,
    );
    Ok(())
}

/// `report`: merge every run manifest under --stats-dir into summary
/// tables plus a 2D projection of the corpus hidden states.
#[derive(Debug, clap::Args)]
pub struct ReportArgs {
    /// Directory holding run-*.json manifests from `run-stream`.
    #[arg(long)]
    pub stats_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub model_spec: PathBuf,
    #[arg(long)]
    pub corpora_dir: PathBuf,
    #[arg(long, default_value_t = 2.3)]
    pub beta: f64,
}

#[derive(Debug, Serialize)]
struct SummaryRow {
    mode: String,
    mix_ratio: f64,
    seeds: u64,
    m_mean: f64,
    alpha_mean: Option<f64>,
    expected_mean: f64,
    expected_std: f64,
    analytic_mean: f64,
    analytic_std: f64,
    wallclock_mean: Option<f64>,
    wallclock_std: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.6}"))
}

pub fn cmd_report(args: &ReportArgs) -> RunResult<()> {
    let mut manifest_paths: Vec<PathBuf> = std::fs::read_dir(&args.stats_dir)
        .map_err(CoreError::from)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("run-") && n.ends_with(".json"))
        })
        .collect();
    manifest_paths.sort();
    if manifest_paths.is_empty() {
        return Err(CoreError::EmptyInput("no run-*.json manifests in stats dir").into());
    }

    // Group per (mode, mix ratio); each manifest contributes one seed.
    let mut groups: std::collections::BTreeMap<(String, String), Vec<SpeedupReport>> =
        std::collections::BTreeMap::new();
    for path in &manifest_paths {
        let manifest: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(path).map_err(CoreError::from)?)
                .map_err(CoreError::from)?;
        let records = read_records(&manifest.records_path)?;
        let vanilla = read_records(&manifest.vanilla_path)?;
        let report = aggregate(&records, Some(&vanilla), args.beta)?;
        groups
            .entry((manifest.mode.clone(), format!("{:.2}", manifest.mix_ratio)))
            .or_default()
            .push(report);
    }

    let mut rows = Vec::new();
    for ((mode, ratio), reports) in &groups {
        let expected: Vec<f64> = reports.iter().map(|r| r.overall.expected_speedup).collect();
        let analytic: Vec<f64> = reports
            .iter()
            .map(|r| r.overall.measured_speedup_analytic)
            .collect();
        let wallclock: Vec<f64> = reports
            .iter()
            .filter_map(|r| r.overall.measured_speedup_wallclock)
            .collect();
        let ms: Vec<f64> = reports.iter().map(|r| r.overall.m).collect();
        let alphas: Vec<f64> = reports.iter().filter_map(|r| r.overall.alpha).collect();
        let (expected_mean, expected_std) = mean_std(&expected);
        let (analytic_mean, analytic_std) = mean_std(&analytic);
        let (m_mean, _) = mean_std(&ms);
        rows.push(SummaryRow {
            mode: mode.clone(),
            mix_ratio: ratio.parse().expect("ratio was formatted from f64"),
            seeds: reports.len() as u64,
            m_mean,
            alpha_mean: (!alphas.is_empty()).then(|| mean_std(&alphas).0),
            expected_mean,
            expected_std,
            analytic_mean,
            analytic_std,
            wallclock_mean: (!wallclock.is_empty()).then(|| mean_std(&wallclock).0),
            wallclock_std: (!wallclock.is_empty()).then(|| mean_std(&wallclock).1),
        });
    }

    std::fs::create_dir_all(&args.out_dir).map_err(CoreError::from)?;
    let mut csv = String::from(
        "mode,mix_ratio,seeds,m_mean,alpha_mean,expected_mean,expected_std,analytic_mean,analytic_std,wallclock_mean,wallclock_std\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{:.2},{},{:.6},{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            r.mode,
            r.mix_ratio,
            r.seeds,
            r.m_mean,
            opt_cell(r.alpha_mean),
            r.expected_mean,
            r.expected_std,
            r.analytic_mean,
            r.analytic_std,
            opt_cell(r.wallclock_mean),
            opt_cell(r.wallclock_std),
        ));
    }
    std::fs::write(args.out_dir.join("summary.csv"), &csv).map_err(CoreError::from)?;
    write_json(&args.out_dir.join("summary.json"), &rows)?;

    // Projection of every corpus prompt's routing feature, for eyeballing
    // how separable the domains are.
    let spec = ModelSpec::load(&args.model_spec)?;
    let model = build_model(&spec)?;
    let corpora = read_corpus_dir(&args.corpora_dir)?;
    let flat: Vec<&Prompt> = corpora.iter().flatten().collect();
    let mut vectors = Vec::with_capacity(flat.len());
    for p in &flat {
        let h = extract_last_hidden(&model, p)?;
        vectors.push(h.values.iter().map(|&v| v as f64).collect::<Vec<f64>>());
    }
    let coords = project_2d(&vectors)?;
    let mut proj = String::from("x,y,domain\n");
    for (p, c) in flat.iter().zip(&coords) {
        proj.push_str(&format!("{:.6},{:.6},{}\n", c[0], c[1], p.domain));
    }
    std::fs::write(args.out_dir.join("projection.csv"), &proj).map_err(CoreError::from)?;

    println!(
        "report: {} runs -> {} rows, projection of {} vectors -> {}",
        manifest_paths.len(),
        rows.len(),
        flat.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> RunResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(CoreError::from)?;
    std::fs::write(path, text + "\n").map_err(CoreError::from)?;
    Ok(())
}

/// Shared helper for building models in tests and the binary.
pub fn load_model(path: &Path) -> RunResult<(ModelSpec, Model)> {
    let spec = ModelSpec::load(path)?;
    let model = build_model(&spec)?;
    Ok((spec, model))
}
