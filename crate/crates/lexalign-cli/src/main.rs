//! `lexalign` command-line interface.
//!
//! Exit codes: 0 success, 2 validation error, 3 stage error, 4 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use lexalign::analysis::{self, MapExpectations, DEFAULT_EDGES, DEFAULT_N_VALUES};
use lexalign::config::SessionConfig;
use lexalign::embed_store::{load_embeddings, load_vocabulary, EmbeddingFormat, EmbeddingSet, Vocabulary};
use lexalign::ensemble::{read_trace, write_trace};
use lexalign::mapping::{load_mapping, save_mapping, NoiseConfig, VarianceKind};
use lexalign::overlap::{build_overlap_with, OverlapOptions};
use lexalign::pipeline::{align_pair, decode_all, map_pair, Session, Stage};
use lexalign::provenance::{combine, file_digest, to_hex};
use lexalign::transform::{load_transform, save_transform, TransformConfig};
use lexalign::Error;

#[derive(Parser)]
#[command(name = "lexalign", version, about = "Cross-vocabulary alignment and ensemble decoding")]
struct Cli {
    /// Session config (TOML). Used by `run` and as the default for `decode`.
    #[arg(long, global = true, env = "LEXALIGN_CONFIG")]
    config: Option<PathBuf>,
    /// Worker threads for parallel stages; defaults to the number of CPUs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    /// Print failures as a JSON object on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a linear map from source into target embedding space.
    Align(AlignArgs),
    /// Build the sparse vocabulary mapping from a learned transform.
    BuildMap(BuildMapArgs),
    /// Report how many tokens two vocabularies share verbatim.
    InspectOverlap(OverlapArgs),
    /// Summarize a mapping file and check its provenance.
    InspectMap(InspectMapArgs),
    /// Ensemble-decode prompts with the models of a session config.
    Decode(DecodeArgs),
    /// Diversity and similarity statistics from a trace and mappings.
    Stats(StatsArgs),
    /// Run pipeline stages from the session config.
    Run(RunArgs),
}

#[derive(Args)]
struct Inputs {
    /// Source embeddings (word2vec text or binary native).
    #[arg(long)]
    source: PathBuf,
    /// Target (pivot) embeddings.
    #[arg(long)]
    target: PathBuf,
    /// Embedding format for both files; inferred from the extension when absent.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct AlignArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_whiten: bool,
    /// Singular-value re-weighting exponent.
    #[arg(long)]
    reweight: Option<f64>,
}

#[derive(Args)]
struct BuildMapArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    transform: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    c: Option<usize>,
    /// population or sample
    #[arg(long)]
    variance: Option<String>,
    #[arg(long)]
    no_row_normalize: bool,
    /// CSLS neighbourhood size.
    #[arg(long, default_value_t = 10)]
    csls_k: usize,
    #[arg(long, default_value_t = 1024)]
    block_size: usize,
}

#[derive(Args)]
struct OverlapArgs {
    /// Embedding file, or a `.txt`/`.vocab` token list.
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Match U+2581 against a plain space.
    #[arg(long)]
    boundary_as_space: bool,
}

#[derive(Args)]
struct InspectMapArgs {
    #[arg(long)]
    map: PathBuf,
    /// Vocabulary source to check the source digest against.
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    /// Bin edges, ascending.
    #[arg(long, value_delimiter = ',')]
    edges: Option<Vec<f64>>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Session config; overrides the global --config.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, conflicts_with = "prompt_file")]
    prompt: Vec<String>,
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    /// Filter width.
    #[arg(long)]
    n: Option<usize>,
    /// Average every model without filtering.
    #[arg(long, conflicts_with = "n")]
    no_filter: bool,
    /// Top-k truncation of each model's distribution.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Write the step log as JSONL.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    map: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    n_values: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    edges: Option<Vec<f64>>,
    /// Also write the diversity table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Comma-separated subset of align,build-map,decode,stats.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<String>>,
}

/// Failure with its exit code: 2 validation, 3 stage, 4 I/O.
struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        // anything raised inside a pipeline stage is a stage failure
        let code = match &error {
            Error::Stage { .. } => 3,
            Error::Io { .. } => 4,
            Error::Validation(_) | Error::InvalidArgument(_) => 2,
            _ => 3,
        };
        Failure { code, error }
    }
}

fn validation(error: Error) -> Failure {
    let code = if matches!(error, Error::Io { .. }) { 4 } else { 2 };
    Failure { code, error }
}

type CliResult = Result<Value, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = match &cli.command {
        Command::Align(a) => align(a),
        Command::BuildMap(a) => build_map(a),
        Command::InspectOverlap(a) => inspect_overlap(a),
        Command::InspectMap(a) => inspect_map(a),
        Command::Decode(a) => decode_cmd(&cli, a),
        Command::Stats(a) => stats(a),
        Command::Run(a) => run(&cli, a),
    };
    match result {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json values serialize"));
            ExitCode::SUCCESS
        }
        Err(f) => {
            report(&f, cli.json_errors);
            ExitCode::from(f.code)
        }
    }
}

fn report(f: &Failure, as_json: bool) {
    if !as_json {
        eprintln!("error: {}", f.error);
        return;
    }
    let kind = match f.code {
        2 => "validation",
        4 => "io",
        _ => "stage",
    };
    let mut body = json!({
        "kind": kind,
        "exit_code": f.code,
        "message": f.error.to_string(),
    });
    if let Error::Stage { stage, .. } = &f.error {
        body["stage"] = json!(stage);
    }
    if let Error::Validation(p) = f.error.root() {
        body["problems"] = json!(p);
    }
    eprintln!("{}", json!({ "error": body }));
}

fn format_of(path: &Path, explicit: &Option<String>) -> Result<EmbeddingFormat, Failure> {
    match explicit {
        Some(f) => f.parse().map_err(validation),
        None => Ok(EmbeddingFormat::from_path(path)),
    }
}

fn load_pair(inputs: &Inputs) -> Result<(EmbeddingSet, EmbeddingSet), Failure> {
    let s = load_embeddings(&inputs.source, format_of(&inputs.source, &inputs.format)?)?;
    let t = load_embeddings(&inputs.target, format_of(&inputs.target, &inputs.format)?)?;
    Ok((s, t))
}

fn input_digest(inputs: &Inputs) -> Result<[u8; 32], Failure> {
    let s = file_digest(&inputs.source)?;
    let t = file_digest(&inputs.target)?;
    Ok(combine([("source", s.as_slice()), ("target", t.as_slice())]))
}

fn align(a: &AlignArgs) -> CliResult {
    let mut cfg = TransformConfig::default();
    if a.no_whiten {
        cfg.whiten = false;
        cfg.dewhiten = false;
    }
    if let Some(s) = a.reweight {
        cfg.reweight = s;
    }
    let (s, t) = load_pair(&a.inputs)?;
    let (mut transform, warnings) = align_pair(&s, &t, &cfg)?;
    let config_json = serde_json::to_vec(&cfg).expect("config serializes");
    transform.meta.inputs = combine([
        ("inputs", input_digest(&a.inputs)?.as_slice()),
        ("transform", config_json.as_slice()),
    ]);
    save_transform(&transform, &a.out)?;
    Ok(json!({
        "out": a.out,
        "dim": transform.matrix.nrows(),
        "pairs": transform.meta.pairs,
        "inputs": to_hex(&transform.meta.inputs),
        "warnings": warnings,
    }))
}

fn build_map(a: &BuildMapArgs) -> CliResult {
    let mut noise = NoiseConfig::default();
    if let Some(t) = a.t {
        noise.t = t;
    }
    if let Some(x) = a.threshold {
        noise.threshold = x;
    }
    if let Some(x) = a.sigma {
        noise.sigma = x;
    }
    if let Some(c) = a.c {
        noise.c = c;
    }
    if let Some(v) = &a.variance {
        noise.variance = match v.as_str() {
            "population" => VarianceKind::Population,
            "sample" => VarianceKind::Sample,
            other => {
                return Err(validation(Error::InvalidArgument(format!(
                    "--variance must be population or sample, got {other:?}"
                ))))
            }
        };
    }
    noise.row_normalize = !a.no_row_normalize;
    noise.validate().map_err(validation)?;
    let (s, t) = load_pair(&a.inputs)?;
    let transform = load_transform(&a.transform)?;
    if transform.meta.source_vocab != s.vocab().digest() || transform.meta.target_vocab != t.vocab().digest() {
        return Err(Error::ProvenanceMismatch(format!(
            "{} was learned on different vocabularies",
            a.transform.display()
        ))
        .into());
    }
    let mut m = map_pair(&s, &t, &transform, &noise, a.csls_k, a.block_size)?;
    let tdigest = file_digest(&a.transform)?;
    let noise_json = serde_json::to_vec(&noise).expect("config serializes");
    m.provenance.inputs = combine([
        ("inputs", input_digest(&a.inputs)?.as_slice()),
        ("transform-file", tdigest.as_slice()),
        ("noise", noise_json.as_slice()),
        ("csls-k", (a.csls_k as u64).to_le_bytes().as_slice()),
    ]);
    save_mapping(&m, &a.out)?;
    Ok(json!({
        "out": a.out,
        "rows": m.rows(),
        "cols": m.cols(),
        "nnz": m.nnz(),
        "inputs": to_hex(&m.provenance.inputs),
    }))
}

/// Token list files are read as vocabularies; anything else as embeddings.
fn vocab_of(path: &Path) -> Result<Vocabulary, Failure> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("txt") | Some("vocab") => Ok(load_vocabulary(path)?),
        _ => {
            let e = load_embeddings(path, EmbeddingFormat::from_path(path))?;
            Ok(e.vocab().clone())
        }
    }
}

fn inspect_overlap(a: &OverlapArgs) -> CliResult {
    let s = vocab_of(&a.source)?;
    let t = vocab_of(&a.target)?;
    let opts = OverlapOptions {
        boundary_as_space: a.boundary_as_space,
    };
    let report = build_overlap_with(&s, &t, opts).report();
    Ok(serde_json::to_value(report).expect("report serializes"))
}

fn inspect_map(a: &InspectMapArgs) -> CliResult {
    let m = load_mapping(&a.map, None, false)?;
    let expect = MapExpectations {
        source_vocab: a.source.as_deref().map(vocab_of).transpose()?.map(|v| v.digest()),
        target_vocab: a.target.as_deref().map(vocab_of).transpose()?.map(|v| v.digest()),
        noise: None,
    };
    let edges = a.edges.clone().unwrap_or_else(|| DEFAULT_EDGES.to_vec());
    let report = analysis::map_report(&m, &edges, &expect).map_err(validation)?;
    if !report.consistent() {
        let bad: Vec<String> = report.checks.iter().filter(|c| !c.ok).map(|c| c.field.clone()).collect();
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        return Err(Error::ProvenanceMismatch(format!("{}: {} differ", a.map.display(), bad.join(", "))).into());
    }
    Ok(serde_json::to_value(report).expect("report serializes"))
}

fn session_config(path: Option<&PathBuf>) -> Result<SessionConfig, Failure> {
    let path = path.ok_or_else(|| {
        validation(Error::InvalidArgument("no session config given (use --config)".into()))
    })?;
    SessionConfig::load(path).map_err(validation)
}

fn decode_cmd(cli: &Cli, a: &DecodeArgs) -> CliResult {
    let mut cfg = session_config(a.spec.as_ref().or(cli.config.as_ref()))?;
    if !a.prompt.is_empty() || a.prompt_file.is_some() {
        cfg.decode.prompts = a.prompt.clone();
        cfg.decode.prompt_file = a.prompt_file.as_ref().map(|p| std::path::absolute(p).unwrap_or(p.clone()));
    }
    if let Some(n) = a.n {
        cfg.ensemble.n = n;
        cfg.ensemble.filter = true;
    }
    if a.no_filter {
        cfg.ensemble.filter = false;
    }
    if let Some(k) = a.k {
        cfg.ensemble.k = k;
    }
    if let Some(m) = a.max_len {
        cfg.ensemble.max_len = m;
    }
    let session = Session::open(cfg).map_err(validation)?;
    let prompts = session.cfg.prompts()?;
    if prompts.is_empty() {
        return Err(validation(Error::InvalidArgument("no prompts given".into())));
    }
    let (spec, digest) = session.ensemble()?;
    let states = decode_all(&spec, &prompts)?;
    if let Some(path) = &a.trace {
        write_trace(path, &to_hex(&digest), &states)?;
    }
    let outputs: Vec<Value> = states
        .iter()
        .map(|s| json!({ "prompt": s.prompt, "output": s.generated(), "tokens": s.tokens.len(), "finish": s.finished }))
        .collect();
    Ok(json!({ "pivot": session.pivot_name(), "outputs": outputs }))
}

fn stats(a: &StatsArgs) -> CliResult {
    let (inputs, states) = read_trace(&a.trace)?;
    let n_values = a.n_values.clone().unwrap_or_else(|| DEFAULT_N_VALUES.to_vec());
    let edges = a.edges.clone().unwrap_or_else(|| DEFAULT_EDGES.to_vec());
    let div = analysis::diversity(&states, &n_values).map_err(validation)?;
    let mut maps = serde_json::Map::new();
    for path in &a.map {
        let m = load_mapping(path, None, false)?;
        let r = analysis::map_report(&m, &edges, &MapExpectations::default()).map_err(validation)?;
        maps.insert(path.display().to_string(), serde_json::to_value(r).expect("report serializes"));
    }
    if let Some(csv) = &a.csv {
        std::fs::write(csv, analysis::diversity_csv(&div)).map_err(|e| Failure {
            code: 4,
            error: Error::InvalidArgument(format!("{}: {e}", csv.display())),
        })?;
    }
    Ok(json!({ "trace_inputs": inputs, "diversity": div, "mappings": maps }))
}

fn run(cli: &Cli, a: &RunArgs) -> CliResult {
    let cfg = session_config(cli.config.as_ref())?;
    let stages: Vec<Stage> = match &a.stages {
        None => Stage::ALL.to_vec(),
        Some(names) => names
            .iter()
            .map(|s| s.parse::<Stage>())
            .collect::<Result<_, _>>()
            .map_err(validation)?,
    };
    let session = Session::open(cfg).map_err(validation)?;
    let report = session.run(&stages)?;
    Ok(serde_json::to_value(report).expect("report serializes"))
}
