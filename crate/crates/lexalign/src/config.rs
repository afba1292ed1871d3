//! Session configuration: one TOML document per session, with environment
//! overrides of the form `LEXALIGN_<SECTION>__<KEY>=<value>`.
//!
//! Relative paths resolve against the directory holding the config file.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embed_store::EmbeddingFormat;
use crate::ensemble::{EnsembleSpec, FailurePolicy, Granularity};
use crate::error::{Error, Result};
use crate::mapping::NoiseConfig;
use crate::similarity;
use crate::transform::TransformConfig;

pub const ENV_PREFIX: &str = "LEXALIGN_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    /// Largest vocabulary wins when `"auto"`; ties go to the smaller name.
    #[serde(default = "auto")]
    pub pivot: String,
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub transform: TransformConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub similarity: SimilarityConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default)]
    pub paths: PathsConfig,
    /// Directory that relative paths resolve against. Set by the loader.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn auto() -> String {
    "auto".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub embeddings: PathBuf,
    /// Inferred from the file extension when absent.
    #[serde(default)]
    pub format: Option<String>,
    /// Full model vocabulary, one token per line. Tokens without an embedding
    /// get a zero row; embedded tokens outside it are ignored.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    pub client: ClientConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ClientConfig {
    Replay {
        script: PathBuf,
    },
    Ngram {
        corpus: PathBuf,
        #[serde(default = "default_order")]
        order: usize,
        #[serde(default = "default_granularity")]
        granularity: Granularity,
    },
    Remote {
        url: String,
        #[serde(default = "default_remote_top_k")]
        top_k: usize,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

fn default_order() -> usize {
    2
}
fn default_granularity() -> Granularity {
    Granularity::Word
}
fn default_remote_top_k() -> usize {
    EnsembleSpec::DEFAULT_K
}
fn default_timeout_ms() -> u64 {
    30_000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityConfig {
    pub k: usize,
    pub block_size: usize,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            k: similarity::DEFAULT_K,
            block_size: similarity::DEFAULT_BLOCK,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub k: usize,
    pub n: usize,
    /// With `false`, every available model is averaged.
    pub filter: bool,
    pub max_len: usize,
    pub stop_tokens: Vec<String>,
    pub failure: FailurePolicy,
    pub log_top: usize,
    pub parallel: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            k: EnsembleSpec::DEFAULT_K,
            n: EnsembleSpec::N_GENERATION,
            filter: true,
            max_len: 256,
            stop_tokens: vec!["</s>".into()],
            failure: FailurePolicy::DropForStep,
            log_top: 40,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub prompts: Vec<String>,
    /// One prompt per line, appended after `prompts`.
    pub prompt_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub n_values: Vec<usize>,
    pub edges: Vec<f64>,
    pub csv: bool,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            n_values: crate::analysis::DEFAULT_N_VALUES.to_vec(),
            edges: crate::analysis::DEFAULT_EDGES.to_vec(),
            csv: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub work_dir: PathBuf,
    pub transforms: Option<PathBuf>,
    pub mappings: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub stats: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            work_dir: PathBuf::from("lexalign-out"),
            transforms: None,
            mappings: None,
            trace: None,
            stats: None,
        }
    }
}

impl SessionConfig {
    /// Reads a config file and applies overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self> {
        SessionConfig::load_with_env(path, std::env::vars())
    }

    pub fn load_with_env(path: &Path, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        SessionConfig::parse(&text, &base, env).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: m,
            },
            other => other,
        })
    }

    pub fn parse(
        text: &str,
        base_dir: &Path,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        overrides.sort();
        for (key, value) in overrides {
            apply_override(&mut doc, &key[ENV_PREFIX.len()..], &value)?;
        }
        let mut cfg: SessionConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidArgument(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn work_dir(&self) -> PathBuf {
        self.resolve(&self.paths.work_dir)
    }

    pub fn transform_path(&self, model: &str) -> PathBuf {
        let dir = match &self.paths.transforms {
            Some(d) => self.resolve(d),
            None => self.work_dir().join("transforms"),
        };
        dir.join(format!("{model}.evat"))
    }

    pub fn mapping_path(&self, model: &str) -> PathBuf {
        let dir = match &self.paths.mappings {
            Some(d) => self.resolve(d),
            None => self.work_dir().join("mappings"),
        };
        dir.join(format!("{model}.evam"))
    }

    pub fn trace_path(&self) -> PathBuf {
        match &self.paths.trace {
            Some(p) => self.resolve(p),
            None => self.work_dir().join("trace.jsonl"),
        }
    }

    pub fn stats_path(&self) -> PathBuf {
        match &self.paths.stats {
            Some(p) => self.resolve(p),
            None => self.work_dir().join("stats.json"),
        }
    }

    pub fn model_format(&self, m: &ModelConfig) -> Result<EmbeddingFormat> {
        match &m.format {
            Some(f) => f.parse(),
            None => Ok(EmbeddingFormat::from_path(&m.embeddings)),
        }
    }

    /// Checks everything that can be checked without loading embeddings and
    /// reports every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.models.len() < 2 {
            p.push(format!("models: an ensemble needs at least 2 models, got {}", self.models.len()));
        }
        let mut names = HashSet::new();
        for (i, m) in self.models.iter().enumerate() {
            let field = |f: &str| format!("models[{i}].{f}");
            if m.name.is_empty() || m.name.contains(['/', '\\']) {
                p.push(format!("{}: {:?} is not a usable model name", field("name"), m.name));
            }
            if !names.insert(m.name.as_str()) {
                p.push(format!("{}: duplicate model name {:?}", field("name"), m.name));
            }
            let mut need = |f: &str, path: &Path| {
                let r = self.resolve(path);
                if !r.is_file() {
                    p.push(format!("{}: file not found: {}", field(f), r.display()));
                }
            };
            need("embeddings", &m.embeddings);
            if let Some(v) = &m.vocab {
                need("vocab", v);
            }
            match &m.client {
                ClientConfig::Replay { script } => need("client.script", script),
                ClientConfig::Ngram { corpus, order, .. } => {
                    need("client.corpus", corpus);
                    if *order < 1 {
                        p.push(format!("{}: must be >= 1", field("client.order")));
                    }
                }
                ClientConfig::Remote { url, top_k, .. } => {
                    if !(url.starts_with("http://") || url.starts_with("https://")) {
                        p.push(format!("{}: expected an http(s) URL, got {url:?}", field("client.url")));
                    }
                    if *top_k < 1 {
                        p.push(format!("{}: must be >= 1", field("client.top_k")));
                    }
                }
            }
            if let Some(f) = &m.format {
                if f.parse::<EmbeddingFormat>().is_err() {
                    p.push(format!("{}: unknown format {f:?}", field("format")));
                }
            }
        }
        if self.pivot != "auto" && !names.contains(self.pivot.as_str()) {
            p.push(format!("pivot: no model named {:?}", self.pivot));
        }
        if let Err(Error::Validation(v)) = self.noise.validate() {
            p.extend(v);
        }
        let t = &self.transform;
        if !t.reweight.is_finite() {
            p.push("transform.reweight must be finite".into());
        }
        if !(t.eigen_floor > 0.0) {
            p.push("transform.eigen_floor must be positive".into());
        }
        if self.similarity.k < 1 {
            p.push("similarity.k must be >= 1".into());
        }
        if self.similarity.block_size < 1 {
            p.push("similarity.block_size must be >= 1".into());
        }
        let e = &self.ensemble;
        if e.k < 1 {
            p.push("ensemble.k must be >= 1".into());
        }
        if e.n < 1 {
            p.push("ensemble.n must be >= 1".into());
        }
        if e.max_len < 1 {
            p.push("ensemble.max_len must be >= 1".into());
        }
        if let Some(f) = &self.decode.prompt_file {
            let r = self.resolve(f);
            if !r.is_file() {
                p.push(format!("decode.prompt_file: file not found: {}", r.display()));
            }
        }
        if self.stats.n_values.iter().any(|&n| n < 2) {
            p.push("stats.n_values must all be >= 2".into());
        }
        if self.stats.edges.len() < 2 || self.stats.edges.windows(2).any(|w| !(w[0] < w[1])) {
            p.push("stats.edges must be at least two strictly ascending values".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }

    /// All prompts: inline ones first, then the prompt file's non-empty lines.
    pub fn prompts(&self) -> Result<Vec<String>> {
        let mut out = self.decode.prompts.clone();
        if let Some(f) = &self.decode.prompt_file {
            let r = self.resolve(f);
            let text = std::fs::read_to_string(&r).map_err(|e| Error::io(&r, e))?;
            out.extend(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_owned));
        }
        Ok(out)
    }
}

/// `SECTION__KEY` sets `[section] key`; a bare `KEY` sets a top-level key.
/// Values parse as TOML literals when possible and as strings otherwise.
fn apply_override(doc: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let path: Vec<String> = key.split("__").map(|s| s.to_ascii_lowercase()).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::InvalidArgument(format!("malformed override {ENV_PREFIX}{key}")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    let (last, parents) = path.split_last().expect("non-empty");
    let mut table = doc;
    for seg in parents {
        let entry = table
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            Error::InvalidArgument(format!("override {ENV_PREFIX}{key}: {seg} is not a table"))
        })?;
    }
    table.insert(last.clone(), value);
    Ok(())
}
