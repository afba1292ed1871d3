//! End-to-end wiring: align, build-map, decode, stats.
//!
//! Every artifact records a digest of the inputs it was derived from. A stage
//! whose artifact already carries the current digest is skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{self, DiversityReport, MapExpectations, MapReport};
use crate::config::{ClientConfig, ModelConfig, SessionConfig};
use crate::embed_store::{load_embeddings, load_vocabulary, preprocess, EmbeddingSet, Vocabulary};
use crate::ensemble::{
    decode, read_trace, select_pivot, write_trace, DecodeState, EnsembleMember, EnsembleSpec,
    ModelClient, RemoteClient, ReplayClient, ToyNgramClient,
};
use crate::error::{Error, Result};
use crate::mapping::{build_mapping, load_mapping, save_mapping, ExpectedVocabs, NoiseConfig, SparseMapping};
use crate::overlap::build_overlap;
use crate::provenance::{combine, file_digest, to_hex, Digest32};
use crate::similarity::Csls;
use crate::transform::{
    apply_transform, learn_transform, load_transform, save_transform, LinearTransform, TransformConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Align,
    BuildMap,
    Decode,
    Stats,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Align, Stage::BuildMap, Stage::Decode, Stage::Stats];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Align => "align",
            Stage::BuildMap => "build-map",
            Stage::Decode => "decode",
            Stage::Stats => "stats",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactStatus {
    Built,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArtifactReport {
    pub stage: Stage,
    pub path: PathBuf,
    pub status: ArtifactStatus,
    pub inputs: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub pivot: String,
    pub artifacts: Vec<ArtifactReport>,
    pub warnings: Vec<String>,
}

impl PipelineReport {
    pub fn built(&self) -> usize {
        self.artifacts.iter().filter(|a| a.status == ArtifactStatus::Built).count()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    pub inputs: String,
    pub diversity: DiversityReport,
    pub mappings: BTreeMap<String, MapReport>,
}

/// Learns the transform from `source` into `target` space on their shared tokens.
pub fn align_pair(
    source: &EmbeddingSet,
    target: &EmbeddingSet,
    cfg: &TransformConfig,
) -> Result<(LinearTransform, Vec<String>)> {
    let ps = preprocess(source).set;
    let pt = preprocess(target).set;
    let dict = build_overlap(ps.vocab(), pt.vocab());
    let learned = learn_transform(&ps, &pt, &dict, cfg)?;
    for w in &learned.warnings {
        log::warn!("{w}");
    }
    Ok((learned.transform, learned.warnings))
}

/// Maps `source` through `t`, scores it against `target` with CSLS and reduces the rows.
pub fn map_pair(
    source: &EmbeddingSet,
    target: &EmbeddingSet,
    t: &LinearTransform,
    noise: &NoiseConfig,
    csls_k: usize,
    block_size: usize,
) -> Result<SparseMapping> {
    let ps = preprocess(source).set;
    let pt = preprocess(target).set;
    let mapped = apply_transform(&ps, t)?;
    let csls = Csls::with_block_size(&mapped, &pt, csls_k, block_size)?;
    let mut m = build_mapping(&csls, noise)?;
    m.set_vocab_digests(source.vocab().digest(), target.vocab().digest());
    Ok(m)
}

/// Loads a model's embeddings, re-indexed to its vocabulary file when one is given.
pub fn load_model_embeddings(cfg: &SessionConfig, m: &ModelConfig) -> Result<EmbeddingSet> {
    let path = cfg.resolve(&m.embeddings);
    let emb = load_embeddings(&path, cfg.model_format(m)?)?;
    let Some(vpath) = &m.vocab else {
        return Ok(emb);
    };
    let vocab = load_vocabulary(&cfg.resolve(vpath))?;
    let mut matrix = DMatrix::zeros(vocab.len(), emb.dim());
    let mut covered = 0;
    for (i, tok) in vocab.tokens().iter().enumerate() {
        if let Some(r) = emb.vocab().id(tok) {
            matrix.row_mut(i).copy_from(&emb.matrix().row(r as usize));
            covered += 1;
        }
    }
    if covered < emb.len() {
        log::warn!(
            "{}: {} embedded tokens are not in the vocabulary file and are ignored",
            m.name,
            emb.len() - covered
        );
    }
    EmbeddingSet::new(vocab, matrix)
}

pub fn build_client(
    cfg: &SessionConfig,
    m: &ModelConfig,
    vocab: Arc<Vocabulary>,
) -> Result<Arc<dyn ModelClient>> {
    Ok(match &m.client {
        ClientConfig::Replay { script } => {
            Arc::new(ReplayClient::from_jsonl(&cfg.resolve(script), Some(vocab))?)
        }
        ClientConfig::Ngram {
            corpus,
            order,
            granularity,
        } => {
            let path = cfg.resolve(corpus);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
            Arc::new(ToyNgramClient::train_with_vocab(&lines, *order, *granularity, vocab)?)
        }
        ClientConfig::Remote {
            url,
            top_k,
            timeout_ms,
        } => Arc::new(RemoteClient::new(
            m.name.clone(),
            url,
            vocab,
            *top_k,
            Duration::from_millis(*timeout_ms),
        )?),
    })
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("config types serialize")
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("report types serialize");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

/// A validated session with its embeddings loaded and pivot resolved.
pub struct Session {
    pub cfg: SessionConfig,
    pub embeddings: Vec<EmbeddingSet>,
    pub pivot: usize,
    model_digests: Vec<Digest32>,
}

impl Session {
    pub fn open(cfg: SessionConfig) -> Result<Self> {
        cfg.validate()?;
        let embeddings = cfg
            .models
            .iter()
            .map(|m| load_model_embeddings(&cfg, m))
            .collect::<Result<Vec<_>>>()?;
        let mut problems = Vec::new();
        let dim = embeddings[0].dim();
        for (m, e) in cfg.models.iter().zip(&embeddings) {
            if e.dim() != dim {
                problems.push(format!("{}: embedding dimension {} differs from {dim}", m.name, e.dim()));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        let pivot = if cfg.pivot == "auto" {
            let sizes: Vec<(&str, usize)> =
                cfg.models.iter().zip(&embeddings).map(|(m, e)| (m.name.as_str(), e.len())).collect();
            select_pivot(&sizes).expect("at least two models")
        } else {
            cfg.models.iter().position(|m| m.name == cfg.pivot).expect("validated")
        };
        let model_digests = cfg
            .models
            .iter()
            .zip(&embeddings)
            .map(|(m, e)| {
                let emb = file_digest(&cfg.resolve(&m.embeddings))?;
                Ok(combine([
                    ("name", m.name.as_bytes()),
                    ("embeddings", emb.as_slice()),
                    ("vocab", e.vocab().digest().as_slice()),
                ]))
            })
            .collect::<Result<Vec<_>>>()?;
        log::info!("pivot model: {}", cfg.models[pivot].name);
        Ok(Session {
            cfg,
            embeddings,
            pivot,
            model_digests,
        })
    }

    pub fn pivot_name(&self) -> &str {
        &self.cfg.models[self.pivot].name
    }

    fn others(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.cfg.models.len()).filter(move |&l| l != self.pivot)
    }

    fn align_inputs(&self, l: usize) -> Digest32 {
        combine([
            ("source", self.model_digests[l].as_slice()),
            ("target", self.model_digests[self.pivot].as_slice()),
            ("transform", &json(&self.cfg.transform)),
        ])
    }

    fn map_inputs(&self, l: usize, transform_file: &Digest32) -> Digest32 {
        combine([
            ("align", self.align_inputs(l).as_slice()),
            ("transform-file", transform_file.as_slice()),
            ("noise", &json(&self.cfg.noise)),
            ("csls-k", &(self.cfg.similarity.k as u64).to_le_bytes()),
        ])
    }

    fn stage_align(&self, report: &mut PipelineReport) -> Result<()> {
        let target = &self.embeddings[self.pivot];
        for l in self.others() {
            let name = &self.cfg.models[l].name;
            let path = self.cfg.transform_path(name);
            let inputs = self.align_inputs(l);
            let cached = load_transform(&path).map(|t| t.meta.inputs == inputs).unwrap_or(false);
            let status = if cached {
                log::info!("align {name}: cache hit");
                ArtifactStatus::Cached
            } else {
                log::info!("align {name} -> {}", self.pivot_name());
                let (mut t, warnings) = align_pair(&self.embeddings[l], target, &self.cfg.transform)?;
                report.warnings.extend(warnings.into_iter().map(|w| format!("{name}: {w}")));
                t.meta.inputs = inputs;
                ensure_parent(&path)?;
                save_transform(&t, &path)?;
                ArtifactStatus::Built
            };
            report.artifacts.push(ArtifactReport {
                stage: Stage::Align,
                path,
                status,
                inputs: to_hex(&inputs),
            });
        }
        Ok(())
    }

    fn stage_build_map(&self, report: &mut PipelineReport) -> Result<()> {
        let target = &self.embeddings[self.pivot];
        for l in self.others() {
            let name = &self.cfg.models[l].name;
            let tpath = self.cfg.transform_path(name);
            let transform = load_transform(&tpath)?;
            if transform.meta.inputs != self.align_inputs(l) {
                return Err(Error::ProvenanceMismatch(format!(
                    "{} is stale; rerun the align stage",
                    tpath.display()
                )));
            }
            let inputs = self.map_inputs(l, &file_digest(&tpath)?);
            let path = self.cfg.mapping_path(name);
            let cached = load_mapping(&path, None, false)
                .map(|m| m.provenance.inputs == inputs)
                .unwrap_or(false);
            let status = if cached {
                log::info!("build-map {name}: cache hit");
                ArtifactStatus::Cached
            } else {
                log::info!("build-map {name} -> {}", self.pivot_name());
                let mut m = map_pair(
                    &self.embeddings[l],
                    target,
                    &transform,
                    &self.cfg.noise,
                    self.cfg.similarity.k,
                    self.cfg.similarity.block_size,
                )?;
                m.provenance.inputs = inputs;
                ensure_parent(&path)?;
                save_mapping(&m, &path)?;
                ArtifactStatus::Built
            };
            report.artifacts.push(ArtifactReport {
                stage: Stage::BuildMap,
                path,
                status,
                inputs: to_hex(&inputs),
            });
        }
        Ok(())
    }

    /// Loads every non-pivot mapping, checking it against the current vocabularies.
    pub fn load_mappings(&self) -> Result<BTreeMap<usize, (Arc<SparseMapping>, Digest32)>> {
        let pivot_digest = self.embeddings[self.pivot].vocab().digest();
        self.others()
            .map(|l| {
                let path = self.cfg.mapping_path(&self.cfg.models[l].name);
                let expected = ExpectedVocabs {
                    source: self.embeddings[l].vocab().digest(),
                    target: pivot_digest,
                };
                let m = load_mapping(&path, Some(expected), false)?;
                Ok((l, (Arc::new(m), file_digest(&path)?)))
            })
            .collect()
    }

    /// Builds the ensemble from the config and the mappings on disk.
    pub fn ensemble(&self) -> Result<(EnsembleSpec, Digest32)> {
        let mappings = self.load_mappings()?;
        let mut parts: Vec<(String, Vec<u8>)> = vec![
            ("pivot".into(), self.pivot_name().as_bytes().to_vec()),
            ("ensemble".into(), json(&self.cfg.ensemble)),
        ];
        let mut members = Vec::new();
        for (l, m) in self.cfg.models.iter().enumerate() {
            let client = build_client(&self.cfg, m, self.embeddings[l].shared_vocab())?;
            parts.push((format!("client:{}", m.name), json(&m.client)));
            parts.push((format!("model:{}", m.name), self.model_digests[l].to_vec()));
            let resource = match &m.client {
                ClientConfig::Replay { script } => Some(script),
                ClientConfig::Ngram { corpus, .. } => Some(corpus),
                ClientConfig::Remote { .. } => None,
            };
            if let Some(r) = resource {
                parts.push((format!("resource:{}", m.name), file_digest(&self.cfg.resolve(r))?.to_vec()));
            }
            let mapping = mappings.get(&l).map(|(w, d)| {
                parts.push((format!("mapping:{}", m.name), d.to_vec()));
                Arc::clone(w)
            });
            members.push(EnsembleMember {
                name: m.name.clone(),
                client,
                mapping,
            });
        }
        let e = &self.cfg.ensemble;
        let mut spec = EnsembleSpec::new(members, self.pivot, &e.stop_tokens)?;
        spec.k_trunc = e.k;
        spec.n_filter = e.filter.then_some(e.n);
        spec.max_len = e.max_len;
        spec.failure = e.failure;
        spec.log_top = e.log_top;
        spec.parallel = e.parallel;
        let digest = combine(parts.iter().map(|(k, v)| (k.as_str(), v.as_slice())));
        Ok((spec, digest))
    }

    fn stage_decode(&self, report: &mut PipelineReport) -> Result<()> {
        let prompts = self.cfg.prompts()?;
        if prompts.is_empty() {
            return Err(Error::InvalidArgument("decode: no prompts configured".into()));
        }
        let (spec, ens_digest) = self.ensemble()?;
        let inputs = combine([("ensemble", ens_digest.as_slice()), ("prompts", &json(&prompts))]);
        let path = self.cfg.trace_path();
        let hex = to_hex(&inputs);
        let cached = trace_header(&path).is_some_and(|h| h == hex);
        let status = if cached {
            log::info!("decode: cache hit");
            ArtifactStatus::Cached
        } else {
            let states = decode_all(&spec, &prompts)?;
            ensure_parent(&path)?;
            write_trace(&path, &hex, &states)?;
            ArtifactStatus::Built
        };
        report.artifacts.push(ArtifactReport {
            stage: Stage::Decode,
            path,
            status,
            inputs: hex,
        });
        Ok(())
    }

    fn stage_stats(&self, report: &mut PipelineReport) -> Result<()> {
        let trace = self.cfg.trace_path();
        let mappings = self.load_mappings()?;
        let mut parts: Vec<(String, Vec<u8>)> = vec![
            ("trace".into(), file_digest(&trace)?.to_vec()),
            ("stats".into(), json(&self.cfg.stats)),
        ];
        for (l, (_, d)) in &mappings {
            parts.push((format!("mapping:{}", self.cfg.models[*l].name), d.to_vec()));
        }
        let inputs = to_hex(&combine(parts.iter().map(|(k, v)| (k.as_str(), v.as_slice()))));
        let path = self.cfg.stats_path();
        let cached = std::fs::read_to_string(&path)
            .ok()
            .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
            .is_some_and(|v| v["inputs"] == inputs.as_str());
        let status = if cached {
            log::info!("stats: cache hit");
            ArtifactStatus::Cached
        } else {
            let (_, states) = read_trace(&trace)?;
            let pivot_digest = self.embeddings[self.pivot].vocab().digest();
            let mut reports = BTreeMap::new();
            for (l, (m, _)) in &mappings {
                let expect = MapExpectations {
                    source_vocab: Some(self.embeddings[*l].vocab().digest()),
                    target_vocab: Some(pivot_digest),
                    noise: Some(self.cfg.noise),
                };
                let r = analysis::map_report(m, &self.cfg.stats.edges, &expect)?;
                reports.insert(self.cfg.models[*l].name.clone(), r);
            }
            let stats = StatsReport {
                inputs: inputs.clone(),
                diversity: analysis::diversity(&states, &self.cfg.stats.n_values)?,
                mappings: reports,
            };
            ensure_parent(&path)?;
            if self.cfg.stats.csv {
                let csv = path.with_extension("csv");
                std::fs::write(&csv, analysis::diversity_csv(&stats.diversity))
                    .map_err(|e| Error::io(&csv, e))?;
            }
            write_json(&path, &stats)?;
            ArtifactStatus::Built
        };
        report.artifacts.push(ArtifactReport {
            stage: Stage::Stats,
            path,
            status,
            inputs,
        });
        Ok(())
    }

    /// Runs the requested stages in dependency order. Stages that are not
    /// requested are not run; their artifacts must already exist.
    pub fn run(&self, stages: &[Stage]) -> Result<PipelineReport> {
        let mut report = PipelineReport {
            pivot: self.pivot_name().to_owned(),
            artifacts: Vec::new(),
            warnings: Vec::new(),
        };
        let mut stages = stages.to_vec();
        stages.sort();
        stages.dedup();
        for st in stages {
            let r = match st {
                Stage::Align => self.stage_align(&mut report),
                Stage::BuildMap => self.stage_build_map(&mut report),
                Stage::Decode => self.stage_decode(&mut report),
                Stage::Stats => self.stage_stats(&mut report),
            };
            r.map_err(|e| Error::Stage {
                stage: st.name().into(),
                source: Box::new(e),
            })?;
        }
        Ok(report)
    }
}

/// Decodes every prompt; prompts run in parallel, each on its own state.
pub fn decode_all(spec: &EnsembleSpec, prompts: &[String]) -> Result<Vec<DecodeState>> {
    prompts
        .par_iter()
        .map(|p| decode(spec, p).map(|(_, st)| st))
        .collect()
}

fn trace_header(path: &Path) -> Option<String> {
    use std::io::BufRead;
    let file = std::fs::File::open(path).ok()?;
    let mut line = String::new();
    std::io::BufReader::new(file).read_line(&mut line).ok()?;
    let v: serde_json::Value = serde_json::from_str(&line).ok()?;
    (v["kind"] == "header").then(|| v["inputs"].as_str().map(str::to_owned))?
}

/// Validates, loads and runs. Validation and load failures are not wrapped
/// in a stage error.
pub fn run_pipeline(cfg: SessionConfig, stages: &[Stage]) -> Result<PipelineReport> {
    Session::open(cfg)?.run(stages)
}

