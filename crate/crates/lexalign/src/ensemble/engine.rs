use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{filter_models, fuse, project, topk_truncate, Space, TokenDistribution};
use crate::embed_store::Vocabulary;
use crate::error::{Error, Result};
use crate::mapping::SparseMapping;

/// A generative model seen through its next-token distribution.
///
/// Implementations receive the shared surface-text prefix and tokenize it
/// themselves. They must tolerate concurrent calls on distinct prefixes.
pub trait ModelClient: Send + Sync {
    fn vocabulary(&self) -> &Vocabulary;

    /// Distribution over this client's own vocabulary. `step` is the
    /// zero-based index of the token being generated.
    fn next_distribution(&self, prefix: &str, step: usize) -> Result<TokenDistribution>;

    fn detokenize(&self, ids: &[u32]) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailurePolicy {
    /// Leave the failing model out of the current step and carry on.
    #[default]
    DropForStep,
    Abort,
}

#[derive(Clone)]
pub struct EnsembleMember {
    pub name: String,
    pub client: Arc<dyn ModelClient>,
    /// Projection into the pivot vocabulary. Ignored for the pivot itself.
    pub mapping: Option<Arc<SparseMapping>>,
}

impl std::fmt::Debug for EnsembleMember {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnsembleMember")
            .field("name", &self.name)
            .field("vocab", &self.client.vocabulary().len())
            .field("mapping", &self.mapping.as_ref().map(|m| (m.rows(), m.cols())))
            .finish()
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleSpec {
    members: Vec<EnsembleMember>,
    pivot: usize,
    stop_ids: Vec<u32>,
    /// Top-k applied to every native distribution.
    pub k_trunc: usize,
    /// Filter width; `None` averages every model.
    pub n_filter: Option<usize>,
    pub max_len: usize,
    pub failure: FailurePolicy,
    /// Length of the per-model top lists written to the step log.
    pub log_top: usize,
    pub parallel: bool,
}

impl EnsembleSpec {
    pub const DEFAULT_K: usize = 320;
    pub const N_GENERATION: usize = 40;
    pub const N_REASONING: usize = 3;

    pub fn new(members: Vec<EnsembleMember>, pivot: usize, stop_tokens: &[String]) -> Result<Self> {
        let mut problems = Vec::new();
        if members.len() < 2 {
            problems.push(format!("an ensemble needs at least 2 models, got {}", members.len()));
        }
        if pivot >= members.len() {
            problems.push(format!("pivot index {pivot} out of range"));
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        let pivot_vocab = members[pivot].client.vocabulary();
        for (l, m) in members.iter().enumerate() {
            if l == pivot {
                continue;
            }
            match &m.mapping {
                None => problems.push(format!("model {} has no mapping into the pivot", m.name)),
                Some(w) => {
                    if w.rows() != m.client.vocabulary().len() {
                        problems.push(format!(
                            "mapping of {} has {} rows, vocabulary has {}",
                            m.name,
                            w.rows(),
                            m.client.vocabulary().len()
                        ));
                    }
                    if w.cols() != pivot_vocab.len() {
                        problems.push(format!(
                            "mapping of {} has {} columns, pivot vocabulary has {}",
                            m.name,
                            w.cols(),
                            pivot_vocab.len()
                        ));
                    }
                }
            }
        }
        let mut names: Vec<&str> = members.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            problems.push("model names must be unique".into());
        }
        let mut stop_ids = Vec::new();
        for s in stop_tokens {
            match pivot_vocab.id(s) {
                Some(id) => stop_ids.push(id),
                None => problems.push(format!("stop token {s:?} is not in the pivot vocabulary")),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(EnsembleSpec {
            members,
            pivot,
            stop_ids,
            k_trunc: Self::DEFAULT_K,
            n_filter: Some(Self::N_GENERATION),
            max_len: 256,
            failure: FailurePolicy::DropForStep,
            log_top: 40,
            parallel: true,
        })
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn pivot(&self) -> usize {
        self.pivot
    }

    pub fn pivot_vocab(&self) -> &Vocabulary {
        self.members[self.pivot].client.vocabulary()
    }

    pub fn is_stop(&self, id: u32) -> bool {
        self.stop_ids.contains(&id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinishReason {
    Stop,
    MaxLen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub id: u32,
    pub token: String,
    pub prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelStatus {
    Ok,
    Failed,
    ZeroMass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub name: String,
    pub status: ModelStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// After top-k truncation, in the model's own vocabulary.
    pub native_top: Vec<TopEntry>,
    pub pivot_top: Vec<TopEntry>,
    /// Filter verdict; false for models that produced nothing usable.
    pub verdict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub models: Vec<ModelRecord>,
    /// Every model was filtered out and the pivot distribution was used.
    pub fallback: bool,
    pub token: u32,
    pub token_text: String,
    pub stop: bool,
    pub fused_top: Vec<TopEntry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodeState {
    pub prompt: String,
    /// Prompt plus everything generated so far.
    pub text: String,
    pub tokens: Vec<u32>,
    pub step_log: Vec<StepRecord>,
    pub finished: Option<FinishReason>,
}

impl DecodeState {
    pub fn new(prompt: &str) -> Self {
        DecodeState {
            prompt: prompt.to_owned(),
            text: prompt.to_owned(),
            ..Default::default()
        }
    }

    /// Generated text without the prompt.
    pub fn generated(&self) -> &str {
        &self.text[self.prompt.len()..]
    }
}

fn top_entries(d: &TokenDistribution, vocab: &Vocabulary, n: usize) -> Vec<TopEntry> {
    d.top_n(n)
        .into_iter()
        .map(|(id, prob)| TopEntry {
            id,
            token: vocab.token(id).unwrap_or_default().to_owned(),
            prob,
        })
        .collect()
}

enum Outcome {
    Ready {
        native: TokenDistribution,
        pivot: TokenDistribution,
    },
    ZeroMass(TokenDistribution),
    Failed(String),
}

fn query(spec: &EnsembleSpec, l: usize, prefix: &str, step: usize) -> Outcome {
    let m = &spec.members[l];
    let raw = match m.client.next_distribution(prefix, step) {
        Ok(d) => d,
        Err(e) => return Outcome::Failed(e.to_string()),
    };
    if raw.dim() != m.client.vocabulary().len() {
        return Outcome::Failed(format!(
            "distribution over {} tokens, vocabulary has {}",
            raw.dim(),
            m.client.vocabulary().len()
        ));
    }
    let native = match topk_truncate(&raw, spec.k_trunc) {
        Ok(d) => d,
        Err(e) => return Outcome::Failed(e.to_string()),
    };
    if l == spec.pivot {
        let mut pivot = native.clone();
        pivot.space = Space::Pivot;
        return Outcome::Ready { native, pivot };
    }
    let mapping = m.mapping.as_ref().expect("validated in EnsembleSpec::new");
    match project(&native, mapping) {
        Ok(pivot) => Outcome::Ready { native, pivot },
        Err(Error::ZeroMass) => Outcome::ZeroMass(native),
        Err(e) => Outcome::Failed(e.to_string()),
    }
}

/// One ensemble step: query, truncate, project, filter, fuse, pick.
pub fn decode_step(spec: &EnsembleSpec, state: &mut DecodeState) -> Result<u32> {
    if state.finished.is_some() {
        return Err(Error::InvalidArgument("decode state already finished".into()));
    }
    let step = state.tokens.len();
    let n_models = spec.members.len();
    let outcomes: Vec<Outcome> = if spec.parallel {
        let prefix = state.text.as_str();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..n_models)
                .map(|l| s.spawn(move || query(spec, l, prefix, step)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Outcome::Failed("client panicked".into()))
                })
                .collect()
        })
    } else {
        (0..n_models).map(|l| query(spec, l, &state.text, step)).collect()
    };

    let mut records = Vec::with_capacity(n_models);
    let mut available: Vec<(usize, TokenDistribution)> = Vec::new();
    for (l, outcome) in outcomes.into_iter().enumerate() {
        let m = &spec.members[l];
        let vocab = m.client.vocabulary();
        let rec = |status, error, native: Option<&TokenDistribution>| ModelRecord {
            name: m.name.clone(),
            status,
            error,
            native_top: native
                .map(|d| top_entries(d, vocab, spec.log_top))
                .unwrap_or_default(),
            pivot_top: Vec::new(),
            verdict: false,
        };
        match outcome {
            Outcome::Ready { native, pivot } => {
                let mut r = rec(ModelStatus::Ok, None, Some(&native));
                r.pivot_top = top_entries(&pivot, spec.pivot_vocab(), spec.log_top);
                records.push(r);
                available.push((l, pivot));
            }
            Outcome::ZeroMass(native) => {
                log::debug!("step {step}: {} has no mapped mass", m.name);
                records.push(rec(ModelStatus::ZeroMass, None, Some(&native)));
            }
            Outcome::Failed(msg) => {
                if spec.failure == FailurePolicy::Abort {
                    return Err(Error::Client {
                        model: m.name.clone(),
                        message: msg,
                    });
                }
                log::warn!("step {step}: dropping {} for this step: {msg}", m.name);
                records.push(rec(ModelStatus::Failed, Some(msg), None));
            }
        }
    }
    if available.is_empty() {
        return Err(Error::Client {
            model: "*".into(),
            message: format!("no model produced a usable distribution at step {step}"),
        });
    }

    let dists: Vec<TokenDistribution> = available.iter().map(|a| a.1.clone()).collect();
    let verdicts = match spec.n_filter {
        Some(n) if dists.len() >= 2 => filter_models(&dists, n),
        _ => vec![true; dists.len()],
    };
    for ((l, _), v) in available.iter().zip(&verdicts) {
        records[*l].verdict = *v;
    }
    // without the pivot, an all-filtered step falls back to the plain average
    let fused = match available.iter().position(|a| a.0 == spec.pivot) {
        Some(pivot_pos) => fuse(&dists, &verdicts, pivot_pos)?,
        None if verdicts.iter().any(|v| *v) => fuse(&dists, &verdicts, 0)?,
        None => {
            let mut f = fuse(&dists, &vec![true; dists.len()], 0)?;
            f.fallback = true;
            f
        }
    };
    if fused.fallback {
        log::warn!("step {step}: every model was filtered out; using the fallback distribution");
    }

    let token = fused.dist.argmax().ok_or(Error::ZeroMass)?;
    let stop = spec.is_stop(token);
    let pivot_client = &spec.members[spec.pivot].client;
    let token_text = if stop {
        String::new()
    } else {
        pivot_client.detokenize(&[token])
    };
    state.step_log.push(StepRecord {
        step,
        models: records,
        fallback: fused.fallback,
        token,
        token_text: token_text.clone(),
        stop,
        fused_top: top_entries(&fused.dist, spec.pivot_vocab(), spec.log_top),
    });
    state.tokens.push(token);
    if stop {
        state.finished = Some(FinishReason::Stop);
    } else {
        state.text.push_str(&token_text);
        if state.tokens.len() >= spec.max_len {
            state.finished = Some(FinishReason::MaxLen);
        }
    }
    Ok(token)
}

/// Greedy ensemble decoding until a stop token or `max_len` tokens.
pub fn decode(spec: &EnsembleSpec, prompt: &str) -> Result<(String, DecodeState)> {
    let mut state = DecodeState::new(prompt);
    if spec.max_len == 0 {
        state.finished = Some(FinishReason::MaxLen);
    }
    while state.finished.is_none() {
        decode_step(spec, &mut state)?;
    }
    Ok((state.generated().to_owned(), state))
}

/// One line of a decode trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TraceLine {
    Header {
        inputs: String,
        decodes: usize,
    },
    Step {
        decode: usize,
        #[serde(flatten)]
        record: StepRecord,
    },
    Done {
        decode: usize,
        prompt: String,
        text: String,
        finish: Option<FinishReason>,
    },
}

pub fn write_trace(path: &Path, inputs: &str, states: &[DecodeState]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |line: &TraceLine| -> Result<()> {
        let s = serde_json::to_string(line)
            .map_err(|e| Error::InvalidArgument(format!("trace serialization: {e}")))?;
        writeln!(w, "{s}").map_err(|e| Error::io(path, e))
    };
    emit(&TraceLine::Header {
        inputs: inputs.to_owned(),
        decodes: states.len(),
    })?;
    for (d, st) in states.iter().enumerate() {
        for rec in &st.step_log {
            emit(&TraceLine::Step {
                decode: d,
                record: rec.clone(),
            })?;
        }
        emit(&TraceLine::Done {
            decode: d,
            prompt: st.prompt.clone(),
            text: st.generated().to_owned(),
            finish: st.finished,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a trace back into per-decode states plus the header's input digest.
pub fn read_trace(path: &Path) -> Result<(Option<String>, Vec<DecodeState>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = None;
    let mut states: Vec<DecodeState> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        match parsed {
            TraceLine::Header { inputs, .. } => header = Some(inputs),
            TraceLine::Step { decode, record } => {
                if states.len() <= decode {
                    states.resize_with(decode + 1, DecodeState::default);
                }
                states[decode].tokens.push(record.token);
                states[decode].step_log.push(record);
            }
            TraceLine::Done {
                decode,
                prompt,
                text,
                finish,
            } => {
                if states.len() <= decode {
                    states.resize_with(decode + 1, DecodeState::default);
                }
                let st = &mut states[decode];
                st.text = format!("{prompt}{text}");
                st.prompt = prompt;
                st.finished = finish;
            }
        }
    }
    Ok((header, states))
}
