use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;

use super::{ModelClient, Space, TokenDistribution};
use crate::embed_store::Vocabulary;
use crate::error::{Error, Result};
use crate::overlap::WORD_BOUNDARY;

#[derive(Debug, Deserialize)]
struct ReplayLine {
    step: usize,
    dist: Vec<(String, f64)>,
}

/// Returns pre-scripted distributions keyed by step, ignoring the prefix.
///
/// Script lines look like `{"step": 0, "dist": [["tok", 0.4], ...]}`.
#[derive(Debug, Clone)]
pub struct ReplayClient {
    vocab: Arc<Vocabulary>,
    steps: HashMap<usize, TokenDistribution>,
}

impl ReplayClient {
    /// Loads a script. Without a vocabulary, one is built from the script's
    /// tokens in order of first appearance.
    pub fn from_jsonl(path: &Path, vocab: Option<Arc<Vocabulary>>) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ReplayLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            lines.push((i + 1, parsed));
        }
        let script: Vec<(usize, Vec<(String, f64)>)> =
            lines.into_iter().map(|(_, l)| (l.step, l.dist)).collect();
        ReplayClient::from_script(script, vocab)
    }

    pub fn from_script(
        script: Vec<(usize, Vec<(String, f64)>)>,
        vocab: Option<Arc<Vocabulary>>,
    ) -> Result<Self> {
        let vocab = match vocab {
            Some(v) => v,
            None => {
                let mut seen = std::collections::HashSet::new();
                let mut tokens = Vec::new();
                for (_, dist) in &script {
                    for (tok, _) in dist {
                        if seen.insert(tok.clone()) {
                            tokens.push(tok.clone());
                        }
                    }
                }
                Arc::new(Vocabulary::new(tokens)?)
            }
        };
        let mut steps = HashMap::new();
        for (step, dist) in script {
            let mut entries = Vec::with_capacity(dist.len());
            for (tok, p) in dist {
                let id = vocab.id(&tok).ok_or_else(|| {
                    Error::InvalidArgument(format!("replay token {tok:?} not in vocabulary"))
                })?;
                entries.push((id, p));
            }
            let d = TokenDistribution::new(Space::Native, vocab.len(), entries)?;
            if steps.insert(step, d).is_some() {
                return Err(Error::InvalidArgument(format!("step {step} scripted twice")));
            }
        }
        Ok(ReplayClient { vocab, steps })
    }

    pub fn shared_vocab(&self) -> Arc<Vocabulary> {
        Arc::clone(&self.vocab)
    }
}

impl ModelClient for ReplayClient {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_distribution(&self, _prefix: &str, step: usize) -> Result<TokenDistribution> {
        self.steps
            .get(&step)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("replay script has no step {step}")))?
            .normalized()
    }

    fn detokenize(&self, ids: &[u32]) -> String {
        surface(&self.vocab, ids)
    }
}

/// Concatenates token strings, rendering the word-boundary marker as a space.
pub(crate) fn surface(vocab: &Vocabulary, ids: &[u32]) -> String {
    ids.iter()
        .filter_map(|&i| vocab.token(i))
        .collect::<String>()
        .replace(WORD_BOUNDARY, " ")
}
