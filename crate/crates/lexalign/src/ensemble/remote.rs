use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::replay::surface;
use super::{ModelClient, Space, TokenDistribution};
use crate::embed_store::Vocabulary;
use crate::error::{Error, Result};

#[derive(Serialize)]
struct Request<'a> {
    prefix: &'a str,
    top_k: usize,
}

#[derive(Deserialize)]
struct Response {
    tokens: Vec<String>,
    probs: Vec<f64>,
}

/// HTTP client for a next-token service.
///
/// Posts `{"prefix", "top_k"}` to `<base>/v1/next_dist` and expects
/// `{"tokens": [...], "probs": [...]}` back. Tokens missing from the local
/// vocabulary are dropped before renormalization.
pub struct RemoteClient {
    name: String,
    url: String,
    top_k: usize,
    vocab: Arc<Vocabulary>,
    agent: ureq::Agent,
}

impl RemoteClient {
    pub fn new(
        name: impl Into<String>,
        base_url: &str,
        vocab: Arc<Vocabulary>,
        top_k: usize,
        timeout: Duration,
    ) -> Result<Self> {
        if top_k == 0 {
            return Err(Error::InvalidArgument("remote top_k must be positive".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(RemoteClient {
            name: name.into(),
            url: format!("{}/v1/next_dist", base_url.trim_end_matches('/')),
            top_k,
            vocab,
            agent,
        })
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Client {
            model: self.name.clone(),
            message: message.into(),
        }
    }
}

impl ModelClient for RemoteClient {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_distribution(&self, prefix: &str, _step: usize) -> Result<TokenDistribution> {
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(Request {
                prefix,
                top_k: self.top_k,
            })
            .map_err(|e| self.fail(e.to_string()))?;
        let status = resp.status().as_u16();
        if status >= 400 {
            return Err(self.fail(format!("HTTP status {status}")));
        }
        let body: Response = resp
            .body_mut()
            .read_json()
            .map_err(|e| self.fail(format!("bad response body: {e}")))?;
        if body.tokens.len() != body.probs.len() {
            return Err(self.fail("tokens and probs differ in length"));
        }
        let entries: Vec<(u32, f64)> = body
            .tokens
            .iter()
            .zip(&body.probs)
            .filter_map(|(t, &p)| self.vocab.id(t).map(|id| (id, p)))
            .collect();
        TokenDistribution::new(Space::Native, self.vocab.len(), entries)
            .and_then(TokenDistribution::normalized)
            .map_err(|e| self.fail(e.to_string()))
    }

    fn detokenize(&self, ids: &[u32]) -> String {
        surface(&self.vocab, ids)
    }
}
