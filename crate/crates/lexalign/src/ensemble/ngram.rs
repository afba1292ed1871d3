use std::collections::HashMap;
use std::sync::Arc;

use super::{ModelClient, Space, TokenDistribution};
use crate::embed_store::Vocabulary;
use crate::error::{Error, Result};

pub const STOP_TOKEN: &str = "</s>";

const BOS: u32 = u32::MAX;
const UNK: u32 = u32::MAX - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Char,
    Word,
}

/// Count-based n-gram model with add-one smoothing over its own vocabulary.
///
/// Word tokens detokenize with a leading space; char tokens concatenate.
/// Every training line ends with [`STOP_TOKEN`].
#[derive(Debug, Clone)]
pub struct ToyNgramClient {
    vocab: Arc<Vocabulary>,
    order: usize,
    granularity: Granularity,
    stop: u32,
    counts: HashMap<Vec<u32>, (u64, HashMap<u32, u64>)>,
}

impl ToyNgramClient {
    /// Trains on `corpus`; the vocabulary is the stop token followed by every
    /// corpus token in order of first appearance.
    pub fn train<S: AsRef<str>>(corpus: &[S], order: usize, granularity: Granularity) -> Result<Self> {
        let mut tokens = vec![STOP_TOKEN.to_string()];
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for line in corpus {
            for t in split(line.as_ref(), granularity) {
                if seen.insert(t.to_string()) {
                    tokens.push(t.to_string());
                }
            }
        }
        let vocab = Arc::new(Vocabulary::new(tokens)?);
        ToyNgramClient::train_with_vocab(corpus, order, granularity, vocab)
    }

    /// Trains against a fixed vocabulary, which must contain [`STOP_TOKEN`].
    /// Out-of-vocabulary corpus tokens act as context only.
    pub fn train_with_vocab<S: AsRef<str>>(
        corpus: &[S],
        order: usize,
        granularity: Granularity,
        vocab: Arc<Vocabulary>,
    ) -> Result<Self> {
        if order < 1 {
            return Err(Error::InvalidArgument("n-gram order must be >= 1".into()));
        }
        let stop = vocab.id(STOP_TOKEN).ok_or_else(|| {
            Error::InvalidArgument(format!("vocabulary lacks the stop token {STOP_TOKEN}"))
        })?;
        let mut client = ToyNgramClient {
            vocab,
            order,
            granularity,
            stop,
            counts: HashMap::new(),
        };
        for line in corpus {
            let mut ids = client.encode(line.as_ref());
            ids.push(stop);
            for pos in 0..ids.len() {
                let next = ids[pos];
                if next == UNK {
                    continue;
                }
                let ctx = client.context(&ids[..pos]);
                let entry = client.counts.entry(ctx).or_default();
                entry.0 += 1;
                *entry.1.entry(next).or_default() += 1;
            }
        }
        Ok(client)
    }

    pub fn shared_vocab(&self) -> Arc<Vocabulary> {
        Arc::clone(&self.vocab)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        split(text, self.granularity)
            .map(|t| self.vocab.id(t).unwrap_or(UNK))
            .collect()
    }

    fn context(&self, history: &[u32]) -> Vec<u32> {
        let want = self.order - 1;
        let mut ctx = vec![BOS; want.saturating_sub(history.len())];
        ctx.extend_from_slice(&history[history.len().saturating_sub(want)..]);
        ctx
    }
}

fn split(text: &str, g: Granularity) -> Box<dyn Iterator<Item = &str> + '_> {
    match g {
        Granularity::Word => Box::new(text.split_whitespace()),
        Granularity::Char => Box::new(text.char_indices().map(move |(i, c)| &text[i..i + c.len_utf8()])),
    }
}

impl ModelClient for ToyNgramClient {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_distribution(&self, prefix: &str, _step: usize) -> Result<TokenDistribution> {
        let ids = self.encode(prefix);
        let ctx = self.context(&ids);
        let v = self.vocab.len() as f64;
        let (total, next) = match self.counts.get(&ctx) {
            Some((t, n)) => (*t as f64, Some(n)),
            None => (0.0, None),
        };
        let denom = total + v;
        let probs: Vec<f64> = (0..self.vocab.len() as u32)
            .map(|id| {
                let c = next.and_then(|n| n.get(&id)).copied().unwrap_or(0) as f64;
                (c + 1.0) / denom
            })
            .collect();
        TokenDistribution::from_dense(Space::Native, &probs)
    }

    fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == self.stop {
                continue;
            }
            if let Some(t) = self.vocab.token(id) {
                if self.granularity == Granularity::Word {
                    out.push(' ');
                }
                out.push_str(t);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bigram_add_one() {
        let c = ToyNgramClient::train(&["the cat", "the cat", "the dog"], 2, Granularity::Word).unwrap();
        assert_eq!(c.vocabulary().tokens(), &[STOP_TOKEN, "the", "cat", "dog"]);
        let d = c.next_distribution("the", 0).unwrap();
        // counts after "the": cat 2, dog 1; |V| = 4
        assert!((d.get(2) - 3.0 / 7.0).abs() < 1e-12);
        assert!((d.get(3) - 2.0 / 7.0).abs() < 1e-12);
        assert!((d.get(0) - 1.0 / 7.0).abs() < 1e-12);
        assert!((d.sum() - 1.0).abs() < 1e-12);
        // unseen context is uniform
        let u = c.next_distribution("zebra", 0).unwrap();
        assert!(u.entries().iter().all(|e| (e.1 - 0.25).abs() < 1e-12));
        assert_eq!(c.detokenize(&[1, 2, 0]), " the cat");
    }

    #[test]
    fn char_model_is_deterministic() {
        let c = ToyNgramClient::train(&["abab", "abba"], 3, Granularity::Char).unwrap();
        let d1 = c.next_distribution("xab", 0).unwrap();
        let d2 = c.next_distribution("xab", 0).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(c.detokenize(&[1, 2]), "ab");
        // start of text: "a" begins both lines
        let start = c.next_distribution("", 0).unwrap();
        assert_eq!(c.vocabulary().token(start.argmax().unwrap()), Some("a"));
    }

    #[test]
    fn needs_stop_token() {
        let v = Arc::new(Vocabulary::new(["a", "b"]).unwrap());
        assert!(ToyNgramClient::train_with_vocab(&["a b"], 2, Granularity::Word, v).is_err());
    }
}
