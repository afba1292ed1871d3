//! Supervision dictionaries built from tokens two vocabularies share verbatim.

use serde::Serialize;

use crate::embed_store::Vocabulary;

/// Sentencepiece word-boundary marker.
pub const WORD_BOUNDARY: char = '\u{2581}';

/// One-to-one pairs `(source id, target id)` of identical surface strings,
/// sorted by source id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OverlapDictionary {
    pub pairs: Vec<(u32, u32)>,
    pub source_size: usize,
    pub target_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelativeTo {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapOptions {
    /// Treat U+2581 as a plain space on both sides before matching.
    pub boundary_as_space: bool,
}

pub fn build_overlap(source: &Vocabulary, target: &Vocabulary) -> OverlapDictionary {
    build_overlap_with(source, target, OverlapOptions::default())
}

pub fn build_overlap_with(
    source: &Vocabulary,
    target: &Vocabulary,
    opts: OverlapOptions,
) -> OverlapDictionary {
    let pairs = if opts.boundary_as_space {
        let key = |t: &str| t.replace(WORD_BOUNDARY, " ");
        let mut target_index = std::collections::HashMap::with_capacity(target.len());
        for (j, t) in target.tokens().iter().enumerate() {
            // first occurrence wins if the replacement collapses two tokens
            target_index.entry(key(t)).or_insert(j as u32);
        }
        let mut used = vec![false; target.len()];
        let mut pairs = Vec::new();
        for (i, t) in source.tokens().iter().enumerate() {
            if let Some(&j) = target_index.get(&key(t)) {
                if !used[j as usize] {
                    used[j as usize] = true;
                    pairs.push((i as u32, j));
                }
            }
        }
        pairs
    } else {
        source
            .tokens()
            .iter()
            .enumerate()
            .filter_map(|(i, t)| target.id(t).map(|j| (i as u32, j)))
            .collect()
    };
    OverlapDictionary {
        pairs,
        source_size: source.len(),
        target_size: target.len(),
    }
}

impl OverlapDictionary {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn rate(&self, relative_to: RelativeTo) -> f64 {
        let denom = match relative_to {
            RelativeTo::Source => self.source_size,
            RelativeTo::Target => self.target_size,
        };
        if denom == 0 {
            0.0
        } else {
            self.pairs.len() as f64 / denom as f64
        }
    }

    /// The same dictionary seen from the other side, sorted by the new source id.
    pub fn transposed(&self) -> OverlapDictionary {
        let mut pairs: Vec<(u32, u32)> = self.pairs.iter().map(|&(i, j)| (j, i)).collect();
        pairs.sort_unstable();
        OverlapDictionary {
            pairs,
            source_size: self.target_size,
            target_size: self.source_size,
        }
    }

    /// Splits off pairs for training and evaluation; the first `n` go to training.
    pub fn split_at(&self, n: usize) -> (OverlapDictionary, OverlapDictionary) {
        let n = n.min(self.pairs.len());
        let mk = |pairs: Vec<(u32, u32)>| OverlapDictionary {
            pairs,
            source_size: self.source_size,
            target_size: self.target_size,
        };
        (mk(self.pairs[..n].to_vec()), mk(self.pairs[n..].to_vec()))
    }

    pub fn report(&self) -> OverlapReport {
        OverlapReport {
            pairs: self.pairs.len(),
            rate_source: self.rate(RelativeTo::Source),
            rate_target: self.rate(RelativeTo::Target),
        }
    }
}

/// JSON body of `inspect-overlap`.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct OverlapReport {
    pub pairs: usize,
    pub rate_source: f64,
    pub rate_target: f64,
}
