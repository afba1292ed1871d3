//! Token-level ensemble decoding across models with different vocabularies.
//!
//! At every step each model's next-token distribution is truncated to its
//! `k` most probable tokens, projected into the pivot vocabulary through a
//! [`SparseMapping`], and checked for consistency with the others: a model
//! whose top-1 token is absent from the top-`n` of every other model is
//! left out. The survivors are averaged and the argmax is emitted.

mod engine;
mod ngram;
mod remote;
mod replay;

pub use engine::{
    decode, decode_step, read_trace, write_trace, DecodeState, EnsembleMember, EnsembleSpec,
    FailurePolicy, FinishReason, ModelClient, ModelRecord, ModelStatus, StepRecord, TopEntry,
    TraceLine,
};
pub use ngram::{Granularity, ToyNgramClient, STOP_TOKEN};
pub use remote::RemoteClient;
pub use replay::ReplayClient;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapping::SparseMapping;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Native,
    Pivot,
}

/// Sparse probability vector over one vocabulary. Entries are sorted by id
/// and strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    pub space: Space,
    dim: usize,
    entries: Vec<(u32, f64)>,
}

impl TokenDistribution {
    /// Builds from `(id, mass)` pairs. Duplicate ids are summed; zeros dropped.
    pub fn new(space: Space, dim: usize, mut entries: Vec<(u32, f64)>) -> Result<Self> {
        for &(id, p) in &entries {
            if id as usize >= dim {
                return Err(Error::InvalidArgument(format!(
                    "token id {id} out of range for vocabulary of {dim}"
                )));
            }
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "invalid probability {p} for token {id}"
                )));
            }
        }
        entries.sort_by_key(|e| e.0);
        let mut merged: Vec<(u32, f64)> = Vec::with_capacity(entries.len());
        for (id, p) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == id => last.1 += p,
                _ => merged.push((id, p)),
            }
        }
        merged.retain(|e| e.1 > 0.0);
        Ok(TokenDistribution {
            space,
            dim,
            entries: merged,
        })
    }

    pub fn from_dense(space: Space, probs: &[f64]) -> Result<Self> {
        TokenDistribution::new(
            space,
            probs.len(),
            probs
                .iter()
                .enumerate()
                .map(|(i, &p)| (i as u32, p))
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn support(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, id: u32) -> f64 {
        self.entries
            .binary_search_by_key(&id, |e| e.0)
            .map(|i| self.entries[i].1)
            .unwrap_or(0.0)
    }

    pub fn sum(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &(i, p) in &self.entries {
            v[i as usize] = p;
        }
        v
    }

    /// Rescales to sum 1. Zero total mass is an error.
    pub fn normalized(mut self) -> Result<Self> {
        let s = self.sum();
        if !(s > 0.0) {
            return Err(Error::ZeroMass);
        }
        if s != 1.0 {
            self.entries.iter_mut().for_each(|e| e.1 /= s);
        }
        Ok(self)
    }

    /// Up to `n` entries ordered by probability, ascending id on ties.
    pub fn top_n(&self, n: usize) -> Vec<(u32, f64)> {
        let mut v = self.entries.clone();
        let by_rank = |a: &(u32, f64), b: &(u32, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if n < v.len() {
            v.select_nth_unstable_by(n, by_rank);
            v.truncate(n);
        }
        v.sort_unstable_by(by_rank);
        v
    }

    pub fn argmax(&self) -> Option<u32> {
        self.top_n(1).first().map(|e| e.0)
    }
}

/// Keeps the `k` most probable tokens and renormalizes.
pub fn topk_truncate(q: &TokenDistribution, k: usize) -> Result<TokenDistribution> {
    if k < 1 {
        return Err(Error::InvalidArgument("top-k needs k >= 1".into()));
    }
    if k >= q.support() {
        return q.clone().normalized();
    }
    let mut kept = q.top_n(k);
    kept.sort_unstable_by_key(|e| e.0);
    TokenDistribution {
        space: q.space,
        dim: q.dim,
        entries: kept,
    }
    .normalized()
}

/// `p = q W`: moves a native distribution into the pivot vocabulary.
///
/// Mass on tokens whose mapping row was dropped is lost; the result is
/// renormalized. If nothing survives the projection fails with [`Error::ZeroMass`].
pub fn project(q: &TokenDistribution, w: &SparseMapping) -> Result<TokenDistribution> {
    if q.dim() != w.rows() {
        return Err(Error::DimensionMismatch {
            expected: w.rows(),
            found: q.dim(),
        });
    }
    let mut contrib: Vec<(u32, f64)> = Vec::new();
    for &(i, p) in q.entries() {
        contrib.extend(w.row(i as usize).map(|(j, wt)| (j, p * wt)));
    }
    // stable sort keeps source-id order within a column, so sums are reproducible
    contrib.sort_by_key(|e| e.0);
    let mut entries: Vec<(u32, f64)> = Vec::with_capacity(contrib.len());
    for (j, v) in contrib {
        match entries.last_mut() {
            Some(last) if last.0 == j => last.1 += v,
            _ => entries.push((j, v)),
        }
    }
    entries.retain(|e| e.1 > 0.0);
    TokenDistribution {
        space: Space::Pivot,
        dim: w.cols(),
        entries,
    }
    .normalized()
}

/// Consistency filter: model `l` survives iff its top-1 token lies in the
/// union of every other model's top-`n` set.
pub fn filter_models(ps: &[TokenDistribution], n: usize) -> Vec<bool> {
    let tops: Vec<Vec<u32>> = ps
        .iter()
        .map(|p| p.top_n(n).into_iter().map(|e| e.0).collect())
        .collect();
    ps.iter()
        .enumerate()
        .map(|(l, p)| match p.argmax() {
            Some(best) => tops
                .iter()
                .enumerate()
                .any(|(o, top)| o != l && top.contains(&best)),
            None => false,
        })
        .collect()
}

/// Fused distribution and whether the all-filtered fallback was taken.
#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    pub dist: TokenDistribution,
    pub fallback: bool,
}

/// Mean of the distributions whose verdict is true.
///
/// With no survivor the distribution at `fallback` (the pivot) is returned as is.
pub fn fuse(ps: &[TokenDistribution], verdicts: &[bool], fallback: usize) -> Result<Fused> {
    if ps.is_empty() || ps.len() != verdicts.len() {
        return Err(Error::InvalidArgument(
            "fuse needs one verdict per distribution".into(),
        ));
    }
    let dim = ps[0].dim();
    if ps.iter().any(|p| p.dim() != dim) {
        return Err(Error::InvalidArgument(
            "fused distributions must share one vocabulary".into(),
        ));
    }
    let survivors: Vec<&TokenDistribution> = ps
        .iter()
        .zip(verdicts)
        .filter_map(|(p, &keep)| keep.then_some(p))
        .collect();
    if survivors.is_empty() {
        let dist = ps
            .get(fallback)
            .ok_or_else(|| Error::InvalidArgument(format!("no distribution at {fallback}")))?
            .clone();
        return Ok(Fused {
            dist,
            fallback: true,
        });
    }
    if survivors.len() == 1 {
        return Ok(Fused {
            dist: survivors[0].clone(),
            fallback: false,
        });
    }
    let mut acc = vec![0.0; dim];
    let mut touched = Vec::new();
    for p in &survivors {
        for &(i, v) in p.entries() {
            if acc[i as usize] == 0.0 {
                touched.push(i);
            }
            acc[i as usize] += v;
        }
    }
    touched.sort_unstable();
    touched.dedup();
    let count = survivors.len() as f64;
    let entries = touched
        .into_iter()
        .map(|i| (i, acc[i as usize] / count))
        .collect();
    Ok(Fused {
        dist: TokenDistribution {
            space: ps[0].space,
            dim,
            entries,
        },
        fallback: false,
    })
}

/// Plain average of all distributions.
pub fn fuse_mean(ps: &[TokenDistribution]) -> Result<TokenDistribution> {
    fuse(ps, &vec![true; ps.len()], 0).map(|f| f.dist)
}

/// Index of the model with the largest vocabulary; ties go to the smallest name.
pub fn select_pivot<S: AsRef<str>>(models: &[(S, usize)]) -> Option<usize> {
    models
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.1.cmp(&b.1).then_with(|| b.0.as_ref().cmp(a.0.as_ref())))
        .map(|(i, _)| i)
}
