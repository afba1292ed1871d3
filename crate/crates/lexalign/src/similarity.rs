//! Cross-domain similarity local scaling between mapped source rows and target rows.
//!
//! `csls(x, y) = 2 cos(x, y) - r_T(x) - r_S(y)` where `r_T(x)` is the mean
//! cosine of `x` to its `k` nearest target rows and `r_S(y)` the mean cosine
//! of `y` to its `k` nearest mapped source rows.
//!
//! The full score matrix is never materialized: [`Csls`] precomputes the
//! target-side penalties once and then hands out row blocks on demand.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::embed_store::EmbeddingSet;
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_BLOCK: usize = 1024;

/// Scores for source rows `row_start..row_start + rows`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBlock {
    pub row_start: usize,
    pub rows: usize,
    pub cols: usize,
    pub k_neighbors: usize,
    scores: Vec<f64>,
}

impl SimilarityBlock {
    pub fn row(&self, local: usize) -> &[f64] {
        &self.scores[local * self.cols..(local + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.scores
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .enumerate()
            .map(move |(i, r)| (self.row_start + i, r))
    }
}

/// Row-streamed CSLS between a mapped source set and a target set.
#[derive(Debug, Clone)]
pub struct Csls {
    source: DMatrix<f64>,
    target: DMatrix<f64>,
    source_penalty: Vec<f64>,
    target_penalty: Vec<f64>,
    k: usize,
    block_size: usize,
}

impl Csls {
    pub fn new(mapped: &EmbeddingSet, target: &EmbeddingSet, k: usize) -> Result<Self> {
        Csls::with_block_size(mapped, target, k, DEFAULT_BLOCK)
    }

    pub fn with_block_size(
        mapped: &EmbeddingSet,
        target: &EmbeddingSet,
        k: usize,
        block_size: usize,
    ) -> Result<Self> {
        Csls::from_matrices(mapped.matrix(), target.matrix(), k, block_size)
    }

    pub fn from_matrices(
        mapped: &DMatrix<f64>,
        target: &DMatrix<f64>,
        k: usize,
        block_size: usize,
    ) -> Result<Self> {
        if mapped.ncols() != target.ncols() {
            return Err(Error::DimensionMismatch {
                expected: target.ncols(),
                found: mapped.ncols(),
            });
        }
        let limit = mapped.nrows().min(target.nrows());
        if k == 0 || k >= limit {
            return Err(Error::InvalidArgument(format!(
                "CSLS k must satisfy 1 <= k < {limit}, got {k}"
            )));
        }
        if block_size == 0 {
            return Err(Error::InvalidArgument("block size must be positive".into()));
        }
        let source = unit_rows(mapped);
        let target = unit_rows(target);

        // r_S for every target row: mean of its k best cosines against the sources
        let nt = target.nrows();
        let starts: Vec<usize> = (0..nt).step_by(block_size).collect();
        let target_penalty: Vec<f64> = starts
            .par_iter()
            .flat_map_iter(|&s| {
                let len = block_size.min(nt - s);
                // ns x len, column c = cosines of target row s + c to all sources
                let cos = &source * target.rows(s, len).transpose();
                let ns = cos.nrows();
                let data = cos.as_slice();
                (0..len)
                    .map(|c| top_k_mean(&data[c * ns..(c + 1) * ns], k))
                    .collect::<Vec<_>>()
            })
            .collect();

        let mut csls = Csls {
            source,
            target,
            source_penalty: Vec::new(),
            target_penalty,
            k,
            block_size,
        };
        csls.source_penalty = csls.compute_source_penalty();
        Ok(csls)
    }

    fn compute_source_penalty(&self) -> Vec<f64> {
        let ns = self.source.nrows();
        let starts: Vec<usize> = (0..ns).step_by(self.block_size).collect();
        starts
            .par_iter()
            .flat_map_iter(|&s| {
                let len = self.block_size.min(ns - s);
                let cos = self.cosines(s, len);
                let nt = self.target.nrows();
                (0..len)
                    .map(|r| top_k_mean(&cos[r * nt..(r + 1) * nt], self.k))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Row-major `len x |target|` cosines for sources `start..start+len`.
    fn cosines(&self, start: usize, len: usize) -> Vec<f64> {
        let m = &self.target * self.source.rows(start, len).transpose();
        m.data.into()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn source_len(&self) -> usize {
        self.source.nrows()
    }

    pub fn target_len(&self) -> usize {
        self.target.nrows()
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// `r_T` for each mapped source row.
    pub fn source_penalty(&self) -> &[f64] {
        &self.source_penalty
    }

    /// `r_S` for each target row.
    pub fn target_penalty(&self) -> &[f64] {
        &self.target_penalty
    }

    pub fn block(&self, start: usize, len: usize) -> SimilarityBlock {
        let len = len.min(self.source_len().saturating_sub(start));
        let nt = self.target_len();
        let mut scores = self.cosines(start, len);
        for (r, row) in scores.chunks_exact_mut(nt.max(1)).take(len).enumerate() {
            let rt = self.source_penalty[start + r];
            for (v, rs) in row.iter_mut().zip(&self.target_penalty) {
                *v = 2.0 * *v - rt - rs;
            }
        }
        SimilarityBlock {
            row_start: start,
            rows: len,
            cols: nt,
            k_neighbors: self.k,
            scores,
        }
    }

    pub fn block_starts(&self) -> impl Iterator<Item = usize> {
        (0..self.source_len()).step_by(self.block_size)
    }

    /// Serial stream of blocks covering every source row in order.
    pub fn blocks(&self) -> impl Iterator<Item = SimilarityBlock> + '_ {
        self.block_starts().map(|s| self.block(s, self.block_size))
    }

    /// Maps every row through `f` in parallel; output is in row order.
    pub fn map_rows<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize, &[f64]) -> T + Sync,
    {
        let starts: Vec<usize> = self.block_starts().collect();
        starts
            .par_iter()
            .flat_map_iter(|&s| {
                let block = self.block(s, self.block_size);
                block
                    .iter_rows()
                    .map(|(i, row)| f(i, row))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Dense score matrix. Only for small inputs.
    pub fn dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.source_len(), self.target_len());
        for block in self.blocks() {
            for (i, row) in block.iter_rows() {
                for (j, v) in row.iter().enumerate() {
                    out[(i, j)] = *v;
                }
            }
        }
        out
    }
}

/// Cosine similarity with zero vectors defined as 0.
fn unit_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for r in 0..out.nrows() {
        let n = out.row(r).norm();
        if n > 0.0 {
            out.row_mut(r).unscale_mut(n);
        } else {
            out.row_mut(r).fill(0.0);
        }
    }
    out
}

/// Mean of the `k` largest values, summed in descending order.
pub(crate) fn top_k_mean(values: &[f64], k: usize) -> f64 {
    let mut v = values.to_vec();
    let k = k.min(v.len());
    if k == 0 {
        return 0.0;
    }
    if k < v.len() {
        v.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    }
    let top = &mut v[..k];
    top.sort_unstable_by(|a, b| b.total_cmp(a));
    top.iter().sum::<f64>() / k as f64
}
