//! Sparse projection matrices between two vocabularies.
//!
//! Each similarity row goes through three truncations in a fixed order:
//!
//! 1. keep the `t` highest scores (ties go to the lower column id);
//! 2. drop scores below `threshold` (a score equal to the threshold stays);
//! 3. drop the whole row when at least `c` scores survive and their variance
//!    is at most `sigma`. Such a row looks alike to everything and carries no signal.
//!
//! Surviving rows are normalized to sum to one so that projecting a
//! distribution moves exactly each source token's own probability mass.
//!
//! # File format
//!
//! All integers little-endian.
//!
//! | field | type |
//! |---|---|
//! | magic | `EVAM` |
//! | version | `u32` (1) |
//! | source vocabulary digest | 32 bytes |
//! | target vocabulary digest | 32 bytes |
//! | noise config | `u32 t, f64 threshold, f64 sigma, u32 c, u8 variance, u8 row_normalize` |
//! | CSLS k | `u32` |
//! | inputs digest | 32 bytes |
//! | rows, cols | `u64, u64` |
//! | variance-dropped rows | `u64` count, then `u32` ids |
//! | nnz | `u64` |
//! | entries | `(u32 i, u32 j, f32 score)` sorted by `(i, j)` |
//!
//! Entries store the pre-normalization score; weights are recomputed on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::overlap::OverlapDictionary;
use crate::similarity::{Csls, SimilarityBlock};

pub const MAPPING_MAGIC: &[u8; 4] = b"EVAM";
pub const MAPPING_VERSION: u32 = 1;
/// Bytes before the variance-dropped id list.
pub const MAPPING_FIXED_HEADER: usize = 4 + 4 + 32 + 32 + (4 + 8 + 8 + 4 + 1 + 1) + 4 + 32 + 8 + 8 + 8 + 8;
pub const ENTRY_BYTES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceKind {
    Population,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub t: usize,
    pub threshold: f64,
    pub sigma: f64,
    pub c: usize,
    pub variance: VarianceKind,
    pub row_normalize: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            t: 10,
            threshold: 0.1,
            sigma: 0.0001,
            c: 5,
            variance: VarianceKind::Population,
            row_normalize: true,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.t < 1 || self.t > u32::MAX as usize {
            problems.push(format!("noise.t must be >= 1, got {}", self.t));
        }
        if !self.threshold.is_finite() {
            problems.push("noise.threshold must be finite".to_string());
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            problems.push(format!("noise.sigma must be >= 0, got {}", self.sigma));
        }
        if self.c < 1 || self.c > u32::MAX as usize {
            problems.push(format!("noise.c must be >= 1, got {}", self.c));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowKind {
    Aligned,
    DroppedEmpty,
    DroppedVariance,
}

/// Keeps the `t` largest entries; the rest become zero. Ties keep the lower index.
pub fn top_t_truncate(row: &[f64], t: usize) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    for (j, _) in top_t_indices(row, t) {
        out[j as usize] = row[j as usize];
    }
    out
}

/// Zeroes entries strictly below `threshold`.
pub fn threshold_truncate(row: &[f64], threshold: f64) -> Vec<f64> {
    row.iter()
        .map(|&v| if v < threshold { 0.0 } else { v })
        .collect()
}

/// Zeroes the whole row when its nonzero entries number at least `c` and
/// their variance is at most `sigma`. Returns whether the row was dropped.
pub fn variance_truncate(row: &[f64], sigma: f64, c: usize, kind: VarianceKind) -> (Vec<f64>, bool) {
    let nonzero: Vec<f64> = row.iter().copied().filter(|v| *v != 0.0).collect();
    if nonzero.len() >= c && variance(&nonzero, kind) <= sigma {
        (vec![0.0; row.len()], true)
    } else {
        (row.to_vec(), false)
    }
}

pub fn variance(values: &[f64], kind: VarianceKind) -> f64 {
    let n = values.len();
    let denom = match kind {
        VarianceKind::Population => n,
        VarianceKind::Sample => n.saturating_sub(1),
    };
    if denom == 0 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / denom as f64
}

/// `(column, score)` of the top `t`, ordered by score descending then column ascending.
fn top_t_indices(row: &[f64], t: usize) -> Vec<(u32, f64)> {
    let mut best: Vec<(u32, f64)> = Vec::with_capacity(t + 1);
    for (j, &v) in row.iter().enumerate() {
        if best.len() == t {
            // scanning in column order, so a tie with the current minimum loses
            match best.last() {
                Some(&(_, worst)) if v > worst => {}
                _ => continue,
            }
        }
        let pos = best.partition_point(|&(_, b)| b >= v);
        best.insert(pos, (j as u32, v));
        best.truncate(t);
    }
    best
}

/// One reduced row: surviving `(column, score)` pairs sorted by column.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedRow {
    pub entries: Vec<(u32, f64)>,
    pub kind: RowKind,
}

/// Top-t, threshold, and variance truncation of one similarity row.
///
/// Non-positive survivors are discarded so every retained weight is positive.
pub fn reduce_row(row: &[f64], cfg: &NoiseConfig) -> ReducedRow {
    let mut entries: Vec<(u32, f64)> = top_t_indices(row, cfg.t)
        .into_iter()
        .filter(|&(_, v)| v >= cfg.threshold && v > 0.0)
        .collect();
    if entries.is_empty() {
        return ReducedRow {
            entries,
            kind: RowKind::DroppedEmpty,
        };
    }
    let scores: Vec<f64> = entries.iter().map(|e| e.1).collect();
    if entries.len() >= cfg.c && variance(&scores, cfg.variance) <= cfg.sigma {
        return ReducedRow {
            entries: Vec::new(),
            kind: RowKind::DroppedVariance,
        };
    }
    entries.sort_unstable_by_key(|e| e.0);
    ReducedRow {
        entries,
        kind: RowKind::Aligned,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub source_vocab: [u8; 32],
    pub target_vocab: [u8; 32],
    pub noise: NoiseConfig,
    pub csls_k: u32,
    pub inputs: [u8; 32],
}

impl Provenance {
    pub fn new(noise: NoiseConfig) -> Self {
        Provenance {
            source_vocab: [0; 32],
            target_vocab: [0; 32],
            noise,
            csls_k: 0,
            inputs: [0; 32],
        }
    }
}

/// Sparse `|V^Q| x |V^P|` projection matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMapping {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    scores: Vec<f32>,
    weights: Vec<f64>,
    row_kind: Vec<RowKind>,
    pub provenance: Provenance,
}

impl SparseMapping {
    fn assemble(
        rows: usize,
        cols: usize,
        reduced: Vec<ReducedRow>,
        provenance: Provenance,
    ) -> Self {
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut scores = Vec::new();
        let mut row_kind = Vec::with_capacity(rows);
        row_ptr.push(0);
        for r in reduced {
            for (j, s) in r.entries {
                col_idx.push(j);
                scores.push(s as f32);
            }
            row_ptr.push(col_idx.len());
            row_kind.push(r.kind);
        }
        let weights = compute_weights(&row_ptr, &scores, provenance.noise.row_normalize);
        SparseMapping {
            rows,
            cols,
            row_ptr,
            col_idx,
            scores,
            weights,
            row_kind,
            provenance,
        }
    }

    /// One-hot rows for tokens with an identical counterpart; the rest are dropped.
    pub fn from_overlap(dict: &OverlapDictionary) -> Self {
        let mut reduced: Vec<ReducedRow> = (0..dict.source_size)
            .map(|_| ReducedRow {
                entries: Vec::new(),
                kind: RowKind::DroppedEmpty,
            })
            .collect();
        for &(i, j) in &dict.pairs {
            reduced[i as usize] = ReducedRow {
                entries: vec![(j, 1.0)],
                kind: RowKind::Aligned,
            };
        }
        SparseMapping::assemble(
            dict.source_size,
            dict.target_size,
            reduced,
            Provenance::new(NoiseConfig::default()),
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_kind(&self, i: usize) -> RowKind {
        self.row_kind[i]
    }

    pub fn row_kinds(&self) -> &[RowKind] {
        &self.row_kind
    }

    pub fn count_kind(&self, kind: RowKind) -> usize {
        self.row_kind.iter().filter(|k| **k == kind).count()
    }

    /// `(column, weight)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (u32, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    /// `(column, pre-normalization score)` pairs of row `i`.
    pub fn row_scores(&self, i: usize) -> impl Iterator<Item = (u32, f32)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.scores[span].iter().copied())
    }

    /// `(i, j, weight)` sorted by `(i, j)`.
    pub fn entries(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        (0..self.rows).flat_map(move |i| self.row(i).map(move |(j, w)| (i as u32, j, w)))
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn set_vocab_digests(&mut self, source: [u8; 32], target: [u8; 32]) {
        self.provenance.source_vocab = source;
        self.provenance.target_vocab = target;
    }

    /// Index of the highest-weight column in row `i` (lowest id on ties).
    pub fn row_argmax(&self, i: usize) -> Option<u32> {
        let mut best: Option<(u32, f64)> = None;
        for (j, w) in self.row(i) {
            if best.is_none_or(|(_, bw)| w > bw) {
                best = Some((j, w));
            }
        }
        best.map(|b| b.0)
    }
}

fn compute_weights(row_ptr: &[usize], scores: &[f32], normalize: bool) -> Vec<f64> {
    let mut weights: Vec<f64> = scores.iter().map(|&s| f64::from(s)).collect();
    if normalize {
        for w in row_ptr.windows(2) {
            let row = &mut weights[w[0]..w[1]];
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
    }
    weights
}

/// Builds the mapping by reducing every CSLS row, in parallel.
pub fn build_mapping(csls: &Csls, cfg: &NoiseConfig) -> Result<SparseMapping> {
    cfg.validate()?;
    let reduced = csls.map_rows(|_, row| reduce_row(row, cfg));
    let mut prov = Provenance::new(*cfg);
    prov.csls_k = csls.k() as u32;
    Ok(SparseMapping::assemble(
        csls.source_len(),
        csls.target_len(),
        reduced,
        prov,
    ))
}

/// Builds the mapping from an arbitrary in-order block stream.
pub fn build_mapping_from_blocks<I>(
    blocks: I,
    rows: usize,
    cols: usize,
    cfg: &NoiseConfig,
) -> Result<SparseMapping>
where
    I: IntoIterator<Item = SimilarityBlock>,
{
    cfg.validate()?;
    let mut reduced = Vec::with_capacity(rows);
    for block in blocks {
        if block.cols != cols || block.row_start != reduced.len() {
            return Err(Error::InvalidArgument(format!(
                "block at row {} does not continue the stream at row {}",
                block.row_start,
                reduced.len()
            )));
        }
        reduced.extend(block.iter_rows().map(|(_, r)| reduce_row(r, cfg)));
    }
    if reduced.len() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            found: reduced.len(),
        });
    }
    Ok(SparseMapping::assemble(rows, cols, reduced, Provenance::new(*cfg)))
}

/// Builds from dense rows; mostly for tests and tiny vocabularies.
pub fn build_mapping_from_rows(rows: &[Vec<f64>], cols: usize, cfg: &NoiseConfig) -> Result<SparseMapping> {
    cfg.validate()?;
    let mut reduced = Vec::with_capacity(rows.len());
    for r in rows {
        if r.len() != cols {
            return Err(Error::DimensionMismatch {
                expected: cols,
                found: r.len(),
            });
        }
        reduced.push(reduce_row(r, cfg));
    }
    Ok(SparseMapping::assemble(rows.len(), cols, reduced, Provenance::new(*cfg)))
}

pub fn save_mapping(m: &SparseMapping, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_mapping(m, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn write_mapping<W: Write>(m: &SparseMapping, w: &mut W) -> std::io::Result<()> {
    let p = &m.provenance;
    w.write_all(MAPPING_MAGIC)?;
    w.write_u32::<LittleEndian>(MAPPING_VERSION)?;
    w.write_all(&p.source_vocab)?;
    w.write_all(&p.target_vocab)?;
    w.write_u32::<LittleEndian>(p.noise.t as u32)?;
    w.write_f64::<LittleEndian>(p.noise.threshold)?;
    w.write_f64::<LittleEndian>(p.noise.sigma)?;
    w.write_u32::<LittleEndian>(p.noise.c as u32)?;
    w.write_u8(match p.noise.variance {
        VarianceKind::Population => 0,
        VarianceKind::Sample => 1,
    })?;
    w.write_u8(p.noise.row_normalize as u8)?;
    w.write_u32::<LittleEndian>(p.csls_k)?;
    w.write_all(&p.inputs)?;
    w.write_u64::<LittleEndian>(m.rows as u64)?;
    w.write_u64::<LittleEndian>(m.cols as u64)?;
    let dropped: Vec<u32> = m
        .row_kind
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == RowKind::DroppedVariance)
        .map(|(i, _)| i as u32)
        .collect();
    w.write_u64::<LittleEndian>(dropped.len() as u64)?;
    for i in dropped {
        w.write_u32::<LittleEndian>(i)?;
    }
    w.write_u64::<LittleEndian>(m.nnz() as u64)?;
    for i in 0..m.rows {
        for (j, s) in m.row_scores(i) {
            w.write_u32::<LittleEndian>(i as u32)?;
            w.write_u32::<LittleEndian>(j)?;
            w.write_f32::<LittleEndian>(s)?;
        }
    }
    Ok(())
}

/// Vocabulary digests a loaded mapping must match.
#[derive(Debug, Clone, Copy)]
pub struct ExpectedVocabs {
    pub source: [u8; 32],
    pub target: [u8; 32],
}

/// Loads a mapping. With `expected` set, a digest mismatch is an error unless `force`.
pub fn load_mapping(path: &Path, expected: Option<ExpectedVocabs>, force: bool) -> Result<SparseMapping> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let m = read_mapping(&mut r).map_err(|msg| Error::corrupt(path, msg))?;
    if let Some(exp) = expected {
        let mut problems = Vec::new();
        if exp.source != m.provenance.source_vocab {
            problems.push("source vocabulary digest differs");
        }
        if exp.target != m.provenance.target_vocab {
            problems.push("target vocabulary digest differs");
        }
        if !problems.is_empty() {
            let msg = format!("{}: {}", path.display(), problems.join(", "));
            if force {
                log::warn!("loading despite provenance mismatch: {msg}");
            } else {
                return Err(Error::ProvenanceMismatch(msg));
            }
        }
    }
    Ok(m)
}

fn read_mapping<R: Read>(r: &mut R) -> std::result::Result<SparseMapping, String> {
    let short = |_| "truncated file".to_string();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(short)?;
    if &magic != MAPPING_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.read_u32::<LittleEndian>().map_err(short)?;
    if version != MAPPING_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let mut source_vocab = [0u8; 32];
    let mut target_vocab = [0u8; 32];
    r.read_exact(&mut source_vocab).map_err(short)?;
    r.read_exact(&mut target_vocab).map_err(short)?;
    let t = r.read_u32::<LittleEndian>().map_err(short)? as usize;
    let threshold = r.read_f64::<LittleEndian>().map_err(short)?;
    let sigma = r.read_f64::<LittleEndian>().map_err(short)?;
    let c = r.read_u32::<LittleEndian>().map_err(short)? as usize;
    let variance = match r.read_u8().map_err(short)? {
        0 => VarianceKind::Population,
        1 => VarianceKind::Sample,
        v => return Err(format!("unknown variance kind {v}")),
    };
    let row_normalize = r.read_u8().map_err(short)? != 0;
    let csls_k = r.read_u32::<LittleEndian>().map_err(short)?;
    let mut inputs = [0u8; 32];
    r.read_exact(&mut inputs).map_err(short)?;
    let rows = r.read_u64::<LittleEndian>().map_err(short)? as usize;
    let cols = r.read_u64::<LittleEndian>().map_err(short)? as usize;
    if rows > u32::MAX as usize || cols > u32::MAX as usize {
        return Err("dimensions exceed u32 ids".into());
    }
    let ndropped = r.read_u64::<LittleEndian>().map_err(short)? as usize;
    if ndropped > rows {
        return Err("more dropped rows than rows".into());
    }
    let mut row_kind = vec![RowKind::DroppedEmpty; rows];
    for _ in 0..ndropped {
        let i = r.read_u32::<LittleEndian>().map_err(short)? as usize;
        if i >= rows {
            return Err(format!("dropped row {i} out of range"));
        }
        row_kind[i] = RowKind::DroppedVariance;
    }
    let nnz = r.read_u64::<LittleEndian>().map_err(short)? as usize;
    if nnz > rows.saturating_mul(t) {
        return Err(format!("{nnz} entries exceed t per row"));
    }
    let mut row_ptr = vec![0usize; rows + 1];
    let mut col_idx = Vec::with_capacity(nnz);
    let mut scores = Vec::with_capacity(nnz);
    let mut last: Option<(u32, u32)> = None;
    for _ in 0..nnz {
        let i = r.read_u32::<LittleEndian>().map_err(short)?;
        let j = r.read_u32::<LittleEndian>().map_err(short)?;
        let s = r.read_f32::<LittleEndian>().map_err(short)?;
        if i as usize >= rows || j as usize >= cols {
            return Err(format!("entry ({i}, {j}) out of range"));
        }
        if last.is_some_and(|l| l >= (i, j)) {
            return Err("entries not sorted by (i, j)".into());
        }
        if !(s > 0.0) || !s.is_finite() {
            return Err(format!("invalid score {s} at ({i}, {j})"));
        }
        if row_kind[i as usize] == RowKind::DroppedVariance {
            return Err(format!("dropped row {i} has entries"));
        }
        last = Some((i, j));
        row_ptr[i as usize + 1] += 1;
        row_kind[i as usize] = RowKind::Aligned;
        col_idx.push(j);
        scores.push(s);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| e.to_string())? != 0 {
        return Err("trailing bytes".into());
    }
    for i in 0..rows {
        row_ptr[i + 1] += row_ptr[i];
    }
    let noise = NoiseConfig {
        t,
        threshold,
        sigma,
        c,
        variance,
        row_normalize,
    };
    let weights = compute_weights(&row_ptr, &scores, row_normalize);
    Ok(SparseMapping {
        rows,
        cols,
        row_ptr,
        col_idx,
        scores,
        weights,
        row_kind,
        provenance: Provenance {
            source_vocab,
            target_vocab,
            noise,
            csls_k,
            inputs,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn top_t_examples() {
        assert_eq!(top_t_truncate(&[0.9, 0.5, 0.7, 0.1], 2), vec![0.9, 0.0, 0.7, 0.0]);
        let row = [0.3, -0.2, 0.8];
        assert_eq!(top_t_truncate(&row, 3), row.to_vec());
        assert_eq!(top_t_truncate(&row, 10), row.to_vec());
        assert_eq!(top_t_truncate(&[0.5, 0.5, 0.5], 2), vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn tie_rule_matches_stable_sort() {
        let row = [0.2, 0.5, 0.2, 0.5, 0.1, 0.5, 0.2];
        for t in 1..=row.len() {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            // stable sort keeps ascending index among equal scores
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
            let mut expected = vec![0.0; row.len()];
            for &j in &idx[..t] {
                expected[j] = row[j];
            }
            assert_eq!(top_t_truncate(&row, t), expected, "t = {t}");
        }
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(threshold_truncate(&[0.9, 0.0, 0.7, 0.0], 0.1), vec![0.9, 0.0, 0.7, 0.0]);
        assert_eq!(threshold_truncate(&[0.09, 0.1, 0.11], 0.1), vec![0.0, 0.1, 0.11]);
        let r = reduce_row(&[0.05, 0.02], &NoiseConfig::default());
        assert_eq!(r.kind, RowKind::DroppedEmpty);
        assert!(r.entries.is_empty());
    }

    #[test]
    fn variance_examples() {
        let flat = [0.77; 6];
        let (out, dropped) = variance_truncate(&flat, 0.0001, 5, VarianceKind::Population);
        assert!(dropped);
        assert!(out.iter().all(|v| *v == 0.0));

        let few = [0.77, 0.77, 0.77, 0.0];
        let (out, dropped) = variance_truncate(&few, 0.0001, 5, VarianceKind::Population);
        assert!(!dropped);
        assert_eq!(out, few.to_vec());

        let spread = [0.9, 0.3, 0.3, 0.3, 0.3];
        // mean 0.42; (0.48² + 4·0.12²) / 5 = 0.0576
        assert!((variance(&spread, VarianceKind::Population) - 0.0576).abs() < 1e-12);
        let (_, dropped) = variance_truncate(&spread, 0.0001, 5, VarianceKind::Population);
        assert!(!dropped);

        let mut row = vec![0.0; 20];
        row[..6].fill(0.77);
        assert_eq!(reduce_row(&row, &NoiseConfig::default()).kind, RowKind::DroppedVariance);
    }

    #[test]
    fn all_zero_stream() {
        let rows = vec![vec![0.0; 8]; 5];
        let m = build_mapping_from_rows(&rows, 8, &NoiseConfig::default()).unwrap();
        assert_eq!(m.nnz(), 0);
        assert_eq!(m.count_kind(RowKind::DroppedEmpty), 5);
    }

    #[test]
    fn rows_are_normalized() {
        let rows = vec![vec![0.6, 0.2, 0.0, 0.4], vec![0.0, 0.0, 0.5, 0.05]];
        let m = build_mapping_from_rows(&rows, 4, &NoiseConfig::default()).unwrap();
        let w: Vec<(u32, f64)> = m.row(0).collect();
        assert_eq!(w.iter().map(|e| e.0).collect::<Vec<_>>(), vec![0, 1, 3]);
        assert!((w.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(m.row(1).collect::<Vec<_>>(), vec![(2, 1.0)]);
        assert_eq!(m.row_argmax(0), Some(0));

        let raw = NoiseConfig {
            row_normalize: false,
            ..Default::default()
        };
        let m = build_mapping_from_rows(&rows, 4, &raw).unwrap();
        assert_eq!(m.row(1).next().unwrap().1, f64::from(0.5f32));
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = NoiseConfig {
            t: 0,
            sigma: -1.0,
            ..Default::default()
        };
        match bad.validate() {
            Err(Error::Validation(p)) => assert_eq!(p.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let rows = vec![
            vec![0.6, 0.2, 0.0, 0.4, 0.3, 0.2],
            vec![0.0; 6],
            vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.9],
        ];
        let mut m = build_mapping_from_rows(&rows, 6, &NoiseConfig::default()).unwrap();
        m.set_vocab_digests([1; 32], [2; 32]);
        assert_eq!(m.row_kinds(), &[RowKind::Aligned, RowKind::DroppedEmpty, RowKind::DroppedVariance, RowKind::Aligned]);
        let f = tempfile::NamedTempFile::new().unwrap();
        save_mapping(&m, f.path()).unwrap();
        let back = load_mapping(f.path(), None, false).unwrap();
        assert_eq!(back, m);
        let size = std::fs::metadata(f.path()).unwrap().len() as usize;
        assert_eq!(size, MAPPING_FIXED_HEADER + 4 + ENTRY_BYTES * m.nnz());

        let ok = ExpectedVocabs { source: [1; 32], target: [2; 32] };
        assert!(load_mapping(f.path(), Some(ok), false).is_ok());
        let bad = ExpectedVocabs { source: [1; 32], target: [3; 32] };
        assert!(matches!(
            load_mapping(f.path(), Some(bad), false),
            Err(Error::ProvenanceMismatch(_))
        ));
        assert!(load_mapping(f.path(), Some(bad), true).is_ok());

        let bytes = std::fs::read(f.path()).unwrap();
        std::fs::write(f.path(), &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_mapping(f.path(), None, false), Err(Error::CorruptFile { .. })));
    }

    fn arb_row() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(
            prop_oneof![(-1.0f64..1.0), Just(0.77), Just(0.1), Just(0.5)],
            1..50,
        )
    }

    proptest! {
        #[test]
        fn composite_equals_step_chain(row in arb_row(), t in 1usize..12, c in 1usize..7) {
            let cfg = NoiseConfig { t, c, sigma: 1e-3, ..Default::default() };
            let stepped = top_t_truncate(&row, t);
            let stepped = threshold_truncate(&stepped, cfg.threshold);
            let (stepped, dropped) = variance_truncate(&stepped, cfg.sigma, c, cfg.variance);
            let reduced = reduce_row(&row, &cfg);
            let mut dense = vec![0.0; row.len()];
            for &(j, v) in &reduced.entries {
                dense[j as usize] = v;
            }
            prop_assert_eq!(dense, stepped);
            prop_assert_eq!(reduced.kind == RowKind::DroppedVariance, dropped);
        }

        #[test]
        fn dropped_rows_meet_both_conditions(row in arb_row(), t in 1usize..12, c in 1usize..7) {
            let cfg = NoiseConfig { t, c, sigma: 1e-3, ..Default::default() };
            let reduced = reduce_row(&row, &cfg);
            let survivors: Vec<f64> = threshold_truncate(&top_t_truncate(&row, t), cfg.threshold)
                .into_iter()
                .filter(|v| *v != 0.0)
                .collect();
            let should_drop = survivors.len() >= c && variance(&survivors, cfg.variance) <= cfg.sigma;
            prop_assert_eq!(reduced.kind == RowKind::DroppedVariance, should_drop);
            if reduced.kind == RowKind::Aligned {
                prop_assert!(reduced.entries.len() <= t);
                prop_assert!(reduced.entries.iter().all(|e| e.1 >= cfg.threshold));
            }
        }
    }
}
