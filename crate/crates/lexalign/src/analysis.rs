//! Diagnostics over decode traces and mappings: top-n spelling diversity and
//! a histogram of retained similarity scores.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::ensemble::DecodeState;
use crate::error::{Error, Result};
use crate::mapping::{NoiseConfig, RowKind, SparseMapping};
use crate::provenance::{to_hex, Digest32};

pub const DEFAULT_EDGES: [f64; 4] = [0.1, 0.4, 0.6, 1.0];
pub const DEFAULT_N_VALUES: [usize; 5] = [3, 5, 10, 20, 40];

/// Levenshtein distance over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiversityPoint {
    pub n: usize,
    pub mean_edit_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiversityReport {
    /// Pooled over every model; sorted by `n`.
    pub per_n: Vec<DiversityPoint>,
    pub per_model: BTreeMap<String, Vec<DiversityPoint>>,
    /// Logged (position, model) top lists with at least two entries.
    pub sample_count: usize,
    /// For each `n`, samples whose top list was shorter than `n`.
    pub short_positions: BTreeMap<usize, usize>,
}

/// Per-sample prefix sums of distances from ranks 2.. to rank 1.
fn distance_prefix(tokens: &[&str]) -> Vec<f64> {
    let top = tokens[0];
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(tokens.len() - 1);
    for t in &tokens[1..] {
        acc += edit_distance(t, top) as f64;
        out.push(acc);
    }
    out
}

/// Mean edit distance between ranks `2..=n` and rank 1 of each logged
/// native top list, averaged per list, then over lists.
///
/// Lists shorter than `n` contribute the ranks they have. Lists with a single
/// entry carry no pairs and are skipped.
pub fn diversity(logs: &[DecodeState], n_values: &[usize]) -> Result<DiversityReport> {
    let mut ns: Vec<usize> = n_values.to_vec();
    ns.sort_unstable();
    ns.dedup();
    if ns.first().is_some_and(|&n| n < 2) {
        return Err(Error::InvalidArgument("diversity needs n >= 2".into()));
    }
    // (sum, count) per n, pooled and per model
    let mut pooled = vec![(0.0f64, 0usize); ns.len()];
    let mut by_model: BTreeMap<String, Vec<(f64, usize)>> = BTreeMap::new();
    let mut short: BTreeMap<usize, usize> = ns.iter().map(|&n| (n, 0)).collect();
    let mut samples = 0;
    for rec in logs.iter().flat_map(|s| &s.step_log).flat_map(|r| &r.models) {
        if rec.native_top.len() < 2 {
            continue;
        }
        samples += 1;
        let tokens: Vec<&str> = rec.native_top.iter().map(|e| e.token.as_str()).collect();
        let prefix = distance_prefix(&tokens);
        let model = by_model
            .entry(rec.name.clone())
            .or_insert_with(|| vec![(0.0, 0); ns.len()]);
        for (slot, &n) in ns.iter().enumerate() {
            let pairs = (n - 1).min(prefix.len());
            if n > tokens.len() {
                *short.get_mut(&n).expect("seeded") += 1;
            }
            let avg = prefix[pairs - 1] / pairs as f64;
            pooled[slot].0 += avg;
            pooled[slot].1 += 1;
            model[slot].0 += avg;
            model[slot].1 += 1;
        }
    }
    let points = |acc: &[(f64, usize)]| -> Vec<DiversityPoint> {
        ns.iter()
            .zip(acc)
            .map(|(&n, &(sum, count))| DiversityPoint {
                n,
                mean_edit_distance: if count == 0 { 0.0 } else { sum / count as f64 },
            })
            .collect()
    };
    Ok(DiversityReport {
        per_n: points(&pooled),
        per_model: by_model.iter().map(|(k, v)| (k.clone(), points(v))).collect(),
        sample_count: samples,
        short_positions: short,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub closed_hi: bool,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityHistogram {
    pub below: usize,
    pub bins: Vec<Bin>,
    pub above: usize,
    pub aligned_rows: usize,
    pub dropped_empty: usize,
    pub dropped_variance: usize,
}

impl SimilarityHistogram {
    pub fn total(&self) -> usize {
        self.below + self.above + self.bins.iter().map(|b| b.count).sum::<usize>()
    }
}

/// Counts retained pre-normalization scores per interval. Intervals are
/// half-open except the last, which includes its upper edge.
pub fn similarity_bins(m: &SparseMapping, edges: &[f64]) -> Result<SimilarityHistogram> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument(
            "bin edges must be at least two strictly ascending values".into(),
        ));
    }
    let last = edges.len() - 2;
    let mut bins: Vec<Bin> = edges
        .windows(2)
        .enumerate()
        .map(|(i, w)| Bin {
            lo: w[0],
            hi: w[1],
            closed_hi: i == last,
            count: 0,
        })
        .collect();
    let (mut below, mut above) = (0, 0);
    for &s in m.scores() {
        let s = s as f64;
        if s < edges[0] {
            below += 1;
        } else if s > edges[edges.len() - 1] {
            above += 1;
        } else {
            // first edge strictly greater than s, minus one; clamp the top edge into the last bin
            let idx = edges.partition_point(|&e| e <= s).saturating_sub(1).min(last);
            bins[idx].count += 1;
        }
    }
    Ok(SimilarityHistogram {
        below,
        bins,
        above,
        aligned_rows: m.count_kind(RowKind::Aligned),
        dropped_empty: m.count_kind(RowKind::DroppedEmpty),
        dropped_variance: m.count_kind(RowKind::DroppedVariance),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProvenanceCheck {
    pub field: String,
    pub expected: String,
    pub found: String,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapReport {
    pub rows: usize,
    pub cols: usize,
    pub nnz: usize,
    pub source_vocab: String,
    pub target_vocab: String,
    pub inputs: String,
    pub csls_k: u32,
    pub noise: NoiseConfig,
    pub histogram: SimilarityHistogram,
    pub checks: Vec<ProvenanceCheck>,
}

impl MapReport {
    pub fn consistent(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }
}

/// What a mapping is expected to have been built from. Unset fields are not checked.
#[derive(Debug, Clone, Default)]
pub struct MapExpectations {
    pub source_vocab: Option<Digest32>,
    pub target_vocab: Option<Digest32>,
    pub noise: Option<NoiseConfig>,
}

pub fn map_report(m: &SparseMapping, edges: &[f64], expect: &MapExpectations) -> Result<MapReport> {
    let p = &m.provenance;
    let mut checks = Vec::new();
    let mut digest_check = |field: &str, want: Option<Digest32>, got: &Digest32| {
        if let Some(w) = want {
            checks.push(ProvenanceCheck {
                field: field.into(),
                expected: to_hex(&w),
                found: to_hex(got),
                ok: &w == got,
            });
        }
    };
    digest_check("source_vocab", expect.source_vocab, &p.source_vocab);
    digest_check("target_vocab", expect.target_vocab, &p.target_vocab);
    if let Some(n) = expect.noise {
        checks.push(ProvenanceCheck {
            field: "noise".into(),
            expected: format!("{n:?}"),
            found: format!("{:?}", p.noise),
            ok: n == p.noise,
        });
    }
    Ok(MapReport {
        rows: m.rows(),
        cols: m.cols(),
        nnz: m.nnz(),
        source_vocab: to_hex(&p.source_vocab),
        target_vocab: to_hex(&p.target_vocab),
        inputs: to_hex(&p.inputs),
        csls_k: p.csls_k,
        noise: p.noise,
        histogram: similarity_bins(m, edges)?,
        checks,
    })
}

/// Flat CSV of a diversity report: `model,n,mean_edit_distance`, pooled rows labelled `*`.
pub fn diversity_csv(r: &DiversityReport) -> String {
    let mut out = String::from("model,n,mean_edit_distance\n");
    let rows = std::iter::once(("*", &r.per_n)).chain(r.per_model.iter().map(|(k, v)| (k.as_str(), v)));
    for (model, points) in rows {
        for p in points {
            out.push_str(&format!("{model},{},{}\n", p.n, p.mean_edit_distance));
        }
    }
    out
}
