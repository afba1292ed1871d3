//! Learning the linear map from a non-pivot embedding space into the pivot space.
//!
//! Given the dictionary-aligned rows `X` (source) and `Z` (target), the map
//! is assembled in four stages:
//!
//! 1. whitening: `Wx = (XᵀX)^-1/2`, `Wz = (ZᵀZ)^-1/2`, eigenvalues floored;
//! 2. orthogonal mapping: `(X Wx)ᵀ (Z Wz) = U S Vᵀ`;
//! 3. re-weighting by `S^s` on the source side;
//! 4. de-whitening into the target space with `Wz^-1`.
//!
//! The composed matrix is `Wx · U · S^s · Vᵀ · Wz^-1`. With whitening off
//! the stages collapse to the orthogonal Procrustes solution `U Vᵀ` of
//! `SVD(XᵀZ)`; re-weighting is only meaningful on whitened data (the singular
//! values are then canonical correlations) and is skipped.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::embed_store::EmbeddingSet;
use crate::error::{Error, Result};
use crate::overlap::OverlapDictionary;

pub const TRANSFORM_MAGIC: &[u8; 4] = b"EVAT";
pub const TRANSFORM_VERSION: u32 = 1;

const MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformConfig {
    pub whiten: bool,
    /// Exponent applied to the singular values. 0 disables re-weighting.
    pub reweight: f64,
    pub dewhiten: bool,
    /// Floor for eigenvalues before taking inverse square roots.
    pub eigen_floor: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig {
            whiten: true,
            reweight: 0.5,
            dewhiten: true,
            eigen_floor: 1e-9,
        }
    }
}

impl TransformConfig {
    /// Plain orthogonal Procrustes.
    pub fn procrustes() -> Self {
        TransformConfig {
            whiten: false,
            reweight: 0.0,
            dewhiten: false,
            ..Default::default()
        }
    }
}

/// Settings actually used when a transform was learned, plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformMeta {
    pub whiten: bool,
    pub reweight: f64,
    pub dewhiten: bool,
    pub pairs: u64,
    pub source_vocab: [u8; 32],
    pub target_vocab: [u8; 32],
    /// Digest of everything the transform was derived from; zero when unknown.
    pub inputs: [u8; 32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearTransform {
    pub matrix: DMatrix<f64>,
    pub meta: TransformMeta,
}

impl LinearTransform {
    pub fn identity(dim: usize) -> Self {
        LinearTransform {
            matrix: DMatrix::identity(dim, dim),
            meta: TransformMeta {
                whiten: false,
                reweight: 0.0,
                dewhiten: false,
                pairs: 0,
                source_vocab: [0; 32],
                target_vocab: [0; 32],
                inputs: [0; 32],
            },
        }
    }

    pub fn from_matrix(matrix: DMatrix<f64>) -> Self {
        let mut t = LinearTransform::identity(0);
        t.matrix = matrix;
        t
    }
}

/// A learned transform plus non-fatal diagnostics.
#[derive(Debug, Clone)]
pub struct Learned {
    pub transform: LinearTransform,
    pub warnings: Vec<String>,
}

pub fn learn_transform(
    source: &EmbeddingSet,
    target: &EmbeddingSet,
    dict: &OverlapDictionary,
    cfg: &TransformConfig,
) -> Result<Learned> {
    if !source.is_preprocessed() || !target.is_preprocessed() {
        return Err(Error::InvalidArgument(
            "learn_transform expects preprocessed embeddings".into(),
        ));
    }
    if dict.len() < 2 {
        return Err(Error::DictionaryTooSmall {
            pairs: dict.len(),
            required: 2,
        });
    }
    if !(cfg.eigen_floor > 0.0) || !cfg.reweight.is_finite() {
        return Err(Error::InvalidArgument(format!("bad transform config {cfg:?}")));
    }
    let (dq, dp) = (source.dim(), target.dim());
    let mut warnings = Vec::new();
    if dict.len() < dq.max(dp) {
        warnings.push(format!(
            "dictionary has {} pairs, fewer than the embedding dimension {}",
            dict.len(),
            dq.max(dp)
        ));
    }

    // fixed accumulation order regardless of how the caller ordered the pairs
    let mut pairs = dict.pairs.clone();
    pairs.sort_unstable();
    let n = pairs.len();
    let mut x = DMatrix::zeros(n, dq);
    let mut z = DMatrix::zeros(n, dp);
    for (r, &(i, j)) in pairs.iter().enumerate() {
        let (i, j) = (i as usize, j as usize);
        if i >= source.len() || j >= target.len() {
            return Err(Error::InvalidArgument(format!(
                "dictionary pair ({i}, {j}) out of range"
            )));
        }
        x.row_mut(r).copy_from(&source.matrix().row(i));
        z.row_mut(r).copy_from(&target.matrix().row(j));
    }

    let (wx, wz_inv) = if cfg.whiten {
        let (wx, _, lowx) = whitening(&x, cfg.eigen_floor)?;
        let (wz, wz_inv, lowz) = whitening(&z, cfg.eigen_floor)?;
        if lowx + lowz > 0 {
            warnings.push(format!(
                "rank-deficient covariance: {lowx} source and {lowz} target eigenvalues floored"
            ));
        }
        x *= &wx;
        z *= &wz;
        (Some(wx), Some(wz_inv))
    } else {
        (None, None)
    };

    let cross = x.tr_mul(&z);
    let svd = cross
        .try_svd(true, true, f64::EPSILON, MAX_ITER)
        .ok_or(Error::NonConvergent)?;
    let u = svd.u.ok_or(Error::NonConvergent)?;
    let v_t = svd.v_t.ok_or(Error::NonConvergent)?;
    let s = svd.singular_values;

    let reweight = cfg.whiten && cfg.reweight != 0.0;
    let mut core = u;
    if reweight {
        for (c, sv) in s.iter().enumerate() {
            let w = sv.max(0.0).powf(cfg.reweight);
            core.column_mut(c).scale_mut(w);
        }
    }
    let mut m = core * v_t;
    if let Some(wx) = &wx {
        m = wx * m;
    }
    let dewhiten = cfg.whiten && cfg.dewhiten;
    if dewhiten {
        if let Some(wz_inv) = &wz_inv {
            m *= wz_inv;
        }
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonConvergent);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(Learned {
        transform: LinearTransform {
            matrix: m,
            meta: TransformMeta {
                whiten: cfg.whiten,
                reweight: if reweight { cfg.reweight } else { 0.0 },
                dewhiten,
                pairs: n as u64,
                source_vocab: source.vocab().digest(),
                target_vocab: target.vocab().digest(),
                inputs: [0; 32],
            },
        },
        warnings,
    })
}

/// Returns `(C^-1/2, C^1/2, floored)` for `C = mᵀm`.
fn whitening(m: &DMatrix<f64>, floor: f64) -> Result<(DMatrix<f64>, DMatrix<f64>, usize)> {
    let cov = m.tr_mul(m);
    let eig = SymmetricEigen::try_new(cov, f64::EPSILON, MAX_ITER).ok_or(Error::NonConvergent)?;
    let mut floored = 0;
    let lambda: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            if l < floor {
                floored += 1;
                floor
            } else {
                l
            }
        })
        .collect();
    let q = &eig.eigenvectors;
    let inv_sqrt = DVector::from_iterator(lambda.len(), lambda.iter().map(|l| 1.0 / l.sqrt()));
    let sqrt = DVector::from_iterator(lambda.len(), lambda.iter().map(|l| l.sqrt()));
    let w = q * DMatrix::from_diagonal(&inv_sqrt) * q.transpose();
    let w_inv = q * DMatrix::from_diagonal(&sqrt) * q.transpose();
    Ok((w, w_inv, floored))
}

/// Right-multiplies every embedding row by the transform.
pub fn apply_transform(e: &EmbeddingSet, t: &LinearTransform) -> Result<EmbeddingSet> {
    if e.dim() != t.matrix.nrows() {
        return Err(Error::DimensionMismatch {
            expected: t.matrix.nrows(),
            found: e.dim(),
        });
    }
    Ok(e.with_matrix(e.matrix() * &t.matrix, true))
}

/// Sum of squared residuals `Σ ‖x_i U − z_j‖²` over dictionary pairs.
pub fn objective(
    source: &EmbeddingSet,
    target: &EmbeddingSet,
    dict: &OverlapDictionary,
    u: &DMatrix<f64>,
) -> f64 {
    dict.pairs
        .iter()
        .map(|&(i, j)| {
            let mapped = source.matrix().row(i as usize) * u;
            (mapped - target.matrix().row(j as usize)).norm_squared()
        })
        .sum()
}

pub fn save_transform(t: &LinearTransform, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_transform(t, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn write_transform<W: Write>(t: &LinearTransform, w: &mut W) -> std::io::Result<()> {
    w.write_all(TRANSFORM_MAGIC)?;
    w.write_u32::<LittleEndian>(TRANSFORM_VERSION)?;
    w.write_u32::<LittleEndian>(t.matrix.nrows() as u32)?;
    w.write_u32::<LittleEndian>(t.matrix.ncols() as u32)?;
    w.write_u8(t.meta.whiten as u8)?;
    w.write_u8(t.meta.dewhiten as u8)?;
    w.write_f64::<LittleEndian>(t.meta.reweight)?;
    w.write_u64::<LittleEndian>(t.meta.pairs)?;
    w.write_all(&t.meta.source_vocab)?;
    w.write_all(&t.meta.target_vocab)?;
    w.write_all(&t.meta.inputs)?;
    for r in 0..t.matrix.nrows() {
        for c in 0..t.matrix.ncols() {
            w.write_f64::<LittleEndian>(t.matrix[(r, c)])?;
        }
    }
    Ok(())
}

pub fn load_transform(path: &Path) -> Result<LinearTransform> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    read_transform(&mut r).map_err(|m| Error::corrupt(path, m))
}

fn read_transform<R: Read>(r: &mut R) -> std::result::Result<LinearTransform, String> {
    let short = |_| "truncated file".to_string();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(short)?;
    if &magic != TRANSFORM_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.read_u32::<LittleEndian>().map_err(short)?;
    if version != TRANSFORM_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let rows = r.read_u32::<LittleEndian>().map_err(short)? as usize;
    let cols = r.read_u32::<LittleEndian>().map_err(short)? as usize;
    let whiten = r.read_u8().map_err(short)? != 0;
    let dewhiten = r.read_u8().map_err(short)? != 0;
    let reweight = r.read_f64::<LittleEndian>().map_err(short)?;
    let pairs = r.read_u64::<LittleEndian>().map_err(short)?;
    let mut source_vocab = [0u8; 32];
    let mut target_vocab = [0u8; 32];
    let mut inputs = [0u8; 32];
    r.read_exact(&mut source_vocab).map_err(short)?;
    r.read_exact(&mut target_vocab).map_err(short)?;
    r.read_exact(&mut inputs).map_err(short)?;
    let mut data = vec![0f64; rows * cols];
    r.read_f64_into::<LittleEndian>(&mut data).map_err(short)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| e.to_string())? != 0 {
        return Err("trailing bytes".into());
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err("non-finite matrix entry".into());
    }
    Ok(LinearTransform {
        matrix: DMatrix::from_row_slice(rows, cols, &data),
        meta: TransformMeta {
            whiten,
            reweight,
            dewhiten,
            pairs,
            source_vocab,
            target_vocab,
            inputs,
        },
    })
}
