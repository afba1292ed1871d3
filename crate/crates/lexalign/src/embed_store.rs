//! Vocabularies, token-embedding matrices and their on-disk formats.
//!
//! Two embedding formats are understood:
//!
//! * word2vec text: a `<count> <dim>` header followed by one
//!   `<token> <v1> ... <vd>` line per token.
//! * binary-native: magic `EVAE`, `u32` version (1), `u64` vocabulary size,
//!   `u32` dimension, length-prefixed UTF-8 tokens, then the row-major matrix
//!   as little-endian `f32`.
//!
//! Matrices are held as `f64` in memory. The binary format stores `f32`, so a
//! matrix read from either format round-trips through `save`/`load`
//! bit-exactly, while a preprocessed matrix is rounded to `f32` on save.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"EVAE";
pub const EMBEDDING_VERSION: u32 = 1;

/// Norm below which a row is treated as all-zero.
const ZERO_NORM: f64 = 1e-12;

/// Ordered token list with its inverse index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.len() < 2 {
            return Err(Error::InvalidVocabulary(format!(
                "vocabulary needs at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        if tokens.len() > u32::MAX as usize {
            return Err(Error::InvalidVocabulary("vocabulary too large".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if let Some(first) = index.insert(tok.clone(), i as u32) {
                return Err(Error::DuplicateToken {
                    token: tok.clone(),
                    line: i + 1,
                    first: first as usize + 1,
                });
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// SHA-256 over the length-prefixed token list. Used as provenance.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.tokens.len() as u64).to_le_bytes());
        for tok in &self.tokens {
            h.update((tok.len() as u32).to_le_bytes());
            h.update(tok.as_bytes());
        }
        h.finalize().into()
    }
}

/// A vocabulary plus a `|V| x d` embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    vocab: Arc<Vocabulary>,
    matrix: DMatrix<f64>,
    preprocessed: bool,
    mapped: bool,
}

impl EmbeddingSet {
    pub fn new(vocab: impl Into<Arc<Vocabulary>>, matrix: DMatrix<f64>) -> Result<Self> {
        let vocab = vocab.into();
        if matrix.nrows() != vocab.len() {
            return Err(Error::DimensionMismatch {
                expected: vocab.len(),
                found: matrix.nrows(),
            });
        }
        if matrix.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "embedding dimension must be positive".into(),
            ));
        }
        check_finite(&matrix)?;
        Ok(EmbeddingSet {
            vocab,
            matrix,
            preprocessed: false,
            mapped: false,
        })
    }

    /// Builds a set from row vectors; handy for small fixtures.
    pub fn from_rows<S: Into<String>>(rows: Vec<(S, Vec<f64>)>) -> Result<Self> {
        let dim = rows.first().map(|r| r.1.len()).unwrap_or(0);
        let mut tokens = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (tok, row) in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            tokens.push(tok.into());
            data.extend(row);
        }
        let vocab = Vocabulary::new(tokens)?;
        let n = vocab.len();
        EmbeddingSet::new(vocab, DMatrix::from_row_slice(n, dim, &data))
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn shared_vocab(&self) -> Arc<Vocabulary> {
        Arc::clone(&self.vocab)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn is_preprocessed(&self) -> bool {
        self.preprocessed
    }

    pub fn is_mapped(&self) -> bool {
        self.mapped
    }

    pub(crate) fn with_matrix(&self, matrix: DMatrix<f64>, mapped: bool) -> Self {
        EmbeddingSet {
            vocab: Arc::clone(&self.vocab),
            matrix,
            preprocessed: self.preprocessed,
            mapped,
        }
    }
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            if !m[(r, c)].is_finite() {
                return Err(Error::NonFinite { row: r, col: c });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Word2VecText,
    BinaryNative,
}

impl EmbeddingFormat {
    /// Guesses from the file extension: `.evae`/`.bin` are binary, all else text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("evae") | Some("bin") => EmbeddingFormat::BinaryNative,
            _ => EmbeddingFormat::Word2VecText,
        }
    }
}

impl std::str::FromStr for EmbeddingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word2vec-text" | "text" => Ok(EmbeddingFormat::Word2VecText),
            "binary-native" | "binary" => Ok(EmbeddingFormat::BinaryNative),
            other => Err(Error::InvalidArgument(format!(
                "unknown embedding format {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Apply Unicode NFC to every token. Off by default: tokens are compared byte-exactly.
    pub nfc: bool,
}

pub fn load_embeddings(path: &Path, format: EmbeddingFormat) -> Result<EmbeddingSet> {
    load_embeddings_with(path, format, LoadOptions::default())
}

pub fn load_embeddings_with(
    path: &Path,
    format: EmbeddingFormat,
    opts: LoadOptions,
) -> Result<EmbeddingSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    match format {
        EmbeddingFormat::Word2VecText => read_word2vec(reader, path, opts),
        EmbeddingFormat::BinaryNative => read_binary(reader, path, opts),
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn normalize_token(tok: &str, opts: LoadOptions) -> String {
    if opts.nfc {
        tok.nfc().collect()
    } else {
        tok.to_owned()
    }
}

fn read_word2vec<R: BufRead>(reader: R, path: &Path, opts: LoadOptions) -> Result<EmbeddingSet> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(parse_err(path, 1, "empty file")),
    };
    let mut fields = header.split_whitespace();
    let (count, dim) = match (fields.next(), fields.next(), fields.next()) {
        (Some(c), Some(d), None) => {
            let count: usize = c
                .parse()
                .map_err(|_| parse_err(path, 1, format!("malformed header {header:?}")))?;
            let dim: usize = d
                .parse()
                .map_err(|_| parse_err(path, 1, format!("malformed header {header:?}")))?;
            (count, dim)
        }
        _ => return Err(parse_err(path, 1, format!("malformed header {header:?}"))),
    };
    if dim == 0 {
        return Err(parse_err(path, 1, "dimension must be positive"));
    }

    let mut tokens = Vec::with_capacity(count);
    let mut seen: HashMap<String, usize> = HashMap::with_capacity(count);
    let mut data = Vec::with_capacity(count * dim);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches(['\r', ' ']);
        if line.is_empty() {
            continue;
        }
        if tokens.len() == count {
            return Err(parse_err(
                path,
                lineno,
                format!("more rows than the header count {count}"),
            ));
        }
        let mut parts = line.split(' ');
        let tok = parts.next().unwrap_or_default();
        if tok.is_empty() {
            return Err(parse_err(path, lineno, "empty token"));
        }
        let tok = normalize_token(tok, opts);
        let mut n = 0;
        for v in parts {
            let x: f64 = v
                .parse::<f32>()
                .map_err(|_| parse_err(path, lineno, format!("invalid number {v:?}")))?
                .into();
            if !x.is_finite() {
                return Err(parse_err(path, lineno, format!("non-finite value {v:?}")));
            }
            data.push(x);
            n += 1;
        }
        if n != dim {
            return Err(parse_err(
                path,
                lineno,
                format!("dimension mismatch: expected {dim} values, found {n}"),
            ));
        }
        if let Some(first) = seen.insert(tok.clone(), lineno) {
            return Err(Error::DuplicateToken {
                token: tok,
                line: lineno,
                first,
            });
        }
        tokens.push(tok);
    }
    if tokens.len() != count {
        return Err(parse_err(
            path,
            tokens.len() + 2,
            format!("header declares {count} rows, found {}", tokens.len()),
        ));
    }
    let vocab = Vocabulary::new(tokens)?;
    EmbeddingSet::new(vocab, DMatrix::from_row_slice(count, dim, &data))
}

fn read_binary<R: Read>(mut r: R, path: &Path, opts: LoadOptions) -> Result<EmbeddingSet> {
    let corrupt = |m: &str| Error::corrupt(path, m);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
    if &magic != EMBEDDING_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| corrupt("truncated header"))?;
    if version != EMBEDDING_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let count = r
        .read_u64::<LittleEndian>()
        .map_err(|_| corrupt("truncated header"))? as usize;
    let dim = r
        .read_u32::<LittleEndian>()
        .map_err(|_| corrupt("truncated header"))? as usize;
    if dim == 0 {
        return Err(corrupt("zero dimension"));
    }

    let mut tokens = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        let len = r
            .read_u32::<LittleEndian>()
            .map_err(|_| corrupt("truncated token table"))? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)
            .map_err(|_| corrupt("truncated token table"))?;
        let tok = String::from_utf8(buf).map_err(|_| corrupt("token is not UTF-8"))?;
        tokens.push(normalize_token(&tok, opts));
    }
    let mut data = vec![0f32; count * dim];
    r.read_f32_into::<LittleEndian>(&mut data)
        .map_err(|_| corrupt("truncated matrix"))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(corrupt("trailing bytes"));
    }
    let data: Vec<f64> = data.into_iter().map(f64::from).collect();
    let vocab = Vocabulary::new(tokens)?;
    EmbeddingSet::new(vocab, DMatrix::from_row_slice(count, dim, &data))
}

/// Writes the binary-native format. Values are rounded to `f32`.
pub fn save_embeddings(e: &EmbeddingSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|err| Error::io(path, err))?;
    let mut w = BufWriter::new(file);
    write_binary(e, &mut w).map_err(|err| Error::io(path, err))?;
    w.flush().map_err(|err| Error::io(path, err))
}

fn write_binary<W: Write>(e: &EmbeddingSet, w: &mut W) -> std::io::Result<()> {
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_u32::<LittleEndian>(EMBEDDING_VERSION)?;
    w.write_u64::<LittleEndian>(e.len() as u64)?;
    w.write_u32::<LittleEndian>(e.dim() as u32)?;
    for tok in e.vocab().tokens() {
        w.write_u32::<LittleEndian>(tok.len() as u32)?;
        w.write_all(tok.as_bytes())?;
    }
    for r in 0..e.len() {
        for c in 0..e.dim() {
            w.write_f32::<LittleEndian>(e.matrix[(r, c)] as f32)?;
        }
    }
    Ok(())
}

/// Writes word2vec text. Mostly useful for fixtures.
pub fn save_word2vec(e: &EmbeddingSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|err| Error::io(path, err))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        writeln!(w, "{} {}", e.len(), e.dim())?;
        for (r, tok) in e.vocab().tokens().iter().enumerate() {
            write!(w, "{tok}")?;
            for c in 0..e.dim() {
                write!(w, " {}", e.matrix[(r, c)] as f32)?;
            }
            writeln!(w)?;
        }
        w.flush()
    })();
    res.map_err(|err| Error::io(path, err))
}

/// Reads a plain vocabulary file, one token per line.
pub fn load_vocabulary(path: &Path) -> Result<Vocabulary> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tokens = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if !line.is_empty() {
            tokens.push(line.to_owned());
        }
    }
    Vocabulary::new(tokens)
}

/// Result of [`preprocess`]: the normalized set and the rows that are all-zero.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub set: EmbeddingSet,
    pub zero_rows: Vec<usize>,
}

/// Length-normalize, mean-center, length-normalize.
///
/// All-zero rows are left at zero, excluded from the column mean, and
/// reported in [`Preprocessed::zero_rows`].
pub fn preprocess(e: &EmbeddingSet) -> Preprocessed {
    let mut m = e.matrix.clone();
    let mut zero = vec![false; m.nrows()];
    normalize_rows(&mut m, &mut zero);

    let live = zero.iter().filter(|z| !**z).count();
    if live > 0 {
        let mut mean = vec![0.0; m.ncols()];
        for r in (0..m.nrows()).filter(|&r| !zero[r]) {
            for (c, acc) in mean.iter_mut().enumerate() {
                *acc += m[(r, c)];
            }
        }
        for acc in &mut mean {
            *acc /= live as f64;
        }
        for r in (0..m.nrows()).filter(|&r| !zero[r]) {
            for (c, mu) in mean.iter().enumerate() {
                m[(r, c)] -= mu;
            }
        }
    }
    normalize_rows(&mut m, &mut zero);

    let zero_rows: Vec<usize> = zero
        .iter()
        .enumerate()
        .filter_map(|(i, z)| z.then_some(i))
        .collect();
    if !zero_rows.is_empty() {
        log::warn!("{} all-zero embedding rows kept as zero", zero_rows.len());
    }
    Preprocessed {
        set: EmbeddingSet {
            vocab: Arc::clone(&e.vocab),
            matrix: m,
            preprocessed: true,
            mapped: e.mapped,
        },
        zero_rows,
    }
}

fn normalize_rows(m: &mut DMatrix<f64>, zero: &mut [bool]) {
    for r in 0..m.nrows() {
        let norm = m.row(r).norm();
        if norm <= ZERO_NORM {
            m.row_mut(r).fill(0.0);
            zero[r] = true;
        } else {
            m.row_mut(r).unscale_mut(norm);
        }
    }
}
