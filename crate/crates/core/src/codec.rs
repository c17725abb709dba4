//! Binary persistence for galleries (`FTFG`) and query sets (`FTFQ`).
//!
//! All integers are little-endian `u32`, all reals little-endian `f32`,
//! identifiers are a `u32` byte length followed by UTF-8 bytes.
//!
//! ```text
//! FTFG | version=1 | d | n_entries | per entry:
//!     id | n_c | n_f | H^c (n_c*d) | H^f (n_f*d) | v1 (d)
//! FTFQ | version=1 | d | n_queries | per query:
//!     id | n_t | T (n_t*d) | t (d) | n_gt | n_gt ids
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::gallery::{Gallery, GalleryEntry, QueryText};
use crate::numerics::{DenseMatrix, DenseVector};

pub const GALLERY_MAGIC: [u8; 4] = *b"FTFG";
pub const QUERY_MAGIC: [u8; 4] = *b"FTFQ";
pub const FORMAT_VERSION: u32 = 1;

/// Little-endian byte sink.
#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn with_header(magic: [u8; 4]) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(&magic);
        w.u32(FORMAT_VERSION);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn count(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("count exceeds u32 range"));
    }

    pub fn id(&mut self, id: &str) {
        self.count(id.len());
        self.buf.extend_from_slice(id.as_bytes());
    }

    pub fn f32s(&mut self, vals: &[f32]) {
        self.buf.reserve(vals.len() * 4);
        for v in vals {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

/// Marker for a read past the end of the buffer; mapped to a [`FormatError`] by the caller.
#[derive(Debug)]
pub struct Short;

/// Little-endian cursor over an in-memory file image.
#[derive(Debug)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    /// Checks magic and version and leaves the cursor after them.
    pub fn expect_header(buf: &'a [u8], magic: [u8; 4]) -> std::result::Result<Self, FormatError> {
        let mut r = Self::new(buf);
        let found = r.take(4).map_err(|_| FormatError::TruncatedHeader)?;
        let found: [u8; 4] = found.try_into().unwrap();
        if found != magic {
            return Err(FormatError::BadMagic {
                expected: magic,
                found,
            });
        }
        let version = r.u32().map_err(|_| FormatError::TruncatedHeader)?;
        if version != FORMAT_VERSION {
            return Err(FormatError::Version {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        Ok(r)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], Short> {
        if self.remaining() < n {
            return Err(Short);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> std::result::Result<u32, Short> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn count(&mut self) -> std::result::Result<usize, Short> {
        self.u32().map(|v| v as usize)
    }

    pub fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, Short> {
        let bytes = self.take(n.checked_mul(4).ok_or(Short)?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Reads an identifier; `Ok(None)` means the bytes were not UTF-8.
    pub fn id(&mut self) -> std::result::Result<Option<String>, Short> {
        let n = self.count()?;
        let bytes = self.take(n)?;
        Ok(String::from_utf8(bytes.to_vec()).ok())
    }
}

/// Reads `declared` records, distinguishing a clean stop at a record boundary
/// (count mismatch) from a cut inside a record (truncation).
pub(crate) fn read_records<'a, R>(
    r: &mut Reader<'a>,
    declared: usize,
    mut record: impl FnMut(&mut Reader<'a>, usize) -> std::result::Result<Result<R>, Short>,
) -> Result<Vec<R>> {
    let mut out = Vec::with_capacity(declared.min(1 << 16));
    for index in 0..declared {
        if r.remaining() == 0 {
            return Err(FormatError::CountMismatch {
                declared,
                found: index,
            }
            .into());
        }
        match record(r, index) {
            Ok(rec) => out.push(rec?),
            Err(Short) => return Err(FormatError::TruncatedEntry { index }.into()),
        }
    }
    if r.remaining() != 0 {
        return Err(FormatError::TrailingBytes(r.remaining()).into());
    }
    Ok(out)
}

fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<DenseMatrix<f32>> {
    DenseMatrix::new(rows, cols, data)
}

pub fn encode_gallery(g: &Gallery) -> Vec<u8> {
    let mut w = Writer::with_header(GALLERY_MAGIC);
    w.count(g.dim());
    w.count(g.len());
    for e in g.entries() {
        w.id(e.id());
        w.count(e.coarse_tokens().rows());
        w.count(e.fine_tokens().rows());
        w.f32s(e.coarse_tokens().as_slice());
        w.f32s(e.fine_tokens().as_slice());
        w.f32s(e.recall_embedding().as_slice());
    }
    w.into_bytes()
}

pub fn decode_gallery(buf: &[u8]) -> Result<Gallery> {
    let mut r = Reader::expect_header(buf, GALLERY_MAGIC)?;
    let d = r.count().map_err(|_| FormatError::TruncatedHeader)?;
    let n = r.count().map_err(|_| FormatError::TruncatedHeader)?;
    let entries = read_records(&mut r, n, |r, index| {
        let id = r.id()?;
        let nc = r.count()?;
        let nf = r.count()?;
        let hc = r.f32s(nc.saturating_mul(d))?;
        let hf = r.f32s(nf.saturating_mul(d))?;
        let v1 = r.f32s(d)?;
        Ok((|| {
            let id = id.ok_or(FormatError::InvalidUtf8 { index })?;
            GalleryEntry::from_parts(
                id,
                matrix(nc, d, hc)?,
                matrix(nf, d, hf)?,
                DenseVector::new(v1)?,
            )
        })())
    })?;
    Gallery::from_entries(d, entries)
}

pub fn save_gallery(g: &Gallery, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_gallery(g)).map_err(Error::from)
}

pub fn load_gallery(path: impl AsRef<Path>) -> Result<Gallery> {
    decode_gallery(&fs::read(path)?)
}

pub fn encode_queries(dim: usize, queries: &[QueryText]) -> Result<Vec<u8>> {
    let mut w = Writer::with_header(QUERY_MAGIC);
    w.count(dim);
    w.count(queries.len());
    for q in queries {
        if q.dim() != dim {
            return Err(Error::Shape(format!(
                "query {:?} has d={}, file d={dim}",
                q.id(),
                q.dim()
            )));
        }
        w.id(q.id());
        w.count(q.token_embeddings().rows());
        w.f32s(q.token_embeddings().as_slice());
        w.f32s(q.global_embedding().as_slice());
        w.count(q.ground_truth_ids().len());
        for gt in q.ground_truth_ids() {
            w.id(gt);
        }
    }
    Ok(w.into_bytes())
}

/// Decodes a query file, returning the declared dimension alongside the queries.
pub fn decode_queries(buf: &[u8]) -> Result<(usize, Vec<QueryText>)> {
    let mut r = Reader::expect_header(buf, QUERY_MAGIC)?;
    let d = r.count().map_err(|_| FormatError::TruncatedHeader)?;
    let n = r.count().map_err(|_| FormatError::TruncatedHeader)?;
    let queries = read_records(&mut r, n, |r, index| {
        let id = r.id()?;
        let nt = r.count()?;
        let tokens = r.f32s(nt.saturating_mul(d))?;
        let global = r.f32s(d)?;
        let ngt = r.count()?;
        let mut gts = Vec::with_capacity(ngt.min(1 << 12));
        for _ in 0..ngt {
            gts.push(r.id()?);
        }
        Ok((|| {
            let id = id.ok_or(FormatError::InvalidUtf8 { index })?;
            let gts = gts
                .into_iter()
                .collect::<Option<Vec<_>>>()
                .ok_or(FormatError::InvalidUtf8 { index })?;
            QueryText::new(id, matrix(nt, d, tokens)?, DenseVector::new(global)?, gts)
        })())
    })?;
    Ok((d, queries))
}

pub fn save_queries(dim: usize, queries: &[QueryText], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_queries(dim, queries)?).map_err(Error::from)
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<QueryText>> {
    Ok(decode_queries(&fs::read(path)?)?.1)
}
