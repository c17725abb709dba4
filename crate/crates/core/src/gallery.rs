//! Multi-granular image entries, text queries and the recall-embedding aggregation.

use std::collections::{HashMap, HashSet};

use serde::Serialize;

use crate::error::{invalid, shape, Error, Result};
use crate::numerics::{l2_normalize_f64, DenseMatrix, DenseVector, Real, DEFAULT_EPS};

const UNIT_NORM_TOL: f64 = 1e-5;

/// How coarse and fine tokens are folded into the text-agnostic recall embedding.
///
/// `Both` mean-pools each granularity, averages the two pooled vectors and
/// normalizes. The single-granularity variants exist for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Both,
    CoarseOnly,
    FineOnly,
}

impl Aggregation {
    /// Weights applied to the pooled coarse and fine means.
    pub fn weights(self) -> (f64, f64) {
        match self {
            Aggregation::Both => (0.5, 0.5),
            Aggregation::CoarseOnly => (1.0, 0.0),
            Aggregation::FineOnly => (0.0, 1.0),
        }
    }

    pub fn aggregate<T: Real>(
        self,
        coarse: &DenseMatrix<T>,
        fine: &DenseMatrix<T>,
    ) -> Result<DenseVector<T>> {
        if coarse.cols() != fine.cols() {
            return Err(shape(format!(
                "coarse tokens have d={}, fine tokens d={}",
                coarse.cols(),
                fine.cols()
            )));
        }
        if coarse.rows() == 0 || fine.rows() == 0 {
            return Err(shape("aggregation needs at least one coarse and one fine token"));
        }
        let mc = coarse.mean_row()?;
        let mf = fine.mean_row()?;
        let (wc, wf) = self.weights();
        let mixed: Vec<f64> = mc.iter().zip(&mf).map(|(c, f)| wc * c + wf * f).collect();
        DenseVector::from_f64(&l2_normalize_f64(&mixed, DEFAULT_EPS))
    }
}

/// Recall embedding `normalize((mean(H^c) + mean(H^f)) / 2)`.
pub fn aggregate_recall_embedding<T: Real>(
    coarse: &DenseMatrix<T>,
    fine: &DenseMatrix<T>,
) -> Result<DenseVector<T>> {
    Aggregation::Both.aggregate(coarse, fine)
}

/// One indexed image: coarse tokens, fine tokens and the recall embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry<T: Real = f32> {
    id: String,
    coarse_tokens: DenseMatrix<T>,
    fine_tokens: DenseMatrix<T>,
    recall_embedding: DenseVector<T>,
}

impl<T: Real> GalleryEntry<T> {
    /// Builds an entry and derives its recall embedding.
    pub fn new(
        id: impl Into<String>,
        coarse_tokens: DenseMatrix<T>,
        fine_tokens: DenseMatrix<T>,
        aggregation: Aggregation,
    ) -> Result<Self> {
        let v1 = aggregation.aggregate(&coarse_tokens, &fine_tokens)?;
        Self::from_parts(id.into(), coarse_tokens, fine_tokens, v1)
    }

    /// Assembles an entry from stored parts, checking every invariant.
    pub fn from_parts(
        id: String,
        coarse_tokens: DenseMatrix<T>,
        fine_tokens: DenseMatrix<T>,
        recall_embedding: DenseVector<T>,
    ) -> Result<Self> {
        if id.is_empty() {
            return Err(invalid("gallery id must be non-empty"));
        }
        let d = coarse_tokens.cols();
        if fine_tokens.cols() != d || recall_embedding.dim() != d {
            return Err(shape(format!(
                "entry {id:?}: coarse d={d}, fine d={}, v1 d={}",
                fine_tokens.cols(),
                recall_embedding.dim()
            )));
        }
        if coarse_tokens.rows() == 0 || fine_tokens.rows() == 0 {
            return Err(invalid(format!("entry {id:?}: token matrices must be non-empty")));
        }
        if fine_tokens.rows() < coarse_tokens.rows() {
            return Err(invalid(format!(
                "entry {id:?}: {} fine tokens is fewer than {} coarse tokens",
                fine_tokens.rows(),
                coarse_tokens.rows()
            )));
        }
        let n = recall_embedding.norm();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(invalid(format!("entry {id:?}: recall embedding norm {n}")));
        }
        Ok(Self {
            id,
            coarse_tokens,
            fine_tokens,
            recall_embedding,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn coarse_tokens(&self) -> &DenseMatrix<T> {
        &self.coarse_tokens
    }

    pub fn fine_tokens(&self) -> &DenseMatrix<T> {
        &self.fine_tokens
    }

    pub fn recall_embedding(&self) -> &DenseVector<T> {
        &self.recall_embedding
    }

    pub fn dim(&self) -> usize {
        self.recall_embedding.dim()
    }
}

/// An immutable, ordered collection of entries sharing one embedding dimension.
#[derive(Debug, Clone)]
pub struct Gallery<T: Real = f32> {
    dim: usize,
    entries: Vec<GalleryEntry<T>>,
    by_id: HashMap<String, usize>,
}

impl<T: Real> PartialEq for Gallery<T> {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.entries == other.entries
    }
}

impl<T: Real> Gallery<T> {
    pub fn from_entries(dim: usize, entries: Vec<GalleryEntry<T>>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.dim() != dim {
                return Err(shape(format!(
                    "entry {:?} has d={}, gallery d={dim}",
                    e.id,
                    e.dim()
                )));
            }
            if by_id.insert(e.id.clone(), i).is_some() {
                return Err(invalid(format!("duplicate gallery id {:?}", e.id)));
            }
        }
        Ok(Self {
            dim,
            entries,
            by_id,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[GalleryEntry<T>] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> Option<&GalleryEntry<T>> {
        self.entries.get(index)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn lookup(&self, id: &str) -> Result<&GalleryEntry<T>> {
        self.index_of(id)
            .map(|i| &self.entries[i])
            .ok_or_else(|| Error::Lookup(id.to_string()))
    }
}

/// Raw input for [`build_gallery`]: `(id, coarse tokens, fine tokens)`.
pub type RawEntry<T> = (String, DenseMatrix<T>, DenseMatrix<T>);

/// Computes every recall embedding and assembles the gallery in input order.
pub fn build_gallery<T: Real>(dim: usize, raw: Vec<RawEntry<T>>) -> Result<Gallery<T>> {
    build_gallery_with(dim, raw, Aggregation::Both)
}

pub fn build_gallery_with<T: Real>(
    dim: usize,
    raw: Vec<RawEntry<T>>,
    aggregation: Aggregation,
) -> Result<Gallery<T>> {
    let mut seen = HashSet::with_capacity(raw.len());
    let mut entries = Vec::with_capacity(raw.len());
    for (id, hc, hf) in raw {
        if hc.cols() != dim || hf.cols() != dim {
            return Err(shape(format!(
                "entry {id:?}: token dims ({}, {}) differ from gallery d={dim}",
                hc.cols(),
                hf.cols()
            )));
        }
        if !seen.insert(id.clone()) {
            return Err(invalid(format!("duplicate gallery id {id:?}")));
        }
        entries.push(GalleryEntry::new(id, hc, hf, aggregation)?);
    }
    Gallery::from_entries(dim, entries)
}

/// A text query: token embeddings `T`, global embedding `t` and optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryText<T: Real = f32> {
    id: String,
    token_embeddings: DenseMatrix<T>,
    global_embedding: DenseVector<T>,
    ground_truth_ids: Vec<String>,
}

impl<T: Real> QueryText<T> {
    pub fn new(
        id: impl Into<String>,
        token_embeddings: DenseMatrix<T>,
        global_embedding: DenseVector<T>,
        ground_truth_ids: Vec<String>,
    ) -> Result<Self> {
        let id = id.into();
        if token_embeddings.rows() == 0 {
            return Err(invalid(format!("query {id:?} has no tokens")));
        }
        if token_embeddings.cols() != global_embedding.dim() {
            return Err(shape(format!(
                "query {id:?}: token d={}, global d={}",
                token_embeddings.cols(),
                global_embedding.dim()
            )));
        }
        let n = global_embedding.norm();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(invalid(format!("query {id:?}: global embedding norm {n}")));
        }
        Ok(Self {
            id,
            token_embeddings,
            global_embedding,
            ground_truth_ids,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn token_embeddings(&self) -> &DenseMatrix<T> {
        &self.token_embeddings
    }

    pub fn global_embedding(&self) -> &DenseVector<T> {
        &self.global_embedding
    }

    pub fn ground_truth_ids(&self) -> &[String] {
        &self.ground_truth_ids
    }

    pub fn dim(&self) -> usize {
        self.global_embedding.dim()
    }
}

/// Patch grid sizes for the two image granularities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GranularitySpec {
    pub coarse_tokens: usize,
    pub fine_tokens: usize,
}

/// Boundary between raw inputs and token embeddings.
///
/// Any encoder pair that yields `(H^c, H^f)` for images and `(T, t)` for
/// texts in a shared dimension can feed the gallery and query builders.
pub trait Encoder<T: Real> {
    type Image: ?Sized;
    type Text: ?Sized;

    fn dim(&self) -> usize;

    fn granularity(&self) -> GranularitySpec;

    fn encode_image(&self, image: &Self::Image) -> Result<(DenseMatrix<T>, DenseMatrix<T>)>;

    fn encode_text(&self, text: &Self::Text) -> Result<(DenseMatrix<T>, DenseVector<T>)>;
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: usize, cols: usize, v: &[f64]) -> DenseMatrix<f32> {
        DenseMatrix::from_f64(rows, cols, v).unwrap()
    }

    fn close(a: &[f32], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (*x as f64 - y).abs() < tol)
    }

    #[test]
    fn aggregation_examples() {
        let v = aggregate_recall_embedding(&m(1, 2, &[1., 0.]), &m(1, 2, &[0., 1.])).unwrap();
        assert!(close(v.as_slice(), &[FRAC_1_SQRT_2; 2], 1e-5));
        let h = m(2, 2, &[2., 0., 2., 0.]);
        let v = aggregate_recall_embedding(&h, &h).unwrap();
        assert_eq!(v.as_slice(), &[1.0, 0.0]);
        // m_c = [0.5, 0.5], m_f = [2/3, 2/3]
        let v = aggregate_recall_embedding(
            &m(2, 2, &[1., 0., 0., 1.]),
            &m(3, 2, &[1., 1., 3., 1., -2., 0.]),
        )
        .unwrap();
        let half = (0.5 + 2.0 / 3.0) / 2.0;
        let n = (2.0f64 * half * half).sqrt();
        assert!(close(v.as_slice(), &[half / n, half / n], 1e-5));
    }

    #[test]
    fn aggregation_rejects_empty_and_mismatched() {
        let empty = DenseMatrix::<f32>::zeros(0, 2);
        assert!(matches!(
            aggregate_recall_embedding(&empty, &m(1, 2, &[1., 0.])),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            aggregate_recall_embedding(&m(1, 3, &[1., 0., 0.]), &m(1, 2, &[1., 0.])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn aggregation_is_row_permutation_invariant() {
        let hc = m(2, 3, &[1., 2., 3., -1., 0.5, 2.]);
        let hf = m(3, 3, &[0., 1., 1., 2., 2., -1., 1., 0., 0.]);
        let hf_perm = m(3, 3, &[1., 0., 0., 0., 1., 1., 2., 2., -1.]);
        let a = aggregate_recall_embedding(&hc, &hf).unwrap();
        let b = aggregate_recall_embedding(&hc, &hf_perm).unwrap();
        assert!(a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| (x - y).abs() < 1e-6));
    }

    fn random_raw(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<RawEntry<f32>> {
        (0..n)
            .map(|i| {
                let hc: Vec<f32> = (0..4 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let hf: Vec<f32> = (0..16 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
                (
                    format!("img{i:03}"),
                    DenseMatrix::new(4, d, hc).unwrap(),
                    DenseMatrix::new(16, d, hf).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn build_gallery_cases() {
        let g = build_gallery::<f32>(8, vec![]).unwrap();
        assert!(g.is_empty());
        assert_eq!(g.dim(), 8);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let one = build_gallery(8, random_raw(&mut rng, 1, 8)).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one.entries()[0].recall_embedding().norm() - 1.0).abs() < 1e-5);

        let raw = random_raw(&mut ChaCha8Rng::seed_from_u64(3), 10, 8);
        let a = build_gallery(8, raw.clone()).unwrap();
        let b = build_gallery(8, raw).unwrap();
        for (x, y) in a.entries().iter().zip(b.entries()) {
            assert!((x.recall_embedding().norm() - 1.0).abs() < 1e-5);
            let xb: Vec<u32> = x.recall_embedding().as_slice().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.recall_embedding().as_slice().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        assert_eq!(a.entries()[3].id(), "img003");
    }

    #[test]
    fn build_gallery_rejects_duplicates_and_dim_mismatch() {
        let mut raw = random_raw(&mut ChaCha8Rng::seed_from_u64(5), 2, 4);
        raw[1].0 = raw[0].0.clone();
        assert!(matches!(build_gallery(4, raw), Err(Error::Validation(_))));
        let raw = random_raw(&mut ChaCha8Rng::seed_from_u64(5), 2, 4);
        assert!(matches!(build_gallery(5, raw), Err(Error::Shape(_))));
    }

    #[test]
    fn entry_invariants() {
        let hc = m(2, 2, &[1., 0., 0., 1.]);
        let hf = m(1, 2, &[1., 0.]);
        assert!(matches!(
            GalleryEntry::new("x", hc.clone(), hf, Aggregation::Both),
            Err(Error::Validation(_))
        ));
        let v = DenseVector::from_f64(&[2.0, 0.0]).unwrap();
        assert!(GalleryEntry::from_parts("x".into(), hc.clone(), hc.clone(), v).is_err());
        assert!(GalleryEntry::new("", hc.clone(), hc, Aggregation::Both).is_err());
    }

    #[test]
    fn query_requires_tokens_and_unit_global() {
        let t = DenseVector::<f32>::from_f64(&[1., 0.]).unwrap();
        assert!(matches!(
            QueryText::new("q", DenseMatrix::zeros(0, 2), t.clone(), vec![]),
            Err(Error::Validation(_))
        ));
        let not_unit = DenseVector::<f32>::from_f64(&[1., 1.]).unwrap();
        assert!(QueryText::new("q", m(1, 2, &[1., 0.]), not_unit, vec![]).is_err());
        assert!(QueryText::new("q", m(1, 2, &[1., 0.]), t, vec!["a".into()]).is_ok());
    }
}
