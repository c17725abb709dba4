//! Stage two: the parameter-free text-guided interaction block and rerank scoring.
//!
//! For text tokens `T` (`N_t × d`) and image tokens `H` (`N_v × d`):
//!
//! ```text
//! S  = T Hᵀ                                   (N_t × N_v)
//! S̃  = softmax over each row of S / τ
//! Ŝ  = S̃ with every column divided by its sum (column-stochastic)
//! V  = Ŝᵀ T                                   (N_v × d)
//! v  = normalize(mean of the rows of V)
//! ```
//!
//! Coarse tokens give `v2`, fine tokens give `v3`, and a candidate scores
//! `(1 - λ) cos(t, v2) + λ cos(t, v3)`.

use serde::Serialize;

use crate::error::{param, shape, Result};
use crate::gallery::{Gallery, QueryText};
use crate::numerics::{
    cosine_slices, l2_normalize_f64, matmul_nt, matmul_tn, rank_order,
    DenseMatrix, DenseVector, Real, DEFAULT_EPS,
};
use crate::recall::CandidateSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BtibConfig {
    /// Row-softmax temperature.
    pub tau: f64,
    /// Weight of the fine-granularity score.
    pub lambda: f64,
    pub eps: f64,
}

impl Default for BtibConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda: 0.5,
            eps: DEFAULT_EPS,
        }
    }
}

impl BtibConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(param(format!("tau must be > 0, got {}", self.tau)));
        }
        check_lambda(self.lambda)?;
        if !(self.eps > 0.0) {
            return Err(param(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(param(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Text-guided coarse (`v2`) and fine (`v3`) embeddings of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct BtibOutput<T: Real = f32> {
    pub v2: DenseVector<T>,
    pub v3: DenseVector<T>,
}

/// `S = T Hᵀ`.
pub fn similarity_matrix<T: Real>(t: &DenseMatrix<T>, h: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    matmul_nt(t, h)
}

/// Row softmax `S̃` and its column-normalized form `Ŝ`, row-major in `f64`.
///
/// The column normalization runs in log space so a column whose softmax mass
/// is far below `f64` precision still sums to one.
fn dual_normalize_f64<T: Real>(s: &DenseMatrix<T>, tau: f64) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = (s.rows(), s.cols());
    let mut log_soft = vec![0.0f64; rows * cols];
    for i in 0..rows {
        let row = s.row(i);
        let max = row.iter().map(|v| v.widen()).fold(f64::NEG_INFINITY, f64::max);
        let out = &mut log_soft[i * cols..(i + 1) * cols];
        for (o, v) in out.iter_mut().zip(row) {
            *o = (v.widen() - max) / tau;
        }
        let log_z = out.iter().map(|x| x.exp()).sum::<f64>().ln();
        out.iter_mut().for_each(|o| *o -= log_z);
    }
    let mut col_log = vec![f64::NEG_INFINITY; cols];
    for (j, cl) in col_log.iter_mut().enumerate() {
        let max = (0..rows).map(|i| log_soft[i * cols + j]).fold(f64::NEG_INFINITY, f64::max);
        if max.is_finite() {
            let sum: f64 = (0..rows).map(|i| (log_soft[i * cols + j] - max).exp()).sum();
            *cl = max + sum.ln();
        }
    }
    let soft = log_soft.iter().map(|l| l.exp()).collect();
    let shat = log_soft
        .iter()
        .enumerate()
        .map(|(idx, l)| {
            let c = col_log[idx % cols];
            if c.is_finite() {
                (l - c).exp()
            } else {
                0.0
            }
        })
        .collect();
    (soft, shat)
}

/// Row softmax followed by column normalization; every column of the result sums to one.
pub fn dual_normalize<T: Real>(s: &DenseMatrix<T>, tau: f64) -> Result<DenseMatrix<T>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(param(format!("softmax temperature must be > 0, got {tau}")));
    }
    let (_, shat) = dual_normalize_f64(s, tau);
    DenseMatrix::new(s.rows(), s.cols(), shat.into_iter().map(T::narrow).collect())
}

fn check_tokens<T: Real>(t: &DenseMatrix<T>, h: &DenseMatrix<T>) -> Result<()> {
    if t.cols() != h.cols() {
        return Err(shape(format!(
            "text tokens have d={}, image tokens d={}",
            t.cols(),
            h.cols()
        )));
    }
    if t.rows() == 0 || h.rows() == 0 {
        return Err(shape("interaction needs at least one text and one image token"));
    }
    Ok(())
}

/// Dual-normalized aggregation of `T` into image-token slots, mean-pooled and normalized.
pub fn text_guided_embed<T: Real>(
    t: &DenseMatrix<T>,
    h: &DenseMatrix<T>,
    tau: f64,
    eps: f64,
) -> Result<DenseVector<T>> {
    check_tokens(t, h)?;
    let s = similarity_matrix(t, h)?;
    let s_hat = dual_normalize(&s, tau)?;
    let v = matmul_tn(&s_hat, t)?;
    let pooled = v.mean_row()?;
    DenseVector::from_f64(&l2_normalize_f64(&pooled, eps))
}

pub fn btib<T: Real>(
    coarse: &DenseMatrix<T>,
    fine: &DenseMatrix<T>,
    text: &DenseMatrix<T>,
    cfg: &BtibConfig,
) -> Result<BtibOutput<T>> {
    Ok(BtibOutput {
        v2: text_guided_embed(text, coarse, cfg.tau, cfg.eps)?,
        v3: text_guided_embed(text, fine, cfg.tau, cfg.eps)?,
    })
}

/// `(1 - λ) cos(t, v2) + λ cos(t, v3)`.
pub fn rerank_score<T: Real>(t_q: &DenseVector<T>, out: &BtibOutput<T>, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if out.v2.dim() != t_q.dim() || out.v3.dim() != t_q.dim() {
        return Err(shape("rerank embeddings and query differ in dimension"));
    }
    let c2 = cosine_slices(t_q.as_slice(), out.v2.as_slice(), DEFAULT_EPS);
    let c3 = cosine_slices(t_q.as_slice(), out.v3.as_slice(), DEFAULT_EPS);
    Ok((1.0 - lambda) * c2 + lambda * c3)
}

/// Source of the rerank embeddings.
///
/// `PooledMeans` ignores the text tokens and uses normalized mean image tokens
/// in place of `v2`/`v3`; it is the no-interaction ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interaction {
    #[default]
    Btib,
    PooledMeans,
}

impl Interaction {
    pub fn embed<T: Real>(
        self,
        coarse: &DenseMatrix<T>,
        fine: &DenseMatrix<T>,
        text: &DenseMatrix<T>,
        cfg: &BtibConfig,
    ) -> Result<BtibOutput<T>> {
        match self {
            Interaction::Btib => btib(coarse, fine, text, cfg),
            Interaction::PooledMeans => Ok(BtibOutput {
                v2: DenseVector::from_f64(&l2_normalize_f64(&coarse.mean_row()?, cfg.eps))?,
                v3: DenseVector::from_f64(&l2_normalize_f64(&fine.mean_row()?, cfg.eps))?,
            }),
        }
    }

    /// Rerank score of one image for one text.
    pub fn score<T: Real>(
        self,
        coarse: &DenseMatrix<T>,
        fine: &DenseMatrix<T>,
        text_tokens: &DenseMatrix<T>,
        text_global: &DenseVector<T>,
        cfg: &BtibConfig,
    ) -> Result<f64> {
        let out = self.embed(coarse, fine, text_tokens, cfg)?;
        rerank_score(text_global, &out, cfg.lambda)
    }
}

/// Rerank output row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedResult {
    pub id: String,
    pub index: usize,
    /// Rerank score `s(I)`.
    pub score: f64,
    /// Stage-one score and 1-based rank; absent when no recall stage ran.
    pub recall_score: Option<f64>,
    pub recall_rank: Option<usize>,
    /// 1-based position after reranking.
    pub rerank_rank: usize,
}

/// Sorts results by score (descending, id ascending) and assigns rerank ranks.
pub(crate) fn finalize_ranking(mut results: Vec<RankedResult>) -> Vec<RankedResult> {
    results.sort_by(|a, b| rank_order(&(a.id.as_str(), a.score), &(b.id.as_str(), b.score)));
    for (i, r) in results.iter_mut().enumerate() {
        r.rerank_rank = i + 1;
    }
    results
}

pub fn rerank_candidates<T: Real>(
    gallery: &Gallery<T>,
    cands: &CandidateSet,
    query: &QueryText<T>,
    cfg: &BtibConfig,
) -> Result<Vec<RankedResult>> {
    rerank_with(gallery, cands, query, cfg, Interaction::Btib)
}

pub fn rerank_with<T: Real>(
    gallery: &Gallery<T>,
    cands: &CandidateSet,
    query: &QueryText<T>,
    cfg: &BtibConfig,
    interaction: Interaction,
) -> Result<Vec<RankedResult>> {
    cfg.validate()?;
    let mut results = Vec::with_capacity(cands.len());
    for (pos, c) in cands.candidates.iter().enumerate() {
        let index = gallery.index_of(&c.id).ok_or_else(|| crate::Error::Lookup(c.id.clone()))?;
        let e = &gallery.entries()[index];
        let score = interaction.score(
            e.coarse_tokens(),
            e.fine_tokens(),
            query.token_embeddings(),
            query.global_embedding(),
            cfg,
        )?;
        results.push(RankedResult {
            id: c.id.clone(),
            index,
            score,
            recall_score: Some(c.score),
            recall_rank: Some(pos + 1),
            rerank_rank: 0,
        });
    }
    Ok(finalize_ranking(results))
}

/// Gradients of a scalar objective with respect to the text and image tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrads {
    /// Row-major, same shape as the text tokens.
    pub text: Vec<f64>,
    /// Row-major, same shape as the image tokens.
    pub image: Vec<f64>,
}

/// Backward pass of [`text_guided_embed`] given `∂L/∂output`.
pub fn text_guided_embed_backward<T: Real>(
    t: &DenseMatrix<T>,
    h: &DenseMatrix<T>,
    tau: f64,
    eps: f64,
    grad_out: &[f64],
) -> Result<TokenGrads> {
    check_tokens(t, h)?;
    let (nt, nv, d) = (t.rows(), h.rows(), t.cols());
    if grad_out.len() != d {
        return Err(shape("gradient length differs from embedding dimension"));
    }

    // Forward in f64, keeping intermediates.
    let s = similarity_matrix(t, h)?;
    let (soft, shat) = dual_normalize_f64(&s, tau);
    // Pooled vector p = (1/N_v) Σ_i r_i T_i with r_i = Σ_j Ŝ_ij.
    let r: Vec<f64> = shat.chunks(nv).map(|row| row.iter().sum()).collect();
    let mut p = vec![0.0f64; d];
    for i in 0..nt {
        for (pk, tv) in p.iter_mut().zip(t.row(i)) {
            *pk += r[i] * tv.widen() / nv as f64;
        }
    }
    let pn = p.iter().map(|x| x * x).sum::<f64>().sqrt();

    // Through the final normalization.
    let g_p: Vec<f64> = if pn >= eps {
        let y: Vec<f64> = p.iter().map(|x| x / pn).collect();
        let proj: f64 = y.iter().zip(grad_out).map(|(a, b)| a * b).sum();
        grad_out.iter().zip(&y).map(|(g, yk)| (g - yk * proj) / pn).collect()
    } else {
        grad_out.iter().map(|g| g / eps).collect()
    };

    let mut g_t = vec![0.0f64; nt * d];
    // Direct path V = Ŝᵀ T: ∂/∂T_i += r_i g_p / N_v ; ∂/∂Ŝ_ij = (g_p · T_i) / N_v.
    let mut g_shat_row = vec![0.0f64; nt];
    for i in 0..nt {
        let ti = t.row(i);
        let mut gt_dot = 0.0;
        for k in 0..d {
            g_t[i * d + k] += r[i] * g_p[k] / nv as f64;
            gt_dot += g_p[k] * ti[k].widen();
        }
        g_shat_row[i] = gt_dot / nv as f64;
    }
    // Ŝ_ij = S̃_ij / c_j, so S̃_ij ∂/∂S̃_ij = Ŝ_ij (g_i - Σ_l g_l Ŝ_lj).
    let mut scaled = vec![0.0f64; nt * nv];
    for j in 0..nv {
        let cross: f64 = (0..nt).map(|i| g_shat_row[i] * shat[i * nv + j]).sum();
        for i in 0..nt {
            scaled[i * nv + j] = shat[i * nv + j] * (g_shat_row[i] - cross);
        }
    }
    // Row softmax with temperature.
    let mut g_s = vec![0.0f64; nt * nv];
    for i in 0..nt {
        let row = &soft[i * nv..(i + 1) * nv];
        let srow = &scaled[i * nv..(i + 1) * nv];
        let inner: f64 = srow.iter().sum();
        for j in 0..nv {
            g_s[i * nv + j] = (srow[j] - row[j] * inner) / tau;
        }
    }
    // S = T Hᵀ.
    let mut g_h = vec![0.0f64; nv * d];
    for i in 0..nt {
        let ti = t.row(i);
        for j in 0..nv {
            let g = g_s[i * nv + j];
            if g == 0.0 {
                continue;
            }
            let hj = h.row(j);
            for k in 0..d {
                g_t[i * d + k] += g * hj[k].widen();
                g_h[j * d + k] += g * ti[k].widen();
            }
        }
    }
    Ok(TokenGrads {
        text: g_t,
        image: g_h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recall::Candidate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: usize, cols: usize, v: &[f64]) -> DenseMatrix<f64> {
        DenseMatrix::from_f64(rows, cols, v).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix<f64> {
        let v: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        m(rows, cols, &v)
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn similarity_examples() {
        let i2 = DenseMatrix::<f64>::identity(2);
        assert_eq!(similarity_matrix(&i2, &i2).unwrap(), i2);
        let z = similarity_matrix(&m(1, 2, &[3., -1.]), &DenseMatrix::zeros(3, 2)).unwrap();
        assert_eq!(z.as_slice(), &[0., 0., 0.]);
        let s = similarity_matrix(&m(1, 2, &[1., 2.]), &m(2, 2, &[3., 4., -1., 0.])).unwrap();
        assert_eq!(s.as_slice(), &[11., -1.]);
        assert!(similarity_matrix(&m(1, 2, &[1., 2.]), &m(1, 3, &[1., 2., 3.])).is_err());
    }

    #[test]
    fn dual_normalize_examples() {
        assert_eq!(dual_normalize(&m(1, 1, &[7.]), 0.07).unwrap().as_slice(), &[1.0]);
        let z = dual_normalize(&DenseMatrix::<f64>::zeros(2, 2), 1.0).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.5));
        // Scalar oracle: rows softmax to [e/(1+e), 1/(1+e)] and [1/(1+e), e/(1+e)];
        // each column then sums to 1 already, so Ŝ = S̃.
        let e = std::f64::consts::E;
        let hat = dual_normalize(&m(2, 2, &[1., 0., 0., 1.]), 1.0).unwrap();
        let a = e / (1.0 + e);
        assert!(close(hat.as_slice(), &[a, 1.0 - a, 1.0 - a, a], 1e-12));
        for j in 0..2 {
            assert!((hat.get(0, j) + hat.get(1, j) - 1.0).abs() < 1e-12);
        }
        assert!(dual_normalize(&m(1, 1, &[7.]), 0.0).is_err());
    }

    #[test]
    fn columns_stay_stochastic_at_tiny_temperature() {
        // Column 1 loses to column 0 in every row by 2 / 0.01 = 200 nats.
        let s = m(2, 2, &[1., -1., 0.9, -1.]);
        let hat = dual_normalize(&s, 0.01).unwrap();
        for j in 0..2 {
            assert!((hat.get(0, j) + hat.get(1, j) - 1.0).abs() < 1e-12);
        }
        assert!(hat.get(0, 1) > 0.0);
    }

    #[test]
    fn text_guided_embed_examples() {
        // Single tokens: Ŝ = [[1]] so the output is the normalized text row.
        let t = m(1, 3, &[3., 0., 4.]);
        let v = text_guided_embed(&t, &m(1, 3, &[1., 1., 1.]), 0.07, DEFAULT_EPS).unwrap();
        assert!(close(v.as_slice(), &[0.6, 0.0, 0.8], 1e-12));
        // Identical text rows: every V row equals r.
        let t = m(3, 2, &[1., 2., 1., 2., 1., 2.]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = text_guided_embed(&t, &random(&mut rng, 5, 2), 0.5, DEFAULT_EPS).unwrap();
        let n = 5f64.sqrt();
        assert!(close(v.as_slice(), &[1.0 / n, 2.0 / n], 1e-12));
    }

    #[test]
    fn text_guided_embed_matches_scalar_oracle() {
        // T = H = I₂, τ = 1: Ŝ = [[a, 1-a], [1-a, a]], V = ŜᵀT = Ŝᵀ,
        // mean row = [0.5, 0.5] → [1/√2, 1/√2].
        let i2 = DenseMatrix::<f64>::identity(2);
        let v = text_guided_embed(&i2, &i2, 1.0, DEFAULT_EPS).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(v.as_slice(), &[s, s], 1e-12));
    }

    #[test]
    fn btib_examples() {
        let cfg = BtibConfig::default();
        let t = m(1, 2, &[0., 2.]);
        let out = btib(&m(1, 2, &[1., 0.]), &m(1, 2, &[1., 1.]), &t, &cfg).unwrap();
        assert_eq!(out.v2.as_slice(), &[0., 1.]);
        assert_eq!(out.v3.as_slice(), &[0., 1.]);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = random(&mut rng, 4, 6);
        let t = random(&mut rng, 3, 6);
        let out = btib(&h, &h, &t, &cfg).unwrap();
        assert_eq!(out.v2, out.v3);

        let hf = random(&mut rng, 16, 6);
        let out = btib(&h, &hf, &t, &cfg).unwrap();
        assert_eq!(out.v2, text_guided_embed(&t, &h, cfg.tau, cfg.eps).unwrap());
        assert_eq!(out.v3, text_guided_embed(&t, &hf, cfg.tau, cfg.eps).unwrap());
    }

    #[test]
    fn rerank_score_endpoints_and_range() {
        let tq = DenseVector::<f64>::from_f64(&[1., 0.]).unwrap();
        let out = BtibOutput {
            v2: DenseVector::from_f64(&[0.6, 0.8]).unwrap(),
            v3: DenseVector::from_f64(&[0., 1.]).unwrap(),
        };
        assert_eq!(rerank_score(&tq, &out, 0.0).unwrap(), 0.6);
        assert_eq!(rerank_score(&tq, &out, 1.0).unwrap(), 0.0);
        let s_half = rerank_score(&tq, &out, 0.5).unwrap();
        assert!((s_half - 0.3).abs() < 1e-12);
        let same = BtibOutput { v2: tq.clone(), v3: tq.clone() };
        assert!((rerank_score(&tq, &same, 0.3).unwrap() - 1.0).abs() < 1e-6);
        assert!(rerank_score(&tq, &out, 1.5).is_err());
        assert!(rerank_score(&tq, &out, -0.1).is_err());
    }

    fn gallery_of(entries: Vec<(&str, DenseMatrix<f64>)>) -> Gallery<f64> {
        use crate::gallery::{Aggregation, GalleryEntry};
        let d = entries[0].1.cols();
        Gallery::from_entries(
            d,
            entries
                .into_iter()
                .map(|(id, h)| GalleryEntry::new(id, h.clone(), h, Aggregation::Both).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn cands(g: &Gallery<f64>, ids: &[&str]) -> CandidateSet {
        CandidateSet {
            query_id: "q".into(),
            candidates: ids
                .iter()
                .enumerate()
                .map(|(i, id)| Candidate {
                    index: g.index_of(id).unwrap_or(usize::MAX),
                    id: id.to_string(),
                    score: 1.0 - i as f64 * 0.1,
                })
                .collect(),
            k_requested: ids.len(),
        }
    }

    #[test]
    fn rerank_candidates_cases() {
        let cfg = BtibConfig::default();
        // Text tokens: one aligned with the global direction, one orthogonal.
        let t = m(2, 2, &[1., 0., 0., 1.]);
        let q = QueryText::new("q", t, DenseVector::from_f64(&[1., 0.]).unwrap(), vec![]).unwrap();
        // Two of the three "match" tokens point along text token 0, so r ≈ [2, 1]
        // and v ∝ [2, 1] (cos 2/√5); "other" mirrors it, r ≈ [1, 2] (cos 1/√5).
        let g = gallery_of(vec![
            ("other", m(3, 2, &[0., 1., 0., 1., 1., 0.])),
            ("match", m(3, 2, &[1., 0., 1., 0., 0., 1.])),
        ]);
        let r = rerank_candidates(&g, &cands(&g, &["other", "match"]), &q, &cfg).unwrap();
        assert_eq!(r[0].id, "match");
        assert_eq!(r[0].recall_rank, Some(2));
        assert_eq!(r[0].rerank_rank, 1);
        assert!((r[0].score - 2.0 / 5f64.sqrt()).abs() < 1e-5);
        assert!((r[1].score - 1.0 / 5f64.sqrt()).abs() < 1e-5);

        let single = rerank_candidates(&g, &cands(&g, &["other"]), &q, &cfg).unwrap();
        assert_eq!(single[0].rerank_rank, 1);

        let twins = gallery_of(vec![
            ("zeta", m(1, 2, &[0.3, 0.4])),
            ("alpha", m(1, 2, &[0.3, 0.4])),
        ]);
        let r = rerank_candidates(&twins, &cands(&twins, &["zeta", "alpha"]), &q, &cfg).unwrap();
        assert_eq!(r[0].id, "alpha");
        assert_eq!(r[0].score, r[1].score);

        let missing = rerank_candidates(&g, &cands(&g, &["nope"]), &q, &cfg);
        assert!(matches!(missing, Err(crate::Error::Lookup(id)) if id == "nope"));
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..5 {
            let t = random(&mut rng, 3, 4);
            let h = random(&mut rng, 5, 4);
            let w: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let tau = 0.3 + 0.2 * trial as f64;
            let f = |t: &DenseMatrix<f64>, h: &DenseMatrix<f64>| {
                let v = text_guided_embed(t, h, tau, DEFAULT_EPS).unwrap();
                v.as_slice().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
            };
            let g = text_guided_embed_backward(&t, &h, tau, DEFAULT_EPS, &w).unwrap();
            let step = 1e-6;
            for (which, base, analytic) in [(0, &t, &g.text), (1, &h, &g.image)] {
                for idx in 0..base.as_slice().len() {
                    let mut plus = base.clone();
                    plus.as_mut_slice()[idx] += step;
                    let mut minus = base.clone();
                    minus.as_mut_slice()[idx] -= step;
                    let (fp, fm) = if which == 0 {
                        (f(&plus, &h), f(&minus, &h))
                    } else {
                        (f(&t, &plus), f(&t, &minus))
                    };
                    let numeric = (fp - fm) / (2.0 * step);
                    assert!(
                        (numeric - analytic[idx]).abs() < 1e-6,
                        "trial {trial} input {which} idx {idx}: {numeric} vs {}",
                        analytic[idx]
                    );
                }
            }
        }
    }
}
