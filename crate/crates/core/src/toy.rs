//! Synthetic paired data and a small trainable encoder pair.
//!
//! Each class has a random centroid in feature space; an image and its caption
//! are the centroid plus independent Gaussian noise. The encoders are linear
//! projections with fixed per-token offsets: token `k` of an input `x` is
//! `normalize(x W + o_k)`, which yields multi-token, multi-granular encodings
//! while keeping every gradient hand-derivable.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::btib::{text_guided_embed_backward, BtibConfig, Interaction};
use crate::codec::{read_records, Reader, Writer};
use crate::error::{param, shape, Error, FormatError, Result};
use crate::gallery::{
    Aggregation, Encoder, Gallery, GalleryEntry, GranularitySpec, QueryText,
};
use crate::loss::{i2m_loss_and_gradients, AlignmentBatch, LossConfig};
use crate::numerics::{l2_normalize_f64, DenseMatrix, DenseVector, Real, DEFAULT_EPS};

pub const COARSE_TOKENS: usize = 4;
pub const FINE_TOKENS: usize = 16;
pub const TEXT_TOKENS: usize = 8;

pub const PARAMS_MAGIC: [u8; 4] = *b"FTFP";
pub const DATASET_MAGIC: [u8; 4] = *b"FTFD";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_per_class: usize,
    /// Raw feature dimension.
    pub d_feat: usize,
    /// Embedding dimension.
    pub d: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            n_per_class: 16,
            d_feat: 32,
            d: 16,
            noise_std: 1.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(param("need at least two classes"));
        }
        if self.n_per_class < 1 {
            return Err(param("need at least one pair per class"));
        }
        if self.d == 0 || self.d_feat < self.d {
            return Err(param(format!(
                "feature dim {} must be >= embedding dim {} >= 1",
                self.d_feat, self.d
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(param(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub image: Vec<f32>,
    pub text: Vec<f32>,
    pub class: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub d_feat: usize,
    pub n_classes: usize,
    pub samples: Vec<PairedSample>,
}

/// Pairs in class-major order: all of class 0, then class 1, and so on.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0f64, 1.0).unwrap();
    let centroids: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| (0..spec.d_feat).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let mut samples = Vec::with_capacity(spec.n_classes * spec.n_per_class);
    for (c, centroid) in centroids.iter().enumerate() {
        for _ in 0..spec.n_per_class {
            let mut noisy = || -> Vec<f32> {
                centroid
                    .iter()
                    .map(|&m| (m + spec.noise_std * unit.sample(&mut rng)) as f32)
                    .collect()
            };
            let image = noisy();
            let text = noisy();
            samples.push(PairedSample {
                image,
                text,
                class: c as u32,
            });
        }
    }
    Ok(SyntheticDataset {
        d_feat: spec.d_feat,
        n_classes: spec.n_classes,
        samples,
    })
}

impl SyntheticDataset {
    /// Class-stratified 80/20 split: within each class (in generation order)
    /// the last `max(1, n/5)` pairs go to evaluation. Returns sample indices.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.n_classes];
        for (i, s) in self.samples.iter().enumerate() {
            by_class[s.class as usize].push(i);
        }
        let (mut train, mut eval) = (Vec::new(), Vec::new());
        for members in by_class {
            let n_eval = (members.len() / 5).max(1).min(members.len());
            let cut = members.len() - n_eval;
            train.extend_from_slice(&members[..cut]);
            eval.extend_from_slice(&members[cut..]);
        }
        (train, eval)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = Writer::with_header(DATASET_MAGIC);
        w.count(self.d_feat);
        w.count(self.n_classes);
        w.count(self.samples.len());
        for s in &self.samples {
            w.u32(s.class);
            w.f32s(&s.image);
            w.f32s(&s.text);
        }
        fs::write(path, w.into_bytes()).map_err(Error::from)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let buf = fs::read(path)?;
        let mut r = Reader::expect_header(&buf, DATASET_MAGIC)?;
        let mut header = || r.count().map_err(|_| FormatError::TruncatedHeader);
        let (d_feat, n_classes, n) = (header()?, header()?, header()?);
        let samples = read_records(&mut r, n, |r, index| {
            let class = r.u32()?;
            let image = r.f32s(d_feat)?;
            let text = r.f32s(d_feat)?;
            Ok(if (class as usize) < n_classes {
                Ok(PairedSample { image, text, class })
            } else {
                Err(Error::Validation(format!("sample {index}: class {class} out of range")))
            })
        })?;
        Ok(Self {
            d_feat,
            n_classes,
            samples,
        })
    }
}

/// Linear projections (trained) and per-token offsets (fixed at init).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoderParams<T: Real = f32> {
    pub coarse_proj: DenseMatrix<T>,
    pub fine_proj: DenseMatrix<T>,
    pub coarse_offsets: DenseMatrix<T>,
    pub fine_offsets: DenseMatrix<T>,
    pub text_proj: DenseMatrix<T>,
    pub text_offsets: DenseMatrix<T>,
    pub global_proj: DenseMatrix<T>,
}

/// Standard deviation of the fixed token offsets.
const OFFSET_STD: f64 = 0.5;

impl<T: Real> ToyEncoderParams<T> {
    pub fn init(d_feat: usize, d: usize, seed: u64) -> Result<Self> {
        if d == 0 || d_feat < d {
            return Err(param(format!("feature dim {d_feat} must be >= embedding dim {d} >= 1")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = Normal::new(0.0f64, 1.0 / (d_feat as f64).sqrt()).unwrap();
        let offs = Normal::new(0.0f64, OFFSET_STD).unwrap();
        let mut draw = |rows: usize, dist: &Normal<f64>| {
            let v: Vec<f64> = (0..rows * d).map(|_| dist.sample(&mut rng)).collect();
            DenseMatrix::from_f64(rows, d, &v)
        };
        Ok(Self {
            coarse_proj: draw(d_feat, &proj)?,
            fine_proj: draw(d_feat, &proj)?,
            coarse_offsets: draw(COARSE_TOKENS, &offs)?,
            fine_offsets: draw(FINE_TOKENS, &offs)?,
            text_proj: draw(d_feat, &proj)?,
            text_offsets: draw(TEXT_TOKENS, &offs)?,
            global_proj: draw(d_feat, &proj)?,
        })
    }

    pub fn d_feat(&self) -> usize {
        self.coarse_proj.rows()
    }

    pub fn d(&self) -> usize {
        self.coarse_proj.cols()
    }

    pub fn cast<U: Real>(&self) -> ToyEncoderParams<U> {
        ToyEncoderParams {
            coarse_proj: self.coarse_proj.cast(),
            fine_proj: self.fine_proj.cast(),
            coarse_offsets: self.coarse_offsets.cast(),
            fine_offsets: self.fine_offsets.cast(),
            text_proj: self.text_proj.cast(),
            text_offsets: self.text_offsets.cast(),
            global_proj: self.global_proj.cast(),
        }
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.d_feat() {
            return Err(shape(format!(
                "input has {} features, encoder expects {}",
                x.len(),
                self.d_feat()
            )));
        }
        Ok(())
    }

    /// The four trained projections in a fixed order.
    fn projections_mut(&mut self) -> [&mut DenseMatrix<T>; 4] {
        [
            &mut self.coarse_proj,
            &mut self.fine_proj,
            &mut self.text_proj,
            &mut self.global_proj,
        ]
    }
}

/// `x W` in `f64`.
fn project<T: Real>(x: &[T], w: &DenseMatrix<T>) -> Vec<f64> {
    let mut out = vec![0.0f64; w.cols()];
    for (f, xv) in x.iter().enumerate() {
        let xv = xv.widen();
        for (o, wv) in out.iter_mut().zip(w.row(f)) {
            *o += xv * wv.widen();
        }
    }
    out
}

/// Rows `normalize(base + o_k)`, plus the pre-normalization norms.
fn offset_tokens<T: Real>(base: &[f64], offsets: &DenseMatrix<T>) -> (DenseMatrix<T>, Vec<f64>) {
    let d = base.len();
    let mut data = Vec::with_capacity(offsets.rows() * d);
    let mut norms = Vec::with_capacity(offsets.rows());
    for o in offsets.row_iter() {
        let pre: Vec<f64> = base.iter().zip(o).map(|(b, ov)| b + ov.widen()).collect();
        norms.push(pre.iter().map(|x| x * x).sum::<f64>().sqrt());
        data.extend(l2_normalize_f64(&pre, DEFAULT_EPS).into_iter().map(T::narrow));
    }
    (DenseMatrix::new(offsets.rows(), d, data).unwrap(), norms)
}

/// Encoded pair: coarse and fine image tokens, text tokens and global text embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoding<T: Real = f32> {
    pub coarse: DenseMatrix<T>,
    pub fine: DenseMatrix<T>,
    pub text_tokens: DenseMatrix<T>,
    pub text_global: DenseVector<T>,
}

pub fn toy_encode<T: Real>(
    params: &ToyEncoderParams<T>,
    image: &[T],
    text: &[T],
) -> Result<ToyEncoding<T>> {
    let (coarse, fine) = params.encode_image(image)?;
    let (text_tokens, text_global) = params.encode_text(text)?;
    Ok(ToyEncoding {
        coarse,
        fine,
        text_tokens,
        text_global,
    })
}

impl<T: Real> Encoder<T> for ToyEncoderParams<T> {
    type Image = [T];
    type Text = [T];

    fn dim(&self) -> usize {
        self.d()
    }

    fn granularity(&self) -> GranularitySpec {
        GranularitySpec {
            coarse_tokens: self.coarse_offsets.rows(),
            fine_tokens: self.fine_offsets.rows(),
        }
    }

    fn encode_image(&self, image: &[T]) -> Result<(DenseMatrix<T>, DenseMatrix<T>)> {
        self.check_input(image)?;
        let (hc, _) = offset_tokens(&project(image, &self.coarse_proj), &self.coarse_offsets);
        let (hf, _) = offset_tokens(&project(image, &self.fine_proj), &self.fine_offsets);
        Ok((hc, hf))
    }

    fn encode_text(&self, text: &[T]) -> Result<(DenseMatrix<T>, DenseVector<T>)> {
        self.check_input(text)?;
        let (tt, _) = offset_tokens(&project(text, &self.text_proj), &self.text_offsets);
        let g = project(text, &self.global_proj);
        Ok((tt, DenseVector::from_f64(&l2_normalize_f64(&g, DEFAULT_EPS))?))
    }
}

pub fn image_id(index: usize) -> String {
    format!("img-{index:05}")
}

pub fn text_id(index: usize) -> String {
    format!("txt-{index:05}")
}

/// Encodes a subset of the dataset into a gallery (images) and queries (texts).
///
/// A query's ground truth is every gallery image of the same class.
pub fn encode_split(
    params: &ToyEncoderParams<f32>,
    data: &SyntheticDataset,
    indices: &[usize],
    aggregation: Aggregation,
) -> Result<(Gallery, Vec<QueryText>)> {
    let encoded: Vec<ToyEncoding> = indices
        .par_iter()
        .map(|&i| {
            let s = &data.samples[i];
            toy_encode(params, &s.image, &s.text)
        })
        .collect::<Result<_>>()?;
    let mut entries = Vec::with_capacity(indices.len());
    let mut queries = Vec::with_capacity(indices.len());
    for (&i, enc) in indices.iter().zip(encoded) {
        let class = data.samples[i].class;
        let gt: Vec<String> = indices
            .iter()
            .filter(|&&j| data.samples[j].class == class)
            .map(|&j| image_id(j))
            .collect();
        entries.push(GalleryEntry::new(image_id(i), enc.coarse, enc.fine, aggregation)?);
        queries.push(QueryText::new(text_id(i), enc.text_tokens, enc.text_global, gt)?);
    }
    Ok((Gallery::from_entries(params.d(), entries)?, queries))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossConfig,
    pub btib: BtibConfig,
    pub aggregation: Aggregation,
    pub interaction: Interaction,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.05,
            loss: LossConfig::default(),
            btib: BtibConfig::default(),
            aggregation: Aggregation::Both,
            interaction: Interaction::Btib,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(param("batch_size must be >= 2"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(param(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        self.loss.validate()?;
        self.btib.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub inter: f64,
    pub intra: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ToyEncoderParams<f32>,
    pub curve: Vec<EpochStats>,
}

/// Forward state of one pair, kept for the backward pass.
struct PairForward {
    coarse: DenseMatrix<f64>,
    coarse_norms: Vec<f64>,
    fine: DenseMatrix<f64>,
    fine_norms: Vec<f64>,
    text_tokens: DenseMatrix<f64>,
    text_norms: Vec<f64>,
    global_pre: Vec<f64>,
    text_global: Vec<f64>,
    v1_pre: Vec<f64>,
    v1: Vec<f64>,
    v2: Vec<f64>,
    v3: Vec<f64>,
}

/// `∂/∂x` of `normalize(x)` given `∂/∂y`, `y = x / ‖x‖`.
fn normalize_backward(y: &[f64], norm: f64, grad_y: &[f64]) -> Vec<f64> {
    if norm < DEFAULT_EPS {
        return grad_y.iter().map(|g| g / DEFAULT_EPS).collect();
    }
    let proj: f64 = y.iter().zip(grad_y).map(|(a, b)| a * b).sum();
    grad_y.iter().zip(y).map(|(g, yk)| (g - yk * proj) / norm).collect()
}

fn norm_of(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn forward_pair(
    p: &ToyEncoderParams<f64>,
    image: &[f64],
    text: &[f64],
    cfg: &TrainConfig,
) -> Result<PairForward> {
    let (coarse, coarse_norms) = offset_tokens(&project(image, &p.coarse_proj), &p.coarse_offsets);
    let (fine, fine_norms) = offset_tokens(&project(image, &p.fine_proj), &p.fine_offsets);
    let (text_tokens, text_norms) = offset_tokens(&project(text, &p.text_proj), &p.text_offsets);
    let global_pre = project(text, &p.global_proj);
    let text_global = l2_normalize_f64(&global_pre, DEFAULT_EPS);
    let (wc, wf) = cfg.aggregation.weights();
    let mc = coarse.mean_row()?;
    let mf = fine.mean_row()?;
    let v1_pre: Vec<f64> = mc.iter().zip(&mf).map(|(c, f)| wc * c + wf * f).collect();
    let v1 = l2_normalize_f64(&v1_pre, DEFAULT_EPS);
    let out = cfg.interaction.embed(&coarse, &fine, &text_tokens, &cfg.btib)?;
    Ok(PairForward {
        v2: out.v2.into_vec(),
        v3: out.v3.into_vec(),
        coarse,
        coarse_norms,
        fine,
        fine_norms,
        text_tokens,
        text_norms,
        global_pre,
        text_global,
        v1_pre,
        v1,
    })
}

/// Gradients for the four projections, flattened in `projections_mut` order.
fn backward_pair(
    f: &PairForward,
    image: &[f64],
    text: &[f64],
    g_text: &[f64],
    g_v1: &[f64],
    g_v2: &[f64],
    g_v3: &[f64],
    cfg: &TrainConfig,
) -> Result<[Vec<f64>; 4]> {
    let d = g_text.len();
    let (nc, nf, nt) = (f.coarse.rows(), f.fine.rows(), f.text_tokens.rows());
    let mut g_hc = vec![0.0f64; nc * d];
    let mut g_hf = vec![0.0f64; nf * d];
    let mut g_tt = vec![0.0f64; nt * d];

    match cfg.interaction {
        Interaction::Btib => {
            let c = text_guided_embed_backward(&f.text_tokens, &f.coarse, cfg.btib.tau, cfg.btib.eps, g_v2)?;
            let fi = text_guided_embed_backward(&f.text_tokens, &f.fine, cfg.btib.tau, cfg.btib.eps, g_v3)?;
            g_hc.iter_mut().zip(&c.image).for_each(|(a, b)| *a += b);
            g_hf.iter_mut().zip(&fi.image).for_each(|(a, b)| *a += b);
            for (a, (b, e)) in g_tt.iter_mut().zip(c.text.iter().zip(&fi.text)) {
                *a += b + e;
            }
        }
        Interaction::PooledMeans => {
            for (tokens, g_v, g_h, n) in [(&f.coarse, g_v2, &mut g_hc, nc), (&f.fine, g_v3, &mut g_hf, nf)] {
                let mean = tokens.mean_row()?;
                let y = l2_normalize_f64(&mean, cfg.btib.eps);
                let g_mean = normalize_backward(&y, norm_of(&mean), g_v);
                for r in 0..n {
                    for q in 0..d {
                        g_h[r * d + q] += g_mean[q] / n as f64;
                    }
                }
            }
        }
    }

    let (wc, wf) = cfg.aggregation.weights();
    let g_m = normalize_backward(&f.v1, norm_of(&f.v1_pre), g_v1);
    for q in 0..d {
        for r in 0..nc {
            g_hc[r * d + q] += wc * g_m[q] / nc as f64;
        }
        for r in 0..nf {
            g_hf[r * d + q] += wf * g_m[q] / nf as f64;
        }
    }

    // Token pre-activations share one projection, so their gradients sum.
    let token_base_grad = |tokens: &DenseMatrix<f64>, norms: &[f64], g: &[f64]| -> Vec<f64> {
        let mut acc = vec![0.0f64; d];
        for (r, norm) in norms.iter().enumerate() {
            let gp = normalize_backward(tokens.row(r), *norm, &g[r * d..(r + 1) * d]);
            acc.iter_mut().zip(&gp).for_each(|(a, b)| *a += b);
        }
        acc
    };
    let outer = |x: &[f64], g: &[f64]| -> Vec<f64> {
        x.iter().flat_map(|xv| g.iter().map(move |gv| xv * gv)).collect()
    };
    let g_base_c = token_base_grad(&f.coarse, &f.coarse_norms, &g_hc);
    let g_base_f = token_base_grad(&f.fine, &f.fine_norms, &g_hf);
    let g_base_t = token_base_grad(&f.text_tokens, &f.text_norms, &g_tt);
    let g_global = normalize_backward(&f.text_global, norm_of(&f.global_pre), g_text);
    Ok([
        outer(image, &g_base_c),
        outer(image, &g_base_f),
        outer(text, &g_base_t),
        outer(text, &g_global),
    ])
}

/// Loss and projection gradients of one batch, with `f64` parameters.
pub(crate) fn batch_step(
    p: &ToyEncoderParams<f64>,
    inputs: &[(&[f64], &[f64])],
    cfg: &TrainConfig,
) -> Result<(crate::loss::LossBreakdown, [Vec<f64>; 4])> {
    let fwd: Vec<PairForward> = inputs
        .par_iter()
        .map(|(img, txt)| forward_pair(p, img, txt, cfg))
        .collect::<Result<_>>()?;
    let n = fwd.len();
    let d = p.d();
    let stack = |pick: &dyn Fn(&PairForward) -> &[f64]| -> Result<DenseMatrix<f64>> {
        DenseMatrix::new(n, d, fwd.iter().flat_map(|f| pick(f).iter().copied()).collect())
    };
    let batch = AlignmentBatch::from_raw(
        stack(&|f| &f.text_global)?,
        stack(&|f| &f.v1)?,
        stack(&|f| &f.v2)?,
        stack(&|f| &f.v3)?,
    )?;
    let (loss, g) = i2m_loss_and_gradients(&batch, &cfg.loss)?;
    let per_pair: Vec<[Vec<f64>; 4]> = (0..n)
        .into_par_iter()
        .map(|i| {
            backward_pair(
                &fwd[i],
                inputs[i].0,
                inputs[i].1,
                g.text.row(i),
                g.v1.row(i),
                g.v2.row(i),
                g.v3.row(i),
                cfg,
            )
        })
        .collect::<Result<_>>()?;
    let fd = p.d_feat() * d;
    let mut total = [vec![0.0; fd], vec![0.0; fd], vec![0.0; fd], vec![0.0; fd]];
    for pair in &per_pair {
        for (acc, g) in total.iter_mut().zip(pair) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    Ok((loss, total))
}

/// Plain gradient descent on the combined loss over the given training pairs.
///
/// Batches are drawn from a per-epoch shuffle seeded by `cfg.seed`; a trailing
/// batch smaller than two pairs is skipped. Each epoch reports the mean batch
/// loss measured before that batch's update.
pub fn train_toy(
    data: &SyntheticDataset,
    train_indices: &[usize],
    init: &ToyEncoderParams<f32>,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if train_indices.len() < 2 {
        return Err(param("training needs at least two pairs"));
    }
    if init.d_feat() != data.d_feat {
        return Err(shape("encoder feature dim differs from dataset"));
    }
    let mut params: ToyEncoderParams<f64> = init.cast();
    let features: Vec<(Vec<f64>, Vec<f64>)> = data
        .samples
        .iter()
        .map(|s| {
            (
                s.image.iter().map(|&v| v as f64).collect(),
                s.text.iter().map(|&v| v as f64).collect(),
            )
        })
        .collect();
    let mut order = train_indices.to_vec();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let (mut sum, mut inter, mut intra, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let inputs: Vec<(&[f64], &[f64])> = chunk
                .iter()
                .map(|&i| (features[i].0.as_slice(), features[i].1.as_slice()))
                .collect();
            let (loss, grads) = batch_step(&params, &inputs, cfg)?;
            if !loss.total.is_finite() {
                return Err(Error::Training { epoch, loss: loss.total });
            }
            sum += loss.total;
            inter += loss.inter_total;
            intra += loss.intra_total;
            batches += 1;
            for (w, g) in params.projections_mut().into_iter().zip(&grads) {
                for (wv, gv) in w.as_mut_slice().iter_mut().zip(g) {
                    *wv -= cfg.learning_rate * gv;
                }
            }
            let diverged = params
                .projections_mut()
                .iter()
                .any(|w| w.as_slice().iter().any(|v| !v.is_finite()));
            if diverged {
                return Err(Error::Training { epoch, loss: f64::NAN });
            }
        }
        let b = batches as f64;
        curve.push(EpochStats {
            epoch,
            loss: sum / b,
            inter: inter / b,
            intra: intra / b,
        });
    }
    Ok(TrainedModel {
        params: params.cast(),
        curve,
    })
}

/// Loss curve as CSV with header `epoch,loss,inter,intra`.
pub fn curve_csv(curve: &[EpochStats]) -> String {
    let mut out = String::from("epoch,loss,inter,intra\n");
    for e in curve {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.loss, e.inter, e.intra));
    }
    out
}

impl ToyEncoderParams<f32> {
    /// `FTFP | version | d_feat | d | n_c | n_f | n_t` followed by the seven
    /// matrices in field order, row-major `f32` LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_header(PARAMS_MAGIC);
        w.count(self.d_feat());
        w.count(self.d());
        w.count(self.coarse_offsets.rows());
        w.count(self.fine_offsets.rows());
        w.count(self.text_offsets.rows());
        for m in self.matrices() {
            w.f32s(m.as_slice());
        }
        w.into_bytes()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::expect_header(buf, PARAMS_MAGIC)?;
        let mut header = || r.count().map_err(|_| FormatError::TruncatedHeader);
        let (d_feat, d, nc, nf, nt) = (header()?, header()?, header()?, header()?, header()?);
        let shapes = [d_feat, d_feat, nc, nf, d_feat, nt, d_feat];
        let mut mats = Vec::with_capacity(7);
        for (index, rows) in shapes.into_iter().enumerate() {
            let data = r
                .f32s(rows.saturating_mul(d))
                .map_err(|_| FormatError::TruncatedEntry { index })?;
            mats.push(DenseMatrix::new(rows, d, data)?);
        }
        if r.remaining() != 0 {
            return Err(FormatError::TrailingBytes(r.remaining()).into());
        }
        let mut it = mats.into_iter();
        let mut next = || it.next().unwrap();
        Ok(Self {
            coarse_proj: next(),
            fine_proj: next(),
            coarse_offsets: next(),
            fine_offsets: next(),
            text_proj: next(),
            text_offsets: next(),
            global_proj: next(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(Error::from)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn matrices(&self) -> [&DenseMatrix<f32>; 7] {
        [
            &self.coarse_proj,
            &self.fine_proj,
            &self.coarse_offsets,
            &self.fine_offsets,
            &self.text_proj,
            &self.text_offsets,
            &self.global_proj,
        ]
    }
}

/// Shape of a random retrieval set used for timing and equivalence checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RandomSetSpec {
    pub gallery_size: usize,
    pub query_count: usize,
    pub coarse_tokens: usize,
    pub fine_tokens: usize,
    pub text_tokens: usize,
    pub d: usize,
    pub seed: u64,
}

impl Default for RandomSetSpec {
    fn default() -> Self {
        Self {
            gallery_size: 256,
            query_count: 64,
            coarse_tokens: COARSE_TOKENS,
            fine_tokens: FINE_TOKENS,
            text_tokens: TEXT_TOKENS,
            d: 64,
            seed: 7,
        }
    }
}

/// Gallery of random unit tokens, plus queries that each target one image.
///
/// Query `q` targets image `q * n / Q`; its tokens are noisy copies of that
/// image's fine tokens and its global embedding a noisy copy of the recall
/// embedding, so retrieval is meaningful without any training.
pub fn random_retrieval_set(spec: &RandomSetSpec) -> Result<(Gallery, Vec<QueryText>)> {
    let s = spec;
    if s.gallery_size == 0 || s.query_count == 0 || s.d == 0 {
        return Err(param("random set needs a gallery, queries and d >= 1"));
    }
    if s.coarse_tokens == 0 || s.fine_tokens < s.coarse_tokens || s.text_tokens == 0 {
        return Err(param("token counts must satisfy 1 <= coarse <= fine and text >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let unit = Normal::new(0.0f64, 1.0).unwrap();
    let tokens = |rows: usize, rng: &mut ChaCha8Rng| -> Result<DenseMatrix<f32>> {
        let mut data = Vec::with_capacity(rows * s.d);
        for _ in 0..rows {
            let row: Vec<f64> = (0..s.d).map(|_| unit.sample(rng)).collect();
            data.extend(l2_normalize_f64(&row, DEFAULT_EPS).into_iter().map(|v| v as f32));
        }
        DenseMatrix::new(rows, s.d, data)
    };
    let mut entries = Vec::with_capacity(s.gallery_size);
    for i in 0..s.gallery_size {
        let hc = tokens(s.coarse_tokens, &mut rng)?;
        let hf = tokens(s.fine_tokens, &mut rng)?;
        entries.push(GalleryEntry::new(image_id(i), hc, hf, Aggregation::Both)?);
    }
    let noisy = |base: &[f32], rng: &mut ChaCha8Rng| -> Vec<f64> {
        let v: Vec<f64> = base.iter().map(|&b| b as f64 + 0.1 * unit.sample(rng)).collect();
        l2_normalize_f64(&v, DEFAULT_EPS)
    };
    let mut queries = Vec::with_capacity(s.query_count);
    for q in 0..s.query_count {
        let target = &entries[q * s.gallery_size / s.query_count];
        let mut data = Vec::with_capacity(s.text_tokens * s.d);
        for r in 0..s.text_tokens {
            let src = target.fine_tokens().row(r % s.fine_tokens);
            data.extend(noisy(src, &mut rng));
        }
        let tt = DenseMatrix::from_f64(s.text_tokens, s.d, &data)?;
        let global = DenseVector::from_f64(&noisy(target.recall_embedding().as_slice(), &mut rng))?;
        queries.push(QueryText::new(text_id(q), tt, global, vec![target.id().to_string()])?);
    }
    Ok((Gallery::from_entries(s.d, entries)?, queries))
}
