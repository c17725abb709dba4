//! Retrieval metrics, one- and two-stage runners, latency measurement,
//! ablations and candidate-size sweeps.
//!
//! Text queries retrieving images is the native direction. Image-to-text
//! retrieval swaps roles: stage one compares the image recall embedding with
//! each text's global embedding, and stage two runs the text-guided embedding
//! with the image tokens in the text slot and the candidate text's tokens in
//! the image slot, scoring against the image recall embedding.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::btib::{
    rerank_score, rerank_with, text_guided_embed, BtibConfig, BtibOutput, Interaction,
};
use crate::error::{invalid, param, shape, Error, Result};
use crate::gallery::{Aggregation, Gallery, GalleryEntry, QueryText};
use crate::loss::LossConfig;
use crate::numerics::{cosine_slices, rank_order, DEFAULT_EPS};
use crate::recall::recall_topk;
use crate::toy::{
    encode_split, generate_synthetic, train_toy, EpochStats, SyntheticDataset, SyntheticSpec,
    ToyEncoderParams, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    OneStage,
    TwoStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    #[serde(rename = "t2i")]
    TextToImage,
    #[serde(rename = "i2t")]
    ImageToText,
}

impl Direction {
    pub fn tag(self) -> &'static str {
        match self {
            Direction::TextToImage => "t2i",
            Direction::ImageToText => "i2t",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryRanking {
    pub query_id: String,
    /// Final ranked ids, best first.
    pub ranked: Vec<String>,
    /// Stage-one candidate ids; `None` for one-stage runs.
    pub candidates: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalRun {
    pub mode: Mode,
    pub direction: Direction,
    /// Candidate size; `None` for one-stage runs.
    pub k: Option<usize>,
    pub rankings: Vec<QueryRanking>,
    /// Wall-clock nanoseconds per query, in query order.
    #[serde(skip)]
    pub timings_ns: Vec<u64>,
}

impl RetrievalRun {
    /// Every ranked list is duplicate-free.
    pub fn check(&self) -> Result<()> {
        for q in &self.rankings {
            let set: BTreeSet<&String> = q.ranked.iter().collect();
            if set.len() != q.ranked.len() {
                return Err(invalid(format!("query {:?} has duplicate ranked ids", q.query_id)));
            }
        }
        Ok(())
    }
}

/// Query id → relevant ids.
pub type GroundTruth = BTreeMap<String, BTreeSet<String>>;

pub fn text_to_image_truth(queries: &[QueryText]) -> GroundTruth {
    queries
        .iter()
        .map(|q| (q.id().to_string(), q.ground_truth_ids().iter().cloned().collect()))
        .collect()
}

/// Inverts text ground truth: an image's relevant texts are those listing it.
pub fn image_to_text_truth(gallery: &Gallery, texts: &[QueryText]) -> GroundTruth {
    let mut truth: GroundTruth = gallery
        .entries()
        .iter()
        .map(|e| (e.id().to_string(), BTreeSet::new()))
        .collect();
    for q in texts {
        for img in q.ground_truth_ids() {
            if let Some(set) = truth.get_mut(img) {
                set.insert(q.id().to_string());
            }
        }
    }
    truth
}

/// Fraction of queries with at least one relevant id in the top `k` of the run.
pub fn recall_at_k(run: &RetrievalRun, truth: &GroundTruth, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(param("R@K needs K >= 1"));
    }
    if run.rankings.is_empty() {
        return Err(invalid("run has no queries"));
    }
    let mut hits = 0usize;
    for q in &run.rankings {
        let gt = relevant(truth, &q.query_id)?;
        if q.ranked.iter().take(k).any(|id| gt.contains(id)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / run.rankings.len() as f64)
}

fn relevant<'a>(truth: &'a GroundTruth, query_id: &str) -> Result<&'a BTreeSet<String>> {
    match truth.get(query_id) {
        Some(gt) if !gt.is_empty() => Ok(gt),
        _ => Err(invalid(format!("query {query_id:?} has no ground truth"))),
    }
}

/// Fraction of queries whose stage-one candidates contain a relevant id.
///
/// No reranking can recover a relevant id dropped by stage one, so this is an
/// upper bound on R@K for every K. One-stage runs always return 1.
pub fn recall_ceiling(run: &RetrievalRun, truth: &GroundTruth) -> Result<f64> {
    if run.rankings.is_empty() {
        return Err(invalid("run has no queries"));
    }
    let mut hits = 0usize;
    for q in &run.rankings {
        let gt = relevant(truth, &q.query_id)?;
        let pool = q.candidates.as_ref().unwrap_or(&q.ranked);
        if pool.iter().any(|id| gt.contains(id)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / run.rankings.len() as f64)
}

/// Mean of the six recall values (three per direction), percent convention.
pub fn mean_recall(values: &[f64]) -> Result<f64> {
    if values.len() != 6 {
        return Err(param(format!("mR needs exactly six values, got {}", values.len())));
    }
    if values.iter().any(|v| !(0.0..=100.0).contains(v)) {
        return Err(param("recall values must lie in [0, 100]"));
    }
    Ok(values.iter().sum::<f64>() / 6.0)
}

/// Probability that a uniformly random ranking of `n` items puts at least one
/// of `g` relevant items in its top `k`.
pub fn random_hit_probability(n: usize, g: usize, k: usize) -> f64 {
    if g == 0 {
        return 0.0;
    }
    let k = k.min(n);
    if n - g < k {
        return 1.0;
    }
    let miss: f64 = (0..k).map(|i| (n - g - i) as f64 / (n - i) as f64).product();
    1.0 - miss
}

/// Expected mR of random rankings, in percent.
pub fn random_baseline_mr(gallery: &Gallery, texts: &[QueryText]) -> Result<f64> {
    let mut six = Vec::with_capacity(6);
    for (truth, pool) in [
        (image_to_text_truth(gallery, texts), texts.len()),
        (text_to_image_truth(texts), gallery.len()),
    ] {
        for k in RECALL_KS {
            let mut acc = 0.0;
            for gt in truth.values() {
                acc += random_hit_probability(pool, gt.len(), k);
            }
            six.push(100.0 * acc / truth.len().max(1) as f64);
        }
    }
    mean_recall(&six)
}

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Stage-two settings shared by all runners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetrievalConfig {
    pub btib: BtibConfig,
    pub interaction: Interaction,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            btib: BtibConfig::default(),
            interaction: Interaction::Btib,
        }
    }
}

fn elapsed_ns(start: Instant) -> u64 {
    start.elapsed().as_nanos().min(u64::MAX as u128) as u64
}

fn ranked_ids(scored: Vec<(&str, f64)>) -> Vec<String> {
    let mut scored = scored;
    scored.sort_by(rank_order);
    scored.into_iter().map(|(id, _)| id.to_string()).collect()
}

fn t2i_two_stage_query(
    gallery: &Gallery,
    q: &QueryText,
    k: usize,
    cfg: &RetrievalConfig,
) -> Result<QueryRanking> {
    let cands = recall_topk(gallery, q, k)?;
    let reranked = rerank_with(gallery, &cands, q, &cfg.btib, cfg.interaction)?;
    Ok(QueryRanking {
        query_id: q.id().to_string(),
        ranked: reranked.into_iter().map(|r| r.id).collect(),
        candidates: Some(cands.candidates.into_iter().map(|c| c.id).collect()),
    })
}

fn t2i_one_stage_query(
    gallery: &Gallery,
    q: &QueryText,
    cfg: &RetrievalConfig,
) -> Result<QueryRanking> {
    let scored = gallery
        .entries()
        .iter()
        .map(|e| {
            let s = cfg.interaction.score(
                e.coarse_tokens(),
                e.fine_tokens(),
                q.token_embeddings(),
                q.global_embedding(),
                &cfg.btib,
            )?;
            Ok((e.id(), s))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QueryRanking {
        query_id: q.id().to_string(),
        ranked: ranked_ids(scored),
        candidates: None,
    })
}

fn check_config(gallery: &Gallery, queries: &[QueryText], cfg: &RetrievalConfig) -> Result<()> {
    cfg.btib.validate()?;
    if let Some(q) = queries.iter().find(|q| q.dim() != gallery.dim()) {
        return Err(shape(format!(
            "gallery d={} but query {:?} has d={}",
            gallery.dim(),
            q.id(),
            q.dim()
        )));
    }
    Ok(())
}

fn collect_run(
    mode: Mode,
    direction: Direction,
    k: Option<usize>,
    timed: Vec<(QueryRanking, u64)>,
) -> RetrievalRun {
    let (rankings, timings_ns) = timed.into_iter().unzip();
    RetrievalRun {
        mode,
        direction,
        k,
        rankings,
        timings_ns,
    }
}

/// Text-to-image: recall the top `k`, then rerank them. Parallel across queries.
pub fn run_two_stage(
    gallery: &Gallery,
    queries: &[QueryText],
    k: usize,
    cfg: &RetrievalConfig,
) -> Result<RetrievalRun> {
    check_config(gallery, queries, cfg)?;
    if k == 0 {
        return Err(param("candidate size k must be >= 1"));
    }
    let timed = queries
        .par_iter()
        .map(|q| {
            let start = Instant::now();
            let r = t2i_two_stage_query(gallery, q, k, cfg)?;
            Ok((r, elapsed_ns(start)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(collect_run(Mode::TwoStage, Direction::TextToImage, Some(k), timed))
}

/// Text-to-image: rerank score against every gallery entry.
pub fn run_one_stage(
    gallery: &Gallery,
    queries: &[QueryText],
    cfg: &RetrievalConfig,
) -> Result<RetrievalRun> {
    check_config(gallery, queries, cfg)?;
    let timed = queries
        .par_iter()
        .map(|q| {
            let start = Instant::now();
            let r = t2i_one_stage_query(gallery, q, cfg)?;
            Ok((r, elapsed_ns(start)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(collect_run(Mode::OneStage, Direction::TextToImage, None, timed))
}

/// Rerank score of candidate text `text` for image query `image`.
pub fn image_to_text_score(
    image: &GalleryEntry,
    text: &QueryText,
    cfg: &RetrievalConfig,
) -> Result<f64> {
    match cfg.interaction {
        Interaction::Btib => {
            let (b, tokens) = (&cfg.btib, text.token_embeddings());
            let out = BtibOutput {
                v2: text_guided_embed(image.coarse_tokens(), tokens, b.tau, b.eps)?,
                v3: text_guided_embed(image.fine_tokens(), tokens, b.tau, b.eps)?,
            };
            rerank_score(image.recall_embedding(), &out, b.lambda)
        }
        // The pooled score does not depend on which side is the query.
        Interaction::PooledMeans => cfg.interaction.score(
            image.coarse_tokens(),
            image.fine_tokens(),
            text.token_embeddings(),
            text.global_embedding(),
            &cfg.btib,
        ),
    }
}

fn i2t_query(
    image: &GalleryEntry,
    texts: &[QueryText],
    k: Option<usize>,
    cfg: &RetrievalConfig,
) -> Result<QueryRanking> {
    let pool: Vec<usize> = match k {
        None => (0..texts.len()).collect(),
        Some(k) => {
            let v1 = image.recall_embedding().as_slice();
            let mut scored: Vec<((&str, usize), f64)> = texts
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    let s = cosine_slices(v1, t.global_embedding().as_slice(), DEFAULT_EPS);
                    ((t.id(), j), s)
                })
                .collect();
            if k < scored.len() {
                scored.select_nth_unstable_by(k - 1, rank_order);
                scored.truncate(k);
            }
            scored.sort_unstable_by(rank_order);
            scored.into_iter().map(|((_, j), _)| j).collect()
        }
    };
    let scored = pool
        .iter()
        .map(|&j| Ok((texts[j].id(), image_to_text_score(image, &texts[j], cfg)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(QueryRanking {
        query_id: image.id().to_string(),
        ranked: ranked_ids(scored),
        candidates: k.map(|_| pool.iter().map(|&j| texts[j].id().to_string()).collect()),
    })
}

/// Image-to-text run over all gallery images. `k = None` is the one-stage variant.
pub fn run_image_to_text(
    gallery: &Gallery,
    texts: &[QueryText],
    k: Option<usize>,
    cfg: &RetrievalConfig,
) -> Result<RetrievalRun> {
    check_config(gallery, texts, cfg)?;
    if k == Some(0) {
        return Err(param("candidate size k must be >= 1"));
    }
    let timed = gallery
        .entries()
        .par_iter()
        .map(|e| {
            let start = Instant::now();
            let r = i2t_query(e, texts, k, cfg)?;
            Ok((r, elapsed_ns(start)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mode = if k.is_some() { Mode::TwoStage } else { Mode::OneStage };
    Ok(collect_run(mode, Direction::ImageToText, k, timed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecallTriple {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl RecallTriple {
    pub fn of(run: &RetrievalRun, truth: &GroundTruth) -> Result<Self> {
        Ok(Self {
            r1: recall_at_k(run, truth, 1)?,
            r5: recall_at_k(run, truth, 5)?,
            r10: recall_at_k(run, truth, 10)?,
        })
    }

    fn percents(&self) -> [f64; 3] {
        [self.r1, self.r5, self.r10].map(|v| 100.0 * v)
    }
}

/// Recall figures for one configuration. `r_at` values are fractions; `mr`
/// and `random_baseline_mr` are percentages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub i2t: RecallTriple,
    pub t2i: RecallTriple,
    pub mr: f64,
    pub i2t_recall_ceiling: f64,
    pub t2i_recall_ceiling: f64,
    pub random_baseline_mr: f64,
    pub gallery_size: usize,
    pub query_count: usize,
    /// Candidate size; `None` means one-stage.
    pub k: Option<usize>,
    pub config: RetrievalConfig,
}

/// Both directions, both runs kept for per-query reporting.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub i2t: RetrievalRun,
    pub t2i: RetrievalRun,
}

pub fn evaluate(
    gallery: &Gallery,
    texts: &[QueryText],
    k: Option<usize>,
    cfg: &RetrievalConfig,
) -> Result<Evaluation> {
    let t2i = match k {
        Some(k) => run_two_stage(gallery, texts, k, cfg)?,
        None => run_one_stage(gallery, texts, cfg)?,
    };
    let i2t = run_image_to_text(gallery, texts, k, cfg)?;
    let t2i_truth = text_to_image_truth(texts);
    let i2t_truth = image_to_text_truth(gallery, texts);
    let ri = RecallTriple::of(&i2t, &i2t_truth)?;
    let rt = RecallTriple::of(&t2i, &t2i_truth)?;
    let six: Vec<f64> = ri.percents().into_iter().chain(rt.percents()).collect();
    let report = MetricsReport {
        i2t: ri,
        t2i: rt,
        mr: mean_recall(&six)?,
        i2t_recall_ceiling: recall_ceiling(&i2t, &i2t_truth)?,
        t2i_recall_ceiling: recall_ceiling(&t2i, &t2i_truth)?,
        random_baseline_mr: random_baseline_mr(gallery, texts)?,
        gallery_size: gallery.len(),
        query_count: texts.len(),
        k,
        config: *cfg,
    };
    Ok(Evaluation { report, i2t, t2i })
}

/// Per-query CSV: direction, mode, k, query, top id, hit flags at 1/5/10 and
/// whether stage one kept a relevant id.
pub fn runs_csv(runs: &[(&RetrievalRun, &GroundTruth)]) -> Result<String> {
    let mut out = String::from("direction,mode,k,query_id,top_id,hit1,hit5,hit10,candidate_hit\n");
    for (run, truth) in runs {
        let mode = match run.mode {
            Mode::OneStage => "one-stage",
            Mode::TwoStage => "two-stage",
        };
        let k = run.k.map(|k| k.to_string()).unwrap_or_default();
        for q in &run.rankings {
            let gt = relevant(truth, &q.query_id)?;
            let hit = |n: usize| q.ranked.iter().take(n).any(|id| gt.contains(id)) as u8;
            let pool = q.candidates.as_ref().unwrap_or(&q.ranked);
            let kept = pool.iter().any(|id| gt.contains(id)) as u8;
            let top = q.ranked.first().map(String::as_str).unwrap_or("");
            writeln!(
                out,
                "{},{mode},{k},{},{top},{},{},{},{kept}",
                run.direction.tag(),
                q.query_id,
                hit(1),
                hit(5),
                hit(10)
            )
            .unwrap();
        }
    }
    Ok(out)
}

/// A timed pipeline variant for text-to-image retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "mode", content = "k", rename_all = "kebab-case")]
pub enum Variant {
    OneStage,
    TwoStage(usize),
}

impl Variant {
    pub fn label(self) -> String {
        match self {
            Variant::OneStage => "one-stage".into(),
            Variant::TwoStage(k) => format!("two-stage-k{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub variant: Variant,
    pub latency_ms_mean: f64,
    pub latency_ms_median: f64,
    pub throughput_qps: f64,
    /// One-stage mean latency over this variant's mean latency.
    pub speedup: f64,
    pub warmup: usize,
    pub reps: usize,
    pub samples: usize,
}

fn run_variant_query(
    gallery: &Gallery,
    q: &QueryText,
    v: Variant,
    cfg: &RetrievalConfig,
) -> Result<QueryRanking> {
    match v {
        Variant::OneStage => t2i_one_stage_query(gallery, q, cfg),
        Variant::TwoStage(k) => t2i_two_stage_query(gallery, q, k, cfg),
    }
}

fn summarize(v: Variant, samples: &mut [u64], warmup: usize, reps: usize) -> Result<BenchReport> {
    if samples.iter().all(|&s| s == 0) {
        return Err(Error::Measurement(format!(
            "{}: every latency sample is zero; timer resolution is too coarse",
            v.label()
        )));
    }
    samples.sort_unstable();
    let n = samples.len();
    let mean_ns = samples.iter().map(|&s| s as f64).sum::<f64>() / n as f64;
    let median_ns = if n % 2 == 1 {
        samples[n / 2] as f64
    } else {
        (samples[n / 2 - 1] as f64 + samples[n / 2] as f64) / 2.0
    };
    let mean_ms = mean_ns / 1e6;
    Ok(BenchReport {
        variant: v,
        latency_ms_mean: mean_ms,
        latency_ms_median: median_ns / 1e6,
        throughput_qps: 1000.0 / mean_ms,
        speedup: f64::NAN,
        warmup,
        reps,
        samples: n,
    })
}

/// Single-threaded per-query latency of each variant.
///
/// One-stage is always measured as the reference, whether or not it is listed.
/// Variants are interleaved within each repetition so slow drift in machine
/// state affects all of them alike. Timing covers stage one and stage two
/// only; gallery construction and encoding happen before.
pub fn measure_bench(
    gallery: &Gallery,
    queries: &[QueryText],
    variants: &[Variant],
    reps: usize,
    warmup: usize,
    cfg: &RetrievalConfig,
) -> Result<Vec<BenchReport>> {
    if reps < 3 {
        return Err(param(format!("reps must be >= 3, got {reps}")));
    }
    if warmup < 1 {
        return Err(param("warmup must be >= 1"));
    }
    if queries.is_empty() {
        return Err(param("benchmark needs at least one query"));
    }
    if variants.iter().any(|v| *v == Variant::TwoStage(0)) {
        return Err(param("candidate size k must be >= 1"));
    }
    check_config(gallery, queries, cfg)?;
    let mut all = vec![Variant::OneStage];
    all.extend(variants.iter().copied().filter(|v| *v != Variant::OneStage));
    let mut samples: Vec<Vec<u64>> = vec![Vec::with_capacity(reps * queries.len()); all.len()];
    for rep in 0..warmup + reps {
        for (v, bucket) in all.iter().zip(samples.iter_mut()) {
            for q in queries {
                let start = Instant::now();
                let r = run_variant_query(gallery, q, *v, cfg)?;
                let ns = elapsed_ns(start);
                std::hint::black_box(&r);
                if rep >= warmup {
                    bucket.push(ns);
                }
            }
        }
    }
    let mut reports = all
        .iter()
        .zip(samples.iter_mut())
        .map(|(v, s)| summarize(*v, s, warmup, reps))
        .collect::<Result<Vec<_>>>()?;
    let base = reports[0].latency_ms_mean;
    for r in &mut reports {
        r.speedup = base / r.latency_ms_mean;
    }
    if !variants.contains(&Variant::OneStage) {
        reports.remove(0);
    }
    Ok(reports)
}

/// Rounds a speedup to one decimal for display.
pub fn speedup_display(one_stage_ms: f64, variant_ms: f64) -> f64 {
    (one_stage_ms / variant_ms * 10.0).round() / 10.0
}

pub fn bench_csv(reports: &[BenchReport]) -> String {
    let mut out = String::from("variant,latency_ms_mean,latency_ms_median,throughput_qps,speedup\n");
    for r in reports {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.3},{:.3}",
            r.variant.label(),
            r.latency_ms_mean,
            r.latency_ms_median,
            r.throughput_qps,
            r.speedup
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub mr: f64,
    pub latency_ms_mean: f64,
    pub latency_ms_median: f64,
    pub throughput_qps: f64,
}

/// mR and text-to-image latency for each candidate size.
pub fn k_sweep(
    gallery: &Gallery,
    texts: &[QueryText],
    ks: &[usize],
    reps: usize,
    warmup: usize,
    cfg: &RetrievalConfig,
) -> Result<Vec<SweepRow>> {
    if ks.iter().any(|&k| k == 0) {
        return Err(param("candidate sizes must be >= 1"));
    }
    let variants: Vec<Variant> = ks.iter().map(|&k| Variant::TwoStage(k)).collect();
    let bench = measure_bench(gallery, texts, &variants, reps, warmup, cfg)?;
    ks.iter()
        .zip(&bench)
        .map(|(&k, b)| {
            Ok(SweepRow {
                k,
                mr: evaluate(gallery, texts, Some(k), cfg)?.report.mr,
                latency_ms_mean: b.latency_ms_mean,
                latency_ms_median: b.latency_ms_median,
                throughput_qps: b.throughput_qps,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,mr,latency_ms_mean,latency_ms_median,throughput_qps\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.3}",
            r.k, r.mr, r.latency_ms_mean, r.latency_ms_median, r.throughput_qps
        )
        .unwrap();
    }
    out
}

/// End-to-end settings for the synthetic benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    /// Seed for the initial encoder parameters.
    pub init_seed: u64,
    pub k: usize,
}

impl ExperimentConfig {
    /// Default benchmark with every seed derived from `seed`.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            data: SyntheticSpec {
                seed,
                ..SyntheticSpec::default()
            },
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            init_seed: seed.wrapping_add(1),
            k: 100,
        }
    }

    pub fn retrieval(&self) -> RetrievalConfig {
        RetrievalConfig {
            btib: self.train.btib,
            interaction: self.train.interaction,
        }
    }
}

/// Trained encoders and the encoded held-out split.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub dataset: SyntheticDataset,
    pub params: ToyEncoderParams,
    pub curve: Vec<EpochStats>,
    pub gallery: Gallery,
    pub queries: Vec<QueryText>,
}

/// Generates data, trains on the training split and encodes the held-out split.
pub fn build_benchmark(cfg: &ExperimentConfig) -> Result<Benchmark> {
    let dataset = generate_synthetic(&cfg.data)?;
    train_benchmark(dataset, cfg)
}

pub fn train_benchmark(dataset: SyntheticDataset, cfg: &ExperimentConfig) -> Result<Benchmark> {
    let (train, eval) = dataset.split();
    let init = ToyEncoderParams::<f32>::init(dataset.d_feat, cfg.data.d, cfg.init_seed)?;
    let model = train_toy(&dataset, &train, &init, &cfg.train)?;
    let (gallery, queries) = encode_split(&model.params, &dataset, &eval, cfg.train.aggregation)?;
    Ok(Benchmark {
        dataset,
        params: model.params,
        curve: model.curve,
        gallery,
        queries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    CoarseOnly,
    FineOnly,
    WithoutBtib,
    WithoutIntra,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::CoarseOnly,
        Ablation::FineOnly,
        Ablation::WithoutBtib,
        Ablation::WithoutIntra,
        Ablation::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::CoarseOnly => "coarse-only",
            Ablation::FineOnly => "fine-only",
            Ablation::WithoutBtib => "without-btib",
            Ablation::WithoutIntra => "without-intra",
            Ablation::Full => "full",
        }
    }

    /// The experiment with this component removed.
    ///
    /// Dropping a granularity removes it from the recall embedding, the
    /// inter-modal and intra-modal loss terms and the rerank score.
    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = *base;
        let loss = &mut cfg.train.loss;
        match self {
            Ablation::CoarseOnly => {
                loss.alpha[2] = 0.0;
                loss.intra_weights = [1.0, 0.0];
                cfg.train.aggregation = Aggregation::CoarseOnly;
                cfg.train.btib.lambda = 0.0;
            }
            Ablation::FineOnly => {
                loss.alpha[1] = 0.0;
                loss.intra_weights = [0.0, 1.0];
                cfg.train.aggregation = Aggregation::FineOnly;
                cfg.train.btib.lambda = 1.0;
            }
            Ablation::WithoutBtib => cfg.train.interaction = Interaction::PooledMeans,
            Ablation::WithoutIntra => loss.beta = 0.0,
            Ablation::Full => {}
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Ablation,
    pub i2t_r1: f64,
    pub t2i_r1: f64,
    pub mr: f64,
    pub final_loss: f64,
    pub loss: LossConfig,
}

/// Trains and evaluates every ablation on the same data, split and initial parameters.
pub fn ablation_suite(dataset: &SyntheticDataset, base: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    Ablation::ALL
        .iter()
        .map(|&variant| {
            let cfg = variant.apply(base);
            let bench = train_benchmark(dataset.clone(), &cfg)?;
            let report = evaluate(&bench.gallery, &bench.queries, Some(cfg.k), &cfg.retrieval())?.report;
            Ok(AblationRow {
                variant,
                i2t_r1: 100.0 * report.i2t.r1,
                t2i_r1: 100.0 * report.t2i.r1,
                mr: report.mr,
                final_loss: bench.curve.last().map(|e| e.loss).unwrap_or(f64::NAN),
                loss: cfg.train.loss,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,i2t_r1,t2i_r1,mr,final_loss\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.4},{:.4},{:.4},{:.6}",
            r.variant.label(),
            r.i2t_r1,
            r.t2i_r1,
            r.mr,
            r.final_loss
        )
        .unwrap();
    }
    out
}

/// Report file stem embedding mode, candidate size and seed.
pub fn report_stem(kind: &str, k: Option<usize>, seed: u64) -> String {
    match k {
        Some(k) => format!("{kind}-two-stage-k{k}-seed{seed}"),
        None => format!("{kind}-one-stage-seed{seed}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{DenseMatrix, DenseVector};

    fn run_of(lists: &[(&str, &[&str])]) -> RetrievalRun {
        RetrievalRun {
            mode: Mode::OneStage,
            direction: Direction::TextToImage,
            k: None,
            rankings: lists
                .iter()
                .map(|(q, ids)| QueryRanking {
                    query_id: q.to_string(),
                    ranked: ids.iter().map(|s| s.to_string()).collect(),
                    candidates: None,
                })
                .collect(),
            timings_ns: vec![],
        }
    }

    fn truth_of(pairs: &[(&str, &str)]) -> GroundTruth {
        let mut t = GroundTruth::new();
        for (q, g) in pairs {
            t.entry(q.to_string()).or_default().insert(g.to_string());
        }
        t
    }

    #[test]
    fn recall_counts_examples() {
        let ids: Vec<String> = (0..15).map(|i| format!("g{i:02}")).collect();
        let at = |rank: usize| -> Vec<&str> {
            let mut v: Vec<&str> = ids.iter().map(String::as_str).filter(|s| *s != "gt").collect();
            v.insert(rank - 1, "gt");
            v
        };
        let lists: Vec<(String, Vec<&str>)> =
            [1usize, 3, 7, 12].iter().map(|&r| (format!("q{r}"), at(r))).collect();
        let borrowed: Vec<(&str, &[&str])> =
            lists.iter().map(|(q, l)| (q.as_str(), l.as_slice())).collect();
        let run = run_of(&borrowed);
        let truth = truth_of(&[("q1", "gt"), ("q3", "gt"), ("q7", "gt"), ("q12", "gt")]);
        assert_eq!(recall_at_k(&run, &truth, 5).unwrap(), 0.5);
        assert_eq!(recall_at_k(&run, &truth, 100).unwrap(), 1.0);

        let top = run_of(&[("a", &["x", "y"]), ("b", &["z", "x"])]);
        let t = truth_of(&[("a", "x"), ("b", "z")]);
        for k in [1, 2, 5] {
            assert_eq!(recall_at_k(&top, &t, k).unwrap(), 1.0);
        }
        let missing = truth_of(&[("a", "x")]);
        assert!(matches!(recall_at_k(&top, &missing, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn mean_recall_examples() {
        let mr = mean_recall(&[29.60, 51.20, 65.30, 26.70, 57.80, 72.34]).unwrap();
        assert_eq!((mr * 100.0).round() / 100.0, 50.49);
        assert_eq!(mean_recall(&[0.0; 6]).unwrap(), 0.0);
        assert!((mean_recall(&[42.5; 6]).unwrap() - 42.5).abs() < 1e-12);
        assert!(matches!(mean_recall(&[1.0; 5]), Err(Error::Parameter(_))));
    }

    #[test]
    fn speedup_example() {
        assert_eq!(speedup_display(468.5, 24.7), 19.0);
    }

    #[test]
    fn random_probability_matches_enumeration() {
        // n = 5, g = 2, k = 2: of the C(5,2) = 10 top pairs, C(3,2) = 3 miss.
        assert!((random_hit_probability(5, 2, 2) - 0.7).abs() < 1e-12);
        assert_eq!(random_hit_probability(5, 4, 2), 1.0);
        assert_eq!(random_hit_probability(5, 0, 2), 0.0);
        assert!((random_hit_probability(10, 1, 3) - 0.3).abs() < 1e-12);
    }

    fn entry(id: &str, v: &[f64]) -> GalleryEntry {
        let h = DenseMatrix::from_f64(1, v.len(), v).unwrap();
        GalleryEntry::new(id, h.clone(), h, Aggregation::Both).unwrap()
    }

    fn text(id: &str, v: &[f64], gt: &[&str]) -> QueryText {
        QueryText::new(
            id,
            DenseMatrix::from_f64(1, v.len(), v).unwrap(),
            DenseVector::from_f64(v).unwrap(),
            gt.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn singleton_and_tied_galleries() {
        let cfg = RetrievalConfig::default();
        let g = Gallery::from_entries(2, vec![entry("only", &[1.0, 0.0])]).unwrap();
        let q = [text("q", &[0.0, 1.0], &["only"])];
        assert_eq!(run_one_stage(&g, &q, &cfg).unwrap().rankings[0].ranked, ["only"]);

        let tied = Gallery::from_entries(
            2,
            vec![entry("c", &[1.0, 0.0]), entry("a", &[1.0, 0.0]), entry("b", &[1.0, 0.0])],
        )
        .unwrap();
        let run = run_one_stage(&tied, &q, &cfg).unwrap();
        assert_eq!(run.rankings[0].ranked, ["a", "b", "c"]);
        let two = run_two_stage(&tied, &q, 1, &cfg).unwrap();
        assert_eq!(two.rankings[0].ranked, ["a"]);
    }

    #[test]
    fn two_stage_k1_is_recall_top1() {
        let cfg = RetrievalConfig::default();
        let g = Gallery::from_entries(
            2,
            vec![entry("x", &[1.0, 0.0]), entry("y", &[0.6, 0.8]), entry("z", &[0.0, 1.0])],
        )
        .unwrap();
        let q = [text("q", &[0.8, 0.6], &["x"])];
        let run = run_two_stage(&g, &q, 1, &cfg).unwrap();
        let top = recall_topk(&g, &q[0], 1).unwrap();
        assert_eq!(run.rankings[0].ranked, top.ids().collect::<Vec<_>>());
        run.check().unwrap();
    }

    #[test]
    fn i2t_truth_inverts_t2i() {
        let g = Gallery::from_entries(2, vec![entry("i0", &[1.0, 0.0]), entry("i1", &[0.0, 1.0])])
            .unwrap();
        let texts = [text("t0", &[1.0, 0.0], &["i0"]), text("t1", &[0.0, 1.0], &["i0", "i1"])];
        let truth = image_to_text_truth(&g, &texts);
        assert_eq!(truth["i0"], BTreeSet::from(["t0".to_string(), "t1".to_string()]));
        assert_eq!(truth["i1"], BTreeSet::from(["t1".to_string()]));
    }

    #[test]
    fn ablation_configs_change_only_their_component() {
        let base = ExperimentConfig::with_seed(3);
        let no_intra = Ablation::WithoutIntra.apply(&base);
        assert_eq!(no_intra.train.loss.beta, 0.0);
        assert_eq!(
            TrainConfig {
                loss: LossConfig { beta: base.train.loss.beta, ..no_intra.train.loss },
                ..no_intra.train
            },
            base.train
        );
        assert_eq!(Ablation::Full.apply(&base), base);
        let wb = Ablation::WithoutBtib.apply(&base);
        assert_eq!(wb.train.interaction, Interaction::PooledMeans);
        assert_eq!(wb.train.loss, base.train.loss);
    }

    #[test]
    fn bench_rejects_bad_settings() {
        let g = Gallery::from_entries(2, vec![entry("x", &[1.0, 0.0])]).unwrap();
        let q = [text("q", &[1.0, 0.0], &["x"])];
        let cfg = RetrievalConfig::default();
        assert!(matches!(
            measure_bench(&g, &q, &[Variant::OneStage], 2, 1, &cfg),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            measure_bench(&g, &q, &[Variant::OneStage], 3, 0, &cfg),
            Err(Error::Parameter(_))
        ));
        let reports = measure_bench(&g, &q, &[Variant::OneStage, Variant::TwoStage(1)], 3, 1, &cfg);
        match reports {
            Ok(r) => {
                assert_eq!(r[0].speedup, 1.0);
                assert_eq!(r[0].samples, 3);
                assert_eq!(r[1].variant, Variant::TwoStage(1));
            }
            Err(e) => assert!(matches!(e, Error::Measurement(_))),
        }
    }

    #[test]
    fn all_zero_samples_are_a_measurement_error() {
        let mut s = vec![0u64; 5];
        assert!(matches!(
            summarize(Variant::OneStage, &mut s, 1, 5),
            Err(Error::Measurement(_))
        ));
        let mut s = vec![1_000_000u64, 3_000_000, 2_000_000];
        let r = summarize(Variant::OneStage, &mut s, 1, 3).unwrap();
        assert_eq!(r.latency_ms_median, 2.0);
        assert!((r.throughput_qps - 500.0).abs() < 1e-9);
    }
}
