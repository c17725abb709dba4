//! Stage one: exhaustive text-agnostic scoring of the gallery and top-k selection.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{param, shape, Result};
use crate::gallery::{Gallery, QueryText};
use crate::numerics::{cosine_slices, rank_order, Real, DEFAULT_EPS};

/// One recall hit. `index` points into the gallery the set was computed from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub index: usize,
    pub id: String,
    pub score: f64,
}

/// Top-k recall output for one query, ordered by descending score then id.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateSet {
    pub query_id: String,
    pub candidates: Vec<Candidate>,
    pub k_requested: usize,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().map(|c| c.id.as_str())
    }
}

fn check_dim<T: Real>(gallery: &Gallery<T>, query: &QueryText<T>) -> Result<()> {
    if gallery.dim() != query.dim() {
        return Err(shape(format!(
            "gallery d={} but query {:?} has d={}",
            gallery.dim(),
            query.id(),
            query.dim()
        )));
    }
    Ok(())
}

/// Cosine between the query's global embedding and each recall embedding, in gallery order.
pub fn recall_scores<T: Real>(gallery: &Gallery<T>, query: &QueryText<T>) -> Result<Vec<f64>> {
    check_dim(gallery, query)?;
    let t = query.global_embedding().as_slice();
    Ok(gallery
        .entries()
        .iter()
        .map(|e| cosine_slices(t, e.recall_embedding().as_slice(), DEFAULT_EPS))
        .collect())
}

/// Same as [`recall_scores`], split across the rayon pool. Output is bitwise identical.
pub fn recall_scores_par<T: Real>(gallery: &Gallery<T>, query: &QueryText<T>) -> Result<Vec<f64>> {
    check_dim(gallery, query)?;
    let t = query.global_embedding().as_slice();
    Ok(gallery
        .entries()
        .par_iter()
        .map(|e| cosine_slices(t, e.recall_embedding().as_slice(), DEFAULT_EPS))
        .collect())
}

/// Selects the `min(k, n)` best `(index, score)` pairs with id-based tie-breaking.
pub(crate) fn select_top_k<T: Real>(
    gallery: &Gallery<T>,
    scores: &[f64],
    k: usize,
) -> Result<Vec<Candidate>> {
    if k == 0 {
        return Err(param("candidate size k must be >= 1"));
    }
    let entries = gallery.entries();
    let order = |a: &(usize, f64), b: &(usize, f64)| {
        rank_order(&(entries[a.0].id(), a.1), &(entries[b.0].id(), b.1))
    };
    let mut pairs: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    if k < pairs.len() {
        pairs.select_nth_unstable_by(k - 1, order);
        pairs.truncate(k);
    }
    pairs.sort_unstable_by(order);
    Ok(pairs
        .into_iter()
        .map(|(index, score)| Candidate {
            index,
            id: entries[index].id().to_string(),
            score,
        })
        .collect())
}

pub fn recall_topk<T: Real>(
    gallery: &Gallery<T>,
    query: &QueryText<T>,
    k: usize,
) -> Result<CandidateSet> {
    if k == 0 {
        return Err(param("candidate size k must be >= 1"));
    }
    let scores = recall_scores(gallery, query)?;
    Ok(CandidateSet {
        query_id: query.id().to_string(),
        candidates: select_top_k(gallery, &scores, k)?,
        k_requested: k,
    })
}
