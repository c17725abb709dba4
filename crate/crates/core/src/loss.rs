//! Inter- and intra-modal training objective with analytic gradients.
//!
//! For a batch of `N` pairs with text rows `t_i` and image branches
//! `v_{1,i}`, `v_{2,i}`, `v_{3,i}`:
//!
//! ```text
//! inter_k = 1/N² Σ_ij softplus(-y_ij t_i·v_{k,j} / τ)       y_ij = +1 if i = j else -1
//! inter   = Σ_k α_k inter_k
//! a_ij    = v_{1,i}·v_{1,j};  N_M(i) = top-M of a_i· excluding i
//! g_ij    = softmax over N_M(i) of a_ij / σ
//! intra_k = 1/N Σ_i Σ_{j∈N_M(i)} g_ij (1 - v_{k,i}·v_{k,j})   k ∈ {2, 3}
//! total   = inter + β (intra_2 + intra_3)
//! ```

use serde::Serialize;

use crate::error::{invalid, param, shape, Result};
use crate::numerics::{dot, rank_order, DenseMatrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossConfig {
    pub tau_loss: f64,
    pub beta: f64,
    /// Inter-modal weights for the recall, coarse and fine branches.
    pub alpha: [f64; 3],
    pub m_neighbors: usize,
    pub sigma: f64,
    /// Per-branch weights of the intra terms for branches 2 and 3. `[1, 1]`
    /// is the plain sum; single-granularity ablations zero one side.
    pub intra_weights: [f64; 2],
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_loss: 0.07,
            beta: 1.0,
            alpha: [1.0, 1.0, 1.0],
            m_neighbors: 5,
            sigma: 0.1,
            intra_weights: [1.0, 1.0],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_loss > 0.0) {
            return Err(param(format!("tau_loss must be > 0, got {}", self.tau_loss)));
        }
        if !(self.beta >= 0.0) {
            return Err(param(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.alpha.iter().chain(&self.intra_weights).any(|a| !(*a >= 0.0)) {
            return Err(param("alpha and intra weights must be >= 0"));
        }
        if self.m_neighbors == 0 {
            return Err(param("m_neighbors must be >= 1"));
        }
        if !(self.sigma > 0.0) {
            return Err(param(format!("sigma must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Batch of `N` aligned pairs; row `i` of every block belongs to pair `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentBatch<T: Real = f32> {
    pub text: DenseMatrix<T>,
    pub v1: DenseMatrix<T>,
    pub v2: DenseMatrix<T>,
    pub v3: DenseMatrix<T>,
}

impl<T: Real> AlignmentBatch<T> {
    /// Checks shapes and unit-norm rows.
    pub fn new(
        text: DenseMatrix<T>,
        v1: DenseMatrix<T>,
        v2: DenseMatrix<T>,
        v3: DenseMatrix<T>,
    ) -> Result<Self> {
        let b = Self::from_raw(text, v1, v2, v3)?;
        for (name, m) in b.blocks() {
            for (i, r) in m.row_iter().enumerate() {
                let n = dot(r, r).sqrt();
                if (n - 1.0).abs() > 1e-4 {
                    return Err(invalid(format!("{name} row {i} has norm {n}")));
                }
            }
        }
        Ok(b)
    }

    /// Checks shapes only. Used where rows are deliberately perturbed off the sphere.
    pub fn from_raw(
        text: DenseMatrix<T>,
        v1: DenseMatrix<T>,
        v2: DenseMatrix<T>,
        v3: DenseMatrix<T>,
    ) -> Result<Self> {
        let (n, d) = (text.rows(), text.cols());
        for (name, m) in [("v1", &v1), ("v2", &v2), ("v3", &v3)] {
            if m.rows() != n || m.cols() != d {
                return Err(shape(format!(
                    "{name} is {}x{}, text is {n}x{d}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        Ok(Self { text, v1, v2, v3 })
    }

    pub fn len(&self) -> usize {
        self.text.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn blocks(&self) -> [(&'static str, &DenseMatrix<T>); 4] {
        [
            ("text", &self.text),
            ("v1", &self.v1),
            ("v2", &self.v2),
            ("v3", &self.v3),
        ]
    }

    fn branch(&self, k: usize) -> &DenseMatrix<T> {
        match k {
            0 => &self.v1,
            1 => &self.v2,
            _ => &self.v3,
        }
    }
}

/// Per-sample neighbor lists with their softmax weights and raw similarities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeighborGraph {
    pub neighbors: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
    pub similarities: Vec<Vec<f64>>,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub inter_total: f64,
    pub inter_branch: [f64; 3],
    pub intra_total: f64,
    /// Intra terms for branches 2 and 3.
    pub intra_branch: [f64; 2],
}

/// `log(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn inter_branch_loss<T: Real>(
    text: &DenseMatrix<T>,
    v_k: &DenseMatrix<T>,
    tau_loss: f64,
) -> Result<f64> {
    let n = text.rows();
    if n == 0 {
        return Err(param("inter-modal loss needs a non-empty batch"));
    }
    if v_k.rows() != n || v_k.cols() != text.cols() {
        return Err(shape("text and image blocks differ in shape"));
    }
    if !(tau_loss > 0.0) {
        return Err(param(format!("tau_loss must be > 0, got {tau_loss}")));
    }
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let y = if i == j { 1.0 } else { -1.0 };
            acc += softplus(-y * dot(text.row(i), v_k.row(j)) / tau_loss);
        }
    }
    Ok(acc / (n * n) as f64)
}

/// Weighted inter-modal total and the three unweighted branch losses.
pub fn inter_loss<T: Real>(batch: &AlignmentBatch<T>, cfg: &LossConfig) -> Result<(f64, [f64; 3])> {
    let mut branches = [0.0; 3];
    for (k, b) in branches.iter_mut().enumerate() {
        *b = inter_branch_loss(&batch.text, batch.branch(k), cfg.tau_loss)?;
    }
    let total = branches.iter().zip(&cfg.alpha).map(|(l, a)| a * l).sum();
    Ok((total, branches))
}

/// For each sample, the `min(M, N-1)` most similar other samples under `v1`.
pub fn neighbor_support<T: Real>(v1: &DenseMatrix<T>, m: usize) -> Result<Vec<Vec<usize>>> {
    let n = v1.rows();
    if n < 2 {
        return Err(param("neighbor graph needs at least two samples"));
    }
    if m == 0 {
        return Err(param("m_neighbors must be >= 1"));
    }
    let keep = m.min(n - 1);
    Ok((0..n)
        .map(|i| {
            let mut others: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, dot(v1.row(i), v1.row(j))))
                .collect();
            others.sort_by(|a, b| rank_order(a, b));
            others.into_iter().take(keep).map(|(j, _)| j).collect()
        })
        .collect())
}

/// Softmax weights over a fixed neighbor support.
pub fn graph_on_support<T: Real>(
    v1: &DenseMatrix<T>,
    support: Vec<Vec<usize>>,
    sigma: f64,
) -> Result<NeighborGraph> {
    if !(sigma > 0.0) {
        return Err(param(format!("sigma must be > 0, got {sigma}")));
    }
    if support.len() != v1.rows() {
        return Err(invalid("neighbor support does not match batch size"));
    }
    let mut weights = Vec::with_capacity(support.len());
    let mut sims = Vec::with_capacity(support.len());
    for (i, nb) in support.iter().enumerate() {
        if nb.iter().any(|&j| j >= v1.rows()) {
            return Err(invalid(format!("neighbor index out of range for sample {i}")));
        }
        let a: Vec<f64> = nb.iter().map(|&j| dot(v1.row(i), v1.row(j))).collect();
        let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = a.iter().map(|x| ((x - max) / sigma).exp()).collect();
        let z: f64 = e.iter().sum();
        weights.push(e.into_iter().map(|x| x / z).collect());
        sims.push(a);
    }
    Ok(NeighborGraph {
        neighbors: support,
        weights,
        similarities: sims,
    })
}

pub fn neighbor_graph<T: Real>(v1: &DenseMatrix<T>, m: usize, sigma: f64) -> Result<NeighborGraph> {
    let support = neighbor_support(v1, m)?;
    graph_on_support(v1, support, sigma)
}

pub fn intra_branch_loss<T: Real>(graph: &NeighborGraph, v_k: &DenseMatrix<T>) -> Result<f64> {
    let n = v_k.rows();
    if graph.len() != n {
        return Err(invalid(format!(
            "graph covers {} samples, branch has {n}",
            graph.len()
        )));
    }
    let mut acc = 0.0;
    for (i, (nb, w)) in graph.neighbors.iter().zip(&graph.weights).enumerate() {
        for (&j, g) in nb.iter().zip(w) {
            if j >= n {
                return Err(invalid(format!("neighbor {j} of sample {i} out of range")));
            }
            acc += g * (1.0 - dot(v_k.row(i), v_k.row(j)));
        }
    }
    Ok(acc / n as f64)
}

fn check_batch<T: Real>(batch: &AlignmentBatch<T>, cfg: &LossConfig) -> Result<()> {
    cfg.validate()?;
    if batch.len() < 2 {
        return Err(param("the combined loss needs a batch of at least two pairs"));
    }
    Ok(())
}

pub fn i2m_loss<T: Real>(batch: &AlignmentBatch<T>, cfg: &LossConfig) -> Result<LossBreakdown> {
    check_batch(batch, cfg)?;
    let support = neighbor_support(&batch.v1, cfg.m_neighbors)?;
    i2m_loss_on_support(batch, cfg, support)
}

/// The combined loss with the neighbor sets fixed by the caller.
pub fn i2m_loss_on_support<T: Real>(
    batch: &AlignmentBatch<T>,
    cfg: &LossConfig,
    support: Vec<Vec<usize>>,
) -> Result<LossBreakdown> {
    check_batch(batch, cfg)?;
    let (inter_total, inter_branch) = inter_loss(batch, cfg)?;
    let graph = graph_on_support(&batch.v1, support, cfg.sigma)?;
    let intra_branch = [
        intra_branch_loss(&graph, &batch.v2)?,
        intra_branch_loss(&graph, &batch.v3)?,
    ];
    let intra_total = cfg.intra_weights[0] * intra_branch[0] + cfg.intra_weights[1] * intra_branch[1];
    Ok(LossBreakdown {
        total: inter_total + cfg.beta * intra_total,
        inter_total,
        inter_branch,
        intra_total,
        intra_branch,
    })
}

/// `∂ total / ∂` every entry of the four batch blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub text: DenseMatrix<f64>,
    pub v1: DenseMatrix<f64>,
    pub v2: DenseMatrix<f64>,
    pub v3: DenseMatrix<f64>,
}

pub fn i2m_gradients<T: Real>(batch: &AlignmentBatch<T>, cfg: &LossConfig) -> Result<BatchGradients> {
    i2m_loss_and_gradients(batch, cfg).map(|(_, g)| g)
}

/// Loss and gradients in one pass. Neighbor selection is held fixed; the
/// softmax weights still depend on `v1` and contribute to its gradient.
pub fn i2m_loss_and_gradients<T: Real>(
    batch: &AlignmentBatch<T>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, BatchGradients)> {
    let breakdown = i2m_loss(batch, cfg)?;
    let (n, d) = (batch.len(), batch.text.cols());
    let mut g_text = vec![0.0f64; n * d];
    let mut g_v = [vec![0.0f64; n * d], vec![0.0f64; n * d], vec![0.0f64; n * d]];

    let nn = (n * n) as f64;
    for k in 0..3 {
        let alpha = cfg.alpha[k];
        if alpha == 0.0 {
            continue;
        }
        let vk = batch.branch(k);
        for i in 0..n {
            let ti = batch.text.row(i);
            for j in 0..n {
                let vj = vk.row(j);
                let y = if i == j { 1.0 } else { -1.0 };
                let s = dot(ti, vj);
                let c = alpha / nn * (-y / cfg.tau_loss) * sigmoid(-y * s / cfg.tau_loss);
                for q in 0..d {
                    g_text[i * d + q] += c * vj[q].widen();
                    g_v[k][j * d + q] += c * ti[q].widen();
                }
            }
        }
    }

    if cfg.beta != 0.0 {
        let support = neighbor_support(&batch.v1, cfg.m_neighbors)?;
        let graph = graph_on_support(&batch.v1, support, cfg.sigma)?;
        let scale = cfg.beta / n as f64;
        for i in 0..n {
            let nb = &graph.neighbors[i];
            let w = &graph.weights[i];
            // ∂L/∂g_ij, used for the softmax path into v1.
            let mut e = vec![0.0f64; nb.len()];
            for (k, wk) in [(1usize, cfg.intra_weights[0]), (2, cfg.intra_weights[1])] {
                if wk == 0.0 {
                    continue;
                }
                let vk = batch.branch(k);
                let vi = vk.row(i);
                for (m, (&j, g)) in nb.iter().zip(w).enumerate() {
                    let vj = vk.row(j);
                    e[m] += scale * wk * (1.0 - dot(vi, vj));
                    let c = -scale * wk * g;
                    for q in 0..d {
                        g_v[k][i * d + q] += c * vj[q].widen();
                        g_v[k][j * d + q] += c * vi[q].widen();
                    }
                }
            }
            let mean_e: f64 = w.iter().zip(&e).map(|(g, x)| g * x).sum();
            let v1i = batch.v1.row(i);
            for (m, (&j, g)) in nb.iter().zip(w).enumerate() {
                let da = g * (e[m] - mean_e) / cfg.sigma;
                let v1j = batch.v1.row(j);
                for q in 0..d {
                    g_v[0][i * d + q] += da * v1j[q].widen();
                    g_v[0][j * d + q] += da * v1i[q].widen();
                }
            }
        }
    }

    let [g1, g2, g3] = g_v;
    let grads = BatchGradients {
        text: DenseMatrix::new(n, d, g_text)?,
        v1: DenseMatrix::new(n, d, g1)?,
        v2: DenseMatrix::new(n, d, g2)?,
        v3: DenseMatrix::new(n, d, g3)?,
    };
    Ok((breakdown, grads))
}
