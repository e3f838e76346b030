//! Cross-entropy and supervised contrastive losses with hand-derived
//! gradients, plus the gradient-structure results they imply for CAD pairs.
//!
//! Contrastive loss for anchor `i` with positives `P_i` (same label, `j ≠ i`)
//! and negatives `N_i` (different label):
//!
//! ```text
//! L_i = mean_{p ∈ P_i} −log( e^{s_ip/τ} / (e^{s_ip/τ} + Σ_{n ∈ N_i} e^{s_in/τ}) )
//! ```
//!
//! Each positive's denominator holds only that positive and the negatives.
//! Anchors without positives either contribute `log Σ_n e^{s_in/τ}`
//! ([`NoPositivePolicy::RepulsionOnly`]) or nothing
//! ([`NoPositivePolicy::SkipAnchor`]). The batch loss averages over
//! contributing anchors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_model::{
    signed_label, BlockLayout, EditMode, FeatureModelSpec, Role, Sample, Sampler, NEUTRAL,
};
use crate::linalg::{dot, norm, Matrix};
use crate::model::LinearModel;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Cosine,
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoPositivePolicy {
    RepulsionOnly,
    SkipAnchor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the contrastive term; `1 − λ` weights cross-entropy.
    pub lambda: f64,
    pub tau: f64,
    pub similarity: Similarity,
    /// Drop neutral-labeled samples from the contrastive term entirely.
    pub neutral_excluded: bool,
    pub no_positive_policy: NoPositivePolicy,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.7,
            tau: 0.3,
            similarity: Similarity::Cosine,
            neutral_excluded: false,
            no_positive_policy: NoPositivePolicy::RepulsionOnly,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::arg("tau", format!("temperature must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::arg("lambda", format!("must lie in [0,1], got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn cross_entropy_only() -> Self {
        Self {
            lambda: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    /// `n × d`, row `i` is `z_i = Wᵀ x_i`.
    pub z: Matrix,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    /// `∂L/∂W`, `m × d`; `None` for a fixed identity encoder.
    pub grad_encoder: Option<Matrix>,
    /// `∂L/∂U`, `d × K`.
    pub grad_head: Matrix,
    pub grad_bias: Option<Vec<f64>>,
    /// Frobenius norm of the `r1`, `r2`, `s` row blocks of `grad_encoder`.
    pub encoder_block_norms: [f64; 3],
}

impl GradReport {
    /// Flattened in the order of [`LinearModel::params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut g = Vec::new();
        if let Some(e) = &self.grad_encoder {
            g.extend_from_slice(e.as_slice());
        }
        g.extend_from_slice(self.grad_head.as_slice());
        if let Some(b) = &self.grad_bias {
            g.extend_from_slice(b);
        }
        g
    }
}

/// Row-block Frobenius norms of an `m × ·` matrix.
pub fn row_block_norms(g: &Matrix, layout: BlockLayout) -> [f64; 3] {
    layout.blocks().map(|r| {
        r.map(|i| g.row(i).iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    })
}

pub fn similarity(a: &[f64], b: &[f64], mode: Similarity) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    match mode {
        Similarity::Dot => Ok(dot(a, b)),
        Similarity::Cosine => {
            let (na, nb) = (norm(a), norm(b));
            if na == 0.0 || nb == 0.0 {
                return Err(Error::arg("z", "cosine similarity of a zero-norm embedding"));
            }
            Ok(dot(a, b) / (na * nb))
        }
    }
}

/// Max-subtracted softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `1 − p_y` as the sum of the other probabilities, which keeps full
/// relative precision when `p_y` is close to one.
fn residual_true(p: &[f64], y: usize) -> f64 {
    p.iter().enumerate().filter(|&(c, _)| c != y).map(|(_, v)| v).sum()
}

/// Mean cross-entropy and its gradient `(softmax − onehot)/n`.
pub fn ce_loss_and_grad(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (n, k) = logits.shape();
    if k < 2 {
        return Err(Error::arg("logits", "need at least two classes"));
    }
    if labels.len() != n || n == 0 {
        return Err(Error::Shape(format!("{n} logit rows, {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::arg("labels", format!("label {bad} out of range for {k} classes")));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, k);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += max + sum.ln() - row[y];
        let g = grad.row_mut(i);
        for (c, gc) in g.iter_mut().enumerate() {
            *gc = (row[c] - max).exp() / sum * inv_n;
        }
        g[y] = -residual_true(g, y);
    }
    Ok((loss * inv_n, grad))
}

/// Similarity matrix over the active rows plus unit vectors and norms for
/// the cosine path.
struct SimilarityCache {
    s: Matrix,
    units: Option<Matrix>,
    norms: Vec<f64>,
}

fn active_indices(labels: &[usize], cfg: &LossConfig) -> Vec<usize> {
    (0..labels.len())
        .filter(|&i| !(cfg.neutral_excluded && labels[i] == NEUTRAL))
        .collect()
}

fn similarities(z: &Matrix, active: &[usize], mode: Similarity) -> Result<SimilarityCache> {
    let n = z.rows();
    let mut s = Matrix::zeros(n, n);
    match mode {
        Similarity::Dot => {
            for (a, &i) in active.iter().enumerate() {
                for &j in &active[a + 1..] {
                    let v = dot(z.row(i), z.row(j));
                    s[(i, j)] = v;
                    s[(j, i)] = v;
                }
            }
            Ok(SimilarityCache {
                s,
                units: None,
                norms: Vec::new(),
            })
        }
        Similarity::Cosine => {
            let mut norms = vec![0.0; n];
            let mut units = Matrix::zeros(n, z.cols());
            for &i in active {
                let nz = norm(z.row(i));
                if nz == 0.0 {
                    return Err(Error::arg(
                        "z",
                        format!("embedding {i} has zero norm; cosine similarity undefined"),
                    ));
                }
                norms[i] = nz;
                for (u, v) in units.row_mut(i).iter_mut().zip(z.row(i)) {
                    *u = v / nz;
                }
            }
            for (a, &i) in active.iter().enumerate() {
                for &j in &active[a + 1..] {
                    let v = dot(units.row(i), units.row(j));
                    s[(i, j)] = v;
                    s[(j, i)] = v;
                }
            }
            Ok(SimilarityCache {
                s,
                units: Some(units),
                norms,
            })
        }
    }
}

/// Per-anchor loss and `∂L_i/∂s_ij` for every `j`, or `None` when the anchor
/// does not contribute.
fn anchor_terms(
    i: usize,
    active: &[usize],
    labels: &[usize],
    s: &Matrix,
    cfg: &LossConfig,
) -> Option<(f64, Vec<(usize, f64)>)> {
    let tau = cfg.tau;
    let positives: Vec<usize> = active
        .iter()
        .copied()
        .filter(|&j| j != i && labels[j] == labels[i])
        .collect();
    let negatives: Vec<usize> = active
        .iter()
        .copied()
        .filter(|&j| labels[j] != labels[i])
        .collect();
    let neg_logits: Vec<f64> = negatives.iter().map(|&n| s[(i, n)] / tau).collect();
    if positives.is_empty() {
        if negatives.is_empty() || cfg.no_positive_policy == NoPositivePolicy::SkipAnchor {
            return None;
        }
        let max = neg_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = neg_logits.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let grads = negatives
            .iter()
            .zip(&exps)
            .map(|(&n, e)| (n, e / sum / tau))
            .collect();
        return Some((max + sum.ln(), grads));
    }
    let inv_p = 1.0 / positives.len() as f64;
    let mut loss = 0.0;
    let mut g_neg = vec![0.0; negatives.len()];
    let mut grads = Vec::with_capacity(positives.len() + negatives.len());
    for &p in &positives {
        let lp = s[(i, p)] / tau;
        let max = neg_logits.iter().copied().fold(lp, f64::max);
        let ep = (lp - max).exp();
        let en: Vec<f64> = neg_logits.iter().map(|v| (v - max).exp()).collect();
        let denom = ep + en.iter().sum::<f64>();
        loss += max + denom.ln() - lp;
        grads.push((p, inv_p * (ep / denom - 1.0) / tau));
        for (g, e) in g_neg.iter_mut().zip(&en) {
            *g += inv_p * (e / denom) / tau;
        }
    }
    grads.extend(negatives.iter().copied().zip(g_neg));
    Some((loss * inv_p, grads))
}

/// Contrastive loss and `∂L/∂z` (`n × d`).
pub fn cl_loss_and_grad(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<(f64, Matrix)> {
    cfg.validate()?;
    let z = &batch.z;
    let labels = &batch.labels;
    let n = z.rows();
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} embeddings, {} labels", labels.len())));
    }
    if n < 2 {
        return Err(Error::arg("batch", "contrastive loss needs at least two samples"));
    }
    let active = active_indices(labels, cfg);
    let single_label = active.iter().all(|&i| labels[i] == labels[active[0]]);
    if active.is_empty() || (single_label && cfg.no_positive_policy == NoPositivePolicy::SkipAnchor) {
        return Err(Error::Undefined("CL undefined: no contrastive structure".into()));
    }
    let cache = similarities(z, &active, cfg.similarity)?;

    let mut contributing = 0usize;
    let mut total = 0.0;
    let mut g_s: Vec<(usize, usize, f64)> = Vec::new();
    for &i in &active {
        if let Some((loss_i, grads)) = anchor_terms(i, &active, labels, &cache.s, cfg) {
            contributing += 1;
            total += loss_i;
            g_s.extend(grads.into_iter().map(|(j, g)| (i, j, g)));
        }
    }
    if contributing == 0 {
        return Err(Error::Undefined("CL undefined: no contrastive structure".into()));
    }
    let scale = 1.0 / contributing as f64;
    let mut grad = Matrix::zeros(n, z.cols());
    for (i, j, g) in g_s {
        let g = g * scale;
        match cfg.similarity {
            Similarity::Dot => {
                let zj = z.row(j).to_vec();
                let zi = z.row(i).to_vec();
                grad.row_mut(i).iter_mut().zip(&zj).for_each(|(d, v)| *d += g * v);
                grad.row_mut(j).iter_mut().zip(&zi).for_each(|(d, v)| *d += g * v);
            }
            Similarity::Cosine => {
                let units = cache.units.as_ref().expect("cosine cache");
                let s = cache.s[(i, j)];
                let (ui, uj) = (units.row(i).to_vec(), units.row(j).to_vec());
                let (gi, gj) = (g / cache.norms[i], g / cache.norms[j]);
                for (c, d) in grad.row_mut(i).iter_mut().enumerate() {
                    *d += gi * (uj[c] - s * ui[c]);
                }
                for (c, d) in grad.row_mut(j).iter_mut().enumerate() {
                    *d += gj * (ui[c] - s * uj[c]);
                }
            }
        }
    }
    Ok((total * scale, grad))
}

/// Expected probability over positives `p ∈ P_i` of anchor `i` being
/// recognized as negative `n`.
pub fn p_in(batch: &EmbeddingBatch, cfg: &LossConfig, i: usize, n: usize) -> Result<f64> {
    cfg.validate()?;
    let labels = &batch.labels;
    if i >= labels.len() || n >= labels.len() {
        return Err(Error::arg("index", "anchor or negative out of range"));
    }
    let active = active_indices(labels, cfg);
    if !active.contains(&i) || !active.contains(&n) || labels[n] == labels[i] {
        return Err(Error::arg("n", format!("sample {n} is not a negative of anchor {i}")));
    }
    let cache = similarities(&batch.z, &active, cfg.similarity)?;
    let positives: Vec<usize> = active
        .iter()
        .copied()
        .filter(|&j| j != i && labels[j] == labels[i])
        .collect();
    if positives.is_empty() {
        return Err(Error::Undefined(format!("anchor {i} has no positives")));
    }
    Ok(branch_weight(i, n, &active, labels, &cache.s, cfg))
}

/// `τ · ∂L_i/∂s_in` as produced by [`anchor_terms`]; 0 if anchor `i` does
/// not contribute.
fn branch_weight(i: usize, n: usize, active: &[usize], labels: &[usize], s: &Matrix, cfg: &LossConfig) -> f64 {
    anchor_terms(i, active, labels, s, cfg)
        .and_then(|(_, grads)| grads.into_iter().find(|&(j, _)| j == n))
        .map_or(0.0, |(_, g)| g * cfg.tau)
}

/// `x_i x_nᵀ + x_n x_iᵀ`.
pub fn outer_sym(x_i: &[f64], x_n: &[f64]) -> Result<Matrix> {
    if x_i.len() != x_n.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", x_i.len(), x_n.len())));
    }
    let m = x_i.len();
    let mut a = Matrix::zeros(m, m);
    for r in 0..m {
        for c in r..m {
            let v = x_i[r] * x_n[c] + x_n[r] * x_i[c];
            a[(r, c)] = v;
            a[(c, r)] = v;
        }
    }
    Ok(a)
}

/// Gradient of anchor `i`'s contrastive loss through the single branch
/// `s_in`, `(1/τ)·P_in·A_in·W`, for `z = Wᵀx` and dot similarity.
///
/// For anchors without positives under [`NoPositivePolicy::RepulsionOnly`]
/// the weight is the softmax share of `n` among the negatives, which is 1 in
/// the two-sample original/counterfactual batch.
pub fn cl_grad_negative_branch(
    features: &Matrix,
    encoder: &Matrix,
    labels: &[usize],
    cfg: &LossConfig,
    i: usize,
    n: usize,
) -> Result<Matrix> {
    cfg.validate()?;
    if cfg.similarity != Similarity::Dot {
        return Err(Error::arg("similarity", "the negative-branch gradient is stated for dot similarity"));
    }
    let z = features.matmul(encoder)?;
    if labels.len() != z.rows() || i >= labels.len() || n >= labels.len() {
        return Err(Error::Shape("labels/indices do not match the batch".into()));
    }
    let active = active_indices(labels, cfg);
    if !active.contains(&i) || !active.contains(&n) || labels[n] == labels[i] {
        return Err(Error::arg("n", format!("sample {n} is not a negative of anchor {i}")));
    }
    let cache = similarities(&z, &active, cfg.similarity)?;
    let weight = match anchor_terms(i, &active, labels, &cache.s, cfg) {
        Some(_) => branch_weight(i, n, &active, labels, &cache.s, cfg),
        None => return Err(Error::Undefined(format!("anchor {i} does not contribute"))),
    };
    let a = outer_sym(features.row(i), features.row(n))?;
    let mut g = a.matmul(encoder)?;
    g.scale(weight / cfg.tau);
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGradient {
    /// `Σ_{pair} x (ŷ − y)ᵀ`, `m × 2`.
    pub gradient: Matrix,
    /// Probability each sample assigns to its own label.
    pub p_true_original: f64,
    pub p_true_counterfactual: f64,
    /// Frobenius norm of the unedited (`r2`, `s`) rows.
    pub unedited_norm: f64,
    /// `|ŷ_o − ŷ_c| · √2 · ‖(h_r2, h_s)‖`.
    pub predicted_unedited_norm: f64,
    pub edited_norm: f64,
    /// Unedited rows are exactly zero.
    pub unedited_vanish: bool,
}

/// Summed cross-entropy gradient of a single-layer softmax model `z = Wᵀx`
/// over an original and its exact-opposite counterfactual.
pub fn ce_pair_gradient(original: &Sample, counterfactual: &Sample, layout: BlockLayout, w: &Matrix) -> Result<PairGradient> {
    let m = layout.total();
    if w.shape() != (m, 2) {
        return Err(Error::Shape(format!("W is {:?}, expected ({m}, 2)", w.shape())));
    }
    if original.x.len() != m || counterfactual.x.len() != m {
        return Err(Error::Shape("sample length does not match the layout".into()));
    }
    let exact_opposite = original.role == Role::Original
        && counterfactual.role == Role::Counterfactual
        && original.label < 2
        && counterfactual.label == 1 - original.label
        && layout.r1().all(|j| counterfactual.x[j] == -original.x[j])
        && layout.unedited().all(|j| counterfactual.x[j] == original.x[j]);
    if !exact_opposite {
        return Err(Error::arg("pair", "pair not exact_opposite"));
    }
    let x = Matrix::from_row_slices(m, [original.x.as_slice(), counterfactual.x.as_slice()])?;
    let logits = x.matmul(w)?;
    let labels = [original.label, counterfactual.label];
    let mut residual = Matrix::zeros(2, 2);
    let mut p_true = [0.0; 2];
    let mut q = [0.0; 2];
    for r in 0..2 {
        let p = softmax(logits.row(r));
        p_true[r] = p[labels[r]];
        q[r] = residual_true(&p, labels[r]);
        residual.row_mut(r).copy_from_slice(&p);
        residual[(r, labels[r])] = -q[r];
    }
    let gradient = x.t_matmul(&residual)?;
    let [n1, n2, n3] = row_block_norms(&gradient, layout);
    let unedited_norm = (n2 * n2 + n3 * n3).sqrt();
    let context = norm(&original.x[layout.unedited()]);
    Ok(PairGradient {
        unedited_vanish: layout.unedited().all(|j| gradient.row(j).iter().all(|&v| v == 0.0)),
        gradient,
        p_true_original: p_true[0],
        p_true_counterfactual: p_true[1],
        unedited_norm,
        predicted_unedited_norm: (q[1] - q[0]).abs() * std::f64::consts::SQRT_2 * context,
        edited_norm: n1,
    })
}

/// `(∂L/∂w_r, ∂L/∂w_c)` for `L = −log σ(z_x) − log(1 − σ(z_c))` with
/// `z_x = w_r x_r + w_c x_c` and `z_c = −w_r x_r + w_c x_c`.
///
/// Uses `σ(t) − 1 = −σ(−t)`, so `∂L/∂w_c = x_c (σ(z_c) − σ(−z_x))` is exactly
/// zero whenever `z_c = −z_x`.
pub fn sigmoid_pair_gradient(x_r: f64, x_c: f64, w_r: f64, w_c: f64) -> (f64, f64) {
    let sigmoid = |t: f64| 1.0 / (1.0 + (-t).exp());
    let z_x = w_r * x_r + w_c * x_c;
    let z_c = -(w_r * x_r) + w_c * x_c;
    let a = sigmoid(-z_x);
    let b = sigmoid(z_c);
    (x_r * (-a - b), x_c * (b - a))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAExpectation {
    pub n_mc: usize,
    /// Monte-Carlo mean of `A_{o,c}`.
    pub mean: Matrix,
    /// Per-entry standard error of the mean.
    pub stderr: Matrix,
    /// `2·diag(−(Σ_r1+μ_r1μ_r1ᵀ), Σ_r2+μ_r2μ_r2ᵀ, Σ_s+μ_sμ_sᵀ)` plus the
    /// `2μ_r2μ_sᵀ` cross blocks.
    pub exact: Matrix,
    /// `2·diag(−Σ_r1, Σ_r2, Σ_s)`.
    pub diagonal_form: Matrix,
    /// Largest `|mean − exact| / stderr` over entries with nonzero stderr.
    pub max_z_exact: f64,
    /// Largest `|mean − exact|` over entries with zero stderr.
    pub max_abs_deterministic: f64,
    /// Exact and diagonal forms coincide (all block means zero).
    pub diagonal_form_applies: bool,
}

pub fn pair_a_exact(spec: &FeatureModelSpec) -> (Matrix, Matrix) {
    let layout = spec.layout;
    let m = layout.total();
    let mut exact = Matrix::zeros(m, m);
    let mut diagonal = Matrix::zeros(m, m);
    for (b, range) in layout.blocks().into_iter().enumerate() {
        let sign = if b == 0 { -2.0 } else { 2.0 };
        let sigma = spec.covariance(b);
        let mu = spec.mean(b);
        for (a, i) in range.clone().enumerate() {
            for (c, j) in range.clone().enumerate() {
                exact[(i, j)] = sign * (sigma[(a, c)] + mu[a] * mu[c]);
                diagonal[(i, j)] = sign * sigma[(a, c)];
            }
        }
    }
    for (a, i) in layout.r2().enumerate() {
        for (c, j) in layout.s().enumerate() {
            let v = 2.0 * spec.mu_r2[a] * spec.mu_s[c];
            exact[(i, j)] = v;
            exact[(j, i)] = v;
        }
    }
    (exact, diagonal)
}

/// Monte-Carlo mean of `A_{o,c}` over exact-opposite pairs, compared against
/// its exact expectation.
pub fn expected_pair_a(spec: &FeatureModelSpec, n_mc: usize, seed: u64) -> Result<PairAExpectation> {
    let sampler = Sampler::new(spec)?;
    if spec.classes != 2 {
        return Err(Error::arg("spec", "pair expectation is defined for binary specs"));
    }
    if n_mc == 0 {
        return Err(Error::arg("n_mc", "must be at least 1"));
    }
    let m = spec.layout.total();
    let mut sum = Matrix::zeros(m, m);
    let mut sum_sq = Matrix::zeros(m, m);
    for t in 0..n_mc {
        let mut r = rng::stream(seed, &[0x5041_4941, t as u64]);
        let label = (r.next_u64() & 1) as usize;
        let o = sampler.sample_original(label, t as u64, &mut r)?;
        let c = sampler.derive_counterfactual(&o, EditMode::ExactOpposite, &mut r)?;
        let a = outer_sym(&o.x, &c.x)?;
        for ((s, q), v) in sum
            .as_mut_slice()
            .iter_mut()
            .zip(sum_sq.as_mut_slice())
            .zip(a.as_slice())
        {
            *s += v;
            *q += v * v;
        }
    }
    let n = n_mc as f64;
    let mean = sum.scaled(1.0 / n);
    let mut stderr = Matrix::zeros(m, m);
    if n_mc > 1 {
        for (e, (s, q)) in stderr
            .as_mut_slice()
            .iter_mut()
            .zip(sum.as_slice().iter().zip(sum_sq.as_slice()))
        {
            let var = ((q - s * s / n) / (n - 1.0)).max(0.0);
            *e = (var / n).sqrt();
        }
    }
    let (exact, diagonal_form) = pair_a_exact(spec);
    let mut max_z_exact = 0.0f64;
    let mut max_abs_deterministic = 0.0f64;
    for ((mv, ev), se) in mean.as_slice().iter().zip(exact.as_slice()).zip(stderr.as_slice()) {
        let diff = (mv - ev).abs();
        // entries with (near) zero spread are deterministic up to rounding
        if *se > 1e-12 * (1.0 + ev.abs()) {
            max_z_exact = max_z_exact.max(diff / se);
        } else {
            max_abs_deterministic = max_abs_deterministic.max(diff);
        }
    }
    let diagonal_form_applies = [&spec.mu_r1, &spec.mu_r2, &spec.mu_s]
        .iter()
        .all(|mu| mu.iter().all(|&v| v == 0.0));
    Ok(PairAExpectation {
        n_mc,
        mean,
        stderr,
        exact,
        diagonal_form,
        max_z_exact,
        max_abs_deterministic,
        diagonal_form_applies,
    })
}

/// `λ·L_CL(z) + (1−λ)·L_CE(logits)` and its gradient. The contrastive term
/// only reaches the encoder; cross-entropy reaches both head and encoder.
/// At `λ = 0` the contrastive term is never evaluated and at `λ = 1` the
/// cross-entropy term is skipped, so each endpoint reproduces its single-loss
/// path exactly.
pub fn combined_loss_and_grad(
    model: &LinearModel,
    features: &Matrix,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<(f64, GradReport)> {
    cfg.validate()?;
    let (z, logits) = model.forward(features)?;
    let (n, d) = z.shape();
    let k = model.num_classes();
    let lambda = cfg.lambda;

    let mut loss = 0.0;
    let mut grad_z = Matrix::zeros(n, d);
    let mut grad_head = Matrix::zeros(d, k);
    let mut grad_bias = model.head_bias.as_ref().map(|b| vec![0.0; b.len()]);

    if lambda < 1.0 {
        let (ce, mut g_logits) = ce_loss_and_grad(&logits, labels)?;
        let w = 1.0 - lambda;
        loss = w * ce;
        g_logits.scale(w);
        grad_head = z.t_matmul(&g_logits)?;
        if let Some(gb) = &mut grad_bias {
            for r in 0..n {
                for (b, v) in gb.iter_mut().zip(g_logits.row(r)) {
                    *b += v;
                }
            }
        }
        grad_z = g_logits.matmul_t(&model.head)?;
    }
    if lambda > 0.0 {
        let batch = EmbeddingBatch {
            z,
            labels: labels.to_vec(),
        };
        let (cl, g_cl) = cl_loss_and_grad(&batch, cfg)?;
        loss += lambda * cl;
        grad_z.add_scaled(&g_cl, lambda)?;
    }
    let grad_encoder = if model.identity_encoder {
        None
    } else {
        Some(features.t_matmul(&grad_z)?)
    };
    let encoder_block_norms = grad_encoder
        .as_ref()
        .map_or([0.0; 3], |g| row_block_norms(g, model.layout));
    Ok((
        loss,
        GradReport {
            grad_encoder,
            grad_head,
            grad_bias,
            encoder_block_norms,
        },
    ))
}

/// Signed `±1` label vector for a batch.
pub fn signed_labels(labels: &[usize]) -> Vec<f64> {
    labels.iter().map(|&l| signed_label(l)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn batch(rows: &[&[f64]], labels: &[usize]) -> EmbeddingBatch {
        EmbeddingBatch {
            z: Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(),
            labels: labels.to_vec(),
        }
    }

    fn cfg(tau: f64, similarity: Similarity) -> LossConfig {
        LossConfig {
            lambda: 1.0,
            tau,
            similarity,
            ..LossConfig::default()
        }
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&[1.0, 0.0], &[1.0, 0.0], Similarity::Cosine).unwrap(), 1.0);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0], Similarity::Cosine).unwrap(), 0.0);
        let a = [0.3, -1.2, 2.0];
        let b = [1.5, 0.2, -0.7];
        let base = similarity(&a, &b, Similarity::Cosine).unwrap();
        let scaled = similarity(&a.map(|v| 2.5 * v), &b.map(|v| 0.1 * v), Similarity::Cosine).unwrap();
        assert_abs_diff_eq!(base, scaled, epsilon = 1e-15);
        assert!(similarity(&[0.0, 0.0], &[1.0, 0.0], Similarity::Cosine).is_err());
        assert_eq!(similarity(&[0.0, 0.0], &[1.0, 0.0], Similarity::Dot).unwrap(), 0.0);
    }

    #[test]
    fn ce_examples() {
        // probs [0.7, 0.3] with label 0
        let logits = Matrix::from_rows(&[vec![0.7f64.ln(), 0.3f64.ln()]]).unwrap();
        let (_, g) = ce_loss_and_grad(&logits, &[0]).unwrap();
        assert_abs_diff_eq!(g[(0, 0)], -0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(g[(0, 1)], 0.3, epsilon = 1e-15);
        let (loss, _) = ce_loss_and_grad(&Matrix::zeros(3, 2), &[0, 1, 1]).unwrap();
        assert_abs_diff_eq!(loss, 2f64.ln(), epsilon = 1e-15);
        assert!(ce_loss_and_grad(&Matrix::zeros(1, 2), &[2]).is_err());
    }

    #[test]
    fn ce_is_stable_for_huge_logits() {
        let logits = Matrix::from_rows(&[vec![1000.0, -1000.0]]).unwrap();
        let (loss, g) = ce_loss_and_grad(&logits, &[1]).unwrap();
        assert!(loss.is_finite() && g.is_finite());
        assert_abs_diff_eq!(loss, 2000.0, epsilon = 1e-9);
    }

    #[test]
    fn cl_three_sample_example() {
        let b = batch(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]], &[0, 0, 1]);
        let c = LossConfig {
            no_positive_policy: NoPositivePolicy::SkipAnchor,
            ..cfg(1.0, Similarity::Cosine)
        };
        // anchor 1: −log(e/(e+1)); anchor 2 identical; anchor 3 has no positives
        let (loss, _) = cl_loss_and_grad(&b, &c).unwrap();
        assert_abs_diff_eq!(loss, 0.313_261_687_518_222_9, epsilon = 1e-12);
        let p = p_in(&b, &c, 0, 2).unwrap();
        assert_abs_diff_eq!(p, 0.268_941_421_369_995_1, epsilon = 1e-12);
    }

    #[test]
    fn cl_cosine_scale_invariant() {
        let b = batch(&[&[1.0, 0.2], &[0.4, -1.0], &[-0.3, 0.9], &[0.5, 0.5]], &[0, 1, 0, 1]);
        let mut b2 = b.clone();
        b2.z.scale(2.0);
        let c = cfg(0.5, Similarity::Cosine);
        let (l1, _) = cl_loss_and_grad(&b, &c).unwrap();
        let (l2, _) = cl_loss_and_grad(&b2, &c).unwrap();
        assert_abs_diff_eq!(l1, l2, epsilon = 1e-14);
    }

    #[test]
    fn cl_single_label_skip_is_undefined() {
        let b = batch(&[&[1.0, 0.0], &[0.0, 1.0]], &[1, 1]);
        let c = LossConfig {
            no_positive_policy: NoPositivePolicy::SkipAnchor,
            ..cfg(1.0, Similarity::Dot)
        };
        let err = cl_loss_and_grad(&b, &c).unwrap_err();
        assert!(err.to_string().contains("no contrastive structure"));
        // repulsion_only keeps the positive-only terms, each exactly 0
        assert_eq!(cl_loss_and_grad(&b, &cfg(1.0, Similarity::Dot)).unwrap().0, 0.0);
        let b = batch(&[&[1.0, 0.0], &[0.0, 1.0]], &[0, 1]);
        let err = cl_loss_and_grad(&b, &c).unwrap_err();
        assert!(err.to_string().contains("no contrastive structure"));
    }

    #[test]
    fn p_in_limits() {
        let c = cfg(1.0, Similarity::Dot);
        // all similarities equal (orthogonal embeddings): 1/(1+|N|)
        let b = batch(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 0.0, 1.0]], &[0, 0, 1, 1]);
        assert_abs_diff_eq!(p_in(&b, &c, 0, 2).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
        // antipodal, large magnitude
        let b = batch(&[&[30.0], &[30.0], &[-30.0]], &[0, 0, 1]);
        assert!(p_in(&b, &c, 0, 2).unwrap() < 1e-300);
        assert!(p_in(&b, &c, 2, 0).is_err());
    }

    #[test]
    fn outer_sym_examples() {
        let a = outer_sym(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(a, Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap());
        assert_eq!(outer_sym(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), Matrix::zeros(2, 2));
        assert!(outer_sym(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ce_pair_gradient_at_zero_weights() {
        let layout = BlockLayout::new(1, 1, 1).unwrap();
        let o = Sample {
            x: vec![1.0, 2.0, 3.0],
            label: 0,
            role: Role::Original,
            pair_id: 0,
            source_label: 0,
        };
        let c = Sample {
            x: vec![-1.0, 2.0, 3.0],
            label: 1,
            role: Role::Counterfactual,
            pair_id: 0,
            source_label: 0,
        };
        let g = ce_pair_gradient(&o, &c, layout, &Matrix::zeros(3, 2)).unwrap();
        assert_eq!(g.gradient.row(0), &[-1.0, 1.0]);
        assert_eq!(g.gradient.row(1), &[0.0, 0.0]);
        assert_eq!(g.gradient.row(2), &[0.0, 0.0]);
        assert!(g.unedited_vanish);
        let mut not_pair = c.clone();
        not_pair.x[1] = 2.5;
        assert!(ce_pair_gradient(&o, &not_pair, layout, &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn sigmoid_pair_examples() {
        let (gr, gc) = sigmoid_pair_gradient(2.0, 3.0, 0.0, 0.0);
        assert_eq!(gc, 0.0);
        assert_eq!(gr, -2.0);
        // trajectory from zero: |w_r| grows, w_c pinned at 0
        let (mut wr, mut wc) = (0.0, 0.0);
        let mut last = 0.0;
        for _ in 0..100 {
            let (gr, gc) = sigmoid_pair_gradient(2.0, 3.0, wr, wc);
            wr -= 0.1 * gr;
            wc -= 0.1 * gc;
            assert!(wr.abs() > last);
            assert_eq!(wc, 0.0);
            last = wr.abs();
        }
    }

    #[test]
    fn expected_pair_a_single_sample() {
        let spec = FeatureModelSpec::canonical();
        let e = expected_pair_a(&spec, 1, 4).unwrap();
        let mut r = rng::stream(4, &[0x5041_4941, 0]);
        let label = (r.next_u64() & 1) as usize;
        let sampler = Sampler::new(&spec).unwrap();
        let o = sampler.sample_original(label, 0, &mut r).unwrap();
        let c = sampler.derive_counterfactual(&o, EditMode::ExactOpposite, &mut r).unwrap();
        assert_eq!(e.mean, outer_sym(&o.x, &c.x).unwrap());
    }

    #[test]
    fn combined_endpoints() {
        let layout = BlockLayout::new(2, 1, 1).unwrap();
        let model = crate::model::init_model(layout, 3, 2, crate::model::Init::ScaledNormal { std: 0.5 }, 1).unwrap();
        let x = Matrix::from_rows(&[
            vec![1.0, 0.5, -0.2, 0.3],
            vec![-1.0, -0.5, -0.2, 0.3],
            vec![0.2, 1.5, 0.7, -0.3],
            vec![-0.2, -1.5, 0.7, -0.3],
        ])
        .unwrap();
        let labels = [1, 0, 1, 0];
        let c0 = LossConfig { lambda: 0.0, ..LossConfig::default() };
        let (l0, g0) = combined_loss_and_grad(&model, &x, &labels, &c0).unwrap();
        let (_, logits) = model.forward(&x).unwrap();
        let (ce, g_logits) = ce_loss_and_grad(&logits, &labels).unwrap();
        assert_eq!(l0, ce);
        let (z, _) = model.forward(&x).unwrap();
        assert_eq!(g0.grad_head, z.t_matmul(&g_logits).unwrap());
        let c1 = LossConfig { lambda: 1.0, ..LossConfig::default() };
        let (_, g1) = combined_loss_and_grad(&model, &x, &labels, &c1).unwrap();
        assert!(g1.grad_head.as_slice().iter().all(|&v| v == 0.0));
    }
}
