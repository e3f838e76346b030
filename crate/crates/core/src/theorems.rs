//! Numerical verification suite for the closed-form and gradient-structure
//! results, run at fixed seeds with declared tolerances.

use serde::{Deserialize, Serialize};

use crate::closed_form::{empirical_weights, population_cad_weights};
use crate::error::{Error, Result};
use crate::feature_model::{generate_paircad, BlockLayout, EditMode, FeatureModelSpec, Role, Sample};
use crate::linalg::Matrix;
use crate::losses::{
    ce_pair_gradient, cl_grad_negative_branch, cl_loss_and_grad, expected_pair_a, outer_sym, sigmoid_pair_gradient,
    EmbeddingBatch, LossConfig, NoPositivePolicy, Similarity,
};
use crate::model::{init_model, Init};
use crate::rng::{self, SplitMix64};
use crate::trainer::finite_diff_check;

const STREAM_CE_PAIR: u64 = 0x4345_5052;
const STREAM_CL_PAIR: u64 = 0x434C_5052;
const STREAM_SIGMOID: u64 = 0x5349_474D;
const STREAM_FD: u64 = 0x4644_4954;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TheoremConfig {
    pub seed: u64,
    /// Pairs drawn for the least-squares checks.
    pub n_pairs: usize,
    /// Monte-Carlo draws for the pair-matrix expectation.
    pub n_mc: usize,
    pub ce_pair_instances: usize,
    pub cl_pair_instances: usize,
    pub gradcheck_instances: usize,
    pub tau: f64,
    pub lambda: f64,
    /// Monte-Carlo checks pass within this many standard errors.
    pub mc_sigmas: f64,
    /// Absolute tolerance replacing the standard-error rule on Monte-Carlo
    /// checks.
    pub mc_tolerance: Option<f64>,
    pub fd_epsilon: f64,
}

impl Default for TheoremConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_pairs: 100_000,
            n_mc: 100_000,
            ce_pair_instances: 1000,
            cl_pair_instances: 100,
            gradcheck_instances: 100,
            tau: 0.7,
            lambda: 0.4,
            mc_sigmas: 5.0,
            mc_tolerance: None,
            fd_epsilon: 1e-6,
        }
    }
}

impl TheoremConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            problems.push(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            problems.push(format!("lambda must lie in [0,1], got {}", self.lambda));
        }
        let counts = [
            ("n_pairs", self.n_pairs),
            ("n_mc", self.n_mc),
            ("ce_pair_instances", self.ce_pair_instances),
            ("cl_pair_instances", self.cl_pair_instances),
            ("gradcheck_instances", self.gradcheck_instances),
        ];
        for (name, v) in counts {
            if v == 0 {
                problems.push(format!("{name} must be at least 1"));
            }
        }
        if self.n_mc < 2 {
            problems.push("n_mc must be at least 2 for a standard error".into());
        }
        if !(self.mc_sigmas > 0.0) {
            problems.push("mc_sigmas must be positive".into());
        }
        if let Some(t) = self.mc_tolerance {
            if !(t >= 0.0) {
                problems.push("mc_tolerance must be non-negative".into());
            }
        }
        if !(self.fd_epsilon > 0.0) {
            problems.push("fd_epsilon must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(problems))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremResult {
    pub name: String,
    pub claim: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub results: Vec<TheoremResult>,
    pub all_passed: bool,
}

impl TheoremReport {
    pub fn failed(&self) -> Vec<&str> {
        self.results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect()
    }

    /// Fixed-width pass/fail table.
    pub fn table(&self) -> String {
        let width = self.results.iter().map(|r| r.name.len()).max().unwrap_or(4).max(7);
        let mut out = format!("{:<width$}  {:<6}  {:>12}  {:>12}  detail\n", "theorem", "status", "measured", "tolerance");
        for r in &self.results {
            out.push_str(&format!(
                "{:<width$}  {:<6}  {:>12.4e}  {:>12.4e}  {}\n",
                r.name,
                if r.passed { "PASS" } else { "FAIL" },
                r.measured,
                r.tolerance,
                r.detail
            ));
        }
        out
    }
}

fn result(name: &str, claim: &str, measured: f64, tolerance: f64, detail: String) -> TheoremResult {
    TheoremResult {
        name: name.into(),
        claim: claim.into(),
        measured,
        tolerance,
        passed: measured <= tolerance,
        detail,
    }
}

fn normal_vec(r: &mut SplitMix64, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.standard_normal()).collect()
}

fn normal_matrix(r: &mut SplitMix64, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, normal_vec(r, rows * cols)).expect("sized")
}

/// Layout with `1..=3` edited features and at least one unedited one.
fn random_layout(r: &mut SplitMix64) -> BlockLayout {
    let r1 = 1 + r.below(3) as usize;
    let r2 = r.below(4) as usize;
    let s = if r2 == 0 { 1 + r.below(3) as usize } else { r.below(4) as usize };
    BlockLayout::new(r1, r2, s).expect("valid dims")
}

fn exact_opposite_pair(r: &mut SplitMix64, layout: BlockLayout) -> (Sample, Sample) {
    let x = normal_vec(r, layout.total());
    let label = r.below(2) as usize;
    let mut xc = x.clone();
    for j in layout.r1() {
        xc[j] = -x[j];
    }
    (
        Sample {
            x,
            label,
            role: Role::Original,
            pair_id: 0,
            source_label: label,
        },
        Sample {
            x: xc,
            label: 1 - label,
            role: Role::Counterfactual,
            pair_id: 0,
            source_label: label,
        },
    )
}

fn closed_form_checks(cfg: &TheoremConfig) -> Result<Vec<TheoremResult>> {
    let spec = FeatureModelSpec::canonical();
    let ds = generate_paircad(&spec, cfg.n_pairs, 1, EditMode::ExactOpposite, cfg.seed)?;
    let w = empirical_weights(&ds, &spec, 0.0)?;
    let pop = population_cad_weights(&spec)?;
    let [n1, n2, ns] = w.block_norms;
    let linf = w
        .w
        .iter()
        .zip(&pop.exact.w)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    // pooled E[x·y] against [μ_r1, 0, 0]; groups are the independent units
    let layout = ds.layout();
    let m = layout.total();
    let groups = ds.groups();
    let g = groups.len() as f64;
    let mut sum = vec![0.0; m];
    let mut sum_sq = vec![0.0; m];
    for grp in groups {
        let mut unit = vec![0.0; m];
        for i in grp.members() {
            let s = &ds.samples()[i];
            let y = crate::feature_model::signed_label(s.label);
            for (u, x) in unit.iter_mut().zip(&s.x) {
                *u += x * y / grp.len() as f64;
            }
        }
        for j in 0..m {
            sum[j] += unit[j];
            sum_sq[j] += unit[j] * unit[j];
        }
    }
    let mut target = spec.mu_r1.clone();
    target.resize(m, 0.0);
    let mut max_z = 0.0f64;
    let mut max_abs = 0.0f64;
    for j in 0..m {
        let mean = sum[j] / g;
        let var = ((sum_sq[j] / g - mean * mean) * g / (g - 1.0)).max(0.0);
        let se = (var / g).sqrt();
        let diff = (mean - target[j]).abs();
        max_abs = max_abs.max(diff);
        if se > 0.0 {
            max_z = max_z.max(diff / se);
        } else if diff > 1e-12 {
            max_z = f64::INFINITY;
        }
    }
    let moment = match cfg.mc_tolerance {
        Some(tol) => result(
            "pooled_label_moment",
            "pooled E[x·y] equals [μ_r1, 0, 0]",
            max_abs,
            tol,
            format!("max |Δ| = {max_abs:.3e}, n = {}", ds.len()),
        ),
        None => result(
            "pooled_label_moment",
            "pooled E[x·y] equals [μ_r1, 0, 0]",
            max_z,
            4.0,
            format!("max |Δ|/stderr, n = {}", ds.len()),
        ),
    };

    Ok(vec![
        result(
            "cad_weights_block_zero",
            "least-squares weights on CAD vanish on unedited blocks",
            n2.max(ns) / n1,
            0.02,
            format!("‖w_r1‖={n1:.4}, ‖w_r2‖={n2:.2e}, ‖w_s‖={ns:.2e}"),
        ),
        result(
            "cad_weights_direction",
            "r1 weights align with Σ_r1⁻¹μ_r1",
            1.0 - w.direction_cosine_r1,
            1e-3,
            format!("cosine = {:.6}", w.direction_cosine_r1),
        ),
        result(
            "cad_weights_population",
            "empirical weights converge to the exact population solution",
            linf,
            0.02,
            format!("‖w_emp − w_pop‖∞ over {} pairs", cfg.n_pairs),
        ),
        moment,
    ])
}

fn ce_pair_checks(cfg: &TheoremConfig) -> Result<Vec<TheoremResult>> {
    let mut worst_cancel = 0.0f64;
    let mut worst_formula = 0.0f64;
    for t in 0..cfg.ce_pair_instances {
        let mut r = rng::stream(cfg.seed, &[STREAM_CE_PAIR, t as u64]);
        let layout = random_layout(&mut r);
        let (o, c) = exact_opposite_pair(&mut r, layout);
        // equal columns on the unedited rows: identical logit offset for both classes
        let mut w = normal_matrix(&mut r, layout.total(), 2);
        for j in layout.unedited() {
            w[(j, 1)] = w[(j, 0)];
        }
        let g = ce_pair_gradient(&o, &c, layout, &w)?;
        for j in layout.unedited() {
            worst_cancel = worst_cancel.max(g.gradient.row(j).iter().fold(0.0, |a, v| a.max(v.abs())));
        }
        let generic = normal_matrix(&mut r, layout.total(), 2);
        let g = ce_pair_gradient(&o, &c, layout, &generic)?;
        let rel = (g.unedited_norm - g.predicted_unedited_norm).abs() / g.predicted_unedited_norm.max(f64::MIN_POSITIVE);
        worst_formula = worst_formula.max(rel);
    }
    Ok(vec![
        result(
            "ce_pair_cancellation",
            "unedited rows of the CE pair gradient vanish when both samples are equally confident",
            worst_cancel,
            1e-12,
            format!("max |entry| over {} instances", cfg.ce_pair_instances),
        ),
        result(
            "ce_pair_norm",
            "unedited-row norm equals |ŷ_o − ŷ_c|·√2·‖(h_r2, h_s)‖",
            worst_formula,
            1e-9,
            format!("max relative error over {} instances", cfg.ce_pair_instances),
        ),
    ])
}

fn cl_pair_check(cfg: &TheoremConfig) -> Result<TheoremResult> {
    let loss = LossConfig {
        lambda: 1.0,
        tau: cfg.tau,
        similarity: Similarity::Dot,
        neutral_excluded: false,
        no_positive_policy: NoPositivePolicy::RepulsionOnly,
    };
    let mut worst = 0.0f64;
    for t in 0..cfg.cl_pair_instances {
        let mut r = rng::stream(cfg.seed, &[STREAM_CL_PAIR, t as u64]);
        let layout = random_layout(&mut r);
        let d = 1 + r.below(6) as usize;
        let (o, c) = exact_opposite_pair(&mut r, layout);
        let w = normal_matrix(&mut r, layout.total(), d);
        let x = Matrix::from_row_slices(layout.total(), [o.x.as_slice(), c.x.as_slice()])?;
        let labels = vec![o.label, c.label];
        let z = x.matmul(&w)?;
        let (_, gz) = cl_loss_and_grad(&EmbeddingBatch { z, labels: labels.clone() }, &loss)?;
        let analytic = x.t_matmul(&gz)?;
        let expected = outer_sym(&o.x, &c.x)?.matmul(&w)?.scaled(1.0 / cfg.tau);
        let branch = cl_grad_negative_branch(&x, &w, &labels, &loss, 0, 1)?;
        let scale = expected.as_slice().iter().fold(1.0f64, |a, v| a.max(v.abs()));
        worst = worst
            .max(analytic.max_abs_diff(&expected) / scale)
            .max(branch.max_abs_diff(&expected) / scale);
    }
    Ok(result(
        "cl_pair_gradient",
        "two-sample CL gradient equals (1/τ)·A_oc·W",
        worst,
        1e-12,
        format!("max scaled difference over {} instances, τ = {}", cfg.cl_pair_instances, cfg.tau),
    ))
}

/// Zero-mean spec with correlated r1 and anisotropic r2/s covariances.
pub fn zero_mean_spec() -> FeatureModelSpec {
    let mut spec = FeatureModelSpec::canonical();
    spec.mu_r1 = vec![0.0; 2];
    spec.mu_r2 = vec![0.0; 2];
    spec.mu_s = vec![0.0; 2];
    spec.sigma_r1 = Matrix::from_rows(&[vec![1.0, 0.3], vec![0.3, 0.5]]).expect("2x2");
    spec.sigma_r2 = Matrix::diagonal(&[2.0, 0.7]);
    spec.sigma_s = Matrix::from_rows(&[vec![0.8, -0.2], vec![-0.2, 1.2]]).expect("2x2");
    spec
}

fn pair_expectation_check(cfg: &TheoremConfig) -> Result<TheoremResult> {
    let spec = zero_mean_spec();
    let e = expected_pair_a(&spec, cfg.n_mc, cfg.seed)?;
    let diagonal_gap = e.exact.max_abs_diff(&e.diagonal_form);
    Ok(match cfg.mc_tolerance {
        Some(tol) => {
            let diff = e.mean.max_abs_diff(&e.exact);
            result(
                "cl_pair_expectation",
                "E[A_oc] = 2·diag(−Σ_r1, Σ_r2, Σ_s) at zero means",
                diff,
                tol,
                format!("max |Δ| over {} draws", cfg.n_mc),
            )
        }
        None => result(
            "cl_pair_expectation",
            "E[A_oc] = 2·diag(−Σ_r1, Σ_r2, Σ_s) at zero means",
            e.max_z_exact.max(if e.max_abs_deterministic > 0.0 { f64::INFINITY } else { 0.0 }),
            cfg.mc_sigmas,
            format!(
                "max |Δ|/stderr over {} draws; exact and diagonal forms differ by {diagonal_gap:.1e}",
                cfg.n_mc
            ),
        ),
    })
}

fn sigmoid_check(cfg: &TheoremConfig) -> TheoremResult {
    let mut worst = 0.0f64;
    let mut grows = true;
    for t in 0..100u64 {
        let mut r = rng::stream(cfg.seed, &[STREAM_SIGMOID, t]);
        let x_r = r.standard_normal();
        let x_c = r.standard_normal();
        let (_, g_c) = sigmoid_pair_gradient(x_r, x_c, 3.0 * r.standard_normal(), 0.0);
        worst = worst.max(g_c.abs());
        // descent from zero: the context weight never moves
        let (mut w_r, mut w_c) = (0.0f64, 0.0);
        let mut last = 0.0;
        for _ in 0..50 {
            let (g_r, g_c) = sigmoid_pair_gradient(x_r, x_c, w_r, w_c);
            w_r -= 0.1 * g_r;
            w_c -= 0.1 * g_c;
            grows &= w_r.abs() >= last;
            last = w_r.abs();
        }
        worst = worst.max(w_c.abs());
    }
    let mut r = result(
        "sigmoid_pair_trap",
        "context weight receives zero gradient from an original/counterfactual pair",
        worst,
        0.0,
        format!("max |∂L/∂w_c| and |w_c| after descent; |w_r| non-decreasing: {grows}"),
    );
    r.passed &= grows;
    r
}

fn gradcheck(cfg: &TheoremConfig) -> Result<TheoremResult> {
    let mut worst = 0.0f64;
    for t in 0..cfg.gradcheck_instances {
        let mut r = rng::stream(cfg.seed, &[STREAM_FD, t as u64]);
        let (model, x, labels, loss) = random_instance(&mut r, cfg.lambda, cfg.tau)?;
        let rep = finite_diff_check(&model, &x, &labels, &loss, cfg.fd_epsilon)?;
        worst = worst.max(rep.max_rel_err);
    }
    Ok(result(
        "combined_gradient",
        "analytic gradient of λ·CL + (1−λ)·CE matches central differences",
        worst,
        1e-5,
        format!("max relative error over {} instances, λ = {}, τ = {}", cfg.gradcheck_instances, cfg.lambda, cfg.tau),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    /// Mixing weight for the combined-loss rows.
    pub lambda: f64,
    pub tau: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            epsilon: 1e-6,
            tolerance: 1e-5,
            lambda: 0.4,
            tau: 0.7,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.instances == 0 {
            problems.push("instances must be at least 1".to_string());
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            problems.push(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.tolerance >= 0.0) {
            problems.push(format!("tolerance must be non-negative, got {}", self.tolerance));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            problems.push(format!("lambda must lie in [0,1], got {}", self.lambda));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            problems.push(format!("tau must be positive, got {}", self.tau));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(problems))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    /// `ce`, `cl` or `combined`.
    pub loss: String,
    pub similarity: Similarity,
    pub no_positive_policy: NoPositivePolicy,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub rows: Vec<GradcheckRow>,
    pub all_passed: bool,
}

/// Central-difference checks of every loss variant: cross-entropy alone,
/// the contrastive term alone under each similarity and no-positive policy,
/// and the combined objective.
pub fn gradcheck_suite(cfg: &GradcheckConfig, seed: u64) -> Result<GradcheckReport> {
    cfg.validate()?;
    let mut variants = vec![("ce", 0.0, Similarity::Cosine, NoPositivePolicy::RepulsionOnly)];
    for sim in [Similarity::Cosine, Similarity::Dot] {
        for policy in [NoPositivePolicy::RepulsionOnly, NoPositivePolicy::SkipAnchor] {
            variants.push(("cl", 1.0, sim, policy));
        }
    }
    for sim in [Similarity::Cosine, Similarity::Dot] {
        variants.push(("combined", cfg.lambda, sim, NoPositivePolicy::RepulsionOnly));
    }
    let mut rows = Vec::new();
    for (v, (name, lambda, sim, policy)) in variants.into_iter().enumerate() {
        let mut worst = 0.0f64;
        for t in 0..cfg.instances {
            let mut r = rng::stream(seed, &[STREAM_FD, v as u64, t as u64]);
            let (model, x, labels, mut loss) = random_instance(&mut r, lambda, cfg.tau)?;
            loss.similarity = sim;
            loss.no_positive_policy = policy;
            let rep = finite_diff_check(&model, &x, &labels, &loss, cfg.epsilon)?;
            worst = worst.max(rep.max_rel_err);
        }
        rows.push(GradcheckRow {
            loss: name.into(),
            similarity: sim,
            no_positive_policy: policy,
            instances: cfg.instances,
            max_rel_err: worst,
            passed: worst <= cfg.tolerance,
        });
    }
    let all_passed = rows.iter().all(|r| r.passed);
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        rows,
        all_passed,
    })
}

impl GradcheckReport {
    pub fn table(&self) -> String {
        let mut out = format!("{:<9} {:<8} {:<15} {:>12}  status\n", "loss", "sim", "no_positive", "max_rel_err");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<9} {:<8} {:<15} {:>12.3e}  {}\n",
                r.loss,
                format!("{:?}", r.similarity).to_lowercase(),
                match r.no_positive_policy {
                    NoPositivePolicy::RepulsionOnly => "repulsion_only",
                    NoPositivePolicy::SkipAnchor => "skip_anchor",
                },
                r.max_rel_err,
                if r.passed { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Random model, batch and loss settings: `3 ≤ n ≤ 16`, `m ≤ 10`, `d ≤ 6`,
/// `K ∈ {2, 3}`, with at least one positive pair and two distinct labels.
pub fn random_instance(r: &mut SplitMix64, lambda: f64, tau: f64) -> Result<(crate::model::LinearModel, Matrix, Vec<usize>, LossConfig)> {
    let m = 1 + r.below(10) as usize;
    let layout = BlockLayout::single(m)?;
    let d = 1 + r.below(6) as usize;
    let k = 2 + r.below(2) as usize;
    let n = 3 + r.below(14) as usize;
    let model = init_model(layout, d, k, Init::ScaledNormal { std: 1.0 }, r.next_u64())?;
    let x = normal_matrix(r, n, m);
    let mut labels: Vec<usize> = (0..n).map(|_| r.below(k as u64) as usize).collect();
    labels[1] = labels[0];
    if labels.iter().all(|&l| l == labels[0]) {
        labels[n - 1] = (labels[0] + 1) % k;
    }
    let loss = LossConfig {
        lambda,
        tau,
        similarity: if r.below(2) == 0 { Similarity::Cosine } else { Similarity::Dot },
        neutral_excluded: false,
        no_positive_policy: if r.below(2) == 0 {
            NoPositivePolicy::RepulsionOnly
        } else {
            NoPositivePolicy::SkipAnchor
        },
    };
    Ok((model, x, labels, loss))
}

/// Runs every check. Configuration errors are returned before any work.
pub fn run_theorems(cfg: &TheoremConfig) -> Result<TheoremReport> {
    cfg.validate()?;
    let mut results = closed_form_checks(cfg)?;
    results.extend(ce_pair_checks(cfg)?);
    results.push(cl_pair_check(cfg)?);
    results.push(pair_expectation_check(cfg)?);
    results.push(sigmoid_check(cfg));
    results.push(gradcheck(cfg)?);
    let all_passed = results.iter().all(|r| r.passed);
    Ok(TheoremReport { results, all_passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TheoremConfig {
        TheoremConfig {
            n_pairs: 20_000,
            n_mc: 20_000,
            ce_pair_instances: 100,
            cl_pair_instances: 20,
            gradcheck_instances: 10,
            ..TheoremConfig::default()
        }
    }

    #[test]
    fn suite_passes_at_small_scale() {
        let rep = run_theorems(&small()).unwrap();
        assert!(rep.results.len() >= 6);
        assert!(rep.all_passed, "{}", rep.table());
    }

    #[test]
    fn tight_monte_carlo_tolerance_fails() {
        let rep = run_theorems(&TheoremConfig {
            mc_tolerance: Some(1e-12),
            ..small()
        })
        .unwrap();
        assert!(rep.failed().contains(&"cl_pair_expectation"));
    }

    #[test]
    fn gradcheck_suite_covers_all_variants() {
        let rep = gradcheck_suite(
            &GradcheckConfig {
                instances: 5,
                ..GradcheckConfig::default()
            },
            3,
        )
        .unwrap();
        assert_eq!(rep.rows.len(), 7);
        assert!(rep.all_passed, "{}", rep.table());
    }

    #[test]
    fn zero_tau_rejected() {
        let err = run_theorems(&TheoremConfig { tau: 0.0, ..small() }).unwrap_err();
        assert!(err.is_validation());
    }
}
