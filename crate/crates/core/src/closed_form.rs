//! Least-squares classifiers on CAD and the weight-concentration result:
//! on pooled exact-opposite CAD the population OLS weights vanish on the
//! unedited blocks and point along `Σ_r1⁻¹ μ_r1` on the edited block.
//!
//! Moments are uncentered (`E[xxᵀ]`, `E[x·y]` with `y ∈ {−1, +1}`).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_model::{signed_label, validate_spec, BlockLayout, FeatureModelSpec, PairedDataset, NEUTRAL};
use crate::linalg::{cholesky, cholesky_solve, cosine, dot, norm, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentPair {
    /// `(1/n) Σ x xᵀ`
    pub second_moment: Matrix,
    /// `(1/n) Σ x·y`
    pub cross_moment: Vec<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub w: Vec<f64>,
    /// `(‖w_r1‖, ‖w_r2‖, ‖w_s‖)`
    pub block_norms: [f64; 3],
    /// Cosine between `w_r1` and the reference direction `Σ_r1⁻¹ μ_r1`.
    pub direction_cosine_r1: f64,
}

impl WeightReport {
    pub fn new(w: Vec<f64>, layout: BlockLayout, reference_r1: &[f64]) -> Result<Self> {
        let block_norms = block_mass(&w, layout)?;
        let direction_cosine_r1 = cosine(&w[layout.r1()], reference_r1);
        Ok(Self {
            w,
            block_norms,
            direction_cosine_r1,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationWeights {
    /// `[(Σ_r1 + μ_r1 μ_r1ᵀ)⁻¹ μ_r1, 0, 0]`
    pub exact: WeightReport,
    /// `[Σ_r1⁻¹ μ_r1, 0, 0]`, the rank-one terms dropped.
    pub diagonal_form: Vec<f64>,
}

pub fn empirical_moments(dataset: &PairedDataset) -> Result<MomentPair> {
    if dataset.is_empty() {
        return Err(Error::arg("dataset", "empty"));
    }
    if dataset.samples().iter().any(|s| s.label == NEUTRAL) {
        return Err(Error::arg("dataset", "closed-form analysis is binary-only"));
    }
    let m = dataset.layout().total();
    let mut second = Matrix::zeros(m, m);
    let mut cross = vec![0.0; m];
    for s in dataset.samples() {
        let y = signed_label(s.label);
        for i in 0..m {
            cross[i] += s.x[i] * y;
            let xi = s.x[i];
            let row = second.row_mut(i);
            for j in i..m {
                row[j] += xi * s.x[j];
            }
        }
    }
    let n = dataset.len() as f64;
    for i in 0..m {
        cross[i] /= n;
        for j in i..m {
            let v = second[(i, j)] / n;
            second[(i, j)] = v;
            second[(j, i)] = v;
        }
    }
    Ok(MomentPair {
        second_moment: second,
        cross_moment: cross,
        n: dataset.len(),
    })
}

/// Smallest and largest eigenvalue of a symmetric matrix.
fn eigen_extremes(a: &Matrix) -> (f64, f64) {
    let n = a.rows();
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, a.as_slice()));
    let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// `(M + εI)⁻¹ μ` by Cholesky, falling back to a symmetric eigendecomposition
/// when the factorization breaks down from rounding. A system whose smallest
/// eigenvalue is below `n·ε_mach·λ_max` is reported as singular.
pub fn solve_least_squares(moments: &MomentPair, ridge: f64) -> Result<Vec<f64>> {
    let m = moments.cross_moment.len();
    if moments.second_moment.shape() != (m, m) {
        return Err(Error::Shape(format!(
            "second moment {:?} vs cross moment of length {m}",
            moments.second_moment.shape()
        )));
    }
    if !(ridge >= 0.0) {
        return Err(Error::arg("ridge", "must be non-negative"));
    }
    let mut a = moments.second_moment.clone();
    for i in 0..m {
        a[(i, i)] += ridge;
    }
    if let Some(l) = cholesky(&a) {
        return Ok(cholesky_solve(&l, &moments.cross_moment));
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(m, m, a.as_slice()));
    let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().copied().fold(0.0f64, |x, y| x.max(y.abs()));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(lo > m as f64 * f64::EPSILON * hi) {
        return Err(Error::Singular { condition });
    }
    let rhs = DVector::from_column_slice(&moments.cross_moment);
    let coeffs = eig.eigenvectors.transpose() * rhs;
    let scaled = coeffs.component_div(&eig.eigenvalues);
    Ok((&eig.eigenvectors * scaled).iter().copied().collect())
}

/// Condition number estimate `λ_max / λ_min` of the second moment.
pub fn condition_estimate(moments: &MomentPair) -> f64 {
    let (lo, hi) = eigen_extremes(&moments.second_moment);
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

/// `Σ_r1⁻¹ μ_r1`.
pub fn r1_reference_direction(spec: &FeatureModelSpec) -> Result<Vec<f64>> {
    let l = cholesky(&spec.sigma_r1).ok_or_else(|| Error::InvalidSpec(vec!["sigma_r1 not positive definite".into()]))?;
    Ok(cholesky_solve(&l, &spec.mu_r1))
}

pub fn population_cad_weights(spec: &FeatureModelSpec) -> Result<PopulationWeights> {
    validate_spec(spec)?;
    if spec.classes != 2 {
        return Err(Error::arg("spec", "closed-form analysis is binary-only"));
    }
    let layout = spec.layout;
    let direction = r1_reference_direction(spec)?;
    // Sherman–Morrison: (Σ + μμᵀ)⁻¹μ = Σ⁻¹μ / (1 + μᵀΣ⁻¹μ)
    let shrink = 1.0 + dot(&spec.mu_r1, &direction);
    let mut exact = vec![0.0; layout.total()];
    let mut diagonal_form = vec![0.0; layout.total()];
    for (i, &d) in direction.iter().enumerate() {
        exact[i] = d / shrink;
        diagonal_form[i] = d;
    }
    let exact = WeightReport::new(exact, layout, &direction)?;
    Ok(PopulationWeights { exact, diagonal_form })
}

pub fn block_mass(w: &[f64], layout: BlockLayout) -> Result<[f64; 3]> {
    if w.len() != layout.total() {
        return Err(Error::Shape(format!(
            "weight vector of length {} for a layout of {}",
            w.len(),
            layout.total()
        )));
    }
    let [a, b, c] = layout.blocks();
    Ok([norm(&w[a]), norm(&w[b]), norm(&w[c])])
}

/// Empirical OLS on a dataset, reported against the model's `r1` direction.
pub fn empirical_weights(dataset: &PairedDataset, spec: &FeatureModelSpec, ridge: f64) -> Result<WeightReport> {
    let moments = empirical_moments(dataset)?;
    let w = solve_least_squares(&moments, ridge)?;
    WeightReport::new(w, dataset.layout(), &r1_reference_direction(spec)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use crate::feature_model::{generate_paircad, EditMode, Provenance, Role, Sample};

    fn dataset(samples: Vec<(Vec<f64>, usize)>) -> PairedDataset {
        let m = samples[0].0.len();
        let samples = samples
            .into_iter()
            .enumerate()
            .map(|(i, (x, label))| Sample {
                x,
                label,
                role: Role::Original,
                pair_id: i as u64,
                source_label: label,
            })
            .collect();
        PairedDataset::new(
            BlockLayout::new(m, 0, 0).unwrap(),
            2,
            samples,
            None,
            Provenance {
                spec_hash: String::new(),
                seed: 0,
                mode: "test".into(),
            },
        )
        .unwrap()
    }

    fn moments(m: Vec<Vec<f64>>, mu: Vec<f64>) -> MomentPair {
        MomentPair {
            second_moment: Matrix::from_rows(&m).unwrap(),
            cross_moment: mu,
            n: 1,
        }
    }

    #[test]
    fn two_point_moments() {
        let ds = dataset(vec![(vec![1.0], 1), (vec![-1.0], 0)]);
        let mp = empirical_moments(&ds).unwrap();
        assert_eq!(mp.second_moment, Matrix::from_rows(&[vec![1.0]]).unwrap());
        assert_eq!(mp.cross_moment, vec![1.0]);
    }

    #[test]
    fn single_pair_cancels_unedited_cross_moment() {
        let spec = FeatureModelSpec::canonical();
        let ds = generate_paircad(&spec, 1, 1, EditMode::ExactOpposite, 17).unwrap();
        let mp = empirical_moments(&ds).unwrap();
        for j in spec.layout.unedited() {
            assert_eq!(mp.cross_moment[j], 0.0);
        }
        for i in spec.layout.r1() {
            for j in spec.layout.unedited() {
                assert_eq!(mp.second_moment[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn diagonal_and_identity_solves() {
        let w = solve_least_squares(&moments(vec![vec![2.0, 0.0], vec![0.0, 2.0]], vec![1.0, 0.0]), 0.0).unwrap();
        assert_abs_diff_eq!(w[0], 0.5, epsilon = 1e-15);
        assert_eq!(w[1], 0.0);
        let w = solve_least_squares(&moments(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.3, -2.0]), 0.0).unwrap();
        assert_eq!(w, vec![0.3, -2.0]);
    }

    #[test]
    fn singular_system_reports_condition() {
        let err = solve_least_squares(&moments(vec![vec![0.0]], vec![0.0]), 0.0).unwrap_err();
        assert!(matches!(err, Error::Singular { .. }), "{err}");
        let w = solve_least_squares(&moments(vec![vec![0.0]], vec![1.0]), 0.5).unwrap();
        assert_abs_diff_eq!(w[0], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn population_forms_unit_case() {
        let spec = FeatureModelSpec::isotropic(
            BlockLayout::new(1, 1, 1).unwrap(),
            vec![1.0],
            vec![1.0],
            vec![1.0],
            [1.0; 3],
        );
        let pw = population_cad_weights(&spec).unwrap();
        assert_eq!(pw.diagonal_form, vec![1.0, 0.0, 0.0]);
        assert_eq!(pw.exact.w, vec![0.5, 0.0, 0.0]);
        assert_eq!(pw.exact.direction_cosine_r1, 1.0);
    }

    #[test]
    fn population_zero_signal() {
        let spec = FeatureModelSpec::isotropic(
            BlockLayout::new(1, 1, 1).unwrap(),
            vec![0.0],
            vec![1.0],
            vec![1.0],
            [1.0; 3],
        );
        let pw = population_cad_weights(&spec).unwrap();
        assert_eq!(pw.diagonal_form, vec![0.0; 3]);
        assert_eq!(pw.exact.w, vec![0.0; 3]);
    }

    #[test]
    fn block_mass_examples() {
        let l = BlockLayout::new(1, 1, 1).unwrap();
        assert_eq!(block_mass(&[3.0, 4.0, 0.0], l).unwrap(), [3.0, 4.0, 0.0]);
        assert_eq!(block_mass(&[0.0; 3], l).unwrap(), [0.0; 3]);
        let l = BlockLayout::new(2, 2, 0).unwrap();
        let s = 2f64.sqrt();
        assert_eq!(block_mass(&[1.0; 4], l).unwrap(), [s, s, 0.0]);
        assert!(block_mass(&[1.0; 3], l).is_err());
    }

    #[test]
    fn neutral_rejected() {
        let mut spec = FeatureModelSpec::canonical();
        spec.classes = 3;
        let ds = generate_paircad(&spec, 6, 1, EditMode::ExactOpposite, 0).unwrap();
        assert!(empirical_moments(&ds).unwrap_err().to_string().contains("binary-only"));
        assert!(population_cad_weights(&spec).is_err());
    }
}
