//! Concentrated Gaussian on SO(3) and finite mixtures of them.
//!
//! A rotation `R` is distributed as `R = exp(ε^) R̄` with `ε ~ N(0, Σ)`.
//! The density is taken with respect to Lebesgue measure on the tangent
//! coordinate `ε`, normalized as the underlying 3-d Gaussian.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::rotmath::{exp_so3, left_jacobian_det, log_so3, quat_mul, quat_to_rotmat, TangentVector, UnitQuaternion};

const MAX_CONDITION: f64 = 1e12;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct ConcentratedGaussianSO3 {
    mean: UnitQuaternion,
    cov: Matrix3<f64>,
}

impl ConcentratedGaussianSO3 {
    /// Validated constructor: `cov` must be symmetric within 1e-9 with
    /// strictly positive eigenvalues.
    pub fn new(mean: UnitQuaternion, cov: Matrix3<f64>) -> Result<Self> {
        if cov.iter().any(|c| !c.is_finite()) {
            return invalid("covariance has non-finite entries");
        }
        let asym = (cov - cov.transpose()).amax();
        if asym > 1e-9 {
            return invalid(format!("covariance not symmetric (max |Σ - Σᵀ| = {asym:e})"));
        }
        let cov = symmetrize(&cov);
        let min_eig = SymmetricEigen::new(cov).eigenvalues.min();
        if !(min_eig > 0.0) {
            return invalid(format!("covariance not positive definite (min eigenvalue {min_eig:e})"));
        }
        Ok(Self { mean, cov })
    }

    /// Isotropic distribution with standard deviation `sigma` per axis.
    pub fn isotropic(mean: UnitQuaternion, sigma: f64) -> Result<Self> {
        Self::new(mean, Matrix3::identity() * (sigma * sigma))
    }

    /// Dirac mass at `mean`, represented by an exactly zero covariance.
    pub fn point_mass(mean: UnitQuaternion) -> Self {
        Self { mean, cov: Matrix3::zeros() }
    }

    /// Constructor for covariances produced by trusted arithmetic (model
    /// heads, composition); only symmetrizes.
    pub(crate) fn from_parts(mean: UnitQuaternion, cov: Matrix3<f64>) -> Self {
        Self { mean, cov: symmetrize(&cov) }
    }

    pub fn mean(&self) -> &UnitQuaternion {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix3<f64> {
        &self.cov
    }

    pub fn is_point_mass(&self) -> bool {
        self.cov.iter().all(|c| *c == 0.0)
    }

    /// Lower Cholesky factor of Σ; zero for a point mass.
    pub fn cholesky_factor(&self) -> Result<Matrix3<f64>> {
        if self.is_point_mass() {
            return Ok(Matrix3::zeros());
        }
        self.cov
            .cholesky()
            .map(|c| c.l())
            .ok_or_else(|| Error::Numerical(format!("Cholesky failed for covariance {:?}", self.cov)))
    }

    /// Tangent residual `log(R ⊗ R̄⁻¹)`.
    pub fn residual(&self, r: &UnitQuaternion) -> TangentVector {
        log_so3(&quat_mul(r, &self.mean.inverse()))
    }

    /// Log density at `r`.
    ///
    /// For a point mass this is `+∞` at the mean and an error elsewhere.
    pub fn log_pdf(&self, r: &UnitQuaternion) -> Result<f64> {
        let eps = self.residual(r);
        self.log_pdf_tangent(&eps)
    }

    /// Log density of the tangent residual `ε` under `N(0, Σ)`.
    pub fn log_pdf_tangent(&self, eps: &TangentVector) -> Result<f64> {
        if self.is_point_mass() {
            return if eps.norm() < 1e-12 {
                Ok(f64::INFINITY)
            } else {
                Err(Error::Numerical("point-mass density evaluated away from its mean".into()))
            };
        }
        let eig = SymmetricEigen::new(self.cov);
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(min > 0.0) || max / min > MAX_CONDITION {
            return Err(Error::Numerical(format!(
                "singular covariance (eigenvalues {min:e} .. {max:e})"
            )));
        }
        let proj = eig.eigenvectors.transpose() * eps;
        let maha: f64 = proj.iter().zip(eig.eigenvalues.iter()).map(|(p, l)| p * p / l).sum();
        let logdet: f64 = eig.eigenvalues.iter().map(|l| l.ln()).sum();
        Ok(-0.5 * maha - 0.5 * logdet - 1.5 * LN_2PI)
    }

    /// Log density of `u = log(R ⊗ reference⁻¹)` when `R` follows this
    /// distribution, i.e. the density pushed into a chart centred elsewhere.
    pub fn log_pdf_in_chart(&self, reference: &UnitQuaternion, u: &TangentVector) -> Result<f64> {
        let r = quat_mul(&exp_so3(u), reference);
        let eps = self.residual(&r);
        let base = self.log_pdf_tangent(&eps)?;
        Ok(base + left_jacobian_det(u).ln() - left_jacobian_det(&eps).ln())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<UnitQuaternion> {
        let l = self.cholesky_factor()?;
        Ok(self.sample_with_factor(&l, rng))
    }

    /// Sampling with a precomputed Cholesky factor, for repeated draws.
    pub fn sample_with_factor<R: Rng + ?Sized>(&self, l: &Matrix3<f64>, rng: &mut R) -> UnitQuaternion {
        let u = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        quat_mul(&exp_so3(&(l * u)), &self.mean)
    }

    /// Distribution of `R₁ R₂`: mean `R̄₁R̄₂`, covariance `Σ₁ + R̄₁Σ₂R̄₁ᵀ`.
    pub fn compose(&self, other: &ConcentratedGaussianSO3) -> ConcentratedGaussianSO3 {
        let r1 = quat_to_rotmat(&self.mean);
        let cov = self.cov + r1 * other.cov * r1.transpose();
        Self::from_parts(quat_mul(&self.mean, &other.mean), cov)
    }
}

fn symmetrize(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// Integrates per-step differential distributions starting from a point
/// mass at `q0`. Output step `t` is the distribution of the absolute pose.
pub fn integrate_distribution(
    per_step: &[ConcentratedGaussianSO3],
    q0: &UnitQuaternion,
) -> Result<Vec<ConcentratedGaussianSO3>> {
    if per_step.is_empty() {
        return invalid("integrate_distribution needs at least one step");
    }
    let mut cur = ConcentratedGaussianSO3::point_mass(*q0);
    Ok(per_step
        .iter()
        .map(|d| {
            cur = cur.compose(d);
            cur.clone()
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct MixtureSO3 {
    weights: Vec<f64>,
    components: Vec<ConcentratedGaussianSO3>,
}

impl MixtureSO3 {
    pub fn new(weights: Vec<f64>, components: Vec<ConcentratedGaussianSO3>) -> Result<Self> {
        if components.is_empty() {
            return invalid("mixture needs at least one component");
        }
        if weights.len() != components.len() {
            return invalid(format!(
                "mixture has {} weights but {} components",
                weights.len(),
                components.len()
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return invalid("mixture weights must be finite and nonnegative");
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return invalid(format!("mixture weights sum to {total}, expected 1"));
        }
        Ok(Self { weights, components })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[ConcentratedGaussianSO3] {
        &self.components
    }

    /// `ln Σᵢ πᵢ p_i(R)` via log-sum-exp; zero-weight components are skipped.
    pub fn log_pdf(&self, r: &UnitQuaternion) -> Result<f64> {
        let terms = self
            .weights
            .iter()
            .zip(&self.components)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, c)| Ok(w.ln() + c.log_pdf(r)?))
            .collect::<Result<Vec<f64>>>()?;
        Ok(log_sum_exp(&terms))
    }

    /// Ancestral sampling: component by weight, then a draw from it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<UnitQuaternion> {
        let idx = self.sample_component(rng)?;
        self.components[idx].sample(rng)
    }

    pub fn sample_component<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        let dist = WeightedIndex::new(&self.weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(dist.sample(rng))
    }
}

/// Numerically stable `ln Σ exp(xᵢ)`; `-∞` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
