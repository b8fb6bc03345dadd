//! Fixed-point estimation of a segment's mean and covariance.
//!
//! The square root in the indicator has no closed-form minimizer in `μ` and
//! `Σ`. Setting the gradients of the segment energy to zero gives the
//! reweighting scheme
//!
//! ```text
//! w      = u / h(μᵐ, Σ_εᵐ)
//! μᵐ⁺¹   = Σ w g / Σ w
//! Σᵐ⁺¹   = Σ (w / 2) (g − μᵐ⁺¹)(g − μᵐ⁺¹)ᵀ / Σ u
//! ```
//!
//! with `Σᵐ⁺¹` regularized by `ε` before the next step.

use nalgebra::{DMatrix, DVector};

use crate::cube::{HyperCube, LabelField};
use crate::error::{Error, Result};
use crate::indicator::SegmentModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub eps: f64,
    pub eta: f64,
}

impl FixedPointConfig {
    pub fn new(eps: f64, eta: f64) -> Self {
        Self {
            max_iter: 20,
            tol: 1e-5,
            eps,
            eta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("fixed-point max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("fixed-point tol must be positive, got {}", self.tol)));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::InvalidParameter(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidParameter(format!("eta must be nonnegative, got {}", self.eta)));
        }
        Ok(())
    }
}

fn check_shapes(cube: &HyperCube, u: &LabelField, l: usize) -> Result<()> {
    if cube.height() != u.height() || cube.width() != u.width() {
        return Err(Error::Shape(format!(
            "cube grid {}x{} differs from labeling grid {}x{}",
            cube.height(),
            cube.width(),
            u.height(),
            u.width()
        )));
    }
    if l >= u.classes() {
        return Err(Error::Shape(format!("segment {l} out of range for {} classes", u.classes())));
    }
    Ok(())
}

/// Adds `weight · d dᵀ` to the lower triangle of `acc`.
#[inline]
fn add_outer_lower(acc: &mut DMatrix<f64>, d: &[f64], weight: f64) {
    let l = d.len();
    for c in 0..l {
        let wc = weight * d[c];
        for r in c..l {
            acc[(r, c)] += wc * d[r];
        }
    }
}

fn fill_upper(m: &mut DMatrix<f64>) {
    let l = m.nrows();
    for c in 0..l {
        for r in c + 1..l {
            m[(c, r)] = m[(r, c)];
        }
    }
}

/// Weighted empirical mean and covariance of segment `l` (0-based).
///
/// The covariance uses the unbiased denominator `Σ u − 1`; a segment of
/// total weight at most one gets a zero covariance.
pub fn init_segment_stats(
    cube: &HyperCube,
    u: &LabelField,
    l: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_shapes(cube, u, l)?;
    let dim = cube.bands();
    let mut mass = 0.0;
    let mut mu = DVector::zeros(dim);
    for (p, g) in cube.spectra().enumerate() {
        let w = u.weight(p, l);
        if w != 0.0 {
            mass += w;
            for r in 0..dim {
                mu[r] += w * g[r];
            }
        }
    }
    if mass <= 0.0 {
        return Err(Error::EmptySegment(l));
    }
    mu /= mass;

    let mut sigma = DMatrix::zeros(dim, dim);
    if mass - 1.0 > 0.0 {
        let mut d = vec![0.0; dim];
        for (p, g) in cube.spectra().enumerate() {
            let w = u.weight(p, l);
            if w != 0.0 {
                for r in 0..dim {
                    d[r] = g[r] - mu[r];
                }
                add_outer_lower(&mut sigma, &d, w);
            }
        }
        fill_upper(&mut sigma);
        sigma /= mass - 1.0;
    }
    Ok((mu, sigma))
}

/// One reweighting step from the regularized model `current`.
///
/// Returns the new mean and the new unregularized covariance; the covariance
/// is centered on the new mean.
pub fn fixed_point_step(
    cube: &HyperCube,
    u: &LabelField,
    l: usize,
    current: &SegmentModel,
    eta: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_shapes(cube, u, l)?;
    let dim = cube.bands();
    if current.dim() != dim {
        return Err(Error::Shape(format!("model has {} bands, cube {dim}", current.dim())));
    }

    let mut weights = Vec::new();
    let mut mass = 0.0;
    let mut weight_sum = 0.0;
    let mut mu = DVector::zeros(dim);
    for (p, g) in cube.spectra().enumerate() {
        let ul = u.weight(p, l);
        if ul == 0.0 {
            continue;
        }
        let h = (current.mahalanobis_squared(g) + eta).sqrt();
        let w = ul / h;
        mass += ul;
        weight_sum += w;
        for r in 0..dim {
            mu[r] += w * g[r];
        }
        weights.push((p, w));
    }
    if mass <= 0.0 {
        return Err(Error::EmptySegment(l));
    }
    if !(weight_sum > 0.0) || !weight_sum.is_finite() {
        return Err(Error::Degenerate(format!(
            "segment {l}: reweighting diverged (eta = {eta} with a zero distance?)"
        )));
    }
    mu /= weight_sum;

    let mut sigma = DMatrix::zeros(dim, dim);
    let mut d = vec![0.0; dim];
    for &(p, w) in &weights {
        let g = cube.spectrum(p);
        for r in 0..dim {
            d[r] = g[r] - mu[r];
        }
        add_outer_lower(&mut sigma, &d, 0.5 * w);
    }
    fill_upper(&mut sigma);
    sigma /= mass;
    Ok((mu, sigma))
}

#[derive(Debug, Clone)]
pub struct SegmentFit {
    pub model: SegmentModel,
    pub iterations: usize,
    pub converged: bool,
    /// Value of the stopping expression at the last step.
    pub last_change: f64,
}

/// `‖Δμ‖₂ + ‖ΔD_ε‖_F + ‖ΔU‖_F` between successive regularized models.
pub fn model_change(prev: &SegmentModel, next: &SegmentModel) -> f64 {
    (&next.mu - &prev.mu).norm()
        + (&next.reg_stddevs - &prev.reg_stddevs).norm()
        + (&next.eigvecs - &prev.eigvecs).norm()
}

/// Runs the fixed-point scheme for segment `l`.
///
/// Starts from `init` (mean, unregularized covariance) when given, otherwise
/// from the weighted empirical statistics.
pub fn fit_segment(
    cube: &HyperCube,
    u: &LabelField,
    l: usize,
    init: Option<(DVector<f64>, DMatrix<f64>)>,
    cfg: &FixedPointConfig,
) -> Result<SegmentFit> {
    cfg.validate()?;
    let (mu0, sigma0) = match init {
        Some(start) => start,
        None => init_segment_stats(cube, u, l)?,
    };
    let mut model = SegmentModel::new(mu0, sigma0, cfg.eps)?;
    let mut last_change = f64::INFINITY;
    for m in 1..=cfg.max_iter {
        let (mu, sigma) = fixed_point_step(cube, u, l, &model, cfg.eta)?;
        let next = SegmentModel::new(mu, sigma, cfg.eps)?;
        last_change = model_change(&model, &next);
        model = next;
        if last_change < cfg.tol {
            return Ok(SegmentFit {
                model,
                iterations: m,
                converged: true,
                last_change,
            });
        }
    }
    Ok(SegmentFit {
        model,
        iterations: cfg.max_iter,
        converged: false,
        last_change,
    })
}

/// Data energy of segment `l`: `Σ u (h + log det Σ_ε)`.
pub fn segment_energy(cube: &HyperCube, u: &LabelField, l: usize, model: &SegmentModel, eta: f64) -> Result<f64> {
    check_shapes(cube, u, l)?;
    let mut e = 0.0;
    for (p, g) in cube.spectra().enumerate() {
        let ul = u.weight(p, l);
        if ul != 0.0 {
            e += ul * ((model.mahalanobis_squared(g) + eta).sqrt() + model.log_det_reg);
        }
    }
    Ok(e)
}

/// Analytic gradients of the segment energy with respect to `μ` and `Σ`,
/// evaluated at the regularized covariance of `model`:
///
/// ```text
/// ∂μ E = Σ (u / h) P (μ − g)
/// ∂Σ E = −Σ (u / 2h) P (g − μ)(g − μ)ᵀ P + (Σ u) P,   P = Σ_ε⁻¹
/// ```
pub fn energy_gradients(
    cube: &HyperCube,
    u: &LabelField,
    l: usize,
    model: &SegmentModel,
    eta: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_shapes(cube, u, l)?;
    let dim = cube.bands();
    let precision = model.regularized_precision();
    let mut mu_acc = DVector::zeros(dim);
    let mut outer = DMatrix::zeros(dim, dim);
    let mut mass = 0.0;
    let mut d = vec![0.0; dim];
    for (p, g) in cube.spectra().enumerate() {
        let ul = u.weight(p, l);
        if ul == 0.0 {
            continue;
        }
        let h = (model.mahalanobis_squared(g) + eta).sqrt();
        mass += ul;
        for r in 0..dim {
            d[r] = g[r] - model.mu[r];
            mu_acc[r] -= ul / h * d[r];
        }
        add_outer_lower(&mut outer, &d, ul / (2.0 * h));
    }
    fill_upper(&mut outer);
    let grad_mu = &precision * mu_acc;
    let grad_sigma = -(&precision * outer * &precision) + &precision * mass;
    Ok((grad_mu, grad_sigma))
}
