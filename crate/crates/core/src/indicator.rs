//! Robust anisotropic indicator function.
//!
//! For a segment with mean `μ` and covariance `Σ = U D² Uᵀ`, the standard
//! deviations on the diagonal of `D` are floored at `ε`, giving
//! `Σ_ε = U D_ε² Uᵀ`. The indicator of a spectrum `g` is
//!
//! ```text
//! f(g) = sqrt(‖D_ε⁻¹ Uᵀ (g − μ)‖² + η) + log det Σ_ε
//! ```
//!
//! which is evaluated from the factorization, never through an explicit
//! inverse. The log-determinant is floored at `2 L log ε`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::cube::HyperCube;
use crate::error::{Error, Result};
use crate::linalg::sorted_symmetric_eigen;

pub const DEFAULT_ETA: f64 = 1e-2;

/// Eigen-factorization of an ε-regularized covariance.
#[derive(Debug, Clone)]
pub struct RegularizedCovariance {
    pub eigvecs: DMatrix<f64>,
    pub eig_stddevs: DVector<f64>,
    pub reg_stddevs: DVector<f64>,
    pub log_det_reg: f64,
}

pub fn regularize_covariance(sigma: &DMatrix<f64>, eps: f64) -> Result<RegularizedCovariance> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    let eig = sorted_symmetric_eigen(sigma)?;
    let eig_stddevs = eig.values.map(|v| v.max(0.0).sqrt());
    let reg_stddevs = eig_stddevs.map(|s| s.max(eps));
    let log_det_reg = reg_stddevs.iter().map(|s| 2.0 * s.ln()).sum();
    Ok(RegularizedCovariance {
        eigvecs: eig.vectors,
        eig_stddevs,
        reg_stddevs,
        log_det_reg,
    })
}

/// Mean, raw covariance and the regularized factorization of one segment.
#[derive(Debug, Clone)]
pub struct SegmentModel {
    pub mu: DVector<f64>,
    /// Unregularized covariance.
    pub sigma: DMatrix<f64>,
    pub eigvecs: DMatrix<f64>,
    pub eig_stddevs: DVector<f64>,
    pub reg_stddevs: DVector<f64>,
    pub log_det_reg: f64,
}

impl SegmentModel {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>, eps: f64) -> Result<Self> {
        if sigma.shape() != (mu.len(), mu.len()) {
            return Err(Error::Shape(format!(
                "covariance {:?} does not match mean of length {}",
                sigma.shape(),
                mu.len()
            )));
        }
        if let Some(index) = mu.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let reg = regularize_covariance(&sigma, eps)?;
        Ok(Self {
            mu,
            sigma,
            eigvecs: reg.eigvecs,
            eig_stddevs: reg.eig_stddevs,
            reg_stddevs: reg.reg_stddevs,
            log_det_reg: reg.log_det_reg,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `Σ_ε = U D_ε² Uᵀ`.
    pub fn regularized_covariance(&self) -> DMatrix<f64> {
        let d2 = self.reg_stddevs.map(|s| s * s);
        &self.eigvecs * DMatrix::from_diagonal(&d2) * self.eigvecs.transpose()
    }

    /// `Σ_ε⁻¹ = U D_ε⁻² Uᵀ`.
    pub fn regularized_precision(&self) -> DMatrix<f64> {
        let d2 = self.reg_stddevs.map(|s| 1.0 / (s * s));
        &self.eigvecs * DMatrix::from_diagonal(&d2) * self.eigvecs.transpose()
    }

    /// Squared Mahalanobis distance `(g − μ)ᵀ Σ_ε⁻¹ (g − μ)`.
    #[inline]
    pub fn mahalanobis_squared(&self, g: &[f64]) -> f64 {
        let l = self.dim();
        let mut total = 0.0;
        for r in 0..l {
            let col = self.eigvecs.column(r);
            let mut proj = 0.0;
            for i in 0..l {
                proj += col[i] * (g[i] - self.mu[i]);
            }
            let z = proj / self.reg_stddevs[r];
            total += z * z;
        }
        total
    }
}

fn check_dim(g: &[f64], model: &SegmentModel) -> Result<()> {
    if g.len() != model.dim() {
        return Err(Error::Shape(format!(
            "spectrum has {} bands, model has {}",
            g.len(),
            model.dim()
        )));
    }
    Ok(())
}

/// `h = sqrt((g − μ)ᵀ Σ_ε⁻¹ (g − μ) + η)`.
pub fn mahalanobis_sqrt(g: &[f64], model: &SegmentModel, eta: f64) -> Result<f64> {
    check_dim(g, model)?;
    Ok((model.mahalanobis_squared(g) + eta).sqrt())
}

/// `h + log det Σ_ε`.
pub fn indicator_value(g: &[f64], model: &SegmentModel, eta: f64) -> Result<f64> {
    Ok(mahalanobis_sqrt(g, model, eta)? + model.log_det_reg)
}

/// Per-pixel, per-class cost array `H x W x k`, pixel-major with the class
/// index innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorField {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl IndicatorField {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.classes..(p + 1) * self.classes]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.classes)
    }

    pub(crate) fn from_fn(
        cube: &HyperCube,
        classes: usize,
        cost: impl Fn(&[f64], usize) -> f64 + Sync,
    ) -> Self {
        let mut data = vec![0.0; cube.len() * classes];
        data.par_chunks_mut(classes)
            .zip(cube.data().par_chunks(cube.bands()))
            .for_each(|(out, g)| {
                for (l, o) in out.iter_mut().enumerate() {
                    *o = cost(g, l);
                }
            });
        Self {
            height: cube.height(),
            width: cube.width(),
            classes,
            data,
        }
    }
}

pub fn indicator_field(cube: &HyperCube, models: &[SegmentModel], eta: f64) -> Result<IndicatorField> {
    if models.is_empty() {
        return Err(Error::Shape("at least one segment model is required".into()));
    }
    if let Some(m) = models.iter().find(|m| m.dim() != cube.bands()) {
        return Err(Error::Shape(format!(
            "cube has {} bands, a model has {}",
            cube.bands(),
            m.dim()
        )));
    }
    let field = IndicatorField::from_fn(cube, models.len(), |g, l| {
        (models[l].mahalanobis_squared(g) + eta).sqrt() + models[l].log_det_reg
    });
    if let Some(index) = field.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn diag(values: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(values))
    }

    fn model(mu: &[f64], sigma: DMatrix<f64>, eps: f64) -> SegmentModel {
        SegmentModel::new(DVector::from_row_slice(mu), sigma, eps).unwrap()
    }

    #[test]
    fn identity_is_untouched() {
        let r = regularize_covariance(&DMatrix::identity(3, 3), 0.5).unwrap();
        assert!(r.reg_stddevs.iter().all(|&s| (s - 1.0).abs() < 1e-15));
        assert!(r.log_det_reg.abs() < 1e-14);
    }

    #[test]
    fn zero_covariance_hits_the_volume_floor() {
        let r = regularize_covariance(&DMatrix::zeros(3, 3), 0.1).unwrap();
        assert!(r.reg_stddevs.iter().all(|&s| s == 0.1));
        assert!((r.log_det_reg - 6.0 * 0.1f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn small_stddev_is_floored() {
        let r = regularize_covariance(&diag(&[4.0, 1e-8]), 0.01).unwrap();
        assert!((r.eig_stddevs[0] - 2.0).abs() < 1e-12);
        assert!((r.eig_stddevs[1] - 1e-4).abs() < 1e-12);
        assert!((r.reg_stddevs[0] - 2.0).abs() < 1e-12);
        assert_eq!(r.reg_stddevs[1], 0.01);
    }

    #[test]
    fn rejects_bad_input() {
        let mut m = DMatrix::identity(2, 2);
        m[(0, 1)] = f64::INFINITY;
        assert!(matches!(regularize_covariance(&m, 0.1), Err(Error::NonFinite { .. })));
        assert!(regularize_covariance(&DMatrix::identity(2, 2), 0.0).is_err());
    }

    #[test]
    fn mahalanobis_examples() {
        let iso = model(&[1.0, 2.0], DMatrix::identity(2, 2), 1e-3);
        assert_eq!(mahalanobis_sqrt(&[1.0, 2.0], &iso, 0.0).unwrap(), 0.0);
        assert!((mahalanobis_sqrt(&[4.0, 6.0], &iso, 0.0).unwrap() - 5.0).abs() < 1e-12);
        let aniso = model(&[0.0, 0.0], diag(&[4.0, 1.0]), 1e-3);
        let h = mahalanobis_sqrt(&[1.0, 0.0], &aniso, 0.01).unwrap();
        assert!((h - 0.26f64.sqrt()).abs() < 1e-12);
        assert!((h - 0.509902).abs() < 1e-6);
        assert!(mahalanobis_sqrt(&[1.0], &aniso, 0.0).is_err());
    }

    #[test]
    fn indicator_examples() {
        let iso = model(&[1.0, 2.0], DMatrix::identity(2, 2), 1e-3);
        assert!(indicator_value(&[1.0, 2.0], &iso, 0.0).unwrap().abs() < 1e-14);
        let aniso = model(&[0.0, 0.0], diag(&[4.0, 1.0]), 1e-3);
        let f = indicator_value(&[1.0, 0.0], &aniso, 0.0).unwrap();
        assert!((f - (0.5 + 4f64.ln())).abs() < 1e-12);
        assert!((f - 1.886294).abs() < 1e-6);
    }

    #[test]
    fn field_matches_scalar_evaluation() {
        let cube = HyperCube::new(1, 2, 2, vec![0.0, 1.0, 2.0, -1.0]).unwrap();
        let a = model(&[0.5, 0.5], diag(&[0.25, 2.0]), 1e-3);
        let b = model(&[1.0, -1.0], DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]), 1e-3);
        let f = indicator_field(&cube, &[a.clone(), b.clone()], 0.01).unwrap();
        for p in 0..2 {
            let g = cube.spectrum(p);
            assert!((f.row(p)[0] - indicator_value(g, &a, 0.01).unwrap()).abs() < 1e-14);
            assert!((f.row(p)[1] - indicator_value(g, &b, 0.01).unwrap()).abs() < 1e-14);
        }
        let twin = indicator_field(&cube, &[a.clone(), a.clone()], 0.01).unwrap();
        assert!(twin.rows().all(|r| r[0] == r[1]));
        let single = indicator_field(&cube, &[b.clone()], 0.01).unwrap();
        assert_eq!(single.row(1)[0], indicator_value(cube.spectrum(1), &b, 0.01).unwrap());
        assert!(indicator_field(&cube, &[], 0.01).is_err());
    }

    #[test]
    fn anisotropy_prefers_the_wide_direction() {
        let m = model(&[0.0, 0.0], DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]), 1e-3);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let wide = indicator_value(&[s, s], &m, 0.01).unwrap();
        let narrow = indicator_value(&[s, -s], &m, 0.01).unwrap();
        for t in 0..16 {
            let a = t as f64 * std::f64::consts::PI / 16.0;
            let v = indicator_value(&[a.cos(), a.sin()], &m, 0.01).unwrap();
            assert!(wide <= v + 1e-12 && v <= narrow + 1e-12);
        }
    }

    fn spd(values: Vec<f64>, l: usize) -> DMatrix<f64> {
        let a = DMatrix::from_vec(l, l, values);
        &a * a.transpose()
    }

    proptest! {
        #[test]
        fn factorization_invariants(values in proptest::collection::vec(-1.0f64..1.0, 9), eps in 1e-3f64..0.5) {
            let sigma = spd(values, 3);
            let r = regularize_covariance(&sigma, eps).unwrap();
            let orth = r.eigvecs.transpose() * &r.eigvecs;
            prop_assert!((orth - DMatrix::<f64>::identity(3, 3)).abs().max() < 1e-10);
            let rebuilt = &r.eigvecs * DMatrix::from_diagonal(&r.eig_stddevs.map(|s| s * s)) * r.eigvecs.transpose();
            prop_assert!((rebuilt - &sigma).norm() <= 1e-8 * sigma.norm().max(1e-300));
            prop_assert!(r.reg_stddevs.iter().all(|&s| s >= eps));
            // condition number never grows
            let cond_reg = r.reg_stddevs.max() / r.reg_stddevs.min();
            if r.eig_stddevs.min() > 0.0 {
                prop_assert!(cond_reg <= r.eig_stddevs.max() / r.eig_stddevs.min() * (1.0 + 1e-12));
            }
        }

        #[test]
        fn bounded_below(values in proptest::collection::vec(-1.0f64..1.0, 4), g in proptest::collection::vec(-5.0f64..5.0, 2), eta in 0.0f64..1.0) {
            let m = SegmentModel::new(DVector::zeros(2), spd(values, 2), 0.01).unwrap();
            let f = indicator_value(&g, &m, eta).unwrap();
            prop_assert!(f >= eta.sqrt() + m.log_det_reg - 1e-12);
        }

        #[test]
        fn tiny_covariances_share_the_floor(values in proptest::collection::vec(-0.05f64..0.05, 9)) {
            let eps = 0.2;
            let sigma = spd(values, 3);
            let r = regularize_covariance(&sigma, eps).unwrap();
            prop_assume!(r.eig_stddevs.max() <= eps);
            prop_assert!((r.log_det_reg - 6.0 * eps.ln()).abs() <= 1e-12 * r.log_det_reg.abs());
        }
    }
}
