//! Intensity normalization and the minimum noise fraction (MNF) transform.
//!
//! The noise covariance is estimated from differences between each pixel and
//! its lower-right neighbour, assuming the true spectra are locally constant.
//! MNF then solves the generalized eigenproblem `Σ_S w = λ Σ_N w` with
//! `Σ_S = Σ_D − Σ_N`, normalizing the eigenvectors so that `Wᵀ Σ_N W = I`.
//! The generalized eigenvalues are the component SNRs.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::cube::HyperCube;
use crate::error::{Error, Result};
use crate::linalg::{sorted_symmetric_eigen, symmetrize};

/// `Var(n1 − n2) = 2 Σ_N` for independent identically distributed noise.
pub const DIFFERENCE_NOISE_SCALE: f64 = 0.5;

/// Relative ridge added to a singular noise covariance, scaled by `trace / L`.
pub const NOISE_RIDGE: f64 = 1e-10;

/// Rescales the cube to `[0, 1]` by subtracting the global minimum and
/// dividing by the resulting maximum.
pub fn normalize_cube(cube: &HyperCube) -> Result<HyperCube> {
    let min = cube.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = cube.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range <= 0.0 {
        return Err(Error::Degenerate(
            "cube is constant, normalization is undefined".into(),
        ));
    }
    let data = cube.data().iter().map(|v| (v - min) / range).collect();
    HyperCube::new(cube.height(), cube.width(), cube.bands(), data)
}

pub fn estimate_noise_covariance(cube: &HyperCube) -> Result<DMatrix<f64>> {
    estimate_noise_covariance_scaled(cube, DIFFERENCE_NOISE_SCALE)
}

/// `scale · mean(d dᵀ)` over the diagonal differences
/// `d = g(i,j) − g(i+1,j+1)`. Differences are not mean-centered.
pub fn estimate_noise_covariance_scaled(cube: &HyperCube, scale: f64) -> Result<DMatrix<f64>> {
    let (h, w, l) = (cube.height(), cube.width(), cube.bands());
    if h < 2 || w < 2 {
        return Err(Error::Degenerate(format!(
            "noise estimation needs at least a 2x2 grid, got {h}x{w}"
        )));
    }
    let row_sums: Vec<DMatrix<f64>> = (0..h - 1)
        .into_par_iter()
        .map(|i| {
            let mut acc = DMatrix::zeros(l, l);
            let mut d = DVector::zeros(l);
            for j in 0..w - 1 {
                let a = cube.spectrum(i * w + j);
                let b = cube.spectrum((i + 1) * w + j + 1);
                for r in 0..l {
                    d[r] = a[r] - b[r];
                }
                acc.syger(1.0, &d, &d, 1.0);
            }
            acc
        })
        .collect();
    let mut sum = DMatrix::zeros(l, l);
    for m in &row_sums {
        sum += m;
    }
    let count = ((h - 1) * (w - 1)) as f64;
    // syger only fills the lower triangle
    let lower = sum.lower_triangle();
    let full = &lower + lower.transpose() - DMatrix::from_diagonal(&lower.diagonal());
    Ok(full * (scale / count))
}

/// Per-band mean and covariance (denominator `N`) of all spectra.
pub fn data_moments(cube: &HyperCube) -> (DVector<f64>, DMatrix<f64>) {
    let l = cube.bands();
    let n = cube.len() as f64;
    let mut mean = DVector::zeros(l);
    for s in cube.spectra() {
        for r in 0..l {
            mean[r] += s[r];
        }
    }
    mean /= n;
    let mut cov = DMatrix::zeros(l, l);
    let mut d = DVector::zeros(l);
    for s in cube.spectra() {
        for r in 0..l {
            d[r] = s[r] - mean[r];
        }
        cov.syger(1.0, &d, &d, 1.0);
    }
    let lower = cov.lower_triangle();
    let full = &lower + lower.transpose() - DMatrix::from_diagonal(&lower.diagonal());
    (mean, full / n)
}

#[derive(Debug, Clone)]
pub struct MnfOptions {
    /// Multiplier applied to the neighbour-difference second moments.
    pub noise_scale: f64,
}

impl Default for MnfOptions {
    fn default() -> Self {
        Self {
            noise_scale: DIFFERENCE_NOISE_SCALE,
        }
    }
}

/// A fitted MNF transform.
#[derive(Debug, Clone)]
pub struct MnfModel {
    /// Generalized eigenvectors as columns, ordered by descending SNR.
    pub basis: DMatrix<f64>,
    /// Generalized eigenvalues (component SNRs), descending.
    pub snrs: DVector<f64>,
    pub mean: DVector<f64>,
    /// Number of leading components kept by [`apply_mnf`].
    pub kept: usize,
    /// The noise covariance the basis whitens, including any ridge.
    pub noise_cov: DMatrix<f64>,
}

impl MnfModel {
    /// Simultaneously diagonalizes `Σ_S = data_cov − noise_cov` and
    /// `noise_cov` by whitening the noise and diagonalizing the whitened
    /// signal covariance.
    pub fn from_covariances(
        mean: DVector<f64>,
        data_cov: &DMatrix<f64>,
        noise_cov: &DMatrix<f64>,
        kept: usize,
    ) -> Result<Self> {
        let l = mean.len();
        if data_cov.shape() != (l, l) || noise_cov.shape() != (l, l) {
            return Err(Error::Shape(format!(
                "covariances must be {l}x{l}, got {:?} and {:?}",
                data_cov.shape(),
                noise_cov.shape()
            )));
        }
        if kept == 0 || kept > l {
            return Err(Error::InvalidParameter(format!(
                "kept components must be in 1..={l}, got {kept}"
            )));
        }
        let mut noise = symmetrize(noise_cov);
        let mut eig = sorted_symmetric_eigen(&noise)?;
        let smallest = eig.values[l - 1];
        if smallest <= 0.0 {
            let trace = noise.trace();
            if trace <= 0.0 {
                return Err(Error::Degenerate(
                    "noise covariance is zero; the image has no estimable noise".into(),
                ));
            }
            let ridge = NOISE_RIDGE * trace / l as f64 - smallest.min(0.0);
            for r in 0..l {
                noise[(r, r)] += ridge;
            }
            eig = sorted_symmetric_eigen(&noise)?;
        }

        // noise = E G² Eᵀ, whitening = E G⁻¹
        let mut whitening = eig.vectors.clone();
        for (c, &g2) in eig.values.iter().enumerate() {
            let inv = 1.0 / g2.sqrt();
            whitening.column_mut(c).scale_mut(inv);
        }
        let signal = symmetrize(data_cov) - &noise;
        let whitened = whitening.transpose() * signal * &whitening;
        let inner = sorted_symmetric_eigen(&whitened)?;
        let basis = whitening * inner.vectors;

        Ok(Self {
            basis,
            snrs: inner.values,
            mean,
            kept,
            noise_cov: noise,
        })
    }

    pub fn input_bands(&self) -> usize {
        self.mean.len()
    }

    /// Maps reduced data back to the input space, `g ≈ mean + Σ_N W_kept y`.
    ///
    /// Exact when all components are kept, since `W⁻ᵀ = Σ_N W`.
    pub fn reconstruct(&self, reduced: &HyperCube) -> Result<HyperCube> {
        if reduced.bands() != self.kept {
            return Err(Error::Shape(format!(
                "expected {} reduced bands, got {}",
                self.kept,
                reduced.bands()
            )));
        }
        let l = self.input_bands();
        let back = &self.noise_cov * self.basis.columns(0, self.kept);
        let mut data = Vec::with_capacity(reduced.len() * l);
        for y in reduced.spectra() {
            for r in 0..l {
                let mut v = self.mean[r];
                for (c, &yc) in y.iter().enumerate() {
                    v += back[(r, c)] * yc;
                }
                data.push(v);
            }
        }
        HyperCube::new(reduced.height(), reduced.width(), l, data)
    }
}

pub fn fit_mnf(cube: &HyperCube, kept: usize) -> Result<MnfModel> {
    fit_mnf_with(cube, kept, &MnfOptions::default())
}

pub fn fit_mnf_with(cube: &HyperCube, kept: usize, options: &MnfOptions) -> Result<MnfModel> {
    if kept > cube.bands() {
        return Err(Error::InvalidParameter(format!(
            "cannot keep {kept} components of a {}-band cube",
            cube.bands()
        )));
    }
    let noise = estimate_noise_covariance_scaled(cube, options.noise_scale)?;
    let (mean, cov) = data_moments(cube);
    MnfModel::from_covariances(mean, &cov, &noise, kept)
}

/// Projects every pixel onto the leading `model.kept` components:
/// `y = W_keptᵀ (g − mean)`.
pub fn apply_mnf(model: &MnfModel, cube: &HyperCube) -> Result<HyperCube> {
    let l = model.input_bands();
    if cube.bands() != l {
        return Err(Error::Shape(format!(
            "MNF was fitted on {l} bands, cube has {}",
            cube.bands()
        )));
    }
    let kept = model.kept;
    let proj = model.basis.columns(0, kept).transpose();
    let mut data = vec![0.0; cube.len() * kept];
    data.par_chunks_mut(kept)
        .zip(cube.data().par_chunks(l))
        .for_each(|(out, g)| {
            for (c, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for r in 0..l {
                    acc += proj[(c, r)] * (g[r] - model.mean[r]);
                }
                *o = acc;
            }
        });
    HyperCube::new(cube.height(), cube.width(), kept, data)
}
