//! Alternating minimization of the relaxed segmentation energy.
//!
//! After a k-means initialization, each outer iteration
//!
//! 1. refits every segment's mean and covariance (warm-started fixed point),
//! 2. evaluates the indicator field,
//! 3. solves the convex labeling problem with PDHG,
//! 4. thresholds the labeling back to one-hot,
//!
//! and stops once the segment means, weighted by segment size, stop moving.
//! The squared-Euclidean mode replaces steps 1–2 by plain segment means and
//! squared distances and shares everything else.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::{first_argmax, first_argmin, HyperCube, LabelField, Rng};
use crate::error::{Error, Result};
use crate::fitting::{fit_segment, init_segment_stats, FixedPointConfig};
use crate::indicator::{indicator_field, IndicatorField, SegmentModel, DEFAULT_ETA};
use crate::kmeans::{cluster_means, kmeans, labels_to_field, squared_distance, DEFAULT_MAX_ITER};
use crate::pdhg::{grid_step, solve_labeling, total_variation, DualField, PdhgConfig};
use crate::preprocess::{apply_mnf, fit_mnf, normalize_cube};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorMode {
    /// Square-rooted Mahalanobis distance with log-det volume term.
    #[default]
    RobustAnisotropic,
    /// `‖g − μ‖²` with plain segment means.
    SquaredEuclidean,
}

fn default_eta() -> f64 {
    DEFAULT_ETA
}
fn default_outer_max() -> usize {
    20
}
fn default_outer_tol() -> f64 {
    1e-6
}
fn default_fp_max_iter() -> usize {
    20
}
fn default_fp_tol() -> f64 {
    1e-5
}
fn default_pdhg_max_iter() -> usize {
    1000
}
fn default_pdhg_tol() -> f64 {
    1e-6
}
fn default_theta() -> f64 {
    1.0
}
fn default_kmeans_max_iter() -> usize {
    DEFAULT_MAX_ITER
}

/// Model and solver settings. `k`, `lambda` and `eps` depend on the image
/// and have no defaults; everything else defaults to image-independent
/// values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub k: usize,
    pub lambda: f64,
    pub eps: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_outer_max")]
    pub outer_max: usize,
    #[serde(default = "default_outer_tol")]
    pub outer_tol: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub indicator_mode: IndicatorMode,
    #[serde(default)]
    pub mnf_kept: Option<usize>,
    #[serde(default = "default_fp_max_iter")]
    pub fp_max_iter: usize,
    #[serde(default = "default_fp_tol")]
    pub fp_tol: f64,
    #[serde(default = "default_pdhg_max_iter")]
    pub pdhg_max_iter: usize,
    #[serde(default = "default_pdhg_tol")]
    pub pdhg_tol: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_kmeans_max_iter")]
    pub kmeans_max_iter: usize,
}

impl PipelineConfig {
    pub fn new(k: usize, lambda: f64, eps: f64) -> Self {
        Self {
            k,
            lambda,
            eps,
            eta: DEFAULT_ETA,
            outer_max: default_outer_max(),
            outer_tol: default_outer_tol(),
            seed: 0,
            indicator_mode: IndicatorMode::RobustAnisotropic,
            mnf_kept: None,
            fp_max_iter: default_fp_max_iter(),
            fp_tol: default_fp_tol(),
            pdhg_max_iter: default_pdhg_max_iter(),
            pdhg_tol: default_pdhg_tol(),
            theta: default_theta(),
            kmeans_max_iter: default_kmeans_max_iter(),
        }
    }

    /// Checks the configuration. `lambda = 0` is accepted here and means the
    /// labeling step degenerates to a per-pixel argmin.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be finite and nonnegative, got {}", self.lambda));
        }
        if self.indicator_mode == IndicatorMode::RobustAnisotropic
            && (!(self.eps > 0.0) || !self.eps.is_finite())
        {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return bad(format!("eta must be nonnegative, got {}", self.eta));
        }
        if self.outer_max == 0 || self.fp_max_iter == 0 || self.pdhg_max_iter == 0 || self.kmeans_max_iter == 0 {
            return bad("iteration limits must be at least 1".into());
        }
        if !(self.outer_tol > 0.0) || !(self.fp_tol > 0.0) || !(self.pdhg_tol > 0.0) {
            return bad("tolerances must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return bad(format!("theta must lie in [0, 1], got {}", self.theta));
        }
        if self.mnf_kept == Some(0) {
            return bad("mnf_kept must be at least 1".into());
        }
        Ok(())
    }

    pub fn fixed_point(&self) -> FixedPointConfig {
        FixedPointConfig {
            max_iter: self.fp_max_iter,
            tol: self.fp_tol,
            eps: self.eps,
            eta: self.eta,
        }
    }

    pub fn pdhg(&self, height: usize, width: usize) -> PdhgConfig {
        PdhgConfig {
            theta: self.theta,
            max_iter: self.pdhg_max_iter,
            tol: self.pdhg_tol,
            ..PdhgConfig::for_grid(height, width, self.lambda)
        }
    }
}

/// One-hot encoding of the smallest index attaining each pixel's maximum.
pub fn threshold(u: &LabelField) -> LabelField {
    let k = u.classes();
    let mut out = LabelField::zeros(u.height(), u.width(), k);
    for (p, row) in u.rows().enumerate() {
        out.row_mut(p)[first_argmax(row)] = 1.0;
    }
    out
}

/// One-hot encoding of the smallest index attaining each pixel's minimum cost.
pub fn argmin_labeling(f: &IndicatorField) -> LabelField {
    let mut out = LabelField::zeros(f.height, f.width, f.classes);
    for (p, row) in f.rows().enumerate() {
        out.row_mut(p)[first_argmin(row)] = 1.0;
    }
    out
}

/// `Σ_l (|segment l| / (H W)) ‖μ_l − μ_l_prev‖_∞`.
pub fn outer_change(u: &LabelField, mu: &[DVector<f64>], mu_prev: &[DVector<f64>]) -> f64 {
    let n = u.len() as f64;
    mu.iter()
        .zip(mu_prev)
        .enumerate()
        .map(|(l, (a, b))| {
            let weight = u.class_mass(l) / n;
            if weight == 0.0 {
                0.0
            } else {
                weight * (a - b).amax()
            }
        })
        .sum()
}

pub fn outer_stop(u: &LabelField, mu: &[DVector<f64>], mu_prev: &[DVector<f64>], tol: f64) -> bool {
    outer_change(u, mu, mu_prev) < tol
}

/// `f_l(i,j) = ‖g(i,j) − μ_l‖²`.
pub fn indicator_field_ms2(cube: &HyperCube, means: &[DVector<f64>]) -> Result<IndicatorField> {
    if means.is_empty() {
        return Err(Error::Shape("at least one mean is required".into()));
    }
    if means.iter().any(|m| m.len() != cube.bands()) {
        return Err(Error::Shape("mean length differs from cube bands".into()));
    }
    Ok(IndicatorField::from_fn(cube, means.len(), |g, l| {
        squared_distance(g, means[l].as_slice())
    }))
}

/// Energy `Σ u f + λ TV(u)`.
pub fn objective(u: &LabelField, f: &IndicatorField, lambda: f64) -> f64 {
    let data: f64 = u.data().iter().zip(&f.data).map(|(a, b)| a * b).sum();
    data + lambda * total_variation(u, grid_step(u.height(), u.width()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Energy of the thresholded labeling under this iteration's segment models.
    pub objective: f64,
    pub segment_sizes: Vec<usize>,
    /// Value of the size-weighted mean-change stopping expression, if evaluated.
    pub mean_change: Option<f64>,
    pub pdhg_iterations: usize,
    pub fit_iterations: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    /// Thresholded (one-hot) labeling.
    pub labels: LabelField,
    /// Segment means after the last outer iteration.
    pub means: Vec<DVector<f64>>,
    /// Segment models (robust mode only).
    pub models: Vec<SegmentModel>,
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
    /// 1-based labels of the k-means initialization.
    pub initial_labels: Vec<usize>,
}

impl Segmentation {
    /// 1-based class id per pixel.
    pub fn label_ids(&self) -> Vec<usize> {
        self.labels.argmax_labels()
    }

    pub fn iterations(&self) -> usize {
        self.trace.len()
    }
}

fn segment_sizes(u: &LabelField) -> Vec<usize> {
    let mut sizes = vec![0; u.classes()];
    for row in u.rows() {
        sizes[first_argmax(row)] += 1;
    }
    sizes
}

fn update_labeling(
    u: &LabelField,
    f: &IndicatorField,
    cfg: &PipelineConfig,
    dual: &mut DualField,
) -> Result<(LabelField, usize)> {
    if cfg.lambda == 0.0 {
        return Ok((argmin_labeling(f), 0));
    }
    let out = solve_labeling(u, f, &cfg.pdhg(u.height(), u.width()), dual)?;
    Ok((threshold(&out.u), out.iterations))
}

/// Segments a (normalized, optionally MNF-reduced) cube into `cfg.k` classes.
pub fn segment(cube: &HyperCube, cfg: &PipelineConfig) -> Result<Segmentation> {
    cfg.validate()?;
    let km = kmeans(
        cube.data(),
        cube.bands(),
        cfg.k,
        &mut Rng::new(cfg.seed),
        cfg.kmeans_max_iter,
    )?;
    let u0 = labels_to_field(&km.labels, cube.height(), cube.width(), cfg.k)?;
    let mut result = match cfg.indicator_mode {
        IndicatorMode::RobustAnisotropic => segment_robust(cube, u0, cfg)?,
        IndicatorMode::SquaredEuclidean => segment_ms2(cube, u0, cfg)?,
    };
    result.initial_labels = km.labels;
    Ok(result)
}

/// Segments from a given one-hot initial labeling, skipping k-means.
pub fn segment_from(cube: &HyperCube, u0: LabelField, cfg: &PipelineConfig) -> Result<Segmentation> {
    cfg.validate()?;
    if u0.height() != cube.height() || u0.width() != cube.width() || u0.classes() != cfg.k {
        return Err(Error::Shape("initial labeling does not match cube and k".into()));
    }
    let initial_labels = u0.argmax_labels();
    let mut result = match cfg.indicator_mode {
        IndicatorMode::RobustAnisotropic => segment_robust(cube, u0, cfg)?,
        IndicatorMode::SquaredEuclidean => segment_ms2(cube, u0, cfg)?,
    };
    result.initial_labels = initial_labels;
    Ok(result)
}

fn warn_if_collapsed(iteration: usize, sizes: &[usize]) {
    if iteration == 1 && sizes.iter().filter(|&&s| s > 0).count() == 1 {
        log::warn!("all pixels fell into a single segment after the first labeling update");
    }
}

fn segment_robust(cube: &HyperCube, mut u: LabelField, cfg: &PipelineConfig) -> Result<Segmentation> {
    let k = cfg.k;
    let fp = cfg.fixed_point();
    let mut dual = DualField::zeros(u.height(), u.width(), k);

    let mut starts: Vec<(DVector<f64>, DMatrix<f64>)> = (0..k)
        .map(|l| init_segment_stats(cube, &u, l))
        .collect::<Result<_>>()?;
    let mut models: Vec<SegmentModel> = starts
        .iter()
        .map(|(mu, sigma)| SegmentModel::new(mu.clone(), sigma.clone(), cfg.eps))
        .collect::<Result<_>>()?;
    let mut prev_means: Vec<DVector<f64>> = models.iter().map(|m| m.mu.clone()).collect();
    let mut trace = Vec::new();
    let mut converged = false;

    for iteration in 1..=cfg.outer_max {
        // the first fit starts from the empirical statistics of the init
        let fits: Vec<Option<(SegmentModel, usize)>> = (0..k)
            .into_par_iter()
            .map(|l| {
                if u.class_mass(l) == 0.0 {
                    return Ok(None);
                }
                let init = if iteration == 1 { None } else { Some(starts[l].clone()) };
                let fit = fit_segment(cube, &u, l, init, &fp)?;
                Ok(Some((fit.model, fit.iterations)))
            })
            .collect::<Result<_>>()?;
        let mut fit_iterations = vec![0; k];
        for (l, fit) in fits.into_iter().enumerate() {
            // empty segments keep their previous model
            if let Some((model, its)) = fit {
                starts[l] = (model.mu.clone(), model.sigma.clone());
                models[l] = model;
                fit_iterations[l] = its;
            }
        }

        let f = indicator_field(cube, &models, cfg.eta)?;
        let (next, pdhg_iterations) = update_labeling(&u, &f, cfg, &mut dual)?;
        u = next;

        let means: Vec<DVector<f64>> = models.iter().map(|m| m.mu.clone()).collect();
        let change = outer_change(&u, &means, &prev_means);
        prev_means = means;
        let sizes = segment_sizes(&u);
        warn_if_collapsed(iteration, &sizes);
        let energy = objective(&u, &f, cfg.lambda);
        log::debug!("outer {iteration}: E = {energy:.6e}, change = {change:.3e}, sizes = {sizes:?}");
        trace.push(IterationRecord {
            iteration,
            objective: energy,
            segment_sizes: sizes,
            mean_change: Some(change),
            pdhg_iterations,
            fit_iterations,
        });
        if change < cfg.outer_tol {
            converged = true;
            break;
        }
    }

    Ok(Segmentation {
        labels: u,
        means: prev_means,
        models,
        trace,
        converged,
        initial_labels: Vec::new(),
    })
}

fn segment_ms2(cube: &HyperCube, mut u: LabelField, cfg: &PipelineConfig) -> Result<Segmentation> {
    let k = cfg.k;
    let dim = cube.bands();
    let mut dual = DualField::zeros(u.height(), u.width(), k);
    let mut means: Vec<DVector<f64>> = vec![DVector::zeros(dim); k];
    let mut prev_means: Option<Vec<DVector<f64>>> = None;
    let mut trace = Vec::new();
    let mut converged = false;

    for iteration in 1..=cfg.outer_max {
        let labels0: Vec<usize> = u.argmax_labels().into_iter().map(|c| c - 1).collect();
        let (flat, counts) = cluster_means(cube.data(), dim, &labels0, k);
        for l in 0..k {
            // empty segments keep their previous mean
            if counts[l] > 0 {
                means[l] = DVector::from_row_slice(&flat[l * dim..(l + 1) * dim]);
            } else if iteration == 1 {
                return Err(Error::EmptySegment(l));
            }
        }

        let f = indicator_field_ms2(cube, &means)?;
        let (next, pdhg_iterations) = update_labeling(&u, &f, cfg, &mut dual)?;
        u = next;

        // the means of iteration 1 are those of the initialization itself, so
        // the stopping rule is first evaluated in iteration 2
        let change = prev_means.as_ref().map(|prev| outer_change(&u, &means, prev));
        prev_means = Some(means.clone());
        let sizes = segment_sizes(&u);
        warn_if_collapsed(iteration, &sizes);
        trace.push(IterationRecord {
            iteration,
            objective: objective(&u, &f, cfg.lambda),
            segment_sizes: sizes,
            mean_change: change,
            pdhg_iterations,
            fit_iterations: vec![0; k],
        });
        if change.is_some_and(|c| c < cfg.outer_tol) {
            converged = true;
            break;
        }
    }

    Ok(Segmentation {
        labels: u,
        means,
        models: Vec::new(),
        trace,
        converged,
        initial_labels: Vec::new(),
    })
}

/// Normalizes a raw cube, applies MNF when `cfg.mnf_kept` is set, and segments.
pub fn run(raw: &HyperCube, cfg: &PipelineConfig) -> Result<Segmentation> {
    cfg.validate()?;
    let normalized = normalize_cube(raw)?;
    let input = match cfg.mnf_kept {
        Some(kept) => {
            let model = fit_mnf(&normalized, kept)?;
            apply_mnf(&model, &normalized)?
        }
        None => normalized,
    };
    segment(&input, cfg)
}
