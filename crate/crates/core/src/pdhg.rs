//! Primal-dual hybrid gradient solver for the relaxed labeling problem
//!
//! ```text
//! min_u  Σ ⟨u, f⟩ / λ + Σ_l TV(u_l)   s.t. u(i,j) ∈ simplex
//! ```
//!
//! `A` is the forward-difference gradient with grid step
//! `h = 1 / (max(H, W) − 1)` and zero derivative across the last row/column.
//! Each iteration performs
//!
//! ```text
//! p  ← P_ball(p + σ A ū)
//! u' ← P_simplex(u − τ Aᵀ p − (τ/λ) f)
//! ū  ← u' + θ (u' − u)
//! ```

use rayon::prelude::*;

use crate::cube::LabelField;
use crate::error::{Error, Result};
use crate::indicator::IndicatorField;

/// Grid step for an `height x width` image.
pub fn grid_step(height: usize, width: usize) -> f64 {
    let n = height.max(width);
    if n > 1 {
        1.0 / (n - 1) as f64
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdhgConfig {
    pub tau: f64,
    pub sigma: f64,
    pub theta: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub lambda: f64,
}

impl PdhgConfig {
    /// Defaults for an `height x width` grid: `τ = σ = h / (2√2)`, so that
    /// `τ σ ‖A‖² ≤ 1` with `‖A‖² ≤ 8 / h²`.
    pub fn for_grid(height: usize, width: usize, lambda: f64) -> Self {
        let step = grid_step(height, width) / (2.0 * std::f64::consts::SQRT_2);
        Self {
            tau: step,
            sigma: step,
            theta: 1.0,
            max_iter: 1000,
            tol: 1e-6,
            lambda,
        }
    }

    pub fn validate(&self, h: f64) -> Result<()> {
        if !(self.tau > 0.0) || !(self.sigma > 0.0) {
            return Err(Error::InvalidParameter("tau and sigma must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::InvalidParameter(format!("theta must lie in [0, 1], got {}", self.theta)));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidParameter(format!("lambda must be positive, got {}", self.lambda)));
        }
        // tol = 0 runs exactly max_iter iterations
        if !(self.tol >= 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidParameter("tol must be non-negative and max_iter positive".into()));
        }
        if self.tau * self.sigma * 8.0 / (h * h) > 1.0 + 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "step sizes violate tau*sigma*8/h^2 <= 1 (tau={}, sigma={}, h={h})",
                self.tau, self.sigma
            )));
        }
        Ok(())
    }
}

/// Dual variable: one 2-vector per class per pixel, stored as
/// `[(pixel * k + class) * 2 + direction]`. Direction 0 is along `j`
/// (columns), direction 1 along `i` (rows).
#[derive(Debug, Clone, PartialEq)]
pub struct DualField {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl DualField {
    pub fn zeros(height: usize, width: usize, classes: usize) -> Self {
        Self {
            height,
            width,
            classes,
            data: vec![0.0; height * width * classes * 2],
        }
    }

    fn matches(&self, u: &LabelField) -> bool {
        self.height == u.height() && self.width == u.width() && self.classes == u.classes()
    }

    #[inline]
    pub fn get(&self, p: usize, l: usize) -> [f64; 2] {
        let o = (p * self.classes + l) * 2;
        [self.data[o], self.data[o + 1]]
    }
}

#[inline]
fn forward_diff(u: &[f64], p: usize, l: usize, i: usize, j: usize, w: usize, hgt: usize, k: usize, inv_h: f64) -> [f64; 2] {
    let here = u[p * k + l];
    let dx = if j + 1 < w { (u[(p + 1) * k + l] - here) * inv_h } else { 0.0 };
    let dy = if i + 1 < hgt { (u[(p + w) * k + l] - here) * inv_h } else { 0.0 };
    [dx, dy]
}

#[inline]
fn adjoint_at(p_data: &[f64], p: usize, l: usize, i: usize, j: usize, w: usize, hgt: usize, k: usize, inv_h: f64) -> f64 {
    let at = |q: usize, d: usize| p_data[(q * k + l) * 2 + d];
    let mut v = 0.0;
    if j + 1 < w {
        v -= at(p, 0);
    }
    if j > 0 {
        v += at(p - 1, 0);
    }
    if i + 1 < hgt {
        v -= at(p, 1);
    }
    if i > 0 {
        v += at(p - w, 1);
    }
    v * inv_h
}

/// Forward-difference gradient of every class channel.
pub fn grad(u: &LabelField, h: f64) -> DualField {
    let (hgt, w, k) = (u.height(), u.width(), u.classes());
    let inv_h = 1.0 / h;
    let mut out = DualField::zeros(hgt, w, k);
    out.data
        .par_chunks_mut(2 * k)
        .enumerate()
        .for_each(|(p, chunk)| {
            let (i, j) = (p / w, p % w);
            for l in 0..k {
                let g = forward_diff(u.data(), p, l, i, j, w, hgt, k, inv_h);
                chunk[2 * l] = g[0];
                chunk[2 * l + 1] = g[1];
            }
        });
    out
}

/// Exact transpose of [`grad`]: `⟨grad u, p⟩ = ⟨u, grad_adjoint p⟩`.
pub fn grad_adjoint(p: &DualField, h: f64) -> LabelField {
    let (hgt, w, k) = (p.height, p.width, p.classes);
    let inv_h = 1.0 / h;
    let mut out = LabelField::zeros(hgt, w, k);
    out.data_mut()
        .par_chunks_mut(k)
        .enumerate()
        .for_each(|(q, row)| {
            let (i, j) = (q / w, q % w);
            for (l, v) in row.iter_mut().enumerate() {
                *v = adjoint_at(&p.data, q, l, i, j, w, hgt, k, inv_h);
            }
        });
    out
}

/// Isotropic total variation `Σ_l Σ_(i,j) ‖∇u_l(i,j)‖₂`.
pub fn total_variation(u: &LabelField, h: f64) -> f64 {
    let g = grad(u, h);
    g.data.chunks_exact(2).map(|v| v[0].hypot(v[1])).sum()
}

/// Euclidean projection onto the unit simplex, in place.
///
/// Sort-based: with `s` sorted descending and running sums `c`, the
/// threshold is `θ = (c_ρ − 1) / (ρ + 1)` for the largest `ρ` with
/// `s_ρ − (c_ρ − 1) / (ρ + 1) > 0`.
pub fn project_simplex_in_place(v: &mut [f64], scratch: &mut Vec<f64>) {
    scratch.clear();
    scratch.extend_from_slice(v);
    scratch.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (r, &s) in scratch.iter().enumerate() {
        cumsum += s;
        let t = (cumsum - 1.0) / (r + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    project_simplex_in_place(&mut out, &mut Vec::with_capacity(v.len()));
    out
}

#[inline]
pub fn project_unit_ball(p: [f64; 2]) -> [f64; 2] {
    let n = p[0].hypot(p[1]);
    if n <= 1.0 {
        p
    } else {
        [p[0] / n, p[1] / n]
    }
}

fn check_cost(u: &LabelField, f: &IndicatorField) -> Result<()> {
    if f.height != u.height() || f.width != u.width() || f.classes != u.classes() {
        return Err(Error::Shape(format!(
            "indicator field {}x{}x{} does not match labeling {}x{}x{}",
            f.height,
            f.width,
            f.classes,
            u.height(),
            u.width(),
            u.classes()
        )));
    }
    Ok(())
}

/// `P_simplex(u − (τ/λ) f)` per pixel.
pub fn prox_data(u: &LabelField, f: &IndicatorField, tau: f64, lambda: f64) -> Result<LabelField> {
    check_cost(u, f)?;
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda}")));
    }
    let k = u.classes();
    let step = tau / lambda;
    let mut out = u.clone();
    out.data_mut()
        .par_chunks_mut(k)
        .zip(f.data.par_chunks(k))
        .for_each_init(
            || Vec::with_capacity(k),
            |scratch, (row, cost)| {
                for (x, c) in row.iter_mut().zip(cost) {
                    *x -= step * c;
                }
                project_simplex_in_place(row, scratch);
            },
        );
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PdhgOutcome {
    pub u: LabelField,
    pub iterations: usize,
    pub converged: bool,
    /// `‖u⁽ᵐ⁺¹⁾ − u⁽ᵐ⁾‖_∞` at the last iteration.
    pub last_change: f64,
}

pub fn solve_labeling(
    u0: &LabelField,
    f: &IndicatorField,
    cfg: &PdhgConfig,
    dual: &mut DualField,
) -> Result<PdhgOutcome> {
    solve_labeling_observed(u0, f, cfg, dual, |_, _, _| {})
}

/// As [`solve_labeling`], calling `observe(m, u, p)` after every iteration.
///
/// `dual` is read as the starting point and left holding the final dual
/// iterate, so it can warm-start the next call.
pub fn solve_labeling_observed(
    u0: &LabelField,
    f: &IndicatorField,
    cfg: &PdhgConfig,
    dual: &mut DualField,
    mut observe: impl FnMut(usize, &LabelField, &DualField),
) -> Result<PdhgOutcome> {
    check_cost(u0, f)?;
    if !dual.matches(u0) {
        return Err(Error::Shape("dual field does not match the labeling".into()));
    }
    let (hgt, w, k) = (u0.height(), u0.width(), u0.classes());
    let h = grid_step(hgt, w);
    cfg.validate(h)?;
    let inv_h = 1.0 / h;
    let step = cfg.tau / cfg.lambda;

    let mut u = u0.clone();
    let mut u_bar = u0.clone();
    let mut u_next = u0.clone();
    let mut last_change = f64::INFINITY;

    for m in 1..=cfg.max_iter {
        // dual ascent
        let ub = u_bar.data();
        dual.data
            .par_chunks_mut(2 * k)
            .enumerate()
            .for_each(|(p, chunk)| {
                let (i, j) = (p / w, p % w);
                for l in 0..k {
                    let g = forward_diff(ub, p, l, i, j, w, hgt, k, inv_h);
                    let q = project_unit_ball([
                        chunk[2 * l] + cfg.sigma * g[0],
                        chunk[2 * l + 1] + cfg.sigma * g[1],
                    ]);
                    chunk[2 * l] = q[0];
                    chunk[2 * l + 1] = q[1];
                }
            });

        // primal descent
        let pd = &dual.data;
        let uc = u.data();
        u_next
            .data_mut()
            .par_chunks_mut(k)
            .enumerate()
            .for_each_init(
                || Vec::with_capacity(k),
                |scratch, (p, row)| {
                    let (i, j) = (p / w, p % w);
                    let cost = f.row(p);
                    for l in 0..k {
                        let at = adjoint_at(pd, p, l, i, j, w, hgt, k, inv_h);
                        row[l] = uc[p * k + l] - cfg.tau * at - step * cost[l];
                    }
                    project_simplex_in_place(row, scratch);
                },
            );

        // extrapolation
        let mut change: f64 = 0.0;
        for ((b, &new), &old) in u_bar
            .data_mut()
            .iter_mut()
            .zip(u_next.data())
            .zip(u.data())
        {
            *b = new + cfg.theta * (new - old);
            change = change.max((new - old).abs());
        }
        std::mem::swap(&mut u, &mut u_next);
        last_change = change;
        observe(m, &u, dual);
        if change < cfg.tol {
            return Ok(PdhgOutcome {
                u,
                iterations: m,
                converged: true,
                last_change,
            });
        }
    }
    Ok(PdhgOutcome {
        u,
        iterations: cfg.max_iter,
        converged: false,
        last_change,
    })
}

/// `Σ ⟨u, f⟩ / λ + TV(u)`, the convex energy [`solve_labeling`] minimizes.
pub fn relaxed_energy(u: &LabelField, f: &IndicatorField, lambda: f64) -> f64 {
    let data: f64 = u.data().iter().zip(&f.data).map(|(a, b)| a * b).sum();
    data / lambda + total_variation(u, grid_step(u.height(), u.width()))
}
