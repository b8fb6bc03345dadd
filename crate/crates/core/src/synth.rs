//! Seeded synthetic cubes: rectangular regions, one Gaussian per region.
//!
//! Each pixel draws from its own ChaCha stream (stream id = pixel index), so
//! the output does not depend on how the work is split across threads.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::{HyperCube, Rng};
use crate::error::{Error, Result};
use crate::io::GroundTruth;
use crate::linalg::{sorted_symmetric_eigen, symmetrize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.top && i < self.top + self.height && j >= self.left && j < self.left + self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub mean: Vec<f64>,
    /// Row-major `bands × bands`.
    pub covariance: Vec<Vec<f64>>,
    pub region: Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub clusters: Vec<ClusterSpec>,
    /// Additive white noise, in dB relative to the mean per-band variance of
    /// the noiseless cube.
    #[serde(default)]
    pub noise_snr: Option<f64>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn bands(&self) -> usize {
        self.clusters.first().map_or(0, |c| c.mean.len())
    }

    /// 1-based cluster id of every pixel; errors unless the regions tile the
    /// grid exactly.
    pub fn region_map(&self) -> Result<Vec<u16>> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Shape("synthetic grid must be non-empty".into()));
        }
        if self.clusters.is_empty() || self.clusters.len() > u16::MAX as usize {
            return Err(Error::InvalidParameter(format!(
                "need between 1 and {} clusters, got {}",
                u16::MAX,
                self.clusters.len()
            )));
        }
        let mut map = vec![0u16; self.height * self.width];
        for (c, cluster) in self.clusters.iter().enumerate() {
            let r = cluster.region;
            if r.height == 0 || r.width == 0 || r.top + r.height > self.height || r.left + r.width > self.width {
                return Err(Error::InvalidParameter(format!(
                    "region of cluster {} does not fit the {}x{} grid",
                    c + 1,
                    self.height,
                    self.width
                )));
            }
            for i in r.top..r.top + r.height {
                for j in r.left..r.left + r.width {
                    let slot = &mut map[i * self.width + j];
                    if *slot != 0 {
                        return Err(Error::InvalidParameter(format!(
                            "regions of clusters {} and {} overlap at ({i}, {j})",
                            *slot,
                            c + 1
                        )));
                    }
                    *slot = (c + 1) as u16;
                }
            }
        }
        if let Some(p) = map.iter().position(|&id| id == 0) {
            return Err(Error::InvalidParameter(format!(
                "pixel ({}, {}) is not covered by any region",
                p / self.width,
                p % self.width
            )));
        }
        Ok(map)
    }
}

/// `A` with `A Aᵀ = Σ`; rejects asymmetric or indefinite input.
fn sampling_factor(cluster: usize, cov: &[Vec<f64>], bands: usize) -> Result<DMatrix<f64>> {
    if cov.len() != bands || cov.iter().any(|r| r.len() != bands) {
        return Err(Error::Shape(format!(
            "covariance of cluster {cluster} must be {bands}x{bands}"
        )));
    }
    let m = DMatrix::from_fn(bands, bands, |r, c| cov[r][c]);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("covariance of cluster {cluster} is not finite")));
    }
    let scale = m.amax().max(1.0);
    if (&m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::InvalidParameter(format!("covariance of cluster {cluster} is not symmetric")));
    }
    let eig = sorted_symmetric_eigen(&symmetrize(&m))?;
    let min = eig.values.min();
    if min < -1e-10 * scale {
        return Err(Error::InvalidParameter(format!(
            "covariance of cluster {cluster} is not positive semidefinite (eigenvalue {min:e})"
        )));
    }
    let roots = eig.values.map(|v| v.max(0.0).sqrt());
    Ok(eig.vectors * DMatrix::from_diagonal(&roots))
}

pub fn generate(spec: &SynthSpec) -> Result<(HyperCube, GroundTruth)> {
    let map = spec.region_map()?;
    let bands = spec.bands();
    if bands == 0 {
        return Err(Error::Shape("cluster means must have at least one band".into()));
    }
    let mut factors = Vec::with_capacity(spec.clusters.len());
    let mut means = Vec::with_capacity(spec.clusters.len());
    for (c, cluster) in spec.clusters.iter().enumerate() {
        if cluster.mean.len() != bands {
            return Err(Error::Shape(format!(
                "mean of cluster {} has {} bands, expected {bands}",
                c + 1,
                cluster.mean.len()
            )));
        }
        if cluster.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("mean of cluster {} is not finite", c + 1)));
        }
        factors.push(sampling_factor(c + 1, &cluster.covariance, bands)?);
        means.push(DVector::from_column_slice(&cluster.mean));
    }
    if let Some(snr) = spec.noise_snr {
        if !snr.is_finite() {
            return Err(Error::InvalidParameter("noise_snr must be finite".into()));
        }
    }

    let n = map.len();
    let mut data = vec![0.0; n * bands];
    let mut noise = spec.noise_snr.map(|_| vec![0.0; n * bands]);
    let draw = |p: usize, out: &mut [f64], noise_out: Option<&mut [f64]>| {
        let mut rng = Rng::with_stream(spec.seed, p as u64);
        let c = map[p] as usize - 1;
        let z = DVector::from_fn(bands, |_, _| StandardNormal.sample(&mut rng));
        let x = &means[c] + &factors[c] * z;
        out.copy_from_slice(x.as_slice());
        if let Some(e) = noise_out {
            for v in e.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
        }
    };
    match noise.as_mut() {
        Some(noise) => data
            .par_chunks_mut(bands)
            .zip(noise.par_chunks_mut(bands))
            .enumerate()
            .for_each(|(p, (out, e))| draw(p, out, Some(e))),
        None => data
            .par_chunks_mut(bands)
            .enumerate()
            .for_each(|(p, out)| draw(p, out, None)),
    }

    if let (Some(snr), Some(noise)) = (spec.noise_snr, noise) {
        let signal_var = mean_band_variance(&data, bands);
        let sd = (signal_var / 10f64.powf(snr / 10.0)).sqrt();
        for (x, e) in data.iter_mut().zip(noise) {
            *x += sd * e;
        }
    }

    let cube = HyperCube::new(spec.height, spec.width, bands, data)?;
    let gt = GroundTruth::new(spec.height, spec.width, map)?;
    Ok((cube, gt))
}

fn mean_band_variance(data: &[f64], bands: usize) -> f64 {
    let n = (data.len() / bands) as f64;
    let mut total = 0.0;
    for b in 0..bands {
        let mean = data.iter().skip(b).step_by(bands).sum::<f64>() / n;
        total += data.iter().skip(b).step_by(bands).map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    }
    total / bands as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(top: usize, left: usize, height: usize, width: usize) -> Region {
        Region { top, left, height, width }
    }

    fn halves(h: usize, w: usize, cov_a: Vec<Vec<f64>>, cov_b: Vec<Vec<f64>>) -> SynthSpec {
        SynthSpec {
            height: h,
            width: w,
            clusters: vec![
                ClusterSpec { mean: vec![0.0, 1.0], covariance: cov_a, region: region(0, 0, h, w / 2) },
                ClusterSpec { mean: vec![2.0, -1.0], covariance: cov_b, region: region(0, w / 2, h, w - w / 2) },
            ],
            noise_snr: None,
            seed: 7,
        }
    }

    fn zeros2() -> Vec<Vec<f64>> {
        vec![vec![0.0; 2]; 2]
    }

    #[test]
    fn zero_covariance_is_piecewise_constant() {
        let (cube, gt) = generate(&halves(3, 4, zeros2(), zeros2())).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let expected: &[f64] = if j < 2 { &[0.0, 1.0] } else { &[2.0, -1.0] };
                assert_eq!(cube.pixel_spectrum(i, j).unwrap(), expected);
                assert_eq!(gt.labels[i * 4 + j], if j < 2 { 1 } else { 2 });
            }
        }
    }

    #[test]
    fn single_region_gives_constant_truth() {
        let spec = SynthSpec {
            height: 4,
            width: 5,
            clusters: vec![ClusterSpec {
                mean: vec![1.0],
                covariance: vec![vec![0.5]],
                region: region(0, 0, 4, 5),
            }],
            noise_snr: None,
            seed: 1,
        };
        let (_, gt) = generate(&spec).unwrap();
        assert!(gt.labels.iter().all(|&l| l == 1));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad_cov = halves(2, 2, vec![vec![1.0, 0.0], vec![0.0, -1.0]], zeros2());
        assert!(matches!(generate(&bad_cov), Err(Error::InvalidParameter(_))));
        let asym = halves(2, 2, vec![vec![1.0, 0.5], vec![0.0, 1.0]], zeros2());
        assert!(generate(&asym).is_err());

        let mut gap = halves(2, 4, zeros2(), zeros2());
        gap.clusters[1].region.width = 1;
        assert!(generate(&gap).is_err());
        let mut overlap = halves(2, 4, zeros2(), zeros2());
        overlap.clusters[1].region.left = 1;
        assert!(generate(&overlap).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        let spec = halves(8, 8, vec![vec![1.0, 0.3], vec![0.3, 0.5]], vec![vec![0.2, 0.0], vec![0.0, 0.2]]);
        let (a, _) = generate(&spec).unwrap();
        let (b, _) = generate(&spec).unwrap();
        assert_eq!(a, b);
        let mut other = spec.clone();
        other.seed += 1;
        assert_ne!(generate(&other).unwrap().0, a);
    }

    fn moments(cube: &HyperCube) -> (DVector<f64>, DMatrix<f64>) {
        let n = cube.len() as f64;
        let d = cube.bands();
        let mut mean = DVector::zeros(d);
        for s in cube.spectra() {
            mean += DVector::from_column_slice(s);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(d, d);
        for s in cube.spectra() {
            let c = DVector::from_column_slice(s) - &mean;
            cov += &c * c.transpose();
        }
        (mean, cov / (n - 1.0))
    }

    fn single(side: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            height: side,
            width: side,
            clusters: vec![ClusterSpec {
                mean: vec![1.0, -2.0, 0.5],
                covariance: vec![vec![2.0, 0.6, 0.0], vec![0.6, 1.0, -0.3], vec![0.0, -0.3, 0.5]],
                region: region(0, 0, side, side),
            }],
            noise_snr: None,
            seed,
        }
    }

    #[test]
    fn sample_moments_match_within_five_percent() {
        let spec = single(100, 3);
        let (cube, _) = generate(&spec).unwrap();
        let (mean, cov) = moments(&cube);
        let true_cov = DMatrix::from_fn(3, 3, |r, c| spec.clusters[0].covariance[r][c]);
        let true_mean = DVector::from_column_slice(&spec.clusters[0].mean);
        assert!((&mean - &true_mean).norm() < 0.05 * true_mean.norm());
        assert!((&cov - &true_cov).norm() < 0.05 * true_cov.norm());
    }

    #[test]
    fn moment_error_shrinks_like_inverse_root_n() {
        // average over seeds so a single lucky draw cannot decide the ratio
        let err = |side: usize| {
            (0..8)
                .map(|s| {
                    let spec = single(side, 100 + s);
                    let (cube, _) = generate(&spec).unwrap();
                    let (mean, _) = moments(&cube);
                    (mean - DVector::from_column_slice(&spec.clusters[0].mean)).norm()
                })
                .sum::<f64>()
                / 8.0
        };
        // 16x more pixels: the error should drop by about 4
        let ratio = err(20) / err(80);
        assert!(ratio > 2.5 && ratio < 6.5, "ratio {ratio}");
    }

    #[test]
    fn noise_level_follows_snr() {
        let mut spec = halves(40, 40, zeros2(), zeros2());
        let (clean, _) = generate(&spec).unwrap();
        spec.noise_snr = Some(20.0);
        let (noisy, _) = generate(&spec).unwrap();
        let signal = mean_band_variance(clean.data(), 2);
        let diff: Vec<f64> = noisy.data().iter().zip(clean.data()).map(|(a, b)| a - b).collect();
        let noise = mean_band_variance(&diff, 2);
        let snr = 10.0 * (signal / noise).log10();
        assert!((snr - 20.0).abs() < 0.5, "snr {snr}");
    }
}
