//! Dense pixel-grid containers shared by every stage, plus the seeded RNG.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// An `height x width x bands` image stored row-major: row `i` outermost,
/// column `j` next, band innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f64>,
}

impl HyperCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::Shape(format!(
                "cube dimensions must be positive, got {height}x{width}x{bands}"
            )));
        }
        let expected = height * width * bands;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "cube {height}x{width}x{bands} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Result<Self> {
        Self::new(height, width, bands, vec![0.0; height * width * bands])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    /// Number of pixels `H * W`.
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat `N x bands` row-major view of all spectra.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The spectrum at pixel `(i, j)`.
    pub fn pixel_spectrum(&self, i: usize, j: usize) -> Result<&[f64]> {
        if i >= self.height || j >= self.width {
            return Err(Error::IndexOutOfRange {
                i,
                j,
                height: self.height,
                width: self.width,
            });
        }
        Ok(self.spectrum(i * self.width + j))
    }

    /// Spectrum of the pixel with flat index `p = i * W + j`.
    ///
    /// Panics if `p` is out of range.
    #[inline]
    pub fn spectrum(&self, p: usize) -> &[f64] {
        &self.data[p * self.bands..(p + 1) * self.bands]
    }

    pub fn spectra(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.bands)
    }

    pub fn get(&self, i: usize, j: usize, band: usize) -> f64 {
        self.data[(i * self.width + j) * self.bands + band]
    }

    /// Writes one entry. Non-finite values are rejected to keep the cube valid.
    pub fn set(&mut self, i: usize, j: usize, band: usize, value: f64) -> Result<()> {
        if i >= self.height || j >= self.width {
            return Err(Error::IndexOutOfRange {
                i,
                j,
                height: self.height,
                width: self.width,
            });
        }
        if band >= self.bands {
            return Err(Error::Shape(format!(
                "band {band} out of range for {} bands",
                self.bands
            )));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite {
                index: (i * self.width + j) * self.bands + band,
            });
        }
        self.data[(i * self.width + j) * self.bands + band] = value;
        Ok(())
    }
}

/// An `H x W x k` per-pixel class-weight array.
///
/// As a labeling function every pixel row lies on the unit simplex; the same
/// container also carries unconstrained per-class quantities such as the
/// output of the gradient adjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelField {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f64>,
}

impl LabelField {
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || classes == 0 {
            return Err(Error::Shape(format!(
                "field dimensions must be positive, got {height}x{width}x{classes}"
            )));
        }
        if data.len() != height * width * classes {
            return Err(Error::Shape(format!(
                "field {height}x{width}x{classes} needs {} values, got {}",
                height * width * classes,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, classes: usize) -> Self {
        Self {
            height,
            width,
            classes,
            data: vec![0.0; height * width * classes],
        }
    }

    /// Every pixel set to the barycenter `1/k`.
    pub fn uniform(height: usize, width: usize, classes: usize) -> Self {
        Self {
            height,
            width,
            classes,
            data: vec![1.0 / classes as f64; height * width * classes],
        }
    }

    /// One-hot field from 1-based class ids in row-major pixel order.
    pub fn from_labels(
        labels: &[usize],
        height: usize,
        width: usize,
        classes: usize,
    ) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} grid",
                labels.len()
            )));
        }
        let mut field = Self::zeros(height, width, classes);
        for (p, &label) in labels.iter().enumerate() {
            if label == 0 || label > classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            field.data[p * classes + label - 1] = 1.0;
        }
        Ok(field)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.classes..(p + 1) * self.classes]
    }

    #[inline]
    pub fn row_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.classes..(p + 1) * self.classes]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.classes)
    }

    /// Weight of class `l` (0-based) at flat pixel `p`.
    #[inline]
    pub fn weight(&self, p: usize, l: usize) -> f64 {
        self.data[p * self.classes + l]
    }

    /// True when every pixel row is nonnegative and sums to one within `tol`.
    pub fn is_on_simplex(&self, tol: f64) -> bool {
        self.rows().all(|row| {
            row.iter().all(|&v| v >= -tol) && (row.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }

    /// True when every pixel row is a simplex vertex.
    pub fn is_one_hot(&self) -> bool {
        self.rows().all(|row| {
            row.iter().filter(|&&v| v == 1.0).count() == 1
                && row.iter().filter(|&&v| v == 0.0).count() == row.len() - 1
        })
    }

    /// 1-based label per pixel: the smallest index attaining the row maximum.
    pub fn argmax_labels(&self) -> Vec<usize> {
        self.rows().map(|row| first_argmax(row) + 1).collect()
    }

    /// Total weight of class `l` (0-based), i.e. its pixel count for one-hot fields.
    pub fn class_mass(&self, l: usize) -> f64 {
        self.rows().map(|row| row[l]).sum()
    }
}

/// Index of the first maximal entry.
pub(crate) fn first_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (l, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = l;
        }
    }
    best
}

/// Index of the first minimal entry.
pub(crate) fn first_argmin(row: &[f64]) -> usize {
    let mut best = 0;
    for (l, &v) in row.iter().enumerate().skip(1) {
        if v < row[best] {
            best = l;
        }
    }
    best
}

/// Seeded ChaCha8 stream.
///
/// The same seed yields the same sequence on every platform. Independent
/// streams derived with [`Rng::with_stream`] let parallel code draw
/// per-item numbers without depending on scheduling.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng as _, RngCore};
    use super::Rng;

    #[test]
    fn single_pixel_spectrum() {
        let cube = HyperCube::new(1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(cube.pixel_spectrum(0, 0).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn row_major_layout() {
        // [a b; c d]
        let cube = HyperCube::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(cube.pixel_spectrum(1, 0).unwrap(), &[3.0]);
        assert_eq!(cube.pixel_spectrum(0, 1).unwrap(), &[2.0]);
    }

    #[test]
    fn out_of_range_pixel() {
        let cube = HyperCube::zeros(3, 2, 1).unwrap();
        assert!(matches!(
            cube.pixel_spectrum(3, 0),
            Err(Error::IndexOutOfRange { i: 3, .. })
        ));
        assert!(cube.pixel_spectrum(0, 2).is_err());
    }

    #[test]
    fn rejects_nan_and_bad_length() {
        assert!(matches!(
            HyperCube::new(1, 1, 2, vec![0.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(HyperCube::new(1, 2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn one_hot_field_from_labels() {
        let f = LabelField::from_labels(&[2, 1], 1, 2, 3).unwrap();
        assert_eq!(f.row(0), &[0.0, 1.0, 0.0]);
        assert!(f.is_one_hot());
        assert!(f.is_on_simplex(1e-9));
        assert!(LabelField::from_labels(&[0], 1, 1, 3).is_err());
        assert!(LabelField::from_labels(&[4], 1, 1, 3).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        let f = LabelField::new(1, 2, 2, vec![0.5, 0.5, 0.2, 0.8]).unwrap();
        assert_eq!(f.argmax_labels(), vec![1, 2]);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| Rng::new(9).next_u64()).collect();
        assert!(a.iter().all(|&x| x == a[0]));
        let mut s0 = Rng::with_stream(9, 0);
        let mut s1 = Rng::with_stream(9, 1);
        assert_ne!(s0.random::<u64>(), s1.random::<u64>());
    }

    proptest! {
        #[test]
        fn write_then_read_round_trips(
            h in 1usize..5, w in 1usize..5, b in 1usize..4,
            seed in any::<u64>(), value in -1e6f64..1e6,
        ) {
            let mut cube = HyperCube::zeros(h, w, b).unwrap();
            let mut rng = Rng::new(seed);
            let (i, j, band) = (rng.random_range(0..h), rng.random_range(0..w), rng.random_range(0..b));
            cube.set(i, j, band, value).unwrap();
            prop_assert_eq!(cube.get(i, j, band), value);
            prop_assert_eq!(cube.pixel_spectrum(i, j).unwrap()[band], value);
        }
    }
}
