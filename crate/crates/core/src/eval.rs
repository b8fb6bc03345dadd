//! Scoring a segmentation against ground truth.
//!
//! Predicted segment ids are arbitrary, so predictions are first relabeled
//! with the assignment that maximizes the confusion-matrix diagonal
//! (Hungarian method). Overall accuracy, average per-class accuracy and
//! Cohen's kappa are then read off the matched matrix.

use crate::error::{Error, Result};
use crate::io::GroundTruth;

/// Dense row-major count matrix; rows are ground-truth classes, columns
/// predicted classes (both 0-based here, i.e. id − 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub rows: usize,
    pub cols: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            counts: vec![0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix");
        Self {
            rows: rows.len(),
            cols,
            counts: rows.concat(),
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u64 {
        self.counts[r * self.cols + c]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Columns reordered so that predicted class `c` lands in column
    /// `permutation[c]`. The result is square with side
    /// `max(rows, cols)`.
    pub fn permuted(&self, permutation: &[usize]) -> Self {
        let n = self.rows.max(self.cols);
        let mut out = Self::zeros(n, n);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.counts[r * n + permutation[c]] += self.get(r, c);
            }
        }
        out
    }
}

/// Counts `(gt − 1, pred − 1)` pairs over labeled pixels.
///
/// Ground-truth id 0 is unlabeled and skipped. Ids in both rasters must lie
/// in `1..=k` (predictions may not use 0).
pub fn confusion_matrix(pred: &[u16], gt: &GroundTruth, k: usize) -> Result<ConfusionMatrix> {
    if pred.len() != gt.labels.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.labels.len()
        )));
    }
    let mut m = ConfusionMatrix::zeros(k, k);
    for (&p, &g) in pred.iter().zip(&gt.labels) {
        if g == 0 {
            continue;
        }
        if g as usize > k {
            return Err(Error::LabelOutOfRange { label: g as usize, classes: k });
        }
        if p == 0 || p as usize > k {
            return Err(Error::LabelOutOfRange { label: p as usize, classes: k });
        }
        m.counts[(g as usize - 1) * k + p as usize - 1] += 1;
    }
    Ok(m)
}

/// Minimum-cost perfect assignment on a square cost matrix; returns
/// `assignment[row] = col`. O(n³) shortest augmenting paths with potentials.
fn min_cost_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    const INF: i64 = i64::MAX / 4;
    // 1-based internally, index 0 is a virtual column
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            assignment[row_of[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Relabeling of predicted classes that maximizes the matched diagonal.
///
/// Returns `permutation[pred] = gt` of length `max(rows, cols)`; a
/// rectangular matrix is padded with zeros first.
pub fn hungarian_match(confusion: &ConfusionMatrix) -> Vec<usize> {
    let n = confusion.rows.max(confusion.cols);
    if n == 0 {
        return Vec::new();
    }
    let max = confusion.counts.iter().copied().max().unwrap_or(0) as i64;
    // cost[pred][gt]
    let cost: Vec<Vec<i64>> = (0..n)
        .map(|c| {
            (0..n)
                .map(|r| {
                    let count = if r < confusion.rows && c < confusion.cols {
                        confusion.get(r, c) as i64
                    } else {
                        0
                    };
                    max - count
                })
                .collect()
        })
        .collect();
    min_cost_assignment(&cost)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

/// OA, AA and Cohen's kappa after applying `permutation`.
///
/// AA averages over ground-truth classes that occur; absent classes are
/// left out rather than counted as zero.
pub fn scores(confusion: &ConfusionMatrix, permutation: &[usize]) -> Result<Scores> {
    let m = confusion.permuted(permutation);
    let total = m.total();
    if total == 0 {
        return Err(Error::Degenerate("no labeled pixels to score".into()));
    }
    let n = m.rows;
    let t = total as f64;
    let oa = m.trace() as f64 / t;

    let mut class_acc = Vec::new();
    let mut chance = 0.0;
    for c in 0..n {
        let row: u64 = (0..n).map(|j| m.get(c, j)).sum();
        let col: u64 = (0..n).map(|i| m.get(i, c)).sum();
        if row > 0 {
            class_acc.push(m.get(c, c) as f64 / row as f64);
        }
        chance += row as f64 * col as f64;
    }
    let aa = class_acc.iter().sum::<f64>() / class_acc.len() as f64;
    let pe = chance / (t * t);
    let kappa = if pe < 1.0 { (oa - pe) / (1.0 - pe) } else if oa == 1.0 { 1.0 } else { 0.0 };
    Ok(Scores { oa, aa, kappa })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    /// `permutation[pred − 1] = gt − 1`.
    pub permutation: Vec<usize>,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

pub fn evaluate(pred: &[u16], gt: &GroundTruth, k: usize) -> Result<EvalReport> {
    let confusion = confusion_matrix(pred, gt, k)?;
    let permutation = hungarian_match(&confusion);
    let s = scores(&confusion, &permutation)?;
    Ok(EvalReport {
        confusion,
        permutation,
        oa: s.oa,
        aa: s.aa,
        kappa: s.kappa,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gt(h: usize, w: usize, labels: Vec<u16>) -> GroundTruth {
        GroundTruth::new(h, w, labels).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let g = gt(2, 2, vec![1, 2, 2, 1]);
        let m = confusion_matrix(&[1, 2, 2, 1], &g, 2).unwrap();
        assert_eq!(m.counts, vec![2, 0, 0, 2]);
        assert_eq!(m.trace(), 4);

        let blank = gt(2, 2, vec![0; 4]);
        assert_eq!(confusion_matrix(&[1, 2, 2, 1], &blank, 2).unwrap().total(), 0);

        let m = confusion_matrix(&[1, 2, 1, 1], &g, 2).unwrap();
        assert_eq!(m.counts, vec![2, 0, 1, 1]);

        assert!(confusion_matrix(&[1, 3, 1, 1], &g, 2).is_err());
        assert!(confusion_matrix(&[1, 0, 1, 1], &g, 2).is_err());
        assert!(confusion_matrix(&[1, 1], &g, 2).is_err());
    }

    #[test]
    fn matching_examples() {
        let diag = ConfusionMatrix::from_rows(&[vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 7]]);
        assert_eq!(hungarian_match(&diag), vec![0, 1, 2]);
        let anti = ConfusionMatrix::from_rows(&[vec![0, 0, 5], vec![0, 3, 1], vec![7, 0, 0]]);
        assert_eq!(hungarian_match(&anti), vec![2, 1, 0]);
        // rectangular: 2 gt classes, 3 predicted
        let rect = ConfusionMatrix::from_rows(&[vec![0, 1, 9], vec![4, 0, 0]]);
        let p = hungarian_match(&rect);
        assert_eq!(p.len(), 3);
        assert_eq!((p[2], p[0]), (0, 1));
    }

    #[test]
    fn score_examples() {
        let perfect = ConfusionMatrix::from_rows(&[vec![3, 0], vec![0, 5]]);
        let s = scores(&perfect, &[0, 1]).unwrap();
        assert_eq!((s.oa, s.aa, s.kappa), (1.0, 1.0, 1.0));

        let chance = ConfusionMatrix::from_rows(&[vec![50, 0], vec![50, 0]]);
        let s = scores(&chance, &[0, 1]).unwrap();
        assert_eq!(s.oa, 0.5);
        assert!(s.kappa.abs() < 1e-15);

        let m = ConfusionMatrix::from_rows(&[vec![40, 10], vec![20, 30]]);
        let s = scores(&m, &[0, 1]).unwrap();
        assert!((s.oa - 0.7).abs() < 1e-15);
        assert!((s.aa - 0.7).abs() < 1e-15);
        assert!((s.kappa - 0.4).abs() < 1e-12);

        assert!(scores(&ConfusionMatrix::zeros(2, 2), &[0, 1]).is_err());
    }

    #[test]
    fn absent_classes_do_not_count_in_aa() {
        let m = ConfusionMatrix::from_rows(&[vec![4, 0, 0], vec![0, 0, 0], vec![1, 0, 3]]);
        let s = scores(&m, &[0, 1, 2]).unwrap();
        assert!((s.aa - (1.0 + 0.75) / 2.0).abs() < 1e-15);
    }

    fn brute_force_best(m: &ConfusionMatrix) -> u64 {
        fn go(m: &ConfusionMatrix, col: usize, used: &mut Vec<bool>, acc: u64, best: &mut u64) {
            if col == m.cols {
                *best = (*best).max(acc);
                return;
            }
            for r in 0..m.rows {
                if !used[r] {
                    used[r] = true;
                    go(m, col + 1, used, acc + m.get(r, col), best);
                    used[r] = false;
                }
            }
        }
        let mut best = 0;
        go(m, 0, &mut vec![false; m.rows], 0, &mut best);
        best
    }

    fn optimal_matchings(m: &ConfusionMatrix) -> usize {
        fn go(m: &ConfusionMatrix, col: usize, used: &mut Vec<bool>, acc: u64, best: u64) -> usize {
            if col == m.cols {
                return usize::from(acc == best);
            }
            let mut count = 0;
            for r in 0..m.rows {
                if !used[r] {
                    used[r] = true;
                    count += go(m, col + 1, used, acc + m.get(r, col), best);
                    used[r] = false;
                }
            }
            count
        }
        go(m, 0, &mut vec![false; m.rows], 0, brute_force_best(m))
    }

    #[test]
    fn kappa_is_one_only_for_diagonal() {
        let diag = ConfusionMatrix::from_rows(&[vec![3, 0], vec![0, 2]]);
        assert!((scores(&diag, &[0, 1]).unwrap().kappa - 1.0).abs() < 1e-15);
        let off = ConfusionMatrix::from_rows(&[vec![3, 1], vec![0, 2]]);
        assert!(scores(&off, &[0, 1]).unwrap().kappa < 1.0);
    }

    proptest! {
        #[test]
        fn matching_equals_brute_force(n in 1usize..=6, values in proptest::collection::vec(0u64..50, 36)) {
            let m = ConfusionMatrix { rows: n, cols: n, counts: values[..n * n].to_vec() };
            let perm = hungarian_match(&m);
            let mut seen = perm.clone();
            seen.sort();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            prop_assert_eq!(m.permuted(&perm).trace(), brute_force_best(&m));
        }

        // With tied optimal matchings AA and kappa depend on which optimum is
        // picked, so those are compared only when the optimum is unique.
        #[test]
        fn relabeling_predictions_changes_nothing(
            labels in proptest::collection::vec((1u16..=4, 1u16..=4), 30),
            shift in 1usize..4,
        ) {
            let (g, p): (Vec<u16>, Vec<u16>) = labels.into_iter().unzip();
            let truth = gt(5, 6, g);
            let relabeled: Vec<u16> = p.iter().map(|&x| ((x as usize - 1 + shift) % 4 + 1) as u16).collect();
            let a = evaluate(&p, &truth, 4).unwrap();
            let b = evaluate(&relabeled, &truth, 4).unwrap();
            prop_assert!((a.oa - b.oa).abs() < 1e-12);
            if optimal_matchings(&a.confusion) == 1 {
                prop_assert!((a.aa - b.aa).abs() < 1e-12);
                prop_assert!((a.kappa - b.kappa).abs() < 1e-12);
            }
            prop_assert!(a.kappa <= a.oa + 1e-12);
            prop_assert!(a.oa >= a.confusion.trace() as f64 / a.confusion.total() as f64 - 1e-12);
        }
    }
}
