//! KMeans with SSE-selected restarts, and external clustering metrics.

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Matrix, Result};

pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub labels: Vec<usize>,
    /// Sum of squared distances from each point to its assigned centroid.
    pub sse: f64,
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign(points: &Matrix, centroids: &Matrix) -> (Vec<usize>, f64) {
    let mut sse = 0.0;
    let labels = points
        .rows()
        .into_iter()
        .map(|p| {
            let (best, d) = centroids
                .rows()
                .into_iter()
                .enumerate()
                .map(|(j, c)| (j, sq_dist(p, c)))
                .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            sse += d;
            best
        })
        .collect();
    (labels, sse)
}

/// k-means++ seeding: first centre uniform, then proportional to squared
/// distance from the nearest chosen centre.
fn seed_plus_plus<R: Rng>(points: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    centroids.row_mut(0).assign(&points.row(rng.random_range(0..n)));
    let mut nearest: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|p| sq_dist(p, centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, centroids.row(c)));
        }
    }
    centroids
}

/// One seeded Lloyd run. Returns the result and the SSE after every
/// assignment step.
pub(crate) fn lloyd<R: Rng>(points: &Matrix, k: usize, rng: &mut R) -> (KMeansResult, Vec<f64>) {
    let mut centroids = seed_plus_plus(points, k, rng);
    let mut trace = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        let (labels, sse) = assign(points, &centroids);
        trace.push(sse);

        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (p, &l) in points.rows().into_iter().zip(&labels) {
            let mut row = sums.row_mut(l);
            row += &p;
            counts[l] += 1;
        }
        let mut next = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                next.row_mut(j).assign(&(&sums.row(j) / counts[j] as f64));
            }
        }
        // Empty clusters move to the point farthest from its own centroid.
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let far = points
                .rows()
                .into_iter()
                .zip(&labels)
                .map(|(p, &l)| sq_dist(p, next.row(l)))
                .enumerate()
                .fold((0, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc })
                .0;
            next.row_mut(j).assign(&points.row(far));
        }

        let shift = centroids
            .rows()
            .into_iter()
            .zip(next.rows())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < KMEANS_TOL {
            break;
        }
    }
    let (labels, sse) = assign(points, &centroids);
    trace.push(sse);
    (
        KMeansResult {
            centroids,
            labels,
            sse,
        },
        trace,
    )
}

/// Best-of-`restarts` KMeans by SSE; ties keep the earliest restart.
pub fn kmeans(points: &Matrix, k: usize, restarts: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::Config(format!("kmeans needs 1 <= k <= n, got k={k}, n={n}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kmeans input".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let (run, _) = lloyd(points, k, &mut rng);
        if best.as_ref().is_none_or(|b| run.sse < b.sse) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Minimum-cost perfect assignment on a square cost matrix.
///
/// Returns `assignment[row] = column`.
pub fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "hungarian needs a square matrix");
    // 1-indexed potentials formulation; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=n {
                if !used[col] {
                    let cur = cost[[r0 - 1, col - 1]] - u[r0] - v[col];
                    if cur < minv[col] {
                        minv[col] = cur;
                        way[col] = col0;
                    }
                    if minv[col] < delta {
                        delta = minv[col];
                        col1 = col;
                    }
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for col in 1..=n {
        if owner[col] > 0 {
            assignment[owner[col] - 1] = col - 1;
        }
    }
    assignment
}

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::dim(
            "metric",
            format!("{} predictions for {} labels", pred.len(), truth.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::dim("metric", "empty label vectors"));
    }
    Ok(())
}

fn contingency(pred: &[usize], truth: &[usize]) -> Array2<f64> {
    let kp = pred.iter().max().map_or(0, |m| m + 1);
    let kt = truth.iter().max().map_or(0, |m| m + 1);
    let mut c = Array2::zeros((kp, kt));
    for (&p, &t) in pred.iter().zip(truth) {
        c[[p, t]] += 1.0;
    }
    c
}

/// Mapping from predicted label to true label maximising agreement.
///
/// Predicted ids that never occur map to `usize::MAX`; clusters left over
/// when there are more clusters than classes map to ids `>=` the class count.
/// Clusters are matched in an order fixed by their confusion rows, so
/// renaming predicted ids never changes which classes they receive.
pub fn best_label_map(pred: &[usize], truth: &[usize]) -> Result<Vec<usize>> {
    check_lengths(pred, truth)?;
    let c = contingency(pred, truth);
    let key = |i: usize| -> Vec<u64> { c.row(i).iter().map(|&v| v as u64).collect() };
    let mut used: Vec<usize> = (0..c.nrows()).filter(|&i| c.row(i).sum() > 0.0).collect();
    used.sort_by_cached_key(|&i| key(i));
    let k = used.len().max(c.ncols());
    let mut cost = Array2::zeros((k, k));
    for (r, &i) in used.iter().enumerate() {
        for j in 0..c.ncols() {
            cost[[r, j]] = -c[[i, j]];
        }
    }
    let assignment = hungarian(&cost);
    let mut map = vec![usize::MAX; c.nrows()];
    for (r, &i) in used.iter().enumerate() {
        map[i] = assignment[r];
    }
    Ok(map)
}

/// Clustering accuracy under the best one-to-one label matching.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let map = best_label_map(pred, truth)?;
    let hits = pred
        .iter()
        .zip(truth)
        .filter(|(&p, &t)| map[p] == t)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NmiNormalization {
    #[default]
    Geometric,
    Arithmetic,
}

fn entropy(counts: impl Iterator<Item = f64>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0.0)
        .map(|c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    nmi_with(pred, truth, NmiNormalization::Geometric)
}

pub fn nmi_with(pred: &[usize], truth: &[usize], norm: NmiNormalization) -> Result<f64> {
    check_lengths(pred, truth)?;
    let c = contingency(pred, truth);
    let n = pred.len() as f64;
    let rows = c.sum_axis(ndarray::Axis(1));
    let cols = c.sum_axis(ndarray::Axis(0));
    let hp = entropy(rows.iter().copied(), n);
    let ht = entropy(cols.iter().copied(), n);
    if hp == 0.0 && ht == 0.0 {
        return Ok(1.0);
    }
    if hp == 0.0 || ht == 0.0 {
        return Ok(0.0);
    }
    // A one-to-one contingency table is a relabeling; skip the rounding in the logs.
    let occupied = c.iter().filter(|&&v| v > 0.0).count();
    let nonzero = |s: &ndarray::Array1<f64>| s.iter().filter(|&&v| v > 0.0).count();
    if occupied == nonzero(&rows) && occupied == nonzero(&cols) {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for ((i, j), &nij) in c.indexed_iter() {
        if nij > 0.0 {
            mi += nij / n * (n * nij / (rows[i] * cols[j])).ln();
        }
    }
    let denom = match norm {
        NmiNormalization::Geometric => (hp * ht).sqrt(),
        NmiNormalization::Arithmetic => 0.5 * (hp + ht),
    };
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn pairs(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let c = contingency(pred, truth);
    let index: f64 = c.iter().map(|&v| pairs(v)).sum();
    let a: f64 = c.sum_axis(ndarray::Axis(1)).iter().map(|&v| pairs(v)).sum();
    let b: f64 = c.sum_axis(ndarray::Axis(0)).iter().map(|&v| pairs(v)).sum();
    let total = pairs(pred.len() as f64);
    let expected = if total > 0.0 { a * b / total } else { 0.0 };
    let max = 0.5 * (a + b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Macro F1 over the true classes after best label matching.
pub fn f1_macro(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let map = best_label_map(pred, truth)?;
    let k = truth.iter().max().map_or(0, |m| m + 1);
    let mut tp = vec![0.0; k];
    let mut fp = vec![0.0; k];
    let mut fn_ = vec![0.0; k];
    for (&p, &t) in pred.iter().zip(truth) {
        let mapped = map[p];
        if mapped == t {
            tp[t] += 1.0;
        } else {
            fn_[t] += 1.0;
            if mapped < k {
                fp[mapped] += 1.0;
            }
        }
    }
    let present: Vec<usize> = (0..k).filter(|&c| tp[c] + fn_[c] > 0.0).collect();
    let total: f64 = present
        .iter()
        .map(|&c| {
            let denom = 2.0 * tp[c] + fp[c] + fn_[c];
            if denom > 0.0 {
                2.0 * tp[c] / denom
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / present.len() as f64)
}

/// ACC, NMI, ARI and macro-F1 of one clustering.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricRow {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub f1: f64,
}

impl MetricRow {
    pub fn evaluate(pred: &[usize], truth: &[usize]) -> Result<Self> {
        Self::evaluate_with(pred, truth, NmiNormalization::Geometric)
    }

    pub fn evaluate_with(pred: &[usize], truth: &[usize], norm: NmiNormalization) -> Result<Self> {
        Ok(Self {
            acc: accuracy(pred, truth)?,
            nmi: nmi_with(pred, truth, norm)?,
            ari: ari(pred, truth)?,
            f1: f1_macro(pred, truth)?,
        })
    }

    /// `(ACC + NMI + ARI + F1) / 4`.
    pub fn composite(&self) -> f64 {
        (self.acc + self.nmi + self.ari + self.f1) / 4.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn kmeans_coincident_groups() {
        let z = array![[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [10.0, 10.0], [10.0, 10.0]];
        let r = kmeans(&z, 2, 20, 3).unwrap();
        assert_eq!(r.sse, 0.0);
        assert_eq!(accuracy(&r.labels, &[0, 0, 0, 1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let z = array![[1.0, 2.0], [3.0, 4.0], [5.0, 0.0]];
        let r = kmeans(&z, 1, 5, 0).unwrap();
        assert!((r.centroids[[0, 0]] - 3.0).abs() < 1e-12);
        assert!((r.centroids[[0, 1]] - 2.0).abs() < 1e-12);
        // total variance (per point) times n
        let expected = (4.0 + 0.0 + 4.0) + (0.0 + 4.0 + 4.0);
        assert!((r.sse - expected).abs() < 1e-9);
    }

    #[test]
    fn kmeans_k_equals_n() {
        let z = array![[0.0], [1.0], [5.0], [9.0]];
        let r = kmeans(&z, 4, 10, 2).unwrap();
        assert_eq!(r.sse, 0.0);
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let z = array![[0.0], [1.0]];
        assert!(kmeans(&z, 3, 1, 0).is_err());
        assert!(kmeans(&z, 0, 1, 0).is_err());
    }

    #[test]
    fn kmeans_sse_recomputes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Array2::from_shape_simple_fn((60, 3), || rng.random_range(-2.0..2.0));
        let r = kmeans(&z, 4, 20, 1).unwrap();
        let again: f64 = z
            .rows()
            .into_iter()
            .zip(&r.labels)
            .map(|(p, &l)| sq_dist(p, r.centroids.row(l)))
            .sum();
        assert!((r.sse - again).abs() < 1e-9);
        assert_eq!(r, kmeans(&z, 4, 20, 1).unwrap());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert!((accuracy(&[0, 1, 1], &[0, 0, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy(&[2, 0, 1], &[2, 0, 1]).unwrap(), 1.0);
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn nmi_examples() {
        assert_eq!(nmi(&[0, 1, 1, 2, 2, 2, 0], &[0, 1, 1, 2, 2, 2, 0]).unwrap(), 1.0);
        assert_eq!(nmi(&[2, 0, 0, 1], &[0, 1, 1, 2]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.0);
        assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-12);
        let a = nmi_with(&[0, 0, 1, 1, 1], &[0, 0, 1, 1, 0], NmiNormalization::Arithmetic).unwrap();
        assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn ari_examples() {
        assert!((ari(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ari(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_macro(&[1, 1, 0], &[1, 1, 0]).unwrap(), 1.0);
        assert!((f1_macro(&[0, 1, 1], &[0, 0, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((f1_macro(&[1, 0, 0], &[0, 0, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn hungarian_small() {
        let cost = array![[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]];
        assert_eq!(hungarian(&cost), vec![1, 0, 2]);
    }

    #[test]
    fn lloyd_sse_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let z = Array2::from_shape_simple_fn((80, 2), || rng.random_range(-5.0..5.0));
        for _ in 0..10 {
            let (_, trace) = lloyd(&z, 5, &mut rng);
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{trace:?}");
            }
        }
    }

    #[test]
    fn composite_index() {
        let m = MetricRow { acc: 0.9, nmi: 0.7, ari: 0.6, f1: 0.8 };
        assert!((m.composite() - 0.75).abs() < 1e-15);
    }
}
