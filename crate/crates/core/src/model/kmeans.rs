//! Lloyd's k-means with k-means++ seeding, used to turn MFCC frames into
//! discrete acoustic-unit targets.

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

pub const MAX_ITERATIONS: usize = 100;
pub const RELATIVE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// `k x dim`.
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    /// Inertia after every assignment step.
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().unwrap_or(&0.0)
    }

    /// Nearest-centroid labels for new frames.
    pub fn assign(&self, frames: &Array2<f64>) -> Vec<usize> {
        frames.axis_iter(Axis(0)).map(|x| nearest(&self.centroids, x).0).collect()
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &Array2<f64>, x: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.axis_iter(Axis(0)).enumerate() {
        let d = sq_dist(row, x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seed(frames: &Array2<f64>, k: usize, rng: &mut rng::Rng) -> Array2<f64> {
    let n = frames.nrows();
    let mut centroids = Array2::zeros((k, frames.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&frames.row(first));
    let mut d2: Vec<f64> = frames.axis_iter(Axis(0)).map(|x| sq_dist(x, frames.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&frames.row(pick));
        for (i, x) in frames.axis_iter(Axis(0)).enumerate() {
            d2[i] = d2[i].min(sq_dist(x, frames.row(pick)));
        }
    }
    centroids
}

/// Clusters `frames` (`n x dim`) into `k` groups. Stops after
/// [`MAX_ITERATIONS`] or when inertia changes by less than
/// [`RELATIVE_TOLERANCE`] relative. Empty clusters keep their centroid.
pub fn fit_cluster_targets(frames: &Array2<f64>, k: usize, seed: u64) -> Result<ClusterModel> {
    let n = frames.nrows();
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    if k == 0 || k > n {
        return Err(Error::InvalidParams(format!("k = {k} must be in 1..={n}")));
    }
    let mut rng = rng::stream(seed, "kmeans");
    let mut centroids = plus_plus_seed(frames, k, &mut rng);
    let mut assignments = vec![0; n];
    let mut history = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let mut inertia = 0.0;
        for (i, x) in frames.axis_iter(Axis(0)).enumerate() {
            let (c, d) = nearest(&centroids, x);
            assignments[i] = c;
            inertia += d;
        }
        let converged = history
            .last()
            .is_some_and(|&prev: &f64| prev == 0.0 || (prev - inertia).abs() / prev < RELATIVE_TOLERANCE);
        history.push(inertia);
        if converged || inertia == 0.0 {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, x) in frames.axis_iter(Axis(0)).enumerate() {
            let mut row = sums.row_mut(assignments[i]);
            row += &x;
            counts[assignments[i]] += 1;
        }
        for (c, &cnt) in counts.iter().enumerate() {
            if cnt > 0 {
                let mean = &sums.row(c) / cnt as f64;
                centroids.row_mut(c).assign(&mean);
            }
        }
    }
    Ok(ClusterModel {
        centroids,
        assignments,
        inertia_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn each_point_its_own_cluster() {
        let pts = array![[0.0, 0.0], [5.0, 1.0], [-3.0, 4.0]];
        let m = fit_cluster_targets(&pts, 3, 1).unwrap();
        assert_eq!(m.inertia(), 0.0);
        let mut a = m.assignments.clone();
        a.sort_unstable();
        a.dedup();
        assert_eq!(a.len(), 3);
        for (i, &c) in m.assignments.iter().enumerate() {
            assert_eq!(m.centroids.row(c), pts.row(i));
        }
    }

    fn blobs(n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = rng::stream(seed, "blobs");
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut data = Array2::zeros((2 * n, 3));
        let mut labels = Vec::new();
        for i in 0..2 * n {
            let blob = i % 2;
            for j in 0..3 {
                data[[i, j]] = noise.sample(&mut rng) + if blob == 1 { 10.0 } else { 0.0 };
            }
            labels.push(blob);
        }
        (data, labels)
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let (data, labels) = blobs(200, 3);
        let m = fit_cluster_targets(&data, 2, 5).unwrap();
        let agree = m.assignments.iter().zip(&labels).filter(|(a, b)| a == b).count();
        let acc = agree.max(labels.len() - agree) as f64 / labels.len() as f64;
        assert!(acc >= 0.99);
        assert_eq!(m.assign(&data), m.assignments);
    }

    #[test]
    fn inertia_never_increases() {
        let (data, _) = blobs(150, 4);
        let m = fit_cluster_targets(&data, 7, 2).unwrap();
        assert!(m.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        assert!(m.inertia_history.len() <= MAX_ITERATIONS);
    }

    #[test]
    fn errors_and_determinism() {
        assert!(matches!(fit_cluster_targets(&Array2::zeros((0, 2)), 1, 0), Err(Error::EmptyCorpus)));
        assert!(fit_cluster_targets(&array![[1.0], [2.0]], 3, 0).is_err());
        let (data, _) = blobs(50, 9);
        assert_eq!(fit_cluster_targets(&data, 4, 1).unwrap(), fit_cluster_targets(&data, 4, 1).unwrap());
    }
}
