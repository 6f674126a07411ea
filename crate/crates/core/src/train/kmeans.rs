//! Lloyd's k-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Mat;

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// `K×C` centroids.
    pub centroids: Mat,
    pub assignments: Vec<usize>,
    pub trace: KMeansTrace,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KMeansTrace {
    /// Sum of squared distances to assigned centroids; entry 0 is after seeding.
    pub objective: Vec<f64>,
    /// Largest centroid displacement per iteration.
    pub max_shift: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Empty clusters repaired across all iterations.
    pub repairs: usize,
}

/// Anything that can turn `P×C` points into `K×C` centroids.
pub trait Clusterer {
    fn cluster(&self, points: &Mat, k: usize, seed: u64) -> Result<KMeansResult>;
}

#[derive(Debug, Clone, Copy)]
pub struct KMeans {
    pub max_iters: usize,
    pub tol: f64,
}

impl Clusterer for KMeans {
    fn cluster(&self, points: &Mat, k: usize, seed: u64) -> Result<KMeansResult> {
        kmeans(points, k, self.max_iters, self.tol, seed)
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; ties go to the lowest index.
fn nearest(point: ndarray::ArrayView1<f64>, centroids: &Mat) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn seed_plus_plus(points: &Mat, k: usize, rng: &mut ChaCha8Rng) -> Mat {
    let p = points.nrows();
    let mut centroids = Mat::zeros((k, points.ncols()));
    let first = rng.random_range(0..p);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|r| sq_dist(r, points.row(first)))
        .collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = p - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..p)
        };
        centroids.row_mut(j).assign(&points.row(pick));
        for (i, row) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(row, points.row(pick)));
        }
    }
    centroids
}

fn assign(points: &Mat, centroids: &Mat) -> (Vec<usize>, Vec<f64>) {
    points
        .rows()
        .into_iter()
        .map(|r| nearest(r, centroids))
        .unzip()
}

/// Moves the point farthest from its centroid into each empty cluster.
/// Only points whose cluster keeps at least one other member are eligible.
fn repair_empty(assignments: &mut [usize], dists: &mut [f64], k: usize) -> usize {
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    let mut repairs = 0;
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let donor = (0..assignments.len())
            .filter(|&i| counts[assignments[i]] > 1)
            .fold(None::<usize>, |best, i| match best {
                Some(b) if dists[b] >= dists[i] => Some(b),
                _ => Some(i),
            });
        if let Some(i) = donor {
            counts[assignments[i]] -= 1;
            assignments[i] = empty;
            counts[empty] = 1;
            dists[i] = 0.0;
            repairs += 1;
        }
    }
    repairs
}

fn update(points: &Mat, assignments: &[usize], prev: &Mat) -> Mat {
    let k = prev.nrows();
    let mut sums = Mat::zeros(prev.dim());
    let mut counts = vec![0usize; k];
    for (row, &a) in points.rows().into_iter().zip(assignments) {
        let mut s = sums.row_mut(a);
        s += &row;
        counts[a] += 1;
    }
    for (j, &c) in counts.iter().enumerate() {
        if c > 0 {
            sums.row_mut(j).mapv_inplace(|v| v / c as f64);
        } else {
            sums.row_mut(j).assign(&prev.row(j));
        }
    }
    sums
}

fn objective(points: &Mat, centroids: &Mat, assignments: &[usize]) -> f64 {
    points
        .rows()
        .into_iter()
        .zip(assignments)
        .map(|(r, &a)| sq_dist(r, centroids.row(a)))
        .sum()
}

/// Clusters the rows of `points` into `k` groups.
///
/// Stops after `max_iters` Lloyd iterations or once the largest centroid
/// shift falls below `tol`.
pub fn kmeans(
    points: &Mat,
    k: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<KMeansResult> {
    let p = points.nrows();
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if p < k {
        return Err(Error::Data(format!(
            "k-means needs at least {k} points, got {p}"
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "k-means input contains non-finite values".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(points, k, &mut rng);
    let (mut assignments, mut dists) = assign(points, &centroids);
    let mut trace = KMeansTrace {
        repairs: repair_empty(&mut assignments, &mut dists, k),
        ..KMeansTrace::default()
    };
    trace
        .objective
        .push(objective(points, &centroids, &assignments));

    for _ in 0..max_iters {
        let next = update(points, &assignments, &centroids);
        let shift = next
            .rows()
            .into_iter()
            .zip(centroids.rows())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        let (a, d) = assign(points, &centroids);
        assignments = a;
        dists = d;
        trace.repairs += repair_empty(&mut assignments, &mut dists, k);
        trace.iterations += 1;
        trace.max_shift.push(shift);
        trace
            .objective
            .push(objective(points, &centroids, &assignments));
        if shift < tol {
            trace.converged = true;
            break;
        }
    }
    // centroids consistent with the final assignment
    centroids = update(points, &assignments, &centroids);

    Ok(KMeansResult {
        centroids,
        assignments,
        trace,
    })
}
