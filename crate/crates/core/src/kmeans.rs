//! Lloyd's k-means with k-means++ seeding and restarts, used to place the
//! initial cluster centroids on encoder embeddings.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Matrix;

pub const RESTARTS: usize = 20;
pub const MAX_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub centroids: Matrix,
    pub labels: Vec<usize>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn seed_plus_plus(points: &Matrix, k: usize, rng: &mut Rng) -> Matrix {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    points.select_rows(&chosen)
}

fn lloyd(points: &Matrix, mut centroids: Matrix) -> KMeansFit {
    let (n, dim, k) = (points.rows(), points.cols(), centroids.rows());
    let mut labels = vec![usize::MAX; n];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let (j, _) = nearest(points.row(i), &centroids);
            if *label != j {
                *label = j;
                changed = true;
            }
        }
        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &j) in labels.iter().enumerate() {
            counts[j] += 1;
            for (s, v) in sums.row_mut(j).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            // empty clusters keep their previous position
            if counts[j] > 0 {
                let c = counts[j] as f64;
                for (dst, s) in centroids.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *dst = s / c;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = (0..n).map(|i| nearest(points.row(i), &centroids).1).sum();
    let labels = (0..n).map(|i| nearest(points.row(i), &centroids).0).collect();
    KMeansFit { centroids, labels, inertia }
}

/// Best-inertia k-means over [`RESTARTS`] seeded restarts.
pub fn kmeans(points: &Matrix, k: usize, rng: &mut Rng) -> Result<KMeansFit> {
    if k == 0 || points.rows() < k {
        return Err(Error::config(format!("k-means needs n >= k >= 1, got n = {}, k = {k}", points.rows())));
    }
    let mut best: Option<KMeansFit> = None;
    for _ in 0..RESTARTS {
        let fit = lloyd(points, seed_plus_plus(points, k, rng));
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, -1.0]]).unwrap();
        let fit = kmeans(&pts, 1, &mut rng::stream(0, "km")).unwrap();
        assert!((fit.centroids.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((fit.centroids.get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_points() {
        let pts = Matrix::zeros(2, 3);
        assert!(kmeans(&pts, 3, &mut rng::stream(0, "km")).is_err());
    }

    /// Exhaustive search over all 2-partitions of a small point set.
    fn brute_force_inertia(pts: &Matrix) -> f64 {
        let n = pts.rows();
        let mut best = f64::INFINITY;
        for mask in 1..(1u32 << n) - 1 {
            let mut total = 0.0;
            for side in [true, false] {
                let idx: Vec<usize> = (0..n).filter(|i| ((mask >> i) & 1 == 1) == side).collect();
                let sub = pts.select_rows(&idx);
                let mean: Vec<f64> = (0..pts.cols())
                    .map(|c| (0..sub.rows()).map(|r| sub.get(r, c)).sum::<f64>() / sub.rows() as f64)
                    .collect();
                total += (0..sub.rows()).map(|r| sq_dist(sub.row(r), &mean)).sum::<f64>();
            }
            best = best.min(total);
        }
        best
    }

    #[test]
    fn separated_clouds_match_brute_force() {
        let pts = Matrix::from_rows(&[
            vec![0.0, 0.1],
            vec![0.3, -0.2],
            vec![-0.1, 0.2],
            vec![0.2, 0.0],
            vec![10.0, 10.2],
            vec![10.4, 9.9],
            vec![9.8, 10.1],
            vec![10.1, 10.3],
        ])
        .unwrap();
        let fit = kmeans(&pts, 2, &mut rng::stream(3, "km")).unwrap();
        assert!((fit.inertia - brute_force_inertia(&pts)).abs() < 1e-9);
        for j in 0..2 {
            let c = fit.centroids.row(j);
            let in_low = (-0.1..=0.3).contains(&c[0]) && (-0.2..=0.2).contains(&c[1]);
            let in_high = (9.8..=10.4).contains(&c[0]) && (9.9..=10.3).contains(&c[1]);
            assert!(in_low || in_high, "centroid {c:?} outside both boxes");
        }
        let again = kmeans(&pts, 2, &mut rng::stream(3, "km")).unwrap();
        assert_eq!(fit, again);
    }
}
