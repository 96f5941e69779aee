//! Independent oracles shared by the property and acceptance suites.
#![allow(dead_code)]

use augoverlap::encoder::{infonce_grad, infonce_loss, ContrastiveBatch, EncoderParams};
use augoverlap::{AugmentationGraph, UnitVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn random_unit<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn random_points(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<UnitVector> {
    (0..n)
        .map(|_| UnitVector::from_unit(random_unit(dim, rng)).unwrap())
        .collect()
}

/// Central finite differences of the batch loss over every parameter.
pub fn fd_gradient(p: &EncoderParams, batch: &ContrastiveBatch, h: f64) -> Vec<f64> {
    let theta = p.flat();
    let mut q = p.clone();
    (0..theta.len())
        .map(|i| {
            let mut t = theta.clone();
            t[i] += h;
            q.set_flat(&t).unwrap();
            let up = infonce_loss(&q, batch).unwrap();
            t[i] -= 2.0 * h;
            q.set_flat(&t).unwrap();
            let down = infonce_loss(&q, batch).unwrap();
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` for the analytic gradient against finite differences.
pub fn gradient_relative_error(p: &EncoderParams, batch: &ContrastiveBatch) -> f64 {
    let (_, g) = infonce_grad(p, batch).unwrap();
    let analytic = g.flat();
    let numeric = fd_gradient(p, batch, 1e-6);
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = dot(&analytic, &analytic).sqrt().max(dot(&numeric, &numeric).sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// k nearest rows to `q` (self excluded) by a full sort on (squared distance, index).
pub fn knn_by_sort(features: &[Vec<f64>], q: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = (0..features.len())
        .filter(|&j| j != q)
        .map(|j| {
            let d: f64 = features[q].iter().zip(&features[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            (d, j)
        })
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Exhaustive CR values from the sort-based neighbour oracle.
pub fn cr_oracle(sources: &[usize], features: &[Vec<f64>], k: usize) -> Vec<f64> {
    (0..features.len())
        .map(|i| {
            let foreign = knn_by_sort(features, i, k)
                .into_iter()
                .filter(|&j| sources[j] != sources[i])
                .count();
            foreign as f64 / k as f64
        })
        .collect()
}

pub fn angle(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0).acos()
}

/// Smallest pairwise distance `t` at which the graph with connect factor 1 is
/// connected, by binary search over the sorted pairwise distances.
pub fn connectivity_radius_by_search(points: &[UnitVector]) -> f64 {
    let n = points.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(angle(&points[i], &points[j]));
        }
    }
    dists.sort_by(f64::total_cmp);
    dists.dedup();
    let connected = |t: f64| {
        t > 0.0
            && AugmentationGraph::from_points(points, None, t, 1.0)
                .unwrap()
                .num_components()
                == 1
    };
    let (mut lo, mut hi) = (0usize, dists.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if connected(dists[mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    dists[lo]
}

/// Largest nearest-neighbour distance by brute force.
pub fn max_nearest_neighbor(points: &[UnitVector]) -> f64 {
    (0..points.len())
        .map(|i| {
            (0..points.len())
                .filter(|&j| j != i)
                .map(|j| angle(&points[i], &points[j]))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Smallest `r` with `alpha · r >= target` in floating point.
pub fn radius_reaching(target: f64, alpha: f64) -> f64 {
    let mut r = target / alpha;
    while alpha * r < target {
        r = f64::from_bits(r.to_bits() + 1);
    }
    r
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &t in &idx[i..=j] {
                r[t] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Random `n × n` orthogonal matrix from Gram-Schmidt on uniform rows.
pub fn random_rotation(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let c = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
        }
        let l = dot(&v, &v).sqrt();
        if l > 1e-6 {
            q.push(v.into_iter().map(|a| a / l).collect());
        }
    }
    q
}

pub fn rotate(q: &[Vec<f64>], z: &[f64]) -> Vec<f64> {
    q.iter().map(|row| dot(row, z)).collect()
}
