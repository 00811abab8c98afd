use rand::Rng;

use super::codebook::{nearest, sq_dist, Codebook};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Diagnostics from one k-means run.
#[derive(Clone, Debug, PartialEq)]
pub struct KmeansReport {
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Lloyd's k-means with k-means++ seeding.
///
/// Stops once the largest centroid displacement drops below `tol` or after
/// `max_iters` update steps. A cluster that loses all members is re-seeded at
/// the frame currently farthest from its centroid.
pub fn train_codebook(
    frames: &Tensor,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<(Codebook, KmeansReport)> {
    let (n, dim) = match frames.shape() {
        &[n, d] => (n, d),
        s => {
            return Err(Error::Input(format!(
                "frame matrix must be 2-D, got shape {s:?}"
            )))
        }
    };
    if k == 0 {
        return Err(Error::Input("codebook size must be positive".into()));
    }
    if n < k {
        return Err(Error::Input(format!(
            "need at least {k} frames to train {k} centroids, got {n}"
        )));
    }
    let points: Vec<&[f64]> = (0..n).map(|i| frames.row(i)).collect();
    let mut rng = seeded(seed);
    let mut centroids = plus_plus_init(&points, k, &mut rng)?;

    let mut assign = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut report = KmeansReport {
        objective: Vec::new(),
        iterations: 0,
        converged: false,
    };

    for _ in 0..max_iters {
        let obj = assign_all(&points, &centroids, &mut assign, &mut dists);
        report.objective.push(obj);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assign) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }

        let mut taken = vec![false; n];
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let new = if counts[c] > 0 {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n >= k leaves a free frame");
                taken[far] = true;
                dists[far] = 0.0;
                points[far].to_vec()
            };
            shift = shift.max(sq_dist(&centroids[c], &new).sqrt());
            centroids[c] = new;
        }
        report.iterations += 1;
        if shift < tol {
            report.converged = true;
            break;
        }
    }
    let obj = assign_all(&points, &centroids, &mut assign, &mut dists);
    report.objective.push(obj);

    let cb = Codebook::new(Tensor::new(vec![k, dim], centroids.concat())?)?;
    Ok((cb, report))
}

fn assign_all(
    points: &[&[f64]],
    centroids: &[Vec<f64>],
    assign: &mut [usize],
    dists: &mut [f64],
) -> f64 {
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (c, d) = nearest(p, centroids.iter().map(Vec::as_slice));
        assign[i] = c;
        dists[i] = d;
        total += d;
    }
    total
}

fn plus_plus_init<R: Rng>(points: &[&[f64]], k: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::Input(format!(
                "only {} distinct frames available for {k} centroids",
                centroids.len()
            )));
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, d) in d2.iter().enumerate() {
            if *d > 0.0 && target < *d {
                pick = i;
                break;
            }
            target -= d;
        }
        while d2[pick] <= 0.0 {
            pick -= 1;
        }
        let c = points[pick].to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    Ok(centroids)
}
