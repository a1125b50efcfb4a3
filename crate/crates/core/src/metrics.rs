//! Sample-quality metrics for 2D point clouds: Fréchet distance between
//! Gaussian fits, RBF-kernel MMD², k-NN precision/recall, and the fraction of
//! samples inside the target mixture's high-density region.

use nalgebra::Matrix2;
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::oracle::{sample_mixture, GaussianMixture};
use crate::{Error, Point, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frechet: f64,
    pub mmd2: f64,
    pub precision: f64,
    pub recall: f64,
    pub support_frac: f64,
    pub n_gen: usize,
    pub n_real: usize,
}

/// Mean and unbiased covariance of a 2D point cloud.
pub fn gaussian_fit(points: ArrayView2<'_, f64>) -> (Point, Matrix2<f64>) {
    let n = points.nrows() as f64;
    let mut mean = Point::zeros();
    for r in points.rows() {
        mean += Point::new(r[0], r[1]);
    }
    mean /= n;
    let mut cov = Matrix2::zeros();
    for r in points.rows() {
        let d = Point::new(r[0], r[1]) - mean;
        cov += d * d.transpose();
    }
    (mean, cov / (n - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrechetDistance {
    pub value: f64,
    /// A fitted covariance was singular and got a 1e-8 ridge.
    pub ridged: bool,
}

const RIDGE: f64 = 1e-8;

/// `‖μ_A − μ_B‖² + tr(Σ_A + Σ_B − 2(Σ_AΣ_B)^{1/2})`.
///
/// For 2×2 SPD matrices `Σ_AΣ_B` has non-negative real eigenvalues, so
/// `tr (Σ_AΣ_B)^{1/2} = sqrt(tr(Σ_AΣ_B) + 2·sqrt(det(Σ_AΣ_B)))`.
pub fn frechet_gaussian(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<FrechetDistance> {
    for (name, p) in [("first", &a), ("second", &b)] {
        if p.nrows() < crate::DATA_DIM + 1 || p.ncols() != crate::DATA_DIM {
            return Err(Error::InvalidArgument(format!(
                "{name} sample set needs at least {} 2D points, got {:?}",
                crate::DATA_DIM + 1,
                p.dim()
            )));
        }
    }
    let (ma, mut ca) = gaussian_fit(a);
    let (mb, mut cb) = gaussian_fit(b);
    let mut ridged = false;
    for c in [&mut ca, &mut cb] {
        if c.determinant() <= RIDGE * RIDGE {
            *c += Matrix2::identity() * RIDGE;
            ridged = true;
        }
    }
    if ridged {
        log::warn!("degenerate covariance in Fréchet distance; ridge {RIDGE} added");
    }
    let m = ca * cb;
    let cross = (m.trace() + 2.0 * m.determinant().max(0.0).sqrt()).max(0.0).sqrt();
    let value = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(FrechetDistance {
        value: value.max(0.0),
        ridged,
    })
}

fn sq_dist(a: ArrayView2<'_, f64>, i: usize, b: ArrayView2<'_, f64>, j: usize) -> f64 {
    let dx = a[[i, 0]] - b[[j, 0]];
    let dy = a[[i, 1]] - b[[j, 1]];
    dx * dx + dy * dy
}

/// Points used for the bandwidth heuristic, taken by stride from each set.
const MEDIAN_SUBSAMPLE: usize = 1000;

/// Median pairwise distance over the pooled sets (strided subsample).
pub fn median_heuristic(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let take = |p: ArrayView2<'_, f64>| -> Vec<(f64, f64)> {
        let stride = p.nrows().div_ceil(MEDIAN_SUBSAMPLE / 2).max(1);
        (0..p.nrows()).step_by(stride).map(|i| (p[[i, 0]], p[[i, 1]])).collect()
    };
    let mut pts = take(a);
    pts.extend(take(b));
    let mut d = Vec::with_capacity(pts.len() * pts.len() / 2);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            d.push(((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *m > 0.0 {
        *m
    } else {
        1.0
    }
}

fn kernel_mean(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, gamma: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..x.nrows() {
        let mut row = 0.0;
        for j in 0..y.nrows() {
            row += (-gamma * sq_dist(x, i, y, j)).exp();
        }
        total += row;
    }
    total / (x.nrows() * y.nrows()) as f64
}

/// Biased (V-statistic) MMD² with kernel `exp(−‖x−y‖²/(2h²))`. `None` uses
/// the median pairwise distance as `h`.
pub fn mmd_rbf(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, bandwidth: Option<f64>) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::InvalidArgument("MMD needs nonempty sample sets".into()));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => return Err(Error::InvalidArgument(format!("bandwidth {h} must be > 0"))),
        None => median_heuristic(a, b),
    };
    let gamma = 1.0 / (2.0 * h * h);
    Ok(kernel_mean(a, a, gamma) + kernel_mean(b, b, gamma) - 2.0 * kernel_mean(a, b, gamma))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// Real points dropped from the manifold because their k-NN radius was zero.
    pub excluded_real: usize,
    pub excluded_gen: usize,
}

/// Squared distance from each point to its k-th nearest other point.
fn knn_radii_sq(p: ArrayView2<'_, f64>, k: usize) -> Vec<f64> {
    let n = p.nrows();
    let mut buf = Vec::with_capacity(n);
    (0..n)
        .map(|i| {
            buf.clear();
            buf.extend((0..n).filter(|&j| j != i).map(|j| sq_dist(p, i, p, j)));
            let (_, r, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
            *r
        })
        .collect()
}

/// Fraction of `query` points inside at least one ball around `support`.
fn coverage(query: ArrayView2<'_, f64>, support: ArrayView2<'_, f64>, radii_sq: &[f64]) -> f64 {
    let balls: Vec<usize> = (0..support.nrows()).filter(|&j| radii_sq[j] > 0.0).collect();
    let hits = (0..query.nrows())
        .filter(|&i| balls.iter().any(|&j| sq_dist(query, i, support, j) <= radii_sq[j]))
        .count();
    hits as f64 / query.nrows() as f64
}

/// k-NN manifold precision (generated points inside the real manifold) and
/// recall (real points inside the generated manifold).
pub fn precision_recall_knn(
    real: ArrayView2<'_, f64>,
    gen: ArrayView2<'_, f64>,
    k: usize,
) -> Result<PrecisionRecall> {
    if k == 0 || k >= real.nrows().min(gen.nrows()) {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must satisfy 0 < k < min({}, {})",
            real.nrows(),
            gen.nrows()
        )));
    }
    let real_r = knn_radii_sq(real, k);
    let gen_r = knn_radii_sq(gen, k);
    Ok(PrecisionRecall {
        precision: coverage(gen, real, &real_r),
        recall: coverage(real, gen, &gen_r),
        excluded_real: real_r.iter().filter(|r| **r == 0.0).count(),
        excluded_gen: gen_r.iter().filter(|r| **r == 0.0).count(),
    })
}

/// Reference draws used to place the support threshold.
pub const SUPPORT_REFERENCE_DRAWS: usize = 10_000;

/// Fraction of `gen` whose target log-density reaches the `quantile`-level
/// log-density of fresh target draws.
pub fn target_support_fraction(
    gen: ArrayView2<'_, f64>,
    target: &GaussianMixture,
    quantile: f64,
    seed: u64,
) -> Result<f64> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile {quantile} outside (0, 1)")));
    }
    if gen.nrows() == 0 {
        return Err(Error::InvalidArgument("no generated points".into()));
    }
    let reference = sample_mixture(target, SUPPORT_REFERENCE_DRAWS, seed)?;
    let mut ref_logp = target.log_density_batch(&reference.points);
    ref_logp.sort_unstable_by(f64::total_cmp);
    let idx = ((quantile * ref_logp.len() as f64).floor() as usize).min(ref_logp.len() - 1);
    let threshold = ref_logp[idx];
    let gen_logp = target.log_density_batch(&gen.to_owned());
    let inside = gen_logp.iter().filter(|l| **l >= threshold).count();
    Ok(inside as f64 / gen.nrows() as f64)
}
