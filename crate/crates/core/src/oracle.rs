//! Closed-form Gaussian-mixture densities and the exact noise predictor
//! ε*(x_t) = −σ_t ∇ log p_t(x_t) of the diffused mixture.

use nalgebra::Matrix2;
use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, SampleBatch};
use crate::{rng_from_seed, Error, Label, Point, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Point>,
    pub covariances: Vec<Matrix2<f64>>,
    /// Class index of each component, if the mixture is labeled.
    pub labels: Option<Vec<usize>>,
}

/// Precomputed Gaussian factor: mean, inverse covariance, log normalizer.
#[derive(Debug, Clone)]
struct Factor {
    log_weight: f64,
    mean: Point,
    precision: Matrix2<f64>,
    log_norm: f64,
}

impl Factor {
    fn new(weight: f64, mean: Point, cov: Matrix2<f64>) -> Self {
        let det = cov.determinant();
        let precision = cov.try_inverse().expect("SPD covariance");
        Self {
            log_weight: weight.ln(),
            mean,
            precision,
            log_norm: -LN_2PI - 0.5 * det.ln(),
        }
    }

    fn log_joint(&self, x: &Point) -> f64 {
        let d = x - self.mean;
        self.log_weight + self.log_norm - 0.5 * d.dot(&(self.precision * d))
    }
}

fn is_spd(m: &Matrix2<f64>) -> bool {
    (m[(0, 1)] - m[(1, 0)]).abs() <= 1e-12 * (1.0 + m[(0, 1)].abs())
        && m[(0, 0)] > 0.0
        && m.determinant() > 0.0
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Point>,
        covariances: Vec<Matrix2<f64>>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::InvalidArgument(format!(
                "mixture needs matching nonempty weights/means/covariances, got {k}/{}/{}",
                means.len(),
                covariances.len()
            )));
        }
        if labels.as_ref().is_some_and(|l| l.len() != k) {
            return Err(Error::InvalidArgument("one label per component required".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidArgument("weights must lie on the simplex".into()));
        }
        if let Some(i) = covariances.iter().position(|c| !is_spd(c)) {
            return Err(Error::InvalidArgument(format!(
                "covariance {i} is not symmetric positive definite"
            )));
        }
        if means.iter().any(|m| !m.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("mixture mean".into()));
        }
        Ok(Self {
            weights,
            means,
            covariances,
            labels,
        })
    }

    /// Isotropic components sharing one variance and equal weights.
    pub fn isotropic(means: Vec<Point>, variance: f64, labels: Option<Vec<usize>>) -> Result<Self> {
        let k = means.len();
        Self::new(
            vec![1.0 / k as f64; k],
            means,
            vec![Matrix2::identity() * variance; k],
            labels,
        )
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    /// Distinct labels carried by the components, sorted.
    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.labels.iter().flatten().copied().collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Total weight of the components carrying `label`.
    pub fn label_mass(&self, label: usize) -> f64 {
        match &self.labels {
            Some(ls) => ls
                .iter()
                .zip(&self.weights)
                .filter(|(l, _)| **l == label)
                .map(|(_, w)| w)
                .sum(),
            None => 0.0,
        }
    }

    /// Mixture restricted to the components matching `condition`
    /// (renormalized); the whole mixture for the null label.
    pub fn conditional(&self, condition: Label) -> Result<GaussianMixture> {
        let Some(c) = condition else {
            return Ok(self.clone());
        };
        let Some(labels) = &self.labels else {
            return Err(Error::InvalidArgument(format!(
                "condition {c} on an unlabeled mixture"
            )));
        };
        let keep: Vec<usize> = (0..self.num_components())
            .filter(|&k| labels[k] == c && self.weights[k] > 0.0)
            .collect();
        if keep.is_empty() {
            return Err(Error::InvalidArgument(format!("no component carries label {c}")));
        }
        let total: f64 = keep.iter().map(|&k| self.weights[k]).sum();
        Ok(GaussianMixture {
            weights: keep.iter().map(|&k| self.weights[k] / total).collect(),
            means: keep.iter().map(|&k| self.means[k]).collect(),
            covariances: keep.iter().map(|&k| self.covariances[k]).collect(),
            labels: Some(vec![c; keep.len()]),
        })
    }

    /// Marginal of `x_t = sqrt(ᾱ_t)·x0 + σ_t·ε` for `x0` drawn from this mixture.
    pub fn diffused(&self, alpha_bar: f64) -> GaussianMixture {
        let s = alpha_bar.sqrt();
        GaussianMixture {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m * s).collect(),
            covariances: self
                .covariances
                .iter()
                .map(|c| c * alpha_bar + Matrix2::identity() * (1.0 - alpha_bar))
                .collect(),
            labels: self.labels.clone(),
        }
    }

    fn factors(&self) -> Vec<Factor> {
        (0..self.num_components())
            .filter(|&k| self.weights[k] > 0.0)
            .map(|k| Factor::new(self.weights[k], self.means[k], self.covariances[k]))
            .collect()
    }

    /// Log mixture density, stabilized by shifting with the largest term.
    pub fn log_density(&self, x: &Point) -> f64 {
        log_sum_exp(self.factors().iter().map(|f| f.log_joint(x)))
    }

    /// Log density of every row of `points`.
    pub fn log_density_batch(&self, points: &Array2<f64>) -> Vec<f64> {
        let factors = self.factors();
        points
            .rows()
            .into_iter()
            .map(|r| {
                let x = Point::new(r[0], r[1]);
                log_sum_exp(factors.iter().map(|f| f.log_joint(&x)))
            })
            .collect()
    }

    /// Index of the component with the largest posterior responsibility.
    pub fn assign(&self, x: &Point) -> usize {
        (0..self.num_components())
            .filter(|&k| self.weights[k] > 0.0)
            .map(|k| {
                let f = Factor::new(self.weights[k], self.means[k], self.covariances[k]);
                (k, f.log_joint(x))
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
            .expect("at least one component with positive weight")
    }
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Draw `n` points: component by weight, then a Gaussian draw.
pub fn sample_mixture(gm: &GaussianMixture, n: usize, seed: u64) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let pick = WeightedIndex::new(&gm.weights)
        .map_err(|e| Error::InvalidArgument(format!("mixture weights: {e}")))?;
    let chols: Vec<Matrix2<f64>> = gm
        .covariances
        .iter()
        .map(|c| c.cholesky().expect("SPD covariance").l())
        .collect();
    let mut points = Array2::zeros((n, crate::DATA_DIM));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = pick.sample(&mut rng);
        let z = Point::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
        let x = gm.means[k] + chols[k] * z;
        points[[i, 0]] = x[0];
        points[[i, 1]] = x[1];
        labels.push(gm.labels.as_ref().map(|l| l[k]));
    }
    SampleBatch::new(points, labels, seed)
}

/// Exact ε-prediction for the diffused mixture at step `t`, optionally
/// conditioned on a class label.
pub fn analytic_eps(
    gm: &GaussianMixture,
    x_t: &Point,
    t: usize,
    sched: &NoiseSchedule,
    condition: Label,
) -> Result<Point> {
    let x = Array2::from_shape_vec((1, 2), vec![x_t[0], x_t[1]]).expect("1x2");
    let out = analytic_eps_batch(gm, &x, t, sched, &[condition])?;
    Ok(Point::new(out[[0, 0]], out[[0, 1]]))
}

/// Row-wise [`analytic_eps`].
pub fn analytic_eps_batch(
    gm: &GaussianMixture,
    x_t: &Array2<f64>,
    t: usize,
    sched: &NoiseSchedule,
    conditions: &[Label],
) -> Result<Array2<f64>> {
    sched.check_step(t)?;
    if conditions.len() != x_t.nrows() || x_t.ncols() != crate::DATA_DIM {
        return Err(Error::Shape("analytic_eps_batch operands disagree".into()));
    }
    let ab = sched.alpha_bar(t);
    let sigma = sched.sigma(t);

    // one factor set per distinct condition
    let mut cache: Vec<(Label, Vec<Factor>)> = Vec::new();
    let mut out = Array2::zeros(x_t.raw_dim());
    for (i, cond) in conditions.iter().enumerate() {
        let idx = match cache.iter().position(|(c, _)| c == cond) {
            Some(idx) => idx,
            None => {
                let factors = gm.conditional(*cond)?.diffused(ab).factors();
                cache.push((*cond, factors));
                cache.len() - 1
            }
        };
        let factors = &cache[idx].1;
        let x = Point::new(x_t[[i, 0]], x_t[[i, 1]]);
        let logs: Vec<f64> = factors.iter().map(|f| f.log_joint(&x)).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut num = Point::zeros();
        let mut den = 0.0;
        for (f, l) in factors.iter().zip(&logs) {
            let r = (l - max).exp();
            num += f.precision * (x - f.mean) * r;
            den += r;
        }
        let eps = num * (sigma / den);
        out[[i, 0]] = eps[0];
        out[[i, 1]] = eps[1];
    }
    Ok(out)
}

/// Posterior class probabilities p(c | x_t) under the diffused mixture, in
/// the order of [`GaussianMixture::classes`].
pub fn label_posterior(gm: &GaussianMixture, x_t: &Point, t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    let classes = gm.classes();
    if classes.is_empty() {
        return Err(Error::InvalidArgument("mixture is unlabeled".into()));
    }
    let diffused = gm.diffused(sched.alpha_bar(t));
    let logs: Vec<f64> = classes
        .iter()
        .map(|&c| {
            let mass = gm.label_mass(c);
            let cond = diffused.conditional(Some(c)).expect("class present");
            mass.ln() + cond.log_density(x_t)
        })
        .collect();
    let total = log_sum_exp(logs.iter().copied());
    Ok(logs.iter().map(|l| (l - total).exp()).collect())
}
