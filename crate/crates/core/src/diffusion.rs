//! Linear-β noise schedule, forward corruption and the two reverse samplers.
//!
//! Step indices are 1-based (`1..=T`). Training draws a continuous
//! `t_norm ∈ [0, 1]` and looks up the schedule at
//! `round(t_norm·(T−1)) + 1`; samplers feed the network `(t−1)/(T−1)`.

use ndarray::{Array2, ArrayView2, Zip};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{rng_from_seed, Error, Label, Result, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// DDPM linear schedule: β evenly spaced on `[beta_min, beta_max]`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = alpha_bars.iter().map(|ab| (1.0 - ab).sqrt()).collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    /// T = 1000, β ∈ [1e-4, 0.02].
    pub fn standard() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid default schedule")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, t: usize) -> usize {
        debug_assert!((1..=self.steps()).contains(&t));
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[self.idx(t)]
    }

    /// sqrt(1 − ᾱ_t)
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[self.idx(t)]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if (1..=self.steps()).contains(&t) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "step {t} outside 1..={}",
                self.steps()
            )))
        }
    }

    /// Network time input for a discrete step.
    pub fn t_norm(&self, t: usize) -> f64 {
        (t - 1) as f64 / (self.steps() - 1) as f64
    }

    /// Discrete step used for schedule lookups at a continuous training time.
    pub fn step_for(&self, t_norm: f64) -> usize {
        let t = t_norm.clamp(0.0, 1.0);
        (t * (self.steps() - 1) as f64).round() as usize + 1
    }
}

/// `x_t = sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·ε`
pub fn forward_noise(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    if x0.len() != eps.len() {
        return Err(Error::Shape("x0 and eps lengths differ".into()));
    }
    let a = sched.alpha_bar(t).sqrt();
    let s = sched.sigma(t);
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// Row-wise [`forward_noise`] with a per-row step.
pub fn forward_noise_batch(
    x0: ArrayView2<'_, f64>,
    steps: &[usize],
    eps: ArrayView2<'_, f64>,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if x0.dim() != eps.dim() || steps.len() != x0.nrows() {
        return Err(Error::Shape("forward_noise_batch operands disagree".into()));
    }
    let mut out = Array2::zeros(x0.raw_dim());
    for (i, &t) in steps.iter().enumerate() {
        sched.check_step(t)?;
        let a = sched.alpha_bar(t).sqrt();
        let s = sched.sigma(t);
        for j in 0..x0.ncols() {
            out[[i, j]] = a * x0[[i, j]] + s * eps[[i, j]];
        }
    }
    Ok(out)
}

/// Generated or drawn points with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    /// One row per point.
    pub points: Array2<f64>,
    pub labels: Vec<Label>,
    pub seed: u64,
}

impl SampleBatch {
    pub fn new(points: Array2<f64>, labels: Vec<Label>, seed: u64) -> Result<Self> {
        if points.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} points but {} labels",
                points.nrows(),
                labels.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample points".into()));
        }
        Ok(Self { points, labels, seed })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn point(&self, i: usize) -> crate::Point {
        crate::Point::new(self.points[[i, 0]], self.points[[i, 1]])
    }

    /// Rows `range` as a new batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> SampleBatch {
        SampleBatch {
            points: self.points.slice(ndarray::s![range.clone(), ..]).to_owned(),
            labels: self.labels[range].to_vec(),
            seed: self.seed,
        }
    }
}

/// An ε-prediction function over a batch at discrete step `t`.
pub trait EpsFn {
    fn predict(&mut self, x: &Array2<f64>, t: usize, labels: &[Label]) -> Result<Array2<f64>>;
}

impl<F> EpsFn for F
where
    F: FnMut(&Array2<f64>, usize, &[Label]) -> Result<Array2<f64>>,
{
    fn predict(&mut self, x: &Array2<f64>, t: usize, labels: &[Label]) -> Result<Array2<f64>> {
        self(x, t, labels)
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn predict_checked<E: EpsFn + ?Sized>(
    eps_fn: &mut E,
    x: &Array2<f64>,
    t: usize,
    labels: &[Label],
) -> Result<Array2<f64>> {
    let eps = eps_fn.predict(x, t, labels)?;
    if eps.dim() != x.dim() {
        return Err(Error::Shape(format!(
            "ε-prediction {:?} vs state {:?}",
            eps.dim(),
            x.dim()
        )));
    }
    if eps.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteAtStep { step: t });
    }
    Ok(eps)
}

/// Ancestral sampler from `x_T ~ N(0, I)` down to step 1 with reverse
/// variance β_t. One sample per label.
pub fn ddpm_sample<E: EpsFn + ?Sized>(
    eps_fn: &mut E,
    labels: Vec<Label>,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<SampleBatch> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut x = gaussian(n, crate::DATA_DIM, &mut rng);
    for t in (1..=sched.steps()).rev() {
        let eps = predict_checked(eps_fn, &x, t, &labels)?;
        let coef = sched.beta(t) / sched.sigma(t);
        let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
        Zip::from(&mut x)
            .and(&eps)
            .for_each(|xv, e| *xv = inv_sqrt_alpha * (*xv - coef * e));
        if t > 1 {
            let noise = gaussian(n, crate::DATA_DIM, &mut rng);
            x.scaled_add(sched.beta(t).sqrt(), &noise);
        }
    }
    SampleBatch::new(x, labels, seed)
}

/// The `num_steps` evenly spaced step indices used by [`ddim_sample`], ascending.
pub fn ddim_timesteps(num_steps: usize, total: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > total {
        return Err(Error::InvalidArgument(format!(
            "num_steps {num_steps} outside 1..={total}"
        )));
    }
    if num_steps == 1 {
        return Ok(vec![total]);
    }
    let ts = (0..num_steps)
        .map(|i| 1 + ((i * (total - 1)) as f64 / (num_steps - 1) as f64).round() as usize)
        .collect();
    Ok(ts)
}

/// Deterministic (η = 0) sampler over the evenly spaced sub-sequence of steps.
pub fn ddim_sample<E: EpsFn + ?Sized>(
    eps_fn: &mut E,
    labels: Vec<Label>,
    num_steps: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<SampleBatch> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    let ts = ddim_timesteps(num_steps, sched.steps())?;
    let mut rng = rng_from_seed(seed);
    let mut x = gaussian(n, crate::DATA_DIM, &mut rng);
    for (i, &t) in ts.iter().enumerate().rev() {
        let eps = predict_checked(eps_fn, &x, t, &labels)?;
        let ab = sched.alpha_bar(t);
        let ab_prev = if i == 0 { 1.0 } else { sched.alpha_bar(ts[i - 1]) };
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        Zip::from(&mut x).and(&eps).for_each(|xv, e| {
            let x0 = (*xv - sb * e) / sa;
            *xv = pa * x0 + pb * e;
        });
    }
    SampleBatch::new(x, labels, seed)
}

/// Sampler selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
        }
    }

    /// Number of network evaluations per point for a run of `steps`.
    pub fn evaluations(self, steps: usize, sched: &NoiseSchedule) -> usize {
        match self {
            SamplerKind::Ddpm => sched.steps(),
            SamplerKind::Ddim => steps,
        }
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            _ => Err(Error::InvalidArgument(format!("unknown sampler {s:?}"))),
        }
    }
}

pub fn sample<E: EpsFn + ?Sized>(
    kind: SamplerKind,
    eps_fn: &mut E,
    labels: Vec<Label>,
    steps: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<SampleBatch> {
    match kind {
        SamplerKind::Ddpm => ddpm_sample(eps_fn, labels, sched, seed),
        SamplerKind::Ddim => ddim_sample(eps_fn, labels, steps, sched, seed),
    }
}
