//! Guidance: sampling-time combinations (CFG, DoG), training-time targets
//! (MG, DogFit), the guidance-strength distribution, the late-start and
//! cut-off schedules, and one fine-tuning step.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{EpsFn, NoiseSchedule};
use crate::neural::{Denoiser, DenoiserInput, FrozenDenoiser, OptimState, StepOutcome};
use crate::{Error, Label, Result, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    None,
    Cfg,
    Dog,
    Mg,
    Dogfit,
    DogfitControl,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::None,
        Method::Cfg,
        Method::Dog,
        Method::Mg,
        Method::Dogfit,
        Method::DogfitControl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Cfg => "cfg",
            Method::Dog => "dog",
            Method::Mg => "mg",
            Method::Dogfit => "dogfit",
            Method::DogfitControl => "dogfit_control",
        }
    }

    /// Network evaluations per point and sampling step.
    pub fn passes_per_step(self) -> u64 {
        match self {
            Method::Cfg | Method::Dog => 2,
            _ => 1,
        }
    }

    /// Needs an unconditional branch of the fine-tuned model, hence labels.
    pub fn needs_labels(self) -> bool {
        matches!(self, Method::Cfg | Method::Mg)
    }

    /// Uses the frozen source model (in training or sampling).
    pub fn needs_source(self) -> bool {
        matches!(self, Method::Dog | Method::Dogfit | Method::DogfitControl)
    }

    pub fn w_conditioned(self) -> bool {
        self == Method::DogfitControl
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub method: Method,
    /// Guidance strength for fixed-w methods.
    pub w: f64,
    /// Decay rate of the sampled-w distribution.
    pub lambda: f64,
    /// Late start: guidance only after this many training steps.
    pub tau_s: usize,
    /// Cut-off: guidance only for normalized times below this.
    pub tau_c: f64,
    pub label_dropout: f64,
}

impl GuidanceConfig {
    /// Defaults for `method` over `total_steps` fine-tuning steps: w = 1.5,
    /// λ = 3, τ_s = S/2, τ_c = 0.5, label dropout 0.1 for CFG and MG.
    pub fn for_method(method: Method, total_steps: usize) -> Self {
        Self {
            method,
            w: 1.5,
            lambda: 3.0,
            tau_s: total_steps / 2,
            tau_c: 0.5,
            label_dropout: if method.needs_labels() { 0.1 } else { 0.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 1.0) {
            return Err(Error::InvalidArgument(format!("w = {} must be >= 1", self.w)));
        }
        if !(0.0..=1.0).contains(&self.tau_c) {
            return Err(Error::InvalidArgument(format!("tau_c = {} outside [0, 1]", self.tau_c)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidArgument(format!("lambda = {} must be > 0", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.label_dropout) {
            return Err(Error::InvalidArgument(format!(
                "label_dropout = {} outside [0, 1)",
                self.label_dropout
            )));
        }
        Ok(())
    }
}

fn combine(a: &[f64], b: &[f64], w: f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + (w - 1.0) * (x - y)).collect()
}

fn offset_target(eps: &[f64], hi: &[f64], lo: &[f64], w: f64) -> Vec<f64> {
    debug_assert!(eps.len() == hi.len() && hi.len() == lo.len());
    eps.iter()
        .zip(hi.iter().zip(lo))
        .map(|(e, (h, l))| e + (w - 1.0) * (h - l))
        .collect()
}

/// Classifier-free guidance: `ε_c + (w−1)(ε_c − ε_u)`.
pub fn cfg_combine(eps_c: &[f64], eps_u: &[f64], w: f64) -> Vec<f64> {
    combine(eps_c, eps_u, w)
}

/// Domain guidance: CFG with the frozen source supplying the marginal term.
pub fn dog_combine(eps_c_target: &[f64], eps_u_source: &[f64], w: f64) -> Vec<f64> {
    combine(eps_c_target, eps_u_source, w)
}

/// Model-guidance target `ε + (w−1)(ε_c − ε_u)`. The offset is a plain value
/// here, so a loss against it carries no gradient through the offset.
pub fn mg_target(eps: &[f64], eps_c: &[f64], eps_u: &[f64], w: f64) -> Vec<f64> {
    offset_target(eps, eps_c, eps_u, w)
}

/// DogFit target `ε + (w−1)(ε_c,target − ε_u,source)`, offset detached.
pub fn dogfit_target(eps: &[f64], eps_c_target: &[f64], eps_u_source: &[f64], w: f64) -> Vec<f64> {
    offset_target(eps, eps_c_target, eps_u_source, w)
}

/// Draw a guidance strength `w = 1 + z`, `z ~ Exp(λ)`, by inverting the CDF.
pub fn sample_w(lambda: f64, rng: &mut Rng) -> f64 {
    w_from_uniform(lambda, rng.random::<f64>())
}

fn w_from_uniform(lambda: f64, u: f64) -> f64 {
    1.0 - (-u).ln_1p() / lambda
}

/// `P(W ≤ w) = 1 − exp(−λ(w−1))`, zero below 1.
pub fn w_cdf(lambda: f64, w: f64) -> f64 {
    if w < 1.0 {
        0.0
    } else {
        -(-lambda * (w - 1.0)).exp_m1()
    }
}

/// Guidance is applied at step `s` and time `t_norm` iff `s > τ_s` and `t_norm < τ_c`.
pub fn schedule_active(s: usize, t_norm: f64, cfg: &GuidanceConfig) -> bool {
    s > cfg.tau_s && t_norm < cfg.tau_c
}

/// A minibatch of clean target points.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub x0: Array2<f64>,
    pub labels: Vec<Label>,
}

/// Fine-tuning state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub total: usize,
    pub model: Denoiser,
    pub source: Option<FrozenDenoiser>,
    pub opt: OptimState,
    pub rng: Rng,
    pub skipped_steps: usize,
    consecutive_bad: usize,
    /// Every guidance strength drawn (controllable method only).
    pub w_history: Vec<f64>,
    /// Checksum of the frozen label table once guidance modulation is fixed.
    pub frozen_label_checksum: Option<u64>,
}

/// What one [`train_step`] did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub skipped: bool,
    /// Rows of the batch that received a guided target.
    pub guided: usize,
}

/// Consecutive non-finite losses after which training aborts.
pub const MAX_CONSECUTIVE_BAD_STEPS: usize = 10;

impl TrainState {
    pub fn new(model: Denoiser, source: Option<FrozenDenoiser>, total: usize, lr: f64, rng: Rng) -> Self {
        let opt = OptimState::new(model.num_params(), lr);
        Self {
            step: 0,
            total,
            model,
            source,
            opt,
            rng,
            skipped_steps: 0,
            consecutive_bad: 0,
            w_history: Vec::new(),
            frozen_label_checksum: None,
        }
    }
}

/// Per-row randomness of one training step, always drawn in the same order
/// so that every method consumes the stream identically.
struct Draws {
    eps: Array2<f64>,
    t_norm: Vec<f64>,
    w: Vec<f64>,
    keep_label: Vec<bool>,
}

fn draw(n: usize, dim: usize, cfg: &GuidanceConfig, rng: &mut Rng) -> Draws {
    let mut eps = Array2::zeros((n, dim));
    let mut t_norm = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut keep_label = Vec::with_capacity(n);
    for i in 0..n {
        for j in 0..dim {
            eps[[i, j]] = StandardNormal.sample(rng);
        }
        t_norm.push(rng.random::<f64>());
        let u_w: f64 = rng.random();
        w.push(match cfg.method {
            Method::DogfitControl => w_from_uniform(cfg.lambda, u_w),
            _ => cfg.w,
        });
        let u_drop: f64 = rng.random();
        keep_label.push(u_drop >= cfg.label_dropout);
    }
    Draws {
        eps,
        t_norm,
        w,
        keep_label,
    }
}

fn rows(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    a.select(Axis(0), idx)
}

/// One fine-tuning step: sample noise, time and (for the controllable
/// method) guidance strength per row, corrupt, build the method's target,
/// take one optimizer step on the mean squared error.
pub fn train_step(
    state: &mut TrainState,
    batch: &TrainBatch,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<StepReport> {
    let n = batch.x0.nrows();
    if n == 0 || batch.labels.len() != n {
        return Err(Error::Shape(format!(
            "batch of {n} points with {} labels",
            batch.labels.len()
        )));
    }
    cfg.validate()?;
    if cfg.method.needs_source() && state.source.is_none() {
        return Err(Error::MissingModel(format!("{} needs the frozen source", cfg.method)));
    }
    if cfg.method.needs_labels() && cfg.label_dropout <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "{} needs label_dropout > 0 to learn an unconditional branch",
            cfg.method
        )));
    }

    state.step += 1;
    let s = state.step;
    if state.model.arch().w_conditioning && s == cfg.tau_s + 1 {
        state.model.refresh_frozen_labels();
        state.frozen_label_checksum = Some(state.model.params().checksum(Some("label_embed_frozen")));
    }

    let d = draw(n, batch.x0.ncols(), cfg, &mut state.rng);
    if cfg.method == Method::DogfitControl {
        state.w_history.extend_from_slice(&d.w);
    }
    let labels: Vec<Label> = batch
        .labels
        .iter()
        .zip(&d.keep_label)
        .map(|(l, keep)| if *keep { *l } else { None })
        .collect();
    let steps: Vec<usize> = d.t_norm.iter().map(|t| sched.step_for(*t)).collect();
    let x_t = crate::diffusion::forward_noise_batch(batch.x0.view(), &steps, d.eps.view(), sched)?;

    let mut target = d.eps.clone();
    let active: Vec<usize> = match cfg.method {
        Method::None | Method::Cfg | Method::Dog => Vec::new(),
        _ => (0..n).filter(|&i| schedule_active(s, d.t_norm[i], cfg)).collect(),
    };
    if !active.is_empty() {
        let xa = rows(&x_t, &active);
        let ta: Vec<f64> = active.iter().map(|&i| d.t_norm[i]).collect();
        let la: Vec<Label> = active.iter().map(|&i| labels[i]).collect();
        let ones = vec![1.0; active.len()];
        let nulls = vec![None; active.len()];
        // ε_θ(x_t | c, w = 1), detached
        let eps_c = state.model.forward(&DenoiserInput {
            x: xa.view(),
            t_norm: &ta,
            labels: &la,
            w: &ones,
        })?;
        let eps_u = match cfg.method {
            Method::Mg => state.model.forward(&DenoiserInput {
                x: xa.view(),
                t_norm: &ta,
                labels: &nulls,
                w: &ones,
            })?,
            _ => state
                .source
                .as_ref()
                .expect("checked above")
                .forward(&DenoiserInput {
                    x: xa.view(),
                    t_norm: &ta,
                    labels: &nulls,
                    w: &ones,
                })?,
        };
        for (k, &i) in active.iter().enumerate() {
            let eps_row = d.eps.row(i).to_vec();
            let hi = eps_c.row(k).to_vec();
            let lo = eps_u.row(k).to_vec();
            let t = match cfg.method {
                Method::Mg => mg_target(&eps_row, &hi, &lo, d.w[i]),
                _ => dogfit_target(&eps_row, &hi, &lo, d.w[i]),
            };
            for (j, v) in t.into_iter().enumerate() {
                target[[i, j]] = v;
            }
        }
    }

    let input = DenoiserInput {
        x: x_t.view(),
        t_norm: &d.t_norm,
        labels: &labels,
        w: &d.w,
    };
    let (loss, grad) = match state.model.loss_and_grad(&input, target.view()) {
        Ok(v) => v,
        Err(Error::NonFinite(_)) => (f64::NAN, state.model.params().zeros_like()),
        Err(e) => return Err(e),
    };
    let mut skipped = !loss.is_finite();
    if !skipped {
        skipped = state.opt.step(state.model.params_mut(), &grad)? == StepOutcome::SkippedNonFinite;
    }
    if skipped {
        state.skipped_steps += 1;
        state.consecutive_bad += 1;
        log::warn!("training step {s}: non-finite loss, step skipped");
        if state.consecutive_bad >= MAX_CONSECUTIVE_BAD_STEPS {
            return Err(Error::Diverged(state.consecutive_bad));
        }
    } else {
        state.consecutive_bad = 0;
    }
    if let Some(sum) = state.frozen_label_checksum {
        debug_assert_eq!(sum, state.model.params().checksum(Some("label_embed_frozen")));
    }
    Ok(StepReport {
        loss,
        skipped,
        guided: active.len(),
    })
}

/// ε-prediction used at sampling time for each method, with a ledger of
/// network evaluations (per point).
pub struct GuidedSampler<'a> {
    pub method: Method,
    pub model: &'a Denoiser,
    pub source: Option<&'a Denoiser>,
    pub w: f64,
    pub sched: &'a NoiseSchedule,
    pub forward_passes: u64,
}

impl<'a> GuidedSampler<'a> {
    pub fn new(
        method: Method,
        model: &'a Denoiser,
        source: Option<&'a Denoiser>,
        w: f64,
        sched: &'a NoiseSchedule,
    ) -> Result<Self> {
        if method == Method::Dog && source.is_none() {
            return Err(Error::MissingModel("dog sampling needs the frozen source".into()));
        }
        if method == Method::DogfitControl && !model.arch().w_conditioning {
            return Err(Error::InvalidArgument(
                "dogfit_control sampling needs a w-conditioned model".into(),
            ));
        }
        Ok(Self {
            method,
            model,
            source,
            w,
            sched,
            forward_passes: 0,
        })
    }

    /// Guided ε for a batch at discrete step `t`.
    pub fn eps(&mut self, x: &Array2<f64>, t: usize, labels: &[Label]) -> Result<Array2<f64>> {
        let n = x.nrows();
        let t_norm = vec![self.sched.t_norm(t); n];
        let ones = vec![1.0; n];
        let nulls = vec![None; n];
        let cond_w: Vec<f64> = match self.method {
            Method::DogfitControl => vec![self.w; n],
            _ => ones.clone(),
        };
        let cond = self.model.forward(&DenoiserInput {
            x: x.view(),
            t_norm: &t_norm,
            labels,
            w: &cond_w,
        })?;
        self.forward_passes += n as u64;
        let uncond = match self.method {
            Method::Cfg => Some(self.model.forward(&DenoiserInput {
                x: x.view(),
                t_norm: &t_norm,
                labels: &nulls,
                w: &ones,
            })?),
            Method::Dog => Some(
                self.source
                    .ok_or_else(|| Error::MissingModel("frozen source".into()))?
                    .forward(&DenoiserInput {
                        x: x.view(),
                        t_norm: &t_norm,
                        labels: &nulls,
                        w: &ones,
                    })?,
            ),
            _ => None,
        };
        match uncond {
            None => Ok(cond),
            Some(u) => {
                self.forward_passes += n as u64;
                let w = self.w;
                Ok(&cond + &((&cond - &u) * (w - 1.0)))
            }
        }
    }
}

impl EpsFn for GuidedSampler<'_> {
    fn predict(&mut self, x: &Array2<f64>, t: usize, labels: &[Label]) -> Result<Array2<f64>> {
        self.eps(x, t, labels)
    }
}
