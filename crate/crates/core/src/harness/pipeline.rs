//! Pretrain → snapshot → fine-tune → sample → evaluate.

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::diffusion::{self, NoiseSchedule, SampleBatch, SamplerKind};
use crate::domains::{minibatch, Domain, DomainPair, Draw};
use crate::guidance::{train_step, GuidanceConfig, GuidedSampler, Method, TrainState};
use crate::metrics::{self, MetricsReport};
use crate::neural::{Denoiser, DenoiserInput, FrozenDenoiser};
use crate::oracle::{analytic_eps_batch, sample_mixture, GaussianMixture};
use crate::{derive_seed, rng_from_seed, Error, Label, Result};

/// Oracle agreement of a pretrained source model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    /// Mean L2 gap to the class-conditional oracle.
    pub conditional_gap: f64,
    /// Mean L2 gap of the null-label branch to the unconditional oracle.
    pub unconditional_gap: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Mean L2 distance between model and oracle ε over `probes` noisy states
/// `x_t` built from fresh mixture draws at uniformly drawn steps. With
/// `conditional`, the model and oracle see each draw's label; otherwise both
/// are unconditional.
pub fn oracle_gap(
    model: &Denoiser,
    mixture: &GaussianMixture,
    sched: &NoiseSchedule,
    probes: usize,
    conditional: bool,
    seed: u64,
) -> Result<f64> {
    let probe = ProbeSet::draw(mixture, sched, probes, seed)?;
    let labels: Vec<Label> = if conditional {
        probe.labels.clone()
    } else {
        vec![None; probes]
    };
    let pred = model.forward(&DenoiserInput {
        x: probe.x_t.view(),
        t_norm: &probe.t_norm,
        labels: &labels,
        w: &vec![1.0; probes],
    })?;
    let mut total = 0.0;
    for i in 0..probes {
        let xi = probe.x_t.row(i).to_owned().insert_axis(ndarray::Axis(0));
        let truth = analytic_eps_batch(mixture, &xi, probe.steps[i], sched, &labels[i..=i])?;
        let dx = pred[[i, 0]] - truth[[0, 0]];
        let dy = pred[[i, 1]] - truth[[0, 1]];
        total += (dx * dx + dy * dy).sqrt();
    }
    Ok(total / probes as f64)
}

/// Noisy probe states drawn from a mixture.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub x_t: Array2<f64>,
    pub steps: Vec<usize>,
    pub t_norm: Vec<f64>,
    pub labels: Vec<Label>,
}

impl ProbeSet {
    pub fn draw(mixture: &GaussianMixture, sched: &NoiseSchedule, n: usize, seed: u64) -> Result<Self> {
        Self::draw_in(mixture, sched, n, (0.0, 1.0), seed)
    }

    /// Probes with normalized time restricted to `[lo, hi)`.
    pub fn draw_in(
        mixture: &GaussianMixture,
        sched: &NoiseSchedule,
        n: usize,
        (lo, hi): (f64, f64),
        seed: u64,
    ) -> Result<Self> {
        let x0 = sample_mixture(mixture, n, derive_seed(seed, "probe-x0"))?;
        let mut rng = rng_from_seed(derive_seed(seed, "probe-noise"));
        let mut steps = Vec::with_capacity(n);
        let mut eps = Array2::zeros((n, crate::DATA_DIM));
        for i in 0..n {
            let t: f64 = lo + (hi - lo) * rng.random::<f64>();
            steps.push(sched.step_for(t));
            eps[[i, 0]] = StandardNormal.sample(&mut rng);
            eps[[i, 1]] = StandardNormal.sample(&mut rng);
        }
        let x_t = diffusion::forward_noise_batch(x0.points.view(), &steps, eps.view(), sched)?;
        let t_norm = steps.iter().map(|s| sched.t_norm(*s)).collect();
        Ok(Self {
            x_t,
            steps,
            t_norm,
            labels: x0.labels,
        })
    }
}

/// Train the source denoiser on the source domain with the plain denoising
/// loss and label conditioning (with label dropout so a null branch exists).
pub fn pretrain(cfg: &ExperimentConfig, source: &Domain, sched: &NoiseSchedule) -> Result<(Denoiser, GateReport)> {
    let p = &cfg.pretrain;
    let seed = p.seed;
    let arch = cfg.architecture(source.num_classes(), false);
    let model = Denoiser::new(arch, &mut rng_from_seed(derive_seed(seed, "pretrain-init")))?;
    let gcfg = GuidanceConfig {
        method: Method::None,
        w: 1.0,
        lambda: 1.0,
        tau_s: p.steps,
        tau_c: 0.0,
        label_dropout: p.label_dropout,
    };
    let mut state = TrainState::new(model, None, p.steps, p.lr, rng_from_seed(derive_seed(seed, "pretrain-train")));
    let mut batch_rng = rng_from_seed(derive_seed(seed, "pretrain-batches"));
    for s in 0..p.steps {
        let batch = minibatch(&source.data, p.batch_size, Draw::WithReplacement, &mut batch_rng)?;
        let report = train_step(&mut state, &batch, &gcfg, sched)?;
        if (s + 1) % 5000 == 0 {
            log::info!("pretrain step {}/{}: loss {:.4}", s + 1, p.steps, report.loss);
        }
    }
    let model = state.model;
    let gate = gate_report(&model, source, sched, cfg)?;
    Ok((model, gate))
}

pub fn gate_report(model: &Denoiser, source: &Domain, sched: &NoiseSchedule, cfg: &ExperimentConfig) -> Result<GateReport> {
    let p = &cfg.pretrain;
    let seed = derive_seed(p.seed, "gate");
    let conditional_gap = if source.labeled() {
        oracle_gap(model, &source.mixture, sched, p.gate_probes, true, seed)?
    } else {
        0.0
    };
    let unconditional_gap = oracle_gap(model, &source.mixture, sched, p.gate_probes, false, seed)?;
    Ok(GateReport {
        conditional_gap,
        unconditional_gap,
        threshold: p.gate_threshold,
        passed: conditional_gap.max(unconditional_gap) < p.gate_threshold,
    })
}

/// Result of one fine-tuning run.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: Denoiser,
    pub w_history: Vec<f64>,
    pub skipped_steps: usize,
    pub final_loss: f64,
}

/// Reject methods the target domain cannot support.
pub fn check_method(method: Method, target: &Domain) -> Result<()> {
    if method.needs_labels() && !target.labeled() {
        return Err(Error::UnsupportedMethod {
            method: method.to_string(),
            reason: "it needs class labels to separate conditional and unconditional branches, \
                     and the target domain is unlabeled"
                .into(),
        });
    }
    Ok(())
}

/// Fine-tune a copy of `source` on the target domain. `observe` sees the
/// state after every step.
pub fn finetune(
    cfg: &ExperimentConfig,
    pair: &DomainPair,
    source: &FrozenDenoiser,
    gcfg: &GuidanceConfig,
    seed: u64,
    sched: &NoiseSchedule,
    mut observe: impl FnMut(&TrainState),
) -> Result<FinetuneOutcome> {
    check_method(gcfg.method, &pair.target)?;
    gcfg.validate()?;
    let f = &cfg.finetune;
    let model = source.adapted(
        pair.target.num_classes(),
        gcfg.method.w_conditioned(),
        &mut rng_from_seed(derive_seed(seed, "finetune-labels")),
    )?;
    let mut state = TrainState::new(
        model,
        Some(source.clone()),
        f.steps,
        f.lr,
        rng_from_seed(derive_seed(seed, "finetune-train")),
    );
    let mut batch_rng = rng_from_seed(derive_seed(seed, "finetune-batches"));
    let mut final_loss = f64::NAN;
    for _ in 0..f.steps {
        let batch = minibatch(&pair.target.data, f.batch_size, Draw::WithReplacement, &mut batch_rng)?;
        final_loss = train_step(&mut state, &batch, gcfg, sched)?.loss;
        observe(&state);
    }
    Ok(FinetuneOutcome {
        model: state.model,
        w_history: state.w_history,
        skipped_steps: state.skipped_steps,
        final_loss,
    })
}

/// Labels to generate with: drawn from the target's class proportions, or
/// all null for an unlabeled target.
pub fn generation_labels(target: &GaussianMixture, n: usize, seed: u64) -> Result<Vec<Label>> {
    let Some(labels) = &target.labels else {
        return Ok(vec![None; n]);
    };
    let pick = WeightedIndex::new(&target.weights)
        .map_err(|e| Error::InvalidArgument(format!("mixture weights: {e}")))?;
    let mut rng = rng_from_seed(seed);
    Ok((0..n).map(|_| Some(labels[pick.sample(&mut rng)])).collect())
}

/// Generated batch plus the number of network evaluations it took.
#[derive(Debug, Clone)]
pub struct Generation {
    pub batch: SampleBatch,
    pub forward_passes: u64,
}

#[allow(clippy::too_many_arguments)]
pub fn generate(
    method: Method,
    model: &Denoiser,
    source: Option<&Denoiser>,
    w: f64,
    sampler: SamplerKind,
    steps: usize,
    labels: Vec<Label>,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Generation> {
    let mut eps = GuidedSampler::new(method, model, source, w, sched)?;
    let batch = diffusion::sample(sampler, &mut eps, labels, steps, sched, seed)?;
    Ok(Generation {
        batch,
        forward_passes: eps.forward_passes,
    })
}

/// Every metric of `gen` against fresh draws from the target mixture.
pub fn evaluate(gen: &SampleBatch, target: &GaussianMixture, cfg: &ExperimentConfig, seed: u64) -> Result<MetricsReport> {
    let n_real = gen.len();
    let real = sample_mixture(target, n_real, derive_seed(seed, "eval-real"))?;
    let frechet = metrics::frechet_gaussian(gen.points.view(), real.points.view())?.value;
    let mmd2 = metrics::mmd_rbf(gen.points.view(), real.points.view(), cfg.eval.bandwidth)?;
    let pr = metrics::precision_recall_knn(real.points.view(), gen.points.view(), cfg.eval.k)?;
    let support_frac = metrics::target_support_fraction(
        gen.points.view(),
        target,
        cfg.eval.quantile,
        derive_seed(seed, "eval-support"),
    )?;
    Ok(MetricsReport {
        frechet,
        mmd2,
        precision: pr.precision,
        recall: pr.recall,
        support_frac,
        n_gen: gen.len(),
        n_real,
    })
}
