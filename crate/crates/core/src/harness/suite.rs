//! Multi-run orchestration and on-disk run artifacts.
//!
//! Layout under the output directory:
//!
//! ```text
//! config.toml            stored configuration
//! source.dgf/.json       source checkpoint and its gate report
//! runs/<run_id>/         model.dgf, run.json, samples-<tag>.csv
//! summary.csv            one row per evaluated generation
//! aggregate.csv          mean and sd over seeds
//! suite.log              invalid or failed runs
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{fnv1a, ExperimentConfig};
use super::pipeline::{self, GateReport};
use super::report::{self, MetricsRow, SummaryAppender};
use crate::diffusion::{NoiseSchedule, SampleBatch, SamplerKind};
use crate::domains::{build_pair, DomainPair};
use crate::guidance::{GuidanceConfig, Method};
use crate::neural::{load_checkpoint, save_checkpoint, Denoiser, FrozenDenoiser};
use crate::{derive_seed, Error, Result};

/// Fraction of sampled w values falling in [1, 2] and a coarse histogram
/// over [1, 4) in bins of 0.25 (the last bin also holds larger values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WHistogram {
    pub count: usize,
    pub mass_1_2: f64,
    pub bins: Vec<usize>,
}

impl WHistogram {
    pub fn from_draws(ws: &[f64]) -> Self {
        let mut bins = vec![0; 12];
        for &w in ws {
            let b = (((w - 1.0) / 0.25).floor().max(0.0) as usize).min(bins.len() - 1);
            bins[b] += 1;
        }
        let inside = ws.iter().filter(|w| (1.0..=2.0).contains(*w)).count();
        Self {
            count: ws.len(),
            mass_1_2: if ws.is_empty() { 0.0 } else { inside as f64 / ws.len() as f64 },
            bins,
        }
    }
}

/// Everything needed to trace and replay one fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub method: Method,
    pub seed: u64,
    pub guidance: GuidanceConfig,
    pub source_checkpoint: PathBuf,
    pub source_checksum: String,
    pub checkpoint: PathBuf,
    pub checksum: String,
    pub source_gate: GateReport,
    pub valid: bool,
    pub w_history: WHistogram,
    pub skipped_steps: usize,
    pub final_loss: f64,
    pub sample_files: Vec<PathBuf>,
    /// Forward passes per generation row, same order as `sample_files`.
    pub fwd_passes: Vec<u64>,
    pub log: Vec<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Sampler setting of one evaluated generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowSetting {
    pub w: f64,
    pub sampler: SamplerKind,
    pub steps: usize,
}

impl RowSetting {
    pub fn tag(&self) -> String {
        format!("{}-{}-w{}", self.sampler.as_str(), self.steps, self.w)
    }
}

/// The generations evaluated for `method`: the default setting, the w sweep
/// (controllable models only), then the deterministic step sweep.
pub fn row_settings(cfg: &ExperimentConfig, method: Method) -> Vec<RowSetting> {
    let s = &cfg.sampling;
    let w = if method == Method::None { 1.0 } else { cfg.guidance.w };
    let mut out = vec![RowSetting {
        w,
        sampler: s.sampler,
        steps: s.steps,
    }];
    let mut push = |r: RowSetting| {
        if !out.contains(&r) {
            out.push(r);
        }
    };
    if method == Method::DogfitControl {
        for &sw in &s.w_sweep {
            push(RowSetting {
                w: sw,
                sampler: s.sampler,
                steps: s.steps,
            });
        }
    }
    for &steps in &s.step_sweep {
        push(RowSetting {
            w,
            sampler: SamplerKind::Ddim,
            steps,
        });
    }
    out
}

pub fn run_id(method: Method, seed: u64) -> String {
    format!("{}-s{seed}", method.as_str())
}

fn hex(v: u64) -> String {
    format!("{v:016x}")
}

/// Key of everything the source model depends on.
fn source_key(cfg: &ExperimentConfig) -> String {
    let parts = (&cfg.domain, &cfg.schedule, &cfg.model, &cfg.pretrain);
    hex(fnv1a(serde_json::to_string(&parts).expect("serializable").as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SourceRecord {
    key: String,
    checksum: String,
    gate: GateReport,
}

/// A pretrained source with its gate report.
#[derive(Debug, Clone)]
pub struct Source {
    pub model: FrozenDenoiser,
    pub gate: GateReport,
}

/// Load `out/source.dgf` if it was trained under the same settings,
/// otherwise pretrain and store it.
pub fn obtain_source(cfg: &ExperimentConfig, pair: &DomainPair, sched: &NoiseSchedule, out: &Path) -> Result<Source> {
    let ck = out.join("source.dgf");
    let meta = out.join("source.json");
    let key = source_key(cfg);
    if ck.exists() && meta.exists() {
        let rec: SourceRecord = serde_json::from_str(&fs::read_to_string(&meta)?)?;
        let model = load_checkpoint(&ck)?;
        if rec.key == key && rec.checksum == hex(model.params().checksum(None)) {
            log::info!("reusing source checkpoint {}", ck.display());
            return Ok(Source {
                model: FrozenDenoiser::snapshot(&model),
                gate: rec.gate,
            });
        }
    }
    let start = Instant::now();
    let (model, gate) = pipeline::pretrain(cfg, &pair.source, sched)?;
    log::info!("pretrained source in {:.1?}: {gate:?}", start.elapsed());
    fs::create_dir_all(out)?;
    save_checkpoint(&model, &ck)?;
    let rec = SourceRecord {
        key,
        checksum: hex(model.params().checksum(None)),
        gate,
    };
    fs::write(&meta, serde_json::to_string_pretty(&rec)?)?;
    Ok(Source {
        model: FrozenDenoiser::snapshot(&model),
        gate,
    })
}

/// Fine-tuned model of one (method, seed) run with its evaluated rows.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub model: Denoiser,
    pub rows: Vec<MetricsRow>,
}

/// Fine-tune one run and build its manifest (without generation rows).
/// The checkpoint and manifest are written to `run_dir` when given.
pub fn finetune_run(
    cfg: &ExperimentConfig,
    pair: &DomainPair,
    source: &Source,
    method: Method,
    seed: u64,
    sched: &NoiseSchedule,
    run_dir: Option<&Path>,
) -> Result<(Denoiser, RunManifest)> {
    let g = cfg.guidance_for(method);
    let id = run_id(method, seed);
    let start = Instant::now();
    let ft = pipeline::finetune(cfg, pair, &source.model, &g, seed, sched, |_| {})?;
    let line = format!(
        "fine-tuned {id} in {} ms, final loss {:.5}, {} skipped steps",
        start.elapsed().as_millis(),
        ft.final_loss,
        ft.skipped_steps
    );
    let manifest = RunManifest {
        run_id: id,
        config_hash: hex(cfg.hash()),
        method,
        seed,
        guidance: g,
        source_checkpoint: PathBuf::from("../../source.dgf"),
        source_checksum: hex(source.model.params().checksum(None)),
        checkpoint: PathBuf::from("model.dgf"),
        checksum: hex(ft.model.params().checksum(None)),
        source_gate: source.gate,
        valid: source.gate.passed,
        w_history: WHistogram::from_draws(&ft.w_history),
        skipped_steps: ft.skipped_steps,
        final_loss: ft.final_loss,
        sample_files: Vec::new(),
        fwd_passes: Vec::new(),
        log: vec![line],
    };
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir)?;
        save_checkpoint(&ft.model, &dir.join("model.dgf"))?;
        manifest.save(&dir.join("run.json"))?;
    }
    Ok((ft.model, manifest))
}

/// Generate with a fine-tuned model at one setting and evaluate it. Every
/// setting of a run shares its label and noise seeds.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_setting(
    cfg: &ExperimentConfig,
    pair: &DomainPair,
    source: &Denoiser,
    model: &Denoiser,
    method: Method,
    seed: u64,
    setting: RowSetting,
    sched: &NoiseSchedule,
) -> Result<(MetricsRow, SampleBatch)> {
    let g = cfg.guidance_for(method);
    let start = Instant::now();
    let labels = pipeline::generation_labels(&pair.target.mixture, cfg.sampling.n, derive_seed(seed, "generate-labels"))?;
    let gen = pipeline::generate(
        method,
        model,
        Some(source),
        setting.w,
        setting.sampler,
        setting.steps,
        labels,
        sched,
        derive_seed(seed, "generate"),
    )?;
    let m = pipeline::evaluate(&gen.batch, &pair.target.mixture, cfg, derive_seed(seed, "evaluate"))?;
    let row = MetricsRow {
        run_id: run_id(method, seed),
        method: method.as_str().into(),
        seed,
        w: setting.w,
        lambda: g.lambda,
        tau_s: g.tau_s,
        tau_c: g.tau_c,
        sampler: setting.sampler.as_str().into(),
        steps: setting.steps,
        n_gen: m.n_gen,
        frechet: m.frechet,
        mmd2: m.mmd2,
        precision: m.precision,
        recall: m.recall,
        support_frac: m.support_frac,
        fwd_passes: gen.forward_passes,
        wall_ms: start.elapsed().as_millis() as u64,
    };
    Ok((row, gen.batch))
}

/// Fine-tune, sample and evaluate one run. Artifacts go to `run_dir` when given.
pub fn execute_run(
    cfg: &ExperimentConfig,
    pair: &DomainPair,
    source: &Source,
    method: Method,
    seed: u64,
    sched: &NoiseSchedule,
    run_dir: Option<&Path>,
) -> Result<RunOutput> {
    let (model, mut manifest) = finetune_run(cfg, pair, source, method, seed, sched, run_dir)?;
    let mut rows = Vec::new();
    for setting in row_settings(cfg, method) {
        let (row, batch) = evaluate_setting(cfg, pair, &source.model, &model, method, seed, setting, sched)?;
        if let Some(dir) = run_dir {
            let file = PathBuf::from(format!("samples-{}.csv", setting.tag()));
            report::write_samples(&dir.join(&file), &batch)?;
            manifest.sample_files.push(file);
        }
        manifest.fwd_passes.push(row.fwd_passes);
        rows.push(row);
    }
    if let Some(dir) = run_dir {
        manifest.save(&dir.join("run.json"))?;
    }
    Ok(RunOutput { manifest, model, rows })
}

/// Outcome of [`run_suite`].
#[derive(Debug, Clone)]
pub struct SuiteOutput {
    pub source_gate: GateReport,
    pub manifests: Vec<RunManifest>,
    /// Rows of valid runs, as written to `summary.csv`.
    pub rows: Vec<MetricsRow>,
    /// Runs that failed or were excluded, with the reason.
    pub excluded: Vec<(String, String)>,
}

/// Every configured (method, seed) run, with artifacts under `cfg.out_dir`.
pub fn run_suite(cfg: &ExperimentConfig) -> Result<SuiteOutput> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(out.join("runs"))?;
    cfg.save(&out.join("config.toml"))?;
    let sched = cfg.schedule()?;
    let pair = build_pair(&cfg.domain, cfg.pretrain.seed)?;
    report::write_samples(&out.join("target.csv"), &pair.target.data)?;
    let source = obtain_source(cfg, &pair, &sched, &out)?;
    if !source.gate.passed {
        log::warn!("source gate failed: {:?}; runs are marked invalid", source.gate);
    }

    let mut summary = SummaryAppender::create(&out.join("summary.csv"))?;
    let mut log_lines = Vec::new();
    let mut result = SuiteOutput {
        source_gate: source.gate,
        manifests: Vec::new(),
        rows: Vec::new(),
        excluded: Vec::new(),
    };
    for &method in &cfg.guidance.methods {
        for &seed in &cfg.finetune.seeds {
            let id = run_id(method, seed);
            let dir = out.join("runs").join(&id);
            match execute_run(cfg, &pair, &source, method, seed, &sched, Some(&dir)) {
                Ok(run) if run.manifest.valid => {
                    log::info!("{id}: {} rows", run.rows.len());
                    for r in &run.rows {
                        summary.append(r)?;
                    }
                    result.rows.extend(run.rows);
                    result.manifests.push(run.manifest);
                }
                Ok(run) => {
                    let why = "source gate failed".to_string();
                    log_lines.push(format!("{id}: excluded: {why}"));
                    result.excluded.push((id, why));
                    result.manifests.push(run.manifest);
                }
                Err(e) => {
                    log::warn!("{id}: {e}");
                    log_lines.push(format!("{id}: failed: {e}"));
                    result.excluded.push((id, e.to_string()));
                }
            }
        }
    }
    report::write_aggregate(&out.join("aggregate.csv"), &result.rows)?;
    fs::write(out.join("suite.log"), log_lines.join("\n") + "\n")?;
    Ok(result)
}

/// Rebuild a stored run from its directory's config and seed alone, retraining
/// the source, and return the fresh rows.
pub fn replay(out_dir: &Path, run_id: &str) -> Result<Vec<MetricsRow>> {
    let cfg = ExperimentConfig::load(&out_dir.join("config.toml"))?;
    let manifest = RunManifest::load(&out_dir.join("runs").join(run_id).join("run.json"))?;
    if manifest.config_hash != hex(cfg.hash()) {
        return Err(Error::Config(format!(
            "{run_id}: stored config hash {} does not match config.toml ({})",
            manifest.config_hash,
            hex(cfg.hash())
        )));
    }
    let sched = cfg.schedule()?;
    let pair = build_pair(&cfg.domain, cfg.pretrain.seed)?;
    let (model, gate) = pipeline::pretrain(&cfg, &pair.source, &sched)?;
    let source = Source {
        model: FrozenDenoiser::snapshot(&model),
        gate,
    };
    Ok(execute_run(&cfg, &pair, &source, manifest.method, manifest.seed, &sched, None)?.rows)
}

/// Load the fine-tuned model of a stored run.
pub fn load_run_model(out_dir: &Path, run_id: &str) -> Result<Denoiser> {
    let dir = out_dir.join("runs").join(run_id);
    let manifest = RunManifest::load(&dir.join("run.json"))?;
    let model = load_checkpoint(&dir.join(&manifest.checkpoint))?;
    if hex(model.params().checksum(None)) != manifest.checksum {
        return Err(Error::Checkpoint {
            path: dir.join(&manifest.checkpoint),
            reason: "checksum differs from run.json".into(),
        });
    }
    Ok(model)
}
