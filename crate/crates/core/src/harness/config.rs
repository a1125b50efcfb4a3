use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, SamplerKind};
use crate::domains::DomainSpec;
use crate::guidance::{GuidanceConfig, Method};
use crate::neural::Architecture;
use crate::{Error, Result};

/// A documented default experiment; `dogfit suite` with no `--config` runs this.
pub const DEFAULT_CONFIG_TOML: &str = r#"# Output directory for checkpoints, samples, CSV and SVG files.
out_dir = "runs"

[domain]
# ring_shift | subset_only | unlabeled_faces_analogue
kind = "ring_shift"
num_source_components = 8
num_target_components = 3
# displacement of every target component
shift = [0.3, 0.0]
# isotropic component variance
component_cov = 0.05
# distance between neighbouring ring components
spacing = 1.0
n_source = 50000
n_target = 1500
labeled = true

[schedule]
steps = 1000
beta_min = 0.0001
beta_max = 0.02

[model]
hidden = [128, 128, 128, 128]
embed_dim = 64

[pretrain]
steps = 30000
batch_size = 64
lr = 0.001
seed = 0
# source null-label rate, so the frozen source has an unconditional branch
label_dropout = 0.1
# oracle-agreement gate: mean L2 gap of ε predictions over `gate_probes` states
gate_threshold = 0.15
gate_probes = 1000

[finetune]
steps = 8000
batch_size = 64
lr = 0.0001
seeds = [0, 1, 2]

[guidance]
methods = ["none", "cfg", "dog", "mg", "dogfit", "dogfit_control"]
w = 1.5
lambda = 3.0
# late start; omitted means half of finetune.steps
# tau_s = 4000
tau_c = 0.5
# label dropout for cfg and mg fine-tuning
label_dropout = 0.1

[sampling]
# ddim (deterministic) | ddpm (ancestral, always all schedule steps)
sampler = "ddim"
steps = 50
n = 5000
# sampling-time guidance strengths swept for dogfit_control
w_sweep = [1.0, 1.25, 1.5, 1.75, 2.0]
# sampler step counts swept for every method
step_sweep = [10, 25, 50, 100]

[eval]
k = 5
quantile = 0.05
# RBF bandwidth; omitted means the median pairwise distance
# bandwidth = 0.5
"#;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub label_dropout: f64,
    pub gate_threshold: f64,
    pub gate_probes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSection {
    pub methods: Vec<Method>,
    pub w: f64,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_s: Option<usize>,
    pub tau_c: f64,
    pub label_dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub sampler: SamplerKind,
    pub steps: usize,
    pub n: usize,
    #[serde(default)]
    pub w_sweep: Vec<f64>,
    #[serde(default)]
    pub step_sweep: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub quantile: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub domain: DomainSpec,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub guidance: GuidanceSection,
    pub sampling: SamplingConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_toml_str(DEFAULT_CONFIG_TOML).expect("built-in config parses")
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    /// 64-bit FNV-1a over the canonical TOML rendering.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_toml_string().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.domain.validate()?;
        self.schedule()?;
        if self.model.hidden.is_empty() {
            return bad("model.hidden must list at least one layer");
        }
        self.architecture(1, false).validate()?;
        if self.pretrain.batch_size == 0 || self.finetune.batch_size == 0 {
            return bad("batch sizes must be >= 1");
        }
        if !(0.0..1.0).contains(&self.pretrain.label_dropout) {
            return bad("pretrain.label_dropout outside [0, 1)");
        }
        if self.finetune.seeds.is_empty() {
            return bad("finetune.seeds must be nonempty");
        }
        if self.guidance.methods.is_empty() {
            return bad("guidance.methods must be nonempty");
        }
        for m in &self.guidance.methods {
            self.guidance_for(*m).validate()?;
        }
        if self.sampling.n <= self.eval.k {
            return bad("sampling.n must exceed eval.k");
        }
        if self.sampling.steps == 0 || self.sampling.steps > self.schedule.steps {
            return bad("sampling.steps outside 1..=schedule.steps");
        }
        if self
            .sampling
            .step_sweep
            .iter()
            .any(|s| *s == 0 || *s > self.schedule.steps)
        {
            return bad("sampling.step_sweep entries outside 1..=schedule.steps");
        }
        if self.sampling.w_sweep.iter().any(|w| !(*w >= 1.0)) {
            return bad("sampling.w_sweep entries must be >= 1");
        }
        if !(self.eval.quantile > 0.0 && self.eval.quantile < 1.0) {
            return bad("eval.quantile outside (0, 1)");
        }
        if self.eval.bandwidth.is_some_and(|b| !(b > 0.0)) {
            return bad("eval.bandwidth must be > 0");
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule.steps, self.schedule.beta_min, self.schedule.beta_max)
    }

    pub fn architecture(&self, num_classes: usize, w_conditioning: bool) -> Architecture {
        Architecture {
            hidden: self.model.hidden.clone(),
            embed_dim: self.model.embed_dim,
            ..Architecture::standard(num_classes, w_conditioning)
        }
    }

    /// Fine-tuning guidance settings for `method`.
    pub fn guidance_for(&self, method: Method) -> GuidanceConfig {
        let g = &self.guidance;
        GuidanceConfig {
            method,
            w: g.w,
            lambda: g.lambda,
            tau_s: g.tau_s.unwrap_or(self.finetune.steps / 2),
            tau_c: g.tau_c,
            label_dropout: if method.needs_labels() { g.label_dropout } else { 0.0 },
        }
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_matches_documented_values() {
        let c = ExperimentConfig::default();
        assert_eq!(c.finetune.steps, 8000);
        assert_eq!(c.pretrain.steps, 30_000);
        assert_eq!(c.finetune.batch_size, 64);
        assert_eq!(c.sampling.n, 5000);
        assert_eq!(c.sampling.steps, 50);
        assert_eq!(c.sampling.sampler, SamplerKind::Ddim);
        assert_eq!(c.eval.k, 5);
        let g = c.guidance_for(Method::Dogfit);
        assert_eq!((g.w, g.tau_s, g.tau_c, g.label_dropout), (1.5, 4000, 0.5, 0.0));
        assert_eq!(c.guidance_for(Method::Cfg).label_dropout, 0.1);
    }

    #[test]
    fn round_trip_preserves_hash() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.finetune.lr = 2e-4;
        assert_ne!(d.hash(), c.hash());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let text = DEFAULT_CONFIG_TOML.replace("k = 5", "k = 5\nextra = 1");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let text = DEFAULT_CONFIG_TOML.replace("seeds = [0, 1, 2]", "seeds = []");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let text = DEFAULT_CONFIG_TOML.replace("tau_c = 0.5", "tau_c = 1.5");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn fnv1a_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
