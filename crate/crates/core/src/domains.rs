//! Source/target domain pairs on a ring of Gaussian components.

use std::f64::consts::PI;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::SampleBatch;
use crate::guidance::TrainBatch;
use crate::oracle::{sample_mixture, GaussianMixture};
use crate::{derive_seed, Error, Point, Result, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    /// Target components are source components moved by `shift`.
    RingShift,
    /// Target components are exact source components.
    SubsetOnly,
    /// Like `RingShift` but the target carries no labels.
    UnlabeledFacesAnalogue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub num_source_components: usize,
    pub num_target_components: usize,
    /// Displacement applied to every target component.
    pub shift: [f64; 2],
    /// Isotropic variance of every component.
    pub component_cov: f64,
    /// Distance between neighbouring source components on the ring.
    pub spacing: f64,
    pub n_source: usize,
    pub n_target: usize,
    pub labeled: bool,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            kind: DomainKind::RingShift,
            num_source_components: 8,
            num_target_components: 3,
            shift: [0.3, 0.0],
            component_cov: 0.05,
            spacing: 1.0,
            n_source: 50_000,
            n_target: 1_500,
            labeled: true,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_source_components < 1 || self.num_target_components < 1 {
            return bad("domains need at least one component".into());
        }
        if self.num_target_components > self.num_source_components {
            return bad(format!(
                "{} target components exceed {} source components",
                self.num_target_components, self.num_source_components
            ));
        }
        if self.n_target == 0 || self.n_target >= self.n_source {
            return bad(format!(
                "need 0 < n_target < n_source, got {} and {}",
                self.n_target, self.n_source
            ));
        }
        if !(self.component_cov > 0.0) || !(self.spacing > 0.0) {
            return bad("component_cov and spacing must be positive".into());
        }
        if self.shift.iter().any(|v| !v.is_finite()) {
            return bad("shift must be finite".into());
        }
        match self.kind {
            DomainKind::SubsetOnly if self.shift != [0.0, 0.0] => {
                bad("subset_only domains cannot carry a shift".into())
            }
            DomainKind::UnlabeledFacesAnalogue if self.labeled => {
                bad("unlabeled_faces_analogue domains must set labeled = false".into())
            }
            _ => Ok(()),
        }
    }

    /// Radius that puts neighbouring components `spacing` apart.
    pub fn ring_radius(&self) -> f64 {
        let k = self.num_source_components;
        if k == 1 {
            0.0
        } else {
            self.spacing / (2.0 * (PI / k as f64).sin())
        }
    }

    /// Source components reused by the target, spread evenly around the ring.
    pub fn target_component_indices(&self) -> Vec<usize> {
        let k = self.num_source_components;
        let m = self.num_target_components;
        (0..m)
            .map(|j| ((j * k) as f64 / m as f64).round() as usize % k)
            .collect()
    }
}

/// One side of a domain pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub mixture: GaussianMixture,
    pub data: SampleBatch,
}

impl Domain {
    pub fn num_classes(&self) -> usize {
        self.mixture.classes().len()
    }

    pub fn labeled(&self) -> bool {
        self.mixture.labels.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub source: Domain,
    pub target: Domain,
    /// Source component behind each target component.
    pub target_components: Vec<usize>,
}

pub fn build_pair(spec: &DomainSpec, seed: u64) -> Result<DomainPair> {
    spec.validate()?;
    let k = spec.num_source_components;
    let r = spec.ring_radius();
    let means: Vec<Point> = (0..k)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / k as f64;
            Point::new(r * a.cos(), r * a.sin())
        })
        .collect();
    let source_mix = GaussianMixture::isotropic(means.clone(), spec.component_cov, Some((0..k).collect()))?;

    let picks = spec.target_component_indices();
    let shift = match spec.kind {
        DomainKind::SubsetOnly => Point::zeros(),
        _ => Point::new(spec.shift[0], spec.shift[1]),
    };
    let target_means = picks.iter().map(|&i| means[i] + shift).collect();
    let target_labels = spec.labeled.then(|| (0..picks.len()).collect());
    let target_mix = GaussianMixture::isotropic(target_means, spec.component_cov, target_labels)?;

    let source_data = sample_mixture(&source_mix, spec.n_source, derive_seed(seed, "source-data"))?;
    let target_data = sample_mixture(&target_mix, spec.n_target, derive_seed(seed, "target-data"))?;
    Ok(DomainPair {
        source: Domain {
            mixture: source_mix,
            data: source_data,
        },
        target: Domain {
            mixture: target_mix,
            data: target_data,
        },
        target_components: picks,
    })
}

/// Row selection for [`minibatch`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Draw {
    WithReplacement,
    WithoutReplacement,
}

/// Uniform draw of `batch_size` rows.
pub fn minibatch(dataset: &SampleBatch, batch_size: usize, draw: Draw, rng: &mut Rng) -> Result<TrainBatch> {
    let n = dataset.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let idx: Vec<usize> = match draw {
        Draw::WithReplacement => (0..batch_size).map(|_| rng.random_range(0..n)).collect(),
        Draw::WithoutReplacement => {
            if batch_size > n {
                return Err(Error::InvalidArgument(format!(
                    "cannot draw {batch_size} of {n} rows without replacement"
                )));
            }
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(rng);
            all.truncate(batch_size);
            all
        }
    };
    Ok(TrainBatch {
        x0: dataset.points.select(Axis(0), &idx),
        labels: idx.iter().map(|&i| dataset.labels[i]).collect(),
    })
}
