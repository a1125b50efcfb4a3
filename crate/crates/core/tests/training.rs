mod common;

use common::small_arch;
use dogfit::diffusion::NoiseSchedule;
use dogfit::domains::{build_pair, minibatch, DomainKind, DomainSpec, Draw};
use dogfit::guidance::{
    dogfit_target, mg_target, sample_w, train_step, w_cdf, GuidanceConfig, Method, TrainState,
};
use dogfit::harness::pipeline::check_method;
use dogfit::neural::{Denoiser, FrozenDenoiser};
use dogfit::{derive_seed, rng_from_seed, Error};
use proptest::prelude::*;

fn small_spec() -> DomainSpec {
    DomainSpec {
        n_source: 2000,
        n_target: 300,
        ..DomainSpec::default()
    }
}

struct Setup {
    source: FrozenDenoiser,
    pair: dogfit::domains::DomainPair,
    sched: NoiseSchedule,
}

fn setup() -> Setup {
    let pair = build_pair(&small_spec(), 0).unwrap();
    let arch = dogfit::neural::Architecture {
        num_classes: pair.source.num_classes(),
        w_conditioning: false,
        ..small_arch(false)
    };
    let src = Denoiser::new(arch, &mut rng_from_seed(1)).unwrap();
    Setup {
        source: FrozenDenoiser::snapshot(&src),
        pair,
        sched: NoiseSchedule::standard(),
    }
}

/// Fine-tune for `steps` and return the parameter vector after every step.
fn trajectory(s: &Setup, cfg: &GuidanceConfig, steps: usize, seed: u64) -> Vec<Vec<f32>> {
    let model = s
        .source
        .adapted(s.pair.target.num_classes(), cfg.method.w_conditioned(), &mut rng_from_seed(derive_seed(seed, "labels")))
        .unwrap();
    let mut st = TrainState::new(model, Some(s.source.clone()), steps, 1e-3, rng_from_seed(derive_seed(seed, "train")));
    let mut batches = rng_from_seed(derive_seed(seed, "batches"));
    let mut out = Vec::new();
    for _ in 0..steps {
        let b = minibatch(&s.pair.target.data, 16, Draw::WithReplacement, &mut batches).unwrap();
        train_step(&mut st, &b, cfg, &s.sched).unwrap();
        out.push(st.model.params().values().to_vec());
    }
    out
}

fn guidance(method: Method, tau_s: usize) -> GuidanceConfig {
    GuidanceConfig {
        method,
        w: 1.5,
        lambda: 3.0,
        tau_s,
        tau_c: 0.5,
        label_dropout: if method.needs_labels() { 0.1 } else { 0.0 },
    }
}

#[test]
fn snapshot_is_unchanged_by_training_the_original() {
    let s = setup();
    let x = [0.3, -0.2];
    let before = s.source.forward_point(&x, 0.4, Some(2), 1.0).unwrap();
    let checksum = s.source.params().checksum(None);
    let mut st = TrainState::new(s.source.thaw(), None, 100, 1e-2, rng_from_seed(2));
    let mut rng = rng_from_seed(3);
    let cfg = guidance(Method::None, 100);
    for _ in 0..100 {
        let b = minibatch(&s.pair.source.data, 16, Draw::WithReplacement, &mut rng).unwrap();
        train_step(&mut st, &b, &cfg, &s.sched).unwrap();
    }
    assert_ne!(st.model.params().checksum(None), checksum);
    assert_eq!(s.source.params().checksum(None), checksum);
    assert_eq!(s.source.forward_point(&x, 0.4, Some(2), 1.0).unwrap(), before);
}

#[test]
fn dogfit_training_never_touches_the_source() {
    let s = setup();
    let checksum = s.source.params().checksum(None);
    trajectory(&s, &guidance(Method::Dogfit, 0), 30, 4);
    trajectory(&s, &guidance(Method::DogfitControl, 0), 30, 4);
    assert_eq!(s.source.params().checksum(None), checksum);
}

#[test]
fn training_is_deterministic_per_seed() {
    let s = setup();
    for m in [Method::Mg, Method::DogfitControl] {
        let a = trajectory(&s, &guidance(m, 5), 20, 7);
        let b = trajectory(&s, &guidance(m, 5), 20, 7);
        assert_eq!(a, b);
        let c = trajectory(&s, &guidance(m, 5), 20, 8);
        assert_ne!(a.last(), c.last());
    }
}

#[test]
fn unguided_settings_reproduce_plain_fine_tuning_bit_for_bit() {
    let s = setup();
    let steps = 40;
    let none = trajectory(&s, &guidance(Method::None, steps / 2), steps, 9);
    let w_one = GuidanceConfig {
        w: 1.0,
        ..guidance(Method::Dogfit, 0)
    };
    assert_eq!(trajectory(&s, &w_one, steps, 9), none);
    assert_eq!(trajectory(&s, &guidance(Method::Dogfit, steps), steps, 9), none);
    // guidance does change the update once active
    assert_ne!(trajectory(&s, &guidance(Method::Dogfit, 0), steps, 9), none);
}

#[test]
fn frozen_label_table_is_fixed_after_late_start() {
    let s = setup();
    let tau_s = 10;
    let cfg = guidance(Method::DogfitControl, tau_s);
    let model = s.source.adapted(3, true, &mut rng_from_seed(10)).unwrap();
    let mut st = TrainState::new(model, Some(s.source.clone()), 40, 1e-3, rng_from_seed(11));
    let mut rng = rng_from_seed(12);
    let mut seen = None;
    for step in 1..=40 {
        let b = minibatch(&s.pair.target.data, 16, Draw::WithReplacement, &mut rng).unwrap();
        train_step(&mut st, &b, &cfg, &s.sched).unwrap();
        let now = st.model.params().checksum(Some("label_embed_frozen"));
        if step <= tau_s {
            assert_eq!(st.frozen_label_checksum, None);
        } else {
            assert_eq!(st.frozen_label_checksum, Some(now));
            if let Some(prev) = seen {
                assert_eq!(prev, now, "frozen table moved at step {step}");
            }
            seen = Some(now);
        }
    }
    // after the refresh, frozen rows equal the trained rows at τ_s
    assert!(seen.is_some());
    assert_eq!(st.w_history.len(), 40 * 16);
}

#[test]
fn sampled_w_matches_exponential_cdf() {
    let mut rng = rng_from_seed(13);
    let n = 200_000;
    let ws: Vec<f64> = (0..n).map(|_| sample_w(3.0, &mut rng)).collect();
    assert!(ws.iter().all(|w| *w >= 1.0));
    for q in [1.1, 1.3, 1.7, 2.0, 2.5] {
        let emp = ws.iter().filter(|w| **w <= q).count() as f64 / n as f64;
        assert!((emp - w_cdf(3.0, q)).abs() < 0.005, "w={q}: {emp}");
    }
}

#[test]
fn label_guided_methods_are_rejected_on_unlabeled_targets() {
    let spec = DomainSpec {
        kind: DomainKind::UnlabeledFacesAnalogue,
        labeled: false,
        ..small_spec()
    };
    let pair = build_pair(&spec, 0).unwrap();
    for m in [Method::Cfg, Method::Mg] {
        assert!(matches!(check_method(m, &pair.target), Err(Error::UnsupportedMethod { .. })));
    }
    for m in [Method::None, Method::Dog, Method::Dogfit, Method::DogfitControl] {
        check_method(m, &pair.target).unwrap();
    }
}

proptest! {
    #[test]
    fn dogfit_minus_mg_is_the_domain_alignment_term(
        eps in prop::array::uniform2(-10.0f64..10.0),
        eps_c in prop::array::uniform2(-10.0f64..10.0),
        eps_ut in prop::array::uniform2(-10.0f64..10.0),
        eps_us in prop::array::uniform2(-10.0f64..10.0),
        w in 1.0f64..8.0,
    ) {
        let d = dogfit_target(&eps, &eps_c, &eps_us, w);
        let m = mg_target(&eps, &eps_c, &eps_ut, w);
        for j in 0..2 {
            prop_assert!((d[j] - m[j] - (w - 1.0) * (eps_ut[j] - eps_us[j])).abs() <= 1e-9);
        }
    }
}
