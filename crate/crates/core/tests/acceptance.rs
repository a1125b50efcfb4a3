//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! Criteria 6 to 11 run the full default experiment (three seeds, every
//! method) into `CARGO_TARGET_TMPDIR/acceptance-suite`; expect roughly a
//! quarter of an hour on one core.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{oracle_loss, probe_batch, small_model, Probe};
use dogfit::diffusion::{sample, NoiseSchedule, SamplerKind};
use dogfit::domains::build_pair;
use dogfit::guidance::{sample_w, GuidanceConfig, Method};
use dogfit::harness::pipeline::finetune;
use dogfit::harness::report::{read_summary, MetricsRow};
use dogfit::harness::suite::{load_run_model, replay, run_id, run_suite};
use dogfit::harness::verify::{internalization_gaps, internalization_probes, inversions, prop2_max_error};
use dogfit::harness::ExperimentConfig;
use dogfit::metrics::frechet_gaussian;
use dogfit::neural::{load_checkpoint, Denoiser, DenoiserInput, FrozenDenoiser};
use dogfit::oracle::{analytic_eps_batch, sample_mixture, GaussianMixture};
use dogfit::{derive_seed, rng_from_seed, Point};
use ndarray::Array2;
use rand::Rng;

const SEEDS: usize = 3;
const MAJORITY: usize = 2;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    o.detail = format!("{} [{:.2}s]", o.detail, took.as_secs_f64());
    if let Some(limit) = limit {
        if took >= limit {
            o.passed = false;
            o.detail += &format!(" exceeds {}s", limit.as_secs());
        }
    }
    o
}

fn c1_gradients() -> Outcome {
    let m = small_model(3);
    let p: Vec<f64> = m.params().values().iter().map(|v| *v as f64).collect();
    let b: Probe = probe_batch(4);
    let x = Array2::from_shape_fn((b.x.len(), 2), |(i, j)| b.x[i][j]);
    let target = Array2::from_shape_fn((b.x.len(), 2), |(i, j)| b.target[i][j]);
    let input = DenoiserInput {
        x: x.view(),
        t_norm: &b.t,
        labels: &b.labels,
        w: &b.w,
    };
    let (_, grad) = m.loss_and_grad_in::<f64>(&p, &input, target.view()).unwrap();
    let frozen = m.params().range("label_embed_frozen").unwrap();
    let trainable: Vec<usize> = (0..p.len()).filter(|i| !frozen.contains(i)).collect();
    let mut rng = rng_from_seed(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = trainable[rng.random_range(0..trainable.len())];
        let h = 1e-4 * (1.0 + p[k].abs());
        let mut q = p.clone();
        q[k] = p[k] + h;
        let up = oracle_loss(&m, &q, &b);
        q[k] = p[k] - h;
        let down = oracle_loss(&m, &q, &b);
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((grad[k] - numeric).abs() / grad[k].abs().max(numeric.abs()).max(1e-6));
    }
    outcome(
        m.num_params() <= 5000 && worst < 1e-4,
        format!("max rel error {worst:.2e} over 100 probes, {} params", m.num_params()),
    )
}

fn c2_prop2() -> Outcome {
    let err = prop2_max_error(1000, 17);
    outcome(err <= 1e-6, format!("max abs error {err:.2e} over 1000 tuples"))
}

fn c3_w_calibration() -> Outcome {
    let mut rng = rng_from_seed(23);
    let n = 1_000_000;
    let below = (0..n).filter(|_| sample_w(3.0, &mut rng) <= 2.0).count();
    let emp = below as f64 / n as f64;
    let expect = 1.0 - (-3.0f64).exp();
    outcome((emp - expect).abs() <= 0.005, format!("CDF(2) = {emp:.5}, expected {expect:.5}"))
}

fn occupancy(gm: &GaussianMixture, pts: &Array2<f64>) -> Vec<f64> {
    let mut counts = vec![0usize; gm.num_components()];
    for r in pts.rows() {
        counts[gm.assign(&Point::new(r[0], r[1]))] += 1;
    }
    counts.iter().map(|c| *c as f64 / pts.nrows() as f64).collect()
}

fn c4_oracle_consistency(target: &GaussianMixture, sched: &NoiseSchedule) -> Outcome {
    let n = 5000;
    let real = sample_mixture(target, n, 31).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for (kind, steps) in [(SamplerKind::Ddim, 50), (SamplerKind::Ddpm, sched.steps())] {
        let mut eps = |x: &Array2<f64>, t: usize, l: &[dogfit::Label]| analytic_eps_batch(target, x, t, sched, l);
        let gen = sample(kind, &mut eps, vec![None; n], steps, sched, 32).unwrap();
        let fd = frechet_gaussian(gen.points.view(), real.points.view()).unwrap().value;
        let occ = occupancy(target, &gen.points);
        let dev = occ
            .iter()
            .zip(&target.weights)
            .map(|(o, w)| (o - w).abs())
            .fold(0.0, f64::max);
        ok &= fd < 0.02 && dev <= 0.05;
        parts.push(format!("{}: FD {fd:.4}, max occupancy deviation {dev:.3}", kind.as_str()));
    }
    outcome(ok, parts.join("; "))
}

fn c5_unguided_reduction(cfg: &ExperimentConfig, sched: &NoiseSchedule) -> Outcome {
    let mut cfg = cfg.clone();
    cfg.finetune.steps = 200;
    let s = cfg.finetune.steps;
    let pair = build_pair(&cfg.domain, cfg.pretrain.seed).unwrap();
    let arch = cfg.architecture(pair.source.num_classes(), false);
    let source = FrozenDenoiser::snapshot(&Denoiser::new(arch, &mut rng_from_seed(41)).unwrap());
    let traj = |g: GuidanceConfig| {
        let mut out = Vec::with_capacity(s);
        finetune(&cfg, &pair, &source, &g, 5, sched, |st| out.push(st.model.params().values().to_vec())).unwrap();
        out
    };
    let base = cfg.guidance_for(Method::Dogfit);
    let none = traj(cfg.guidance_for(Method::None));
    let w_one = traj(GuidanceConfig { w: 1.0, tau_s: 0, ..base });
    let late = traj(GuidanceConfig { tau_s: s, ..base });
    let guided = traj(GuidanceConfig { tau_s: 0, ..base });
    let first_diff = |t: &[Vec<f32>]| t.iter().zip(&none).position(|(a, b)| a != b);
    let (a, b, c) = (first_diff(&w_one), first_diff(&late), first_diff(&guided));
    outcome(
        a.is_none() && b.is_none() && c.is_some(),
        format!(
            "{s} steps: w=1 identical {}, tau_s=S identical {}, guided control diverges at step {:?}",
            a.is_none(),
            b.is_none(),
            c.map(|i| i + 1)
        ),
    )
}

struct Suite {
    out: PathBuf,
    rows: Vec<MetricsRow>,
    wall: Duration,
    error: Option<String>,
}

fn run_default_suite(cfg: &ExperimentConfig) -> Suite {
    let mut cfg = cfg.clone();
    cfg.out_dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-suite");
    let _ = std::fs::remove_dir_all(&cfg.out_dir);
    let start = Instant::now();
    let result = run_suite(&cfg);
    let wall = start.elapsed();
    let (rows, error) = match result {
        Ok(r) if r.excluded.is_empty() => (read_summary(&cfg.out_dir.join("summary.csv")).unwrap_or_default(), None),
        Ok(r) => (r.rows, Some(format!("excluded runs: {:?}", r.excluded))),
        Err(e) => (Vec::new(), Some(e.to_string())),
    };
    Suite {
        out: cfg.out_dir,
        rows,
        wall,
        error,
    }
}

fn default_row<'a>(rows: &'a [MetricsRow], cfg: &ExperimentConfig, method: Method, seed: u64, w: f64, steps: usize) -> Option<&'a MetricsRow> {
    rows.iter().find(|r| {
        r.method == method.as_str()
            && r.seed == seed
            && r.w == w
            && r.steps == steps
            && r.sampler == if steps == cfg.sampling.steps { cfg.sampling.sampler.as_str() } else { "ddim" }
    })
}

fn tally(votes: &[bool]) -> (usize, bool) {
    let n = votes.iter().filter(|v| **v).count();
    (n, votes.len() == SEEDS && n >= MAJORITY)
}

fn c6_internalization(cfg: &ExperimentConfig, suite: &Suite, sched: &NoiseSchedule) -> Outcome {
    let start = Instant::now();
    let pair = build_pair(&cfg.domain, cfg.pretrain.seed).unwrap();
    let Ok(source) = load_checkpoint(&suite.out.join("source.dgf")) else {
        return outcome(false, "source checkpoint missing");
    };
    let mut votes = Vec::new();
    let mut parts = Vec::new();
    for &seed in &cfg.finetune.seeds {
        let Ok(model) = load_run_model(&suite.out, &run_id(Method::DogfitControl, seed)) else {
            parts.push(format!("s{seed}: checkpoint missing"));
            votes.push(false);
            continue;
        };
        let probes = internalization_probes(&pair.target.mixture, sched, 1000, cfg.guidance.tau_c, derive_seed(seed, "prop1")).unwrap();
        let gaps = internalization_gaps(&model, &source, &probes, &[1.25, 1.5, 2.0]).unwrap();
        votes.push(gaps.iter().all(|g| g.dog_gap < g.cfg_gap));
        parts.push(format!(
            "s{seed}: {}",
            gaps.iter()
                .map(|g| format!("w={} dog {:.4}/cfg {:.4}", g.w, g.dog_gap, g.cfg_gap))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    let (n, ok) = tally(&votes);
    let total = suite.wall + start.elapsed();
    outcome(
        ok && total < Duration::from_secs(20 * 60),
        format!("{n}/{SEEDS} seeds; {}; suite+probe time {:.0}s", parts.join("; "), total.as_secs_f64()),
    )
}

fn c7_tradeoff(cfg: &ExperimentConfig, rows: &[MetricsRow]) -> Outcome {
    let ws = [1.0, 1.25, 1.5, 1.75, 2.0];
    let mut votes = Vec::new();
    let mut parts = Vec::new();
    for &seed in &cfg.finetune.seeds {
        let pr: Option<Vec<(f64, f64)>> = ws
            .iter()
            .map(|&w| default_row(rows, cfg, Method::DogfitControl, seed, w, cfg.sampling.steps).map(|r| (r.precision, r.recall)))
            .collect();
        let Some(pr) = pr else {
            parts.push(format!("s{seed}: rows missing"));
            votes.push(false);
            continue;
        };
        let p: Vec<f64> = pr.iter().map(|v| v.0).collect();
        let r: Vec<f64> = pr.iter().map(|v| v.1).collect();
        let (pi, ri) = (inversions(&p, true), inversions(&r, false));
        votes.push(pi <= 1 && ri <= 1);
        parts.push(format!(
            "s{seed}: P {:?} ({pi} inv) R {:?} ({ri} inv)",
            p.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            r.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
        ));
    }
    let (n, ok) = tally(&votes);
    outcome(ok, format!("{n}/{SEEDS} seeds; {}", parts.join("; ")))
}

fn c8_beats_naive(cfg: &ExperimentConfig, rows: &[MetricsRow]) -> Outcome {
    let steps = cfg.sampling.steps;
    let w = 1.5;
    let mut fit_votes = Vec::new();
    let mut ood_votes = Vec::new();
    let mut parts = Vec::new();
    for &seed in &cfg.finetune.seeds {
        let get = |m: Method, w: f64| default_row(rows, cfg, m, seed, w, steps);
        let (Some(none), Some(dog), Some(dogfit), Some(cfg_row)) =
            (get(Method::None, 1.0), get(Method::Dog, w), get(Method::Dogfit, w), get(Method::Cfg, w))
        else {
            parts.push(format!("s{seed}: rows missing"));
            fit_votes.push(false);
            ood_votes.push(false);
            continue;
        };
        let beats = |r: &MetricsRow| r.frechet < none.frechet && r.mmd2 < none.mmd2;
        fit_votes.push(beats(dog) && beats(dogfit));
        ood_votes.push(dogfit.support_frac >= cfg_row.support_frac);
        parts.push(format!(
            "s{seed}: FD none {:.4} dog {:.4} dogfit {:.4}, MMD none {:.5} dog {:.5} dogfit {:.5}, support dogfit {:.3} cfg {:.3}",
            none.frechet, dog.frechet, dogfit.frechet, none.mmd2, dog.mmd2, dogfit.mmd2, dogfit.support_frac, cfg_row.support_frac
        ));
    }
    let (nf, okf) = tally(&fit_votes);
    let (no, oko) = tally(&ood_votes);
    outcome(okf && oko, format!("fit {nf}/{SEEDS}, support {no}/{SEEDS}; {}", parts.join("; ")))
}

fn c9_pass_counts(cfg: &ExperimentConfig, rows: &[MetricsRow]) -> Outcome {
    let mut compared = 0;
    let mut bad = Vec::new();
    for d in rows.iter().filter(|r| r.method == Method::Dogfit.as_str()) {
        for m in [Method::Cfg, Method::Dog] {
            let other = rows
                .iter()
                .find(|r| r.method == m.as_str() && r.seed == d.seed && r.sampler == d.sampler && r.steps == d.steps);
            match other {
                Some(o) if o.fwd_passes == 2 * d.fwd_passes => compared += 1,
                Some(o) => bad.push(format!("{} {} {}: {} vs {}", m.as_str(), o.sampler, o.steps, o.fwd_passes, d.fwd_passes)),
                None => bad.push(format!("{} {} {}: missing", m.as_str(), d.sampler, d.steps)),
            }
        }
    }
    let expected = 2 * SEEDS * (1 + cfg.sampling.step_sweep.iter().filter(|s| **s != cfg.sampling.steps || cfg.sampling.sampler != SamplerKind::Ddim).count());
    outcome(
        bad.is_empty() && compared == expected,
        format!("{compared}/{expected} settings with exact 2x ratio; mismatches {bad:?}"),
    )
}

fn c10_step_sweep(cfg: &ExperimentConfig, rows: &[MetricsRow]) -> Outcome {
    let w = cfg.guidance.w;
    let mut votes = Vec::new();
    let mut parts = Vec::new();
    for &seed in &cfg.finetune.seeds {
        match (
            default_row(rows, cfg, Method::Dogfit, seed, w, 10),
            default_row(rows, cfg, Method::Mg, seed, w, 10),
        ) {
            (Some(d), Some(m)) => {
                votes.push(d.frechet < m.frechet);
                parts.push(format!("s{seed}: dogfit {:.4} mg {:.4}", d.frechet, m.frechet));
            }
            _ => {
                votes.push(false);
                parts.push(format!("s{seed}: rows missing"));
            }
        }
    }
    let (n, ok) = tally(&votes);
    outcome(ok, format!("{n}/{SEEDS} seeds; {}", parts.join("; ")))
}

fn c11_replay(suite: &Suite) -> Outcome {
    let id = run_id(Method::Dogfit, 1);
    let stored: Vec<&MetricsRow> = suite.rows.iter().filter(|r| r.run_id == id).collect();
    let fresh = match replay(&suite.out, &id) {
        Ok(f) => f,
        Err(e) => return outcome(false, format!("{id}: {e}")),
    };
    let mut worst: f64 = 0.0;
    for (a, b) in stored.iter().zip(&fresh) {
        for (x, y) in a.metric_values().iter().zip(b.metric_values()) {
            worst = worst.max((x - y).abs());
        }
    }
    outcome(
        !stored.is_empty() && stored.len() == fresh.len() && worst <= 1e-6,
        format!("{id}: {} rows, max metric difference {worst:.2e}", fresh.len()),
    )
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let cfg = ExperimentConfig::default();
    let sched = cfg.schedule().unwrap();
    let target = build_pair(&cfg.domain, cfg.pretrain.seed).unwrap().target.mixture;
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };

    report("1 gradient correctness", timed(Some(Duration::from_secs(10)), c1_gradients));
    report("2 domain alignment identity", timed(Some(Duration::from_secs(1)), c2_prop2));
    report("3 w calibration", timed(Some(Duration::from_secs(5)), c3_w_calibration));
    report("4 oracle consistency", timed(Some(Duration::from_secs(60)), || c4_oracle_consistency(&target, &sched)));
    report("5 unguided reduction", timed(None, || c5_unguided_reduction(&cfg, &sched)));

    let suite = run_default_suite(&cfg);
    println!(
        "default suite: {} rows in {:.0}s{}",
        suite.rows.len(),
        suite.wall.as_secs_f64(),
        suite.error.as_deref().map(|e| format!(" ({e})")).unwrap_or_default()
    );
    report("6 internalization", timed(None, || c6_internalization(&cfg, &suite, &sched)));
    report("7 trade-off trend", timed(None, || c7_tradeoff(&cfg, &suite.rows)));
    report("8 guidance beats naive fine-tuning", timed(None, || c8_beats_naive(&cfg, &suite.rows)));
    report("9 pass-count ledger", timed(None, || c9_pass_counts(&cfg, &suite.rows)));
    report("10 step-sweep direction", timed(None, || c10_step_sweep(&cfg, &suite.rows)));
    report("11 reproducibility", timed(None, || c11_replay(&suite)));

    let failed = results.iter().filter(|(_, o)| !o.passed).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
