use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dogfit::diffusion::SamplerKind;
use dogfit::domains::build_pair;
use dogfit::guidance::Method;
use dogfit::harness::config::DEFAULT_CONFIG_TOML;
use dogfit::harness::plot;
use dogfit::harness::report::{self, read_summary};
use dogfit::harness::suite::{self, load_run_model, obtain_source, row_settings, RowSetting};
use dogfit::harness::verify::verify;
use dogfit::harness::{pipeline, ExperimentConfig};
use dogfit::{derive_seed, Result};

#[derive(Parser)]
#[command(name = "dogfit", version, about = "Domain-guided diffusion fine-tuning on 2D Gaussian mixtures")]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Fine-tune seed; replaces the configured seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model and evaluate the oracle gate.
    Pretrain,
    /// Fine-tune one method from the stored source.
    Finetune {
        #[arg(long)]
        method: Method,
    },
    /// Generate from a fine-tuned run and write the points as CSV.
    Sample {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        w: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        sampler: Option<SamplerKind>,
        /// Destination CSV; defaults inside the run directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score a sample CSV against the target domain.
    Eval {
        samples: PathBuf,
    },
    /// Every configured method and seed, with summary CSVs and figures.
    Suite,
    /// Post-training checks; exit status 1 if any executed check fails.
    Verify,
    /// Redraw figures from a finished suite.
    Plot,
    /// Rerun a stored run from its config and seed and compare metrics.
    Replay {
        run_id: String,
    },
    /// Print the documented default config.
    DefaultConfig,
}

impl Cli {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.finetune.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    if let Command::DefaultConfig = cli.command {
        print!("{DEFAULT_CONFIG_TOML}");
        return Ok(ExitCode::SUCCESS);
    }
    let cfg = cli.config()?;
    let out = cfg.out_dir.clone();
    let sched = cfg.schedule()?;
    let pair = build_pair(&cfg.domain, cfg.pretrain.seed)?;
    let seed = cfg.finetune.seeds[0];
    match &cli.command {
        Command::Pretrain => {
            let source = obtain_source(&cfg, &pair, &sched, &out)?;
            println!(
                "oracle gap: conditional {:.4}, unconditional {:.4} (threshold {}) -> {}",
                source.gate.conditional_gap,
                source.gate.unconditional_gap,
                source.gate.threshold,
                if source.gate.passed { "valid" } else { "INVALID" }
            );
        }
        Command::Finetune { method } => {
            let source = obtain_source(&cfg, &pair, &sched, &out)?;
            let dir = out.join("runs").join(suite::run_id(*method, seed));
            let (_, manifest) = suite::finetune_run(&cfg, &pair, &source, *method, seed, &sched, Some(&dir))?;
            println!("{}", manifest.log.join("\n"));
            println!("checkpoint: {}", dir.join(&manifest.checkpoint).display());
        }
        Command::Sample {
            method,
            w,
            steps,
            sampler,
            output,
        } => {
            let source = obtain_source(&cfg, &pair, &sched, &out)?;
            let id = suite::run_id(*method, seed);
            let model = load_run_model(&out, &id)?;
            let default = row_settings(&cfg, *method)[0];
            let setting = RowSetting {
                w: w.unwrap_or(default.w),
                sampler: sampler.unwrap_or(default.sampler),
                steps: steps.unwrap_or(default.steps),
            };
            let (row, batch) =
                suite::evaluate_setting(&cfg, &pair, &source.model, &model, *method, seed, setting, &sched)?;
            let path = output
                .clone()
                .unwrap_or_else(|| out.join("runs").join(&id).join(format!("samples-{}.csv", setting.tag())));
            report::write_samples(&path, &batch)?;
            println!("{} points -> {} ({} forward passes)", batch.len(), path.display(), row.fwd_passes);
        }
        Command::Eval { samples } => {
            let batch = report::read_samples(samples)?;
            let m = pipeline::evaluate(&batch, &pair.target.mixture, &cfg, derive_seed(seed, "evaluate"))?;
            println!(
                "frechet {:.6}\nmmd2 {:.6}\nprecision {:.4}\nrecall {:.4}\nsupport_frac {:.4}\nn {}",
                m.frechet, m.mmd2, m.precision, m.recall, m.support_frac, m.n_gen
            );
        }
        Command::Suite => {
            let result = suite::run_suite(&cfg)?;
            for (id, why) in &result.excluded {
                eprintln!("excluded {id}: {why}");
            }
            print_aggregate(&result.rows);
            write_plots(&cfg, &out)?;
            println!("summary: {}", out.join("summary.csv").display());
        }
        Command::Verify => {
            let report = verify(&cfg, &out, seed)?;
            for c in &report.checks {
                println!("{c}");
            }
            fs::write(out.join("verify.json"), serde_json::to_string_pretty(&report)?)?;
            for axis in ["tau_s", "tau_c"] {
                let pts: Vec<_> = report.ablations.iter().filter(|a| a.0 == axis).collect();
                if pts.is_empty() {
                    continue;
                }
                let series = [
                    ("frechet", pts.iter().map(|a| (a.1, a.2.frechet)).collect()),
                    ("precision", pts.iter().map(|a| (a.1, a.2.precision)).collect()),
                    ("recall", pts.iter().map(|a| (a.1, a.2.recall)).collect()),
                ];
                let svg = plot::ablation_grid(&format!("dogfit {axis} ablation"), axis, &series);
                fs::write(out.join(format!("ablation_{axis}.svg")), svg)?;
            }
            return Ok(if report.all_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            });
        }
        Command::Plot => write_plots(&cfg, &out)?,
        Command::Replay { run_id } => {
            let stored: Vec<_> = read_summary(&out.join("summary.csv"))?
                .into_iter()
                .filter(|r| &r.run_id == run_id)
                .collect();
            let fresh = suite::replay(&out, run_id)?;
            let mut worst: f64 = 0.0;
            for (a, b) in stored.iter().zip(&fresh) {
                for (x, y) in a.metric_values().iter().zip(b.metric_values()) {
                    worst = worst.max((x - y).abs());
                }
            }
            let ok = stored.len() == fresh.len() && worst <= 1e-6;
            println!("{run_id}: {} rows, max metric difference {worst:.3e}", fresh.len());
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::DefaultConfig => unreachable!(),
    }
    Ok(ExitCode::SUCCESS)
}

fn print_aggregate(rows: &[report::MetricsRow]) {
    println!(
        "{:<15} {:>5} {:>7} {:>5} {:>16} {:>18} {:>6} {:>6} {:>7}",
        "method", "w", "sampler", "steps", "frechet", "mmd2", "P", "R", "support"
    );
    for a in report::aggregate(rows) {
        let t = &a.template;
        println!(
            "{:<15} {:>5} {:>7} {:>5} {:>8.4}±{:<7.4} {:>9.5}±{:<8.5} {:>6.3} {:>6.3} {:>7.3}",
            t.method, t.w, t.sampler, t.steps, a.mean[0], a.sd[0], a.mean[1], a.sd[1], a.mean[2], a.mean[3], a.mean[4]
        );
    }
}

fn write_plots(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let pair = build_pair(&cfg.domain, cfg.pretrain.seed)?;
    let rows = read_summary(&out.join("summary.csv"))?;
    let seed = cfg.finetune.seeds[0];
    for &method in &cfg.guidance.methods {
        let dir = out.join("runs").join(suite::run_id(method, seed));
        let file = dir.join(format!("samples-{}.csv", row_settings(cfg, method)[0].tag()));
        if !file.exists() {
            continue;
        }
        let batch = report::read_samples(&file)?;
        let svg = plot::scatter_overlay(
            &format!("{} (seed {seed})", method.as_str()),
            Some(&pair.target.mixture),
            &[(method.as_str(), &batch)],
        );
        fs::write(out.join(format!("scatter_{}.svg", method.as_str())), svg)?;
    }
    let control: Vec<(f64, f64, f64)> = rows
        .iter()
        .filter(|r| r.method == Method::DogfitControl.as_str() && r.seed == seed && r.steps == cfg.sampling.steps)
        .map(|r| (r.w, r.precision, r.recall))
        .collect();
    let mut control = control;
    control.sort_by(|a, b| a.0.total_cmp(&b.0));
    fs::write(out.join("tradeoff.svg"), plot::tradeoff_curve("dogfit_control: precision/recall vs w", &control))?;

    let series: Vec<(&str, Vec<(f64, f64)>)> = cfg
        .guidance
        .methods
        .iter()
        .map(|m| {
            let mut pts: Vec<(f64, f64)> = report::aggregate(&rows)
                .iter()
                .filter(|a| a.template.method == m.as_str() && a.template.sampler == "ddim")
                .filter(|a| a.template.w == row_settings(cfg, *m)[0].w)
                .map(|a| (a.template.steps as f64, a.mean[0]))
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (m.as_str(), pts)
        })
        .collect();
    fs::write(out.join("steps.svg"), plot::ablation_grid("frechet vs sampling steps", "steps", &series))?;
    Ok(())
}
