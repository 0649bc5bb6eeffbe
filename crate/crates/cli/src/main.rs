use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use ssod_core::config::RunConfig;
use ssod_core::evaluator::{write_csv, MetricsRecord};
use ssod_core::gradcheck::{run_suite, TOLERANCE};
use ssod_core::pipeline::{ablate, train, AblationDimension, Trainer};
use ssod_core::{LossBreakdown, ModelParams, TrainError};

#[derive(Parser)]
#[command(name = "ssod", version, about = "Semi-supervised detection on a synthetic imbalanced world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its metrics log, summary and final weights.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// CSV metrics log.
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
        /// JSON summary with final metrics and the effective configuration.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// JSON dump of the final student and teacher weights.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Train every variant of one ablation dimension over several seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// threshold, update, losses, jitter or generators.
        #[arg(long)]
        dimension: AblationDimension,
        /// Comma-separated seeds or a half-open range such as `0..10`.
        #[arg(long, default_value = "0..5")]
        seeds: String,
        /// Per-run CSV table.
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
        /// JSON with the per-variant summary and all rows.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Evaluate saved weights on the held-out scenes of the configured world.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Weights written by `train --params`.
        #[arg(long)]
        params: PathBuf,
        /// Evaluate the student instead of the teacher weights.
        #[arg(long)]
        student: bool,
        /// Where to write the metrics JSON; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic loss gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = TOLERANCE)]
        tol: f64,
    },
    /// Print the effective configuration as `key = value` lines.
    Config {
        #[command(flatten)]
        run: RunArgs,
    },
}

/// Configuration sources, applied in order: defaults, `--config`, named flags, `--set`.
#[derive(Args, Debug, Default)]
struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set noise=1.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// adaptive, continuous, dynamic or static:<t>.
    #[arg(long)]
    threshold_mode: Option<String>,
    /// deepcopy, ema or dema.
    #[arg(long)]
    update_mode: Option<String>,
    /// none, box_jittering or jitter_bagging.
    #[arg(long)]
    jitter: Option<String>,
    #[arg(long)]
    eval_every: Option<usize>,
}

impl RunArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text).with_context(|| format!("parsing {}", path.display()))?;
        }
        let named: [(&str, Option<String>); 12] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("iterations", self.iterations.map(|v| v.to_string())),
            ("burn_in", self.burn_in.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("beta", self.beta.map(|v| v.to_string())),
            ("gamma", self.gamma.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("threshold_mode", self.threshold_mode.clone()),
            ("update_mode", self.update_mode.clone()),
            ("reg_refinement", self.jitter.clone()),
            ("eval_every", self.eval_every.map(|v| v.to_string())),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        for s in &self.sets {
            let Some((k, v)) = s.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{s}`");
            };
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if a >= b {
            bail!("empty seed range `{s}`");
        }
        return Ok((a..b).collect());
    }
    s.split(',')
        .map(|x| x.trim().parse::<u64>().with_context(|| format!("bad seed `{x}`")))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ParamsDump {
    num_classes: usize,
    feature_dim: usize,
    student: ModelParams,
    teacher: ModelParams,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: serde_json::Map<String, serde_json::Value>,
    iterations: usize,
    final_metrics: &'a MetricsRecord,
    final_loss: &'a LossBreakdown,
    student_checksum: String,
    teacher_checksum: String,
}

fn config_echo(cfg: &RunConfig) -> serde_json::Map<String, serde_json::Value> {
    cfg.to_pairs()
        .into_iter()
        .map(|(k, v)| (k, serde_json::Value::String(v)))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run_train(run: &RunArgs, out: &Path, summary: Option<&Path>, params: Option<&Path>) -> Result<()> {
    let cfg = run.build()?;
    let result = train(&cfg)?;
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_csv(&result.records, file)?;
    let last = result.final_record();
    eprintln!(
        "iteration {}: mAP@50 {:.4}  mAP {:.4}  PL precision {:.3}  PL recall {:.3}  tau {:.2}",
        last.iteration, last.map_50, last.map_coco, last.pl_precision, last.pl_recall, last.tau_current
    );
    if let Some(path) = summary {
        let s = TrainSummary {
            config: config_echo(&cfg),
            iterations: cfg.iterations,
            final_metrics: last,
            final_loss: result.losses.last().expect("at least one iteration"),
            student_checksum: format!("{:016x}", result.student.checksum()),
            teacher_checksum: format!("{:016x}", result.teacher.checksum()),
        };
        write_json(path, &s)?;
    }
    if let Some(path) = params {
        let dump = ParamsDump {
            num_classes: cfg.world.num_classes,
            feature_dim: cfg.world.feature_dim,
            student: result.student.clone(),
            teacher: result.teacher.clone(),
        };
        write_json(path, &dump)?;
    }
    Ok(())
}

fn run_ablate(run: &RunArgs, dimension: AblationDimension, seeds: &str, out: &Path, summary: Option<&Path>) -> Result<()> {
    let cfg = run.build()?;
    let seeds = parse_seeds(seeds)?;
    let table = ablate(&cfg, dimension, &seeds)?;
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    table.write_csv(file)?;
    println!("variant,runs,median_map_50,mean_map_50,median_map_coco,median_pl_precision,median_pl_recall");
    for s in &table.summary {
        println!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4}",
            s.variant, s.runs, s.median_map_50, s.mean_map_50, s.median_map_coco, s.median_pl_precision, s.median_pl_recall
        );
    }
    if let Some(path) = summary {
        let v = serde_json::json!({ "config": config_echo(&cfg), "table": table });
        write_json(path, &v)?;
    }
    Ok(())
}

fn run_eval(run: &RunArgs, params: &Path, student: bool, out: Option<&Path>) -> Result<()> {
    let cfg = run.build()?;
    let text = fs::read_to_string(params).with_context(|| format!("reading {}", params.display()))?;
    let dump: ParamsDump = serde_json::from_str(&text).context("parsing weights")?;
    if dump.num_classes != cfg.world.num_classes || dump.feature_dim != cfg.world.feature_dim {
        bail!(
            "weights are for {} classes x {} features, configuration has {} x {}",
            dump.num_classes,
            dump.feature_dim,
            cfg.world.num_classes,
            cfg.world.feature_dim
        );
    }
    let weights = if student { dump.student } else { dump.teacher };
    let mut t = Trainer::new(cfg)?;
    if weights.len() != t.student().params.len() {
        bail!("expected {} weights, found {}", t.student().params.len(), weights.len());
    }
    t.set_student(weights);
    let record = t.evaluate(LossBreakdown::default());
    let text = serde_json::to_string_pretty(&record)? + "\n";
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run_gradcheck(points: usize, seed: u64, tol: f64) -> Result<bool> {
    let mut ok = true;
    for c in run_suite(points, seed) {
        let pass = c.passed(tol);
        ok &= pass;
        println!(
            "{:<24} points {:>4}  skipped {:>3}  max rel err {:.3e}  {}",
            c.name,
            c.points,
            c.skipped,
            c.max_rel_err,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { run, out, summary, params } => run_train(run, out, summary.as_deref(), params.as_deref()),
        Command::Ablate {
            run,
            dimension,
            seeds,
            out,
            summary,
        } => run_ablate(run, *dimension, seeds, out, summary.as_deref()),
        Command::Eval { run, params, student, out } => run_eval(run, params, *student, out.as_deref()),
        Command::Gradcheck { points, seed, tol } => match run_gradcheck(*points, *seed, *tol) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Command::Config { run } => run.build().map(|cfg| print!("{}", cfg.to_text())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            // numerical aborts get their own code so scripts can tell them apart
            if matches!(e.downcast_ref::<TrainError>(), Some(TrainError::NonFinite { .. })) {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
