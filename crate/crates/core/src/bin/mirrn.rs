use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mirrn::bench::{bench_mixer, bench_overhead, bench_retrieval, run_concurrent, BenchReport};
use mirrn::clustering::ClusterModel;
use mirrn::datasynth::{generate, write_dataset};
use mirrn::harness::{
    auc, build_model, evaluate, fit_clusters, labels_of, load_checkpoint, load_samples, prepare, run_ablation,
    save_checkpoint, train_model, write_ablation, write_metrics, ExperimentConfig, Prepared,
};
use mirrn::{Error, Result};

#[derive(Parser)]
#[command(name = "mirrn", version, about = "Long-sequence CTR model: data, training and benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchOpts {
    #[arg(long, default_value_t = 30)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Concurrent copies of the benchmark.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset.
    Synth(Common),
    /// Pretrain item vectors on the training split and fit density-peak centers.
    Cluster(Common),
    /// Train one model; writes the metrics log and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train seeds seed..seed+N and report mean and std of validation AUC.
        #[arg(long)]
        sweep: Option<usize>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train each variant on the same data and seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma separated, e.g. tasu,tasu+lasu,full
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
    BenchRetrieval {
        #[arg(long = "L", default_value_t = 10_000)]
        l: usize,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 64)]
        m: usize,
        #[arg(long = "K", default_value_t = 32)]
        k: usize,
        #[command(flatten)]
        opts: BenchOpts,
    },
    BenchMixer {
        #[arg(long = "K", default_value_t = 32)]
        k: usize,
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[command(flatten)]
        opts: BenchOpts,
    },
    /// Batched inference of the full model vs the single-search baseline.
    BenchOverhead {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[command(flatten)]
        opts: BenchOpts,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.synth.seed = s;
    }
    Ok(cfg)
}

fn print_line(v: serde_json::Value) {
    println!("{v}");
}

/// Dataset and, when any model needs them, the cluster file.
fn prepared(cfg: &ExperimentConfig, need_clusters: bool) -> Result<Prepared> {
    let samples = load_samples(cfg)?;
    let clusters = if need_clusters { Some(ClusterModel::load(&cfg.data.clusters)?) } else { None };
    prepare(cfg, samples, clusters)
}

fn emit_report(r: &BenchReport, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => r.save(p),
        None => {
            println!("{}", r.to_json()?);
            Ok(())
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth(c) => {
            let cfg = load_config(&c)?;
            let out = generate(&cfg.synth)?;
            let path = c.out.unwrap_or(cfg.data.dataset);
            write_dataset(&out.samples, &path)?;
            print_line(json!({"samples": out.samples.len(), "skipped_users": out.skipped_users, "out": path}));
        }
        Cmd::Cluster(c) => {
            let cfg = load_config(&c)?;
            let p = prepare(&cfg, load_samples(&cfg)?, None)?;
            let model = fit_clusters(&cfg, &p.warm)?;
            let path = c.out.unwrap_or(cfg.data.clusters);
            model.save(&path)?;
            print_line(json!({"centers": model.num_centers(), "sigma": model.sigma, "out": path}));
        }
        Cmd::Train { common, sweep } => {
            let mut cfg = load_config(&common)?;
            let mc = cfg.resolved_model();
            let p = prepared(&cfg, mc.needs_clusters())?;
            if let Some(n) = sweep {
                let seeds: Vec<u64> = (cfg.seed..cfg.seed + n as u64).collect();
                let aucs = mirrn::harness::seed_sweep(&cfg, &p, &seeds)?;
                let mean = aucs.iter().sum::<f64>() / aucs.len().max(1) as f64;
                let var = aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (aucs.len().max(2) - 1) as f64;
                print_line(json!({"seeds": seeds, "val_auc": aucs, "mean": mean, "std": var.sqrt()}));
                return Ok(());
            }
            if let Some(o) = common.out {
                cfg.train.checkpoint = o;
            }
            let res = train_model(&cfg, mc, &p)?;
            write_metrics(&res.log, &cfg.train.metrics)?;
            save_checkpoint(&res.store, &cfg.train.checkpoint)?;
            print_line(json!({
                "val_auc": res.val_auc,
                "steps": res.log.iter().filter(|r| r.auc.is_none()).count(),
                "checkpoint": cfg.train.checkpoint,
                "metrics": cfg.train.metrics,
            }));
        }
        Cmd::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let mc = cfg.resolved_model();
            let p = prepared(&cfg, mc.needs_clusters())?;
            let (mut store, model) = build_model(&cfg, mc, &p)?;
            load_checkpoint(&mut store, checkpoint.as_deref().unwrap_or(&cfg.train.checkpoint))?;
            let scores = evaluate(&model, &store, p.test(), cfg.train.batch)?;
            let a = auc(&scores, &labels_of(p.test()))?;
            let rec = json!({"split": "test", "samples": scores.len(), "auc": a});
            if let Some(o) = common.out {
                mirrn::io::write_atomic(&o, format!("{rec}\n").as_bytes())?;
            }
            print_line(rec);
        }
        Cmd::Ablate { common, variants } => {
            let cfg = load_config(&common)?;
            let variants = variants.unwrap_or_else(|| cfg.ablation.variants.clone());
            let base = cfg.resolved_model();
            let need = variants.iter().map(|v| base.with_variant(v)).collect::<Result<Vec<_>>>()?;
            let p = prepared(&cfg, need.iter().any(|m| m.needs_clusters()))?;
            let rows = run_ablation(&cfg, &p, &variants)?;
            let path = common.out.unwrap_or(cfg.ablation.results);
            write_ablation(&rows, &path)?;
            for r in &rows {
                print_line(serde_json::to_value(r).map_err(|e| Error::Format(e.to_string()))?);
            }
        }
        Cmd::BenchRetrieval { l, d, m, k, opts } => {
            let r = run_concurrent(opts.threads, || bench_retrieval(l, d, m, k, opts.reps, opts.seed))?;
            emit_report(&r, opts.out.as_deref())?;
        }
        Cmd::BenchMixer { k, d, n, opts } => {
            let r = run_concurrent(opts.threads, || bench_mixer(k, d, n, opts.reps, opts.seed))?;
            emit_report(&r, opts.out.as_deref())?;
        }
        Cmd::BenchOverhead { config, batch, opts } => {
            let cfg = match &config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            let mc = cfg.resolved_model();
            let r = run_concurrent(opts.threads, || bench_overhead(&mc, &cfg.retrieval, batch, opts.reps, opts.seed))?;
            emit_report(&r, opts.out.as_deref())?;
        }
    }
    Ok(())
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Dimension(_) => "dimension",
        Error::Input(_) => "input",
        Error::Contract(_) => "contract",
        Error::Config(_) => "config",
        Error::Metric(_) => "metric",
        Error::Parse { .. } => "parse",
        Error::MissingArtifact { .. } => "missing_artifact",
        Error::Format(_) => "format",
        Error::Diverged { .. } => "diverged",
        Error::Io(_) => "io",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", json!({"error": "usage", "message": first}));
            return ExitCode::from(2);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut rec = json!({"error": kind(&e), "message": e.to_string()});
            if let Error::MissingArtifact { what, path } = &e {
                rec["artifact"] = json!(what);
                rec["path"] = json!(path);
            }
            eprintln!("{rec}");
            ExitCode::FAILURE
        }
    }
}
