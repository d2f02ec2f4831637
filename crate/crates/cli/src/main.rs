use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cfee_core::baselines::run_baselines;
use cfee_core::config::RunConfig;
use cfee_core::gnn::PolicyParams;
use cfee_core::objective::{sum_ee_with, EeParams};
use cfee_core::runtime::{configure_threads, retain_freed_memory};
use cfee_core::scenario::{ChannelSample, Dataset};
use cfee_core::training::{
    infer, load_checkpoint, resume, save_checkpoint, train, write_metrics_csv, TrainState,
};
use cfee_core::verify::{equivariance_suite, gradcheck_suite, toy1d_suite, Toy1dConfig};

/// Energy-efficient power allocation for cell-free massive MIMO.
///
/// Set CFEE_THREADS to bound the worker pool.
#[derive(Parser)]
#[command(name = "cfee", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a channel dataset.
    GenData {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a policy.
    Train {
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_checkpoint: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        /// Continue from this checkpoint's training state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mean and per-sample EE of a trained policy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Supplies the input normalization used in training.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Per-sample CSV output.
        #[arg(long)]
        per_sample: Option<PathBuf>,
    },
    /// Policy against equal, random and multi-start allocations.
    Compare {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV output (stdout if absent).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Built-in correctness suites.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Gradcheck,
    Equivariance,
    Toy1d,
}

fn main() -> ExitCode {
    retain_freed_memory();
    let cli = Cli::parse();
    let outcome = configure_threads().map_err(anyhow::Error::from).and_then(|_| run(cli.command));
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// `Ok(false)` means the command ran but its check failed.
fn run(command: Command) -> Result<bool> {
    match command {
        Command::GenData {
            config,
            out,
            count,
            seed,
        } => gen_data(&config, &out, count, seed),
        Command::Train {
            config,
            data,
            out_checkpoint,
            metrics,
            resume,
            seed,
        } => train_cmd(&config, &data, &out_checkpoint, &metrics, resume.as_deref(), seed),
        Command::Eval {
            checkpoint,
            data,
            config,
            per_sample,
        } => eval(&checkpoint, &data, config.as_deref(), per_sample.as_deref()),
        Command::Compare {
            checkpoint,
            data,
            config,
            out,
            seed,
        } => compare(&checkpoint, &data, config.as_deref(), out.as_deref(), seed),
        Command::Verify { suite, seed } => Ok(verify(suite, seed)),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let ds = Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
    if ds.is_empty() {
        bail!("dataset {} is empty", path.display());
    }
    Ok(ds)
}

fn load_policy(path: &Path) -> Result<PolicyParams<f64>> {
    Ok(load_checkpoint::<f64>(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .best)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn gen_data(config: &Path, out: &Path, count: usize, seed: u64) -> Result<bool> {
    if count == 0 {
        bail!("count must be ≥ 1");
    }
    let cfg = load_config(Some(config))?;
    let ds = Dataset::generate(&cfg.system, count, seed)?;
    ds.save(out).with_context(|| format!("writing {}", out.display()))?;
    let stats = ds.gain_stats();
    println!(
        "wrote {count} samples ({} APs, {} UEs) to {}",
        cfg.system.n_aps,
        cfg.system.n_ues,
        out.display()
    );
    println!("gain mean {:.4e} std {:.4e} over {} gains", stats.mean, stats.std, stats.count);
    Ok(true)
}

fn train_cmd(
    config: &Path,
    data: &Path,
    checkpoint: &Path,
    metrics: &Path,
    from: Option<&Path>,
    seed: Option<u64>,
) -> Result<bool> {
    let mut cfg = load_config(Some(config))?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let ds = load_dataset(data)?;
    let start = Instant::now();
    let outcome = match from {
        None => train::<f64>(&cfg.train, &cfg.arch, &ds)?,
        Some(path) => {
            let ck = load_checkpoint::<f64>(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            let Some((state, best_ee)) = ck.resume else {
                bail!("{} holds no training state to resume", path.display());
            };
            check_resumable(&state, &cfg)?;
            println!("resuming at iteration {}", state.iteration);
            resume(&cfg.train, &ds, state, ck.best, best_ee)?
        }
    };
    save_checkpoint(checkpoint, &outcome.best, Some((&outcome.state, outcome.best_ee)))
        .with_context(|| format!("writing {}", checkpoint.display()))?;
    let mut w = create(metrics)?;
    write_metrics_csv(&mut w, &outcome.metrics)?;
    w.flush()?;
    let last = outcome.metrics.last();
    println!(
        "trained to iteration {} in {:.1} s; best probe EE {:.4e} bit/J; final psi {:.4e}, kappa {:.4e}",
        outcome.state.iteration,
        start.elapsed().as_secs_f64(),
        outcome.best_ee,
        last.map_or(f64::NAN, |m| m.psi),
        outcome.state.kappa.kappa,
    );
    Ok(true)
}

fn check_resumable(state: &TrainState<f64>, cfg: &RunConfig) -> Result<()> {
    if state.policy.p_max != cfg.train.p_max {
        bail!(
            "checkpoint p_max {} differs from config p_max {}",
            state.policy.p_max,
            cfg.train.p_max
        );
    }
    if state.iteration > cfg.train.total_iterations {
        bail!(
            "checkpoint is at iteration {}, past total_iterations {}",
            state.iteration,
            cfg.train.total_iterations
        );
    }
    Ok(())
}

/// Per-sample policy EE and the mean inference wall time per sample.
fn policy_ee(policy: &PolicyParams<f64>, ds: &Dataset, cfg: &RunConfig) -> (Vec<f64>, f64) {
    let ee = EeParams::from_system(&ds.params);
    let threshold = ds.params.serve_threshold;
    let mut per_sample = Vec::with_capacity(ds.len());
    let mut elapsed = 0.0;
    for s in &ds.samples {
        let start = Instant::now();
        let bounds = infer(policy, &[s as &ChannelSample], &cfg.train.norm, threshold);
        elapsed += start.elapsed().as_secs_f64();
        per_sample.push(sum_ee_with(s, &bounds[0].midpoint(), &ee));
    }
    (per_sample, elapsed / ds.len() as f64)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

fn eval(checkpoint: &Path, data: &Path, config: Option<&Path>, per_sample: Option<&Path>) -> Result<bool> {
    let cfg = load_config(config)?;
    let ds = load_dataset(data)?;
    let policy = load_policy(checkpoint)?;
    let (values, secs) = policy_ee(&policy, &ds, &cfg);
    println!("samples {}", ds.len());
    println!("mean EE {:.6e} bit/J", mean(&values));
    println!("inference {:.3} ms per sample", secs * 1e3);
    if let Some(path) = per_sample {
        let mut w = create(path)?;
        writeln!(w, "sample,ee_bit_per_joule")?;
        for (i, v) in values.iter().enumerate() {
            writeln!(w, "{i},{v:e}")?;
        }
        w.flush()?;
    }
    Ok(true)
}

fn compare(
    checkpoint: &Path,
    data: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<bool> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.multistart.seed = s;
    }
    let ds = load_dataset(data)?;
    let policy = load_policy(checkpoint)?;
    let (gnn, _) = policy_ee(&policy, &ds, &cfg);
    let base = run_baselines(&ds, policy.p_max, cfg.equal_grid, &cfg.multistart, cfg.train.seed)?;
    let columns = [&gnn, &base.equal, &base.random, &base.multistart];
    let mut text = String::from("statistic,gnn,equal,random,multistart\n");
    let mut row = |name: &str, f: &dyn Fn(&Vec<f64>) -> f64| {
        let cells: Vec<String> = columns.iter().map(|c| format!("{:e}", f(c))).collect();
        text.push_str(&format!("{name},{}\n", cells.join(",")));
    };
    row("mean_ee_bit_per_joule", &|c| mean(c));
    row("std_ee_bit_per_joule", &|c| std_dev(c));
    row("gnn_ratio", &|c| mean(&gnn) / mean(c));
    match out {
        Some(path) => {
            let mut w = create(path)?;
            w.write_all(text.as_bytes())?;
            w.flush()?;
        }
        None => print!("{text}"),
    }
    Ok(true)
}

fn verify(suite: Suite, seed: u64) -> bool {
    let (label, passed) = match suite {
        Suite::Gradcheck => {
            let r = gradcheck_suite(20, seed);
            println!(
                "{} instances, {} entries, {} outside tolerance; max relative error {:.3e}, max absolute error {:.3e}",
                r.instances, r.entries, r.failures, r.max_rel_error, r.max_abs_error
            );
            if !r.passed() {
                println!("worst: {}", r.worst);
            }
            ("gradcheck", r.passed())
        }
        Suite::Equivariance => {
            let r = equivariance_suite(100, seed, &Default::default());
            println!(
                "{} samples; max deviation under UE permutation {:.3e}, under AP permutation {:.3e}",
                r.samples, r.max_ue_deviation, r.max_ap_deviation
            );
            ("equivariance", r.passed())
        }
        Suite::Toy1d => {
            let r = toy1d_suite(50, seed, &Toy1dConfig::default());
            println!(
                "{} seeds; support-regularized success {:.0}%, plain ascent success {:.0}%",
                r.seeds,
                100.0 * r.support_rate(),
                100.0 * r.plain_rate()
            );
            ("toy1d", r.passed())
        }
    };
    println!("{label}: {}", if passed { "PASS" } else { "FAIL" });
    passed
}
