use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use casreg::bench::{run_bench, summarize, BenchConfig, CSV_HEADER};
use casreg::geometry::metrics;
use casreg::io::{load_weights, read_cloud, read_transform, write_cloud, write_transform};
use casreg::network::CascadeWeights;
use casreg::pipeline::{register, FeatureMode, RegistrationConfig, SinkhornPolicy};
use casreg::selftest::{run_all, SelftestOptions};
use casreg::synth::{make_base_shape, synth_pair, Shape, SynthConfig};

#[derive(Parser)]
#[command(name = "casreg", version, about = "Rigid point-cloud registration with cascaded features")]
struct Cli {
    /// Worker threads for per-point work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a source cloud onto a reference cloud.
    Register(RegisterArgs),
    /// Write a synthetic source/reference pair and its ground truth.
    Synth(SynthArgs),
    /// Time registrations and print one CSV row per run.
    Bench(BenchArgs),
    /// Run the built-in numerical checks.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, default_value = "cascade")]
    mode: FeatureMode,
    /// `NTW 1` weight file; random weights seeded by --seed when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    iters: usize,
    #[arg(long, default_value_t = 64)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the estimated transform.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `fixed:N` or `adaptive:N`.
    #[arg(long, default_value = "adaptive:5")]
    sinkhorn: SinkhornPolicy,
    #[arg(long)]
    no_slack: bool,
    /// Ground-truth transform; enables error metrics.
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "helix")]
    shape: Shape,
    #[arg(long, default_value_t = 1024)]
    n: usize,
    #[arg(long, default_value_t = 0.7)]
    keep: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 45.0)]
    max_rot: f64,
    #[arg(long, default_value_t = 0.5)]
    max_trans: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Files are written as `<prefix>_src.xyz`, `<prefix>_ref.xyz`, `<prefix>_gt.txt`.
    #[arg(long)]
    out_prefix: String,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "baseline,cascade")]
    modes: Vec<FeatureMode>,
    #[arg(long, default_value_t = 5)]
    repeat: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    k: usize,
    #[arg(long, default_value_t = 5)]
    iters: usize,
}

#[derive(Args)]
struct SelftestArgs {
    /// Corrupt the folded weights; the fold suite is expected to fail.
    #[arg(long, hide = true)]
    inject_fold_fault: bool,
}

/// A failure with the exit code it maps to.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<casreg::Error> for Failure {
    fn from(e: casreg::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Selftest(a) => cmd_selftest(a),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn cmd_register(a: RegisterArgs) -> Result<ExitCode, Failure> {
    let cfg = RegistrationConfig {
        iterations: a.iters,
        neighbors: a.k,
        mode: a.mode,
        slack: !a.no_slack,
        sinkhorn: a.sinkhorn,
        seed: a.seed,
        ..Default::default()
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let src = read_cloud(&a.src)?;
    let reference = read_cloud(&a.reference)?;
    let gt = a.gt.as_ref().map(read_transform).transpose()?;
    let weights = match (a.mode, &a.weights) {
        (FeatureMode::Handcrafted, _) => None,
        (_, Some(path)) => Some(load_weights(path)?),
        (mode, None) => {
            eprintln!(
                "warning: no --weights given; using random weights (seed {}) for {} mode",
                a.seed,
                mode.name()
            );
            Some(CascadeWeights::init_random_with_dim(a.seed, cfg.iterations, cfg.feature_dim).map_err(casreg::Error::from)?)
        }
    };

    let result = register(&src, &reference, &cfg, weights.as_ref())?;
    println!(
        "registered {} source points onto {} reference points ({} mode, {} iterations)",
        src.len(),
        reference.len(),
        cfg.mode.name(),
        cfg.iterations
    );
    for it in &result.iterations {
        println!(
            "  iter {}: residual {:.6}, mean weight {:.4}, sinkhorn rounds {}",
            it.iteration, it.residual, it.mean_weight, it.sinkhorn_rounds
        );
    }
    let t = result.transform.to_row_major();
    println!("rotation:");
    for r in 0..3 {
        println!("  {:>12.8} {:>12.8} {:>12.8}", t[3 * r], t[3 * r + 1], t[3 * r + 2]);
    }
    println!("translation: {:.8} {:.8} {:.8}", t[9], t[10], t[11]);
    let m = gt.map(|gt| metrics(&result.transform, &gt, &src));
    if let Some(m) = &m {
        println!("RE {:.6} deg, TE {:.6}, CD {:.6e}", m.re_deg, m.te, m.cd);
    }
    println!("time {:.2} ms", result.times().total().as_secs_f64() * 1e3);
    if let Some(out) = &a.out {
        write_transform(&result.transform, m.as_ref(), out)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode, Failure> {
    let cfg = SynthConfig {
        n_points: a.n,
        keep_fraction: a.keep,
        noise_sigma: a.noise,
        max_rot_deg: a.max_rot,
        max_trans: a.max_trans,
        seed: a.seed,
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let base = make_base_shape(a.shape, a.n, a.seed).map_err(|e| Failure::Usage(e.to_string()))?;
    let pair = synth_pair(&cfg, &base)?;
    let src = format!("{}_src.xyz", a.out_prefix);
    let reference = format!("{}_ref.xyz", a.out_prefix);
    let gt = format!("{}_gt.txt", a.out_prefix);
    write_cloud(&pair.src, &src)?;
    write_cloud(&pair.reference, &reference)?;
    write_transform(&pair.gt, None, &gt)?;
    println!("wrote {src} ({} points), {reference} ({} points), {gt}", pair.src.len(), pair.reference.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(a: BenchArgs) -> Result<ExitCode, Failure> {
    let cfg = BenchConfig {
        sizes: a.sizes,
        modes: a.modes,
        repeat: a.repeat,
        seed: a.seed,
        neighbors: a.k,
        iterations: a.iters,
        ..Default::default()
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    println!("{CSV_HEADER}");
    let records = run_bench(&cfg, |r| println!("{}", r.csv_row()))?;
    print!("{}", summarize(&cfg, &records)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_selftest(a: SelftestArgs) -> Result<ExitCode, Failure> {
    let results = run_all(SelftestOptions {
        corrupt_fold: a.inject_fold_fault,
    });
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    Ok(if results.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
