//! `htb`: run heavy-tailed bandit experiments from JSON configs.
//!
//! Exit status is 0 on success, 1 when a run fails or reports invariant
//! violations, and 2 when the configuration is invalid.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use htb_core::design::{centered_optimal_design, g_optimal_design, DEFAULT_DESIGN_TOL};
use htb_core::env::moment_monte_carlo;
use htb_core::harness::{
    run_experiment, scaling_probe, summary, trace, write_curve_csv, write_sweep_csv,
    write_trace_jsonl, ExperimentConfig, Prepared,
};
use htb_core::Error;

#[derive(Parser)]
#[command(name = "htb", version, about = "Heavy-tailed bandit experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the base seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress and summary messages.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment; writes a regret CSV and, with --out, a
    /// summary JSON next to it.
    Run(Common),
    /// Rerun the experiment for several horizons into one CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated horizons, e.g. 4096,8192,16384.
        #[arg(long, value_delimiter = ',', required = true)]
        horizons: Vec<usize>,
    },
    /// Compute both exploration designs for the configured features.
    CheckDesign {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_DESIGN_TOL)]
        tol: f64,
    },
    /// Print per-arm moment certificates and a Monte Carlo check.
    ValidateMoments {
        #[command(flatten)]
        common: Common,
        /// Monte Carlo draws per arm.
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
    },
    /// Dump per-round records of one repetition as JSON lines.
    Trace(Common),
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("HTB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("HTB_THREADS={raw:?} is not a count"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    Ok(())
}

fn dispatch(cmd: Command) -> CliResult<ExitCode> {
    match cmd {
        Command::Run(c) => cmd_run(&c),
        Command::Sweep { common, horizons } => cmd_sweep(&common, &horizons),
        Command::CheckDesign { common, tol } => cmd_check_design(&common, tol),
        Command::ValidateMoments { common, samples } => cmd_validate(&common, samples),
        Command::Trace(c) => cmd_trace(&c),
    }
}

fn load(c: &Common) -> CliResult<Prepared> {
    let mut cfg = ExperimentConfig::from_path(&c.config).map_err(classify)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.prepare().map_err(classify)
}

/// Config and I/O problems with the inputs exit 2, everything else exits 1.
fn classify(e: Error) -> Failure {
    match e {
        Error::Config(_) | Error::Io(_) | Error::InvalidParameter { .. } => {
            Failure::Config(anyhow!(e))
        }
        other => Failure::Runtime(anyhow!(other)),
    }
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn summary_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

fn cmd_run(c: &Common) -> CliResult<ExitCode> {
    let prep = load(c)?;
    let curve = run_experiment(&prep).map_err(|e| Failure::Runtime(anyhow!(e)))?;
    write_curve_csv(output(c.out.as_deref())?, &prep.config, &curve)
        .map_err(|e| Failure::Runtime(anyhow!(e)))?;
    if let Some(out) = &c.out {
        let path = summary_path(out);
        let mut w = output(Some(&path))?;
        serde_json::to_writer_pretty(&mut w, &summary(&prep, &curve)).context("writing summary")?;
        writeln!(w).context("writing summary")?;
        w.flush().context("writing summary")?;
    }
    if !c.quiet {
        eprintln!(
            "{}: regret {:.4} at T = {} ({} repetitions), {} invariant violations",
            prep.config.run_id(),
            curve.mean_regret.last().copied().unwrap_or(0.0),
            prep.config.horizon,
            prep.config.repetitions,
            curve.violations_total
        );
        if curve.entropy_growth_events > 0 {
            eprintln!(
                "note: {} penalty growth events",
                curve.entropy_growth_events
            );
        }
    }
    Ok(if curve.violations_total == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_sweep(c: &Common, horizons: &[usize]) -> CliResult<ExitCode> {
    let prep = load(c)?;
    let rows = scaling_probe(&prep.config, horizons).map_err(classify)?;
    write_sweep_csv(output(c.out.as_deref())?, &prep.config, &rows)
        .map_err(|e| Failure::Runtime(anyhow!(e)))?;
    let violations: u64 = rows.iter().map(|r| r.violations_total).sum();
    if !c.quiet {
        for r in &rows {
            eprintln!(
                "T = {:>8}: regret {:.4} (se {:.4}), /T^(1/eps) {:.4}, /ln T {:.4}",
                r.horizon, r.mean_regret, r.stderr, r.ratio_t_root, r.ratio_log
            );
        }
    }
    Ok(if violations == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_check_design(c: &Common, tol: f64) -> CliResult<ExitCode> {
    let prep = load(c)?;
    let features = prep
        .env
        .features()
        .ok_or_else(|| Failure::Config(anyhow!("check-design needs `environment.features`")))?;
    let d = features.dim() as f64;
    let mut w = output(c.out.as_deref())?;
    let mut ok = true;
    let g = g_optimal_design(features, tol).map_err(|e| Failure::Runtime(anyhow!(e)))?;
    ok &= g.max_leverage <= d * (1.0 + tol);
    let report = |w: &mut Box<dyn Write>, name: &str, r: &htb_core::design::DesignResult| {
        writeln!(
            w,
            "{name}: max leverage {:.9} (bound {:.9}), support {}, iterations {}, weights {:?}",
            r.max_leverage,
            d * (1.0 + tol),
            r.support_size(),
            r.iterations,
            r.distribution.weights()
        )
    };
    report(&mut w, "g_optimal", &g).context("writing report")?;
    match centered_optimal_design(features, tol) {
        Ok(cd) => {
            ok &= cd.max_leverage <= d * (1.0 + tol);
            report(&mut w, "centered", &cd).context("writing report")?;
        }
        Err(e @ Error::AffinelyDegenerate { .. }) => {
            writeln!(w, "centered: {e}").context("writing report")?;
            ok = false;
        }
        Err(e) => return Err(Failure::Runtime(anyhow!(e))),
    }
    w.flush().context("writing report")?;
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_validate(c: &Common, samples: usize) -> CliResult<ExitCode> {
    let prep = load(c)?;
    let env = &prep.env;
    let eps = prep.spec.epsilon();
    let sigma = prep.spec.sigma();
    let certs = env
        .certificates(eps)
        .map_err(|e| Failure::Runtime(anyhow!(e)))?;
    let low = (eps - 0.1).max(0.5);
    let low_bounds = env
        .certificates(low)
        .map_err(|e| Failure::Runtime(anyhow!(e)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(prep.config.seed);
    let mut w = output(c.out.as_deref())?;
    writeln!(
        w,
        "noise scale {} ({}), eps {eps}, sigma {sigma}",
        env.scale(),
        if env.is_calibrated() {
            "calibrated"
        } else {
            "fixed"
        }
    )
    .context("writing report")?;
    let mut ok = true;
    for (arm, (&cert, &low_bound)) in certs.iter().zip(&low_bounds).enumerate() {
        let (mc, se) = moment_monte_carlo(env, 1, arm, low, samples, &mut rng)
            .map_err(|e| Failure::Runtime(anyhow!(e)))?;
        let cert_ok = cert <= sigma * (1.0 + 1e-12);
        let mc_ok = mc <= low_bound + 3.0 * se;
        ok &= cert_ok;
        writeln!(
            w,
            "arm {arm}: certificate {cert:.6} {} | E|l|^{low:.2} monte carlo {mc:.6} (se {se:.6}) vs bound {low_bound:.6} {}",
            if cert_ok { "ok" } else { "EXCEEDS sigma" },
            if mc_ok { "ok" } else { "above bound" },
        )
        .context("writing report")?;
    }
    w.flush().context("writing report")?;
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_trace(c: &Common) -> CliResult<ExitCode> {
    let prep = load(c)?;
    let records = trace(&prep, prep.config.seed).map_err(|e| Failure::Runtime(anyhow!(e)))?;
    write_trace_jsonl(output(c.out.as_deref())?, &records)
        .map_err(|e| Failure::Runtime(anyhow!(e)))?;
    Ok(ExitCode::SUCCESS)
}
