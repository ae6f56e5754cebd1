use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use commprove_core::analytics::{
    breakeven_provers, daily_economics, emit_tables, CostModel, HardwareClass, TableRequest,
    REFERENCE_BASELINE_MINUTES, REFERENCE_BATCH_JOBS,
};
use commprove_core::backend::PAPER_SCALE_PROOF_PAD_BYTES;
use commprove_core::distributor::{
    DEFAULT_RATE_LIMIT_WINDOW_MS, DEFAULT_RETRY_AFTER_MS,
    DEFAULT_REWARD_MICROUSD,
};
use commprove_core::simulator::{parse_scenarios, reports_to_csv, sweep};
use commprove_core::store::{DEFAULT_FANIN, DEFAULT_WITNESS_BYTES, PAPER_SCALE_WITNESS_BYTES};
use commprove_core::{
    BatchSpec, CoreStore, Distributor, DistributorConfig, ProvingParams, RateLimit, SystemClock,
    WorkPuzzle,
};
use commprove_net::{ClientBehavior, ClientConfig};
use tokio::sync::watch;

const DEFAULT_DIFFICULTY: u8 = 12;

/// Community proving: job distributor, prover client, simulator and cost analytics.
#[derive(Debug, Parser)]
#[command(name = "commprove", version)]
struct Cli {
    /// Seed for witness generation and simulation randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory receiving every file a subcommand writes.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the Job Distributor over HTTP with one freshly ingested batch.
    Serve(ServeArgs),
    /// Run a prover client against a Job Distributor.
    Prove(ProveArgs),
    /// Run simulation scenarios from a JSON file and write CSV results.
    Simulate(SimulateArgs),
    /// Closed-form proving time, breakeven and payout calculations.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "PROVER_JD_LISTEN", default_value = "127.0.0.1:8080")]
    listen: String,
    #[arg(long, default_value = "batch-0")]
    batch_id: String,
    #[arg(long, default_value_t = 100)]
    jobs: u32,
    #[arg(long, default_value_t = DEFAULT_FANIN)]
    fanin: u32,
    /// Finish the batch after round 0 instead of aggregating.
    #[arg(long)]
    single_round: bool,
    #[arg(long, default_value_t = DEFAULT_WITNESS_BYTES)]
    witness_bytes: usize,
    #[arg(long, default_value_t = DEFAULT_DIFFICULTY)]
    difficulty: u8,
    #[arg(long, default_value_t = 0)]
    proof_pad_bytes: usize,
    /// Production-sized witnesses (about 470 KB) and proofs (about 742 KB).
    #[arg(long)]
    paper_scale: bool,
    #[arg(long, default_value_t = DEFAULT_REWARD_MICROUSD)]
    rate_microusd: u64,
    #[arg(long, default_value_t = DEFAULT_RETRY_AFTER_MS)]
    retry_after_ms: u64,
    /// Cap on a prover's outstanding assignments within the window.
    #[arg(long)]
    rate_limit_cap: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_RATE_LIMIT_WINDOW_MS / 1000)]
    rate_limit_window_s: u64,
    /// Stop once every job of the batch is proven.
    #[arg(long)]
    exit_when_complete: bool,
}

#[derive(Debug, Args)]
struct ProveArgs {
    #[arg(long)]
    jd: String,
    #[arg(long)]
    prover_id: String,
    #[arg(long)]
    wallet: String,
    #[arg(long)]
    max_jobs: Option<u64>,
    /// honest | corrupt | hoard | slow:<factor>
    #[arg(long, default_value = "honest")]
    behavior: ClientBehavior,
    #[arg(long, default_value_t = DEFAULT_DIFFICULTY)]
    difficulty: u8,
    #[arg(long, default_value_t = 0)]
    proof_pad_bytes: usize,
    #[arg(long, default_value_t = commprove_net::client::DEFAULT_IDLE_BACKOFF_MS)]
    idle_backoff_ms: u64,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario JSON: one scenario object or an array of them.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Subcommand)]
enum AnalyzeCommand {
    /// Ideal-parallel batch time grid and breakeven prover counts.
    Table2 {
        #[arg(long, default_value_t = REFERENCE_BATCH_JOBS)]
        jobs: u64,
        #[arg(long, default_value_t = REFERENCE_BASELINE_MINUTES)]
        baseline_min: f64,
    },
    /// Provers needed to match the baseline batch time.
    Breakeven {
        /// 8-core-cpu | 16-core-cpu | macbook | gpu, or per-job seconds.
        #[arg(long)]
        hw: String,
        #[arg(long, default_value_t = REFERENCE_BATCH_JOBS)]
        jobs: u64,
        #[arg(long, default_value_t = REFERENCE_BASELINE_MINUTES)]
        baseline_min: f64,
    },
    /// Jobs per day and daily earnings of one always-on prover.
    Economics {
        #[arg(long)]
        hw: String,
        #[arg(long)]
        rate_microusd: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();

    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    fs::create_dir_all(&cli.out_dir)
        .with_context(|| format!("creating output directory {}", cli.out_dir.display()))?;
    match cli.command {
        Command::Serve(args) => runtime()?.block_on(serve(args, cli.seed.unwrap_or(0), &cli.out_dir)),
        Command::Prove(args) => runtime()?.block_on(prove(args, &cli.out_dir)),
        Command::Simulate(args) => simulate(args, cli.seed, &cli.out_dir),
        Command::Analyze(cmd) => analyze(cmd, &cli.out_dir),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn write_out(out_dir: &Path, name: &str, contents: &[u8]) -> Result<PathBuf> {
    let path = out_dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Resolves when ctrl-c arrives or `stop` flips to true.
async fn stop_signal(mut stop: watch::Receiver<bool>) {
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = stop.wait_for(|s| *s) => {}
    }
}

async fn serve(args: ServeArgs, seed: u64, out_dir: &Path) -> Result<()> {
    let (witness_bytes, pad_bytes) = if args.paper_scale {
        (PAPER_SCALE_WITNESS_BYTES, PAPER_SCALE_PROOF_PAD_BYTES)
    } else {
        (args.witness_bytes, args.proof_pad_bytes)
    };
    let params = ProvingParams::new(args.difficulty, pad_bytes)?;
    let spec = BatchSpec {
        batch_id: args.batch_id.clone(),
        round0_jobs: args.jobs,
        fanin: args.fanin,
        witness_size_bytes: witness_bytes,
        single_round: args.single_round,
    };
    let store = Arc::new(CoreStore::new());
    store.ingest_batch(spec, seed)?;
    let config = DistributorConfig {
        reward_microusd: args.rate_microusd,
        retry_after_ms: args.retry_after_ms,
        rate_limit: args.rate_limit_cap.map(|cap| RateLimit {
            window_ms: args.rate_limit_window_s * 1000,
            max_outstanding: cap,
        }),
    };
    let jd = Arc::new(Distributor::new(
        store.clone(),
        Arc::new(WorkPuzzle::new(params)),
        Arc::new(SystemClock::new()),
        config,
    ));
    let handle = commprove_net::serve(&args.listen, jd.clone()).await?;
    println!("listening on {}", handle.local_addr());
    std::io::stdout().flush()?;

    let (done_tx, done_rx) = watch::channel(false);
    if args.exit_when_complete {
        let store = store.clone();
        tokio::spawn(async move {
            while !store.all_complete() {
                tokio::time::sleep(Duration::from_millis(20)).await;
            }
            let _ = done_tx.send(true);
        });
    }
    stop_signal(done_rx).await;
    handle.shutdown().await?;

    let mut ledger = Vec::new();
    jd.write_ledger(&mut ledger)?;
    write_out(out_dir, "ledger.jsonl", &ledger)?;
    let mut snapshot = Vec::new();
    store.write_snapshot(&mut snapshot)?;
    write_out(out_dir, "store.jsonl", &snapshot)?;
    let metrics = serde_json::to_vec_pretty(&jd.snapshot_metrics())?;
    write_out(out_dir, "metrics.json", &metrics)?;
    // Whoever launched us may have stopped reading after the banner.
    let _ = writeln!(std::io::stdout(), "{}", String::from_utf8_lossy(&metrics));
    Ok(())
}

async fn prove(args: ProveArgs, out_dir: &Path) -> Result<()> {
    let config = ClientConfig {
        jd_endpoint: args.jd,
        prover_id: args.prover_id.clone(),
        wallet: args.wallet,
        params: ProvingParams::new(args.difficulty, args.proof_pad_bytes)?,
        max_jobs: args.max_jobs,
        idle_backoff_ms: args.idle_backoff_ms,
        behavior: args.behavior,
    };
    let (stop_tx, stop_rx) = watch::channel(false);
    tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            let _ = stop_tx.send(true);
        }
    });
    let report = commprove_net::run(config, stop_rx).await?;
    let json = serde_json::to_vec_pretty(&report)?;
    write_out(out_dir, &format!("prove-{}.json", sanitize(&args.prover_id)), &json)?;
    println!("{}", String::from_utf8_lossy(&json));
    Ok(())
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn simulate(args: SimulateArgs, seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let mut scenarios = parse_scenarios(&text)?;
    if let Some(seed) = seed {
        for scenario in &mut scenarios {
            scenario.seed = seed;
        }
    }
    let reports = sweep(&scenarios)?;
    let csv = reports_to_csv(&reports)?;
    write_out(out_dir, "simulate.csv", csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn hardware(name: &str) -> Result<HardwareClass> {
    if let Some(hw) = HardwareClass::preset(name) {
        return Ok(hw);
    }
    match name.parse::<f64>() {
        Ok(secs) if secs > 0.0 && secs.is_finite() => Ok(HardwareClass::new(format!("{secs}s"), secs)),
        _ => bail!("unknown hardware {name:?}; expected 8-core-cpu, 16-core-cpu, macbook, gpu or positive per-job seconds"),
    }
}

fn analyze(cmd: AnalyzeCommand, out_dir: &Path) -> Result<()> {
    match cmd {
        AnalyzeCommand::Table2 { jobs, baseline_min } => {
            check_table_inputs(jobs, baseline_min)?;
            let tables = emit_tables(&TableRequest {
                jobs,
                baseline_minutes: baseline_min,
                ..TableRequest::default()
            });
            let times = tables.times_csv();
            let breakeven = tables.breakeven_csv();
            write_out(out_dir, "table2.csv", times.as_bytes())?;
            write_out(out_dir, "breakeven.csv", breakeven.as_bytes())?;
            print!("{times}\n{breakeven}");
        }
        AnalyzeCommand::Breakeven { hw, jobs, baseline_min } => {
            check_table_inputs(jobs, baseline_min)?;
            let hw = hardware(&hw)?;
            let csv = format!(
                "hardware,breakeven\n{},{}\n",
                hw.name,
                breakeven_provers(jobs, &hw, baseline_min)
            );
            write_out(out_dir, &format!("breakeven-{}.csv", sanitize(&hw.name)), csv.as_bytes())?;
            print!("{csv}");
        }
        AnalyzeCommand::Economics { hw, rate_microusd } => {
            let hw = hardware(&hw)?;
            let e = daily_economics(&hw, CostModel { rate_microusd_per_job: rate_microusd });
            let csv = format!(
                "hardware,per_job_s,rate_microusd,jobs_per_day,usd_per_day\n{},{},{},{:.2},{:.4}\n",
                hw.name, hw.per_job_seconds, rate_microusd, e.jobs_per_day, e.usd_per_day
            );
            write_out(out_dir, &format!("economics-{}.csv", sanitize(&hw.name)), csv.as_bytes())?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn check_table_inputs(jobs: u64, baseline_min: f64) -> Result<()> {
    if jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    if !(baseline_min > 0.0 && baseline_min.is_finite()) {
        bail!("--baseline-min must be positive");
    }
    Ok(())
}
