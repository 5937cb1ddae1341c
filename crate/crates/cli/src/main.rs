//! `mint`: generate workloads, run the pipeline, query the store.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mint_core::backend::{QueryResult, TraceStore};
use mint_core::config::MintConfig;
use mint_core::pipeline::{run_pipeline, RunStats};
use mint_core::sampler::SamplerRegistry;
use mint_core::workload::{generate_workload, WorkloadIter};

const STATS_FILE: &str = "run.stats";

#[derive(Parser)]
#[command(name = "mint", version, about = "Pattern-based trace storage with retroactive sampling")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "mint-store")]
    store_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic span stream.
    Gen {
        #[arg(long)]
        traces: Option<usize>,
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long)]
        anomaly_rate: Option<f64>,
        /// Output file; stdout if omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Ground-truth sidecar (JSON lines).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Ingest a stream into the store and write run statistics.
    Run {
        /// Span stream, one JSON record per line.
        input: PathBuf,
        /// Print key=value statistics instead of the summary.
        #[arg(long)]
        kv: bool,
    },
    /// Print one trace from the store.
    Query { trace_id: String },
    /// Print the statistics of the last run.
    Stats {
        #[arg(long)]
        kv: bool,
    },
    /// Generate, run and tabulate compression and query outcomes.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = vec![10_000usize, 50_000])]
        traces: Vec<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<MintConfig> {
    let mut cfg = match &cli.config {
        Some(p) => MintConfig::load(p)?,
        None => MintConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.workload.seed = seed;
        cfg.sampler.rng_seed = seed;
    }
    Ok(cfg)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).with_context(|| format!("open {}", path.display()))?;
    BufReader::new(f)
        .lines()
        .filter(|l| !l.as_ref().is_ok_and(|l| l.trim().is_empty()))
        .collect::<Result<_, _>>()
        .with_context(|| format!("read {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    let mut cfg = load_config(cli)?;
    match &cli.cmd {
        Cmd::Gen {
            traces,
            agents,
            anomaly_rate,
            out,
            truth,
        } => {
            let spec = &mut cfg.workload;
            spec.traces = traces.unwrap_or(spec.traces);
            spec.agents = agents.unwrap_or(spec.agents);
            spec.anomaly_rate = anomaly_rate.unwrap_or(spec.anomaly_rate);
            let mut sink: Box<dyn Write> = match out {
                Some(p) => Box::new(std::io::BufWriter::new(fs::File::create(p).with_context(|| format!("create {}", p.display()))?)),
                None => Box::new(std::io::BufWriter::new(std::io::stdout().lock())),
            };
            let mut truth_sink = match truth {
                Some(p) => Some(std::io::BufWriter::new(fs::File::create(p)?)),
                None => None,
            };
            for (lines, t) in WorkloadIter::new(spec.clone())? {
                for l in lines {
                    writeln!(sink, "{l}")?;
                }
                if let Some(ts) = truth_sink.as_mut() {
                    writeln!(ts, "{}", serde_json::to_string(&t)?)?;
                }
            }
            sink.flush()?;
        }
        Cmd::Run { input, kv } => {
            let lines = read_lines(input)?;
            let out = run_pipeline(&lines, &cfg, &SamplerRegistry::default())?;
            for (offset, reason) in out.errors.iter().take(20) {
                eprintln!("record {offset}: {reason}");
            }
            out.store.save(&cli.store_dir)?;
            fs::write(cli.store_dir.join(STATS_FILE), out.stats.to_kv())?;
            print_stats(&out.stats, *kv);
        }
        Cmd::Query { trace_id } => {
            let store = TraceStore::open(&cli.store_dir)?;
            match store.query(trace_id) {
                QueryResult::Exact(t) => print!("{}", t.render()),
                QueryResult::Approximate(a) => print!("{}", a.render()),
                QueryResult::Miss => {
                    println!("trace {trace_id} not found");
                    return Ok(ExitCode::from(1));
                }
            }
        }
        Cmd::Stats { kv } => {
            let path = cli.store_dir.join(STATS_FILE);
            let text = fs::read_to_string(&path).with_context(|| format!("read {}", path.display()))?;
            let stats = match RunStats::from_kv(&text) {
                Ok(s) => s,
                Err(e) => bail!("{}: {e}", path.display()),
            };
            print_stats(&stats, *kv);
        }
        Cmd::Bench { traces } => {
            println!("{:>8} {:>12} {:>10} {:>8} {:>8} {:>8} {:>8} {:>5} {:>8}", "traces", "raw B", "stored B", "ratio", "sampled", "exact", "approx", "miss", "secs");
            for &n in traces {
                cfg.workload.traces = n;
                let w = generate_workload(&cfg.workload)?;
                let t0 = Instant::now();
                let s = run_pipeline(&w.lines, &cfg, &SamplerRegistry::default())?.stats;
                println!(
                    "{:>8} {:>12} {:>10} {:>8.2} {:>8} {:>8} {:>8} {:>5} {:>8.2}",
                    n,
                    s.raw_bytes,
                    s.stored_bytes,
                    s.compression_ratio,
                    s.sampled,
                    s.query_exact,
                    s.query_approximate,
                    s.query_miss,
                    t0.elapsed().as_secs_f64()
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn print_stats(s: &RunStats, kv: bool) {
    if kv {
        print!("{}", s.to_kv());
    } else {
        println!("{s}");
    }
}
