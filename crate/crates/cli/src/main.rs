use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ltri_core::engine::{run_stream, Ablation, RunOutput};
use ltri_core::harness::{
    ablation_grid, calibrate_trace, lambda_sweep, niah_seeds, preset_table, report_from_run, span_recovery_seeds,
    tune_synthetic, tune_trace, write_json, write_lambda_sweep_csv, write_run, RunConfig,
};
use ltri_core::span_divider::DivisionParams;
use ltri_core::span_indexer::{RatioMode, DEFAULT_LAMBDA_GRID};
use ltri_core::synth::SyntheticTrace;
use ltri_core::trace::{write_trace, TraceReader, TraceSource};
use ltri_core::LtriError;

const EXIT_CONFIG: u8 = 2;
const EXIT_TRACE: u8 = 3;
const EXIT_GATE: u8 = 4;

#[derive(Parser)]
#[command(name = "ltri", version, about = "Streaming long-context memory engine driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic NIAH trace file.
    GenTrace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Tokens per file section.
        #[arg(long, default_value_t = 512)]
        section_len: usize,
    },
    /// Random-search θ/φ per layer and emit a preset table.
    Tune {
        #[command(flatten)]
        common: Common,
        /// Tune on a trace file, labeling needle blocks; otherwise on
        /// planted synthetic spans.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Blocks per layer used from the synthetic trace.
        #[arg(long, default_value_t = 64)]
        max_blocks: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate λ per layer against a target compression ratio.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Target ratio; defaults to the compression lower bound.
        #[arg(long)]
        target: Option<f64>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stream one trace through the engine and write the step reports.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Needle recall over seeded synthetic streams.
    Niah {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Run all eight P/RH/V combinations.
        #[arg(long)]
        ablation_grid: bool,
        /// Exit with status 4 when recall falls below --min-recall.
        #[arg(long)]
        gate: bool,
        #[arg(long, default_value_t = 0.95)]
        min_recall: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild CSV/JSON artifacts from a run directory.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory written by `ltri run`.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also sweep λ over the synthetic config.
        #[arg(long)]
        lambda_sweep: bool,
        /// Also measure span boundary recovery over this many seeds.
        #[arg(long)]
        span_recovery: Option<u64>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON file with `engine` and `trace` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Mechanisms to disable, such as `P,RH,V`.
    #[arg(long)]
    ablate: Option<String>,
    #[arg(long)]
    inject_evidence: bool,
    #[arg(long, value_enum)]
    persistent: Option<Switch>,
    #[arg(long, value_enum)]
    ratio_mode: Option<RatioArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum RatioArg {
    Row,
    Col,
    Rowcol,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, LtriError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.trace.seed = seed;
        }
        if let Some(list) = &self.ablate {
            cfg.engine.ablation = cfg.engine.ablation.with_ablated(list)?;
        }
        if let Some(p) = self.persistent {
            cfg.engine.ablation.persistent = matches!(p, Switch::On);
        }
        if self.inject_evidence {
            cfg.engine.inject_evidence = true;
        }
        if let Some(m) = self.ratio_mode {
            cfg.engine.ratio_mode = match m {
                RatioArg::Row => RatioMode::Row,
                RatioArg::Col => RatioMode::Col,
                RatioArg::Rowcol => RatioMode::RowCol,
            };
        }
        cfg.engine.validate()?;
        Ok(cfg)
    }
}

fn open_source(trace: Option<&Path>, cfg: &RunConfig) -> Result<Box<dyn TraceSource>, LtriError> {
    Ok(match trace {
        Some(p) => Box::new(TraceReader::open(p)?),
        None => Box::new(SyntheticTrace::new(cfg.trace.clone())?),
    })
}

/// Writes a line to stdout; a closed pipe is not an error.
fn say(line: &str) -> Result<(), LtriError> {
    match writeln!(std::io::stdout().lock(), "{line}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), LtriError> {
    say(&serde_json::to_string_pretty(value)?)
}

fn emit<T: serde::Serialize>(out: Option<&Path>, value: &T) -> Result<(), LtriError> {
    match out {
        Some(p) => write_json(p, value),
        None => print_json(value),
    }
}

fn execute(cli: Cli) -> Result<ExitCode, LtriError> {
    match cli.command {
        Command::GenTrace { common, out, section_len } => {
            let cfg = common.resolve()?;
            let mut src = SyntheticTrace::new(cfg.trace.clone())?;
            write_trace(&mut src, &out, section_len)?;
            print_json(&src.geometry_report())?;
        }
        Command::Tune {
            common,
            trace,
            trials,
            max_blocks,
            out,
        } => {
            let cfg = common.resolve()?;
            let seed = cfg.trace.seed;
            let results = match trace {
                Some(p) => tune_trace(&mut TraceReader::open(&p)?, cfg.engine.stream.l_init, trials, seed)?,
                None => tune_synthetic(&cfg.trace, max_blocks, trials, seed)?,
            };
            for r in &results {
                eprintln!(
                    "layer {:>2}: theta quantile {:.4}, phi {:.4}, F1 {:.4}",
                    r.layer, r.theta_quantile, r.iou_threshold, r.f1
                );
            }
            emit(out.as_deref(), &preset_table(&results))?;
        }
        Command::Calibrate {
            common,
            trace,
            target,
            bins,
            out,
        } => {
            let cfg = common.resolve()?;
            let mut src = open_source(trace.as_deref(), &cfg)?;
            let heads = src.header().heads;
            let index_heads = if cfg.engine.ablation.retrieval_heads { 1 } else { heads };
            let cal = calibrate_trace(src.as_mut(), &cfg.engine, index_heads, target, bins, &DEFAULT_LAMBDA_GRID)?;
            emit(out.as_deref(), &cal)?;
        }
        Command::Run { common, trace, out } => {
            let cfg = common.resolve()?;
            let mut src = open_source(trace.as_deref(), &cfg)?;
            let RunOutput { reports, summary } = run_stream(src.as_mut(), &cfg.engine)?;
            write_run(&out, &reports, &summary)?;
            eprintln!(
                "{} tokens, {} blocks evicted, recall {}",
                summary.tokens,
                summary.blocks,
                summary.aggregate_recall.map_or("n/a".to_string(), |r| format!("{r:.4}"))
            );
        }
        Command::Niah {
            common,
            seeds,
            ablation_grid: grid,
            gate,
            min_recall,
            out,
        } => {
            let cfg = common.resolve()?;
            let start = cfg.trace.seed;
            let range = start..start + seeds;
            let recall = if grid {
                let outcomes = ablation_grid(&cfg, range)?;
                for o in &outcomes {
                    say(&format!("{:<8} recall {:.4}", o.label, o.sweep.aggregate_recall))?;
                }
                let all_on = outcomes
                    .iter()
                    .find(|o| o.ablation == Ablation::default())
                    .map(|o| o.sweep.aggregate_recall);
                if let Some(p) = out.as_deref() {
                    write_json(p, &outcomes)?;
                }
                all_on.unwrap_or(0.0)
            } else {
                let sweep = niah_seeds(&cfg, range)?;
                say(&format!(
                    "aggregate recall {:.4} over {} streams",
                    sweep.aggregate_recall,
                    sweep.reports.len()
                ))?;
                if let Some(p) = out.as_deref() {
                    write_json(p, &sweep)?;
                }
                sweep.aggregate_recall
            };
            if gate {
                let pass = recall >= min_recall;
                say(&format!("gate {}: recall {recall:.4} vs {min_recall}", if pass { "PASS" } else { "FAIL" }))?;
                if !pass {
                    return Ok(ExitCode::from(EXIT_GATE));
                }
            }
        }
        Command::Report {
            common,
            run,
            out,
            lambda_sweep: sweep,
            span_recovery,
        } => {
            let cfg = common.resolve()?;
            std::fs::create_dir_all(&out)?;
            if let Some(dir) = &run {
                let index = report_from_run(dir, &out)?;
                print_json(&index)?;
            }
            if sweep {
                let grid: Vec<f64> = DEFAULT_LAMBDA_GRID.iter().copied().filter(|&l| l <= 10.0).collect();
                let rows = lambda_sweep(&cfg, &grid)?;
                write_lambda_sweep_csv(&out.join("lambda_sweep.csv"), &rows)?;
            }
            if let Some(n) = span_recovery {
                let counts = span_recovery_seeds(
                    &cfg.trace,
                    &DivisionParams::default(),
                    usize::MAX,
                    cfg.trace.seed..cfg.trace.seed + n,
                )?;
                write_json(&out.join("span_recovery.json"), &serde_json::json!({
                    "counts": counts,
                    "f1": counts.f1(),
                }))?;
            }
            if run.is_none() && !sweep && span_recovery.is_none() {
                return Err(LtriError::Config(
                    "report needs --run, --lambda-sweep or --span-recovery".to_string(),
                ));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("ltri: {e}");
            ExitCode::from(match e {
                LtriError::Config(_) => EXIT_CONFIG,
                LtriError::InvalidTrace(_) => EXIT_TRACE,
                _ => 1,
            })
        }
    }
}
