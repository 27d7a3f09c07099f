//! Command-line harness for the shared-stash ORAM experiments.
//!
//! Exit status: 0 when every check passes, 1 when a check fails or a run
//! errors, 2 on invalid usage.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use stash_oram::analysis::{compare_probes, shape_check, Check, Report, TraceProfile, Verdict};
use stash_oram::crypto::CipherKind;
use stash_oram::experiment::{
    run_obliviousness_suite, run_oracle_soak, run_overhead_scaling, run_stash_sweep, summarize, write_csv,
    write_scaling_csv, write_scaling_plot, write_sweep_files, ExperimentConfig, ObliviousOptions, RequestCount,
    SoakOptions,
};
use stash_oram::params::{Mode, Variant, WorkspaceSize};
use stash_oram::server::read_jsonl;
use stash_oram::workload::Workload;
use stash_oram::Error;

#[derive(Parser)]
#[command(name = "stash-oram", version, about = "Stateless hierarchical ORAM experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stash-demand sweep over (n, r); one CSV row per trial.
    Sweep(Common),
    /// Random reads and writes checked against a plain array.
    Soak {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100_000)]
        ops: u64,
        /// Corrupt one stored value before this operation.
        #[arg(long)]
        fault_at: Option<u64>,
    },
    /// Trace-shape and probe-distribution checks across workloads.
    Oblivious {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2000)]
        episodes: u64,
        /// Extra paired runs of the leaky probe policy.
        #[arg(long, default_value_t = 1)]
        control_pairs: usize,
        #[arg(long, default_value_t = 16)]
        buckets: usize,
    },
    /// Amortized server accesses per request across n.
    Scaling(Common),
    /// Compares two JSONL traces.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long = "trace", required = true, num_args = 1)]
        traces: Vec<PathBuf>,
        #[arg(long, default_value_t = 16)]
        buckets: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Prf,
    Tree,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Functional,
    Oblivious,
}

#[derive(Clone, Copy, ValueEnum)]
enum CipherArg {
    Aead,
    Transparent,
}

#[derive(Args)]
struct Common {
    #[arg(long, value_enum, default_value = "prf")]
    variant: VariantArg,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// RAM size; repeatable.
    #[arg(long = "n", default_values_t = [1024u64])]
    ns: Vec<u64>,
    /// Requests per run: a count, `n`, `4n`, `n/4` or `cycle`; repeatable.
    #[arg(long = "requests", value_parser = parse_requests)]
    requests: Vec<RequestCount>,
    /// Trials per n (paired runs for `oblivious`).
    #[arg(long, default_value_t = 1)]
    trials: usize,
    #[arg(long, default_value_t = 0.2)]
    epsilon: f64,
    #[arg(long, default_value_t = 2.0)]
    c: f64,
    #[arg(long, default_value_t = 1.0)]
    stash_factor: f64,
    /// Workspace exponent, `covering` or `unbounded`.
    #[arg(long, value_parser = parse_workspace)]
    nu: Option<WorkspaceSize>,
    /// uniform, sequential, repeat or file:<path>.
    #[arg(long, default_value = "uniform", value_parser = parse_workload)]
    workload: Workload,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "aead")]
    cipher: CipherArg,
    /// Fill the wall_ms column.
    #[arg(long)]
    timing: bool,
    /// CSV output; plot data goes next to it with a .dat extension.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for JSONL traces or divergence snapshots.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// JSON report; printed to stdout when omitted.
    #[arg(long)]
    report_out: Option<PathBuf>,
}

fn parse_requests(s: &str) -> Result<RequestCount, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_workload(s: &str) -> Result<Workload, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_workspace(s: &str) -> Result<WorkspaceSize, String> {
    match s {
        "covering" => Ok(WorkspaceSize::Covering),
        "unbounded" => Ok(WorkspaceSize::Unbounded),
        _ => s
            .parse()
            .map(WorkspaceSize::Exponent)
            .map_err(|_| format!("expected a number, covering or unbounded; got {s:?}")),
    }
}

impl Common {
    fn config(&self, mode: Mode, default_nu: WorkspaceSize, default_requests: RequestCount) -> ExperimentConfig {
        ExperimentConfig {
            variant: match self.variant {
                VariantArg::Prf => Variant::Prf,
                VariantArg::Tree => Variant::Tree,
            },
            mode,
            ns: self.ns.clone(),
            requests: if self.requests.is_empty() { vec![default_requests] } else { self.requests.clone() },
            trials: self.trials,
            epsilon: self.epsilon,
            c: self.c,
            stash_factor: self.stash_factor,
            workspace: self.nu.unwrap_or(default_nu),
            workload: self.workload.clone(),
            master_seed: self.seed,
            cipher: match self.cipher {
                CipherArg::Aead => CipherKind::Aead,
                CipherArg::Transparent => CipherKind::Transparent,
            },
            timing: self.timing,
        }
    }

    fn mode_or(&self, default: Mode) -> Mode {
        match self.mode {
            Some(ModeArg::Functional) => Mode::Functional,
            Some(ModeArg::Oblivious) => Mode::Oblivious,
            None => default,
        }
    }
}

fn emit_report(report: &Report, path: Option<&Path>) -> Result<(), Error> {
    let json = report.to_json()?;
    match path {
        Some(p) => std::fs::write(p, json + "\n")?,
        None => {
            // A closed pipe (e.g. `| head`) is not an error.
            if let Err(e) = writeln!(std::io::stdout().lock(), "{json}") {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(e.into());
                }
            }
        }
    }
    Ok(())
}

const N_REQUESTS: RequestCount = RequestCount::Scaled { num: 1, den: 1 };

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Sweep(common) => {
            if common.mode.is_some_and(|m| matches!(m, ModeArg::Oblivious)) {
                return Err(Error::Usage("mode: stash sweeps run in functional mode".into()));
            }
            let cfg = common.config(Mode::Functional, WorkspaceSize::Unbounded, N_REQUESTS);
            let rows = run_stash_sweep(&cfg)?;
            match &common.out {
                Some(out) => {
                    let dat = write_sweep_files(out, &rows)?;
                    eprintln!("wrote {} and {}", out.display(), dat.display());
                }
                None => write_csv(std::io::stdout().lock(), &rows)?,
            }
            let mut report = Report::default();
            for s in summarize(&rows) {
                report.checks.push(Check {
                    name: format!("no_overflow_n{}_r{}", s.n, s.r),
                    verdict: Verdict::from_bool(s.overflows == 0),
                    statistic: Some(s.max_demand as f64),
                    p: None,
                });
            }
            if common.report_out.is_some() || common.out.is_some() {
                emit_report(&report, common.report_out.as_deref())?;
            }
            Ok(report.passed())
        }
        Command::Soak { common, ops, fault_at } => {
            let cfg = common.config(common.mode_or(Mode::Functional), WorkspaceSize::Exponent(0.5), N_REQUESTS);
            if let Some(dir) = &common.trace_out {
                std::fs::create_dir_all(dir)?;
            }
            let opts = SoakOptions { ops, fault_at, snapshot_dir: common.trace_out.clone() };
            let soak = run_oracle_soak(&cfg, &opts)?;
            let mut report = Report::default();
            report.checks.push(Check {
                name: "oracle_equivalence".into(),
                verdict: Verdict::from_bool(soak.passed()),
                statistic: Some(soak.divergences.len() as f64),
                p: None,
            });
            for d in &soak.divergences {
                eprintln!(
                    "divergence: n={} trial={} op={} index={} expected={} got={}{}",
                    d.n,
                    d.trial,
                    d.op_index,
                    d.index,
                    d.expected,
                    d.got,
                    d.snapshot.as_ref().map(|p| format!(" snapshot={}", p.display())).unwrap_or_default()
                );
            }
            emit_report(&report, common.report_out.as_deref())?;
            Ok(report.passed())
        }
        Command::Oblivious { common, episodes, control_pairs, buckets } => {
            if common.mode.is_some_and(|m| matches!(m, ModeArg::Functional)) {
                return Err(Error::Usage("mode: the obliviousness suite needs oblivious mode".into()));
            }
            let cfg = common.config(Mode::Oblivious, WorkspaceSize::Exponent(0.5), N_REQUESTS);
            if let Some(dir) = &common.trace_out {
                std::fs::create_dir_all(dir)?;
            }
            let opts = ObliviousOptions {
                episodes,
                pairs: common.trials,
                control_pairs,
                buckets,
                trace_dir: common.trace_out.clone(),
                ..Default::default()
            };
            let outcome = run_obliviousness_suite(&cfg, &opts)?;
            emit_report(&outcome.report, common.report_out.as_deref())?;
            Ok(outcome.report.passed())
        }
        Command::Scaling(common) => {
            let cfg = common.config(common.mode_or(Mode::Oblivious), WorkspaceSize::Covering, RequestCount::Cycle);
            let outcome = run_overhead_scaling(&cfg)?;
            match &common.out {
                Some(out) => {
                    write_scaling_csv(BufWriter::new(File::create(out)?), &outcome.points)?;
                    write_scaling_plot(BufWriter::new(File::create(out.with_extension("dat"))?), &outcome.points)?;
                }
                None => write_scaling_csv(std::io::stdout().lock(), &outcome.points)?,
            }
            emit_report(&outcome.report, common.report_out.as_deref())?;
            Ok(outcome.report.passed())
        }
        Command::Analyze { common, traces, buckets } => {
            if traces.len() != 2 {
                return Err(Error::Usage("analyze: pass exactly two --trace files".into()));
            }
            let cfg = common.config(Mode::Oblivious, WorkspaceSize::Exponent(0.5), N_REQUESTS);
            cfg.validate()?;
            let geom = cfg.geometry(cfg.ns[0])?;
            let mut profiles = Vec::new();
            for path in &traces {
                let file = File::open(path).map_err(|e| Error::Usage(format!("cannot read {}: {e}", path.display())))?;
                let events = read_jsonl(BufReader::new(file))?;
                profiles.push(TraceProfile::from_events(Mode::Oblivious, &events));
            }
            let mut report = Report::default();
            let same = match shape_check(&profiles[0], &profiles[1]) {
                Ok(same) => same,
                Err(Error::Usage(msg)) => {
                    eprintln!("shape: {msg}");
                    false
                }
                Err(e) => return Err(e),
            };
            report.checks.push(Check {
                name: "shape".into(),
                verdict: Verdict::from_bool(same),
                statistic: Some(profiles[0].events as f64),
                p: None,
            });
            let family = compare_probes(
                &profiles[0].probes,
                &profiles[1].probes,
                |level| geom.cells.get(level).copied().unwrap_or(0) as u64,
                buckets,
                0.01,
            );
            report.checks.push(Check {
                name: "probe_offsets".into(),
                verdict: Verdict::from_bool(!family.rejected),
                statistic: Some(family.tests.len() as f64),
                p: Some(family.min_p),
            });
            emit_report(&report, common.report_out.as_deref())?;
            Ok(report.passed())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Error::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
