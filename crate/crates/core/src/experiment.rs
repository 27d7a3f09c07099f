//! Experiment drivers: stash-demand sweeps, oracle soaks, the
//! obliviousness suite and overhead scaling runs.
//!
//! Every run is a pure function of its configuration. Trial `k` uses the
//! seed `derive_seed(master_seed, k)`; workload randomness comes from a
//! separate ChaCha stream under the same seed, so trials can execute in any
//! order and still produce identical records.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    compare_probes, overhead_fit, shape_check, Check, FamilyVerdict, Model, NamedFit, ProfileBuilder, Report,
    TableKey, TraceProfile, Verdict,
};
use crate::crypto::{derive_seed, CipherKind, SeedChain};
use crate::cuckoo::{Addressing, CuckooTable};
use crate::error::{usage, Error, Result};
use crate::hierarchy::{encrypted_store, ObliviousRam, Oram};
use crate::params::{ceil_log2, Geometry, Mode, OramParams, ProbePolicy, Variant, WorkspaceSize};
use crate::record::Record;
use crate::server::TraceEvent;
use crate::store::PlainStore;
use crate::tree::TreeOram;
use crate::workload::{Requests, Workload};

const WORKLOAD_STREAM: u64 = 3;

/// A request count, possibly relative to `n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RequestCount {
    Absolute(u64),
    /// `num * n / den`.
    Scaled { num: u64, den: u64 },
    /// One full flush cycle: `2^L` times the cache period.
    Cycle,
}

impl RequestCount {
    pub fn resolve(&self, geom: &Geometry) -> u64 {
        match *self {
            RequestCount::Absolute(r) => r,
            RequestCount::Scaled { num, den } => (geom.n * num / den).max(1),
            RequestCount::Cycle => (1u64 << geom.levels) * geom.period,
        }
    }
}

impl fmt::Display for RequestCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            RequestCount::Absolute(r) => write!(f, "{r}"),
            RequestCount::Scaled { num: 1, den: 1 } => f.write_str("n"),
            RequestCount::Scaled { num, den: 1 } => write!(f, "{num}n"),
            RequestCount::Scaled { num: 1, den } => write!(f, "n/{den}"),
            RequestCount::Scaled { num, den } => write!(f, "{num}n/{den}"),
            RequestCount::Cycle => f.write_str("cycle"),
        }
    }
}

impl FromStr for RequestCount {
    type Err = Error;

    /// Accepts `1000`, `n`, `4n`, `n/4`, `3n/2` or `cycle`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || usage(format!("bad request count {s:?}; expected e.g. 1000, n, 4n, n/4 or cycle"));
        if s == "cycle" {
            return Ok(RequestCount::Cycle);
        }
        let Some(pos) = s.find('n') else {
            let r: u64 = s.parse().map_err(|_| bad())?;
            return if r == 0 { Err(bad()) } else { Ok(RequestCount::Absolute(r)) };
        };
        let num = match &s[..pos] {
            "" => 1,
            t => t.parse().map_err(|_| bad())?,
        };
        let den = match &s[pos + 1..] {
            "" => 1,
            t => t.strip_prefix('/').ok_or_else(bad)?.parse().map_err(|_| bad())?,
        };
        if num == 0 || den == 0 {
            return Err(bad());
        }
        Ok(RequestCount::Scaled { num, den })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub mode: Mode,
    pub ns: Vec<u64>,
    pub requests: Vec<RequestCount>,
    pub trials: usize,
    pub epsilon: f64,
    pub c: f64,
    pub stash_factor: f64,
    pub workspace: WorkspaceSize,
    pub workload: Workload,
    pub master_seed: u64,
    pub cipher: CipherKind,
    /// Fill the `wall_ms` column. Off by default so output is reproducible.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Prf,
            mode: Mode::Functional,
            ns: vec![1024],
            requests: vec![RequestCount::Scaled { num: 1, den: 1 }],
            trials: 1,
            epsilon: 0.2,
            c: 2.0,
            stash_factor: 1.0,
            workspace: WorkspaceSize::Exponent(0.5),
            workload: Workload::Uniform,
            master_seed: 0,
            cipher: CipherKind::Aead,
            timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(usage("trials: must be at least 1"));
        }
        if self.ns.is_empty() {
            return Err(usage("n: at least one value is required"));
        }
        if self.requests.is_empty() {
            return Err(usage("requests: at least one value is required"));
        }
        for &n in &self.ns {
            self.params(n, self.master_seed).validate().map_err(|e| usage(format!("n = {n}: {e}")))?;
            Requests::new(&self.workload, n).map_err(|e| usage(format!("workload: {e}")))?;
        }
        Ok(())
    }

    pub fn params(&self, n: u64, seed: u64) -> OramParams {
        OramParams {
            n,
            epsilon: self.epsilon,
            c: self.c,
            stash_factor: self.stash_factor,
            workspace: if self.mode == Mode::Functional { WorkspaceSize::Unbounded } else { self.workspace },
            mode: self.mode,
            master_seed: seed,
            cipher: self.cipher,
            probe_policy: ProbePolicy::Honest,
        }
    }

    pub fn geometry(&self, n: u64) -> Result<Geometry> {
        geometry(self.variant, &self.params(n, 0))
    }
}

pub fn geometry(variant: Variant, params: &OramParams) -> Result<Geometry> {
    match variant {
        Variant::Prf => Geometry::prf(params),
        Variant::Tree => Geometry::tree(params),
    }
}

/// Seed of trial `k`.
pub fn trial_seed(master_seed: u64, trial: usize) -> u64 {
    derive_seed(master_seed, trial as u64).value
}

fn workload_rng(seed: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(WORKLOAD_STREAM);
    rng
}

/// Opens an instance of `variant`: plaintext in functional mode, encrypted
/// otherwise.
pub fn open(variant: Variant, params: OramParams, record_trace: bool) -> Result<Box<dyn ObliviousRam>> {
    Ok(match (variant, params.mode) {
        (Variant::Prf, Mode::Functional) => Box::new(Oram::init(params, PlainStore::new())?),
        (Variant::Tree, Mode::Functional) => Box::new(TreeOram::init(params, PlainStore::new())?),
        (Variant::Prf, Mode::Oblivious) => {
            let store = encrypted_store(&params, record_trace);
            Box::new(Oram::init(params, store)?)
        }
        (Variant::Tree, Mode::Oblivious) => {
            let store = encrypted_store(&params, record_trace);
            Box::new(TreeOram::init(params, store)?)
        }
    })
}

/// One row of a stash sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub n: u64,
    pub r: u64,
    pub epsilon: f64,
    pub c: f64,
    pub stash_capacity: usize,
    pub trial: usize,
    pub max_stash_demand: usize,
    pub overflowed: bool,
    pub server_accesses: u64,
    pub wall_ms: Option<f64>,
}

pub const CSV_HEADER: &str = "n,r,epsilon,c,stash_capacity,trial,max_stash_demand,overflowed,server_accesses,wall_ms";

/// Runs every `(n, r, trial)` of the configuration in functional mode.
///
/// One run per `(n, trial)` covers all request counts: the record for `r`
/// is taken after the `r`-th access. Rows come out ordered by `n`, then `r`
/// as listed, then trial.
pub fn run_stash_sweep(cfg: &ExperimentConfig) -> Result<Vec<TrialRecord>> {
    cfg.validate()?;
    if cfg.mode != Mode::Functional {
        return Err(usage("mode: stash sweeps run in functional mode"));
    }
    let mut rows = Vec::new();
    for &n in &cfg.ns {
        let geom = cfg.geometry(n)?;
        let rs: Vec<u64> = cfg.requests.iter().map(|r| r.resolve(&geom)).collect();
        let per_trial: Vec<BTreeMap<u64, TrialRecord>> = (0..cfg.trials)
            .into_par_iter()
            .map(|trial| sweep_trial(cfg, n, &rs, trial))
            .collect::<Result<_>>()?;
        for &r in &rs {
            rows.extend(per_trial.iter().map(|t| t[&r].clone()));
        }
    }
    Ok(rows)
}

fn sweep_trial(cfg: &ExperimentConfig, n: u64, rs: &[u64], trial: usize) -> Result<BTreeMap<u64, TrialRecord>> {
    let seed = trial_seed(cfg.master_seed, trial);
    let mut oram = open(cfg.variant, cfg.params(n, seed), false)?;
    let capacity = oram.geometry().stash_cells;
    let baseline = oram.server_accesses();
    let mut rng = workload_rng(seed);
    let mut reqs = Requests::new(&cfg.workload, n)?;
    let last = rs.iter().copied().max().unwrap_or(0);
    let start = Instant::now();
    let mut out = BTreeMap::new();
    for i in 1..=last {
        let (op, x) = reqs.next_request(&mut rng);
        oram.access(op, x)?;
        if rs.contains(&i) {
            let demand = oram.stash_stats().run_max;
            out.insert(
                i,
                TrialRecord {
                    n,
                    r: i,
                    epsilon: cfg.epsilon,
                    c: cfg.c,
                    stash_capacity: capacity,
                    trial,
                    max_stash_demand: demand,
                    overflowed: demand > capacity,
                    server_accesses: oram.server_accesses() - baseline,
                    wall_ms: cfg.timing.then(|| start.elapsed().as_secs_f64() * 1e3),
                },
            );
        }
    }
    Ok(out)
}

pub fn write_csv<W: Write>(mut w: W, rows: &[TrialRecord]) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for t in rows {
        let wall = t.wall_ms.map(|ms| format!("{ms:.3}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            t.n,
            t.r,
            t.epsilon,
            t.c,
            t.stash_capacity,
            t.trial,
            t.max_stash_demand,
            t.overflowed,
            t.server_accesses,
            wall
        )?;
    }
    Ok(())
}

/// Aggregate of one `(n, r)` group of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub n: u64,
    pub r: u64,
    pub stash_capacity: usize,
    pub trials: usize,
    pub overflows: usize,
    pub median_demand: f64,
    pub max_demand: usize,
}

impl SweepSummary {
    pub fn overflow_fraction(&self) -> f64 {
        self.overflows as f64 / self.trials as f64
    }
}

pub fn median(values: &mut [usize]) -> f64 {
    values.sort_unstable();
    let k = values.len();
    if k == 0 {
        return f64::NAN;
    }
    if k % 2 == 1 {
        values[k / 2] as f64
    } else {
        (values[k / 2 - 1] + values[k / 2]) as f64 / 2.0
    }
}

/// Groups rows by `(n, r)` in first-seen order.
pub fn summarize(rows: &[TrialRecord]) -> Vec<SweepSummary> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<(u64, u64), Vec<&TrialRecord>> = BTreeMap::new();
    for t in rows {
        let g = groups.entry((t.n, t.r)).or_default();
        if g.is_empty() {
            order.push((t.n, t.r));
        }
        g.push(t);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let mut demands: Vec<usize> = g.iter().map(|t| t.max_stash_demand).collect();
            SweepSummary {
                n: key.0,
                r: key.1,
                stash_capacity: g[0].stash_capacity,
                trials: g.len(),
                overflows: g.iter().filter(|t| t.overflowed).count(),
                max_demand: demands.iter().copied().max().unwrap_or(0),
                median_demand: median(&mut demands),
            }
        })
        .collect()
}

/// Whitespace-separated plot data, one line per `(n, r)` group.
pub fn write_plot_data<W: Write>(mut w: W, rows: &[TrialRecord]) -> Result<()> {
    writeln!(w, "# n r stash_capacity trials overflow_fraction median_demand max_demand")?;
    for s in summarize(rows) {
        writeln!(
            w,
            "{} {} {} {} {} {} {}",
            s.n,
            s.r,
            s.stash_capacity,
            s.trials,
            s.overflow_fraction(),
            s.median_demand,
            s.max_demand
        )?;
    }
    Ok(())
}

/// Writes `<out>` as CSV and `<out>` with a `.dat` extension as plot data.
pub fn write_sweep_files(out: &Path, rows: &[TrialRecord]) -> Result<PathBuf> {
    write_csv(std::io::BufWriter::new(std::fs::File::create(out)?), rows)?;
    let dat = out.with_extension("dat");
    write_plot_data(std::io::BufWriter::new(std::fs::File::create(&dat)?), rows)?;
    Ok(dat)
}

#[derive(Clone, Debug, Default)]
pub struct SoakOptions {
    pub ops: u64,
    /// Corrupt one stored value right before this operation.
    pub fault_at: Option<u64>,
    /// Where to drop a server snapshot when a run diverges.
    pub snapshot_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub n: u64,
    pub trial: usize,
    /// Operations past `ops` belong to the closing audit, which reads every
    /// index once in order.
    pub op_index: u64,
    pub index: u64,
    pub expected: u64,
    pub got: u64,
    pub snapshot: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SoakReport {
    pub runs: usize,
    pub ops_per_run: u64,
    pub divergences: Vec<Divergence>,
}

impl SoakReport {
    pub fn passed(&self) -> bool {
        self.divergences.is_empty()
    }
}

/// Replays random reads and writes against the ORAM and a plain array, then
/// audits every index. Reports the first divergence of each run.
pub fn run_oracle_soak(cfg: &ExperimentConfig, opts: &SoakOptions) -> Result<SoakReport> {
    cfg.validate()?;
    let mut report = SoakReport { runs: 0, ops_per_run: opts.ops, divergences: Vec::new() };
    for &n in &cfg.ns {
        let found: Vec<Option<Divergence>> = (0..cfg.trials)
            .into_par_iter()
            .map(|trial| soak_trial(cfg, opts, n, trial))
            .collect::<Result<_>>()?;
        report.runs += found.len();
        report.divergences.extend(found.into_iter().flatten());
    }
    Ok(report)
}

fn soak_trial(cfg: &ExperimentConfig, opts: &SoakOptions, n: u64, trial: usize) -> Result<Option<Divergence>> {
    let seed = trial_seed(cfg.master_seed, trial);
    let mut oram = open(cfg.variant, cfg.params(n, seed), false)?;
    let mut rng = workload_rng(seed);
    let mut reqs = Requests::new(&cfg.workload, n)?;
    let mut plain = vec![0u64; n as usize];
    let audit = (0..n).map(|x| (crate::hierarchy::Op::Read, x));
    let requests: Vec<_> = (0..opts.ops).map(|_| reqs.next_request(&mut rng)).collect();
    for (i, (op, x)) in requests.into_iter().chain(audit).enumerate() {
        let i = i as u64;
        if opts.fault_at == Some(i) {
            oram.inject_fault()?;
        }
        let got = oram.access(op, x)?;
        let expected = plain[x as usize];
        if got != expected {
            let snapshot = match &opts.snapshot_dir {
                Some(dir) => {
                    let path = dir.join(format!("soak-n{n}-trial{trial}.snap"));
                    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
                    oram.write_snapshot(&mut f)?.then_some(path)
                }
                None => None,
            };
            return Ok(Some(Divergence { n, trial, op_index: i, index: x, expected, got, snapshot }));
        }
        if let crate::hierarchy::Op::Write(v) = op {
            plain[x as usize] = v;
        }
    }
    Ok(None)
}

/// Streams a trace into a profile and, optionally, a JSONL writer.
struct TraceSink<'a> {
    profile: ProfileBuilder,
    jsonl: Option<&'a mut dyn Write>,
}

impl TraceSink<'_> {
    fn absorb(&mut self, events: Vec<TraceEvent>) -> Result<()> {
        self.profile.absorb(&events);
        if let Some(w) = self.jsonl.as_mut() {
            for e in &events {
                writeln!(w, "{}", e.to_json_line())?;
            }
        }
        Ok(())
    }
}

/// Runs `episodes` requests of `workload` in oblivious mode and profiles the
/// whole trace, initialization included.
pub fn profile_run(
    variant: Variant,
    params: OramParams,
    workload: &Workload,
    episodes: u64,
    jsonl: Option<&mut dyn Write>,
) -> Result<TraceProfile> {
    if params.mode != Mode::Oblivious {
        return Err(usage("mode: trace profiles need oblivious mode"));
    }
    let seed = params.master_seed;
    let n = params.n;
    let mut oram = open(variant, params, true)?;
    let mut sink = TraceSink { profile: ProfileBuilder::new(Mode::Oblivious), jsonl };
    sink.absorb(oram.drain_trace())?;
    let mut rng = workload_rng(seed);
    let mut reqs = Requests::new(workload, n)?;
    for _ in 0..episodes {
        let (op, x) = reqs.next_request(&mut rng);
        oram.access(op, x)?;
        sink.absorb(oram.drain_trace())?;
    }
    if let Some(w) = sink.jsonl {
        w.flush()?;
    }
    Ok(sink.profile.finish())
}

#[derive(Clone, Debug)]
pub struct ObliviousOptions {
    pub episodes: u64,
    /// Paired runs pooled into the two-sample comparison.
    pub pairs: usize,
    /// Paired runs of the leaky probe policy; 0 skips the negative control.
    pub control_pairs: usize,
    pub buckets: usize,
    pub alpha: f64,
    /// Largest p-value the negative control must reach.
    pub control_p: f64,
    /// Directory for the per-workload JSONL traces of the shape runs.
    pub trace_dir: Option<PathBuf>,
}

impl Default for ObliviousOptions {
    fn default() -> Self {
        Self {
            episodes: 2000,
            pairs: 1,
            control_pairs: 1,
            buckets: 16,
            alpha: 0.01,
            control_p: 1e-6,
            trace_dir: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ObliviousOutcome {
    pub report: Report,
    /// Shape digest per workload.
    pub shapes: Vec<(Workload, String)>,
    pub family: FamilyVerdict,
    pub control: Option<FamilyVerdict>,
}

type Probes = BTreeMap<TableKey, Vec<u64>>;

fn pooled_probes(
    cfg: &ExperimentConfig,
    opts: &ObliviousOptions,
    n: u64,
    pairs: usize,
    policy: ProbePolicy,
    first_trial: usize,
) -> Result<(Probes, Probes)> {
    let runs: Vec<(TraceProfile, TraceProfile)> = (0..pairs)
        .into_par_iter()
        .map(|p| {
            let run = |workload: &Workload, trial: usize| {
                let params = OramParams { probe_policy: policy, ..cfg.params(n, trial_seed(cfg.master_seed, trial)) };
                profile_run(cfg.variant, params, workload, opts.episodes, None)
            };
            let base = first_trial + 2 * p;
            Ok((run(&Workload::Repeat, base)?, run(&Workload::Uniform, base + 1)?))
        })
        .collect::<Result<_>>()?;
    let mut a = Probes::new();
    let mut b = Probes::new();
    for (pa, pb) in runs {
        for (k, v) in pa.probes {
            a.entry(k).or_default().extend(v);
        }
        for (k, v) in pb.probes {
            b.entry(k).or_default().extend(v);
        }
    }
    Ok((a, b))
}

/// Checks trace-shape equality across the repeat, sequential and uniform
/// workloads, then compares pooled probe offsets of repeat and uniform runs
/// table by table. The negative control repeats the comparison with the
/// leaky probe policy and must be rejected.
pub fn run_obliviousness_suite(cfg: &ExperimentConfig, opts: &ObliviousOptions) -> Result<ObliviousOutcome> {
    cfg.validate()?;
    if cfg.mode != Mode::Oblivious {
        return Err(usage("mode: the obliviousness suite needs oblivious mode"));
    }
    let n = cfg.ns[0];
    let geom = cfg.geometry(n)?;
    let mut report = Report::default();

    let workloads = [Workload::Repeat, Workload::Sequential, Workload::Uniform];
    let mut profiles = Vec::new();
    for w in &workloads {
        let params = cfg.params(n, trial_seed(cfg.master_seed, 0));
        let profile = match &opts.trace_dir {
            Some(dir) => {
                let path = dir.join(format!("trace-{w}.jsonl"));
                let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
                profile_run(cfg.variant, params, w, opts.episodes, Some(&mut f))?
            }
            None => profile_run(cfg.variant, params, w, opts.episodes, None)?,
        };
        profiles.push(profile);
    }
    for i in 1..profiles.len() {
        let same = shape_check(&profiles[0], &profiles[i]).unwrap_or(false);
        report.checks.push(Check {
            name: format!("shape_{}_vs_{}", workloads[0], workloads[i]),
            verdict: Verdict::from_bool(same),
            statistic: Some(profiles[i].events as f64),
            p: None,
        });
    }

    let cells = |level: usize| geom.cells[level] as u64;
    let (a, b) = pooled_probes(cfg, opts, n, opts.pairs, ProbePolicy::Honest, 1)?;
    let family = compare_probes(&a, &b, cells, opts.buckets, opts.alpha);
    report.checks.push(Check {
        name: "probe_offsets_repeat_vs_uniform".into(),
        verdict: Verdict::from_bool(!family.rejected && !family.tests.is_empty()),
        statistic: Some(family.tests.len() as f64),
        p: Some(family.min_p),
    });

    let control = if opts.control_pairs > 0 {
        let first = 1 + 2 * opts.pairs;
        let (a, b) = pooled_probes(cfg, opts, n, opts.control_pairs, ProbePolicy::RealAfterHit, first)?;
        let v = compare_probes(&a, &b, cells, opts.buckets, opts.alpha);
        report.checks.push(Check {
            name: "negative_control_rejected".into(),
            verdict: Verdict::from_bool(v.rejected && v.min_p < opts.control_p),
            statistic: Some(v.tests.len() as f64),
            p: Some(v.min_p),
        });
        Some(v)
    } else {
        None
    };

    let shapes = workloads.into_iter().zip(profiles.into_iter().map(|p| p.shape_digest)).collect();
    Ok(ObliviousOutcome { report, shapes, family, control })
}

/// Spill sizes of `builds` independent standalone cuckoo builds with
/// `cells` cells per side filled to `load` of all cells. Keys are
/// `0..items`; the move limit is `ceil(c * ceil(log2 items))`. Build `b`
/// draws its two seeds from the chain of `trial_seed(master_seed, b)`.
pub fn standalone_spills(cells: usize, load: f64, builds: usize, c: f64, master_seed: u64) -> Result<Vec<usize>> {
    if !(load > 0.0 && load < 0.5) {
        return Err(usage(format!("load must lie in (0, 0.5), got {load}")));
    }
    let items = (load * 2.0 * cells as f64).floor() as usize;
    if items < 2 {
        return Err(usage(format!("load {load} gives {items} items for {cells} cells per side")));
    }
    let move_limit = ((c * ceil_log2(items as u64) as f64) - 1e-9).ceil().max(1.0) as usize;
    let records: Vec<Record> = (0..items as u64).map(|x| Record::item(x, x, 0)).collect();
    (0..builds)
        .into_par_iter()
        .map(|b| {
            let mut chain = SeedChain::new(trial_seed(master_seed, b));
            let seeds = [chain.next_seed().value, chain.next_seed().value];
            let built = CuckooTable::build(&records, 0, cells, items, Addressing::Prf(seeds), None, move_limit)?;
            Ok(built.spilled.len())
        })
        .collect()
}

pub fn histogram(values: &[usize]) -> BTreeMap<usize, u64> {
    let mut h = BTreeMap::new();
    for &v in values {
        *h.entry(v).or_insert(0) += 1;
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub n: u64,
    pub r: u64,
    pub server_accesses: u64,
    pub per_op: f64,
}

#[derive(Clone, Debug)]
pub struct ScalingOutcome {
    pub points: Vec<ScalingPoint>,
    pub report: Report,
}

/// Minimum R² of the variant's own model.
pub const SCALING_R2: f64 = 0.98;

pub fn expected_model(variant: Variant) -> Model {
    match variant {
        Variant::Prf => Model::Log,
        Variant::Tree => Model::LogSquared,
    }
}

/// Measures amortized server accesses per request for every `n`, using the
/// first request count (one flush cycle if none was given as `cycle`).
pub fn run_overhead_scaling(cfg: &ExperimentConfig) -> Result<ScalingOutcome> {
    cfg.validate()?;
    let count = cfg.requests[0];
    let points: Vec<ScalingPoint> = cfg
        .ns
        .par_iter()
        .map(|&n| {
            let seed = trial_seed(cfg.master_seed, 0);
            let mut oram = open(cfg.variant, cfg.params(n, seed), false)?;
            let r = count.resolve(oram.geometry());
            let baseline = oram.server_accesses();
            let mut rng = workload_rng(seed);
            let mut reqs = Requests::new(&cfg.workload, n)?;
            for _ in 0..r {
                let (op, x) = reqs.next_request(&mut rng);
                oram.access(op, x)?;
            }
            let server_accesses = oram.server_accesses() - baseline;
            Ok(ScalingPoint { n, r, server_accesses, per_op: server_accesses as f64 / r as f64 })
        })
        .collect::<Result<_>>()?;

    let xy: Vec<(u64, f64)> = points.iter().map(|p| (p.n, p.per_op)).collect();
    let primary = expected_model(cfg.variant);
    let mut report = Report::default();
    for model in [Model::Log, Model::LogSquared, Model::Constant] {
        let fit = overhead_fit(&xy, model)?;
        if model == primary {
            report.checks.push(Check {
                name: format!("fit_{}_r2", model_name(model)),
                verdict: Verdict::from_bool(fit.r2 >= SCALING_R2),
                statistic: Some(fit.r2),
                p: None,
            });
        }
        report.fits.push(NamedFit { name: model_name(model).into(), fit });
    }
    Ok(ScalingOutcome { points, report })
}

fn model_name(m: Model) -> &'static str {
    match m {
        Model::Constant => "constant",
        Model::Log => "log",
        Model::LogSquared => "log_squared",
    }
}

pub fn write_scaling_csv<W: Write>(mut w: W, points: &[ScalingPoint]) -> Result<()> {
    writeln!(w, "n,r,server_accesses,per_op")?;
    for p in points {
        writeln!(w, "{},{},{},{}", p.n, p.r, p.server_accesses, p.per_op)?;
    }
    Ok(())
}

pub fn write_scaling_plot<W: Write>(mut w: W, points: &[ScalingPoint]) -> Result<()> {
    writeln!(w, "# n log2_n per_op")?;
    for p in points {
        writeln!(w, "{} {} {}", p.n, (p.n as f64).log2(), p.per_op)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_counts_parse() {
        let g = Geometry::prf(&OramParams::new(1024)).unwrap();
        let r = |s: &str| s.parse::<RequestCount>().unwrap().resolve(&g);
        assert_eq!(r("n"), 1024);
        assert_eq!(r("4n"), 4096);
        assert_eq!(r("n/4"), 256);
        assert_eq!(r("3n/2"), 1536);
        assert_eq!(r("77"), 77);
        assert_eq!(r("cycle"), 1280);
        for bad in ["0", "x", "n/", "n/0", "0n", "n4"] {
            assert!(bad.parse::<RequestCount>().is_err(), "{bad}");
        }
        for s in ["n", "4n", "n/4", "3n/2", "77", "cycle"] {
            assert_eq!(s.parse::<RequestCount>().unwrap().to_string(), s);
        }
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3, 1, 2]), 2.0);
        assert_eq!(median(&mut [4, 1, 2, 3]), 2.5);
    }

    #[test]
    fn validation_names_the_field() {
        let cfg = ExperimentConfig { trials: 0, ..Default::default() };
        assert!(cfg.validate().unwrap_err().to_string().contains("trials"));
        let cfg = ExperimentConfig { ns: vec![1], ..Default::default() };
        assert!(cfg.validate().unwrap_err().to_string().contains("n = 1"));
        let cfg = ExperimentConfig { workload: Workload::File("/nonexistent/x".into()), ..Default::default() };
        assert!(cfg.validate().unwrap_err().to_string().contains("workload"));
    }

    #[test]
    fn checkpoints_match_separate_runs() {
        let cfg = ExperimentConfig {
            ns: vec![256],
            requests: vec!["n".parse().unwrap(), "n/2".parse().unwrap()],
            trials: 2,
            ..Default::default()
        };
        let both = run_stash_sweep(&cfg).unwrap();
        assert_eq!(both.len(), 4);
        assert_eq!((both[0].r, both[2].r), (256, 128));
        let half = run_stash_sweep(&ExperimentConfig { requests: vec!["n/2".parse().unwrap()], ..cfg }).unwrap();
        assert_eq!(&both[2..], &half[..]);
    }

    #[test]
    fn sweep_rejects_oblivious_mode() {
        let cfg = ExperimentConfig { mode: Mode::Oblivious, ..Default::default() };
        assert!(matches!(run_stash_sweep(&cfg), Err(Error::Usage(_))));
    }
}
