//! Adversary-view checks over recorded traces and run statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{usage, Error, Result};
use crate::params::Mode;
use crate::server::{AccessOp, RegionKind, TraceEvent};

/// Shared-stash occupancy observed across the rebuilds of one run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StashStats {
    /// Live stash entries after each rebuild, in order.
    pub per_flush: Vec<u32>,
    pub run_max: usize,
    /// Rebuilds whose merged stash exceeded the configured capacity.
    pub overflow_count: u64,
    pub histogram: BTreeMap<usize, u64>,
    /// Builds redone with fresh randomness because the stash was full.
    pub retries: u64,
}

impl StashStats {
    pub fn record(&mut self, demand: usize, capacity: usize) {
        self.per_flush.push(demand as u32);
        self.run_max = self.run_max.max(demand);
        *self.histogram.entry(demand).or_insert(0) += 1;
        if demand > capacity {
            self.overflow_count += 1;
        }
    }
}

/// Identifies one generation of one table side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TableKey {
    pub level: u16,
    pub side: u8,
    pub gen: u32,
}

/// What an adversary can summarize from a trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceProfile {
    pub mode: Mode,
    pub events: u64,
    /// Hex SHA-256 over the `(region, generation, op)` projection.
    pub shape_digest: String,
    /// Offsets of access-phase probes per table generation.
    pub probes: BTreeMap<TableKey, Vec<u64>>,
}

impl TraceProfile {
    pub fn from_events(mode: Mode, events: &[TraceEvent]) -> Self {
        let mut b = ProfileBuilder::new(mode);
        b.absorb(events);
        b.finish()
    }
}

/// Streams trace chunks into a [`TraceProfile`].
///
/// A probe is a `T<i>.0` read immediately followed by a `T<i>.1` read where
/// the event before the pair is not itself a `T<i>.0` read. Whole-table
/// scans never match because their last side-0 read follows another one.
pub struct ProfileBuilder {
    mode: Mode,
    events: u64,
    hasher: Sha256,
    probes: BTreeMap<TableKey, Vec<u64>>,
    prev: Option<TraceEvent>,
    prev_starts_probe: bool,
}

fn side_read(e: &TraceEvent, want_side: u8) -> Option<(u16, u32)> {
    match (e.region.kind, e.op) {
        (RegionKind::Table { level, side }, AccessOp::Read) if side == want_side => Some((level, e.region.gen)),
        _ => None,
    }
}

impl ProfileBuilder {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            events: 0,
            hasher: Sha256::new(),
            probes: BTreeMap::new(),
            prev: None,
            prev_starts_probe: false,
        }
    }

    pub fn absorb(&mut self, events: &[TraceEvent]) {
        let mut projected = Vec::with_capacity(events.len() * 9);
        for e in events {
            self.events += 1;
            let (code, level, side) = match e.region.kind {
                RegionKind::Cache => (0u8, 0u16, 0u8),
                RegionKind::Stash => (1, 0, 0),
                RegionKind::Table { level, side } => (2, level, side),
                RegionKind::Root => (3, 0, 0),
                RegionKind::Buffer { level } => (4, level, 0),
            };
            projected.push(code);
            projected.extend_from_slice(&level.to_be_bytes());
            projected.push(side);
            projected.extend_from_slice(&e.region.gen.to_be_bytes());
            projected.push(matches!(e.op, AccessOp::Write) as u8);

            let mut starts_probe = false;
            if let Some(p) = &self.prev {
                if let (true, Some((l0, g0)), Some((l1, g1))) = (self.prev_starts_probe, side_read(p, 0), side_read(e, 1)) {
                    if l0 == l1 {
                        self.probes.entry(TableKey { level: l0, side: 0, gen: g0 }).or_default().push(p.offset);
                        self.probes.entry(TableKey { level: l1, side: 1, gen: g1 }).or_default().push(e.offset);
                    }
                }
                // `e` can open a probe only if the previous event is not a
                // side-0 read of the same table.
                if let Some((l, _)) = side_read(e, 0) {
                    starts_probe = side_read(p, 0).map_or(true, |(pl, _)| pl != l);
                }
            } else {
                starts_probe = side_read(e, 0).is_some();
            }
            self.prev = Some(e.clone());
            self.prev_starts_probe = starts_probe;
        }
        self.hasher.update(&projected);
    }

    pub fn finish(self) -> TraceProfile {
        let digest = self.hasher.finalize();
        TraceProfile {
            mode: self.mode,
            events: self.events,
            shape_digest: digest.iter().map(|b| format!("{b:02x}")).collect(),
            probes: self.probes,
        }
    }
}

/// Whether two oblivious-mode traces have byte-identical shape.
pub fn shape_check(a: &TraceProfile, b: &TraceProfile) -> Result<bool> {
    if a.mode != Mode::Oblivious || b.mode != Mode::Oblivious {
        return Err(usage("shape_check needs oblivious-mode traces"));
    }
    if a.events != b.events {
        return Err(usage(format!("trace lengths differ: {} vs {}", a.events, b.events)));
    }
    Ok(a.shape_digest == b.shape_digest)
}

fn bucket_of(offset: u64, cells: u64, buckets: usize) -> usize {
    ((offset as u128 * buckets as u128) / cells as u128) as usize
}

fn chi_square_sf(stat: f64, df: usize) -> f64 {
    if df == 0 {
        return 1.0;
    }
    ChiSquared::new(df as f64).expect("df > 0").sf(stat)
}

/// Chi-square goodness of fit of `offsets` against the uniform
/// distribution on `[0, cells)`, grouped into `buckets` ranges.
pub fn uniformity_test(offsets: &[u64], cells: u64, buckets: usize) -> Result<f64> {
    if cells == 0 || buckets < 2 {
        return Err(usage("uniformity_test needs cells >= 1 and at least 2 buckets"));
    }
    let b = buckets.min(cells as usize);
    if b < 2 {
        return Err(Error::NotEnoughData("a single cell admits no test".into()));
    }
    let n = offsets.len();
    if n < 5 * b {
        return Err(Error::NotEnoughData(format!("{n} samples for {b} buckets")));
    }
    let mut counts = vec![0u64; b];
    for &o in offsets {
        if o >= cells {
            return Err(usage(format!("offset {o} outside {cells} cells")));
        }
        counts[bucket_of(o, cells, b)] += 1;
    }
    let mut stat = 0.0;
    for (k, &obs) in counts.iter().enumerate() {
        // Width of bucket k: offsets o with floor(o * b / cells) == k.
        let lo = (k as u128 * cells as u128).div_ceil(b as u128);
        let hi = ((k + 1) as u128 * cells as u128).div_ceil(b as u128);
        let expected = n as f64 * (hi - lo) as f64 / cells as f64;
        stat += (obs as f64 - expected).powi(2) / expected;
    }
    Ok(chi_square_sf(stat, b - 1))
}

/// Chi-square test of homogeneity between two offset samples over the
/// same `[0, cells)` range. Uses at most `buckets` ranges, and no more
/// than a fifth of the smaller sample size; empty columns are dropped.
pub fn two_sample_test(a: &[u64], b: &[u64], cells: u64, buckets: usize) -> Result<f64> {
    let k = buckets.min(a.len().min(b.len()) / 5).min(cells as usize);
    if k < 2 {
        return Err(Error::NotEnoughData(format!("samples of {} and {}", a.len(), b.len())));
    }
    let mut table = vec![[0u64; 2]; k];
    for (row, sample) in [a, b].into_iter().enumerate() {
        for &o in sample {
            if o >= cells {
                return Err(usage(format!("offset {o} outside {cells} cells")));
            }
            table[bucket_of(o, cells, k)][row] += 1;
        }
    }
    table.retain(|c| c[0] + c[1] > 0);
    let rows = [a.len() as f64, b.len() as f64];
    let total = rows[0] + rows[1];
    let mut stat = 0.0;
    for col in &table {
        let ct = (col[0] + col[1]) as f64;
        for r in 0..2 {
            let e = rows[r] * ct / total;
            stat += (col[r] as f64 - e).powi(2) / e;
        }
    }
    Ok(chi_square_sf(stat, table.len().saturating_sub(1)))
}

/// Per-table two-sample p-values with a Bonferroni family verdict.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FamilyVerdict {
    pub tests: Vec<(TableKey, f64)>,
    /// Tables present in only one profile or with too few probes.
    pub skipped: usize,
    pub alpha: f64,
    pub min_p: f64,
    pub rejected: bool,
}

/// Compares probe offsets table by table. `cells(level)` gives the side
/// length of each level.
pub fn compare_probes(
    a: &BTreeMap<TableKey, Vec<u64>>,
    b: &BTreeMap<TableKey, Vec<u64>>,
    cells: impl Fn(usize) -> u64,
    buckets: usize,
    alpha: f64,
) -> FamilyVerdict {
    let mut tests = Vec::new();
    let mut skipped = 0;
    let keys: std::collections::BTreeSet<_> = a.keys().chain(b.keys()).collect();
    for key in keys {
        match (a.get(key), b.get(key)) {
            (Some(x), Some(y)) => match two_sample_test(x, y, cells(key.level as usize), buckets) {
                Ok(p) => tests.push((*key, p)),
                Err(_) => skipped += 1,
            },
            _ => skipped += 1,
        }
    }
    let min_p = tests.iter().map(|t| t.1).fold(1.0, f64::min);
    let rejected = !tests.is_empty() && min_p < alpha / tests.len() as f64;
    FamilyVerdict { tests, skipped, alpha, min_p, rejected }
}

/// Ratios `P(demand >= s+1) / P(demand >= s)` for `s = 1, 2, ...` while at
/// least 20 samples reach `s`.
pub fn stash_tail(histogram: &BTreeMap<usize, u64>) -> Result<Vec<(usize, f64)>> {
    let total: u64 = histogram.values().sum();
    if total < 1000 {
        return Err(Error::NotEnoughData(format!("{total} samples, need 1000")));
    }
    let at_least = |s: usize| -> u64 { histogram.range(s..).map(|(_, c)| c).sum() };
    let mut out = Vec::new();
    let mut s = 1;
    loop {
        let denom = at_least(s);
        if denom < 20 {
            break;
        }
        out.push((s, at_least(s + 1) as f64 / denom as f64));
        s += 1;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Constant,
    Log,
    LogSquared,
}

impl Model {
    pub fn feature(self, n: u64) -> f64 {
        let l = (n as f64).log2();
        match self {
            Model::Constant => 0.0,
            Model::Log => l,
            Model::LogSquared => l * l,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub model: Model,
    pub a: f64,
    pub b: f64,
    pub r2: f64,
}

/// Least-squares fit of `y = a * f(n) + b`.
pub fn overhead_fit(points: &[(u64, f64)], model: Model) -> Result<Fit> {
    let distinct: std::collections::BTreeSet<u64> = points.iter().map(|p| p.0).collect();
    if distinct.len() < 4 {
        return Err(Error::NotEnoughData(format!("{} distinct n, need 4", distinct.len())));
    }
    let k = points.len() as f64;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / k;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Fit("constant measurements".into()));
    }
    if model == Model::Constant {
        return Ok(Fit { model, a: 0.0, b: mean_y, r2: 0.0 });
    }
    let xs: Vec<f64> = points.iter().map(|p| model.feature(p.0)).collect();
    let mean_x = xs.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mean_x).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(points).map(|(x, p)| (x - mean_x) * (p.1 - mean_y)).sum();
    let a = sxy / sxx;
    let b = mean_y - a * mean_x;
    let ss_res: f64 = xs.iter().zip(points).map(|(x, p)| (p.1 - a * x - b).powi(2)).sum();
    Ok(Fit { model, a, b, r2: 1.0 - ss_res / ss_tot })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub verdict: Verdict,
    pub statistic: Option<f64>,
    pub p: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedFit {
    pub name: String,
    #[serde(flatten)]
    pub fit: Fit,
}

/// The JSON analysis report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub checks: Vec<Check>,
    pub fits: Vec<NamedFit>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.verdict == Verdict::Pass)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::server::RegionId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn ev(seq: u64, kind: RegionKind, off: u64, op: AccessOp) -> TraceEvent {
        TraceEvent { seq, region: RegionId { kind, gen: 1 }, offset: off, op }
    }

    #[test]
    fn probe_detection_skips_scans() {
        let t = |l, s| RegionKind::table(l, s);
        let r = AccessOp::Read;
        let events = vec![
            ev(0, RegionKind::Stash, 0, r),
            ev(1, t(1, 0), 4, r),
            ev(2, t(1, 1), 5, r),
            ev(3, t(2, 0), 6, r),
            ev(4, t(2, 1), 7, r),
            // A whole-table scan.
            ev(5, t(3, 0), 0, r),
            ev(6, t(3, 0), 1, r),
            ev(7, t(3, 1), 0, r),
            ev(8, t(3, 1), 1, r),
        ];
        let p = TraceProfile::from_events(Mode::Oblivious, &events);
        let key = |level, side| TableKey { level, side, gen: 1 };
        assert_eq!(p.probes.len(), 4);
        assert_eq!(p.probes[&key(1, 0)], vec![4]);
        assert_eq!(p.probes[&key(2, 1)], vec![7]);
        // Chunked absorption gives the same profile.
        let mut b = ProfileBuilder::new(Mode::Oblivious);
        for c in events.chunks(2) {
            b.absorb(c);
        }
        assert_eq!(b.finish(), p);
    }

    #[test]
    fn shape_ignores_offsets_but_not_regions() {
        let a = vec![ev(0, RegionKind::Cache, 0, AccessOp::Read)];
        let b = vec![ev(0, RegionKind::Cache, 3, AccessOp::Read)];
        let c = vec![ev(0, RegionKind::Stash, 0, AccessOp::Read)];
        let pa = TraceProfile::from_events(Mode::Oblivious, &a);
        assert!(shape_check(&pa, &TraceProfile::from_events(Mode::Oblivious, &b)).unwrap());
        assert!(!shape_check(&pa, &TraceProfile::from_events(Mode::Oblivious, &c)).unwrap());
        let longer = TraceProfile::from_events(Mode::Oblivious, &[a.clone(), b].concat());
        assert!(matches!(shape_check(&pa, &longer), Err(Error::Usage(_))));
        let functional = TraceProfile::from_events(Mode::Functional, &a);
        assert!(shape_check(&pa, &functional).is_err());
    }

    #[test]
    fn uniformity_edge_cases() {
        assert!(matches!(uniformity_test(&[0; 79], 1000, 16), Err(Error::NotEnoughData(_))));
        let p = uniformity_test(&[17; 10_000], 1000, 16).unwrap();
        assert!(p < 1e-9);
    }

    #[test]
    fn uniform_draws_reject_about_one_percent() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let runs = 400;
        let low = (0..runs)
            .filter(|_| {
                let s: Vec<u64> = (0..10_000).map(|_| rng.gen_range(0..1000)).collect();
                uniformity_test(&s, 1000, 16).unwrap() < 0.01
            })
            .count();
        // Binomial(400, 0.01): mean 4, P(X > 12) is below 1e-4.
        assert!(low <= 12, "{low} of {runs} below 0.01");
    }

    #[test]
    fn two_sample_examples() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let mut draw = |k| -> Vec<u64> { (0..k).map(|_| rng.gen_range(0..500)).collect() };
        let non_rejections = (0..100).filter(|_| two_sample_test(&draw(2000), &draw(2000), 500, 16).unwrap() >= 0.01).count();
        assert!(non_rejections >= 98);
        let u = draw(2000);
        assert!(two_sample_test(&u, &[250; 2000], 500, 16).unwrap() < 1e-9);
        assert_eq!(two_sample_test(&u, &u, 500, 16).unwrap(), 1.0);
        assert!(two_sample_test(&u[..5], &u, 500, 16).is_err());
    }

    #[test]
    fn tail_of_geometric_histogram() {
        let mut h = BTreeMap::new();
        for k in 0..12 {
            h.insert(k, 1u64 << (16 - k));
        }
        let tail = stash_tail(&h).unwrap();
        assert!(tail.len() >= 3);
        for &(s, r) in &tail {
            // Truncated at k = 11: P(>= s) is proportional to 2^(17-s) - 32.
            let at_least = |s: usize| (1u64 << (17 - s)) as f64 - 32.0;
            assert!((r - at_least(s + 1) / at_least(s)).abs() < 1e-12);
            if s <= 5 {
                assert!((r - 0.5).abs() < 0.01, "{r}");
            }
        }
        let zeros = BTreeMap::from([(0usize, 5000u64)]);
        assert!(stash_tail(&zeros).unwrap().is_empty());
        assert!(stash_tail(&BTreeMap::from([(0usize, 10u64)])).is_err());
    }

    #[test]
    fn fits() {
        let ns: Vec<u64> = (10..=16).map(|e| 1u64 << e).collect();
        let lin: Vec<_> = ns.iter().map(|&n| (n, 3.0 * (n as f64).log2())).collect();
        let f = overhead_fit(&lin, Model::Log).unwrap();
        assert!((f.a - 3.0).abs() < 1e-9 && f.b.abs() < 1e-9 && (f.r2 - 1.0).abs() < 1e-12);
        let sq: Vec<_> = (1..=16).map(|e| (1u64 << e, ((e * e) as f64).powi(2))).collect();
        assert!(overhead_fit(&sq, Model::Log).unwrap().r2 < 0.95);
        assert_eq!(overhead_fit(&lin, Model::Constant).unwrap().r2, 0.0);
        assert!(matches!(overhead_fit(&lin[..3], Model::Log), Err(Error::NotEnoughData(_))));
        let flat: Vec<_> = ns.iter().map(|&n| (n, 2.0)).collect();
        assert!(matches!(overhead_fit(&flat, Model::Log), Err(Error::Fit(_))));
    }

    #[test]
    fn report_json_shape() {
        let r = Report {
            checks: vec![Check { name: "x".into(), verdict: Verdict::Pass, statistic: Some(1.0), p: None }],
            fits: vec![NamedFit { name: "f".into(), fit: Fit { model: Model::Log, a: 1.0, b: 0.0, r2: 1.0 } }],
        };
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(v["checks"][0]["verdict"], "pass");
        assert_eq!(v["fits"][0]["model"], "log");
        assert!(r.passed());
    }
}
