//! The PRF-addressed hierarchy: cache `Q`, shared stash `S` and cuckoo
//! levels `T_1..T_L`, driven one stateless episode at a time.
//!
//! Everything mutable lives on the server. The client reloads the encrypted
//! [`Meta`] header at the start of every episode and writes it back at the
//! end. Stash entries carry the level whose build spilled them (`home`); a
//! lookup checks them just before that level's table, and any flush that
//! reads or rebuilds a level also takes back the entries homed there.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::analysis::StashStats;
use crate::crypto::{GroupKey, SeedChain};
use crate::cuckoo::{random_pair, Addressing, CuckooTable};
use crate::error::{usage, Error, Result};
use crate::osort::{compact_live, dedup_by_epoch, oblivious_sort_by_key, rebuild_key, PrivateWorkspace};
use crate::params::{flushes_due, Flush, Geometry, Mode, OramParams, ProbePolicy, Source};
use crate::record::Record;
use crate::server::{RegionId, RegionKind, Server, TraceEvent};
use crate::store::{EncryptedStore, Meta, PlainStore, RecordStore};

/// Builds attempted per rebuild before the run is aborted.
pub const MAX_BUILD_ATTEMPTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Read,
    Write(u64),
}

/// Object-safe view shared by both variants.
pub trait ObliviousRam: Send {
    fn n(&self) -> u64;
    /// Performs one episode and returns the value held before it.
    fn access(&mut self, op: Op, x: u64) -> Result<u64>;
    fn stash_stats(&self) -> &StashStats;
    fn server_accesses(&self) -> u64;
    fn server_cells(&self) -> usize;
    fn drain_trace(&mut self) -> Vec<TraceEvent>;
    /// Corrupts one stored value behind the client's back and returns the
    /// affected logical index.
    fn inject_fault(&mut self) -> Result<Option<u64>>;
    fn geometry(&self) -> &Geometry;
    /// Writes the server state; false if the store has no server behind it.
    fn write_snapshot(&self, w: &mut dyn std::io::Write) -> Result<bool>;

    fn read(&mut self, x: u64) -> Result<u64> {
        self.access(Op::Read, x)
    }

    fn write(&mut self, x: u64, v: u64) -> Result<u64> {
        self.access(Op::Write(v), x)
    }
}

/// Deduplicates `prior ∪ spill` by key, keeping the newest copy, in key
/// order. With a capacity, a larger union is a stash overflow.
pub fn merge_stash(prior: &[Record], spill: &[Record], capacity: Option<usize>) -> Result<Vec<Record>> {
    let mut best: BTreeMap<u64, Record> = BTreeMap::new();
    for r in prior.iter().chain(spill).filter(|r| r.live) {
        match best.get(&r.key) {
            Some(e) if e.epoch >= r.epoch => {}
            _ => {
                best.insert(r.key, *r);
            }
        }
    }
    let merged: Vec<Record> = best.into_values().collect();
    if let Some(cap) = capacity {
        if merged.len() > cap {
            return Err(Error::StashOverflow { demand: merged.len(), capacity: cap });
        }
    }
    Ok(merged)
}

/// Plaintext census of every region, for test oracles.
#[derive(Clone, Debug, Default)]
pub struct Census {
    pub live_records: usize,
    /// Newest `(epoch, value)` per key.
    pub latest: BTreeMap<u64, (u64, u64)>,
}

/// Machinery shared by both variants: episode bookkeeping, rebuilds and the
/// shared stash.
pub(crate) struct Core<S: RecordStore> {
    pub params: OramParams,
    pub geom: Geometry,
    pub store: S,
    pub rng: ChaCha20Rng,
    pub ws: PrivateWorkspace,
    pub stats: StashStats,
}

impl<S: RecordStore> Core<S> {
    pub fn new(params: OramParams, geom: Geometry, store: S) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(params.master_seed);
        rng.set_stream(1);
        let ws = match params.mode {
            Mode::Functional => PrivateWorkspace::unbounded(),
            Mode::Oblivious => PrivateWorkspace::new(geom.workspace_cells(params.workspace)),
        };
        Self { params, geom, store, rng, ws, stats: StashStats::default() }
    }

    /// A client attaching after `t` episodes draws from its own stream so
    /// it never replays the randomness of an earlier client.
    pub fn resumed(params: OramParams, geom: Geometry, store: S, t: u64) -> Self {
        let mut core = Self::new(params, geom, store);
        core.rng.set_stream(t.wrapping_add(2));
        core
    }

    pub fn oblivious(&self) -> bool {
        self.params.mode == Mode::Oblivious
    }

    pub fn stored_locations(&self) -> bool {
        self.geom.variant == crate::params::Variant::Tree
    }

    pub fn region(&self, kind: RegionKind) -> Result<RegionId> {
        self.store.current_or_err(kind)
    }

    pub fn table(&self, level: usize, side: usize) -> Result<RegionId> {
        self.region(RegionKind::table(level, side))
    }

    fn chain(&self, meta: &Meta) -> SeedChain {
        meta.chain(self.params.master_seed)
    }

    /// Draws the addressing for a new generation of `level`.
    fn fresh_addressing(&mut self, meta: &mut Meta, level: usize) -> Addressing {
        if self.stored_locations() {
            meta.seeds[level] = [0, 0];
            return Addressing::Stored;
        }
        let mut chain = self.chain(meta);
        let seeds = [chain.next_seed().value, chain.next_seed().value];
        meta.set_chain(&chain);
        meta.seeds[level] = seeds;
        Addressing::Prf(seeds)
    }

    fn replace(&mut self, kind: RegionKind, records: &[Record]) -> Result<RegionId> {
        if let Some(old) = self.store.current(kind) {
            self.store.release(old)?;
        }
        self.store.allocate(kind, records)
    }

    fn install_level(&mut self, level: usize, sides: [Vec<Record>; 2]) -> Result<()> {
        for (side, recs) in sides.iter().enumerate() {
            self.replace(RegionKind::table(level, side), recs)?;
        }
        Ok(())
    }

    /// Replaces `level` with an empty generation under fresh addressing.
    fn reset_level(&mut self, meta: &mut Meta, level: usize) -> Result<()> {
        self.fresh_addressing(meta, level);
        let empty = vec![Record::EMPTY; self.geom.cells[level]];
        self.install_level(level, [empty.clone(), empty])?;
        meta.occupied[level] = false;
        Ok(())
    }

    /// Pads `entries` to the stash size and rewrites `S` in full. In
    /// functional mode an oversized stash grows instead.
    fn write_stash(&mut self, entries: &[Record]) -> Result<()> {
        let s = self.region(RegionKind::Stash)?;
        let cells = self.store.cell_count(s)?.max(self.geom.stash_cells);
        if entries.len() > cells {
            if self.oblivious() {
                return Err(Error::StashOverflow { demand: entries.len(), capacity: cells });
            }
            self.replace(RegionKind::Stash, entries)?;
            return Ok(());
        }
        let mut padded = entries.to_vec();
        padded.resize(cells, Record::EMPTY);
        self.store.write_all(s, &padded)
    }

    /// Creates the empty regions and builds `items` into `T_L`.
    pub fn init_regions(&mut self, items: &[Record]) -> Result<Meta> {
        let l = self.geom.levels;
        let mut meta = Meta::new(l, self.params.master_seed);
        self.replace(RegionKind::Cache, &vec![Record::EMPTY; self.geom.q_cells])?;
        self.replace(RegionKind::Stash, &vec![Record::EMPTY; self.geom.stash_cells])?;
        for level in 1..l {
            self.reset_level(&mut meta, level)?;
        }
        let merged = self
            .build_level(&mut meta, l, items, &[])
            .map_err(|e| Error::Init(e.to_string()))?;
        self.write_stash(&merged)?;
        Ok(meta)
    }

    /// Builds `items` into a new generation of `level` and merges the spill
    /// with `kept`, retrying with fresh randomness while the merged stash
    /// exceeds capacity. Returns the merged stash.
    fn build_level(&mut self, meta: &mut Meta, level: usize, items: &[Record], kept: &[Record]) -> Result<Vec<Record>> {
        let cells = self.geom.cells[level];
        let capacity = self.geom.capacity[level];
        let stash_cap = self.geom.stash_cells;
        for _ in 0..MAX_BUILD_ATTEMPTS {
            let addressing = self.fresh_addressing(meta, level);
            let mut input: Vec<Record> = items
                .iter()
                .map(|r| Record { home: 0, report: false, aux: 0, ..*r })
                .collect();
            if addressing == Addressing::Stored {
                for r in &mut input {
                    r.loc = random_pair(cells, &mut self.rng);
                }
            }
            let built = CuckooTable::build(&input, level, cells, capacity, addressing, None, self.geom.move_limit)?;
            let spill: Vec<Record> = built.spilled.iter().map(|r| Record { home: level as u8, ..*r }).collect();
            let merged = merge_stash(kept, &spill, None)?;
            if merged.len() > stash_cap && self.oblivious() {
                self.stats.retries += 1;
                continue;
            }
            self.stats.record(merged.len(), stash_cap);
            self.install_level(level, built.table.into_sides())?;
            meta.occupied[level] = true;
            return Ok(merged);
        }
        Err(Error::RebuildAborted { level, attempts: MAX_BUILD_ATTEMPTS })
    }

    /// Runs one scheduled move: gathers source, destination and the stash
    /// entries homed at either into a server buffer, sorts, deduplicates and
    /// compacts it, then rebuilds the destination and rewrites `S`.
    pub fn flush(&mut self, meta: &mut Meta, f: Flush) -> Result<()> {
        let j = f.dest;
        let src = f.source.level();
        let mut input = Vec::new();
        match f.source {
            Source::Cache => input.extend(self.store.read_all(self.region(RegionKind::Cache)?)?),
            Source::Level(i) => {
                for side in 0..2 {
                    input.extend(self.store.read_all(self.table(i, side)?)?);
                }
            }
        }
        if meta.occupied[j] {
            for side in 0..2 {
                input.extend(self.store.read_all(self.table(j, side)?)?);
            }
        }
        let stash = self.store.read_all(self.region(RegionKind::Stash)?)?;
        self.ws.acquire(stash.len())?;
        let res = self.flush_inner(meta, f, input, &stash, src, j);
        self.ws.release(stash.len());
        res
    }

    fn flush_inner(
        &mut self,
        meta: &mut Meta,
        f: Flush,
        mut input: Vec<Record>,
        stash: &[Record],
        src: usize,
        j: usize,
    ) -> Result<()> {
        let mut kept = Vec::new();
        for e in stash {
            let home = e.home as usize;
            if e.live && (home == src || home == j) {
                input.push(*e);
            } else {
                input.push(Record::EMPTY);
                if e.live {
                    kept.push(*e);
                }
            }
        }
        let buf = self.replace(RegionKind::Buffer { level: j as u16 }, &input)?;
        oblivious_sort_by_key(&mut self.store, buf, &mut self.ws, rebuild_key)?;
        dedup_by_epoch(&mut self.store, buf, &mut self.ws)?;
        let live = compact_live(&mut self.store, buf, &mut self.ws)?;
        let mut items = self.store.read_all(buf)?;
        self.store.release(buf)?;
        items.truncate(live);

        let merged = self.build_level(meta, j, &items, &kept)?;
        self.write_stash(&merged)?;
        match f.source {
            Source::Cache => {
                self.replace(RegionKind::Cache, &vec![Record::EMPTY; self.geom.q_cells])?;
            }
            Source::Level(i) => self.reset_level(meta, i)?,
        }
        Ok(())
    }

    /// Runs every flush due after the `meta.t`-th access and returns the
    /// deepest destination touched (0 if none).
    pub fn run_schedule(&mut self, meta: &mut Meta) -> Result<usize> {
        let mut deepest = 0;
        for f in flushes_due(meta.t, &self.geom) {
            self.flush(meta, f)?;
            deepest = deepest.max(f.dest);
        }
        Ok(deepest)
    }

    /// Decrypts every region without recording accesses.
    pub fn census(&self) -> Result<Census> {
        let mut c = Census::default();
        let mut kinds = vec![RegionKind::Cache, RegionKind::Stash, RegionKind::Root];
        for level in 1..=self.geom.levels {
            kinds.push(RegionKind::table(level, 0));
            kinds.push(RegionKind::table(level, 1));
        }
        for kind in kinds {
            let Some(id) = self.store.current(kind) else { continue };
            for off in 0..self.store.cell_count(id)? {
                let r = self.store.peek(id, off)?;
                if !r.live {
                    continue;
                }
                c.live_records += 1;
                let e = c.latest.entry(r.key).or_insert((r.epoch, r.value));
                if r.epoch > e.0 {
                    *e = (r.epoch, r.value);
                }
            }
        }
        Ok(c)
    }

    /// Flips the value of the newest copy of some key stored in `T_L`.
    pub fn corrupt_one(&mut self, accept: impl Fn(u64) -> bool) -> Result<Option<u64>> {
        let latest = self.census()?.latest;
        let l = self.geom.levels;
        for side in 0..2 {
            let id = self.table(l, side)?;
            for off in 0..self.store.cell_count(id)? {
                let mut r = self.store.peek(id, off)?;
                if r.live && accept(r.key) && latest.get(&r.key).map(|e| e.0) == Some(r.epoch) {
                    r.value ^= 0x5a5a_5a5a;
                    self.store.poke(id, off, &r)?;
                    return Ok(Some(r.key));
                }
            }
        }
        Ok(None)
    }
}

/// The PRF-addressed stateless ORAM.
pub struct Oram<S: RecordStore> {
    core: Core<S>,
}

/// Opens the encrypted store used by oblivious-mode instances.
pub fn encrypted_store(params: &OramParams, record_trace: bool) -> EncryptedStore {
    let server = if record_trace { Server::new() } else { Server::without_trace() };
    let key = GroupKey::from_seed(params.master_seed);
    EncryptedStore::new(server, params.cipher, &key, params.master_seed ^ 0x6e6f_6e63_6573_6565)
}

impl<S: RecordStore> Oram<S> {
    /// Stores every index with value 0 in `T_L`.
    pub fn init(params: OramParams, store: S) -> Result<Self> {
        let geom = Geometry::prf(&params)?;
        let mut core = Core::new(params, geom, store);
        let items: Vec<Record> = (0..core.geom.n).map(|x| Record::item(x, 0, 0)).collect();
        let meta = core.init_regions(&items)?;
        core.store.store_meta(&meta)?;
        Ok(Self { core })
    }

    /// Attaches a fresh client to existing server state.
    pub fn resume(params: OramParams, store: S) -> Result<Self> {
        let geom = Geometry::prf(&params)?;
        let meta = store.load_meta()?;
        if meta.seeds.len() != geom.levels + 1 {
            return Err(usage("server state does not match these parameters"));
        }
        Ok(Self { core: Core::resumed(params, geom, store, meta.t) })
    }

    pub fn params(&self) -> &OramParams {
        &self.core.params
    }

    pub fn geometry(&self) -> &Geometry {
        &self.core.geom
    }

    pub fn store(&self) -> &S {
        &self.core.store
    }

    pub fn store_mut(&mut self) -> &mut S {
        &mut self.core.store
    }

    pub fn into_store(self) -> S {
        self.core.store
    }

    pub fn workspace(&self) -> &PrivateWorkspace {
        &self.core.ws
    }

    pub fn census(&self) -> Result<Census> {
        self.core.census()
    }

    /// Completed episodes.
    pub fn episodes(&self) -> Result<u64> {
        Ok(self.core.store.load_meta()?.t)
    }

    fn episode(&mut self, op: Op, x: u64) -> Result<u64> {
        let n = self.core.geom.n;
        if x >= n {
            return Err(usage(format!("index {x} out of range for n = {n}")));
        }
        let core = &mut self.core;
        let oblivious = core.oblivious();
        let mut meta = core.store.load_meta()?;
        let q_id = core.region(RegionKind::Cache)?;
        let s_id = core.region(RegionKind::Stash)?;
        let mut q = core.store.read_all(q_id)?;
        let mut s = core.store.read_all(s_id)?;

        let newest = |recs: &[Record], pred: &dyn Fn(&Record) -> bool| {
            recs.iter()
                .enumerate()
                .filter(|(_, r)| r.live && r.key == x && pred(r))
                .max_by_key(|(_, r)| r.epoch)
                .map(|(i, r)| (i, *r))
        };
        let mut found = newest(&q, &|_| true).map(|(_, r)| r);
        let mut stash_hit = None;
        for k in 1..=core.geom.levels {
            if found.is_none() {
                if let Some((i, r)) = newest(&s, &|r| r.home as usize == k) {
                    found = Some(r);
                    stash_hit = Some(i);
                }
            }
            if !oblivious && (found.is_some() || !meta.occupied[k]) {
                if found.is_some() {
                    break;
                }
                continue;
            }
            let m = core.geom.cells[k];
            let real = found.is_none() || core.params.probe_policy == ProbePolicy::RealAfterHit;
            let locs = if real {
                let [s0, s1] = meta.seeds[k];
                let m64 = m as u64;
                [
                    crate::crypto::location_unchecked(s0, x, m64) as usize,
                    crate::crypto::location_unchecked(s1, x, m64) as usize,
                ]
            } else {
                [core.rng.gen_range(0..m), core.rng.gen_range(0..m)]
            };
            for side in 0..2 {
                let r = core.store.read(core.table(k, side)?, locs[side])?;
                if found.is_none() && r.live && r.key == x {
                    found = Some(r);
                }
            }
        }
        let old = found.ok_or_else(|| Error::Invariant(format!("index {x} not found")))?.value;
        let value = match op {
            Op::Read => old,
            Op::Write(v) => v,
        };
        let slot = (meta.t % core.geom.period) as usize;
        q[slot] = Record::item(x, value, meta.t + 1);
        if let Some(i) = stash_hit {
            s[i] = Record::EMPTY;
        }
        if oblivious {
            core.store.write_all(q_id, &q)?;
            core.store.write_all(s_id, &s)?;
        } else {
            core.store.write(q_id, slot, &q[slot])?;
            if let Some(i) = stash_hit {
                core.store.write(s_id, i, &s[i])?;
            }
        }
        meta.t += 1;
        core.run_schedule(&mut meta)?;
        core.store.store_meta(&meta)?;
        Ok(old)
    }
}

impl<S: RecordStore + Send> ObliviousRam for Oram<S> {
    fn n(&self) -> u64 {
        self.core.geom.n
    }

    fn access(&mut self, op: Op, x: u64) -> Result<u64> {
        self.episode(op, x)
    }

    fn stash_stats(&self) -> &StashStats {
        &self.core.stats
    }

    fn server_accesses(&self) -> u64 {
        self.core.store.access_count()
    }

    fn server_cells(&self) -> usize {
        self.core.store.total_cells()
    }

    fn drain_trace(&mut self) -> Vec<TraceEvent> {
        self.core.store.drain_trace()
    }

    fn inject_fault(&mut self) -> Result<Option<u64>> {
        self.core.corrupt_one(|_| true)
    }

    fn geometry(&self) -> &Geometry {
        &self.core.geom
    }

    fn write_snapshot(&self, w: &mut dyn std::io::Write) -> Result<bool> {
        self.core.store.write_snapshot(w)
    }
}

/// Functional-mode instance over a plaintext store.
pub fn functional_prf(params: OramParams) -> Result<Oram<PlainStore>> {
    Oram::init(OramParams { mode: Mode::Functional, ..params }, PlainStore::new())
}
