//! The PRF-free variant: a complete binary tree over the memory whose nodes
//! sit in cuckoo tables at explicitly stored random location pairs.
//!
//! Node ids are heap-numbered (root 0, children `2v+1` and `2v+2`); the
//! leaf for index `x` is `n_pad - 1 + x`. Each parent record stores one
//! [`Pointer`] per child. The root lives alone in `ROOT`. An access walks
//! the root-to-leaf path and moves the whole path into `Q`, which is flushed
//! at the end of every episode. After the flushes a fix-up pass over `ROOT`,
//! `S` and the rebuilt prefix of levels repoints every parent whose child
//! moved.
//!
//! A node's ancestors always sit at the same or a shallower level, and a
//! stale copy of a node is never shallower than its live copy. The fix-up
//! relies on both.

use rand::Rng;

use crate::analysis::StashStats;
use crate::error::{usage, Error, Result};
use crate::hierarchy::{Census, Core, ObliviousRam, Op};
use crate::osort::{oblivious_scan, oblivious_sort_by_key};
use crate::params::{Geometry, Mode, OramParams};
use crate::record::{Pointer, Record};
use crate::server::{RegionKind, TraceEvent};
use crate::store::{Meta, PlainStore, RecordStore};

pub const ROOT_ID: u64 = 0;

pub fn parent_id(id: u64) -> u64 {
    (id - 1) / 2
}

/// Which child slot of its parent `id` occupies.
pub fn child_side(id: u64) -> usize {
    if id % 2 == 1 {
        0
    } else {
        1
    }
}

/// Node ids from the root's child down to the leaf of `x`.
pub fn path_to_leaf(n_pad: u64, x: u64) -> Vec<u64> {
    let mut v = n_pad - 1 + x;
    let mut path = Vec::new();
    while v != ROOT_ID {
        path.push(v);
        v = parent_id(v);
    }
    path.reverse();
    path
}

pub struct TreeOram<S: RecordStore> {
    core: Core<S>,
    n_pad: u64,
}

impl<S: RecordStore> TreeOram<S> {
    /// Stores every node in `T_L` and links all child pointers.
    pub fn init(params: OramParams, store: S) -> Result<Self> {
        let geom = Geometry::tree(&params)?;
        let n_pad = params.n.next_power_of_two();
        let mut core = Core::new(params, geom, store);
        let nodes: Vec<Record> = (1..=core.geom.keys).map(|id| Record::item(id, 0, 0)).collect();
        let meta = core.init_regions(&nodes)?;
        let root = Record::item(ROOT_ID, 0, 0);
        core.store.allocate(RegionKind::Root, &[root])?;
        let mut tree = Self { core, n_pad };
        tree.fixup_pointers(tree.core.geom.levels)?;
        tree.core.store.store_meta(&meta)?;
        Ok(tree)
    }

    pub fn resume(params: OramParams, store: S) -> Result<Self> {
        let geom = Geometry::tree(&params)?;
        let meta: Meta = store.load_meta()?;
        if meta.seeds.len() != geom.levels + 1 || store.current(RegionKind::Root).is_none() {
            return Err(usage("server state does not match these parameters"));
        }
        let n_pad = params.n.next_power_of_two();
        Ok(Self { core: Core::resumed(params, geom, store, meta.t), n_pad })
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

    pub fn census(&self) -> Result<Census> {
        self.core.census()
    }

    pub fn height(&self) -> usize {
        self.n_pad.trailing_zeros() as usize
    }

    /// Repoints parents at the current homes of their children across
    /// `ROOT`, `S` and `T_1..T_depth`.
    ///
    /// Every cell contributes a node entry tagged with its origin and, when
    /// live, a report `(parent id, side, pointer, epoch)`. One sort by
    /// `(parent id, reports first)` and a linear pass hand each node the
    /// newest report per side; a second sort by origin restores the node
    /// entries, which are then written back in place.
    pub fn fixup_pointers(&mut self, depth: usize) -> Result<()> {
        let core = &mut self.core;
        let mut origins = vec![core.region(RegionKind::Root)?, core.region(RegionKind::Stash)?];
        for level in 1..=depth {
            origins.push(core.table(level, 0)?);
            origins.push(core.table(level, 1)?);
        }
        let mut entries = Vec::new();
        let mut reports = Vec::new();
        for id in &origins {
            let recs = core.store.read_all(*id)?;
            for r in recs {
                let origin = entries.len() as u64;
                let ptr = match id.kind {
                    RegionKind::Table { level, .. } => Some(Pointer::table(level as usize, r.loc[0], r.loc[1])),
                    RegionKind::Stash if (r.home as usize) <= depth => Some(Pointer::stash()),
                    _ => None,
                };
                entries.push(Record { aux: origin, report: false, ..r });
                let mut rep = Record { report: true, ..Record::EMPTY };
                if let (true, true, Some(p)) = (r.live, r.key != ROOT_ID, ptr) {
                    rep.live = true;
                    rep.key = parent_id(r.key);
                    rep.epoch = r.epoch;
                    rep.children[child_side(r.key)] = Some(p);
                }
                reports.push(rep);
            }
        }
        let total = entries.len();
        entries.extend(reports);
        let buf = core.store.allocate(RegionKind::Buffer { level: 0 }, &entries)?;
        drop(entries);

        oblivious_sort_by_key(&mut core.store, buf, &mut core.ws, |r| (!r.live, r.key, !r.report))?;
        let mut group: Option<u64> = None;
        let mut best: [Option<(u64, Pointer)>; 2] = [None, None];
        oblivious_scan(&mut core.store, buf, &mut core.ws, |r| {
            if !r.live {
                return;
            }
            if group != Some(r.key) {
                group = Some(r.key);
                best = [None, None];
            }
            if r.report {
                for side in 0..2 {
                    if let Some(p) = r.children[side] {
                        if best[side].map_or(true, |(e, _)| r.epoch > e) {
                            best[side] = Some((r.epoch, p));
                        }
                    }
                }
            } else {
                for side in 0..2 {
                    if let Some((_, p)) = best[side] {
                        r.children[side] = Some(p);
                    }
                }
            }
        })?;
        oblivious_sort_by_key(&mut core.store, buf, &mut core.ws, |r| (r.report, r.aux))?;

        let mut next = 0;
        for id in &origins {
            for off in 0..core.store.cell_count(*id)? {
                let r = core.store.read(buf, next)?;
                next += 1;
                core.store.write(*id, off, &Record { aux: 0, ..r })?;
            }
        }
        debug_assert_eq!(next, total);
        core.store.release(buf)
    }

    fn episode(&mut self, op: Op, x: u64) -> Result<u64> {
        let n = self.core.geom.n;
        if x >= n {
            return Err(usage(format!("index {x} out of range for n = {n}")));
        }
        let path = path_to_leaf(self.n_pad, x);
        let core = &mut self.core;
        let oblivious = core.oblivious();
        let levels = core.geom.levels;
        let mut meta = core.store.load_meta()?;
        let root_id = core.region(RegionKind::Root)?;
        let q_id = core.region(RegionKind::Cache)?;
        let s_id = core.region(RegionKind::Stash)?;

        let mut root = core.store.read(root_id, 0)?;
        let mut stash: Option<Vec<Record>> = None;
        let mut hits = Vec::new();
        let mut nodes: Vec<Record> = Vec::with_capacity(path.len());
        for &id in &path {
            let parent = nodes.last().unwrap_or(&root);
            let ptr = parent.children[child_side(id)]
                .ok_or_else(|| Error::Invariant(format!("node {} lacks child pointer", parent.key)))?;
            let mut found = None;
            if oblivious || ptr.level == Pointer::CACHE {
                let q = core.store.read_all(q_id)?;
                if ptr.level == Pointer::CACHE {
                    found = q.iter().find(|r| r.live && r.key == id).copied();
                }
            }
            if oblivious || (ptr.level == Pointer::STASH && stash.is_none()) {
                stash = Some(core.store.read_all(s_id)?);
            }
            if ptr.level == Pointer::STASH {
                let s = stash.as_ref().expect("stash read above");
                if let Some((i, r)) = s.iter().enumerate().find(|(_, r)| r.live && r.key == id) {
                    found = Some(*r);
                    hits.push(i);
                }
            }
            for k in 1..=levels {
                let real = ptr.level as usize == k && ptr.level > 0;
                if !real && !oblivious {
                    continue;
                }
                let locs = if real {
                    [ptr.i1 as usize, ptr.i2 as usize]
                } else {
                    let m = core.geom.cells[k];
                    [core.rng.gen_range(0..m), core.rng.gen_range(0..m)]
                };
                for side in 0..2 {
                    let r = core.store.read(core.table(k, side)?, locs[side])?;
                    if real && r.live && r.key == id {
                        found = Some(r);
                    }
                }
            }
            let node = found.ok_or_else(|| Error::Invariant(format!("node {id} not at its pointer {ptr:?}")))?;
            nodes.push(node);
        }

        let leaf = nodes.last_mut().expect("path is never empty");
        let old = leaf.value;
        if let Op::Write(v) = op {
            leaf.value = v;
        }
        let epoch = meta.t + 1;
        root.children[child_side(path[0])] = Some(Pointer::cache(0));
        for d in 0..nodes.len() {
            nodes[d].epoch = epoch;
            nodes[d].home = 0;
            if d + 1 < nodes.len() {
                nodes[d].children[child_side(path[d + 1])] = Some(Pointer::cache(d as u32 + 1));
            }
        }
        core.store.write(root_id, 0, &root)?;
        core.store.write_all(q_id, &nodes)?;
        if let Some(mut s) = stash {
            for &i in &hits {
                s[i] = Record::EMPTY;
            }
            if oblivious {
                core.store.write_all(s_id, &s)?;
            } else {
                for &i in &hits {
                    core.store.write(s_id, i, &s[i])?;
                }
            }
        }
        meta.t += 1;
        let depth = core.run_schedule(&mut meta)?;
        core.store.store_meta(&meta)?;
        self.fixup_pointers(depth)?;
        Ok(old)
    }

    /// Follows pointers from the root without recording accesses. Returns
    /// the number of non-root nodes reached, or an error naming the first
    /// broken link or ancestor-level violation.
    pub fn check_reachability(&self) -> Result<usize> {
        let store = &self.core.store;
        let peek_all = |kind| -> Result<Vec<Record>> {
            let id = store.current_or_err(kind)?;
            (0..store.cell_count(id)?).map(|i| store.peek(id, i)).collect()
        };
        let root = peek_all(RegionKind::Root)?[0];
        let q = peek_all(RegionKind::Cache)?;
        let s = peek_all(RegionKind::Stash)?;
        let mut seen = vec![false; self.core.geom.keys as usize + 1];
        // (node, its level rank): root < Q < level k (stash entries rank at their home).
        let mut stack = vec![(root, -1i64)];
        let mut reached = 0;
        while let Some((node, rank)) = stack.pop() {
            for side in 0..2 {
                let Some(p) = node.children[side] else { continue };
                let child_id = 2 * node.key + 1 + side as u64;
                let (child, child_rank) = match p.level {
                    Pointer::CACHE => (q.iter().find(|r| r.live && r.key == child_id).copied(), 0),
                    Pointer::STASH => {
                        let r = s.iter().find(|r| r.live && r.key == child_id).copied();
                        (r, r.map_or(0, |r| r.home as i64))
                    }
                    k => {
                        let cell = store.peek(store.current_or_err(RegionKind::table(k as usize, 0))?, p.i1 as usize)?;
                        let other = store.peek(store.current_or_err(RegionKind::table(k as usize, 1))?, p.i2 as usize)?;
                        let r = [cell, other].into_iter().find(|r| r.live && r.key == child_id);
                        (r, k as i64)
                    }
                };
                let child = child.ok_or_else(|| Error::Invariant(format!("pointer {p:?} of node {} is dangling", node.key)))?;
                if child_rank < rank {
                    return Err(Error::Invariant(format!("node {child_id} sits above its parent {}", node.key)));
                }
                if std::mem::replace(&mut seen[child_id as usize], true) {
                    return Err(Error::Invariant(format!("node {child_id} reached twice")));
                }
                reached += 1;
                stack.push((child, child_rank));
            }
        }
        Ok(reached)
    }
}

impl<S: RecordStore + Send> ObliviousRam for TreeOram<S> {
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
        let first_leaf = self.n_pad - 1;
        let n = self.core.geom.n;
        Ok(self
            .core
            .corrupt_one(|k| k >= first_leaf && k - first_leaf < n)?
            .map(|k| k - first_leaf))
    }

    fn geometry(&self) -> &Geometry {
        &self.core.geom
    }

    fn write_snapshot(&self, w: &mut dyn std::io::Write) -> Result<bool> {
        self.core.store.write_snapshot(w)
    }
}

pub fn functional_tree(params: OramParams) -> Result<TreeOram<PlainStore>> {
    TreeOram::init(OramParams { mode: Mode::Functional, ..params }, PlainStore::new())
}
