//! Data-oblivious batch operations over server regions.
//!
//! A region that fits the private workspace is read whole, processed in
//! client memory and written back. Larger regions are sorted with Batcher's
//! odd-even merge network, one compare-exchange (two reads, two writes) at a
//! time. Either way the sequence of `(offset, op)` accesses depends only on
//! the region's length.

use crate::error::{Error, Result};
use crate::record::Record;
use crate::server::RegionId;
use crate::store::RecordStore;

/// Accounting for the client's private memory.
#[derive(Clone, Debug)]
pub struct PrivateWorkspace {
    capacity: usize,
    in_use: usize,
    peak: usize,
}

impl PrivateWorkspace {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(2), in_use: 0, peak: 0 }
    }

    pub fn unbounded() -> Self {
        Self::new(usize::MAX)
    }

    /// `ceil(n^nu)` cells.
    pub fn for_exponent(n: u64, nu: f64) -> Self {
        Self::new(((n as f64).powf(nu) - 1e-9).ceil() as usize)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn in_use(&self) -> usize {
        self.in_use
    }

    pub fn peak(&self) -> usize {
        self.peak
    }

    pub fn fits(&self, cells: usize) -> bool {
        self.in_use.saturating_add(cells) <= self.capacity
    }

    pub fn acquire(&mut self, cells: usize) -> Result<()> {
        if !self.fits(cells) {
            return Err(Error::Invariant(format!(
                "workspace overrun: {} + {cells} > {}",
                self.in_use, self.capacity
            )));
        }
        self.in_use += cells;
        self.peak = self.peak.max(self.in_use);
        Ok(())
    }

    pub fn release(&mut self, cells: usize) {
        debug_assert!(cells <= self.in_use);
        self.in_use -= cells;
    }
}

/// Compare-exchange pairs `(i, j)`, `i < j`, of Batcher's odd-even merge
/// sort on `len` elements. Comparators reaching past `len` are dropped,
/// which is equivalent to padding with maximal elements.
pub fn odd_even_merge_network(len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if len < 2 {
        return out;
    }
    let n = len.next_power_of_two();
    let mut p = 1;
    while p < n {
        let mut k = p;
        while k >= 1 {
            let mut j = k % p;
            while j + k < n {
                for i in 0..k.min(n - j - k) {
                    let (a, b) = (i + j, i + j + k);
                    if a / (2 * p) == b / (2 * p) && b < len {
                        out.push((a, b));
                    }
                }
                j += 2 * k;
            }
            k /= 2;
        }
        p *= 2;
    }
    out
}

/// Sorts `region` ascending by `key`.
pub fn oblivious_sort_by_key<S, K, F>(store: &mut S, region: RegionId, ws: &mut PrivateWorkspace, key: F) -> Result<()>
where
    S: RecordStore + ?Sized,
    K: Ord,
    F: Fn(&Record) -> K,
{
    let len = store.cell_count(region)?;
    if ws.fits(len) {
        ws.acquire(len)?;
        let mut recs = store.read_all(region)?;
        recs.sort_by_key(|r| key(r));
        let res = store.write_all(region, &recs);
        ws.release(len);
        return res;
    }
    ws.acquire(2)?;
    let res = (|| {
        for (i, j) in odd_even_merge_network(len) {
            let a = store.read(region, i)?;
            let b = store.read(region, j)?;
            let (lo, hi) = if key(&b) < key(&a) { (b, a) } else { (a, b) };
            store.write(region, i, &lo)?;
            store.write(region, j, &hi)?;
        }
        Ok(())
    })();
    ws.release(2);
    res
}

/// Canonical rebuild order: live before empty, then key, then newest first.
pub fn rebuild_key(r: &Record) -> (bool, u64, std::cmp::Reverse<u64>) {
    (r.is_empty(), r.key, std::cmp::Reverse(r.epoch))
}

/// Visits every cell in order, letting `f` rewrite it, and writes every
/// cell back whether or not it changed.
pub fn oblivious_scan<S, F>(store: &mut S, region: RegionId, ws: &mut PrivateWorkspace, mut f: F) -> Result<()>
where
    S: RecordStore + ?Sized,
    F: FnMut(&mut Record),
{
    let len = store.cell_count(region)?;
    if ws.fits(len) {
        ws.acquire(len)?;
        let res = store.read_all(region).and_then(|mut recs| {
            recs.iter_mut().for_each(&mut f);
            store.write_all(region, &recs)
        });
        ws.release(len);
        return res;
    }
    ws.acquire(1)?;
    let res = (|| {
        for i in 0..len {
            let mut r = store.read(region, i)?;
            f(&mut r);
            store.write(region, i, &r)?;
        }
        Ok(())
    })();
    ws.release(1);
    res
}

/// Keeps the first live record of every run of equal keys and turns the
/// others into empty markers. Expects [`rebuild_key`] order.
pub fn dedup_by_epoch<S: RecordStore + ?Sized>(store: &mut S, region: RegionId, ws: &mut PrivateWorkspace) -> Result<()> {
    let mut prev: Option<u64> = None;
    oblivious_scan(store, region, ws, |r| {
        if r.live {
            if prev == Some(r.key) {
                *r = Record::EMPTY;
            } else {
                prev = Some(r.key);
            }
        }
    })
}

/// Moves live records to a prefix ordered by key and returns their count.
pub fn compact_live<S: RecordStore + ?Sized>(store: &mut S, region: RegionId, ws: &mut PrivateWorkspace) -> Result<usize> {
    let len = store.cell_count(region)?;
    if ws.fits(len) {
        ws.acquire(len)?;
        let res = store.read_all(region).and_then(|mut recs| {
            recs.sort_by_key(|r| (r.is_empty(), r.key));
            store.write_all(region, &recs)?;
            Ok(recs.iter().filter(|r| r.live).count())
        });
        ws.release(len);
        return res;
    }
    oblivious_sort_by_key(store, region, ws, |r| (r.is_empty(), r.key))?;
    ws.acquire(1)?;
    let mut live = 0;
    let res = (|| {
        for i in 0..len {
            live += usize::from(store.read(region, i)?.live);
        }
        Ok(live)
    })();
    ws.release(1);
    res
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::server::{RegionKind, Server};
    use crate::store::{EncryptedStore, PlainStore};
    use crate::crypto::{CipherKind, GroupKey};
    use proptest::prelude::*;

    fn store() -> EncryptedStore {
        EncryptedStore::new(Server::new(), CipherKind::Transparent, &GroupKey::from_seed(0), 1)
    }

    fn projection(s: &mut EncryptedStore) -> Vec<(usize, bool)> {
        s.server_mut()
            .drain_trace()
            .into_iter()
            .map(|e| (e.offset as usize, e.op == crate::server::AccessOp::Write))
            .collect()
    }

    fn sort_trace(recs: &[Record], ws_cells: usize) -> (Vec<Record>, Vec<(usize, bool)>) {
        let mut s = store();
        let b = s.allocate(RegionKind::Buffer { level: 1 }, recs).unwrap();
        s.server_mut().drain_trace();
        let mut ws = PrivateWorkspace::new(ws_cells);
        oblivious_sort_by_key(&mut s, b, &mut ws, rebuild_key).unwrap();
        assert_eq!(ws.in_use(), 0);
        let trace = projection(&mut s);
        let out = (0..recs.len()).map(|i| s.peek(b, i).unwrap()).collect();
        (out, trace)
    }

    fn items(keys: &[u64]) -> Vec<Record> {
        keys.iter().map(|&k| Record::item(k, k, 1)).collect()
    }

    #[test]
    fn network_is_a_sorter_for_all_small_binary_inputs() {
        // 0-1 principle.
        for len in 1..=12usize {
            let net = odd_even_merge_network(len);
            for mask in 0u32..(1 << len) {
                let mut v: Vec<u32> = (0..len).map(|i| (mask >> i) & 1).collect();
                for &(i, j) in &net {
                    if v[j] < v[i] {
                        v.swap(i, j);
                    }
                }
                assert!(v.windows(2).all(|w| w[0] <= w[1]), "len {len} mask {mask:b}");
            }
        }
    }

    #[test]
    fn sorted_and_reversed_inputs_share_a_trace() {
        let asc: Vec<u64> = (0..16).collect();
        let desc: Vec<u64> = (0..16).rev().collect();
        for ws in [2, 64] {
            let (a, ta) = sort_trace(&items(&asc), ws);
            let (b, tb) = sort_trace(&items(&desc), ws);
            assert_eq!(ta, tb);
            assert_eq!(a, b);
            assert!(a.windows(2).all(|w| w[0].key <= w[1].key));
        }
    }

    #[test]
    fn random_region_matches_plain_sort() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        let mut recs: Vec<Record> = (0..1000)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    Record::EMPTY
                } else {
                    Record::item(rng.gen_range(0..300), rng.gen(), rng.gen_range(0..50))
                }
            })
            .collect();
        let (out, _) = sort_trace(&recs, 8);
        recs.sort_by_key(rebuild_key);
        let key = |v: &[Record]| v.iter().map(rebuild_key).collect::<Vec<_>>();
        assert_eq!(key(&out), key(&recs));
    }

    #[test]
    fn dedup_keeps_newest() {
        let mut s = PlainStore::new();
        let mut recs = vec![Record::item(5, 1, 3), Record::item(5, 2, 7)];
        recs.sort_by_key(rebuild_key);
        let b = s.allocate(RegionKind::Buffer { level: 1 }, &recs).unwrap();
        dedup_by_epoch(&mut s, b, &mut PrivateWorkspace::new(2)).unwrap();
        let out = s.read_all(b).unwrap();
        assert_eq!(out[0].epoch, 7);
        assert!(out[1].is_empty());
    }

    #[test]
    fn compact_edge_cases() {
        let mut s = PlainStore::new();
        let b = s.allocate_empty(RegionKind::Buffer { level: 1 }, 9).unwrap();
        assert_eq!(compact_live(&mut s, b, &mut PrivateWorkspace::new(2)).unwrap(), 0);
        let recs = items(&[4, 1, 3]);
        let b = s.allocate(RegionKind::Buffer { level: 2 }, &recs).unwrap();
        assert_eq!(compact_live(&mut s, b, &mut PrivateWorkspace::unbounded()).unwrap(), 3);
        assert_eq!(s.read_all(b).unwrap(), items(&[1, 3, 4]));
    }

    #[test]
    fn workspace_overrun_is_an_error() {
        let mut ws = PrivateWorkspace::new(4);
        ws.acquire(3).unwrap();
        assert!(ws.acquire(2).is_err());
        ws.release(3);
        assert_eq!(ws.peak(), 3);
        assert_eq!(PrivateWorkspace::for_exponent(1 << 16, 0.5).capacity(), 256);
    }

    fn record_strategy() -> impl Strategy<Value = Record> {
        prop_oneof![
            1 => Just(Record::EMPTY),
            4 => (0u64..20, 0u64..10, any::<u64>()).prop_map(|(k, e, v)| Record::item(k, v, e)),
        ]
    }

    fn pipeline(recs: &[Record], ws_cells: usize) -> (Vec<Record>, usize, Vec<(usize, bool)>) {
        let mut s = store();
        let b = s.allocate(RegionKind::Buffer { level: 1 }, recs).unwrap();
        s.server_mut().drain_trace();
        let mut ws = PrivateWorkspace::new(ws_cells);
        oblivious_sort_by_key(&mut s, b, &mut ws, rebuild_key).unwrap();
        dedup_by_epoch(&mut s, b, &mut ws).unwrap();
        let live = compact_live(&mut s, b, &mut ws).unwrap();
        let trace = projection(&mut s);
        (s.read_all(b).unwrap(), live, trace)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pipeline_matches_hashmap_oracle(recs in proptest::collection::vec(record_strategy(), 1..80),
                                           ws_cells in prop_oneof![Just(2usize), Just(1000usize)]) {
            let (out, live, _) = pipeline(&recs, ws_cells);
            let mut best = std::collections::BTreeMap::new();
            for r in recs.iter().filter(|r| r.live) {
                let e = best.entry(r.key).or_insert(*r);
                if r.epoch > e.epoch {
                    *e = *r;
                }
            }
            prop_assert_eq!(live, best.len());
            let got: Vec<(u64, u64)> = out[..live].iter().map(|r| (r.key, r.epoch)).collect();
            let want: Vec<(u64, u64)> = best.values().map(|r| (r.key, r.epoch)).collect();
            prop_assert_eq!(got, want);
            prop_assert!(out[live..].iter().all(|r| r.is_empty()));
        }

        #[test]
        fn pipeline_trace_depends_only_on_length(a in proptest::collection::vec(record_strategy(), 30),
                                                 b in proptest::collection::vec(record_strategy(), 30),
                                                 ws_cells in prop_oneof![Just(2usize), Just(1000usize)]) {
            let (_, _, ta) = pipeline(&a, ws_cells);
            let (_, _, tb) = pipeline(&b, ws_cells);
            prop_assert_eq!(ta, tb);
        }

        #[test]
        fn pipeline_is_idempotent(recs in proptest::collection::vec(record_strategy(), 1..60)) {
            let (once, live, _) = pipeline(&recs, 2);
            let (twice, live2, _) = pipeline(&once, 2);
            prop_assert_eq!(live, live2);
            prop_assert_eq!(once, twice);
        }
    }
}
