//! Record-level view of server storage.
//!
//! [`EncryptedStore`] encrypts every record into a [`Server`] cell and is what
//! the oblivious mode runs on. [`PlainStore`] keeps plaintext records and
//! only counts accesses; functional-mode experiments use it for throughput.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::crypto::{Cipher, CipherKind, GroupKey, SeedChain};
use crate::error::{usage, Error, Result};
use crate::record::Record;
use crate::server::{RegionId, RegionKind, Server, TraceEvent};

/// Client header persisted on the server between episodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Meta {
    /// Completed episodes.
    pub t: u64,
    pub chain_index: u64,
    pub chain_state: [u8; 32],
    /// Per-level hash seeds; index 0 is unused.
    pub seeds: Vec<[u64; 2]>,
    /// Per-level occupancy flag; index 0 is unused.
    pub occupied: Vec<bool>,
}

impl Meta {
    pub fn new(levels: usize, master_seed: u64) -> Self {
        let chain = SeedChain::new(master_seed);
        Self {
            t: 0,
            chain_index: chain.index(),
            chain_state: chain.state_bytes(),
            seeds: vec![[0, 0]; levels + 1],
            occupied: vec![false; levels + 1],
        }
    }

    pub fn chain(&self, master_seed: u64) -> SeedChain {
        SeedChain::from_parts(self.chain_index, self.chain_state, master_seed)
    }

    pub fn set_chain(&mut self, chain: &SeedChain) {
        self.chain_index = chain.index();
        self.chain_state = chain.state_bytes();
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(50 + 17 * self.seeds.len());
        out.extend_from_slice(&self.t.to_be_bytes());
        out.extend_from_slice(&self.chain_index.to_be_bytes());
        out.extend_from_slice(&self.chain_state);
        out.extend_from_slice(&(self.seeds.len() as u16).to_be_bytes());
        for (s, occ) in self.seeds.iter().zip(&self.occupied) {
            out.extend_from_slice(&s[0].to_be_bytes());
            out.extend_from_slice(&s[1].to_be_bytes());
            out.push(*occ as u8);
        }
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        let bad = || Error::Integrity("malformed client header".into());
        if b.len() < 50 {
            return Err(bad());
        }
        let u64_at = |i: usize| u64::from_be_bytes(b[i..i + 8].try_into().unwrap());
        let n = u16::from_be_bytes([b[48], b[49]]) as usize;
        if b.len() != 50 + 17 * n {
            return Err(bad());
        }
        let mut seeds = Vec::with_capacity(n);
        let mut occupied = Vec::with_capacity(n);
        for k in 0..n {
            let base = 50 + 17 * k;
            seeds.push([u64_at(base), u64_at(base + 8)]);
            occupied.push(b[base + 16] != 0);
        }
        Ok(Self {
            t: u64_at(0),
            chain_index: u64_at(8),
            chain_state: b[16..48].try_into().unwrap(),
            seeds,
            occupied,
        })
    }
}

/// Record-granularity storage with access accounting.
pub trait RecordStore {
    /// Uploads a fresh instance of `kind` holding `records`.
    fn allocate(&mut self, kind: RegionKind, records: &[Record]) -> Result<RegionId>;
    fn release(&mut self, id: RegionId) -> Result<()>;
    fn current(&self, kind: RegionKind) -> Option<RegionId>;
    fn cell_count(&self, id: RegionId) -> Result<usize>;
    fn read(&mut self, id: RegionId, offset: usize) -> Result<Record>;
    fn write(&mut self, id: RegionId, offset: usize, record: &Record) -> Result<()>;

    /// Untraced read for test oracles.
    fn peek(&self, id: RegionId, offset: usize) -> Result<Record>;
    /// Untraced overwrite for fault injection.
    fn poke(&mut self, id: RegionId, offset: usize, record: &Record) -> Result<()>;

    fn load_meta(&self) -> Result<Meta>;
    fn store_meta(&mut self, meta: &Meta) -> Result<()>;

    fn access_count(&self) -> u64;
    fn total_cells(&self) -> usize;

    /// Whether reads and writes are visible in a recorded trace.
    fn traced(&self) -> bool;

    /// Returns and clears the recorded trace, if any.
    fn drain_trace(&mut self) -> Vec<TraceEvent> {
        Vec::new()
    }

    /// Writes a server snapshot if the store is backed by a [`Server`].
    fn write_snapshot(&self, _w: &mut dyn std::io::Write) -> Result<bool> {
        Ok(false)
    }

    fn allocate_empty(&mut self, kind: RegionKind, cells: usize) -> Result<RegionId> {
        self.allocate(kind, &vec![Record::EMPTY; cells])
    }

    fn read_all(&mut self, id: RegionId) -> Result<Vec<Record>> {
        let n = self.cell_count(id)?;
        (0..n).map(|i| self.read(id, i)).collect()
    }

    fn write_all(&mut self, id: RegionId, records: &[Record]) -> Result<()> {
        let n = self.cell_count(id)?;
        if records.len() != n {
            return Err(usage(format!("write_all of {} records into {} cells", records.len(), n)));
        }
        for (i, r) in records.iter().enumerate() {
            self.write(id, i, r)?;
        }
        Ok(())
    }

    fn current_or_err(&self, kind: RegionKind) -> Result<RegionId> {
        self.current(kind).ok_or_else(|| Error::Invariant(format!("missing region {kind}")))
    }
}

/// Encrypts records into a [`Server`].
pub struct EncryptedStore {
    server: Server,
    cipher: Box<dyn Cipher>,
    rng: ChaCha20Rng,
}

impl EncryptedStore {
    pub fn new(server: Server, cipher: CipherKind, key: &GroupKey, nonce_seed: u64) -> Self {
        Self { server, cipher: cipher.build(key), rng: ChaCha20Rng::seed_from_u64(nonce_seed) }
    }

    pub fn server(&self) -> &Server {
        &self.server
    }

    pub fn server_mut(&mut self) -> &mut Server {
        &mut self.server
    }

    pub fn into_server(self) -> Server {
        self.server
    }

    fn seal(&mut self, record: &Record) -> crate::server::Cell {
        self.cipher.encrypt(&record.encode(), &mut self.rng)
    }

    fn open(&self, cell: &crate::server::Cell) -> Result<Record> {
        Record::decode(&self.cipher.decrypt(cell)?)
    }
}

impl RecordStore for EncryptedStore {
    fn write_snapshot(&self, w: &mut dyn std::io::Write) -> Result<bool> {
        self.server.write_snapshot(w)?;
        Ok(true)
    }

    fn allocate(&mut self, kind: RegionKind, records: &[Record]) -> Result<RegionId> {
        let cells = records.iter().map(|r| self.seal(r)).collect();
        self.server.allocate(kind, cells)
    }

    fn release(&mut self, id: RegionId) -> Result<()> {
        self.server.release(id)
    }

    fn current(&self, kind: RegionKind) -> Option<RegionId> {
        self.server.current(kind)
    }

    fn cell_count(&self, id: RegionId) -> Result<usize> {
        self.server.cell_count(id)
    }

    fn read(&mut self, id: RegionId, offset: usize) -> Result<Record> {
        let cell = self.server.read_cell(id, offset)?;
        self.open(&cell)
    }

    fn write(&mut self, id: RegionId, offset: usize, record: &Record) -> Result<()> {
        let cell = self.seal(record);
        self.server.write_cell(id, offset, cell)
    }

    fn peek(&self, id: RegionId, offset: usize) -> Result<Record> {
        self.open(self.server.peek_cell(id, offset)?)
    }

    fn poke(&mut self, id: RegionId, offset: usize, record: &Record) -> Result<()> {
        let cell = self.seal(record);
        self.server.poke_cell(id, offset, cell)
    }

    fn load_meta(&self) -> Result<Meta> {
        let cell = self.server.meta().ok_or_else(|| Error::Invariant("no client header".into()))?;
        Meta::decode(&self.cipher.decrypt(cell)?)
    }

    fn store_meta(&mut self, meta: &Meta) -> Result<()> {
        let cell = self.cipher.encrypt(&meta.encode(), &mut self.rng);
        self.server.set_meta(cell);
        Ok(())
    }

    fn access_count(&self) -> u64 {
        self.server.access_count()
    }

    fn total_cells(&self) -> usize {
        self.server.total_cells()
    }

    fn traced(&self) -> bool {
        self.server.is_recording()
    }

    fn drain_trace(&mut self) -> Vec<TraceEvent> {
        self.server.drain_trace()
    }
}

/// Plaintext storage that only counts accesses.
#[derive(Default, Clone, Debug)]
pub struct PlainStore {
    regions: BTreeMap<RegionKind, (u32, Vec<Record>)>,
    next_gen: BTreeMap<RegionKind, u32>,
    meta: Option<Meta>,
    accesses: u64,
}

impl PlainStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn regions(&self) -> impl Iterator<Item = RegionId> + '_ {
        self.regions.iter().map(|(kind, (gen, _))| RegionId { kind: *kind, gen: *gen })
    }

    fn region(&self, id: RegionId) -> Result<&Vec<Record>> {
        match self.regions.get(&id.kind) {
            Some((g, v)) if *g == id.gen => Ok(v),
            _ => Err(usage(format!("no live region {} gen {}", id.kind, id.gen))),
        }
    }

    fn region_mut(&mut self, id: RegionId) -> Result<&mut Vec<Record>> {
        match self.regions.get_mut(&id.kind) {
            Some((g, v)) if *g == id.gen => Ok(v),
            _ => Err(usage(format!("no live region {} gen {}", id.kind, id.gen))),
        }
    }
}

impl RecordStore for PlainStore {
    fn allocate(&mut self, kind: RegionKind, records: &[Record]) -> Result<RegionId> {
        if records.is_empty() {
            return Err(usage(format!("region {kind} must have at least one cell")));
        }
        let g = self.next_gen.entry(kind).or_insert(0);
        let gen = *g;
        *g += 1;
        self.accesses += records.len() as u64;
        self.regions.insert(kind, (gen, records.to_vec()));
        Ok(RegionId { kind, gen })
    }

    fn release(&mut self, id: RegionId) -> Result<()> {
        self.region(id)?;
        self.regions.remove(&id.kind);
        Ok(())
    }

    fn current(&self, kind: RegionKind) -> Option<RegionId> {
        self.regions.get(&kind).map(|(gen, _)| RegionId { kind, gen: *gen })
    }

    fn cell_count(&self, id: RegionId) -> Result<usize> {
        Ok(self.region(id)?.len())
    }

    fn read(&mut self, id: RegionId, offset: usize) -> Result<Record> {
        let r = *self
            .region(id)?
            .get(offset)
            .ok_or_else(|| usage(format!("offset {offset} out of range for {}", id.kind)))?;
        self.accesses += 1;
        Ok(r)
    }

    fn write(&mut self, id: RegionId, offset: usize, record: &Record) -> Result<()> {
        let slot = self
            .region_mut(id)?
            .get_mut(offset)
            .ok_or_else(|| usage(format!("offset {offset} out of range for {}", id.kind)))?;
        *slot = *record;
        self.accesses += 1;
        Ok(())
    }

    fn read_all(&mut self, id: RegionId) -> Result<Vec<Record>> {
        let v = self.region(id)?.clone();
        self.accesses += v.len() as u64;
        Ok(v)
    }

    fn write_all(&mut self, id: RegionId, records: &[Record]) -> Result<()> {
        let v = self.region_mut(id)?;
        if v.len() != records.len() {
            return Err(usage(format!("write_all of {} records into {} cells", records.len(), v.len())));
        }
        v.copy_from_slice(records);
        self.accesses += records.len() as u64;
        Ok(())
    }

    fn peek(&self, id: RegionId, offset: usize) -> Result<Record> {
        self.region(id)?.get(offset).copied().ok_or_else(|| usage("offset out of range"))
    }

    fn poke(&mut self, id: RegionId, offset: usize, record: &Record) -> Result<()> {
        *self.region_mut(id)?.get_mut(offset).ok_or_else(|| usage("offset out of range"))? = *record;
        Ok(())
    }

    fn load_meta(&self) -> Result<Meta> {
        self.meta.clone().ok_or_else(|| Error::Invariant("no client header".into()))
    }

    fn store_meta(&mut self, meta: &Meta) -> Result<()> {
        self.meta = Some(meta.clone());
        Ok(())
    }

    fn access_count(&self) -> u64 {
        self.accesses
    }

    fn total_cells(&self) -> usize {
        self.regions.values().map(|(_, v)| v.len()).sum()
    }

    fn traced(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_round_trip() {
        let mut m = Meta::new(5, 77);
        m.t = 1234;
        m.seeds[3] = [9, 10];
        m.occupied[5] = true;
        assert_eq!(Meta::decode(&m.encode()).unwrap(), m);
        assert!(Meta::decode(&[1, 2, 3]).is_err());
    }

    #[test]
    fn fresh_cache_reads_empty_marker() {
        let mut s = EncryptedStore::new(Server::new(), CipherKind::Aead, &GroupKey::from_seed(1), 2);
        let q = s.allocate_empty(RegionKind::Cache, 4).unwrap();
        assert_eq!(s.read(q, 0).unwrap(), Record::EMPTY);
        let c0 = s.server().peek_cell(q, 0).unwrap().clone();
        let c1 = s.server().peek_cell(q, 1).unwrap().clone();
        assert_ne!(c0, c1, "empty markers are individually encrypted");
    }

    #[test]
    fn rewrite_changes_ciphertext_not_plaintext() {
        let mut s = EncryptedStore::new(Server::new(), CipherKind::Aead, &GroupKey::from_seed(1), 2);
        let q = s.allocate_empty(RegionKind::Cache, 2).unwrap();
        let rec = Record::item(5, 6, 7);
        s.write(q, 1, &rec).unwrap();
        let first = s.server().peek_cell(q, 1).unwrap().clone();
        s.write(q, 1, &rec).unwrap();
        let second = s.server().peek_cell(q, 1).unwrap().clone();
        assert_ne!(first, second);
        assert_eq!(s.read(q, 1).unwrap(), rec);
        let trace = s.server_mut().drain_trace();
        let tail: Vec<_> = trace[trace.len() - 3..].iter().map(|e| (e.region.kind, e.offset)).collect();
        assert_eq!(tail, vec![(RegionKind::Cache, 1); 3]);
    }

    #[test]
    fn plain_store_counts_accesses() {
        let mut s = PlainStore::new();
        let q = s.allocate_empty(RegionKind::Cache, 3).unwrap();
        s.read(q, 0).unwrap();
        s.write(q, 1, &Record::item(1, 1, 1)).unwrap();
        s.read_all(q).unwrap();
        assert_eq!(s.access_count(), 3 + 1 + 1 + 3);
        assert!(s.read(q, 3).is_err());
    }
}
