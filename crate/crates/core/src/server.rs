//! The honest-but-curious server: addressable regions of opaque cells and a
//! recorder of every physical access it observes.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};

pub const NONCE_LEN: usize = 12;

/// An encrypted slot as seen by the server.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Cell {
    pub ciphertext: Vec<u8>,
    pub nonce: [u8; NONCE_LEN],
}

/// What a region holds. Table levels start at 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RegionKind {
    Cache,
    Stash,
    Table { level: u16, side: u8 },
    Root,
    /// Server-side scratch used by rebuilds (`level` is the destination
    /// table) and by tree pointer fix-ups (`level` 0).
    Buffer { level: u16 },
}

impl RegionKind {
    pub fn table(level: usize, side: usize) -> Self {
        RegionKind::Table { level: level as u16, side: side as u8 }
    }

    pub fn level(&self) -> Option<usize> {
        match self {
            RegionKind::Table { level, .. } | RegionKind::Buffer { level } => Some(*level as usize),
            _ => None,
        }
    }

    fn code(&self) -> (u8, u16, u8) {
        match *self {
            RegionKind::Cache => (0, 0, 0),
            RegionKind::Stash => (1, 0, 0),
            RegionKind::Table { level, side } => (2, level, side),
            RegionKind::Root => (3, 0, 0),
            RegionKind::Buffer { level } => (4, level, 0),
        }
    }

    fn from_code(code: u8, level: u16, side: u8) -> Result<Self> {
        Ok(match code {
            0 => RegionKind::Cache,
            1 => RegionKind::Stash,
            2 => RegionKind::Table { level, side },
            3 => RegionKind::Root,
            4 => RegionKind::Buffer { level },
            c => return Err(Error::Format(format!("unknown region code {c}"))),
        })
    }
}

impl fmt::Display for RegionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegionKind::Cache => f.write_str("Q"),
            RegionKind::Stash => f.write_str("S"),
            RegionKind::Root => f.write_str("ROOT"),
            RegionKind::Table { level, side } => write!(f, "T{level}.{side}"),
            RegionKind::Buffer { level } => write!(f, "B{level}"),
        }
    }
}

impl FromStr for RegionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad region name {s:?}"));
        match s {
            "Q" => Ok(RegionKind::Cache),
            "S" => Ok(RegionKind::Stash),
            "ROOT" => Ok(RegionKind::Root),
            _ if s.starts_with('T') => {
                let (level, side) = s[1..].split_once('.').ok_or_else(bad)?;
                Ok(RegionKind::Table {
                    level: level.parse().map_err(|_| bad())?,
                    side: side.parse().map_err(|_| bad())?,
                })
            }
            _ if s.starts_with('B') => {
                Ok(RegionKind::Buffer { level: s[1..].parse().map_err(|_| bad())? })
            }
            _ => Err(bad()),
        }
    }
}

/// A region instance: the kind plus its allocation generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RegionId {
    pub kind: RegionKind,
    pub gen: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessOp {
    #[serde(rename = "R")]
    Read,
    #[serde(rename = "W")]
    Write,
}

/// One physical access observed by the server.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub seq: u64,
    pub region: RegionId,
    pub offset: u64,
    pub op: AccessOp,
}

#[derive(Serialize, Deserialize)]
struct TraceLine {
    seq: u64,
    region: String,
    gen: u32,
    off: u64,
    op: AccessOp,
}

impl TraceEvent {
    pub fn to_json_line(&self) -> String {
        let line = TraceLine {
            seq: self.seq,
            region: self.region.kind.to_string(),
            gen: self.region.gen,
            off: self.offset,
            op: self.op,
        };
        serde_json::to_string(&line).expect("trace line serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let t: TraceLine = serde_json::from_str(line)?;
        Ok(Self {
            seq: t.seq,
            region: RegionId { kind: t.region.parse()?, gen: t.gen },
            offset: t.off,
            op: t.op,
        })
    }
}

/// Writes events as JSON Lines.
pub fn write_jsonl<W: Write>(mut w: W, events: &[TraceEvent]) -> Result<()> {
    for e in events {
        writeln!(w, "{}", e.to_json_line())?;
    }
    Ok(())
}

/// Parses a JSON Lines trace; blank lines are skipped.
pub fn read_jsonl<R: std::io::BufRead>(r: R) -> Result<Vec<TraceEvent>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(TraceEvent::from_json_line(&line)?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct Region {
    gen: u32,
    cells: Vec<Cell>,
}

/// In-memory server. Holds only ciphertexts; every cell access bumps the
/// access counter and, when recording, appends a [`TraceEvent`].
#[derive(Clone, Debug, Default)]
pub struct Server {
    regions: BTreeMap<RegionKind, Region>,
    next_gen: BTreeMap<RegionKind, u32>,
    meta: Option<Cell>,
    trace: Vec<TraceEvent>,
    seq: u64,
    accesses: u64,
    recording: bool,
}

impl Server {
    /// A server that records its trace.
    pub fn new() -> Self {
        Self { recording: true, ..Default::default() }
    }

    /// Functional mode: accesses are counted but not recorded.
    pub fn without_trace() -> Self {
        Self { recording: false, ..Default::default() }
    }

    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Uploads a fresh instance of `kind`, replacing any previous one. Every
    /// uploaded cell counts as a write.
    pub fn allocate(&mut self, kind: RegionKind, cells: Vec<Cell>) -> Result<RegionId> {
        if cells.is_empty() {
            return Err(usage(format!("region {kind} must have at least one cell")));
        }
        if kind == RegionKind::Root && cells.len() != 1 {
            return Err(usage("ROOT region has exactly one cell"));
        }
        let gen = {
            let g = self.next_gen.entry(kind).or_insert(0);
            let cur = *g;
            *g += 1;
            cur
        };
        let id = RegionId { kind, gen };
        for off in 0..cells.len() {
            self.record(id, off as u64, AccessOp::Write);
        }
        self.regions.insert(kind, Region { gen, cells });
        Ok(id)
    }

    /// Drops a region instance.
    pub fn release(&mut self, id: RegionId) -> Result<()> {
        self.region(id)?;
        self.regions.remove(&id.kind);
        Ok(())
    }

    /// The live instance of `kind`, if any.
    pub fn current(&self, kind: RegionKind) -> Option<RegionId> {
        self.regions.get(&kind).map(|r| RegionId { kind, gen: r.gen })
    }

    pub fn cell_count(&self, id: RegionId) -> Result<usize> {
        Ok(self.region(id)?.cells.len())
    }

    pub fn read_cell(&mut self, id: RegionId, offset: usize) -> Result<Cell> {
        let cell = self.cell(id, offset)?.clone();
        self.record(id, offset as u64, AccessOp::Read);
        Ok(cell)
    }

    pub fn write_cell(&mut self, id: RegionId, offset: usize, cell: Cell) -> Result<()> {
        let region = self.region_mut(id)?;
        let slot = region
            .cells
            .get_mut(offset)
            .ok_or_else(|| usage(format!("offset {offset} out of range for {}", id.kind)))?;
        *slot = cell;
        self.record(id, offset as u64, AccessOp::Write);
        Ok(())
    }

    /// Reads a cell without recording it. For test oracles and fault
    /// injection only; the protocol never calls this.
    pub fn peek_cell(&self, id: RegionId, offset: usize) -> Result<&Cell> {
        self.cell(id, offset)
    }

    /// Overwrites a cell without recording it. Test hook.
    pub fn poke_cell(&mut self, id: RegionId, offset: usize, cell: Cell) -> Result<()> {
        let region = self.region_mut(id)?;
        let len = region.cells.len();
        *region
            .cells
            .get_mut(offset)
            .ok_or_else(|| usage(format!("offset {offset} >= {len}")))? = cell;
        Ok(())
    }

    pub fn meta(&self) -> Option<&Cell> {
        self.meta.as_ref()
    }

    /// The encrypted client header (counters and seeds) is rewritten once
    /// per episode; it is not part of the cell trace.
    pub fn set_meta(&mut self, cell: Cell) {
        self.meta = Some(cell);
    }

    /// Returns and clears the recorded events.
    pub fn drain_trace(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.trace)
    }

    pub fn trace_len(&self) -> usize {
        self.trace.len()
    }

    /// Total cell reads and writes since creation.
    pub fn access_count(&self) -> u64 {
        self.accesses
    }

    /// Total cells currently stored.
    pub fn total_cells(&self) -> usize {
        self.regions.values().map(|r| r.cells.len()).sum()
    }

    pub fn regions(&self) -> impl Iterator<Item = RegionId> + '_ {
        self.regions.iter().map(|(k, r)| RegionId { kind: *k, gen: r.gen })
    }

    fn record(&mut self, region: RegionId, offset: u64, op: AccessOp) {
        self.accesses += 1;
        if self.recording {
            self.trace.push(TraceEvent { seq: self.seq, region, offset, op });
        }
        self.seq += 1;
    }

    fn region(&self, id: RegionId) -> Result<&Region> {
        match self.regions.get(&id.kind) {
            Some(r) if r.gen == id.gen => Ok(r),
            Some(r) => Err(usage(format!("{} generation {} is stale (current {})", id.kind, id.gen, r.gen))),
            None => Err(usage(format!("no region {}", id.kind))),
        }
    }

    fn region_mut(&mut self, id: RegionId) -> Result<&mut Region> {
        match self.regions.get_mut(&id.kind) {
            Some(r) if r.gen == id.gen => Ok(r),
            Some(_) => Err(usage(format!("{} generation {} is stale", id.kind, id.gen))),
            None => Err(usage(format!("no region {}", id.kind))),
        }
    }

    fn cell(&self, id: RegionId, offset: usize) -> Result<&Cell> {
        let region = self.region(id)?;
        region.cells.get(offset).ok_or_else(|| {
            usage(format!("offset {offset} out of range for {} ({} cells)", id.kind, region.cells.len()))
        })
    }
}

const SNAPSHOT_MAGIC: &[u8; 6] = b"SSORAM";
const SNAPSHOT_VERSION: u16 = 1;

fn write_cell<W: Write>(w: &mut W, cell: &Cell) -> Result<()> {
    w.write_all(&cell.nonce)?;
    w.write_all(&(cell.ciphertext.len() as u32).to_le_bytes())?;
    w.write_all(&cell.ciphertext)?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_cell<R: Read>(r: &mut R) -> Result<Cell> {
    let nonce = read_exact::<_, NONCE_LEN>(r)?;
    let len = u32::from_le_bytes(read_exact(r)?) as usize;
    if len > 1 << 20 {
        return Err(Error::Format(format!("cell length {len} too large")));
    }
    let mut ciphertext = vec![0u8; len];
    r.read_exact(&mut ciphertext)?;
    Ok(Cell { ciphertext, nonce })
}

impl Server {
    /// Serializes all regions, generation counters and the client header.
    /// Layout (little-endian): magic, version, header cell flag + cell,
    /// generation table, then each region's kind code, level, side, gen,
    /// cell count and cells.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        match &self.meta {
            Some(c) => {
                w.write_all(&[1])?;
                write_cell(&mut w, c)?;
            }
            None => w.write_all(&[0])?,
        }
        w.write_all(&(self.next_gen.len() as u32).to_le_bytes())?;
        for (kind, next) in &self.next_gen {
            let (code, level, side) = kind.code();
            w.write_all(&[code, side])?;
            w.write_all(&level.to_le_bytes())?;
            w.write_all(&next.to_le_bytes())?;
        }
        w.write_all(&(self.regions.len() as u32).to_le_bytes())?;
        for (kind, region) in &self.regions {
            let (code, level, side) = kind.code();
            w.write_all(&[code, side])?;
            w.write_all(&level.to_le_bytes())?;
            w.write_all(&region.gen.to_le_bytes())?;
            w.write_all(&(region.cells.len() as u64).to_le_bytes())?;
            for cell in &region.cells {
                write_cell(&mut w, cell)?;
            }
        }
        Ok(())
    }

    /// Restores a server written by [`Server::write_snapshot`]. The trace
    /// starts empty; recording is on.
    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let magic = read_exact::<_, 6>(&mut r)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Format("not a snapshot file".into()));
        }
        let version = u16::from_le_bytes(read_exact(&mut r)?);
        if version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!("unsupported snapshot version {version}")));
        }
        let mut server = Server::new();
        if read_exact::<_, 1>(&mut r)?[0] == 1 {
            server.meta = Some(read_cell(&mut r)?);
        }
        let gens = u32::from_le_bytes(read_exact(&mut r)?);
        for _ in 0..gens {
            let [code, side] = read_exact::<_, 2>(&mut r)?;
            let level = u16::from_le_bytes(read_exact(&mut r)?);
            let next = u32::from_le_bytes(read_exact(&mut r)?);
            server.next_gen.insert(RegionKind::from_code(code, level, side)?, next);
        }
        let count = u32::from_le_bytes(read_exact(&mut r)?);
        for _ in 0..count {
            let [code, side] = read_exact::<_, 2>(&mut r)?;
            let level = u16::from_le_bytes(read_exact(&mut r)?);
            let gen = u32::from_le_bytes(read_exact(&mut r)?);
            let n = u64::from_le_bytes(read_exact(&mut r)?) as usize;
            let cells = (0..n).map(|_| read_cell(&mut r)).collect::<Result<Vec<_>>>()?;
            server.regions.insert(RegionKind::from_code(code, level, side)?, Region { gen, cells });
        }
        Ok(server)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(b: u8) -> Cell {
        Cell { ciphertext: vec![b; 4], nonce: [b; NONCE_LEN] }
    }

    #[test]
    fn fresh_server_has_empty_trace() {
        let mut s = Server::new();
        assert!(s.drain_trace().is_empty());
    }

    #[test]
    fn reads_are_repeatable_and_traced() {
        let mut s = Server::new();
        let q = s.allocate(RegionKind::Cache, vec![cell(1), cell(2)]).unwrap();
        s.drain_trace();
        let a = s.read_cell(q, 0).unwrap();
        let b = s.read_cell(q, 0).unwrap();
        assert_eq!(a, b);
        let t = s.drain_trace();
        assert_eq!(t.len(), 2);
        assert!(t.iter().all(|e| e.op == AccessOp::Read && e.offset == 0));
    }

    #[test]
    fn out_of_range_is_usage_error() {
        let mut s = Server::new();
        let t = s.allocate(RegionKind::table(3, 1), vec![cell(0); 5]).unwrap();
        assert!(matches!(s.read_cell(t, 5), Err(Error::Usage(_))));
        assert!(matches!(s.write_cell(t, 9, cell(1)), Err(Error::Usage(_))));
    }

    #[test]
    fn write_then_read_and_one_event_per_write() {
        let mut s = Server::new();
        let q = s.allocate(RegionKind::Cache, vec![cell(0); 3]).unwrap();
        s.drain_trace();
        s.write_cell(q, 2, cell(9)).unwrap();
        assert_eq!(s.trace_len(), 1);
        assert_eq!(s.read_cell(q, 2).unwrap(), cell(9));
    }

    #[test]
    fn seq_strictly_increases_across_drains() {
        let mut s = Server::new();
        let q = s.allocate(RegionKind::Cache, vec![cell(0); 2]).unwrap();
        let mut all = s.drain_trace();
        s.read_cell(q, 1).unwrap();
        all.extend(s.drain_trace());
        s.write_cell(q, 0, cell(3)).unwrap();
        all.extend(s.drain_trace());
        assert_eq!(all.len(), 4);
        assert!(all.windows(2).all(|w| w[0].seq < w[1].seq));
    }

    #[test]
    fn reallocation_bumps_generation_and_stale_ids_fail() {
        let mut s = Server::new();
        let a = s.allocate(RegionKind::table(1, 0), vec![cell(0); 2]).unwrap();
        let b = s.allocate(RegionKind::table(1, 0), vec![cell(0); 2]).unwrap();
        assert_eq!(b.gen, a.gen + 1);
        assert!(s.read_cell(a, 0).is_err());
        assert!(s.read_cell(b, 0).is_ok());
    }

    #[test]
    fn functional_mode_counts_without_recording() {
        let mut s = Server::without_trace();
        let q = s.allocate(RegionKind::Cache, vec![cell(0); 2]).unwrap();
        s.read_cell(q, 0).unwrap();
        assert_eq!(s.access_count(), 3);
        assert!(s.drain_trace().is_empty());
    }

    #[test]
    fn jsonl_format() {
        let e = TraceEvent {
            seq: 7,
            region: RegionId { kind: RegionKind::table(3, 1), gen: 2 },
            offset: 11,
            op: AccessOp::Read,
        };
        assert_eq!(e.to_json_line(), r#"{"seq":7,"region":"T3.1","gen":2,"off":11,"op":"R"}"#);
        assert_eq!(TraceEvent::from_json_line(&e.to_json_line()).unwrap(), e);
        for name in ["Q", "S", "ROOT", "T12.0", "B4"] {
            assert_eq!(name.parse::<RegionKind>().unwrap().to_string(), name);
        }
        assert!("X1".parse::<RegionKind>().is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut s = Server::new();
        s.allocate(RegionKind::Cache, vec![cell(1), cell(2)]).unwrap();
        s.allocate(RegionKind::table(2, 1), vec![cell(3); 4]).unwrap();
        s.allocate(RegionKind::table(2, 1), vec![cell(4); 4]).unwrap();
        s.set_meta(cell(5));
        let mut bytes = Vec::new();
        s.write_snapshot(&mut bytes).unwrap();
        let r = Server::read_snapshot(bytes.as_slice()).unwrap();
        assert_eq!(r.meta(), s.meta());
        let ids: Vec<_> = r.regions().collect();
        assert_eq!(ids, s.regions().collect::<Vec<_>>());
        for id in ids {
            for off in 0..s.cell_count(id).unwrap() {
                assert_eq!(r.peek_cell(id, off).unwrap(), s.peek_cell(id, off).unwrap());
            }
        }
        assert!(Server::read_snapshot(&b"garbage!"[..]).is_err());
    }
}
