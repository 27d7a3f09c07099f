//! Two-sided cuckoo tables with bounded eviction walks and a stash.
//!
//! Items are [`Record`]s keyed by `key`. A table addresses items either
//! through two keyed hash functions or through the location pair carried in
//! the record itself. In both cases the pair is cached in `Record::loc`
//! while the item sits in the table, so eviction walks never rehash.

use rand::Rng;

use crate::crypto::location_unchecked;
use crate::error::{usage, Error, Result};
use crate::record::Record;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Addressing {
    /// `(h_1, h_2)` from the two seeds.
    Prf([u64; 2]),
    /// The pair stored in each record.
    Stored,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InsertOutcome {
    Placed,
    Stashed,
    StashOverflow,
}

/// Spilled items. Holds at most one live entry per key.
#[derive(Clone, Debug, Default)]
pub struct Stash {
    capacity: usize,
    entries: Vec<Record>,
}

impl Stash {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, entries: Vec::new() }
    }

    pub fn unbounded() -> Self {
        Self::new(usize::MAX)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Record] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<Record> {
        self.entries
    }

    pub fn get(&self, key: u64) -> Option<&Record> {
        self.entries.iter().find(|r| r.key == key)
    }

    /// Adds `item` unless an entry for its key exists, in which case the
    /// fresher of the two is kept. Entries past capacity are retained so
    /// nothing is lost; the outcome reports the overflow.
    pub fn push(&mut self, item: Record) -> InsertOutcome {
        if let Some(e) = self.entries.iter_mut().find(|r| r.key == item.key) {
            if item.epoch > e.epoch {
                *e = item;
            }
            return InsertOutcome::Stashed;
        }
        self.entries.push(item);
        if self.entries.len() > self.capacity {
            InsertOutcome::StashOverflow
        } else {
            InsertOutcome::Stashed
        }
    }

    pub fn remove(&mut self, key: u64) -> Option<Record> {
        let i = self.entries.iter().position(|r| r.key == key)?;
        Some(self.entries.swap_remove(i))
    }
}

/// Result of [`CuckooTable::lookup`]: both probed offsets are always
/// reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lookup {
    pub found: Option<Record>,
    pub probed: [usize; 2],
}

#[derive(Clone, Debug)]
pub struct CuckooTable {
    level: usize,
    capacity: usize,
    addressing: Addressing,
    sides: [Vec<Record>; 2],
    occupancy: usize,
}

/// Output of [`CuckooTable::build`].
#[derive(Clone, Debug)]
pub struct Built {
    pub table: CuckooTable,
    pub spilled: Vec<Record>,
}

impl CuckooTable {
    pub fn new(level: usize, cells: usize, capacity: usize, addressing: Addressing) -> Result<Self> {
        if cells == 0 {
            return Err(usage("cuckoo table needs at least one cell per side"));
        }
        if cells > u32::MAX as usize {
            return Err(usage("cuckoo side too large"));
        }
        Ok(Self {
            level,
            capacity,
            addressing,
            sides: [vec![Record::EMPTY; cells], vec![Record::EMPTY; cells]],
            occupancy: 0,
        })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn cells(&self) -> usize {
        self.sides[0].len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn occupancy(&self) -> usize {
        self.occupancy
    }

    pub fn addressing(&self) -> Addressing {
        self.addressing
    }

    pub fn side(&self, side: usize) -> &[Record] {
        &self.sides[side]
    }

    pub fn into_sides(self) -> [Vec<Record>; 2] {
        self.sides
    }

    /// The two designated offsets of `x`. Stored addressing needs `loc`.
    pub fn probe_locations(&self, x: u64, loc: Option<[u32; 2]>) -> Result<[usize; 2]> {
        let m = self.cells() as u64;
        match self.addressing {
            Addressing::Prf([s0, s1]) => {
                Ok([location_unchecked(s0, x, m) as usize, location_unchecked(s1, x, m) as usize])
            }
            Addressing::Stored => {
                let [i1, i2] = loc.ok_or_else(|| usage("stored-location table needs a location pair"))?;
                if i1 as u64 >= m || i2 as u64 >= m {
                    return Err(usage(format!("location pair ({i1}, {i2}) outside {m} cells")));
                }
                Ok([i1 as usize, i2 as usize])
            }
        }
    }

    fn with_locations(&self, mut item: Record) -> Result<Record> {
        let loc = match self.addressing {
            Addressing::Prf(_) => None,
            Addressing::Stored => Some(item.loc),
        };
        let [a, b] = self.probe_locations(item.key, loc)?;
        item.loc = [a as u32, b as u32];
        Ok(item)
    }

    /// Reads both designated cells of `x`.
    pub fn lookup(&self, x: u64, loc: Option<[u32; 2]>) -> Result<Lookup> {
        let probed = self.probe_locations(x, loc)?;
        let found = (0..2)
            .map(|s| self.sides[s][probed[s]])
            .find(|r| r.live && r.key == x);
        Ok(Lookup { found, probed })
    }

    /// Inserts a live item, evicting along the alternating walk and spilling
    /// the homeless item to `stash` after `move_limit` evictions.
    pub fn insert(&mut self, item: Record, stash: &mut Stash, move_limit: usize) -> Result<InsertOutcome> {
        if !item.live {
            return Err(usage("only live items can be inserted"));
        }
        if self.occupancy >= self.capacity {
            return Err(usage(format!("table at level {} is full ({} items)", self.level, self.capacity)));
        }
        let item = self.with_locations(item)?;
        let [a, b] = item.loc;
        let dup = |r: &Record| r.live && r.key == item.key;
        if dup(&self.sides[0][a as usize]) || dup(&self.sides[1][b as usize]) {
            return Err(usage(format!("key {} already present", item.key)));
        }
        Ok(self.place(item, stash, move_limit))
    }

    fn place(&mut self, item: Record, stash: &mut Stash, move_limit: usize) -> InsertOutcome {
        let [a, b] = [item.loc[0] as usize, item.loc[1] as usize];
        if self.sides[0][a].is_empty() {
            self.sides[0][a] = item;
        } else if self.sides[1][b].is_empty() {
            self.sides[1][b] = item;
        } else {
            let mut cur = item;
            let mut side = 0;
            let mut moves = 0;
            loop {
                if moves == move_limit {
                    return stash.push(cur);
                }
                let pos = cur.loc[side] as usize;
                std::mem::swap(&mut cur, &mut self.sides[side][pos]);
                moves += 1;
                if cur.is_empty() {
                    break;
                }
                side ^= 1;
            }
        }
        self.occupancy += 1;
        InsertOutcome::Placed
    }

    /// Builds a table from deduplicated live items, inserting them in
    /// ascending key order.
    ///
    /// With `stash_room = Some(k)` a spill of more than `k` items is a
    /// [`Error::BuildFailure`]; with `None` any spill is returned.
    pub fn build(
        items: &[Record],
        level: usize,
        cells: usize,
        capacity: usize,
        addressing: Addressing,
        stash_room: Option<usize>,
        move_limit: usize,
    ) -> Result<Built> {
        if items.len() > capacity {
            return Err(usage(format!("{} items exceed capacity {capacity} of level {level}", items.len())));
        }
        let mut table = Self::new(level, cells, capacity, addressing)?;
        let mut order: Vec<&Record> = items.iter().collect();
        order.sort_by_key(|r| r.key);
        if order.windows(2).any(|w| w[0].key == w[1].key) {
            return Err(usage("build input contains duplicate keys"));
        }
        let mut stash = Stash::unbounded();
        for r in order {
            if !r.live {
                return Err(usage("build input contains an empty marker"));
            }
            let item = table.with_locations(*r)?;
            table.place(item, &mut stash, move_limit);
        }
        let spilled = stash.into_entries();
        if let Some(room) = stash_room {
            if spilled.len() > room {
                return Err(Error::BuildFailure { level, spilled: spilled.len(), room });
            }
        }
        Ok(Built { table, spilled })
    }
}

/// Draws two independent uniform offsets in `[0, cells)`.
pub fn random_pair<R: Rng + ?Sized>(cells: usize, rng: &mut R) -> [u32; 2] {
    [rng.gen_range(0..cells) as u32, rng.gen_range(0..cells) as u32]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn stored(key: u64, a: u32, b: u32) -> Record {
        Record::item(key, key * 10, 1).with_loc(a, b)
    }

    #[test]
    fn first_insert_lands_on_side_zero() {
        let mut t = CuckooTable::new(1, 8, 8, Addressing::Prf([1, 2])).unwrap();
        let mut s = Stash::new(2);
        assert_eq!(t.insert(Record::item(5, 50, 1), &mut s, 4).unwrap(), InsertOutcome::Placed);
        let [a, _] = t.probe_locations(5, None).unwrap();
        assert_eq!(t.side(0)[a].key, 5);
        let hit = t.lookup(5, None).unwrap();
        assert_eq!(hit.found.unwrap().value, 50);
        let miss = t.lookup(6, None).unwrap();
        assert!(miss.found.is_none());
        assert_eq!(miss.probed.len(), 2);
    }

    #[test]
    fn pigeonhole_on_single_cell_sides() {
        let mut t = CuckooTable::new(1, 1, 3, Addressing::Stored).unwrap();
        let mut s = Stash::new(4);
        assert_eq!(t.insert(stored(1, 0, 0), &mut s, 6).unwrap(), InsertOutcome::Placed);
        assert_eq!(t.insert(stored(2, 0, 0), &mut s, 6).unwrap(), InsertOutcome::Placed);
        assert_eq!(t.insert(stored(3, 0, 0), &mut s, 6).unwrap(), InsertOutcome::Stashed);
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn identical_pairs_fill_both_sides() {
        let items = [stored(1, 0, 0), stored(2, 0, 0)];
        let b = CuckooTable::build(&items, 1, 1, 2, Addressing::Stored, Some(0), 4).unwrap();
        assert!(b.spilled.is_empty());
        assert_eq!(b.table.occupancy(), 2);
    }

    #[test]
    fn seven_keys_on_six_cells_spill_one() {
        // Three cells per side; the seven pairs cover only those six cells.
        let pairs = [(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 0), (0, 2)];
        let mut t = CuckooTable::new(1, 3, 7, Addressing::Stored).unwrap();
        let mut s = Stash::new(1);
        let outcomes: Vec<_> = pairs
            .iter()
            .enumerate()
            .map(|(k, &(a, b))| t.insert(stored(k as u64, a, b), &mut s, 20).unwrap())
            .collect();
        assert!(outcomes[..6].iter().all(|o| *o == InsertOutcome::Placed));
        assert_eq!(outcomes[6], InsertOutcome::Stashed);
        assert_eq!(t.occupancy(), 6);
    }

    #[test]
    fn stash_overflow_reported() {
        let mut t = CuckooTable::new(1, 1, 4, Addressing::Stored).unwrap();
        let mut s = Stash::new(1);
        for k in 0..3 {
            t.insert(stored(k, 0, 0), &mut s, 2).unwrap();
        }
        assert_eq!(t.insert(stored(9, 0, 0), &mut s, 2).unwrap(), InsertOutcome::StashOverflow);
    }

    #[test]
    fn duplicate_and_capacity_errors() {
        let mut t = CuckooTable::new(1, 4, 1, Addressing::Prf([3, 4])).unwrap();
        let mut s = Stash::new(1);
        t.insert(Record::item(1, 0, 0), &mut s, 4).unwrap();
        assert!(matches!(t.insert(Record::item(2, 0, 0), &mut s, 4), Err(Error::Usage(_))));
        let mut t = CuckooTable::new(1, 4, 4, Addressing::Prf([3, 4])).unwrap();
        t.insert(Record::item(1, 0, 0), &mut s, 4).unwrap();
        assert!(matches!(t.insert(Record::item(1, 5, 1), &mut s, 4), Err(Error::Usage(_))));
        assert!(t.probe_locations(1, None).is_ok());
        let st = CuckooTable::new(1, 4, 4, Addressing::Stored).unwrap();
        assert!(st.probe_locations(1, None).is_err());
        assert_eq!(st.probe_locations(1, Some([3, 2])).unwrap(), [3, 2]);
    }

    #[test]
    fn build_empty_and_failure() {
        let b = CuckooTable::build(&[], 2, 8, 8, Addressing::Prf([1, 1]), Some(0), 4).unwrap();
        assert!(b.spilled.is_empty());
        assert_eq!(b.table.occupancy(), 0);
        let items: Vec<_> = (0..3).map(|k| stored(k, 0, 0)).collect();
        let err = CuckooTable::build(&items, 2, 1, 3, Addressing::Stored, Some(0), 4).unwrap_err();
        assert!(matches!(err, Error::BuildFailure { spilled: 1, room: 0, .. }));
        let too_many: Vec<_> = (0..5).map(|k| Record::item(k, 0, 0)).collect();
        assert!(CuckooTable::build(&too_many, 1, 8, 4, Addressing::Prf([1, 2]), None, 4).is_err());
    }

    #[test]
    fn every_item_is_findable_after_build() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let items: Vec<_> = (0..900u64).map(|k| Record::item(k * 7 + 1, k, 0)).collect();
        let b = CuckooTable::build(&items, 6, 1000, 1000, Addressing::Prf([rng.gen(), rng.gen()]), None, 20)
            .unwrap();
        for it in &items {
            let hit = b.table.lookup(it.key, None).unwrap().found;
            let spilled = b.spilled.iter().any(|r| r.key == it.key);
            assert!(hit.is_some() != spilled, "key {} found {:?} spilled {}", it.key, hit, spilled);
        }
        assert_eq!(b.table.occupancy() + b.spilled.len(), items.len());
    }

    #[test]
    fn stash_keeps_freshest_copy() {
        let mut s = Stash::new(2);
        s.push(Record::item(4, 1, 3));
        s.push(Record::item(4, 2, 7));
        s.push(Record::item(4, 3, 5));
        assert_eq!(s.len(), 1);
        assert_eq!(s.get(4).unwrap().value, 2);
        assert_eq!(s.remove(4).unwrap().epoch, 7);
        assert!(s.is_empty());
    }
}
