//! Fixed-size plaintext records stored in every server cell.
//!
//! Items, stash entries, tree nodes and scratch entries all share one layout
//! so that every ciphertext on the server has the same length.

use crate::error::{Error, Result};

/// Serialized length of every record.
pub const RECORD_LEN: usize = 60;

const FLAG_LIVE: u8 = 1;
const FLAG_REPORT: u8 = 2;
const NO_POINTER: i8 = i8::MIN;

/// Where a tree node currently lives: `level` is 1..=L for a cuckoo table,
/// 0 for the cache and -1 for the stash.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pointer {
    pub level: i8,
    pub i1: u32,
    pub i2: u32,
}

impl Pointer {
    pub const STASH: i8 = -1;
    pub const CACHE: i8 = 0;

    pub fn table(level: usize, i1: u32, i2: u32) -> Self {
        Self { level: level as i8, i1, i2 }
    }

    pub fn cache(slot: u32) -> Self {
        Self { level: Self::CACHE, i1: slot, i2: slot }
    }

    pub fn stash() -> Self {
        Self { level: Self::STASH, i1: 0, i2: 0 }
    }
}

/// One plaintext cell.
///
/// `home` tags stash entries with the level whose build spilled them.
/// `aux` is scratch bookkeeping used by the pointer fix-up pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Record {
    pub live: bool,
    pub report: bool,
    pub home: u8,
    pub key: u64,
    pub value: u64,
    pub epoch: u64,
    pub loc: [u32; 2],
    pub aux: u64,
    pub children: [Option<Pointer>; 2],
}

impl Record {
    /// The empty marker: a valid record that holds nothing.
    pub const EMPTY: Record = Record {
        live: false,
        report: false,
        home: 0,
        key: 0,
        value: 0,
        epoch: 0,
        loc: [0, 0],
        aux: 0,
        children: [None, None],
    };

    pub fn item(key: u64, value: u64, epoch: u64) -> Self {
        Self { live: true, key, value, epoch, ..Self::EMPTY }
    }

    pub fn is_empty(&self) -> bool {
        !self.live
    }

    pub fn with_loc(mut self, i1: u32, i2: u32) -> Self {
        self.loc = [i1, i2];
        self
    }

    pub fn encode(&self) -> [u8; RECORD_LEN] {
        let mut out = [0u8; RECORD_LEN];
        let mut flags = 0;
        if self.live {
            flags |= FLAG_LIVE;
        }
        if self.report {
            flags |= FLAG_REPORT;
        }
        out[0] = flags;
        out[1] = self.home;
        out[2..10].copy_from_slice(&self.key.to_be_bytes());
        out[10..18].copy_from_slice(&self.value.to_be_bytes());
        out[18..26].copy_from_slice(&self.epoch.to_be_bytes());
        out[26..30].copy_from_slice(&self.loc[0].to_be_bytes());
        out[30..34].copy_from_slice(&self.loc[1].to_be_bytes());
        out[34..42].copy_from_slice(&self.aux.to_be_bytes());
        for (k, child) in self.children.iter().enumerate() {
            let base = 42 + 9 * k;
            let p = child.unwrap_or(Pointer { level: NO_POINTER, i1: 0, i2: 0 });
            out[base] = p.level as u8;
            out[base + 1..base + 5].copy_from_slice(&p.i1.to_be_bytes());
            out[base + 5..base + 9].copy_from_slice(&p.i2.to_be_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != RECORD_LEN {
            return Err(Error::Integrity(format!(
                "record length {} != {RECORD_LEN}",
                bytes.len()
            )));
        }
        let u64_at = |i: usize| u64::from_be_bytes(bytes[i..i + 8].try_into().unwrap());
        let u32_at = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
        let flags = bytes[0];
        if flags & !(FLAG_LIVE | FLAG_REPORT) != 0 {
            return Err(Error::Integrity(format!("unknown record flags {flags:#x}")));
        }
        let mut children = [None, None];
        for (k, child) in children.iter_mut().enumerate() {
            let base = 42 + 9 * k;
            let level = bytes[base] as i8;
            if level != NO_POINTER {
                *child = Some(Pointer { level, i1: u32_at(base + 1), i2: u32_at(base + 5) });
            }
        }
        Ok(Self {
            live: flags & FLAG_LIVE != 0,
            report: flags & FLAG_REPORT != 0,
            home: bytes[1],
            key: u64_at(2),
            value: u64_at(10),
            epoch: u64_at(18),
            loc: [u32_at(26), u32_at(30)],
            aux: u64_at(34),
            children,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pointer() -> impl Strategy<Value = Option<Pointer>> {
        proptest::option::of((-1i8..64, any::<u32>(), any::<u32>()).prop_map(|(level, i1, i2)| {
            Pointer { level, i1, i2 }
        }))
    }

    prop_compose! {
        fn record()(live in any::<bool>(), report in any::<bool>(), home in any::<u8>(),
                    key in any::<u64>(), value in any::<u64>(), epoch in any::<u64>(),
                    loc in any::<[u32; 2]>(), aux in any::<u64>(),
                    c0 in pointer(), c1 in pointer()) -> Record {
            Record { live, report, home, key, value, epoch, loc, aux, children: [c0, c1] }
        }
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(r in record()) {
            let bytes = r.encode();
            prop_assert_eq!(bytes.len(), RECORD_LEN);
            prop_assert_eq!(Record::decode(&bytes).unwrap(), r);
        }
    }

    #[test]
    fn empty_and_live_records_have_equal_length() {
        assert_eq!(Record::EMPTY.encode().len(), Record::item(3, 4, 5).encode().len());
    }

    #[test]
    fn decode_rejects_bad_length() {
        assert!(Record::decode(&[0u8; 10]).is_err());
    }
}
