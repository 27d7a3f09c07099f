//! Request streams driving the experiments.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;

use crate::error::{usage, Error, Result};
use crate::hierarchy::Op;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Workload {
    /// Uniform random indices.
    Uniform,
    /// `0, 1, ..., n-1, 0, ...`
    Sequential,
    /// Index 0 every time.
    Repeat,
    /// Indices read from a file and replayed cyclically.
    File(PathBuf),
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Workload::Uniform => f.write_str("uniform"),
            Workload::Sequential => f.write_str("sequential"),
            Workload::Repeat => f.write_str("repeat"),
            Workload::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl FromStr for Workload {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Workload::Uniform),
            "sequential" => Ok(Workload::Sequential),
            "repeat" => Ok(Workload::Repeat),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(Workload::File(p.into())),
                _ => Err(usage(format!("unknown workload {s:?}; expected uniform, sequential, repeat or file:<path>"))),
            },
        }
    }
}

/// Parses whitespace-separated decimal indices; `#` starts a comment.
pub fn parse_index_list(text: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split_whitespace() {
            let x = tok
                .parse()
                .map_err(|_| usage(format!("line {}: {tok:?} is not an index", lineno + 1)))?;
            out.push(x);
        }
    }
    if out.is_empty() {
        return Err(usage("index list is empty"));
    }
    Ok(out)
}

pub fn read_index_file(path: &Path) -> Result<Vec<u64>> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    parse_index_list(&text)
}

/// A workload bound to a RAM size. Each request is a read or a write with
/// equal probability; written values are random.
#[derive(Clone, Debug)]
pub struct Requests {
    n: u64,
    kind: Kind,
    next: u64,
}

#[derive(Clone, Debug)]
enum Kind {
    Uniform,
    Sequential,
    Repeat,
    List(Vec<u64>),
}

impl Requests {
    pub fn new(workload: &Workload, n: u64) -> Result<Self> {
        let kind = match workload {
            Workload::Uniform => Kind::Uniform,
            Workload::Sequential => Kind::Sequential,
            Workload::Repeat => Kind::Repeat,
            Workload::File(p) => Kind::List(read_index_file(p)?),
        };
        Self::with_kind(kind, n)
    }

    pub fn from_indices(indices: Vec<u64>, n: u64) -> Result<Self> {
        Self::with_kind(Kind::List(indices), n)
    }

    fn with_kind(kind: Kind, n: u64) -> Result<Self> {
        if let Kind::List(list) = &kind {
            if let Some(x) = list.iter().find(|&&x| x >= n) {
                return Err(usage(format!("index {x} in workload is out of range for n = {n}")));
            }
        }
        Ok(Self { n, kind, next: 0 })
    }

    pub fn next_index<R: Rng + ?Sized>(&mut self, rng: &mut R) -> u64 {
        let i = self.next;
        self.next += 1;
        match &self.kind {
            Kind::Uniform => rng.gen_range(0..self.n),
            Kind::Sequential => i % self.n,
            Kind::Repeat => 0,
            Kind::List(l) => l[(i % l.len() as u64) as usize],
        }
    }

    pub fn next_request<R: Rng + ?Sized>(&mut self, rng: &mut R) -> (Op, u64) {
        let x = self.next_index(rng);
        let op = if rng.gen::<bool>() { Op::Write(rng.gen()) } else { Op::Read };
        (op, x)
    }
}
