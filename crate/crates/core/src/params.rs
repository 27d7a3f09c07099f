//! Configuration and derived geometry for both ORAM variants.

use serde::{Deserialize, Serialize};

use crate::crypto::CipherKind;
use crate::error::{usage, Result};

/// Whether the oblivious bookkeeping is performed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Only the data movement: no dummy probes, no full rewrites, no trace.
    Functional,
    Oblivious,
}

/// How the access phase probes tables below the level where `x` was found.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ProbePolicy {
    /// Two fresh uniform offsets per remaining table.
    #[default]
    Honest,
    /// Keeps probing the hash locations of `x`. Deliberately leaky; used
    /// only as a negative control for the statistical tests.
    RealAfterHit,
}

/// Size of the client's private scratch memory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkspaceSize {
    /// `ceil(n^nu)` cells.
    Exponent(f64),
    /// Large enough to hold the biggest rebuild buffer in memory.
    Covering,
    Unbounded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OramParams {
    pub n: u64,
    pub epsilon: f64,
    pub c: f64,
    pub stash_factor: f64,
    pub workspace: WorkspaceSize,
    pub mode: Mode,
    pub master_seed: u64,
    pub cipher: CipherKind,
    pub probe_policy: ProbePolicy,
}

impl OramParams {
    pub fn new(n: u64) -> Self {
        Self {
            n,
            epsilon: 0.2,
            c: 2.0,
            stash_factor: 1.0,
            workspace: WorkspaceSize::Exponent(0.5),
            mode: Mode::Oblivious,
            master_seed: 0,
            cipher: CipherKind::Aead,
            probe_policy: ProbePolicy::Honest,
        }
    }

    pub fn functional(n: u64) -> Self {
        Self { mode: Mode::Functional, workspace: WorkspaceSize::Unbounded, ..Self::new(n) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(usage(format!("n must be at least 2, got {}", self.n)));
        }
        if self.n > 1 << 40 {
            return Err(usage(format!("n = {} is beyond the simulator's range", self.n)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(usage(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(usage(format!("c must be positive, got {}", self.c)));
        }
        if !(self.stash_factor >= 1.0 && self.stash_factor.is_finite()) {
            return Err(usage(format!("stash factor must be at least 1, got {}", self.stash_factor)));
        }
        if let WorkspaceSize::Exponent(nu) = self.workspace {
            if !(nu > 0.0 && nu <= 1.0) {
                return Err(usage(format!("nu must lie in (0, 1], got {nu}")));
            }
        }
        Ok(())
    }
}

/// `ceil(log2 n)` for `n >= 2`.
pub fn ceil_log2(n: u64) -> usize {
    debug_assert!(n >= 2);
    (64 - (n - 1).leading_zeros()) as usize
}

fn ceil_scaled(factor: f64, base: usize) -> usize {
    // Guards against products like 1.2 * 20 = 24.000000000000004.
    ((factor * base as f64) - 1e-9).ceil().max(1.0) as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Prf,
    Tree,
}

/// Sizes derived from [`OramParams`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub variant: Variant,
    pub n: u64,
    /// `ceil(log2 n)`.
    pub log_n: usize,
    pub q_cells: usize,
    /// Accesses between two `Q -> T_1` flushes.
    pub period: u64,
    pub levels: usize,
    /// Cells per side, indexed by level (index 0 unused).
    pub cells: Vec<usize>,
    /// Item capacity, indexed by level (index 0 unused).
    pub capacity: Vec<usize>,
    pub stash_cells: usize,
    pub move_limit: usize,
    /// Number of distinct keys stored in the tables.
    pub keys: u64,
}

impl Geometry {
    pub fn prf(p: &OramParams) -> Result<Self> {
        p.validate()?;
        let log_n = ceil_log2(p.n);
        Ok(Self::build(Variant::Prf, p, log_n, log_n, log_n as u64, p.n))
    }

    /// Tree geometry over `n` padded to a power of two. Keys are the
    /// `2 n_pad - 2` non-root node ids and the cache holds one path.
    pub fn tree(p: &OramParams) -> Result<Self> {
        p.validate()?;
        let n_pad = p.n.next_power_of_two();
        let h = n_pad.trailing_zeros() as usize;
        Ok(Self::build(Variant::Tree, p, h, h, 1, 2 * n_pad - 2))
    }

    fn build(variant: Variant, p: &OramParams, log_n: usize, q: usize, period: u64, keys: u64) -> Self {
        let mut levels = 1;
        while ((1u64 << levels) * q as u64) < keys {
            levels += 1;
        }
        let mut cells = vec![0];
        let mut capacity = vec![0];
        for i in 1..=levels {
            let cap = (1usize << i) * q;
            capacity.push(cap);
            cells.push(ceil_scaled(1.0 + p.epsilon, cap));
        }
        Self {
            variant,
            n: p.n,
            log_n,
            q_cells: q,
            period,
            levels,
            cells,
            capacity,
            stash_cells: ceil_scaled(p.stash_factor, log_n),
            move_limit: ceil_scaled(p.c, log_n),
            keys,
        }
    }

    /// Cells of the largest rebuild or fix-up buffer.
    pub fn max_buffer_cells(&self) -> usize {
        let tables: usize = self.cells.iter().map(|m| 2 * m).sum();
        match self.variant {
            Variant::Prf => {
                let l = self.levels;
                let src = if l == 1 { self.q_cells } else { 2 * self.cells[l - 1] };
                src + 2 * self.cells[l] + self.stash_cells
            }
            Variant::Tree => 2 * (1 + self.stash_cells + tables),
        }
    }

    pub fn workspace_cells(&self, size: WorkspaceSize) -> usize {
        match size {
            // The stash plus one compare-exchange must always fit.
            WorkspaceSize::Exponent(nu) => {
                (((self.n as f64).powf(nu) - 1e-9).ceil() as usize).max(self.stash_cells + 2)
            }
            WorkspaceSize::Covering => self.max_buffer_cells() + self.stash_cells,
            WorkspaceSize::Unbounded => usize::MAX,
        }
    }

    /// Total server cells at rest (tables, cache, stash and root).
    pub fn server_cells(&self) -> usize {
        let tables: usize = self.cells.iter().map(|m| 2 * m).sum();
        let root = usize::from(self.variant == Variant::Tree);
        tables + self.q_cells + self.stash_cells + root
    }
}

/// Where a flush takes its items from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Cache,
    Level(usize),
}

impl Source {
    pub fn level(self) -> usize {
        match self {
            Source::Cache => 0,
            Source::Level(i) => i,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Flush {
    pub source: Source,
    pub dest: usize,
}

/// Moves due after the `t`-th access, deepest first.
///
/// `T_i -> T_{i+1}` runs when `t` is a multiple of `2^i * period`, and
/// `Q -> T_1` when `t` is a multiple of `period`. A level is emptied before
/// it receives the next batch from above. An alternative rule that moves a
/// level only once it has been filled twice is not implemented.
pub fn flushes_due(t: u64, g: &Geometry) -> Vec<Flush> {
    let mut out = Vec::new();
    if t == 0 {
        return out;
    }
    for i in (1..g.levels).rev() {
        if t % ((1u64 << i) * g.period) == 0 {
            out.push(Flush { source: Source::Level(i), dest: i + 1 });
        }
    }
    if t % g.period == 0 {
        out.push(Flush { source: Source::Cache, dest: 1 });
    }
    out
}
