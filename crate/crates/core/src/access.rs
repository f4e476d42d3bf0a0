//! Data-accessing strategies: which component indices `S_k` are touched
//! at iteration `k`.
//!
//! - [`AccessKind::Random`] (RA): `n` i.i.d. uniform indices, with
//!   replacement. Batches are multisets.
//! - [`AccessKind::Reshuffle`] (RR): a fresh permutation at the start of
//!   every data pass, consumed `n` entries at a time.
//! - [`AccessKind::Cyclic`] (CA): `n` consecutive indices modulo `N`.
//!
//! RR and CA require `n | N` so every pass splits into whole batches.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Random,
    Reshuffle,
    Cyclic,
}

impl AccessKind {
    pub const ALL: [AccessKind; 3] = [AccessKind::Random, AccessKind::Reshuffle, AccessKind::Cyclic];

    pub fn short_name(self) -> &'static str {
        match self {
            AccessKind::Random => "RA",
            AccessKind::Reshuffle => "RR",
            AccessKind::Cyclic => "CA",
        }
    }
}

impl fmt::Display for AccessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for AccessKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RA" => Ok(AccessKind::Random),
            "RR" => Ok(AccessKind::Reshuffle),
            "CA" => Ok(AccessKind::Cyclic),
            _ => Err(invalid(format!("unknown access strategy {s:?} (expected RA, RR or CA)"))),
        }
    }
}

/// Stateful batch generator.
#[derive(Debug, Clone)]
pub struct Accessor {
    kind: AccessKind,
    total: usize,
    batch: usize,
    cursor: usize,
    perm: Vec<usize>,
    buf: Vec<usize>,
    rng: ChaCha8Rng,
}

/// Build an accessor over `[0, total)` emitting batches of `batch`
/// indices; `rng` drives RA draws and RR shuffles.
pub fn make_accessor(kind: AccessKind, total: usize, batch: usize, rng: ChaCha8Rng) -> Result<Accessor> {
    if batch == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    if batch > total {
        return Err(invalid(format!("batch size {batch} exceeds dataset size {total}")));
    }
    if kind != AccessKind::Random && !total.is_multiple_of(batch) {
        return Err(invalid(format!(
            "{kind} needs the batch size to divide the dataset size ({batch} does not divide {total})"
        )));
    }
    let perm = match kind {
        AccessKind::Reshuffle => (0..total).collect(),
        _ => Vec::new(),
    };
    Ok(Accessor { kind, total, batch, cursor: 0, perm, buf: Vec::with_capacity(batch), rng })
}

impl Accessor {
    pub fn kind(&self) -> AccessKind {
        self.kind
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Next batch `S_k`. The slice is valid until the next call.
    pub fn next_batch(&mut self) -> &[usize] {
        self.buf.clear();
        match self.kind {
            AccessKind::Random => {
                for _ in 0..self.batch {
                    self.buf.push(self.rng.random_range(0..self.total));
                }
            }
            AccessKind::Reshuffle => {
                if self.cursor == 0 {
                    self.perm.shuffle(&mut self.rng);
                }
                self.buf.extend_from_slice(&self.perm[self.cursor..self.cursor + self.batch]);
                self.cursor = (self.cursor + self.batch) % self.total;
            }
            AccessKind::Cyclic => {
                self.buf.extend(self.cursor..self.cursor + self.batch);
                self.cursor = (self.cursor + self.batch) % self.total;
            }
        }
        &self.buf
    }

    /// Record the next `iterations` batches.
    pub fn trace(&mut self, iterations: usize) -> AccessTrace {
        let mut t = AccessTrace::new(self.total);
        for _ in 0..iterations {
            let b = self.next_batch().to_vec();
            t.push(b);
        }
        t
    }
}

/// Append-only record of emitted batches; batch `k` is `S_k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessTrace {
    total: usize,
    batches: Vec<Vec<usize>>,
}

impl AccessTrace {
    pub fn new(total: usize) -> Self {
        Self { total, batches: Vec::new() }
    }

    pub fn push(&mut self, batch: Vec<usize>) {
        self.batches.push(batch);
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn batches(&self) -> &[Vec<usize>] {
        &self.batches
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    /// Flattened record accesses in order.
    pub fn accesses(&self) -> impl Iterator<Item = usize> + '_ {
        self.batches.iter().flatten().copied()
    }

    /// One line per iteration: `k<TAB>i1,i2,...,in`.
    pub fn write_dump<W: Write>(&self, mut out: W) -> Result<()> {
        for (k, b) in self.batches.iter().enumerate() {
            write!(out, "{k}\t")?;
            for (j, i) in b.iter().enumerate() {
                if j > 0 {
                    out.write_all(b",")?;
                }
                write!(out, "{i}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Parse a dump written by [`AccessTrace::write_dump`]. Iteration
    /// stamps must be consecutive from 0.
    pub fn read_dump<R: BufRead>(input: R, total: usize) -> Result<Self> {
        let mut trace = Self::new(total);
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let perr = |column: usize, message: String| Error::Parse { line: lineno + 1, column, message };
            let (k, rest) = line
                .split_once('\t')
                .ok_or_else(|| perr(1, "expected k<TAB>indices".into()))?;
            let k: usize = k.parse().map_err(|_| perr(1, format!("invalid iteration {k:?}")))?;
            if k != trace.len() {
                return Err(perr(1, format!("iteration {k} out of sequence (expected {})", trace.len())));
            }
            let mut batch = Vec::new();
            if !rest.is_empty() {
                for tok in rest.split(',') {
                    let i: usize = tok
                        .trim()
                        .parse()
                        .map_err(|_| perr(k.to_string().len() + 2, format!("invalid index {tok:?}")))?;
                    if i >= total {
                        return Err(Error::IndexOutOfRange { index: i, len: total });
                    }
                    batch.push(i);
                }
            }
            trace.push(batch);
        }
        Ok(trace)
    }
}

/// True iff every window of `window` consecutive batches (every iteration
/// `k >= window - 1`, looking back over `S_{k-window+1}..=S_k`) touches
/// every index in `[0, N)`. A trace shorter than the window has no full
/// window and fails.
pub fn verify_coverage(trace: &AccessTrace, window: usize) -> Result<bool> {
    if window < 1 {
        return Err(invalid("coverage window must be at least 1"));
    }
    if trace.is_empty() {
        return Err(invalid("empty access trace"));
    }
    if trace.len() < window {
        return Ok(false);
    }
    let mut counts = vec![0usize; trace.total];
    let mut missing = trace.total;
    let batches = trace.batches();
    for (k, batch) in batches.iter().enumerate() {
        for &i in batch {
            if counts[i] == 0 {
                missing -= 1;
            }
            counts[i] += 1;
        }
        if k + 1 > window {
            for &i in &batches[k - window] {
                counts[i] -= 1;
                if counts[i] == 0 {
                    missing += 1;
                }
            }
        }
        if k + 1 >= window && missing > 0 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Smallest window for which [`verify_coverage`] holds on this trace, or
/// `None` if some index never appears.
pub fn empirical_coverage_window(trace: &AccessTrace) -> Option<usize> {
    let len = trace.len();
    let mut last: Vec<Option<usize>> = vec![None; trace.total];
    let mut need = 0usize;
    for (k, batch) in trace.batches().iter().enumerate() {
        for &i in batch {
            let gap = match last[i] {
                None => k + 1,
                Some(p) => k - p,
            };
            need = need.max(gap);
            last[i] = Some(k);
        }
    }
    for l in &last {
        need = need.max(len - (*l)?);
    }
    Some(need)
}
