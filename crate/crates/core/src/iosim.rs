//! Out-of-core access simulation: replay an access trace against a
//! fixed-size LRU page cache and count page faults.
//!
//! Record `i` lives on page `floor(i / P)`. The cost model is abstract:
//! a fault costs `fault_cost` units, hits are free.

use std::io::Write;

use crate::access::{make_accessor, AccessKind, AccessTrace};
use crate::error::{invalid, Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PageCacheConfig {
    /// Records per page `P`.
    pub records_per_page: usize,
    /// Cache capacity `C` in pages.
    pub cache_pages: usize,
    /// Dataset size `N`.
    pub total_records: usize,
    pub fault_cost: f64,
}

impl PageCacheConfig {
    pub fn new(records_per_page: usize, cache_pages: usize, total_records: usize) -> Result<Self> {
        let cfg = Self { records_per_page, cache_pages, total_records, fault_cost: 1.0 };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.records_per_page == 0 || self.cache_pages == 0 || self.total_records == 0 {
            return Err(invalid("records per page, cache pages and record count must all be positive"));
        }
        if !(self.fault_cost.is_finite() && self.fault_cost >= 0.0) {
            return Err(invalid("fault cost must be a non-negative number"));
        }
        Ok(())
    }

    pub fn pages(&self) -> usize {
        self.total_records.div_ceil(self.records_per_page)
    }
}

/// LRU set over page ids `0..pages` with O(1) touch and eviction:
/// an intrusive doubly linked list threaded through flat arrays.
#[derive(Debug, Clone)]
struct Lru {
    capacity: usize,
    len: usize,
    resident: Vec<bool>,
    prev: Vec<usize>,
    next: Vec<usize>,
    /// Most recently used.
    head: usize,
    /// Least recently used.
    tail: usize,
}

const NIL: usize = usize::MAX;

impl Lru {
    fn new(pages: usize, capacity: usize) -> Self {
        Self {
            capacity,
            len: 0,
            resident: vec![false; pages],
            prev: vec![NIL; pages],
            next: vec![NIL; pages],
            head: NIL,
            tail: NIL,
        }
    }

    fn unlink(&mut self, p: usize) {
        let (a, b) = (self.prev[p], self.next[p]);
        if a == NIL {
            self.head = b;
        } else {
            self.next[a] = b;
        }
        if b == NIL {
            self.tail = a;
        } else {
            self.prev[b] = a;
        }
        self.prev[p] = NIL;
        self.next[p] = NIL;
    }

    fn push_front(&mut self, p: usize) {
        self.next[p] = self.head;
        self.prev[p] = NIL;
        if self.head != NIL {
            self.prev[self.head] = p;
        }
        self.head = p;
        if self.tail == NIL {
            self.tail = p;
        }
    }

    /// Access page `p`; returns true on a fault.
    fn touch(&mut self, p: usize) -> bool {
        if self.resident[p] {
            if self.head != p {
                self.unlink(p);
                self.push_front(p);
            }
            return false;
        }
        if self.len == self.capacity {
            let victim = self.tail;
            self.unlink(victim);
            self.resident[victim] = false;
            self.len -= 1;
        }
        self.push_front(p);
        self.resident[p] = true;
        self.len += 1;
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultReport {
    pub total_accesses: u64,
    pub faults: u64,
    pub hit_ratio: f64,
    /// Faults within each block of `N` consecutive accesses.
    pub faults_per_pass: Vec<u64>,
    pub fault_cost: f64,
}

impl FaultReport {
    /// Hit ratio over all passes but the first (cold) one; `None` for
    /// traces of at most one pass.
    pub fn warm_hit_ratio(&self, total_records: usize) -> Option<f64> {
        let cold = total_records as u64;
        if self.total_accesses <= cold {
            return None;
        }
        let warm_faults: u64 = self.faults_per_pass.iter().skip(1).sum();
        Some(1.0 - warm_faults as f64 / (self.total_accesses - cold) as f64)
    }

    /// Linear cost model: `faults * fault_cost`.
    pub fn cost(&self) -> f64 {
        self.faults as f64 * self.fault_cost
    }

    /// Simulated seconds at `latency` seconds per fault.
    pub fn simulated_seconds(&self, latency: f64) -> f64 {
        self.faults as f64 * latency
    }
}

/// Replay `trace` through an LRU cache configured by `cfg`.
pub fn replay(trace: &AccessTrace, cfg: &PageCacheConfig) -> Result<FaultReport> {
    replay_accesses(trace.accesses(), cfg)
}

/// Replay with a sequential scan of all `N` records injected after every
/// iteration `k` with `(k + 1) % refresh_every == 0`, the read pattern of
/// a full snapshot refresh.
pub fn replay_with_refreshes(trace: &AccessTrace, cfg: &PageCacheConfig, refresh_every: u64) -> Result<FaultReport> {
    if refresh_every == 0 {
        return Err(invalid("refresh period must be at least 1"));
    }
    let n = cfg.total_records;
    let stream = trace.batches().iter().enumerate().flat_map(|(k, b)| {
        let scan = if (k as u64 + 1).is_multiple_of(refresh_every) { 0..n } else { 0..0 };
        b.iter().copied().chain(scan)
    });
    replay_accesses(stream, cfg)
}

fn replay_accesses(accesses: impl Iterator<Item = usize>, cfg: &PageCacheConfig) -> Result<FaultReport> {
    cfg.validate()?;
    let n = cfg.total_records;
    let mut lru = Lru::new(cfg.pages(), cfg.cache_pages);
    let mut faults_per_pass = Vec::new();
    let (mut total, mut faults) = (0u64, 0u64);
    for i in accesses {
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, len: n });
        }
        if total % n as u64 == 0 {
            faults_per_pass.push(0);
        }
        total += 1;
        if lru.touch(i / cfg.records_per_page) {
            faults += 1;
            *faults_per_pass.last_mut().expect("pass opened above") += 1;
        }
    }
    let hit_ratio = if total == 0 { 1.0 } else { 1.0 - faults as f64 / total as f64 };
    Ok(FaultReport { total_accesses: total, faults, hit_ratio, faults_per_pass, fault_cost: cfg.fault_cost })
}

/// Fault reports for RA, RR and CA over the same number of passes, each
/// trace drawn from the access stream of `(seed, chain 0)`.
pub fn compare_strategies(
    batch: usize,
    cfg: &PageCacheConfig,
    passes: usize,
    seed: u64,
) -> Result<Vec<(AccessKind, FaultReport)>> {
    let n = cfg.total_records;
    let iterations = (passes * n).div_ceil(batch);
    AccessKind::ALL
        .iter()
        .map(|&kind| {
            let mut acc = make_accessor(kind, n, batch, stream_rng(seed, 0, Stream::Access))?;
            Ok((kind, replay(&acc.trace(iterations), cfg)?))
        })
        .collect()
}

/// `strategy,pass,faults,hit_ratio` rows, one per pass; the hit ratio is
/// the pass's own.
pub fn write_fault_csv<W: Write>(reports: &[(String, FaultReport)], total_records: usize, mut out: W) -> Result<()> {
    writeln!(out, "strategy,pass,faults,hit_ratio")?;
    for (name, r) in reports {
        let mut remaining = r.total_accesses;
        for (pass, &f) in r.faults_per_pass.iter().enumerate() {
            let len = remaining.min(total_records as u64);
            remaining -= len;
            writeln!(out, "{name},{pass},{f},{}", 1.0 - f as f64 / len as f64)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_of(total: usize, idx: &[usize]) -> AccessTrace {
        let mut t = AccessTrace::new(total);
        for &i in idx {
            t.push(vec![i]);
        }
        t
    }

    #[test]
    fn lru_evicts_least_recent() {
        let cfg = PageCacheConfig::new(1, 2, 4).unwrap();
        // 0 1 0 2 (evicts 1) 1 (evicts 0) 0 (evicts 2)
        let r = replay(&trace_of(4, &[0, 1, 0, 2, 1, 0]), &cfg).unwrap();
        assert_eq!(r.faults, 5);
        assert_eq!(r.faults_per_pass, vec![3, 2]);
        assert!((r.hit_ratio - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn cyclic_pass_faults_once_per_page() {
        let cfg = PageCacheConfig::new(100, 5, 1000).unwrap();
        let mut acc = make_accessor(AccessKind::Cyclic, 1000, 10, stream_rng(0, 0, Stream::Access)).unwrap();
        let r = replay(&acc.trace(300), &cfg).unwrap();
        assert_eq!(r.faults_per_pass, vec![10, 10, 10]);
    }

    #[test]
    fn everything_fits_means_warm_passes_are_free() {
        let cfg = PageCacheConfig::new(10, 10, 100).unwrap();
        for (_, r) in compare_strategies(5, &cfg, 4, 3).unwrap() {
            assert!(r.faults_per_pass[1..].iter().all(|&f| f == 0));
            assert_eq!(r.warm_hit_ratio(100), Some(1.0));
        }
    }

    #[test]
    fn refresh_scans_are_injected() {
        let cfg = PageCacheConfig::new(10, 1, 20).unwrap();
        let t = trace_of(20, &[0, 0, 0, 0]);
        let r = replay_with_refreshes(&t, &cfg, 2).unwrap();
        assert_eq!(r.total_accesses, 4 + 2 * 20);
        // 0 fault | 0 hit | scan: page 0 hit, page 1 fault | 0 fault | 0 hit | scan: hit, fault
        assert_eq!(r.faults, 4);
        assert!(replay_with_refreshes(&t, &cfg, 0).is_err());
    }

    #[test]
    fn out_of_range_index() {
        let cfg = PageCacheConfig::new(1, 1, 3).unwrap();
        let mut t = AccessTrace::new(5);
        t.push(vec![4]);
        assert!(matches!(replay(&t, &cfg), Err(Error::IndexOutOfRange { index: 4, len: 3 })));
        assert!(PageCacheConfig::new(0, 1, 3).is_err());
    }

    #[test]
    fn fault_csv_rows() {
        let cfg = PageCacheConfig::new(1, 1, 2).unwrap();
        let r = replay(&trace_of(2, &[0, 1, 1]), &cfg).unwrap();
        let mut buf = Vec::new();
        write_fault_csv(&[("CA".into(), r)], 2, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "strategy,pass,faults,hit_ratio\nCA,0,2,0\nCA,1,0,1\n");
    }
}
