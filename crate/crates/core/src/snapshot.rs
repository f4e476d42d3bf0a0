//! The snapshot set: `N` stored component gradients `alpha_i`, their
//! running sum, and the iteration at which each was last refreshed.
//!
//! Three storage layouts produce the same estimator:
//!
//! - dense: `N x d` floats;
//! - compact: one scalar per component when the model declares
//!   `grad f_i(x) = s_i(x) z_i` (see [`crate::model::CompactForm`]);
//! - anchor: periodic-total updates only; keeps the anchor iterate and
//!   re-evaluates `alpha_i = grad f_i(anchor)` on demand.
//!
//! The running sum is maintained incrementally and rebuilt from the
//! entries once every entry has been overwritten since the last rebuild.
//! This bounds rounding drift and makes the sum of a fully current set
//! identical to a fresh summation of its entries.

use std::collections::VecDeque;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::error::{check_dim, invalid, Error, Result};
use crate::model::GradientModel;

/// Snapshot-updating strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UpdaterKind {
    /// Per-iteration partial update: `alpha_i <- grad f_i(x_k)` for `i in S_k`.
    Ppu,
    /// Periodic total update: every `D` iterations refresh all entries at `x_{k+1}`.
    Ptu,
    /// Time-based mixture: PTU's periodic refresh plus PPU in between.
    Tmu,
    /// Never update.
    None,
}

impl UpdaterKind {
    pub fn short_name(self) -> &'static str {
        match self {
            UpdaterKind::Ppu => "PPU",
            UpdaterKind::Ptu => "PTU",
            UpdaterKind::Tmu => "TMU",
            UpdaterKind::None => "NONE",
        }
    }

    pub fn refreshes(self) -> bool {
        matches!(self, UpdaterKind::Ptu | UpdaterKind::Tmu)
    }
}

impl fmt::Display for UpdaterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for UpdaterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "PPU" => Ok(UpdaterKind::Ppu),
            "PTU" => Ok(UpdaterKind::Ptu),
            "TMU" => Ok(UpdaterKind::Tmu),
            "NONE" => Ok(UpdaterKind::None),
            _ => Err(invalid(format!("unknown updater {s:?} (expected PPU, PTU, TMU or NONE)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Updater {
    pub kind: UpdaterKind,
    /// Epoch length `D` for the periodic refresh.
    pub epoch: u64,
}

impl Updater {
    pub fn new(kind: UpdaterKind, epoch: u64) -> Result<Self> {
        if kind.refreshes() && epoch == 0 {
            return Err(invalid("epoch length D must be at least 1"));
        }
        Ok(Self { kind, epoch })
    }

    /// True when the update after iteration `k` is a full refresh.
    pub fn refresh_after(&self, k: u64) -> bool {
        self.kind.refreshes() && (k + 1).is_multiple_of(self.epoch)
    }
}

/// Requested snapshot layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StorageMode {
    /// Compact when the model declares a compact form, dense otherwise.
    #[default]
    Auto,
    Dense,
    /// Anchor-iterate storage; valid with PTU only.
    Anchor,
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    Dense(Vec<f64>),
    Compact(Vec<f64>),
    Anchor(Vec<f64>),
}

impl Storage {
    fn tag(&self) -> u8 {
        match self {
            Storage::Dense(_) => 0,
            Storage::Compact(_) => 1,
            Storage::Anchor(_) => 2,
        }
    }
}

/// Scratch for one aggregated-gradient evaluation. Keeps the fresh
/// component gradients at `x_k` so a partial update can reuse them.
#[derive(Debug, Clone, Default)]
pub struct BatchEval {
    fresh: Vec<f64>,
    scalars: Vec<f64>,
    corr: Vec<f64>,
    tmp: Vec<f64>,
    filled: bool,
}

impl BatchEval {
    pub fn new() -> Self {
        Self::default()
    }

    fn prepare(&mut self, batch: usize, d: usize) {
        self.fresh.resize(batch * d, 0.0);
        self.scalars.resize(batch, 0.0);
        self.corr.clear();
        self.corr.resize(d, 0.0);
        self.tmp.resize(d, 0.0);
        self.filled = false;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    n: usize,
    d: usize,
    storage: Storage,
    running_sum: Vec<f64>,
    last_update: Vec<u64>,
    /// Entries overwritten since the running sum was last recomputed.
    touched: Vec<bool>,
    untouched: usize,
}

fn resolve_mode<M: GradientModel + ?Sized>(model: &M, mode: StorageMode) -> StorageMode {
    match mode {
        StorageMode::Auto if model.compact().is_some() => StorageMode::Auto,
        StorageMode::Auto => StorageMode::Dense,
        m => m,
    }
}

/// `alpha_i = grad f_i(x0)` for every `i`, stamped with iteration 0.
pub fn init_snapshots<M: GradientModel + ?Sized>(model: &M, x0: &[f64], mode: StorageMode) -> Result<SnapshotSet> {
    check_dim(model.dim(), x0.len())?;
    let (n, d) = (model.n_components(), model.dim());
    let storage = match resolve_mode(model, mode) {
        StorageMode::Auto => Storage::Compact(vec![0.0; n]),
        StorageMode::Dense => Storage::Dense(vec![0.0; n * d]),
        StorageMode::Anchor => Storage::Anchor(x0.to_vec()),
    };
    let mut set = SnapshotSet {
        n,
        d,
        storage,
        running_sum: vec![0.0; d],
        last_update: vec![0; n],
        touched: vec![false; n],
        untouched: n,
    };
    set.refresh_all(model, x0, 0);
    Ok(set)
}

impl SnapshotSet {
    /// All-zero snapshots (dense). With [`UpdaterKind::None`] this turns
    /// the aggregated gradient into the plain minibatch estimator.
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            n,
            d,
            storage: Storage::Dense(vec![0.0; n * d]),
            running_sum: vec![0.0; d],
            last_update: vec![0; n],
            touched: vec![false; n],
            untouched: n,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn running_sum(&self) -> &[f64] {
        &self.running_sum
    }

    pub fn last_update(&self) -> &[u64] {
        &self.last_update
    }

    pub fn is_compact(&self) -> bool {
        matches!(self.storage, Storage::Compact(_))
    }

    pub fn is_anchor(&self) -> bool {
        matches!(self.storage, Storage::Anchor(_))
    }

    /// `max_i (k - last_update[i])`
    pub fn max_staleness(&self, k: u64) -> u64 {
        self.last_update.iter().map(|&u| k.saturating_sub(u)).max().unwrap_or(0)
    }

    /// The stored `alpha_i`, materialized.
    pub fn alpha<M: GradientModel + ?Sized>(&self, model: &M, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.alpha_into(model, i, &mut out);
        out
    }

    fn alpha_into<M: GradientModel + ?Sized>(&self, model: &M, i: usize, out: &mut [f64]) {
        match &self.storage {
            Storage::Dense(e) => out.copy_from_slice(&e[i * self.d..(i + 1) * self.d]),
            Storage::Compact(s) => compact_of(model).data(i).scale_into(s[i], out),
            Storage::Anchor(a) => model.component_grad_into(i, a, out),
        }
    }

    fn check_batch(&self, batch: &[usize]) -> Result<()> {
        if let Some(&i) = batch.iter().find(|&&i| i >= self.n) {
            return Err(Error::IndexOutOfRange { index: i, len: self.n });
        }
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        Ok(())
    }

    /// `g = (N/n) sum_{i in S} (grad f_i(x) - alpha_i) + sum_i alpha_i + prior_grad(x)`.
    ///
    /// Evaluates `|S|` component gradients (twice that in anchor storage)
    /// and leaves them in `eval` for a following partial update.
    pub fn aggregated_gradient<M: GradientModel + ?Sized>(
        &self,
        model: &M,
        x: &[f64],
        batch: &[usize],
        eval: &mut BatchEval,
        out: &mut [f64],
    ) -> Result<()> {
        check_dim(self.d, x.len())?;
        check_dim(self.d, out.len())?;
        check_dim(self.n, model.n_components())?;
        self.check_batch(batch)?;
        let d = self.d;
        eval.prepare(batch.len(), d);
        match &self.storage {
            Storage::Compact(s) => {
                let c = compact_of(model);
                for (slot, &i) in batch.iter().enumerate() {
                    let fresh = c.scalar(i, x);
                    eval.scalars[slot] = fresh;
                    c.data(i).axpy_into(fresh - s[i], &mut eval.corr);
                }
            }
            Storage::Dense(e) => {
                for (slot, &i) in batch.iter().enumerate() {
                    let fresh = &mut eval.fresh[slot * d..(slot + 1) * d];
                    model.component_grad_into(i, x, fresh);
                    let old = &e[i * d..(i + 1) * d];
                    for ((c, f), a) in eval.corr.iter_mut().zip(fresh.iter()).zip(old) {
                        *c += f - a;
                    }
                }
            }
            Storage::Anchor(anchor) => {
                for (slot, &i) in batch.iter().enumerate() {
                    let fresh = &mut eval.fresh[slot * d..(slot + 1) * d];
                    model.component_grad_into(i, x, fresh);
                    model.component_grad_into(i, anchor, &mut eval.tmp);
                    for ((c, f), a) in eval.corr.iter_mut().zip(fresh.iter()).zip(&eval.tmp) {
                        *c += f - a;
                    }
                }
            }
        }
        eval.filled = true;
        let scale = self.n as f64 / batch.len() as f64;
        for ((o, s), c) in out.iter_mut().zip(&self.running_sum).zip(&eval.corr) {
            *o = s + scale * c;
        }
        model.add_prior_grad(x, out);
        Ok(())
    }

    /// Apply `updater` after iteration `k` (iterate `x_k` -> `x_{k+1}`,
    /// batch `S_k`). `fresh` may carry the gradients at `x_k` from the
    /// preceding [`SnapshotSet::aggregated_gradient`] call on the same
    /// batch; otherwise they are recomputed. Returns the number of
    /// component-gradient evaluations performed.
    #[allow(clippy::too_many_arguments)]
    pub fn apply_update<M: GradientModel + ?Sized>(
        &mut self,
        updater: &Updater,
        model: &M,
        x_k: &[f64],
        x_k1: &[f64],
        k: u64,
        batch: &[usize],
        fresh: Option<&BatchEval>,
    ) -> Result<u64> {
        check_dim(self.d, x_k.len())?;
        check_dim(self.d, x_k1.len())?;
        if updater.refresh_after(k) {
            self.refresh_all(model, x_k1, k + 1);
            return Ok(self.n as u64);
        }
        match updater.kind {
            UpdaterKind::Ppu | UpdaterKind::Tmu => {
                self.check_batch(batch)?;
                if self.is_anchor() {
                    return Err(invalid("anchor storage supports periodic total updates only"));
                }
                let fresh = fresh.filter(|f| f.filled && f.scalars.len() == batch.len());
                let evals = if fresh.is_some() { 0 } else { batch.len() as u64 };
                self.partial_update(model, x_k, k, batch, fresh);
                Ok(evals)
            }
            UpdaterKind::Ptu | UpdaterKind::None => Ok(0),
        }
    }

    fn partial_update<M: GradientModel + ?Sized>(
        &mut self,
        model: &M,
        x_k: &[f64],
        k: u64,
        batch: &[usize],
        fresh: Option<&BatchEval>,
    ) {
        let d = self.d;
        match &mut self.storage {
            Storage::Compact(s) => {
                let c = compact_of(model);
                for (slot, &i) in batch.iter().enumerate() {
                    let new = match fresh {
                        Some(f) => f.scalars[slot],
                        None => c.scalar(i, x_k),
                    };
                    c.data(i).axpy_into(new - s[i], &mut self.running_sum);
                    s[i] = new;
                }
            }
            Storage::Dense(e) => {
                let mut buf = vec![0.0; d];
                for (slot, &i) in batch.iter().enumerate() {
                    let new: &[f64] = match fresh {
                        Some(f) => &f.fresh[slot * d..(slot + 1) * d],
                        None => {
                            model.component_grad_into(i, x_k, &mut buf);
                            &buf
                        }
                    };
                    let old = &mut e[i * d..(i + 1) * d];
                    for ((sum, o), nv) in self.running_sum.iter_mut().zip(old.iter_mut()).zip(new) {
                        *sum += nv - *o;
                        *o = *nv;
                    }
                }
            }
            Storage::Anchor(_) => unreachable!("rejected by apply_update"),
        }
        for &i in batch {
            self.last_update[i] = k;
            if !std::mem::replace(&mut self.touched[i], true) {
                self.untouched -= 1;
            }
        }
        if self.untouched == 0 {
            self.rebuild_running_sum(model);
        }
    }

    /// Refresh every entry at `x`, stamping iteration `k`; the running
    /// sum is recomputed from scratch in index order.
    fn refresh_all<M: GradientModel + ?Sized>(&mut self, model: &M, x: &[f64], k: u64) {
        let d = self.d;
        match &mut self.storage {
            Storage::Dense(e) => {
                for (i, chunk) in e.chunks_exact_mut(d).enumerate() {
                    model.component_grad_into(i, x, chunk);
                }
            }
            Storage::Compact(s) => {
                let c = compact_of(model);
                for (i, v) in s.iter_mut().enumerate() {
                    *v = c.scalar(i, x);
                }
            }
            Storage::Anchor(a) => a.copy_from_slice(x),
        }
        self.last_update.fill(k);
        self.reset_touched();
        self.running_sum = self.recompute_sum(model);
    }

    fn reset_touched(&mut self) {
        self.touched.fill(false);
        self.untouched = self.n;
    }

    fn recompute_sum<M: GradientModel + ?Sized>(&self, model: &M) -> Vec<f64> {
        let d = self.d;
        let mut sum = vec![0.0; d];
        match &self.storage {
            Storage::Dense(e) => {
                for chunk in e.chunks_exact(d) {
                    crate::linalg::add_assign(&mut sum, chunk);
                }
            }
            Storage::Compact(s) => {
                let c = compact_of(model);
                let mut tmp = vec![0.0; d];
                for (i, v) in s.iter().enumerate() {
                    c.data(i).scale_into(*v, &mut tmp);
                    crate::linalg::add_assign(&mut sum, &tmp);
                }
            }
            Storage::Anchor(a) => {
                let mut tmp = vec![0.0; d];
                crate::model::likelihood_grad_into(model, a, &mut sum, &mut tmp);
            }
        }
        sum
    }

    /// Recompute the running sum from the entries, replace the cached
    /// value, and return the relative deviation `|cached - fresh| / |fresh|`
    /// (absolute when the fresh sum is zero).
    pub fn rebuild_running_sum<M: GradientModel + ?Sized>(&mut self, model: &M) -> f64 {
        let fresh = self.recompute_sum(model);
        let diff: f64 = fresh
            .iter()
            .zip(&self.running_sum)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = crate::linalg::norm2(&fresh);
        self.running_sum = fresh;
        self.reset_touched();
        if norm > 0.0 {
            diff / norm
        } else {
            diff
        }
    }

    #[doc(hidden)]
    pub fn perturb_running_sum(&mut self, coord: usize, delta: f64) {
        self.running_sum[coord] += delta;
    }

    /// True iff every `alpha_i` equals `grad f_i(x_j)` exactly for some
    /// `j` in `[k - window, k]` (clipped at 0), where `k` is the newest
    /// iterate in `history`. Pass `window = D` for the inclusive form of
    /// the staleness requirement and `D - 1` for the half-open form.
    ///
    /// Needs dense storage with the prior folded into the components
    /// (see [`crate::model::PriorFolded`]) so entries are exact gradients.
    pub fn verify_staleness<M: GradientModel + ?Sized>(&self, model: &M, history: &IterateHistory, window: u64) -> Result<bool> {
        let Storage::Dense(e) = &self.storage else {
            return Err(invalid("staleness verification needs dense snapshot storage"));
        };
        if model.has_prior() {
            return Err(invalid("staleness verification needs the prior folded into the components"));
        }
        let k = history.newest().ok_or_else(|| invalid("empty iterate history"))?;
        let from = k.saturating_sub(window);
        if history.oldest().is_none_or(|o| o > from) {
            return Err(invalid(format!("history does not reach back to iteration {from}")));
        }
        let d = self.d;
        let mut g = vec![0.0; d];
        'components: for i in 0..self.n {
            let alpha = &e[i * d..(i + 1) * d];
            // Try the recorded iteration first, then the rest of the window.
            let hint = self.last_update[i];
            let order = std::iter::once(hint)
                .filter(|j| (from..=k).contains(j))
                .chain((from..=k).rev().filter(|j| *j != hint));
            for j in order {
                model.component_grad_into(i, history.get(j).expect("within history"), &mut g);
                if g == alpha {
                    continue 'components;
                }
            }
            return Ok(false);
        }
        Ok(true)
    }

    /// Serialize entries, running sum and iteration stamps.
    ///
    /// Layout (little-endian): magic `AGLDSNAP`, `u32` version, `u8`
    /// storage tag (0 dense, 1 compact, 2 anchor), `u64 N`, `u64 d`,
    /// payload (`N*d`, `N` or `d` `f64`s), running sum (`d` `f64`s),
    /// last-update stamps (`N` `u64`s), touched-since-rebuild flags (`N`
    /// bytes, 0 or 1).
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&[self.storage.tag()])?;
        out.write_all(&(self.n as u64).to_le_bytes())?;
        out.write_all(&(self.d as u64).to_le_bytes())?;
        let payload = match &self.storage {
            Storage::Dense(v) | Storage::Compact(v) | Storage::Anchor(v) => v,
        };
        for v in payload.iter().chain(&self.running_sum) {
            out.write_all(&v.to_le_bytes())?;
        }
        for u in &self.last_update {
            out.write_all(&u.to_le_bytes())?;
        }
        let flags: Vec<u8> = self.touched.iter().map(|&t| u8::from(t)).collect();
        out.write_all(&flags)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut input)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let [tag] = read_array::<1>(&mut input)?;
        let n = u64::from_le_bytes(read_array(&mut input)?) as usize;
        let d = u64::from_le_bytes(read_array(&mut input)?) as usize;
        let payload_len = match tag {
            0 => n.checked_mul(d),
            1 => Some(n),
            2 => Some(d),
            t => return Err(Error::Checkpoint(format!("unknown storage tag {t}"))),
        }
        .ok_or_else(|| Error::Checkpoint("size overflow".into()))?;
        let mut read_f64s = |len: usize| -> Result<Vec<f64>> {
            (0..len).map(|_| Ok(f64::from_le_bytes(read_array(&mut input)?))).collect()
        };
        let payload = read_f64s(payload_len)?;
        let running_sum = read_f64s(d)?;
        let last_update = (0..n)
            .map(|_| Ok(u64::from_le_bytes(read_array(&mut input)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut flags = vec![0u8; n];
        input
            .read_exact(&mut flags)
            .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
        let touched = flags
            .iter()
            .map(|&f| match f {
                0 | 1 => Ok(f == 1),
                _ => Err(Error::Checkpoint(format!("bad touched flag {f}"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        let untouched = touched.iter().filter(|&&t| !t).count();
        let storage = match tag {
            0 => Storage::Dense(payload),
            1 => Storage::Compact(payload),
            _ => Storage::Anchor(payload),
        };
        Ok(Self { n, d, storage, running_sum, last_update, touched, untouched })
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"AGLDSNAP";
const CHECKPOINT_VERSION: u32 = 1;

fn read_array<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input
        .read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    Ok(buf)
}

fn compact_of<M: GradientModel + ?Sized>(model: &M) -> &dyn crate::model::CompactForm {
    model
        .compact()
        .expect("compact snapshots are only built for models with a compact form")
}

/// The most recent iterates `x^(j)`, indexed by iteration.
#[derive(Debug, Clone)]
pub struct IterateHistory {
    first: u64,
    iterates: VecDeque<Vec<f64>>,
    capacity: usize,
}

impl IterateHistory {
    /// Keep at most `capacity` iterates (at least one).
    pub fn new(capacity: usize) -> Self {
        Self { first: 0, iterates: VecDeque::new(), capacity: capacity.max(1) }
    }

    /// Append `x^(k)` for the next iteration `k`.
    pub fn push(&mut self, x: &[f64]) {
        if self.iterates.len() == self.capacity {
            self.iterates.pop_front();
            self.first += 1;
        }
        self.iterates.push_back(x.to_vec());
    }

    pub fn newest(&self) -> Option<u64> {
        (!self.iterates.is_empty()).then(|| self.first + self.iterates.len() as u64 - 1)
    }

    pub fn oldest(&self) -> Option<u64> {
        (!self.iterates.is_empty()).then_some(self.first)
    }

    pub fn get(&self, k: u64) -> Option<&[f64]> {
        let off = k.checked_sub(self.first)? as usize;
        self.iterates.get(off).map(Vec::as_slice)
    }
}
