//! Fixed-capacity replay memory with per-task quotas.
//!
//! After task `t` every task may keep at most `K = floor(M / t)` slots.
//! Older tasks are trimmed by evicting their lowest-density slots (density
//! recorded at write time) and the top `K` ranked samples of task `t` are
//! written with their frozen posteriors.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::model::DiagGaussian;
use crate::rng::Rng;

pub const MEMORY_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorySlot {
    pub sample: Sample,
    /// Posterior of the model that finished training on `task`; absent for
    /// random replay.
    pub frozen: Option<DiagGaussian>,
    /// Zero-based index of the owning task.
    pub task: usize,
    pub density: f64,
}

/// A sample offered for writing, already in rank order.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub sample: Sample,
    pub frozen: Option<DiagGaussian>,
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryStore {
    format_version: u32,
    capacity: usize,
    /// One entry per completed task, each sorted by descending density.
    tasks: Vec<Vec<MemorySlot>>,
}

impl MemoryStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            format_version: MEMORY_FORMAT_VERSION,
            capacity,
            tasks: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.tasks.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of tasks written so far.
    pub fn tasks_written(&self) -> usize {
        self.tasks.len()
    }

    pub fn task_slots(&self, task: usize) -> &[MemorySlot] {
        self.tasks.get(task).map_or(&[], Vec::as_slice)
    }

    pub fn slots(&self) -> impl Iterator<Item = &MemorySlot> {
        self.tasks.iter().flatten()
    }

    /// `floor(M / t)` for `t` completed tasks.
    pub fn quota(&self, t: usize) -> usize {
        if t == 0 {
            self.capacity
        } else {
            self.capacity / t
        }
    }

    fn begin_write(&self, t: usize) -> Result<usize> {
        if t == 0 || t != self.tasks.len() + 1 {
            return Err(Error::Contract(format!(
                "memory holds {} tasks; cannot write task {t}",
                self.tasks.len()
            )));
        }
        Ok(self.quota(t))
    }

    /// Density-ranked write after task `t` (one-based). `ranked` must be in
    /// descending importance; only the first `K` are kept.
    pub fn end_of_task_write(&mut self, ranked: Vec<Candidate>, t: usize) -> Result<()> {
        let k = self.begin_write(t)?;
        for slots in &mut self.tasks {
            // slots are kept sorted by descending density, so the tail holds
            // the lowest densities
            slots.truncate(k);
        }
        let mut written: Vec<MemorySlot> = ranked
            .into_iter()
            .take(k)
            .map(|c| MemorySlot {
                sample: c.sample,
                frozen: c.frozen,
                task: t - 1,
                density: c.density,
            })
            .collect();
        written.sort_by(|a, b| b.density.total_cmp(&a.density));
        self.tasks.push(written);
        debug_assert!(self.len() <= self.capacity);
        Ok(())
    }

    /// Random write: old tasks lose random slots down to `K`, and `K`
    /// candidates drawn uniformly (order ignored) are written.
    pub fn end_of_task_write_random(&mut self, candidates: Vec<Candidate>, t: usize, rng: &mut Rng) -> Result<()> {
        let k = self.begin_write(t)?;
        for slots in &mut self.tasks {
            if slots.len() > k {
                slots.shuffle(rng);
                slots.truncate(k);
            }
        }
        let n = candidates.len().min(k);
        let mut picked: Vec<usize> = sample_indices(rng, candidates.len(), n).into_vec();
        picked.sort_unstable();
        let mut cands: Vec<Option<Candidate>> = candidates.into_iter().map(Some).collect();
        self.tasks.push(
            picked
                .into_iter()
                .map(|i| {
                    let c = cands[i].take().expect("indices are distinct");
                    MemorySlot {
                        sample: c.sample,
                        frozen: c.frozen,
                        task: t - 1,
                        density: c.density,
                    }
                })
                .collect(),
        );
        Ok(())
    }

    /// Uniform sample without replacement over all slots, or per-task
    /// stratified when `stratified` is set (remainder goes to earlier tasks).
    pub fn replay_batch(&self, batch: usize, stratified: bool, rng: &mut Rng) -> Vec<&MemorySlot> {
        let total = self.len();
        if total == 0 || batch == 0 {
            return Vec::new();
        }
        if !stratified {
            let all: Vec<&MemorySlot> = self.slots().collect();
            let mut idx = sample_indices(rng, total, batch.min(total)).into_vec();
            idx.sort_unstable();
            return idx.into_iter().map(|i| all[i]).collect();
        }
        let live: Vec<&Vec<MemorySlot>> = self.tasks.iter().filter(|s| !s.is_empty()).collect();
        let share = batch / live.len();
        let extra = batch % live.len();
        let mut out = Vec::with_capacity(batch.min(total));
        for (i, slots) in live.iter().enumerate() {
            let want = (share + usize::from(i < extra)).min(slots.len());
            let mut idx = sample_indices(rng, slots.len(), want).into_vec();
            idx.sort_unstable();
            out.extend(idx.into_iter().map(|j| &slots[j]));
        }
        out
    }

    /// Hash over every frozen posterior, for detecting accidental mutation.
    pub fn frozen_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in self.slots() {
            if let Some(f) = &s.frozen {
                for v in f.mu.iter().chain(&f.logvar) {
                    h.update(v.to_le_bytes());
                }
            }
            h.update([0xff]);
        }
        format!("{:x}", h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store: Self = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| Error::Checkpoint(format!("memory file {}: {e}", path.display())))?;
        if store.format_version != MEMORY_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "memory format version {} is not supported",
                store.format_version
            )));
        }
        if store.len() > store.capacity {
            return Err(Error::Checkpoint("memory file exceeds its capacity".into()));
        }
        Ok(store)
    }
}
