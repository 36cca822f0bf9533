//! Synthetic task streams with controllable cross-task vocabulary overlap.

use chrono::{Duration, NaiveDate};
use rand::distr::weighted::WeightedIndex;
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{build_stream, RawRecord, Split, StreamOptions, TaskStream};
use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub tasks: usize,
    pub groups_per_task: usize,
    pub vocab_per_task: usize,
    /// Fraction of each task vocabulary drawn from the shared pool.
    pub overlap: f64,
    /// Size of the shared pool; defaults to `vocab_per_task`.
    #[serde(default)]
    pub shared_pool: Option<usize>,
    /// Dirichlet concentration of per-group token distributions.
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Zipf exponent of group frequencies inside a task (0 = balanced).
    #[serde(default = "default_zipf")]
    pub zipf_exponent: f64,
    pub train_per_task: usize,
    pub dev_per_task: usize,
    pub test_per_task: usize,
    pub seed: u64,
}

fn default_concentration() -> f64 {
    0.1
}
fn default_min_len() -> usize {
    6
}
fn default_max_len() -> usize {
    16
}
fn default_zipf() -> f64 {
    1.0
}

impl SynthConfig {
    pub fn new(tasks: usize, groups_per_task: usize, vocab_per_task: usize, overlap: f64, seed: u64) -> Self {
        Self {
            tasks,
            groups_per_task,
            vocab_per_task,
            overlap,
            shared_pool: None,
            concentration: default_concentration(),
            min_len: default_min_len(),
            max_len: default_max_len(),
            zipf_exponent: default_zipf(),
            train_per_task: 500,
            dev_per_task: 100,
            test_per_task: 100,
            seed,
        }
    }

    pub fn shared_count(&self) -> usize {
        (self.overlap * self.vocab_per_task as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tasks", self.tasks),
            ("groups_per_task", self.groups_per_task),
            ("vocab_per_task", self.vocab_per_task),
            ("min_len", self.min_len),
            ("train_per_task", self.train_per_task),
            ("dev_per_task", self.dev_per_task),
            ("test_per_task", self.test_per_task),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("synthetic.{name}"), "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::config("synthetic.overlap", "must lie in [0, 1]"));
        }
        if self.max_len < self.min_len {
            return Err(Error::config("synthetic.max_len", "must be >= min_len"));
        }
        if !(self.concentration > 0.0) {
            return Err(Error::config("synthetic.concentration", "must be positive"));
        }
        if !(self.zipf_exponent >= 0.0) {
            return Err(Error::config("synthetic.zipf_exponent", "must be non-negative"));
        }
        let pool = self.shared_pool.unwrap_or(self.vocab_per_task);
        if pool < self.shared_count() {
            return Err(Error::config(
                "synthetic.shared_pool",
                format!(
                    "shared pool of {pool} cannot supply {} overlapping tokens",
                    self.shared_count()
                ),
            ));
        }
        Ok(())
    }
}

fn base_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2009, 1, 1).expect("valid date")
}

/// Raw records of the synthetic stream, splits and dates included.
///
/// Task `t` draws `floor(overlap * V)` tokens from the shared pool and the
/// remainder from tokens private to `t`. Each group gets its own Dirichlet
/// token distribution over the task vocabulary; groups are drawn with
/// Zipf weights so classes are imbalanced.
pub fn synthetic_records(cfg: &SynthConfig) -> Result<Vec<RawRecord>> {
    cfg.validate()?;
    let pool = cfg.shared_pool.unwrap_or(cfg.vocab_per_task);
    let shared = cfg.shared_count();
    let gamma = Gamma::new(cfg.concentration, 1.0)
        .map_err(|e| Error::config("synthetic.concentration", e.to_string()))?;
    let zipf: Vec<f64> = (0..cfg.groups_per_task)
        .map(|k| 1.0 / ((k + 1) as f64).powf(cfg.zipf_exponent))
        .collect();
    let group_dist = WeightedIndex::new(&zipf).map_err(|e| Error::contract(e.to_string()))?;

    let mut out = Vec::new();
    for t in 0..cfg.tasks {
        let mut rng = rng_for(cfg.seed, &[tag::SYNTH, t as u64]);
        let mut vocab: Vec<String> = sample_indices(&mut rng, pool, shared)
            .into_iter()
            .map(|k| format!("s{k}"))
            .collect();
        vocab.extend((0..cfg.vocab_per_task - shared).map(|k| format!("t{t}w{k}")));

        let mut token_dists = Vec::with_capacity(cfg.groups_per_task);
        for _ in 0..cfg.groups_per_task {
            let weights: Vec<f64> = (0..vocab.len())
                .map(|_| gamma.sample(&mut rng).max(1e-300))
                .collect();
            token_dists.push(WeightedIndex::new(&weights).map_err(|e| Error::contract(e.to_string()))?);
        }

        let ideology = format!("ideology{t}");
        let date = base_date() + Duration::days(90 * t as i64);
        for (split, n) in [
            (Split::Train, cfg.train_per_task),
            (Split::Dev, cfg.dev_per_task),
            (Split::Test, cfg.test_per_task),
        ] {
            for _ in 0..n {
                let g = group_dist.sample(&mut rng);
                let len = rng.random_range(cfg.min_len..=cfg.max_len);
                let text = (0..len)
                    .map(|_| vocab[token_dists[g].sample(&mut rng)].as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                out.push(RawRecord {
                    text,
                    group: format!("t{t}g{g}"),
                    ideology: ideology.clone(),
                    first_post_date: Some(date),
                    split: Some(split),
                });
            }
        }
    }
    Ok(out)
}

/// Deterministic synthetic stream for `cfg`.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<TaskStream> {
    let records = synthetic_records(cfg)?;
    let opts = StreamOptions {
        train_cap: cfg.train_per_task,
        seed: cfg.seed,
        ..StreamOptions::default()
    };
    build_stream(&records, &opts)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::corpus::{write_jsonl, load_jsonl, TokenId, Vocab};

    fn small(overlap: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            train_per_task: 60,
            dev_per_task: 10,
            test_per_task: 10,
            ..SynthConfig::new(2, 3, 40, overlap, seed)
        }
    }

    fn task_vocab(s: &TaskStream, t: usize) -> HashSet<TokenId> {
        let task = &s.tasks[t];
        task.train
            .iter()
            .chain(&task.dev)
            .chain(&task.test)
            .flat_map(|x| x.tokens.iter().copied())
            .filter(|&id| !Vocab::is_special(id))
            .collect()
    }

    #[test]
    fn zero_overlap_is_disjoint() {
        let s = gen_synthetic(&small(0.0, 1)).unwrap();
        assert!(task_vocab(&s, 0).is_disjoint(&task_vocab(&s, 1)));
    }

    #[test]
    fn full_overlap_shares_pool() {
        let s = gen_synthetic(&small(1.0, 1)).unwrap();
        for t in 0..2 {
            for id in task_vocab(&s, t) {
                assert!(s.vocab.token(id).unwrap().starts_with('s'));
            }
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let cfg = SynthConfig::new(5, 3, 200, 0.1, 7);
        assert_eq!(gen_synthetic(&cfg).unwrap(), gen_synthetic(&cfg).unwrap());
        let other = SynthConfig { seed: 8, ..cfg };
        assert_ne!(gen_synthetic(&other).unwrap(), gen_synthetic(&SynthConfig::new(5, 3, 200, 0.1, 7)).unwrap());
    }

    #[test]
    fn infeasible_overlap() {
        let cfg = SynthConfig {
            shared_pool: Some(5),
            ..small(0.5, 1)
        };
        assert!(matches!(gen_synthetic(&cfg), Err(Error::Config { .. })));
    }

    #[test]
    fn export_reload_is_exact() {
        let cfg = small(0.2, 3);
        let records = synthetic_records(&cfg).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_jsonl(f.path(), &records).unwrap();
        let (back, warns) = load_jsonl(f.path(), false).unwrap();
        assert!(warns.is_empty());
        assert_eq!(back, records);
        let opts = StreamOptions {
            train_cap: cfg.train_per_task,
            seed: 999,
            ..StreamOptions::default()
        };
        assert_eq!(build_stream(&back, &opts).unwrap(), gen_synthetic(&cfg).unwrap());
    }

    #[test]
    fn registry_grows_by_task_groups() {
        let s = gen_synthetic(&SynthConfig::new(4, 3, 50, 0.1, 2)).unwrap();
        let mut total = 0;
        for t in 1..=s.len() {
            total += s.tasks[t - 1].groups.len();
            assert_eq!(s.seen_groups(t).len(), total);
        }
    }
}
