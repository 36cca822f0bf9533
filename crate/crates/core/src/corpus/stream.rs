use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    tokenize, GroupId, GroupInfo, IdeologyId, OrderKey, RawRecord, Sample, Split, Task,
    TaskStream, TokenId, Vocab,
};
use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamOptions {
    #[serde(default = "default_train_cap")]
    pub train_cap: usize,
    #[serde(default = "default_frac")]
    pub test_fraction: f64,
    #[serde(default = "default_frac")]
    pub dev_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_train_cap() -> usize {
    5000
}
fn default_frac() -> f64 {
    0.1
}

impl Default for StreamOptions {
    fn default() -> Self {
        Self {
            train_cap: default_train_cap(),
            test_fraction: default_frac(),
            dev_fraction: default_frac(),
            seed: 0,
        }
    }
}

struct IdeologyBucket<'a> {
    name: &'a str,
    first_position: usize,
    earliest: Option<chrono::NaiveDate>,
    records: Vec<&'a RawRecord>,
}

/// Groups records by ideology into ordered tasks.
///
/// Records whose text tokenizes to nothing are dropped. When every record
/// carries a split the partition is taken as given; otherwise each ideology
/// is shuffled with a seed-derived stream and cut into test (floor of
/// `test_fraction * n`), dev (floor of `dev_fraction * n`) and train (the
/// rest, truncated to `train_cap`).
///
/// Vocabulary ids are assigned in task order from group names and training
/// text; dev/test tokens never seen in training map to UNK.
pub fn build_stream(records: &[RawRecord], opts: &StreamOptions) -> Result<TaskStream> {
    if !(0.0..1.0).contains(&opts.test_fraction)
        || !(0.0..1.0).contains(&opts.dev_fraction)
        || opts.test_fraction + opts.dev_fraction >= 1.0
    {
        return Err(Error::config(
            "data.split",
            "test and dev fractions must be in [0, 1) and sum below 1",
        ));
    }
    let presplit = !records.is_empty() && records.iter().all(|r| r.split.is_some());

    let mut buckets: Vec<IdeologyBucket> = Vec::new();
    let mut bucket_of: HashMap<&str, usize> = HashMap::new();
    let mut group_ideology: HashMap<&str, &str> = HashMap::new();
    for (pos, r) in records.iter().enumerate() {
        if let Some(prev) = group_ideology.insert(&r.group, &r.ideology) {
            if prev != r.ideology {
                return Err(Error::Stream {
                    ideology: r.ideology.clone(),
                    message: format!("group `{}` already belongs to ideology `{prev}`", r.group),
                });
            }
        }
        let b = *bucket_of.entry(&r.ideology).or_insert_with(|| {
            buckets.push(IdeologyBucket {
                name: &r.ideology,
                first_position: pos,
                earliest: None,
                records: Vec::new(),
            });
            buckets.len() - 1
        });
        let bucket = &mut buckets[b];
        if let Some(d) = r.first_post_date {
            bucket.earliest = Some(bucket.earliest.map_or(d, |e| e.min(d)));
        }
        if !tokenize(&r.text).is_empty() {
            bucket.records.push(r);
        }
    }

    buckets.sort_by_key(|b| (b.earliest.is_none(), b.earliest, b.first_position));

    let mut vocab = Vocab::new();
    let mut groups: Vec<GroupInfo> = Vec::new();
    let mut group_ids: HashMap<&str, GroupId> = HashMap::new();
    let mut tasks = Vec::with_capacity(buckets.len());

    for (task_idx, bucket) in buckets.iter().enumerate() {
        let ideology = IdeologyId(task_idx);
        let (train_raw, dev_raw, test_raw) = if presplit {
            let pick = |s: Split| -> Vec<&RawRecord> {
                bucket
                    .records
                    .iter()
                    .copied()
                    .filter(|r| r.split == Some(s))
                    .collect()
            };
            let mut train = pick(Split::Train);
            train.truncate(opts.train_cap);
            (train, pick(Split::Dev), pick(Split::Test))
        } else {
            split_bucket(bucket, opts, task_idx)?
        };
        if train_raw.is_empty() || dev_raw.is_empty() || test_raw.is_empty() {
            return Err(Error::Stream {
                ideology: bucket.name.to_string(),
                message: format!(
                    "needs at least one record per split (train {}, dev {}, test {})",
                    train_raw.len(),
                    dev_raw.len(),
                    test_raw.len()
                ),
            });
        }

        let mut task_groups = Vec::new();
        let ideology_tokens = tokenize(bucket.name);
        for r in bucket.records.iter() {
            if group_ids.contains_key(r.group.as_str()) {
                continue;
            }
            let id = GroupId(groups.len());
            let tokens: Vec<TokenId> = tokenize(&r.group)
                .iter()
                .chain(&ideology_tokens)
                .map(|t| vocab.insert(t))
                .collect();
            if tokens.is_empty() {
                return Err(Error::Stream {
                    ideology: bucket.name.to_string(),
                    message: format!("group `{}` has no usable name tokens", r.group),
                });
            }
            groups.push(GroupInfo {
                name: r.group.clone(),
                ideology,
                tokens,
            });
            group_ids.insert(&r.group, id);
            task_groups.push(id);
        }

        let to_sample = |r: &RawRecord, vocab: &mut Vocab, grow: bool| Sample {
            tokens: tokenize(&r.text)
                .iter()
                .map(|t| if grow { vocab.insert(t) } else { vocab.lookup(t) })
                .collect(),
            group: group_ids[r.group.as_str()],
            ideology,
        };
        let train: Vec<Sample> = train_raw.iter().map(|r| to_sample(r, &mut vocab, true)).collect();
        let dev = dev_raw.iter().map(|r| to_sample(r, &mut vocab, false)).collect();
        let test = test_raw.iter().map(|r| to_sample(r, &mut vocab, false)).collect();

        tasks.push(Task {
            ideology,
            name: bucket.name.to_string(),
            groups: task_groups,
            train,
            dev,
            test,
            order_key: OrderKey {
                date: bucket.earliest,
                position: bucket.first_position,
            },
        });
    }

    Ok(TaskStream {
        tasks,
        groups,
        vocab,
    })
}

type Splits<'a> = (Vec<&'a RawRecord>, Vec<&'a RawRecord>, Vec<&'a RawRecord>);

fn split_bucket<'a>(
    bucket: &IdeologyBucket<'a>,
    opts: &StreamOptions,
    task_idx: usize,
) -> Result<Splits<'a>> {
    let n = bucket.records.len();
    let n_test = (opts.test_fraction * n as f64).floor() as usize;
    let n_dev = (opts.dev_fraction * n as f64).floor() as usize;
    if n_test == 0 || n_dev == 0 || n_test + n_dev >= n {
        return Err(Error::Stream {
            ideology: bucket.name.to_string(),
            message: format!("{n} records are too few to split"),
        });
    }
    let mut shuffled = bucket.records.clone();
    shuffled.shuffle(&mut rng_for(opts.seed, &[tag::SPLIT, task_idx as u64]));
    let test = shuffled[..n_test].to_vec();
    let dev = shuffled[n_test..n_test + n_dev].to_vec();
    let mut train = shuffled[n_test + n_dev..].to_vec();
    train.truncate(opts.train_cap);
    Ok((train, dev, test))
}
