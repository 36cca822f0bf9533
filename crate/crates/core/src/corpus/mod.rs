//! Dataset ingestion and the ordered task stream.

mod jaccard;
mod jsonl;
mod stream;
mod synth;
mod tokenize;
mod vocab;

pub use jaccard::{avg_jaccard, topic_words};
pub use jsonl::{load_jsonl, write_jsonl, IngestWarning, RawRecord, Split};
pub use stream::{build_stream, StreamOptions};
pub use synth::{gen_synthetic, synthetic_records, SynthConfig};
pub use tokenize::tokenize;
pub use vocab::{TokenId, Vocab, BOS, EOS, NUM_SPECIAL, PAD, UNK};

use std::collections::BTreeSet;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

/// Global group id (the candidate label space spans every task).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdeologyId(pub usize);

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<TokenId>,
    pub group: GroupId,
    pub ideology: IdeologyId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupInfo {
    pub name: String,
    pub ideology: IdeologyId,
    /// Group encoder input: tokens of the group name followed by the ideology name.
    pub tokens: Vec<TokenId>,
}

/// Sort key of a task: the earliest post date when known, then first
/// appearance in the source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OrderKey {
    pub date: Option<NaiveDate>,
    pub position: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub ideology: IdeologyId,
    pub name: String,
    pub groups: Vec<GroupId>,
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
    pub order_key: OrderKey,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub groups: Vec<GroupInfo>,
    pub vocab: Vocab,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Candidate set after observing the first `t` tasks.
    pub fn seen_groups(&self, t: usize) -> Vec<GroupId> {
        let set: BTreeSet<GroupId> = self
            .tasks
            .iter()
            .take(t)
            .flat_map(|task| task.groups.iter().copied())
            .collect();
        set.into_iter().collect()
    }

    pub fn group(&self, id: GroupId) -> &GroupInfo {
        &self.groups[id.0]
    }
}
