use std::collections::{BTreeSet, HashMap};

use super::{TaskStream, TokenId, Vocab};
use crate::error::{Error, Result};

/// The `k` most frequent non-special tokens of a task's training split.
/// Frequency ties go to the lower token id; `k` clamps to what was observed.
pub fn topic_words(stream: &TaskStream, task: usize, k: usize) -> BTreeSet<TokenId> {
    let mut counts: HashMap<TokenId, usize> = HashMap::new();
    for s in &stream.tasks[task].train {
        for &t in s.tokens.iter().filter(|&&t| !Vocab::is_special(t)) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut ranked: Vec<(TokenId, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(k).map(|(t, _)| t).collect()
}

pub(crate) fn jaccard(a: &BTreeSet<TokenId>, b: &BTreeSet<TokenId>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Per task, the mean Jaccard index between its topic words and those of
/// every other task.
pub fn avg_jaccard(stream: &TaskStream, k: usize) -> Result<Vec<f64>> {
    let n = stream.len();
    if n < 2 {
        return Err(Error::contract("avg_jaccard needs at least two tasks"));
    }
    let words: Vec<_> = (0..n).map(|t| topic_words(stream, t, k)).collect();
    Ok((0..n)
        .map(|i| {
            let total: f64 = (0..n).filter(|&j| j != i).map(|j| jaccard(&words[i], &words[j])).sum();
            total / (n - 1) as f64
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_synthetic, SynthConfig};

    fn set(ids: &[TokenId]) -> BTreeSet<TokenId> {
        ids.iter().copied().collect()
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&set(&[4, 5]), &set(&[4, 5])), 1.0);
        assert_eq!(jaccard(&set(&[4, 5]), &set(&[6, 7])), 0.0);
        // {a,b,c} vs {b,c,d}
        assert_eq!(jaccard(&set(&[4, 5, 6]), &set(&[5, 6, 7])), 0.5);
    }

    #[test]
    fn disjoint_synthetic_tasks_score_zero() {
        let cfg = SynthConfig::new(3, 2, 30, 0.0, 4);
        let s = gen_synthetic(&cfg).unwrap();
        let scores = avg_jaccard(&s, 30).unwrap();
        assert!(scores.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identical_tasks_score_one() {
        let mut cfg = SynthConfig::new(1, 2, 30, 1.0, 4);
        cfg.train_per_task = 200;
        let mut s = gen_synthetic(&cfg).unwrap();
        let mut twin = s.tasks[0].clone();
        twin.name = "twin".into();
        s.tasks.push(twin);
        assert_eq!(avg_jaccard(&s, 10).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn k_clamps() {
        let s = gen_synthetic(&SynthConfig::new(2, 2, 10, 0.0, 1)).unwrap();
        assert!(topic_words(&s, 0, 1000).len() <= 10);
        assert!(avg_jaccard(&gen_synthetic(&SynthConfig::new(1, 2, 10, 0.0, 1)).unwrap(), 5).is_err());
    }
}
