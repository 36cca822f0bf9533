//! Prediction by cosine argmax over the seen groups, per-task F1 and AvgF1.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{GroupId, Sample, TaskStream, TokenId};
use crate::error::{Error, Result};
use crate::model::{Model, Representation};
use crate::numkit::Tensor;

/// Class set over which macro-F1 is averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MacroUniverse {
    /// Gold labels occurring in the evaluated task's test set.
    #[default]
    TaskGold,
    /// Every group seen so far.
    AllSeen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub seed: u64,
    /// One-based index of the last trained task.
    pub t: usize,
    /// One-based index of the evaluated task.
    pub i: usize,
    pub macro_f1: f64,
    pub micro_f1: f64,
}

pub const CSV_HEADER: &str = "method,seed,t,i,macro_f1,micro_f1";

impl MetricsRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.method, self.seed, self.t, self.i, self.macro_f1, self.micro_f1
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        let bad = || Error::Contract(format!("malformed metrics row `{line}`"));
        if f.len() != 6 {
            return Err(bad());
        }
        Ok(Self {
            method: f[0].to_string(),
            seed: f[1].parse().map_err(|_| bad())?,
            t: f[2].parse().map_err(|_| bad())?,
            i: f[3].parse().map_err(|_| bad())?,
            macro_f1: f[4].parse().map_err(|_| bad())?,
            micro_f1: f[5].parse().map_err(|_| bad())?,
        })
    }
}

/// Serialises records under [`CSV_HEADER`].
pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

pub fn from_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == CSV_HEADER => {}
        _ => return Err(Error::contract("metrics CSV lacks the expected header")),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(MetricsRecord::parse_csv_line)
        .collect()
}

/// Argmax of `scores`, ties going to the lowest group id. Duplicate
/// candidates count once.
pub fn argmax_group(candidates: &[GroupId], scores: &[f64]) -> Result<GroupId> {
    if candidates.is_empty() {
        return Err(Error::contract("prediction needs at least one candidate group"));
    }
    if candidates.len() != scores.len() {
        return Err(Error::contract("one score per candidate required"));
    }
    let mut best: Option<(GroupId, f64)> = None;
    for (&g, &s) in candidates.iter().zip(scores) {
        best = match best {
            Some((bg, bs)) if bs > s || (bs == s && bg <= g) => Some((bg, bs)),
            _ => Some((g, s)),
        };
    }
    Ok(best.expect("non-empty").0)
}

fn unit_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Scores tweets against candidate groups in evaluation mode and predicts.
pub struct Predictor<'a> {
    model: &'a Model,
    repr: Representation,
    candidates: Vec<GroupId>,
    groups: Tensor,
}

impl<'a> Predictor<'a> {
    pub fn new(model: &'a Model, repr: Representation, stream: &TaskStream, seen: &[GroupId]) -> Result<Self> {
        let candidates: Vec<GroupId> = seen.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        if candidates.is_empty() {
            return Err(Error::contract("prediction needs at least one candidate group"));
        }
        let tokens: Vec<&[TokenId]> = candidates.iter().map(|&g| stream.group(g).tokens.as_slice()).collect();
        let groups = unit_rows(&model.represent_groups(&tokens, repr)?);
        Ok(Self {
            model,
            repr,
            candidates,
            groups,
        })
    }

    pub fn candidates(&self) -> &[GroupId] {
        &self.candidates
    }

    /// Cosine scores of each tweet against each candidate.
    pub fn scores(&self, tweets: &[&[TokenId]]) -> Result<Tensor> {
        let reps = unit_rows(&self.model.represent_tweets(tweets, self.repr)?);
        reps.matmul_t(&self.groups)
    }

    pub fn predict(&self, tweets: &[&[TokenId]]) -> Result<Vec<GroupId>> {
        const CHUNK: usize = 256;
        let mut out = Vec::with_capacity(tweets.len());
        for chunk in tweets.chunks(CHUNK) {
            let s = self.scores(chunk)?;
            for r in 0..s.rows() {
                out.push(argmax_group(&self.candidates, s.row(r))?);
            }
        }
        Ok(out)
    }
}

/// Single-sample convenience wrapper around [`Predictor`].
pub fn predict(
    model: &Model,
    repr: Representation,
    stream: &TaskStream,
    tokens: &[TokenId],
    seen: &[GroupId],
) -> Result<GroupId> {
    Ok(Predictor::new(model, repr, stream, seen)?.predict(&[tokens])?[0])
}

/// `(macro, micro)` F1. Every predicted or gold class contributes to the
/// micro counts; macro averages per-class F1 over `classes` (zero for
/// classes with no true positives).
pub fn f1_scores(golds: &[usize], preds: &[usize], classes: &[usize]) -> Result<(f64, f64)> {
    if golds.len() != preds.len() {
        return Err(Error::Contract(format!(
            "{} gold labels but {} predictions",
            golds.len(),
            preds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::contract("f1 over an empty sample set"));
    }
    // class -> (tp, fp, fn)
    let mut counts: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for (&g, &p) in golds.iter().zip(preds) {
        if g == p {
            counts.entry(g).or_default().0 += 1;
        } else {
            counts.entry(p).or_default().1 += 1;
            counts.entry(g).or_default().2 += 1;
        }
    }
    let f1 = |(tp, fp, fnn): (usize, usize, usize)| {
        let d = 2 * tp + fp + fnn;
        if d == 0 {
            0.0
        } else {
            2.0 * tp as f64 / d as f64
        }
    };
    let total = counts.values().fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    let micro = f1(total);
    let classes: BTreeSet<usize> = classes.iter().copied().collect();
    let macro_f1 = if classes.is_empty() {
        0.0
    } else {
        classes
            .iter()
            .map(|c| f1(counts.get(c).copied().unwrap_or_default()))
            .sum::<f64>()
            / classes.len() as f64
    };
    Ok((macro_f1, micro))
}

/// F1 of a trained model on one test set against the given candidates.
pub fn evaluate_samples(
    predictor: &Predictor,
    samples: &[Sample],
    universe: MacroUniverse,
) -> Result<(f64, f64)> {
    let tweets: Vec<&[TokenId]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
    let preds: Vec<usize> = predictor.predict(&tweets)?.into_iter().map(|g| g.0).collect();
    let golds: Vec<usize> = samples.iter().map(|s| s.group.0).collect();
    let classes: Vec<usize> = match universe {
        MacroUniverse::TaskGold => golds.clone(),
        MacroUniverse::AllSeen => predictor.candidates().iter().map(|g| g.0).collect(),
    };
    f1_scores(&golds, &preds, &classes)
}

/// `(AvgF1 macro, AvgF1 micro)` after task `t`: the mean of `F1_{t,i}` for
/// `i = 1..=t`.
pub fn avg_f1(records: &[MetricsRecord], t: usize) -> Result<(f64, f64)> {
    if t == 0 {
        return Err(Error::contract("avg_f1 needs t >= 1"));
    }
    let mut sum = (0.0, 0.0);
    for i in 1..=t {
        let r = records
            .iter()
            .find(|r| r.t == t && r.i == i)
            .ok_or_else(|| Error::Contract(format!("missing F1 record for (t={t}, i={i})")))?;
        sum.0 += r.macro_f1;
        sum.1 += r.micro_f1;
    }
    Ok((sum.0 / t as f64, sum.1 / t as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(t: usize, i: usize, ma: f64, mi: f64) -> MetricsRecord {
        MetricsRecord {
            method: "m".into(),
            seed: 0,
            t,
            i,
            macro_f1: ma,
            micro_f1: mi,
        }
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_group(&[GroupId(4)], &[-0.3]).unwrap(), GroupId(4));
        assert_eq!(argmax_group(&[GroupId(1), GroupId(2)], &[0.2, 0.9]).unwrap(), GroupId(2));
        assert_eq!(argmax_group(&[GroupId(3), GroupId(1)], &[0.5, 0.5]).unwrap(), GroupId(1));
        assert!(argmax_group(&[], &[]).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_scores(&[1, 2], &[1, 2], &[1, 2]).unwrap(), (1.0, 1.0));
        let (ma, mi) = f1_scores(&[0, 0, 1], &[0, 1, 1], &[0, 1]).unwrap();
        assert!((ma - 2.0 / 3.0).abs() < 1e-12);
        assert!((mi - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f1_scores(&[0, 1], &[7, 7], &[0, 1]).unwrap(), (0.0, 0.0));
        assert!(f1_scores(&[0], &[0, 1], &[0]).is_err());
    }

    #[test]
    fn avg_examples() {
        assert_eq!(avg_f1(&[rec(1, 1, 0.7, 0.8)], 1).unwrap(), (0.7, 0.8));
        let r = [rec(2, 1, 0.0, 0.5), rec(2, 2, 0.0, 0.3)];
        assert!((avg_f1(&r, 2).unwrap().1 - 0.4).abs() < 1e-12);
        let mut all: Vec<_> = (1..15).map(|i| rec(15, i, 0.0, 0.0)).collect();
        all.push(rec(15, 15, 0.9, 0.9));
        assert!((avg_f1(&all, 15).unwrap().1 - 0.06).abs() < 1e-12);
        match avg_f1(&r[..1], 2) {
            Err(Error::Contract(m)) => assert!(m.contains("t=2, i=2")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_roundtrip() {
        let r = vec![rec(1, 1, 0.25, 1.0 / 3.0), rec(2, 1, 0.0, 1.0)];
        assert_eq!(from_csv(&to_csv(&r)).unwrap(), r);
    }

    proptest! {
        #[test]
        fn micro_is_accuracy_inside_gold_set(pairs in prop::collection::vec((0..5usize, 0..5usize), 1..80)) {
            let golds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let classes: BTreeSet<usize> = golds.iter().copied().collect();
            let classes: Vec<usize> = classes.into_iter().collect();
            let preds: Vec<usize> = pairs.iter().map(|p| classes[p.1 % classes.len()]).collect();
            let acc = golds.iter().zip(&preds).filter(|(g, p)| g == p).count() as f64 / golds.len() as f64;
            let (_, micro) = f1_scores(&golds, &preds, &classes).unwrap();
            prop_assert!((micro - acc).abs() < 1e-12);
        }

        #[test]
        fn avg_is_permutation_invariant_and_bounded(vals in prop::collection::vec(0.0..1.0f64, 1..10)) {
            let t = vals.len();
            let mut recs: Vec<_> = vals.iter().enumerate().map(|(i, &v)| rec(t, i + 1, v, v)).collect();
            let a = avg_f1(&recs, t).unwrap();
            recs.reverse();
            let b = avg_f1(&recs, t).unwrap();
            prop_assert!((a.1 - b.1).abs() < 1e-12);
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(a.1 >= lo - 1e-12 && a.1 <= hi + 1e-12);
        }

        #[test]
        fn argmax_is_scale_invariant(scores in prop::collection::vec(-1.0..1.0f64, 1..8), c in 0.1..10.0f64) {
            let cands: Vec<GroupId> = (0..scores.len()).map(GroupId).collect();
            let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
            prop_assert_eq!(argmax_group(&cands, &scores).unwrap(), argmax_group(&cands, &scaled).unwrap());
        }
    }
}
