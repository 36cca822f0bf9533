use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{gem_project, EwcState, GemMemory};
use crate::corpus::{GroupId, Sample, TaskStream, TokenId};
use crate::error::{Error, Result};
use crate::memory::MemoryStore;
use crate::model::{LossInputs, MemoryItem, Model, Objective};
use crate::numkit::{Adam, AdamConfig, Tensor};
use crate::rng::{rng_for, tag, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Epoch cap per task.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Epochs without dev-loss improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Memory samples mixed into every step when a replay memory exists.
    #[serde(default = "default_batch")]
    pub replay_batch: usize,
    #[serde(default)]
    pub stratified_replay: bool,
    #[serde(default = "default_adam")]
    pub adam: AdamConfig,
}

fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    32
}
fn default_patience() -> usize {
    3
}
fn default_adam() -> AdamConfig {
    AdamConfig {
        lr: 3e-3,
        ..AdamConfig::default()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            patience: default_patience(),
            replay_batch: default_batch(),
            stratified_replay: false,
            adam: default_adam(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience", "must be positive"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::config("train.adam.lr", "must be positive"));
        }
        Ok(())
    }
}

/// Gradient modification applied after backprop.
#[derive(Clone, Copy, Debug)]
pub enum GradientHook<'a> {
    None,
    Ewc(&'a EwcState),
    Gem(&'a GemMemory),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub best_dev_loss: f64,
    pub steps: usize,
}

pub fn flatten(tensors: &[Tensor]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
}

pub fn unflatten_into(flat: &[f64], tensors: &mut [Tensor]) {
    let mut at = 0;
    for t in tensors {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
}

/// Candidate set plus lookup from group id to candidate index.
pub struct Candidates<'a> {
    pub groups: Vec<GroupId>,
    tokens: Vec<&'a [TokenId]>,
    index: HashMap<GroupId, usize>,
}

impl<'a> Candidates<'a> {
    pub fn new(stream: &'a TaskStream, seen: &[GroupId]) -> Self {
        let mut groups = seen.to_vec();
        groups.sort();
        groups.dedup();
        let tokens = groups.iter().map(|&g| stream.group(g).tokens.as_slice()).collect();
        let index = groups.iter().enumerate().map(|(i, &g)| (g, i)).collect();
        Self { groups, tokens, index }
    }

    pub fn gold(&self, g: GroupId) -> Result<usize> {
        self.index
            .get(&g)
            .copied()
            .ok_or_else(|| Error::Contract(format!("group {} is not among the seen groups", g.0)))
    }

    pub fn inputs<'s>(&self, batch: &'s [&'s Sample]) -> Result<LossInputs<'s>>
    where
        'a: 's,
    {
        Ok(LossInputs {
            groups: self.tokens.clone(),
            batch: batch
                .iter()
                .map(|s| Ok((s.tokens.as_slice(), self.gold(s.group)?)))
                .collect::<Result<_>>()?,
            ..LossInputs::default()
        })
    }
}

/// Trains one model on one task (or on a task union for multitask).
pub struct TaskTrainer<'a> {
    pub stream: &'a TaskStream,
    pub objective: Objective,
    pub config: &'a TrainConfig,
    pub memory: Option<&'a MemoryStore>,
    pub hook: GradientHook<'a>,
    pub seed: u64,
    /// Zero-based task index; selects the random streams.
    pub task: usize,
}

impl TaskTrainer<'_> {
    /// Summed evaluation-mode ranking loss (`mu_z` or `h_x` scoring).
    pub fn dev_loss(&self, model: &Model, dev: &[&Sample], cands: &Candidates) -> Result<f64> {
        let eval = Objective {
            kl_anchor: false,
            replay_task_losses: false,
            ..self.objective
        };
        let mut total = 0.0;
        for chunk in dev.chunks(256) {
            total += eval.loss(model, &cands.inputs(chunk)?)?.ranking;
        }
        Ok(total)
    }

    fn noise(&self, n: usize, model: &Model, rng: &mut Rng) -> Option<Tensor> {
        self.objective
            .variational
            .then(|| Tensor::randn(n, model.config().latent_dim, 1.0, rng))
    }

    fn project_gem(&self, model: &Model, gem: &GemMemory, cands: &Candidates, grads: &mut [Tensor]) -> Result<()> {
        if gem.per_task.is_empty() {
            return Ok(());
        }
        let plain = Objective {
            kl_anchor: false,
            replay_task_losses: false,
            ..self.objective
        };
        let mut constraints = Vec::with_capacity(gem.per_task.len());
        for episodic in &gem.per_task {
            if episodic.is_empty() {
                continue;
            }
            let refs: Vec<&Sample> = episodic.iter().collect();
            let (_, g) = plain.loss_and_grads(model, &cands.inputs(&refs)?)?;
            constraints.push(flatten(&g));
        }
        let projected = gem_project(&flatten(grads), &constraints)?;
        unflatten_into(&projected, grads);
        Ok(())
    }

    pub fn train(&self, model: &mut Model, train: &[&Sample], dev: &[&Sample], seen: &[GroupId]) -> Result<TrainReport> {
        self.config.validate()?;
        let cands = Candidates::new(self.stream, seen);
        let t = self.task as u64;
        let mut shuffle_rng = rng_for(self.seed, &[tag::SHUFFLE, t]);
        let mut noise_rng = rng_for(self.seed, &[tag::NOISE, t]);
        let mut replay_rng = rng_for(self.seed, &[tag::REPLAY, t]);
        let mut adam = Adam::new(self.config.adam);
        let mut report = TrainReport {
            best_dev_loss: f64::INFINITY,
            ..TrainReport::default()
        };
        let mut best_params: Option<Vec<Tensor>> = None;
        let mut stale = 0;
        let mut order: Vec<usize> = (0..train.len()).collect();

        for epoch in 0..self.config.epochs {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle_rng);
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
                let mut inputs = cands.inputs(&batch)?;
                let noise = self.noise(batch.len(), model, &mut noise_rng);
                inputs.batch_noise = noise.as_ref();

                let replayed = match self.memory {
                    Some(m) if !m.is_empty() => {
                        m.replay_batch(self.config.replay_batch, self.config.stratified_replay, &mut replay_rng)
                    }
                    _ => Vec::new(),
                };
                inputs.memory = replayed
                    .iter()
                    .map(|slot| {
                        Ok(MemoryItem {
                            tokens: slot.sample.tokens.as_slice(),
                            gold: cands.gold(slot.sample.group)?,
                            frozen: slot.frozen.as_ref(),
                        })
                    })
                    .collect::<Result<_>>()?;
                let mem_noise = if replayed.is_empty() {
                    None
                } else {
                    self.noise(replayed.len(), model, &mut noise_rng)
                };
                inputs.memory_noise = mem_noise.as_ref();

                let (_, mut grads) = self.objective.loss_and_grads(model, &inputs)?;
                match self.hook {
                    GradientHook::None => {}
                    GradientHook::Ewc(state) => state.add_gradient(model.params(), &mut grads)?,
                    GradientHook::Gem(gem) => self.project_gem(model, gem, &cands, &mut grads)?,
                }
                model.mask_frozen(&mut grads);
                adam.step(model.params_mut(), &grads)?;
                report.steps += 1;
            }
            report.epochs_run = epoch + 1;
            let dev_loss = self.dev_loss(model, dev, &cands)?;
            if dev_loss < report.best_dev_loss {
                report.best_dev_loss = dev_loss;
                report.best_epoch = Some(epoch);
                best_params = Some(model.params().to_vec());
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.config.patience {
                    break;
                }
            }
        }
        if let Some(p) = best_params {
            model.set_params(p)?;
        }
        Ok(report)
    }
}

/// Diagonal Fisher from per-sample ranking-loss gradients on up to `n`
/// samples (a seeded subset when the task has more).
pub fn estimate_fisher(
    model: &Model,
    objective: Objective,
    stream: &TaskStream,
    samples: &[&Sample],
    seen: &[GroupId],
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Err(Error::contract("fisher estimate needs n >= 1"));
    }
    if samples.is_empty() {
        return Err(Error::contract("fisher estimate needs at least one sample"));
    }
    let plain = Objective {
        kl_anchor: false,
        replay_task_losses: false,
        ..objective
    };
    let cands = Candidates::new(stream, seen);
    let mut idx = rand::seq::index::sample(rng, samples.len(), n.min(samples.len())).into_vec();
    idx.sort_unstable();
    let mut acc: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
    for &i in &idx {
        let one = [samples[i]];
        let (_, grads) = plain.loss_and_grads(model, &cands.inputs(&one)?)?;
        for (a, g) in acc.iter_mut().zip(&grads) {
            for (x, &v) in a.data_mut().iter_mut().zip(g.data()) {
                *x += v * v;
            }
        }
    }
    let count = idx.len() as f64;
    for a in &mut acc {
        a.data_mut().iter_mut().for_each(|x| *x /= count);
    }
    Ok(acc)
}
