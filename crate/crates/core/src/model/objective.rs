use serde::{Deserialize, Serialize};

use super::{DiagGaussian, Model};
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::numkit::{cosine, Tape, Tensor, Var};

/// Cosine score between a tweet representation and a group representation.
pub fn score(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine(&Tensor::vector(a.to_vec())?, &Tensor::vector(b.to_vec())?)
}

/// `sum_i max(0, m - (pos - neg_i))`.
pub fn ranking_loss(pos: f64, negs: &[f64], margin: f64) -> Result<f64> {
    if !(margin > 0.0) {
        return Err(Error::contract("ranking margin must be positive"));
    }
    Ok(negs.iter().map(|n| (margin - (pos - n)).max(0.0)).sum())
}

/// Which terms enter the training loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    /// Score sampled `z` against prior means and add reconstruction and
    /// prior KL terms. When false the model is a plain ranker over `h_x, h_y`.
    pub variational: bool,
    /// Anchor memory posteriors to their frozen copies.
    pub kl_anchor: bool,
    /// Apply ranking (and, if variational, reconstruction) to memory samples.
    pub replay_task_losses: bool,
    pub margin: f64,
}

impl Objective {
    pub fn vrl(margin: f64) -> Self {
        Self {
            variational: true,
            kl_anchor: true,
            replay_task_losses: true,
            margin,
        }
    }

    pub fn ranker(margin: f64) -> Self {
        Self {
            variational: false,
            kl_anchor: false,
            replay_task_losses: true,
            margin,
        }
    }
}

/// A replayed sample; `gold` indexes into [`LossInputs::groups`].
#[derive(Clone, Debug)]
pub struct MemoryItem<'a> {
    pub tokens: &'a [TokenId],
    pub gold: usize,
    pub frozen: Option<&'a DiagGaussian>,
}

/// One training step's worth of data.
#[derive(Clone, Debug, Default)]
pub struct LossInputs<'a> {
    /// Token lists of every seen group; this is the candidate set.
    pub groups: Vec<&'a [TokenId]>,
    /// Current-task samples as `(tokens, gold index into groups)`.
    pub batch: Vec<(&'a [TokenId], usize)>,
    /// Standard-normal noise, one row per batch sample; zeros when absent.
    pub batch_noise: Option<&'a Tensor>,
    pub memory: Vec<MemoryItem<'a>>,
    pub memory_noise: Option<&'a Tensor>,
}

/// Values of every loss term; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ranking: f64,
    pub reconstruction: f64,
    pub kl_prior: f64,
    pub memory_ranking: f64,
    pub memory_reconstruction: f64,
    pub kl_anchor: f64,
    pub total: f64,
}

struct Terms {
    ranking: Var,
    recon: Option<Var>,
    kl: Option<Var>,
}

impl Objective {
    fn noise_or_zeros(noise: Option<&Tensor>, n: usize, l: usize) -> Result<Tensor> {
        match noise {
            Some(t) if t.shape() == (n, l) => Ok(t.clone()),
            Some(t) => Err(Error::Dimension {
                op: "noise",
                left: (n, l),
                right: t.shape(),
            }),
            None => Ok(Tensor::zeros(n, l)),
        }
    }

    /// Ranking, reconstruction and prior-KL terms for one set of samples.
    #[allow(clippy::too_many_arguments)]
    fn sample_terms(
        &self,
        model: &Model,
        tape: &mut Tape,
        bound: &super::Bound,
        group_repr: Var,
        prior: Option<(Var, Var)>,
        seqs: &[&[TokenId]],
        gold: &[usize],
        noise: Option<&Tensor>,
        with_recon: bool,
    ) -> Result<(Terms, Option<(Var, Var)>)> {
        let h_x = model.encode_tweets(tape, bound, seqs)?;
        if !self.variational {
            let scores = tape.cosine_rows(h_x, group_repr)?;
            let ranking = tape.hinge_rank(scores, gold, self.margin)?;
            return Ok((
                Terms {
                    ranking,
                    recon: None,
                    kl: None,
                },
                None,
            ));
        }
        let (mu_z, lv_z) = model.posterior_head(tape, bound, h_x)?;
        let noise = Self::noise_or_zeros(noise, seqs.len(), model.config().latent_dim)?;
        let z = model.reparameterize(tape, mu_z, lv_z, &noise)?;
        let scores = tape.cosine_rows(z, group_repr)?;
        let ranking = tape.hinge_rank(scores, gold, self.margin)?;
        let recon = if with_recon {
            Some(model.reconstruction_nll(tape, bound, z, seqs)?)
        } else {
            None
        };
        let kl = match prior {
            Some((mu_u, lv_u)) => {
                let mp = tape.gather(mu_u, gold)?;
                let lp = tape.gather(lv_u, gold)?;
                Some(tape.kl_diag(mu_z, lv_z, mp, lp)?)
            }
            None => None,
        };
        Ok((Terms { ranking, recon, kl }, Some((mu_z, lv_z))))
    }

    /// Records the loss graph on `tape` and returns the scalar loss node.
    pub fn build(
        &self,
        model: &Model,
        tape: &mut Tape,
        bound: &super::Bound,
        inputs: &LossInputs,
    ) -> Result<(Var, LossBreakdown)> {
        if inputs.groups.is_empty() {
            return Err(Error::contract("loss needs at least one seen group"));
        }
        let n_groups = inputs.groups.len();
        for &(_, g) in &inputs.batch {
            if g >= n_groups {
                return Err(Error::contract("ground-truth group missing from the seen groups"));
            }
        }
        for m in &inputs.memory {
            if m.gold >= n_groups {
                return Err(Error::contract("memory ground-truth group missing from the seen groups"));
            }
        }
        let l = model.config().latent_dim;
        let anchoring = self.variational && self.kl_anchor && !inputs.memory.is_empty();
        if anchoring {
            for m in &inputs.memory {
                match m.frozen {
                    None => return Err(Error::contract("memory item lacks a frozen posterior")),
                    Some(f) if f.dim() != l => {
                        return Err(Error::Checkpoint(format!(
                            "frozen posterior has dim {} but the model latent dim is {l}",
                            f.dim()
                        )))
                    }
                    _ => {}
                }
            }
        }

        let h_y = model.encode_groups(tape, bound, &inputs.groups)?;
        let (group_repr, prior) = if self.variational {
            let (mu_u, lv_u) = model.prior_head(tape, bound, h_y)?;
            (mu_u, Some((mu_u, lv_u)))
        } else {
            (h_y, None)
        };

        let mut parts: Vec<Var> = Vec::new();
        let mut out = LossBreakdown::default();

        if !inputs.batch.is_empty() {
            let seqs: Vec<&[TokenId]> = inputs.batch.iter().map(|b| b.0).collect();
            let gold: Vec<usize> = inputs.batch.iter().map(|b| b.1).collect();
            let (t, _) = self.sample_terms(
                model,
                tape,
                bound,
                group_repr,
                prior,
                &seqs,
                &gold,
                inputs.batch_noise,
                true,
            )?;
            out.ranking = tape.scalar(t.ranking);
            parts.push(t.ranking);
            if let Some(r) = t.recon {
                out.reconstruction = tape.scalar(r);
                parts.push(r);
            }
            if let Some(k) = t.kl {
                out.kl_prior = tape.scalar(k);
                parts.push(k);
            }
        }

        if !inputs.memory.is_empty() && (anchoring || self.replay_task_losses) {
            let seqs: Vec<&[TokenId]> = inputs.memory.iter().map(|m| m.tokens).collect();
            let gold: Vec<usize> = inputs.memory.iter().map(|m| m.gold).collect();
            let (t, post) = self.sample_terms(
                model,
                tape,
                bound,
                group_repr,
                None,
                &seqs,
                &gold,
                inputs.memory_noise,
                self.replay_task_losses,
            )?;
            if self.replay_task_losses {
                out.memory_ranking = tape.scalar(t.ranking);
                parts.push(t.ranking);
                if let Some(r) = t.recon {
                    out.memory_reconstruction = tape.scalar(r);
                    parts.push(r);
                }
            }
            if anchoring {
                let (mu_z, lv_z) = post.expect("variational path yields a posterior");
                let mut fm = Vec::with_capacity(seqs.len() * l);
                let mut fl = Vec::with_capacity(seqs.len() * l);
                for m in &inputs.memory {
                    let f = m.frozen.expect("checked above");
                    fm.extend_from_slice(&f.mu);
                    fl.extend_from_slice(&f.logvar);
                }
                let fm = tape.constant(Tensor::new(seqs.len(), l, fm)?);
                let fl = tape.constant(Tensor::new(seqs.len(), l, fl)?);
                let k = tape.kl_diag(mu_z, lv_z, fm, fl)?;
                out.kl_anchor = tape.scalar(k);
                parts.push(k);
            }
        }

        if parts.is_empty() {
            let zero = tape.constant(Tensor::scalar(0.0));
            return Ok((zero, out));
        }
        let mut total = parts[0];
        for &p in &parts[1..] {
            total = tape.add(total, p)?;
        }
        out.total = tape.scalar(total);
        Ok((total, out))
    }

    /// Loss value and a dense gradient per parameter (zeros off the loss path).
    pub fn loss_and_grads(&self, model: &Model, inputs: &LossInputs) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let (loss, breakdown) = self.build(model, &mut tape, &bound, inputs)?;
        let grads = tape.backward(loss)?;
        let dense = model
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                grads
                    .get(crate::numkit::ParamId(i))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()))
            })
            .collect();
        Ok((breakdown, dense))
    }

    /// Loss value only.
    pub fn loss(&self, model: &Model, inputs: &LossInputs) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        Ok(self.build(model, &mut tape, &bound, inputs)?.1)
    }

    /// The current-task loss (memory ignored).
    pub fn loss_current(&self, model: &Model, inputs: &LossInputs) -> Result<f64> {
        let current = LossInputs {
            memory: Vec::new(),
            memory_noise: None,
            ..inputs.clone()
        };
        Ok(self.loss(model, &current)?.total)
    }

    /// The full loss including memory replay and anchoring.
    pub fn loss_total(&self, model: &Model, inputs: &LossInputs) -> Result<f64> {
        Ok(self.loss(model, inputs)?.total)
    }
}
