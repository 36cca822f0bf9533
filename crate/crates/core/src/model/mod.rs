//! Scoring and representation model.
//!
//! A tweet encoder produces `h_x` and, through the posterior head, the
//! Gaussian `q(z|x)`. A single group encoder over group-name plus ideology
//! tokens produces `h_y` and the group prior `p(u|y)`. A decoder
//! reconstructs the tweet from `z`. Scores are cosine similarities between
//! tweet and group representations.

mod checkpoint;
mod config;
mod gaussian;
mod objective;

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use config::{DecoderKind, EncoderKind, ModelConfig, LOGVAR_BOUND};
pub use gaussian::{kl_diag, DiagGaussian};
pub use objective::{ranking_loss, score, LossBreakdown, LossInputs, MemoryItem, Objective};

use rand::Rng as _;

use crate::corpus::{TokenId, BOS, PAD};
use crate::error::{Error, Result};
use crate::numkit::{ParamId, Tape, Tensor, Var};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum EncoderParams {
    MeanPool(Affine),
    Recurrent { w_in: ParamId, w_rec: ParamId, b: ParamId },
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum DecoderParams {
    Bow(Affine),
    Recurrent {
        init: Affine,
        w_in: ParamId,
        w_rec: ParamId,
        b: ParamId,
        out: Affine,
    },
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    embedding: ParamId,
    tweet: EncoderParams,
    group: EncoderParams,
    post_mu: Affine,
    post_lv: Affine,
    prior_mu: Affine,
    prior_lv: Affine,
    decoder: DecoderParams,
}

/// Which representation a forward pass should hand to the scorer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Representation {
    /// Encoder hidden states (the plain ranking backbone).
    Hidden,
    /// Posterior/prior means of the variational heads.
    Latent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

/// Parameters placed on a tape for one forward/backward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

struct Registry {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
}

impl Registry {
    fn add(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.names.push(name.to_string());
        self.shapes.push((rows, cols));
        ParamId(self.names.len() - 1)
    }

    fn affine(&mut self, name: &str, input: usize, output: usize) -> Affine {
        Affine {
            w: self.add(&format!("{name}.w"), input, output),
            b: self.add(&format!("{name}.b"), 1, output),
        }
    }

    fn encoder(&mut self, name: &str, kind: EncoderKind, input: usize, hidden: usize) -> EncoderParams {
        match kind {
            EncoderKind::MeanPoolMlp => EncoderParams::MeanPool(self.affine(name, input, hidden)),
            EncoderKind::Recurrent => EncoderParams::Recurrent {
                w_in: self.add(&format!("{name}.w_in"), input, hidden),
                w_rec: self.add(&format!("{name}.w_rec"), hidden, hidden),
                b: self.add(&format!("{name}.b"), 1, hidden),
            },
        }
    }
}

fn layout_for(cfg: &ModelConfig) -> (Layout, Registry) {
    let mut r = Registry {
        names: Vec::new(),
        shapes: Vec::new(),
    };
    let (v, e, h, l) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.latent_dim);
    let embedding = r.add("embedding", v, e);
    let tweet = r.encoder("tweet", cfg.encoder, e, h);
    let group = r.encoder("group", cfg.encoder, e, h);
    let post_mu = r.affine("posterior.mu", h, l);
    let post_lv = r.affine("posterior.logvar", h, l);
    let prior_mu = r.affine("prior.mu", h, l);
    let prior_lv = r.affine("prior.logvar", h, l);
    let decoder = match cfg.decoder {
        DecoderKind::BagOfWords => DecoderParams::Bow(r.affine("decoder", l, v)),
        DecoderKind::Recurrent => DecoderParams::Recurrent {
            init: r.affine("decoder.init", l, h),
            w_in: r.add("decoder.w_in", e, h),
            w_rec: r.add("decoder.w_rec", h, h),
            b: r.add("decoder.b", 1, h),
            out: r.affine("decoder.out", h, v),
        },
    };
    (
        Layout {
            embedding,
            tweet,
            group,
            post_mu,
            post_lv,
            prior_mu,
            prior_lv,
            decoder,
        },
        r,
    )
}

fn check_sequence(seq: &[TokenId]) -> Result<()> {
    if seq.iter().all(|&t| t == PAD) {
        return Err(Error::Degenerate("empty or all-PAD token sequence".into()));
    }
    Ok(())
}

impl Model {
    /// Randomly initialised model. Weights use Glorot-uniform bounds,
    /// embeddings a small normal, and the PAD row is zero.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (layout, reg) = layout_for(&config);
        let mut params = Vec::with_capacity(reg.shapes.len());
        for (name, &(rows, cols)) in reg.names.iter().zip(&reg.shapes) {
            let t = if name == "embedding" {
                let mut t = Tensor::randn(rows, cols, 0.5, rng);
                t.row_mut(PAD as usize).fill(0.0);
                t
            } else if name.ends_with(".b") || rows == 1 {
                if name.starts_with("posterior.logvar") || name.starts_with("prior.logvar") {
                    Tensor::filled(rows, cols, config.init_logvar)
                } else {
                    Tensor::zeros(rows, cols)
                }
            } else {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                Tensor::uniform(rows, cols, bound, rng)
            };
            params.push(t);
        }
        // keep the generator position independent of layout details
        let _ = rng.random::<u64>();
        Ok(Self {
            config,
            names: reg.names,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Replaces every parameter; shapes must match.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::contract("parameter count mismatch"));
        }
        for (old, new) in self.params.iter().zip(&params) {
            old.same_shape(new, "set_params")?;
        }
        self.params = params;
        Ok(())
    }

    /// Flattens all parameters in registration order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Zeros gradient entries that must stay frozen (the PAD embedding row).
    pub fn mask_frozen(&self, grads: &mut [Tensor]) {
        grads[self.layout.embedding.0]
            .row_mut(PAD as usize)
            .fill(0.0);
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .enumerate()
                .map(|(i, p)| tape.param(ParamId(i), p))
                .collect(),
        }
    }

    fn encode_with(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        enc: EncoderParams,
        seqs: &[&[TokenId]],
    ) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::Degenerate("encode called with no sequences".into()));
        }
        for s in seqs {
            check_sequence(s)?;
        }
        let table = bound.get(self.layout.embedding);
        match enc {
            EncoderParams::MeanPool(a) => {
                let mut ids = Vec::new();
                let mut lens = Vec::with_capacity(seqs.len());
                for s in seqs {
                    let before = ids.len();
                    ids.extend(s.iter().filter(|&&t| t != PAD).map(|&t| t as usize));
                    lens.push(ids.len() - before);
                }
                let emb = tape.gather(table, &ids)?;
                let pooled = tape.segment_mean(emb, &lens)?;
                let pre = tape.affine(pooled, bound.get(a.w), bound.get(a.b))?;
                tape.tanh(pre)
            }
            EncoderParams::Recurrent { w_in, w_rec, b } => {
                let h_dim = self.config.hidden_dim;
                let mut finals = Vec::with_capacity(seqs.len());
                for s in seqs {
                    let ids: Vec<usize> = s.iter().filter(|&&t| t != PAD).map(|&t| t as usize).collect();
                    let emb = tape.gather(table, &ids)?;
                    let mut h = tape.constant(Tensor::zeros(1, h_dim));
                    for step in 0..ids.len() {
                        let x = tape.slice_rows(emb, step, 1)?;
                        h = self.elman_step(tape, x, h, bound.get(w_in), bound.get(w_rec), bound.get(b))?;
                    }
                    finals.push(h);
                }
                tape.concat_rows(&finals)
            }
        }
    }

    fn elman_step(&self, tape: &mut Tape, x: Var, h: Var, w_in: Var, w_rec: Var, b: Var) -> Result<Var> {
        let xi = tape.matmul(x, w_in)?;
        let hr = tape.matmul(h, w_rec)?;
        let s = tape.add(xi, hr)?;
        let s = tape.add_bias(s, b)?;
        tape.tanh(s)
    }

    /// Tweet hidden states `h_x`, one row per sequence.
    pub fn encode_tweets(&self, tape: &mut Tape, bound: &Bound, seqs: &[&[TokenId]]) -> Result<Var> {
        self.encode_with(tape, bound, self.layout.tweet, seqs)
    }

    /// Group hidden states `h_y`, one row per group token list.
    pub fn encode_groups(&self, tape: &mut Tape, bound: &Bound, seqs: &[&[TokenId]]) -> Result<Var> {
        self.encode_with(tape, bound, self.layout.group, seqs)
    }

    fn head(&self, tape: &mut Tape, bound: &Bound, h: Var, mu: Affine, lv: Affine) -> Result<(Var, Var)> {
        let m = tape.affine(h, bound.get(mu.w), bound.get(mu.b))?;
        let raw = tape.affine(h, bound.get(lv.w), bound.get(lv.b))?;
        let l = tape.clamp(raw, -LOGVAR_BOUND, LOGVAR_BOUND)?;
        Ok((m, l))
    }

    /// `(mu_z, logvar_z)` of the posterior `q(z|x)`.
    pub fn posterior_head(&self, tape: &mut Tape, bound: &Bound, h_x: Var) -> Result<(Var, Var)> {
        self.head(tape, bound, h_x, self.layout.post_mu, self.layout.post_lv)
    }

    /// `(mu_u, logvar_u)` of the group prior `p(u|y)`.
    pub fn prior_head(&self, tape: &mut Tape, bound: &Bound, h_y: Var) -> Result<(Var, Var)> {
        self.head(tape, bound, h_y, self.layout.prior_mu, self.layout.prior_lv)
    }

    /// `z = mu + exp(logvar / 2) * noise`; `noise` is a constant on the tape.
    pub fn reparameterize(&self, tape: &mut Tape, mu: Var, logvar: Var, noise: &Tensor) -> Result<Var> {
        let half = tape.scale(logvar, 0.5)?;
        let std = tape.exp(half)?;
        let eps = tape.constant(noise.clone());
        let spread = tape.mul(std, eps)?;
        tape.add(mu, spread)
    }

    /// Summed negative log-likelihood of every sequence given its row of `z`.
    pub fn reconstruction_nll(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z: Var,
        seqs: &[&[TokenId]],
    ) -> Result<Var> {
        let v = self.config.vocab_size;
        if let Some(&bad) = seqs.iter().flat_map(|s| s.iter()).find(|&&t| t as usize >= v) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary of {v}")));
        }
        match self.layout.decoder {
            DecoderParams::Bow(a) => {
                let logits = tape.affine(z, bound.get(a.w), bound.get(a.b))?;
                let targets: Vec<(usize, usize)> = seqs
                    .iter()
                    .enumerate()
                    .flat_map(|(i, s)| s.iter().map(move |&t| (i, t as usize)))
                    .collect();
                tape.nll_rows(logits, &targets)
            }
            DecoderParams::Recurrent {
                init,
                w_in,
                w_rec,
                b,
                out,
            } => {
                let table = bound.get(self.layout.embedding);
                let mut parts = Vec::with_capacity(seqs.len());
                for (i, s) in seqs.iter().enumerate() {
                    let zi = tape.slice_rows(z, i, 1)?;
                    let pre = tape.affine(zi, bound.get(init.w), bound.get(init.b))?;
                    let mut h = tape.tanh(pre)?;
                    let inputs: Vec<usize> = std::iter::once(BOS)
                        .chain(s.iter().copied())
                        .take(s.len())
                        .map(|t| t as usize)
                        .collect();
                    let emb = tape.gather(table, &inputs)?;
                    let mut states = Vec::with_capacity(s.len());
                    for step in 0..s.len() {
                        let x = tape.slice_rows(emb, step, 1)?;
                        h = self.elman_step(tape, x, h, bound.get(w_in), bound.get(w_rec), bound.get(b))?;
                        states.push(h);
                    }
                    let stacked = tape.concat_rows(&states)?;
                    let logits = tape.affine(stacked, bound.get(out.w), bound.get(out.b))?;
                    let targets: Vec<(usize, usize)> =
                        s.iter().enumerate().map(|(k, &t)| (k, t as usize)).collect();
                    parts.push(tape.nll_rows(logits, &targets)?);
                }
                let all = tape.concat_rows(&parts)?;
                tape.sum(all)
            }
        }
    }

    /// Evaluation-mode representations of tweets (`mu_z` or `h_x`), one row each.
    pub fn represent_tweets(&self, seqs: &[&[TokenId]], repr: Representation) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let h = self.encode_tweets(&mut tape, &bound, seqs)?;
        let out = match repr {
            Representation::Hidden => h,
            Representation::Latent => self.posterior_head(&mut tape, &bound, h)?.0,
        };
        Ok(tape.value(out).clone())
    }

    /// Evaluation-mode representations of groups (`mu_u` or `h_y`), one row each.
    pub fn represent_groups(&self, seqs: &[&[TokenId]], repr: Representation) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let h = self.encode_groups(&mut tape, &bound, seqs)?;
        let out = match repr {
            Representation::Hidden => h,
            Representation::Latent => self.prior_head(&mut tape, &bound, h)?.0,
        };
        Ok(tape.value(out).clone())
    }

    /// `(h_x, q(z|x))` for a single tweet.
    pub fn encode_tweet(&self, tokens: &[TokenId]) -> Result<(Tensor, DiagGaussian)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let h = self.encode_tweets(&mut tape, &bound, &[tokens])?;
        let (mu, lv) = self.posterior_head(&mut tape, &bound, h)?;
        let q = DiagGaussian::new(tape.value(mu).data().to_vec(), tape.value(lv).data().to_vec())?;
        Ok((tape.value(h).clone(), q))
    }

    /// `(h_y, p(u|y))` for a single group token list.
    pub fn encode_group(&self, tokens: &[TokenId]) -> Result<(Tensor, DiagGaussian)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let h = self.encode_groups(&mut tape, &bound, &[tokens])?;
        let (mu, lv) = self.prior_head(&mut tape, &bound, h)?;
        let p = DiagGaussian::new(tape.value(mu).data().to_vec(), tape.value(lv).data().to_vec())?;
        Ok((tape.value(h).clone(), p))
    }

    /// Posteriors for many tweets at once.
    pub fn posteriors(&self, seqs: &[&[TokenId]]) -> Result<Vec<DiagGaussian>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let h = self.encode_tweets(&mut tape, &bound, seqs)?;
        let (mu, lv) = self.posterior_head(&mut tape, &bound, h)?;
        let (mu, lv) = (tape.value(mu), tape.value(lv));
        (0..seqs.len())
            .map(|i| DiagGaussian::new(mu.row(i).to_vec(), lv.row(i).to_vec()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    pub(crate) fn tiny(encoder: EncoderKind, decoder: DecoderKind) -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            embed_dim: 5,
            hidden_dim: 6,
            latent_dim: 4,
            encoder,
            decoder,
            ..ModelConfig::default()
        }
    }

    fn model(seed: u64) -> Model {
        Model::new(tiny(EncoderKind::MeanPoolMlp, DecoderKind::BagOfWords), &mut rng_for(seed, &[])).unwrap()
    }

    #[test]
    fn all_pad_is_rejected() {
        let m = model(1);
        assert!(matches!(m.encode_tweet(&[PAD, PAD]), Err(Error::Degenerate(_))));
        assert!(matches!(m.encode_tweet(&[]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn encode_is_deterministic() {
        let m = model(1);
        assert_eq!(m.encode_tweet(&[4, 5, 6]).unwrap(), m.encode_tweet(&[4, 5, 6]).unwrap());
        assert_eq!(m.encode_group(&[7, 8]).unwrap(), m.encode_group(&[7, 8]).unwrap());
    }

    #[test]
    fn encoder_weight_moves_mu() {
        let mut m = model(2);
        let before = m.encode_tweet(&[4, 5]).unwrap().1.mu;
        let id = m.param_id("tweet.w").unwrap();
        m.params_mut()[id.0].data_mut()[0] += 0.5;
        let after = m.encode_tweet(&[4, 5]).unwrap().1.mu;
        assert_ne!(before, after);
    }

    #[test]
    fn distinct_groups_get_distinct_priors() {
        for seed in 0..10 {
            let m = model(seed);
            let a = m.encode_group(&[4, 9]).unwrap().1.mu;
            let b = m.encode_group(&[5, 9]).unwrap().1.mu;
            assert_ne!(a, b, "seed {seed}");
        }
    }

    #[test]
    fn dropping_ideology_changes_group_state() {
        let m = model(3);
        let full = m.encode_group(&[4, 10]).unwrap().0;
        let name_only = m.encode_group(&[4]).unwrap().0;
        assert_ne!(full, name_only);
    }

    #[test]
    fn uniform_decoder_nll_is_log_v() {
        let mut m = Model::new(
            ModelConfig {
                vocab_size: 4,
                ..tiny(EncoderKind::MeanPoolMlp, DecoderKind::BagOfWords)
            },
            &mut rng_for(0, &[]),
        )
        .unwrap();
        let w = m.param_id("decoder.w").unwrap();
        m.params_mut()[w.0].data_mut().fill(0.0);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let z = tape.constant(Tensor::new(1, 4, vec![0.3, -0.1, 2.0, 1.0]).unwrap());
        let nll = m.reconstruction_nll(&mut tape, &bound, z, &[&[2]]).unwrap();
        assert!((tape.scalar(nll) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn decoder_rejects_out_of_vocab() {
        let m = model(0);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let z = tape.constant(Tensor::zeros(1, 4));
        assert!(matches!(
            m.reconstruction_nll(&mut tape, &bound, z, &[&[12]]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn recurrent_variants_run() {
        let m = Model::new(tiny(EncoderKind::Recurrent, DecoderKind::Recurrent), &mut rng_for(4, &[])).unwrap();
        let (h, q) = m.encode_tweet(&[4, 5, 6]).unwrap();
        assert_eq!(h.shape(), (1, 6));
        assert_eq!(q.dim(), 4);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let z = tape.constant(Tensor::new(1, 4, q.mu.clone()).unwrap());
        let nll = m.reconstruction_nll(&mut tape, &bound, z, &[&[4, 5, 6]]).unwrap();
        assert!(tape.scalar(nll) > 0.0);
    }
}
