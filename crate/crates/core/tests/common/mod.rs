#![allow(dead_code)]

use std::path::Path;

use lifelong::corpus::{SynthConfig, TokenId, NUM_SPECIAL};
use lifelong::model::{DecoderKind, DiagGaussian, EncoderKind, LossInputs, MemoryItem, Model, ModelConfig, Objective};
use lifelong::numkit::Tensor;
use lifelong::rng::Rng;
use lifelong::runner::{ExperimentConfig, Method};
use lifelong::soinn::Metric;
use rand::Rng as _;

/// A small random loss instance that owns every buffer `LossInputs` borrows.
pub struct Instance {
    pub model: Model,
    pub groups: Vec<Vec<TokenId>>,
    pub batch: Vec<(Vec<TokenId>, usize)>,
    pub batch_noise: Tensor,
    pub memory: Vec<(Vec<TokenId>, usize, DiagGaussian)>,
    pub memory_noise: Tensor,
}

fn seq(rng: &mut Rng, vocab: usize, max_len: usize) -> Vec<TokenId> {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| rng.random_range(NUM_SPECIAL..vocab) as TokenId).collect()
}

impl Instance {
    pub fn random(rng: &mut Rng, encoder: EncoderKind, decoder: DecoderKind) -> Self {
        let vocab = rng.random_range(NUM_SPECIAL + 2..=12);
        let latent = rng.random_range(1..=4);
        let config = ModelConfig {
            vocab_size: vocab,
            embed_dim: rng.random_range(2..=4),
            hidden_dim: rng.random_range(2..=5),
            latent_dim: latent,
            margin: 0.5,
            encoder,
            decoder,
            init_logvar: rng.random_range(-1.0..1.0),
        };
        let mut model = Model::new(config, rng).unwrap();
        for p in model.params_mut() {
            for v in p.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let n_groups = rng.random_range(2..=4);
        let groups = (0..n_groups).map(|_| seq(rng, vocab, 3)).collect();
        let n_batch = rng.random_range(1..=3);
        let batch = (0..n_batch)
            .map(|_| (seq(rng, vocab, 5), rng.random_range(0..n_groups)))
            .collect();
        let n_mem = rng.random_range(1..=3);
        let memory = (0..n_mem)
            .map(|_| {
                let mu = (0..latent).map(|_| rng.random_range(-1.0..1.0)).collect();
                let lv = (0..latent).map(|_| rng.random_range(-1.0..1.0)).collect();
                (
                    seq(rng, vocab, 5),
                    rng.random_range(0..n_groups),
                    DiagGaussian::new(mu, lv).unwrap(),
                )
            })
            .collect();
        Self {
            batch_noise: Tensor::randn(n_batch, latent, 1.0, rng),
            memory_noise: Tensor::randn(n_mem, latent, 1.0, rng),
            model,
            groups,
            batch,
            memory,
        }
    }

    pub fn inputs(&self, with_memory: bool) -> LossInputs<'_> {
        let mut inputs = LossInputs {
            groups: self.groups.iter().map(Vec::as_slice).collect(),
            batch: self.batch.iter().map(|(s, g)| (s.as_slice(), *g)).collect(),
            batch_noise: Some(&self.batch_noise),
            ..LossInputs::default()
        };
        if with_memory {
            inputs.memory = self
                .memory
                .iter()
                .map(|(s, g, f)| MemoryItem {
                    tokens: s.as_slice(),
                    gold: *g,
                    frozen: Some(f),
                })
                .collect();
            inputs.memory_noise = Some(&self.memory_noise);
        }
        inputs
    }
}

/// Relative error between the tape gradient and a central finite
/// difference over every parameter scalar, measured in the L2 norm. The
/// denominator is floored at 1e-6 so vanishing gradients compare against
/// difference rounding noise in absolute terms.
pub fn gradient_rel_error(model: &Model, objective: &Objective, inputs: &LossInputs) -> f64 {
    let (_, analytic) = objective.loss_and_grads(model, inputs).unwrap();
    let h = 1e-5;
    let mut probe = model.clone();
    let (mut diff, mut an, mut nu) = (0.0, 0.0, 0.0);
    for k in 0..analytic.len() {
        for j in 0..analytic[k].len() {
            let orig = probe.params()[k].data()[j];
            probe.params_mut()[k].data_mut()[j] = orig + h;
            let up = objective.loss(&probe, inputs).unwrap().total;
            probe.params_mut()[k].data_mut()[j] = orig - h;
            let down = objective.loss(&probe, inputs).unwrap().total;
            probe.params_mut()[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k].data()[j];
            diff += (a - numeric) * (a - numeric);
            an += a * a;
            nu += numeric * numeric;
        }
    }
    diff.sqrt() / an.sqrt().max(nu.sqrt()).max(1e-6)
}

/// Nearest point to `g` in the cone `{v : <v, c_k> >= 0}` for 2-D inputs.
/// Brute force over a grid of ray directions; along a feasible ray `u` the
/// nearest point is `max(0, <g, u>) u`, and the origin is always feasible.
pub fn gem_grid_oracle(g: &[f64], constraints: &[Vec<f64>]) -> [f64; 2] {
    let steps = 400_000;
    let mut best = [0.0, 0.0];
    let mut best_d = g[0] * g[0] + g[1] * g[1];
    for s in 0..steps {
        let theta = std::f64::consts::TAU * s as f64 / steps as f64;
        let u = [theta.cos(), theta.sin()];
        if constraints.iter().any(|c| c[0] * u[0] + c[1] * u[1] < 0.0) {
            continue;
        }
        let r = (g[0] * u[0] + g[1] * u[1]).max(0.0);
        let v = [r * u[0], r * u[1]];
        let d = (v[0] - g[0]).powi(2) + (v[1] - g[1]).powi(2);
        if d < best_d {
            best_d = d;
            best = v;
        }
    }
    best
}

/// Synthetic stream used by the forgetting and ablation checks.
pub fn forgetting_stream() -> SynthConfig {
    SynthConfig::new(5, 3, 200, 0.05, 0)
}

pub fn experiment(method: Method, seeds: Vec<u64>, out: &Path) -> ExperimentConfig {
    let mut cfg: ExperimentConfig = ExperimentConfig::from_toml_str(&format!(
        "method = \"{}\"\nseeds = [0]\noutput_dir = \"\"\n[data.synthetic]\n\
         tasks = 1\ngroups_per_task = 1\nvocab_per_task = 1\noverlap = 0.0\n\
         train_per_task = 1\ndev_per_task = 1\ntest_per_task = 1\nseed = 0\n",
        method.as_str()
    ))
    .unwrap();
    cfg.seeds = seeds;
    cfg.output_dir = out.to_path_buf();
    cfg.data.synthetic = Some(forgetting_stream());
    cfg.memory.capacity = 200;
    cfg.soinn.metric = Metric::Cosine;
    cfg.train.batch_size = 16;
    cfg.threads = 1;
    cfg
}
