use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method, MemorySelection, Wiring};
use crate::baselines::{estimate_fisher, EwcState, GemMemory, GradientHook, TaskTrainer, TrainReport};
use crate::corpus::{build_stream, gen_synthetic, load_jsonl, Sample, TaskStream, TokenId};
use crate::error::{Error, Result};
use crate::eval::{evaluate_samples, from_csv, to_csv, MetricsRecord, Predictor};
use crate::memory::{Candidate, MemoryStore};
use crate::model::{Checkpoint, Model, ModelConfig, Representation};
use crate::numkit::Tensor;
use crate::rng::{rng_for, tag};
use crate::soinn::SoinnNetwork;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
const STATE_FILE: &str = "state.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedManifest {
    pub seed: u64,
    /// Last task whose training, hooks, evaluation and checkpoint finished.
    pub completed_tasks: usize,
    pub total_tasks: usize,
    pub task_wall_secs: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_csv: PathBuf,
    pub train_reports: Vec<TrainReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub method: Method,
    pub wiring: Wiring,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub metrics_csv: PathBuf,
    pub complete: bool,
    pub seeds: Vec<SeedManifest>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read(&path)?;
        serde_json::from_slice(&text).map_err(|e| Error::Report(vec![format!("{}: {e}", path.display())]))
    }
}

/// Progress of one seed, committed after every task.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct SeedState {
    config_hash: String,
    completed: usize,
    task_wall_secs: Vec<f64>,
    checkpoints: Vec<PathBuf>,
    train_reports: Vec<TrainReport>,
    ewc_lambda: Option<f64>,
}

pub fn load_stream(config: &ExperimentConfig) -> Result<TaskStream> {
    match (&config.data.jsonl, &config.data.synthetic) {
        (Some(path), None) => {
            let (records, _warnings) = load_jsonl(path, config.data.lenient)?;
            build_stream(&records, &config.data.stream)
        }
        (None, Some(s)) => gen_synthetic(s),
        _ => Err(Error::config("data", "set exactly one of `jsonl` and `synthetic`")),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

fn repr_of(wiring: &Wiring) -> Representation {
    if wiring.variational {
        Representation::Latent
    } else {
        Representation::Hidden
    }
}

fn represent(model: &Model, samples: &[&Sample], repr: Representation) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut cols = 0;
    for chunk in samples.chunks(256) {
        let tweets: Vec<&[TokenId]> = chunk.iter().map(|s| s.tokens.as_slice()).collect();
        let t = model.represent_tweets(&tweets, repr)?;
        cols = t.cols();
        data.extend_from_slice(t.data());
    }
    Tensor::new(samples.len(), cols, data)
}

struct SeedRun<'a> {
    config: &'a ExperimentConfig,
    stream: &'a TaskStream,
    model_config: ModelConfig,
    wiring: Wiring,
    seed: u64,
    dir: PathBuf,
    hash: String,
    vocab_hash: String,
}

struct Progress {
    model: Model,
    memory: MemoryStore,
    ewc: Option<EwcState>,
    gem: GemMemory,
    records: Vec<MetricsRecord>,
    state: SeedState,
}

impl SeedRun<'_> {
    fn ckpt_dir(&self) -> PathBuf {
        self.dir.join("ckpt")
    }

    fn fresh(&self) -> Result<Progress> {
        let model = Model::new(self.model_config.clone(), &mut rng_for(self.seed, &[tag::INIT]))?;
        Ok(Progress {
            model,
            memory: MemoryStore::new(self.config.memory.capacity),
            ewc: None,
            gem: GemMemory::default(),
            records: Vec::new(),
            state: SeedState {
                config_hash: self.hash.clone(),
                completed: 0,
                task_wall_secs: Vec::new(),
                checkpoints: Vec::new(),
                train_reports: Vec::new(),
                ewc_lambda: None,
            },
        })
    }

    fn restore(&self) -> Result<Option<Progress>> {
        let state_path = self.dir.join(STATE_FILE);
        if !state_path.exists() {
            return Ok(None);
        }
        let state: SeedState = serde_json::from_slice(&std::fs::read(&state_path)?)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", state_path.display())))?;
        if state.config_hash != self.hash {
            return Err(Error::Checkpoint(format!(
                "{} was written by a different configuration (hash {})",
                self.dir.display(),
                state.config_hash
            )));
        }
        if state.completed == 0 {
            return Ok(None);
        }
        let t = state.completed;
        let ckpt = Checkpoint::read(&self.ckpt_dir().join(format!("task{t}.ckpt")))?;
        let model = ckpt.restore_model(Some(&self.vocab_hash))?;
        let ewc = match state.ewc_lambda {
            Some(lambda) => {
                let anchor: Vec<Tensor> = ckpt.with_prefix("ewc.anchor.").map(|(_, t)| t.clone()).collect();
                let fisher: Vec<Tensor> = ckpt.with_prefix("ewc.fisher.").map(|(_, t)| t.clone()).collect();
                Some(EwcState::new(anchor, fisher, lambda).map_err(|e| Error::Checkpoint(e.to_string()))?)
            }
            None => None,
        };
        let memory = if self.wiring.memory == MemorySelection::None {
            MemoryStore::new(self.config.memory.capacity)
        } else {
            MemoryStore::load(&self.ckpt_dir().join(format!("memory_task{t}.json")))?
        };
        let gem = if self.wiring.gem {
            let p = self.ckpt_dir().join(format!("gem_task{t}.json"));
            serde_json::from_slice(&std::fs::read(&p)?)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))?
        } else {
            GemMemory::default()
        };
        let records = from_csv(&std::fs::read_to_string(self.dir.join(METRICS_FILE))?)?;
        Ok(Some(Progress {
            model,
            memory,
            ewc,
            gem,
            records,
            state,
        }))
    }

    fn commit(&self, p: &Progress, t: usize) -> Result<()> {
        let dir = self.ckpt_dir();
        let mut ckpt = Checkpoint::from_model(&p.model, &self.vocab_hash);
        ckpt.header.extra = serde_json::json!({
            "seed": self.seed,
            "task": t,
            "method": self.config.method.as_str(),
        });
        if let Some(ewc) = &p.ewc {
            for (name, (a, f)) in p.model.param_names().iter().zip(ewc.anchor.iter().zip(&ewc.fisher)) {
                ckpt.push(format!("ewc.anchor.{name}"), a.clone());
                ckpt.push(format!("ewc.fisher.{name}"), f.clone());
            }
        }
        let ckpt_path = dir.join(format!("task{t}.ckpt"));
        ckpt.write(&ckpt_path)?;
        if self.wiring.memory != MemorySelection::None {
            p.memory.save(&dir.join(format!("memory_task{t}.json")))?;
        }
        if self.wiring.gem {
            write_atomic(&dir.join(format!("gem_task{t}.json")), &serde_json::to_vec(&p.gem)?)?;
        }
        write_atomic(&self.dir.join(METRICS_FILE), to_csv(&p.records).as_bytes())?;
        write_atomic(&self.dir.join(STATE_FILE), &serde_json::to_vec_pretty(&p.state)?)?;
        Ok(())
    }

    fn evaluate(&self, model: &Model, t: usize, records: &mut Vec<MetricsRecord>) -> Result<()> {
        let seen = self.stream.seen_groups(t);
        let predictor = Predictor::new(model, repr_of(&self.wiring), self.stream, &seen)?;
        for i in 1..=t {
            let (macro_f1, micro_f1) =
                evaluate_samples(&predictor, &self.stream.tasks[i - 1].test, self.config.eval.macro_universe)?;
            records.push(MetricsRecord {
                method: self.config.method.as_str().to_string(),
                seed: self.seed,
                t,
                i,
                macro_f1,
                micro_f1,
            });
        }
        Ok(())
    }

    fn trainer<'b>(&'b self, p: &'b Progress, task: usize) -> TaskTrainer<'b> {
        let hook = match (&p.ewc, self.wiring.gem) {
            (Some(e), _) => GradientHook::Ewc(e),
            (None, true) => GradientHook::Gem(&p.gem),
            _ => GradientHook::None,
        };
        TaskTrainer {
            stream: self.stream,
            objective: self
                .wiring
                .objective(self.model_config.margin, self.config.objective.replay_task_losses),
            config: &self.config.train,
            memory: (self.wiring.memory != MemorySelection::None).then_some(&p.memory),
            hook,
            seed: self.seed,
            task,
        }
    }

    fn end_of_task(&self, p: &mut Progress, t: usize) -> Result<()> {
        let task = &self.stream.tasks[t - 1];
        let train: Vec<&Sample> = task.train.iter().collect();
        match self.wiring.memory {
            MemorySelection::None => {}
            MemorySelection::Soinn => {
                let reps = represent(&p.model, &train, repr_of(&self.wiring))?;
                let labels: Vec<usize> = train.iter().map(|s| s.group.0).collect();
                let mut net = SoinnNetwork::new(self.config.soinn.clone())?;
                net.train(&reps, &labels)?;
                net.close_period();
                let ids: Vec<usize> = (0..train.len()).collect();
                let ranked = net.rank_samples(&ids)?;
                let keep: Vec<usize> = ranked.into_iter().take(p.memory.quota(t)).collect();
                let frozen = self.frozen_for(&p.model, keep.iter().map(|&i| train[i]))?;
                let cands = keep
                    .iter()
                    .zip(frozen)
                    .map(|(&i, f)| {
                        Ok(Candidate {
                            sample: train[i].clone(),
                            frozen: f,
                            density: net.sample_density(i)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                p.memory.end_of_task_write(cands, t)?;
            }
            MemorySelection::Random => {
                let frozen = self.frozen_for(&p.model, train.iter().copied())?;
                let cands = train
                    .iter()
                    .zip(frozen)
                    .map(|(s, f)| Candidate {
                        sample: (*s).clone(),
                        frozen: f,
                        density: 0.0,
                    })
                    .collect();
                let mut rng = rng_for(self.seed, &[tag::MEMORY, (t - 1) as u64]);
                p.memory.end_of_task_write_random(cands, t, &mut rng)?;
            }
        }
        if self.wiring.ewc {
            let objective = self.wiring.objective(self.model_config.margin, false);
            let mut rng = rng_for(self.seed, &[tag::FISHER, (t - 1) as u64]);
            let fisher = estimate_fisher(
                &p.model,
                objective,
                self.stream,
                &train,
                &self.stream.seen_groups(t),
                self.config.ewc.fisher_samples,
                &mut rng,
            )?;
            p.ewc = Some(EwcState::new(p.model.params().to_vec(), fisher, self.config.ewc.lambda)?);
            p.state.ewc_lambda = Some(self.config.ewc.lambda);
        }
        if self.wiring.gem {
            let mut rng = rng_for(self.seed, &[tag::EPISODIC, (t - 1) as u64]);
            p.gem.add_task(&task.train, self.config.gem.per_task, &mut rng);
        }
        Ok(())
    }

    /// Frozen posteriors when the method anchors memory, otherwise `None`s.
    fn frozen_for<'s>(
        &self,
        model: &Model,
        samples: impl Iterator<Item = &'s Sample>,
    ) -> Result<Vec<Option<crate::model::DiagGaussian>>> {
        let samples: Vec<&Sample> = samples.collect();
        if !self.wiring.variational {
            return Ok(vec![None; samples.len()]);
        }
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(256) {
            let tweets: Vec<&[TokenId]> = chunk.iter().map(|s| s.tokens.as_slice()).collect();
            out.extend(model.posteriors(&tweets)?.into_iter().map(Some));
        }
        Ok(out)
    }

    fn run(&self, resume: bool, halt_after: Option<usize>) -> Result<SeedManifest> {
        std::fs::create_dir_all(self.ckpt_dir())?;
        let mut p = match resume.then(|| self.restore()).transpose()?.flatten() {
            Some(p) => p,
            None => self.fresh()?,
        };
        let total = self.stream.len();

        if self.wiring.multitask {
            if p.state.completed < total {
                let start = Instant::now();
                let train: Vec<&Sample> = self.stream.tasks.iter().flat_map(|t| &t.train).collect();
                let dev: Vec<&Sample> = self.stream.tasks.iter().flat_map(|t| &t.dev).collect();
                let all = self.stream.seen_groups(total);
                let mut model = p.model.clone();
                let report = self.trainer(&p, 0).train(&mut model, &train, &dev, &all)?;
                p.model = model;
                p.records.clear();
                for t in 1..=total {
                    if self.config.eval.evaluates_after(t) {
                        self.evaluate(&p.model, t, &mut p.records)?;
                    }
                }
                p.state.train_reports = vec![report];
                p.state.task_wall_secs = vec![start.elapsed().as_secs_f64()];
                p.state.completed = total;
                p.state.checkpoints = vec![PathBuf::from(format!("ckpt/task{total}.ckpt"))];
                self.commit(&p, total)?;
            }
        } else {
            for t in p.state.completed + 1..=total {
                if halt_after.is_some_and(|h| t > h) {
                    break;
                }
                let start = Instant::now();
                let task = &self.stream.tasks[t - 1];
                let train: Vec<&Sample> = task.train.iter().collect();
                let dev: Vec<&Sample> = task.dev.iter().collect();
                let seen = self.stream.seen_groups(t);
                let mut model = p.model.clone();
                let report = self.trainer(&p, t - 1).train(&mut model, &train, &dev, &seen)?;
                p.model = model;
                self.end_of_task(&mut p, t)?;
                if self.config.eval.evaluates_after(t) {
                    self.evaluate(&p.model, t, &mut p.records)?;
                }
                p.state.train_reports.push(report);
                p.state.task_wall_secs.push(start.elapsed().as_secs_f64());
                p.state.checkpoints.push(PathBuf::from(format!("ckpt/task{t}.ckpt")));
                p.state.completed = t;
                self.commit(&p, t)?;
            }
        }
        Ok(SeedManifest {
            seed: self.seed,
            completed_tasks: p.state.completed,
            total_tasks: total,
            task_wall_secs: p.state.task_wall_secs.clone(),
            checkpoints: p.state.checkpoints.clone(),
            metrics_csv: PathBuf::from(format!("seed{}", self.seed)).join(METRICS_FILE),
            train_reports: p.state.train_reports.clone(),
        })
    }
}

/// Runs every seed of `config`, resuming from per-task checkpoints when
/// `resume` is set. Returns [`Error::Halted`] when `halt_after` stopped the
/// run early; the partial manifest is written either way.
pub fn run_experiment(config: &ExperimentConfig, resume: bool) -> Result<RunManifest> {
    config.validate()?;
    let stream = load_stream(config)?;
    let model_config = ModelConfig {
        vocab_size: stream.vocab.len(),
        ..config.model.clone()
    };
    model_config.validate()?;
    let dir = config.resolved_output_dir();
    std::fs::create_dir_all(&dir)?;
    write_atomic(&dir.join("config.toml"), config.to_toml_string()?.as_bytes())?;
    let hash = config.hash()?;
    let vocab_hash = stream.vocab.hash();
    let wiring = config.method.wiring();

    let run_seed = |&seed: &u64| -> Result<SeedManifest> {
        SeedRun {
            config,
            stream: &stream,
            model_config: model_config.clone(),
            wiring,
            seed,
            dir: dir.join(format!("seed{seed}")),
            hash: hash.clone(),
            vocab_hash: vocab_hash.clone(),
        }
        .run(resume, config.halt_after)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<SeedManifest>> = pool.install(|| config.seeds.par_iter().map(run_seed).collect());
    let seeds = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    let mut merged = Vec::new();
    for s in &seeds {
        merged.extend(from_csv(&std::fs::read_to_string(dir.join(&s.metrics_csv))?)?);
    }
    write_atomic(&dir.join(METRICS_FILE), to_csv(&merged).as_bytes())?;
    let complete = seeds.iter().all(|s| s.completed_tasks == s.total_tasks);
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        method: config.method,
        wiring,
        config_hash: hash,
        config: config.clone(),
        vocab_size: stream.vocab.len(),
        vocab_hash,
        metrics_csv: PathBuf::from(METRICS_FILE),
        complete,
        seeds,
    };
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    if !complete {
        let completed_task = manifest.seeds.iter().map(|s| s.completed_tasks).min().unwrap_or(0);
        return Err(Error::Halted { completed_task, dir });
    }
    Ok(manifest)
}
