use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::TrainConfig;
use crate::corpus::{StreamOptions, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::MacroUniverse;
use crate::model::{ModelConfig, Objective};
use crate::soinn::SoinnConfig;

/// Overrides the root under which relative output directories are created.
pub const OUTPUT_ROOT_ENV: &str = "LIFELONG_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    VrlSoinn,
    VrlSoinnNoKlmem,
    VrlRmr,
    Finetune,
    FinetuneRmr,
    FinetuneSoinn,
    Ewc,
    Gem,
    Multitask,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::VrlSoinn,
        Method::VrlSoinnNoKlmem,
        Method::VrlRmr,
        Method::Finetune,
        Method::FinetuneRmr,
        Method::FinetuneSoinn,
        Method::Ewc,
        Method::Gem,
        Method::Multitask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::VrlSoinn => "vrl-soinn",
            Method::VrlSoinnNoKlmem => "vrl-soinn-no-klmem",
            Method::VrlRmr => "vrl-rmr",
            Method::Finetune => "finetune",
            Method::FinetuneRmr => "finetune-rmr",
            Method::FinetuneSoinn => "finetune-soinn",
            Method::Ewc => "ewc",
            Method::Gem => "gem",
            Method::Multitask => "multitask",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn wiring(self) -> Wiring {
        let base = Wiring {
            variational: false,
            kl_anchor: false,
            memory: MemorySelection::None,
            ewc: false,
            gem: false,
            multitask: false,
        };
        match self {
            Method::VrlSoinn => Wiring {
                variational: true,
                kl_anchor: true,
                memory: MemorySelection::Soinn,
                ..base
            },
            Method::VrlSoinnNoKlmem => Wiring {
                variational: true,
                memory: MemorySelection::Soinn,
                ..base
            },
            Method::VrlRmr => Wiring {
                variational: true,
                kl_anchor: true,
                memory: MemorySelection::Random,
                ..base
            },
            Method::Finetune => base,
            Method::FinetuneRmr => Wiring {
                memory: MemorySelection::Random,
                ..base
            },
            Method::FinetuneSoinn => Wiring {
                memory: MemorySelection::Soinn,
                ..base
            },
            Method::Ewc => Wiring { ewc: true, ..base },
            Method::Gem => Wiring { gem: true, ..base },
            Method::Multitask => Wiring {
                multitask: true,
                ..base
            },
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemorySelection {
    None,
    Soinn,
    Random,
}

/// Which loss terms and hooks a method switches on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wiring {
    pub variational: bool,
    pub kl_anchor: bool,
    pub memory: MemorySelection,
    pub ewc: bool,
    pub gem: bool,
    pub multitask: bool,
}

impl Wiring {
    pub fn objective(&self, margin: f64, replay_task_losses: bool) -> Objective {
        Objective {
            variational: self.variational,
            kl_anchor: self.kl_anchor,
            replay_task_losses,
            margin,
        }
    }

    /// Names of the wiring switches that differ between two methods.
    pub fn diff(&self, other: &Wiring) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.variational != other.variational {
            out.push("variational");
        }
        if self.kl_anchor != other.kl_anchor {
            out.push("kl_anchor");
        }
        if self.memory != other.memory {
            out.push("memory");
        }
        if self.ewc != other.ewc {
            out.push("ewc");
        }
        if self.gem != other.gem {
            out.push("gem");
        }
        if self.multitask != other.multitask {
            out.push("multitask");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// JSONL corpus; relative paths resolve against the config file.
    #[serde(default)]
    pub jsonl: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SynthConfig>,
    /// Split options for JSONL input (synthetic streams carry their own).
    #[serde(default)]
    pub stream: StreamOptions,
    /// Skip malformed JSONL lines instead of failing.
    #[serde(default)]
    pub lenient: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    #[serde(default = "default_capacity")]
    pub capacity: usize,
}

fn default_capacity() -> usize {
    1000
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            capacity: default_capacity(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EwcConfig {
    #[serde(default = "default_ewc_lambda")]
    pub lambda: f64,
    #[serde(default = "default_fisher_samples")]
    pub fisher_samples: usize,
}

fn default_ewc_lambda() -> f64 {
    2e6
}
fn default_fisher_samples() -> usize {
    1000
}

impl Default for EwcConfig {
    fn default() -> Self {
        Self {
            lambda: default_ewc_lambda(),
            fisher_samples: default_fisher_samples(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GemConfig {
    #[serde(default = "default_gem_per_task")]
    pub per_task: usize,
}

fn default_gem_per_task() -> usize {
    100
}

impl Default for GemConfig {
    fn default() -> Self {
        Self {
            per_task: default_gem_per_task(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub macro_universe: MacroUniverse,
    /// Tasks after which to evaluate; empty means after every task.
    #[serde(default)]
    pub checkpoints: Vec<usize>,
}

impl EvalConfig {
    pub fn evaluates_after(&self, t: usize) -> bool {
        self.checkpoints.is_empty() || self.checkpoints.contains(&t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Apply ranking and reconstruction losses to replayed samples.
    #[serde(default = "default_true")]
    pub replay_task_losses: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            replay_task_losses: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub soinn: SoinnConfig,
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ewc: EwcConfig,
    #[serde(default)]
    pub gem: GemConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Stop (resumably) after this many tasks.
    #[serde(default)]
    pub halt_after: Option<usize>,
    /// Worker threads for running seeds in parallel (0 = all cores).
    #[serde(default)]
    pub threads: usize,
}

impl ExperimentConfig {
    /// Parses TOML; errors carry the dotted path of the offending key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::config(
                if path == "." { "<root>".to_string() } else { path },
                inner.message().to_string(),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(j) = &cfg.data.jsonl {
            if j.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.data.jsonl = Some(dir.join(j));
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<root>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        match (&self.data.jsonl, &self.data.synthetic) {
            (Some(_), Some(_)) => return Err(Error::config("data", "set exactly one of `jsonl` and `synthetic`")),
            (None, None) => return Err(Error::config("data", "one of `jsonl` or `synthetic` is required")),
            (None, Some(s)) => s.validate()?,
            _ => {}
        }
        if self.model.vocab_size != 0 {
            return Err(Error::config("model.vocab_size", "is derived from the corpus; leave it unset"));
        }
        ModelConfig {
            vocab_size: 1,
            ..self.model.clone()
        }
        .validate()?;
        self.soinn.validate()?;
        self.train.validate()?;
        let wiring = self.method.wiring();
        if wiring.memory != MemorySelection::None && self.memory.capacity == 0 {
            return Err(Error::config("memory.capacity", "replay methods need a positive capacity"));
        }
        if wiring.ewc {
            if !(self.ewc.lambda >= 0.0) {
                return Err(Error::config("ewc.lambda", "must be non-negative"));
            }
            if self.ewc.fisher_samples == 0 {
                return Err(Error::config("ewc.fisher_samples", "must be positive"));
            }
        }
        if wiring.gem && self.gem.per_task == 0 {
            return Err(Error::config("gem.per_task", "must be positive"));
        }
        if self.eval.checkpoints.contains(&0) {
            return Err(Error::config("eval.checkpoints", "tasks are numbered from 1"));
        }
        if self.halt_after == Some(0) {
            return Err(Error::config("halt_after", "must be at least 1"));
        }
        Ok(())
    }

    /// Output directory after applying the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Canonical JSON of everything that affects results (output location,
    /// halting and thread count excluded), keys sorted.
    pub fn canonical_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(map) = v.as_object_mut() {
            map.remove("output_dir");
            map.remove("halt_after");
            map.remove("threads");
        }
        Ok(serde_json::to_string(&v)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(format!("{:x}", Sha256::digest(self.canonical_json()?.as_bytes())))
    }
}
