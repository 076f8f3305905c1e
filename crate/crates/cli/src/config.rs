//! Run configuration read from JSON.

use std::path::{Path, PathBuf};

use deskrlhf_core::engine::EngineConfig;
use deskrlhf_core::model::{HeadKind, ModelConfig};
use deskrlhf_core::pipeline::ppo::PpoConfig;
use deskrlhf_core::pipeline::rm::RmConfig;
use deskrlhf_core::pipeline::sft::SftConfig;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "DESKRLHF_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Deployment {
    #[default]
    SingleGpu,
    SingleNode,
    MultiNode,
}

impl Deployment {
    /// Simulated world size.
    pub fn world_size(self) -> usize {
        match self {
            Deployment::SingleGpu => 1,
            Deployment::SingleNode => 8,
            Deployment::MultiNode => 64,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
            .map_err(|_| Error::Config(format!("unknown deployment {s:?}; expected single_gpu, single_node or multi_node")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub path: PathBuf,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub actor: String,
    pub reward: String,
    pub deployment: Deployment,
    /// Tensor-parallel degree during generation.
    pub tp: usize,
    /// `"byte"` or `"symbols:<alphabet>"`.
    pub tokenizer: String,
    pub max_seq_len: Option<usize>,
    pub datasets: Vec<DatasetSpec>,
    /// Records drawn by the blend; all of them when absent.
    pub records: Option<usize>,
    /// SFT, reward and PPO shares of the blended records.
    pub split: [f64; 3],
    /// Fraction of each stage's share held out for evaluation.
    pub heldout: f64,
    pub sft: SftConfig,
    pub rm: RmConfig,
    pub ppo: PpoConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            actor: "tiny".into(),
            reward: "tiny".into(),
            deployment: Deployment::SingleGpu,
            tp: 1,
            tokenizer: "byte".into(),
            max_seq_len: None,
            datasets: Vec::new(),
            records: None,
            split: deskrlhf_core::data::DEFAULT_SPLIT,
            heldout: 0.1,
            sft: SftConfig::default(),
            rm: RmConfig::default(),
            ppo: PpoConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Reads JSON, resolves dataset paths against the file's directory and
    /// applies the output-dir environment override.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for d in &mut cfg.datasets {
            if d.path.is_relative() {
                d.path = base.join(&d.path);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.apply_env();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.output_dir = dir.into();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(&self.actor, HeadKind::Lm)?;
        self.model_config(&self.reward, HeadKind::Scalar)?;
        if self.datasets.is_empty() {
            return Err(Error::Config("no datasets configured".into()));
        }
        if self.datasets.iter().any(|d| !(d.weight >= 0.0)) {
            return Err(Error::Config("dataset weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.heldout) {
            return Err(Error::Config(format!("heldout fraction {} outside [0, 1)", self.heldout)));
        }
        if self.tp == 0 || self.deployment.world_size() % self.tp != 0 {
            return Err(Error::Config(format!(
                "tp {} must divide world size {}",
                self.tp,
                self.deployment.world_size()
            )));
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> Result<Box<dyn deskrlhf_core::data::Tokenizer>> {
        Ok(deskrlhf_core::data::tokenizer_from_spec(&self.tokenizer)?)
    }

    /// Preset with the tokenizer's vocabulary and the configured context.
    pub fn model_config(&self, preset: &str, head: HeadKind) -> Result<ModelConfig> {
        let mut c = ModelConfig::preset(preset, head)?;
        c.vocab_size = self.tokenizer()?.vocab_size();
        if let Some(n) = self.max_seq_len {
            c.max_seq_len = n;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn engine(&self, infer_batch: usize, kv_capacity: usize) -> EngineConfig {
        let mut e = EngineConfig::new(self.deployment.world_size());
        e.tp = self.tp;
        e.infer_batch = infer_batch;
        e.kv_capacity = kv_capacity;
        e
    }

    /// Per-stage seeds derived from the run seed.
    pub fn seeded(&self) -> (SftConfig, RmConfig, PpoConfig) {
        let mut s = self.sft.clone();
        let mut r = self.rm.clone();
        let mut p = self.ppo.clone();
        s.seed = self.seed;
        r.seed = self.seed.wrapping_add(1);
        p.seed = self.seed.wrapping_add(2);
        (s, r, p)
    }
}
