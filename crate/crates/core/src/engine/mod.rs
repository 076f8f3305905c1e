//! Hybrid engine: one set of weights that alternates between ZeRO-sharded
//! training and tensor-parallel generation.
//!
//! Workers are simulated in-process and run one after another. Gradients are
//! reduced in global item order, so results do not depend on the number of
//! workers.

pub mod ledger;
pub mod shard;
pub mod tp;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::generate::generate_batch;
use crate::model::{Bound, Generation, KVCache, Model, ModelConfig, Session, Strategy, TpLayout};
use crate::tensor::{adam_kernel, AdamConfig, Graph, Tensor, Var};
use crate::vocab::TokenId;

pub use ledger::{Category, Ledger};
pub use shard::{gather_full, partition_ranges, partition_zero, Shard};
pub use tp::{tp_forward, tp_partition};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Infer => "infer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub world_size: usize,
    pub tp: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f32>,
    /// Per-worker byte budget.
    pub memory_budget: Option<u64>,
    /// Sequences generated per call, split across data-parallel replicas.
    pub infer_batch: usize,
    /// KV positions per sequence; prompt plus generation length.
    pub kv_capacity: usize,
}

impl EngineConfig {
    pub fn new(world_size: usize) -> Self {
        EngineConfig {
            world_size,
            tp: 1,
            adam: AdamConfig::default(),
            clip_norm: Some(1.0),
            memory_budget: None,
            infer_batch: 1,
            kv_capacity: 0,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.world_size == 0 || self.tp == 0 {
            return Err(Error::Config("world size and tp degree must be positive".into()));
        }
        if self.world_size % self.tp != 0 {
            return Err(Error::Config(format!(
                "tp degree {} must divide world size {}",
                self.tp, self.world_size
            )));
        }
        if model.n_heads % self.tp != 0 || model.d_ff % self.tp != 0 {
            return Err(Error::Config(format!(
                "tp degree {} must divide n_heads {} and d_ff {}",
                self.tp, model.n_heads, model.d_ff
            )));
        }
        if self.kv_capacity > model.max_seq_len {
            return Err(Error::Config(format!(
                "kv capacity {} exceeds max_seq_len {}",
                self.kv_capacity, model.max_seq_len
            )));
        }
        Ok(())
    }

    fn capacity(&self, model: &ModelConfig) -> usize {
        if self.kv_capacity == 0 {
            model.max_seq_len
        } else {
            self.kv_capacity
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Worker {
    params: Shard,
    m: Vec<f32>,
    v: Vec<f32>,
}

struct InferState {
    model: Model,
    sessions: Vec<Session>,
    weight_bytes: Vec<u64>,
    kv_bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Sum of the per-item losses.
    pub loss: f32,
    pub grad_norm: f32,
    pub clip_scale: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryRow {
    pub mode: Mode,
    pub category: Category,
    pub bytes: u64,
}

pub struct HybridEngine {
    cfg: EngineConfig,
    model_config: ModelConfig,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    workers: Vec<Worker>,
    step: u64,
    mode: Mode,
    infer: Option<InferState>,
    ledger: Ledger,
}

impl HybridEngine {
    /// Shards `model` across workers and enters TRAIN mode.
    pub fn new(model: &Model, cfg: EngineConfig) -> Result<Self> {
        cfg.validate(&model.config)?;
        let shards = partition_zero(&model.params, cfg.world_size)?;
        let mut ledger = Ledger::new(cfg.memory_budget);
        let mut workers = Vec::with_capacity(shards.len());
        for s in shards {
            let n = s.data.len();
            ledger.alloc(s.worker, Category::Params, s.bytes())?;
            ledger.alloc(s.worker, Category::Grads, 4 * n as u64)?;
            ledger.alloc(s.worker, Category::Optimizer, 8 * n as u64)?;
            workers.push(Worker {
                params: s,
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
        }
        let shapes: Vec<Vec<usize>> = model.params.iter().map(|t| t.shape().to_vec()).collect();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut at = 0;
        for s in &shapes {
            offsets.push(at);
            at += s.iter().product::<usize>();
        }
        Ok(HybridEngine {
            cfg,
            model_config: model.config.clone(),
            names: model.param_names(),
            shapes,
            offsets,
            workers,
            step: 0,
            mode: Mode::Train,
            infer: None,
            ledger,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model_config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn shards(&self) -> Vec<Shard> {
        self.workers.iter().map(|w| w.params.clone()).collect()
    }

    pub fn optimizer_bytes(&self, worker: usize) -> u64 {
        let w = &self.workers[worker];
        4 * (w.m.len() + w.v.len()) as u64
    }

    fn require(&self, mode: Mode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::Mode {
                required: mode,
                current: self.mode,
            });
        }
        Ok(())
    }

    /// Gathers the full model from the worker shards.
    pub fn model(&self) -> Result<Model> {
        if let Some(inf) = &self.infer {
            return Ok(inf.model.clone());
        }
        let params = gather_full(&self.shards(), &self.shapes)?;
        Model::from_params(self.model_config.clone(), params)
    }

    /// Parameters, Adam moments and step count, concatenated in canonical
    /// order. Independent of the worker count.
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.step.to_le_bytes());
        for part in [0, 1, 2] {
            for w in &self.workers {
                let src = match part {
                    0 => &w.params.data,
                    1 => &w.m,
                    _ => &w.v,
                };
                for x in src {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    fn worker_of_item(&self, n_items: usize) -> Vec<usize> {
        let mut owner = vec![0; n_items];
        for (w, r) in partition_ranges(n_items, self.cfg.world_size).into_iter().enumerate() {
            for o in &mut owner[r] {
                *o = w;
            }
        }
        owner
    }

    /// One optimizer step over `n_items` independent loss terms.
    ///
    /// `loss(g, bound, i)` builds item `i`'s scalar contribution; the step
    /// minimises their sum. Items are split across data-parallel workers
    /// for activation accounting, and gradients are summed in item order.
    pub fn train_step<F>(&mut self, n_items: usize, lr: f32, mut loss: F) -> Result<StepStats>
    where
        F: for<'g> FnMut(&mut Graph<'g>, &Bound<'g>, usize) -> Result<Var>,
    {
        self.require(Mode::Train)?;
        let model = self.model()?;
        let total: usize = self.workers.iter().map(|w| w.params.data.len()).sum();
        let mut flat = vec![0.0f32; total];
        let mut loss_sum = 0.0f32;
        let owner = self.worker_of_item(n_items);
        for (i, &w) in owner.iter().enumerate() {
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let l = loss(&mut g, &bound, i)?;
            let lv = g.value(l).item()?;
            if !lv.is_finite() {
                return Err(Error::Numeric {
                    name: format!("loss of item {i}"),
                });
            }
            loss_sum += lv;
            g.backward(l)?;
            let act = g.owned_bytes();
            self.ledger.alloc(w, Category::Activations, act)?;
            for (j, &var) in bound.vars.iter().enumerate() {
                if let Some(gr) = g.grad(var) {
                    let off = self.offsets[j];
                    for (acc, x) in flat[off..off + gr.numel()].iter_mut().zip(gr.data()) {
                        *acc += x;
                    }
                }
            }
            self.ledger.free(w, Category::Activations, act)?;
        }
        if let Some(bad) = flat.iter().position(|x| !x.is_finite()) {
            let j = self.offsets.partition_point(|&o| o <= bad) - 1;
            return Err(Error::Numeric {
                name: format!("gradient of {}", self.names[j]),
            });
        }
        let norm = flat.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() as f32;
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        for w in &mut self.workers {
            let r = w.params.range.clone();
            adam_kernel(
                &mut w.params.data,
                &flat[r],
                &mut w.m,
                &mut w.v,
                &self.cfg.adam,
                lr,
                self.step,
                scale,
            );
            w.params.reseal();
        }
        Ok(StepStats {
            loss: loss_sum,
            grad_norm: norm,
            clip_scale: scale,
        })
    }

    /// Moves between TRAIN and INFER. Switching to the current mode is a
    /// no-op. Entering INFER gathers the shards into the tensor-parallel
    /// layout, allocates KV caches and releases gradient and optimizer
    /// memory (the moments are kept off-device until TRAIN resumes). If the
    /// budget is exceeded nothing changes.
    pub fn switch_mode(&mut self, mode: Mode) -> Result<()> {
        if mode == self.mode {
            return Ok(());
        }
        let mut ledger = self.ledger.clone();
        let tp = self.cfg.tp;
        match mode {
            Mode::Infer => {
                let model = self.model()?;
                let layout = Arc::new(TpLayout::new(&model, tp)?);
                let dp = self.cfg.world_size / tp;
                let per_replica = self.cfg.infer_batch.div_ceil(dp).max(1);
                let cap = self.cfg.capacity(&self.model_config);
                let kv_bytes = KVCache::bytes_for(
                    self.model_config.n_layers,
                    per_replica,
                    self.model_config.n_heads / tp,
                    cap,
                    self.model_config.d_head(),
                );
                let mut weight_bytes = Vec::with_capacity(self.workers.len());
                for (i, w) in self.workers.iter().enumerate() {
                    let n = w.params.data.len() as u64;
                    ledger.free(i, Category::Grads, 4 * n)?;
                    ledger.free(i, Category::Optimizer, 8 * n)?;
                }
                for i in 0..self.workers.len() {
                    let wb = layout.rank_weight_bytes(i % tp);
                    ledger.alloc(i, Category::Params, wb)?;
                    ledger.alloc(i, Category::KvCache, kv_bytes)?;
                    weight_bytes.push(wb);
                }
                let sessions = (0..dp)
                    .map(|_| Session::new(layout.clone(), per_replica, cap))
                    .collect::<Result<Vec<_>>>()?;
                self.infer = Some(InferState {
                    model,
                    sessions,
                    weight_bytes,
                    kv_bytes,
                });
            }
            Mode::Train => {
                let inf = self.infer.as_ref().expect("INFER mode holds inference state");
                for (i, w) in self.workers.iter().enumerate() {
                    ledger.free(i, Category::KvCache, inf.kv_bytes)?;
                    ledger.free(i, Category::Params, inf.weight_bytes[i])?;
                    let n = w.params.data.len() as u64;
                    ledger.alloc(i, Category::Grads, 4 * n)?;
                    ledger.alloc(i, Category::Optimizer, 8 * n)?;
                }
                self.infer = None;
            }
        }
        self.ledger = ledger;
        self.mode = mode;
        Ok(())
    }

    fn replica_chunks(&self, n: usize) -> Vec<std::ops::Range<usize>> {
        partition_ranges(n, self.cfg.world_size / self.cfg.tp)
    }

    /// Generates for every prompt; replicas take contiguous slices and
    /// sequence `i` samples from random stream `i`.
    pub fn generate(&mut self, prompts: &[Vec<TokenId>], max_new: usize, strategy: Strategy) -> Result<Vec<Generation>> {
        self.require(Mode::Infer)?;
        let chunks = self.replica_chunks(prompts.len());
        let inf = self.infer.as_mut().expect("INFER mode holds inference state");
        let mut out = Vec::with_capacity(prompts.len());
        for (r, range) in chunks.into_iter().enumerate() {
            if range.is_empty() {
                continue;
            }
            let s = &mut inf.sessions[r];
            if range.len() > s.batch() {
                return Err(Error::Contract(format!(
                    "{} sequences for a replica batch of {}",
                    range.len(),
                    s.batch()
                )));
            }
            out.extend(generate_batch(s, &prompts[range.clone()], max_new, strategy, range.start as u64)?);
        }
        Ok(out)
    }

    /// Per-position outputs for full sequences through the inference layout.
    pub fn forward_infer(&mut self, seqs: &[Vec<TokenId>]) -> Result<Vec<Tensor>> {
        self.require(Mode::Infer)?;
        let chunks = self.replica_chunks(seqs.len());
        let inf = self.infer.as_mut().expect("INFER mode holds inference state");
        let mut out = Vec::with_capacity(seqs.len());
        for (r, range) in chunks.into_iter().enumerate() {
            let s = &mut inf.sessions[r];
            for seq in &seqs[range] {
                out.push(s.prefill(0, seq)?);
            }
        }
        Ok(out)
    }

    /// Bytes per category summed over workers, for the current mode.
    pub fn memory_report(&self) -> Vec<MemoryRow> {
        Category::ALL
            .iter()
            .map(|&c| MemoryRow {
                mode: self.mode,
                category: c,
                bytes: self.ledger.category_total(c),
            })
            .collect()
    }
}

pub fn write_memory_csv(path: impl AsRef<std::path::Path>, rows: &[MemoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mode", "category", "bytes"])?;
    for r in rows {
        w.write_record([r.mode.name(), r.category.name(), &r.bytes.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
