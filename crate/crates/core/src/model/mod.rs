//! GPT-style pre-LN transformer used for every model role.
//!
//! The same architecture carries either a language-model head (actor,
//! reference) or a scalar head (critic, reward). Training and
//! [`Model::forward_full`] go through the autodiff [`Graph`]; cached decoding
//! goes through the dense kernels in [`infer`].

pub mod checkpoint;
pub mod generate;
pub mod infer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::vocab::{TokenId, BYTE_VOCAB_SIZE, PAD};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use generate::{Generation, Strategy};
pub use infer::{KVCache, Session, TpLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Lm,
    Scalar,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Lm => "lm",
            HeadKind::Scalar => "scalar",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub head_kind: HeadKind,
}

/// `(name, layers, heads, d_model, d_ff)`; names follow the OPT family the
/// toy sizes stand in for.
const PRESETS: &[(&str, usize, usize, usize, usize)] = &[
    ("tiny", 2, 2, 32, 128),
    ("opt-125m-toy", 2, 4, 64, 256),
    ("opt-350m-toy", 4, 4, 128, 512),
    ("opt-1.3b-toy", 6, 6, 192, 768),
    ("opt-2.7b-toy", 6, 8, 256, 1024),
    ("opt-6.7b-toy", 8, 8, 256, 1024),
    ("opt-13b-toy", 8, 8, 320, 1280),
    ("opt-30b-toy", 10, 8, 384, 1536),
    ("opt-66b-toy", 12, 8, 448, 1792),
];

pub const DEFAULT_MAX_SEQ_LEN: usize = 256;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for the reserved tokens",
                self.vocab_size
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Resolves a preset by name. Accepts `facebook/opt-13b`, `opt-13b` and
    /// `opt-13b-toy` as the same preset.
    pub fn preset(name: &str, head_kind: HeadKind) -> Result<Self> {
        let key = name.trim().to_ascii_lowercase();
        let key = key.strip_prefix("facebook/").unwrap_or(&key);
        let key = if key.ends_with("-toy") || key == "tiny" {
            key.to_string()
        } else {
            format!("{key}-toy")
        };
        let &(_, n_layers, n_heads, d_model, d_ff) = PRESETS
            .iter()
            .find(|p| p.0 == key)
            .ok_or_else(|| Error::Config(format!("unknown model preset {name:?}")))?;
        Ok(ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_ff,
            vocab_size: BYTE_VOCAB_SIZE,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            head_kind,
        })
    }

    pub fn preset_names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|p| p.0)
    }

    pub fn with_head(&self, head_kind: HeadKind) -> Self {
        ModelConfig {
            head_kind,
            ..self.clone()
        }
    }

    /// Parameter names and shapes in canonical order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            for (suffix, shape) in [
                ("ln1.gamma", vec![d]),
                ("ln1.beta", vec![d]),
                ("attn.wq", vec![d, d]),
                ("attn.bq", vec![d]),
                ("attn.wk", vec![d, d]),
                ("attn.bk", vec![d]),
                ("attn.wv", vec![d, d]),
                ("attn.bv", vec![d]),
                ("attn.wo", vec![d, d]),
                ("attn.bo", vec![d]),
                ("ln2.gamma", vec![d]),
                ("ln2.beta", vec![d]),
                ("mlp.w1", vec![d, f]),
                ("mlp.b1", vec![f]),
                ("mlp.w2", vec![f, d]),
                ("mlp.b2", vec![d]),
            ] {
                out.push((format!("layers.{l}.{suffix}"), shape));
            }
        }
        out.push(("ln_f.gamma".into(), vec![d]));
        out.push(("ln_f.beta".into(), vec![d]));
        match self.head_kind {
            HeadKind::Lm => out.push(("lm_head".into(), vec![d, v])),
            HeadKind::Scalar => {
                out.push(("value_head.w".into(), vec![d, 1]));
                out.push(("value_head.b".into(), vec![1]));
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.param_specs().into_iter().map(|(n, _)| n).collect()
    }

    pub fn num_params(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Index arithmetic over the canonical parameter order.
pub(crate) mod idx {
    pub const TOK_EMB: usize = 0;
    pub const POS_EMB: usize = 1;
    pub const PER_LAYER: usize = 16;
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const WQ: usize = 2;
    pub const BQ: usize = 3;
    pub const WK: usize = 4;
    pub const BK: usize = 5;
    pub const WV: usize = 6;
    pub const BV: usize = 7;
    pub const WO: usize = 8;
    pub const BO: usize = 9;
    pub const LN2_G: usize = 10;
    pub const LN2_B: usize = 11;
    pub const W1: usize = 12;
    pub const B1: usize = 13;
    pub const W2: usize = 14;
    pub const B2: usize = 15;

    pub fn layer(l: usize, which: usize) -> usize {
        2 + l * PER_LAYER + which
    }

    pub fn final_base(n_layers: usize) -> usize {
        2 + n_layers * PER_LAYER
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Tensor>,
}

/// Per-position model output for a `[batch][len]` token array.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelOutput {
    /// `[batch, len, vocab]`
    Logits(Tensor),
    /// `[batch, len]`
    Scalars(Tensor),
}

impl Model {
    /// Seeded initialisation: N(0, 0.02) weights, residual output
    /// projections scaled by 1/sqrt(2·layers), unit LN gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let resid_std = 0.02 / (2.0 * config.n_layers as f32).sqrt();
        let params = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with("gamma") {
                    Tensor::ones(&shape)
                } else if name.ends_with("beta") || shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                    Tensor::randn(&shape, resid_std, &mut rng)
                } else {
                    Tensor::randn(&shape, 0.02, &mut rng)
                }
            })
            .collect();
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(Error::ConfigMismatch(format!(
                "config expects {} tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in specs.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::ConfigMismatch(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config.param_names()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter on `g` as a borrowed trainable leaf.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Bound<'a> {
        Bound {
            config: &self.config,
            vars: self.params.iter().map(|p| g.param_ref(p)).collect(),
        }
    }

    /// Same as [`Model::bind`] but without gradients.
    pub fn bind_frozen<'a>(&'a self, g: &mut Graph<'a>) -> Bound<'a> {
        Bound {
            config: &self.config,
            vars: self.params.iter().map(|p| g.constant_ref(p)).collect(),
        }
    }

    /// Full-sequence forward over a rectangular `[batch][len]` id array.
    pub fn forward_full(&self, tokens: &[Vec<TokenId>]) -> Result<ModelOutput> {
        let len = tokens.first().map_or(0, Vec::len);
        if tokens.iter().any(|r| r.len() != len) {
            return Err(Error::dim("forward_full", "ragged token batch"));
        }
        let mut data = Vec::new();
        for row in tokens {
            let mut g = Graph::new();
            let bound = self.bind_frozen(&mut g);
            let out = bound.forward(&mut g, row)?;
            data.extend_from_slice(g.value(out).data());
        }
        Ok(match self.config.head_kind {
            HeadKind::Lm => ModelOutput::Logits(Tensor::new(
                vec![tokens.len(), len, self.config.vocab_size],
                data,
            )?),
            HeadKind::Scalar => ModelOutput::Scalars(Tensor::new(vec![tokens.len(), len], data)?),
        })
    }

    /// Per-position outputs for one sequence: `[len, vocab]` or `[len]`.
    pub fn forward_sequence(&self, tokens: &[TokenId]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let out = bound.forward(&mut g, tokens)?;
        Ok(g.value(out).clone())
    }

    /// Reward read at the last non-pad position.
    pub fn scalar_score(&self, tokens: &[TokenId]) -> Result<f32> {
        if self.config.head_kind != HeadKind::Scalar {
            return Err(Error::HeadKind {
                expected: "scalar",
                found: self.config.head_kind.name(),
            });
        }
        let real = strip_trailing_pad(tokens);
        if real.is_empty() {
            return Err(Error::Contract("scalar_score on an all-pad sequence".into()));
        }
        let values = self.forward_sequence(real)?;
        Ok(values.data()[real.len() - 1])
    }

    pub fn require_head(&self, kind: HeadKind) -> Result<()> {
        if self.config.head_kind != kind {
            return Err(Error::HeadKind {
                expected: kind.name(),
                found: self.config.head_kind.name(),
            });
        }
        Ok(())
    }

    /// Copies shared weights from `other` (same trunk dimensions), leaving
    /// this model's head untouched. Used to start a reward model from an SFT
    /// checkpoint.
    pub fn load_trunk_from(&mut self, other: &Model) -> Result<()> {
        let trunk = idx::final_base(self.config.n_layers) + 2;
        let same_trunk = self.config.n_layers == other.config.n_layers
            && self.config.d_model == other.config.d_model
            && self.config.d_ff == other.config.d_ff
            && self.config.vocab_size == other.config.vocab_size
            && self.config.max_seq_len == other.config.max_seq_len;
        if !same_trunk {
            return Err(Error::ConfigMismatch(
                "cannot copy trunk between differently shaped models".into(),
            ));
        }
        self.params[..trunk].clone_from_slice(&other.params[..trunk]);
        Ok(())
    }
}

pub fn strip_trailing_pad(tokens: &[TokenId]) -> &[TokenId] {
    let end = tokens.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
    &tokens[..end]
}

/// A model's parameters registered on a graph.
pub struct Bound<'a> {
    pub config: &'a ModelConfig,
    pub vars: Vec<Var>,
}

impl Bound<'_> {
    /// Causal forward over one sequence; `[len, vocab]` logits for an LM
    /// head, `[len]` values for a scalar head.
    pub fn forward(&self, g: &mut Graph<'_>, tokens: &[TokenId]) -> Result<Var> {
        let cfg = self.config;
        let t = tokens.len();
        if t == 0 {
            return Err(Error::Contract("forward on an empty sequence".into()));
        }
        if t > cfg.max_seq_len {
            return Err(Error::Length {
                len: t,
                max: cfg.max_seq_len,
            });
        }
        let (h, dh, d) = (cfg.n_heads, cfg.d_head(), cfg.d_model);
        let p = |i: usize| self.vars[i];
        let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
        let positions: Vec<usize> = (0..t).collect();
        let tok = g.embedding(p(idx::TOK_EMB), &ids)?;
        let pos = g.embedding(p(idx::POS_EMB), &positions)?;
        let mut x = g.add(tok, pos)?;
        let inv_sqrt = 1.0 / (dh as f32).sqrt();
        for l in 0..cfg.n_layers {
            let w = |which| p(idx::layer(l, which));
            let hn = g.layer_norm(x, w(idx::LN1_G), w(idx::LN1_B))?;
            let heads = |g: &mut Graph<'_>, wi, bi| -> Result<Var> {
                let y = g.matmul(hn, w(wi))?;
                let y = g.add_bias(y, w(bi))?;
                let y = g.reshape(y, &[t, h, dh])?;
                g.transpose(y, 0, 1)
            };
            let q = heads(g, idx::WQ, idx::BQ)?;
            let k = heads(g, idx::WK, idx::BK)?;
            let v = heads(g, idx::WV, idx::BV)?;
            let kt = g.transpose(k, 1, 2)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, inv_sqrt);
            let scores = g.causal_mask(scores, 0)?;
            let probs = g.softmax(scores);
            let ctx = g.matmul(probs, v)?;
            let ctx = g.transpose(ctx, 0, 1)?;
            let ctx = g.reshape(ctx, &[t, d])?;
            let attn = g.matmul(ctx, w(idx::WO))?;
            let attn = g.add_bias(attn, w(idx::BO))?;
            x = g.add(x, attn)?;

            let hn = g.layer_norm(x, w(idx::LN2_G), w(idx::LN2_B))?;
            let ff = g.matmul(hn, w(idx::W1))?;
            let ff = g.add_bias(ff, w(idx::B1))?;
            let ff = g.gelu(ff);
            let ff = g.matmul(ff, w(idx::W2))?;
            let ff = g.add_bias(ff, w(idx::B2))?;
            x = g.add(x, ff)?;
        }
        let base = idx::final_base(cfg.n_layers);
        let xf = g.layer_norm(x, p(base), p(base + 1))?;
        match cfg.head_kind {
            HeadKind::Lm => g.matmul(xf, p(base + 2)),
            HeadKind::Scalar => {
                let v = g.matmul(xf, p(base + 2))?;
                let v = g.add_bias(v, p(base + 3))?;
                g.reshape(v, &[t])
            }
        }
    }
}
