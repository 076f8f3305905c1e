use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadKind, Model, Session};
use crate::tensor::kernels::{log_softmax_row, softmax_row};
use crate::vocab::{TokenId, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    TopK { k: usize, temperature: f32, seed: u64 },
}

impl Strategy {
    pub fn top_k(seed: u64) -> Self {
        Strategy::TopK {
            k: 50,
            temperature: 1.0,
            seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Generation {
    /// Generated ids only; the prompt is not repeated.
    pub tokens: Vec<TokenId>,
    /// Log-softmax of the untempered logits at each chosen token.
    pub logprobs: Vec<f32>,
}

/// Per-sequence sampler; sequence `i` of a batch draws from stream `i`.
pub struct Sampler {
    strategy: Strategy,
    rng: Option<ChaCha8Rng>,
}

impl Sampler {
    pub fn new(strategy: Strategy, stream: u64) -> Self {
        let rng = match strategy {
            Strategy::Greedy => None,
            Strategy::TopK { seed, .. } => {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(stream);
                Some(r)
            }
        };
        Sampler { strategy, rng }
    }

    pub fn pick(&mut self, logits: &[f32]) -> TokenId {
        match self.strategy {
            Strategy::Greedy => argmax(logits) as TokenId,
            Strategy::TopK { k, temperature, .. } => {
                let rng = self.rng.as_mut().expect("top-k sampler has an rng");
                sample_top_k(logits, k, temperature, rng) as TokenId
            }
        }
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn sample_top_k<R: Rng + ?Sized>(logits: &[f32], k: usize, temperature: f32, rng: &mut R) -> usize {
    let k = k.clamp(1, logits.len());
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let scaled: Vec<f32> = order.iter().map(|&i| logits[i] / t).collect();
    let mut probs = vec![0.0; k];
    softmax_row(&scaled, &mut probs);
    let u: f32 = rng.random();
    let mut acc = 0.0;
    for (j, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return order[j];
        }
    }
    order[k - 1]
}

pub fn token_logprob(logits: &[f32], token: TokenId) -> f32 {
    let mut lp = vec![0.0; logits.len()];
    log_softmax_row(logits, &mut lp);
    lp[token as usize]
}

/// Decodes from `prompt` in `slot` until EOS or `max_new` tokens.
pub fn generate_in(
    session: &mut Session,
    slot: usize,
    prompt: &[TokenId],
    max_new: usize,
    strategy: Strategy,
    stream: u64,
) -> Result<Generation> {
    if session.layout().config().head_kind != HeadKind::Lm {
        return Err(Error::HeadKind {
            expected: "lm",
            found: session.layout().config().head_kind.name(),
        });
    }
    if prompt.is_empty() {
        return Err(Error::Contract("generate needs a non-empty prompt".into()));
    }
    let needed = prompt.len() + max_new;
    if needed > session.capacity() {
        return Err(Error::Capacity {
            needed,
            capacity: session.capacity(),
        });
    }
    let mut sampler = Sampler::new(strategy, stream);
    let mut out = Generation::default();
    if max_new == 0 {
        return Ok(out);
    }
    let pre = session.prefill(slot, prompt)?;
    let mut logits = pre.row(prompt.len() - 1).to_vec();
    for step in 0..max_new {
        let tok = sampler.pick(&logits);
        out.tokens.push(tok);
        out.logprobs.push(token_logprob(&logits, tok));
        if tok == EOS || step + 1 == max_new {
            break;
        }
        logits = session.step(slot, tok)?;
    }
    Ok(out)
}

/// Generates for every prompt, one session slot each. `stream_base` offsets
/// the per-sequence random streams so that a batch split across workers
/// samples the same tokens as the unsplit batch.
pub fn generate_batch(
    session: &mut Session,
    prompts: &[Vec<TokenId>],
    max_new: usize,
    strategy: Strategy,
    stream_base: u64,
) -> Result<Vec<Generation>> {
    if prompts.len() > session.batch() {
        return Err(Error::Contract(format!(
            "{} prompts for a session of {} slots",
            prompts.len(),
            session.batch()
        )));
    }
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| generate_in(session, i, p, max_new, strategy, stream_base + i as u64))
        .collect()
}

impl Model {
    pub fn generate(&self, prompt: &[TokenId], max_new: usize, strategy: Strategy) -> Result<Generation> {
        self.require_head(HeadKind::Lm)?;
        let needed = prompt.len() + max_new;
        if needed > self.config.max_seq_len {
            return Err(Error::Capacity {
                needed,
                capacity: self.config.max_seq_len,
            });
        }
        let mut session = self.session(1, needed.max(1))?;
        generate_in(&mut session, 0, prompt, max_new, strategy, 0)
    }
}
