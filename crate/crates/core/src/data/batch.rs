use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::vocab::{TokenId, BOS, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    /// `BOS prompt chosen EOS`
    Sft,
    /// Chosen rows first, then rejected rows in the same order.
    Pairwise,
    /// `BOS prompt`, for generation.
    Prompt,
    /// `BOS text EOS` from the prompt field, right-truncated.
    Pretrain,
}

/// Token rows right-padded to `max_len`, with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub kind: BatchKind,
    pub tokens: Vec<Vec<TokenId>>,
    pub mask: Vec<Vec<bool>>,
    /// Length of `BOS prompt` in each row after truncation.
    pub prompt_lens: Vec<usize>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn real_len(&self, row: usize) -> usize {
        self.mask[row].iter().filter(|&&m| m).count()
    }

    /// The unpadded row.
    pub fn real(&self, row: usize) -> &[TokenId] {
        &self.tokens[row][..self.real_len(row)]
    }
}

/// Keeps the response (plus EOS) and as much of the prompt's tail as fits.
fn join(prompt: &[TokenId], response: &[TokenId], max_len: usize) -> (Vec<TokenId>, usize) {
    let budget = max_len - 1;
    let mut resp: Vec<TokenId> = response.to_vec();
    resp.push(EOS);
    let reserve = prompt.len().min(1);
    resp.truncate(budget - reserve);
    let keep = prompt.len().min(budget - resp.len());
    let mut row = Vec::with_capacity(1 + keep + resp.len());
    row.push(BOS);
    row.extend_from_slice(&prompt[prompt.len() - keep..]);
    let plen = row.len();
    row.extend(resp);
    (row, plen)
}

fn prompt_row(prompt: &[TokenId], max_len: usize) -> Vec<TokenId> {
    let keep = prompt.len().min(max_len - 1);
    let mut row = vec![BOS];
    row.extend_from_slice(&prompt[prompt.len() - keep..]);
    row
}

pub fn make_batch(kind: BatchKind, examples: &[Example], max_len: usize) -> Result<Batch> {
    if max_len < 2 {
        return Err(Error::Config(format!("max_len {max_len} leaves no room for content")));
    }
    if examples.is_empty() {
        return Err(Error::Contract("make_batch on an empty example list".into()));
    }
    let need = |e: &Example, which: &str, f: &Option<Vec<TokenId>>| -> Result<Vec<TokenId>> {
        f.clone()
            .ok_or_else(|| Error::Schema(format!("{kind:?} batch needs `{which}` (prompt {:?})", e.prompt)))
    };
    let mut rows = Vec::new();
    let mut plens = Vec::new();
    match kind {
        BatchKind::Sft => {
            for e in examples {
                let (r, p) = join(&e.prompt, &need(e, "chosen", &e.chosen)?, max_len);
                rows.push(r);
                plens.push(p);
            }
        }
        BatchKind::Pairwise => {
            let mut rej = Vec::new();
            for e in examples {
                let (c, pc) = join(&e.prompt, &need(e, "chosen", &e.chosen)?, max_len);
                let (r, pr) = join(&e.prompt, &need(e, "rejected", &e.rejected)?, max_len);
                rows.push(c);
                plens.push(pc);
                rej.push((r, pr));
            }
            for (r, p) in rej {
                rows.push(r);
                plens.push(p);
            }
        }
        BatchKind::Prompt => {
            for e in examples {
                let r = prompt_row(&e.prompt, max_len);
                plens.push(r.len());
                rows.push(r);
            }
        }
        BatchKind::Pretrain => {
            for e in examples {
                let mut r = vec![BOS];
                r.extend_from_slice(&e.prompt);
                r.push(EOS);
                r.truncate(max_len);
                plens.push(1);
                rows.push(r);
            }
        }
    }
    // fixed-width: every row is padded to max_len
    let width = max_len;
    let mask = rows
        .iter()
        .map(|r| (0..width).map(|i| i < r.len()).collect())
        .collect();
    for r in &mut rows {
        r.resize(width, PAD);
    }
    Ok(Batch {
        kind,
        tokens: rows,
        mask,
        prompt_lens: plens,
    })
}
