//! The three training stages and the pieces they share.

pub mod ppo;
pub mod rm;
pub mod sft;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from 0 to `lr` over `warmup` steps, then constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr: f32,
    pub warmup: usize,
}

impl LrSchedule {
    /// Learning rate for 0-based `step`.
    pub fn at(&self, step: usize) -> f32 {
        if step < self.warmup {
            self.lr * (step + 1) as f32 / self.warmup as f32
        } else {
            self.lr
        }
    }
}

/// Endless sequence of minibatch indices, reshuffled every epoch.
pub struct Cycler {
    n: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("cannot draw batches from an empty stage".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(Cycler { n, rng, order, pos: 0 })
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.n {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Maps a non-finite gradient or loss from the engine to a divergence at
/// `step`.
pub(crate) fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric { name } => Error::Divergence {
            step,
            detail: format!("non-finite {name}"),
        },
        other => other,
    }
}

/// `(step, loss)` rows.
pub fn write_loss_csv(path: impl AsRef<Path>, rows: &[(usize, f32)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (s, l) in rows {
        w.write_record([s.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
