//! Datasets: JSONL records, weighted blending, the three-way stage split,
//! tokenizers and batch assembly.

pub mod batch;
pub mod synthetic;
pub mod tokenizer;

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::TokenId;

pub use batch::{make_batch, Batch, BatchKind};
pub use tokenizer::{tokenizer_from_spec, ByteTokenizer, SymbolTokenizer, Tokenizer};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<String>,
    /// Dataset the record came from; filled from the file stem on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl Record {
    pub fn new(prompt: impl Into<String>) -> Self {
        Record {
            prompt: prompt.into(),
            chosen: None,
            rejected: None,
            source: None,
        }
    }

    pub fn pair(prompt: impl Into<String>, chosen: impl Into<String>, rejected: impl Into<String>) -> Self {
        Record {
            prompt: prompt.into(),
            chosen: Some(chosen.into()),
            rejected: Some(rejected.into()),
            source: None,
        }
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }

    fn invalid(&self) -> Option<&'static str> {
        if self.prompt.is_empty() {
            return Some("empty prompt");
        }
        match (&self.chosen, &self.rejected) {
            (None, Some(_)) => Some("rejected response without a chosen one"),
            (Some(c), Some(r)) if c == r => Some("chosen and rejected are identical"),
            _ => None,
        }
    }
}

/// Reads one JSON object per non-blank line.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let mut rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if let Some(why) = rec.invalid() {
            return Err(parse_err(why.into()));
        }
        if rec.source.is_none() {
            rec.source = stem.clone();
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Stage-specific field requirements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Requirement {
    PromptOnly,
    Chosen,
    Pair,
}

pub fn check_schema(records: &[Record], req: Requirement) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        let ok = match req {
            Requirement::PromptOnly => true,
            Requirement::Chosen => r.chosen.is_some(),
            Requirement::Pair => r.chosen.is_some() && r.rejected.is_some(),
        };
        if !ok {
            return Err(Error::Schema(format!("record {i} lacks fields required for {req:?}")));
        }
    }
    Ok(())
}

/// Largest-remainder apportionment of `total` over non-negative weights.
/// Each count is within one of its exact share; ties go to the earlier index.
pub fn apportion(weights: &[f64], total: usize) -> Result<Vec<usize>> {
    if weights.is_empty() {
        return Err(Error::Config("no weights to apportion".into()));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Config(format!("weights must be finite and >= 0: {weights:?}")));
    }
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Config("all blend weights are zero".into()));
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    let rem = |i: usize| exact[i] - counts[i] as f64;
    order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    Ok(counts)
}

/// Draws `target` records with source `i` contributing its weighted share.
/// Sources smaller than their share are cycled through fresh shuffles.
pub fn blend(sources: &[(Vec<Record>, f64)], seed: u64, target: usize) -> Result<Vec<Record>> {
    let weights: Vec<f64> = sources.iter().map(|s| s.1).collect();
    let counts = apportion(&weights, target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(target);
    for ((records, _), &n) in sources.iter().zip(&counts) {
        if n == 0 {
            continue;
        }
        if records.is_empty() {
            return Err(Error::Config("blend source with positive weight is empty".into()));
        }
        let mut remaining = n;
        while remaining > 0 {
            let mut idx: Vec<usize> = (0..records.len()).collect();
            idx.shuffle(&mut rng);
            let take = remaining.min(records.len());
            out.extend(idx[..take].iter().map(|&i| records[i].clone()));
            remaining -= take;
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.2, 0.4, 0.4];

/// Record counts for the SFT, reward and PPO stages.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::Config(format!(
            "stage fractions {fractions:?} must be in [0,1] and sum to 1"
        )));
    }
    let c = apportion(&fractions, n)?;
    Ok([c[0], c[1], c[2]])
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSplit<T> {
    pub sft: Vec<T>,
    pub rm: Vec<T>,
    pub ppo: Vec<T>,
}

/// Seeded by-record partition into three disjoint stages whose sizes come
/// from [`split_sizes`].
pub fn split_stages<T: Clone>(items: &[T], fractions: [f64; 3], seed: u64) -> Result<StageSplit<T>> {
    let [a, b, _] = split_sizes(items.len(), fractions)?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect();
    Ok(StageSplit {
        sft: pick(&order[..a]),
        rm: pick(&order[a..a + b]),
        ppo: pick(&order[a + b..]),
    })
}

/// A record after tokenisation; responses are absent for prompt-only data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub prompt: Vec<TokenId>,
    pub chosen: Option<Vec<TokenId>>,
    pub rejected: Option<Vec<TokenId>>,
}

impl Example {
    pub fn from_record(r: &Record, tok: &dyn Tokenizer) -> Self {
        Example {
            prompt: tok.encode(&r.prompt),
            chosen: r.chosen.as_deref().map(|s| tok.encode(s)),
            rejected: r.rejected.as_deref().map(|s| tok.encode(s)),
        }
    }
}

pub fn tokenize(records: &[Record], tok: &dyn Tokenizer) -> Vec<Example> {
    records.iter().map(|r| Example::from_record(r, tok)).collect()
}
