//! ZeRO-style flat partitioning of parameter tensors.

use std::hash::{DefaultHasher, Hasher};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Balanced contiguous ranges: the first `n % w` workers take one extra.
pub fn partition_ranges(n: usize, w: usize) -> Vec<Range<usize>> {
    let (base, extra) = (n / w, n % w);
    let mut start = 0;
    (0..w)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

pub fn checksum(data: &[f32]) -> u64 {
    let mut h = DefaultHasher::new();
    for v in data {
        h.write_u32(v.to_bits());
    }
    h.finish()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub worker: usize,
    pub range: Range<usize>,
    pub data: Vec<f32>,
    pub checksum: u64,
}

impl Shard {
    pub fn new(worker: usize, range: Range<usize>, data: Vec<f32>) -> Self {
        let checksum = checksum(&data);
        Shard {
            worker,
            range,
            data,
            checksum,
        }
    }

    pub fn reseal(&mut self) {
        self.checksum = checksum(&self.data);
    }

    pub fn bytes(&self) -> u64 {
        4 * self.data.len() as u64
    }
}

pub fn flatten(tensors: &[Tensor]) -> Vec<f32> {
    let mut flat = Vec::with_capacity(tensors.iter().map(Tensor::numel).sum());
    for t in tensors {
        flat.extend_from_slice(t.data());
    }
    flat
}

pub fn unflatten(flat: &[f32], shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if total != flat.len() {
        return Err(Error::Integrity(format!(
            "{} floats for shapes totalling {total}",
            flat.len()
        )));
    }
    let mut at = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s.clone(), flat[at..at + n].to_vec());
            at += n;
            t
        })
        .collect()
}

/// Splits the flattened tensors across `w` workers.
pub fn partition_zero(tensors: &[Tensor], w: usize) -> Result<Vec<Shard>> {
    if w == 0 {
        return Err(Error::Config("world size must be positive".into()));
    }
    let flat = flatten(tensors);
    Ok(partition_ranges(flat.len(), w)
        .into_iter()
        .enumerate()
        .map(|(i, r)| Shard::new(i, r.clone(), flat[r].to_vec()))
        .collect())
}

/// Reassembles the full tensors, checking that every worker's shard is
/// present once, covers its expected range and matches its checksum.
pub fn gather_full(shards: &[Shard], shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let w = shards.len();
    if w == 0 {
        return Err(Error::Integrity("no shards".into()));
    }
    let expected = partition_ranges(total, w);
    let mut flat = vec![0.0f32; total];
    let mut seen = vec![false; w];
    for s in shards {
        if s.worker >= w || seen[s.worker] {
            return Err(Error::Integrity(format!(
                "shard for worker {} missing or duplicated",
                s.worker
            )));
        }
        seen[s.worker] = true;
        if s.range != expected[s.worker] || s.data.len() != s.range.len() {
            return Err(Error::Integrity(format!(
                "worker {} shard covers {:?} with {} floats, expected {:?}",
                s.worker,
                s.range,
                s.data.len(),
                expected[s.worker]
            )));
        }
        if checksum(&s.data) != s.checksum {
            return Err(Error::Integrity(format!("worker {} shard checksum mismatch", s.worker)));
        }
        flat[s.range.clone()].copy_from_slice(&s.data);
    }
    unflatten(&flat, shapes)
}
