//! Tensor-parallel partitioning for inference.

use std::sync::Arc;

use crate::error::Result;
use crate::model::{Model, Session, TpLayout};
use crate::tensor::Tensor;
use crate::vocab::TokenId;

/// Column-splits heads and MLP inputs, row-splits the output projections and
/// replicates everything else across `tp` ranks.
pub fn tp_partition(model: &Model, tp: usize) -> Result<TpLayout> {
    TpLayout::new(model, tp)
}

/// Full-sequence outputs `[len, out_dim]` with rank partials summed in rank
/// order.
pub fn tp_forward(layout: &TpLayout, tokens: &[TokenId]) -> Result<Tensor> {
    let mut s = Session::new(Arc::new(layout.clone()), 1, tokens.len().max(1))?;
    s.prefill(0, tokens)
}
