//! Reserved token ids shared by the tokenizer, batching and generation.

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_SPECIAL: TokenId = 4;

/// 256 byte values plus the four specials.
pub const BYTE_VOCAB_SIZE: usize = 256 + NUM_SPECIAL as usize;
