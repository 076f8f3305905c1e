use crate::error::{Error, Result};
use crate::vocab::{TokenId, BYTE_VOCAB_SIZE, NUM_SPECIAL, UNK};

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<TokenId>;
    /// Reserved ids are dropped.
    fn decode(&self, ids: &[TokenId]) -> String;
    fn vocab_size(&self) -> usize;
    /// Round-trippable description, see [`tokenizer_from_spec`].
    fn spec(&self) -> String;
}

/// One id per UTF-8 byte: `id = byte + 4`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        text.bytes().map(|b| b as TokenId + NUM_SPECIAL).collect()
    }

    fn decode(&self, ids: &[TokenId]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&i| i >= NUM_SPECIAL && (i as usize) < BYTE_VOCAB_SIZE)
            .map(|&i| (i - NUM_SPECIAL) as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn vocab_size(&self) -> usize {
        BYTE_VOCAB_SIZE
    }

    fn spec(&self) -> String {
        "byte".into()
    }
}

/// One id per character of a fixed alphabet; other characters map to UNK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolTokenizer {
    alphabet: Vec<char>,
}

impl SymbolTokenizer {
    pub fn new(alphabet: &str) -> Result<Self> {
        let chars: Vec<char> = alphabet.chars().collect();
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(Error::Config(format!("duplicate symbol {c:?} in alphabet")));
            }
        }
        if chars.is_empty() {
            return Err(Error::Config("empty alphabet".into()));
        }
        Ok(SymbolTokenizer { alphabet: chars })
    }

    pub fn id_of(&self, c: char) -> TokenId {
        self.alphabet
            .iter()
            .position(|&a| a == c)
            .map_or(UNK, |i| i as TokenId + NUM_SPECIAL)
    }
}

impl Tokenizer for SymbolTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        text.chars().map(|c| self.id_of(c)).collect()
    }

    fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&i| i >= NUM_SPECIAL)
            .filter_map(|&i| self.alphabet.get((i - NUM_SPECIAL) as usize))
            .collect()
    }

    fn vocab_size(&self) -> usize {
        NUM_SPECIAL as usize + self.alphabet.len()
    }

    fn spec(&self) -> String {
        format!("symbols:{}", self.alphabet.iter().collect::<String>())
    }
}

/// `"byte"` or `"symbols:<alphabet>"`.
pub fn tokenizer_from_spec(spec: &str) -> Result<Box<dyn Tokenizer>> {
    if spec == "byte" {
        return Ok(Box::new(ByteTokenizer));
    }
    if let Some(alpha) = spec.strip_prefix("symbols:") {
        return Ok(Box::new(SymbolTokenizer::new(alpha)?));
    }
    Err(Error::Config(format!("unknown tokenizer {spec:?}")))
}
