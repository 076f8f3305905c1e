//! Terminal chat over an LM-head checkpoint.
//!
//! Turns are kept on one line as `Human: ... Assistant: ...`, the layout
//! of the bundled chat corpus.

use std::io::{BufRead, Write};

use deskrlhf_core::data::Tokenizer;
use deskrlhf_core::model::{HeadKind, Model, Strategy};
use deskrlhf_core::vocab::{TokenId, BOS};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChatOptions {
    pub strategy: Strategy,
    pub max_new: usize,
}

pub struct Chat<'a> {
    model: &'a Model,
    tok: &'a dyn Tokenizer,
    opts: ChatOptions,
    transcript: String,
    turn: u64,
}

impl<'a> Chat<'a> {
    pub fn new(model: &'a Model, tok: &'a dyn Tokenizer, opts: ChatOptions) -> Result<Self> {
        model.require_head(HeadKind::Lm)?;
        if tok.vocab_size() != model.config.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer has {} ids but the model expects {}",
                tok.vocab_size(),
                model.config.vocab_size
            )));
        }
        if opts.max_new == 0 || opts.max_new + 2 > model.config.max_seq_len {
            return Err(Error::Config(format!(
                "max_new {} must be in 1..={}",
                opts.max_new,
                model.config.max_seq_len.saturating_sub(2)
            )));
        }
        Ok(Chat {
            model,
            tok,
            opts,
            transcript: String::new(),
            turn: 0,
        })
    }

    pub fn transcript(&self) -> &str {
        &self.transcript
    }

    pub fn reset(&mut self) {
        self.transcript.clear();
    }

    /// Context ids: `BOS` plus the newest transcript tokens that leave room
    /// for `max_new`.
    pub fn context(&self) -> Vec<TokenId> {
        let ids = self.tok.encode(&self.transcript);
        let room = self.model.config.max_seq_len - self.opts.max_new - 1;
        let mut out = vec![BOS];
        out.extend_from_slice(&ids[ids.len().saturating_sub(room)..]);
        out
    }

    pub fn respond(&mut self, user: &str) -> Result<String> {
        if !self.transcript.is_empty() {
            self.transcript.push(' ');
        }
        self.transcript.push_str(&format!("Human: {user} Assistant:"));
        let strategy = match self.opts.strategy {
            Strategy::TopK { k, temperature, seed } => Strategy::TopK {
                k,
                temperature,
                seed: seed.wrapping_add(self.turn),
            },
            s => s,
        };
        self.turn += 1;
        let g = self.model.generate(&self.context(), self.opts.max_new, strategy)?;
        let text = self.tok.decode(&g.tokens);
        let reply = text.split("Human:").next().unwrap_or("").trim().to_string();
        self.transcript.push(' ');
        self.transcript.push_str(&reply);
        Ok(reply)
    }
}

/// Reads lines until EOF or `:quit`; `:reset` clears the transcript.
/// Returns the number of responses.
pub fn repl<R: BufRead, W: Write>(chat: &mut Chat<'_>, input: R, mut out: W) -> Result<usize> {
    let mut n = 0;
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        match line {
            "" => continue,
            ":quit" => break,
            ":reset" => {
                chat.reset();
                writeln!(out, "(transcript cleared)")?;
                continue;
            }
            _ => {}
        }
        let reply = chat.respond(line)?;
        writeln!(out, "Assistant: {reply}")?;
        out.flush()?;
        n += 1;
    }
    Ok(n)
}
