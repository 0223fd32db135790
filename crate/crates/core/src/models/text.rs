//! Asset-free text encoder: words are hashed into a fixed vocabulary, then
//! embedded with learned token and position tables and a projection.
//! Every prompt is padded to the full sequence length.

use rand::Rng;

use super::spec::TextEncoderSpec;
use crate::error::Result;
use crate::nn::layers::Linear;
use crate::nn::{Graph, ParamBuilder, ParamId, Var};

pub const TEXT_PREFIX: &str = "text";
pub const HASHED_WORDS: &str = "hashed-words-v1";

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const FIRST_WORD_ID: usize = 3;

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// `BOS word… EOS PAD…`, exactly `max_len` ids. Words beyond the budget are
/// dropped; the returned flag reports truncation.
pub fn tokenize(prompt: &str, vocab: usize, max_len: usize) -> (Vec<usize>, bool) {
    let words: Vec<usize> = prompt
        .split_whitespace()
        .map(|w| FIRST_WORD_ID + (fnv1a(&w.to_lowercase()) % (vocab - FIRST_WORD_ID) as u64) as usize)
        .collect();
    let budget = max_len - 2;
    let truncated = words.len() > budget;
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS_ID);
    ids.extend(words.into_iter().take(budget));
    ids.push(EOS_ID);
    ids.resize(max_len, PAD_ID);
    (ids, truncated)
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub spec: TextEncoderSpec,
    tokens: ParamId,
    positions: ParamId,
    proj: Linear,
}

impl TextEncoder {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, spec: &TextEncoderSpec) -> Result<Self> {
        let d = spec.embedding_dim;
        Ok(Self {
            spec: spec.clone(),
            tokens: b.normal("tokens", &[spec.vocab_size, d], 1.0)?,
            positions: b.normal("positions", &[spec.max_sequence_length, d], 0.5)?,
            proj: Linear::new(&mut b.pp("proj"), d, d, true)?,
        })
    }

    /// Contexts `[N, L, D]` for a batch of prompts.
    pub fn forward(&self, g: &mut Graph, prompts: &[&str]) -> Result<Var> {
        let l = self.spec.max_sequence_length;
        let mut ids = Vec::with_capacity(prompts.len() * l);
        for p in prompts {
            let (t, truncated) = tokenize(p, self.spec.vocab_size, l);
            if truncated {
                log::info!("prompt truncated to {l} tokens: {p}");
            }
            ids.extend(t);
        }
        let table = g.param(self.tokens);
        let tok = g.embedding(table, &ids)?;
        let pos_table = g.param(self.positions);
        let pos_ids: Vec<usize> = (0..prompts.len()).flat_map(|_| 0..l).collect();
        let pos = g.embedding(pos_table, &pos_ids)?;
        let h = g.add(tok, pos)?;
        let h = self.proj.forward(g, h)?;
        let h = g.tanh(h);
        g.reshape(h, &[prompts.len(), l, self.spec.embedding_dim])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_pads_and_truncates() {
        let (ids, t) = tokenize("", 100, 6);
        assert_eq!(ids, vec![BOS_ID, EOS_ID, 0, 0, 0, 0]);
        assert!(!t);
        let (ids, t) = tokenize("a b c d e f g h i j k l", 100, 6);
        assert_eq!(ids.len(), 6);
        assert_eq!(ids[5], EOS_ID);
        assert!(t);
        assert_eq!(tokenize("Heart", 100, 4).0, tokenize("heart", 100, 4).0);
        assert!(tokenize("x y", 100, 8).0.iter().all(|&i| i < 100));
    }
}
