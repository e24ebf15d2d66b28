//! Decoder-only causal language model.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::peft::{inject_lora_store, quantize_store, LoraConfig};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::layers::{block, block_linears, init_block, init_norm, norm, BlockShape, Mode, INIT_STD};
use super::params::{Binder, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    /// Filled from the tokenizer when zero.
    pub vocab_size: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub context_length: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 128,
            depth: 4,
            heads: 4,
            context_length: 512,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(invalid("vocabulary size must be positive"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(invalid(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.context_length == 0 {
            return Err(invalid("context length must be positive"));
        }
        Ok(())
    }
}

pub const HEAD: &str = "lm.head.w";

#[derive(Debug, Clone)]
pub struct LanguageModel<T> {
    pub config: LmConfig,
    pub params: ParamStore<T>,
    pub lora: Option<LoraConfig>,
}

/// Rows of input embeddings inserted in place of one prompt token.
#[derive(Clone, Copy)]
pub struct Prefix<'t, T: Scalar> {
    pub embeddings: Var<'t, T>,
    /// Index of the placeholder token that the rows replace.
    pub at: usize,
}

impl<T: Scalar> LanguageModel<T> {
    pub fn new(config: LmConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut params = ParamStore::new();
        params.insert("lm.tok", Tensor::randn(&[config.vocab_size, d], INIT_STD, rng), true)?;
        params.insert("lm.pos", Tensor::randn(&[config.context_length, d], INIT_STD, rng), true)?;
        for i in 0..config.depth {
            init_block(&mut params, &format!("lm.blocks.{i}"), d, config.depth, rng)?;
        }
        init_norm(&mut params, "lm.ln_f", d)?;
        params.insert(HEAD, Tensor::randn(&[d, config.vocab_size], INIT_STD, rng), true)?;
        Ok(Self {
            config,
            params,
            lora: None,
        })
    }

    pub fn linears(&self) -> Vec<String> {
        (0..self.config.depth)
            .flat_map(|i| block_linears(&format!("lm.blocks.{i}")))
            .collect()
    }

    /// Attach adapters to the target projections and freeze the base.
    pub fn inject_lora(&mut self, config: &LoraConfig, rng: &mut RngState) -> Result<Vec<String>> {
        if self.lora.is_some() {
            return Err(invalid("language model already carries LoRA adapters"));
        }
        let linears = self.linears();
        let adapted = inject_lora_store(&mut self.params, &linears, config, rng)?;
        self.lora = Some(config.clone());
        Ok(adapted)
    }

    /// NF4-quantize every frozen block weight and the output head.
    pub fn quantize_base(&mut self, block: usize) -> Result<()> {
        let mut names: Vec<String> = self.linears().iter().map(|l| format!("{l}.w")).collect();
        names.push(HEAD.to_string());
        let frozen: Vec<String> = names
            .into_iter()
            .filter(|n| self.params.get(n).map(|p| !p.trainable).unwrap_or(false))
            .collect();
        quantize_store(&mut self.params, &frozen, block)
    }

    /// Grow the token table and head to `new_vocab` entries, initializing
    /// the new rows/columns randomly.
    pub fn resize_vocab(&mut self, new_vocab: usize, rng: &mut RngState) -> Result<()> {
        let old = self.config.vocab_size;
        if new_vocab < old {
            return Err(invalid(format!("cannot shrink vocabulary from {old} to {new_vocab}")));
        }
        let d = self.config.d_model;
        let tok = self.params.dense_mut("lm.tok")?;
        let mut data = tok.data().to_vec();
        data.extend(Tensor::<T>::randn(&[new_vocab - old, d], INIT_STD, rng).into_data());
        *tok = Tensor::from_vec(&[new_vocab, d], data);
        let head = self.params.dense_mut(HEAD)?;
        let extra = Tensor::<T>::randn(&[d, new_vocab - old], INIT_STD, rng);
        let mut data = Vec::with_capacity(d * new_vocab);
        for i in 0..d {
            data.extend_from_slice(head.row(i));
            data.extend_from_slice(extra.row(i));
        }
        *head = Tensor::from_vec(&[d, new_vocab], data);
        self.config.vocab_size = new_vocab;
        Ok(())
    }

    /// Final-norm hidden states `[n, d_model]` for `ids`, with an optional
    /// embedding prefix replacing the token at `prefix.at`.
    pub fn hidden<'t>(
        &self,
        b: &Binder<'t, '_, T>,
        ids: &[u32],
        prefix: Option<Prefix<'t, T>>,
        mode: &mut Mode,
    ) -> Result<Var<'t, T>> {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::UnknownTokenId(bad as u32));
        }
        let extra = prefix.map(|p| p.embeddings.shape()[0]).unwrap_or(0);
        let len = ids.len() + extra - usize::from(prefix.is_some());
        if len > self.config.context_length {
            return Err(Error::ContextOverflow {
                len,
                max: self.config.context_length,
            });
        }
        if len == 0 {
            return Err(invalid("empty input sequence"));
        }
        let tok = b.get("lm.tok")?;
        let x = match prefix {
            None => tok.embedding_lookup(&idx)?,
            Some(p) => {
                if p.at >= idx.len() {
                    return Err(invalid(format!("prefix position {} past sequence end", p.at)));
                }
                let mut parts = Vec::with_capacity(3);
                if p.at > 0 {
                    parts.push(tok.embedding_lookup(&idx[..p.at])?);
                }
                parts.push(p.embeddings);
                if p.at + 1 < idx.len() {
                    parts.push(tok.embedding_lookup(&idx[p.at + 1..])?);
                }
                Var::concat(&parts, 0)?
            }
        };
        let pos = b.get("lm.pos")?.slice(0, 0, len)?;
        let mut x = x.add(pos)?;
        let shape = BlockShape {
            d: self.config.d_model,
            heads: self.config.heads,
            causal: true,
        };
        for i in 0..self.config.depth {
            x = block(b, &format!("lm.blocks.{i}"), x, shape, self.lora.as_ref(), mode)?;
        }
        norm(b, "lm.ln_f", x)
    }

    /// Vocabulary logits for hidden rows.
    pub fn logits<'t>(&self, b: &Binder<'t, '_, T>, hidden: Var<'t, T>) -> Result<Var<'t, T>> {
        hidden.matmul(b.get(HEAD)?)
    }

    /// Logits `[n, vocab]` for plain token input, eval mode, no tape kept.
    pub fn forward(&self, ids: &[u32]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &self.params);
        let h = self.hidden(&b, ids, None, &mut Mode::eval())?;
        let logits = self.logits(&b, h)?;
        let out = logits.value().clone();
        Ok(out)
    }

    /// Mean over positions of the final hidden states, `[1, d_model]`.
    pub fn pooled<'t>(&self, b: &Binder<'t, '_, T>, ids: &[u32], mode: &mut Mode) -> Result<Var<'t, T>> {
        self.hidden(b, ids, None, mode)?.mean_axis(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(depth: usize, d: usize, heads: usize) -> LanguageModel<f64> {
        let cfg = LmConfig {
            vocab_size: 11,
            d_model: d,
            depth,
            heads,
            context_length: 16,
        };
        LanguageModel::new(cfg, &mut RngState::new(4)).unwrap()
    }

    #[test]
    fn causality_and_shape() {
        for (depth, heads) in [(1, 1), (2, 2), (3, 4)] {
            let lm = toy(depth, 8, heads);
            let a = lm.forward(&[1, 2, 3, 4, 5]).unwrap();
            assert_eq!(a.shape(), &[5, 11]);
            let b = lm.forward(&[1, 2, 3, 9, 5]).unwrap();
            for i in 0..3 {
                assert_eq!(a.row(i), b.row(i));
            }
            assert_ne!(a.row(3), b.row(3));
        }
    }

    #[test]
    fn context_overflow_reports_lengths() {
        let lm = toy(1, 4, 1);
        match lm.forward(&[0; 17]) {
            Err(Error::ContextOverflow { len: 17, max: 16 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resize_keeps_old_rows() {
        let mut lm = toy(1, 4, 1);
        let before = lm.forward(&[1, 2]).unwrap();
        lm.resize_vocab(13, &mut RngState::new(0)).unwrap();
        let after = lm.forward(&[1, 2]).unwrap();
        assert_eq!(after.shape(), &[2, 13]);
        for i in 0..2 {
            assert_eq!(&after.row(i)[..11], before.row(i));
        }
    }
}
