//! Incremental eval-mode decoding with cached attention keys and values.

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var, MASK_VALUE};
use crate::tensor::Tensor;

use super::layers::{linear, norm, Mode};
use super::llvm::LlvmModel;
use super::params::Binder;

pub struct DecodeSession<'m, T: Scalar> {
    model: &'m LlvmModel<T>,
    keys: Vec<Tensor<T>>,
    values: Vec<Tensor<T>>,
    /// Token ids already folded into the cache.
    consumed: Vec<u32>,
    rows: usize,
    last: Vec<T>,
}

impl<T: Scalar> LlvmModel<T> {
    /// Run the prompt once and keep its keys and values.
    pub fn decoder(&self, features: &Tensor<T>, prompt_ids: &[u32], image_index: usize) -> Result<DecodeSession<'_, T>> {
        if image_index >= prompt_ids.len() {
            return Err(invalid(format!("image position {image_index} past prompt end")));
        }
        let depth = self.lm.config.depth;
        let mut s = DecodeSession {
            model: self,
            keys: vec![Tensor::zeros(&[0, self.lm.config.d_model]); depth],
            values: vec![Tensor::zeros(&[0, self.lm.config.d_model]); depth],
            consumed: prompt_ids.to_vec(),
            rows: 0,
            last: Vec::new(),
        };
        let tape = Tape::new();
        let pb = Binder::frozen(&tape, &self.projector.params);
        let lb = Binder::frozen(&tape, &self.lm.params);
        let mut mode = Mode::eval();
        let tok = lb.get("lm.tok")?;
        let idx = s.check_ids(prompt_ids)?;
        let mut parts = Vec::with_capacity(3);
        if image_index > 0 {
            parts.push(tok.embedding_lookup(&idx[..image_index])?);
        }
        parts.push(self.projector.project(&pb, tape.constant(features.clone()), &mut mode)?);
        if image_index + 1 < idx.len() {
            parts.push(tok.embedding_lookup(&idx[image_index + 1..])?);
        }
        let x = Var::concat(&parts, 0)?;
        s.last = s.extend(&lb, x)?;
        Ok(s)
    }
}

impl<T: Scalar> DecodeSession<'_, T> {
    fn check_ids(&self, ids: &[u32]) -> Result<Vec<usize>> {
        let v = self.model.lm.config.vocab_size;
        ids.iter()
            .map(|&i| if (i as usize) < v { Ok(i as usize) } else { Err(Error::UnknownTokenId(i)) })
            .collect()
    }

    /// Next-token logits after `ids`, which must extend the ids seen so far.
    pub fn next(&mut self, ids: &[u32]) -> Result<Vec<T>> {
        if ids.len() < self.consumed.len() || ids[..self.consumed.len()] != self.consumed[..] {
            return Err(invalid("decode input does not extend the cached prefix"));
        }
        let fresh = ids[self.consumed.len()..].to_vec();
        if fresh.is_empty() {
            return Ok(self.last.clone());
        }
        let idx = self.check_ids(&fresh)?;
        let tape = Tape::new();
        let lb = Binder::frozen(&tape, &self.model.lm.params);
        let x = lb.get("lm.tok")?.embedding_lookup(&idx)?;
        self.last = self.extend(&lb, x)?;
        self.consumed.extend(fresh);
        Ok(self.last.clone())
    }

    /// Append embedded rows, update the caches and return the logits of the
    /// final row.
    fn extend<'t>(&mut self, lb: &Binder<'t, '_, T>, x: Var<'t, T>) -> Result<Vec<T>> {
        let cfg = &self.model.lm.config;
        let m = x.shape()[0];
        let p = self.rows;
        if p + m > cfg.context_length {
            return Err(Error::ContextOverflow {
                len: p + m,
                max: cfg.context_length,
            });
        }
        let tape = lb.tape();
        let lora = self.model.lm.lora.as_ref();
        let mut mode = Mode::eval();
        let mut x = x.add(lb.get("lm.pos")?.slice(0, p, m)?)?;
        let dh = cfg.d_model / cfg.heads;
        let inv = T::lit(1.0 / (dh as f64).sqrt());
        let mut mask = Tensor::zeros(&[m, p + m]);
        for i in 0..m {
            for j in p + i + 1..p + m {
                mask.data_mut()[i * (p + m) + j] = T::lit(MASK_VALUE);
            }
        }
        let mask = tape.constant(mask);
        for l in 0..cfg.depth {
            let pre = format!("lm.blocks.{l}");
            let h = norm(lb, &format!("{pre}.ln1"), x)?;
            let q = linear(lb, &format!("{pre}.attn.q"), h, lora, &mut mode)?;
            let k = linear(lb, &format!("{pre}.attn.k"), h, lora, &mut mode)?;
            let v = linear(lb, &format!("{pre}.attn.v"), h, lora, &mut mode)?;
            let k_all = Var::concat(&[tape.constant(self.keys[l].clone()), k], 0)?;
            let v_all = Var::concat(&[tape.constant(self.values[l].clone()), v], 0)?;
            let mut outs = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let qh = q.slice(1, hd * dh, dh)?;
                let kh = k_all.slice(1, hd * dh, dh)?;
                let vh = v_all.slice(1, hd * dh, dh)?;
                let s = qh.matmul(kh.transpose()?)?.scale(inv)?.add(mask)?;
                outs.push(s.softmax()?.matmul(vh)?);
            }
            let merged = if outs.len() == 1 { outs[0] } else { Var::concat(&outs, 1)? };
            let a = linear(lb, &format!("{pre}.attn.o"), merged, lora, &mut mode)?;
            x = x.add(a)?;
            let h = norm(lb, &format!("{pre}.ln2"), x)?;
            let h = linear(lb, &format!("{pre}.mlp.fc1"), h, lora, &mut mode)?.gelu()?;
            let h = linear(lb, &format!("{pre}.mlp.fc2"), h, lora, &mut mode)?;
            x = x.add(h)?;
            self.keys[l] = k_all.value().clone();
            self.values[l] = v_all.value().clone();
        }
        self.rows = p + m;
        let h = norm(lb, "lm.ln_f", x.slice(0, m - 1, 1)?)?;
        let logits = self.model.lm.logits(lb, h)?;
        let out = logits.value().data().to_vec();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use crate::models::lm::LmConfig;
    use crate::models::vision::VisionConfig;
    use crate::models::{LanguageModel, LlvmModel, Projector, VisionEncoder};
    use crate::peft::LoraConfig;
    use crate::rng::RngState;
    use crate::tensor::Tensor;

    #[test]
    fn cached_decoding_matches_full_recompute() {
        let mut rng = RngState::new(5);
        let vision = VisionEncoder::<f64>::new(
            VisionConfig {
                d_vision: 8,
                depth: 1,
                heads: 2,
                max_image_size: 28,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        let mut lm = LanguageModel::new(
            LmConfig {
                vocab_size: 20,
                d_model: 16,
                depth: 2,
                heads: 2,
                context_length: 32,
            },
            &mut rng,
        )
        .unwrap();
        lm.inject_lora(&LoraConfig::default(), &mut rng).unwrap();
        for p in lm.params.iter_mut() {
            if p.name.ends_with("lora_b") {
                if let crate::models::ParamValue::Dense(t) = &mut p.value {
                    *t = Tensor::randn(t.shape(), 0.1, &mut rng);
                }
            }
        }
        let proj = Projector::new(8, 16, &mut rng).unwrap();
        let model = LlvmModel::assemble(vision, proj, lm).unwrap();
        let feats = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
        let prompt = [1u32, 2, 7, 3];
        let mut sess = model.decoder(&feats, &prompt, 2).unwrap();
        let mut ids = prompt.to_vec();
        for t in [5u32, 9, 11] {
            let cached = sess.next(&ids).unwrap();
            let full = model.next_logits(&feats, &ids, 2).unwrap();
            let diff = cached.iter().zip(&full).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "{diff}");
            ids.push(t);
        }
        assert!(sess.next(&[0, 0]).is_err());
    }
}
