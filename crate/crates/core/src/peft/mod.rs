//! Low-rank adapters, freezing, parameter census and NF4 quantization.

pub mod nf4;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::params::{ParamStore, ParamValue};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use nf4::{quantize_nf4, quantized_linear_forward, QuantizedTensor, NF4_LEVELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Projection names, matched case-insensitively against the last
    /// segment of each linear layer's name.
    pub targets: Vec<String>,
    /// Keep the vision-to-language projector trainable alongside adapters.
    pub train_projector: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.05,
            targets: vec!["Q".into(), "V".into()],
            train_projector: true,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(invalid("LoRA rank must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("LoRA dropout {} outside [0, 1)", self.dropout)));
        }
        if self.targets.is_empty() {
            return Err(invalid("LoRA targets must be non-empty"));
        }
        Ok(())
    }
}

pub fn lora_a_name(linear: &str) -> String {
    format!("{linear}.lora_a")
}

pub fn lora_b_name(linear: &str) -> String {
    format!("{linear}.lora_b")
}

fn short_name(linear: &str) -> &str {
    linear.rsplit('.').next().unwrap_or(linear)
}

/// Add an adapter pair to every linear layer in `linears` whose short name is
/// a target, and freeze everything that was in the store before. Returns the
/// adapted layer names.
pub fn inject_lora_store<T: Scalar>(
    store: &mut ParamStore<T>,
    linears: &[String],
    config: &LoraConfig,
    rng: &mut RngState,
) -> Result<Vec<String>> {
    config.validate()?;
    let mut available: Vec<String> = linears.iter().map(|l| short_name(l).to_string()).collect();
    available.sort();
    available.dedup();
    for t in &config.targets {
        if !available.iter().any(|a| a.eq_ignore_ascii_case(t)) {
            return Err(Error::UnknownTarget {
                name: t.clone(),
                available,
            });
        }
    }
    store.set_trainable_all(false);
    let std = (1.0 / config.rank as f64).sqrt();
    let mut adapted = Vec::new();
    for l in linears {
        let short = short_name(l);
        if !config.targets.iter().any(|t| t.eq_ignore_ascii_case(short)) {
            continue;
        }
        let w = store.tensor(&format!("{l}.w"))?;
        let (d_in, d_out) = w.dims2();
        store.insert(
            lora_a_name(l),
            Tensor::randn(&[config.rank, d_in], std, rng),
            true,
        )?;
        store.insert(lora_b_name(l), Tensor::zeros(&[d_out, config.rank]), true)?;
        adapted.push(l.clone());
    }
    Ok(adapted)
}

/// Replace the listed frozen dense weights by NF4 codes with a cached
/// bf16-rounded compute copy.
pub fn quantize_store<T: Scalar>(store: &mut ParamStore<T>, names: &[String], block: usize) -> Result<()> {
    for n in names {
        let p = store.get_mut(n)?;
        if p.trainable {
            return Err(invalid(format!("refusing to quantize trainable parameter {n:?}")));
        }
        if let ParamValue::Dense(t) = &p.value {
            let q = quantize_nf4(t, block)?;
            let compute = q.dequantize::<T>().bf16_round();
            p.value = ParamValue::Quantized { q, compute };
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamCensus {
    pub total: usize,
    pub trainable: usize,
    pub fraction: f64,
}

impl ParamCensus {
    pub fn new(total: usize, trainable: usize) -> Self {
        let fraction = if total == 0 {
            0.0
        } else {
            trainable as f64 / total as f64
        };
        Self {
            total,
            trainable,
            fraction,
        }
    }
}

/// Walk every named parameter of the given stores.
pub fn count_params<T: Scalar>(stores: &[&ParamStore<T>]) -> ParamCensus {
    let total = stores.iter().map(|s| s.total_count()).sum();
    let trainable = stores.iter().map(|s| s.trainable_count()).sum();
    ParamCensus::new(total, trainable)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(linears: &[(&str, usize, usize)]) -> (ParamStore<f64>, Vec<String>) {
        let mut s = ParamStore::new();
        for (n, i, o) in linears {
            s.insert(format!("{n}.w"), Tensor::ones(&[*i, *o]), true).unwrap();
            s.insert(format!("{n}.b"), Tensor::zeros(&[*o]), false).unwrap();
        }
        (s, linears.iter().map(|l| l.0.to_string()).collect())
    }

    #[test]
    fn unknown_and_empty_targets_rejected() {
        let (mut s, ls) = store_with(&[("l0.q", 4, 4)]);
        let mut rng = RngState::new(0);
        let cfg = LoraConfig {
            targets: vec!["gate".into()],
            ..Default::default()
        };
        match inject_lora_store(&mut s, &ls, &cfg, &mut rng) {
            Err(Error::UnknownTarget { available, .. }) => assert_eq!(available, vec!["q"]),
            other => panic!("{other:?}"),
        }
        let cfg = LoraConfig {
            targets: vec![],
            ..Default::default()
        };
        assert!(inject_lora_store(&mut s, &ls, &cfg, &mut rng).is_err());
    }

    #[test]
    fn census_counts_adapters() {
        let (mut s, ls) = store_with(&[("l0.q", 32, 32), ("l0.k", 32, 32), ("l0.v", 32, 32)]);
        let mut rng = RngState::new(0);
        inject_lora_store(&mut s, &ls, &LoraConfig::default(), &mut rng).unwrap();
        let c = count_params(&[&s]);
        assert_eq!(c.trainable, 2 * 8 * (32 + 32));
        assert_eq!(c.total, 3 * (32 * 32 + 32) + c.trainable);
    }

    #[test]
    fn all_frozen_census() {
        let (mut s, _) = store_with(&[("x", 3, 3)]);
        s.set_trainable_all(false);
        let c = count_params(&[&s]);
        assert_eq!((c.trainable, c.fraction), (0, 0.0));
    }
}
