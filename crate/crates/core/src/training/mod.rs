//! Language-model pretraining and instruction fine-tuning loops.

pub mod optim;

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::{Binder, GradMap, LanguageModel, LlvmModel, Mode, Prompt};
use crate::models::params::sum_grads;
use crate::plot::{line_chart_svg, write_svg};
use crate::rng::{derive_seed, RngState};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::tokenizer::Vocabulary;

pub use optim::{adamw_step, adamw_step_at, grad_norm, lr_at, OptimizerConfig, OptimizerState};

/// `⌈n / batch⌉ · epochs`; the final partial batch is kept.
pub fn steps_per_run(n: usize, batch: usize, epochs: usize) -> usize {
    n.div_ceil(batch.max(1)) * epochs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub run_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 8,
            checkpoint_every: 100,
            log_every: 10,
            run_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(invalid("batch_size and epochs must be at least 1"));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(invalid("log_every and checkpoint_every must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    /// Mean batch loss over the steps since the previous row.
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(invalid(format!("log step {} not after {}", row.step, last.step)));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,grad_norm\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.step, r.loss, r.grad_norm));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Log-scale loss and gradient-norm charts.
    pub fn write_plots(&self, loss_path: &Path, grad_path: &Path) -> Result<()> {
        let loss: Vec<(f64, f64)> = self.rows.iter().map(|r| (r.step as f64, r.loss)).collect();
        let grad: Vec<(f64, f64)> = self.rows.iter().map(|r| (r.step as f64, r.grad_norm)).collect();
        write_svg(loss_path, &line_chart_svg("Training loss", "step", "loss", &loss, true))?;
        write_svg(grad_path, &line_chart_svg("Gradient norm", "step", "global grad norm", &grad, true))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub seq_len: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            seq_len: 64,
            batch_size: 4,
            learning_rate: 1e-3,
            warmup_steps: 20,
            weight_decay: 0.01,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainRow {
    pub step: usize,
    pub loss: f64,
}

pub fn write_pretrain_csv(path: &Path, rows: &[PretrainRow]) -> Result<()> {
    let mut s = String::from("step,loss\n");
    for r in rows {
        s.push_str(&format!("{},{}\n", r.step, r.loss));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Next-token cross-entropy on random corpus windows. Returns the loss of
/// every step.
pub fn pretrain_lm<T: Scalar>(
    lm: &mut LanguageModel<T>,
    corpus: &str,
    vocab: &Vocabulary,
    config: &PretrainConfig,
) -> Result<Vec<PretrainRow>> {
    let ids = vocab.encode(corpus).ids;
    if ids.len() < lm.config.context_length.max(config.seq_len + 1) {
        return Err(invalid(format!(
            "corpus has {} tokens, fewer than the context length {}",
            ids.len(),
            lm.config.context_length
        )));
    }
    if config.seq_len + 1 > ids.len() || config.seq_len > lm.config.context_length || config.seq_len == 0 {
        return Err(invalid(format!("pretraining sequence length {} is invalid", config.seq_len)));
    }
    if config.batch_size == 0 {
        return Err(invalid("pretraining batch size must be at least 1"));
    }
    let opt = OptimizerConfig {
        learning_rate: config.learning_rate,
        warmup_steps: config.warmup_steps,
        weight_decay: config.weight_decay,
        ..OptimizerConfig::default()
    };
    let mut state = OptimizerState::default();
    let mut rng = RngState::new(config.seed);
    let mut rows = Vec::with_capacity(config.steps);
    let span = ids.len() - config.seq_len;
    for step in 0..config.steps {
        let starts: Vec<usize> = (0..config.batch_size).map(|_| rng.below(span)).collect();
        let model = &*lm;
        let parts: Vec<(f64, GradMap<T>)> = starts
            .par_iter()
            .enumerate()
            .map(|(k, &s)| {
                let window = &ids[s..s + config.seq_len + 1];
                let tape = Tape::new();
                let b = Binder::new(&tape, &model.params);
                let mut drop_rng = RngState::new(derive_seed(config.seed, &[step as u64, k as u64]));
                let mut mode = Mode::train(&mut drop_rng);
                let h = model.hidden(&b, &window[..config.seq_len], None, &mut mode)?;
                let logits = model.logits(&b, h)?;
                let targets: Vec<usize> = window[1..].iter().map(|&t| t as usize).collect();
                let loss = logits
                    .cross_entropy_with_logits(&targets, None)?
                    .scale(T::lit(1.0 / config.batch_size as f64))?;
                let g = tape.backward(loss)?;
                let mut grads = GradMap::new();
                b.collect(&g, &mut grads);
                Ok((loss.item().as_f64(), grads))
            })
            .collect::<Result<_>>()?;
        let loss: f64 = parts.iter().map(|p| p.0).sum();
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "pretrain_lm" });
        }
        let grads = sum_grads(parts.into_iter().map(|p| p.1).collect());
        adamw_step(&mut [&mut lm.params], &grads, &mut state, &opt)?;
        rows.push(PretrainRow { step, loss });
    }
    Ok(rows)
}

/// One fine-tuning example: cached frozen-encoder patch features and the
/// tokenized prompt with its answer mask.
#[derive(Debug, Clone)]
pub struct Example<T> {
    pub features: Tensor<T>,
    pub prompt: Prompt,
}

/// Visual instruction tuning of the projector and any trainable language
/// model parameters. Calls `on_checkpoint(step, model)` every
/// `checkpoint_every` steps and after the final step.
pub fn finetune<T: Scalar>(
    model: &mut LlvmModel<T>,
    examples: &[Example<T>],
    train: &TrainConfig,
    opt: &OptimizerConfig,
    mut on_checkpoint: impl FnMut(u64, &LlvmModel<T>) -> Result<()>,
) -> Result<TrainingLog> {
    train.validate()?;
    opt.validate()?;
    if examples.is_empty() {
        return Err(invalid("fine-tuning dataset is empty"));
    }
    if model.projector.params.trainable_count() + model.lm.params.trainable_count() == 0 {
        return Err(invalid("model has no trainable parameters"));
    }
    let total = steps_per_run(examples.len(), train.batch_size, train.epochs) as u64;
    let mut state = OptimizerState::default();
    let mut log = TrainingLog::default();
    let mut shuffle_rng = RngState::new(train.run_seed);
    let (mut acc_loss, mut acc_n) = (0.0, 0u64);
    let mut step = 0u64;
    for _epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        shuffle_rng.shuffle(&mut order);
        for batch in order.chunks(train.batch_size) {
            let normalizer: usize = batch.iter().map(|&i| examples[i].prompt.answer_tokens()).sum();
            let m = &*model;
            let parts: Vec<(f64, GradMap<T>)> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let ex = &examples[i];
                    let tape = Tape::new();
                    let pb = Binder::new(&tape, &m.projector.params);
                    let lb = Binder::new(&tape, &m.lm.params);
                    let mut drop_rng = RngState::new(derive_seed(train.run_seed, &[step, k as u64]));
                    let mut mode = Mode::train(&mut drop_rng);
                    let f = tape.constant(ex.features.clone());
                    let loss = m.answer_loss(&pb, &lb, f, &ex.prompt, normalizer as f64, &mut mode)?;
                    let g = tape.backward(loss)?;
                    let mut grads = GradMap::new();
                    pb.collect(&g, &mut grads);
                    lb.collect(&g, &mut grads);
                    Ok((loss.item().as_f64(), grads))
                })
                .collect::<Result<_>>()?;
            let loss: f64 = parts.iter().map(|p| p.0).sum();
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "finetune" });
            }
            let grads = sum_grads(parts.into_iter().map(|p| p.1).collect());
            let gn = grad_norm(&grads);
            adamw_step(
                &mut [&mut model.projector.params, &mut model.lm.params],
                &grads,
                &mut state,
                opt,
            )?;
            step += 1;
            acc_loss += loss;
            acc_n += 1;
            if step % train.log_every == 0 || step == total {
                log.push(LogRow {
                    step,
                    loss: acc_loss / acc_n as f64,
                    grad_norm: gn,
                })?;
                log::info!("step {step}/{total} loss {:.5} grad_norm {gn:.4}", acc_loss / acc_n as f64);
                acc_loss = 0.0;
                acc_n = 0;
            }
            if step % train.checkpoint_every == 0 || step == total {
                on_checkpoint(step, model)?;
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_counts() {
        assert_eq!(steps_per_run(3112, 8, 2), 778);
        assert_eq!(steps_per_run(550, 8, 2), 138);
        assert_eq!(steps_per_run(8, 8, 1), 1);
        assert_eq!(steps_per_run(9, 8, 3), 6);
    }

    #[test]
    fn log_steps_must_increase() {
        let mut log = TrainingLog::default();
        let row = |step| LogRow {
            step,
            loss: 1.0,
            grad_norm: 1.0,
        };
        log.push(row(10)).unwrap();
        assert!(log.push(row(10)).is_err());
        log.push(row(20)).unwrap();
        assert!(log.to_csv().starts_with("step,loss,grad_norm\n10,"));
    }
}
