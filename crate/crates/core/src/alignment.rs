//! Contrastive image-text alignment.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::GrayImage;
use crate::models::layers::{init_linear, linear, Mode};
use crate::models::params::{Binder, GradMap, ParamStore};
use crate::models::{LanguageModel, VisionEncoder};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::{Vocabulary, BOS};
use crate::training::optim::{adamw_step_at, grad_norm, lr_at, OptimizerConfig, OptimizerState};

pub const MIN_TEMPERATURE: f64 = 1e-3;
pub const MAX_TEMPERATURE: f64 = 100.0;
pub const LOG_T: &str = "align.log_t";
pub const TEXT_PROJ: &str = "align.text_proj";

/// `S[i][j] = I_i · T_j`.
pub fn similarity_matrix<'t, T: Scalar>(i: Var<'t, T>, t: Var<'t, T>) -> Result<Var<'t, T>> {
    let (si, st) = (i.shape(), t.shape());
    if si.len() != 2 || st.len() != 2 || si[1] != st[1] {
        return Err(Error::ShapeMismatch {
            op: "similarity_matrix",
            lhs: si,
            rhs: st,
        });
    }
    i.matmul(t.transpose()?)
}

/// Symmetric cross-entropy over `S / t` with `t = exp(log_t)`: the mean of
/// the row-wise (image to text) and column-wise (text to image) losses.
pub fn clip_loss<'t, T: Scalar>(i: Var<'t, T>, t: Var<'t, T>, log_t: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = similarity_matrix(i, t)?;
    let n = s.shape()[0];
    let inv_t = log_t.scale(-T::one())?.exp()?;
    let logits = s.mul(inv_t)?;
    let targets: Vec<usize> = (0..n).collect();
    let rows = logits.cross_entropy_with_logits(&targets, None)?;
    let cols = logits.transpose()?.cross_entropy_with_logits(&targets, None)?;
    rows.add(cols)?.scale(T::lit(0.5))
}

/// [`clip_loss`] at a fixed temperature.
pub fn clip_loss_at<'t, T: Scalar>(i: Var<'t, T>, t: Var<'t, T>, temperature: f64) -> Result<Var<'t, T>> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    let log_t = i.tape().constant(Tensor::scalar(T::lit(temperature.ln())));
    clip_loss(i, t, log_t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub steps: usize,
    /// At most the number of distinct classes.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub init_temperature: f64,
    /// Width of the shared embedding space.
    pub embed_dim: usize,
    /// Randomly rotate and mirror each image.
    pub augment: bool,
    /// Width in degrees of the rotation window, centred on zero.
    pub rotation_range: f64,
    /// Decay the learning rate linearly to zero after warmup.
    pub decay: bool,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 11,
            learning_rate: 2e-3,
            warmup_steps: 20,
            weight_decay: 0.01,
            init_temperature: 0.07,
            embed_dim: 64,
            augment: true,
            rotation_range: 360.0,
            decay: false,
            seed: 7,
        }
    }
}

/// An image paired with its description; `group` identifies the class so
/// that a batch never holds two pairs of the same class.
#[derive(Debug, Clone)]
pub struct AlignPair {
    pub image: GrayImage,
    pub text: String,
    pub group: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlignLogRow {
    pub step: usize,
    pub loss: f64,
    pub temperature: f64,
    pub grad_norm: f64,
}

/// Learned pieces that exist only for alignment: a projection from the text
/// width to the shared space and the log-temperature.
#[derive(Debug, Clone)]
pub struct AlignHeads<T> {
    pub params: ParamStore<T>,
}

impl<T: Scalar> AlignHeads<T> {
    pub fn new(d_vision: usize, d_text: usize, config: &AlignConfig, rng: &mut RngState) -> Result<Self> {
        if config.embed_dim != d_vision {
            return Err(invalid(format!(
                "alignment space width {} must equal the vision width {d_vision}",
                config.embed_dim
            )));
        }
        if config.init_temperature <= 0.0 {
            return Err(invalid("initial temperature must be positive"));
        }
        let mut params = ParamStore::new();
        init_linear(&mut params, TEXT_PROJ, d_text, config.embed_dim, (1.0 / d_text as f64).sqrt(), rng)?;
        params.insert(LOG_T, Tensor::scalar(T::lit(config.init_temperature.ln())), false)?;
        Ok(Self { params })
    }

    pub fn temperature(&self) -> f64 {
        self.params.tensor(LOG_T).map(|t| t.item().as_f64().exp()).unwrap_or(f64::NAN)
    }

    fn clamp_temperature(&mut self) -> Result<()> {
        let lt = self.params.dense_mut(LOG_T)?;
        let v = lt.data()[0].as_f64().clamp(MIN_TEMPERATURE.ln(), MAX_TEMPERATURE.ln());
        lt.data_mut()[0] = T::lit(v);
        Ok(())
    }
}

pub struct Encoders<'a, T> {
    pub vision: &'a VisionEncoder<T>,
    pub text: &'a LanguageModel<T>,
    pub heads: &'a AlignHeads<T>,
    pub vocab: &'a Vocabulary,
    /// Pooled text states by caption, valid only while the text encoder is
    /// frozen.
    pub text_cache: Option<&'a BTreeMap<String, Tensor<T>>>,
}

impl<T: Scalar> Encoders<'_, T> {
    fn text_ids(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = vec![self.vocab.require_special(BOS)?];
        ids.extend(self.vocab.encode(text).ids);
        Ok(ids)
    }

    /// Normalized image and text embeddings for a batch, each `[N, d]`.
    #[allow(clippy::type_complexity)]
    pub fn embed<'t>(
        &self,
        vb: &Binder<'t, '_, T>,
        tb: &Binder<'t, '_, T>,
        hb: &Binder<'t, '_, T>,
        batch: &[&AlignPair],
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let mut imgs = Vec::with_capacity(batch.len());
        let mut txts = Vec::with_capacity(batch.len());
        let mut mode = Mode::eval();
        for p in batch {
            imgs.push(self.vision.encode(vb, &p.image, &mut mode)?.1);
            let pooled = match self.text_cache.and_then(|c| c.get(&p.text)) {
                Some(t) => tb.tape().constant(t.clone()),
                None => self.text.pooled(tb, &self.text_ids(&p.text)?, &mut mode)?,
            };
            txts.push(linear(hb, TEXT_PROJ, pooled, None, &mut mode)?);
        }
        let i = Var::concat(&imgs, 0)?.l2_normalize()?;
        let t = Var::concat(&txts, 0)?.l2_normalize()?;
        Ok((i, t))
    }

    /// Cosine similarity matrix for a batch, eval mode.
    pub fn similarities(&self, batch: &[&AlignPair]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let vb = Binder::frozen(&tape, &self.vision.params);
        let tb = Binder::frozen(&tape, &self.text.params);
        let hb = Binder::frozen(&tape, &self.heads.params);
        let (i, t) = self.embed(&vb, &tb, &hb, batch)?;
        let s = similarity_matrix(i, t)?;
        let out = s.value().clone();
        Ok(out)
    }
}

/// Mean diagonal and mean off-diagonal entries.
pub fn diagonal_contrast<T: Scalar>(s: &Tensor<T>) -> (f64, f64) {
    let (n, _) = s.dims2();
    let (mut diag, mut off) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let v = s.get2(i, j).as_f64();
            if i == j {
                diag += v;
            } else {
                off += v;
            }
        }
    }
    let off_n = (n * n - n).max(1) as f64;
    (diag / n as f64, off / off_n)
}

/// Eval-mode pooled text states of every distinct caption.
fn pooled_texts<T: Scalar>(
    text: &LanguageModel<T>,
    vocab: &Vocabulary,
    pairs: &[AlignPair],
) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut out = BTreeMap::new();
    for p in pairs {
        if out.contains_key(&p.text) {
            continue;
        }
        let mut ids = vec![vocab.require_special(BOS)?];
        ids.extend(vocab.encode(&p.text).ids);
        let tape = Tape::new();
        let tb = Binder::frozen(&tape, &text.params);
        let v = text.pooled(&tb, &ids, &mut Mode::eval())?.value().clone();
        out.insert(p.text.clone(), v);
    }
    Ok(out)
}

/// Draw `k` pairs from distinct groups.
fn sample_batch<'a>(pairs: &'a [AlignPair], groups: &[Vec<usize>], k: usize, rng: &mut RngState) -> Vec<&'a AlignPair> {
    rng.sample_indices(groups.len(), k)
        .into_iter()
        .map(|g| &pairs[groups[g][rng.below(groups[g].len())]])
        .collect()
}

/// Minibatch descent on [`clip_loss`] over pooled image embeddings and
/// mean-pooled text states. Vision, text and head parameters marked
/// trainable are all updated.
pub fn align_train<T: Scalar>(
    vision: &mut VisionEncoder<T>,
    text: &mut LanguageModel<T>,
    heads: &mut AlignHeads<T>,
    vocab: &Vocabulary,
    pairs: &[AlignPair],
    config: &AlignConfig,
) -> Result<Vec<AlignLogRow>> {
    if pairs.len() < 2 {
        return Err(invalid("alignment needs at least two pairs"));
    }
    if config.batch_size < 2 {
        return Err(invalid("alignment batch size must be at least 2"));
    }
    if config.batch_size > pairs.len() {
        return Err(invalid(format!(
            "batch size {} exceeds the {} available pairs",
            config.batch_size,
            pairs.len()
        )));
    }
    let n_groups = pairs.iter().map(|p| p.group).max().unwrap_or(0) + 1;
    let mut groups = vec![Vec::new(); n_groups];
    for (i, p) in pairs.iter().enumerate() {
        groups[p.group].push(i);
    }
    groups.retain(|g| !g.is_empty());
    if config.batch_size > groups.len() {
        return Err(invalid(format!(
            "batch size {} exceeds the {} distinct classes",
            config.batch_size,
            groups.len()
        )));
    }
    let opt = OptimizerConfig {
        learning_rate: config.learning_rate,
        warmup_steps: config.warmup_steps,
        weight_decay: config.weight_decay,
        ..OptimizerConfig::default()
    };
    let mut state = OptimizerState::default();
    let mut rng = RngState::new(config.seed);
    let cache = if text.params.trainable_count() == 0 {
        Some(pooled_texts(text, vocab, pairs)?)
    } else {
        None
    };
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = sample_batch(pairs, &groups, config.batch_size, &mut rng);
        let augmented: Vec<AlignPair>;
        if config.augment {
            augmented = batch
                .iter()
                .map(|p| AlignPair {
                    image: {
                        let r = p.image.rotated((rng.uniform() - 0.5) * config.rotation_range);
                        if rng.below(2) == 1 {
                            r.dihedral(4)
                        } else {
                            r
                        }
                    },
                    text: p.text.clone(),
                    group: p.group,
                })
                .collect();
            batch = augmented.iter().collect();
        }
        let (loss, grads) = {
            let tape = Tape::new();
            let vb = Binder::new(&tape, &vision.params);
            let tb = Binder::new(&tape, &text.params);
            let hb = Binder::new(&tape, &heads.params);
            let enc = Encoders {
                vision,
                text,
                heads,
                vocab,
                text_cache: cache.as_ref(),
            };
            let (i, t) = enc.embed(&vb, &tb, &hb, &batch)?;
            let loss = clip_loss(i, t, hb.get(LOG_T)?)?;
            let g = tape.backward(loss)?;
            let mut grads = GradMap::new();
            vb.collect(&g, &mut grads);
            tb.collect(&g, &mut grads);
            hb.collect(&g, &mut grads);
            (loss.item().as_f64(), grads)
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "clip_loss" });
        }
        let gn = grad_norm(&grads);
        let mut lr = lr_at(step as u64, &opt);
        if config.decay {
            lr *= 1.0 - step as f64 / config.steps as f64;
        }
        adamw_step_at(
            &mut [&mut vision.params, &mut text.params, &mut heads.params],
            &grads,
            &mut state,
            &opt,
            lr,
        )?;
        heads.clamp_temperature()?;
        log.push(AlignLogRow {
            step,
            loss,
            temperature: heads.temperature(),
            grad_norm: gn,
        });
    }
    Ok(log)
}

pub fn write_align_csv(path: &Path, rows: &[AlignLogRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss,t")?;
    for r in rows {
        writeln!(f, "{},{},{}", r.step, r.loss, r.temperature)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat<'t>(tape: &'t Tape<f64>, rows: &[&[f64]]) -> Var<'t, f64> {
        let c = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        tape.constant(Tensor::from_f64(&[rows.len(), c], &data))
    }

    #[test]
    fn hand_similarity() {
        let tape = Tape::new();
        let i = mat(&tape, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let t = mat(&tape, &[&[0.0, 1.0], &[1.0, 0.0]]);
        let s = similarity_matrix(i, t).unwrap();
        assert_eq!(s.value().data(), &[0.0, 1.0, 1.0, 0.0]);
        assert!(similarity_matrix(i, mat(&tape, &[&[1.0, 2.0, 3.0]])).is_err());
    }

    #[test]
    fn two_by_two_loss() {
        let tape = Tape::new();
        let e = mat(&tape, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = clip_loss_at(e, e, 1.0).unwrap().item();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((l - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn single_pair_zero_and_bad_temperature() {
        let tape = Tape::new();
        let a = mat(&tape, &[&[0.6, 0.8]]);
        let b = mat(&tape, &[&[1.0, 0.0]]);
        assert_eq!(clip_loss_at(a, b, 0.3).unwrap().item(), 0.0);
        assert!(clip_loss_at(a, b, 0.0).is_err());
        assert!(clip_loss_at(a, b, -1.0).is_err());
    }
}
