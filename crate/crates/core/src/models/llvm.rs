//! Vision encoder + linear projector + causal LM, joined at an image
//! placeholder in the prompt.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::GrayImage;
use crate::peft::{count_params, ParamCensus};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::{Vocabulary, BOS, EOS, IMAGE, INST_CLOSE, INST_OPEN};

use super::layers::{init_linear, linear, Mode};
use super::lm::{LanguageModel, Prefix};
use super::params::{Binder, ParamStore};
use super::vision::VisionEncoder;

pub const QUESTION_SLOT: &str = "{question}";

#[derive(Debug, Clone)]
pub struct Projector<T> {
    pub d_vision: usize,
    pub d_model: usize,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Projector<T> {
    pub fn new(d_vision: usize, d_model: usize, rng: &mut RngState) -> Result<Self> {
        let mut params = ParamStore::new();
        init_linear(&mut params, "projector", d_vision, d_model, (1.0 / d_vision as f64).sqrt(), rng)?;
        Ok(Self {
            d_vision,
            d_model,
            params,
        })
    }

    pub fn project<'t>(&self, b: &Binder<'t, '_, T>, x: Var<'t, T>, mode: &mut Mode) -> Result<Var<'t, T>> {
        linear(b, "projector", x, None, mode)
    }
}

/// Instruction prompt layout. Must contain the image placeholder and the
/// question slot exactly once each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptTemplate(pub String);

impl Default for PromptTemplate {
    fn default() -> Self {
        Self(format!("{BOS}{INST_OPEN} {IMAGE}\n{QUESTION_SLOT} {INST_CLOSE}"))
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        let n_img = self.0.matches(IMAGE).count();
        if n_img != 1 {
            return Err(invalid(format!(
                "prompt template needs exactly one {IMAGE} placeholder, found {n_img}"
            )));
        }
        if self.0.matches(QUESTION_SLOT).count() != 1 {
            return Err(invalid(format!("prompt template needs exactly one {QUESTION_SLOT} slot")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub ids: Vec<u32>,
    /// 1 on answer tokens and the closing EOS.
    pub loss_mask: Vec<u8>,
    pub image_index: usize,
    /// Where generation starts (or the answer begins when training).
    pub answer_start: usize,
}

impl Prompt {
    pub fn answer_tokens(&self) -> usize {
        self.loss_mask.iter().map(|&m| m as usize).sum()
    }
}

/// Tokenize a templated question and optional answer. The answer is encoded
/// with a leading space, as it follows the close-instruction marker.
pub fn build_prompt(
    template: &PromptTemplate,
    question: &str,
    answer: Option<&str>,
    vocab: &Vocabulary,
) -> Result<Prompt> {
    template.validate()?;
    let image_id = vocab.require_special(IMAGE)?;
    let text = template.0.replace(QUESTION_SLOT, question);
    let mut ids = vocab.encode(&text).ids;
    let hits: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == image_id)
        .map(|(i, _)| i)
        .collect();
    if hits.len() != 1 {
        return Err(invalid(format!(
            "prompt must contain exactly one {IMAGE} token, found {}",
            hits.len()
        )));
    }
    let answer_start = ids.len();
    let mut loss_mask = vec![0u8; ids.len()];
    if let Some(a) = answer {
        let a_ids = vocab.encode(&format!(" {a}")).ids;
        loss_mask.extend(std::iter::repeat_n(1, a_ids.len() + 1));
        ids.extend(a_ids);
        ids.push(vocab.require_special(EOS)?);
    }
    Ok(Prompt {
        ids,
        loss_mask,
        image_index: hits[0],
        answer_start,
    })
}

#[derive(Debug, Clone)]
pub struct LlvmModel<T> {
    pub vision: VisionEncoder<T>,
    pub projector: Projector<T>,
    pub lm: LanguageModel<T>,
    pub template: PromptTemplate,
}

impl<T: Scalar> LlvmModel<T> {
    pub fn assemble(vision: VisionEncoder<T>, projector: Projector<T>, lm: LanguageModel<T>) -> Result<Self> {
        if projector.d_vision != vision.config.d_vision || projector.d_model != lm.config.d_model {
            return Err(Error::ShapeMismatch {
                op: "assemble_llvm",
                lhs: vec![vision.config.d_vision, lm.config.d_model],
                rhs: vec![projector.d_vision, projector.d_model],
            });
        }
        let need = vision.config.max_patches() + usize::from(vision.config.pooled_token) + 8;
        if lm.config.context_length < need {
            return Err(invalid(format!(
                "context length {} cannot hold {} image patches plus a prompt",
                lm.config.context_length,
                vision.config.max_patches()
            )));
        }
        Ok(Self {
            vision,
            projector,
            lm,
            template: PromptTemplate::default(),
        })
    }

    pub fn census(&self) -> ParamCensus {
        count_params(&[&self.vision.params, &self.projector.params, &self.lm.params])
    }

    pub fn stores(&self) -> [&ParamStore<T>; 3] {
        [&self.vision.params, &self.projector.params, &self.lm.params]
    }

    /// Frozen-encoder patch features for an image, led by the pooled
    /// vector when the encoder is configured for it.
    pub fn image_features(&self, image: &GrayImage) -> Result<Tensor<T>> {
        let (patches, pooled) = self.vision.encode_detached(image)?;
        if !self.vision.config.pooled_token {
            return Ok(patches);
        }
        let (n, d) = (patches.shape()[0], patches.shape()[1]);
        let mut data = pooled.into_data();
        data.extend_from_slice(patches.data());
        Tensor::new(vec![n + 1, d], data)
    }

    /// Hidden states for a prompt whose placeholder is replaced by the
    /// projected `features`.
    pub fn hidden<'t>(
        &self,
        proj: &Binder<'t, '_, T>,
        lm: &Binder<'t, '_, T>,
        features: Var<'t, T>,
        prompt_ids: &[u32],
        image_index: usize,
        mode: &mut Mode,
    ) -> Result<Var<'t, T>> {
        let embeddings = self.projector.project(proj, features, mode)?;
        self.lm.hidden(
            lm,
            prompt_ids,
            Some(Prefix {
                embeddings,
                at: image_index,
            }),
            mode,
        )
    }

    /// Summed answer-token cross-entropy, divided by `normalizer`.
    pub fn answer_loss<'t>(
        &self,
        proj: &Binder<'t, '_, T>,
        lm: &Binder<'t, '_, T>,
        features: Var<'t, T>,
        prompt: &Prompt,
        normalizer: f64,
        mode: &mut Mode,
    ) -> Result<Var<'t, T>> {
        let n_ans = prompt.answer_tokens();
        if n_ans == 0 {
            return Err(invalid("prompt has no answer tokens"));
        }
        let n_patch = features.shape()[0];
        let h = self.hidden(proj, lm, features, &prompt.ids, prompt.image_index, mode)?;
        // Token i sits at expanded row i + n_patch - 1 once past the image.
        let shift = n_patch - 1;
        let first = prompt.answer_start;
        let rows = prompt.ids.len() - first;
        let h = h.slice(0, first + shift - 1, rows)?;
        let logits = self.lm.logits(lm, h)?;
        let targets: Vec<usize> = prompt.ids[first..].iter().map(|&t| t as usize).collect();
        let weights: Vec<T> = prompt.loss_mask[first..]
            .iter()
            .map(|&m| T::from_usize_lossy(m as usize))
            .collect();
        let mean = logits.cross_entropy_with_logits(&targets, Some(&weights))?;
        mean.scale(T::lit(n_ans as f64 / normalizer))
    }

    /// Next-token logits after `ids`, eval mode.
    pub fn next_logits(&self, features: &Tensor<T>, ids: &[u32], image_index: usize) -> Result<Vec<T>> {
        let tape = Tape::new();
        let pb = Binder::frozen(&tape, &self.projector.params);
        let lb = Binder::frozen(&tape, &self.lm.params);
        let f = tape.constant(features.clone());
        let h = self.hidden(&pb, &lb, f, ids, image_index, &mut Mode::eval())?;
        let n = h.shape()[0];
        let last = self.lm.logits(&lb, h.slice(0, n - 1, 1)?)?;
        let out = last.value().data().to_vec();
        Ok(out)
    }
}
