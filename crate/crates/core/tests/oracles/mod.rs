//! Independent oracles shared by the integration tests and the acceptance
//! report. Each check returns a short summary on success.
#![allow(dead_code)]

use sarvlm::alignment::clip_loss;
use sarvlm::error::Result;
use sarvlm::gradcheck::check;
use sarvlm::image::GrayImage;
use sarvlm::models::llvm::{build_prompt, LlvmModel, Projector, PromptTemplate};
use sarvlm::models::lm::{LanguageModel, LmConfig};
use sarvlm::models::params::ParamValue;
use sarvlm::models::{VisionConfig, VisionEncoder};
use sarvlm::peft::nf4::widest_gap;
use sarvlm::peft::{quantize_nf4, LoraConfig};
use sarvlm::rng::RngState;
use sarvlm::tape::{Tape, Var};
use sarvlm::tensor::Tensor;
use sarvlm::tokenizer::{Vocabulary, CHAT_SPECIALS};
use sarvlm::training::{finetune, Example, OptimizerConfig, TrainConfig};

pub type Check = std::result::Result<String, String>;

pub const GRAD_TOL: f64 = 1e-6;
pub const GRAD_SEEDS: u64 = 20;

type OpFn = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: OpFn,
}

fn dims(rng: &mut RngState) -> (usize, usize) {
    (1 + rng.below(5), 1 + rng.below(6))
}

fn span(rng: &mut RngState, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

fn randn(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Every differentiable engine op at shapes drawn from `seed`.
fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = RngState::new(seed);
    let (r, c) = dims(&mut rng);
    let k = 1 + rng.below(4);
    let mut cases: Vec<OpCase> = Vec::new();
    let mut push = |name, inputs, f: OpFn| cases.push(OpCase { name, inputs, f });

    push("matmul", vec![randn(&[r, k], &mut rng), randn(&[k, c], &mut rng)], Box::new(|_, v| v[0].matmul(v[1])));
    push("add", vec![randn(&[r, c], &mut rng), randn(&[r, c], &mut rng)], Box::new(|_, v| v[0].add(v[1])));
    push("add_row_broadcast", vec![randn(&[r, c], &mut rng), randn(&[c], &mut rng)], Box::new(|_, v| v[0].add(v[1])));
    push("add_scalar_broadcast", vec![randn(&[r, c], &mut rng), randn(&[], &mut rng)], Box::new(|_, v| v[0].add(v[1])));
    push("mul", vec![randn(&[r, c], &mut rng), randn(&[r, c], &mut rng)], Box::new(|_, v| v[0].mul(v[1])));
    push("mul_row_broadcast", vec![randn(&[r, c], &mut rng), randn(&[c], &mut rng)], Box::new(|_, v| v[0].mul(v[1])));
    push("mul_scalar_broadcast", vec![randn(&[r, c], &mut rng), randn(&[], &mut rng)], Box::new(|_, v| v[0].mul(v[1])));
    push("sub", vec![randn(&[r, c], &mut rng), randn(&[r, c], &mut rng)], Box::new(|_, v| v[0].sub(v[1])));
    push("transpose", vec![randn(&[r, c], &mut rng)], Box::new(|_, v| v[0].transpose()));
    push(
        "concat_rows",
        vec![randn(&[r, c], &mut rng), randn(&[k, c], &mut rng)],
        Box::new(|_, v| Var::concat(&[v[0], v[1]], 0)),
    );
    push(
        "concat_cols",
        vec![randn(&[r, c], &mut rng), randn(&[r, k], &mut rng)],
        Box::new(|_, v| Var::concat(&[v[0], v[1]], 1)),
    );
    let (sr, sc) = (rng.below(r), rng.below(c));
    push(
        "slice_rows",
        vec![randn(&[r, c], &mut rng)],
        Box::new(move |_, v| v[0].slice(0, sr, r - sr)),
    );
    push(
        "slice_cols",
        vec![randn(&[r, c], &mut rng)],
        Box::new(move |_, v| v[0].slice(1, sc, c - sc)),
    );
    push("mean", vec![randn(&[r, c], &mut rng)], Box::new(|_, v| v[0].mean()));
    push("sum", vec![randn(&[r, c], &mut rng)], Box::new(|_, v| v[0].sum()));
    push("mean_axis0", vec![randn(&[r, c], &mut rng)], Box::new(|_, v| v[0].mean_axis(0)));
    push("mean_axis1", vec![randn(&[r, c], &mut rng)], Box::new(|_, v| v[0].mean_axis(1)));
    let factor = span(&mut rng, -2.0, 2.0);
    push("scale", vec![randn(&[r, c], &mut rng)], Box::new(move |_, v| v[0].scale(factor)));
    push("exp", vec![randn(&[r, c], &mut rng)], Box::new(|_, v| v[0].exp()));
    push(
        "log",
        vec![Tensor::uniform(&[r, c], 0.5, 2.0, &mut rng)],
        Box::new(|_, v| v[0].log()),
    );
    push("softmax", vec![randn(&[r, c + 1], &mut rng)], Box::new(|_, v| v[0].softmax()));
    push("layer_norm", vec![randn(&[r, c + 2], &mut rng)], Box::new(|_, v| v[0].layer_norm()));
    push("gelu", vec![Tensor::randn(&[r, c], 2.0, &mut rng)], Box::new(|_, v| v[0].gelu()));
    let vocab = 2 + rng.below(5);
    let ids: Vec<usize> = (0..r + 2).map(|_| rng.below(vocab)).collect();
    push(
        "embedding_lookup",
        vec![randn(&[vocab, c], &mut rng)],
        Box::new(move |_, v| v[0].embedding_lookup(&ids)),
    );
    let targets: Vec<usize> = (0..r).map(|_| rng.below(c + 1)).collect();
    let t2 = targets.clone();
    push(
        "cross_entropy",
        vec![randn(&[r, c + 1], &mut rng)],
        Box::new(move |_, v| v[0].cross_entropy_with_logits(&targets, None)),
    );
    let weights: Vec<f64> = (0..r).map(|i| if i == 0 { 1.0 } else { span(&mut rng, 0.0, 2.0) }).collect();
    push(
        "cross_entropy_weighted",
        vec![randn(&[r, c + 1], &mut rng)],
        Box::new(move |_, v| v[0].cross_entropy_with_logits(&t2, Some(&weights))),
    );
    push("l2_normalize", vec![randn(&[r, c + 1], &mut rng)], Box::new(|_, v| v[0].l2_normalize()));
    let drop_seed = rng.fork().seed();
    push(
        "dropout",
        vec![randn(&[r, c], &mut rng)],
        Box::new(move |_, v| v[0].dropout(0.3, true, &mut RngState::new(drop_seed))),
    );
    let n = 1 + rng.below(4);
    let d = 2 + rng.below(4);
    push(
        "clip_loss",
        vec![randn(&[n, d], &mut rng), randn(&[n, d], &mut rng), Tensor::scalar(span(&mut rng, -1.5, 0.5))],
        Box::new(|_, v| clip_loss(v[0].l2_normalize()?, v[1].l2_normalize()?, v[2])),
    );
    cases
}

/// Finite-difference check of every op and the contrastive loss over
/// `GRAD_SEEDS` random shape draws. Returns the worst relative error per op.
pub fn gradient_suite() -> Vec<(String, f64)> {
    let mut worst: Vec<(String, f64)> = Vec::new();
    for seed in 0..GRAD_SEEDS {
        let mut rng = RngState::new(1000 + seed);
        for case in op_cases(seed) {
            let err = match check(&case.inputs, &case.f, &mut rng) {
                Ok(r) => r.max_rel_error,
                Err(_) => f64::INFINITY,
            };
            match worst.iter_mut().find(|(n, _)| n == case.name) {
                Some(slot) => slot.1 = slot.1.max(err),
                None => worst.push((case.name.to_string(), err)),
            }
        }
    }
    worst
}

pub fn check_gradients() -> Check {
    let t0 = std::time::Instant::now();
    let worst = gradient_suite();
    let secs = t0.elapsed().as_secs_f64();
    let bad: Vec<String> = worst
        .iter()
        .filter(|(_, e)| !(*e < GRAD_TOL))
        .map(|(n, e)| format!("{n}={e:.2e}"))
        .collect();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    if !bad.is_empty() {
        return Err(format!("relative error too large: {}", bad.join(", ")));
    }
    if secs >= 60.0 {
        return Err(format!("took {secs:.1}s"));
    }
    Ok(format!(
        "{} ops x {GRAD_SEEDS} shape draws, worst rel err {max:.2e}, {secs:.2}s",
        worst.len()
    ))
}

/// Term-by-term symmetric contrastive loss with no numerical shortcuts.
pub fn clip_brute(img: &[Vec<f64>], txt: &[Vec<f64>], temperature: f64) -> f64 {
    let n = img.len();
    let s = |i: usize, j: usize| -> f64 { img[i].iter().zip(&txt[j]).map(|(a, b)| a * b).sum::<f64>() / temperature };
    let mut total = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| s(i, j).exp()).sum();
        let col: f64 = (0..n).map(|j| s(j, i).exp()).sum();
        total += (s(i, i).exp() / row).ln() + (s(i, i).exp() / col).ln();
    }
    -total / (2.0 * n as f64)
}

fn unit_rows(n: usize, d: usize, rng: &mut RngState) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn engine_clip(img: &[Vec<f64>], txt: &[Vec<f64>], temperature: f64) -> Result<f64> {
    let tape = Tape::new();
    let d = img[0].len();
    let mk = |rows: &[Vec<f64>]| Tensor::from_vec(&[rows.len(), d], rows.concat());
    let i = tape.constant(mk(img));
    let t = tape.constant(mk(txt));
    let log_t = tape.constant(Tensor::scalar(temperature.ln()));
    Ok(clip_loss(i, t, log_t)?.item())
}

pub const CLIP_BATCHES: usize = 100;

pub fn check_clip_oracle() -> Check {
    let mut rng = RngState::new(77);
    let mut max_delta: f64 = 0.0;
    for n in 1..=4 {
        for _ in 0..CLIP_BATCHES {
            let d = 2 + rng.below(7);
            let temperature = span(&mut rng, 0.05, 1.0);
            let img = unit_rows(n, d, &mut rng);
            let txt = unit_rows(n, d, &mut rng);
            let ours = engine_clip(&img, &txt, temperature).map_err(|e| e.to_string())?;
            let swapped = engine_clip(&txt, &img, temperature).map_err(|e| e.to_string())?;
            if ours.to_bits() != swapped.to_bits() {
                return Err(format!("asymmetric at N={n}: {ours} vs {swapped}"));
            }
            if n == 1 && ours != 0.0 {
                return Err(format!("N=1 loss {ours} is not exactly zero"));
            }
            max_delta = max_delta.max((ours - clip_brute(&img, &txt, temperature)).abs());
        }
    }
    if max_delta < 1e-12 {
        Ok(format!("N=1..4 x {CLIP_BATCHES} batches, max |delta| {max_delta:.2e}"))
    } else {
        Err(format!("max |delta| {max_delta:.3e}"))
    }
}

/// A small chat vocabulary trained on a fixed sentence set.
pub fn toy_vocab() -> Vocabulary {
    let corpus = "the vehicle is a tracked tank. describe this image. what vehicle is this? \
                  a wheeled truck with a radar dish. an armored personnel carrier. ";
    let mut v = Vocabulary::train_bpe(&corpus.repeat(4), 300).expect("toy vocabulary");
    v.add_special_tokens(&CHAT_SPECIALS).expect("chat specials");
    v
}

pub fn toy_lm_config(vocab: &Vocabulary) -> LmConfig {
    LmConfig {
        vocab_size: vocab.extended_size(),
        ..LmConfig::default()
    }
}

fn random_image(rng: &mut RngState) -> GrayImage {
    let pixels = (0..128 * 128).map(|_| span(rng, 0.0, 1.0) as f32).collect();
    GrayImage::new(128, 128, pixels).expect("image")
}

/// Adapter parameter count enumerated from the configuration alone.
pub fn lora_count_oracle(lm: &LmConfig, lora: &LoraConfig) -> usize {
    let per_adapter = lora.rank * lm.d_model + lm.d_model * lora.rank;
    lm.depth * lora.targets.len() * per_adapter
}

pub fn projector_count_oracle(vision: &VisionConfig, lm: &LmConfig) -> usize {
    vision.d_vision * lm.d_model + lm.d_model
}

pub const LORA_INPUTS: usize = 100;
pub const LORA_STEPS: u64 = 50;

struct Toy {
    vocab: Vocabulary,
    base: LlvmModel<f64>,
    adapted: LlvmModel<f64>,
}

fn toy_models() -> Result<Toy> {
    let vocab = toy_vocab();
    let mut rng = RngState::new(5);
    let vision = VisionEncoder::<f64>::new(VisionConfig::default(), &mut rng)?;
    let lm = LanguageModel::<f64>::new(toy_lm_config(&vocab), &mut rng)?;
    let mut projector = Projector::new(vision.config.d_vision, lm.config.d_model, &mut rng)?;
    projector.params.set_trainable_all(true);
    let base = LlvmModel::assemble(vision.clone(), projector.clone(), lm.clone())?;
    let mut vision = vision;
    vision.params.set_trainable_all(false);
    let mut lm = lm;
    lm.inject_lora(&LoraConfig::default(), &mut rng)?;
    let adapted = LlvmModel::assemble(vision, projector, lm)?;
    Ok(Toy { vocab, base, adapted })
}

fn lora_identity(toy: &Toy) -> Result<f64> {
    let mut rng = RngState::new(9);
    let vocab_n = toy.vocab.extended_size() as u64;
    let mut max_delta: f64 = 0.0;
    for _ in 0..LORA_INPUTS {
        let feats = toy.base.image_features(&random_image(&mut rng))?;
        let len = 2 + rng.below(12);
        let ids: Vec<u32> = (0..len).map(|_| rng.below(vocab_n as usize) as u32).collect();
        let at = rng.below(len);
        let a = toy.base.next_logits(&feats, &ids, at)?;
        let b = toy.adapted.next_logits(&feats, &ids, at)?;
        for (x, y) in a.iter().zip(&b) {
            max_delta = max_delta.max((x - y).abs());
        }
    }
    Ok(max_delta)
}

fn frozen_bits(model: &LlvmModel<f64>) -> Vec<(String, Vec<u64>, Vec<u8>)> {
    model
        .stores()
        .iter()
        .flat_map(|s| s.iter())
        .filter(|p| !p.trainable)
        .map(|p| {
            let codes = match &p.value {
                ParamValue::Quantized { q, .. } => q.codes.clone(),
                ParamValue::Dense(_) => Vec::new(),
            };
            (p.name.clone(), p.tensor().data().iter().map(|x| x.to_bits()).collect(), codes)
        })
        .collect()
}

fn trainable_bits(model: &LlvmModel<f64>) -> Vec<Vec<u64>> {
    model
        .stores()
        .iter()
        .flat_map(|s| s.iter())
        .filter(|p| p.trainable)
        .map(|p| p.tensor().data().iter().map(|x| x.to_bits()).collect())
        .collect()
}

/// Runs `LORA_STEPS` optimizer steps on a quantized adapted model and
/// reports whether frozen weights kept their exact bits.
fn frozen_after_training(toy: &Toy) -> Result<(bool, bool)> {
    let mut model = toy.adapted.clone();
    model.lm.quantize_base(64)?;
    let mut rng = RngState::new(13);
    let template = PromptTemplate::default();
    let answers = ["a tracked tank", "a wheeled truck"];
    let mut examples = Vec::new();
    for i in 0..4 {
        examples.push(Example {
            features: model.image_features(&random_image(&mut rng))?,
            prompt: build_prompt(&template, "what vehicle is this?", Some(answers[i % 2]), &toy.vocab)?,
        });
    }
    let before = frozen_bits(&model);
    let trained_before = trainable_bits(&model);
    let train = TrainConfig {
        epochs: LORA_STEPS as usize / 2,
        batch_size: 2,
        checkpoint_every: 1000,
        log_every: 10,
        run_seed: 1,
    };
    let log = finetune(&mut model, &examples, &train, &OptimizerConfig::default(), |_, _| Ok(()))?;
    let steps = log.rows.last().map(|r| r.step).unwrap_or(0);
    if steps != LORA_STEPS {
        return Err(sarvlm::error::invalid(format!("ran {steps} steps")));
    }
    Ok((frozen_bits(&model) == before, trainable_bits(&model) != trained_before))
}

pub fn check_lora_contract() -> Check {
    let toy = toy_models().map_err(|e| e.to_string())?;
    let delta = lora_identity(&toy).map_err(|e| e.to_string())?;
    if delta != 0.0 {
        return Err(format!("injection changed outputs by {delta:e}"));
    }
    let (frozen_same, trainable_moved) = frozen_after_training(&toy).map_err(|e| e.to_string())?;
    if !frozen_same {
        return Err(format!("frozen parameters changed during {LORA_STEPS} steps"));
    }
    if !trainable_moved {
        return Err("trainable parameters never moved".into());
    }
    let lm = &toy.adapted.lm.config;
    let expected = lora_count_oracle(lm, &LoraConfig::default())
        + projector_count_oracle(&toy.adapted.vision.config, lm);
    let census = toy.adapted.census();
    if census.trainable != expected {
        return Err(format!("trainable {} vs oracle {expected}", census.trainable));
    }
    Ok(format!(
        "identity over {LORA_INPUTS} inputs, frozen bits kept over {LORA_STEPS} steps, trainable {} of {}",
        census.trainable, census.total
    ))
}

pub const NF4_BLOCKS: usize = 1000;

pub fn check_nf4_round_trip() -> Check {
    let mut rng = RngState::new(4242);
    let gap = widest_gap();
    let mut worst_ratio: f64 = 0.0;
    for b in 0..NF4_BLOCKS {
        let scale = 10f64.powf(span(&mut rng, -3.0, 3.0));
        let mut v: Vec<f32> = (0..64).map(|_| (rng.normal() * scale) as f32).collect();
        let absmax = v.iter().fold(0f32, |m, x| m.max(x.abs()));
        let zero_at = rng.below(64);
        let pos_at = (zero_at + 1 + rng.below(63)) % 64;
        let neg_at = (0..64).find(|&i| i != zero_at && i != pos_at).unwrap_or(0);
        v[zero_at] = 0.0;
        v[pos_at] = absmax;
        v[neg_at] = -absmax;
        let t = Tensor::from_vec(&[64], v.clone());
        let q = quantize_nf4(&t, 64).map_err(|e| e.to_string())?;
        let back = q.dequantize::<f32>();
        let bound = absmax as f64 * gap / 2.0;
        for (i, (&x, &y)) in v.iter().zip(back.data()).enumerate() {
            let err = (x as f64 - y as f64).abs();
            if err > bound {
                return Err(format!("block {b} element {i}: error {err:e} over bound {bound:e}"));
            }
            worst_ratio = worst_ratio.max(err / bound);
        }
        for &i in &[zero_at, pos_at, neg_at] {
            if back.data()[i] != v[i] {
                return Err(format!("block {b}: {} reconstructed as {}", v[i], back.data()[i]));
            }
        }
    }
    Ok(format!("{NF4_BLOCKS} blocks, worst error {:.3} of bound", worst_ratio))
}
