//! Stage wiring shared by the command-line tool and end-to-end tests.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_train, write_align_csv, AlignHeads, AlignLogRow, AlignPair};
use crate::checkpoint::{self, Aligned};
use crate::config::RunConfig;
use crate::data::{
    build_splits, class_names, classes, make_vqa_pairs, materialize, plan_candidates, read_manifest, write_dataset,
    write_split_summary, Sample, Split, SplitCount, QUESTION_CAPTION, QUESTION_CLASS,
};
use crate::error::{invalid, Result};
use crate::evaluation::{
    aggregate_csv, evaluate, transcript, vqa_probe, EvalItem, EvalOutcome, MatchMode, ProbeReport, Scores,
};
use crate::models::lm::LmConfig;
use crate::models::{build_prompt, LanguageModel, LlvmModel, Projector, VisionEncoder};
use crate::rng::{derive_seed, RngState};
use crate::tensor::Tensor;
use crate::tokenizer::{Vocabulary, CHAT_SPECIALS, FIXTURE_CORPUS};
use crate::training::{finetune, pretrain_lm, write_pretrain_csv, Example, PretrainRow, TrainingLog};

/// Scalar used for experiment runs.
pub type S = f32;

pub fn corpus_text(cfg: &RunConfig) -> Result<String> {
    match &cfg.tokenizer.corpus {
        Some(p) => Ok(std::fs::read_to_string(p)?),
        None => Ok(FIXTURE_CORPUS.to_string()),
    }
}

/// Byte-level BPE plus the chat special tokens.
pub fn train_tokenizer(cfg: &RunConfig, corpus: &str) -> Result<Vocabulary> {
    let mut v = Vocabulary::train_bpe(corpus, cfg.tokenizer.vocab_size)?;
    v.add_special_tokens(&CHAT_SPECIALS)?;
    Ok(v)
}

pub fn lm_config(cfg: &RunConfig, vocab: &Vocabulary) -> LmConfig {
    LmConfig {
        vocab_size: vocab.extended_size(),
        ..cfg.model.lm.clone()
    }
}

pub fn pretrain(cfg: &RunConfig, vocab: &Vocabulary, corpus: &str) -> Result<(LanguageModel<S>, Vec<PretrainRow>)> {
    let mut rng = RngState::new(derive_seed(cfg.model.seed, &[1]));
    let mut lm = LanguageModel::new(lm_config(cfg, vocab), &mut rng)?;
    let rows = pretrain_lm(&mut lm, corpus, vocab, &cfg.train.pretrain)?;
    Ok((lm, rows))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub summary: Vec<SplitCount>,
}

/// Synthesize candidates, undersample to the caps and render.
pub fn make_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let cands = plan_candidates(&cfg.data);
    let mut rng = RngState::new(derive_seed(cfg.data.seed, &[u64::from(b's')]));
    let splits = build_splits(cands, cfg.data.train_per_class, cfg.data.test_per_class, &mut rng)?;
    Ok(Dataset {
        train: materialize(&splits.train, &cfg.data.synth)?,
        test: materialize(&splits.test, &cfg.data.synth)?,
        summary: splits.summary,
    })
}

pub fn write_data(dir: &Path, ds: &Dataset) -> Result<()> {
    let all: Vec<Sample> = ds.train.iter().chain(&ds.test).cloned().collect();
    write_dataset(dir, &all)?;
    write_split_summary(&dir.join("split_summary.csv"), &ds.summary)
}

/// Load a written dataset. Caps were applied when it was generated.
pub fn load_data(dir: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let cands = read_manifest(&dir.join("manifest.json"))?;
    let samples = materialize(&cands, &cfg.data.synth)?;
    let (train, test): (Vec<Sample>, Vec<Sample>) = samples.into_iter().partition(|s| s.split == Split::Train);
    let summary = classes()
        .iter()
        .enumerate()
        .map(|(ci, c)| SplitCount {
            class: c.name.clone(),
            train: train.iter().filter(|s| s.class == ci).count(),
            test: test.iter().filter(|s| s.class == ci).count(),
        })
        .collect();
    Ok(Dataset { train, test, summary })
}

/// Contrastive alignment of a fresh vision encoder against the frozen
/// pretrained language model, on (image, caption) pairs.
pub fn align(cfg: &RunConfig, mut lm: LanguageModel<S>, vocab: &Vocabulary, train: &[Sample]) -> Result<(Aligned<S>, Vec<AlignLogRow>)> {
    let mut rng = RngState::new(derive_seed(cfg.model.seed, &[2]));
    let mut vision = VisionEncoder::new(cfg.model.vision.clone(), &mut rng)?;
    let mut heads = AlignHeads::new(vision.config.d_vision, lm.config.d_model, &cfg.align, &mut rng)?;
    let pairs: Vec<AlignPair> = train
        .iter()
        .map(|s| AlignPair {
            image: s.image.clone(),
            text: s.caption.clone(),
            group: s.class,
        })
        .collect();
    let flags: Vec<bool> = lm.params.iter().map(|p| p.trainable).collect();
    lm.params.set_trainable_all(false);
    let log = align_train(&mut vision, &mut lm, &mut heads, vocab, &pairs, &cfg.align)?;
    for (p, f) in lm.params.iter_mut().zip(flags) {
        p.trainable = f;
    }
    Ok((
        Aligned {
            vision,
            lm,
            heads,
            vocab: vocab.clone(),
        },
        log,
    ))
}

/// Frozen vision encoder, fresh projector, LoRA on the (optionally
/// quantized) language model.
pub fn assemble(cfg: &RunConfig, vision: VisionEncoder<S>, lm: LanguageModel<S>) -> Result<LlvmModel<S>> {
    let mut rng = RngState::new(derive_seed(cfg.model.seed, &[3]));
    let mut vision = vision;
    vision.params.set_trainable_all(false);
    let mut projector = Projector::new(vision.config.d_vision, lm.config.d_model, &mut rng)?;
    projector.params.set_trainable_all(cfg.peft.lora.train_projector);
    let mut lm = lm;
    lm.inject_lora(&cfg.peft.lora, &mut rng)?;
    if cfg.peft.quantize {
        lm.quantize_base(cfg.peft.block_size)?;
    }
    let mut model = LlvmModel::assemble(vision, projector, lm)?;
    model.template = cfg.model.template.clone();
    Ok(model)
}

pub fn task_question(task: MatchMode) -> &'static str {
    match task {
        MatchMode::Classification => QUESTION_CLASS,
        MatchMode::Captioning => QUESTION_CAPTION,
    }
}

pub fn features(model: &LlvmModel<S>, samples: &[Sample]) -> Result<Vec<Tensor<S>>> {
    samples.par_iter().map(|s| model.image_features(&s.image)).collect()
}

pub fn examples(model: &LlvmModel<S>, samples: &[Sample], task: MatchMode, vocab: &Vocabulary) -> Result<Vec<Example<S>>> {
    let feats = features(model, samples)?;
    samples
        .iter()
        .zip(feats)
        .map(|(s, f)| {
            let answer = match task {
                MatchMode::Classification => s.class_name().to_string(),
                MatchMode::Captioning => s.caption.clone(),
            };
            Ok(Example {
                features: f,
                prompt: build_prompt(&model.template, task_question(task), Some(&answer), vocab)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutput {
    pub run: usize,
    pub seed: u64,
    pub log: TrainingLog,
    pub checkpoints: Vec<(u64, PathBuf)>,
}

/// `cfg.train.runs` fine-tuning runs from the same starting model that
/// differ only in the shuffle seed. Each run writes under `out/run_<r>`.
pub fn finetune_runs(cfg: &RunConfig, start: &LlvmModel<S>, train: &[Sample], vocab: &Vocabulary, out: &Path) -> Result<Vec<RunOutput>> {
    let exs = examples(start, train, cfg.train.task, vocab)?;
    let mut outs = Vec::with_capacity(cfg.train.runs);
    for r in 0..cfg.train.runs {
        let seed = cfg.train.finetune.run_seed + r as u64;
        let tc = crate::training::TrainConfig {
            run_seed: seed,
            ..cfg.train.finetune.clone()
        };
        let dir = out.join(format!("run_{r}"));
        std::fs::create_dir_all(&dir)?;
        let mut model = start.clone();
        let mut cps = Vec::new();
        let log = finetune(&mut model, &exs, &tc, &cfg.train.optimizer, |step, m| {
            let p = dir.join(format!("checkpoint-{step}"));
            checkpoint::save_llvm(&p, m, vocab, step)?;
            cps.push((step, p));
            Ok(())
        })?;
        log.write_csv(&dir.join("training.csv"))?;
        log.write_plots(&dir.join("loss.svg"), &dir.join("grad_norm.svg"))?;
        outs.push(RunOutput {
            run: r,
            seed,
            log,
            checkpoints: cps,
        });
    }
    Ok(outs)
}

pub fn eval_items<'a>(ids: &'a [Sample], feats: &'a [Tensor<S>]) -> Vec<EvalItem<'a, S>> {
    ids.iter()
        .zip(feats)
        .map(|(s, f)| EvalItem {
            id: &s.id,
            features: f,
            class: s.class,
        })
        .collect()
}

/// Greedy evaluation of one model on the test split.
pub fn evaluate_model(cfg: &RunConfig, model: &LlvmModel<S>, vocab: &Vocabulary, test: &[Sample], task: MatchMode) -> Result<EvalOutcome> {
    let feats = features(model, test)?;
    let items = eval_items(test, &feats);
    evaluate(
        model,
        &items,
        task_question(task),
        task,
        cfg.eval.normalized_match,
        classes(),
        vocab,
        &cfg.eval.generation,
    )
}

/// Evaluate each checkpoint, write per-checkpoint artifacts and the
/// aggregate table. Returns the per-checkpoint scores.
pub fn evaluate_checkpoints(cfg: &RunConfig, checkpoints: &[PathBuf], test: &[Sample], out: &Path) -> Result<Vec<Scores>> {
    if checkpoints.is_empty() {
        return Err(invalid("no checkpoints to evaluate"));
    }
    std::fs::create_dir_all(out)?;
    let mut scores = Vec::with_capacity(checkpoints.len());
    let mut labels = Vec::with_capacity(checkpoints.len());
    for (i, cp) in checkpoints.iter().enumerate() {
        let (model, vocab, meta) = checkpoint::load_llvm::<S>(cp)?;
        let outcome = evaluate_model(cfg, &model, &vocab, test, cfg.train.task)?;
        let stem = format!("eval_{i}_step{}", meta.step);
        outcome.report.write_all(out, &stem)?;
        std::fs::write(out.join(format!("{stem}_transcript.txt")), transcript(&outcome.records))?;
        std::fs::write(out.join(format!("{stem}_predictions.json")), serde_json::to_string_pretty(&outcome.records)?)?;
        log::info!("{} accuracy {:.4}", cp.display(), outcome.report.scores.accuracy);
        scores.push(outcome.report.scores);
        labels.push(cp.display().to_string());
    }
    std::fs::write(out.join("aggregate.csv"), aggregate_csv(&labels, &scores)?)?;
    Ok(scores)
}

/// Attribute questions on up to `probe_per_class` test items per class.
pub fn probe(cfg: &RunConfig, model: &LlvmModel<S>, vocab: &Vocabulary, test: &[Sample]) -> Result<ProbeReport> {
    let mut picked: Vec<Sample> = Vec::new();
    for ci in 0..classes().len() {
        picked.extend(test.iter().filter(|s| s.class == ci).take(cfg.eval.probe_per_class).cloned());
    }
    let feats = features(model, &picked)?;
    let items = eval_items(&picked, &feats);
    let qa: Vec<Vec<(String, String)>> = picked
        .iter()
        .map(|s| {
            make_vqa_pairs(s.class_name()).map(|pairs| {
                pairs
                    .into_iter()
                    .filter(|(q, _)| q != QUESTION_CLASS)
                    .collect()
            })
        })
        .collect::<Result<_>>()?;
    vqa_probe(model, &items, &qa, vocab, &cfg.eval.generation)
}

pub fn write_pretrain_outputs(dir: &Path, lm: &LanguageModel<S>, vocab: &Vocabulary, rows: &[PretrainRow]) -> Result<()> {
    checkpoint::save_lm(&dir.join("checkpoint"), lm, vocab, rows.len() as u64)?;
    write_pretrain_csv(&dir.join("pretrain_loss.csv"), rows)
}

pub fn write_align_outputs(dir: &Path, a: &Aligned<S>, rows: &[AlignLogRow]) -> Result<()> {
    checkpoint::save_aligned(&dir.join("checkpoint"), &a.vision, &a.lm, &a.heads, &a.vocab, rows.len() as u64)?;
    write_align_csv(&dir.join("align_loss.csv"), rows)
}

/// Names of the eleven classes, for reports.
pub fn class_list() -> Vec<String> {
    class_names().into_iter().map(String::from).collect()
}
