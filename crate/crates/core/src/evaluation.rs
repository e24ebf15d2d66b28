//! Decoding, exact-match scoring, metrics, aggregation and attribute probes.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TargetClass;
use crate::error::{invalid, Error, Result};
use crate::models::{build_prompt, LlvmModel};
use crate::plot::{heatmap_svg, write_svg};
use crate::rng::{derive_seed, RngState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{Vocabulary, EOS};

pub const UNKNOWN: &str = "Unknown";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub mode: DecodeMode,
    /// Only used when sampling.
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            max_new_tokens: 24,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == DecodeMode::Sampled && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid(format!("sampling temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_from<T: Scalar>(logits: &[T], temperature: f64, rng: &mut RngState) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|l| l.as_f64() / temperature).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scaled.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.uniform() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    w.len() - 1
}

/// Autoregressive decoding against any next-token logit source. Stops at
/// `eos` (not included) or after `max_new_tokens`.
pub fn generate_with<T: Scalar>(
    mut next: impl FnMut(&[u32]) -> Result<Vec<T>>,
    prompt: &[u32],
    eos: u32,
    config: &GenerationConfig,
) -> Result<Vec<u32>> {
    config.validate()?;
    let mut rng = RngState::new(config.seed);
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..config.max_new_tokens {
        let logits = next(&ids)?;
        let tok = match config.mode {
            DecodeMode::Greedy => argmax(&logits),
            DecodeMode::Sampled => sample_from(&logits, config.temperature, &mut rng),
        } as u32;
        if tok == eos {
            break;
        }
        ids.push(tok);
        out.push(tok);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub ids: Vec<u32>,
}

/// Answer `question` about an image given its cached patch features.
pub fn generate<T: Scalar>(
    model: &LlvmModel<T>,
    features: &Tensor<T>,
    question: &str,
    vocab: &Vocabulary,
    config: &GenerationConfig,
) -> Result<Generation> {
    let prompt = build_prompt(&model.template, question, None, vocab)?;
    let n_patch = features.shape()[0];
    let len = prompt.ids.len() + n_patch - 1 + config.max_new_tokens;
    if len > model.lm.config.context_length {
        return Err(Error::ContextOverflow {
            len,
            max: model.lm.config.context_length,
        });
    }
    let eos = vocab.require_special(EOS)?;
    let mut session = model.decoder(features, &prompt.ids, prompt.image_index)?;
    let ids = generate_with(|ids| session.next(ids), &prompt.ids, eos, config)?;
    Ok(Generation {
        text: vocab.decode_lossy(&ids)?.trim().to_string(),
        ids,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Classification,
    Captioning,
}

/// Map generated text to a class index, `None` meaning Unknown. Matching is
/// exact after trimming; `normalized` additionally ignores case and
/// collapses internal whitespace.
pub fn match_prediction(text: &str, classes: &[TargetClass], mode: MatchMode, normalized: bool) -> Option<usize> {
    let norm = |s: &str| -> String {
        if normalized {
            s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
        } else {
            s.trim().to_string()
        }
    };
    let t = norm(text);
    classes.iter().position(|c| {
        let reference = match mode {
            MatchMode::Classification => &c.name,
            MatchMode::Captioning => &c.caption,
        };
        norm(reference) == t
    })
}

pub fn label_name(label: Option<usize>, classes: &[TargetClass]) -> String {
    match label {
        Some(i) => classes[i].name.clone(),
        None => UNKNOWN.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub class_balanced_accuracy: f64,
    pub class_balanced_precision: f64,
    pub f1: f64,
}

impl Scores {
    pub const NAMES: [&'static str; 4] = ["accuracy", "class_balanced_accuracy", "class_balanced_precision", "f1"];

    pub fn values(&self) -> [f64; 4] {
        [
            self.accuracy,
            self.class_balanced_accuracy,
            self.class_balanced_precision,
            self.f1,
        ]
    }

    pub fn from_values(v: [f64; 4]) -> Self {
        Self {
            accuracy: v[0],
            class_balanced_accuracy: v[1],
            class_balanced_precision: v[2],
            f1: v[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scores: Scores,
    pub class_names: Vec<String>,
    /// `confusion[true][pred]`; the last column counts Unknown predictions.
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    /// Confusion rows divided by their true-class totals.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.confusion
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                    .collect()
            })
            .collect()
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut cols = self.class_names.clone();
        cols.push(UNKNOWN.to_string());
        cols
    }

    pub fn confusion_csv(&self, normalized: bool) -> String {
        let mut s = format!("true\\pred,{}\n", self.column_names().join(","));
        let norm = self.row_normalized();
        for (i, name) in self.class_names.iter().enumerate() {
            let cells: Vec<String> = if normalized {
                norm[i].iter().map(|v| format!("{v}")).collect()
            } else {
                self.confusion[i].iter().map(|v| v.to_string()).collect()
            };
            let _ = writeln!(s, "{name},{}", cells.join(","));
        }
        s
    }

    pub fn scores_csv(&self) -> String {
        let v = self.scores.values();
        format!(
            "{}\n{}\n",
            Scores::NAMES.join(","),
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        )
    }

    /// JSON, CSV, confusion CSVs and a row-normalized heatmap under `dir`
    /// using `stem` as the file prefix.
    pub fn write_all(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::write(dir.join(format!("{stem}_metrics.json")), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join(format!("{stem}_metrics.csv")), self.scores_csv())?;
        std::fs::write(dir.join(format!("{stem}_confusion.csv")), self.confusion_csv(false))?;
        std::fs::write(dir.join(format!("{stem}_confusion_normalized.csv")), self.confusion_csv(true))?;
        let svg = heatmap_svg(
            &format!("{stem}: confusion (row-normalized)"),
            &self.class_names,
            &self.column_names(),
            &self.row_normalized(),
        );
        write_svg(&dir.join(format!("{stem}_confusion.svg")), &svg)
    }
}

/// Accuracy, macro recall, macro precision and macro F1 over
/// `class_names.len()` true classes. Unknown predictions (`None`) count
/// against recall and never enter a precision denominator. A class that is
/// never predicted has precision 0.
pub fn compute_metrics(predictions: &[Option<usize>], truths: &[usize], class_names: &[String]) -> Result<MetricsReport> {
    if predictions.len() != truths.len() {
        return Err(Error::ShapeMismatch {
            op: "compute_metrics",
            lhs: vec![predictions.len()],
            rhs: vec![truths.len()],
        });
    }
    let k = class_names.len();
    if k == 0 {
        return Err(invalid("empty class set"));
    }
    let mut confusion = vec![vec![0u64; k + 1]; k];
    for (&p, &t) in predictions.iter().zip(truths) {
        if t >= k {
            return Err(invalid(format!("truth index {t} out of range")));
        }
        let col = match p {
            Some(c) if c < k => c,
            Some(c) => return Err(invalid(format!("prediction index {c} out of range"))),
            None => k,
        };
        confusion[t][col] += 1;
    }
    let n = truths.len();
    let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
    let (mut rec, mut prec, mut f1) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = confusion[c][c] as f64;
        let row: u64 = confusion[c].iter().sum();
        let col: u64 = (0..k).map(|r| confusion[r][c]).sum();
        let r = if row == 0 { 0.0 } else { tp / row as f64 };
        let p = if col == 0 { 0.0 } else { tp / col as f64 };
        rec += r;
        prec += p;
        f1 += if r + p == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    }
    let kf = k as f64;
    Ok(MetricsReport {
        scores: Scores {
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            class_balanced_accuracy: rec / kf,
            class_balanced_precision: prec / kf,
            f1: f1 / kf,
        },
        class_names: class_names.to_vec(),
        confusion,
    })
}

/// Mean and sample (n − 1) standard deviation; σ is absent for n < 2.
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Some(var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n: usize,
    pub mean: Scores,
    pub std: Option<Scores>,
}

impl AggregateReport {
    /// `Mean±σ` row in percent.
    pub fn row(&self) -> String {
        let m = self.mean.values();
        let cells: Vec<String> = match &self.std {
            Some(s) => m
                .iter()
                .zip(s.values())
                .map(|(a, b)| format!("{:.2}%±{:.2}%", a * 100.0, b * 100.0))
                .collect(),
            None => m.iter().map(|a| format!("{:.2}%", a * 100.0)).collect(),
        };
        format!("Mean±σ,{}", cells.join(","))
    }
}

pub fn aggregate(scores: &[Scores]) -> Result<AggregateReport> {
    if scores.is_empty() {
        return Err(invalid("nothing to aggregate"));
    }
    let mut mean = [0.0; 4];
    let mut std = [0.0; 4];
    let mut has_std = true;
    for m in 0..4 {
        let xs: Vec<f64> = scores.iter().map(|s| s.values()[m]).collect();
        let (mu, sd) = mean_std(&xs);
        mean[m] = mu;
        match sd {
            Some(sd) => std[m] = sd,
            None => has_std = false,
        }
    }
    Ok(AggregateReport {
        n: scores.len(),
        mean: Scores::from_values(mean),
        std: has_std.then(|| Scores::from_values(std)),
    })
}

/// CSV with one row per evaluated item and the aggregate row last.
pub fn aggregate_csv(labels: &[String], scores: &[Scores]) -> Result<String> {
    let agg = aggregate(scores)?;
    let mut s = format!("checkpoint,{}\n", Scores::NAMES.join(","));
    for (l, sc) in labels.iter().zip(scores) {
        let v: Vec<String> = sc.values().iter().map(|x| format!("{:.2}%", x * 100.0)).collect();
        let _ = writeln!(s, "{l},{}", v.join(","));
    }
    let _ = writeln!(s, "{}", agg.row());
    Ok(s)
}

/// One evaluated test item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub truth: String,
    pub generated: String,
    pub label: String,
    pub ids: Vec<u32>,
}

/// An item to evaluate: id, cached features and true class.
pub struct EvalItem<'a, T> {
    pub id: &'a str,
    pub features: &'a Tensor<T>,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub records: Vec<PredictionRecord>,
    pub report: MetricsReport,
}

/// Generate for every item in parallel and score in item order.
pub fn evaluate<T: Scalar>(
    model: &LlvmModel<T>,
    items: &[EvalItem<'_, T>],
    question: &str,
    mode: MatchMode,
    normalized: bool,
    classes: &[TargetClass],
    vocab: &Vocabulary,
    config: &GenerationConfig,
) -> Result<EvalOutcome> {
    let gens: Vec<Generation> = items
        .par_iter()
        .enumerate()
        .map(|(i, it)| {
            let cfg = GenerationConfig {
                seed: derive_seed(config.seed, &[i as u64]),
                ..config.clone()
            };
            generate(model, it.features, question, vocab, &cfg)
        })
        .collect::<Result<_>>()?;
    let mut preds = Vec::with_capacity(items.len());
    let mut records = Vec::with_capacity(items.len());
    for (it, g) in items.iter().zip(gens) {
        let label = match_prediction(&g.text, classes, mode, normalized);
        preds.push(label);
        records.push(PredictionRecord {
            sample_id: it.id.to_string(),
            truth: classes[it.class].name.clone(),
            generated: g.text,
            label: label_name(label, classes),
            ids: g.ids,
        });
    }
    let truths: Vec<usize> = items.iter().map(|i| i.class).collect();
    let names: Vec<String> = classes.iter().map(|c| c.name.clone()).collect();
    let report = compute_metrics(&preds, &truths, &names)?;
    Ok(EvalOutcome { records, report })
}

/// Plain-text verbatim transcript.
pub fn transcript(records: &[PredictionRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "[{}] truth={} label={}\n  {}", r.sample_id, r.truth, r.label, r.generated);
    }
    s
}

/// Lowercase, trim, then substring test.
pub fn probe_correct(generated: &str, expected: &str) -> bool {
    generated.trim().to_lowercase().contains(&expected.trim().to_lowercase())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionAccuracy {
    pub question: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTranscript {
    pub sample_id: String,
    pub question: String,
    pub expected: String,
    pub generated: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub questions: Vec<QuestionAccuracy>,
    pub transcripts: Vec<ProbeTranscript>,
}

/// Score already-generated probe answers. Each entry is
/// `(sample_id, question, expected, generated)`.
pub fn score_probe(answers: Vec<(String, String, String, String)>) -> ProbeReport {
    let mut questions: Vec<QuestionAccuracy> = Vec::new();
    let mut transcripts = Vec::with_capacity(answers.len());
    for (id, q, expected, generated) in answers {
        let ok = probe_correct(&generated, &expected);
        let entry = match questions.iter_mut().position(|e| e.question == q) {
            Some(i) => &mut questions[i],
            None => {
                questions.push(QuestionAccuracy {
                    question: q.clone(),
                    correct: 0,
                    total: 0,
                    accuracy: 0.0,
                });
                questions.last_mut().expect("just pushed")
            }
        };
        entry.total += 1;
        entry.correct += usize::from(ok);
        entry.accuracy = entry.correct as f64 / entry.total as f64;
        transcripts.push(ProbeTranscript {
            sample_id: id,
            question: q,
            expected,
            generated,
            correct: ok,
        });
    }
    ProbeReport { questions, transcripts }
}

/// Ask every attribute question of every item and score by substring.
/// `qa` gives each item's `(question, expected answer)` pairs.
pub fn vqa_probe<T: Scalar>(
    model: &LlvmModel<T>,
    items: &[EvalItem<'_, T>],
    qa: &[Vec<(String, String)>],
    vocab: &Vocabulary,
    config: &GenerationConfig,
) -> Result<ProbeReport> {
    if qa.len() != items.len() {
        return Err(invalid("one question list per item is required"));
    }
    let jobs: Vec<(usize, &String, &String)> = qa
        .iter()
        .enumerate()
        .flat_map(|(i, pairs)| pairs.iter().map(move |(q, a)| (i, q, a)))
        .collect();
    let answers = jobs
        .par_iter()
        .enumerate()
        .map(|(j, &(i, q, a))| {
            let cfg = GenerationConfig {
                seed: derive_seed(config.seed, &[j as u64]),
                ..config.clone()
            };
            let g = generate(model, items[i].features, q, vocab, &cfg)?;
            Ok((items[i].id.to_string(), q.clone(), a.clone(), g.text))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(score_probe(answers))
}

impl ProbeReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for q in &self.questions {
            let _ = writeln!(s, "{:>7.2}%  {}/{}  {}", q.accuracy * 100.0, q.correct, q.total, q.question);
        }
        s.push('\n');
        for t in &self.transcripts {
            let mark = if t.correct { "ok " } else { "err" };
            let _ = writeln!(s, "{mark} [{}] {} (expect {:?})\n    {}", t.sample_id, t.question, t.expected, t.generated);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::classes;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn hand_confusion_case() {
        // truths A A B B C C, predictions A B B B C A
        let truths = [0, 0, 1, 1, 2, 2];
        let preds = [Some(0), Some(1), Some(1), Some(1), Some(2), Some(0)];
        let r = compute_metrics(&preds, &truths, &names(3)).unwrap();
        let s = r.scores;
        assert!((s.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.class_balanced_accuracy - 2.0 / 3.0).abs() < 1e-12);
        let p = (0.5 + 2.0 / 3.0 + 1.0) / 3.0;
        assert!((s.class_balanced_precision - p).abs() < 1e-12);
        let f = (0.5 + 0.8 + 2.0 / 3.0) / 3.0;
        assert!((s.f1 - f).abs() < 1e-12);
        assert_eq!(r.confusion[0], vec![1, 1, 0, 0]);
    }

    #[test]
    fn unknown_column_and_normalization() {
        let r = compute_metrics(&[None, Some(0), Some(1)], &[0, 0, 1], &names(2)).unwrap();
        assert_eq!(r.confusion[0], vec![1, 0, 1]);
        for row in r.row_normalized() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(r.scores.class_balanced_precision, 1.0);
        assert!(compute_metrics(&[None], &[0, 1], &names(2)).is_err());
    }

    #[test]
    fn matching() {
        let c = classes();
        let t72 = c.iter().position(|x| x.name == "T-72");
        assert_eq!(match_prediction("T-72", c, MatchMode::Classification, false), t72);
        assert_eq!(match_prediction(" T-72\n", c, MatchMode::Classification, false), t72);
        assert_eq!(match_prediction("DMP-28", c, MatchMode::Classification, false), None);
        assert_eq!(match_prediction("t-72", c, MatchMode::Classification, false), None);
        assert_eq!(match_prediction("t-72", c, MatchMode::Classification, true), t72);
        assert_eq!(
            match_prediction("T-72, a tracked medium main battle tank", c, MatchMode::Captioning, false),
            t72
        );
        assert_eq!(match_prediction("T-72", c, MatchMode::Captioning, false), None);
    }

    #[test]
    fn aggregate_anchor_rows() {
        let s = |a: f64| Scores::from_values([a / 100.0; 4]);
        let t4: Vec<Scores> = [96.25, 92.62, 98.16, 94.99, 96.76].map(s).to_vec();
        let a = aggregate(&t4).unwrap();
        assert_eq!(format!("{:.2}", a.mean.accuracy * 100.0), "95.76");
        assert_eq!(format!("{:.2}", a.std.unwrap().accuracy * 100.0), "2.09");
        let t5: Vec<Scores> = [97.95, 98.06, 96.98].map(s).to_vec();
        let a = aggregate(&t5).unwrap();
        assert!(a.row().starts_with("Mean±σ,97.66%±0.59%"));
        let one = aggregate(&[s(50.0)]).unwrap();
        assert!(one.std.is_none());
        assert_eq!(aggregate(&[s(50.0), s(50.0)]).unwrap().std.unwrap().accuracy, 0.0);
    }

    #[test]
    fn hand_traced_greedy() {
        // Three-token toy: logits depend on the last token only.
        let table = [[0.1f64, 2.0, 0.5], [0.3, 0.2, 1.0], [5.0, 5.0, 1.0]];
        let next = |ids: &[u32]| Ok(table[*ids.last().unwrap() as usize].to_vec());
        let cfg = GenerationConfig {
            max_new_tokens: 5,
            ..Default::default()
        };
        // 1 → 2 → tie between 0 and 1 resolves to 0 = eos.
        assert_eq!(generate_with(next, &[1], 0, &cfg).unwrap(), vec![2]);
        let cfg0 = GenerationConfig {
            max_new_tokens: 0,
            ..Default::default()
        };
        assert!(generate_with(next, &[1], 0, &cfg0).unwrap().is_empty());
        // Without a reachable stop: 0 → 1 → 2 → 0 ...
        assert_eq!(generate_with(next, &[0], 9, &cfg).unwrap(), vec![1, 2, 0, 1, 2]);
    }

    #[test]
    fn probe_scoring() {
        assert!(probe_correct("BTR-60, a wheeled amphibious armored personnel carrier", "wheeled"));
        assert!(probe_correct("  Tracked ", "tracked"));
        let r = score_probe(vec![
            ("a".into(), "q".into(), "yes".into(), "yes".into()),
            ("b".into(), "q".into(), "yes".into(), "Yes.".into()),
        ]);
        assert_eq!(r.questions[0].accuracy, 1.0);
    }
}
