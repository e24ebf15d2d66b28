use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use sarvlm::checkpoint;
use sarvlm::config::RunConfig;
use sarvlm::evaluation::MatchMode;
use sarvlm::pipeline::{self, S};
use sarvlm::planner::{self, PlannerConfig};
use sarvlm::tokenizer::Vocabulary;

#[derive(Parser)]
#[command(name = "sarvlm", version, about = "Toy-scale language-vision pipeline for SAR target recognition")]
struct Cli {
    /// Run configuration JSON; defaults apply to absent fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Classification,
    Captioning,
}

impl From<Task> for MatchMode {
    fn from(t: Task) -> Self {
        match t {
            Task::Classification => MatchMode::Classification,
            Task::Captioning => MatchMode::Captioning,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the byte-level BPE vocabulary.
    TrainTokenizer {
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the language model on the corpus.
    PretrainLm {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastively align a vision encoder with the pretrained language model.
    Align {
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// LoRA fine-tuning on image-question-answer examples.
    Finetune {
        #[arg(long)]
        aligned: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, value_enum)]
        task: Option<Task>,
    },
    /// Score one or more checkpoints on the test split.
    Evaluate {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        task: Option<Task>,
    },
    /// Ask attribute questions the model was not trained on.
    VqaProbe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Memory estimates and the model catalog report.
    PlanMemory {
        /// Planner section JSON; the reference model when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the tokenization report for a text.
    Tokenize {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        text: String,
    },
    /// Every stage in sequence under one directory.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, value_enum)]
        task: Option<Task>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenData { out } => {
            cfg.write_snapshot(&out)?;
            let ds = pipeline::make_dataset(&cfg)?;
            pipeline::write_data(&out, &ds)?;
        }
        Command::TrainTokenizer { out } => {
            let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            cfg.write_snapshot(dir)?;
            let corpus = pipeline::corpus_text(&cfg)?;
            pipeline::train_tokenizer(&cfg, &corpus)?.save(&out)?;
        }
        Command::PretrainLm { vocab, out } => {
            cfg.write_snapshot(&out)?;
            let vocab = Vocabulary::load(&vocab)?;
            let corpus = pipeline::corpus_text(&cfg)?;
            let (lm, rows) = pipeline::pretrain(&cfg, &vocab, &corpus)?;
            pipeline::write_pretrain_outputs(&out, &lm, &vocab, &rows)?;
        }
        Command::Align { lm, data, out } => {
            cfg.write_snapshot(&out)?;
            let (lm, vocab) = checkpoint::load_lm::<S>(&lm)?;
            let ds = pipeline::load_data(&data, &cfg)?;
            let (aligned, rows) = pipeline::align(&cfg, lm, &vocab, &ds.train)?;
            pipeline::write_align_outputs(&out, &aligned, &rows)?;
        }
        Command::Finetune { aligned, data, out, runs, task } => {
            if let Some(r) = runs {
                cfg.train.runs = r;
            }
            if let Some(t) = task {
                cfg.train.task = t.into();
            }
            cfg.validate()?;
            cfg.write_snapshot(&out)?;
            let a = checkpoint::load_aligned::<S>(&aligned)?;
            let ds = pipeline::load_data(&data, &cfg)?;
            let model = pipeline::assemble(&cfg, a.vision, a.lm)?;
            pipeline::finetune_runs(&cfg, &model, &ds.train, &a.vocab, &out)?;
        }
        Command::Evaluate { checkpoints, data, out, task } => {
            if let Some(t) = task {
                cfg.train.task = t.into();
            }
            cfg.write_snapshot(&out)?;
            let ds = pipeline::load_data(&data, &cfg)?;
            pipeline::evaluate_checkpoints(&cfg, &checkpoints, &ds.test, &out)?;
            print!("{}", std::fs::read_to_string(out.join("aggregate.csv"))?);
        }
        Command::VqaProbe { checkpoint: cp, data, out } => {
            cfg.write_snapshot(&out)?;
            let (model, vocab, _) = checkpoint::load_llvm::<S>(&cp)?;
            let ds = pipeline::load_data(&data, &cfg)?;
            let report = pipeline::probe(&cfg, &model, &vocab, &ds.test)?;
            std::fs::write(out.join("probe.json"), serde_json::to_string_pretty(&report)?)?;
            std::fs::write(out.join("probe.txt"), report.to_text())?;
        }
        Command::PlanMemory { spec, out } => {
            if let Some(p) = spec {
                let text = std::fs::read_to_string(&p)?;
                cfg.planner = serde_json::from_str::<PlannerConfig>(&text).context("parsing planner spec")?;
            }
            cfg.write_snapshot(&out)?;
            write_plan(&cfg, &out)?;
        }
        Command::Tokenize { vocab, text } => {
            let v = Vocabulary::load(&vocab)?;
            println!("{}", serde_json::to_string_pretty(&v.tokenization_report(&text))?);
        }
        Command::Pipeline { out, runs, task } => {
            if let Some(r) = runs {
                cfg.train.runs = r;
            }
            if let Some(t) = task {
                cfg.train.task = t.into();
            }
            cfg.validate()?;
            run_pipeline(&cfg, &out)?;
        }
    }
    Ok(())
}

fn write_plan(cfg: &RunConfig, out: &Path) -> Result<()> {
    let est = planner::plan(&cfg.planner)?;
    let rows = planner::table_report(planner::catalog())?;
    let text = format!("{}\n{}", est.to_text(), planner::report_text(&rows));
    std::fs::write(out.join("memory_estimate.json"), serde_json::to_string_pretty(&est)?)?;
    std::fs::write(out.join("memory_report.txt"), &text)?;
    std::fs::write(out.join("catalog_report.csv"), planner::report_csv(&rows))?;
    print!("{text}");
    Ok(())
}

fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.write_snapshot(out)?;
    let t0 = std::time::Instant::now();
    let stage = |name: &str| {
        log::info!("[{:>7.1}s] {name}", t0.elapsed().as_secs_f64());
    };
    stage("data");
    let ds = pipeline::make_dataset(cfg)?;
    pipeline::write_data(&out.join("data"), &ds)?;
    stage("tokenizer");
    let corpus = pipeline::corpus_text(cfg)?;
    let vocab = pipeline::train_tokenizer(cfg, &corpus)?;
    std::fs::create_dir_all(out.join("tokenizer"))?;
    vocab.save(&out.join("tokenizer/vocab.json"))?;
    stage("pretrain");
    let (lm, rows) = pipeline::pretrain(cfg, &vocab, &corpus)?;
    pipeline::write_pretrain_outputs(&out.join("pretrain"), &lm, &vocab, &rows)?;
    stage("align");
    let (aligned, arows) = pipeline::align(cfg, lm, &vocab, &ds.train)?;
    pipeline::write_align_outputs(&out.join("align"), &aligned, &arows)?;
    stage("finetune");
    let model = pipeline::assemble(cfg, aligned.vision, aligned.lm)?;
    let runs = pipeline::finetune_runs(cfg, &model, &ds.train, &vocab, &out.join("finetune"))?;
    stage("evaluate");
    let finals: Vec<PathBuf> = runs
        .iter()
        .filter_map(|r| r.checkpoints.last().map(|c| c.1.clone()))
        .collect();
    pipeline::evaluate_checkpoints(cfg, &finals, &ds.test, &out.join("eval"))?;
    stage("probe");
    let (last, vocab, _) = checkpoint::load_llvm::<S>(finals.last().context("no checkpoint written")?)?;
    let report = pipeline::probe(cfg, &last, &vocab, &ds.test)?;
    std::fs::create_dir_all(out.join("probe"))?;
    std::fs::write(out.join("probe/probe.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(out.join("probe/probe.txt"), report.to_text())?;
    stage("plan");
    std::fs::create_dir_all(out.join("plan"))?;
    write_plan(cfg, &out.join("plan"))?;
    stage("done");
    print!("{}", std::fs::read_to_string(out.join("eval/aggregate.csv"))?);
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use sarvlm::error::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::ShapeMismatch { .. }) => "shape_mismatch",
        Some(E::NonFinite { .. }) => "non_finite",
        Some(E::UnknownTokenId(_)) => "unknown_token_id",
        Some(E::UnknownClass(_)) => "unknown_class",
        Some(E::EmptyClass(..)) => "empty_class",
        Some(E::UnknownTarget { .. }) => "unknown_target",
        Some(E::ContextOverflow { .. }) => "context_overflow",
        Some(E::Checkpoint(_)) => "checkpoint",
        Some(E::Io(_)) => "io",
        Some(E::Json(_)) => "json",
        Some(_) => "invalid",
        None => "error",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": error_kind(&e), "message": format!("{e:#}") });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
