use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use quesnet::checkpoint::{Checkpoint, RngState};
use quesnet::config::Config;
use quesnet::corpus::{build_vocabulary, generate_synthetic, load_corpus, write_synthetic, Corpus, SyntheticSpec};
use quesnet::embedding::pretrain_embeddings;
use quesnet::finetune::{evaluate_task, finetune_task, prepare_task, FinetuneModel, MetricReport, Task};
use quesnet::model::QuesNet;
use quesnet::pretrain::{evaluate_pretraining, pretrain_run, prepare_corpus, FINAL_CHECKPOINT};
use quesnet::{Error, Result};

const EMB_CHECKPOINT: &str = "embedding/emb.ckpt";
const FINETUNE_CHECKPOINT: &str = "finetune.ckpt";
const REPORT_FILE: &str = "report.json";

#[derive(Parser, Debug)]
#[command(name = "quesnet", version, about = "Question representation pre-training and fine-tuning")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dot-path override, e.g. `train.lr=0.01`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, global = true, value_name = "BOOL")]
    enable_text: Option<bool>,
    #[arg(long, global = true, value_name = "BOOL")]
    enable_image: Option<bool>,
    #[arg(long, global = true, value_name = "BOOL")]
    enable_meta: Option<bool>,
    #[arg(long, global = true, value_name = "BOOL")]
    enable_low: Option<bool>,
    #[arg(long, global = true, value_name = "BOOL")]
    enable_high: Option<bool>,
    #[arg(long, global = true, value_name = "BOOL")]
    freeze_backbone: Option<bool>,
    /// Corpus file; defaults to `paths.corpus` under the data root.
    #[arg(long, global = true, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// Output root; defaults to `paths.work_dir` under the data root.
    #[arg(long, global = true, value_name = "DIR")]
    work_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus.
    GenCorpus {
        /// TOML file with generator settings; defaults to the `[synthetic]` config section.
        #[arg(long, value_name = "PATH")]
        spec: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Pre-train the word, image and meta embeddings.
    PretrainEmb,
    /// Hierarchical pre-training of the full model.
    Pretrain {
        /// Start from random embeddings instead of the embedding checkpoint.
        #[arg(long)]
        no_emb_pretrain: bool,
    },
    /// Fine-tune and test one downstream task.
    Finetune {
        #[arg(long)]
        task: Task,
        /// Pre-trained checkpoint; defaults to the pre-training output.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Fine-tune a randomly initialized backbone.
        #[arg(long, conflicts_with = "checkpoint")]
        random_init: bool,
    },
    /// Evaluate a pre-trained or fine-tuned checkpoint.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the fine-tuned checkpoint of this task.
        #[arg(long, conflicts_with = "checkpoint")]
        task: Option<Task>,
        /// Also write the report to this file.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation { .. } | Error::Parse { .. } | Error::Usage(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::Numerical(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn ensure_exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn config_from(common: &Common) -> Result<Config> {
    let base = match &common.config {
        Some(p) if !p.exists() => {
            return Err(Error::Validation {
                field: "config".into(),
                message: format!("{} does not exist", p.display()),
            })
        }
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let mut overrides = common.sets.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("train.seed={s}"));
    }
    for (key, v) in [
        ("ablation.enable_text", common.enable_text),
        ("ablation.enable_image", common.enable_image),
        ("ablation.enable_meta", common.enable_meta),
        ("ablation.enable_low", common.enable_low),
        ("ablation.enable_high", common.enable_high),
        ("finetune.freeze_backbone", common.freeze_backbone),
    ] {
        if let Some(v) = v {
            overrides.push(format!("{key}={v}"));
        }
    }
    let mut c = base.with_overrides(&overrides)?;
    if let Some(p) = &common.corpus {
        c.paths.corpus = Some(p.clone());
    }
    if let Some(p) = &common.work_dir {
        c.paths.work_dir = Some(p.clone());
    }
    Ok(c)
}

fn read_corpus(config: &Config) -> Result<Corpus> {
    let p = config.corpus_path();
    ensure_exists(&p)?;
    load_corpus(&p)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    let config = config_from(&cli.common)?;
    let work = config.work_dir();
    match cli.command {
        Command::GenCorpus { spec, out } => {
            let spec = match spec {
                Some(p) => {
                    ensure_exists(&p)?;
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                    toml::from_str::<SyntheticSpec>(&text).map_err(|e| Error::Validation {
                        field: "spec".into(),
                        message: e.message().to_string(),
                    })?
                }
                None => config.synthetic.clone(),
            };
            let out = out.map_or_else(|| config.resolve(Path::new("corpus")), |p| config.resolve(&p));
            let generated = generate_synthetic(&spec, config.train.seed)?;
            write_synthetic(&out, &generated)?;
            println!(
                "wrote {} questions and {} student records to {}",
                generated.corpus.questions.len(),
                generated.corpus.students.len(),
                out.display()
            );
        }
        Command::PretrainEmb => {
            let corpus = read_corpus(&config)?;
            let vocab = build_vocabulary(&corpus, config.embedding.min_count);
            let encoded: Vec<_> = corpus.questions.iter().map(|q| vocab.encode(q)).collect();
            let mut model = QuesNet::new(&config.model, vocab.len(), config.train.seed)?;
            let report = pretrain_embeddings(&mut model, &encoded, &config)?;
            let ck = Checkpoint {
                config: config.clone(),
                vocab,
                params: model.store,
                rng: RngState {
                    seed: config.train.seed,
                    step: 0,
                },
            };
            let p = work.join(EMB_CHECKPOINT);
            ck.save(&p)?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            write_text(&work.join("embedding/report.json"), &(json + "\n"))?;
            println!("wrote {}", p.display());
        }
        Command::Pretrain { no_emb_pretrain } => {
            let corpus = read_corpus(&config)?;
            let emb = if no_emb_pretrain {
                None
            } else {
                Some(Checkpoint::load(&work.join(EMB_CHECKPOINT))?)
            };
            let vocab = emb.as_ref().map(|c| c.vocab.clone());
            let data = prepare_corpus(&corpus, &config, vocab)?;
            let out_dir = work.join("pretrain");
            let outcome = pretrain_run(&data, &config, emb.as_ref().map(|c| &c.params), Some(&out_dir))?;
            let eval = evaluate_pretraining(&outcome.model, &data.heldout, &config.ablation)?;
            let mut report = MetricReport::default();
            report.insert("pretrain", "word_cross_entropy", eval.word_cross_entropy);
            report.insert("pretrain", "option_auc", eval.option_auc);
            report.save(&out_dir.join(REPORT_FILE))?;
            print!("{}", report.to_json());
        }
        Command::Finetune {
            task,
            checkpoint,
            random_init,
        } => {
            let corpus = read_corpus(&config)?;
            let ck = if random_init {
                None
            } else {
                let p = checkpoint.unwrap_or_else(|| work.join("pretrain").join(FINAL_CHECKPOINT));
                Some(Checkpoint::load(&p)?)
            };
            let outcome = finetune_task(task, &corpus, ck.as_ref(), &config)?;
            let dir = work.join("finetune").join(task.name());
            outcome.checkpoint(&config).save(&dir.join(FINETUNE_CHECKPOINT))?;
            outcome.report.save(&dir.join(REPORT_FILE))?;
            let history: String = outcome
                .history
                .iter()
                .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
                .collect();
            write_text(&dir.join("history.jsonl"), &history)?;
            print!("{}", outcome.report.to_json());
        }
        Command::Eval { checkpoint, task, out } => {
            let p = match (checkpoint, task) {
                (Some(p), _) => p,
                (None, Some(t)) => work.join("finetune").join(t.name()).join(FINETUNE_CHECKPOINT),
                (None, None) => work.join("pretrain").join(FINAL_CHECKPOINT),
            };
            let ck = Checkpoint::load(&p)?;
            let corpus = read_corpus(&config)?;
            let report = evaluate_checkpoint(&ck, &corpus)?;
            if let Some(o) = out {
                report.save(&o)?;
            }
            print!("{}", report.to_json());
        }
    }
    Ok(())
}

/// Task metrics on the test split for fine-tuned checkpoints, held-out
/// pre-training metrics otherwise. Uses the checkpoint's own settings.
fn evaluate_checkpoint(ck: &Checkpoint, corpus: &Corpus) -> Result<MetricReport> {
    let c = &ck.config;
    if FinetuneModel::task_of(ck).is_some() {
        let model = FinetuneModel::from_checkpoint(ck)?;
        let data = prepare_task(model.task, corpus, &ck.vocab, &model.ablation, c.train.seed)?;
        return evaluate_task(&model, &data, &data.split.test);
    }
    let model = ck.model()?;
    let data = prepare_corpus(corpus, c, Some(ck.vocab.clone()))?;
    let eval = evaluate_pretraining(&model, &data.heldout, &c.ablation)?;
    let mut report = MetricReport::default();
    report.insert("pretrain", "word_cross_entropy", eval.word_cross_entropy);
    report.insert("pretrain", "option_auc", eval.option_auc);
    report.validate()?;
    Ok(report)
}
