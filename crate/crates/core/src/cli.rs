//! Command-line entry point. Exit codes: 0 success, 1 usage or configuration
//! error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablation::{comparison_table, directional_checks, run_row, seed_data, AblationScale, RowResult};
use crate::config::RunConfig;
use crate::data::io::{read_annotations, read_dataset, write_annotations, write_dataset, DatasetDims};
use crate::data::{gen_corpus, DatasetRecord};
use crate::downstream::{evaluate_task, finetune, TaskData, TaskHead};
use crate::error::{Result, TdenError};
use crate::gradsuite::{gradient_suite, suite_max};
use crate::model::TdenModel;
use crate::nn::ModelConfig;
use crate::train::{load_checkpoint, pretrain, save_checkpoint, Checkpoint, OptimState, RunFiles};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "tden", version, about = "Two-stream decoupled encoder-decoder pretraining on synthetic image-sentence pairs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Configuration file, or a model preset name (desk, small, tiny).
    #[arg(long)]
    pub config: Option<String>,
    /// `key=value` override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write train/val/test splits and their task sidecars.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain with the configured objectives and scheme.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// none, two_pass_a, two_pass_b or two_pass_c.
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        run_dir: PathBuf,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Finetune a pretrained checkpoint (or a fresh model) on one task.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// classification, retrieval, multichoice or captioning.
        #[arg(long)]
        task: Option<String>,
        /// Pretrained checkpoint; omitted means finetuning from scratch.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Score a finetuned checkpoint on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of every op, block and the full objective.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run ablation rows (0 = no pretraining) over seeds and print the comparison table.
    Ablate {
        /// Comma-separated rows, 0..=8.
        #[arg(long, default_value = "1,2,3,4,5,6,7,8")]
        rows: String,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        pretrain_steps: Option<u64>,
        #[arg(long)]
        ft_steps: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first) and runs the command.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                TdenError::Config(_) => 1,
                _ => 2,
            }
        }
    }
}

fn resolve_config(args: &ConfigArgs, fallback: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match (&args.config, fallback) {
        (Some(c), _) if Path::new(c).is_file() => {
            let mut cfg = RunConfig::default();
            cfg.apply_text(&fs::read_to_string(c)?)?;
            cfg
        }
        (Some(c), _) => RunConfig::preset(c)?,
        (None, Some(text)) => {
            let mut cfg = RunConfig::default();
            cfg.apply_text(text)?;
            cfg
        }
        (None, None) => RunConfig::default(),
    };
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = args.seed {
        cfg.set("seed", &s.to_string())?;
    }
    Ok(cfg)
}

fn dims(model: &ModelConfig) -> DatasetDims {
    DatasetDims {
        d_feat: model.d_region_feat,
        n_classes: model.n_object_classes,
        max_regions: model.max_regions,
        max_words: model.max_seq_len - 2,
    }
}

pub struct Splits {
    pub train: TaskData,
    pub val: TaskData,
    pub test: TaskData,
}

fn split_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.bin")), dir.join(format!("{name}.ann.jsonl")))
}

/// Reads the splits from `data_dir`, or generates them from `data_seed`.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    match &cfg.data_dir {
        Some(dir) => {
            let read = |name: &str| -> Result<TaskData> {
                let (d, a) = split_paths(dir, name);
                let (_, records) = read_dataset(&d)?;
                TaskData::new(records, read_annotations(&a)?)
            };
            Ok(Splits {
                train: read("train")?,
                val: read("val")?,
                test: read("test")?,
            })
        }
        None => {
            let c = gen_corpus(&cfg.synth(), cfg.data_seed, cfg.n_train, cfg.n_val, cfg.n_test)?;
            Ok(Splits {
                train: TaskData::from_items(&c.train),
                val: TaskData::from_items(&c.val),
                test: TaskData::from_items(&c.test),
            })
        }
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<String> {
    fs::create_dir_all(dir)?;
    let text = cfg.to_text();
    fs::write(dir.join(CONFIG_FILE), &text)?;
    Ok(text)
}

fn model_with_checkpoint(cfg: &RunConfig, ck: Option<&Checkpoint>) -> Result<TdenModel> {
    let mut model = TdenModel::new(cfg.model.clone(), cfg.train.seed)?;
    if let Some(ck) = ck {
        ck.restore_into(&mut model)?;
    }
    Ok(model)
}

fn metrics_json(task: &str, metrics: &[(&'static str, f64)]) -> String {
    let mut m = serde_json::Map::new();
    m.insert("kind".into(), "eval".into());
    m.insert("task".into(), task.into());
    for (k, v) in metrics {
        m.insert((*k).into(), (*v).into());
    }
    serde_json::Value::Object(m).to_string()
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::GenData { cfg, out } => {
            let cfg = resolve_config(&cfg, None)?;
            cfg.validate()?;
            let c = gen_corpus(&cfg.synth(), cfg.data_seed, cfg.n_train, cfg.n_val, cfg.n_test)?;
            fs::create_dir_all(&out)?;
            for (name, items) in [("train", &c.train), ("val", &c.val), ("test", &c.test)] {
                let (d, a) = split_paths(&out, name);
                let records: Vec<DatasetRecord> = items.iter().map(|i| i.record.clone()).collect();
                write_dataset(&d, dims(&cfg.model), &records)?;
                let anns: Vec<_> = items.iter().map(|i| i.annotation.clone()).collect();
                write_annotations(&a, &anns)?;
                println!("{name}: {} pairs -> {}", items.len(), d.display());
            }
            write_config(&out, &cfg)?;
            Ok(0)
        }
        Command::Pretrain {
            cfg,
            scheme,
            steps,
            run_dir,
            resume,
        } => {
            let ck_path = run_dir.join(CHECKPOINT_FILE);
            let resumed = if resume { Some(load_checkpoint(&ck_path)?) } else { None };
            let mut cfg = resolve_config(&cfg, resumed.as_ref().map(|c| c.config.as_str()))?;
            if let Some(s) = scheme {
                cfg.set("scheme", &s)?;
            }
            if let Some(s) = steps {
                cfg.set("steps", &s.to_string())?;
            }
            cfg.validate()?;
            let snapshot = write_config(&run_dir, &cfg)?;
            let splits = load_splits(&cfg)?;
            let mut model = TdenModel::new(cfg.model.clone(), cfg.train.seed)?;
            let files = RunFiles {
                metrics: Some(run_dir.join(METRICS_FILE)),
                checkpoint: Some(ck_path),
            };
            let report = pretrain(
                &mut model,
                &splits.train.records,
                &splits.val.records,
                &cfg.train,
                &snapshot,
                resumed.as_ref(),
                &files,
            )?;
            for e in &report.evals {
                println!(
                    "step {:>6}  masked-word acc {:.4}  mlm {:.4}  moc {:.4}  msg {:.4}  msg ppl {:.3}",
                    e.step, e.masked_word_acc, e.mlm, e.moc, e.msg, e.msg_ppl
                );
            }
            println!("run directory: {}", run_dir.display());
            Ok(0)
        }
        Command::Finetune {
            cfg,
            task,
            checkpoint,
            run_dir,
        } => {
            let ck = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let mut cfg = resolve_config(&cfg, ck.as_ref().map(|c| c.config.as_str()))?;
            if let Some(t) = task {
                cfg.set("task", &t)?;
            }
            cfg.validate()?;
            let snapshot = write_config(&run_dir, &cfg)?;
            let splits = load_splits(&cfg)?;
            let model = model_with_checkpoint(&cfg, ck.as_ref())?;
            let train = if cfg.ft_train > 0 {
                splits.train.head(cfg.ft_train)
            } else {
                splits.train
            };
            let (tuned, _, report) = finetune(&model, cfg.task, &train, &splits.test, &cfg.finetune)?;
            let mut log = fs::File::create(run_dir.join(METRICS_FILE))?;
            for (i, l) in report.losses.iter().enumerate() {
                writeln!(log, "{}", serde_json::json!({"kind": "finetune_step", "step": i + 1, "loss": l}))?;
            }
            let line = metrics_json(cfg.task.as_str(), &report.metrics);
            writeln!(log, "{line}")?;
            let optim = OptimState::new(&tuned.params);
            save_checkpoint(
                &run_dir.join(CHECKPOINT_FILE),
                &Checkpoint::capture(&tuned, &optim, cfg.finetune.steps, cfg.finetune.seed, &snapshot),
            )?;
            println!("{line}");
            Ok(0)
        }
        Command::Eval { cfg, task, checkpoint } => {
            let ck = load_checkpoint(&checkpoint)?;
            let mut cfg = resolve_config(&cfg, Some(&ck.config))?;
            if let Some(t) = task {
                cfg.set("task", &t)?;
            }
            cfg.validate()?;
            let mut model = TdenModel::new(cfg.model.clone(), cfg.train.seed)?;
            let head = TaskHead::attach(&mut model, cfg.task, cfg.finetune.seed);
            ck.restore_into(&mut model)?;
            let splits = load_splits(&cfg)?;
            let metrics = evaluate_task(&model, &head, &splits.test, &cfg.finetune)?;
            println!("{}", metrics_json(cfg.task.as_str(), &metrics));
            Ok(0)
        }
        Command::Gradcheck { cfg } => {
            let args = ConfigArgs {
                config: cfg.config.clone().or(Some("tiny".into())),
                ..cfg
            };
            let cfg = resolve_config(&args, None)?;
            cfg.model.validate()?;
            let cases = gradient_suite(&cfg.model, cfg.train.seed)?;
            for c in &cases {
                println!("{:<28} max rel err {:.3e}  ({} coords)", c.name, c.max_rel_error, c.coords_checked);
            }
            let worst = suite_max(&cases);
            println!("max relative error: {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})");
            Ok(if worst < GRADCHECK_TOLERANCE { 0 } else { 2 })
        }
        Command::Ablate {
            rows,
            seeds,
            pretrain_steps,
            ft_steps,
            out,
        } => {
            let rows: Vec<usize> = rows
                .split(',')
                .map(|r| {
                    r.trim()
                        .parse()
                        .ok()
                        .filter(|&r: &usize| r <= 8)
                        .ok_or_else(|| TdenError::Config(format!("bad ablation row `{r}`")))
                })
                .collect::<Result<_>>()?;
            let mut scale = AblationScale::reduced();
            if let Some(s) = pretrain_steps {
                scale.pretrain_steps = s;
            }
            if let Some(s) = ft_steps {
                scale.finetune.steps = s;
            }
            let mut results: Vec<RowResult> = Vec::new();
            for seed in 0..seeds {
                let data = seed_data(&scale, seed)?;
                for &row in &rows {
                    let r = run_row(row, seed, &scale, &data)?;
                    eprintln!("row {row} seed {seed}: {:?}", r.metrics);
                    results.push(r);
                }
            }
            let table = comparison_table(&results);
            println!("{table}");
            let all_rows = (1..=5).chain(6..=8).all(|r| rows.contains(&r));
            let checks = if all_rows { directional_checks(&results)? } else { Vec::new() };
            for (desc, ok) in &checks {
                println!("{} {desc}", if *ok { "holds  " } else { "differs" });
            }
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("table.md"), &table)?;
                let mut f = fs::File::create(dir.join("results.jsonl"))?;
                for r in &results {
                    writeln!(f, "{}", serde_json::json!({"row": r.row, "seed": r.seed, "metrics": r.metrics}))?;
                }
            }
            Ok(0)
        }
    }
}
