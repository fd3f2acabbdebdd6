use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use tmf_core::config::RunConfig;
use tmf_core::curriculum::{pretrain_base, train, write_log};
use tmf_core::data::{write_file, DataConfig, Dataset};
use tmf_core::eval::{ablation_csv, ladder_means, per_level_losses, run_ablation, run_eval, write_report, AblationConfig, Report};
use tmf_core::fusion::FusionMode;
use tmf_core::model::TmfModel;
use tmf_core::prompt::{build_vocab, Level};
use tmf_core::{Result, TmfError};

#[derive(Parser)]
#[command(name = "tmf", version, about = "Triple-modality fusion recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rung {
    Base,
    Behavior,
    Amsa,
    Full,
}

impl Rung {
    fn config(self) -> AblationConfig {
        match self {
            Rung::Base => AblationConfig::BASE,
            Rung::Behavior => AblationConfig::BEHAVIOR,
            Rung::Amsa => AblationConfig::AMSA,
            Rung::Full => AblationConfig::FULL,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        items: usize,
        #[arg(long, default_value_t = 2000)]
        users: usize,
        #[arg(long, default_value_t = 16)]
        categories: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warm up a base model on text-only prompts.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Curriculum tuning with LoRA starting from a base checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        rung: Rung,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the evaluation split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and evaluate every ladder rung over the configured seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
}

fn run_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            seed,
            items,
            users,
            categories,
            out,
        } => {
            let cfg = DataConfig {
                seed,
                n_items: items,
                n_users: users,
                n_categories: categories,
                ..DataConfig::default()
            };
            let ds = Dataset::generate(&cfg)?;
            ds.save(&out)?;
            eprintln!(
                "wrote {} items, {} train and {} eval users to {}",
                ds.catalog.len(),
                ds.train.len(),
                ds.eval.len(),
                out.display()
            );
        }
        Command::Pretrain { data, config, out } => {
            let ds = Dataset::load(&data)?;
            let rc = run_config(&config)?;
            let mut model = TmfModel::new(rc.model_config(FusionMode::Full), build_vocab(&ds.catalog))?;
            let logs = pretrain_base(&mut model, &ds, &rc.pretrain_config())?;
            let meta = json!({
                "command": "pretrain",
                "flags": { "data": show(&data), "config": config.as_deref().map(show), "out": show(&out) },
                "run_config": to_json(&rc),
                "data_hashes": ds.content_hashes(),
                "per_level_losses": per_level_losses(&logs),
            });
            model.save(&out, meta)?;
            write_log(&out.join("train_log.csv"), &logs)?;
        }
        Command::Train {
            data,
            base,
            config,
            rung,
            out,
        } => {
            let ds = Dataset::load(&data)?;
            let rc = run_config(&config)?;
            let (mut model, _) = TmfModel::load(&base)?;
            if model.vocab != build_vocab(&ds.catalog) {
                return Err(TmfError::Integrity(format!(
                    "{}: vocabulary does not match dataset {}",
                    base.display(),
                    data.display()
                )));
            }
            let ab = rung.config();
            model.cfg.fusion.mode = ab.fusion_mode();
            let logs = train(&mut model, &ds, &rc.train_config(ab.max_level()))?;
            let meta = json!({
                "command": "train",
                "flags": {
                    "data": show(&data), "base": show(&base), "config": config.as_deref().map(show),
                    "rung": ab.name(), "out": show(&out)
                },
                "ablation": to_json(&ab),
                "eval_level": ab.max_level(),
                "run_config": to_json(&rc),
                "data_hashes": ds.content_hashes(),
                "per_level_losses": per_level_losses(&logs),
            });
            model.save(&out, meta)?;
            write_log(&out.join("train_log.csv"), &logs)?;
        }
        Command::Eval { ckpt, data, report } => {
            let (model, meta) = TmfModel::load(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let level: Level = meta
                .get("eval_level")
                .and_then(|v| serde_json::from_value(v.clone()).ok())
                .unwrap_or(if model.has_lora() { Level::Hard } else { Level::Easy });
            let (metrics, records) = run_eval(&model, &ds, &ds.eval, level)?;
            let losses = meta
                .get("per_level_losses")
                .and_then(|v| serde_json::from_value(v.clone()).ok())
                .unwrap_or_default();
            let mut seeds = BTreeMap::new();
            seeds.insert("data".to_string(), ds.config.seed);
            seeds.insert("model".to_string(), model.cfg.seed);
            let r = Report {
                config: json!({
                    "flags": { "ckpt": show(&ckpt), "data": show(&data), "report": show(&report) },
                    "eval_level": level,
                    "checkpoint": meta,
                }),
                seeds,
                data_hashes: ds.content_hashes(),
                hitrate_at_1: metrics.hitrate_at_1,
                valid_ratio: metrics.valid_ratio,
                n_instances: metrics.n_instances,
                per_level_losses: losses,
            };
            write_report(&report, &r, &records)?;
            println!("{}", serde_json::to_string(&metrics).expect("serializable"));
        }
        Command::Ablate { data, config, report } => {
            let ds = Dataset::load(&data)?;
            let rc = run_config(&config)?;
            let results = run_ablation(
                &ds,
                &rc.model_config(FusionMode::Full),
                &rc.pretrain_config(),
                &rc.train_config(Level::Hard),
                &rc.ablation_seeds,
                |r| eprintln!("{} seed {}: hitrate {:.4} valid {:.4}", r.rung, r.seed, r.metrics.hitrate_at_1, r.metrics.valid_ratio),
            )?;
            std::fs::create_dir_all(&report).map_err(|source| TmfError::Io {
                path: report.clone(),
                source,
            })?;
            write_file(&report.join("ablation.csv"), ablation_csv(&results).as_bytes())?;
            let body = json!({
                "config": {
                    "flags": { "data": show(&data), "config": config.as_deref().map(show), "report": show(&report) },
                    "run_config": to_json(&rc),
                },
                "seeds": rc.ablation_seeds,
                "data_hashes": ds.content_hashes(),
                "results": to_json(&results),
                "mean_hitrate": ladder_means(&results),
            });
            let text = serde_json::to_string_pretty(&body).expect("serializable");
            write_file(&report.join("ablation.json"), text.as_bytes())?;
            print!("{}", ablation_csv(&results));
        }
    }
    Ok(())
}

fn error_kind(e: &TmfError) -> &'static str {
    match e {
        TmfError::Tensor(_) => "tensor",
        TmfError::Config(_) => "config",
        TmfError::Capacity(_) => "capacity",
        TmfError::Usage(_) => "usage",
        TmfError::Lookup(_) => "lookup",
        TmfError::Integrity(_) => "integrity",
        TmfError::Length { .. } => "length",
        TmfError::Numeric(_) => "numeric",
        TmfError::Io { .. } => "io",
        TmfError::Json { .. } => "json",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": error_kind(&e), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
