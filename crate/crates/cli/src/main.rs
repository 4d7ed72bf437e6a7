use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ood_core::harness::{self, synthetic, Checkpoint, DatasetSpec, EpochLog, Objective, RunConfig};

#[derive(Parser)]
#[command(name = "ood", version, about = "Train and evaluate OOD-aware text classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// joint or disc.
    #[arg(long)]
    objective: Option<Objective>,
    /// Use z = mu at inference instead of one sampled z.
    #[arg(long)]
    deterministic_inference: bool,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(obj) = self.objective {
            cfg.objective = obj;
        }
        cfg.deterministic_inference |= self.deterministic_inference;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, training log and report.
    Train(RunArgs),
    /// Evaluate a checkpoint against the configured data.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Distance-score AUROC of every layer's [CLS] state.
    ProbeLayers {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write the learned layer-combination weights as CSV.
    ExportS {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train both objectives with the same seed and compare them.
    CompareObjectives(RunArgs),
    /// Write the synthetic keyword task as JSONL files.
    Synth {
        #[arg(long, default_value = "data/synthetic")]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn data_spec(cfg: &RunConfig) -> Result<&DatasetSpec> {
    match &cfg.data {
        Some(d) => Ok(d),
        None => bail!("no [data] section in the configuration"),
    }
}

fn print_epoch(e: &EpochLog) {
    let mut line = format!(
        "epoch {:>3}  loss {:.4}  ce {:.4}  recon {:.4}  kl {:.4}  beta {:.3}  order {}",
        e.epoch, e.loss.total, e.loss.ce, e.loss.recon, e.loss.kl, e.loss.beta, e.batch_order
    );
    if let Some(w) = &e.combination_weights {
        let ws: Vec<String> = w.iter().map(|v| format!("{v:.3}")).collect();
        line.push_str(&format!("  s [{}]", ws.join(" ")));
    }
    eprintln!("{line}");
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => {
            let cfg = args.config()?;
            let data = harness::load_dataset(data_spec(&cfg)?)?;
            std::fs::create_dir_all(&args.out)?;
            let (ckpt, log) = harness::train_with(&cfg, &data, &mut print_epoch)?;
            ckpt.save(&args.out.join("model.ckpt"))?;
            harness::write_training_log(&args.out.join("train_log.json"), &log)?;
            let report = harness::evaluate(&ckpt, &data)?;
            harness::write_report(&args.out, &report)?;
            print!("{}", harness::report_table(&report));
        }
        Command::Eval { run, checkpoint } => {
            let cfg = run.config()?;
            let mut ckpt = Checkpoint::load(&checkpoint)?;
            let data = harness::load_dataset(data_spec(&cfg)?)?;
            if run.deterministic_inference && !ckpt.config.deterministic_inference {
                // Banks were fitted on sampled z; refit them on z = mu.
                ckpt.config.deterministic_inference = true;
                harness::refit_banks(&mut ckpt, &data)?;
            }
            let report = harness::evaluate(&ckpt, &data)?;
            harness::write_report(&run.out, &report)?;
            print!("{}", harness::report_table(&report));
        }
        Command::ProbeLayers { run, checkpoint } => {
            let cfg = run.config()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let data = harness::load_dataset(data_spec(&cfg)?)?;
            let rows = harness::probe_layers(&ckpt, &data)?;
            std::fs::create_dir_all(&run.out)?;
            write(&run.out.join("probe.json"), serde_json::to_string_pretty(&rows)?)?;
            let table = harness::probe_table(&rows);
            write(&run.out.join("probe.txt"), &table)?;
            print!("{table}");
        }
        Command::ExportS { checkpoint, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let rows = harness::export_combination(&ckpt)?;
            std::fs::create_dir_all(&out)?;
            let csv = harness::combination_csv(&rows);
            write(&out.join("combination.csv"), &csv)?;
            print!("{csv}");
        }
        Command::CompareObjectives(args) => {
            let cfg = args.config()?;
            let data = harness::load_dataset(data_spec(&cfg)?)?;
            let cmp = harness::compare_objectives(&cfg, &data)?;
            std::fs::create_dir_all(&args.out)?;
            write(&args.out.join("comparison.json"), serde_json::to_string_pretty(&cmp)?)?;
            let table = cmp.table();
            write(&args.out.join("comparison.txt"), &table)?;
            print!("{table}");
            if !cmp.inputs_match() {
                eprintln!("warning: objectives saw different vocabularies or batch orders");
            }
        }
        Command::Synth { out, seed } => {
            let spec = synthetic::SyntheticSpec {
                seed,
                ..Default::default()
            };
            let layout = synthetic::write_synthetic(&out, &spec)?;
            let cfg = RunConfig {
                seed,
                data: Some(DatasetSpec {
                    id_train: "train.jsonl".into(),
                    id_val: "val.jsonl".into(),
                    id_test: "test.jsonl".into(),
                    ood_test: layout
                        .ood_test
                        .iter()
                        .map(|p| PathBuf::from(p.file_name().expect("file name")))
                        .collect(),
                }),
                ..Default::default()
            };
            write(&out.join("config.toml"), cfg.to_toml()?)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
