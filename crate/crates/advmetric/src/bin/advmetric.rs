//! Command-line front end: train runs, attack generation, evaluation,
//! embedding analytics, and the full three-configuration comparison.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use advmetric::attacks::{self, AttackConfig, AttackSet};
use advmetric::config;
use advmetric::dataset::{synth, LabeledDataset, SplitTag};
use advmetric::error::{Error, Result};
use advmetric::eval;
use advmetric::model::ClassifierModel;
use advmetric::trainer::{self, ConfigKind};

#[derive(Parser)]
#[command(name = "advmetric", version, about = "Adversarially robust metric-learning runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding the MNIST IDX files (train-images-idx3-ubyte and
    /// friends); defaults to $ADVMETRIC_DATA_DIR. Without either, a
    /// deterministic synthetic digit dataset is generated in memory.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Synthetic training-set size used when no data directory is given.
    #[arg(long, default_value_t = 4000)]
    synth_train: usize,
    /// Synthetic test-set size used when no data directory is given.
    #[arg(long, default_value_t = 1000)]
    synth_test: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration for one seed.
    Train {
        /// Run configuration file (key = value sections).
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for checkpoint, log, and manifest.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Generate an attack set over the test split.
    Attack {
        /// sensitivity or invariance.
        #[arg(long)]
        kind: String,
        /// Trained checkpoint (required for sensitivity).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// L-infinity budget; defaults to 0.1 (sensitivity) / 0.4 (invariance).
        #[arg(long)]
        epsilon: Option<f32>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Evaluate a checkpoint against clean and attack sets.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sensitivity attack-set directory.
        #[arg(long)]
        sensitivity: PathBuf,
        /// Invariance attack-set directory.
        #[arg(long)]
        invariance: PathBuf,
        /// Report CSV path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Project test-set embeddings (clean plus optional attack sets) onto
    /// their top two principal components; writes a CSV and an SVG.
    Pca {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sensitivity: Option<PathBuf>,
        #[arg(long)]
        invariance: Option<PathBuf>,
        /// Output directory for pca.csv and pca.svg.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Full comparison: three configurations x all seeds, with report.
    Table1 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Parallel (configuration, seed) runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        data: DataArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_data(args: &DataArgs) -> Result<(LabeledDataset, LabeledDataset)> {
    let dir = args
        .data_dir
        .clone()
        .or_else(|| std::env::var_os("ADVMETRIC_DATA_DIR").map(PathBuf::from));
    match dir {
        Some(dir) => {
            for name in [
                "train-images-idx3-ubyte",
                "train-labels-idx1-ubyte",
                "t10k-images-idx3-ubyte",
                "t10k-labels-idx1-ubyte",
            ] {
                let p = dir.join(name);
                if !p.exists() {
                    return Err(Error::Data(format!("missing dataset file {}", p.display())));
                }
            }
            Ok((
                LabeledDataset::load_idx(
                    dir.join("train-images-idx3-ubyte"),
                    dir.join("train-labels-idx1-ubyte"),
                    SplitTag::Train,
                )?,
                LabeledDataset::load_idx(
                    dir.join("t10k-images-idx3-ubyte"),
                    dir.join("t10k-labels-idx1-ubyte"),
                    SplitTag::Test,
                )?,
            ))
        }
        None => Ok((
            synth::generate(args.synth_train, 0, SplitTag::Train)?,
            synth::generate(args.synth_test, 1, SplitTag::Test)?,
        )),
    }
}

/// Replay information written before any long computation starts.
fn write_manifest(out: &Path, lines: &[(&str, String)]) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("manifest.txt");
    let mut text = format!("tool_version = {}\n", env!("CARGO_PKG_VERSION"));
    let args: Vec<String> = std::env::args().collect();
    text.push_str(&format!("argv = {}\n", args.join(" ")));
    for (k, v) in lines {
        text.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config: cfg_path,
            seed,
            out,
            data,
        } => {
            let cfg = config::parse_file(&cfg_path)?;
            write_manifest(
                &out,
                &[
                    ("config_file", cfg_path.display().to_string()),
                    ("config_file_hash", config::file_hash(&cfg_path)?),
                    ("config_hash", cfg.config_hash()),
                    ("seed", seed.to_string()),
                ],
            )?;
            let (train_ds, _) = load_data(&data)?;
            let inv = if cfg.kind == ConfigKind::Baseline {
                None
            } else {
                Some(attacks::build_invariance_set(
                    &train_ds,
                    &train_ds,
                    &cfg.invariance,
                )?)
            };
            let outcome = trainer::train(&cfg, seed, &train_ds, inv.as_ref())?;
            outcome
                .model
                .save_checkpoint(out.join("model.ckpt"), &cfg.config_hash(), seed)?;
            trainer::write_log(&outcome.log, out.join("train.log"))?;
            println!(
                "checkpoint {} ({} steps logged)",
                out.join("model.ckpt").display(),
                outcome.log.len()
            );
            Ok(())
        }
        Command::Attack {
            kind,
            checkpoint,
            epsilon,
            out,
            data,
        } => {
            let kind: attacks::AttackKind = kind.parse()?;
            let (train_ds, test_ds) = load_data(&data)?;
            let set = match kind {
                attacks::AttackKind::Sensitivity => {
                    let path = checkpoint.ok_or_else(|| {
                        Error::Config("sensitivity attacks need --checkpoint".into())
                    })?;
                    let (model, _) = ClassifierModel::load_checkpoint(&path)?;
                    let cfg =
                        AttackConfig::sensitivity(epsilon.unwrap_or(attacks::DEFAULT_SENSITIVITY_EPS));
                    write_manifest(
                        &out,
                        &[
                            ("kind", kind.to_string()),
                            ("epsilon", cfg.epsilon.to_string()),
                            ("checkpoint", path.display().to_string()),
                        ],
                    )?;
                    let oracle = attacks::Oracle::new(&train_ds, cfg.oracle_k, cfg.oracle_tau)?;
                    attacks::build_sensitivity_set(
                        &model,
                        &model.params.value_hash(),
                        &test_ds,
                        &oracle,
                        &cfg,
                    )?
                }
                attacks::AttackKind::Invariance => {
                    let cfg =
                        AttackConfig::invariance(epsilon.unwrap_or(attacks::DEFAULT_INVARIANCE_EPS));
                    write_manifest(
                        &out,
                        &[
                            ("kind", kind.to_string()),
                            ("epsilon", cfg.epsilon.to_string()),
                        ],
                    )?;
                    attacks::build_invariance_set(&test_ds, &train_ds, &cfg)?
                }
            };
            set.save(&out)?;
            println!(
                "{} records ({} admitted) in {}",
                set.len(),
                set.admitted_count(),
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            sensitivity,
            invariance,
            out,
            data,
        } => {
            let (model, meta) = ClassifierModel::load_checkpoint(&checkpoint)?;
            let (_, test_ds) = load_data(&data)?;
            let sens = AttackSet::load(&sensitivity)?;
            let inv = AttackSet::load(&invariance)?;
            let report = eval::evaluate(&model, &test_ds, &sens, &inv)?.tagged(
                checkpoint.display().to_string(),
                meta.seed,
                meta.config_hash.clone(),
            );
            eval::emit_report(std::slice::from_ref(&report), &out)?;
            println!(
                "clean {:.2} fgsm {:.2} invariance {:.2} ({} admitted)",
                report.clean_acc, report.fgsm_acc, report.inv_acc, report.inv_admitted
            );
            Ok(())
        }
        Command::Pca {
            checkpoint,
            sensitivity,
            invariance,
            out,
            data,
        } => {
            let (model, _) = ClassifierModel::load_checkpoint(&checkpoint)?;
            let (_, test_ds) = load_data(&data)?;
            let mut images = test_ds.images_flat().to_vec();
            let mut labels = test_ds.labels().to_vec();
            let mut kinds: Vec<String> = vec!["clean".into(); test_ds.len()];
            for (path, tag) in [(sensitivity, "sensitivity"), (invariance, "invariance")] {
                if let Some(path) = path {
                    let set = AttackSet::load(&path)?;
                    images.extend_from_slice(set.images_flat());
                    for r in set.records() {
                        labels.push(r.verdict.label().unwrap_or(r.original_label));
                        kinds.push(tag.to_string());
                    }
                }
            }
            let n = labels.len();
            let emb = eval::embed_flat(&model, &images, n)?;
            let proj = eval::pca_project(&emb, n, advmetric::model::EMBEDDING_DIM, 2)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            eval::emit_pca_csv(&proj, &labels, &kinds, out.join("pca.csv"))?;
            eval::emit_pca_plot(&proj, &labels, &kinds, out.join("pca.svg"))?;
            println!(
                "explained variance {:.3} / {:.3}",
                proj.explained[0], proj.explained[1]
            );
            Ok(())
        }
        Command::Table1 {
            config: cfg_path,
            out,
            jobs,
            data,
        } => {
            let cfg = config::parse_file(&cfg_path)?;
            write_manifest(
                &out,
                &[
                    ("config_file", cfg_path.display().to_string()),
                    ("config_file_hash", config::file_hash(&cfg_path)?),
                    (
                        "seeds",
                        cfg.seeds
                            .iter()
                            .map(u64::to_string)
                            .collect::<Vec<_>>()
                            .join(","),
                    ),
                    ("jobs", jobs.to_string()),
                ],
            )?;
            let (train_ds, test_ds) = load_data(&data)?;
            let reports = trainer::run_table1(&cfg, &train_ds, &test_ds, &out, jobs)?;
            for r in &reports {
                println!(
                    "{} seed {}: clean {:.2} fgsm {:.2} invariance {:.2}",
                    r.model, r.seed, r.clean_acc, r.fgsm_acc, r.inv_acc
                );
            }
            println!("report: {}", out.join("report.csv").display());
            Ok(())
        }
    }
}
