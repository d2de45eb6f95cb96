use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use forgetalk_core::harness::{self, InferInput, PromptSource, RunConfig};
use forgetalk_core::qc::QcReport;
use forgetalk_core::Error;
use serde::Serialize;

const EXIT_VALIDATION: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Synthetic face-forgery data, region prompting, mask and caption models.
#[derive(Parser, Debug)]
#[command(name = "forgetalk", version)]
struct Cli {
    /// TOML run configuration; defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (dataset, run or predictions, depending on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Print the report as JSON instead of a table.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic triplet corpus.
    Synth {
        /// Number of triplets; overrides `data.samples`.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train the region prompter.
    TrainFpn {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train fusion, caption decoder and mask decoder over a frozen prompter.
    TrainStage2 {
        #[arg(long)]
        data: PathBuf,
        /// Run directory of a finished `train-fpn`.
        #[arg(long)]
        fpn: PathBuf,
    },
    /// Predict masks and captions.
    Infer {
        #[arg(long)]
        fpn: PathBuf,
        #[arg(long)]
        stage2: PathBuf,
        /// Dataset to take a split from.
        #[arg(long, conflicts_with = "images")]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        /// Individual PNG files.
        #[arg(long, num_args = 1..)]
        images: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Prompt::Predicted)]
        prompt: Prompt,
    },
    /// Score a predictions file against its dataset.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Check captions and annotation records.
    Qc {
        #[arg(long)]
        data: PathBuf,
        /// Exit with status 1 when any triplet fails.
        #[arg(long)]
        strict: bool,
    },
    /// Corpus statistics.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Prompt {
    Predicted,
    GroundTruth,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            let code = match e.downcast_ref::<Error>() {
                Some(Error::Config(_)) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            };
            ExitCode::from(code)
        }
    }
}

/// The error chain, skipping causes already quoted by the message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => usage(e.to_string()),
            other => other.into(),
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| usage("this command needs --out <dir>"))
}

fn emit<T: Serialize>(json: bool, report: &T, table: impl FnOnce() -> String) {
    use std::io::Write;
    let text = if json {
        serde_json::to_string_pretty(report).expect("reports serialize") + "\n"
    } else {
        table()
    };
    // a closed pipe (`| head`) is not an error
    let _ = std::io::stdout().write_all(text.as_bytes());
}

fn row(key: &str, value: impl std::fmt::Display) -> String {
    format!("{key:<16} {value}\n")
}

fn qc_table(r: &QcReport) -> String {
    let mut t = row("triplets", r.total) + &row("passed", r.passed) + &row("failed", r.failed);
    for (kind, n) in &r.counts {
        t += &row(&format!("{kind:?}"), n);
    }
    for trip in r.triplets.iter().filter(|t| !t.passed) {
        let kinds: Vec<String> = trip.violations.iter().map(|v| v.detail.clone()).collect();
        t += &format!("  {}: {}\n", trip.id, kinds.join("; "));
    }
    t
}

fn run(cli: Cli) -> Result<u8> {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth { samples } => {
            if let Some(n) = samples {
                cfg.data.samples = *n;
            }
            let out = out_dir(&cli)?;
            let r = harness::cmd_synth(&cfg, out, cli.force)?;
            emit(cli.json, &r, || {
                row("samples", r.samples)
                    + &row("train/val/test", format!("{}/{}/{}", r.train, r.val, r.test))
                    + &row("manifest sha256", &r.manifest_sha256)
                    + &row("written to", out.display())
            });
        }
        Command::TrainFpn { data } => {
            let out = out_dir(&cli)?;
            let r = harness::cmd_train_fpn(&cfg, data, out, &mut |e| {
                eprintln!(
                    "epoch {:>3}  step {:>6}  lr {:.4}  loss {:.5}  val PLM {:.4}",
                    e.epoch, e.steps, e.lr, e.train_loss, e.val_plm
                )
            })?;
            emit(cli.json, &r, || {
                row("best epoch", r.best_epoch)
                    + &row("best val PLM", format!("{:.4}", r.best_val_plm))
                    + &row("test PLM", format!("{:.4}", r.test_plm))
                    + &row("random-set PLM", format!("{:.4}", r.random_set_plm))
                    + &row("checkpoint", &r.checkpoint_sha256)
            });
        }
        Command::TrainStage2 { data, fpn } => {
            let out = out_dir(&cli)?;
            let r = harness::cmd_train_stage2(&cfg, data, fpn, out, &mut |e| {
                eprintln!(
                    "epoch {:>3}  step {:>6}  lr {:.4}  loss {:.5} (text {:.5}, mask {:.5})  val {:.5}",
                    e.epoch, e.steps, e.lr, e.train_loss, e.train_lm_loss, e.train_mask_loss, e.val_loss
                )
            })?;
            emit(cli.json, &r, || {
                row("best epoch", r.best_epoch)
                    + &row("best val loss", format!("{:.5}", r.best_val_loss))
                    + &row("vocabulary", r.vocab_size)
                    + &row("prompter frozen", r.fpn_digest_before == r.fpn_digest_after)
            });
        }
        Command::Infer {
            fpn,
            stage2,
            data,
            split,
            images,
            prompt,
        } => {
            let out = out_dir(&cli)?;
            let inputs = match data {
                Some(root) => {
                    let ds = harness::Dataset::open(root)?;
                    let ids = match split {
                        SplitName::Train => &ds.split.train,
                        SplitName::Val => &ds.split.val,
                        SplitName::Test => &ds.split.test,
                    };
                    harness::split_inputs(&ds, ids)
                }
                None if images.is_empty() => bail!(usage("infer needs --data <dir> or --images <png>...")),
                None => images
                    .iter()
                    .map(|p| {
                        let id = p
                            .file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .with_context(|| format!("{} has no file name", p.display()))?;
                        Ok(InferInput {
                            id,
                            image: p.clone(),
                            truth: None,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            };
            let prompt = match prompt {
                Prompt::Predicted => PromptSource::Predicted,
                Prompt::GroundTruth => PromptSource::GroundTruth,
            };
            let r = harness::cmd_infer(&cfg, fpn, stage2, &inputs, prompt, out)?;
            for f in &r.failures {
                eprintln!("failed {}: {}", f.id, f.error);
            }
            emit(cli.json, &r, || {
                let mut t = row("written", r.written)
                    + &row("failed", r.failures.len())
                    + &row("mention rate", format!("{:.4}", r.mention_rate));
                if let Some(m) = r.truth_mention_rate {
                    t += &row("true mentions", format!("{m:.4}"));
                }
                t
            });
            if !r.failures.is_empty() {
                return Ok(EXIT_RUNTIME);
            }
        }
        Command::Eval { predictions, data } => {
            let r = harness::cmd_eval(predictions, data)?;
            emit(cli.json, &r, || harness::metrics_table(&r));
        }
        Command::Qc { data, strict } => {
            let r = harness::cmd_qc(data)?;
            emit(cli.json, &r, || qc_table(&r));
            if *strict && !r.all_passed() {
                return Ok(EXIT_VALIDATION);
            }
        }
        Command::Stats { data } => {
            let r = harness::cmd_stats(data)?;
            emit(cli.json, &r, || {
                let mut t = row("samples", r.samples) + &row("full face", r.full_face);
                for (m, n) in &r.methods {
                    t += &row(&format!("method {m}"), n);
                }
                for (k, n) in &r.regions_per_image {
                    t += &row(&format!("{k} regions"), n);
                }
                for (name, n) in &r.mask_regions {
                    t += &row(name, format!("{n} masked, {} captioned", r.caption_regions[name]));
                }
                t + &row(
                    "caption words",
                    format!(
                        "min {} max {} total {}",
                        r.caption_length.min, r.caption_length.max, r.caption_length.total_words
                    ),
                )
            });
        }
    }
    Ok(0)
}
