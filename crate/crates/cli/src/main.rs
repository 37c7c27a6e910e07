use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use volcap::brain::{load_brain_checkpoint, save_brain_checkpoint, MapperKind};
use volcap::caption::{serve_lm, Captioner, DecodeConfig, LmBackend};
use volcap::dataset::{load_bundle, synth_generate, write_bundle, MinMaxScope, NormMode, SynthConfig};
use volcap::encoders::EncoderSet;
use volcap::metrics::{build_report, read_pairs_jsonl, render_table, write_pairs_jsonl, Protocol, TableGroup};
use volcap::pipeline::{
    ablation_report, dimensional_efficiency, infer_captions, predict_prepared, prepare, run_all, run_stage, train_brain,
    train_caption, BrainSpec, CaptionSpec, PrepOptions, PreparedData, RunConfig, Stage,
};
use volcap::tensor::{DType, Tensor};
use volcap::Error;

const SEED_ENV: &str = "VOLCAP_SEED";

#[derive(Parser)]
#[command(name = "volcap", version, about = "Decode fMRI beta volumes into image captions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Zscore,
    Minmax,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Global,
    PerVolume,
}

#[derive(Clone, Copy, ValueEnum)]
enum MapperArg {
    Ridge,
    Shallow,
    Wide,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    #[value(name = "vs_coco")]
    VsCoco,
    #[value(name = "vs_model")]
    VsModel,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::VsCoco => Protocol::VsCoco,
            ProtocolArg::VsModel => Protocol::VsModel,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic subject as a dataset manifest plus tensors.
    Synth {
        /// Generator settings (JSON); defaults apply to omitted fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalize a dataset into model-ready train and test samples.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "global")]
        minmax_scope: ScopeArg,
        /// Keep every test repetition instead of averaging per stimulus.
        #[arg(long)]
        keep_test_repetitions: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a brain module on preprocessed data.
    TrainBrain {
        #[arg(long, value_enum)]
        mapper: MapperArg,
        #[arg(long)]
        data: PathBuf,
        /// Brain training settings (JSON); defaults when omitted.
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict target embeddings for one split of preprocessed data.
    PredictEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the captioning module on (embedding, caption) pairs of the training split.
    TrainCaption {
        #[arg(long)]
        pairs: PathBuf,
        /// Captioning settings (JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption the test split: brain module, then captioner.
    Infer {
        #[arg(long)]
        brain_model: PathBuf,
        #[arg(long)]
        caption_model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long, default_value_t = 40)]
        max_len: usize,
        #[arg(long, default_value_t = 0.7)]
        alpha: f64,
        #[arg(long, value_enum, default_value = "vs_coco")]
        protocol: ProtocolArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score captions.jsonl and print the metric table.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum)]
        protocol: ProtocolArg,
        /// Directory with encoders.json; deterministic stub encoders when omitted.
        #[arg(long)]
        encoders: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the pipeline described by a run configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this stage.
        #[arg(long)]
        stage: Option<String>,
        /// Rerun even when recorded inputs are unchanged.
        #[arg(long)]
        force: bool,
    },
    /// Compare finished runs in one mapper table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ratio of a baseline token grid to our embedding size.
    Efficiency {
        #[arg(long, default_value_t = 257)]
        tokens: u64,
        #[arg(long, default_value_t = 1024)]
        dim: u64,
        #[arg(long, default_value_t = 1536)]
        ours: u64,
    },
    /// Serve a trained captioner's language model over stdin/stdout.
    #[command(hide = true)]
    ServeLm {
        #[arg(long)]
        model: PathBuf,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(|e| Error::json(path, e))?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn seed(cli_seed: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")).into()),
        Err(_) => Ok(cli_seed),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, seed: s, out } => {
            let cfg: SynthConfig = match config {
                Some(p) => read_json(&p)?,
                None => SynthConfig::default(),
            };
            let bundle = synth_generate(&cfg, seed(s)?)?;
            let path = write_bundle(&bundle, &out)?;
            println!("{}", path.display());
        }
        Command::Preprocess {
            manifest,
            mode,
            minmax_scope,
            keep_test_repetitions,
            out,
        } => {
            let bundle = load_bundle(&manifest)?;
            let opts = PrepOptions {
                mode: match mode {
                    ModeArg::Zscore => NormMode::Zscore,
                    ModeArg::Minmax => NormMode::Minmax,
                },
                minmax_scope: match minmax_scope {
                    ScopeArg::Global => MinMaxScope::Global,
                    ScopeArg::PerVolume => MinMaxScope::PerVolume,
                },
                average_test_repetitions: !keep_test_repetitions,
            };
            let data = prepare(&bundle, opts)?;
            data.save(&out)?;
            println!(
                "{}: {} train and {} test samples",
                data.meta.subject_id,
                data.train_x.len(),
                data.test_x.len()
            );
        }
        Command::TrainBrain {
            mapper,
            data,
            train_config,
            seed: s,
            out,
        } => {
            let kind = match mapper {
                MapperArg::Ridge => MapperKind::Ridge,
                MapperArg::Shallow => MapperKind::Shallow,
                MapperArg::Wide => MapperKind::Wide,
            };
            let spec: BrainSpec = match train_config {
                Some(p) => read_json(&p)?,
                None => BrainSpec::default(),
            };
            let data = PreparedData::load(&data)?;
            let (ckpt, summary) = train_brain(&data, kind, &spec, seed(s)?)?;
            save_brain_checkpoint(&ckpt, &out)?;
            write_json(&out.join("summary.json"), &summary)?;
            println!(
                "{} mapper: {} parameters, train MSE {:.6e}",
                kind.label(),
                summary.parameter_count,
                summary.train_mse
            );
        }
        Command::PredictEmbeddings { model, data, split, out } => {
            let ckpt = load_brain_checkpoint(&model)?;
            let data = PreparedData::load(&data)?;
            let xs = match split {
                SplitArg::Train => &data.train_x,
                SplitArg::Test => &data.test_x,
            };
            let preds = predict_prepared(&ckpt.model, &data, xs)?;
            if preds.is_empty() {
                bail!(Error::Data("the requested split is empty".into()));
            }
            let rows: Vec<Tensor> = preds.into_iter().map(|p| Tensor::vector(p.0)).collect();
            Tensor::stack(&rows.iter().collect::<Vec<_>>())?.save(&out, DType::F64)?;
            println!("{} embeddings written to {}", rows.len(), out.display());
        }
        Command::TrainCaption {
            pairs,
            config,
            seed: s,
            out,
        } => {
            let spec: CaptionSpec = match config {
                Some(p) => read_json(&p)?,
                None => CaptionSpec::default(),
            };
            let data = PreparedData::load(&pairs)?;
            let (captioner, losses) = train_caption(&data, &spec, seed(s)?)?;
            captioner.save(&out)?;
            write_json(&out.join("history.json"), &serde_json::json!({ "epoch_loss": losses }))?;
            if let Some(l) = losses.last() {
                println!("final caption loss {l:.6}");
            }
        }
        Command::Infer {
            brain_model,
            caption_model,
            data,
            beam,
            max_len,
            alpha,
            protocol,
            out,
        } => {
            let brain = load_brain_checkpoint(&brain_model)?;
            let captioner = Captioner::load(&caption_model)?;
            let data = PreparedData::load(&data)?;
            let decode = DecodeConfig {
                beam_width: beam,
                max_len,
                alpha,
            };
            let (_, pairs) = infer_captions(&brain, &captioner, &data, &decode, protocol.into())?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(&out, write_pairs_jsonl(&pairs)).map_err(|e| Error::io(&out, e))?;
            println!("{} captions written to {}", pairs.len(), out.display());
        }
        Command::Evaluate {
            pred,
            protocol,
            encoders,
            out,
        } => {
            let protocol: Protocol = protocol.into();
            let text = fs::read_to_string(&pred).map_err(|e| Error::io(&pred, e))?;
            let pairs = read_pairs_jsonl(&text)?;
            if let Some(p) = pairs.iter().find(|p| p.protocol != protocol) {
                bail!(Error::Validation(format!(
                    "{} was captioned under {}, evaluation asked for {}",
                    p.stimulus_id,
                    p.protocol.as_str(),
                    protocol.as_str()
                )));
            }
            let encoders = match encoders {
                Some(d) => EncoderSet::load(&d)?,
                None => EncoderSet::stubs(),
            };
            let report = build_report(&pairs, &encoders)?;
            write_json(&out, &report)?;
            print!(
                "{}",
                render_table(
                    "Evaluation of captions from fMRI",
                    &[TableGroup {
                        heading: protocol.heading().to_string(),
                        columns: vec![("Ours".into(), Some(report))],
                    }],
                )
            );
        }
        Command::Run { config, stage, force } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
            let outcomes = match stage {
                Some(s) => run_stage(s.parse::<Stage>()?, &cfg, force)?,
                None => run_all(&cfg, force)?,
            };
            for o in outcomes {
                println!("{o}");
            }
        }
        Command::Report { runs, out } => {
            let table = ablation_report(&runs)?.render();
            if let Some(p) = out {
                fs::write(&p, &table).map_err(|e| Error::io(&p, e))?;
            }
            print!("{table}");
        }
        Command::Efficiency { tokens, dim, ours } => {
            let r = dimensional_efficiency((tokens, dim), ours)?;
            println!("{tokens}x{dim} / {ours} = {r:.2}");
        }
        Command::ServeLm { model } => {
            let captioner = Captioner::load(&model)?;
            let lm = match &captioner.lm {
                LmBackend::Tiny(m) => m,
                LmBackend::External(_) => bail!(Error::Config(
                    "serve-lm needs a captioner with a built-in language model".into()
                )),
            };
            serve_lm(lm, std::io::stdin().lock(), std::io::stdout().lock())?;
        }
    }
    Ok(())
}

/// 2: bad input or configuration, 3: stage dependency, 4: numeric failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Dependency(_)) => 3,
        Some(Error::Numeric(_) | Error::Solver(_)) => 4,
        Some(Error::Backend(_)) => 1,
        Some(_) => 2,
        None if err.downcast_ref::<serde_json::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn errors_map_to_documented_codes() {
        let code = |e: Error| exit_code(&anyhow::Error::from(e));
        assert_eq!(code(Error::Validation("x".into())), 2);
        assert_eq!(code(Error::Config("x".into())), 2);
        assert_eq!(code(Error::Dependency("x".into())), 3);
        assert_eq!(code(Error::Numeric("x".into())), 4);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 1);
    }

    #[test]
    fn protocol_names_use_underscores() {
        let cli = Cli::try_parse_from(["volcap", "evaluate", "--pred", "p", "--protocol", "vs_model", "--out", "o"]).unwrap();
        assert!(matches!(cli.command, Command::Evaluate { protocol: ProtocolArg::VsModel, .. }));
    }
}
