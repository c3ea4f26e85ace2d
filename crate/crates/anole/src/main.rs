use std::path::PathBuf;
use std::process::ExitCode;

use anole::pipeline::{self, EvalOptions, GenerateOptions};
use anole::report::{self, KeyValues};
use anole::{synth, Error};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "anole", version, about = "Train and sample a toy token-based image and text generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic shape corpus and its manifest.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the VQ image tokenizer.
    TrainVq {
        #[command(flatten)]
        common: Common,
        /// JSONL manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write composed token sequences, one JSON array per line.
    Tokenize {
        #[command(flatten)]
        common: Common,
        /// Tokenizer checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the language model with down-weighted image targets.
    TrainLm {
        #[command(flatten)]
        common: Common,
        /// Tokenizer checkpoint.
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Continue from the model in this checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune only the image rows of the output head.
    FinetuneHead {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample an interleaved document and write a markdown report.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Start an image right after the prompt.
        #[arg(long)]
        force_image: bool,
        #[arg(long)]
        max_tokens: Option<usize>,
        #[arg(long)]
        max_images: Option<usize>,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruction PSNR, image-token cross-entropy and label agreement.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Base checkpoint for the cross-entropy comparison.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Caption prompts for the label-agreement check.
        #[arg(long, default_value_t = 50)]
        prompts: usize,
        /// Also write the metrics to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::TrainVq { .. } => "train-vq",
            Command::Tokenize { .. } => "tokenize",
            Command::TrainLm { .. } => "train-lm",
            Command::FinetuneHead { .. } => "finetune-head",
            Command::Generate { .. } => "generate",
            Command::Eval { .. } => "eval",
        }
    }
}

fn emit_error(code: &str, message: &str, context: &str) {
    let line = serde_json::json!({ "code": code, "message": message, "context": context });
    eprintln!("error: {line}");
}

fn progress(line: &str) {
    eprintln!("{line}");
}

fn run(command: Command) -> Result<KeyValues, Error> {
    let config_of = |c: &Common| pipeline::resolve_config(c.config.as_deref(), c.seed);
    match command {
        Command::Synth { count, seed, out } => {
            let m = synth::synth_corpus(count, seed, &out)?;
            let mut kv = KeyValues::default();
            kv.push("records", m.entries.len()).push("manifest", m.path.display());
            Ok(kv)
        }
        Command::TrainVq { common, data, out } => {
            pipeline::stage_train_vq(&config_of(&common)?, &data, &out, &mut |l| progress(l))
        }
        Command::Tokenize { common, ckpt, data, out } => {
            config_of(&common)?;
            pipeline::stage_tokenize(&ckpt, &data, &out)
        }
        Command::TrainLm { common, tokenizer, data, init, out } => {
            pipeline::stage_train_lm(&config_of(&common)?, &tokenizer, &data, &out, init.as_deref(), &mut |l| progress(l))
        }
        Command::FinetuneHead { common, base, data, out } => {
            // the trainable count goes to stdout before training starts
            let r = pipeline::stage_finetune_head(&config_of(&common)?, &base, &data, &out, &mut |l| println!("{l}"))?;
            let mut kv = report::finetune_report(&r);
            kv.0.retain(|(k, _)| !k.starts_with("drift."));
            kv.push("report", pipeline::finetune_report_path(&out).display());
            Ok(kv)
        }
        Command::Generate { common, ckpt, prompt, force_image, max_tokens, max_images, out } => {
            let config = config_of(&common)?;
            let opts = GenerateOptions { prompt, force_image, seed: config.seed, max_tokens, max_images };
            let mut kv = pipeline::stage_generate(&config, &ckpt, &opts, &out)?;
            kv.0.retain(|(k, _)| k != "tokens");
            kv.push("report", out.join(report::REPORT_FILE).display());
            Ok(kv)
        }
        Command::Eval { common, ckpt, base, data, prompts, out } => {
            let config = config_of(&common)?;
            let opts = EvalOptions { ckpt: &ckpt, base: base.as_deref(), data: data.as_deref(), prompts, seed: config.seed };
            let kv = pipeline::stage_eval(&config, &opts)?;
            if let Some(path) = out {
                kv.write(&path)?;
            }
            Ok(kv)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let rendered = e.to_string();
            let message = rendered.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            let argv: Vec<String> = std::env::args().skip(1).collect();
            emit_error("usage", message, &argv.join(" "));
            return ExitCode::from(2);
        }
    };
    let name = cli.command.name();
    match run(cli.command) {
        Ok(kv) => {
            print!("{kv}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            emit_error(e.code(), &e.to_string(), name);
            ExitCode::FAILURE
        }
    }
}
