use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cfhrm::analysis::{
    analyze_telemetry, emit_report, generate, prompt_depth_run, read_telemetry, write_telemetry, GenerationRequest, GroupBy,
    PromptRunOptions, ReportFormat, RunReport,
};
use cfhrm::checkpoint::load_checkpoint;
use cfhrm::config::ModelConfig;
use cfhrm::data::{corpus_files, encode_documents, read_texts, Tokenizer};
use cfhrm::train::train_loop;
use cfhrm::Error;

#[derive(Parser)]
#[command(name = "cfhrm", version, about = "Adaptive-depth language model: train, sample, report reasoning depth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a directory of .txt files.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample a continuation and report per-token reasoning depth.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Prompt text, or `-` to read it from stdin.
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f32,
        #[arg(long)]
        top_k: Option<usize>,
        /// Halt bias; defaults to the checkpoint config.
        #[arg(long, allow_hyphen_values = true)]
        delta: Option<f32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        telemetry: Option<PathBuf>,
        /// Tokenizer JSON; defaults to tokenizer.json beside the checkpoint.
        #[arg(long)]
        tokenizer: Option<PathBuf>,
    },
    /// Aggregate telemetry files into a step statistics report.
    Analyze {
        #[arg(long, num_args = 1.., required = true)]
        telemetry: Vec<PathBuf>,
        #[arg(long, default_value = "prompt")]
        group_by: String,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        s_max: usize,
    },
    /// Per-prompt mean reasoning depth over seeded generations.
    Prompts {
        #[arg(long)]
        ckpt: PathBuf,
        /// One prompt per line.
        #[arg(long)]
        file: PathBuf,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// csv or jsonl; guessed from the extension of --out when omitted.
        #[arg(long)]
        format: Option<String>,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f32,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, allow_hyphen_values = true)]
        delta: Option<f32>,
        #[arg(long)]
        telemetry: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
    },
    /// Run the built-in oracle checks.
    Selftest,
    /// Print a preset config as JSON (desk or table1).
    Config {
        #[arg(long, default_value = "desk")]
        preset: String,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Usage(_) | Error::Config(_) | Error::Input(_) | Error::ConfigMismatch(_) => 1,
        Error::Numeric(_) | Error::Shape { .. } | Error::Index(_) => 3,
        _ => 2,
    }
}

fn tokenizer_for(ckpt: &Path, explicit: Option<&Path>, config: &ModelConfig) -> cfhrm::Result<Tokenizer> {
    let sidecar = ckpt.parent().unwrap_or(Path::new(".")).join("tokenizer.json");
    match explicit {
        Some(p) => Tokenizer::load(p),
        None if sidecar.exists() => Tokenizer::load(&sidecar),
        None if config.tokenizer == "byte" => Ok(Tokenizer::byte()),
        None => Err(Error::Usage(format!("no tokenizer.json beside {}; pass --tokenizer", ckpt.display()))),
    }
}

fn format_for(explicit: Option<&str>, out: &Path) -> cfhrm::Result<ReportFormat> {
    match explicit {
        Some(f) => f.parse(),
        None if out.extension().is_some_and(|e| e == "jsonl") => Ok(ReportFormat::Jsonl),
        None => Ok(ReportFormat::Csv),
    }
}

fn print_report(report: &RunReport) {
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for g in report.groups.iter().chain(std::iter::once(&report.overall)) {
        let reference = g.reference_mean_steps.map(|r| format!("  (reference {r:.4})")).unwrap_or_default();
        eprintln!("{:>8.4} ± {:<8.4} n={:<6} {}{reference}", g.mean_steps, g.std_steps, g.n, g.group);
    }
}

fn run(cli: Cli) -> cfhrm::Result<()> {
    match cli.command {
        Command::Train { config, data, out, resume } => {
            let text = fs::read_to_string(&config).map_err(|source| Error::Ingest { path: config.clone(), source })?;
            let cfg = ModelConfig::from_json(&text)?;
            let files = corpus_files(&data)?;
            let texts = read_texts(&files)?;
            let tok = match cfg.tokenizer.as_str() {
                "char" => Tokenizer::char_vocab(&texts.concat()),
                _ => Tokenizer::byte(),
            };
            let stream = encode_documents(&texts, &tok)?;
            eprintln!("{} files, {} tokens", files.len(), stream.len());
            let summary = train_loop(&cfg, &stream, &tok, &out, resume.as_deref(), |m| {
                if let Some(v) = m.val_loss {
                    eprintln!(
                        "iter {:>6}  loss {:.4}  steps {:.2}  val {:.4}  val steps {:.2}  lr {:.2e}",
                        m.iteration,
                        m.lm_loss,
                        m.mean_steps,
                        v,
                        m.val_mean_steps.unwrap_or(f64::NAN),
                        m.learning_rate
                    );
                }
            })?;
            println!("{}", summary.final_checkpoint.display());
        }
        Command::Generate { ckpt, prompt, max_new, temperature, top_k, delta, seed, telemetry, tokenizer } => {
            let prompt = if prompt == "-" {
                let mut s = String::new();
                std::io::stdin().read_to_string(&mut s)?;
                s
            } else {
                prompt
            };
            let (w, cfg) = load_checkpoint(&ckpt)?;
            let tok = tokenizer_for(&ckpt, tokenizer.as_deref(), &cfg)?;
            let req = GenerationRequest { prompt: prompt.clone(), max_new_tokens: max_new, temperature, top_k, seed, halt_bias_delta: delta };
            let (text, mut rows) = generate(&req, &w, &cfg, &tok)?;
            rows.iter_mut().for_each(|r| r.prompt_id = Some(prompt.clone()));
            println!("{text}");
            let mean = rows.iter().map(|r| r.steps_used as f64).sum::<f64>() / rows.len().max(1) as f64;
            eprintln!("{} tokens, {mean:.4} reasoning steps per token", rows.len());
            if let Some(path) = telemetry {
                write_telemetry(&rows, &path)?;
            }
        }
        Command::Analyze { telemetry, group_by, format, out, s_max } => {
            let group_by: GroupBy = group_by.parse()?;
            let format: ReportFormat = format.parse()?;
            let mut rows = Vec::new();
            for path in &telemetry {
                let text = fs::read_to_string(path).map_err(|source| Error::Ingest { path: path.clone(), source })?;
                rows.extend(read_telemetry(&text)?);
            }
            let report = analyze_telemetry(&rows, group_by, s_max)?;
            emit_report(&report, format, &out)?;
            print_report(&report);
        }
        Command::Prompts { ckpt, file, repeats, seed, out, format, max_new, temperature, top_k, delta, telemetry, tokenizer } => {
            let format = format_for(format.as_deref(), &out)?;
            let text = fs::read_to_string(&file).map_err(|source| Error::Ingest { path: file.clone(), source })?;
            let prompts: Vec<String> = text.lines().map(str::to_string).collect();
            let (w, cfg) = load_checkpoint(&ckpt)?;
            let tok = tokenizer_for(&ckpt, tokenizer.as_deref(), &cfg)?;
            let opts = PromptRunOptions { repeats, seed, max_new_tokens: max_new, temperature, top_k, halt_bias_delta: delta };
            let (report, rows) = prompt_depth_run(&prompts, &w, &cfg, &tok, &opts)?;
            emit_report(&report, format, &out)?;
            if let Some(path) = telemetry {
                write_telemetry(&rows, &path)?;
            }
            print_report(&report);
        }
        Command::Selftest => {
            let results = cfhrm::selftest::run_all();
            for r in &results {
                println!("{:<16} {}  {}", r.name, if r.passed { "ok" } else { "FAILED" }, r.detail);
            }
            if results.iter().any(|r| !r.passed) {
                return Err(Error::Numeric("self-test failed".into()));
            }
        }
        Command::Config { preset } => {
            let cfg = match preset.as_str() {
                "desk" => ModelConfig::desk(),
                "table1" => ModelConfig::table1(),
                other => return Err(Error::Usage(format!("unknown preset {other:?} (desk or table1)"))),
            };
            println!("{}", cfg.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
