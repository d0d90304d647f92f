//! The `chartrans` command line.
//!
//! Machine-readable output (JSON lines, CSV, generated text) goes to
//! stdout; progress and errors go to stderr. Failures print a single line
//! `error: kind=<kind> msg="<message>"` and exit with status 1; bad usage
//! exits with status 2.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::analysis::{copy_probe, enumerate_completions, generate, trace, Sampling};
use crate::checkpoint;
use crate::config::{Ablation, RunConfig, PRESETS};
use crate::data::{load_corpus, preprocess_text8, synthetic_text8, unigram_entropy_bits, Corpus, CorpusFormat, Split, SplitFractions};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalConfig};
use crate::trainer::{TrainState, Trainer};

/// Directory searched for corpora when `--data` is not given.
pub const DATA_DIR_ENV: &str = "CHARTRANS_DATA_DIR";

#[derive(Parser, Debug)]
#[command(name = "chartrans", version, about = "Character-level transformer language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Clean a raw corpus (or synthesise one) and report its statistics.
    PrepareData(PrepareArgs),
    /// Train a model; metrics are written to stdout as JSON lines.
    Train(TrainArgs),
    /// Bits per character and accuracy of a checkpoint on a split.
    Eval(EvalArgs),
    /// Per-character traces, word completions and the copy probe.
    Analyze(AnalyzeArgs),
    /// Sample text from a checkpoint.
    Generate(GenerateArgs),
    /// Print the config, step and parameter split stored in a checkpoint.
    InspectCheckpoint(InspectArgs),
    /// Print the parameter split a config or preset implies.
    InspectConfig(InspectConfigArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Text8,
    Enwik8,
    Raw,
}

impl From<FormatArg> for CorpusFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Text8 => CorpusFormat::Text8,
            FormatArg::Enwik8 => CorpusFormat::Enwik8,
            FormatArg::Raw => CorpusFormat::Raw,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Corpus file; defaults to `$CHARTRANS_DATA_DIR/<format>`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Train, dev and test fractions, e.g. `0.9,0.05,0.05`.
    #[arg(long)]
    split_fractions: Option<String>,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Raw input file.
    #[arg(long, required_unless_present = "synthetic")]
    input: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text8")]
    format: FormatArg,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
    /// Write this many bytes of synthetic text8-alphabet text instead.
    #[arg(long, conflicts_with = "input")]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Preset name (t64, t12, desk) or config file.
    #[arg(long, default_value = "desk")]
    config: String,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for checkpoints, the config and the metrics log.
    #[arg(long)]
    out: PathBuf,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Disable one mechanism.
    #[arg(long)]
    ablation: Option<String>,
    /// Continue from a checkpoint, using its stored config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "dev")]
    split: SplitArg,
    /// Context length; defaults to the model's.
    #[arg(long)]
    context: Option<usize>,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long)]
    max_chars: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Probe {
    Trace,
    Completions,
    CopyProbe,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(value_enum)]
    probe: Probe,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    seed_file: PathBuf,
    /// Required for trace and copy-probe.
    #[arg(long)]
    continuation_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0.001)]
    cutoff: f64,
    /// Longest completion explored, in characters.
    #[arg(long, default_value_t = 32)]
    max_len: usize,
    #[arg(long, default_value = "elizabeth")]
    name: String,
    #[arg(long, default_value = "zjakdmu bmijwxn")]
    fake_name: String,
    /// Replacement for the second occurrence of the name.
    #[arg(long, default_value = "she")]
    second: String,
    /// Emit CSV rows instead of JSON for traces.
    #[arg(long)]
    csv: bool,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, conflicts_with = "seed_text", required_unless_present = "seed_text")]
    seed_file: Option<PathBuf>,
    #[arg(long)]
    seed_text: Option<String>,
    #[arg(long, default_value_t = 256)]
    n_chars: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Argmax decoding.
    #[arg(long)]
    greedy: bool,
    #[arg(long, default_value_t = 0)]
    rng_seed: u64,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Args, Debug)]
struct InspectConfigArgs {
    /// Preset name or config file.
    #[arg(long, default_value = "t64")]
    config: String,
}

fn load_run_config(name: &str) -> Result<RunConfig> {
    if PRESETS.contains(&name) {
        return RunConfig::preset(name);
    }
    let path = Path::new(name);
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::parse(&text)
}

fn resolve_data(args: &DataArgs, run: &RunConfig) -> Result<(Corpus, CorpusFormat)> {
    let format = args.format.map(CorpusFormat::from).unwrap_or(run.format);
    let fractions = match &args.split_fractions {
        Some(s) => s.parse::<SplitFractions>()?,
        None => run.split_fractions,
    };
    let path = match &args.data {
        Some(p) => p.clone(),
        None => match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) => PathBuf::from(dir).join(format.as_str()),
            None => {
                return Err(Error::Config(format!(
                    "no --data given and {DATA_DIR_ENV} is not set"
                )))
            }
        },
    };
    Ok((load_corpus(&path, format, fractions)?, format))
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(String::from_utf8_lossy(&bytes).trim_end_matches('\n').to_string())
}

fn counts_json(run: &RunConfig) -> serde_json::Value {
    let c = run.model.param_counts();
    json!({
        "train_params": c.train,
        "inference_params": c.inference,
        "positional_params": c.positional,
        "per_head_params": c.per_head,
    })
}

fn prepare(a: PrepareArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let format = CorpusFormat::from(a.format);
    let bytes = match (a.synthetic, &a.input) {
        (Some(n), _) => synthetic_text8(n, a.seed),
        (None, Some(input)) => {
            let raw = std::fs::read(input).map_err(|e| Error::io(input, e))?;
            match format {
                CorpusFormat::Text8 => preprocess_text8(&raw),
                _ => raw,
            }
        }
        (None, None) => unreachable!("clap requires --input or --synthetic"),
    };
    let corpus = Corpus::from_bytes("prepared", bytes, SplitFractions::default())?;
    crate::data::save_corpus(&corpus, &a.out)?;
    writeln!(err, "wrote {} bytes to {}", corpus.len(), a.out.display())?;
    writeln!(
        out,
        "{}",
        json!({
            "bytes": corpus.len(),
            "distinct_symbols": corpus.distinct_symbols(),
            "unigram_entropy_bits": unigram_entropy_bits(corpus.bytes()),
            "train": corpus.split(Split::Train).len(),
            "dev": corpus.split(Split::Dev).len(),
            "test": corpus.split(Split::Test).len(),
        })
    )?;
    Ok(())
}

fn train(a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let (mut run, state) = match &a.resume {
        Some(path) => {
            let (run, state) = checkpoint::load(path)?;
            (run, Some(state))
        }
        None => (load_run_config(&a.config)?, None),
    };
    for kv in &a.overrides {
        let line = kv.replacen('=', " = ", 1);
        run = run.apply(&line)?;
    }
    if let Some(name) = &a.ablation {
        run = run.with_ablation(name.parse::<Ablation>()?);
    }
    run.validate()?;
    let (corpus, format) = resolve_data(&a.data, &run)?;
    run.format = format;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let conf = a.out.join("config.conf");
    std::fs::write(&conf, run.to_text()).map_err(|e| Error::io(&conf, e))?;
    let state = match state {
        Some(s) => s,
        None => TrainState::fresh(&run)?,
    };
    let counts = run.model.param_counts();
    writeln!(
        err,
        "training {} layers, {} train / {} inference params, {} bytes of {}, steps {}..{}",
        run.model.n_layers,
        counts.train,
        counts.inference,
        corpus.len(),
        format.as_str(),
        state.step,
        run.train.total_steps
    )?;
    let started = std::time::Instant::now();
    let outcome = Trainer::new(run.clone(), &corpus)?
        .with_out_dir(&a.out)
        .with_metrics(&mut *out)
        .run(state)?;
    let last = a.out.join("last.ckpt");
    checkpoint::save(&last, &run, &outcome.state)?;
    writeln!(
        err,
        "done at step {} in {:.1}s; best dev bpc {} at step {}",
        outcome.state.step,
        started.elapsed().as_secs_f64(),
        outcome.state.best_bpc.map_or("n/a".into(), |b| format!("{b:.4}")),
        outcome.state.best_step.map_or("n/a".into(), |s| s.to_string()),
    )?;
    Ok(())
}

fn eval(a: EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let (run, state) = checkpoint::load(&a.ckpt)?;
    let (corpus, _) = resolve_data(&a.data, &run)?;
    let cfg = EvalConfig {
        context: a.context.unwrap_or(run.model.seq_len),
        stride: a.stride,
        split: a.split.into(),
        max_chars: a.max_chars,
    };
    let r = evaluate(&state.model, &corpus, &cfg)?;
    writeln!(out, "{}", r.to_json())?;
    writeln!(err, "{}", r.human_line())?;
    Ok(())
}

fn analyze(a: AnalyzeArgs, out: &mut dyn Write) -> Result<()> {
    let (_, state) = checkpoint::load(&a.ckpt)?;
    let model = &state.model;
    let seed = read_text(&a.seed_file)?;
    let continuation = || -> Result<String> {
        let path = a
            .continuation_file
            .as_ref()
            .ok_or_else(|| Error::Config("--continuation-file is required for this probe".into()))?;
        read_text(path)
    };
    match a.probe {
        Probe::Trace => {
            let t = trace(model, seed.as_bytes(), continuation()?.as_bytes())?;
            if a.csv {
                write!(out, "{}", t.to_csv())?;
            } else {
                writeln!(out, "{}", serde_json::to_string(&t).expect("trace serialises"))?;
            }
        }
        Probe::Completions => {
            for c in enumerate_completions(model, seed.as_bytes(), a.cutoff, a.max_len)? {
                writeln!(out, "{}", serde_json::to_string(&c).expect("completion serialises"))?;
            }
        }
        Probe::CopyProbe => {
            let p = copy_probe(model, &seed, &a.name, &a.fake_name, &a.second, &continuation()?)?;
            if a.csv {
                writeln!(out, "# fake context")?;
                write!(out, "{}", p.with_fake_context.to_csv())?;
                writeln!(out, "# original context")?;
                write!(out, "{}", p.with_original_context.to_csv())?;
            } else {
                writeln!(out, "{}", serde_json::to_string(&p).expect("probe serialises"))?;
            }
        }
    }
    Ok(())
}

fn generate_cmd(a: GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let (_, state) = checkpoint::load(&a.ckpt)?;
    let seed = match (&a.seed_text, &a.seed_file) {
        (Some(t), _) => t.clone(),
        (None, Some(p)) => read_text(p)?,
        (None, None) => unreachable!("clap requires a seed"),
    };
    let sampling = if a.greedy {
        Sampling::Greedy
    } else {
        Sampling::Temperature(a.temperature)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.rng_seed);
    let text = generate(&state.model, seed.as_bytes(), a.n_chars, sampling, &mut rng)?;
    out.write_all(&text)?;
    writeln!(out)?;
    Ok(())
}

fn inspect(a: InspectArgs, out: &mut dyn Write) -> Result<()> {
    let (run, state) = checkpoint::load(&a.ckpt)?;
    let c = state.model.param_counts();
    write!(out, "{}", run.to_text())?;
    writeln!(out)?;
    writeln!(out, "step = {}", state.step)?;
    writeln!(
        out,
        "best_dev_bpc = {}",
        state.best_bpc.map_or("none".into(), |b| b.to_string())
    )?;
    writeln!(out, "params_train = {}", c.train)?;
    writeln!(out, "params_inference = {}", c.inference)?;
    writeln!(
        out,
        "params_millions = {:.0} / {:.0}",
        c.train as f64 / 1e6,
        c.inference as f64 / 1e6
    )?;
    Ok(())
}

fn inspect_config(a: InspectConfigArgs, out: &mut dyn Write) -> Result<()> {
    let run = load_run_config(&a.config)?;
    writeln!(out, "{}", counts_json(&run))?;
    Ok(())
}

fn report(err: &mut dyn Write, e: &Error) {
    let msg = e.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
    let _ = writeln!(err, "error: kind={} msg=\"{msg}\"", e.kind());
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    let result = match cli.command {
        Command::PrepareData(a) => prepare(a, out, err),
        Command::Train(a) => train(a, out, err),
        Command::Eval(a) => eval(a, out, err),
        Command::Analyze(a) => analyze(a, out),
        Command::Generate(a) => generate_cmd(a, out),
        Command::InspectCheckpoint(a) => inspect(a, out),
        Command::InspectConfig(a) => inspect_config(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            report(err, &e);
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("chartrans").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn no_arguments_is_usage_error() {
        let (code, _, err) = call(&[]);
        assert_eq!(code, 2);
        assert!(err.contains("Usage"), "{err}");
        assert_eq!(call(&["frobnicate"]).0, 2);
        assert_eq!(call(&["--help"]).0, 0);
    }

    #[test]
    fn runtime_errors_are_single_line() {
        let (code, _, err) = call(&["inspect-checkpoint", "--ckpt", "/nonexistent/x.ckpt"]);
        assert_eq!(code, 1);
        assert_eq!(err.lines().count(), 1);
        assert!(err.starts_with("error: kind=io msg=\""), "{err}");
    }

    #[test]
    fn t64_parameter_split() {
        let (code, out, _) = call(&["inspect-config", "--config", "t64"]);
        assert_eq!(code, 0);
        let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
        let train = v["train_params"].as_f64().unwrap();
        let inference = v["inference_params"].as_f64().unwrap();
        assert!((train / 235e6 - 1.0).abs() < 0.02);
        assert!((inference / 219e6 - 1.0).abs() < 0.02);
    }
}
