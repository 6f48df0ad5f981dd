use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use oracle_forge::commands::{
    cmd_bug_detect, cmd_evaluate, cmd_generate, cmd_replay, cmd_self_debug, exit, CommandError, Outcome,
};
use oracle_forge::gateway::ModelSettings;
use oracle_forge::pipeline::{Mode, ProviderConfig, RunConfig};
use oracle_forge::sandbox::RunnerCommand;

#[derive(Parser)]
#[command(
    name = "oracle-forge",
    version,
    about = "Generate and evaluate test oracles from natural-language specifications"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over a task suite and write a run record.
    Generate(GenerateArgs),
    /// Re-run a record from its stored exchanges and compare the result.
    Replay {
        record: PathBuf,
        /// Output record (default: `<record>.replay`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        runner: RunnerArgs,
    },
    /// Score final oracle sets against canonical solutions.
    Evaluate(EvalArgs),
    /// Run verified-correct oracles against buggy variants.
    BugDetect(EvalArgs),
    /// One repair round per buggy variant, judged by hidden tests.
    SelfDebug {
        #[command(flatten)]
        eval: EvalArgs,
        /// Override the provider recorded in the run.
        #[arg(long)]
        provider: Option<String>,
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Args)]
struct RunnerArgs {
    /// Runner command line, whitespace separated (default: the record's).
    #[arg(long)]
    runner: Option<String>,
}

impl RunnerArgs {
    fn parse(&self) -> Result<Option<RunnerCommand>, CommandError> {
        self.runner.as_deref().map(parse_runner).transpose()
    }
}

/// The runner starts in a scratch directory, so relative paths that name
/// existing files are made absolute here.
fn parse_runner(spec: &str) -> Result<RunnerCommand, CommandError> {
    let mut cmd = RunnerCommand::parse(spec).ok_or_else(|| CommandError::Config("runner command is empty".into()))?;
    for arg in &mut cmd.args {
        let path = std::path::Path::new(arg.as_str());
        if path.is_relative() && path.is_file() {
            if let Ok(abs) = path.canonicalize() {
                *arg = abs.display().to_string();
            }
        }
    }
    Ok(cmd)
}

#[derive(Args)]
struct EvalArgs {
    record: PathBuf,
    /// Suite with reference data (default: the task copies in the record).
    #[arg(long)]
    tasks: Option<PathBuf>,
    #[command(flatten)]
    runner: RunnerArgs,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    model: Option<String>,
    /// Scripted transcript (JSON) standing in for a live provider.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, default_value = "full")]
    mode: Mode,
    /// `script`, or an id for an OpenAI-compatible endpoint.
    #[arg(long)]
    provider: Option<String>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    max_refine: Option<u32>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Response cache (default: the record's exchanges directory).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    runner: Option<String>,
    /// Continue with three panelists when exactly one fails.
    #[arg(long)]
    allow_degraded_panel: bool,
    #[arg(long)]
    call_budget: Option<usize>,
}

fn provider_config(provider: Option<String>, model: &ModelArgs, base: ProviderConfig) -> ProviderConfig {
    let mut cfg = base;
    match (provider, &model.script) {
        (Some(p), _) => cfg.model.provider_id = p,
        (None, Some(_)) => cfg.model.provider_id = "script".into(),
        (None, None) => {}
    }
    if let Some(m) = &model.model {
        cfg.model.model_id = m.clone();
    }
    if let Some(t) = model.temperature {
        cfg.model.temperature = t;
    }
    if model.script.is_some() {
        cfg.script_path = model.script.clone();
    } else if cfg.model.provider_id != "script" {
        cfg.script_path = None;
    }
    if model.base_url.is_some() {
        cfg.base_url = model.base_url.clone();
    }
    cfg
}

/// Records store paths; absolute ones keep them usable from any directory.
fn absolute(path: &std::path::Path) -> PathBuf {
    path.canonicalize().unwrap_or_else(|_| path.to_path_buf())
}

fn generate_config(mut args: GenerateArgs) -> Result<RunConfig, CommandError> {
    args.model.script = args.model.script.as_deref().map(absolute);
    let mut config = RunConfig::new(absolute(&args.tasks), &args.out, args.mode);
    let mut base = ProviderConfig::default();
    if args.provider.is_none() && args.model.script.is_none() {
        base.model = ModelSettings {
            provider_id: "openai".into(),
            model_id: "gpt-4o".into(),
            ..ModelSettings::default()
        };
    }
    config.provider = provider_config(args.provider, &args.model, base);
    if let Some(n) = args.max_refine {
        config.max_refinement_iterations = n;
    }
    if let Some(t) = args.timeout_ms {
        config.limits.timeout_ms = t;
        config.limits.total_timeout_ms = config.limits.total_timeout_ms.max(t);
    }
    if let Some(w) = args.workers {
        config.workers = w;
    }
    if let Some(r) = &args.runner {
        config.runner = parse_runner(r)?.argv();
    }
    config.cache_dir = args.cache_dir;
    config.allow_degraded_panel = args.allow_degraded_panel;
    config.call_budget = args.call_budget;
    Ok(config)
}

fn run(cli: Cli) -> Result<Outcome, CommandError> {
    match cli.command {
        Command::Generate(args) => {
            let resume = args.resume;
            cmd_generate(&generate_config(args)?, resume)
        }
        Command::Replay { record, out, runner } => cmd_replay(&record, out.as_deref(), runner.parse()?),
        Command::Evaluate(a) => cmd_evaluate(&a.record, a.tasks.as_deref(), a.runner.parse()?),
        Command::BugDetect(a) => cmd_bug_detect(&a.record, a.tasks.as_deref(), a.runner.parse()?),
        Command::SelfDebug { eval, provider, model } => {
            let overridden = provider.is_some() || model.script.is_some() || model.model.is_some();
            let cfg = if overridden {
                let store = oracle_forge::store::RunStore::open(&eval.record)?;
                Some(provider_config(
                    provider,
                    &model,
                    store.header().config.provider.clone(),
                ))
            } else {
                None
            };
            cmd_self_debug(&eval.record, eval.tasks.as_deref(), cfg.as_ref(), eval.runner.parse()?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(outcome) => {
            for m in &outcome.messages {
                eprintln!("{m}");
            }
            println!("{}", outcome.path.display());
            outcome.exit_code
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(u8::try_from(code).unwrap_or(exit::PARTIAL as u8))
}
