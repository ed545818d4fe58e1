use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use peft_forge_cli::{commands, CliError, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "peft-forge", version, about = "Parameter-efficient few-shot fine-tuning of Vision Transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune every method on every domain and append reports to the store.
    Finetune(Common),
    /// Restrict each method to layers {k, L-1} for every k and report accuracy.
    SweepLayers(Common),
    /// Pairwise correlation of attention heads per layer.
    AnalyzeHeads(Common),
    /// Median per-step time of each method against full fine-tuning.
    BenchSpeed(Common),
    /// Trainable and total parameter counts per method.
    CountParams(Common),
    /// Print the sampled tasks as JSON lines.
    SampleTasks(Common),
    /// Per-domain mean accuracy with 95% confidence intervals.
    Summarize(SummarizeArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed and PEFT_FORGE_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces the config method list; repeatable or comma-separated.
    #[arg(long = "method", value_delimiter = ',')]
    methods: Vec<String>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SummarizeArgs {
    /// Config whose output directory holds the store.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Results store; defaults to `<output_dir>/results.jsonl` of the config.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Directory for `summary.csv`; defaults to the store's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let o = Overrides { seed: self.seed, methods: self.methods.clone(), episodes: self.episodes, out: self.out.clone() };
        ExperimentConfig::load(&self.config, &o)
    }
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Finetune(c) => commands::finetune(&c.load()?, out),
        Command::SweepLayers(c) => commands::sweep_layers(&c.load()?, out),
        Command::AnalyzeHeads(c) => commands::analyze_heads(&c.load()?, out),
        Command::BenchSpeed(c) => commands::bench_speed(&c.load()?, out),
        Command::CountParams(c) => commands::count_params(&c.load()?, out),
        Command::SampleTasks(c) => commands::sample_tasks(&c.load()?, out),
        Command::Summarize(a) => {
            let store = match (&a.store, &a.config) {
                (Some(s), _) => s.clone(),
                (None, Some(c)) => ExperimentConfig::load(c, &Overrides { out: a.out.clone(), ..Default::default() })?.store_path(),
                (None, None) => return Err(CliError::Config(vec!["summarize needs --store or --config".into()])),
            };
            let dir = a.out.clone().or_else(|| store.parent().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("."));
            commands::summarize_store(&store, &dir, out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
