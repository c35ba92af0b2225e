use std::collections::BTreeMap;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use craftlm::cli::{self, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "craftlm", version, about = "Domain-adapted encoders for a block-building dialogue task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/test corpora
    Synth(Common),
    /// Print corpus statistics
    Stats(Common),
    /// Masked-LM pretraining on generic text
    Pretrain(Common),
    /// Continue masked-LM training on task utterances
    Adapt(Common),
    /// Train the builder (from --init, or from scratch)
    Train(Common),
    /// Evaluate a builder checkpoint
    Eval(Common),
    /// Pretrain, adapt, train scratch and adapted builders, compare
    Pipeline(Common),
    /// Interactive session with a builder checkpoint
    Play(Common),
}

#[derive(Args)]
struct Common {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Root directory for run outputs
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run name (defaults to the command)
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Encoder checkpoint to adapt
    #[arg(long)]
    base: Option<PathBuf>,
    /// Encoder checkpoint that initializes the builder
    #[arg(long)]
    init: Option<PathBuf>,
    /// Builder checkpoint
    #[arg(long)]
    model: Option<PathBuf>,
    /// Print per-epoch losses
    #[arg(long, short)]
    verbose: bool,
    /// Override any config key, e.g. --set adapt.epochs=20
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn resolve(verb: &str, c: &Common) -> Result<RunConfig, CliError> {
    let mut map = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            cli::parse_config_text(&text)?
        }
        None => BTreeMap::new(),
    };
    let mut put = |k: &str, v: String| {
        map.insert(k.to_string(), v);
    };
    if let Some(s) = c.seed {
        put("seed", s.to_string());
    }
    if let Some(o) = &c.out {
        put("out", o.display().to_string());
    }
    if let Some(n) = &c.name {
        put("name", n.clone());
    }
    for (key, p) in [
        ("paths.train", &c.train),
        ("paths.test", &c.test),
        ("paths.base", &c.base),
        ("paths.init", &c.init),
        ("paths.model", &c.model),
    ] {
        if let Some(p) = p {
            put(key, p.display().to_string());
        }
    }
    if c.verbose {
        put("verbose", "true".into());
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        put(k, v.to_string());
    }
    RunConfig::from_map(verb, &map)
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth(c) => {
            let dir = cli::cmd_synth(&resolve("synth", &c)?)?;
            println!("{}", dir.display());
        }
        Command::Stats(c) => println!("{}", cli::cmd_corpus_stats(&resolve("stats", &c)?)?),
        Command::Pretrain(c) => println!("{}", cli::cmd_pretrain(&resolve("pretrain", &c)?)?.display()),
        Command::Adapt(c) => println!("{}", cli::cmd_adapt(&resolve("adapt", &c)?)?.display()),
        Command::Train(c) => println!("{}", cli::cmd_train(&resolve("train", &c)?)?.display()),
        Command::Eval(c) => {
            let r = cli::cmd_eval(&resolve("eval", &c)?)?;
            println!(
                "turns {}  precision {:.1}  recall {:.1}  f1 {:.1}",
                r.turns,
                r.precision * 100.0,
                r.recall * 100.0,
                r.f1 * 100.0
            );
        }
        Command::Pipeline(c) => {
            let s = cli::cmd_pipeline(&resolve("pipeline", &c)?)?;
            print!("{}", s.table_csv());
            println!("delta f1 {:+.1}  ({})", s.comparison.delta_f1, s.run_dir.display());
        }
        Command::Play(c) => {
            let cfg = resolve("play", &c)?;
            let stdin = io::stdin();
            let dir = cli::cmd_play(&cfg, &mut stdin.lock(), &mut io::stdout())?;
            println!("session saved to {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let parsed = match Cli::try_parse() {
        Ok(p) => p,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { cli::EXIT_USAGE as u8 } else { cli::EXIT_OK as u8 });
        }
    };
    match run(parsed.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
