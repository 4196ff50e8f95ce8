mod chat;
mod eval;
mod prep;
mod tok;
mod train;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use topicswitch_core::par::Exec;

#[derive(Debug, Parser)]
#[command(name = "topicswitch", version, about = "Topic-switch dialogue system")]
struct Cli {
    /// Run every batch on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Corpus preprocessing.
    #[command(subcommand)]
    Prep(prep::PrepCommand),
    /// BPE tokenizer.
    #[command(subcommand)]
    Tok(tok::TokCommand),
    /// Train one curriculum stage.
    Train(train::TrainArgs),
    /// Interactive chat on stdin.
    Chat(chat::ChatArgs),
    /// Sweep discriminator thresholds over labeled pairs.
    Calibrate(chat::CalibrateArgs),
    /// Self-chat runs, reports and rating export.
    #[command(subcommand)]
    Eval(eval::EvalCommand),
    /// Run the HTTP chat service.
    Serve(ServeArgs),
}

/// Flags override the `TOPICSWITCH_*` environment.
#[derive(Debug, clap::Args)]
struct ServeArgs {
    #[arg(long)]
    gen: Option<PathBuf>,
    #[arg(long)]
    sel: Option<PathBuf>,
    #[arg(long)]
    disc: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    bind: Option<std::net::SocketAddr>,
    #[arg(long)]
    log_dir: Option<PathBuf>,
    /// Comma-separated allowed origins, or `*`.
    #[arg(long)]
    cors: Option<String>,
    #[arg(long)]
    ttl_secs: Option<u64>,
    #[arg(long)]
    no_candidates: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    match cli.command {
        Command::Prep(c) => prep::run(c),
        Command::Tok(c) => tok::run(c),
        Command::Train(a) => train::run(a, exec),
        Command::Chat(a) => chat::run_chat(a, exec),
        Command::Calibrate(a) => chat::run_calibrate(a, exec),
        Command::Eval(c) => eval::run(c, exec),
        Command::Serve(a) => serve(a),
    }
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    use topicswitch_service::config::parse_origins;
    use topicswitch_service::ServiceConfig;

    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let env = |k: &str| std::env::var(k).ok();
    let path = |flag: Option<PathBuf>, var: &str| flag.or_else(|| env(var).map(PathBuf::from));
    let (Some(gen), Some(sel), Some(disc)) = (
        path(a.gen, "TOPICSWITCH_GENERATOR"),
        path(a.sel, "TOPICSWITCH_SELECTOR"),
        path(a.disc, "TOPICSWITCH_DISCRIMINATOR"),
    ) else {
        anyhow::bail!("checkpoints required: --gen/--sel/--disc or TOPICSWITCH_GENERATOR/SELECTOR/DISCRIMINATOR");
    };
    let lookup = |k: &str| match k {
        "TOPICSWITCH_GENERATOR" => Some(gen.display().to_string()),
        "TOPICSWITCH_SELECTOR" => Some(sel.display().to_string()),
        "TOPICSWITCH_DISCRIMINATOR" => Some(disc.display().to_string()),
        _ => env(k),
    };
    let mut config = ServiceConfig::from_lookup(lookup)?;
    if let Some(e) = a.epsilon {
        config.epsilon = e;
    }
    if a.k.is_some() {
        config.k = a.k;
    }
    if let Some(b) = a.bind {
        config.bind = b;
    }
    if let Some(d) = a.log_dir {
        config.log_dir = d;
    }
    if let Some(c) = a.cors {
        config.cors = parse_origins(&c);
    }
    if let Some(t) = a.ttl_secs {
        config.session_ttl = std::time::Duration::from_secs(t);
    }
    if a.no_candidates {
        config.include_candidates = false;
    }
    tokio::runtime::Runtime::new()?.block_on(topicswitch_service::run(config))
}
