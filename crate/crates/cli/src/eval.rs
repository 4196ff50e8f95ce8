use std::path::PathBuf;

use anyhow::Context;
use clap::Subcommand;
use topicswitch_core::eval::*;
use topicswitch_core::par::Exec;
use topicswitch_core::runtime::TurnOptions;
use topicswitch_core::tokenizer::Vocab;
use topicswitch_service::store::EventLog;

use crate::chat::ModelPaths;
use crate::OnOff;

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Two bots talk from each seed question.
    Selfchat {
        #[command(flatten)]
        models: ModelPaths,
        /// One seed question per line.
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long, default_value_t = 10)]
        turns: usize,
        #[arg(long, default_value_t = 0.61)]
        epsilon: f64,
        /// Candidates per turn; defaults to every latent.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum, default_value = "on")]
        switch: OnOff,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics for one or more runs, with optional ratings.
    Report {
        /// Repeat to compare variants side by side.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        ratings: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Vocab for token metrics; defaults to the one embedded in the run.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Export every rating in a service session log directory as CSV.
    Ratings {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cmd: EvalCommand, exec: Exec) -> anyhow::Result<()> {
    match cmd {
        EvalCommand::Selfchat {
            models,
            seeds,
            turns,
            epsilon,
            k,
            switch,
            out,
        } => {
            let models = models.load(exec)?;
            let text = std::fs::read_to_string(&seeds).with_context(|| format!("reading {}", seeds.display()))?;
            let seeds: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            let opts = TurnOptions {
                switch_enabled: switch == OnOff::On,
                ..TurnOptions::new(epsilon, k.unwrap_or(models.latent_count()))
            };
            let run = self_chat(&models, &seeds, turns, opts);
            let failed = run.transcripts.iter().filter(|t| t.error.is_some()).count();
            run.save(&out)?;
            eprintln!(
                "wrote {} dialogues ({}, {failed} failed) to {}",
                run.transcripts.len(),
                run.variant(),
                out.display()
            );
        }
        EvalCommand::Report {
            runs,
            ratings,
            out,
            vocab,
        } => {
            let runs = runs
                .iter()
                .map(|p| SelfChatRun::load(p).with_context(|| format!("reading {}", p.display())))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let vocab = match vocab {
                Some(p) => Vocab::load(&p)?,
                None => runs[0]
                    .embedded_vocab()?
                    .context("run has no embedded vocab; pass --vocab")?,
            };
            let ratings = ratings
                .map(|p| {
                    let f = std::fs::File::open(&p).with_context(|| format!("reading {}", p.display()))?;
                    anyhow::Ok(read_ratings_csv(f)?)
                })
                .transpose()?;
            let report = build_reports(&runs, &vocab, ratings.as_deref())?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            for v in &report.variants {
                eprintln!(
                    "{}: distinct-1 {:.4} distinct-2 {:.4} length {:.2} tokens topics {:.2}",
                    v.variant, v.distinct1, v.distinct2, v.avg_length, v.avg_topics
                );
            }
        }
        EvalCommand::Ratings { logs, out } => {
            let ratings = EventLog::open(&logs)?.ratings()?;
            write_ratings_csv(&ratings, std::fs::File::create(&out)?)?;
            eprintln!("wrote {} ratings to {}", ratings.len(), out.display());
        }
    }
    Ok(())
}
