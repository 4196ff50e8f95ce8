use std::io::{BufRead, Write};
use std::path::PathBuf;

use anyhow::Context;
use clap::Subcommand;
use topicswitch_core::tokenizer::{train_bpe, Vocab};

use crate::prep::load_graph;

#[derive(Debug, Subcommand)]
pub enum TokCommand {
    /// Learn a BPE vocab from the utterances of a corpus graph.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Latent tokens to reserve; must match the models' K.
        #[arg(long, default_value_t = 5)]
        latents: usize,
    },
    /// Encode stdin lines to space-separated ids, or decode with --decode.
    Encode {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        decode: bool,
    },
}

pub fn run(cmd: TokCommand) -> anyhow::Result<()> {
    match cmd {
        TokCommand::Train {
            corpus,
            size,
            out,
            latents,
        } => {
            let g = load_graph(&corpus)?;
            let vocab = train_bpe(g.nodes().iter().map(|n| n.text.as_str()), size, latents)?;
            vocab.save(&out)?;
            eprintln!(
                "wrote {} pieces, {} merges to {}",
                vocab.len(),
                vocab.merges().len(),
                out.display()
            );
        }
        TokCommand::Encode { vocab, decode } => {
            let vocab = Vocab::load(&vocab).with_context(|| format!("reading {}", vocab.display()))?;
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for line in std::io::stdin().lock().lines() {
                let line = line?;
                if decode {
                    let ids = line
                        .split_whitespace()
                        .map(str::parse)
                        .collect::<Result<Vec<u32>, _>>()
                        .with_context(|| format!("ids {line:?}"))?;
                    writeln!(out, "{}", vocab.decode(&ids)?)?;
                } else {
                    let ids: Vec<String> = vocab.encode_text(&line).iter().map(u32::to_string).collect();
                    writeln!(out, "{}", ids.join(" "))?;
                }
            }
        }
    }
    Ok(())
}
