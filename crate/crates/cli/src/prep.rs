use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Subcommand, ValueEnum};
use topicswitch_core::dialogue_graph::*;
use topicswitch_core::synthetic::{synthetic_graph, SynthSpec};
use topicswitch_core::tokenizer::Vocab;

#[derive(Debug, Subcommand)]
pub enum PrepCommand {
    /// Turn a corpus graph into training examples.
    Extract {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, value_enum)]
        policy: Policy,
        #[arg(long)]
        out: PathBuf,
        /// Seed for negative sampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negatives per positive, `pairs` only.
        #[arg(long, default_value_t = 1.0)]
        negative_ratio: f64,
    },
    /// Split examples into train, valid and test files next to the input.
    Split {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "0.9,0.05,0.05")]
        ratios: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the three files; defaults to the input's.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print corpus statistics as JSON and validation findings on stderr.
    Stats {
        #[arg(long)]
        graph: PathBuf,
        /// Count tokens with this vocab instead of raw bytes.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Write a synthetic two-topic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        dialogues_per_topic: usize,
        #[arg(long, default_value_t = 3)]
        depth: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Policy {
    #[value(name = "one2one")]
    OneToOne,
    #[value(name = "one2many")]
    OneToMany,
    Pairs,
}

pub fn run(cmd: PrepCommand) -> anyhow::Result<()> {
    match cmd {
        PrepCommand::Extract {
            graph,
            policy,
            out,
            seed,
            negative_ratio,
        } => {
            let g = load_graph(&graph)?;
            let examples = match policy {
                Policy::OneToOne => extract_one_to_one(&g),
                Policy::OneToMany => extract_one_to_many(&g),
                Policy::Pairs => extract_discriminator_pairs(&g, negative_ratio, seed)?,
            };
            write_examples(&out, &examples)?;
            eprintln!("wrote {} examples to {}", examples.len(), out.display());
        }
        PrepCommand::Split {
            input,
            ratios,
            seed,
            out_dir,
        } => {
            let [train, valid, test] = parse_ratios(&ratios)?;
            let spec = SplitSpec::new(train, valid, test, seed)?;
            let examples = read_examples(&input).with_context(|| format!("reading {}", input.display()))?;
            let split = split_dataset(&examples, &spec)?;
            for (name, part) in [("train", &split.train), ("valid", &split.valid), ("test", &split.test)] {
                let path = split_path(&input, out_dir.as_deref(), name);
                write_examples(&path, part)?;
                eprintln!("wrote {} examples to {}", part.len(), path.display());
            }
        }
        PrepCommand::Stats { graph, vocab } => {
            let g = load_graph(&graph)?;
            let vocab = match vocab {
                Some(p) => Vocab::load(&p).with_context(|| format!("reading {}", p.display()))?,
                None => Vocab::bytes_only(0),
            };
            let report = g.validate();
            for v in &report.violations {
                eprintln!("violation: {v}");
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", serde_json::to_string_pretty(&graph_stats(&g, &vocab))?);
            if !report.is_valid() {
                bail!("{} violations", report.violations.len());
            }
        }
        PrepCommand::Synth {
            out,
            dialogues_per_topic,
            depth,
            seed,
        } => {
            let g = synthetic_graph(&SynthSpec {
                dialogues_per_topic,
                depth,
                seed,
                ..SynthSpec::default()
            })?;
            g.save(&out)?;
            eprintln!("wrote {} nodes to {}", g.nodes().len(), out.display());
        }
    }
    Ok(())
}

pub fn load_graph(path: &Path) -> anyhow::Result<DialogueGraph> {
    DialogueGraph::load(path).with_context(|| format!("reading {}", path.display()))
}

fn parse_ratios(s: &str) -> anyhow::Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("ratios {s:?}"))?;
    match parts[..] {
        [a, b, c] => Ok([a, b, c]),
        _ => bail!("ratios need three comma-separated values, got {s:?}"),
    }
}

/// `data.jsonl` becomes `data.train.jsonl` and so on.
fn split_path(input: &Path, out_dir: Option<&Path>, name: &str) -> PathBuf {
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    let dir = out_dir.or_else(|| input.parent()).unwrap_or(Path::new("."));
    dir.join(format!("{stem}.{name}.jsonl"))
}
