use std::io::{BufRead, Write};
use std::path::PathBuf;

use anyhow::Context;
use topicswitch_core::calibrate::calibrate_threshold;
use topicswitch_core::dialogue_graph::read_examples;
use topicswitch_core::model::checkpoint::load_checkpoint;
use topicswitch_core::model::NetworkKind;
use topicswitch_core::par::Exec;
use topicswitch_core::runtime::{chat_turn, ChatContext, ChatModels, TurnOptions};
use topicswitch_core::tokenizer::Vocab;

use crate::OnOff;

#[derive(Debug, clap::Args)]
pub struct ModelPaths {
    #[arg(long)]
    pub gen: PathBuf,
    #[arg(long)]
    pub sel: PathBuf,
    #[arg(long)]
    pub disc: PathBuf,
}

impl ModelPaths {
    pub fn load(&self, exec: Exec) -> anyhow::Result<ChatModels> {
        let mut m = ChatModels::load(&self.gen, &self.sel, &self.disc).context("loading checkpoints")?;
        m.exec = exec;
        Ok(m)
    }
}

#[derive(Debug, clap::Args)]
pub struct ChatArgs {
    #[command(flatten)]
    models: ModelPaths,
    #[arg(long, default_value_t = 0.61)]
    epsilon: f64,
    /// Candidates per turn; defaults to every latent.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum, default_value = "on")]
    switch: OnOff,
    /// Print every candidate with its score.
    #[arg(long)]
    candidates: bool,
}

pub fn run_chat(a: ChatArgs, exec: Exec) -> anyhow::Result<()> {
    let models = a.models.load(exec)?;
    let opts = TurnOptions {
        switch_enabled: a.switch == OnOff::On,
        ..TurnOptions::new(a.epsilon, a.k.unwrap_or(models.latent_count()))
    };
    eprintln!(
        "epsilon {} k {}; /reset starts over, /quit or EOF exits",
        opts.epsilon, opts.k
    );
    let mut ctx = ChatContext::new();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    write!(out, "> ")?;
    out.flush()?;
    for line in std::io::stdin().lock().lines() {
        let line = line?;
        let text = line.trim();
        match text {
            "/quit" => break,
            "/reset" => ctx = ChatContext::new(),
            "" => {}
            _ => {
                let turn = match chat_turn(&models, &ctx, text, opts) {
                    Ok(t) => t,
                    Err(e) => {
                        // the context is unchanged, so the user can retry
                        eprintln!("error: {e}");
                        write!(out, "> ")?;
                        out.flush()?;
                        continue;
                    }
                };
                if let Some(d) = turn.decision {
                    let mark = if d.switched { "switch" } else { "stay" };
                    writeln!(out, "[{mark} beta={:.3}]", d.beta)?;
                }
                if a.candidates {
                    for c in &turn.candidates {
                        let score = c.coherence_score.map_or("-".into(), |s| format!("{s:.3}"));
                        writeln!(out, "  z={} {score} {}", c.z.value(), c.text)?;
                    }
                }
                writeln!(out, "{}", turn.response)?;
                ctx = turn.context;
            }
        }
        write!(out, "> ")?;
        out.flush()?;
    }
    writeln!(out)?;
    Ok(())
}

#[derive(Debug, clap::Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    disc: PathBuf,
    /// Labeled pairs from `prep extract --policy pairs`.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Vocab file; defaults to the one embedded in the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

/// Writes the curve and prints the chosen threshold as JSON.
pub fn run_calibrate(a: CalibrateArgs, exec: Exec) -> anyhow::Result<()> {
    let ck = load_checkpoint(&a.disc)?.expect_kind(NetworkKind::Discriminator)?;
    let vocab = match &a.vocab {
        Some(p) => Vocab::load(p)?,
        None => ck
            .vocab
            .clone()
            .context("checkpoint has no embedded vocab; pass --vocab")?,
    };
    let pairs = read_examples(&a.pairs).with_context(|| format!("reading {}", a.pairs.display()))?;
    let c = calibrate_threshold(&ck.params, &vocab, &pairs, exec)?;
    c.save_csv(&a.out)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "epsilon": c.epsilon,
            "threshold": c.best.threshold,
            "precision": c.best.precision,
            "recall": c.best.recall,
            "f1": c.best.f1,
            "pairs": pairs.len(),
        }))?
    );
    Ok(())
}
