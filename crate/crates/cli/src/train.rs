use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde_json::Value;
use topicswitch_core::dialogue_graph::read_examples;
use topicswitch_core::model::checkpoint::{load_checkpoint, save_checkpoint};
use topicswitch_core::model::{ModelConfig, NetworkKind, Parameters};
use topicswitch_core::par::Exec;
use topicswitch_core::tokenizer::Vocab;
use topicswitch_core::trainer::*;

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = ["1", "2.1", "2.2", "disc"])]
    stage: String,
    /// TOML or JSON file with `[model]` and `[plan]` tables.
    #[arg(long)]
    config: PathBuf,
    /// Training examples: one2one for stage 1, one2many for 2.1 and 2.2,
    /// pairs for disc.
    #[arg(long)]
    data: PathBuf,
    /// Validation examples of the same kind.
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Vocab file; defaults to the one embedded in `--init`.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Generator checkpoint that stages 2.1 and 2.2 start from.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
}

pub fn parse_stage(s: &str) -> anyhow::Result<Stage> {
    Ok(serde_json::from_value(Value::String(s.to_string()))?)
}

/// Reads a train config. Fields left out take their defaults, and the
/// plan's stage must agree with `stage` when present.
pub fn load_config(path: &Path, stage: Stage) -> anyhow::Result<TrainConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut v: Value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text)?
    };
    let Some(obj) = v.as_object_mut() else {
        bail!("{}: expected a table", path.display());
    };
    let plan = serde_json::to_value(TrainPlan::new(stage))?;
    let model = serde_json::to_value(ModelConfig::default())?;
    for (key, mut merged) in [("plan", plan), ("model", model)] {
        if let Some(given) = obj.remove(key) {
            let Value::Object(given) = given else {
                bail!("{}: {key} must be a table", path.display());
            };
            if let (Some(s), "plan") = (given.get("stage"), key) {
                if s != &Value::String(stage.as_str().into()) {
                    bail!("{}: plan is for stage {s}, command asks for {stage}", path.display());
                }
            }
            merged.as_object_mut().unwrap().extend(given);
        }
        obj.insert(key.into(), merged);
    }
    serde_json::from_value(v).with_context(|| format!("{}: invalid config", path.display()))
}

pub fn run(a: TrainArgs, exec: Exec) -> anyhow::Result<()> {
    let stage = parse_stage(&a.stage)?;
    let mut cfg = load_config(&a.config, stage)?;
    cfg.plan.exec = exec;

    let init = a
        .init
        .as_ref()
        .map(|p| load_checkpoint(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let vocab = match (&a.vocab, &init) {
        (Some(p), _) => Vocab::load(p).with_context(|| format!("reading {}", p.display()))?,
        (None, Some(ck)) => ck.vocab.clone().context("--init has no embedded vocab; pass --vocab")?,
        (None, None) => bail!("--vocab is required without --init"),
    };
    cfg.model.vocab_size = vocab.len();
    if cfg.model.latent_count != vocab.latent_count() {
        bail!(
            "config latent_count {} but the vocab reserves {} latent tokens",
            cfg.model.latent_count,
            vocab.latent_count()
        );
    }

    let data = read_examples(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let valid = match &a.valid {
        Some(p) => read_examples(p).with_context(|| format!("reading {}", p.display()))?,
        None => Vec::new(),
    };
    let generator_init = || -> anyhow::Result<Parameters> {
        match &init {
            Some(ck) => Ok(ck.params.clone()),
            None => Ok(Parameters::init(NetworkKind::Generator, &cfg.model)?),
        }
    };
    let (params, trace) = match stage {
        Stage::Stage1 | Stage::Discriminator if init.is_some() => {
            bail!("stage {stage} trains from scratch; drop --init")
        }
        Stage::Stage1 => train_stage1(&cfg.plan, &cfg.model, &vocab, &data, &valid)?,
        Stage::Stage2_1 => train_stage2_generation(&cfg.plan, &generator_init()?, &vocab, &data, &valid)?,
        Stage::Stage2_2 => train_stage2_selection(&cfg.plan, &generator_init()?, &vocab, &data, &valid)?,
        Stage::Discriminator => train_discriminator(&cfg.plan, &cfg.model, &vocab, &data, &valid)?,
    };
    save_checkpoint(&params, Some(&vocab), &a.out)?;
    if let Some(t) = &a.trace {
        trace.save_csv(t)?;
    }
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        eprintln!(
            "stage {stage}: {} steps, loss {:.4} -> {:.4}{}",
            trace.records.len(),
            first.total,
            last.total,
            last.valid.map(|v| format!(", valid {v:.4}")).unwrap_or_default()
        );
    }
    eprintln!("wrote {} ({} parameters)", a.out.display(), params.param_count());
    Ok(())
}
