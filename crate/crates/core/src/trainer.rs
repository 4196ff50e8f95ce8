//! Curriculum training: stage 1 general generation, stage 2.1 latent diverse
//! generation, stage 2.2 coherence selection, and the topic discriminator.
//!
//! Every step draws a batch in a seeded order, computes per-example
//! gradients (in parallel when enabled), sums them in batch order and takes
//! one SGD step on the batch mean.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue_graph::{path_prefixes, TrainingExample, Utterance};
use crate::model::checkpoint::{check_compatible, CheckpointError};
use crate::model::graph::{Graph, Var};
use crate::model::inputs::InputBuilder;
use crate::model::losses::{bce_graph, bow_from_hidden, mlm_graph, nll_from_hidden, nll_graph, rce_graph};
use crate::model::{
    evaluate, LatentInjection, LatentVariable, ModelConfig, ModelError, Net, NetworkKind, ParamGrads, Parameters,
};
use crate::par::{self, Exec};
use crate::tokenizer::{Vocab, BOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1")]
    Stage1,
    #[serde(rename = "2.1")]
    Stage2_1,
    #[serde(rename = "2.2")]
    Stage2_2,
    #[serde(rename = "disc")]
    Discriminator,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stage1 => "1",
            Stage::Stage2_1 => "2.1",
            Stage::Stage2_2 => "2.2",
            Stage::Discriminator => "disc",
        }
    }

    /// Network kind this stage produces.
    pub fn network(self) -> NetworkKind {
        match self {
            Stage::Stage1 | Stage::Stage2_1 => NetworkKind::Generator,
            Stage::Stage2_2 => NetworkKind::Selector,
            Stage::Discriminator => NetworkKind::Discriminator,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1" | "stage1" => Ok(Stage::Stage1),
            "2.1" | "stage2_1" => Ok(Stage::Stage2_1),
            "2.2" | "stage2_2" => Ok(Stage::Stage2_2),
            "disc" | "discriminator" => Ok(Stage::Discriminator),
            other => Err(TrainError::InvalidPlan(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training examples")]
    EmptyData,
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: &'static str },
    #[error("discriminator data has only {0} examples")]
    SingleClass(&'static str),
    #[error("need at least two distinct responses to draw negatives")]
    TooFewResponses,
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("example {index} unusable: {message}")]
    BadExample { index: usize, message: String },
    #[error(transparent)]
    Incompatible(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn default_eval_every() -> usize {
    50
}

fn default_mask_rate() -> f64 {
    0.15
}

fn default_grad_clip() -> Option<f64> {
    Some(5.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub stage: Stage,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub step_count: usize,
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_mask_rate")]
    pub mask_rate: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: Option<f64>,
    #[serde(skip)]
    pub exec: Exec,
}

impl TrainPlan {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            batch_size: 16,
            learning_rate: 0.05,
            step_count: 200,
            seed: 0,
            eval_every: default_eval_every(),
            mask_rate: default_mask_rate(),
            grad_clip: default_grad_clip(),
            exec: Exec::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidPlan(m.to_string()));
        if self.batch_size == 0 || self.step_count == 0 || self.eval_every == 0 {
            return bad("batch_size, step_count and eval_every must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return bad("mask_rate must be in (0, 1]");
        }
        if matches!(self.grad_clip, Some(c) if c.is_nan() || c <= 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    fn expect_stage(&self, stage: Stage) -> Result<(), TrainError> {
        self.validate()?;
        if self.stage != stage {
            return Err(TrainError::InvalidPlan(format!(
                "plan is for stage {}, not {stage}",
                self.stage
            )));
        }
        Ok(())
    }
}

/// File layout of `train --config`: model shape plus plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub model: ModelConfig,
    pub plan: TrainPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub total: f64,
    pub comp1: f64,
    pub comp2: Option<f64>,
    /// Mean validation loss, at evaluation steps.
    pub valid: Option<f64>,
    /// Training perplexity, for the generation stages.
    pub ppl: Option<f64>,
    /// Validation accuracy, discriminator only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTrace {
    pub records: Vec<TraceRecord>,
}

impl LossTrace {
    pub fn first(&self) -> Option<&TraceRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// `step,total,comp1,comp2,valid,ppl`; absent values are empty fields.
    pub fn write_csv(&self, w: impl Write) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "total", "comp1", "comp2", "valid", "ppl"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            out.write_record([
                r.step.to_string(),
                r.total.to_string(),
                r.comp1.to_string(),
                opt(r.comp2),
                opt(r.valid),
                opt(r.ppl),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), csv::Error> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Seed for example `index` of step `step`, independent of execution order.
pub fn derive_seed(seed: u64, step: u64, index: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Epoch-shuffled batch order.
struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, cursor: 0, rng }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Per-example losses: `(comp1, comp2, tokens)`.
#[derive(Debug, Clone, Copy, Default)]
struct ExampleLoss {
    comp1: f64,
    comp2: f64,
    tokens: usize,
}

struct StepResult {
    loss: ExampleLoss,
    grads: ParamGrads,
}

/// Generic loop: `example` builds the objective of one example and returns
/// its scalar root plus bookkeeping; `valid` scores held-out data.
fn run<E, V>(
    plan: &TrainPlan,
    mut params: Parameters,
    n: usize,
    has_comp2: bool,
    with_ppl: bool,
    example: E,
    valid: V,
) -> Result<(Parameters, LossTrace), TrainError>
where
    E: Fn(&mut Graph, &Net, usize, u64) -> Result<(Var, Var, Option<Var>, usize), ModelError> + Sync,
    V: Fn(&Parameters) -> Result<Option<(f64, Option<f64>)>, TrainError>,
{
    if n == 0 {
        return Err(TrainError::EmptyData);
    }
    let mut batcher = Batcher::new(n, plan.seed);
    let mut trace = LossTrace::default();
    for step in 0..plan.step_count {
        let batch = batcher.next(plan.batch_size);
        let slots: Vec<(usize, usize)> = batch.iter().copied().enumerate().collect();
        let results = par::map(plan.exec, &slots, |&(slot, idx)| -> Result<StepResult, ModelError> {
            let seed = derive_seed(plan.seed, step as u64, slot as u64);
            let mut g = Graph::new();
            let net = params.bind(&mut g);
            let (root, c1, c2, tokens) = example(&mut g, &net, idx, seed)?;
            let grads = g.backward(root)?;
            Ok(StepResult {
                loss: ExampleLoss {
                    comp1: g.scalar(c1),
                    comp2: c2.map_or(0.0, |v| g.scalar(v)),
                    tokens,
                },
                grads: net.collect_grads(&grads),
            })
        });
        let mut total = ParamGrads::zeros_like(&params);
        let mut sum = ExampleLoss::default();
        for r in results {
            let r = r?;
            total.add_assign(&r.grads);
            sum.comp1 += r.loss.comp1;
            sum.comp2 += r.loss.comp2;
            sum.tokens += r.loss.tokens;
        }
        let b = batch.len() as f64;
        let comp1 = sum.comp1 / b;
        let comp2 = sum.comp2 / b;
        if !(comp1.is_finite() && comp2.is_finite()) {
            return Err(TrainError::NonFinite { step, what: "loss" });
        }
        total.scale(1.0 / b);
        if !total.is_finite() {
            return Err(TrainError::NonFinite { step, what: "gradient" });
        }
        if let Some(cap) = plan.grad_clip {
            let norm = total.norm();
            if norm > cap {
                total.scale(cap / norm);
            }
        }
        params.sgd_step(&total, plan.learning_rate);

        let last = step + 1 == plan.step_count;
        let (valid_loss, valid_acc) = if (step + 1) % plan.eval_every == 0 || last {
            if !params.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    what: "parameters",
                });
            }
            match valid(&params)? {
                Some((l, a)) => (Some(l), a),
                None => (None, None),
            }
        } else {
            (None, None)
        };
        let comp2 = has_comp2.then_some(comp2);
        trace.records.push(TraceRecord {
            step,
            total: comp1 + comp2.unwrap_or(0.0),
            comp1,
            comp2,
            valid: valid_loss,
            ppl: (with_ppl && sum.tokens > 0).then(|| (sum.comp1 / sum.tokens as f64).exp()),
            valid_accuracy: valid_acc,
        });
    }
    Ok((params, trace))
}

fn response_of(e: &TrainingExample, index: usize) -> Result<&Utterance, TrainError> {
    e.response.as_ref().ok_or_else(|| TrainError::BadExample {
        index,
        message: "missing response".into(),
    })
}

fn mean(values: Vec<Result<f64, ModelError>>) -> Result<f64, TrainError> {
    let n = values.len() as f64;
    let mut s = 0.0;
    for v in values {
        s += v?;
    }
    Ok(s / n)
}

/// Stage 1: context to response, no latent, NLL only.
pub fn train_stage1(
    plan: &TrainPlan,
    config: &ModelConfig,
    vocab: &Vocab,
    data: &[TrainingExample],
    valid: &[TrainingExample],
) -> Result<(Parameters, LossTrace), TrainError> {
    plan.expect_stage(Stage::Stage1)?;
    check_vocab(config, vocab)?;
    let builder = InputBuilder::new(vocab, config);
    let build = |examples: &[TrainingExample]| -> Result<Vec<_>, TrainError> {
        examples
            .iter()
            .enumerate()
            .map(|(i, e)| Ok(builder.generator_example(&e.context, response_of(e, i)?, BOS)))
            .collect()
    };
    let train = build(data)?;
    let held = build(valid)?;
    let params = Parameters::init(NetworkKind::Generator, config)?;
    run(
        plan,
        params,
        train.len(),
        false,
        true,
        |g, net, idx, _| {
            let ex = &train[idx];
            let nll = nll_graph(g, net, ex, LatentInjection::None)?;
            Ok((nll, nll, None, ex.targets.len()))
        },
        |p| {
            if held.is_empty() {
                return Ok(None);
            }
            let losses = par::map(plan.exec, &held, |ex| {
                evaluate(p, |g, net| nll_graph(g, net, ex, LatentInjection::None))
            });
            Ok(Some((mean(losses)?, None)))
        },
    )
}

fn check_vocab(config: &ModelConfig, vocab: &Vocab) -> Result<(), TrainError> {
    if vocab.len() != config.vocab_size {
        return Err(TrainError::InvalidPlan(format!(
            "vocab has {} entries, model expects {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    if vocab.latent_count() != config.latent_count {
        return Err(TrainError::InvalidPlan(format!(
            "vocab has {} latent tokens, model expects {}",
            vocab.latent_count(),
            config.latent_count
        )));
    }
    Ok(())
}

/// Index drawn from `probs` with a uniform variate from `rng`.
fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Stage 2.1: sample `z` from the posterior `p(z|C,R)`, then minimize
/// NLL + BOW of the response given `z ‖ C`. The posterior head learns
/// through a straight-through estimate. Paths are expanded into all their
/// prefixes so every context length is trained.
pub fn train_stage2_generation(
    plan: &TrainPlan,
    init: &Parameters,
    vocab: &Vocab,
    data: &[TrainingExample],
    valid: &[TrainingExample],
) -> Result<(Parameters, LossTrace), TrainError> {
    plan.expect_stage(Stage::Stage2_1)?;
    if init.kind != NetworkKind::Generator {
        return Err(TrainError::InvalidPlan(format!(
            "stage 2.1 needs a generator init, got {:?}",
            init.kind
        )));
    }
    check_vocab(&init.config, vocab)?;
    let (data, valid) = (&path_prefixes(data)[..], &path_prefixes(valid)[..]);
    let config = init.config.clone();
    let builder = InputBuilder::new(vocab, &config);
    let k = config.latent_count;
    let prepared = |examples: &[TrainingExample]| -> Result<Vec<_>, TrainError> {
        examples
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let r = response_of(e, i)?;
                let post = builder.pair(&e.context, r);
                let per_z: Vec<_> = (0..k)
                    .map(|z| builder.generator_example(&e.context, r, vocab.latent_token(z)))
                    .collect();
                Ok((post, per_z))
            })
            .collect()
    };
    let train = prepared(data)?;
    let held = prepared(valid)?;
    run(
        plan,
        init.clone(),
        train.len(),
        true,
        true,
        |g, net, idx, seed| {
            let (post, per_z) = &train[idx];
            let logits = net.posterior_logits(g, post)?;
            let probs = g.softmax(logits);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = sample_index(g.value(probs), &mut rng);
            let ex = &per_z[z];
            let latent = LatentInjection::StraightThrough {
                z: LatentVariable(z),
                probs,
            };
            let h = net.generator_hidden(g, &ex.sequence, latent)?;
            let nll = nll_from_hidden(g, net, h, ex)?;
            let bow = bow_from_hidden(g, net, h, ex.first_target_row, &ex.targets)?;
            let total = g.add(nll, bow);
            Ok((total, nll, Some(bow), ex.targets.len()))
        },
        |p| {
            if held.is_empty() {
                return Ok(None);
            }
            // validation uses the posterior mode
            let losses = par::map(plan.exec, &held, |(post, per_z)| {
                let mut g = Graph::new();
                let net = p.bind(&mut g);
                let logits = net.posterior_logits(&mut g, post)?;
                let z = argmax(g.value(logits));
                let ex = &per_z[z];
                let h = net.generator_hidden(&mut g, &ex.sequence, LatentInjection::Fixed(LatentVariable(z)))?;
                let nll = nll_from_hidden(&mut g, &net, h, ex)?;
                let bow = bow_from_hidden(&mut g, &net, h, ex.first_target_row, &ex.targets)?;
                Ok(g.scalar(nll) + g.scalar(bow))
            });
            Ok(Some((mean(losses)?, None)))
        },
    )
}

/// First index of the maximum.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A selector initialized from a generator: shared trunk copied, MLM head
/// taken from the LM head, coherence head at zero.
pub fn selector_from_generator(gen: &Parameters) -> Result<Parameters, TrainError> {
    let mut sel = Parameters::init(NetworkKind::Selector, &gen.config)?;
    sel.copy_shared_from(gen);
    for (dst, src) in [("mlm_head.w", "lm_head.w"), ("mlm_head.b", "lm_head.b")] {
        if let (Some(s), Some(d)) = (gen.get(src).cloned(), sel.get_mut(dst)) {
            d.values = s.values;
        }
    }
    Ok(sel)
}

/// Stage 2.2: RCE against a seeded negative response drawn from the whole
/// training set, plus MLM on the positive pair. Paths are expanded into all
/// their prefixes.
pub fn train_stage2_selection(
    plan: &TrainPlan,
    init: &Parameters,
    vocab: &Vocab,
    data: &[TrainingExample],
    valid: &[TrainingExample],
) -> Result<(Parameters, LossTrace), TrainError> {
    plan.expect_stage(Stage::Stage2_2)?;
    check_vocab(&init.config, vocab)?;
    let params = match init.kind {
        NetworkKind::Generator => selector_from_generator(init)?,
        NetworkKind::Selector => init.clone(),
        NetworkKind::Discriminator => {
            return Err(TrainError::InvalidPlan(
                "stage 2.2 cannot start from a discriminator".into(),
            ))
        }
    };
    let (data, valid) = (&path_prefixes(data)[..], &path_prefixes(valid)[..]);
    let builder = InputBuilder::new(vocab, &params.config);
    let responses: Vec<&Utterance> = data
        .iter()
        .enumerate()
        .map(|(i, e)| response_of(e, i))
        .collect::<Result<_, _>>()?;
    let distinct: std::collections::HashSet<&str> = responses.iter().map(|r| r.text.as_str()).collect();
    if distinct.len() < 2 {
        return Err(TrainError::TooFewResponses);
    }
    let pairs = |examples: &[TrainingExample], seed: u64| -> Result<Vec<_>, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        examples
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let r = response_of(e, i)?;
                let neg = draw_negative(&responses, &r.text, &mut rng);
                let neg = Utterance::new(r.role, neg.text.clone());
                Ok((builder.pair(&e.context, r), builder.pair(&e.context, &neg)))
            })
            .collect()
    };
    let held = pairs(valid, plan.seed ^ 0xA11CE)?;
    let mask_rate = plan.mask_rate;
    // negatives are redrawn per step from the batch seed
    run(
        plan,
        params,
        data.len(),
        true,
        false,
        |g, net, idx, seed| {
            let e = &data[idx];
            let r = response_of(e, idx).map_err(|e| ModelError::InvalidInput(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let neg = draw_negative(&responses, &r.text, &mut rng);
            let pos = builder.pair(&e.context, r);
            let neg = builder.pair(&e.context, &Utterance::new(r.role, neg.text.clone()));
            let rce = rce_graph(g, net, &pos, &neg)?;
            let mlm = mlm_graph(g, net, &pos, mask_rate, seed)?;
            let total = g.add(rce, mlm);
            Ok((total, rce, Some(mlm), 0))
        },
        |p| {
            if held.is_empty() {
                return Ok(None);
            }
            let losses = par::map(plan.exec, &held, |(pos, neg)| {
                evaluate(p, |g, net| rce_graph(g, net, pos, neg))
            });
            Ok(Some((mean(losses)?, None)))
        },
    )
}

/// A response from `pool` whose text differs from `text`.
fn draw_negative<'a>(pool: &[&'a Utterance], text: &str, rng: &mut ChaCha8Rng) -> &'a Utterance {
    loop {
        let cand = pool[rng.gen_range(0..pool.len())];
        if cand.text != text {
            return cand;
        }
    }
}

/// Discriminator input for a labeled topic pair.
pub fn topic_pair_sequence(builder: &InputBuilder, e: &TrainingExample) -> Option<crate::tokenizer::EncodedSequence> {
    let (last, ctx) = e.context.split_last()?;
    Some(builder.topic_pair(ctx, &last.text))
}

/// Binary topic discriminator trained with BCE.
pub fn train_discriminator(
    plan: &TrainPlan,
    config: &ModelConfig,
    vocab: &Vocab,
    data: &[TrainingExample],
    valid: &[TrainingExample],
) -> Result<(Parameters, LossTrace), TrainError> {
    plan.expect_stage(Stage::Discriminator)?;
    check_vocab(config, vocab)?;
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let builder = InputBuilder::new(vocab, config);
    let encode = |examples: &[TrainingExample]| -> Result<Vec<_>, TrainError> {
        examples
            .iter()
            .enumerate()
            .map(|(index, e)| {
                let label = e.label.ok_or_else(|| TrainError::BadExample {
                    index,
                    message: "missing label".into(),
                })?;
                let seq = topic_pair_sequence(&builder, e).ok_or_else(|| TrainError::BadExample {
                    index,
                    message: "empty pair".into(),
                })?;
                Ok((seq, label))
            })
            .collect()
    };
    let train = encode(data)?;
    if !train.iter().any(|(_, l)| *l) {
        return Err(TrainError::SingleClass("negative"));
    }
    if train.iter().all(|(_, l)| *l) {
        return Err(TrainError::SingleClass("positive"));
    }
    let held = encode(valid)?;
    let params = Parameters::init(NetworkKind::Discriminator, config)?;
    run(
        plan,
        params,
        train.len(),
        false,
        false,
        |g, net, idx, _| {
            let (seq, label) = &train[idx];
            let l = bce_graph(g, net, seq, *label)?;
            Ok((l, l, None, 0))
        },
        |p| {
            if held.is_empty() {
                return Ok(None);
            }
            let scored = par::map(plan.exec, &held, |(seq, label)| -> Result<(f64, bool), ModelError> {
                let mut g = Graph::new();
                let net = p.bind(&mut g);
                let loss = bce_graph(&mut g, &net, seq, *label)?;
                let logit = net.coherence_logit(&mut g, seq)?;
                Ok((g.scalar(loss), (g.scalar(logit) >= 0.0) == *label))
            });
            let mut loss = 0.0;
            let mut correct = 0;
            for s in scored {
                let (l, ok) = s?;
                loss += l;
                correct += ok as usize;
            }
            let n = held.len() as f64;
            Ok(Some((loss / n, Some(correct as f64 / n))))
        },
    )
}

/// Refuses a stage-2 init whose shape differs from the expected config.
pub fn check_init(init: &Parameters, expected: &ModelConfig) -> Result<(), TrainError> {
    check_compatible(&init.config, expected)?;
    Ok(())
}
