//! The chat engine: topic discrimination, the switch rule, diverse candidate
//! generation and coherence-based selection.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue_graph::{Role, Utterance};
use crate::model::checkpoint::{check_compatible, load_checkpoint, CheckpointError};
use crate::model::graph::{sigmoid, Graph};
use crate::model::inputs::InputBuilder;
use crate::model::{next_token_logits, LatentVariable, ModelError, NetworkKind, Parameters};
use crate::par::{self, Exec};
use crate::tokenizer::{EncodedSequence, TokenizerError, Vocab, EOS};

/// Threshold used when none is configured.
pub const DEFAULT_EPSILON: f64 = 0.61;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("epsilon {0} outside [0, 1]")]
    InvalidEpsilon(f64),
    #[error("K must be at least 1")]
    InvalidK,
    #[error("every candidate decoded to an empty response")]
    AllCandidatesEmpty,
    #[error("no candidates to select from")]
    NoCandidates,
    #[error("checkpoint lacks a vocabulary")]
    MissingVocab,
    #[error("incompatible models: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Running dialogue of one chat. The user speaks as role A, the bot as B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatContext {
    pub turns: Vec<Utterance>,
    /// Completed user turns.
    pub turn_counter: usize,
    /// One plus the number of switches so far.
    pub topic_segments: usize,
}

impl Default for ChatContext {
    fn default() -> Self {
        Self::new()
    }
}

impl ChatContext {
    pub fn new() -> Self {
        Self {
            turns: Vec::new(),
            turn_counter: 0,
            topic_segments: 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchDecision {
    pub beta: f64,
    pub epsilon: f64,
    pub switched: bool,
    /// Empty context: beta is reported but switching is suppressed.
    #[serde(default)]
    pub first_turn: bool,
}

impl SwitchDecision {
    /// The switch rule: switched iff `beta <= epsilon`, except on the first turn.
    pub fn is_consistent(&self) -> bool {
        if self.first_turn {
            !self.switched
        } else {
            self.switched == (self.beta <= self.epsilon)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResponse {
    pub z: LatentVariable,
    pub text: String,
    pub token_ids: Vec<u32>,
    /// Selector score; `None` until scored.
    pub coherence_score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub max_response_tokens: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            max_response_tokens: 24,
        }
    }
}

/// The three networks and their shared vocabulary.
#[derive(Debug, Clone)]
pub struct ChatModels {
    pub generator: Parameters,
    pub selector: Parameters,
    pub discriminator: Parameters,
    pub vocab: Vocab,
    pub decode: DecodeParams,
    pub exec: Exec,
}

impl ChatModels {
    pub fn new(
        generator: Parameters,
        selector: Parameters,
        discriminator: Parameters,
        vocab: Vocab,
    ) -> Result<Self, RuntimeError> {
        let expect = |p: &Parameters, k: NetworkKind| {
            if p.kind == k {
                Ok(())
            } else {
                Err(RuntimeError::Incompatible(format!("expected {k:?}, got {:?}", p.kind)))
            }
        };
        expect(&generator, NetworkKind::Generator)?;
        expect(&selector, NetworkKind::Selector)?;
        expect(&discriminator, NetworkKind::Discriminator)?;
        check_compatible(&generator.config, &selector.config)?;
        for p in [&generator, &selector, &discriminator] {
            if p.config.vocab_size != vocab.len() {
                return Err(RuntimeError::Incompatible(format!(
                    "{:?} has vocab_size {}, vocabulary has {}",
                    p.kind,
                    p.config.vocab_size,
                    vocab.len()
                )));
            }
        }
        if vocab.latent_count() != generator.config.latent_count {
            return Err(RuntimeError::Incompatible(
                "latent count differs from vocabulary".into(),
            ));
        }
        Ok(Self {
            generator,
            selector,
            discriminator,
            vocab,
            decode: DecodeParams::default(),
            exec: Exec::default(),
        })
    }

    /// Loads three checkpoints; the vocabulary comes from the generator's.
    pub fn load(gen: impl AsRef<Path>, sel: impl AsRef<Path>, disc: impl AsRef<Path>) -> Result<Self, RuntimeError> {
        let g = load_checkpoint(gen)?.expect_kind(NetworkKind::Generator)?;
        let s = load_checkpoint(sel)?.expect_kind(NetworkKind::Selector)?;
        let d = load_checkpoint(disc)?.expect_kind(NetworkKind::Discriminator)?;
        let vocab = g.vocab.ok_or(RuntimeError::MissingVocab)?;
        Self::new(g.params, s.params, d.params, vocab)
    }

    pub fn latent_count(&self) -> usize {
        self.generator.config.latent_count
    }
}

fn coherence(p: &Parameters, seq: &EncodedSequence) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let net = p.bind(&mut g);
    let logit = net.coherence_logit(&mut g, seq)?;
    Ok(sigmoid(g.scalar(logit)))
}

/// Probability that `user_input` continues the topic of `context`.
pub fn discriminator_score(
    d: &Parameters,
    vocab: &Vocab,
    context: &ChatContext,
    user_input: &str,
) -> Result<f64, RuntimeError> {
    let builder = InputBuilder::new(vocab, &d.config);
    let seq = builder.topic_pair(&context.turns, user_input);
    Ok(coherence(d, &seq)?)
}

/// The switch rule. With `beta <= epsilon` the context restarts from the
/// user input alone; otherwise the input is appended. An empty context never
/// switches.
pub fn topic_switch_step(
    ctx: &ChatContext,
    user_input: &str,
    beta: f64,
    epsilon: f64,
) -> (ChatContext, SwitchDecision) {
    let first_turn = ctx.is_empty();
    let switched = !first_turn && beta <= epsilon;
    let mut next = ctx.clone();
    let input = Utterance::new(Role::A, user_input);
    if switched {
        next.turns = vec![input];
        next.topic_segments += 1;
    } else {
        next.turns.push(input);
    }
    next.turn_counter += 1;
    (
        next,
        SwitchDecision {
            beta,
            epsilon,
            switched,
            first_turn,
        },
    )
}

/// Encoded generator context for `turns`, as the decoder sees it.
pub fn generator_context(models: &ChatModels, turns: &[Utterance]) -> EncodedSequence {
    let builder = InputBuilder::new(&models.vocab, &models.generator.config);
    builder.generation_context(turns, models.decode.max_response_tokens + 1)
}

fn greedy_decode(
    g: &Parameters,
    vocab: &Vocab,
    ctx: &EncodedSequence,
    z: LatentVariable,
    decode: &DecodeParams,
) -> Result<Vec<u32>, ModelError> {
    let max_new = decode
        .max_response_tokens
        .min(g.config.max_len().saturating_sub(ctx.len() + 1));
    let mut out = Vec::new();
    let mut prefix = EncodedSequence::default();
    while out.len() < max_new {
        let logits = next_token_logits(g, ctx, &prefix, Some(z))?;
        let mut best = EOS as usize;
        for (id, &v) in logits.iter().enumerate() {
            if vocab.is_special(id as u32) && id as u32 != EOS {
                continue;
            }
            if v > logits[best] {
                best = id;
            }
        }
        if best as u32 == EOS {
            break;
        }
        out.push(best as u32);
        prefix = InputBuilder::response_segment(ctx, &out, Role::B);
    }
    Ok(out)
}

/// One greedy candidate per latent value `0..k`; empty decodes are dropped.
pub fn generate_diverse(
    g: &Parameters,
    vocab: &Vocab,
    ctx_input: &[Utterance],
    k: usize,
    decode: &DecodeParams,
    exec: Exec,
) -> Result<Vec<CandidateResponse>, RuntimeError> {
    if k == 0 {
        return Err(RuntimeError::InvalidK);
    }
    if k > g.config.latent_count {
        return Err(ModelError::LatentOutOfRange {
            z: k - 1,
            k: g.config.latent_count,
        }
        .into());
    }
    let builder = InputBuilder::new(vocab, &g.config);
    let ctx = builder.generation_context(ctx_input, decode.max_response_tokens + 1);
    let decoded = par::map_range(exec, k, |z| greedy_decode(g, vocab, &ctx, LatentVariable(z), decode));
    let mut out = Vec::with_capacity(k);
    for (z, ids) in decoded.into_iter().enumerate() {
        let ids = ids?;
        let text = vocab.decode(&ids)?;
        if text.trim().is_empty() {
            continue;
        }
        out.push(CandidateResponse {
            z: LatentVariable(z),
            text,
            token_ids: ids,
            coherence_score: None,
        });
    }
    if out.is_empty() {
        return Err(RuntimeError::AllCandidatesEmpty);
    }
    Ok(out)
}

/// Index of the highest-scoring candidate; ties go to the lowest `z`.
/// Unscored or NaN-scored candidates rank below every scored one.
pub fn best_candidate(candidates: &[CandidateResponse]) -> Option<usize> {
    let key = |c: &CandidateResponse| c.coherence_score.filter(|s| !s.is_nan()).unwrap_or(f64::NEG_INFINITY);
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let (kb, kc) = (key(&candidates[b]), key(c));
                if kc > kb || (kc == kb && c.z < candidates[b].z) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Scores every candidate with the selector.
pub fn score_candidates(
    s: &Parameters,
    vocab: &Vocab,
    ctx_input: &[Utterance],
    candidates: &mut [CandidateResponse],
    exec: Exec,
) -> Result<(), RuntimeError> {
    let builder = InputBuilder::new(vocab, &s.config);
    let scores = par::map(exec, candidates, |c| {
        let mut ids = c.token_ids.clone();
        ids.push(EOS);
        coherence(s, &builder.pair_ids(ctx_input, &ids, Role::B))
    });
    for (c, score) in candidates.iter_mut().zip(scores) {
        c.coherence_score = Some(score?);
    }
    Ok(())
}

/// Scores the candidates and returns the most coherent one.
pub fn select_response(
    s: &Parameters,
    vocab: &Vocab,
    ctx_input: &[Utterance],
    mut candidates: Vec<CandidateResponse>,
    exec: Exec,
) -> Result<CandidateResponse, RuntimeError> {
    if candidates.is_empty() {
        return Err(RuntimeError::NoCandidates);
    }
    score_candidates(s, vocab, ctx_input, &mut candidates, exec)?;
    let i = best_candidate(&candidates).ok_or(RuntimeError::NoCandidates)?;
    Ok(candidates.swap_remove(i))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurnOptions {
    pub epsilon: f64,
    pub k: usize,
    /// When false the switch rule is bypassed and input is always appended.
    pub switch_enabled: bool,
}

impl TurnOptions {
    pub fn new(epsilon: f64, k: usize) -> Self {
        Self {
            epsilon,
            k,
            switch_enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub response: String,
    /// `None` when switching is disabled.
    pub decision: Option<SwitchDecision>,
    /// All scored candidates, in `z` order.
    pub candidates: Vec<CandidateResponse>,
    pub selected_z: LatentVariable,
    /// Token ids the generator was conditioned on.
    pub generator_input: Vec<u32>,
    pub context: ChatContext,
}

/// One full turn: score, switch, generate, select, append the response.
pub fn chat_turn(
    models: &ChatModels,
    ctx: &ChatContext,
    user_input: &str,
    opts: TurnOptions,
) -> Result<TurnOutcome, RuntimeError> {
    if !(0.0..=1.0).contains(&opts.epsilon) {
        return Err(RuntimeError::InvalidEpsilon(opts.epsilon));
    }
    if opts.k == 0 {
        return Err(RuntimeError::InvalidK);
    }
    let (mut next, decision) = if opts.switch_enabled {
        let beta = discriminator_score(&models.discriminator, &models.vocab, ctx, user_input)?;
        let (next, d) = topic_switch_step(ctx, user_input, beta, opts.epsilon);
        (next, Some(d))
    } else {
        let mut next = ctx.clone();
        next.turns.push(Utterance::new(Role::A, user_input));
        next.turn_counter += 1;
        (next, None)
    };
    let generator_input = generator_context(models, &next.turns).token_ids;
    let mut candidates = generate_diverse(
        &models.generator,
        &models.vocab,
        &next.turns,
        opts.k,
        &models.decode,
        models.exec,
    )?;
    score_candidates(
        &models.selector,
        &models.vocab,
        &next.turns,
        &mut candidates,
        models.exec,
    )?;
    let best = best_candidate(&candidates).ok_or(RuntimeError::NoCandidates)?;
    let chosen = candidates[best].clone();
    next.turns.push(Utterance::new(Role::B, chosen.text.clone()));
    Ok(TurnOutcome {
        response: chosen.text,
        decision,
        candidates,
        selected_z: chosen.z,
        generator_input,
        context: next,
    })
}
