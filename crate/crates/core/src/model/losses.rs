//! The five training objectives, as plain functions on probabilities and as
//! graph builders for training.
//!
//! Probabilities are clamped to `PROB_FLOOR` before every log. The softmax
//! objectives (NLL, BOW, MLM) use `log_softmax` in the graph, which agrees
//! with the clamped form whenever the target probability is above the floor.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::inputs::GeneratorExample;
use super::network::{generator_sequence, LatentInjection, Net};
use super::{evaluate, LatentVariable, ModelError, NetworkKind, Parameters};
use crate::tokenizer::{EncodedSequence, BOS, FIRST_LATENT, MASK};

pub const PROB_FLOOR: f64 = 1e-7;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Mean binary cross entropy.
pub fn bce_loss(predicted: &[f64], labels: &[bool]) -> Result<f64, ModelError> {
    if predicted.is_empty() {
        return Err(ModelError::InvalidInput("bce_loss on empty input".into()));
    }
    if predicted.len() != labels.len() {
        return Err(ModelError::InvalidInput(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let total: f64 = predicted
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / predicted.len() as f64)
}

/// `-Σ log p_i(target_i)` over the rows of one sequence.
pub fn nll_loss(distributions: &[Vec<f64>], target_ids: &[u32]) -> Result<f64, ModelError> {
    if distributions.len() != target_ids.len() {
        return Err(ModelError::InvalidInput(format!(
            "{} rows for {} targets",
            distributions.len(),
            target_ids.len()
        )));
    }
    let mut total = 0.0;
    for (row, &t) in distributions.iter().zip(target_ids) {
        let p = *row.get(t as usize).ok_or(ModelError::IdOutOfRange {
            field: "target",
            id: t,
            size: row.len(),
        })?;
        total -= p.max(PROB_FLOOR).ln();
    }
    Ok(total)
}

/// Positions masked for a sequence of length `len`: `ceil(rate * len)` of
/// them (at least one), chosen by `seed`, ascending.
pub fn mask_positions(len: usize, mask_rate: f64, seed: u64) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let n = ((mask_rate * len as f64).ceil() as usize).clamp(1, len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, len, n).into_vec();
    picked.sort_unstable();
    picked
}

fn check_ids(net: &Net, ids: &[u32]) -> Result<(), ModelError> {
    let size = net.params().config.vocab_size;
    match ids.iter().find(|&&t| t as usize >= size) {
        Some(&id) => Err(ModelError::IdOutOfRange {
            field: "target",
            id,
            size,
        }),
        None => Ok(()),
    }
}

fn neg_sum_picked(g: &mut Graph, log_probs: Var, cols: &[u32]) -> Var {
    let cols: Vec<usize> = cols.iter().map(|&c| c as usize).collect();
    let picked = g.pick(log_probs, &cols);
    let s = g.sum(picked);
    g.affine(s, -1.0, 0.0)
}

/// NLL of the example's targets from already computed generator hidden states.
pub fn nll_from_hidden(g: &mut Graph, net: &Net, hidden: Var, ex: &GeneratorExample) -> Result<Var, ModelError> {
    check_ids(net, &ex.targets)?;
    let rows = g.select_rows(hidden, &ex.target_rows());
    let logits = net.head(g, rows, "lm_head")?;
    let lp = g.log_softmax(logits);
    Ok(neg_sum_picked(g, lp, &ex.targets))
}

/// Bag-of-words loss: the hidden state at `summary_row` predicts every
/// response token independently of position.
pub fn bow_from_hidden(
    g: &mut Graph,
    net: &Net,
    hidden: Var,
    summary_row: usize,
    response_ids: &[u32],
) -> Result<Var, ModelError> {
    if response_ids.is_empty() {
        return Err(ModelError::InvalidInput("bow_loss needs a non-empty response".into()));
    }
    check_ids(net, response_ids)?;
    // sorted so the float sum is exactly order independent
    let mut ids = response_ids.to_vec();
    ids.sort_unstable();
    let summary = g.select_rows(hidden, &[summary_row]);
    let logits = net.head(g, summary, "bow_head")?;
    let lp = g.log_softmax(logits);
    let rep = g.select_rows(lp, &vec![0; ids.len()]);
    Ok(neg_sum_picked(g, rep, &ids))
}

/// Generator NLL for one example.
pub fn nll_graph(g: &mut Graph, net: &Net, ex: &GeneratorExample, latent: LatentInjection) -> Result<Var, ModelError> {
    let h = net.generator_hidden(g, &ex.sequence, latent)?;
    nll_from_hidden(g, net, h, ex)
}

/// `-log p(label)` for an encoder sequence under the coherence head.
pub fn bce_graph(g: &mut Graph, net: &Net, seq: &EncodedSequence, label: bool) -> Result<Var, ModelError> {
    let logit = net.coherence_logit(g, seq)?;
    let p = g.sigmoid(logit);
    let q = if label { p } else { g.affine(p, -1.0, 1.0) };
    let l = g.log_clamped(q, PROB_FLOOR);
    Ok(g.affine(l, -1.0, 0.0))
}

/// `-log p(1|C,R) - log p(0|C,R̂)` over two encoder sequences.
pub fn rce_graph(
    g: &mut Graph,
    net: &Net,
    positive: &EncodedSequence,
    negative: &EncodedSequence,
) -> Result<Var, ModelError> {
    let a = bce_graph(g, net, positive, true)?;
    let b = bce_graph(g, net, negative, false)?;
    Ok(g.add(a, b))
}

/// Masked-LM loss over `seq` with the masked set from [`mask_positions`].
pub fn mlm_graph(
    g: &mut Graph,
    net: &Net,
    seq: &EncodedSequence,
    mask_rate: f64,
    seed: u64,
) -> Result<Var, ModelError> {
    if seq.is_empty() {
        return Err(ModelError::InvalidInput("mlm_loss needs a non-empty sequence".into()));
    }
    let masked = mask_positions(seq.len(), mask_rate, seed);
    let mut corrupted = seq.clone();
    let targets: Vec<u32> = masked.iter().map(|&i| seq.token_ids[i]).collect();
    for &i in &masked {
        corrupted.token_ids[i] = MASK;
    }
    check_ids(net, &targets)?;
    let h = net.encoder_hidden(g, &corrupted)?;
    let rows = g.select_rows(h, &masked);
    let logits = net.head(g, rows, "mlm_head")?;
    let lp = g.log_softmax(logits);
    Ok(neg_sum_picked(g, lp, &targets))
}

/// Encoder input `<bos> ‖ context ‖ response`.
pub fn pair_sequence(context: &EncodedSequence, response: &EncodedSequence) -> EncodedSequence {
    let role = context
        .role_ids
        .first()
        .or(response.role_ids.first())
        .copied()
        .unwrap_or(0);
    let mut seq = EncodedSequence::default();
    seq.push(BOS, role, 0);
    seq.concat(context).concat(response)
}

fn expect(p: &Parameters, kind: NetworkKind) -> Result<(), ModelError> {
    if p.kind == kind {
        Ok(())
    } else {
        Err(ModelError::InvalidInput(format!(
            "expected a {kind:?} network, got {:?}",
            p.kind
        )))
    }
}

/// Bag-of-words loss of `response_ids` given `z ‖ context`.
pub fn bow_loss(
    p: &Parameters,
    context: &EncodedSequence,
    z: LatentVariable,
    response_ids: &[u32],
) -> Result<f64, ModelError> {
    expect(p, NetworkKind::Generator)?;
    let z = LatentVariable::new(z.0, p.config.latent_count)?;
    let seq = generator_sequence(context, &EncodedSequence::default(), FIRST_LATENT + z.0 as u32);
    evaluate(p, |g, net| {
        let h = net.generator_hidden(g, &seq, LatentInjection::Fixed(z))?;
        bow_from_hidden(g, net, h, seq.len() - 1, response_ids)
    })
}

/// Response coherence loss for one positive and one negative response.
pub fn rce_loss(
    p: &Parameters,
    context: &EncodedSequence,
    positive_response: &EncodedSequence,
    negative_response: &EncodedSequence,
) -> Result<f64, ModelError> {
    let pos = pair_sequence(context, positive_response);
    let neg = pair_sequence(context, negative_response);
    evaluate(p, |g, net| rce_graph(g, net, &pos, &neg))
}

/// Masked-LM loss of `sequence` under the selector's MLM head.
pub fn mlm_loss(p: &Parameters, sequence: &EncodedSequence, mask_rate: f64, seed: u64) -> Result<f64, ModelError> {
    expect(p, NetworkKind::Selector)?;
    evaluate(p, |g, net| mlm_graph(g, net, sequence, mask_rate, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn bce_analytic_points() {
        assert!((bce_loss(&[0.5], &[true]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(bce_loss(&[1.0 - 1e-9], &[true]).unwrap() < 1e-6);
        assert!(bce_loss(&[], &[]).is_err());
        assert!(bce_loss(&[0.0], &[true]).unwrap().is_finite());
    }

    #[test]
    fn nll_analytic_points() {
        assert!((nll_loss(&[vec![0.25; 4]], &[2]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(nll_loss(&[vec![0.0, 1.0]], &[1]).unwrap(), 0.0);
        assert!(matches!(
            nll_loss(&[vec![0.5, 0.5]], &[2]),
            Err(ModelError::IdOutOfRange { .. })
        ));
    }

    #[test]
    fn mask_positions_count_and_determinism() {
        assert_eq!(mask_positions(10, 0.15, 3).len(), 2);
        assert_eq!(mask_positions(3, 0.01, 3).len(), 1);
        assert_eq!(mask_positions(20, 0.15, 9), mask_positions(20, 0.15, 9));
        assert!(mask_positions(20, 0.15, 9).windows(2).all(|w| w[0] < w[1]));
    }

    fn seq(tokens: &[u32]) -> EncodedSequence {
        let mut s = EncodedSequence::default();
        for &t in tokens {
            s.push(t, 0, 0);
        }
        s
    }

    #[test]
    fn untrained_scorer_gives_two_ln2() {
        let p = Parameters::init(NetworkKind::Selector, &ModelConfig::tiny(40, 3)).unwrap();
        let l = rce_loss(&p, &seq(&[9, 2]), &seq(&[10, 2]), &seq(&[11, 2])).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn bow_ignores_response_order() {
        let p = Parameters::init(NetworkKind::Generator, &ModelConfig::tiny(40, 3)).unwrap();
        let ctx = seq(&[9, 10, 2]);
        let a = bow_loss(&p, &ctx, LatentVariable(1), &[12, 13, 2]).unwrap();
        let b = bow_loss(&p, &ctx, LatentVariable(1), &[2, 13, 12]).unwrap();
        assert_eq!(a, b);
        assert!(bow_loss(&p, &ctx, LatentVariable(1), &[]).is_err());
    }
}
