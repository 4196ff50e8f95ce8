//! Threshold calibration for the topic discriminator.
//!
//! A pair counts as predicted same-topic when its score is at or above the
//! threshold. Candidate thresholds are the distinct observed scores; the
//! chosen epsilon is the midpoint of the interval that reproduces the best-F1
//! candidate's confusion matrix.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue_graph::TrainingExample;
use crate::model::{ModelError, Parameters};
use crate::par::{self, Exec};
use crate::runtime::{discriminator_score, ChatContext, RuntimeError};
use crate::tokenizer::Vocab;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration needs both classes; only {0} labels present")]
    SingleClass(&'static str),
    #[error("{scores} scores for {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("pair {0} has no label or no utterances")]
    BadPair(usize),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Ascending by threshold.
    pub curve: Vec<CurvePoint>,
    pub epsilon: f64,
    pub best: CurvePoint,
}

impl Calibration {
    /// `threshold,precision,recall,f1`.
    pub fn write_csv(&self, w: impl Write) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        for p in &self.curve {
            out.serialize(p)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), csv::Error> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Sweeps every distinct score as a threshold.
pub fn calibrate_scores(scores: &[f64], labels: &[bool]) -> Result<Calibration, CalibrationError> {
    if scores.len() != labels.len() {
        return Err(CalibrationError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(CalibrationError::SingleClass("negative"));
    }
    if positives == labels.len() {
        return Err(CalibrationError::SingleClass("positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // walk thresholds upward; everything from the cursor on is predicted positive
    let mut tp = positives;
    let mut fp = labels.len() - positives;
    let mut curve = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / positives as f64;
        let f1 = if tp == 0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        curve.push(CurvePoint {
            threshold: t,
            precision,
            recall,
            f1,
        });
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
    }
    let mut best_i = 0;
    for (j, p) in curve.iter().enumerate() {
        if p.f1 > curve[best_i].f1 {
            best_i = j;
        }
    }
    let lower = if best_i == 0 { 0.0 } else { curve[best_i - 1].threshold };
    let best = curve[best_i];
    Ok(Calibration {
        epsilon: (lower + best.threshold) / 2.0,
        best,
        curve,
    })
}

/// Discriminator scores for labeled topic pairs: every utterance but the
/// last is the context, the last is the user input.
pub fn score_pairs(
    d: &Parameters,
    vocab: &Vocab,
    pairs: &[TrainingExample],
    exec: Exec,
) -> Result<(Vec<f64>, Vec<bool>), CalibrationError> {
    let labels = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.label
                .filter(|_| !p.context.is_empty())
                .ok_or(CalibrationError::BadPair(i))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let scores = par::map(exec, pairs, |p| {
        let (last, ctx) = p.context.split_last().expect("checked non-empty");
        let context = ChatContext {
            turns: ctx.to_vec(),
            ..ChatContext::new()
        };
        discriminator_score(d, vocab, &context, &last.text)
    });
    let scores = scores.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok((scores, labels))
}

pub fn calibrate_threshold(
    d: &Parameters,
    vocab: &Vocab,
    pairs: &[TrainingExample],
    exec: Exec,
) -> Result<Calibration, CalibrationError> {
    let (scores, labels) = score_pairs(d, vocab, pairs, exec)?;
    calibrate_scores(&scores, &labels)
}
