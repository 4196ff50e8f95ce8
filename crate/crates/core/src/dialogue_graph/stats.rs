use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{extract_one_to_many, DialogueGraph};
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenSummary {
    pub min: usize,
    pub max: usize,
    pub avg: f64,
}

impl TokenSummary {
    fn of(values: &[usize]) -> Self {
        if values.is_empty() {
            return Self {
                min: 0,
                max: 0,
                avg: 0.0,
            };
        }
        Self {
            min: *values.iter().min().unwrap(),
            max: *values.iter().max().unwrap(),
            avg: values.iter().sum::<usize>() as f64 / values.len() as f64,
        }
    }
}

/// Corpus statistics; a dialogue is one root-to-leaf path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub total_dialogues: usize,
    pub total_utterances: usize,
    /// Longest dialogue, in turns (edges).
    pub turns: usize,
    pub avg_turns: f64,
    pub tokens_per_utterance: TokenSummary,
    pub tokens_per_dialogue: TokenSummary,
    pub dialogues_per_topic: BTreeMap<u32, usize>,
    pub dialogues_per_topic_mean: f64,
    /// Population variance.
    pub dialogues_per_topic_variance: f64,
}

pub fn graph_stats(g: &DialogueGraph, vocab: &Vocab) -> GraphStats {
    let paths = extract_one_to_many(g);
    let utter_tokens: Vec<usize> = g.nodes().iter().map(|n| vocab.encode_text(&n.text).len()).collect();
    let dialogue_tokens: Vec<usize> = paths
        .iter()
        .map(|p| {
            p.context
                .iter()
                .chain(p.response.iter())
                .map(|u| vocab.encode_text(&u.text).len())
                .sum()
        })
        .collect();
    let turn_counts: Vec<usize> = paths.iter().map(|p| p.context.len()).collect();
    let mut per_topic: BTreeMap<u32, usize> = g.topics().into_iter().map(|t| (t, 0)).collect();
    for p in &paths {
        *per_topic.entry(p.topic_ids[0]).or_default() += 1;
    }
    let k = per_topic.len().max(1) as f64;
    let mean = per_topic.values().sum::<usize>() as f64 / k;
    let variance = per_topic.values().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / k;
    GraphStats {
        total_dialogues: paths.len(),
        total_utterances: g.nodes().len(),
        turns: turn_counts.iter().copied().max().unwrap_or(0),
        avg_turns: if paths.is_empty() {
            0.0
        } else {
            turn_counts.iter().sum::<usize>() as f64 / paths.len() as f64
        },
        tokens_per_utterance: TokenSummary::of(&utter_tokens),
        tokens_per_dialogue: TokenSummary::of(&dialogue_tokens),
        dialogues_per_topic: per_topic,
        dialogues_per_topic_mean: mean,
        dialogues_per_topic_variance: variance,
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::chain;
    use super::*;

    #[test]
    fn single_eight_turn_path() {
        let g = DialogueGraph::from_nodes(chain(0, 8), 8).unwrap();
        let s = graph_stats(&g, &Vocab::bytes_only(0));
        assert_eq!(s.total_dialogues, 1);
        assert_eq!(s.turns, 8);
        assert_eq!(s.total_utterances, 9);
        assert_eq!(s.dialogues_per_topic_variance, 0.0);
    }
}
