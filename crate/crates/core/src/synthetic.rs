//! Synthetic dialogue graphs whose topics use disjoint vocabularies.
//!
//! Topic 0 words are spelled with the letters `a`-`l` only and topic 1 words
//! with `m`-`z`, so after byte-level BPE the two topics share no piece except
//! those containing the space byte.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dialogue_graph::{DialogueGraph, DialogueNode, GraphError, NodeKey, Role, DEFAULT_MAX_DEPTH};

pub const TOPIC_WORDS: [&[&str]; 2] = [
    &[
        "cake", "bagel", "fig", "kale", "deli", "chef", "cafe", "beef", "egg", "bake", "dill", "leaf", "feed", "ache",
        "bike", "hike",
    ],
    &[
        "sport", "run", "turn", "motor", "storm", "trout", "rum", "sumo", "punt", "torso", "swoop", "moon", "worst",
        "zoom", "posts", "tutor",
    ],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Root-to-leaf paths per topic.
    pub dialogues_per_topic: usize,
    /// Depth of every path; a path has `depth + 1` utterances.
    pub depth: u32,
    pub min_words: usize,
    pub max_words: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dialogues_per_topic: 100,
            depth: 3,
            min_words: 2,
            max_words: 4,
            seed: 0,
        }
    }
}

/// Topic whose inventory contains every word of `text`, if exactly one does.
pub fn topic_of_text(text: &str) -> Option<u32> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return None;
    }
    let hits: Vec<u32> = (0..TOPIC_WORDS.len() as u32)
        .filter(|&t| words.iter().all(|w| TOPIC_WORDS[t as usize].contains(w)))
        .collect();
    (hits.len() == 1).then(|| hits[0])
}

/// A random utterance of topic `topic`.
pub fn utterance(topic: u32, rng: &mut impl Rng, min_words: usize, max_words: usize) -> String {
    let words = TOPIC_WORDS[topic as usize % TOPIC_WORDS.len()];
    let n = rng.gen_range(min_words..=max_words.max(min_words));
    (0..n)
        .map(|_| *words.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Two topic trees. Each root has `dialogues_per_topic` children and every
/// child continues as a chain down to `depth`.
pub fn synthetic_graph(spec: &SynthSpec) -> Result<DialogueGraph, GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut nodes = Vec::new();
    let role = |depth: u32| if depth.is_multiple_of(2) { Role::A } else { Role::B };
    for topic in 0..TOPIC_WORDS.len() as u32 {
        let root = NodeKey {
            topic,
            depth: 0,
            candidate: 0,
        };
        nodes.push(DialogueNode {
            key: root,
            parent: None,
            role: Role::A,
            text: utterance(topic, &mut rng, spec.min_words, spec.max_words),
        });
        for branch in 0..spec.dialogues_per_topic as u32 {
            let mut parent = root;
            for depth in 1..=spec.depth {
                let key = NodeKey {
                    topic,
                    depth,
                    candidate: branch,
                };
                nodes.push(DialogueNode {
                    key,
                    parent: Some(parent),
                    role: role(depth),
                    text: utterance(topic, &mut rng, spec.min_words, spec.max_words),
                });
                parent = key;
            }
        }
    }
    DialogueGraph::from_nodes(nodes, spec.depth.max(DEFAULT_MAX_DEPTH))
}
