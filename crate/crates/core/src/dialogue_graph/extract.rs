use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DialogueGraph, ExampleKind, GraphError, TrainingExample};

/// Key of the first leaf reached by always descending into the first child.
fn leftmost_leaf(g: &DialogueGraph, mut idx: usize) -> String {
    while let Some(&c) = g.children_of(idx).first() {
        idx = c;
    }
    g.nodes()[idx].key.to_string()
}

/// One example per edge, emitted level by level: by child depth, then
/// candidate index, then topic.
pub fn extract_one_to_one(g: &DialogueGraph) -> Vec<TrainingExample> {
    let mut edges: Vec<(usize, usize)> = (0..g.nodes().len())
        .filter_map(|c| g.parent_index(c).map(|p| (p, c)))
        .collect();
    edges.sort_by_key(|&(p, c)| {
        let k = g.nodes()[c].key;
        (k.depth, k.candidate, k.topic, g.nodes()[p].key)
    });
    edges
        .into_iter()
        .map(|(p, c)| {
            let (pn, cn) = (&g.nodes()[p], &g.nodes()[c]);
            TrainingExample {
                kind: ExampleKind::OneToOne,
                context: vec![pn.utterance()],
                response: Some(cn.utterance()),
                label: None,
                topic_ids: vec![cn.key.topic],
                group: leftmost_leaf(g, c),
            }
        })
        .collect()
}

/// One example per root-to-leaf path, depth first. The final utterance is the
/// response and everything before it the context. A root with no children
/// forms no example.
pub fn extract_one_to_many(g: &DialogueGraph) -> Vec<TrainingExample> {
    let mut out = Vec::new();
    for root in g.roots() {
        let mut stack = vec![(root, vec![root])];
        while let Some((idx, path)) = stack.pop() {
            let kids = g.children_of(idx);
            if kids.is_empty() {
                if path.len() >= 2 {
                    let nodes = g.nodes();
                    let (last, ctx) = path.split_last().unwrap();
                    out.push(TrainingExample {
                        kind: ExampleKind::OneToMany,
                        context: ctx.iter().map(|&i| nodes[i].utterance()).collect(),
                        response: Some(nodes[*last].utterance()),
                        label: None,
                        topic_ids: vec![nodes[*last].key.topic],
                        group: nodes[*last].key.to_string(),
                    });
                }
                continue;
            }
            // reversed so the first child is explored first
            for &c in kids.iter().rev() {
                let mut p = path.clone();
                p.push(c);
                stack.push((c, p));
            }
        }
    }
    out
}

/// Every prefix of each example's dialogue: turn `i` answers turns `..i`,
/// for each `i >= 1`. Prefixes shared by several paths appear once, at their
/// first occurrence. Expanded examples keep the group of their source.
pub fn path_prefixes(examples: &[TrainingExample]) -> Vec<TrainingExample> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for e in examples {
        let Some(r) = &e.response else { continue };
        let turns: Vec<_> = e.context.iter().chain(std::iter::once(r)).collect();
        for i in 1..turns.len() {
            let key: Vec<&str> = turns[..=i].iter().map(|u| u.text.as_str()).collect();
            if !seen.insert(key) {
                continue;
            }
            out.push(TrainingExample {
                kind: e.kind,
                context: turns[..i].iter().map(|&u| u.clone()).collect(),
                response: Some(turns[i].clone()),
                label: None,
                topic_ids: e.topic_ids.clone(),
                group: e.group.clone(),
            });
        }
    }
    out
}

/// Labeled utterance pairs for the topic discriminator.
///
/// Positives are the parent/child turns of every edge. Negatives pair a
/// random utterance with a random utterance of a different topic;
/// their count is `round(negative_ratio * positives)`.
pub fn extract_discriminator_pairs(
    g: &DialogueGraph,
    negative_ratio: f64,
    seed: u64,
) -> Result<Vec<TrainingExample>, GraphError> {
    let topics = g.topics();
    if topics.len() < 2 {
        return Err(GraphError::TooFewTopics(topics.len()));
    }
    let mut out: Vec<TrainingExample> = extract_one_to_one(g)
        .into_iter()
        .map(|e| {
            let topic = e.topic_ids[0];
            TrainingExample {
                kind: ExampleKind::TopicPair,
                context: vec![e.context[0].clone(), e.response.clone().unwrap()],
                response: None,
                label: Some(true),
                topic_ids: vec![topic, topic],
                group: e.group,
            }
        })
        .collect();
    let by_topic: Vec<Vec<usize>> = topics
        .iter()
        .map(|&t| (0..g.nodes().len()).filter(|&i| g.nodes()[i].key.topic == t).collect())
        .collect();
    let negatives = (negative_ratio * out.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for n in 0..negatives {
        let ta = rng.gen_range(0..topics.len());
        let mut tb = rng.gen_range(0..topics.len() - 1);
        if tb >= ta {
            tb += 1;
        }
        let a = *by_topic[ta].choose(&mut rng).unwrap();
        let b = *by_topic[tb].choose(&mut rng).unwrap();
        let (na, nb) = (&g.nodes()[a], &g.nodes()[b]);
        out.push(TrainingExample {
            kind: ExampleKind::TopicPair,
            context: vec![na.utterance(), nb.utterance()],
            response: None,
            label: Some(false),
            topic_ids: vec![na.key.topic, nb.key.topic],
            group: format!("neg-{n}"),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::tests::{chain, node};
    use super::super::{DialogueGraph, NodeKey, Role};
    use super::*;

    fn star() -> DialogueGraph {
        let mut nodes = vec![node(0, 0, 0, None, Role::A, "What is your favorite food?")];
        for j in 0..4 {
            if j == 2 {
                continue;
            }
            nodes.push(node(0, 1, j, Some((0, 0, 0)), Role::B, &format!("answer {j}")));
        }
        DialogueGraph::from_nodes(nodes, 8).unwrap()
    }

    #[test]
    fn star_gives_one_pair_per_edge() {
        let pairs = extract_one_to_one(&star());
        assert_eq!(pairs.len(), 3);
        // n(0,0,0) -> n(0,1,0) and n(0,0,0) -> n(0,1,3) both present
        let texts: Vec<&str> = pairs
            .iter()
            .map(|p| p.response.as_ref().unwrap().text.as_str())
            .collect();
        assert!(texts.contains(&"answer 0") && texts.contains(&"answer 3"));
        assert!(pairs.iter().all(|p| p.context[0].text == "What is your favorite food?"));
    }

    #[test]
    fn bfs_order_is_depth_then_candidate_then_topic() {
        let mut nodes = chain(0, 2);
        nodes.extend(chain(1, 2));
        nodes.push(node(0, 1, 1, Some((0, 0, 0)), Role::B, "alt"));
        let g = DialogueGraph::from_nodes(nodes, 8).unwrap();
        let order: Vec<(u32, u32, u32)> = extract_one_to_one(&g)
            .iter()
            .map(|e| {
                let text = &e.response.as_ref().unwrap().text;
                let n = g.nodes().iter().find(|n| &n.text == text).unwrap();
                (n.key.depth, n.key.candidate, n.key.topic)
            })
            .collect();
        assert_eq!(order, vec![(1, 0, 0), (1, 0, 1), (1, 1, 0), (2, 0, 0), (2, 0, 1)]);
    }

    #[test]
    fn eight_turn_chain_is_one_nine_utterance_path() {
        let g = DialogueGraph::from_nodes(chain(0, 8), 8).unwrap();
        let paths = extract_one_to_many(&g);
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].context.len() + 1, 9);
    }

    #[test]
    fn branching_path_is_emitted_in_full() {
        // 0-0-0 -> 0-1-0 -> 0-2-1 -> 0-3-1 -> 0-4-1 -> 0-5-0 -> 0-6-0 -> 0-7-0 -> 0-8-2
        let cands = [0, 0, 1, 1, 1, 0, 0, 0, 2];
        let mut nodes = Vec::new();
        for (i, &j) in cands.iter().enumerate() {
            let parent = (i > 0).then(|| (0, i as u32 - 1, cands[i - 1]));
            let role = if i % 2 == 0 { Role::A } else { Role::B };
            nodes.push(node(0, i as u32, j, parent, role, &format!("u{i}")));
        }
        // a sibling branch off the root
        nodes.push(node(0, 1, 3, Some((0, 0, 0)), Role::B, "other"));
        let g = DialogueGraph::from_nodes(nodes, 8).unwrap();
        let paths = extract_one_to_many(&g);
        assert_eq!(paths.len(), 2);
        let full = paths.iter().find(|p| p.context.len() == 8).unwrap();
        let texts: Vec<&str> = full.context.iter().map(|u| u.text.as_str()).collect();
        assert_eq!(texts, vec!["u0", "u1", "u2", "u3", "u4", "u5", "u6", "u7"]);
        assert_eq!(full.response.as_ref().unwrap().text, "u8");
        assert_eq!(
            full.group,
            NodeKey {
                topic: 0,
                depth: 8,
                candidate: 2
            }
            .to_string()
        );
    }

    fn two_topics() -> DialogueGraph {
        let mut nodes = chain(0, 1);
        nodes.extend(chain(1, 1));
        DialogueGraph::from_nodes(nodes, 8).unwrap()
    }

    #[test]
    fn balanced_pairs_for_two_single_edge_topics() {
        let pairs = extract_discriminator_pairs(&two_topics(), 1.0, 7).unwrap();
        assert_eq!(pairs.iter().filter(|p| p.label == Some(true)).count(), 2);
        assert_eq!(pairs.iter().filter(|p| p.label == Some(false)).count(), 2);
    }

    #[test]
    fn pairs_are_deterministic_under_seed() {
        let a = serde_json::to_string(&extract_discriminator_pairs(&two_topics(), 1.5, 11).unwrap()).unwrap();
        let b = serde_json::to_string(&extract_discriminator_pairs(&two_topics(), 1.5, 11).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_topic_cannot_form_negatives() {
        let g = DialogueGraph::from_nodes(chain(0, 3), 8).unwrap();
        assert!(matches!(
            extract_discriminator_pairs(&g, 1.0, 0),
            Err(GraphError::TooFewTopics(1))
        ));
    }
}
