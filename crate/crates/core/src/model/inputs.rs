//! Turning utterances into network inputs under the length and turn budgets.

use super::ModelConfig;
use crate::dialogue_graph::{Role, Utterance};
use crate::tokenizer::{EncodeOptions, EncodedSequence, Vocab, BOS, EOS};

/// A causal training row: `lead ‖ context ‖ response`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorExample {
    pub sequence: EncodedSequence,
    /// Response ids followed by `<eos>`.
    pub targets: Vec<u32>,
    /// Row predicting `targets[0]`; also the context summary row.
    pub first_target_row: usize,
}

impl GeneratorExample {
    pub fn target_rows(&self) -> Vec<usize> {
        (self.first_target_row..self.first_target_row + self.targets.len()).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InputBuilder<'a> {
    pub vocab: &'a Vocab,
    max_len: usize,
    max_context_turns: usize,
}

impl<'a> InputBuilder<'a> {
    pub fn new(vocab: &'a Vocab, config: &ModelConfig) -> Self {
        Self {
            vocab,
            max_len: config.max_len(),
            max_context_turns: config.turn_count.saturating_sub(1).max(1),
        }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Longest response (with its `<eos>`) kept in a training row.
    pub fn response_budget(&self) -> usize {
        (self.max_len / 2).max(1)
    }

    /// Newest context turns that fit in `budget` tokens, each closed by `<eos>`.
    pub fn context(&self, turns: &[Utterance], budget: usize) -> EncodedSequence {
        if budget == 0 || turns.is_empty() {
            return EncodedSequence::default();
        }
        self.vocab.encode_with(
            turns,
            EncodeOptions {
                eos_after_each: true,
                max_len: Some(budget),
                max_turns: Some(self.max_context_turns),
            },
        )
    }

    fn response_ids(&self, text: &str) -> Vec<u32> {
        let mut ids = self.vocab.encode_text(text);
        ids.truncate(self.response_budget() - 1);
        ids.push(EOS);
        ids
    }

    fn segment(ids: &[u32], role: Role, turn: u32) -> EncodedSequence {
        let mut s = EncodedSequence::default();
        for &t in ids {
            s.push(t, role.id(), turn);
        }
        s
    }

    fn next_turn(ctx: &EncodedSequence) -> u32 {
        ctx.turn_ids.last().map_or(0, |t| t + 1)
    }

    /// Response segment placed after `ctx`.
    pub fn response_segment(ctx: &EncodedSequence, ids: &[u32], role: Role) -> EncodedSequence {
        Self::segment(ids, role, Self::next_turn(ctx))
    }

    /// Context for generating a response, leaving room for the lead token and
    /// `response_budget` generated tokens.
    pub fn generation_context(&self, turns: &[Utterance], response_budget: usize) -> EncodedSequence {
        self.context(turns, self.max_len.saturating_sub(1 + response_budget))
    }

    pub fn generator_example(&self, context: &[Utterance], response: &Utterance, lead: u32) -> GeneratorExample {
        let targets = self.response_ids(&response.text);
        let ctx = self.context(context, self.max_len - 1 - targets.len());
        let mut sequence = EncodedSequence::default();
        sequence.push(lead, ctx.role_ids.first().copied().unwrap_or(response.role.id()), 0);
        let sequence = sequence.concat(&ctx);
        let first_target_row = sequence.len() - 1;
        // the final target (<eos>) is predicted but never fed back in
        let fed = Self::response_segment(&ctx, &targets[..targets.len() - 1], response.role);
        GeneratorExample {
            sequence: sequence.concat(&fed),
            targets,
            first_target_row,
        }
    }

    /// Encoder input `<bos> ‖ context ‖ response`.
    pub fn pair(&self, context: &[Utterance], response: &Utterance) -> EncodedSequence {
        let resp = self.response_ids(&response.text);
        self.pair_ids(context, &resp, response.role)
    }

    /// Discriminator input: `input` as the user's (role A) turn after
    /// `context`, whose roles are reassigned to alternate backwards from it.
    pub fn topic_pair(&self, context: &[Utterance], input: &str) -> EncodedSequence {
        let n = context.len();
        let ctx: Vec<Utterance> = context
            .iter()
            .enumerate()
            .map(|(i, u)| {
                let role = if (n - i) % 2 == 1 { Role::B } else { Role::A };
                Utterance::new(role, u.text.clone())
            })
            .collect();
        self.pair(&ctx, &Utterance::new(Role::A, input))
    }

    /// [`Self::pair`] with a pre-tokenized response (closing `<eos>` included).
    pub fn pair_ids(&self, context: &[Utterance], response: &[u32], role: Role) -> EncodedSequence {
        let mut resp = response.to_vec();
        if resp.len() > self.response_budget() {
            resp.truncate(self.response_budget() - 1);
            resp.push(EOS);
        }
        let ctx = self.context(context, self.max_len - 1 - resp.len());
        let mut seq = EncodedSequence::default();
        seq.push(BOS, ctx.role_ids.first().copied().unwrap_or(role.id()), 0);
        let seq = seq.concat(&ctx);
        let tail = Self::response_segment(&ctx, &resp, role);
        seq.concat(&tail)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn u(role: Role, t: &str) -> Utterance {
        Utterance::new(role, t)
    }

    #[test]
    fn generator_example_layout() {
        let v = Vocab::bytes_only(3);
        let cfg = ModelConfig::tiny(v.len(), 3);
        let b = InputBuilder::new(&v, &cfg);
        let ex = b.generator_example(&[u(Role::A, "hi")], &u(Role::B, "yo"), BOS);
        // <bos> h i <eos> y o
        assert_eq!(ex.sequence.len(), 6);
        assert_eq!(ex.first_target_row, 3);
        assert_eq!(ex.targets.len(), 3);
        assert_eq!(ex.targets[2], EOS);
        assert_eq!(ex.sequence.token_ids[4], ex.targets[0]);
        assert_eq!(ex.sequence.turn_ids, vec![0, 0, 0, 0, 1, 1]);
        assert_eq!(ex.sequence.role_ids[4], Role::B.id());
    }

    #[test]
    fn long_inputs_fit_the_budget() {
        let v = Vocab::bytes_only(3);
        let cfg = ModelConfig::tiny(v.len(), 3);
        let b = InputBuilder::new(&v, &cfg);
        let ctx: Vec<Utterance> = (0..12).map(|i| u(Role::A, &"x".repeat(10 + i))).collect();
        let ex = b.generator_example(&ctx, &u(Role::B, &"y".repeat(100)), BOS);
        assert!(ex.sequence.len() <= cfg.max_len());
        assert!(ex.sequence.turn_ids.iter().all(|&t| (t as usize) < cfg.turn_count));
        let pair = b.pair(&ctx, &u(Role::B, &"y".repeat(100)));
        assert!(pair.len() <= cfg.max_len());
        assert_eq!(*pair.token_ids.last().unwrap(), EOS);
    }

    #[test]
    fn empty_context_pair() {
        let v = Vocab::bytes_only(3);
        let cfg = ModelConfig::tiny(v.len(), 3);
        let b = InputBuilder::new(&v, &cfg);
        let pair = b.pair(&[], &u(Role::A, "ok"));
        assert_eq!(pair.token_ids[0], BOS);
        assert_eq!(pair.len(), 4);
    }
}
