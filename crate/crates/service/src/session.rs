//! Session state and the records a turn produces.

use serde::{Deserialize, Serialize};
use topicswitch_core::eval::RatingRecord;
use topicswitch_core::runtime::{ChatContext, SwitchDecision, TurnOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub z: usize,
    pub text: String,
    pub score: Option<f64>,
}

/// The body returned for a message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub response: String,
    pub switched: bool,
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<Candidate>>,
}

/// One stored turn: the reply plus what produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub index: usize,
    pub at_ms: u64,
    pub text: String,
    #[serde(flatten)]
    pub reply: Reply,
    pub decision: SwitchDecision,
    pub selected_z: usize,
}

impl TurnRecord {
    /// `None` when the outcome carries no decision, which the service never
    /// requests.
    pub fn from_outcome(index: usize, at_ms: u64, text: String, outcome: &TurnOutcome) -> Option<Self> {
        let decision = outcome.decision?;
        let candidates = outcome
            .candidates
            .iter()
            .map(|c| Candidate {
                z: c.z.value(),
                text: c.text.clone(),
                score: c.coherence_score,
            })
            .collect();
        Some(Self {
            index,
            at_ms,
            text,
            reply: Reply {
                response: outcome.response.clone(),
                switched: decision.switched,
                beta: decision.beta,
                candidates: Some(candidates),
            },
            decision,
            selected_z: outcome.selected_z.value(),
        })
    }

    /// Copy with the candidate list dropped when `include` is false.
    pub fn view(&self, include: bool) -> Self {
        let mut r = self.clone();
        if !include {
            r.reply.candidates = None;
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub id: String,
    pub created_at_ms: u64,
    pub epsilon: f64,
    pub k: usize,
    pub ctx: ChatContext,
    pub turns: Vec<TurnRecord>,
    pub rating: Option<RatingRecord>,
    pub last_active_ms: u64,
    /// Set once deleted or expired; a handler still holding the session
    /// must treat it as gone.
    pub closed: bool,
}

impl Session {
    pub fn new(id: String, at_ms: u64, epsilon: f64, k: usize) -> Self {
        Self {
            id,
            created_at_ms: at_ms,
            epsilon,
            k,
            ctx: ChatContext::new(),
            turns: Vec::new(),
            rating: None,
            last_active_ms: at_ms,
            closed: false,
        }
    }

    pub fn idle_ms(&self, now_ms: u64) -> u64 {
        now_ms.saturating_sub(self.last_active_ms)
    }

    pub fn transcript(&self, include_candidates: bool) -> Transcript {
        Transcript {
            id: self.id.clone(),
            created_at_ms: self.created_at_ms,
            epsilon: self.epsilon,
            k: self.k,
            topic_segments: self.ctx.topic_segments,
            turns: self.turns.iter().map(|t| t.view(include_candidates)).collect(),
            rating: self.rating.clone(),
        }
    }
}

/// The `GET /sessions/{id}` body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub id: String,
    pub created_at_ms: u64,
    pub epsilon: f64,
    pub k: usize,
    pub topic_segments: usize,
    pub turns: Vec<TurnRecord>,
    pub rating: Option<RatingRecord>,
}
