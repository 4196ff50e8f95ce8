//! Self-chat simulation and corpus metrics.

use std::collections::HashSet;
use std::hash::Hash;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;
use crate::runtime::{chat_turn, ChatContext, ChatModels, SwitchDecision, TurnOptions};
use crate::tokenizer::Vocab;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("rating `{metric}` = {value} for session {session}; allowed values are 0, 1, 2")]
    RatingOutOfRange {
        session: String,
        metric: &'static str,
        value: i64,
    },
    #[error("no ratings")]
    NoRatings,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("embedded vocab: {0}")]
    Vocab(#[from] crate::tokenizer::TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Distinct n-grams over all lists divided by the total token count.
/// N-grams never span two lists. Empty input scores 0.
pub fn distinct_n<T: Hash + Eq>(token_lists: &[Vec<T>], n: usize) -> f64 {
    assert!(n >= 1, "distinct_n needs n >= 1");
    let total: usize = token_lists.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let unique: HashSet<&[T]> = token_lists.iter().flat_map(|l| l.windows(n)).collect();
    unique.len() as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfChatTurn {
    /// Bot that produced the response, 0 or 1.
    pub speaker: usize,
    pub input: String,
    pub response: String,
    /// `None` when switching is disabled.
    pub decision: Option<SwitchDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub seed: String,
    pub turns: Vec<SelfChatTurn>,
    /// Set when a turn failed; the transcript stops there.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfChatRun {
    pub seed_questions: Vec<String>,
    pub turns_per_dialogue: usize,
    pub switch_enabled: bool,
    pub epsilon: f64,
    pub k: usize,
    pub transcripts: Vec<Transcript>,
    /// Manifest of the vocab the bots used, so reports need no other file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<String>,
}

impl SelfChatRun {
    pub fn variant(&self) -> &'static str {
        if self.switch_enabled {
            "with_topic_switch"
        } else {
            "without_topic_switch"
        }
    }

    pub fn embedded_vocab(&self) -> Result<Option<Vocab>, EvalError> {
        Ok(self.vocab.as_deref().map(Vocab::from_manifest).transpose()?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}

/// Two bots alternate from each seed question: bot 0 answers the seed, bot 1
/// answers bot 0, and so on, until `turns` responses exist. Each bot keeps
/// its own context.
pub fn self_chat(models: &ChatModels, seeds: &[String], turns: usize, opts: TurnOptions) -> SelfChatRun {
    let transcripts = par::map(models.exec, seeds, |seed| {
        let mut ctx = [ChatContext::new(), ChatContext::new()];
        let mut input = seed.clone();
        let mut out = Transcript {
            seed: seed.clone(),
            turns: Vec::with_capacity(turns),
            error: None,
        };
        for t in 0..turns {
            let speaker = t % 2;
            match chat_turn(models, &ctx[speaker], &input, opts) {
                Ok(o) => {
                    ctx[speaker] = o.context;
                    out.turns.push(SelfChatTurn {
                        speaker,
                        input: std::mem::take(&mut input),
                        response: o.response.clone(),
                        decision: o.decision,
                    });
                    input = o.response;
                }
                Err(e) => {
                    out.error = Some(format!("turn {t}: {e}"));
                    break;
                }
            }
        }
        out
    });
    SelfChatRun {
        seed_questions: seeds.to_vec(),
        turns_per_dialogue: turns,
        switch_enabled: opts.switch_enabled,
        epsilon: opts.epsilon,
        k: opts.k,
        transcripts,
        vocab: Some(models.vocab.to_manifest()),
    }
}

/// One plus the number of switching turns.
pub fn count_topics(transcript: &Transcript) -> usize {
    1 + transcript
        .turns
        .iter()
        .filter(|t| t.decision.is_some_and(|d| d.switched))
        .count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub session_id: String,
    pub coherence: u8,
    pub informativeness: u8,
    pub engagingness: u8,
    pub humanness: u8,
}

impl RatingRecord {
    pub const METRICS: [&'static str; 4] = ["coherence", "informativeness", "engagingness", "humanness"];

    /// Builds a record, rejecting any score outside `{0, 1, 2}`.
    pub fn new(session_id: impl Into<String>, scores: [i64; 4]) -> Result<Self, EvalError> {
        let session_id = session_id.into();
        for (metric, value) in Self::METRICS.iter().zip(scores) {
            if !(0..=2).contains(&value) {
                return Err(EvalError::RatingOutOfRange {
                    session: session_id,
                    metric,
                    value,
                });
            }
        }
        Ok(Self {
            session_id,
            coherence: scores[0] as u8,
            informativeness: scores[1] as u8,
            engagingness: scores[2] as u8,
            humanness: scores[3] as u8,
        })
    }

    pub fn scores(&self) -> [u8; 4] {
        [self.coherence, self.informativeness, self.engagingness, self.humanness]
    }
}

#[derive(Deserialize)]
struct RawRating {
    session_id: String,
    coherence: i64,
    informativeness: i64,
    engagingness: i64,
    humanness: i64,
}

/// Reads `session_id,coherence,informativeness,engagingness,humanness`.
pub fn read_ratings_csv(r: impl Read) -> Result<Vec<RatingRecord>, EvalError> {
    let mut reader = csv::Reader::from_reader(r);
    reader
        .deserialize::<RawRating>()
        .map(|row| {
            let row = row?;
            RatingRecord::new(
                row.session_id,
                [row.coherence, row.informativeness, row.engagingness, row.humanness],
            )
        })
        .collect()
}

pub fn write_ratings_csv(records: &[RatingRecord], w: impl Write) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    if records.is_empty() {
        out.write_record([
            "session_id",
            "coherence",
            "informativeness",
            "engagingness",
            "humanness",
        ])?;
    }
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingMeans {
    pub coherence: f64,
    pub informativeness: f64,
    pub engagingness: f64,
    pub humanness: f64,
    /// Mean of the four metric means.
    pub average: f64,
    pub count: usize,
}

pub fn aggregate_ratings(records: &[RatingRecord]) -> Result<RatingMeans, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRatings);
    }
    let mut sums = [0u64; 4];
    for r in records {
        for (s, v) in sums.iter_mut().zip(r.scores()) {
            *s += v as u64;
        }
    }
    let n = records.len() as f64;
    let m = sums.map(|s| s as f64 / n);
    Ok(RatingMeans {
        coherence: m[0],
        informativeness: m[1],
        engagingness: m[2],
        humanness: m[3],
        average: m.iter().sum::<f64>() / 4.0,
        count: records.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub distinct1: f64,
    pub distinct2: f64,
    /// Mean response length in tokens.
    pub avg_length: f64,
    pub avg_topics: f64,
    pub dialogues: usize,
    pub responses: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating_means: Option<RatingMeans>,
}

/// Report over every bot response of `run`, tokenized with `vocab`.
pub fn build_report(
    run: &SelfChatRun,
    vocab: &Vocab,
    ratings: Option<&[RatingRecord]>,
) -> Result<EvalReport, EvalError> {
    let tokens: Vec<Vec<u32>> = run
        .transcripts
        .iter()
        .flat_map(|t| t.turns.iter().map(|turn| vocab.encode_text(&turn.response)))
        .collect();
    let total: usize = tokens.iter().map(Vec::len).sum();
    let counted: Vec<usize> = run
        .transcripts
        .iter()
        .filter(|t| !t.turns.is_empty())
        .map(count_topics)
        .collect();
    let rating_means = ratings.filter(|r| !r.is_empty()).map(aggregate_ratings).transpose()?;
    Ok(EvalReport {
        variant: run.variant().to_string(),
        distinct1: distinct_n(&tokens, 1),
        distinct2: distinct_n(&tokens, 2),
        avg_length: if tokens.is_empty() {
            0.0
        } else {
            total as f64 / tokens.len() as f64
        },
        avg_topics: if counted.is_empty() {
            0.0
        } else {
            counted.iter().sum::<usize>() as f64 / counted.len() as f64
        },
        dialogues: run.transcripts.len(),
        responses: tokens.len(),
        rating_means,
    })
}

/// Reports for one or more runs, side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub variants: Vec<EvalReport>,
}

/// Ratings attach to the switch-enabled variants, or to the only run when
/// a single run is given.
pub fn build_reports(
    runs: &[SelfChatRun],
    vocab: &Vocab,
    ratings: Option<&[RatingRecord]>,
) -> Result<Report, EvalError> {
    let variants = runs
        .iter()
        .map(|run| {
            let r = ratings.filter(|_| runs.len() == 1 || run.switch_enabled);
            build_report(run, vocab, r)
        })
        .collect::<Result<_, _>>()?;
    Ok(Report { variants })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_examples() {
        assert!((distinct_n(&[vec!['a', 'b', 'a']], 1) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(distinct_n(&[vec!['a', 'b', 'a', 'b']], 2), 0.5);
        assert_eq!(distinct_n::<u32>(&[], 1), 0.0);
        // bigrams do not cross list boundaries
        assert_eq!(distinct_n(&[vec![1], vec![2]], 2), 0.0);
    }

    #[test]
    fn topics_count_switches() {
        let turn = |switched| SelfChatTurn {
            speaker: 0,
            input: String::new(),
            response: String::new(),
            decision: Some(SwitchDecision {
                beta: 0.0,
                epsilon: 0.5,
                switched,
                first_turn: false,
            }),
        };
        let mut t = Transcript {
            seed: String::new(),
            turns: vec![turn(false), turn(false)],
            error: None,
        };
        assert_eq!(count_topics(&t), 1);
        t.turns = vec![turn(true), turn(false), turn(true), turn(true)];
        assert_eq!(count_topics(&t), 4);
    }

    #[test]
    fn ratings() {
        let r = RatingRecord::new("s", [2, 2, 2, 2]).unwrap();
        let m = aggregate_ratings(&[r]).unwrap();
        assert_eq!((m.coherence, m.average), (2.0, 2.0));
        assert!(matches!(
            RatingRecord::new("s", [2, 3, 0, 0]),
            Err(EvalError::RatingOutOfRange {
                metric: "informativeness",
                value: 3,
                ..
            })
        ));
        assert!(aggregate_ratings(&[]).is_err());
    }

    #[test]
    fn ratings_csv_round_trip() {
        let rows = vec![
            RatingRecord::new("a", [2, 2, 1, 2]).unwrap(),
            RatingRecord::new("b", [0, 1, 2, 1]).unwrap(),
        ];
        let mut buf = Vec::new();
        write_ratings_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("session_id,coherence,informativeness,engagingness,humanness\na,2,2,1,2\n"));
        assert_eq!(read_ratings_csv(&buf[..]).unwrap(), rows);
        let bad = "session_id,coherence,informativeness,engagingness,humanness\nx,0,0,5,0\n";
        assert!(read_ratings_csv(bad.as_bytes()).is_err());
    }
}
