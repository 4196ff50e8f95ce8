//! Byte-level BPE tokenizer.
//!
//! The base alphabet is the 256 byte values, so every UTF-8 string encodes
//! without `<unk>`. Id layout, lowest first: the five fixed specials, one
//! `<zK>` token per latent value, the 256 bytes, then one piece per merge in
//! merge order.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue_graph::{Role, Utterance};
use crate::par::{self, Exec};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
const FIXED_SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<mask>", "<unk>"];
/// Id of `<z0>`; latent value `z` maps to `FIRST_LATENT + z`.
pub const FIRST_LATENT: u32 = FIXED_SPECIALS.len() as u32;
const HEADER: &str = "bpe-v1";

/// Desk-scale default vocabulary size.
pub const DEFAULT_VOCAB_SIZE: usize = 2000;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("vocab size {requested} too small: need more than {floor} (256 bytes + {specials} specials)")]
    VocabTooSmall {
        requested: usize,
        floor: usize,
        specials: usize,
    },
    #[error("token id {id} out of range for vocab of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("vocab file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parallel id lists for one encoded dialogue.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSequence {
    pub token_ids: Vec<u32>,
    pub role_ids: Vec<u32>,
    pub turn_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn push(&mut self, token: u32, role: u32, turn: u32) {
        self.position_ids.push(self.token_ids.len() as u32);
        self.token_ids.push(token);
        self.role_ids.push(role);
        self.turn_ids.push(turn);
    }

    /// `self` followed by `other`, with positions renumbered.
    pub fn concat(&self, other: &EncodedSequence) -> EncodedSequence {
        let mut out = self.clone();
        for i in 0..other.len() {
            out.push(other.token_ids[i], other.role_ids[i], other.turn_ids[i]);
        }
        out
    }
}

/// Options for [`Vocab::encode_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct EncodeOptions {
    /// Append `<eos>` after every utterance.
    pub eos_after_each: bool,
    /// Token budget; oldest whole turns are dropped first.
    pub max_len: Option<usize>,
    /// Turn budget; oldest turns beyond it are dropped.
    pub max_turns: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Special(String),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone)]
pub struct Vocab {
    pieces: Vec<Piece>,
    merges: Vec<(u32, u32)>,
    latent_count: usize,
    ranks: HashMap<(u32, u32), u32>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.pieces == other.pieces && self.merges == other.merges
    }
}

impl Vocab {
    fn assemble(latent_count: usize, merges: Vec<(u32, u32)>) -> Self {
        let mut pieces: Vec<Piece> = FIXED_SPECIALS.iter().map(|s| Piece::Special(s.to_string())).collect();
        pieces.extend((0..latent_count).map(|k| Piece::Special(format!("<z{k}>"))));
        pieces.extend((0..=255u8).map(|b| Piece::Bytes(vec![b])));
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let mut bytes = piece_bytes(&pieces[l as usize]).to_vec();
            bytes.extend_from_slice(piece_bytes(&pieces[r as usize]));
            pieces.push(Piece::Bytes(bytes));
            ranks.insert((l, r), rank as u32);
        }
        Self {
            pieces,
            merges,
            latent_count,
            ranks,
        }
    }

    /// Byte-only vocabulary with no merges.
    pub fn bytes_only(latent_count: usize) -> Self {
        Self::assemble(latent_count, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn latent_count(&self) -> usize {
        self.latent_count
    }

    pub fn special_count(&self) -> usize {
        FIXED_SPECIALS.len() + self.latent_count
    }

    fn byte_base(&self) -> u32 {
        self.special_count() as u32
    }

    /// Id of the reserved token for latent value `z`.
    pub fn latent_token(&self, z: usize) -> u32 {
        assert!(z < self.latent_count, "latent value {z} >= {}", self.latent_count);
        FIRST_LATENT + z as u32
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < self.special_count()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Bytes of a non-special piece.
    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        match self.pieces.get(id as usize)? {
            Piece::Bytes(b) => Some(b),
            Piece::Special(_) => None,
        }
    }

    /// Token ids for one string (no specials).
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        let base = self.byte_base();
        let mut out = Vec::new();
        for chunk in pre_tokenize(text.as_bytes()) {
            let mut ids: Vec<u32> = chunk.iter().map(|&b| base + b as u32).collect();
            self.apply_merges(&mut ids);
            out.extend(ids);
        }
        out
    }

    fn apply_merges(&self, ids: &mut Vec<u32>) {
        let first_merged = self.byte_base() + 256;
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            merge_pair(ids, pair, first_merged + rank);
        }
    }

    /// Encodes a dialogue with roles and relative turn indices.
    pub fn encode(&self, dialogue: &[Utterance]) -> EncodedSequence {
        self.encode_with(dialogue, EncodeOptions::default())
    }

    pub fn encode_with(&self, dialogue: &[Utterance], opts: EncodeOptions) -> EncodedSequence {
        let mut turns: Vec<(Role, Vec<u32>)> = dialogue
            .iter()
            .map(|u| {
                let mut ids = self.encode_text(&u.text);
                if opts.eos_after_each {
                    ids.push(EOS);
                }
                (u.role, ids)
            })
            .collect();
        if let Some(max_turns) = opts.max_turns {
            if turns.len() > max_turns {
                turns.drain(..turns.len() - max_turns);
            }
        }
        if let Some(max_len) = opts.max_len {
            let mut total: usize = turns.iter().map(|(_, t)| t.len()).sum();
            while total > max_len && turns.len() > 1 {
                total -= turns.remove(0).1.len();
            }
            if let Some((_, last)) = turns.last_mut() {
                if last.len() > max_len {
                    last.truncate(max_len);
                    if opts.eos_after_each && max_len > 0 {
                        last[max_len - 1] = EOS;
                    }
                }
            }
        }
        let mut seq = EncodedSequence::default();
        for (turn, (role, ids)) in turns.iter().enumerate() {
            for &id in ids {
                seq.push(id, role.id(), turn as u32);
            }
        }
        seq
    }

    /// Concatenated text of `ids`; specials are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            match self.pieces.get(id as usize) {
                None => return Err(TokenizerError::IdOutOfRange { id, size: self.len() }),
                Some(Piece::Special(_)) => {}
                Some(Piece::Bytes(b)) => bytes.extend_from_slice(b),
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn to_manifest(&self) -> String {
        let mut out = format!("{HEADER} {}\n", self.len());
        for p in &self.pieces {
            match p {
                Piece::Special(s) => out.push_str(s),
                Piece::Bytes(b) => out.push_str(&hex::encode(b)),
            }
            out.push('\n');
        }
        out.push_str("#merges\n");
        for &(l, r) in &self.merges {
            let _ = writeln!(
                out,
                "{} {}",
                hex::encode(piece_bytes(&self.pieces[l as usize])),
                hex::encode(piece_bytes(&self.pieces[r as usize]))
            );
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self, TokenizerError> {
        let err = |line: usize, message: &str| TokenizerError::Parse {
            line,
            message: message.to_string(),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| err(1, "missing header"))?;
        let declared: usize = header
            .strip_prefix(HEADER)
            .map(str::trim)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(1, "expected `bpe-v1 <vocab_size>`"))?;
        let mut listed = Vec::new();
        let mut merge_lines = Vec::new();
        let mut in_merges = false;
        for (no, line) in lines {
            if line == "#merges" {
                in_merges = true;
            } else if in_merges {
                merge_lines.push((no, line));
            } else {
                listed.push((no, line));
            }
        }
        let latent_count = listed
            .iter()
            .filter(|(_, l)| l.starts_with("<z") && l.ends_with('>'))
            .count();
        let mut by_bytes: HashMap<Vec<u8>, u32> = HashMap::new();
        let probe = Self::bytes_only(latent_count);
        for (id, p) in probe.pieces.iter().enumerate() {
            if let Piece::Bytes(b) = p {
                by_bytes.insert(b.clone(), id as u32);
            }
        }
        let mut merges = Vec::with_capacity(merge_lines.len());
        for (next_id, (no, line)) in (probe.len() as u32..).zip(merge_lines) {
            let (l, r) = line.split_once(' ').ok_or_else(|| err(no, "expected `left right`"))?;
            let lb = hex::decode(l).map_err(|_| err(no, "left piece is not hex"))?;
            let rb = hex::decode(r).map_err(|_| err(no, "right piece is not hex"))?;
            let li = *by_bytes.get(&lb).ok_or_else(|| err(no, "unknown left piece"))?;
            let ri = *by_bytes.get(&rb).ok_or_else(|| err(no, "unknown right piece"))?;
            merges.push((li, ri));
            let mut joined = lb;
            joined.extend(rb);
            by_bytes.entry(joined).or_insert(next_id);
        }
        let vocab = Self::assemble(latent_count, merges);
        if vocab.len() != declared || vocab.len() != listed.len() {
            return Err(err(
                1,
                &format!(
                    "declared {declared} pieces, listed {}, merges imply {}",
                    listed.len(),
                    vocab.len()
                ),
            ));
        }
        for ((no, line), piece) in listed.iter().zip(&vocab.pieces) {
            let ok = match piece {
                Piece::Special(s) => s == line,
                Piece::Bytes(b) => hex::encode(b) == *line,
            };
            if !ok {
                return Err(err(*no, "piece does not match merge table"));
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_manifest())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        Self::from_manifest(&std::fs::read_to_string(path)?)
    }
}

fn piece_bytes(p: &Piece) -> &[u8] {
    match p {
        Piece::Bytes(b) => b,
        Piece::Special(_) => &[],
    }
}

/// Splits at whitespace that follows a non-whitespace byte, so `"a b"` gives
/// `["a", " b"]`. Merges never cross chunk boundaries.
fn pre_tokenize(bytes: &[u8]) -> Vec<&[u8]> {
    let mut chunks = Vec::new();
    let mut start = 0;
    for i in 1..bytes.len() {
        if bytes[i].is_ascii_whitespace() && !bytes[i - 1].is_ascii_whitespace() {
            chunks.push(&bytes[start..i]);
            start = i;
        }
    }
    if start < bytes.len() {
        chunks.push(&bytes[start..]);
    }
    chunks
}

fn merge_pair(ids: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == pair.0 && ids[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    *ids = out;
}

/// Learns a merge table from `corpus`.
///
/// Each round merges the most frequent adjacent pair; ties go to the pair
/// whose (left bytes, right bytes) sort first. Training stops at `vocab_size`
/// or when no pair occurs at least twice.
pub fn train_bpe<I, S>(corpus: I, vocab_size: usize, latent_count: usize) -> Result<Vocab, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let specials = FIXED_SPECIALS.len() + latent_count;
    let floor = 256 + specials;
    if vocab_size <= floor {
        return Err(TokenizerError::VocabTooSmall {
            requested: vocab_size,
            floor,
            specials,
        });
    }
    let mut freqs: HashMap<Vec<u8>, u64> = HashMap::new();
    for text in corpus {
        for chunk in pre_tokenize(text.as_ref().as_bytes()) {
            *freqs.entry(chunk.to_vec()).or_default() += 1;
        }
    }
    if freqs.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut vocab = Vocab::bytes_only(latent_count);
    let base = vocab.byte_base();
    let mut words: Vec<(Vec<u32>, u64)> = freqs
        .into_iter()
        .map(|(w, f)| (w.iter().map(|&b| base + b as u32).collect(), f))
        .collect();
    words.sort();

    let mut merges = Vec::new();
    let mut piece_bytes_of: Vec<Vec<u8>> = vocab.pieces.iter().map(|p| piece_bytes(p).to_vec()).collect();
    let mut known: HashSet<Vec<u8>> = piece_bytes_of.iter().filter(|b| !b.is_empty()).cloned().collect();
    while vocab.len() + merges.len() < vocab_size {
        let Some(pair) = best_pair(&words, &piece_bytes_of, &known) else {
            break;
        };
        let new_id = (vocab.len() + merges.len()) as u32;
        for (w, _) in words.iter_mut() {
            if w.len() > 1 {
                merge_pair(w, pair, new_id);
            }
        }
        let mut joined = piece_bytes_of[pair.0 as usize].clone();
        joined.extend_from_slice(&piece_bytes_of[pair.1 as usize]);
        known.insert(joined.clone());
        piece_bytes_of.push(joined);
        merges.push(pair);
    }
    vocab = Vocab::assemble(latent_count, merges);
    Ok(vocab)
}

/// Pairs whose joined bytes already name a piece are skipped, keeping pieces unique.
fn best_pair(words: &[(Vec<u32>, u64)], bytes_of: &[Vec<u8>], known: &HashSet<Vec<u8>>) -> Option<(u32, u32)> {
    const SHARD: usize = 512;
    let shards: Vec<&[(Vec<u32>, u64)]> = words.chunks(SHARD).collect();
    let partial = par::map(Exec::Parallel, &shards, |shard| {
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (w, f) in shard.iter() {
            for p in w.windows(2) {
                *counts.entry((p[0], p[1])).or_default() += f;
            }
        }
        counts
    });
    let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
    for part in partial {
        for (k, v) in part {
            *counts.entry(k).or_default() += v;
        }
    }
    counts
        .into_iter()
        .filter(|&(p, c)| {
            c >= 2 && {
                let mut joined = bytes_of[p.0 as usize].clone();
                joined.extend_from_slice(&bytes_of[p.1 as usize]);
                !known.contains(&joined)
            }
        })
        .max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (&bytes_of[pa.0 as usize], &bytes_of[pa.1 as usize]);
                let kb = (&bytes_of[pb.0 as usize], &bytes_of[pb.1 as usize]);
                kb.cmp(&ka)
            })
        })
        .map(|(p, _)| p)
}
