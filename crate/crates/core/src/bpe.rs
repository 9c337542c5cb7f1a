//! Byte-level BPE for the natural-language side, with minimum-frequency pruning.
//!
//! Text is split into chunks before counting: a chunk is a run of non-space
//! bytes together with the spaces that precede it. Merges never cross chunk
//! boundaries. Ids: bytes `0..256`, then PAD, BOS, EOS, MASK, then merges in
//! learned order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const NUM_BYTES: usize = 256;
pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;
pub const MASK: usize = 259;
pub const NUM_SPECIALS: usize = 4;
const FIRST_MERGE_ID: usize = NUM_BYTES + NUM_SPECIALS;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<mask>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeVocab {
    min_freq: usize,
    /// Merged pairs as token ids, in learned order.
    merges: Vec<(usize, usize)>,
    /// Byte string of every token id; specials map to their display name.
    token_bytes: Vec<Vec<u8>>,
    merge_rank: HashMap<(usize, usize), usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedText {
    pub ids: Vec<usize>,
    pub truncated: bool,
}

impl BpeVocab {
    fn from_merges(min_freq: usize, merges: Vec<(usize, usize)>) -> Result<Self> {
        let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        token_bytes.extend(SPECIAL_NAMES.iter().map(|s| s.as_bytes().to_vec()));
        let mut merge_rank = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let n = token_bytes.len();
            let valid = |id: usize| id < n && !(NUM_BYTES..FIRST_MERGE_ID).contains(&id);
            if !valid(l) || !valid(r) {
                return Err(Error::VocabFormat(format!(
                    "merge {rank} refers to a token that does not exist yet"
                )));
            }
            let mut bytes = token_bytes[l].clone();
            bytes.extend_from_slice(&token_bytes[r]);
            token_bytes.push(bytes);
            if merge_rank.insert((l, r), rank).is_some() {
                return Err(Error::VocabFormat(format!("merge {rank} is a duplicate")));
            }
        }
        Ok(BpeVocab {
            min_freq,
            merges,
            token_bytes,
            merge_rank,
        })
    }

    pub fn len(&self) -> usize {
        self.token_bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_bytes.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn merges(&self) -> &[(usize, usize)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: usize) -> Option<&[u8]> {
        self.token_bytes.get(id).map(Vec::as_slice)
    }

    pub fn is_special(id: usize) -> bool {
        (NUM_BYTES..FIRST_MERGE_ID).contains(&id)
    }

    /// Id of a token given its byte string (specials excluded).
    pub fn id_of(&self, bytes: &[u8]) -> Option<usize> {
        self.token_bytes
            .iter()
            .enumerate()
            .find(|(id, b)| !Self::is_special(*id) && b.as_slice() == bytes)
            .map(|(id, _)| id)
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<usize>) {
        let mut ids: Vec<usize> = chunk.iter().map(|&b| b as usize).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let (l, r) = self.merges[rank];
            let new_id = FIRST_MERGE_ID + rank;
            let mut merged = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
                    merged.push(new_id);
                    i += 2;
                } else {
                    merged.push(ids[i]);
                    i += 1;
                }
            }
            ids = merged;
        }
        out.extend(ids);
    }

    /// Token ids for `s` without BOS/EOS and without truncation.
    pub fn encode_raw(&self, s: &str) -> Vec<usize> {
        let mut out = Vec::with_capacity(s.len());
        for chunk in chunks(s.as_bytes()) {
            self.encode_chunk(chunk, &mut out);
        }
        out
    }

    /// `[BOS, tokens.., EOS]`, truncated to `max_len` while keeping both ends.
    pub fn encode(&self, s: &str, max_len: usize) -> EncodedText {
        let max_len = max_len.max(2);
        let body = self.encode_raw(s);
        let keep = body.len().min(max_len - 2);
        let mut ids = Vec::with_capacity(keep + 2);
        ids.push(BOS);
        ids.extend_from_slice(&body[..keep]);
        ids.push(EOS);
        EncodedText {
            ids,
            truncated: keep < body.len(),
        }
    }

    /// Concatenated token bytes as lossy UTF-8, specials skipped.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut bytes = Vec::with_capacity(ids.len() * 2);
        for &id in ids {
            let tok = self.token_bytes.get(id).ok_or(Error::TokenOutOfRange {
                id,
                size: self.len(),
            })?;
            if !Self::is_special(id) {
                bytes.extend_from_slice(tok);
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// `bpe-v1 <min_freq>` followed by one hex-encoded merge pair per line.
    pub fn to_file_string(&self) -> String {
        let mut out = format!("bpe-v1 {}\n", self.min_freq);
        for &(l, r) in &self.merges {
            let _ = writeln!(out, "{} {}", hex(&self.token_bytes[l]), hex(&self.token_bytes[r]));
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::VocabFormat("empty file".into()))?;
        let min_freq = header
            .strip_prefix("bpe-v1 ")
            .and_then(|v| v.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::VocabFormat(format!("bad header {header:?}")))?;

        let mut lookup: HashMap<Vec<u8>, usize> = (0..NUM_BYTES).map(|b| (vec![b as u8], b)).collect();
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let (Some(l), Some(r), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::VocabFormat(format!("line {}: expected two fields", i + 2)));
            };
            let (lb, rb) = (unhex(l)?, unhex(r)?);
            let lid = *lookup
                .get(&lb)
                .ok_or_else(|| Error::VocabFormat(format!("line {}: unknown left token", i + 2)))?;
            let rid = *lookup
                .get(&rb)
                .ok_or_else(|| Error::VocabFormat(format!("line {}: unknown right token", i + 2)))?;
            let mut joined = lb;
            joined.extend_from_slice(&rb);
            lookup.entry(joined).or_insert(FIRST_MERGE_ID + merges.len());
            merges.push((lid, rid));
        }
        Self::from_merges(min_freq, merges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if s.is_empty() || s.len() % 2 != 0 {
        return Err(Error::VocabFormat(format!("bad hex token {s:?}")));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&s[i..i + 2], 16)
                .map_err(|_| Error::VocabFormat(format!("bad hex token {s:?}")))
        })
        .collect()
}

/// Splits bytes into chunks: leading spaces attach to the following word.
pub(crate) fn chunks(bytes: &[u8]) -> impl Iterator<Item = &[u8]> {
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= bytes.len() {
            return None;
        }
        let mut i = start;
        while i < bytes.len() && bytes[i] == b' ' {
            i += 1;
        }
        while i < bytes.len() && bytes[i] != b' ' {
            i += 1;
        }
        let chunk = &bytes[start..i];
        start = i;
        Some(chunk)
    })
}

/// Learns merges until no adjacent pair occurs at least `min_freq` times.
/// Ties go to the lexicographically smallest `(left, right)` byte strings.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<BpeVocab> {
    train_bpe_capped(corpus, min_freq, usize::MAX)
}

/// As [`train_bpe`], stopping early once `max_merges` merges are learned.
pub fn train_bpe_capped<S: AsRef<str>>(
    corpus: &[S],
    min_freq: usize,
    max_merges: usize,
) -> Result<BpeVocab> {
    if corpus.is_empty() {
        return Err(Error::Empty("BPE training corpus".into()));
    }
    if min_freq == 0 {
        return Err(Error::InvalidArgument("min_freq must be at least 1".into()));
    }

    let mut chunk_counts: HashMap<&[u8], usize> = HashMap::new();
    for doc in corpus {
        for chunk in chunks(doc.as_ref().as_bytes()) {
            *chunk_counts.entry(chunk).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<usize>, usize)> = chunk_counts
        .into_iter()
        .map(|(c, n)| (c.iter().map(|&b| b as usize).collect(), n))
        .collect();
    words.sort();

    let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    token_bytes.extend(SPECIAL_NAMES.iter().map(|s| s.as_bytes().to_vec()));
    let mut merges = Vec::new();

    while merges.len() < max_merges {
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for (ids, n) in &words {
            for w in ids.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += n;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_freq)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&token_bytes[pa.0], &token_bytes[pa.1]);
                    let kb = (&token_bytes[pb.0], &token_bytes[pb.1]);
                    kb.cmp(&ka)
                })
            });
        let Some(((l, r), _)) = best else { break };

        let new_id = token_bytes.len();
        let mut joined = token_bytes[l].clone();
        joined.extend_from_slice(&token_bytes[r]);
        token_bytes.push(joined);
        merges.push((l, r));

        for (ids, _) in &mut words {
            if ids.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            *ids = out;
        }
    }

    BpeVocab::from_merges(min_freq, merges)
}
