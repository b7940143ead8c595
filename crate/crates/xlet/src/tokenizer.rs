//! Byte-level subword vocabulary with byte fallback.
//!
//! Every piece is a byte sequence; the 256 single-byte pieces are always
//! present, so tokenization is total over arbitrary unicode text and never
//! emits an unknown id. Merges are learned from word-internal pair counts.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const VOCAB_HEADER: &str = "#xlet-vocab v1";

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
/// First byte piece; byte `b` has id `BYTE_BASE + b`.
pub const BYTE_BASE: u32 = 3;
/// Reserved symbols plus the byte pieces.
pub const BASE_VOCAB: u32 = BYTE_BASE + 256;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocab_size {0} is below the {BASE_VOCAB} reserved and byte pieces")]
    TooSmall(u32),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct SubwordVocab {
    /// Learned merges in rank order; piece id = BASE_VOCAB + index.
    merges: Vec<(u32, u32)>,
    /// (left, right) -> merge rank.
    merge_ranks: HashMap<(u32, u32), usize>,
    /// Byte expansion per id, empty for reserved symbols.
    piece_bytes: Vec<Vec<u8>>,
}

impl SubwordVocab {
    pub fn len(&self) -> u32 {
        BASE_VOCAB + self.merges.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn base() -> Self {
        let mut piece_bytes = vec![Vec::new(); BYTE_BASE as usize];
        for b in 0u16..256 {
            piece_bytes.push(vec![b as u8]);
        }
        Self {
            merges: Vec::new(),
            merge_ranks: HashMap::new(),
            piece_bytes,
        }
    }

    fn push_merge(&mut self, left: u32, right: u32) {
        let mut bytes = self.piece_bytes[left as usize].clone();
        bytes.extend_from_slice(&self.piece_bytes[right as usize]);
        self.merge_ranks
            .insert((left, right), self.merges.len());
        self.merges.push((left, right));
        self.piece_bytes.push(bytes);
    }

    /// Learns merges from the text stream until the vocabulary reaches
    /// `vocab_size` or no pair occurs at least twice. Deterministic given the
    /// stream: count ties break on the lexicographically smallest pair bytes.
    pub fn train<I, S>(lines: I, vocab_size: u32) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if vocab_size < BASE_VOCAB {
            return Err(VocabError::TooSmall(vocab_size));
        }
        let mut vocab = Self::base();

        // Word counts, each word as its current piece-id sequence.
        let mut word_counts: HashMap<String, u64> = HashMap::new();
        for line in lines {
            for word in line.as_ref().split_whitespace() {
                *word_counts.entry(word.to_string()).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(Vec<u32>, u64)> = {
            let mut sorted: Vec<(String, u64)> = word_counts.into_iter().collect();
            sorted.sort();
            sorted
                .into_iter()
                .map(|(w, c)| {
                    (
                        w.bytes().map(|b| BYTE_BASE + b as u32).collect::<Vec<_>>(),
                        c,
                    )
                })
                .collect()
        };

        while vocab.len() < vocab_size {
            let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
            for (ids, count) in &words {
                for pair in ids.windows(2) {
                    *pair_counts.entry((pair[0], pair[1])).or_insert(0) += count;
                }
            }
            let best = pair_counts.into_iter().max_by(|a, b| {
                a.1.cmp(&b.1).then_with(|| {
                    let key = |&(l, r): &(u32, u32)| {
                        (
                            vocab.piece_bytes[l as usize].clone(),
                            vocab.piece_bytes[r as usize].clone(),
                        )
                    };
                    // Reversed: smaller bytes win the max_by.
                    key(&b.0).cmp(&key(&a.0))
                })
            });
            let Some((pair, count)) = best else { break };
            if count < 2 {
                break;
            }
            let new_id = vocab.len();
            vocab.push_merge(pair.0, pair.1);
            for (ids, _) in &mut words {
                merge_pair_in_place(ids, pair, new_id);
            }
        }
        Ok(vocab)
    }

    /// Splits the piece-id sequence of one word by applying learned merges in
    /// rank order, starting from raw bytes.
    fn encode_word(&self, word: &[u8]) -> Vec<u32> {
        let mut ids: Vec<u32> = word.iter().map(|&b| BYTE_BASE + b as u32).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|p| self.merge_ranks.get(&(p[0], p[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let pair = self.merges[rank];
            merge_pair_in_place(&mut ids, pair, BASE_VOCAB + rank as u32);
        }
        ids
    }

    /// Tokenizes arbitrary text. Whitespace bytes stay single-byte pieces, so
    /// detokenization reproduces the input exactly.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        let mut out = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i].is_ascii_whitespace() {
                out.push(BYTE_BASE + bytes[i] as u32);
                i += 1;
            } else {
                let start = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                out.extend(self.encode_word(&bytes[start..i]));
            }
        }
        out
    }

    /// Tokenizes a word sequence as the single-space-joined text.
    pub fn tokenize_words(&self, words: &[String]) -> Vec<u32> {
        self.tokenize(&words.join(" "))
    }

    /// Reassembles the byte expansion of the pieces. Reserved symbols expand
    /// to nothing.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if let Some(piece) = self.piece_bytes.get(id as usize) {
                bytes.extend_from_slice(piece);
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn piece_bytes(&self, id: u32) -> Option<&[u8]> {
        self.piece_bytes.get(id as usize).map(|v| v.as_slice())
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        std::fs::write(path, self.serialize()).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    fn serialize(&self) -> String {
        let mut out = String::new();
        out.push_str(VOCAB_HEADER);
        out.push('\n');
        out.push_str("0\treserved\t[PAD]\n1\treserved\t[CLS]\n2\treserved\t[SEP]\n");
        for b in 0u16..256 {
            let _ = writeln!(out, "{}\tbyte\t{:02x}", BYTE_BASE + b as u32, b);
        }
        for (i, (l, r)) in self.merges.iter().enumerate() {
            let _ = writeln!(out, "{}\tmerge\t{l},{r}", BASE_VOCAB as usize + i);
        }
        out
    }

    /// Digest over the serialized vocabulary; stored in model checkpoints so
    /// a checkpoint cannot be applied to a different vocabulary.
    pub fn content_hash(&self) -> [u8; 32] {
        Sha256::digest(self.serialize().as_bytes()).into()
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let file = std::fs::File::open(path).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let reader = BufReader::new(file);
        let path_str = path.display().to_string();
        let mut vocab = Self::base();
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|source| VocabError::Io {
                path: path_str.clone(),
                source,
            })?;
            let err = |message: String| VocabError::Parse {
                path: path_str.clone(),
                line: idx + 1,
                message,
            };
            if idx == 0 {
                if line != VOCAB_HEADER {
                    return Err(err(format!(
                        "expected header {VOCAB_HEADER:?}, found {line:?}"
                    )));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            }
            let id: u32 = fields[0]
                .parse()
                .map_err(|_| err(format!("bad id {:?}", fields[0])))?;
            match fields[1] {
                "reserved" | "byte" => {
                    if id >= BASE_VOCAB {
                        return Err(err(format!("fixed piece with learned id {id}")));
                    }
                }
                "merge" => {
                    let (l, r) = fields[2]
                        .split_once(',')
                        .ok_or_else(|| err(format!("bad merge {:?}", fields[2])))?;
                    let l: u32 = l.parse().map_err(|_| err(format!("bad merge left {l:?}")))?;
                    let r: u32 = r
                        .parse()
                        .map_err(|_| err(format!("bad merge right {r:?}")))?;
                    if id != vocab.len() || l >= id || r >= id || l < BYTE_BASE || r < BYTE_BASE {
                        return Err(err(format!("merge {id} out of order or invalid")));
                    }
                    vocab.push_merge(l, r);
                }
                other => return Err(err(format!("unknown piece kind {other:?}"))),
            }
        }
        Ok(vocab)
    }
}

fn merge_pair_in_place(ids: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
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

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_vocab() -> SubwordVocab {
        let corpus = [
            "the river flows past the old mill",
            "the river bends near the city",
            "the city grows along the river",
        ];
        SubwordVocab::train(corpus, BASE_VOCAB + 20).unwrap()
    }

    #[test]
    fn vocab_too_small_is_rejected() {
        assert!(matches!(
            SubwordVocab::train(["x"], 10),
            Err(VocabError::TooSmall(10))
        ));
    }

    #[test]
    fn empty_string_tokenizes_to_nothing() {
        assert!(small_vocab().tokenize("").is_empty());
    }

    #[test]
    fn learned_merges_shorten_common_words() {
        let v = small_vocab();
        assert!(v.len() > BASE_VOCAB);
        assert!(v.tokenize("river").len() < "river".len());
    }

    #[test]
    fn multi_script_round_trip() {
        let v = small_vocab();
        for text in ["ριβερ flows", "Ривертон у реки", "mill 磨坊", "a  b\tc"] {
            let ids = v.tokenize(text);
            assert_eq!(v.detokenize(&ids), text);
            assert!(ids.iter().all(|&id| id >= BYTE_BASE && id < v.len()));
        }
    }

    #[test]
    fn file_round_trip_preserves_tokenization_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        let v = small_vocab();
        v.save(&path).unwrap();
        let loaded = SubwordVocab::load(&path).unwrap();
        assert_eq!(loaded.len(), v.len());
        assert_eq!(loaded.content_hash(), v.content_hash());
        assert_eq!(loaded.tokenize("the river"), v.tokenize("the river"));
    }

    #[test]
    fn training_is_deterministic() {
        let a = small_vocab();
        let b = small_vocab();
        assert_eq!(a.content_hash(), b.content_hash());
    }

    proptest! {
        // Byte fallback makes tokenization total and exactly reversible.
        #[test]
        fn tokenize_round_trips(text in "\\PC{0,60}") {
            let v = small_vocab();
            let ids = v.tokenize(&text);
            prop_assert_eq!(v.detokenize(&ids), text);
        }
    }
}
