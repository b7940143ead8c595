//! Comparison methods: exact string-match alias table and mention-string
//! similarity search over per-entity representations.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::corpus::Example;
use crate::model::{build_input, InputSequence, MentionEncoder};
use crate::ontology::TypeId;

pub const INDEX_MAGIC: &[u8; 8] = b"XLETINDX";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("mention index is empty")]
    EmptyIndex,
    #[error("index file {path}: {message}")]
    IndexFormat { path: String, message: String },
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

/// Exact mention-string lookup: each string maps to its most frequent
/// training entity and that entity's gold types.
#[derive(Debug, Clone, Default)]
pub struct AliasTable {
    entries: BTreeMap<String, (String, BTreeSet<TypeId>)>,
}

/// Builds the alias table from labeled training examples. Frequency ties
/// break toward the ascending qid string.
pub fn build_alias_table(train: &[Example]) -> AliasTable {
    let mut counts: HashMap<String, BTreeMap<String, u64>> = HashMap::new();
    let mut types: HashMap<String, BTreeSet<TypeId>> = HashMap::new();
    for ex in train {
        let mention = ex.mention_string();
        *counts
            .entry(mention)
            .or_default()
            .entry(ex.qid.clone())
            .or_insert(0) += 1;
        types.entry(ex.qid.clone()).or_default().extend(&ex.gold);
    }
    let mut entries = BTreeMap::new();
    for (mention, qid_counts) in counts {
        // BTreeMap iterates qids ascending, so strict > keeps the smaller
        // qid on ties.
        let mut best: Option<(&String, u64)> = None;
        for (qid, count) in &qid_counts {
            if best.map_or(true, |(_, c)| *count > c) {
                best = Some((qid, *count));
            }
        }
        let (qid, _) = best.expect("at least one qid per mention");
        let gold = types.get(qid).cloned().unwrap_or_default();
        entries.insert(mention, (qid.clone(), gold));
    }
    AliasTable { entries }
}

impl AliasTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, mention: &str) -> Option<(&str, &BTreeSet<TypeId>)> {
        self.entries
            .get(mention)
            .map(|(qid, types)| (qid.as_str(), types))
    }

    pub fn save(&self, path: &Path) -> Result<(), BaselineError> {
        let mut out = String::new();
        for (mention, (qid, types)) in &self.entries {
            let ids: Vec<String> = types.iter().map(|t| t.to_string()).collect();
            let _ = writeln!(out, "{mention}\t{qid}\t{}", ids.join(","));
        }
        std::fs::write(path, out).map_err(|source| BaselineError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, BaselineError> {
        let file = std::fs::File::open(path).map_err(|source| BaselineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let path_str = path.display().to_string();
        let mut entries = BTreeMap::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| BaselineError::Io {
                path: path_str.clone(),
                source,
            })?;
            if line.is_empty() {
                continue;
            }
            let err = |message: String| BaselineError::Parse {
                path: path_str.clone(),
                line: idx + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            }
            let types = if fields[2].is_empty() {
                BTreeSet::new()
            } else {
                fields[2]
                    .split(',')
                    .map(|t| {
                        t.parse::<TypeId>()
                            .map_err(|_| err(format!("bad type id {t:?}")))
                    })
                    .collect::<Result<BTreeSet<_>, _>>()?
            };
            entries.insert(fields[0].to_string(), (fields[1].to_string(), types));
        }
        Ok(Self { entries })
    }
}

/// Case- and script-sensitive exact match; absent strings predict nothing.
pub fn string_match_predict(mention: &str, table: &AliasTable) -> BTreeSet<TypeId> {
    table
        .lookup(mention)
        .map(|(_, types)| types.clone())
        .unwrap_or_default()
}

#[derive(Debug, Clone)]
pub struct IndexEntry {
    pub qid: String,
    pub types: BTreeSet<TypeId>,
    /// Unit-normalized encoding of the representative mention string.
    pub vector: Vec<f64>,
}

/// One unit vector per unique training entity.
#[derive(Debug, Clone)]
pub struct MentionIndex {
    pub dim: usize,
    pub entries: Vec<IndexEntry>,
    /// Entities whose representative mention could not be encoded.
    pub skipped: usize,
}

fn encode_mention(
    mention: &str,
    encoder: &dyn MentionEncoder,
    cap: usize,
    vocab: &crate::tokenizer::SubwordVocab,
) -> Option<Vec<f64>> {
    let words: Vec<String> = mention.split(' ').map(|w| w.to_string()).collect();
    let x: InputSequence = build_input(&words, &[], vocab, cap).ok()?;
    let mut v = encoder.encode(&x);
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm > 0.0 {
        for a in v.iter_mut() {
            *a /= norm;
        }
    }
    Some(v)
}

/// Builds the per-entity index. The representative mention string is the
/// entity's most frequent surface form, ties broken lexicographically;
/// vectors are mention-only encodings (empty context), unit-normalized.
pub fn build_mention_index(
    train: &[Example],
    encoder: &dyn MentionEncoder,
    cap: usize,
    vocab: &crate::tokenizer::SubwordVocab,
) -> MentionIndex {
    let mut surface: HashMap<String, BTreeMap<String, u64>> = HashMap::new();
    let mut types: HashMap<String, BTreeSet<TypeId>> = HashMap::new();
    for ex in train {
        *surface
            .entry(ex.qid.clone())
            .or_default()
            .entry(ex.mention_string())
            .or_insert(0) += 1;
        types.entry(ex.qid.clone()).or_default().extend(&ex.gold);
    }
    let mut qids: Vec<&String> = surface.keys().collect();
    qids.sort();
    let mut entries = Vec::with_capacity(qids.len());
    let mut skipped = 0;
    for qid in qids {
        let forms = &surface[qid];
        let representative = forms
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(form, _)| form.clone())
            .expect("entity has at least one surface form");
        match encode_mention(&representative, encoder, cap, vocab) {
            Some(vector) => entries.push(IndexEntry {
                qid: qid.clone(),
                types: types.get(qid).cloned().unwrap_or_default(),
                vector,
            }),
            None => skipped += 1,
        }
    }
    MentionIndex {
        dim: encoder.dim(),
        entries,
        skipped,
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Top-1 nearest neighbor by cosine over the whole index; ties break toward
/// the ascending qid.
fn exact_top1(query: &[f64], index: &MentionIndex) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, entry) in index.entries.iter().enumerate() {
        let sim = cosine(query, &entry.vector);
        let better = match best {
            None => true,
            Some((bi, bs)) => {
                sim > bs || (sim == bs && entry.qid < index.entries[bi].qid)
            }
        };
        if better {
            best = Some((i, sim));
        }
    }
    best.map(|(i, _)| i)
}

/// Predicts the type set of the most similar indexed entity.
pub fn similarity_predict(
    mention: &str,
    index: &MentionIndex,
    encoder: &dyn MentionEncoder,
    cap: usize,
    vocab: &crate::tokenizer::SubwordVocab,
) -> Result<BTreeSet<TypeId>, BaselineError> {
    if index.entries.is_empty() {
        return Err(BaselineError::EmptyIndex);
    }
    let Some(query) = encode_mention(mention, encoder, cap, vocab) else {
        return Ok(BTreeSet::new());
    };
    let i = exact_top1(&query, index).expect("index non-empty");
    Ok(index.entries[i].types.clone())
}

/// Cluster-then-scan approximation of the exact search: entries are grouped
/// around seeded centroids and only the `probes` closest clusters are
/// scanned.
#[derive(Debug, Clone)]
pub struct PrunedIndex {
    centroids: Vec<Vec<f64>>,
    clusters: Vec<Vec<usize>>,
    pub probes: usize,
}

impl PrunedIndex {
    /// Spherical k-means over the index vectors, deterministic for a fixed
    /// cluster count (centroids seeded from evenly spaced entries).
    pub fn build(index: &MentionIndex, num_clusters: usize, probes: usize) -> Self {
        let n = index.entries.len();
        let k = num_clusters.clamp(1, n.max(1));
        let mut centroids: Vec<Vec<f64>> = (0..k)
            .map(|c| index.entries[c * n / k].vector.clone())
            .collect();
        let mut assignment = vec![0usize; n];
        for _ in 0..10 {
            for (i, entry) in index.entries.iter().enumerate() {
                let mut best = (0usize, f64::NEG_INFINITY);
                for (c, centroid) in centroids.iter().enumerate() {
                    let sim = cosine(&entry.vector, centroid);
                    if sim > best.1 {
                        best = (c, sim);
                    }
                }
                assignment[i] = best.0;
            }
            for (c, centroid) in centroids.iter_mut().enumerate() {
                let members: Vec<usize> =
                    (0..n).filter(|&i| assignment[i] == c).collect();
                if members.is_empty() {
                    continue;
                }
                let dim = centroid.len();
                let mut mean = vec![0.0; dim];
                for &i in &members {
                    for (m, v) in mean.iter_mut().zip(&index.entries[i].vector) {
                        *m += v;
                    }
                }
                let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for m in mean.iter_mut() {
                        *m /= norm;
                    }
                }
                *centroid = mean;
            }
        }
        let mut clusters = vec![Vec::new(); k];
        for (i, &c) in assignment.iter().enumerate() {
            clusters[c].push(i);
        }
        Self {
            centroids,
            clusters,
            probes: probes.clamp(1, k),
        }
    }

    /// Top-1 within the probed clusters.
    pub fn search(&self, query: &[f64], index: &MentionIndex) -> Option<usize> {
        let mut order: Vec<usize> = (0..self.centroids.len()).collect();
        order.sort_by(|&a, &b| {
            cosine(query, &self.centroids[b])
                .partial_cmp(&cosine(query, &self.centroids[a]))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut best: Option<(usize, f64)> = None;
        for &c in order.iter().take(self.probes) {
            for &i in &self.clusters[c] {
                let sim = cosine(query, &index.entries[i].vector);
                let better = match best {
                    None => true,
                    Some((bi, bs)) => {
                        sim > bs || (sim == bs && index.entries[i].qid < index.entries[bi].qid)
                    }
                };
                if better {
                    best = Some((i, sim));
                }
            }
        }
        best.map(|(i, _)| i)
    }

    /// Fraction of index vectors whose pruned top-1 agrees with the exact
    /// scan when queried with themselves and with each other.
    pub fn self_agreement(&self, index: &MentionIndex) -> f64 {
        if index.entries.is_empty() {
            return 1.0;
        }
        let mut agree = 0usize;
        for entry in &index.entries {
            let exact = exact_top1(&entry.vector, index);
            let pruned = self.search(&entry.vector, index);
            if exact == pruned {
                agree += 1;
            }
        }
        agree as f64 / index.entries.len() as f64
    }
}

impl MentionIndex {
    /// Versioned binary index file: header (dim, count), then per entry the
    /// qid, type ids and the vector as f64 little-endian.
    pub fn save(&self, path: &Path) -> Result<(), BaselineError> {
        let io_err = |source| BaselineError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut buf = Vec::new();
        buf.extend_from_slice(INDEX_MAGIC);
        buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for entry in &self.entries {
            let qid = entry.qid.as_bytes();
            buf.extend_from_slice(&(qid.len() as u32).to_le_bytes());
            buf.extend_from_slice(qid);
            buf.extend_from_slice(&(entry.types.len() as u32).to_le_bytes());
            for &t in &entry.types {
                buf.extend_from_slice(&t.to_le_bytes());
            }
            for &v in &entry.vector {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(io_err)?;
        file.write_all(&buf).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, BaselineError> {
        let io_err = |source| BaselineError::Io {
            path: path.display().to_string(),
            source,
        };
        let fmt_err = |message: String| BaselineError::IndexFormat {
            path: path.display().to_string(),
            message,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(io_err)?
            .read_to_end(&mut bytes)
            .map_err(io_err)?;
        let mut cursor = 0usize;
        let mut take = |n: usize| -> Result<&[u8], BaselineError> {
            if cursor + n > bytes.len() {
                return Err(fmt_err("truncated index".to_string()));
            }
            let s = &bytes[cursor..cursor + n];
            cursor += n;
            Ok(s)
        };
        if take(8)? != INDEX_MAGIC {
            return Err(fmt_err("bad magic".to_string()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != INDEX_VERSION {
            return Err(fmt_err(format!(
                "expected version {INDEX_VERSION}, found {version}"
            )));
        }
        let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let qlen = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let qid = String::from_utf8(take(qlen)?.to_vec())
                .map_err(|_| fmt_err("qid is not utf-8".to_string()))?;
            let tlen = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let mut types = BTreeSet::new();
            for _ in 0..tlen {
                types.insert(u32::from_le_bytes(take(4)?.try_into().unwrap()));
            }
            let mut vector = Vec::with_capacity(dim);
            for _ in 0..dim {
                vector.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
            }
            entries.push(IndexEntry { qid, types, vector });
        }
        Ok(Self {
            dim,
            entries,
            skipped: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};
    use crate::tokenizer::{SubwordVocab, BASE_VOCAB};

    fn example(mention: &str, qid: &str, gold: &[TypeId]) -> Example {
        Example {
            mention: mention.split(' ').map(|w| w.to_string()).collect(),
            context: mention.split(' ').map(|w| w.to_string()).collect(),
            mention_offset: 0,
            language: "en".into(),
            qid: qid.into(),
            gold: gold.iter().copied().collect(),
        }
    }

    #[test]
    fn alias_table_most_frequent_qid_wins() {
        let train = vec![
            example("Paris", "Q90", &[0]),
            example("Paris", "Q90", &[0]),
            example("Paris", "Q90", &[0]),
            example("Paris", "Q167646", &[1]),
        ];
        let table = build_alias_table(&train);
        assert_eq!(table.lookup("Paris").unwrap().0, "Q90");
        assert_eq!(string_match_predict("Paris", &table), [0].into());
    }

    #[test]
    fn alias_table_tie_breaks_on_ascending_qid() {
        let train = vec![
            example("X", "QB", &[1]),
            example("X", "QA", &[0]),
            example("X", "QB", &[1]),
            example("X", "QA", &[0]),
        ];
        let table = build_alias_table(&train);
        assert_eq!(table.lookup("X").unwrap().0, "QA");
    }

    #[test]
    fn alias_table_singleton_mention() {
        let table = build_alias_table(&[example("Solo", "Q7", &[3])]);
        assert_eq!(table.lookup("Solo").unwrap().0, "Q7");
    }

    #[test]
    fn string_match_is_exact_and_case_sensitive() {
        let table = build_alias_table(&[example("Paris", "Q90", &[0])]);
        assert!(string_match_predict("paris", &table).is_empty());
        assert!(string_match_predict("unknown", &table).is_empty());
    }

    fn encoder_fixture() -> (ModelParams, SubwordVocab) {
        let vocab = SubwordVocab::train(["obama paris berlin"], BASE_VOCAB).unwrap();
        let cfg = ModelConfig::tiny(8, 4);
        (ModelParams::init(&cfg, 3), vocab)
    }

    #[test]
    fn mention_index_one_vector_per_entity_unit_norm() {
        let (params, vocab) = encoder_fixture();
        let train = vec![
            example("Obama", "Q76", &[0]),
            example("Obama", "Q76", &[0]),
            example("Barack Obama", "Q76", &[0]),
            example("Paris", "Q90", &[1]),
            example("Berlin", "Q64", &[2]),
        ];
        let index = build_mention_index(&train, &params, 16, &vocab);
        assert_eq!(index.entries.len(), 3);
        for entry in &index.entries {
            let norm = entry.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        // Most frequent surface form is the representative.
        let q76: Vec<_> = index.entries.iter().filter(|e| e.qid == "Q76").collect();
        assert_eq!(q76.len(), 1);
        let obama = encode_mention("Obama", &params, 16, &vocab).unwrap();
        assert!((cosine(&q76[0].vector, &obama) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn similarity_predicts_identical_representative() {
        let (params, vocab) = encoder_fixture();
        let train = vec![
            example("Paris", "Q90", &[1]),
            example("Berlin", "Q64", &[2]),
        ];
        let index = build_mention_index(&train, &params, 16, &vocab);
        let got = similarity_predict("Paris", &index, &params, 16, &vocab).unwrap();
        assert_eq!(got, [1].into());
    }

    #[test]
    fn hand_built_two_entry_index() {
        let index = MentionIndex {
            dim: 2,
            entries: vec![
                IndexEntry {
                    qid: "QA".into(),
                    types: [0].into(),
                    vector: vec![1.0, 0.0],
                },
                IndexEntry {
                    qid: "QB".into(),
                    types: [1].into(),
                    vector: vec![0.0, 1.0],
                },
            ],
            skipped: 0,
        };
        let n = (0.9f64 * 0.9 + 0.1 * 0.1).sqrt();
        let query = vec![0.9 / n, 0.1 / n];
        assert_eq!(exact_top1(&query, &index), Some(0));
    }

    #[test]
    fn empty_index_is_an_error() {
        let (params, vocab) = encoder_fixture();
        let index = MentionIndex {
            dim: 8,
            entries: vec![],
            skipped: 0,
        };
        assert!(matches!(
            similarity_predict("x", &index, &params, 16, &vocab),
            Err(BaselineError::EmptyIndex)
        ));
    }

    #[test]
    fn index_file_round_trip() {
        let (params, vocab) = encoder_fixture();
        let train = vec![
            example("Paris", "Q90", &[1]),
            example("Berlin", "Q64", &[2]),
        ];
        let index = build_mention_index(&train, &params, 16, &vocab);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.bin");
        index.save(&path).unwrap();
        let loaded = MentionIndex::load(&path).unwrap();
        assert_eq!(loaded.entries.len(), index.entries.len());
        assert_eq!(loaded.entries[0].vector, index.entries[0].vector);
    }

    #[test]
    fn pruned_index_agrees_with_exact_on_small_index() {
        let (params, vocab) = encoder_fixture();
        let train: Vec<Example> = (0..20)
            .map(|i| example(&format!("ent{i}"), &format!("Q{i}"), &[i as TypeId % 4]))
            .collect();
        let index = build_mention_index(&train, &params, 16, &vocab);
        let pruned = PrunedIndex::build(&index, 4, 3);
        assert!(pruned.self_agreement(&index) >= 0.99);
    }
}
