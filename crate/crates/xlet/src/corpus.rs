//! Corpus and knowledge-base parsing, example extraction, balanced sampling,
//! and the unseen-entity holdout split.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ontology::{map_entity_types, NormalizationConfig, TypeId, TypeOntology};

pub const DATASET_HEADER: &str = "#xlet-dataset v1";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("document {doc_id}: {message}")]
    BadDocument { doc_id: String, message: String },
    #[error("holdout target {requested} below minimum feasible {minimum}")]
    InfeasibleHoldout { requested: usize, minimum: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A hyperlink annotation: inclusive word span plus target entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Link {
    pub start: usize,
    pub end: usize,
    pub qid: String,
}

/// One hyperlink-annotated document.
#[derive(Debug, Clone)]
pub struct Document {
    pub doc_id: String,
    pub language: String,
    pub words: Vec<String>,
    pub links: Vec<Link>,
}

/// One knowledge-base snapshot row.
#[derive(Debug, Clone)]
pub struct EntityRecord {
    pub qid: String,
    pub title: String,
    pub categories: Vec<String>,
}

/// A single typing instance. `gold` stays empty until labeling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub mention: Vec<String>,
    pub context: Vec<String>,
    pub mention_offset: usize,
    pub language: String,
    pub qid: String,
    pub gold: BTreeSet<TypeId>,
}

impl Example {
    pub fn mention_string(&self) -> String {
        self.mention.join(" ")
    }
}

/// Why [`attach_gold_types`] dropped an example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rejection {
    MissingEntity,
    Typeless,
}

#[derive(Debug, Default, Clone, Copy)]
pub struct RejectionCounts {
    pub missing_entity: usize,
    pub typeless: usize,
}

impl RejectionCounts {
    pub fn record(&mut self, r: Rejection) {
        match r {
            Rejection::MissingEntity => self.missing_entity += 1,
            Rejection::Typeless => self.typeless += 1,
        }
    }
}

/// Result of the unseen-entity holdout.
#[derive(Debug, Clone)]
pub struct HoldoutSplit {
    pub held_out_qids: BTreeSet<String>,
    pub filtered_train: Vec<Example>,
    /// Per-language unseen test sets, keyed by language tag.
    pub unseen_tests: BTreeMap<String, Vec<Example>>,
}

/// One example per link, with up to `window` words of context on each side.
pub fn extract_examples(doc: &Document, window: usize) -> Result<Vec<Example>, CorpusError> {
    let n = doc.words.len();
    let mut prev_end: Option<usize> = None;
    for link in &doc.links {
        if link.start > link.end || link.end >= n {
            return Err(CorpusError::BadDocument {
                doc_id: doc.doc_id.clone(),
                message: format!(
                    "link span {}-{} out of range for {} words",
                    link.start, link.end, n
                ),
            });
        }
        if let Some(pe) = prev_end {
            if link.start <= pe {
                return Err(CorpusError::BadDocument {
                    doc_id: doc.doc_id.clone(),
                    message: format!("overlapping or unordered link at word {}", link.start),
                });
            }
        }
        prev_end = Some(link.end);
    }
    let mut out = Vec::with_capacity(doc.links.len());
    for link in &doc.links {
        let ctx_start = link.start.saturating_sub(window);
        let ctx_end = (link.end + window).min(n - 1);
        out.push(Example {
            mention: doc.words[link.start..=link.end].to_vec(),
            context: doc.words[ctx_start..=ctx_end].to_vec(),
            mention_offset: link.start - ctx_start,
            language: doc.language.clone(),
            qid: link.qid.clone(),
            gold: BTreeSet::new(),
        });
    }
    Ok(out)
}

/// Looks the example's entity up in the snapshot and attaches in-ontology
/// type ids, or reports why the example is unusable.
pub fn attach_gold_types(
    ex: Example,
    kb: &HashMap<String, EntityRecord>,
    ontology: &TypeOntology,
    cfg: &NormalizationConfig,
) -> Result<Example, Rejection> {
    let record = kb.get(&ex.qid).ok_or(Rejection::MissingEntity)?;
    let gold = map_entity_types(&record.categories, ontology, cfg);
    if gold.is_empty() {
        return Err(Rejection::Typeless);
    }
    Ok(Example { gold, ..ex })
}

/// Draws up to `target` examples per language without replacement. Output is
/// ordered by ascending language tag, then draw order.
pub fn sample_balanced(
    pools: &BTreeMap<String, Vec<Example>>,
    target: usize,
    seed: u64,
) -> Vec<Example> {
    let mut out = Vec::new();
    for (language, pool) in pools {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ lang_seed(language));
        let mut indices: Vec<usize> = (0..pool.len()).collect();
        indices.shuffle(&mut rng);
        indices.truncate(target);
        out.extend(indices.into_iter().map(|i| pool[i].clone()));
    }
    out
}

fn lang_seed(language: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(language.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Selects held-out entities (at least `ceil(min_fraction * distinct)` from
/// each test set, filled to `total_target` from the union), removes them
/// from the training set, and restricts each test set to them.
pub fn holdout_entities(
    train: &[Example],
    tests: &BTreeMap<String, Vec<Example>>,
    min_fraction: f64,
    total_target: usize,
    seed: u64,
) -> Result<HoldoutSplit, CorpusError> {
    let mut held_out: BTreeSet<String> = BTreeSet::new();
    let mut minimum = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for (_language, examples) in tests {
        let entities: BTreeSet<&str> = examples.iter().map(|e| e.qid.as_str()).collect();
        let quota = (min_fraction * entities.len() as f64).ceil() as usize;
        minimum += quota;
        let mut pool: Vec<&str> = entities
            .iter()
            .copied()
            .filter(|q| !held_out.contains(*q))
            .collect();
        pool.shuffle(&mut rng);
        // Entities already held out via an earlier language count toward the
        // quota, so only top up the difference.
        let already = entities.iter().filter(|q| held_out.contains(**q)).count();
        for qid in pool.into_iter().take(quota.saturating_sub(already)) {
            held_out.insert(qid.to_string());
        }
    }
    if total_target < minimum {
        return Err(CorpusError::InfeasibleHoldout {
            requested: total_target,
            minimum,
        });
    }

    let mut remaining: Vec<&str> = tests
        .values()
        .flat_map(|examples| examples.iter().map(|e| e.qid.as_str()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|q| !held_out.contains(*q))
        .collect();
    remaining.shuffle(&mut rng);
    for qid in remaining {
        if held_out.len() >= total_target {
            break;
        }
        held_out.insert(qid.to_string());
    }

    let filtered_train = train
        .iter()
        .filter(|e| !held_out.contains(&e.qid))
        .cloned()
        .collect();
    let unseen_tests = tests
        .iter()
        .map(|(language, examples)| {
            let kept = examples
                .iter()
                .filter(|e| held_out.contains(&e.qid))
                .cloned()
                .collect();
            (language.clone(), kept)
        })
        .collect();
    Ok(HoldoutSplit {
        held_out_qids: held_out,
        filtered_train,
        unseen_tests,
    })
}

/// Outcome of a streaming load: parsed records plus per-line errors.
pub struct Loaded<T> {
    pub records: Vec<T>,
    pub errors: Vec<CorpusError>,
}

/// Parses a tab-separated corpus file, one document per line. Malformed lines
/// are reported with their line number and skipped.
pub fn load_documents(path: &Path) -> Result<Loaded<Document>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let path_str = path.display().to_string();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path_str.clone(),
            source,
        })?;
        if line.is_empty() {
            continue;
        }
        match parse_document_line(&line, &path_str, idx + 1) {
            Ok(doc) => records.push(doc),
            Err(e) => errors.push(e),
        }
    }
    Ok(Loaded { records, errors })
}

fn parse_document_line(line: &str, path: &str, lineno: usize) -> Result<Document, CorpusError> {
    let err = |message: String| CorpusError::Parse {
        path: path.to_string(),
        line: lineno,
        message,
    };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(err(format!("expected 4 fields, found {}", fields.len())));
    }
    let doc_id = fields[0].to_string();
    let language = fields[1].to_string();
    let words: Vec<String> = fields[2]
        .split(' ')
        .filter(|w| !w.is_empty())
        .map(|w| w.to_string())
        .collect();
    let mut links = Vec::new();
    if !fields[3].is_empty() {
        for triple in fields[3].split(';') {
            let (span, qid) = triple
                .split_once(':')
                .ok_or_else(|| err(format!("bad link {triple:?}")))?;
            let (start, end) = span
                .split_once('-')
                .ok_or_else(|| err(format!("bad link span {span:?}")))?;
            let start: usize = start
                .parse()
                .map_err(|_| err(format!("bad link start {start:?}")))?;
            let end: usize = end
                .parse()
                .map_err(|_| err(format!("bad link end {end:?}")))?;
            if qid.is_empty() {
                return Err(err("empty qid in link".to_string()));
            }
            links.push(Link {
                start,
                end,
                qid: qid.to_string(),
            });
        }
    }
    Ok(Document {
        doc_id,
        language,
        words,
        links,
    })
}

/// Parses a tab-separated knowledge-base snapshot, one entity per line.
pub fn load_kb(path: &Path) -> Result<Loaded<EntityRecord>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let path_str = path.display().to_string();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path_str.clone(),
            source,
        })?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            errors.push(CorpusError::Parse {
                path: path_str.clone(),
                line: idx + 1,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
            continue;
        }
        let categories = if fields[2].is_empty() {
            Vec::new()
        } else {
            fields[2].split('|').map(|c| c.to_string()).collect()
        };
        records.push(EntityRecord {
            qid: fields[0].to_string(),
            title: fields[1].to_string(),
            categories,
        });
    }
    Ok(Loaded { records, errors })
}

pub fn kb_index(records: Vec<EntityRecord>) -> HashMap<String, EntityRecord> {
    records.into_iter().map(|r| (r.qid.clone(), r)).collect()
}

/// Writes the labeled dataset file, one example per line.
pub fn save_dataset(examples: &[Example], path: &Path) -> Result<(), CorpusError> {
    let mut out = String::new();
    out.push_str(DATASET_HEADER);
    out.push('\n');
    for ex in examples {
        let gold: Vec<String> = ex.gold.iter().map(|id| id.to_string()).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            ex.language,
            ex.qid,
            ex.mention_offset,
            ex.mention.len(),
            ex.context.join(" "),
            gold.join(",")
        );
    }
    std::fs::write(path, out).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_dataset(path: &Path) -> Result<Vec<Example>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let path_str = path.display().to_string();
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path_str.clone(),
            source,
        })?;
        let err = |message: String| CorpusError::Parse {
            path: path_str.clone(),
            line: idx + 1,
            message,
        };
        if idx == 0 {
            if line != DATASET_HEADER {
                return Err(err(format!(
                    "expected header {DATASET_HEADER:?}, found {line:?}"
                )));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", fields.len())));
        }
        let mention_offset: usize = fields[2]
            .parse()
            .map_err(|_| err(format!("bad mention offset {:?}", fields[2])))?;
        let mention_len: usize = fields[3]
            .parse()
            .map_err(|_| err(format!("bad mention length {:?}", fields[3])))?;
        let context: Vec<String> = fields[4]
            .split(' ')
            .filter(|w| !w.is_empty())
            .map(|w| w.to_string())
            .collect();
        if mention_len == 0 || mention_offset + mention_len > context.len() {
            return Err(err(format!(
                "mention span {mention_offset}+{mention_len} outside context of {} words",
                context.len()
            )));
        }
        let gold = if fields[5].is_empty() {
            BTreeSet::new()
        } else {
            fields[5]
                .split(',')
                .map(|id| {
                    id.parse::<TypeId>()
                        .map_err(|_| err(format!("bad type id {id:?}")))
                })
                .collect::<Result<BTreeSet<_>, _>>()?
        };
        out.push(Example {
            mention: context[mention_offset..mention_offset + mention_len].to_vec(),
            context,
            mention_offset,
            language: fields[0].to_string(),
            qid: fields[1].to_string(),
            gold,
        });
    }
    Ok(out)
}

/// Groups examples by language tag.
pub fn by_language(examples: Vec<Example>) -> BTreeMap<String, Vec<Example>> {
    let mut pools: BTreeMap<String, Vec<Example>> = BTreeMap::new();
    for ex in examples {
        pools.entry(ex.language.clone()).or_default().push(ex);
    }
    pools
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::build_ontology;

    fn doc(words: &[&str], links: Vec<Link>) -> Document {
        Document {
            doc_id: "d1".into(),
            language: "en".into(),
            words: words.iter().map(|w| w.to_string()).collect(),
            links,
        }
    }

    #[test]
    fn window_exceeding_document_takes_everything() {
        let d = doc(
            &["a", "b", "c", "d", "e", "f", "g"],
            vec![Link {
                start: 3,
                end: 4,
                qid: "Q1".into(),
            }],
        );
        let ex = &extract_examples(&d, 50).unwrap()[0];
        assert_eq!(ex.context.len(), 7);
        assert_eq!(ex.mention_offset, 3);
        assert_eq!(ex.mention, vec!["d", "e"]);
    }

    #[test]
    fn window_two_clips_context() {
        let d = doc(
            &["a", "b", "c", "d", "e", "f", "g"],
            vec![Link {
                start: 3,
                end: 4,
                qid: "Q1".into(),
            }],
        );
        let ex = &extract_examples(&d, 2).unwrap()[0];
        assert_eq!(ex.context, vec!["b", "c", "d", "e", "f", "g"]);
        assert_eq!(ex.mention_offset, 2);
    }

    #[test]
    fn window_zero_context_equals_mention() {
        let d = doc(
            &["a", "b", "c"],
            vec![Link {
                start: 1,
                end: 1,
                qid: "Q1".into(),
            }],
        );
        let ex = &extract_examples(&d, 0).unwrap()[0];
        assert_eq!(ex.context, ex.mention);
        assert_eq!(ex.mention_offset, 0);
    }

    #[test]
    fn no_links_yields_no_examples() {
        let d = doc(&["a", "b"], vec![]);
        assert!(extract_examples(&d, 50).unwrap().is_empty());
    }

    #[test]
    fn malformed_link_rejects_document_by_id() {
        let d = doc(
            &["a", "b"],
            vec![Link {
                start: 1,
                end: 5,
                qid: "Q1".into(),
            }],
        );
        let err = extract_examples(&d, 50).unwrap_err();
        assert!(err.to_string().contains("d1"));
    }

    fn labeled(language: &str, qid: &str, mention: &str) -> Example {
        Example {
            mention: vec![mention.to_string()],
            context: vec![mention.to_string()],
            mention_offset: 0,
            language: language.into(),
            qid: qid.into(),
            gold: BTreeSet::from([0]),
        }
    }

    #[test]
    fn attach_gold_paths() {
        let ontology = build_ontology(["people"], 10);
        let cfg = NormalizationConfig::default();
        let kb = kb_index(vec![
            EntityRecord {
                qid: "Q1".into(),
                title: "One".into(),
                categories: vec!["People".into()],
            },
            EntityRecord {
                qid: "Q2".into(),
                title: "Two".into(),
                categories: vec!["1920".into()],
            },
        ]);
        let mut ex = labeled("en", "Q1", "one");
        ex.gold.clear();
        let got = attach_gold_types(ex.clone(), &kb, &ontology, &cfg).unwrap();
        assert_eq!(got.gold, BTreeSet::from([ontology.id_of("people").unwrap()]));
        ex.qid = "Q9".into();
        assert_eq!(
            attach_gold_types(ex.clone(), &kb, &ontology, &cfg).unwrap_err(),
            Rejection::MissingEntity
        );
        ex.qid = "Q2".into();
        assert_eq!(
            attach_gold_types(ex, &kb, &ontology, &cfg).unwrap_err(),
            Rejection::Typeless
        );
    }

    #[test]
    fn balanced_sampling_caps_at_pool_size() {
        let mut pools = BTreeMap::new();
        pools.insert(
            "aa".to_string(),
            (0..100).map(|i| labeled("aa", &format!("Q{i}"), "m")).collect(),
        );
        pools.insert(
            "bb".to_string(),
            (0..10).map(|i| labeled("bb", &format!("R{i}"), "m")).collect(),
        );
        let d = sample_balanced(&pools, 10, 7);
        assert_eq!(d.iter().filter(|e| e.language == "aa").count(), 10);
        assert_eq!(d.iter().filter(|e| e.language == "bb").count(), 10);
        // Language blocks are in ascending tag order.
        assert!(d[..10].iter().all(|e| e.language == "aa"));
    }

    #[test]
    fn balanced_sampling_is_deterministic() {
        let mut pools = BTreeMap::new();
        pools.insert(
            "aa".to_string(),
            (0..30).map(|i| labeled("aa", &format!("Q{i}"), "m")).collect(),
        );
        let a = sample_balanced(&pools, 5, 42);
        let b = sample_balanced(&pools, 5, 42);
        assert_eq!(a, b);
        assert!(sample_balanced(&pools, 0, 42).is_empty());
    }

    #[test]
    fn holdout_respects_min_fraction_and_disjointness() {
        let train: Vec<Example> = (0..100)
            .map(|i| labeled("en", &format!("Q{}", i % 50), "m"))
            .collect();
        let mut tests = BTreeMap::new();
        tests.insert(
            "en".to_string(),
            (0..100).map(|i| labeled("en", &format!("Q{i}"), "m")).collect(),
        );
        let split = holdout_entities(&train, &tests, 0.02, 10, 3).unwrap();
        assert!(split.held_out_qids.len() >= 2);
        assert_eq!(split.held_out_qids.len(), 10);
        for ex in &split.filtered_train {
            assert!(!split.held_out_qids.contains(&ex.qid));
        }
        for examples in split.unseen_tests.values() {
            for ex in examples {
                assert!(split.held_out_qids.contains(&ex.qid));
            }
        }
    }

    #[test]
    fn holdout_infeasible_target_reports_minimum() {
        let mut tests = BTreeMap::new();
        tests.insert(
            "en".to_string(),
            (0..100).map(|i| labeled("en", &format!("Q{i}"), "m")).collect(),
        );
        let err = holdout_entities(&[], &tests, 0.5, 10, 3).unwrap_err();
        match err {
            CorpusError::InfeasibleHoldout { minimum, .. } => assert_eq!(minimum, 50),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn document_loader_reports_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");
        std::fs::write(
            &path,
            "d1\ten\tthe blue river flows\t2-2:Q5\nbroken line without tabs\n",
        )
        .unwrap();
        let loaded = load_documents(&path).unwrap();
        assert_eq!(loaded.records.len(), 1);
        assert_eq!(loaded.errors.len(), 1);
        assert!(loaded.errors[0].to_string().contains(":2:"));
        assert_eq!(loaded.records[0].links[0].qid, "Q5");
    }

    #[test]
    fn empty_file_is_empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");
        std::fs::write(&path, "").unwrap();
        assert!(load_documents(&path).unwrap().records.is_empty());
        let kb_path = dir.path().join("kb.tsv");
        std::fs::write(&kb_path, "").unwrap();
        assert!(load_kb(&kb_path).unwrap().records.is_empty());
    }

    #[test]
    fn dataset_round_trip_preserves_mention_invariant() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.tsv");
        let mut ex = labeled("en", "Q1", "blue");
        ex.context = vec!["the".into(), "blue".into(), "river".into()];
        ex.mention_offset = 1;
        save_dataset(&[ex.clone()], &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0], ex);
        let m = &loaded[0];
        assert_eq!(
            m.context[m.mention_offset..m.mention_offset + m.mention.len()],
            m.mention[..]
        );
    }
}
