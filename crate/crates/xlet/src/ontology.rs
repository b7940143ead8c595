//! Type ontology construction from knowledge-base category strings.
//!
//! Raw categories are normalized into coarser type strings (lowercasing,
//! temporal-token stripping, preposition splitting, head-segment stopword
//! removal) and the most frequent normalized types form the ranked typeset.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use regex::Regex;
use thiserror::Error;

pub const ONTOLOGY_HEADER: &str = "#xlet-ontology v1";

/// Identifier of a type within a [`TypeOntology`].
pub type TypeId = u32;

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("unknown type id {0}")]
    UnknownTypeId(TypeId),
    #[error("invalid temporal pattern {pattern:?}: {source}")]
    BadPattern {
        pattern: String,
        source: regex::Error,
    },
    #[error("duplicate preposition {0:?}")]
    DuplicatePreposition(String),
    #[error("preposition list is empty")]
    EmptyPrepositions,
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

/// One token pattern for temporal stripping. Multi-token patterns match a run
/// of consecutive tokens, one regex per token.
#[derive(Debug, Clone)]
pub struct TemporalPattern {
    token_regexes: Vec<Regex>,
}

impl TemporalPattern {
    /// Parses a pattern line. Whitespace separates per-token regexes; each
    /// regex is anchored so it matches at the whole-token level only.
    pub fn parse(spec: &str) -> Result<Self, OntologyError> {
        let mut token_regexes = Vec::new();
        for part in spec.split_whitespace() {
            let anchored = format!("^(?:{part})$");
            let re = Regex::new(&anchored).map_err(|source| OntologyError::BadPattern {
                pattern: spec.to_string(),
                source,
            })?;
            token_regexes.push(re);
        }
        Ok(Self { token_regexes })
    }

    fn matches_at(&self, tokens: &[String], pos: usize) -> bool {
        if pos + self.token_regexes.len() > tokens.len() {
            return false;
        }
        self.token_regexes
            .iter()
            .enumerate()
            .all(|(i, re)| re.is_match(&tokens[pos + i]))
    }

    fn len(&self) -> usize {
        self.token_regexes.len()
    }
}

/// Rules applied by [`normalize_category`].
#[derive(Debug, Clone)]
pub struct NormalizationConfig {
    prepositions: Vec<String>,
    preposition_set: BTreeSet<String>,
    stopwords: BTreeSet<String>,
    temporal_patterns: Vec<TemporalPattern>,
}

impl NormalizationConfig {
    pub fn new(
        prepositions: Vec<String>,
        stopwords: Vec<String>,
        temporal_specs: &[&str],
    ) -> Result<Self, OntologyError> {
        if prepositions.is_empty() {
            return Err(OntologyError::EmptyPrepositions);
        }
        let mut preposition_set = BTreeSet::new();
        for p in &prepositions {
            if !preposition_set.insert(p.clone()) {
                return Err(OntologyError::DuplicatePreposition(p.clone()));
            }
        }
        let temporal_patterns = temporal_specs
            .iter()
            .map(|s| TemporalPattern::parse(s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            prepositions,
            preposition_set,
            stopwords: stopwords.into_iter().collect(),
            temporal_patterns,
        })
    }

    pub fn prepositions(&self) -> &[String] {
        &self.prepositions
    }

    /// Loads a plain-text config with `[prepositions]`, `[stopwords]` and
    /// `[temporal]` sections, one entry per line. `#` starts a comment.
    pub fn load(path: &Path) -> Result<Self, OntologyError> {
        let text = std::fs::read_to_string(path).map_err(|source| OntologyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut prepositions = Vec::new();
        let mut stopwords = Vec::new();
        let mut temporal = Vec::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.to_string();
                continue;
            }
            match section.as_str() {
                "prepositions" => prepositions.push(line.to_string()),
                "stopwords" => stopwords.push(line.to_string()),
                "temporal" => temporal.push(line.to_string()),
                other => {
                    return Err(OntologyError::Parse {
                        path: path.display().to_string(),
                        line: idx + 1,
                        message: format!("entry outside a known section (in {other:?})"),
                    })
                }
            }
        }
        let specs: Vec<&str> = temporal.iter().map(|s| s.as_str()).collect();
        Self::new(prepositions, stopwords, &specs)
    }

    pub fn save(&self, path: &Path) -> Result<(), OntologyError> {
        let mut out = String::new();
        out.push_str("[prepositions]\n");
        for p in &self.prepositions {
            let _ = writeln!(out, "{p}");
        }
        out.push_str("[stopwords]\n");
        for s in &self.stopwords {
            let _ = writeln!(out, "{s}");
        }
        out.push_str("[temporal]\n");
        for t in &self.temporal_patterns {
            let specs: Vec<String> = t
                .token_regexes
                .iter()
                .map(|r| {
                    let s = r.as_str();
                    s.trim_start_matches("^(?:")
                        .trim_end_matches(")$")
                        .to_string()
                })
                .collect();
            let _ = writeln!(out, "{}", specs.join(" "));
        }
        std::fs::write(path, out).map_err(|source| OntologyError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        let prepositions = [
            "in", "of", "from", "by", "at", "on", "for", "with", "to", "under", "during", "about",
        ];
        let stopwords = ["the", "a", "an", "and", "or", "its", "their"];
        let temporal = [
            r"[0-9]{3,4}",
            r"[0-9]{3,4}s",
            r"[0-9]+(?:st|nd|rd|th)-centur(?:y|ies)",
            r"[0-9]+(?:st|nd|rd|th) centur(?:y|ies)",
        ];
        Self::new(
            prepositions.iter().map(|s| s.to_string()).collect(),
            stopwords.iter().map(|s| s.to_string()).collect(),
            &temporal,
        )
        .expect("default config is well-formed")
    }
}

/// Lowercases, strips temporal tokens, splits on prepositions and removes
/// stopwords from the head segment. Each surviving segment becomes one type
/// string. Returns the empty set when everything is deleted.
pub fn normalize_category(raw: &str, cfg: &NormalizationConfig) -> BTreeSet<String> {
    let lowered = raw.to_lowercase();
    // Hyphenated ordinal-century forms stay one whitespace token, so plain
    // whitespace splitting is enough here.
    let tokens: Vec<String> = lowered.split_whitespace().map(|t| t.to_string()).collect();

    // Temporal stripping: longest pattern wins at each position.
    let mut kept: Vec<String> = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        let matched = cfg
            .temporal_patterns
            .iter()
            .filter(|p| p.matches_at(&tokens, i))
            .map(|p| p.len())
            .max();
        match matched {
            Some(n) => i += n,
            None => {
                kept.push(tokens[i].clone());
                i += 1;
            }
        }
    }

    // Segment split: head before the first preposition, then one segment per
    // preposition (the preposition token starts and stays in its segment).
    let mut segments: Vec<Vec<String>> = vec![Vec::new()];
    for tok in kept {
        if cfg.preposition_set.contains(&tok) {
            segments.push(vec![tok]);
        } else {
            segments.last_mut().unwrap().push(tok);
        }
    }

    // Stopword removal applies to the head segment only.
    segments[0].retain(|t| !cfg.stopwords.contains(t));

    segments
        .into_iter()
        .filter(|s| !s.is_empty())
        .map(|s| s.join(" "))
        .collect()
}

/// The frequency-ranked typeset: type string <-> id with exact training
/// counts and 0-based ranks by descending frequency.
#[derive(Debug, Clone, Default)]
pub struct TypeOntology {
    // Stored in rank order; entry index == rank.
    entries: Vec<OntologyEntry>,
    by_string: HashMap<String, TypeId>,
    by_id: HashMap<TypeId, usize>,
    capacity: usize,
}

#[derive(Debug, Clone)]
pub struct OntologyEntry {
    pub type_string: String,
    pub type_id: TypeId,
    pub frequency: u64,
    pub rank: usize,
}

/// Evaluation bucket over type ranks, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrequencyBucket {
    pub lo: usize,
    pub hi: usize,
}

impl FrequencyBucket {
    pub fn contains(&self, rank: usize) -> bool {
        self.lo <= rank && rank <= self.hi
    }

    pub fn label(&self) -> String {
        format!("[{},{}]", self.lo, self.hi)
    }
}

/// The three canonical rank buckets.
pub const CANONICAL_BUCKETS: [FrequencyBucket; 3] = [
    FrequencyBucket { lo: 0, hi: 99 },
    FrequencyBucket { lo: 100, hi: 999 },
    FrequencyBucket { lo: 1000, hi: 9999 },
];

/// Counts type occurrences and keeps the `capacity` most frequent, ties
/// broken by ascending type string. Type ids are assigned in rank order.
pub fn build_ontology<I>(type_occurrences: I, capacity: usize) -> TypeOntology
where
    I: IntoIterator,
    I::Item: AsRef<str>,
{
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for t in type_occurrences {
        *counts.entry(t.as_ref().to_string()).or_insert(0) += 1;
    }
    let mut pairs: Vec<(String, u64)> = counts.into_iter().collect();
    // BTreeMap iteration is already ascending by string, so a stable sort on
    // descending frequency gives the lexicographic tie-break.
    pairs.sort_by(|a, b| b.1.cmp(&a.1));
    pairs.truncate(capacity);

    let mut ontology = TypeOntology {
        capacity,
        ..Default::default()
    };
    for (rank, (type_string, frequency)) in pairs.into_iter().enumerate() {
        let type_id = rank as TypeId;
        ontology.by_string.insert(type_string.clone(), type_id);
        ontology.by_id.insert(type_id, rank);
        ontology.entries.push(OntologyEntry {
            type_string,
            type_id,
            frequency,
            rank,
        });
    }
    ontology
}

impl TypeOntology {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[OntologyEntry] {
        &self.entries
    }

    pub fn id_of(&self, type_string: &str) -> Option<TypeId> {
        self.by_string.get(type_string).copied()
    }

    pub fn entry(&self, type_id: TypeId) -> Result<&OntologyEntry, OntologyError> {
        self.by_id
            .get(&type_id)
            .map(|&idx| &self.entries[idx])
            .ok_or(OntologyError::UnknownTypeId(type_id))
    }

    pub fn rank_of(&self, type_id: TypeId) -> Result<usize, OntologyError> {
        self.entry(type_id).map(|e| e.rank)
    }

    pub fn contains_id(&self, type_id: TypeId) -> bool {
        self.by_id.contains_key(&type_id)
    }

    /// Writes the tab-separated ontology file with its version header.
    pub fn save(&self, path: &Path) -> Result<(), OntologyError> {
        let mut out = String::new();
        out.push_str(ONTOLOGY_HEADER);
        out.push('\n');
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                e.rank, e.type_id, e.frequency, e.type_string
            );
        }
        std::fs::write(path, out).map_err(|source| OntologyError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, OntologyError> {
        let file = std::fs::File::open(path).map_err(|source| OntologyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read(BufReader::new(file), &path.display().to_string())
    }

    pub fn read<R: Read>(reader: BufReader<R>, path: &str) -> Result<Self, OntologyError> {
        let parse_err = |line: usize, message: String| OntologyError::Parse {
            path: path.to_string(),
            line,
            message,
        };
        let mut ontology = TypeOntology::default();
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|source| OntologyError::Io {
                path: path.to_string(),
                source,
            })?;
            if idx == 0 {
                if line != ONTOLOGY_HEADER {
                    return Err(parse_err(
                        1,
                        format!("expected header {ONTOLOGY_HEADER:?}, found {line:?}"),
                    ));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(parse_err(idx + 1, format!("expected 4 fields, found {}", fields.len())));
            }
            let rank: usize = fields[0]
                .parse()
                .map_err(|_| parse_err(idx + 1, format!("bad rank {:?}", fields[0])))?;
            let type_id: TypeId = fields[1]
                .parse()
                .map_err(|_| parse_err(idx + 1, format!("bad type id {:?}", fields[1])))?;
            let frequency: u64 = fields[2]
                .parse()
                .map_err(|_| parse_err(idx + 1, format!("bad frequency {:?}", fields[2])))?;
            if rank != ontology.entries.len() {
                return Err(parse_err(idx + 1, format!("out-of-order rank {rank}")));
            }
            let type_string = fields[3].to_string();
            ontology.by_string.insert(type_string.clone(), type_id);
            ontology.by_id.insert(type_id, rank);
            ontology.entries.push(OntologyEntry {
                type_string,
                type_id,
                frequency,
                rank,
            });
        }
        ontology.capacity = ontology.entries.len().max(1);
        Ok(ontology)
    }
}

/// Canonical bucket containing the type's rank, or `None` past rank 9999.
pub fn bucket_of(
    type_id: TypeId,
    ontology: &TypeOntology,
) -> Result<Option<FrequencyBucket>, OntologyError> {
    let rank = ontology.rank_of(type_id)?;
    Ok(CANONICAL_BUCKETS.iter().copied().find(|b| b.contains(rank)))
}

/// Normalizes all of an entity's raw categories and keeps the types present
/// in the ontology, as ids.
pub fn map_entity_types(
    categories: &[String],
    ontology: &TypeOntology,
    cfg: &NormalizationConfig,
) -> BTreeSet<TypeId> {
    let mut ids = BTreeSet::new();
    for raw in categories {
        for t in normalize_category(raw, cfg) {
            if let Some(id) = ontology.id_of(&t) {
                ids.insert(id);
            }
        }
    }
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> NormalizationConfig {
        NormalizationConfig::default()
    }

    #[test]
    fn paper_example_temporal_strip() {
        let out = normalize_category("20th-century atheists", &cfg());
        assert_eq!(out, BTreeSet::from(["atheists".to_string()]));
    }

    #[test]
    fn empty_input_yields_empty_set() {
        assert!(normalize_category("", &cfg()).is_empty());
    }

    #[test]
    fn preposition_split() {
        let out = normalize_category("Cities in Europe", &cfg());
        assert_eq!(
            out,
            BTreeSet::from(["cities".to_string(), "in europe".to_string()])
        );
    }

    #[test]
    fn lowercasing_only() {
        let out = normalize_category("Living people", &cfg());
        assert_eq!(out, BTreeSet::from(["living people".to_string()]));
    }

    #[test]
    fn stopwords_survive_in_prepositional_segments() {
        let out = normalize_category("Establishments in the Roman Empire", &cfg());
        assert_eq!(
            out,
            BTreeSet::from([
                "establishments".to_string(),
                "in the roman empire".to_string()
            ])
        );
    }

    #[test]
    fn purely_temporal_category_normalizes_to_empty() {
        assert!(normalize_category("1920", &cfg()).is_empty());
        assert!(normalize_category("1920s", &cfg()).is_empty());
    }

    #[test]
    fn two_token_century_form() {
        let out = normalize_category("20th century atheists", &cfg());
        assert_eq!(out, BTreeSet::from(["atheists".to_string()]));
    }

    #[test]
    fn build_ontology_counts_and_capacity() {
        let stream = ["people"; 5]
            .iter()
            .chain(["atheists"; 2].iter())
            .copied()
            .collect::<Vec<_>>();
        let o = build_ontology(stream, 1);
        assert_eq!(o.len(), 1);
        let e = &o.entries()[0];
        assert_eq!(e.type_string, "people");
        assert_eq!(e.type_id, 0);
        assert_eq!(e.frequency, 5);
        assert_eq!(e.rank, 0);
    }

    #[test]
    fn build_ontology_lexicographic_tie_break() {
        let o = build_ontology(["b", "a", "b", "a"], 2);
        assert_eq!(o.entries()[0].type_string, "a");
        assert_eq!(o.entries()[1].type_string, "b");
    }

    #[test]
    fn build_ontology_empty_stream() {
        let o = build_ontology(Vec::<String>::new(), 10);
        assert!(o.is_empty());
    }

    #[test]
    fn bucket_boundaries() {
        let stream: Vec<String> = (0..1100)
            .flat_map(|i| {
                let reps = 1100 - i;
                std::iter::repeat(format!("t{i:04}")).take(reps)
            })
            .collect();
        let o = build_ontology(stream, 10_000);
        let id_at = |rank: usize| o.entries()[rank].type_id;
        assert_eq!(
            bucket_of(id_at(99), &o).unwrap(),
            Some(FrequencyBucket { lo: 0, hi: 99 })
        );
        assert_eq!(
            bucket_of(id_at(100), &o).unwrap(),
            Some(FrequencyBucket { lo: 100, hi: 999 })
        );
        assert_eq!(
            bucket_of(id_at(1000), &o).unwrap(),
            Some(FrequencyBucket { lo: 1000, hi: 9999 })
        );
    }

    #[test]
    fn bucket_unknown_id_errors() {
        let o = build_ontology(["a"], 1);
        assert!(bucket_of(99, &o).is_err());
    }

    #[test]
    fn canonical_buckets_partition_ranks() {
        for rank in 0..10_000usize {
            let hits = CANONICAL_BUCKETS
                .iter()
                .filter(|b| b.contains(rank))
                .count();
            assert_eq!(hits, 1, "rank {rank}");
        }
    }

    #[test]
    fn map_entity_types_intersects_with_ontology() {
        let o = build_ontology(["people"], 10);
        let cats = vec!["20th-century atheists".to_string(), "People".to_string()];
        let ids = map_entity_types(&cats, &o, &cfg());
        assert_eq!(ids, BTreeSet::from([o.id_of("people").unwrap()]));
    }

    #[test]
    fn map_entity_types_no_categories() {
        let o = build_ontology(["people"], 10);
        assert!(map_entity_types(&[], &o, &cfg()).is_empty());
    }

    #[test]
    fn config_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("norm.cfg");
        let c = cfg();
        c.save(&path).unwrap();
        let loaded = NormalizationConfig::load(&path).unwrap();
        assert_eq!(
            normalize_category("20th-century Cities in Europe", &c),
            normalize_category("20th-century Cities in Europe", &loaded)
        );
    }

    #[test]
    fn ontology_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ontology.tsv");
        let o = build_ontology(["a", "a", "b"], 10);
        o.save(&path).unwrap();
        let loaded = TypeOntology::load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.entries()[0].type_string, "a");
        assert_eq!(loaded.entries()[0].frequency, 2);
    }

    proptest! {
        // Outputs of normalize_category are fixed points.
        #[test]
        fn normalize_is_idempotent_on_outputs(raw in "[A-Za-z0-9 -]{0,40}") {
            let c = cfg();
            for seg in normalize_category(&raw, &c) {
                let again = normalize_category(&seg, &c);
                prop_assert_eq!(again, BTreeSet::from([seg.clone()]), "segment {:?}", seg);
            }
        }

        // Fixed point under lowercasing (some uppercase letters, like the
        // mathematical alphanumerics, have no lowercase form at all).
        #[test]
        fn normalize_output_is_lowercase(raw in "\\PC{0,40}") {
            for seg in normalize_category(&raw, &cfg()) {
                prop_assert_eq!(seg.to_lowercase(), seg.clone());
            }
        }

        // Ranks must agree with a brute-force count-and-sort.
        #[test]
        fn ontology_matches_brute_force(
            stream in proptest::collection::vec("[a-d]{1,2}", 0..60),
            k in 1usize..8,
        ) {
            let o = build_ontology(stream.iter().map(|s| s.as_str()), k);
            let mut counts: std::collections::HashMap<&str, u64> = Default::default();
            for s in &stream {
                *counts.entry(s.as_str()).or_default() += 1;
            }
            let mut expect: Vec<(&str, u64)> = counts.into_iter().collect();
            expect.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
            expect.truncate(k);
            prop_assert_eq!(o.len(), expect.len());
            for (rank, (s, f)) in expect.into_iter().enumerate() {
                let e = &o.entries()[rank];
                prop_assert_eq!(e.rank, rank);
                prop_assert_eq!(e.type_string.as_str(), s);
                prop_assert_eq!(e.frequency, f);
            }
        }
    }
}
