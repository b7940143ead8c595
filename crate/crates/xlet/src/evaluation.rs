//! Macro-averaged precision/recall/F1, frequency-bucket breakdowns,
//! unseen-entity reporting and adjudication-adjusted precision.
//!
//! Convention: per-example precision is averaged over examples with at least
//! one prediction, per-example recall over examples with at least one gold
//! type, and F1 is the harmonic mean of the two aggregates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{FrequencyBucket, TypeId, TypeOntology};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to evaluate")]
    NoRecords,
    #[error("adjudication for ({language}, {index}, type {type_id}) does not match a predicted-not-gold type")]
    BadAdjudication {
        language: String,
        index: usize,
        type_id: TypeId,
    },
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

/// One scored example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionRecord {
    pub language: String,
    pub qid: String,
    pub index: usize,
    pub predicted: BTreeSet<TypeId>,
    pub gold: BTreeSet<TypeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdjudicationLabel {
    Correct,
    Incorrect,
    Maybe,
}

impl AdjudicationLabel {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "correct" => Some(Self::Correct),
            "incorrect" => Some(Self::Incorrect),
            "maybe" => Some(Self::Maybe),
            _ => None,
        }
    }
}

/// Human label for one predicted-but-not-gold type.
#[derive(Debug, Clone)]
pub struct Adjudication {
    pub language: String,
    pub index: usize,
    pub type_id: TypeId,
    pub label: AdjudicationLabel,
}

/// Per-example precision and recall with the undefined-side flags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExamplePr {
    pub precision: f64,
    pub recall: f64,
    pub no_pred: bool,
    pub no_gold: bool,
}

pub fn example_pr(pred: &BTreeSet<TypeId>, gold: &BTreeSet<TypeId>) -> ExamplePr {
    let hits = pred.intersection(gold).count() as f64;
    let no_pred = pred.is_empty();
    let no_gold = gold.is_empty();
    ExamplePr {
        precision: if no_pred { 0.0 } else { hits / pred.len() as f64 },
        recall: if no_gold { 0.0 } else { hits / gold.len() as f64 },
        no_pred,
        no_gold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Prf {
    /// Percentages in [0, 100].
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub examples: usize,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Macro-averaged P/R/F1 over the records, as percentages.
pub fn macro_prf(records: &[PredictionRecord]) -> Result<Prf, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let mut p_sum = 0.0;
    let mut p_count = 0usize;
    let mut r_sum = 0.0;
    let mut r_count = 0usize;
    for rec in records {
        let pr = example_pr(&rec.predicted, &rec.gold);
        if !pr.no_pred {
            p_sum += pr.precision;
            p_count += 1;
        }
        if !pr.no_gold {
            r_sum += pr.recall;
            r_count += 1;
        }
    }
    // All examples flagged on a side leaves that aggregate undefined; it is
    // reported as 0.
    let p = if p_count == 0 { 0.0 } else { 100.0 * p_sum / p_count as f64 };
    let r = if r_count == 0 { 0.0 } else { 100.0 * r_sum / r_count as f64 };
    Ok(Prf {
        precision: p,
        recall: r,
        f1: harmonic(p, r),
        examples: records.len(),
    })
}

/// Restricts predictions and gold symmetrically to each bucket's ranks,
/// drops records empty on both sides, and macro-averages what remains.
pub fn bucket_prf(
    records: &[PredictionRecord],
    ontology: &TypeOntology,
    buckets: &[FrequencyBucket],
) -> Vec<(FrequencyBucket, Option<Prf>)> {
    let rank = |id: &TypeId| ontology.rank_of(*id).ok();
    buckets
        .iter()
        .map(|bucket| {
            let restricted: Vec<PredictionRecord> = records
                .iter()
                .filter_map(|rec| {
                    let keep = |set: &BTreeSet<TypeId>| {
                        set.iter()
                            .filter(|id| rank(id).is_some_and(|r| bucket.contains(r)))
                            .copied()
                            .collect::<BTreeSet<_>>()
                    };
                    let predicted = keep(&rec.predicted);
                    let gold = keep(&rec.gold);
                    if predicted.is_empty() && gold.is_empty() {
                        None
                    } else {
                        Some(PredictionRecord {
                            predicted,
                            gold,
                            ..rec.clone()
                        })
                    }
                })
                .collect();
            (*bucket, macro_prf(&restricted).ok())
        })
        .collect()
}

/// Macro precision after promoting adjudicated-correct (and optionally
/// maybe) predicted types to true positives.
pub fn adjusted_precision(
    records: &[PredictionRecord],
    adjudications: &[Adjudication],
    include_maybe: bool,
) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let mut accepted: BTreeMap<(&str, usize), BTreeSet<TypeId>> = BTreeMap::new();
    for adj in adjudications {
        let rec = records
            .iter()
            .find(|r| r.language == adj.language && r.index == adj.index)
            .ok_or_else(|| EvalError::BadAdjudication {
                language: adj.language.clone(),
                index: adj.index,
                type_id: adj.type_id,
            })?;
        if !rec.predicted.contains(&adj.type_id) || rec.gold.contains(&adj.type_id) {
            return Err(EvalError::BadAdjudication {
                language: adj.language.clone(),
                index: adj.index,
                type_id: adj.type_id,
            });
        }
        let promote = match adj.label {
            AdjudicationLabel::Correct => true,
            AdjudicationLabel::Maybe => include_maybe,
            AdjudicationLabel::Incorrect => false,
        };
        if promote {
            accepted
                .entry((adj.language.as_str(), adj.index))
                .or_default()
                .insert(adj.type_id);
        }
    }
    let mut p_sum = 0.0;
    let mut p_count = 0usize;
    for rec in records {
        if rec.predicted.is_empty() {
            continue;
        }
        let extra = accepted
            .get(&(rec.language.as_str(), rec.index))
            .cloned()
            .unwrap_or_default();
        let hits = rec
            .predicted
            .iter()
            .filter(|id| rec.gold.contains(id) || extra.contains(id))
            .count() as f64;
        p_sum += hits / rec.predicted.len() as f64;
        p_count += 1;
    }
    Ok(if p_count == 0 {
        0.0
    } else {
        100.0 * p_sum / p_count as f64
    })
}

/// Full evaluation report mirroring the per-language, per-bucket and
/// seen/unseen breakdowns.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    /// Aggregation convention, recorded so numbers are interpretable.
    pub convention: String,
    pub seen: BTreeMap<String, Prf>,
    pub unseen: BTreeMap<String, Prf>,
    pub seen_overall: Option<Prf>,
    pub unseen_overall: Option<Prf>,
    pub seen_buckets: Vec<(String, Option<Prf>)>,
    pub unseen_buckets: Vec<(String, Option<Prf>)>,
    /// Macro precision over the seen records after promoting
    /// adjudicated-correct predictions, without and with the maybe labels.
    #[serde(default)]
    pub adjusted_precision_correct: Option<f64>,
    #[serde(default)]
    pub adjusted_precision_correct_maybe: Option<f64>,
    pub examples: usize,
    pub skipped: usize,
}

pub const MACRO_CONVENTION: &str = "macro: per-example P over examples with predictions, \
per-example R over examples with gold types, F1 harmonic mean of aggregates";

pub fn build_report(
    seen: &BTreeMap<String, Vec<PredictionRecord>>,
    unseen: &BTreeMap<String, Vec<PredictionRecord>>,
    ontology: &TypeOntology,
    skipped: usize,
) -> EvalReport {
    let buckets = crate::ontology::CANONICAL_BUCKETS;
    let section = |records: &BTreeMap<String, Vec<PredictionRecord>>| {
        let per_lang: BTreeMap<String, Prf> = records
            .iter()
            .filter(|(_, recs)| !recs.is_empty())
            .map(|(lang, recs)| (lang.clone(), macro_prf(recs).expect("non-empty")))
            .collect();
        let all: Vec<PredictionRecord> = records.values().flatten().cloned().collect();
        let overall = macro_prf(&all).ok();
        let bucket_rows = bucket_prf(&all, ontology, &buckets)
            .into_iter()
            .map(|(b, prf)| (b.label(), prf))
            .collect();
        (per_lang, overall, bucket_rows)
    };
    let (seen_langs, seen_overall, seen_buckets) = section(seen);
    let (unseen_langs, unseen_overall, unseen_buckets) = section(unseen);
    let examples = seen.values().map(|v| v.len()).sum::<usize>()
        + unseen.values().map(|v| v.len()).sum::<usize>();
    EvalReport {
        convention: MACRO_CONVENTION.to_string(),
        seen: seen_langs,
        unseen: unseen_langs,
        seen_overall,
        unseen_overall,
        seen_buckets,
        unseen_buckets,
        adjusted_precision_correct: None,
        adjusted_precision_correct_maybe: None,
        examples,
        skipped,
    }
}

impl EvalReport {
    /// Human-readable table, percentages to one decimal place.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# evaluation report");
        let _ = writeln!(out, "# {}", self.convention);
        let _ = writeln!(out, "examples: {}  skipped: {}", self.examples, self.skipped);
        let row = |out: &mut String, label: &str, prf: &Prf| {
            let _ = writeln!(
                out,
                "{label:<24} P {:5.1}  R {:5.1}  F1 {:5.1}  (n={})",
                prf.precision, prf.recall, prf.f1, prf.examples
            );
        };
        let section = |out: &mut String,
                       title: &str,
                       langs: &BTreeMap<String, Prf>,
                       overall: &Option<Prf>,
                       buckets: &[(String, Option<Prf>)]| {
            let _ = writeln!(out, "\n## {title}");
            if langs.is_empty() {
                let _ = writeln!(out, "(absent)");
                return;
            }
            for (lang, prf) in langs {
                row(out, lang, prf);
            }
            if let Some(prf) = overall {
                row(out, "overall", prf);
            }
            for (label, prf) in buckets {
                match prf {
                    Some(prf) => row(out, &format!("bucket {label}"), prf),
                    None => {
                        let _ = writeln!(out, "bucket {label:<17} (no records)");
                    }
                }
            }
        };
        section(
            &mut out,
            "seen entities",
            &self.seen,
            &self.seen_overall,
            &self.seen_buckets,
        );
        section(
            &mut out,
            "unseen entities",
            &self.unseen,
            &self.unseen_overall,
            &self.unseen_buckets,
        );
        if let Some(p) = self.adjusted_precision_correct {
            let _ = writeln!(out, "\nadjusted precision (correct): {p:.1}");
        }
        if let Some(p) = self.adjusted_precision_correct_maybe {
            let _ = writeln!(out, "adjusted precision (correct + maybe): {p:.1}");
        }
        out
    }

    pub fn save_json(&self, path: &Path) -> Result<(), EvalError> {
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, json).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_json(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| EvalError::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })
    }
}

/// Writes the tab-separated predictions file.
pub fn save_predictions(records: &[PredictionRecord], path: &Path) -> Result<(), EvalError> {
    let mut out = String::new();
    for rec in records {
        let join = |set: &BTreeSet<TypeId>| {
            set.iter()
                .map(|id| id.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            rec.language,
            rec.qid,
            rec.index,
            join(&rec.predicted),
            join(&rec.gold)
        );
    }
    std::fs::write(path, out).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>, EvalError> {
    let file = std::fs::File::open(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let path_str = path.display().to_string();
    let mut out = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: path_str.clone(),
            source,
        })?;
        if line.is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Parse {
            path: path_str.clone(),
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let parse_set = |s: &str| -> Result<BTreeSet<TypeId>, EvalError> {
            if s.is_empty() {
                return Ok(BTreeSet::new());
            }
            s.split(',')
                .map(|id| {
                    id.parse::<TypeId>()
                        .map_err(|_| err(format!("bad type id {id:?}")))
                })
                .collect()
        };
        out.push(PredictionRecord {
            language: fields[0].to_string(),
            qid: fields[1].to_string(),
            index: fields[2]
                .parse()
                .map_err(|_| err(format!("bad index {:?}", fields[2])))?,
            predicted: parse_set(fields[3])?,
            gold: parse_set(fields[4])?,
        });
    }
    Ok(out)
}

/// Parses the adjudication file: language, example index, type id, label.
pub fn load_adjudications(path: &Path) -> Result<Vec<Adjudication>, EvalError> {
    let file = std::fs::File::open(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let path_str = path.display().to_string();
    let mut out = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: path_str.clone(),
            source,
        })?;
        if line.is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Parse {
            path: path_str.clone(),
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        out.push(Adjudication {
            language: fields[0].to_string(),
            index: fields[1]
                .parse()
                .map_err(|_| err(format!("bad index {:?}", fields[1])))?,
            type_id: fields[2]
                .parse()
                .map_err(|_| err(format!("bad type id {:?}", fields[2])))?,
            label: AdjudicationLabel::parse(fields[3])
                .ok_or_else(|| err(format!("bad label {:?}", fields[3])))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::build_ontology;

    fn record(lang: &str, index: usize, pred: &[TypeId], gold: &[TypeId]) -> PredictionRecord {
        PredictionRecord {
            language: lang.into(),
            qid: format!("Q{index}"),
            index,
            predicted: pred.iter().copied().collect(),
            gold: gold.iter().copied().collect(),
        }
    }

    #[test]
    fn example_pr_set_arithmetic() {
        let pr = example_pr(&[0, 1].into(), &[1, 2].into());
        assert_eq!(pr.precision, 0.5);
        assert_eq!(pr.recall, 0.5);
        assert!(!pr.no_pred && !pr.no_gold);
    }

    #[test]
    fn example_pr_identity_and_empty() {
        let pr = example_pr(&[3].into(), &[3].into());
        assert_eq!((pr.precision, pr.recall), (1.0, 1.0));
        let pr = example_pr(&BTreeSet::new(), &[0].into());
        assert!(pr.no_pred);
        assert_eq!(pr.recall, 0.0);
    }

    #[test]
    fn macro_perfect_predictions() {
        let recs = vec![record("en", 0, &[0, 1], &[0, 1]), record("en", 1, &[2], &[2])];
        let prf = macro_prf(&recs).unwrap();
        assert_eq!((prf.precision, prf.recall, prf.f1), (100.0, 100.0, 100.0));
    }

    #[test]
    fn f1_is_harmonic_mean() {
        assert!((harmonic(60.0, 40.0) - 48.0).abs() < 1e-12);
        assert_eq!(harmonic(0.0, 0.0), 0.0);
    }

    #[test]
    fn macro_matches_naive_oracle_on_hand_fixture() {
        let recs = vec![
            record("en", 0, &[0, 1], &[1, 2]),
            record("en", 1, &[], &[0]),
            record("de", 2, &[3], &[]),
            record("de", 3, &[1, 2, 3], &[1]),
            record("de", 4, &[2], &[2]),
        ];
        // Naive recomputation: P over records 0, 2, 3, 4; R over 0, 1, 3, 4.
        let expect_p = 100.0 * (0.5 + 0.0 + 1.0 / 3.0 + 1.0) / 4.0;
        let expect_r = 100.0 * (0.5 + 0.0 + 1.0 + 1.0) / 4.0;
        let prf = macro_prf(&recs).unwrap();
        assert!((prf.precision - expect_p).abs() < 1e-9);
        assert!((prf.recall - expect_r).abs() < 1e-9);
        assert!((prf.f1 - harmonic(expect_p, expect_r)).abs() < 1e-9);
    }

    fn ranked_ontology(n: usize) -> TypeOntology {
        // Type i gets frequency n - i, so rank == id.
        let stream: Vec<String> = (0..n)
            .flat_map(|i| std::iter::repeat(format!("t{i:02}")).take(n - i))
            .collect();
        build_ontology(stream, 10_000)
    }

    #[test]
    fn single_full_bucket_equals_unrestricted_macro() {
        let ontology = ranked_ontology(6);
        let recs = vec![
            record("en", 0, &[0, 1], &[1]),
            record("en", 1, &[2], &[2, 3]),
        ];
        let buckets = [FrequencyBucket { lo: 0, hi: 9999 }];
        let got = bucket_prf(&recs, &ontology, &buckets);
        assert_eq!(got[0].1.unwrap(), macro_prf(&recs).unwrap());
    }

    #[test]
    fn bucket_restriction_by_hand() {
        let ontology = ranked_ontology(6);
        let a = FrequencyBucket { lo: 0, hi: 2 };
        let b = FrequencyBucket { lo: 3, hi: 5 };
        let recs = vec![
            record("en", 0, &[0, 4], &[0]),     // a: pred {0} gold {0}; b: pred {4} gold {}
            record("en", 1, &[1], &[1, 5]),     // a: P=1 R=1; b: gold {5} only -> R=0
            record("en", 2, &[5], &[5]),        // b only
            record("en", 3, &[], &[2]),         // a only, no-pred
            record("en", 4, &[3], &[4]),        // b only, P=0 R=0
        ];
        let got = bucket_prf(&recs, &ontology, &[a, b]);
        let got_a = got[0].1.unwrap();
        // Bucket a: records 0, 1, 3. P over 0, 1 = (1+1)/2; R over 0, 1, 3 = (1+1+0)/3.
        assert!((got_a.precision - 100.0).abs() < 1e-9);
        assert!((got_a.recall - 100.0 * 2.0 / 3.0).abs() < 1e-9);
        let got_b = got[1].1.unwrap();
        // Bucket b: records 0 (pred only), 1 (gold only), 2, 4.
        // P over 0, 2, 4 = (0+1+0)/3; R over 1, 2, 4 = (0+1+0)/3.
        assert!((got_b.precision - 100.0 / 3.0).abs() < 1e-9);
        assert!((got_b.recall - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn adjudication_promotes_false_positives() {
        let recs = vec![record("es", 0, &[0, 1], &[0])];
        let adj = vec![Adjudication {
            language: "es".into(),
            index: 0,
            type_id: 1,
            label: AdjudicationLabel::Correct,
        }];
        let p = adjusted_precision(&recs, &adj, false).unwrap();
        assert!((p - 100.0).abs() < 1e-9);
    }

    #[test]
    fn maybe_never_lowers_precision() {
        let recs = vec![
            record("es", 0, &[0, 1, 2], &[0]),
            record("es", 1, &[1], &[]),
        ];
        let adj = vec![
            Adjudication {
                language: "es".into(),
                index: 0,
                type_id: 1,
                label: AdjudicationLabel::Maybe,
            },
            Adjudication {
                language: "es".into(),
                index: 1,
                type_id: 1,
                label: AdjudicationLabel::Incorrect,
            },
        ];
        let base = macro_prf(&recs).unwrap().precision;
        let without = adjusted_precision(&recs, &adj, false).unwrap();
        let with = adjusted_precision(&recs, &adj, true).unwrap();
        assert!(with >= without);
        assert!(without >= base);
    }

    #[test]
    fn adjudication_must_reference_predicted_not_gold() {
        let recs = vec![record("es", 0, &[0], &[0])];
        let adj = vec![Adjudication {
            language: "es".into(),
            index: 0,
            type_id: 0,
            label: AdjudicationLabel::Correct,
        }];
        assert!(matches!(
            adjusted_precision(&recs, &adj, false),
            Err(EvalError::BadAdjudication { .. })
        ));
    }

    #[test]
    fn report_empty_unseen_marked_absent_and_round_trips() {
        let ontology = ranked_ontology(4);
        let mut seen = BTreeMap::new();
        seen.insert("en".to_string(), vec![record("en", 0, &[0], &[0])]);
        let unseen = BTreeMap::new();
        let report = build_report(&seen, &unseen, &ontology, 0);
        assert!(report.unseen.is_empty());
        assert!(report.unseen_overall.is_none());
        assert_eq!(report.seen["en"].f1, 100.0);
        assert!(report.render_text().contains("(absent)"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.save_json(&path).unwrap();
        assert_eq!(EvalReport::load_json(&path).unwrap(), report);
    }

    #[test]
    fn predictions_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.tsv");
        let recs = vec![record("en", 0, &[0, 2], &[1]), record("ru", 1, &[], &[])];
        save_predictions(&recs, &path).unwrap();
        assert_eq!(load_predictions(&path).unwrap(), recs);
    }
}
