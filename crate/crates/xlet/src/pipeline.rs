//! Stage orchestration: each stage reads declared inputs, writes versioned
//! artifacts into the output directory, and records a manifest of input and
//! output hashes so re-runs are verifiably byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{
    build_alias_table, build_mention_index, similarity_predict, string_match_predict, PrunedIndex,
};
use crate::config::RunConfig;
use crate::corpus::{
    attach_gold_types, by_language, extract_examples, holdout_entities, kb_index, load_dataset,
    load_documents, load_kb, sample_balanced, save_dataset, Example, RejectionCounts,
};
use crate::evaluation::{
    adjusted_precision, build_report, load_adjudications, load_predictions, save_predictions,
    PredictionRecord,
};
use crate::model::{
    build_input, grad_check, predict_types, score_types, to_probabilities, train, MentionEncoder,
    ModelConfig, ModelParams, TrainConfig,
};
use crate::ontology::{build_ontology, normalize_category, NormalizationConfig, TypeOntology};
use crate::tokenizer::SubwordVocab;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing input for stage {stage}: {path}")]
    MissingInput { stage: String, path: String },
    #[error("output directory is locked by another run: {0}")]
    Locked(String),
    #[error("predictions file {0} contains no records")]
    EmptyPredictions(String),
    #[error(transparent)]
    Ontology(#[from] crate::ontology::OntologyError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Vocab(#[from] crate::tokenizer::VocabError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Train(#[from] crate::model::TrainError),
    #[error(transparent)]
    Baseline(#[from] crate::baselines::BaselineError),
    #[error(transparent)]
    Eval(#[from] crate::evaluation::EvalError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Exit code contract: 1 usage, 2 input error, 3 validation failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::MissingInput { .. } | PipelineError::Io { .. } => 2,
            PipelineError::Ontology(crate::ontology::OntologyError::Io { .. })
            | PipelineError::Corpus(crate::corpus::CorpusError::Io { .. })
            | PipelineError::Vocab(crate::tokenizer::VocabError::Io { .. }) => 2,
            _ => 3,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Holds the per-directory lock for the duration of a stage.
pub struct StageLock {
    path: PathBuf,
}

impl StageLock {
    pub fn acquire(out_dir: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
        let path = out_dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(path.display().to_string()))
            }
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for StageLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Default)]
pub struct StageOutcome {
    pub stage: String,
    pub outputs: Vec<PathBuf>,
    pub notes: Vec<String>,
}

fn file_hash(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn require_input(stage: &str, path: &Path) -> Result<(), PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingInput {
            stage: stage.to_string(),
            path: path.display().to_string(),
        });
    }
    Ok(())
}

fn write_manifest(
    stage: &str,
    out_dir: &Path,
    seeds: &[(&str, u64)],
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<PathBuf, PipelineError> {
    let mut text = String::new();
    let _ = writeln!(text, "stage: {stage}");
    let _ = writeln!(text, "tool-version: {TOOL_VERSION}");
    for (name, seed) in seeds {
        let _ = writeln!(text, "seed.{name}: {seed}");
    }
    for path in inputs {
        let _ = writeln!(text, "input: {}\t{}", path.display(), file_hash(path)?);
    }
    for path in outputs {
        let _ = writeln!(text, "output: {}\t{}", path.display(), file_hash(path)?);
    }
    let manifest = out_dir.join(format!("{stage}.manifest"));
    std::fs::write(&manifest, text).map_err(io_err(&manifest))?;
    Ok(manifest)
}

fn load_norm_config(cfg: &RunConfig) -> Result<NormalizationConfig, PipelineError> {
    match &cfg.norm {
        Some(path) => {
            require_input("build-ontology", path)?;
            Ok(NormalizationConfig::load(path)?)
        }
        None => Ok(NormalizationConfig::default()),
    }
}

fn extract_all(
    cfg: &RunConfig,
    stage: &str,
    paths: &[PathBuf],
) -> Result<(Vec<Example>, usize), PipelineError> {
    let mut examples = Vec::new();
    let mut line_errors = 0;
    for path in paths {
        require_input(stage, path)?;
        let loaded = load_documents(path)?;
        line_errors += loaded.errors.len();
        for doc in loaded.records {
            let mut doc_examples = extract_examples(&doc, cfg.window)?;
            if cfg.dedup_first_mention {
                let mut seen = std::collections::BTreeSet::new();
                doc_examples.retain(|ex| seen.insert(ex.qid.clone()));
            }
            examples.extend(doc_examples);
        }
    }
    Ok((examples, line_errors))
}

/// Stage: count normalized types over training examples and write the
/// frequency-ranked ontology.
pub fn cmd_build_ontology(cfg: &RunConfig) -> Result<StageOutcome, PipelineError> {
    let stage = "build-ontology";
    let _lock = StageLock::acquire(&cfg.out)?;
    require_input(stage, &cfg.kb)?;
    let norm = load_norm_config(cfg)?;
    let kb = kb_index(load_kb(&cfg.kb)?.records);
    let (examples, _) = extract_all(cfg, stage, &cfg.corpus)?;

    // One occurrence per (example, type): typeless examples contribute
    // nothing but are not yet filtered out here.
    let mut occurrences: Vec<String> = Vec::new();
    for ex in &examples {
        if let Some(record) = kb.get(&ex.qid) {
            for category in &record.categories {
                occurrences.extend(normalize_category(category, &norm));
            }
        }
    }
    let ontology = build_ontology(occurrences, cfg.ontology_capacity);
    let out_path = cfg.out.join("ontology.tsv");
    ontology.save(&out_path)?;

    let inputs: Vec<&Path> = cfg
        .corpus
        .iter()
        .map(|p| p.as_path())
        .chain([cfg.kb.as_path()])
        .chain(cfg.norm.as_deref())
        .collect();
    write_manifest(stage, &cfg.out, &[], &inputs, &[&out_path])?;
    Ok(StageOutcome {
        stage: stage.into(),
        outputs: vec![out_path],
        notes: vec![format!("{} types", ontology.len())],
    })
}

/// Stage: extract, label and balance the training set; label the test sets.
pub fn cmd_build_dataset(cfg: &RunConfig) -> Result<StageOutcome, PipelineError> {
    let stage = "build-dataset";
    let _lock = StageLock::acquire(&cfg.out)?;
    let ontology_path = cfg.out.join("ontology.tsv");
    require_input(stage, &ontology_path)?;
    require_input(stage, &cfg.kb)?;
    let ontology = TypeOntology::load(&ontology_path)?;
    let norm = load_norm_config(cfg)?;
    let kb = kb_index(load_kb(&cfg.kb)?.records);

    let label_all = |raw: Vec<Example>, counts: &mut RejectionCounts| -> Vec<Example> {
        raw.into_iter()
            .filter_map(|ex| match attach_gold_types(ex, &kb, &ontology, &norm) {
                Ok(ex) => Some(ex),
                Err(reason) => {
                    counts.record(reason);
                    None
                }
            })
            .collect()
    };

    let mut train_counts = RejectionCounts::default();
    let (train_raw, _) = extract_all(cfg, stage, &cfg.corpus)?;
    let train_labeled = label_all(train_raw, &mut train_counts);
    let pools = by_language(train_labeled);
    let train_set = sample_balanced(&pools, cfg.sample_target, cfg.sample_seed);
    let train_path = cfg.out.join("train.tsv");
    save_dataset(&train_set, &train_path)?;

    let mut test_counts = RejectionCounts::default();
    let (test_raw, _) = extract_all(cfg, stage, &cfg.test_corpus)?;
    let test_labeled = label_all(test_raw, &mut test_counts);
    let test_path = cfg.out.join("test.tsv");
    save_dataset(&test_labeled, &test_path)?;

    let inputs: Vec<&Path> = cfg
        .corpus
        .iter()
        .chain(cfg.test_corpus.iter())
        .map(|p| p.as_path())
        .chain([cfg.kb.as_path(), ontology_path.as_path()])
        .chain(cfg.norm.as_deref())
        .collect();
    write_manifest(
        stage,
        &cfg.out,
        &[("sample", cfg.sample_seed)],
        &inputs,
        &[&train_path, &test_path],
    )?;
    Ok(StageOutcome {
        stage: stage.into(),
        outputs: vec![train_path, test_path],
        notes: vec![
            format!("train examples: {}", train_set.len()),
            format!(
                "train rejections: missing-entity {} typeless {}",
                train_counts.missing_entity, train_counts.typeless
            ),
            format!("test examples: {}", test_labeled.len()),
            format!(
                "test rejections: missing-entity {} typeless {}",
                test_counts.missing_entity, test_counts.typeless
            ),
        ],
    })
}

/// Stage: hold out test entities and filter them from the training set.
pub fn cmd_holdout(cfg: &RunConfig) -> Result<StageOutcome, PipelineError> {
    let stage = "holdout";
    let _lock = StageLock::acquire(&cfg.out)?;
    let train_path = cfg.out.join("train.tsv");
    let test_path = cfg.out.join("test.tsv");
    require_input(stage, &train_path)?;
    require_input(stage, &test_path)?;
    let train_set = load_dataset(&train_path)?;
    let tests = by_language(load_dataset(&test_path)?);
    let split = holdout_entities(
        &train_set,
        &tests,
        cfg.holdout_min_fraction,
        cfg.holdout_total_target,
        cfg.holdout_seed,
    )?;

    let filtered_path = cfg.out.join("train_filtered.tsv");
    save_dataset(&split.filtered_train, &filtered_path)?;
    let unseen_path = cfg.out.join("unseen.tsv");
    let unseen_all: Vec<Example> = split
        .unseen_tests
        .values()
        .flat_map(|v| v.iter().cloned())
        .collect();
    save_dataset(&unseen_all, &unseen_path)?;
    let qids_path = cfg.out.join("holdout_qids.txt");
    let mut qids_text = String::new();
    for qid in &split.held_out_qids {
        let _ = writeln!(qids_text, "{qid}");
    }
    std::fs::write(&qids_path, qids_text).map_err(io_err(&qids_path))?;

    write_manifest(
        stage,
        &cfg.out,
        &[("holdout", cfg.holdout_seed)],
        &[&train_path, &test_path],
        &[&filtered_path, &unseen_path, &qids_path],
    )?;
    Ok(StageOutcome {
        stage: stage.into(),
        outputs: vec![filtered_path, unseen_path, qids_path],
        notes: vec![format!("held out {} entities", split.held_out_qids.len())],
    })
}

fn num_types_from_ontology(cfg: &RunConfig) -> Result<usize, PipelineError> {
    let ontology_path = cfg.out.join("ontology.tsv");
    require_input("train", &ontology_path)?;
    Ok(TypeOntology::load(&ontology_path)?.len())
}

pub fn model_config(cfg: &RunConfig, num_types: usize) -> ModelConfig {
    ModelConfig::new(
        cfg.dim,
        cfg.layers,
        cfg.heads,
        cfg.cap,
        cfg.vocab_size as usize,
        num_types,
    )
}

/// Stage: learn the subword vocabulary from the training contexts, then
/// train the typing model. `dataset` defaults to the balanced training set.
pub fn cmd_train(cfg: &RunConfig, dataset: Option<&Path>) -> Result<StageOutcome, PipelineError> {
    let stage = "train";
    let _lock = StageLock::acquire(&cfg.out)?;
    let default_path = cfg.out.join("train.tsv");
    let dataset_path = dataset.unwrap_or(&default_path);
    require_input(stage, dataset_path)?;
    let examples = load_dataset(dataset_path)?;
    let num_types = num_types_from_ontology(cfg)?;

    let vocab = SubwordVocab::train(
        examples.iter().map(|ex| ex.context.join(" ")),
        cfg.vocab_size,
    )?;
    let vocab_path = cfg.out.join("vocab.tsv");
    vocab.save(&vocab_path)?;

    let mconfig = model_config(cfg, num_types);
    let mut params = ModelParams::init(&mconfig, cfg.model_seed);
    params.set_vocab_hash(vocab.content_hash());
    let tconfig = TrainConfig {
        batch_size: cfg.batch,
        lr_encoder: cfg.lr_encoder,
        lr_type_matrix: cfg.lr_type_matrix,
        weight_decay: cfg.weight_decay,
        epochs: cfg.epochs,
        seed: cfg.model_seed,
    };
    let log = train(&examples, &mut params, &vocab, &tconfig)?;
    let ckpt_path = cfg.out.join("model.ckpt");
    params.save(&ckpt_path)?;

    write_manifest(
        stage,
        &cfg.out,
        &[("model", cfg.model_seed)],
        &[dataset_path],
        &[&vocab_path, &ckpt_path],
    )?;
    let mut notes = vec![format!("oversize skipped: {}", log.oversize_skipped)];
    for (epoch, loss) in log.epoch_losses.iter().enumerate() {
        notes.push(format!("epoch {epoch}: mean loss {loss:.6}"));
    }
    Ok(StageOutcome {
        stage: stage.into(),
        outputs: vec![vocab_path, ckpt_path],
        notes,
    })
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(ModelParams, SubwordVocab), PipelineError> {
    let vocab_path = cfg.out.join("vocab.tsv");
    require_input("predict", &vocab_path)?;
    let vocab = SubwordVocab::load(&vocab_path)?;
    let params = ModelParams::load(checkpoint, Some(vocab.content_hash()))?;
    Ok((params, vocab))
}

/// Scores every dataset example with the trained model.
pub fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: &Path,
    out_name: &str,
) -> Result<StageOutcome, PipelineError> {
    let stage = "predict";
    let _lock = StageLock::acquire(&cfg.out)?;
    require_input(stage, checkpoint)?;
    require_input(stage, dataset)?;
    let (params, vocab) = load_model(cfg, checkpoint)?;
    let examples = load_dataset(dataset)?;
    let cap = params.config().cap;

    let mut records = Vec::with_capacity(examples.len());
    let mut skipped = 0usize;
    for (index, ex) in examples.iter().enumerate() {
        let Ok(x) = build_input(&ex.mention, &ex.context, &vocab, cap) else {
            skipped += 1;
            continue;
        };
        let h = params.encode(&x);
        let probs = to_probabilities(&score_types(&h, &params));
        let predicted = predict_types(&probs, cfg.threshold).into_iter().collect();
        records.push(PredictionRecord {
            language: ex.language.clone(),
            qid: ex.qid.clone(),
            index,
            predicted,
            gold: ex.gold.clone(),
        });
    }
    let out_path = cfg.out.join(out_name);
    save_predictions(&records, &out_path)?;
    write_manifest(stage, &cfg.out, &[], &[checkpoint, dataset], &[&out_path])?;
    Ok(StageOutcome {
        stage: stage.into(),
        outputs: vec![out_path],
        notes: vec![format!("{} predictions, {skipped} skipped", records.len())],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    StringMatch,
    Similarity,
}

/// Runs one of the comparison methods over an evaluation dataset.
pub fn cmd_baseline(
    cfg: &RunConfig,
    which: BaselineKind,
    train_dataset: &Path,
    eval_dataset: &Path,
    out_name: &str,
) -> Result<StageOutcome, PipelineError> {
    let stage = "baseline";
    let _lock = StageLock::acquire(&cfg.out)?;
    require_input(stage, train_dataset)?;
    require_input(stage, eval_dataset)?;
    let train_set = load_dataset(train_dataset)?;
    let eval_set = load_dataset(eval_dataset)?;

    let mut notes = Vec::new();
    let mut records = Vec::with_capacity(eval_set.len());
    match which {
        BaselineKind::StringMatch => {
            let table = build_alias_table(&train_set);
            let table_path = cfg.out.join("alias_table.tsv");
            table.save(&table_path)?;
            notes.push(format!("alias table entries: {}", table.len()));
            for (index, ex) in eval_set.iter().enumerate() {
                records.push(PredictionRecord {
                    language: ex.language.clone(),
                    qid: ex.qid.clone(),
                    index,
                    predicted: string_match_predict(&ex.mention_string(), &table),
                    gold: ex.gold.clone(),
                });
            }
        }
        BaselineKind::Similarity => {
            let ckpt_path = cfg.out.join("model.ckpt");
            require_input(stage, &ckpt_path)?;
            let (params, vocab) = load_model(cfg, &ckpt_path)?;
            let cap = params.config().cap;
            let index = build_mention_index(&train_set, &params, cap, &vocab);
            let index_path = cfg.out.join("mention_index.bin");
            index.save(&index_path)?;
            notes.push(format!(
                "index entries: {} ({} skipped)",
                index.entries.len(),
                index.skipped
            ));
            let pruned = cfg
                .pruned_index
                .then(|| PrunedIndex::build(&index, cfg.clusters, cfg.probes));
            if let Some(p) = &pruned {
                notes.push(format!("pruned self-agreement: {:.3}", p.self_agreement(&index)));
            }
            for (i, ex) in eval_set.iter().enumerate() {
                let predicted = match &pruned {
                    None => {
                        similarity_predict(&ex.mention_string(), &index, &params, cap, &vocab)?
                    }
                    Some(p) => {
                        let words: Vec<String> =
                            ex.mention_string().split(' ').map(String::from).collect();
                        match build_input(&words, &[], &vocab, cap) {
                            Ok(x) => {
                                let mut v = params.encode(&x);
                                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                                if norm > 0.0 {
                                    v.iter_mut().for_each(|a| *a /= norm);
                                }
                                p.search(&v, &index)
                                    .map(|j| index.entries[j].types.clone())
                                    .unwrap_or_default()
                            }
                            Err(_) => Default::default(),
                        }
                    }
                };
                records.push(PredictionRecord {
                    language: ex.language.clone(),
                    qid: ex.qid.clone(),
                    index: i,
                    predicted,
                    gold: ex.gold.clone(),
                });
            }
        }
    }
    let out_path = cfg.out.join(out_name);
    save_predictions(&records, &out_path)?;
    write_manifest(
        stage,
        &cfg.out,
        &[],
        &[train_dataset, eval_dataset],
        &[&out_path],
    )?;
    Ok(StageOutcome {
        stage: stage.into(),
        outputs: vec![out_path],
        notes,
    })
}

/// Aggregates prediction files into the evaluation report.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    seen_predictions: &Path,
    unseen_predictions: Option<&Path>,
    adjudications: Option<&Path>,
) -> Result<StageOutcome, PipelineError> {
    let stage = "evaluate";
    let _lock = StageLock::acquire(&cfg.out)?;
    let ontology_path = cfg.out.join("ontology.tsv");
    require_input(stage, &ontology_path)?;
    require_input(stage, seen_predictions)?;
    let ontology = TypeOntology::load(&ontology_path)?;
    let seen_records = load_predictions(seen_predictions)?;
    if seen_records.is_empty() {
        return Err(PipelineError::EmptyPredictions(
            seen_predictions.display().to_string(),
        ));
    }
    let group = |records: Vec<PredictionRecord>| {
        let mut map: BTreeMap<String, Vec<PredictionRecord>> = BTreeMap::new();
        for rec in records {
            map.entry(rec.language.clone()).or_default().push(rec);
        }
        map
    };
    let seen = group(seen_records.clone());
    let unseen = match unseen_predictions {
        Some(path) => {
            require_input(stage, path)?;
            group(load_predictions(path)?)
        }
        None => BTreeMap::new(),
    };
    let mut report = build_report(&seen, &unseen, &ontology, 0);
    if let Some(path) = adjudications {
        require_input(stage, path)?;
        let adj = load_adjudications(path)?;
        report.adjusted_precision_correct =
            Some(adjusted_precision(&seen_records, &adj, false)?);
        report.adjusted_precision_correct_maybe =
            Some(adjusted_precision(&seen_records, &adj, true)?);
    }

    let text_path = cfg.out.join("report.txt");
    std::fs::write(&text_path, report.render_text()).map_err(io_err(&text_path))?;
    let json_path = cfg.out.join("report.json");
    report.save_json(&json_path)?;

    let mut inputs: Vec<&Path> = vec![&ontology_path, seen_predictions];
    inputs.extend(unseen_predictions);
    inputs.extend(adjudications);
    write_manifest(stage, &cfg.out, &[], &inputs, &[&text_path, &json_path])?;
    Ok(StageOutcome {
        stage: stage.into(),
        outputs: vec![text_path, json_path],
        notes: vec![format!("examples evaluated: {}", report.examples)],
    })
}

pub struct GradCheckOutcome {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub pass: bool,
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Verifies the configured model's analytic gradient on a fixed probe
/// example against central finite differences.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradCheckOutcome, PipelineError> {
    let num_types = 8;
    let mconfig = model_config(cfg, num_types);
    let params = ModelParams::init(&mconfig, cfg.model_seed);
    let vocab = SubwordVocab::train(["gradient probe text"], crate::tokenizer::BASE_VOCAB)?;
    let x = build_input(
        &["probe".to_string()],
        &["gradient".to_string(), "text".to_string()],
        &vocab,
        cfg.cap,
    )
    .expect("probe input fits any permitted cap");
    let gold: Vec<f64> = (0..num_types).map(|k| (k % 2) as f64).collect();
    let report = grad_check(&params, &x, &gold, 1e-3, 120, cfg.model_seed);
    Ok(GradCheckOutcome {
        max_rel_error: report.max_rel_error,
        coords_checked: report.coords_checked,
        pass: report.max_rel_error <= GRADCHECK_TOLERANCE,
    })
}
