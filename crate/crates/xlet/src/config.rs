//! Run configuration: plain-text key=value files with section headers.

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("missing required key {section}.{key}")]
    MissingKey { section: String, key: String },
    #[error("{section}.{key} = {value} outside allowed range: {reason}")]
    OutOfRange {
        section: String,
        key: String,
        value: String,
        reason: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Training corpus files, one per language.
    pub corpus: Vec<PathBuf>,
    /// Test corpus files, one per language.
    pub test_corpus: Vec<PathBuf>,
    pub kb: PathBuf,
    pub norm: Option<PathBuf>,
    pub out: PathBuf,

    pub ontology_capacity: usize,

    pub window: usize,
    pub sample_target: usize,
    pub sample_seed: u64,
    pub dedup_first_mention: bool,

    pub holdout_min_fraction: f64,
    pub holdout_total_target: usize,
    pub holdout_seed: u64,

    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub cap: usize,
    pub vocab_size: u32,
    pub batch: usize,
    pub lr_encoder: f64,
    pub lr_type_matrix: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub model_seed: u64,
    pub threshold: f64,

    pub pruned_index: bool,
    pub clusters: usize,
    pub probes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: Vec::new(),
            test_corpus: Vec::new(),
            kb: PathBuf::new(),
            norm: None,
            out: PathBuf::from("out"),
            ontology_capacity: 10_000,
            window: 50,
            sample_target: 1000,
            sample_seed: 13,
            dedup_first_mention: false,
            holdout_min_fraction: 0.02,
            holdout_total_target: 16,
            holdout_seed: 17,
            dim: 64,
            layers: 2,
            heads: 4,
            cap: 128,
            vocab_size: crate::tokenizer::BASE_VOCAB + 256,
            batch: 16,
            lr_encoder: 2e-5,
            lr_type_matrix: 1e-3,
            weight_decay: 0.01,
            epochs: 10,
            model_seed: 0,
            threshold: 0.5,
            pruned_index: false,
            clusters: 8,
            probes: 4,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::default();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| ConfigError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                message,
            };
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err("expected key = value".to_string()))?;
            let rel = |v: &str| -> PathBuf {
                let p = PathBuf::from(v);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            macro_rules! parse {
                ($v:expr) => {
                    $v.parse()
                        .map_err(|_| err(format!("bad value {value:?} for {key}")))?
                };
            }
            match (section.as_str(), key) {
                ("paths", "corpus") => cfg.corpus.push(rel(value)),
                ("paths", "test_corpus") => cfg.test_corpus.push(rel(value)),
                ("paths", "kb") => cfg.kb = rel(value),
                ("paths", "norm") => cfg.norm = Some(rel(value)),
                ("paths", "out") => cfg.out = rel(value),
                ("ontology", "capacity") => cfg.ontology_capacity = parse!(value),
                ("corpus", "window") => cfg.window = parse!(value),
                ("corpus", "sample_target") => cfg.sample_target = parse!(value),
                ("corpus", "sample_seed") => cfg.sample_seed = parse!(value),
                ("corpus", "dedup_first_mention") => cfg.dedup_first_mention = parse!(value),
                ("holdout", "min_fraction") => cfg.holdout_min_fraction = parse!(value),
                ("holdout", "total_target") => cfg.holdout_total_target = parse!(value),
                ("holdout", "seed") => cfg.holdout_seed = parse!(value),
                ("model", "dim") => cfg.dim = parse!(value),
                ("model", "layers") => cfg.layers = parse!(value),
                ("model", "heads") => cfg.heads = parse!(value),
                ("model", "cap") => cfg.cap = parse!(value),
                ("model", "vocab_size") => cfg.vocab_size = parse!(value),
                ("model", "batch") => cfg.batch = parse!(value),
                ("model", "lr_encoder") => cfg.lr_encoder = parse!(value),
                ("model", "lr_type_matrix") => cfg.lr_type_matrix = parse!(value),
                ("model", "weight_decay") => cfg.weight_decay = parse!(value),
                ("model", "epochs") => cfg.epochs = parse!(value),
                ("model", "seed") => cfg.model_seed = parse!(value),
                ("model", "threshold") => cfg.threshold = parse!(value),
                ("baseline", "pruned") => cfg.pruned_index = parse!(value),
                ("baseline", "clusters") => cfg.clusters = parse!(value),
                ("baseline", "probes") => cfg.probes = parse!(value),
                (s, k) => return Err(err(format!("unknown key {k:?} in section {s:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let range_err = |section: &str, key: &str, value: String, reason: &str| {
            Err(ConfigError::OutOfRange {
                section: section.into(),
                key: key.into(),
                value,
                reason: reason.into(),
            })
        };
        if self.ontology_capacity == 0 {
            return range_err("ontology", "capacity", "0".into(), "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.holdout_min_fraction) {
            return range_err(
                "holdout",
                "min_fraction",
                self.holdout_min_fraction.to_string(),
                "must lie in [0, 1]",
            );
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return range_err(
                "model",
                "dim",
                format!("{}/{}", self.dim, self.heads),
                "dim must be a positive multiple of heads",
            );
        }
        if self.vocab_size < crate::tokenizer::BASE_VOCAB {
            return range_err(
                "model",
                "vocab_size",
                self.vocab_size.to_string(),
                "must cover the reserved and byte pieces",
            );
        }
        if self.cap < 8 {
            return range_err("model", "cap", self.cap.to_string(), "must be at least 8");
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return range_err(
                "model",
                "threshold",
                self.threshold.to_string(),
                "must lie in [0, 1)",
            );
        }
        if self.batch == 0 {
            return range_err("model", "batch", "0".into(), "must be at least 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_repeated_corpus_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "[paths]\ncorpus = a.tsv\ncorpus = b.tsv\nkb = kb.tsv\nout = o\n\
             [model]\ndim = 32\nheads = 4\nepochs = 3\n[corpus]\nwindow = 5\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.corpus.len(), 2);
        assert_eq!(cfg.dim, 32);
        assert_eq!(cfg.window, 5);
        assert_eq!(cfg.threshold, 0.5);
        assert!(cfg.corpus[0].ends_with("a.tsv"));
    }

    #[test]
    fn rejects_unknown_key_and_bad_ranges() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "[paths]\nbogus = 1\n").unwrap();
        assert!(matches!(
            RunConfig::load(&path),
            Err(ConfigError::Parse { .. })
        ));
        std::fs::write(&path, "[model]\ndim = 30\nheads = 4\n").unwrap();
        assert!(matches!(
            RunConfig::load(&path),
            Err(ConfigError::OutOfRange { .. })
        ));
    }
}
