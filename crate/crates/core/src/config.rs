//! Run configuration: flat `key = value` files, presets, and overrides.
//!
//! Every key in [`KEYS`] can appear in a config file or as a command-line
//! flag (`d_model` becomes `--d-model`). Later assignments win, except
//! `preset`, which is applied first and resets everything it covers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{Task, MAX_SEQ_LEN};
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::Variant;
use crate::training::TrainConfig;
use crate::transformer::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::config(format!(
                "unknown preset {other:?} (desk|paper)"
            ))),
        }
    }
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("preset", "desk or paper; applied before every other key"),
    ("variant", "baseline, model1 or model2"),
    (
        "task",
        "synthetic task (copy, reverse, map) used instead of corpus files",
    ),
    ("train_size", "synthetic training pairs"),
    ("dev_size", "synthetic dev pairs"),
    ("test_size", "synthetic test pairs"),
    ("min_length", "shortest synthetic sentence"),
    ("max_length", "longest synthetic sentence"),
    ("alphabet", "synthetic source alphabet size"),
    ("data_seed", "seed for synthetic corpora"),
    ("train", "training corpus (TSV)"),
    ("dev", "dev corpus (TSV)"),
    ("test", "test corpus (TSV)"),
    (
        "bpe_merges",
        "BPE merges learned on the training corpus; 0 disables",
    ),
    (
        "vocab_min_count",
        "minimum token count to enter a vocabulary",
    ),
    (
        "output_dir",
        "directory for checkpoints, metrics and reports",
    ),
    (
        "metrics",
        "metrics log path (default <output_dir>/metrics.tsv)",
    ),
    ("resume", "checkpoint to resume training from"),
    ("d_model", "model width"),
    ("d_ffn", "feed-forward inner width"),
    ("n_heads", "attention heads"),
    ("n_layers", "encoder and decoder layers"),
    ("dropout", "dropout rate"),
    ("max_len", "longest sequence the model accepts"),
    ("positional_encoding", "add sinusoidal position encodings"),
    (
        "tie_output_embedding",
        "reuse the target embedding as the output matrix",
    ),
    ("future_biases", "bias vectors in the future cell"),
    (
        "future_separate_embedding",
        "give the future cell its own embedding",
    ),
    (
        "future_candidate_dropout",
        "dropout on the future cell candidate",
    ),
    ("lambda", "future loss weight (model1 and model2 only)"),
    ("label_smoothing", "label smoothing epsilon"),
    ("smooth_future", "smooth the future loss too"),
    (
        "include_f0_loss",
        "train the initial future state on the first word",
    ),
    (
        "stop_gradient",
        "keep the future loss out of the encoder-decoder",
    ),
    ("beta1", "Adam beta1"),
    ("beta2", "Adam beta2"),
    ("adam_eps", "Adam epsilon"),
    ("lr_scale", "multiplier on the warmup schedule"),
    ("warmup_steps", "warmup steps"),
    ("max_steps", "optimizer steps (alias: steps)"),
    ("batch_size", "sentence pairs per batch"),
    ("seed", "parameter, dropout and shuffling seed"),
    ("validate_every", "steps between validations"),
    (
        "validation_sentences",
        "dev sentences decoded per validation; 0 for all",
    ),
    (
        "stop_at_accuracy",
        "stop once dev token accuracy reaches this; none disables",
    ),
    ("beam_size", "beam width; 1 is greedy"),
    ("max_decode_len", "longest output"),
    (
        "length_penalty",
        "length normalization exponent; 0 disables",
    ),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

/// Sets one [`ModelConfig`] key. Returns `Ok(false)` for keys it does not own.
pub fn set_model_key(cfg: &mut ModelConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "d_model" => cfg.d_model = parse(key, value)?,
        "d_ffn" => cfg.d_ffn = parse(key, value)?,
        "n_heads" => cfg.n_heads = parse(key, value)?,
        "n_layers" => cfg.n_layers = parse(key, value)?,
        "src_vocab" => cfg.src_vocab = parse(key, value)?,
        "tgt_vocab" => cfg.tgt_vocab = parse(key, value)?,
        "dropout" => cfg.dropout = parse(key, value)?,
        "max_len" => cfg.max_len = parse(key, value)?,
        "positional_encoding" => cfg.positional_encoding = parse_bool(key, value)?,
        "tie_output_embedding" => cfg.tie_output_embedding = parse_bool(key, value)?,
        "future_biases" => cfg.future.biases = parse_bool(key, value)?,
        "future_separate_embedding" => cfg.future.separate_embedding = parse_bool(key, value)?,
        "future_candidate_dropout" => cfg.future.candidate_dropout = parse_bool(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// All [`ModelConfig`] fields as `(key, value)` in a fixed order. Floats use
/// the shortest representation that parses back to the same value.
pub fn model_entries(cfg: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("d_model", cfg.d_model.to_string()),
        ("d_ffn", cfg.d_ffn.to_string()),
        ("n_heads", cfg.n_heads.to_string()),
        ("n_layers", cfg.n_layers.to_string()),
        ("src_vocab", cfg.src_vocab.to_string()),
        ("tgt_vocab", cfg.tgt_vocab.to_string()),
        ("dropout", format!("{:?}", cfg.dropout)),
        ("max_len", cfg.max_len.to_string()),
        ("positional_encoding", cfg.positional_encoding.to_string()),
        ("tie_output_embedding", cfg.tie_output_embedding.to_string()),
        ("future_biases", cfg.future.biases.to_string()),
        (
            "future_separate_embedding",
            cfg.future.separate_embedding.to_string(),
        ),
        (
            "future_candidate_dropout",
            cfg.future.candidate_dropout.to_string(),
        ),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub variant: Variant,
    pub task: Option<Task>,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub min_length: usize,
    pub max_length: usize,
    pub alphabet: usize,
    pub data_seed: u64,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub bpe_merges: usize,
    pub vocab_min_count: usize,
    pub output_dir: PathBuf,
    pub metrics_path: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Vocabulary sizes are filled in once the corpus is known.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Whether `lambda` was given explicitly (rejected for the baseline).
    pub lambda_set: bool,
    pub decode: DecodeConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, train) = match preset {
            Preset::Desk => (ModelConfig::desk(0, 0), TrainConfig::desk()),
            Preset::Paper => (ModelConfig::paper(0, 0), TrainConfig::paper()),
        };
        RunConfig {
            preset,
            variant: Variant::Model2,
            task: None,
            train_size: 8000,
            dev_size: 500,
            test_size: 500,
            min_length: 3,
            max_length: 12,
            alphabet: 20,
            data_seed: 1,
            train_path: None,
            dev_path: None,
            test_path: None,
            bpe_merges: 0,
            vocab_min_count: 1,
            output_dir: PathBuf::from("run"),
            metrics_path: None,
            resume: None,
            model,
            train,
            lambda_set: false,
            decode: DecodeConfig::default(),
        }
    }

    /// Builds a configuration from ordered assignments.
    pub fn from_assignments(assignments: &[(String, String)]) -> Result<Self> {
        let preset = match assignments.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, v)) => v.parse()?,
            None => Preset::Desk,
        };
        let mut cfg = RunConfig::preset(preset);
        for (k, v) in assignments {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    /// Assignments from a config file followed by `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut all = match path {
            Some(p) => parse_assignments(&std::fs::read_to_string(p)?)
                .map_err(|e| Error::config(format!("{}: {e}", p.display())))?,
            None => Vec::new(),
        };
        all.extend_from_slice(overrides);
        Self::from_assignments(&all)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = || Some(PathBuf::from(value));
        if set_model_key(&mut self.model, key, value)? {
            return Ok(());
        }
        let t = &mut self.train;
        match key {
            "preset" => self.preset = parse(key, value)?,
            "variant" => self.variant = value.parse()?,
            "task" => self.task = Some(value.parse()?),
            "train_size" => self.train_size = parse(key, value)?,
            "dev_size" => self.dev_size = parse(key, value)?,
            "test_size" => self.test_size = parse(key, value)?,
            "min_length" => self.min_length = parse(key, value)?,
            "max_length" => self.max_length = parse(key, value)?,
            "alphabet" => self.alphabet = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "train" => self.train_path = path(),
            "dev" => self.dev_path = path(),
            "test" => self.test_path = path(),
            "bpe_merges" => self.bpe_merges = parse(key, value)?,
            "vocab_min_count" => self.vocab_min_count = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "metrics" => self.metrics_path = path(),
            "resume" => self.resume = path(),
            "lambda" => {
                t.lambda = parse(key, value)?;
                self.lambda_set = true;
            }
            "label_smoothing" => t.label_smoothing = parse(key, value)?,
            "smooth_future" => t.smooth_future = parse_bool(key, value)?,
            "include_f0_loss" => t.include_f0_loss = parse_bool(key, value)?,
            "stop_gradient" => t.stop_gradient = parse_bool(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "lr_scale" => t.lr_scale = parse(key, value)?,
            "warmup_steps" => t.warmup_steps = parse(key, value)?,
            "max_steps" | "steps" => t.max_steps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "validate_every" => t.validate_every = parse(key, value)?,
            "validation_sentences" => t.validation_sentences = parse(key, value)?,
            "stop_at_accuracy" => {
                t.stop_at_accuracy = match value {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "beam_size" => self.decode.beam_size = parse(key, value)?,
            "max_decode_len" => self.decode.max_decode_len = parse(key, value)?,
            "length_penalty" => self.decode.length_penalty = parse(key, value)?,
            other => return Err(Error::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Checks everything that can be checked before data is loaded.
    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::Baseline && self.lambda_set {
            return Err(Error::config(
                "lambda has no effect on the baseline variant",
            ));
        }
        if self.task.is_none() && (self.train_path.is_none() || self.dev_path.is_none()) {
            return Err(Error::config(
                "either task or both train and dev corpora are required",
            ));
        }
        if self.task.is_some() {
            if self.min_length < 1
                || self.min_length > self.max_length
                || self.max_length > MAX_SEQ_LEN
            {
                return Err(Error::config(format!(
                    "synthetic lengths [{}, {}] must lie within [1, {MAX_SEQ_LEN}]",
                    self.min_length, self.max_length
                )));
            }
            if self.alphabet == 0 || self.train_size == 0 || self.dev_size == 0 {
                return Err(Error::config(
                    "alphabet, train_size and dev_size must be positive",
                ));
            }
        }
        if let Some(a) = self.train.stop_at_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::config(format!(
                    "stop_at_accuracy {a} outside [0, 1]"
                )));
            }
        }
        let mut model = self.model.clone();
        model.src_vocab = model.src_vocab.max(1);
        model.tgt_vocab = model.tgt_vocab.max(1);
        model.validate()?;
        self.train.validate()?;
        self.decode.validate()
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.metrics_path
            .clone()
            .unwrap_or_else(|| self.output_dir.join("metrics.tsv"))
    }

    /// The effective configuration as a config file, vocabulary sizes excluded.
    pub fn to_text(&self) -> String {
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let t = &self.train;
        let mut entries: Vec<(&str, Option<String>)> = vec![
            ("preset", Some(self.preset.name().into())),
            ("variant", Some(self.variant.to_string())),
            ("task", self.task.map(|t| t.to_string())),
            ("train_size", Some(self.train_size.to_string())),
            ("dev_size", Some(self.dev_size.to_string())),
            ("test_size", Some(self.test_size.to_string())),
            ("min_length", Some(self.min_length.to_string())),
            ("max_length", Some(self.max_length.to_string())),
            ("alphabet", Some(self.alphabet.to_string())),
            ("data_seed", Some(self.data_seed.to_string())),
            ("train", opt_path(&self.train_path)),
            ("dev", opt_path(&self.dev_path)),
            ("test", opt_path(&self.test_path)),
            ("bpe_merges", Some(self.bpe_merges.to_string())),
            ("vocab_min_count", Some(self.vocab_min_count.to_string())),
            ("output_dir", Some(self.output_dir.display().to_string())),
            ("metrics", opt_path(&self.metrics_path)),
            ("resume", opt_path(&self.resume)),
        ];
        for (k, v) in model_entries(&self.model) {
            if k != "src_vocab" && k != "tgt_vocab" {
                entries.push((k, Some(v)));
            }
        }
        entries.extend([
            (
                "lambda",
                (self.lambda_set || self.variant.has_future()).then(|| format!("{:?}", t.lambda)),
            ),
            ("label_smoothing", Some(format!("{:?}", t.label_smoothing))),
            ("smooth_future", Some(t.smooth_future.to_string())),
            ("include_f0_loss", Some(t.include_f0_loss.to_string())),
            ("stop_gradient", Some(t.stop_gradient.to_string())),
            ("beta1", Some(format!("{:?}", t.beta1))),
            ("beta2", Some(format!("{:?}", t.beta2))),
            ("adam_eps", Some(format!("{:?}", t.adam_eps))),
            ("lr_scale", Some(format!("{:?}", t.lr_scale))),
            ("warmup_steps", Some(t.warmup_steps.to_string())),
            ("max_steps", Some(t.max_steps.to_string())),
            ("batch_size", Some(t.batch_size.to_string())),
            ("seed", Some(t.seed.to_string())),
            ("validate_every", Some(t.validate_every.to_string())),
            (
                "validation_sentences",
                Some(t.validation_sentences.to_string()),
            ),
            (
                "stop_at_accuracy",
                Some(
                    t.stop_at_accuracy
                        .map_or("none".into(), |a| format!("{a:?}")),
                ),
            ),
            ("beam_size", Some(self.decode.beam_size.to_string())),
            (
                "max_decode_len",
                Some(self.decode.max_decode_len.to_string()),
            ),
            (
                "length_penalty",
                Some(format!("{:?}", self.decode.length_penalty)),
            ),
        ]);
        let mut out = String::new();
        for (k, v) in entries {
            match v {
                Some(v) => writeln!(out, "{k} = {v}").unwrap(),
                None => writeln!(out, "# {k} unset").unwrap(),
            }
        }
        out
    }
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_assignments(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::config(format!("line {}: empty key or value", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let a = parse_assignments("# header\n\nd_model = 32  # narrow\nvariant=model1\n").unwrap();
        assert_eq!(a, kv(&[("d_model", "32"), ("variant", "model1")]));
    }

    #[test]
    fn malformed_line_names_its_number() {
        let err = parse_assignments("seed = 1\noops\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn preset_applies_before_other_keys() {
        let cfg =
            RunConfig::from_assignments(&kv(&[("d_model", "128"), ("preset", "paper")])).unwrap();
        assert_eq!(cfg.model.d_model, 128);
        assert_eq!(cfg.model.n_layers, 6);
        assert_eq!(cfg.train.warmup_steps, 8000);
    }

    #[test]
    fn later_assignments_win() {
        let cfg =
            RunConfig::from_assignments(&kv(&[("seed", "3"), ("steps", "10"), ("seed", "9")]))
                .unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.max_steps, 10);
    }

    #[test]
    fn baseline_rejects_lambda() {
        let cfg = RunConfig::from_assignments(&kv(&[
            ("task", "copy"),
            ("variant", "baseline"),
            ("lambda", "0.5"),
        ]))
        .unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        assert!(matches!(
            RunConfig::from_assignments(&kv(&[("d_modle", "3")])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn text_round_trips() {
        let cfg = RunConfig::from_assignments(&kv(&[
            ("task", "map"),
            ("lambda", "0.3"),
            ("stop_at_accuracy", "0.99"),
            ("length_penalty", "0.6"),
        ]))
        .unwrap();
        let again =
            RunConfig::from_assignments(&parse_assignments(&cfg.to_text()).unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn every_listed_key_is_settable() {
        let candidates = ["1", "true", "desk", "model1", "copy", "x"];
        for (key, _) in KEYS {
            let ok = candidates
                .iter()
                .any(|v| RunConfig::preset(Preset::Desk).set(key, v).is_ok());
            assert!(ok, "{key}");
        }
    }
}
