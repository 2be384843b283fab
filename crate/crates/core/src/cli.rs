//! Batch commands behind the `fcnmt` binary: generate, train, translate,
//! evaluate and the λ sweep. Each takes a parsed configuration and a log sink
//! for progress; results go to files and the returned summaries.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{
    build_vocab, make_synthetic, read_corpus, tokenize, write_corpus, Bpe, SentencePair, Vocabulary,
};
use crate::decoding::{format_trace, trace_beam, translate, DecodeConfig};
use crate::error::{Error, Result};
use crate::eval::{bleu4, bucket_report, token_accuracy, BleuReport, LengthBucketReport};
use crate::model::Model;
use crate::training::{self, TrainData, TrainEvent, TrainState, ValidationRecord, METRICS_HEADER};

/// Corpora and vocabularies for one run, after optional BPE segmentation.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
    pub test: Option<Vec<SentencePair>>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub bpe: Option<Bpe>,
}

fn synthetic(cfg: &RunConfig) -> Result<Option<[Vec<SentencePair>; 3]>> {
    let Some(task) = cfg.task else {
        return Ok(None);
    };
    let make = |size, offset| {
        make_synthetic(
            task,
            size,
            (cfg.min_length, cfg.max_length),
            cfg.alphabet,
            cfg.data_seed.wrapping_add(offset),
        )
    };
    Ok(Some([
        make(cfg.train_size, 0)?,
        make(cfg.dev_size, 1)?,
        make(cfg.test_size, 2)?,
    ]))
}

/// Loads or generates the corpora named by `cfg` and builds vocabularies
/// from the training side.
pub fn prepare_data(cfg: &RunConfig) -> Result<Prepared> {
    let (train, dev, test) = match synthetic(cfg)? {
        Some([train, dev, test]) => (train, dev, (!test.is_empty()).then_some(test)),
        None => {
            let need = |p: &Option<PathBuf>, what: &str| {
                p.as_deref()
                    .ok_or_else(|| Error::config(format!("no {what} corpus given")))
                    .and_then(read_corpus)
            };
            let test = cfg.test_path.as_deref().map(read_corpus).transpose()?;
            (
                need(&cfg.train_path, "train")?,
                need(&cfg.dev_path, "dev")?,
                test,
            )
        }
    };
    if train.is_empty() || dev.is_empty() {
        return Err(Error::input(
            "training and dev corpora must both be non-empty",
        ));
    }
    let bpe = (cfg.bpe_merges > 0).then(|| {
        let words: Vec<Vec<&str>> = train
            .iter()
            .flat_map(|p| [&p.source, &p.target])
            .map(|s| s.iter().map(String::as_str).collect())
            .collect();
        Bpe::learn(&words, cfg.bpe_merges)
    });
    let segment = |pairs: Vec<SentencePair>| match &bpe {
        None => pairs,
        Some(b) => pairs
            .into_iter()
            .map(|p| SentencePair {
                source: b.apply(&p.source),
                target: b.apply(&p.target),
            })
            .collect(),
    };
    let (train, dev, test) = (segment(train), segment(dev), test.map(segment));
    let side = |pick: fn(&SentencePair) -> &Vec<String>| -> Vec<Vec<&str>> {
        train
            .iter()
            .map(|p| pick(p).iter().map(String::as_str).collect())
            .collect()
    };
    let src_vocab = build_vocab(&side(|p| &p.source), cfg.vocab_min_count)?;
    let tgt_vocab = build_vocab(&side(|p| &p.target), cfg.vocab_min_count)?;
    Ok(Prepared {
        train,
        dev,
        test,
        src_vocab,
        tgt_vocab,
        bpe,
    })
}

/// Writes the synthetic corpora of `cfg.task` as `train.tsv`, `dev.tsv` and
/// `test.tsv` under the output directory.
pub fn cmd_generate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let [train, dev, test] =
        synthetic(cfg)?.ok_or_else(|| Error::config("generate needs a task"))?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut written = Vec::new();
    for (name, pairs) in [("train.tsv", train), ("dev.tsv", dev), ("test.tsv", test)] {
        let path = cfg.output_dir.join(name);
        write_corpus(&path, &pairs)?;
        written.push(path);
    }
    Ok(written)
}

/// Token accuracy and BLEU of a model's translations of `pairs`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeldOut {
    pub accuracy: f64,
    pub bleu: f64,
}

pub fn evaluate_model(
    model: &Model,
    pairs: &[SentencePair],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    decode: &DecodeConfig,
) -> Result<HeldOut> {
    let sources: Vec<Vec<usize>> = pairs.iter().map(|p| src_vocab.encode(&p.source)).collect();
    let hyps: Vec<Vec<String>> = translate(model, &sources, decode)?
        .iter()
        .map(|h| tgt_vocab.decode(&h.tokens))
        .collect();
    let refs: Vec<Vec<String>> = pairs.iter().map(|p| p.target.clone()).collect();
    let accuracy = token_accuracy(&hyps, &refs)?;
    let lines = |s: &[Vec<String>]| s.iter().map(|t| t.join(" ")).collect::<Vec<_>>();
    let bleu = bleu4(&lines(&hyps), &lines(&refs))?.bleu;
    Ok(HeldOut { accuracy, bleu })
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<ValidationRecord>,
    pub best_step: usize,
    pub final_step: usize,
    /// The best checkpoint translating the whole dev set.
    pub dev: HeldOut,
    pub test: Option<HeldOut>,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
}

impl TrainSummary {
    pub fn best_record(&self) -> &ValidationRecord {
        self.records
            .iter()
            .find(|r| r.step == self.best_step)
            .expect("best step has a record")
    }
}

fn open_metrics(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if f.metadata()?.len() == 0 {
        writeln!(f, "{METRICS_HEADER}")?;
    }
    Ok(f)
}

/// Trains `cfg.variant`, appending one metrics row per validation and
/// keeping `best.ckpt` (lowest dev cross-entropy) and `last.ckpt` in the
/// output directory. `last.ckpt` is rewritten at every validation, so an
/// aborted run leaves the most recent good state behind.
pub fn cmd_train(cfg: &RunConfig, log: &mut dyn Write) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.src_vocab = data.src_vocab.len();
    model_cfg.tgt_vocab = data.tgt_vocab.len();
    let mut train_cfg = cfg.train.clone();
    if !cfg.variant.has_future() {
        train_cfg.lambda = 0.0;
    }
    let state = match &cfg.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.model.variant != cfg.variant || ck.model.config != model_cfg {
                return Err(Error::config(format!(
                    "{} was trained with a different variant or model configuration",
                    path.display()
                )));
            }
            if ck.src_vocab != data.src_vocab || ck.tgt_vocab != data.tgt_vocab {
                return Err(Error::config(format!(
                    "{} has different vocabularies",
                    path.display()
                )));
            }
            ck.train_state().ok_or_else(|| {
                Error::config(format!("{} holds no optimizer state", path.display()))
            })?
        }
        None => TrainState::new(
            Model::new(model_cfg, cfg.variant, train_cfg.seed)?,
            &train_cfg,
        ),
    };

    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.txt"), cfg.to_text())?;
    let mut metrics = open_metrics(&cfg.metrics_path())?;
    let best_path = cfg.output_dir.join("best.ckpt");
    let last_path = cfg.output_dir.join("last.ckpt");
    let has_future = cfg.variant.has_future();
    // A resumed run re-validates its starting step; that row is already logged.
    let skip_row = cfg.resume.as_ref().map(|_| state.step);
    writeln!(
        log,
        "{} on {} pairs ({} dev), vocab {}/{}, {} parameters",
        cfg.variant,
        data.train.len(),
        data.dev.len(),
        data.src_vocab.len(),
        data.tgt_vocab.len(),
        state.model.params.total_elements()
    )?;
    let td = TrainData {
        train: &data.train,
        dev: &data.dev,
        src_vocab: &data.src_vocab,
        tgt_vocab: &data.tgt_vocab,
    };
    let outcome = training::train(state, &td, &train_cfg, &cfg.decode, |event| {
        let TrainEvent::Validated {
            record,
            is_best,
            state,
        } = event;
        if skip_row != Some(record.step) {
            writeln!(metrics, "{}", record.to_row(has_future))?;
            metrics.flush()?;
        }
        let ck = Checkpoint::from_state(state, &data.src_vocab, &data.tgt_vocab, data.bpe.as_ref());
        ck.save(&last_path)?;
        if is_best {
            ck.save(&best_path)?;
        }
        writeln!(
            log,
            "step {:>6}  dev ce {:.4}  future {}  acc {:.4}  bleu {:.2}{}",
            record.step,
            record.dev.ce,
            if has_future {
                format!("{:.4}", record.dev.future)
            } else {
                "-".into()
            },
            record.accuracy,
            record.bleu,
            if is_best { "  *" } else { "" }
        )?;
        Ok(())
    })?;
    Checkpoint::from_state(
        &outcome.last,
        &data.src_vocab,
        &data.tgt_vocab,
        data.bpe.as_ref(),
    )
    .save(&last_path)?;

    let dev = evaluate_model(
        &outcome.best,
        &data.dev,
        &data.src_vocab,
        &data.tgt_vocab,
        &cfg.decode,
    )?;
    let test = data
        .test
        .as_ref()
        .map(|t| {
            evaluate_model(
                &outcome.best,
                t,
                &data.src_vocab,
                &data.tgt_vocab,
                &cfg.decode,
            )
        })
        .transpose()?;
    let mut report = format!(
        "best_step = {}\nfinal_step = {}\ndev_accuracy = {:.6}\ndev_bleu = {:.4}\n",
        outcome.best_step, outcome.last.step, dev.accuracy, dev.bleu
    );
    if let Some(t) = &test {
        report.push_str(&format!(
            "test_accuracy = {:.6}\ntest_bleu = {:.4}\n",
            t.accuracy, t.bleu
        ));
    }
    fs::write(cfg.output_dir.join("eval.txt"), &report)?;
    write!(log, "{report}")?;
    Ok(TrainSummary {
        records: outcome.records,
        best_step: outcome.best_step,
        final_step: outcome.last.step,
        dev,
        test,
        best_path,
        last_path,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TranslateSummary {
    pub lines: usize,
    /// Source tokens missing from the vocabulary, decoded as `<unk>`.
    pub unknown_tokens: usize,
}

/// Translates `input` line by line into `output`. Blank lines stay blank.
/// With `trace`, the beam expansion of every line is written there.
pub fn cmd_translate(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    decode: &DecodeConfig,
    trace: Option<&Path>,
    log: &mut dyn Write,
) -> Result<TranslateSummary> {
    decode.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    let text = fs::read_to_string(input)?;
    let mut summary = TranslateSummary::default();
    let mut sources = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        summary.lines += 1;
        let mut words = tokenize(line);
        if words.is_empty() {
            continue;
        }
        if let Some(b) = &ck.bpe {
            words = b.apply(&words);
        }
        if words.len() > ck.model.config.max_len {
            return Err(Error::input(format!(
                "line {}: {} tokens exceed the model's max_len {}",
                i + 1,
                words.len(),
                ck.model.config.max_len
            )));
        }
        summary.unknown_tokens += words.iter().filter(|w| !ck.src_vocab.contains(w)).count();
        sources.push(ck.src_vocab.encode(&words));
        rows.push(i);
    }
    let render = |ids: &[usize]| {
        let pieces = ck.tgt_vocab.decode(ids);
        match ck.bpe {
            Some(_) => Bpe::detokenize(&pieces).join(" "),
            None => pieces.join(" "),
        }
    };
    let mut out_lines = vec![String::new(); summary.lines];
    if !sources.is_empty() {
        for (hyp, &row) in translate(&ck.model, &sources, decode)?.iter().zip(&rows) {
            out_lines[row] = render(&hyp.tokens);
        }
    }
    let mut out = String::new();
    for l in &out_lines {
        out.push_str(l);
        out.push('\n');
    }
    fs::write(output, out)?;
    if let Some(path) = trace {
        let mut t = String::new();
        for (src, &row) in sources.iter().zip(&rows) {
            let (_, steps) = trace_beam(&ck.model, src, decode)?;
            t.push_str(&format!("# line {}\n", row + 1));
            t.push_str(&format_trace(&steps, |id| {
                ck.tgt_vocab.token(id).to_string()
            }));
        }
        fs::write(path, t)?;
    }
    if summary.unknown_tokens > 0 {
        writeln!(
            log,
            "warning: {} source tokens not in the vocabulary were mapped to <unk>",
            summary.unknown_tokens
        )?;
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub bleu: BleuReport,
    pub buckets: Option<LengthBucketReport>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::to_string)
        .collect())
}

/// Corpus BLEU of `hyp` against `reference`, plus the source-length bucket
/// report when `source` is given. The key-value report goes to `report`.
pub fn cmd_evaluate(
    hyp: &Path,
    reference: &Path,
    source: Option<&Path>,
    report: Option<&Path>,
    log: &mut dyn Write,
) -> Result<EvalSummary> {
    let (h, r) = (read_lines(hyp)?, read_lines(reference)?);
    if h.len() != r.len() {
        return Err(Error::input(format!(
            "hypothesis file has {} lines but reference file has {}",
            h.len(),
            r.len()
        )));
    }
    let bleu = bleu4(&h, &r)?;
    let buckets = match source {
        Some(src) => {
            let s = read_lines(src)?;
            if s.len() != h.len() {
                return Err(Error::input(format!(
                    "source file has {} lines but hypothesis file has {}",
                    s.len(),
                    h.len()
                )));
            }
            Some(bucket_report(&s, &h, &r)?)
        }
        None => None,
    };
    writeln!(log, "{bleu}")?;
    if let Some(b) = &buckets {
        write!(log, "{b}")?;
    }
    if let Some(path) = report {
        let mut kv = String::new();
        bleu.write_key_values("", &mut kv);
        if let Some(b) = &buckets {
            b.write_key_values(&mut kv);
        }
        fs::write(path, kv)?;
    }
    Ok(EvalSummary { bleu, buckets })
}

pub const SWEEP_HEADER: &str =
    "lambda\tstatus\tbest_step\tdev_ce\tdev_future\tdev_accuracy\tdev_bleu";

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    /// `ok`, or `failed:<error class>`.
    pub status: String,
    pub result: Option<SweepResult>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub best_step: usize,
    pub dev_ce: f64,
    pub dev_future: f64,
    pub dev: HeldOut,
}

impl SweepRow {
    pub fn to_row(&self) -> String {
        match &self.result {
            Some(r) => format!(
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.4}",
                self.lambda,
                self.status,
                r.best_step,
                r.dev_ce,
                r.dev_future,
                r.dev.accuracy,
                r.dev.bleu
            ),
            None => format!("{}\t{}\t-\t-\t-\t-\t-", self.lambda, self.status),
        }
    }
}

/// Trains one model per λ (ascending, shared seed) in `lambda_<λ>`
/// subdirectories and writes `sweep.tsv`. A failing cell is recorded and
/// the sweep moves on.
pub fn cmd_sweep(cfg: &RunConfig, lambdas: &[f64], log: &mut dyn Write) -> Result<Vec<SweepRow>> {
    if !cfg.variant.has_future() {
        return Err(Error::config("a lambda sweep needs model1 or model2"));
    }
    if lambdas.is_empty() || lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::config(
            "lambda values must be finite and non-negative",
        ));
    }
    let mut base = cfg.clone();
    base.lambda_set = true;
    base.validate()?;
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);
    fs::create_dir_all(&cfg.output_dir)?;
    let mut rows = Vec::with_capacity(sorted.len());
    for &lambda in &sorted {
        let mut cell = base.clone();
        cell.train.lambda = lambda;
        cell.output_dir = cfg.output_dir.join(format!("lambda_{lambda}"));
        cell.metrics_path = None;
        writeln!(log, "== lambda {lambda}")?;
        let row = match cmd_train(&cell, log) {
            Ok(s) => {
                let best = s.best_record();
                SweepRow {
                    lambda,
                    status: "ok".into(),
                    result: Some(SweepResult {
                        best_step: s.best_step,
                        dev_ce: best.dev.ce,
                        dev_future: best.dev.future,
                        dev: s.dev,
                    }),
                }
            }
            Err(e) => {
                writeln!(log, "error[{}]: {e}", e.class())?;
                SweepRow {
                    lambda,
                    status: format!("failed:{}", e.class()),
                    result: None,
                }
            }
        };
        rows.push(row);
    }
    let mut table = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        table.push_str(&r.to_row());
        table.push('\n');
    }
    fs::write(cfg.output_dir.join("sweep.tsv"), &table)?;
    write!(log, "{table}")?;
    Ok(rows)
}
