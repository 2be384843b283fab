//! Versioned checkpoint container.
//!
//! A UTF-8 text header terminated by a line `end`, followed by every stored
//! array as little-endian `f64` in header order: parameters, then (when an
//! optimizer section is present) all first moments, then all second moments.
//!
//! ```text
//! fcnmt-checkpoint 1
//! variant model2
//! step 3000
//! config d_model 64
//! ...                          one `config` line per model key
//! src_vocab 20                 followed by that many token lines
//! tgt_vocab 20
//! bpe none | bpe <n>           followed by n `left right` lines
//! optimizer none | optimizer <beta1> <beta2> <eps> <step>
//! rng none | rng <seed hex> <stream> <word_pos>
//! cursor <epoch> <batch>
//! tensors <n>                  followed by n `name rank dim…` lines
//! end
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{model_entries, set_model_key};
use crate::data::{Bpe, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Model, Variant};
use crate::tensor::Tensor;
use crate::training::{Adam, DataCursor, TrainState};
use crate::transformer::ModelConfig;

pub const MAGIC: &str = "fcnmt-checkpoint";
pub const VERSION: u32 = 1;

/// Optimizer and data-order state needed to continue training exactly.
#[derive(Clone, Debug)]
pub struct ResumeState {
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub cursor: DataCursor,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub bpe: Option<Bpe>,
    pub step: usize,
    pub resume: Option<ResumeState>,
}

impl Checkpoint {
    /// Full training state, resumable.
    pub fn from_state(
        state: &TrainState,
        src_vocab: &Vocabulary,
        tgt_vocab: &Vocabulary,
        bpe: Option<&Bpe>,
    ) -> Self {
        Checkpoint {
            model: state.model.clone(),
            src_vocab: src_vocab.clone(),
            tgt_vocab: tgt_vocab.clone(),
            bpe: bpe.cloned(),
            step: state.step,
            resume: Some(ResumeState {
                optimizer: state.optimizer.clone(),
                rng: state.rng.clone(),
                cursor: state.cursor,
            }),
        }
    }

    /// Rebuilds the training state; `None` for parameter-only checkpoints.
    pub fn train_state(&self) -> Option<TrainState> {
        self.resume.as_ref().map(|r| TrainState {
            model: self.model.clone(),
            optimizer: r.optimizer.clone(),
            step: self.step,
            rng: r.rng.clone(),
            cursor: r.cursor,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut h = String::new();
        writeln!(h, "{MAGIC} {VERSION}").unwrap();
        writeln!(h, "variant {}", self.model.variant).unwrap();
        writeln!(h, "step {}", self.step).unwrap();
        for (k, v) in model_entries(&self.model.config) {
            writeln!(h, "config {k} {v}").unwrap();
        }
        for (name, vocab) in [
            ("src_vocab", &self.src_vocab),
            ("tgt_vocab", &self.tgt_vocab),
        ] {
            writeln!(h, "{name} {}", vocab.regular_tokens().len()).unwrap();
            for t in vocab.regular_tokens() {
                writeln!(h, "{t}").unwrap();
            }
        }
        match &self.bpe {
            None => writeln!(h, "bpe none").unwrap(),
            Some(b) => {
                writeln!(h, "bpe {}", b.merges().len()).unwrap();
                for (l, r) in b.merges() {
                    writeln!(h, "{l} {r}").unwrap();
                }
            }
        }
        match &self.resume {
            None => {
                writeln!(h, "optimizer none").unwrap();
                writeln!(h, "rng none").unwrap();
                writeln!(h, "cursor 0 0").unwrap();
            }
            Some(r) => {
                let o = &r.optimizer;
                writeln!(
                    h,
                    "optimizer {:?} {:?} {:?} {}",
                    o.beta1, o.beta2, o.eps, o.step
                )
                .unwrap();
                let seed: String = r
                    .rng
                    .get_seed()
                    .iter()
                    .map(|b| format!("{b:02x}"))
                    .collect();
                writeln!(
                    h,
                    "rng {seed} {} {}",
                    r.rng.get_stream(),
                    r.rng.get_word_pos()
                )
                .unwrap();
                writeln!(h, "cursor {} {}", r.cursor.epoch, r.cursor.batch).unwrap();
            }
        }
        let params = &self.model.params;
        writeln!(h, "tensors {}", params.len()).unwrap();
        for (_, name, t) in params.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(h, "{name} {} {}", t.shape().len(), dims.join(" ")).unwrap();
        }
        h.push_str("end\n");

        let mut out = h.into_bytes();
        let mut push = |t: &Tensor| {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (_, _, t) in params.iter() {
            push(t);
        }
        if let Some(r) = &self.resume {
            r.optimizer
                .m
                .iter()
                .chain(&r.optimizer.v)
                .for_each(&mut push);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = HeaderReader { bytes, pos: 0 };
        let first = rd.line()?;
        let version = first
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| Error::checkpoint("not a checkpoint file"))?;
        if version != VERSION {
            return Err(Error::checkpoint(format!(
                "unsupported format version {version} (this build reads {VERSION})"
            )));
        }
        let variant: Variant = rd.field("variant")?.parse()?;
        let step: usize = parse_num("step", rd.field("step")?)?;
        let mut config = ModelConfig::desk(0, 0);
        for (key, _) in model_entries(&config) {
            let rest = rd.field("config")?;
            let (k, v) = rest
                .split_once(' ')
                .ok_or_else(|| Error::checkpoint(format!("malformed config line {rest:?}")))?;
            if k != key {
                return Err(Error::checkpoint(format!(
                    "config key {k} found where {key} was expected"
                )));
            }
            set_model_key(&mut config, k, v).map_err(|e| Error::checkpoint(e.to_string()))?;
        }
        let mut vocab = |name: &str| -> Result<Vocabulary> {
            let n: usize = parse_num(name, rd.field(name)?)?;
            let tokens = (0..n)
                .map(|_| rd.line().map(str::to_string))
                .collect::<Result<Vec<_>>>()?;
            Vocabulary::from_tokens(tokens).map_err(|e| Error::checkpoint(format!("{name}: {e}")))
        };
        let src_vocab = vocab("src_vocab")?;
        let tgt_vocab = vocab("tgt_vocab")?;
        let bpe = match rd.field("bpe")? {
            "none" => None,
            n => {
                let n: usize = parse_num("bpe", n)?;
                let mut merges = Vec::with_capacity(n);
                for _ in 0..n {
                    let line = rd.line()?;
                    let (l, r) = line
                        .split_once(' ')
                        .ok_or_else(|| Error::checkpoint(format!("malformed merge {line:?}")))?;
                    merges.push((l.to_string(), r.to_string()));
                }
                Some(Bpe::from_merges(merges))
            }
        };
        let optimizer = match rd.field("optimizer")? {
            "none" => None,
            rest => {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 4 {
                    return Err(Error::checkpoint(format!(
                        "malformed optimizer line {rest:?}"
                    )));
                }
                Some((
                    parse_num::<f64>("beta1", f[0])?,
                    parse_num::<f64>("beta2", f[1])?,
                    parse_num::<f64>("eps", f[2])?,
                    parse_num::<u64>("optimizer step", f[3])?,
                ))
            }
        };
        let rng = match rd.field("rng")? {
            "none" => None,
            rest => Some(parse_rng(rest)?),
        };
        let cursor = {
            let rest = rd.field("cursor")?;
            let (e, b) = rest
                .split_once(' ')
                .ok_or_else(|| Error::checkpoint(format!("malformed cursor line {rest:?}")))?;
            DataCursor {
                epoch: parse_num("cursor epoch", e)?,
                batch: parse_num("cursor batch", b)?,
            }
        };
        let n: usize = parse_num("tensors", rd.field("tensors")?)?;
        let mut table = Vec::with_capacity(n);
        for _ in 0..n {
            let line = rd.line()?;
            let mut parts = line.split(' ');
            let name = parts.next().unwrap_or_default().to_string();
            let rank: usize = parse_num("rank", parts.next().unwrap_or_default())?;
            let shape = parts
                .map(|d| parse_num("dimension", d))
                .collect::<Result<Vec<usize>>>()?;
            if shape.len() != rank {
                return Err(Error::checkpoint(format!(
                    "tensor {name}: rank {rank} but {} dimensions",
                    shape.len()
                )));
            }
            table.push((name, shape));
        }
        if rd.line()? != "end" {
            return Err(Error::checkpoint("header is missing its end marker"));
        }

        let payload = &bytes[rd.pos..];
        let param_values: usize = table.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let copies = if optimizer.is_some() { 3 } else { 1 };
        let expected = param_values * copies * 8;
        if payload.len() < expected {
            return Err(Error::checkpoint(format!(
                "truncated payload: expected {expected} bytes, found {}",
                payload.len()
            )));
        }
        if payload.len() > expected {
            return Err(Error::checkpoint(format!(
                "{} unexpected bytes after the payload",
                payload.len() - expected
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut read = |shape: &[usize]| {
            let data: Vec<f64> = values.by_ref().take(shape.iter().product()).collect();
            Tensor::new(shape, data).expect("length checked above")
        };
        let tensors: Vec<(String, Tensor)> =
            table.iter().map(|(n, s)| (n.clone(), read(s))).collect();
        let model = Model::from_tensors(config, variant, tensors)?;
        if model.config.src_vocab != src_vocab.len() || model.config.tgt_vocab != tgt_vocab.len() {
            return Err(Error::checkpoint(format!(
                "vocabulary sizes {}/{} disagree with the config ({}/{})",
                src_vocab.len(),
                tgt_vocab.len(),
                model.config.src_vocab,
                model.config.tgt_vocab
            )));
        }
        let resume = match (optimizer, rng) {
            (None, None) => None,
            (Some((beta1, beta2, eps, opt_step)), Some(rng)) => {
                let m = table.iter().map(|(_, s)| read(s)).collect();
                let v = table.iter().map(|(_, s)| read(s)).collect();
                Some(ResumeState {
                    optimizer: Adam {
                        beta1,
                        beta2,
                        eps,
                        step: opt_step,
                        m,
                        v,
                    },
                    rng,
                    cursor,
                })
            }
            _ => {
                return Err(Error::checkpoint(
                    "optimizer and rng sections must be both present or both absent",
                ))
            }
        };
        Ok(Checkpoint {
            model,
            src_vocab,
            tgt_vocab,
            bpe,
            step,
            resume,
        })
    }

    /// Writes through a temporary file and a rename, so a crash mid-write
    /// leaves any previous checkpoint intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::checkpoint("truncated header"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::checkpoint("header is not valid UTF-8"))
    }

    /// The remainder of a line that must start with `name `.
    fn field(&mut self, name: &str) -> Result<&'a str> {
        let line = self.line()?;
        line.strip_prefix(name)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| Error::checkpoint(format!("expected a {name} line, found {line:?}")))
    }
}

fn parse_num<T: std::str::FromStr>(what: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::checkpoint(format!("bad {what} value {s:?}")))
}

fn parse_rng(rest: &str) -> Result<ChaCha8Rng> {
    let f: Vec<&str> = rest.split(' ').collect();
    if f.len() != 3 || f[0].len() != 64 {
        return Err(Error::checkpoint(format!("malformed rng line {rest:?}")));
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&f[0][2 * i..2 * i + 2], 16)
            .map_err(|_| Error::checkpoint("bad rng seed"))?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(parse_num("rng stream", f[1])?);
    rng.set_word_pos(parse_num("rng position", f[2])?);
    Ok(rng)
}
