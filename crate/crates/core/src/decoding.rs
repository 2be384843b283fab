//! Greedy and beam-search decoding.
//!
//! Search is written against the [`Scorer`] trait so it can be checked on
//! hand-built toy scorers. [`TransformerScorer`] adapts a [`Model`]: it
//! re-runs the decoder over the whole prefix at each step and, for the fused
//! variant, threads each hypothesis's own future context.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::data::{BOS, EOS, MAX_SEQ_LEN, PAD};
use crate::error::{Error, Result};
use crate::futurecost;
use crate::model::Model;
use crate::tensor::{Graph, Tensor};
use crate::transformer;

/// Something that extends equal-length token prefixes one token at a time.
pub trait Scorer {
    /// Per-hypothesis state carried across steps.
    type State: Clone;
    /// Intermediate result of scoring a prefix, consumed by [`Scorer::advance`].
    type Step;

    /// Log-probabilities of the next token for every prefix. All prefixes
    /// start with BOS and have the same length.
    fn score(
        &self,
        prefixes: &[&[usize]],
        states: &[&Self::State],
    ) -> Result<Vec<(Vec<f64>, Self::Step)>>;

    /// States after appending `token` to each scored prefix.
    fn advance(&self, items: &[(&Self::State, &Self::Step, usize)]) -> Result<Vec<Self::State>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Hard cap on emitted tokens (EOS included).
    pub max_decode_len: usize,
    /// `α` in the `((5 + len) / 6)^α` length normalizer; 0 ranks by raw log-probability.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 1,
            max_decode_len: MAX_SEQ_LEN,
            length_penalty: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::config("beam_size must be at least 1"));
        }
        if self.max_decode_len == 0 || self.max_decode_len > MAX_SEQ_LEN {
            return Err(Error::config(format!(
                "max_decode_len must be in 1..={MAX_SEQ_LEN}"
            )));
        }
        if self.length_penalty.is_nan() || self.length_penalty < 0.0 {
            return Err(Error::config("length_penalty must be non-negative"));
        }
        Ok(())
    }

    /// Step limit for a source of `src_len` tokens.
    pub fn limit_for(&self, src_len: usize) -> usize {
        self.max_decode_len.min(2 * src_len + 10)
    }

    fn normalize(&self, score: f64, len: usize) -> f64 {
        if self.length_penalty == 0.0 {
            score
        } else {
            score / ((5.0 + len as f64) / 6.0).powf(self.length_penalty)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens without BOS or EOS.
    pub tokens: Vec<usize>,
    /// Log-probability of each emitted token, EOS included when finished.
    pub log_probs: Vec<f64>,
    /// Running sum of `log_probs`.
    pub score: f64,
    /// Length-normalized score used for ranking.
    pub ranking_score: f64,
    /// False when the step limit cut the hypothesis off before EOS.
    pub finished: bool,
}

struct Live<S> {
    prefix: Vec<usize>,
    log_probs: Vec<f64>,
    score: f64,
    state: S,
}

impl<S> Live<S> {
    fn start(state: S) -> Self {
        Live {
            prefix: vec![BOS],
            log_probs: Vec::new(),
            score: 0.0,
            state,
        }
    }

    fn close(self, finished: bool, cfg: &DecodeConfig) -> Hypothesis {
        let len = self.log_probs.len();
        Hypothesis {
            tokens: self.prefix[1..].to_vec(),
            ranking_score: cfg.normalize(self.score, len),
            log_probs: self.log_probs,
            score: self.score,
            finished,
        }
    }
}

/// Descending score, then ascending token sequence.
fn rank(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then_with(|| a_tokens.cmp(b_tokens))
}

fn check_row(logp: &[f64], vocab: Option<usize>) -> Result<usize> {
    if logp.is_empty() || vocab.is_some_and(|v| v != logp.len()) {
        return Err(Error::Contract(
            "scorer returned rows of inconsistent width".into(),
        ));
    }
    Ok(logp.len())
}

/// Independent greedy search from each start state. `limits[i]` caps the
/// number of tokens emitted for start `i`.
pub fn greedy_search<S: Scorer>(
    scorer: &S,
    starts: Vec<S::State>,
    limits: &[usize],
) -> Result<Vec<Hypothesis>> {
    if starts.len() != limits.len() {
        return Err(Error::input("one step limit per start state required"));
    }
    let cfg = DecodeConfig::default();
    let mut done: Vec<Option<Hypothesis>> = vec![None; limits.len()];
    let mut live = Vec::with_capacity(limits.len());
    for (i, state) in starts.into_iter().enumerate() {
        if limits[i] == 0 {
            done[i] = Some(Live::start(()).close(false, &cfg));
        } else {
            live.push((i, Live::start(state)));
        }
    }
    while !live.is_empty() {
        let prefixes: Vec<&[usize]> = live.iter().map(|(_, l)| l.prefix.as_slice()).collect();
        let states: Vec<&S::State> = live.iter().map(|(_, l)| &l.state).collect();
        let scored = scorer.score(&prefixes, &states)?;
        let mut choices = Vec::with_capacity(live.len());
        for ((_, l), (logp, _)) in live.iter().zip(&scored) {
            check_row(logp, None)?;
            let mut best = 0;
            let mut best_score = l.score + logp[0];
            for (v, &lp) in logp.iter().enumerate().skip(1) {
                let s = l.score + lp;
                if s > best_score {
                    best = v;
                    best_score = s;
                }
            }
            choices.push((best, logp[best], best_score));
        }
        let advancing: Vec<usize> = (0..live.len())
            .filter(|&k| choices[k].0 != EOS && live[k].1.log_probs.len() + 1 < limits[live[k].0])
            .collect();
        let items: Vec<_> = advancing
            .iter()
            .map(|&k| (&live[k].1.state, &scored[k].1, choices[k].0))
            .collect();
        let mut next_states = scorer.advance(&items)?.into_iter();
        let mut next = Vec::with_capacity(advancing.len());
        for (k, (i, mut l)) in live.into_iter().enumerate() {
            let (tok, lp, score) = choices[k];
            l.log_probs.push(lp);
            l.score = score;
            if tok == EOS {
                done[i] = Some(l.close(true, &cfg));
                continue;
            }
            l.prefix.push(tok);
            if l.log_probs.len() >= limits[i] {
                done[i] = Some(l.close(false, &cfg));
                continue;
            }
            l.state = next_states
                .next()
                .expect("one state per advancing hypothesis");
            next.push((i, l));
        }
        live = next;
    }
    Ok(done
        .into_iter()
        .map(|h| h.expect("every start decoded"))
        .collect())
}

/// One candidate kept at a beam step.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    /// Emitted tokens including the one chosen at this step.
    pub tokens: Vec<usize>,
    pub score: f64,
    /// Chosen token was EOS.
    pub finished: bool,
}

/// Expansion record of one beam step.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub step: usize,
    /// Number of (hypothesis, token) pairs scored.
    pub candidates: usize,
    /// Candidates kept, best first.
    pub kept: Vec<TraceEntry>,
    /// Best ranking score among hypotheses closed so far.
    pub best_closed: Option<f64>,
}

/// Beam search from a single start state. Returns every closed hypothesis,
/// best first, and the per-step expansion record.
pub fn beam_search_traced<S: Scorer>(
    scorer: &S,
    start: S::State,
    limit: usize,
    cfg: &DecodeConfig,
) -> Result<(Vec<Hypothesis>, Vec<TraceStep>)> {
    cfg.validate()?;
    let mut live = vec![Live::start(start)];
    let mut closed: Vec<Hypothesis> = Vec::new();
    let mut trace = Vec::new();
    let mut vocab = None;
    let mut step = 0;
    if limit == 0 {
        closed.extend(live.drain(..).map(|l| l.close(false, cfg)));
    }
    while !live.is_empty() {
        let prefixes: Vec<&[usize]> = live.iter().map(|l| l.prefix.as_slice()).collect();
        let states: Vec<&S::State> = live.iter().map(|l| &l.state).collect();
        let scored = scorer.score(&prefixes, &states)?;
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (k, (logp, _)) in scored.iter().enumerate() {
            vocab = Some(check_row(logp, vocab)?);
            candidates.extend(
                logp.iter()
                    .enumerate()
                    .map(|(v, &lp)| (live[k].score + lp, k, v)),
            );
        }
        let total = candidates.len();
        let order =
            |&(s, k, v): &(f64, usize, usize)| (s, [&live[k].prefix[1..], &[v][..]].concat());
        candidates.sort_by(|a, b| {
            let (sa, ta) = order(a);
            let (sb, tb) = order(b);
            rank(sa, &ta, sb, &tb)
        });
        candidates.truncate(cfg.beam_size);
        step += 1;

        let at_limit = live[0].log_probs.len() + 1 >= limit;
        let mut kept = Vec::with_capacity(candidates.len());
        let mut items = Vec::new();
        let mut next = Vec::new();
        for &(score, k, v) in &candidates {
            let parent = &live[k];
            let mut prefix = parent.prefix.clone();
            let mut log_probs = parent.log_probs.clone();
            log_probs.push(scored[k].0[v]);
            kept.push(TraceEntry {
                tokens: [&prefix[1..], &[v][..]].concat(),
                score,
                finished: v == EOS,
            });
            if v == EOS {
                let l = Live {
                    prefix,
                    log_probs,
                    score,
                    state: (),
                };
                closed.push(l.close(true, cfg));
                continue;
            }
            prefix.push(v);
            if at_limit {
                let l = Live {
                    prefix,
                    log_probs,
                    score,
                    state: (),
                };
                closed.push(l.close(false, cfg));
                continue;
            }
            items.push((&parent.state, &scored[k].1, v));
            next.push((prefix, log_probs, score));
        }
        let states = scorer.advance(&items)?;
        let best_closed = closed.iter().map(|h| h.ranking_score).reduce(f64::max);
        trace.push(TraceStep {
            step,
            candidates: total,
            kept,
            best_closed,
        });
        live = next
            .into_iter()
            .zip(states)
            .map(|((prefix, log_probs, score), state)| Live {
                prefix,
                log_probs,
                score,
                state,
            })
            .collect();
    }
    closed.sort_by(|a, b| rank(a.ranking_score, &a.tokens, b.ranking_score, &b.tokens));
    Ok((closed, trace))
}

pub fn beam_search_with<S: Scorer>(
    scorer: &S,
    start: S::State,
    limit: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    Ok(beam_search_traced(scorer, start, limit, cfg)?.0)
}

/// Decoding state of one hypothesis under a [`TransformerScorer`].
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState {
    /// Row of the encoded source batch this hypothesis translates.
    pub row: usize,
    /// Future context from the previous step; only tracked by the fused variant.
    pub future: Option<Vec<f64>>,
}

/// Scores prefixes with a [`Model`] against a batch of encoded sources.
pub struct TransformerScorer<'a> {
    model: &'a Model,
    memory: Tensor,
    src_pad_mask: Vec<bool>,
    src_len: usize,
}

fn pad_sources(sources: &[Vec<usize>]) -> Result<(Vec<usize>, Vec<bool>, usize)> {
    if sources.iter().any(Vec::is_empty) {
        return Err(Error::input("cannot decode an empty source sentence"));
    }
    let len = sources.iter().map(Vec::len).max().unwrap_or(0);
    let mut ids = vec![PAD; sources.len() * len];
    let mut mask = vec![true; sources.len() * len];
    for (r, s) in sources.iter().enumerate() {
        ids[r * len..r * len + s.len()].copy_from_slice(s);
        mask[r * len..r * len + s.len()].fill(false);
    }
    Ok((ids, mask, len))
}

impl<'a> TransformerScorer<'a> {
    /// Encodes `sources` and returns the scorer with one start state per source.
    pub fn new(model: &'a Model, sources: &[Vec<usize>]) -> Result<(Self, Vec<DecodeState>)> {
        let batch = sources.len();
        if batch == 0 {
            return Err(Error::input("no sources to decode"));
        }
        let (ids, src_pad_mask, src_len) = pad_sources(sources)?;
        let mut g = Graph::eval();
        let memory = transformer::encode(&mut g, model, &ids, &src_pad_mask, batch)?;
        let futures: Vec<Option<Vec<f64>>> = if model.variant.fuses() {
            let f0 = futurecost::init_future_state(&mut g, model, memory, &src_pad_mask, batch)?;
            g.value(f0)
                .data()
                .chunks(model.config.d_model)
                .map(|r| Some(r.to_vec()))
                .collect()
        } else {
            vec![None; batch]
        };
        let starts = futures
            .into_iter()
            .enumerate()
            .map(|(row, future)| DecodeState { row, future })
            .collect();
        let scorer = TransformerScorer {
            model,
            memory: g.value(memory).clone(),
            src_pad_mask,
            src_len,
        };
        Ok((scorer, starts))
    }

    /// Source length of row `row`.
    pub fn source_len(&self, row: usize) -> usize {
        let mask = &self.src_pad_mask[row * self.src_len..(row + 1) * self.src_len];
        mask.iter().filter(|&&m| !m).count()
    }
}

impl Scorer for TransformerScorer<'_> {
    type State = DecodeState;
    /// Top decoder state at the scored position.
    type Step = Vec<f64>;

    fn score(
        &self,
        prefixes: &[&[usize]],
        states: &[&DecodeState],
    ) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let n = prefixes.len();
        let len = prefixes[0].len();
        if prefixes.iter().any(|p| p.len() != len) {
            return Err(Error::Contract(
                "prefixes scored together must have equal length".into(),
            ));
        }
        let d = self.model.config.d_model;
        let (j, row_size) = (self.src_len, self.src_len * d);
        let mut mem = Vec::with_capacity(n * row_size);
        let mut mask = Vec::with_capacity(n * j);
        for s in states {
            mem.extend_from_slice(&self.memory.data()[s.row * row_size..(s.row + 1) * row_size]);
            mask.extend_from_slice(&self.src_pad_mask[s.row * j..(s.row + 1) * j]);
        }
        let ids: Vec<usize> = prefixes.concat();
        let mut g = Graph::eval();
        let memory = g.constant(Tensor::new(&[n, j, d], mem)?);
        let h = transformer::decode(
            &mut g,
            self.model,
            &ids,
            &vec![false; n * len],
            memory,
            &mask,
            n,
        )?;
        let last = g.narrow(h, 1, len - 1, 1)?;
        let last = g.reshape(last, &[n, d])?;
        let top = if self.model.variant.fuses() {
            let mut f = Vec::with_capacity(n * d);
            for s in states {
                let row = s.future.as_ref().ok_or_else(|| {
                    Error::Contract("fused decoding without a future context".into())
                })?;
                f.extend_from_slice(row);
            }
            let f = g.constant(Tensor::new(&[n, d], f)?);
            futurecost::fuse_context(&mut g, self.model, last, f)?.0
        } else {
            last
        };
        let logits = transformer::output_logits(&mut g, self.model, top)?;
        let logp = g.log_softmax(logits);
        let v = g.value(logp).last_dim();
        let hidden = g.value(last).data().chunks(d);
        Ok(g.value(logp)
            .data()
            .chunks(v)
            .zip(hidden)
            .map(|(lp, h)| (lp.to_vec(), h.to_vec()))
            .collect())
    }

    fn advance(&self, items: &[(&DecodeState, &Vec<f64>, usize)]) -> Result<Vec<DecodeState>> {
        if !self.model.variant.fuses() || items.is_empty() {
            return Ok(items.iter().map(|(s, _, _)| (*s).clone()).collect());
        }
        let d = self.model.config.d_model;
        let mut g = Graph::eval();
        let h: Vec<f64> = items
            .iter()
            .flat_map(|(_, h, _)| h.iter().copied())
            .collect();
        let h = g.constant(Tensor::new(&[items.len(), d], h)?);
        let tokens: Vec<usize> = items.iter().map(|(_, _, t)| *t).collect();
        let f = futurecost::future_step(&mut g, self.model, &tokens, h)?;
        Ok(g.value(f)
            .data()
            .chunks(d)
            .zip(items)
            .map(|(f, (s, _, _))| DecodeState {
                row: s.row,
                future: Some(f.to_vec()),
            })
            .collect())
    }
}

/// Sentences decoded together by [`greedy_decode`].
pub const DECODE_BATCH: usize = 64;

/// Greedy translation of every source, best token per step.
pub fn greedy_decode(
    model: &Model,
    sources: &[Vec<usize>],
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(DECODE_BATCH) {
        let (scorer, starts) = TransformerScorer::new(model, chunk)?;
        let limits: Vec<usize> = chunk.iter().map(|s| cfg.limit_for(s.len())).collect();
        for mut h in greedy_search(&scorer, starts, &limits)? {
            h.ranking_score = cfg.normalize(h.score, h.log_probs.len());
            out.push(h);
        }
    }
    Ok(out)
}

/// Ranked hypotheses for one source.
pub fn beam_search(model: &Model, source: &[usize], cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    Ok(trace_beam(model, source, cfg)?.0)
}

pub fn trace_beam(
    model: &Model,
    source: &[usize],
    cfg: &DecodeConfig,
) -> Result<(Vec<Hypothesis>, Vec<TraceStep>)> {
    let (scorer, mut starts) = TransformerScorer::new(model, &[source.to_vec()])?;
    beam_search_traced(&scorer, starts.remove(0), cfg.limit_for(source.len()), cfg)
}

/// Best hypothesis per source: greedy search for beam size 1, beam search otherwise.
pub fn translate(
    model: &Model,
    sources: &[Vec<usize>],
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    if cfg.beam_size == 1 {
        return greedy_decode(model, sources, cfg);
    }
    sources
        .iter()
        .map(|s| Ok(beam_search(model, s, cfg)?.remove(0)))
        .collect()
}

/// Renders a trace as text, one tab-separated line per step:
/// `step`, `candidates`, `best_closed` (or `-`), then one
/// `score<space>tokens` field per kept candidate, with `*` after the tokens of
/// candidates that ended in EOS.
pub fn format_trace(trace: &[TraceStep], token: impl Fn(usize) -> String) -> String {
    let mut out = String::new();
    for s in trace {
        let best = s.best_closed.map_or("-".to_string(), |b| format!("{b:.6}"));
        write!(out, "{}\t{}\t{}", s.step, s.candidates, best).unwrap();
        for e in &s.kept {
            let words: Vec<String> = e.tokens.iter().map(|&t| token(t)).collect();
            write!(out, "\t{:.6} {}", e.score, words.join(" ")).unwrap();
            if e.finished {
                out.push('*');
            }
        }
        out.push('\n');
    }
    out
}
