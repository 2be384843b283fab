//! Vocabularies, corpus I/O, synthetic parallel corpora and padded batches.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
/// Sentence end, `</s>`. Also the token that seeds the initial future state.
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Longest source or target sentence (in tokens) the engine accepts.
pub const MAX_SEQ_LEN: usize = 64;

/// Bidirectional token/id map with four reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit token list (reserved entries are prepended).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (i, tok) in all.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::input(format!("invalid vocabulary token {tok:?}")));
            }
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::input(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocabulary { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens
            .get(id)
            .map(String::as_str)
            .unwrap_or(RESERVED[UNK])
    }

    /// Non-reserved tokens in id order.
    pub fn regular_tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Ids back to tokens, stopping at the first EOS. PAD and BOS are dropped.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id).to_string())
            .collect()
    }
}

/// Counts tokens and keeps those seen at least `min_count` times.
///
/// Ids are assigned by descending count, ties broken by token text, so the
/// result does not depend on corpus order.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Vocabulary> {
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::input(
            "cannot build a vocabulary from an empty corpus",
        ));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for sentence in corpus {
        for tok in sentence {
            *counts.entry(tok.as_ref()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_count.max(1) && !RESERVED.contains(&t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()))
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl SentencePair {
    pub fn new(source: Vec<String>, target: Vec<String>) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::input("sentence pair with an empty side"));
        }
        Ok(SentencePair { source, target })
    }

    /// Parses one `source<TAB>target` corpus line.
    pub fn parse_line(line: &str) -> Result<Self> {
        let (src, tgt) = line.split_once('\t').ok_or_else(|| {
            Error::input(format!("corpus line without a TAB separator: {line:?}"))
        })?;
        if tgt.contains('\t') {
            return Err(Error::input(format!(
                "corpus line with more than one TAB: {line:?}"
            )));
        }
        Self::new(tokenize(src), tokenize(tgt))
    }

    pub fn to_line(&self) -> String {
        format!("{}\t{}", self.source.join(" "), self.target.join(" "))
    }
}

pub fn parse_corpus(text: &str) -> Result<Vec<SentencePair>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            SentencePair::parse_line(l).map_err(|e| Error::input(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn read_corpus(path: &Path) -> Result<Vec<SentencePair>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::input(format!("reading corpus {}: {e}", path.display())))?;
    parse_corpus(&text)
}

pub fn write_corpus(path: &Path, pairs: &[SentencePair]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&p.to_line());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Synthetic translation tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Copy,
    Reverse,
    /// Each source symbol is replaced through a fixed bijection onto a
    /// disjoint target alphabet.
    Map,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "map" => Ok(Task::Map),
            other => Err(Error::config(format!(
                "unknown task {other:?} (copy|reverse|map)"
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::Map => "map",
        })
    }
}

/// Name of source symbol `i`: `a`..`z`, then `a1`..`z1`, and so on.
pub fn symbol(i: usize) -> String {
    let letter = (b'a' + (i % 26) as u8) as char;
    match i / 26 {
        0 => letter.to_string(),
        round => format!("{letter}{round}"),
    }
}

/// The map task's bijection, as a permutation of symbol indices.
///
/// It depends only on the alphabet size, so train/dev/test corpora drawn with
/// different seeds share one "language pair".
pub fn map_permutation(vocab_size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d61_705f_7461_736b ^ vocab_size as u64);
    let mut perm: Vec<usize> = (0..vocab_size).collect();
    perm.shuffle(&mut rng);
    perm
}

pub fn map_symbol(perm: &[usize], i: usize) -> String {
    symbol(perm[i]).to_uppercase()
}

pub fn make_synthetic(
    task: Task,
    size: usize,
    len_range: (usize, usize),
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<SentencePair>> {
    let (lo, hi) = len_range;
    if lo < 1 || hi > MAX_SEQ_LEN || lo > hi {
        return Err(Error::input(format!(
            "length range [{lo}, {hi}] must lie within [1, {MAX_SEQ_LEN}]"
        )));
    }
    if vocab_size == 0 {
        return Err(Error::input(
            "synthetic alphabet must have at least one symbol",
        ));
    }
    let perm = map_permutation(vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(size);
    for _ in 0..size {
        let len = rng.gen_range(lo..=hi);
        let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab_size)).collect();
        let source: Vec<String> = ids.iter().map(|&i| symbol(i)).collect();
        let target = match task {
            Task::Copy => source.clone(),
            Task::Reverse => source.iter().rev().cloned().collect(),
            Task::Map => ids.iter().map(|&i| map_symbol(&perm, i)).collect(),
        };
        pairs.push(SentencePair { source, target });
    }
    Ok(pairs)
}

/// Padded id matrices for one minibatch.
///
/// Targets are teacher-forced: `tgt_in = [BOS, y…]`, `tgt_out = [y…, EOS]`.
/// Masks are `true` at padded positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src_ids: Vec<usize>,
    pub tgt_in_ids: Vec<usize>,
    pub tgt_out_ids: Vec<usize>,
    pub src_pad_mask: Vec<bool>,
    pub tgt_pad_mask: Vec<bool>,
    /// `[tgt_len, tgt_len]`, `true` where attention is blocked (`j > i`).
    pub causal_mask: Vec<bool>,
}

impl Batch {
    /// Batches pairs in the given order, padding to the longest member.
    pub fn from_pairs(
        pairs: &[&SentencePair],
        src_vocab: &Vocabulary,
        tgt_vocab: &Vocabulary,
    ) -> Result<Self> {
        let src: Vec<Vec<usize>> = pairs.iter().map(|p| src_vocab.encode(&p.source)).collect();
        let tgt: Vec<Vec<usize>> = pairs.iter().map(|p| tgt_vocab.encode(&p.target)).collect();
        Self::from_ids(&src, &tgt)
    }

    pub fn from_ids(src: &[Vec<usize>], tgt: &[Vec<usize>]) -> Result<Self> {
        if src.is_empty() || src.len() != tgt.len() {
            return Err(Error::input(
                "batch needs equally many (and at least one) sources and targets",
            ));
        }
        for (s, t) in src.iter().zip(tgt) {
            if s.is_empty() || t.is_empty() {
                return Err(Error::input("empty sentence in batch"));
            }
            if s.len() > MAX_SEQ_LEN || t.len() > MAX_SEQ_LEN {
                return Err(Error::input(format!(
                    "sentence pair of lengths ({}, {}) exceeds the maximum of {MAX_SEQ_LEN}",
                    s.len(),
                    t.len()
                )));
            }
        }
        let size = src.len();
        let src_len = src.iter().map(Vec::len).max().unwrap();
        let tgt_len = tgt.iter().map(Vec::len).max().unwrap() + 1;
        let mut b = Batch {
            size,
            src_len,
            tgt_len,
            src_ids: vec![PAD; size * src_len],
            tgt_in_ids: vec![PAD; size * tgt_len],
            tgt_out_ids: vec![PAD; size * tgt_len],
            src_pad_mask: vec![true; size * src_len],
            tgt_pad_mask: vec![true; size * tgt_len],
            causal_mask: causal_mask(tgt_len),
        };
        for (r, (s, t)) in src.iter().zip(tgt).enumerate() {
            for (j, &id) in s.iter().enumerate() {
                b.src_ids[r * src_len + j] = id;
                b.src_pad_mask[r * src_len + j] = false;
            }
            let row = r * tgt_len;
            b.tgt_in_ids[row] = BOS;
            for (i, &id) in t.iter().enumerate() {
                b.tgt_in_ids[row + i + 1] = id;
                b.tgt_out_ids[row + i] = id;
            }
            b.tgt_out_ids[row + t.len()] = EOS;
            for i in 0..=t.len() {
                b.tgt_pad_mask[row + i] = false;
            }
        }
        Ok(b)
    }

    pub fn src_row(&self, r: usize) -> &[usize] {
        &self.src_ids[r * self.src_len..(r + 1) * self.src_len]
    }

    pub fn tgt_in_row(&self, r: usize) -> &[usize] {
        &self.tgt_in_ids[r * self.tgt_len..(r + 1) * self.tgt_len]
    }

    pub fn tgt_out_row(&self, r: usize) -> &[usize] {
        &self.tgt_out_ids[r * self.tgt_len..(r + 1) * self.tgt_len]
    }

    /// Unpadded source ids of row `r`.
    pub fn source_ids(&self, r: usize) -> Vec<usize> {
        let mask = &self.src_pad_mask[r * self.src_len..(r + 1) * self.src_len];
        self.src_row(r)
            .iter()
            .zip(mask)
            .filter(|(_, &m)| !m)
            .map(|(&i, _)| i)
            .collect()
    }

    /// Unpadded target ids of row `r`, without BOS/EOS.
    pub fn target_ids(&self, r: usize) -> Vec<usize> {
        let mask = &self.tgt_pad_mask[r * self.tgt_len..(r + 1) * self.tgt_len];
        let n = mask.iter().filter(|&&m| !m).count();
        self.tgt_in_row(r)[1..n].to_vec()
    }

    /// Number of non-pad target positions (words plus EOS).
    pub fn target_tokens(&self) -> usize {
        self.tgt_pad_mask.iter().filter(|&&m| !m).count()
    }
}

/// `[len, len]` mask, `true` strictly above the diagonal.
pub fn causal_mask(len: usize) -> Vec<bool> {
    let mut m = vec![false; len * len];
    for i in 0..len {
        for j in i + 1..len {
            m[i * len + j] = true;
        }
    }
    m
}

/// Cuts `pairs` into batches of similar length in a `seed`-determined order.
///
/// Pairs are shuffled, stably sorted by (target, source) length so each batch
/// carries little padding, and the resulting batches are shuffled again.
pub fn make_batches(
    pairs: &[SentencePair],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::input("batch size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| (pairs[i].target.len(), pairs[i].source.len()));
    let mut batches = order
        .chunks(batch_size)
        .map(|chunk| {
            let members: Vec<&SentencePair> = chunk.iter().map(|&i| &pairs[i]).collect();
            Batch::from_pairs(&members, src_vocab, tgt_vocab)
        })
        .collect::<Result<Vec<_>>>()?;
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// Batches in corpus order, for evaluation.
pub fn sequential_batches(
    pairs: &[SentencePair],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    batch_size: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::input("batch size must be at least 1"));
    }
    pairs
        .chunks(batch_size)
        .map(|chunk| {
            let members: Vec<&SentencePair> = chunk.iter().collect();
            Batch::from_pairs(&members, src_vocab, tgt_vocab)
        })
        .collect()
}

const END_OF_WORD: &str = "</w>";
const CONTINUATION: &str = "@@";

/// Small byte-pair-encoding model: greedily merges the most frequent adjacent
/// symbol pair a fixed number of times.
///
/// Segmented words mark non-final pieces with a trailing `@@`, so
/// [`Bpe::detokenize`] is a plain join-and-strip.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Bpe {
    merges: Vec<(String, String)>,
}

impl Bpe {
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        Bpe { merges }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn learn<S: AsRef<str>>(corpus: &[Vec<S>], num_merges: usize) -> Self {
        let mut word_counts: HashMap<&str, usize> = HashMap::new();
        for sentence in corpus {
            for w in sentence {
                *word_counts.entry(w.as_ref()).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<String>, usize)> = word_counts
            .into_iter()
            .map(|(w, c)| (split_chars(w), c))
            .collect();
        words.sort();
        let mut merges = Vec::new();
        for _ in 0..num_merges {
            let mut pair_counts: HashMap<(&str, &str), usize> = HashMap::new();
            for (syms, c) in &words {
                for w in syms.windows(2) {
                    *pair_counts.entry((&w[0], &w[1])).or_default() += c;
                }
            }
            let best = pair_counts
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            let Some(((l, r), _)) = best else { break };
            let (l, r) = (l.to_string(), r.to_string());
            for (syms, _) in &mut words {
                *syms = merge_pair(syms, &l, &r);
            }
            merges.push((l, r));
        }
        Bpe { merges }
    }

    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = split_chars(word);
        for (l, r) in &self.merges {
            syms = merge_pair(&syms, l, r);
        }
        let last = syms.len() - 1;
        syms.into_iter()
            .enumerate()
            .filter_map(|(i, s)| {
                if i == last {
                    let s = s.strip_suffix(END_OF_WORD).unwrap_or(&s).to_string();
                    (!s.is_empty()).then_some(s)
                } else {
                    Some(format!("{s}{CONTINUATION}"))
                }
            })
            .collect()
    }

    pub fn apply<S: AsRef<str>>(&self, sentence: &[S]) -> Vec<String> {
        sentence
            .iter()
            .flat_map(|w| self.segment_word(w.as_ref()))
            .collect()
    }

    pub fn detokenize<S: AsRef<str>>(pieces: &[S]) -> Vec<String> {
        let mut words = Vec::new();
        let mut current = String::new();
        for p in pieces {
            let p = p.as_ref();
            match p.strip_suffix(CONTINUATION) {
                Some(stem) => current.push_str(stem),
                None => {
                    current.push_str(p);
                    words.push(std::mem::take(&mut current));
                }
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
        words
    }
}

fn split_chars(word: &str) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    if let Some(last) = syms.last_mut() {
        last.push_str(END_OF_WORD);
    }
    syms
}

fn merge_pair(syms: &[String], l: &str, r: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
            out.push(format!("{l}{r}"));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lines(corpus: &[&str]) -> Vec<Vec<String>> {
        corpus.iter().map(|l| tokenize(l)).collect()
    }

    #[test]
    fn vocab_sizes_and_min_count() {
        let corpus = lines(&["a b", "a"]);
        let v = build_vocab(&corpus, 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(
            (v.id("<pad>"), v.id("<s>"), v.id("</s>"), v.id("<unk>")),
            (PAD, BOS, EOS, UNK)
        );
        let v2 = build_vocab(&corpus, 2).unwrap();
        assert_eq!(v2.len(), 5);
        assert_eq!(v2.id("a"), 4);
        assert_eq!(v2.id("b"), UNK);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let empty: Vec<Vec<String>> = vec![];
        assert!(matches!(build_vocab(&empty, 1), Err(Error::Input(_))));
    }

    #[test]
    fn synthetic_tasks() {
        let src = tokenize("c a b");
        let pairs = make_synthetic(Task::Copy, 50, (3, 3), 3, 1).unwrap();
        assert!(pairs.iter().all(|p| p.source == p.target));
        let rev = make_synthetic(Task::Reverse, 50, (3, 3), 3, 1).unwrap();
        for (c, r) in pairs.iter().zip(&rev) {
            assert_eq!(c.source, r.source, "same seed, same sources");
            let mut back = r.target.clone();
            back.reverse();
            assert_eq!(back, r.source);
        }
        let reversed: Vec<String> = src.iter().rev().cloned().collect();
        assert_eq!(reversed, tokenize("b a c"));
    }

    #[test]
    fn map_task_applies_a_fixed_bijection() {
        let perm = map_permutation(3);
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
        let pairs = make_synthetic(Task::Map, 200, (1, 6), 3, 9).unwrap();
        let mut seen: HashMap<String, String> = HashMap::new();
        for p in &pairs {
            assert_eq!(p.source.len(), p.target.len());
            for (s, t) in p.source.iter().zip(&p.target) {
                let prev = seen.insert(s.clone(), t.clone());
                assert!(prev.is_none() || prev.as_deref() == Some(t.as_str()));
            }
        }
        // a different sampling seed keeps the bijection
        let other = make_synthetic(Task::Map, 200, (1, 6), 3, 10).unwrap();
        for p in &other {
            for (s, t) in p.source.iter().zip(&p.target) {
                assert_eq!(seen.get(s), Some(t));
            }
        }
    }

    #[test]
    fn synthetic_rejects_bad_lengths() {
        assert!(make_synthetic(Task::Copy, 1, (0, 3), 5, 0).is_err());
        assert!(make_synthetic(Task::Copy, 1, (1, 65), 5, 0).is_err());
    }

    fn toy_vocabs(pairs: &[SentencePair]) -> (Vocabulary, Vocabulary) {
        let src: Vec<Vec<String>> = pairs.iter().map(|p| p.source.clone()).collect();
        let tgt: Vec<Vec<String>> = pairs.iter().map(|p| p.target.clone()).collect();
        (build_vocab(&src, 1).unwrap(), build_vocab(&tgt, 1).unwrap())
    }

    #[test]
    fn batch_sizes_and_padding() {
        let pairs = vec![
            SentencePair::parse_line("a b\tx y").unwrap(),
            SentencePair::parse_line("a b c d e\tx").unwrap(),
            SentencePair::parse_line("c\ty y y").unwrap(),
        ];
        let (sv, tv) = toy_vocabs(&pairs);
        let batches = make_batches(&pairs, &sv, &tv, 2, 0).unwrap();
        assert_eq!(
            batches.iter().map(|b| b.size).collect::<Vec<_>>(),
            vec![2, 1]
        );

        let b = Batch::from_pairs(&[&pairs[0], &pairs[1]], &sv, &tv).unwrap();
        assert_eq!(b.src_len, 5);
        assert_eq!(b.src_pad_mask[..5], [false, false, true, true, true]);
        assert_eq!(b.src_row(0)[2..], [PAD, PAD, PAD]);
        assert_eq!(b.tgt_in_row(0), &[BOS, tv.id("x"), tv.id("y")]);
        assert_eq!(b.tgt_out_row(0), &[tv.id("x"), tv.id("y"), EOS]);
        assert_eq!(b.tgt_out_row(1), &[tv.id("x"), EOS, PAD]);
    }

    #[test]
    fn batches_are_seed_deterministic() {
        let pairs = make_synthetic(Task::Map, 100, (1, 8), 6, 4).unwrap();
        let (sv, tv) = toy_vocabs(&pairs);
        let a = make_batches(&pairs, &sv, &tv, 16, 77).unwrap();
        let b = make_batches(&pairs, &sv, &tv, 16, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overlong_pair_is_rejected() {
        let long = vec!["a".to_string(); MAX_SEQ_LEN + 1];
        let pair = SentencePair::new(long, vec!["x".into()]).unwrap();
        let (sv, tv) = toy_vocabs(std::slice::from_ref(&pair));
        assert!(matches!(
            make_batches(&[pair], &sv, &tv, 1, 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn causal_mask_counts() {
        assert_eq!(causal_mask(1), vec![false]);
        assert_eq!(causal_mask(2), vec![false, true, false, false]);
        assert_eq!(causal_mask(5).iter().filter(|&&b| b).count(), 10);
    }

    #[test]
    fn corpus_line_parsing() {
        assert!(SentencePair::parse_line("a b").is_err());
        assert!(SentencePair::parse_line("a\t").is_err());
        let p = SentencePair::parse_line("a  b\tc").unwrap();
        assert_eq!(p.source, vec!["a", "b"]);
    }

    #[test]
    fn bpe_round_trips_and_merges() {
        let corpus = lines(&["low lower lowest", "low low newer"]);
        let bpe = Bpe::learn(&corpus, 10);
        assert!(!bpe.merges().is_empty());
        for s in &corpus {
            let pieces = bpe.apply(s);
            assert_eq!(&Bpe::detokenize(&pieces), s);
        }
        assert_eq!(bpe.segment_word("low"), vec!["low"]);
    }

    proptest! {
        #[test]
        fn batching_round_trips_sentences(seed in 0u64..1000, bs in 1usize..9) {
            let pairs = make_synthetic(Task::Reverse, 23, (1, 9), 7, seed).unwrap();
            let (sv, tv) = toy_vocabs(&pairs);
            for b in make_batches(&pairs, &sv, &tv, bs, seed).unwrap() {
                for r in 0..b.size {
                    let src = sv.decode(&b.source_ids(r));
                    let tgt = tv.decode(&b.target_ids(r));
                    prop_assert!(pairs.iter().any(|p| p.source == src && p.target == tgt));
                    let n = b.target_tokens();
                    prop_assert!(n > 0);
                    for i in 0..b.tgt_len - 1 {
                        if !b.tgt_pad_mask[r * b.tgt_len + i + 1] {
                            prop_assert_eq!(b.tgt_out_row(r)[i], b.tgt_in_row(r)[i + 1]);
                        }
                    }
                }
            }
        }

        #[test]
        fn vocab_encode_decode_round_trip(seed in 0u64..1000) {
            let pairs = make_synthetic(Task::Map, 30, (1, 12), 40, seed).unwrap();
            let (sv, tv) = toy_vocabs(&pairs);
            for p in &pairs {
                prop_assert_eq!(&sv.decode(&sv.encode(&p.source)), &p.source);
                prop_assert_eq!(&tv.decode(&tv.encode(&p.target)), &p.target);
            }
        }
    }
}
