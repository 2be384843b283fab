//! Corpus BLEU (single reference, case-sensitive, 4-gram, unsmoothed) and
//! the source-length bucket report.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// Percentage in `[0, 100]`.
    pub bleu: f64,
    /// Modified n-gram precisions for n = 1..4, as fractions.
    pub precisions: [f64; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU over whitespace-tokenized sentences.
///
/// Brevity penalty is `exp(1 − r/h)` when `h < r`. Any zero precision (or an
/// empty hypothesis corpus) gives BLEU 0.
pub fn bleu4<H: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[H],
    references: &[R],
) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::input(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(&r, n);
            for (gram, count) in ngram_counts(&h, n) {
                matches[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * mean_log.exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p: Vec<String> = self
            .precisions
            .iter()
            .map(|p| format!("{:.1}", 100.0 * p))
            .collect();
        let ratio = if self.ref_len == 0 {
            0.0
        } else {
            self.hyp_len as f64 / self.ref_len as f64
        };
        write!(
            f,
            "BLEU = {:.2}, {} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.bleu,
            p.join("/"),
            self.brevity_penalty,
            ratio,
            self.hyp_len,
            self.ref_len
        )
    }
}

impl BleuReport {
    /// `key = value` lines, each key prefixed with `prefix`.
    pub fn write_key_values(&self, prefix: &str, out: &mut String) {
        writeln!(out, "{prefix}bleu = {:.4}", self.bleu).unwrap();
        for n in 0..MAX_ORDER {
            writeln!(
                out,
                "{prefix}precision_{} = {:.6}",
                n + 1,
                self.precisions[n]
            )
            .unwrap();
            writeln!(out, "{prefix}matches_{} = {}", n + 1, self.matches[n]).unwrap();
            writeln!(out, "{prefix}totals_{} = {}", n + 1, self.totals[n]).unwrap();
        }
        writeln!(out, "{prefix}brevity_penalty = {:.6}", self.brevity_penalty).unwrap();
        writeln!(out, "{prefix}hyp_length = {}", self.hyp_len).unwrap();
        writeln!(out, "{prefix}ref_length = {}", self.ref_len).unwrap();
    }
}

/// Upper bounds of the right-closed source-length buckets; the last bucket is open.
pub const BUCKET_BOUNDS: [usize; 5] = [10, 20, 30, 40, 50];

#[derive(Clone, Debug, PartialEq)]
pub struct Bucket {
    /// Exclusive lower bound on source length.
    pub lower: usize,
    /// Inclusive upper bound; `None` for the open last bucket.
    pub upper: Option<usize>,
    pub count: usize,
    /// `None` for an empty bucket.
    pub report: Option<BleuReport>,
}

impl Bucket {
    pub fn label(&self) -> String {
        match self.upper {
            Some(u) => format!("({},{}]", self.lower, u),
            None => format!("({},inf)", self.lower),
        }
    }

    fn key(&self) -> String {
        match self.upper {
            Some(u) => format!("{}-{}", self.lower, u),
            None => format!("{}-inf", self.lower),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LengthBucketReport {
    pub buckets: Vec<Bucket>,
}

/// Index of the bucket holding a source of `len` tokens.
pub fn bucket_index(len: usize) -> usize {
    BUCKET_BOUNDS
        .iter()
        .position(|&b| len <= b)
        .unwrap_or(BUCKET_BOUNDS.len())
}

/// BLEU per source-length bucket. `sources`, `hypotheses` and `references`
/// are aligned whitespace-tokenized sentences.
pub fn bucket_report<S, H, R>(
    sources: &[S],
    hypotheses: &[H],
    references: &[R],
) -> Result<LengthBucketReport>
where
    S: AsRef<str>,
    H: AsRef<str>,
    R: AsRef<str>,
{
    if sources.len() != hypotheses.len() || sources.len() != references.len() {
        return Err(Error::input(format!(
            "{} sources, {} hypotheses and {} references are not aligned",
            sources.len(),
            hypotheses.len(),
            references.len()
        )));
    }
    let n = BUCKET_BOUNDS.len() + 1;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, s) in sources.iter().enumerate() {
        members[bucket_index(s.as_ref().split_whitespace().count())].push(i);
    }
    let mut buckets = Vec::with_capacity(n);
    for (b, idx) in members.iter().enumerate() {
        let lower = if b == 0 { 0 } else { BUCKET_BOUNDS[b - 1] };
        let report = if idx.is_empty() {
            None
        } else {
            let h: Vec<&str> = idx.iter().map(|&i| hypotheses[i].as_ref()).collect();
            let r: Vec<&str> = idx.iter().map(|&i| references[i].as_ref()).collect();
            Some(bleu4(&h, &r)?)
        };
        buckets.push(Bucket {
            lower,
            upper: BUCKET_BOUNDS.get(b).copied(),
            count: idx.len(),
            report,
        });
    }
    Ok(LengthBucketReport { buckets })
}

impl LengthBucketReport {
    pub fn write_key_values(&self, out: &mut String) {
        for b in &self.buckets {
            let key = b.key();
            writeln!(out, "bucket.{key}.count = {}", b.count).unwrap();
            match &b.report {
                Some(r) => writeln!(out, "bucket.{key}.bleu = {:.4}", r.bleu).unwrap(),
                None => writeln!(out, "bucket.{key}.bleu = null").unwrap(),
            }
        }
    }
}

impl fmt::Display for LengthBucketReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.buckets {
            match &b.report {
                Some(r) => writeln!(
                    f,
                    "{:<10} {:>6} sentences  BLEU {:.2}",
                    b.label(),
                    b.count,
                    r.bleu
                )?,
                None => writeln!(f, "{:<10} {:>6} sentences  BLEU -", b.label(), b.count)?,
            }
        }
        Ok(())
    }
}

/// Position-wise token accuracy: matches over the longer of each pair,
/// summed over the corpus. An empty corpus scores 1.
pub fn token_accuracy<T: PartialEq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::input(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hits += h.iter().zip(r).filter(|(a, b)| a == b).count();
        total += h.len().max(r.len());
    }
    Ok(if total == 0 {
        1.0
    } else {
        hits as f64 / total as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_corpus_scores_100() {
        let s = ["a b c d e", "f g h i"];
        let r = bleu4(&s, &s).unwrap();
        assert_eq!(r.bleu, 100.0);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn no_shared_unigram_scores_zero() {
        let r = bleu4(&["x y z w"], &["a b c d"]).unwrap();
        assert_eq!(r.bleu, 0.0);
        assert_eq!(r.matches, [0; 4]);
    }

    #[test]
    fn cat_on_mat_counts() {
        let r = bleu4(&["the cat sat on the mat"], &["the cat is on the mat"]).unwrap();
        assert_eq!(r.matches, [5, 3, 1, 0]);
        assert_eq!(r.totals, [6, 5, 4, 3]);
        assert_eq!(r.bleu, 0.0);
    }

    #[test]
    fn length_mismatch_is_an_input_error() {
        assert!(matches!(bleu4(&["a"], &["a", "b"]), Err(Error::Input(_))));
    }

    #[test]
    fn bucket_boundaries_are_right_closed() {
        assert_eq!(bucket_index(1), 0);
        assert_eq!(bucket_index(10), 0);
        assert_eq!(bucket_index(11), 1);
        assert_eq!(bucket_index(50), 4);
        assert_eq!(bucket_index(51), 5);
    }

    #[test]
    fn single_bucket_corpus_matches_corpus_bleu() {
        let src = ["a b c d e", "a b c"];
        let hyp = ["w x y z q", "w x z"];
        let refs = ["w x y z q", "w x y"];
        let report = bucket_report(&src, &hyp, &refs).unwrap();
        let whole = bleu4(&hyp, &refs).unwrap();
        assert_eq!(report.buckets[0].count, 2);
        assert_eq!(report.buckets[0].report.as_ref().unwrap().bleu, whole.bleu);
        assert!(report.buckets[1..]
            .iter()
            .all(|b| b.count == 0 && b.report.is_none()));
    }

    #[test]
    fn token_accuracy_uses_longer_length() {
        let acc = token_accuracy(&[vec![1, 2, 3]], &[vec![1, 2, 4, 5]]).unwrap();
        assert_eq!(acc, 0.5);
    }
}
