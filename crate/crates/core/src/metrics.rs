//! Caption metrics: BLEU-4, ROUGE-L and CIDEr over tokenized sentences.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

type Gram<'a> = &'a [String];

/// ROUGE-L recall weight.
pub const ROUGE_BETA: f64 = 1.2;
const MAX_N: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Gram<'_>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn check_inputs(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<()> {
    if references.len() != candidates.len() {
        return Err(Error::shape(
            "caption metric",
            format!("{} candidates vs {} reference sets", candidates.len(), references.len()),
        ));
    }
    if references.is_empty() || references.iter().any(Vec::is_empty) {
        return Err(Error::EmptyReference);
    }
    Ok(())
}

/// Clipped matches and candidate totals for orders 1..=4.
fn matches(cand: &[String], refs: &[Vec<String>]) -> [(usize, usize); MAX_N] {
    let mut out = [(0, 0); MAX_N];
    for (k, slot) in out.iter_mut().enumerate() {
        let n = k + 1;
        let c = ngram_counts(cand, n);
        let mut max_ref: HashMap<Gram<'_>, usize> = HashMap::new();
        for r in refs {
            for (g, cnt) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(cnt);
            }
        }
        let m: usize = c
            .iter()
            .map(|(g, &cnt)| cnt.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        *slot = (m, cand.len().saturating_sub(n - 1));
    }
    out
}

/// Reference length closest to `c`; the shorter one on ties.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Corpus-level BLEU-4, unsmoothed: zero if any order has no match.
pub fn bleu4(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    check_inputs(candidates, references)?;
    let mut totals = [(0usize, 0usize); MAX_N];
    let (mut c_len, mut r_len) = (0, 0);
    for (cand, refs) in candidates.iter().zip(references) {
        for (t, m) in totals.iter_mut().zip(matches(cand, refs)) {
            t.0 += m.0;
            t.1 += m.1;
        }
        c_len += cand.len();
        r_len += closest_ref_len(cand.len(), refs);
    }
    if totals.iter().any(|&(m, t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = totals.iter().map(|&(m, t)| (m as f64 / t as f64).ln()).sum::<f64>() / MAX_N as f64;
    Ok(brevity_penalty(c_len, r_len) * log_p.exp())
}

/// Sentence-level BLEU-4 with add-one smoothing on orders 2 to 4.
pub fn sentence_bleu4(candidate: &[String], references: &[Vec<String>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::EmptyReference);
    }
    let m = matches(candidate, references);
    if m[0].0 == 0 {
        return Ok(0.0);
    }
    let mut log_p = (m[0].0 as f64 / m[0].1 as f64).ln();
    for &(hit, total) in &m[1..] {
        log_p += ((hit + 1) as f64 / (total + 1) as f64).ln();
    }
    let bp = brevity_penalty(candidate.len(), closest_ref_len(candidate.len(), references));
    Ok(bp * (log_p / MAX_N as f64).exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure of one candidate, taking the best precision and the
/// best recall over its references.
pub fn sentence_rouge_l(candidate: &[String], references: &[Vec<String>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::EmptyReference);
    }
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for reference in references {
        let l = lcs(candidate, reference) as f64;
        if !candidate.is_empty() {
            p = p.max(l / candidate.len() as f64);
        }
        if !reference.is_empty() {
            r = r.max(l / reference.len() as f64);
        }
    }
    if p == 0.0 || r == 0.0 {
        return Ok(0.0);
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    Ok((1.0 + b2) * p * r / (r + b2 * p))
}

/// Mean sentence ROUGE-L over the corpus.
pub fn rouge_l(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    check_inputs(candidates, references)?;
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        sum += sentence_rouge_l(c, r)?;
    }
    Ok(sum / candidates.len() as f64)
}

/// n-gram document frequencies over reference sets, one set per image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DocumentFrequency {
    counts: HashMap<Vec<String>, usize>,
    n_docs: usize,
}

impl DocumentFrequency {
    pub fn from_references(references: &[Vec<Vec<String>>]) -> Self {
        let mut counts = HashMap::new();
        for refs in references {
            let mut seen: HashSet<&[String]> = HashSet::new();
            for r in refs {
                for n in 1..=MAX_N {
                    seen.extend(ngram_counts(r, n).into_keys());
                }
            }
            for g in seen {
                *counts.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
        DocumentFrequency {
            counts,
            n_docs: references.len(),
        }
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn df(&self, gram: &[String]) -> usize {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    /// `ln(N / max(1, df))`.
    pub fn idf(&self, gram: &[String]) -> f64 {
        (self.n_docs as f64 / self.df(gram).max(1) as f64).ln()
    }
}

fn tfidf<'a>(tokens: &'a [String], n: usize, df: &DocumentFrequency) -> HashMap<Gram<'a>, f64> {
    let counts = ngram_counts(tokens, n);
    let total: usize = counts.values().sum();
    counts
        .into_iter()
        .map(|(g, c)| (g, c as f64 / total as f64 * df.idf(g)))
        .collect()
}

fn cosine(a: &HashMap<Gram<'_>, f64>, b: &HashMap<Gram<'_>, f64>) -> f64 {
    let dot: f64 = a.iter().map(|(g, x)| x * b.get(g).copied().unwrap_or(0.0)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// CIDEr of one candidate: mean over orders 1..=4 of the mean TF-IDF cosine
/// to each reference, times ten.
pub fn sentence_cider(candidate: &[String], references: &[Vec<String>], df: &DocumentFrequency) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::EmptyReference);
    }
    let mut score = 0.0;
    for n in 1..=MAX_N {
        let c = tfidf(candidate, n, df);
        let per_ref: f64 = references.iter().map(|r| cosine(&c, &tfidf(r, n, df))).sum();
        score += per_ref / references.len() as f64;
    }
    Ok(10.0 * score / MAX_N as f64)
}

/// Mean sentence CIDEr over the corpus.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], df: &DocumentFrequency) -> Result<f64> {
    check_inputs(candidates, references)?;
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        sum += sentence_cider(c, r, df)?;
    }
    Ok(sum / candidates.len() as f64)
}
