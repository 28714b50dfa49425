//! Caption metrics computed the way the MS COCO caption scorer computes them.
//!
//! Every function takes already tokenized sentences; see [`coco_tokenize`].

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};

/// Tokens the reference scorer strips after tokenizing.
const PUNCTUATION: [&str; 17] = [
    "''", "'", "``", "`", "-lrb-", "-rrb-", "-lcb-", "-rcb-", ".", "?", "!", ",", ":", "-", "--", "...", ";",
];

const CLITICS: [&str; 6] = ["'s", "'re", "'ve", "'ll", "'d", "'m"];

/// Lowercase, split on whitespace, split `n't` and `'s`-style clitics off
/// their word, split brackets and sentence punctuation into their own tokens,
/// then drop the punctuation tokens.
///
/// This reproduces the Penn Treebank tokenizer used by the reference scorer
/// on plain English answers. Exotic inputs (URLs, numbers with commas,
/// abbreviations) can differ.
pub fn coco_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.to_lowercase().split_whitespace() {
        let mut pieces = Vec::new();
        let mut cur = String::new();
        let chars: Vec<char> = raw.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c == '.' && chars[i..].iter().take(3).collect::<String>() == "..." {
                flush(&mut cur, &mut pieces);
                pieces.push("...".to_string());
                i += 3;
                continue;
            }
            if matches!(c, '.' | ',' | '?' | '!' | ';' | ':' | '"' | '(' | ')' | '[' | ']' | '{' | '}') {
                flush(&mut cur, &mut pieces);
                pieces.push(c.to_string());
            } else {
                cur.push(c);
            }
            i += 1;
        }
        flush(&mut cur, &mut pieces);
        for p in pieces {
            split_clitic(&p, &mut out);
        }
    }
    out.retain(|t| !PUNCTUATION.contains(&t.as_str()) && !t.chars().all(|c| matches!(c, '"' | '(' | ')' | '[' | ']' | '{' | '}')));
    out
}

fn flush(cur: &mut String, pieces: &mut Vec<String>) {
    if !cur.is_empty() {
        pieces.push(std::mem::take(cur));
    }
}

fn split_clitic(word: &str, out: &mut Vec<String>) {
    if word.len() > 3 && word.ends_with("n't") {
        out.push(word[..word.len() - 3].to_string());
        out.push("n't".to_string());
        return;
    }
    for c in CLITICS {
        if word.len() > c.len() && word.ends_with(c) {
            out.push(word[..word.len() - c.len()].to_string());
            out.push(c.to_string());
            return;
        }
    }
    out.push(word.to_string());
}

type Ngram<'a> = &'a [String];

/// Ordered so that float sums over n-grams repeat bit for bit.
fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Ngram<'_>, usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Validation("no candidates to score".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Validation(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Validation("every candidate needs at least one reference".into()));
    }
    Ok(())
}

/// Corpus BLEU-4 with clipped counts, the closest reference length per
/// candidate (ties go to the shorter reference) and no smoothing.
pub fn bleu4(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    check(candidates, references)?;
    let mut correct = [0usize; 4];
    let mut guess = [0usize; 4];
    let (mut test_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        test_len += cand.len();
        ref_len += refs
            .iter()
            .map(|r| (r.len().abs_diff(cand.len()), r.len()))
            .min()
            .map(|(_, l)| l)
            .unwrap_or(0);
        for n in 1..=4 {
            let mut max_ref: BTreeMap<Ngram, usize> = BTreeMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in ngram_counts(cand, n) {
                correct[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
            }
            guess[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    if guess.iter().any(|&g| g == 0) || correct.iter().any(|&c| c == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4).map(|n| (correct[n] as f64 / guess[n] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if test_len < ref_len {
        (1.0 - ref_len as f64 / test_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_p.exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// Sentence ROUGE-L. Precision and recall are each maximized over the
/// references before being combined.
pub fn rouge_l_sentence(candidate: &[String], references: &[Vec<String>]) -> f64 {
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
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l_scores(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<Vec<f64>> {
    check(candidates, references)?;
    Ok(candidates.iter().zip(references).map(|(c, r)| rouge_l_sentence(c, r)).collect())
}

pub fn rouge_l(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    let s = rouge_l_scores(candidates, references)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

pub const CIDER_SIGMA: f64 = 6.0;

struct TfIdf {
    vec: [BTreeMap<Vec<String>, f64>; 4],
    norm: [f64; 4],
    /// Length used by the Gaussian penalty. The reference scorer takes it
    /// from the bigram counts, so it is the token count minus one.
    length: f64,
}

fn tfidf(tokens: &[String], df: &HashMap<Vec<String>, f64>, log_docs: f64) -> TfIdf {
    let mut vec: [BTreeMap<Vec<String>, f64>; 4] = Default::default();
    let mut norm = [0.0; 4];
    let mut length = 0.0;
    for n in 1..=4 {
        for (g, tf) in ngram_counts(tokens, n) {
            let d = df.get(g).copied().unwrap_or(0.0).max(1.0);
            let v = tf as f64 * (log_docs - d.ln());
            norm[n - 1] += v * v;
            if n == 2 {
                length += tf as f64;
            }
            vec[n - 1].insert(g.to_vec(), v);
        }
    }
    for x in &mut norm {
        *x = x.sqrt();
    }
    TfIdf { vec, norm, length }
}

fn cider_sim(h: &TfIdf, r: &TfIdf) -> [f64; 4] {
    let delta = h.length - r.length;
    let mut val = [0.0; 4];
    for n in 0..4 {
        for (g, &hv) in &h.vec[n] {
            let rv = r.vec[n].get(g).copied().unwrap_or(0.0);
            val[n] += hv.min(rv) * rv;
        }
        if h.norm[n] != 0.0 && r.norm[n] != 0.0 {
            val[n] /= h.norm[n] * r.norm[n];
        }
        val[n] *= (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    }
    val
}

/// Per-candidate CIDEr-D, ×10, with document frequencies taken over the
/// reference sets of the whole corpus. A single-video corpus makes every idf
/// zero, so every score is zero.
pub fn cider_d_scores(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<Vec<f64>> {
    check(candidates, references)?;
    let mut df: HashMap<Vec<String>, f64> = HashMap::new();
    for refs in references {
        let mut seen: BTreeSet<&[String]> = BTreeSet::new();
        for r in refs {
            for n in 1..=4 {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    let log_docs = (references.len() as f64).ln();
    Ok(candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| {
            let h = tfidf(c, &df, log_docs);
            let mut total = [0.0; 4];
            for r in refs {
                let s = cider_sim(&h, &tfidf(r, &df, log_docs));
                for n in 0..4 {
                    total[n] += s[n];
                }
            }
            total.iter().sum::<f64>() / 4.0 / refs.len() as f64 * 10.0
        })
        .collect())
}

pub fn cider_d(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    let s = cider_d_scores(candidates, references)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn tokenizer_drops_punctuation_and_splits_clitics() {
        assert_eq!(coco_tokenize("Yes, he DOESN'T. It's (red)!"), t("yes he does n't it 's red"));
        assert_eq!(coco_tokenize("wait... what?"), t("wait what"));
    }

    #[test]
    fn bleu_extremes() {
        let c = vec![t("a man is holding a cup")];
        assert!((bleu4(&c, &[vec![c[0].clone()]]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bleu4(&c, &[vec![t("nothing shared here at all")]]).unwrap(), 0.0);
        assert!(bleu4(&[], &[]).is_err());
    }

    #[test]
    fn rouge_extremes() {
        let c = vec![t("the cat sat")];
        assert!((rouge_l(&c, &[vec![t("the cat sat")]]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rouge_l(&c, &[vec![t("dogs run")]]).unwrap(), 0.0);
    }

    #[test]
    fn cider_zero_without_overlap_and_stable_under_doubling() {
        let c = vec![t("a b c d"), t("x y z w")];
        let r = vec![vec![t("a b c d e")], vec![t("p q r s")]];
        let s = cider_d_scores(&c, &r).unwrap();
        assert_eq!(s[1], 0.0);
        let doubled: Vec<Vec<Vec<String>>> = r.iter().map(|v| [v.clone(), v.clone()].concat()).collect();
        let s2 = cider_d_scores(&c, &doubled).unwrap();
        assert!((s[0] - s2[0]).abs() < 1e-12);
    }
}
