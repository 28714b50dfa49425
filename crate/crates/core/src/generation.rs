//! Greedy search, beam search and log-domain ensembling.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{build_decoder_context, detokenize, Corpus, HistoryPolicy, EOS_ID};
use crate::encoder::EncodedStreams;
use crate::error::{Error, Result};
use crate::model::AvsdModel;
use crate::tensor::{argmax, log_softmax};

/// Anything that scores the next token given the tokens generated so far.
pub trait NextWordModel {
    fn vocab_size(&self) -> usize;
    /// Log probabilities of the token following `prefix`.
    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens; a finished hypothesis ends with the end token.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn score(&self, length_normalize: bool) -> f64 {
        if length_normalize && !self.tokens.is_empty() {
            self.log_prob / self.tokens.len() as f64
        } else {
            self.log_prob
        }
    }

    /// Tokens without the trailing end token.
    pub fn words(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS_ID) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub beam: usize,
    pub max_len: usize,
    /// Rank finished hypotheses by log probability per token.
    pub length_normalize: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            beam: 5,
            max_len: 20,
            length_normalize: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.max_len == 0 {
            return Err(Error::Config("search.beam and search.max_len must be positive".into()));
        }
        Ok(())
    }
}

/// Argmax decoding; ties go to the lowest token id. Returns the words
/// without the end token.
pub fn greedy_decode(model: &dyn NextWordModel, max_len: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    while out.len() < max_len {
        let next = argmax(&model.log_probs(&out)?);
        if next == EOS_ID {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

/// Beam search over summed log probabilities.
///
/// Each step expands every live hypothesis by every token, sorts candidates
/// by score (descending), then token id, then parent rank, and keeps the top
/// `beam`. Candidates ending in the end token retire to the finished pool.
/// Hypotheses still alive after `max_len` steps join the pool unfinished.
/// The pool comes back sorted by [`Hypothesis::score`], best first.
pub fn beam_search(model: &dyn NextWordModel, cfg: &SearchConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut pool = Vec::new();
    for _ in 0..cfg.max_len {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (rank, h) in alive.iter().enumerate() {
            let lp = model.log_probs(&h.tokens)?;
            candidates.extend(lp.iter().enumerate().map(|(y, &l)| (h.log_prob + l, y, rank)));
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(cfg.beam);
        for &(score, y, rank) in candidates.iter().take(cfg.beam) {
            let mut tokens = alive[rank].tokens.clone();
            tokens.push(y);
            let h = Hypothesis {
                tokens,
                log_prob: score,
                finished: y == EOS_ID,
            };
            if h.finished {
                pool.push(h);
            } else {
                next.push(h);
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
    }
    pool.extend(alive);
    // Stable sort keeps retirement order among equal scores.
    pool.sort_by(|a, b| {
        b.score(cfg.length_normalize)
            .partial_cmp(&a.score(cfg.length_normalize))
            .unwrap_or(Ordering::Equal)
    });
    Ok(pool)
}

/// Equal-weight geometric mean of two next-word distributions, renormalized.
pub fn ensemble_next_distribution(p1: &[f64], p2: &[f64]) -> Result<Vec<f64>> {
    if p1.len() != p2.len() {
        return Err(Error::VocabularyMismatch(format!(
            "distributions over {} and {} tokens",
            p1.len(),
            p2.len()
        )));
    }
    let mean: Vec<f64> = p1
        .iter()
        .zip(p2)
        .map(|(a, b)| 0.5 * (a.max(1e-300).ln() + b.max(1e-300).ln()))
        .collect();
    Ok(crate::tensor::softmax(&mean))
}

/// Mean of member log probabilities, renormalized in the log domain.
pub struct Ensemble<'a> {
    members: Vec<&'a dyn NextWordModel>,
}

impl<'a> Ensemble<'a> {
    pub fn new(members: Vec<&'a dyn NextWordModel>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::Validation("an ensemble needs at least one member".into()));
        };
        let v = first.vocab_size();
        if let Some(m) = members.iter().find(|m| m.vocab_size() != v) {
            return Err(Error::VocabularyMismatch(format!(
                "ensemble members have {} and {} tokens",
                v,
                m.vocab_size()
            )));
        }
        Ok(Self { members })
    }
}

impl NextWordModel for Ensemble<'_> {
    fn vocab_size(&self) -> usize {
        self.members[0].vocab_size()
    }

    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut mean = vec![0.0; self.vocab_size()];
        for m in &self.members {
            for (acc, l) in mean.iter_mut().zip(m.log_probs(prefix)?) {
                *acc += l;
            }
        }
        let n = self.members.len() as f64;
        Ok(log_softmax(&mean.into_iter().map(|v| v / n).collect::<Vec<_>>()))
    }
}

/// A model bound to one encoded video and one decoder context.
pub struct Conditioned<'a> {
    pub model: &'a AvsdModel,
    pub streams: EncodedStreams,
    pub context: Vec<usize>,
}

impl NextWordModel for Conditioned<'_> {
    fn vocab_size(&self) -> usize {
        self.model.vocab.len()
    }

    fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut ids = self.context.clone();
        ids.extend_from_slice(prefix);
        Ok(log_softmax(&self.model.next_logits(&ids, &self.streams)?))
    }
}

/// Generated answers keyed by video id, then turn index.
pub type AnswerFile = BTreeMap<String, BTreeMap<usize, String>>;

/// Answer every turn of `corpus`. Two or more models are ensembled; their
/// vocabularies must be identical.
pub fn generate_answers(
    models: &[&AvsdModel],
    corpus: &Corpus,
    policy: HistoryPolicy,
    search: &SearchConfig,
) -> Result<AnswerFile> {
    let Some(first) = models.first() else {
        return Err(Error::Validation("no model to generate with".into()));
    };
    if let Some(m) = models.iter().find(|m| m.vocab != first.vocab) {
        return Err(Error::VocabularyMismatch(format!(
            "checkpoints carry vocabularies of {} and {} tokens with different entries",
            first.vocab.len(),
            m.vocab.len()
        )));
    }
    let mut out = AnswerFile::new();
    for sample in &corpus.samples {
        let fs = corpus.features_for(sample)?;
        let streams = models
            .iter()
            .map(|m| m.encode(fs, sample.caption.as_deref()))
            .collect::<Result<Vec<_>>>()?;
        let entry = out.entry(sample.video_id.clone()).or_default();
        for t in 0..sample.turns.len() {
            let context = first.vocab.encode(&build_decoder_context(sample, t, policy)?);
            let conditioned: Vec<Conditioned> = models
                .iter()
                .zip(&streams)
                .map(|(m, s)| Conditioned {
                    model: m,
                    streams: s.clone(),
                    context: context.clone(),
                })
                .collect();
            let best = if conditioned.len() == 1 {
                beam_search(&conditioned[0], search)?
            } else {
                let members: Vec<&dyn NextWordModel> = conditioned.iter().map(|c| c as &dyn NextWordModel).collect();
                beam_search(&Ensemble::new(members)?, search)?
            };
            let words = first.vocab.decode(best[0].words());
            entry.insert(t, detokenize(&words));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed per-step distributions, independent of the prefix content.
    struct Scripted(Vec<Vec<f64>>);

    impl NextWordModel for Scripted {
        fn vocab_size(&self) -> usize {
            self.0[0].len()
        }
        fn log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
            let p = &self.0[prefix.len().min(self.0.len() - 1)];
            Ok(p.iter().map(|v| v.ln()).collect())
        }
    }

    #[test]
    fn greedy_stops_on_end_token() {
        let m = Scripted(vec![vec![0.1, 0.1, 0.7, 0.1]]);
        assert!(greedy_decode(&m, 5).unwrap().is_empty());
    }

    #[test]
    fn greedy_respects_max_len_and_ties() {
        let m = Scripted(vec![vec![0.1, 0.0, 0.0, 0.45, 0.45]]);
        assert_eq!(greedy_decode(&m, 3).unwrap(), vec![3, 3, 3]);
    }

    #[test]
    fn ensemble_closed_forms() {
        let u = ensemble_next_distribution(&[0.9, 0.1], &[0.1, 0.9]).unwrap();
        assert!((u[0] - 0.5).abs() < 1e-12 && (u[1] - 0.5).abs() < 1e-12);
        let p = ensemble_next_distribution(&[0.8, 0.2], &[0.5, 0.5]).unwrap();
        let (a, b) = (0.40f64.sqrt(), 0.10f64.sqrt());
        assert!((p[0] - a / (a + b)).abs() < 1e-12);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-4);
        assert!(ensemble_next_distribution(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn beam_hypotheses_end_properly_and_scores_descend() {
        let m = Scripted(vec![vec![0.05, 0.05, 0.3, 0.35, 0.25], vec![0.1, 0.1, 0.2, 0.3, 0.3]]);
        let cfg = SearchConfig {
            beam: 3,
            max_len: 4,
            length_normalize: true,
        };
        let hyps = beam_search(&m, &cfg).unwrap();
        for w in hyps.windows(2) {
            assert!(w[0].score(true) >= w[1].score(true));
        }
        for h in &hyps {
            assert!(h.finished == (h.tokens.last() == Some(&EOS_ID)));
            assert!(h.finished || h.tokens.len() == 4);
        }
    }
}
