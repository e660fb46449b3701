//! Beam search and greedy decoding over any next-token scorer.

use std::cmp::Ordering;

use convqg_grad::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::constraints::{render, Constraint};
use crate::model::{ModelConfig, ParamStore, Session};
use crate::toyworld::Visual;
use crate::vocab::{Vocab, BOS, EOS, PAD};
use crate::{Error, Result};

pub const DEFAULT_BEAMS: usize = 3;

/// Next-token log-probabilities given the generated prefix (without BOS).
pub trait StepScorer {
    fn vocab_size(&self) -> usize;

    /// One entry per token id. `-inf` marks a token that may not be emitted.
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub finished: bool,
}

/// Higher score first, then lexicographically smaller token sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Keeps the `beams` best hypotheses at every length. Finished hypotheses
/// compete with expansions until all kept ones are finished. A hypothesis
/// reaching `max_len` tokens without EOS is closed as is.
pub fn beam_search<S: StepScorer>(scorer: &mut S, beams: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    if beams == 0 || max_len == 0 {
        return Err(Error::Input("beams and max_len must be positive".into()));
    }
    let v = scorer.vocab_size();
    let mut live = vec![Hypothesis { tokens: Vec::new(), score: 0.0, finished: false }];
    loop {
        let mut candidates = Vec::with_capacity(live.len() * v);
        for h in &live {
            if h.finished {
                candidates.push(h.clone());
                continue;
            }
            let lp = scorer.log_probs(&h.tokens)?;
            if lp.len() != v {
                return Err(Error::Input(format!("scorer returned {} scores for vocabulary {v}", lp.len())));
            }
            for (tok, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                let finished = tok == EOS || tokens.len() >= max_len;
                candidates.push(Hypothesis { tokens, score: h.score + l, finished });
            }
        }
        if candidates.is_empty() {
            return Err(Error::Input("scorer allowed no token".into()));
        }
        candidates.sort_by(rank);
        candidates.truncate(beams);
        live = candidates;
        if live.iter().all(|h| h.finished) {
            return Ok(live);
        }
    }
}

/// Argmax decoding; ties go to the lower token id.
pub fn greedy<S: StepScorer>(scorer: &mut S, max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::Input("max_len must be positive".into()));
    }
    let mut h = Hypothesis { tokens: Vec::new(), score: 0.0, finished: false };
    while !h.finished {
        let lp = scorer.log_probs(&h.tokens)?;
        let (tok, &l) = lp
            .iter()
            .enumerate()
            .filter(|(_, l)| **l != f64::NEG_INFINITY)
            .fold(None, |best: Option<(usize, &f64)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            })
            .ok_or_else(|| Error::Input("scorer allowed no token".into()))?;
        h.tokens.push(tok);
        h.score += l;
        h.finished = tok == EOS || h.tokens.len() >= max_len;
    }
    Ok(h)
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Scores continuations with the trained decoder over a fixed `E_it`.
pub struct ModelScorer<'a, F: Real> {
    config: &'a ModelConfig,
    params: &'a ParamStore<F>,
    e_it: Tensor<F>,
}

impl<'a, F: Real> ModelScorer<'a, F> {
    /// Runs both encoders once.
    pub fn new(config: &'a ModelConfig, params: &'a ParamStore<F>, patches: &Tensor<F>, constraint_ids: &[usize]) -> Result<Self> {
        let mut s = Session::new(config, params, false);
        let e_i = s.encode_image(patches)?;
        let e_it = s.encode_text(constraint_ids, e_i)?;
        let e_it = s.graph.value(e_it).clone();
        Ok(Self { config, params, e_it })
    }

    pub fn joint_embedding(&self) -> &Tensor<F> {
        &self.e_it
    }
}

impl<F: Real> StepScorer for ModelScorer<'_, F> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut input = Vec::with_capacity(prefix.len() + 1);
        input.push(BOS);
        input.extend_from_slice(prefix);
        let mut s = Session::new(self.config, self.params, false);
        let e_it = s.graph.constant(self.e_it.clone());
        let logits = s.decode_question(e_it, &input)?;
        let last: Vec<f64> = s.graph.value(logits).row(input.len() - 1).iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
        let mut lp = log_softmax(&last);
        lp[PAD] = f64::NEG_INFINITY;
        lp[BOS] = f64::NEG_INFINITY;
        Ok(lp)
    }
}

/// Longest generated question: the decoder input also holds BOS.
pub fn max_question_len(config: &ModelConfig) -> usize {
    config.max_len - 1
}

/// Encodes, decodes with `beams`, and detokenizes the best hypothesis.
pub fn generate<F: Real>(
    config: &ModelConfig,
    params: &ParamStore<F>,
    vocab: &Vocab,
    visual: &Visual,
    constraint: &Constraint,
    beams: usize,
) -> Result<(String, f64)> {
    let t_prime = render(constraint)?;
    let ids = vocab.encode(&t_prime);
    let patches = visual.patches::<F>()?;
    let mut scorer = ModelScorer::new(config, params, &patches, &ids)?;
    let best = beam_search(&mut scorer, beams, max_question_len(config))?.remove(0);
    Ok((vocab.decode(&best.tokens), best.score))
}

/// One line of generation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub constraint_type: String,
    pub t_prime: String,
    pub question: String,
    pub score: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed distribution per prefix length.
    struct Table(Vec<Vec<f64>>);

    impl StepScorer for Table {
        fn vocab_size(&self) -> usize {
            self.0[0].len()
        }

        fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
            Ok(log_softmax(&self.0[prefix.len().min(self.0.len() - 1)]))
        }
    }

    #[test]
    fn forced_tokens_come_out_verbatim() {
        let force = |t: usize| {
            let mut z = vec![-1e9; 5];
            z[t] = 0.0;
            z
        };
        let mut s = Table(vec![force(3), force(4), force(EOS)]);
        for beams in [1, 2, 3, 7] {
            let best = &beam_search(&mut s, beams, 10).unwrap()[0];
            assert_eq!(best.tokens, [3, 4, EOS]);
            assert!(best.finished);
        }
    }

    #[test]
    fn truncation_at_max_len() {
        let mut s = Table(vec![vec![0.0, 0.0, -5.0, 1.0]]);
        let out = beam_search(&mut s, 2, 3).unwrap();
        assert!(out.iter().all(|h| h.tokens.len() <= 3));
        assert_eq!(out[0].tokens, [3, 3, 3]);
        assert_eq!(greedy(&mut s, 3).unwrap().tokens, [3, 3, 3]);
    }

    #[test]
    fn ties_break_towards_lower_ids() {
        let mut s = Table(vec![vec![0.0; 4]]);
        let out = beam_search(&mut s, 3, 1).unwrap();
        let seqs: Vec<_> = out.iter().map(|h| h.tokens.clone()).collect();
        assert_eq!(seqs, [vec![0], vec![1], vec![2]]);
        assert_eq!(greedy(&mut s, 1).unwrap().tokens, [0]);
    }

    #[test]
    fn rejects_degenerate_arguments() {
        let mut s = Table(vec![vec![0.0; 4]]);
        assert!(beam_search(&mut s, 0, 3).is_err());
        assert!(beam_search(&mut s, 2, 0).is_err());
        assert!(greedy(&mut s, 0).is_err());
    }
}
