//! Greedy and beam-search decoding.
//!
//! Scores are temperature-scaled log-probabilities. Finished hypotheses are
//! ranked by `logprob_sum / lp(n)` with the length penalty
//! `lp(n) = ((5 + n) / 6)^lambda`, where `n` counts generated tokens
//! including EOS.
//!
//! Ties between equal scores go to the lower token id, except that EOS
//! loses every tie: a model with no preference keeps writing.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{source_ids, Example, Task, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{EncoderState, SeqModel};
use crate::numcore::log_softmax_row;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub temperature: f64,
    pub length_norm_lambda: f64,
    pub max_len: usize,
    pub min_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 10,
            temperature: 1.0,
            length_norm_lambda: 0.6,
            max_len: 32,
            min_len: 1,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Validation("beam_size must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Validation(format!("temperature {} must be positive", self.temperature)));
        }
        if !(self.length_norm_lambda >= 0.0) {
            return Err(Error::Validation(format!(
                "length_norm_lambda {} must be non-negative",
                self.length_norm_lambda
            )));
        }
        if self.min_len == 0 || self.max_len < self.min_len {
            return Err(Error::Validation(format!(
                "need max_len >= min_len >= 1, got max_len {} and min_len {}",
                self.max_len, self.min_len
            )));
        }
        Ok(())
    }

    /// `((5 + n) / 6)^lambda`.
    pub fn length_penalty(&self, n: usize) -> f64 {
        ((5.0 + n as f64) / 6.0).powf(self.length_norm_lambda)
    }
}

/// A decoded (partial or complete) sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Starts with BOS; ends with EOS when finished.
    pub token_ids: Vec<u32>,
    pub logprob_sum: f64,
    pub norm_score: f64,
}

impl Hypothesis {
    pub fn is_finished(&self) -> bool {
        self.token_ids.last() == Some(&EOS)
    }

    /// Generated tokens, without BOS and EOS.
    pub fn content(&self) -> &[u32] {
        let ids = &self.token_ids[1..];
        ids.strip_suffix(&[EOS]).unwrap_or(ids)
    }

    pub fn generated_len(&self) -> usize {
        self.token_ids.len() - 1
    }
}

/// Anything that yields next-token log-probabilities for a set of prefixes.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;

    /// Next-token log-probabilities for each prefix; prefixes share a length.
    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;

    /// Tokens that may never be generated.
    fn is_banned(&self, _id: u32) -> bool {
        false
    }
}

/// A model bound to one encoded source.
pub struct ModelScorer<'a> {
    pub model: &'a SeqModel,
    pub state: EncoderState,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a SeqModel, src_ids: &[u32]) -> Result<Self> {
        Ok(ModelScorer {
            model,
            state: model.encode(src_ids)?,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        self.model.step_many(&self.state, prefixes)
    }

    fn is_banned(&self, id: u32) -> bool {
        Vocabulary::is_reserved(id) && id != EOS
    }
}

fn tie_rank(id: u32) -> u32 {
    if id == EOS {
        u32::MAX
    } else {
        id
    }
}

fn cmp_tokens(a: &[u32], b: &[u32]) -> Ordering {
    a.iter().map(|&t| tie_rank(t)).cmp(b.iter().map(|&t| tie_rank(t)))
}

fn scaled(row: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        return row.to_vec();
    }
    let logits: Vec<f64> = row.iter().map(|v| v / temperature).collect();
    let mut out = Vec::with_capacity(row.len());
    log_softmax_row(&logits, &mut out);
    out
}

fn allowed(scorer: &dyn StepScorer, id: u32, generated: usize, cfg: &DecodeConfig) -> bool {
    if scorer.is_banned(id) {
        return false;
    }
    id != EOS || generated >= cfg.min_len
}

fn finish(cfg: &DecodeConfig, token_ids: Vec<u32>, logprob_sum: f64) -> Hypothesis {
    let n = token_ids.len() - 1;
    Hypothesis {
        norm_score: logprob_sum / cfg.length_penalty(n),
        token_ids,
        logprob_sum,
    }
}

/// Picks the highest-scoring allowed token at every step.
pub fn greedy_decode(scorer: &dyn StepScorer, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let mut ids = vec![BOS];
    let mut total = 0.0;
    for n in 1..=cfg.max_len {
        let row = scorer.next_log_probs(std::slice::from_ref(&ids))?.remove(0);
        let row = scaled(&row, cfg.temperature);
        let best = (0..row.len() as u32)
            .filter(|&id| allowed(scorer, id, n, cfg))
            .min_by(|&a, &b| {
                row[b as usize]
                    .total_cmp(&row[a as usize])
                    .then(tie_rank(a).cmp(&tie_rank(b)))
            })
            .ok_or_else(|| Error::Contract("no token may be generated".into()))?;
        total += row[best as usize];
        ids.push(best);
        if best == EOS {
            break;
        }
    }
    Ok(finish(cfg, ids, total))
}

/// Beam search; returns every hypothesis it finished (plus the live ones
/// if `max_len` was hit) ranked by length-normalised score.
pub fn beam_search(scorer: &dyn StepScorer, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let mut live: Vec<(Vec<u32>, f64)> = vec![(vec![BOS], 0.0)];
    let mut done: Vec<Hypothesis> = Vec::new();
    for n in 1..=cfg.max_len {
        if live.is_empty() || done.len() >= cfg.beam_size {
            break;
        }
        let prefixes: Vec<Vec<u32>> = live.iter().map(|(ids, _)| ids.clone()).collect();
        let rows = scorer.next_log_probs(&prefixes)?;
        let mut candidates: Vec<(usize, u32, f64)> = Vec::with_capacity(live.len() * scorer.vocab_size());
        for (h, row) in rows.iter().enumerate() {
            let row = scaled(row, cfg.temperature);
            for (id, lp) in row.iter().enumerate() {
                let id = id as u32;
                if allowed(scorer, id, n, cfg) {
                    candidates.push((h, id, live[h].1 + lp));
                }
            }
        }
        let order = |a: &(usize, u32, f64), b: &(usize, u32, f64)| {
            b.2.total_cmp(&a.2)
                .then_with(|| cmp_tokens(&live[a.0].0, &live[b.0].0))
                .then(tie_rank(a.1).cmp(&tie_rank(b.1)))
        };
        candidates.sort_by(order);
        candidates.truncate(cfg.beam_size);
        let mut next = Vec::with_capacity(candidates.len());
        for (h, id, score) in candidates {
            let mut ids = live[h].0.clone();
            ids.push(id);
            if id == EOS {
                done.push(finish(cfg, ids, score));
            } else {
                next.push((ids, score));
            }
        }
        live = next;
    }
    if done.len() < cfg.beam_size {
        // Out of length budget: unfinished beams compete as they stand.
        done.extend(live.into_iter().map(|(ids, s)| finish(cfg, ids, s)));
    }
    done.sort_by(|a, b| {
        b.norm_score
            .total_cmp(&a.norm_score)
            .then_with(|| cmp_tokens(&a.token_ids, &b.token_ids))
    });
    debug_assert!(done
        .first()
        .map_or(true, |top| done.iter().all(|h| h.norm_score <= top.norm_score)));
    Ok(done)
}

/// Beam-decodes every example's source and returns the top hypothesis as text.
pub fn batch_generate(
    model: &SeqModel,
    examples: &[Example],
    vocab: &Vocabulary,
    task: Task,
    max_src_len: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<String>> {
    cfg.validate()?;
    examples
        .iter()
        .enumerate()
        .map(|(index, ex)| {
            let wrap = |e: Error| Error::AtExample {
                index,
                source: Box::new(e),
            };
            let src = source_ids(ex, vocab, task, max_src_len);
            let scorer = ModelScorer::new(model, &src).map_err(wrap)?;
            let hyps = beam_search(&scorer, cfg).map_err(wrap)?;
            let top = hyps
                .first()
                .ok_or_else(|| wrap(Error::Contract("beam search found no hypothesis".into())))?;
            vocab.decode(top.content()).map_err(wrap)
        })
        .collect()
}
