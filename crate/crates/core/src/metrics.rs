//! Automatic evaluation metrics.
//!
//! The n-gram metrics are generic over the token type so they can run on
//! characters, ids or whitespace-split words alike. Scores reported as
//! percentages are on a 0 to 100 scale.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches_ordered, Example, SeqLimits, Task, Vocabulary};
use crate::error::{Error, Result};
use crate::model::SeqModel;

const EVAL_BATCH: usize = 32;

/// Token-level perplexity of the reference targets under teacher forcing.
pub fn perplexity(
    model: &SeqModel,
    examples: &[Example],
    vocab: &Vocabulary,
    task: Task,
    limits: SeqLimits,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("perplexity needs at least one example".into()));
    }
    let v = model.config().vocab_size;
    let mut nll = 0.0;
    let mut count = 0usize;
    for batch in make_batches_ordered(examples, vocab, task, EVAL_BATCH, limits)? {
        let lp = model.forward(&batch)?;
        let lp = lp.data();
        for (i, (&target, &keep)) in batch.decoder_target_ids.iter().zip(&batch.target_mask).enumerate() {
            if keep {
                nll -= lp[i * v + target as usize];
                count += 1;
            }
        }
    }
    Ok((nll / count as f64).exp())
}

fn ngrams<T: Clone + Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for g in seq.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

fn check_pairs(op: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!(
            "{op}: {a} candidates but {b} references"
        )));
    }
    Ok(())
}

/// Corpus BLEU-4 with one reference per candidate.
///
/// A zero match count for n >= 2 is smoothed to `(m + 1) / (c + 1)`.
pub fn bleu4<T: Clone + Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_pairs("bleu4", candidates.len(), references.len())?;
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refr) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += refr.len();
        for n in 1..=4 {
            let rc = ngrams(refr, n);
            for (g, k) in ngrams(cand, n) {
                matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += k;
            }
        }
    }
    if c_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..4 {
        let p = if matches[n] == 0 {
            1.0 / (totals[n] + 1) as f64
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_p += p.ln() / 4.0;
    }
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * log_p.exp())
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Macro-averaged ROUGE-L F1.
pub fn rouge_l<T: Eq>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_pairs("rouge_l", candidates.len(), references.len())?;
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| {
            let l = lcs_len(c, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / c.len() as f64;
            let r = l / r.len() as f64;
            2.0 * p * r / (p + r)
        })
        .sum();
    Ok(100.0 * total / candidates.len() as f64)
}

fn macro_average<T>(headlines: &[Vec<T>], score: impl Fn(&[T]) -> f64) -> f64 {
    if headlines.is_empty() {
        return 0.0;
    }
    let total: f64 = headlines
        .iter()
        .map(|h| if h.len() < 4 { 0.0 } else { score(h) })
        .sum();
    100.0 * total / headlines.len() as f64
}

/// Share of each headline's 4-grams that already appeared earlier in it.
pub fn token_rep4<T: Eq + Hash>(headlines: &[Vec<T>]) -> f64 {
    macro_average(headlines, |h| {
        let mut seen = HashSet::new();
        let grams = h.windows(4).count();
        let repeats = h.windows(4).filter(|g| !seen.insert(*g)).count();
        repeats as f64 / grams as f64
    })
}

/// The 4-grams occurring at least twice across the training targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RepRefSet<T: Eq + Hash> {
    grams: HashSet<Vec<T>>,
}

impl<T: Clone + Eq + Hash> RepRefSet<T> {
    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    pub fn contains(&self, gram: &[T]) -> bool {
        self.grams.contains(gram)
    }

    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.grams.iter().map(Vec::as_slice)
    }
}

pub fn build_rep_ref<T: Clone + Eq + Hash>(train_targets: &[Vec<T>]) -> RepRefSet<T> {
    let mut counts: HashMap<&[T], usize> = HashMap::new();
    for t in train_targets {
        for g in t.windows(4) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    RepRefSet {
        grams: counts
            .into_iter()
            .filter(|&(_, k)| k >= 2)
            .map(|(g, _)| g.to_vec())
            .collect(),
    }
}

/// Share of each headline's 4-grams that are frequent training 4-grams.
pub fn sent_rep4<T: Clone + Eq + Hash>(headlines: &[Vec<T>], reference: &RepRefSet<T>) -> f64 {
    macro_average(headlines, |h| {
        let grams = h.windows(4).count();
        let hits = h.windows(4).filter(|g| reference.contains(g)).count();
        hits as f64 / grams as f64
    })
}

/// Number of distinct 4-grams across all headlines.
pub fn unique4<T: Eq + Hash>(headlines: &[Vec<T>]) -> usize {
    headlines
        .iter()
        .flat_map(|h| h.windows(4))
        .collect::<HashSet<_>>()
        .len()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub perplexity: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub token_rep4: f64,
    pub sent_rep4: f64,
    pub unique4: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "perplexity,bleu4,rouge_l,token_rep4,sent_rep4,unique4";

    /// Scores generated headlines against references.
    pub fn from_text(perplexity: f64, generated: &[String], references: &[String], train_targets: &[String]) -> Result<Self> {
        let chars = |v: &[String]| v.iter().map(|s| s.chars().collect()).collect::<Vec<Vec<char>>>();
        let (gen, refs) = (chars(generated), chars(references));
        let rep_ref = build_rep_ref(&chars(train_targets));
        Ok(MetricsReport {
            perplexity,
            bleu4: bleu4(&gen, &refs)?,
            rouge_l: rouge_l(&gen, &refs)?,
            token_rep4: token_rep4(&gen),
            sent_rep4: sent_rep4(&gen, &rep_ref),
            unique4: unique4(&gen),
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.perplexity, self.bleu4, self.rouge_l, self.token_rep4, self.sent_rep4, self.unique4
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialise")
    }
}
