use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::corpus::Example;
use crate::data::vocab::{Vocabulary, BOS, EOS, PAD, SEP};
use crate::error::{Error, Result};

/// Input layout of a training stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Decoder-only language modelling of the body text.
    Pretrain,
    /// Body to edited headline.
    Adapt,
    /// Body, SEP, original headline to edited headline.
    Edit,
}

/// Padded id matrices for one step of teacher-forced training.
///
/// Matrices are stored row-major: `encoder_ids` is `size x src_len`, the
/// decoder matrices and `target_mask` are `size x tgt_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub encoder_ids: Vec<u32>,
    pub decoder_in_ids: Vec<u32>,
    pub decoder_target_ids: Vec<u32>,
    pub target_mask: Vec<bool>,
}

impl Batch {
    /// Pads ragged rows. Each decoder input row is BOS followed by the
    /// target row minus its final token.
    pub fn from_rows(sources: &[Vec<u32>], targets: &[Vec<u32>]) -> Batch {
        assert_eq!(sources.len(), targets.len());
        let size = sources.len();
        let src_len = sources.iter().map(Vec::len).max().unwrap_or(0);
        let tgt_len = targets.iter().map(Vec::len).max().unwrap_or(0);
        let mut encoder_ids = vec![PAD; size * src_len];
        let mut decoder_in_ids = vec![PAD; size * tgt_len];
        let mut decoder_target_ids = vec![PAD; size * tgt_len];
        for (r, (src, tgt)) in sources.iter().zip(targets).enumerate() {
            encoder_ids[r * src_len..r * src_len + src.len()].copy_from_slice(src);
            for (t, &id) in tgt.iter().enumerate() {
                decoder_target_ids[r * tgt_len + t] = id;
                decoder_in_ids[r * tgt_len + t] = if t == 0 { BOS } else { tgt[t - 1] };
            }
        }
        let target_mask = decoder_target_ids.iter().map(|&id| id != PAD).collect();
        Batch {
            size,
            src_len,
            tgt_len,
            encoder_ids,
            decoder_in_ids,
            decoder_target_ids,
            target_mask,
        }
    }

    pub fn encoder_row(&self, r: usize) -> &[u32] {
        &self.encoder_ids[r * self.src_len..(r + 1) * self.src_len]
    }

    pub fn target_row(&self, r: usize) -> &[u32] {
        &self.decoder_target_ids[r * self.tgt_len..(r + 1) * self.tgt_len]
    }

    pub fn decoder_in_row(&self, r: usize) -> &[u32] {
        &self.decoder_in_ids[r * self.tgt_len..(r + 1) * self.tgt_len]
    }

    pub fn n_target_tokens(&self) -> usize {
        self.target_mask.iter().filter(|&&m| m).count()
    }
}

/// Maximum source and target lengths, in tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeqLimits {
    pub max_src_len: usize,
    pub max_tgt_len: usize,
}

impl Default for SeqLimits {
    fn default() -> Self {
        SeqLimits {
            max_src_len: 256,
            max_tgt_len: 32,
        }
    }
}

/// Encoder input for one example under `task`, truncated to `max_src_len`.
///
/// For the edit layout the body is cut first so the original headline
/// and the single separator survive.
pub fn source_ids(ex: &Example, vocab: &Vocabulary, task: Task, max_src_len: usize) -> Vec<u32> {
    match task {
        Task::Pretrain => Vec::new(),
        Task::Adapt => {
            let mut ids = vocab.encode(&ex.body);
            ids.truncate(max_src_len);
            ids
        }
        Task::Edit => {
            let mut orig = vocab.encode(&ex.original);
            orig.truncate(max_src_len.saturating_sub(1));
            let room = max_src_len.saturating_sub(orig.len() + 1);
            let mut ids = vocab.encode(&ex.body);
            ids.truncate(room);
            ids.push(SEP);
            ids.extend(orig);
            ids
        }
    }
}

/// Target ids (EOS-terminated) for one example. Language-model targets are
/// the body itself and are limited by `max_src_len`.
pub fn target_ids(ex: &Example, vocab: &Vocabulary, task: Task, limits: SeqLimits) -> Vec<u32> {
    let (text, max) = match task {
        Task::Pretrain => (&ex.body, limits.max_src_len),
        Task::Adapt | Task::Edit => (&ex.edited, limits.max_tgt_len),
    };
    let mut ids = vocab.encode(text);
    ids.truncate(max.saturating_sub(1));
    ids.push(EOS);
    ids
}

/// Shuffles `examples` with `seed` and packs them into padded batches.
pub fn make_batches(
    examples: &[Example],
    vocab: &Vocabulary,
    task: Task,
    batch_size: usize,
    limits: SeqLimits,
    seed: u64,
) -> Result<Vec<Batch>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    batches_in_order(examples, &order, vocab, task, batch_size, limits)
}

/// Packs examples into batches without shuffling.
pub fn make_batches_ordered(
    examples: &[Example],
    vocab: &Vocabulary,
    task: Task,
    batch_size: usize,
    limits: SeqLimits,
) -> Result<Vec<Batch>> {
    let order: Vec<usize> = (0..examples.len()).collect();
    batches_in_order(examples, &order, vocab, task, batch_size, limits)
}

fn batches_in_order(
    examples: &[Example],
    order: &[usize],
    vocab: &Vocabulary,
    task: Task,
    batch_size: usize,
    limits: SeqLimits,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Validation("batch_size must be at least 1".into()));
    }
    if task == Task::Edit && limits.max_src_len < 2 {
        return Err(Error::Validation("edit layout needs max_src_len >= 2".into()));
    }
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let sources: Vec<Vec<u32>> = chunk
                .iter()
                .map(|&i| source_ids(&examples[i], vocab, task, limits.max_src_len))
                .collect();
            let targets: Vec<Vec<u32>> = chunk
                .iter()
                .map(|&i| target_ids(&examples[i], vocab, task, limits))
                .collect();
            Batch::from_rows(&sources, &targets)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{generate_corpus, GeneratorSpec};

    fn corpus(seed: u64, n: usize) -> (Vec<Example>, Vocabulary) {
        let ex = generate_corpus(&GeneratorSpec {
            seed,
            n_examples: n,
            ..GeneratorSpec::default()
        })
        .unwrap();
        let texts: Vec<&str> = ex
            .iter()
            .flat_map(|e| [e.body.as_str(), e.original.as_str(), e.edited.as_str()])
            .collect();
        let v = Vocabulary::build(&texts, 1).unwrap();
        (ex, v)
    }

    #[test]
    fn edit_rows_contain_exactly_one_sep() {
        let (ex, v) = corpus(3, 40);
        let limits = SeqLimits {
            max_src_len: 24,
            max_tgt_len: 8,
        };
        for b in make_batches(&ex, &v, Task::Edit, 7, limits, 1).unwrap() {
            for r in 0..b.size {
                assert_eq!(b.encoder_row(r).iter().filter(|&&id| id == SEP).count(), 1);
            }
            assert!(b.src_len <= 24 && b.tgt_len <= 8);
        }
    }

    #[test]
    fn pretrain_has_empty_encoder_and_body_targets() {
        let (ex, v) = corpus(3, 5);
        let b = &make_batches_ordered(&ex, &v, Task::Pretrain, 5, SeqLimits::default()).unwrap()[0];
        assert_eq!(b.src_len, 0);
        let mut want = v.encode(&ex[0].body);
        want.push(EOS);
        assert_eq!(&b.target_row(0)[..want.len()], want.as_slice());
        assert_eq!(b.decoder_in_row(0)[0], BOS);
        assert_eq!(&b.decoder_in_row(0)[1..want.len()], &want[..want.len() - 1]);
    }

    #[test]
    fn same_seed_same_order() {
        let (ex, v) = corpus(5, 60);
        let a = make_batches(&ex, &v, Task::Adapt, 8, SeqLimits::default(), 42).unwrap();
        let b = make_batches(&ex, &v, Task::Adapt, 8, SeqLimits::default(), 42).unwrap();
        let c = make_batches(&ex, &v, Task::Adapt, 8, SeqLimits::default(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_batch_size_is_rejected() {
        let (ex, v) = corpus(5, 4);
        assert!(make_batches(&ex, &v, Task::Adapt, 0, SeqLimits::default(), 0).is_err());
    }

    #[test]
    fn masks_and_padding_are_consistent_on_random_corpora() {
        for seed in 0..200u64 {
            let (ex, v) = corpus(seed, 1 + (seed as usize % 13));
            let task = [Task::Pretrain, Task::Adapt, Task::Edit][seed as usize % 3];
            let limits = SeqLimits {
                max_src_len: 10 + seed as usize % 30,
                max_tgt_len: 3 + seed as usize % 9,
            };
            let batches = make_batches(&ex, &v, task, 1 + seed as usize % 5, limits, seed).unwrap();
            let mut total_targets = 0;
            for b in &batches {
                for (i, &m) in b.target_mask.iter().enumerate() {
                    assert_eq!(m, b.decoder_target_ids[i] != PAD);
                }
                for r in 0..b.size {
                    let row = b.target_row(r);
                    let n = row.iter().filter(|&&id| id != PAD).count();
                    // EOS closes the real tokens; padding only follows it.
                    assert_eq!(row[n - 1], EOS);
                    assert!(row[n..].iter().all(|&id| id == PAD));
                    assert_eq!(b.decoder_in_row(r)[0], BOS);
                }
                total_targets += b.n_target_tokens();
            }
            let expected: usize = ex.iter().map(|e| target_ids(e, &v, task, limits).len()).sum();
            assert_eq!(total_targets, expected);
        }
    }
}
