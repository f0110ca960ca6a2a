//! Corpus handling: cleaning, character vocabulary, synthetic data, JSONL
//! files and batching.

mod batch;
mod clean;
mod corpus;
mod jsonl;
mod vocab;

pub use batch::{make_batches, make_batches_ordered, source_ids, target_ids, Batch, SeqLimits, Task};
pub use clean::clean_text;
pub use corpus::{
    generate_corpus, generate_headline_corpus, Example, GeneratorSpec, TAG_GENERIC, TAG_HEADLINE,
    TAG_SPECIFIC,
};
pub use jsonl::{load_jsonl, save_jsonl};
pub use vocab::{Vocabulary, BOS, EOS, NUM_RESERVED, PAD, SEP, SEP_DISPLAY, UNK};
