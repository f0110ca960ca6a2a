use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const UNK: u32 = 4;
pub const NUM_RESERVED: usize = 5;

const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];

/// How [`Vocabulary::decode`] renders the separator token.
pub const SEP_DISPLAY: &str = " ||| ";

/// Character-level vocabulary with five reserved ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    reserved: Vec<String>,
    chars: Vec<char>,
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            reserved: RESERVED.iter().map(|s| s.to_string()).collect(),
            chars: v.chars,
        }
    }
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        if f.reserved != RESERVED {
            return Err(Error::Format(format!(
                "reserved tokens {:?} do not match {:?}",
                f.reserved, RESERVED
            )));
        }
        Vocabulary::from_chars(f.chars)
    }
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered list of distinct characters;
    /// the first character receives id 5.
    pub fn from_chars(chars: Vec<char>) -> Result<Self> {
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, (i + NUM_RESERVED) as u32).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary entry {c:?}")));
            }
        }
        Ok(Vocabulary { chars, index })
    }

    /// Counts characters over `corpus` and keeps those seen at least
    /// `min_freq` times, most frequent first, ties by code point.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        if min_freq == 0 {
            return Err(Error::Validation("min_freq must be at least 1".into()));
        }
        let mut counts: BTreeMap<char, usize> = BTreeMap::new();
        for text in corpus {
            for c in text.as_ref().chars() {
                *counts.entry(c).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyInput("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(char, usize)> = counts.into_iter().filter(|&(_, n)| n >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Vocabulary::from_chars(kept.into_iter().map(|(c, _)| c).collect())
    }

    pub fn len(&self) -> usize {
        self.chars.len() + NUM_RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> Option<u32> {
        self.index.get(&c).copied()
    }

    pub fn is_reserved(id: u32) -> bool {
        (id as usize) < NUM_RESERVED
    }

    /// Token string for an id (reserved ids render as `<name>`).
    pub fn token(&self, id: u32) -> Result<String> {
        let i = id as usize;
        if i < NUM_RESERVED {
            Ok(RESERVED[i].to_string())
        } else {
            self.chars
                .get(i - NUM_RESERVED)
                .map(|c| c.to_string())
                .ok_or_else(|| Error::Range(format!("token id {id} outside vocabulary of {}", self.len())))
        }
    }

    pub fn encode(&self, s: &str) -> Vec<u32> {
        s.chars().map(|c| self.id(c).unwrap_or(UNK)).collect()
    }

    /// Inverse of [`encode`](Self::encode). Reserved ids are dropped except
    /// SEP, which renders as [`SEP_DISPLAY`].
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let i = id as usize;
            if i >= self.len() {
                return Err(Error::Range(format!("token id {id} outside vocabulary of {}", self.len())));
            }
            if id == SEP {
                out.push_str(SEP_DISPLAY);
            } else if i >= NUM_RESERVED {
                out.push(self.chars[i - NUM_RESERVED]);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("vocabulary serializes");
        std::fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}
