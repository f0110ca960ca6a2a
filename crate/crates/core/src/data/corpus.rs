use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A (body, original headline, edited headline) record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub body: String,
    pub original: String,
    pub edited: String,
    #[serde(rename = "domain", default)]
    pub domain_tag: Option<String>,
}

pub const TAG_GENERIC: &str = "generic";
pub const TAG_SPECIFIC: &str = "specific";
pub const TAG_HEADLINE: &str = "headline";

/// Parameters of the synthetic editing corpus.
///
/// Lengths are in characters; every character is one token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub n_examples: usize,
    /// Share of examples whose edited headline is a stock template.
    pub generic_fraction: f64,
    pub template_pool_size: usize,
    pub content_vocab_size: usize,
    pub body_length_range: (usize, usize),
    pub headline_length_range: (usize, usize),
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            seed: 1,
            n_examples: 2400,
            generic_fraction: 0.4,
            template_pool_size: 8,
            content_vocab_size: 64,
            body_length_range: (12, 18),
            headline_length_range: (5, 8),
        }
    }
}

const FIRST_CONTENT: u32 = 0x4E00;
const N_MARKERS: usize = 4;

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.generic_fraction) {
            return Err(Error::Validation(format!(
                "generic_fraction {} outside [0, 1]",
                self.generic_fraction
            )));
        }
        let (blo, bhi) = self.body_length_range;
        let (hlo, hhi) = self.headline_length_range;
        if blo > bhi || hlo > hhi {
            return Err(Error::Validation("length ranges must satisfy lo <= hi".into()));
        }
        if hlo < 3 {
            return Err(Error::Validation("headlines need at least 3 characters".into()));
        }
        if self.template_pool_size == 0 {
            return Err(Error::Validation("template_pool_size must be positive".into()));
        }
        let salient = self.salient_pool_size();
        if self.content_vocab_size < 8 || salient < hhi - 1 {
            return Err(Error::Validation(format!(
                "content_vocab_size {} too small for headlines of {} characters",
                self.content_vocab_size, hhi
            )));
        }
        if blo < hhi - 1 + 2 {
            return Err(Error::Validation(
                "bodies must be long enough to hold the salient words plus filler".into(),
            ));
        }
        Ok(())
    }

    fn salient_pool_size(&self) -> usize {
        self.content_vocab_size * 3 / 8
    }
}

/// Character inventory the generator draws from.
struct Alphabet {
    salient: Vec<char>,
    filler: Vec<char>,
    markers: Vec<char>,
}

impl Alphabet {
    fn new(spec: &GeneratorSpec) -> Self {
        let ch = |i: usize| char::from_u32(FIRST_CONTENT + i as u32).expect("CJK block");
        let n_salient = spec.salient_pool_size();
        Alphabet {
            salient: (0..n_salient).map(ch).collect(),
            filler: (n_salient..spec.content_vocab_size).map(ch).collect(),
            markers: (0..N_MARKERS).map(|i| ch(spec.content_vocab_size + i)).collect(),
        }
    }

    fn marker_for(&self, salient: char) -> char {
        let pos = self.salient.iter().position(|&c| c == salient).expect("salient char");
        self.markers[pos % self.markers.len()]
    }
}

/// Produces the synthetic editing corpus described by `spec`.
///
/// Generic examples reuse one of a handful of fixed template headlines
/// regardless of the body. Specific examples hide a few "salient"
/// characters among filler in the body; their headline lists those
/// characters in body order followed by a marker chosen by the first one.
/// The original headline is the edited one after a character drop or an
/// adjacent swap.
pub fn generate_corpus(spec: &GeneratorSpec) -> Result<Vec<Example>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let alphabet = Alphabet::new(spec);
    let (hlo, hhi) = spec.headline_length_range;
    let templates: Vec<String> = (0..spec.template_pool_size)
        .map(|_| {
            let len = rng.gen_range(hlo..=hhi);
            (0..len).map(|_| *alphabet.filler.choose(&mut rng).expect("filler")).collect()
        })
        .collect();

    let mut out = Vec::with_capacity(spec.n_examples);
    for _ in 0..spec.n_examples {
        let generic = rng.gen_bool(spec.generic_fraction);
        let headline_len = rng.gen_range(hlo..=hhi);
        let n_salient = if generic {
            rng.gen_range(2..=3)
        } else {
            headline_len - 1
        };
        let (body, salient) = make_body(&mut rng, spec, &alphabet, n_salient);
        let (edited, tag) = if generic {
            let t = templates.choose(&mut rng).expect("non-empty pool").clone();
            (t, TAG_GENERIC)
        } else {
            let mut h: String = salient.iter().collect();
            h.push(alphabet.marker_for(salient[0]));
            (h, TAG_SPECIFIC)
        };
        let original = corrupt(&mut rng, &edited);
        out.push(Example {
            body,
            original,
            edited,
            domain_tag: Some(tag.to_string()),
        });
    }
    Ok(out)
}

/// `n` headline-generation records (no original headline) for the
/// adaptation stage.
///
/// They continue the random stream of `generate_corpus(spec)`: same
/// template pool, disjoint examples.
pub fn generate_headline_corpus(spec: &GeneratorSpec, n: usize) -> Result<Vec<Example>> {
    let longer = GeneratorSpec {
        n_examples: spec.n_examples + n,
        ..spec.clone()
    };
    Ok(generate_corpus(&longer)?
        .into_iter()
        .skip(spec.n_examples)
        .map(|mut e| {
            e.original.clear();
            e.domain_tag = Some(TAG_HEADLINE.to_string());
            e
        })
        .collect())
}

fn make_body(
    rng: &mut ChaCha8Rng,
    spec: &GeneratorSpec,
    alphabet: &Alphabet,
    n_salient: usize,
) -> (String, Vec<char>) {
    let (blo, bhi) = spec.body_length_range;
    let len = rng.gen_range(blo..=bhi);
    let picked: Vec<char> = alphabet
        .salient
        .choose_multiple(rng, n_salient)
        .copied()
        .collect();
    let mut slots: Vec<usize> = (0..len).collect();
    slots.shuffle(rng);
    let mut positions = slots[..n_salient].to_vec();
    positions.sort_unstable();
    let mut body: Vec<char> = (0..len)
        .map(|_| *alphabet.filler.choose(rng).expect("filler"))
        .collect();
    for (&p, &c) in positions.iter().zip(&picked) {
        body[p] = c;
    }
    (body.into_iter().collect(), picked)
}

fn corrupt(rng: &mut ChaCha8Rng, edited: &str) -> String {
    let mut chars: Vec<char> = edited.chars().collect();
    if chars.len() >= 2 {
        if rng.gen_bool(0.5) {
            let i = rng.gen_range(0..chars.len());
            chars.remove(i);
        } else {
            let i = rng.gen_range(0..chars.len() - 1);
            chars.swap(i, i + 1);
        }
    }
    chars.into_iter().collect()
}
