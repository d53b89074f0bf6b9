//! A deterministic synthetic culture world and the datasets rendered from it.
//!
//! The world assigns, for every (culture, category, slot), one answer token
//! drawn from the category's value pool; within a slot every culture gets a
//! different value, so a question is only answerable by knowing the culture.
//! Prompts are token sequences over a closed vocabulary.

mod corpus;
mod dataset;
mod render;
mod suite;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use corpus::{CorpusMix, TrainingExample, TrainingStream};
pub use dataset::{
    read_jsonl, split_by_category, write_jsonl, DatasetFile, DatasetHeader, Instance, Kind, Split,
};
pub use render::{
    crc_oracle_answer, render_crc, render_ctrl, render_filler, render_mcq, render_target_task,
    FillerRule, MAX_VARIANTS,
};
pub use suite::{build_suite, Suite, SuiteSizes, SUITE_NAMES};

/// Fixed special tokens, in vocabulary order.
pub const SPECIALS: [&str; 19] = [
    "<pad>", "<bos>", "<q>", "in", "is", "<opt>", "<ans>", "<passage>", "went", "applied", "and",
    "only", "responded", "which", "<f>", "<f2>", "<cls>", "<label_a>", "<label_b>",
];

const CULTURE_NAMES: [&str; 16] = [
    "aurel", "borvan", "cendra", "dalmor", "esteva", "fiorin", "galdur", "hessa", "iskar",
    "jorveth", "kelmar", "lunor", "mirava", "nostri", "oskel", "pravin",
];

const CATEGORY_NAMES: [&str; 6] = ["food", "work_life", "sport", "education", "family", "holidays"];

/// Closed token table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocab {
    fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token '{t}'")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("token '{token}' not in vocabulary")))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

/// Requested world dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSizes {
    pub cultures: usize,
    pub categories: usize,
    /// Leading categories used for neuron identification; the rest are held out.
    pub neur_categories: usize,
    pub slots_per_category: usize,
    /// Values per category pool; must exceed `cultures + 2` so that every
    /// question has three distractors.
    pub values_per_category: usize,
    pub people: usize,
    pub filler_words: usize,
    /// Upper bound on the vocabulary size.
    pub max_vocab: usize,
}

impl Default for WorldSizes {
    fn default() -> Self {
        Self {
            cultures: 8,
            categories: 6,
            neur_categories: 3,
            slots_per_category: 12,
            values_per_category: 12,
            people: 12,
            filler_words: 40,
            max_vocab: 320,
        }
    }
}

/// One memorized association.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub culture: usize,
    pub category: usize,
    pub slot: usize,
    pub answer: usize,
}

/// The generated world: names, vocabulary and facts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub sizes: WorldSizes,
    pub cultures: Vec<String>,
    pub categories: Vec<String>,
    pub vocab: Vocab,
    /// Indexed `[culture][category][slot]`.
    facts: Vec<Vec<Vec<usize>>>,
}

impl WorldSpec {
    pub fn culture_token(&self, c: usize) -> usize {
        self.vocab.id(&self.cultures[c]).expect("culture token exists")
    }

    pub fn culture_tokens(&self) -> Vec<usize> {
        (0..self.cultures.len()).map(|c| self.culture_token(c)).collect()
    }

    pub fn slot_token(&self, category: usize, slot: usize) -> usize {
        self.vocab
            .id(&format!("{}_s{slot}", self.categories[category]))
            .expect("slot token exists")
    }

    pub fn value_tokens(&self, category: usize) -> Vec<usize> {
        (0..self.sizes.values_per_category)
            .map(|v| {
                self.vocab
                    .id(&format!("{}_v{v}", self.categories[category]))
                    .expect("value token exists")
            })
            .collect()
    }

    pub fn person_token(&self, p: usize) -> usize {
        self.vocab.id(&format!("person{p}")).expect("person token exists")
    }

    pub fn filler_token(&self, w: usize) -> usize {
        self.vocab.id(&format!("w{w}")).expect("filler token exists")
    }

    pub fn special(&self, name: &str) -> usize {
        self.vocab.id(name).expect("special token exists")
    }

    pub fn culture_index(&self, name: &str) -> Result<usize> {
        self.cultures
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Label(format!("unknown culture '{name}'")))
    }

    pub fn category_index(&self, name: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Label(format!("unknown category '{name}'")))
    }

    pub fn is_neur_category(&self, category: usize) -> bool {
        category < self.sizes.neur_categories
    }

    pub fn answer(&self, culture: usize, category: usize, slot: usize) -> Result<usize> {
        self.facts
            .get(culture)
            .and_then(|c| c.get(category))
            .and_then(|c| c.get(slot))
            .copied()
            .ok_or_else(|| {
                Error::Lookup(format!(
                    "no fact for culture {culture}, category {category}, slot {slot}"
                ))
            })
    }

    /// Every fact in (culture, category, slot) order.
    pub fn facts(&self) -> Vec<Fact> {
        let mut out = Vec::new();
        for (culture, cats) in self.facts.iter().enumerate() {
            for (category, slots) in cats.iter().enumerate() {
                for (slot, &answer) in slots.iter().enumerate() {
                    out.push(Fact {
                        culture,
                        category,
                        slot,
                        answer,
                    });
                }
            }
        }
        out
    }

    /// Values usable as distractors for a fact: the slot's answers for other
    /// cultures first, then unused pool values.
    pub fn distractor_pool(&self, culture: usize, category: usize, slot: usize) -> Result<Vec<usize>> {
        let answer = self.answer(culture, category, slot)?;
        let mut pool: Vec<usize> = (0..self.cultures.len())
            .filter(|&c| c != culture)
            .map(|c| self.facts[c][category][slot])
            .collect();
        for v in self.value_tokens(category) {
            if v != answer && !pool.contains(&v) {
                pool.push(v);
            }
        }
        Ok(pool)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("world serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut w: WorldSpec = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        w.vocab = Vocab::new(std::mem::take(&mut w.vocab.tokens))?;
        Ok(w)
    }
}

/// Mixes integers into a seed (splitmix64 chain).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut x: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        x ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

/// Builds a world deterministically from `seed`.
pub fn generate_world(seed: u64, sizes: &WorldSizes) -> Result<WorldSpec> {
    if sizes.cultures < 2 || sizes.categories < 2 || sizes.slots_per_category < 1 {
        return Err(Error::Config(
            "a world needs at least 2 cultures, 2 categories and 1 slot".into(),
        ));
    }
    if sizes.neur_categories == 0 || sizes.neur_categories >= sizes.categories {
        return Err(Error::Config(
            "neur_categories must leave at least one category on each side".into(),
        ));
    }
    if sizes.values_per_category < sizes.cultures.max(4) {
        return Err(Error::Capacity(format!(
            "{} values per category cannot give {} cultures distinct answers with 3 distractors",
            sizes.values_per_category, sizes.cultures
        )));
    }
    let cultures: Vec<String> = (0..sizes.cultures)
        .map(|i| match CULTURE_NAMES.get(i) {
            Some(n) => (*n).to_string(),
            None => format!("culture{i}"),
        })
        .collect();
    let categories: Vec<String> = (0..sizes.categories)
        .map(|i| match CATEGORY_NAMES.get(i) {
            Some(n) => (*n).to_string(),
            None => format!("category{i}"),
        })
        .collect();

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(cultures.iter().cloned());
    for cat in &categories {
        tokens.extend((0..sizes.slots_per_category).map(|s| format!("{cat}_s{s}")));
    }
    for cat in &categories {
        tokens.extend((0..sizes.values_per_category).map(|v| format!("{cat}_v{v}")));
    }
    tokens.extend((0..sizes.people).map(|p| format!("person{p}")));
    tokens.extend((0..sizes.filler_words).map(|w| format!("w{w}")));
    if tokens.len() > sizes.max_vocab {
        return Err(Error::Capacity(format!(
            "requested sizes need {} tokens, vocabulary limit is {}",
            tokens.len(),
            sizes.max_vocab
        )));
    }
    let vocab = Vocab::new(tokens)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x7767]));
    let mut facts = vec![vec![vec![0usize; sizes.slots_per_category]; sizes.categories]; sizes.cultures];
    for (k, cat) in categories.iter().enumerate() {
        let pool: Vec<usize> = (0..sizes.values_per_category)
            .map(|v| vocab.id(&format!("{cat}_v{v}")).expect("value token"))
            .collect();
        for s in 0..sizes.slots_per_category {
            let mut perm = pool.clone();
            perm.shuffle(&mut rng);
            for (c, culture_facts) in facts.iter_mut().enumerate() {
                culture_facts[k][s] = perm[c];
            }
        }
    }
    Ok(WorldSpec {
        seed,
        sizes: sizes.clone(),
        cultures,
        categories,
        vocab,
        facts,
    })
}
