//! Pretraining stream: fact statements, mcq renderings, reading-comprehension
//! passages and filler classification, sampled deterministically per step.
//! Variant seeds used here never overlap the ones used for evaluation sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render_crc, render_filler, render_mcq, FillerRule, MAX_VARIANTS};
use super::{derive_seed, WorldSpec};
use crate::error::Result;

/// A prompt and the token that should follow it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub tokens: Vec<usize>,
    pub target: usize,
}

/// Relative sampling weights of the pretraining sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusMix {
    pub facts: f64,
    pub mcq: f64,
    pub crc: f64,
    pub filler: f64,
}

impl Default for CorpusMix {
    fn default() -> Self {
        Self {
            facts: 0.25,
            mcq: 0.4,
            crc: 0.3,
            filler: 0.15,
        }
    }
}

const TRAIN_VARIANT_BASE: u64 = 1 << 20;

#[derive(Clone, Debug)]
pub struct TrainingStream<'w> {
    world: &'w WorldSpec,
    mix: CorpusMix,
    seed: u64,
}

impl<'w> TrainingStream<'w> {
    pub fn new(world: &'w WorldSpec, mix: CorpusMix, seed: u64) -> Self {
        Self { world, mix, seed }
    }

    /// The fact statement `<bos> in CULTURE SLOT is` → answer.
    pub fn statement(world: &WorldSpec, culture: usize, category: usize, slot: usize) -> Result<TrainingExample> {
        Ok(TrainingExample {
            tokens: vec![
                world.special("<bos>"),
                world.special("in"),
                world.culture_token(culture),
                world.slot_token(category, slot),
                world.special("is"),
            ],
            target: world.answer(culture, category, slot)?,
        })
    }

    /// The batch for one optimizer step; a pure function of (seed, step).
    pub fn batch(&self, step: usize, size: usize) -> Result<Vec<TrainingExample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, 0xC0, step as u64]));
        let w = self.world;
        let total = self.mix.facts + self.mix.mcq + self.mix.crc + self.mix.filler;
        let (nc, nk, ns) = (w.cultures.len(), w.categories.len(), w.sizes.slots_per_category);
        (0..size)
            .map(|_| {
                let u = rng.random::<f64>() * total;
                let variant = TRAIN_VARIANT_BASE + rng.random_range(0..1u64 << 40);
                if u < self.mix.facts {
                    let (c, k, s) = (rng.random_range(0..nc), rng.random_range(0..nk), rng.random_range(0..ns));
                    Self::statement(w, c, k, s)
                } else if u < self.mix.facts + self.mix.mcq {
                    let (c, k, s) = (rng.random_range(0..nc), rng.random_range(0..nk), rng.random_range(0..ns));
                    let inst = render_mcq(w, c, k, s, variant.max(MAX_VARIANTS))?;
                    Ok(TrainingExample {
                        target: inst.answer_token(),
                        tokens: inst.prompt,
                    })
                } else if u < self.mix.facts + self.mix.mcq + self.mix.crc {
                    let inst = render_crc(w, rng.random_range(0..nc), variant)?;
                    Ok(TrainingExample {
                        target: inst.answer_token(),
                        tokens: inst.prompt,
                    })
                } else {
                    let inst = render_filler(w, FillerRule::Majority, variant);
                    Ok(TrainingExample {
                        target: inst.answer_token(),
                        tokens: inst.prompt,
                    })
                }
            })
            .collect()
    }
}
