//! Prompt templates.
//!
//! * mcq:  `<bos> <q> CULTURE SLOT <opt> c1 c2 c3 c4 <ans>`
//! * ctrl: `<bos> <opt> c1 c2 c3 c4 <ans>` (the mcq with its question removed)
//! * crc:  `<bos> <passage> PERSON went T <q> which <opt> c1 c2 c3 c4 <ans>` or, with a
//!   dummy culture D, `<bos> <passage> PERSON applied X and Y only T responded <q> which ...`
//!   where {X, Y} = {T, D} in random order
//! * filler: `<bos> <f> w1 .. w7 <cls>`; target task: `<bos> <f2> w1 .. w7`

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Instance, Kind, Split};
use super::{derive_seed, WorldSpec};
use crate::error::{Error, Result};

/// Upper bound on rendered variants per fact in any evaluation dataset.
pub const MAX_VARIANTS: u64 = 5;

const FILLER_LEN: usize = 7;

fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

pub fn render_mcq(
    world: &WorldSpec,
    culture: usize,
    category: usize,
    slot: usize,
    variant: u64,
) -> Result<Instance> {
    let answer = world.answer(culture, category, slot)?;
    let mut rng = rng_for(&[world.seed, 1, culture as u64, category as u64, slot as u64, variant]);
    let c = world.cultures.len();
    let pool = world.distractor_pool(culture, category, slot)?;
    // Prefer other cultures' answers for this slot; fall back to unused values.
    let primary = &pool[..(c - 1).max(3).min(pool.len())];
    let mut distractors: Vec<usize> = primary.choose_multiple(&mut rng, 3).copied().collect();
    distractors.shuffle(&mut rng);
    // The answer position rotates with the variant so that variants of one
    // fact never all share a position.
    let base = (derive_seed(&[world.seed, 11, culture as u64, category as u64, slot as u64]) % 4) as usize;
    let pos = (base + variant as usize) % 4;
    let mut choices = distractors;
    choices.insert(pos, answer);

    let mut prompt = vec![
        world.special("<bos>"),
        world.special("<q>"),
        world.culture_token(culture),
        world.slot_token(category, slot),
        world.special("<opt>"),
    ];
    prompt.extend(&choices);
    prompt.push(world.special("<ans>"));
    Ok(Instance {
        id: format!("mcq-{}-{}-s{slot}-v{variant}", world.cultures[culture], world.categories[category]),
        kind: Kind::Mcq,
        culture: Some(world.cultures[culture].clone()),
        category: Some(world.categories[category].clone()),
        prompt,
        choices,
        answer: pos,
        split: if world.is_neur_category(category) {
            Split::Neur
        } else {
            Split::Test
        },
        source: None,
    })
}

/// Strips the question from an mcq, keeping the answer-format tokens and choices.
pub fn render_ctrl(world: &WorldSpec, mcq: &Instance) -> Result<Instance> {
    if mcq.kind != Kind::Mcq {
        return Err(Error::Kind {
            expected: "mcq".into(),
            found: mcq.kind.as_str().into(),
        });
    }
    let mut prompt = vec![world.special("<bos>"), world.special("<opt>")];
    prompt.extend(&mcq.choices);
    prompt.push(world.special("<ans>"));
    Ok(Instance {
        id: format!("ctrl-{}", mcq.id.trim_start_matches("mcq-")),
        kind: Kind::Ctrl,
        prompt,
        source: Some(mcq.id.clone()),
        ..mcq.clone()
    })
}

/// A reading-comprehension item whose answer is a culture named in the passage.
/// Variants with `variant % 5 < 2` mention a dummy culture; even variants are
/// assigned to the identification split, odd ones to the test split.
pub fn render_crc(world: &WorldSpec, target: usize, variant: u64) -> Result<Instance> {
    let c = world.cultures.len();
    if c < 4 {
        return Err(Error::Capacity(format!(
            "reading-comprehension items need 4 cultures, world has {c}"
        )));
    }
    if target >= c {
        return Err(Error::Label(format!("unknown culture index {target}")));
    }
    let mut rng = rng_for(&[world.seed, 2, target as u64, variant]);
    let dummy_variant = variant % 5 < 2;
    let person = world.person_token(rng.random_range(0..world.sizes.people));
    let t = world.culture_token(target);
    let others: Vec<usize> = (0..c).filter(|&x| x != target).collect();
    let mut picked: Vec<usize> = others.choose_multiple(&mut rng, 3).copied().collect();
    picked.shuffle(&mut rng);

    let mut prompt = vec![world.special("<bos>"), world.special("<passage>"), person];
    if dummy_variant {
        let d = world.culture_token(picked[0]);
        let (x, y) = if rng.random_bool(0.5) { (t, d) } else { (d, t) };
        prompt.extend([
            world.special("applied"),
            x,
            world.special("and"),
            y,
            world.special("only"),
            t,
            world.special("responded"),
        ]);
    } else {
        prompt.extend([world.special("went"), t]);
    }
    prompt.extend([world.special("<q>"), world.special("which"), world.special("<opt>")]);
    let mut choices: Vec<usize> = picked.iter().map(|&x| world.culture_token(x)).collect();
    let pos = rng.random_range(0..4);
    choices.insert(pos, t);
    prompt.extend(&choices);
    prompt.push(world.special("<ans>"));
    Ok(Instance {
        id: format!("crc-{}-v{variant}", world.cultures[target]),
        kind: Kind::Crc,
        culture: Some(world.cultures[target].clone()),
        category: None,
        prompt,
        choices,
        answer: pos,
        split: if variant % 2 == 0 { Split::Neur } else { Split::Test },
        source: None,
    })
}

/// Answers a crc item from its passage alone: the choice named in the
/// passage, or, when two are named, the one in the `only ...` clause.
pub fn crc_oracle_answer(world: &WorldSpec, inst: &Instance) -> Option<usize> {
    let q = world.special("<q>");
    let passage: Vec<usize> = inst.prompt.iter().copied().take_while(|&t| t != q).collect();
    let named: Vec<usize> = (0..inst.choices.len())
        .filter(|&i| passage.contains(&inst.choices[i]))
        .collect();
    match named.as_slice() {
        [one] => Some(*one),
        [_, _] => {
            let only = world.special("only");
            let at = passage.iter().position(|&t| t == only)?;
            let accepted = *passage.get(at + 1)?;
            inst.choices.iter().position(|&c| c == accepted)
        }
        _ => None,
    }
}

/// Which labelling rule a filler sequence follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillerRule {
    /// `<f>` prefix: label a when most words come from the first half of the word list.
    Majority,
    /// `<f2>` prefix: label a when the last word comes from the first half. Only seen during fine-tuning.
    LastLow,
}

pub fn render_filler(world: &WorldSpec, rule: FillerRule, variant: u64) -> Instance {
    let tag = match rule {
        FillerRule::Majority => 3,
        FillerRule::LastLow => 4,
    };
    let mut rng = rng_for(&[world.seed, tag, variant]);
    let n = world.sizes.filler_words;
    let words: Vec<usize> = (0..FILLER_LEN).map(|_| rng.random_range(0..n)).collect();
    let (prefix, label_a) = match rule {
        FillerRule::Majority => {
            let low = words.iter().filter(|&&w| w < n / 2).count();
            ("<f>", low * 2 > FILLER_LEN)
        }
        FillerRule::LastLow => ("<f2>", words[FILLER_LEN - 1] < n / 2),
    };
    let mut prompt = vec![world.special("<bos>"), world.special(prefix)];
    prompt.extend(words.iter().map(|&w| world.filler_token(w)));
    if rule == FillerRule::Majority {
        prompt.push(world.special("<cls>"));
    }
    Instance {
        id: format!("{}-v{variant}", if rule == FillerRule::Majority { "filler" } else { "target" }),
        kind: Kind::Filler,
        culture: None,
        category: None,
        prompt,
        choices: vec![world.special("<label_a>"), world.special("<label_b>")],
        answer: if label_a { 0 } else { 1 },
        split: if variant % 2 == 0 { Split::Neur } else { Split::Test },
        source: None,
    }
}

pub fn render_target_task(world: &WorldSpec, variant: u64) -> Instance {
    render_filler(world, FillerRule::LastLow, variant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, WorldSizes};

    fn world() -> WorldSpec {
        generate_world(21, &WorldSizes::default()).unwrap()
    }

    #[test]
    fn mcq_is_deterministic_and_contains_answer() {
        let w = world();
        let a = render_mcq(&w, 2, 3, 4, 1).unwrap();
        assert_eq!(a, render_mcq(&w, 2, 3, 4, 1).unwrap());
        assert_eq!(a.answer_token(), w.answer(2, 3, 4).unwrap());
        assert_eq!(a.choices.len(), 4);
        assert!(a.prompt.contains(&w.culture_token(2)));
        assert_eq!(a.split, Split::Test);
        assert!(render_mcq(&w, 9, 0, 0, 0).is_err());
    }

    #[test]
    fn answer_position_varies_across_variants() {
        let w = world();
        for (c, k, s) in [(0, 0, 0), (3, 1, 7), (7, 5, 11)] {
            let positions: Vec<usize> = (0..MAX_VARIANTS)
                .map(|v| render_mcq(&w, c, k, s, v).unwrap().answer)
                .collect();
            assert!(positions.iter().any(|&p| p != positions[0]), "{positions:?}");
        }
    }

    #[test]
    fn ctrl_strips_question() {
        let w = world();
        let mcq = render_mcq(&w, 1, 0, 2, 3).unwrap();
        let ctrl = render_ctrl(&w, &mcq).unwrap();
        assert_eq!(ctrl.choices, mcq.choices);
        assert_eq!(ctrl.answer, mcq.answer);
        assert_eq!(ctrl.source.as_deref(), Some(mcq.id.as_str()));
        for c in w.culture_tokens() {
            assert!(!ctrl.prompt.contains(&c));
        }
        // Multiset containment.
        let mut pool = mcq.prompt.clone();
        for t in &ctrl.prompt {
            let at = pool.iter().position(|x| x == t).expect("ctrl token present in mcq");
            pool.swap_remove(at);
        }
        assert!(render_ctrl(&w, &ctrl).is_err());
    }

    #[test]
    fn crc_structure() {
        let w = world();
        let mut neur = 0;
        for v in 0..50 {
            let inst = render_crc(&w, 3, v).unwrap();
            let q = w.special("<q>");
            let passage: Vec<usize> = inst.prompt.iter().copied().take_while(|&t| t != q).collect();
            assert!(passage.contains(&inst.answer_token()));
            let named = w.culture_tokens().iter().filter(|c| passage.contains(c)).count();
            assert_eq!(named, if v % 5 < 2 { 2 } else { 1 });
            assert_eq!(crc_oracle_answer(&w, &inst), Some(inst.answer));
            if inst.split == Split::Neur {
                neur += 1;
            }
        }
        assert_eq!(neur, 25);
    }

    #[test]
    fn crc_needs_four_cultures() {
        let sizes = WorldSizes {
            cultures: 3,
            ..WorldSizes::default()
        };
        let w = generate_world(1, &sizes).unwrap();
        assert!(matches!(render_crc(&w, 0, 0), Err(Error::Capacity(_))));
    }

    #[test]
    fn filler_labels_follow_rules() {
        let w = world();
        for v in 0..20 {
            let f = render_filler(&w, FillerRule::Majority, v);
            let low = f.prompt[2..9]
                .iter()
                .filter(|&&t| (t - w.filler_token(0)) < 20)
                .count();
            assert_eq!(f.answer == 0, low >= 4);
            let g = render_target_task(&w, v);
            let last = g.prompt.last().unwrap() - w.filler_token(0);
            assert_eq!(g.answer == 0, last < 20);
        }
    }
}
