//! Evaluation under neuron masks: choice-restricted accuracy, the Likert
//! alignment score, random-mask baselines, bootstrap p-values, cross-culture
//! drop matrices and layer/family distribution reports.

mod report;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::neuron::{universe, Family, NeuronId, NeuronMask};
use crate::stats::{mean, sample_std};
use crate::world::{derive_seed, DatasetFile};

pub use report::{report_path, Distribution};

/// Sequences per batched forward pass.
const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub culture: Option<String>,
    /// Index into the instance's choices.
    pub predicted: usize,
    pub answer: usize,
}

impl Prediction {
    pub fn correct(&self) -> bool {
        self.predicted == self.answer
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub mask_id: String,
    pub metric: String,
    pub value: f64,
    pub per_culture: BTreeMap<String, f64>,
    pub predictions: Vec<Prediction>,
}

fn percent_correct<'a>(preds: impl Iterator<Item = &'a Prediction>) -> f64 {
    let (mut n, mut ok) = (0usize, 0usize);
    for p in preds {
        n += 1;
        ok += p.correct() as usize;
    }
    ok as f64 / n as f64 * 100.0
}

impl EvalReport {
    /// Accuracy recomputed from the stored predictions.
    pub fn recompute(&self) -> f64 {
        percent_correct(self.predictions.iter())
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "#dataset={},mask={},metric={},value={:.2}\nid,culture,predicted,answer,correct\n",
            self.dataset, self.mask_id, self.metric, self.value
        );
        for p in &self.predictions {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.id,
                p.culture.as_deref().unwrap_or("-"),
                p.predicted,
                p.answer,
                p.correct() as u8
            ));
        }
        out
    }
}

/// Index of the largest value; the first one wins ties.
fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Accuracy of the argmax over each instance's choice tokens.
pub fn eval_accuracy(model: &Model, dataset: &DatasetFile, mask: &NeuronMask, mask_id: &str) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Empty(format!("dataset {}", dataset.header.name)));
    }
    let predictions: Vec<Prediction> = dataset
        .instances
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let seqs: Vec<&[usize]> = chunk.iter().map(|i| i.prompt.as_slice()).collect();
            let logits = model.final_logits(&seqs, mask)?;
            Ok(chunk
                .iter()
                .zip(logits)
                .map(|(inst, row)| Prediction {
                    id: inst.id.clone(),
                    culture: inst.culture.clone(),
                    // Softmax is monotone, so comparing logits compares probabilities.
                    predicted: argmax_first(inst.choices.iter().map(|&c| row[c])),
                    answer: inst.answer,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let mut cultures: BTreeMap<String, Vec<&Prediction>> = BTreeMap::new();
    for p in &predictions {
        if let Some(c) = &p.culture {
            cultures.entry(c.clone()).or_default().push(p);
        }
    }
    let per_culture = cultures
        .into_iter()
        .map(|(c, ps)| (c, percent_correct(ps.into_iter())))
        .collect();
    Ok(EvalReport {
        dataset: dataset.header.name.clone(),
        mask_id: mask_id.to_string(),
        metric: "accuracy".into(),
        value: percent_correct(predictions.iter()),
        per_culture,
        predictions,
    })
}

/// One Likert-style item: numeric options, the majority answer and a prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikertItem {
    pub options: Vec<f64>,
    pub majority: f64,
    pub prediction: f64,
}

/// Mean over items of `(1 − |a − p| / max_o |o − a|) · 100`.
pub fn score_c(items: &[LikertItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Empty("likert items".into()));
    }
    let mut total = 0.0;
    for (i, it) in items.iter().enumerate() {
        let lo = it.options.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = it.options.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if it.options.is_empty() || it.prediction < lo || it.prediction > hi {
            return Err(Error::Range(format!(
                "item {i}: prediction {} outside options [{lo}, {hi}]",
                it.prediction
            )));
        }
        let max_dist = it
            .options
            .iter()
            .map(|o| (o - it.majority).abs())
            .fold(0.0, f64::max);
        let dist = (it.majority - it.prediction).abs();
        total += if max_dist == 0.0 { 1.0 } else { 1.0 - dist / max_dist } * 100.0;
    }
    Ok(total / items.len() as f64)
}

/// How many neurons of each family a set holds.
pub fn composition(mask: &NeuronMask) -> BTreeMap<Family, usize> {
    let mut out = BTreeMap::new();
    for n in mask.iter() {
        *out.entry(n.family).or_insert(0) += 1;
    }
    out
}

/// A uniform random mask with the given number of neurons per family.
pub fn random_mask(model: &Model, counts: &BTreeMap<Family, usize>, seed: u64) -> Result<NeuronMask> {
    let all = universe(model.config());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members = Vec::new();
    for (&family, &k) in counts {
        let pool: Vec<NeuronId> = all.iter().copied().filter(|n| n.family == family).collect();
        if k > pool.len() {
            return Err(Error::Capacity(format!(
                "cannot draw {k} {family} neurons from {}",
                pool.len()
            )));
        }
        members.extend(sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]));
    }
    NeuronMask::new(model.config(), members)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub composition: BTreeMap<Family, usize>,
    pub per_seed: Vec<f64>,
    /// Unmasked metric minus the per-seed metric.
    pub drops: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation of `per_seed`.
    pub std: f64,
}

impl BaselineReport {
    pub fn mean_drop(&self) -> f64 {
        mean(&self.drops)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("#dataset={},mean={:.4},std={:.4}\nseed,accuracy,drop\n", self.dataset, self.mean, self.std);
        for ((s, v), d) in self.seeds.iter().zip(&self.per_seed).zip(&self.drops) {
            out.push_str(&format!("{s},{v:.4},{d:.4}\n"));
        }
        out
    }
}

/// Evaluates random masks of a fixed per-family composition, one per seed.
pub fn random_mask_baseline(
    model: &Model,
    dataset: &DatasetFile,
    counts: &BTreeMap<Family, usize>,
    seeds: &[u64],
    unmasked: &EvalReport,
) -> Result<BaselineReport> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mask = random_mask(model, counts, derive_seed(&[seed, 0x5A]))?;
        per_seed.push(eval_accuracy(model, dataset, &mask, &format!("random-{seed}"))?.value);
    }
    let drops = per_seed.iter().map(|v| unmasked.value - v).collect();
    Ok(BaselineReport {
        dataset: dataset.header.name.clone(),
        seeds: seeds.to_vec(),
        composition: counts.clone(),
        mean: mean(&per_seed),
        std: sample_std(&per_seed),
        per_seed,
        drops,
    })
}

/// Fraction of `samples` bootstrap means of `random_drops` that reach `culture_drop`.
pub fn bootstrap_pvalue(culture_drop: f64, random_drops: &[f64], samples: usize, seed: u64) -> Result<f64> {
    if random_drops.len() < 2 {
        return Err(Error::Config(format!(
            "bootstrap needs at least 2 random drops, got {}",
            random_drops.len()
        )));
    }
    if samples == 0 {
        return Err(Error::Config("bootstrap needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = random_drops.len();
    let mut hits = 0usize;
    for _ in 0..samples {
        let m = (0..n).map(|_| random_drops[rng.random_range(0..n)]).sum::<f64>() / n as f64;
        hits += (m >= culture_drop) as usize;
    }
    Ok(hits as f64 / samples as f64)
}

/// Accuracy drops when each culture's mask is evaluated on each culture's test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossCultureMatrix {
    pub masks: Vec<String>,
    pub evals: Vec<String>,
    pub unmasked: Vec<f64>,
    /// `drops[mask][eval]`.
    pub drops: Vec<Vec<f64>>,
    /// 1 is the largest drop in a row; equal drops share a rank.
    pub ranks: Vec<Vec<usize>>,
}

impl CrossCultureMatrix {
    /// Rows whose own culture has rank 1.
    pub fn diagonal_rank_one(&self) -> usize {
        self.masks
            .iter()
            .enumerate()
            .filter(|(r, m)| {
                self.evals
                    .iter()
                    .position(|e| e == *m)
                    .is_some_and(|c| self.ranks[*r][c] == 1)
            })
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("mask,{}\n", self.evals.join(","));
        for (m, row) in self.masks.iter().zip(&self.drops) {
            let cells: Vec<String> = row.iter().map(|d| format!("{d:.2}")).collect();
            out.push_str(&format!("{m},{}\n", cells.join(",")));
        }
        out
    }
}

fn competition_ranks(row: &[f64]) -> Vec<usize> {
    row.iter()
        .map(|v| 1 + row.iter().filter(|w| *w > v).count())
        .collect()
}

pub fn cross_culture_matrix(
    model: &Model,
    masks: &[(String, NeuronMask)],
    tests: &[(String, DatasetFile)],
) -> Result<CrossCultureMatrix> {
    let none = NeuronMask::empty();
    let unmasked = tests
        .iter()
        .map(|(_, d)| Ok(eval_accuracy(model, d, &none, "none")?.value))
        .collect::<Result<Vec<f64>>>()?;
    let mut drops = Vec::with_capacity(masks.len());
    for (name, mask) in masks {
        let row = tests
            .iter()
            .zip(&unmasked)
            .map(|((_, d), base)| Ok(base - eval_accuracy(model, d, mask, name)?.value))
            .collect::<Result<Vec<f64>>>()?;
        drops.push(row);
    }
    Ok(CrossCultureMatrix {
        masks: masks.iter().map(|(m, _)| m.clone()).collect(),
        evals: tests.iter().map(|(e, _)| e.clone()).collect(),
        ranks: drops.iter().map(|r| competition_ranks(r)).collect(),
        unmasked,
        drops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ParamId};
    use crate::world::{DatasetHeader, Instance, Kind, Split};

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            hidden_size: 8,
            num_heads: 2,
            head_dim: 2,
            num_kv_heads: 1,
            intermediate_size: 6,
            vocab_size: 8,
            max_seq_len: 4,
            activation: Default::default(),
        }
    }

    fn dataset(instances: Vec<Instance>) -> DatasetFile {
        DatasetFile::new(
            DatasetHeader {
                name: "fixture".into(),
                world_seed: 0,
                generator: "test".into(),
                params: String::new(),
            },
            instances,
        )
        .unwrap()
    }

    fn inst(i: usize, last: usize, answer: usize) -> Instance {
        Instance {
            id: format!("x{i}"),
            kind: Kind::Mcq,
            culture: Some(["a", "b"][i % 2].into()),
            category: None,
            prompt: vec![1, last],
            choices: vec![4, 5, 6, 7],
            answer,
            split: Split::Test,
            source: None,
        }
    }

    /// Residual stream carries the last token's embedding straight to an
    /// unembedding that maps token t to logit row t + 4.
    fn oracle_model() -> Model {
        let mut m = Model::zeros(cfg()).unwrap();
        for t in 0..4 {
            m.set(ParamId::TokenEmbedding, t, t, 1.0);
            m.set(ParamId::Unembedding, t + 4, t, 10.0);
        }
        m
    }

    #[test]
    fn oracle_fixture_scores_full_marks() {
        let d = dataset((0..8).map(|i| inst(i, i % 4, i % 4)).collect());
        let r = eval_accuracy(&oracle_model(), &d, &NeuronMask::empty(), "none").unwrap();
        assert_eq!(r.value, 100.0);
        assert_eq!(r.per_culture["a"], 100.0);
    }

    #[test]
    fn forced_thirteen_of_twenty() {
        let d = dataset((0..20).map(|i| inst(i, i % 4, if i < 13 { i % 4 } else { (i + 1) % 4 })).collect());
        let r = eval_accuracy(&oracle_model(), &d, &NeuronMask::empty(), "none").unwrap();
        assert_eq!(r.value, 65.0);
        assert_eq!(r.recompute(), r.value);
    }

    #[test]
    fn zero_model_picks_first_choice() {
        let d = dataset((0..8).map(|i| inst(i, 2, i % 4)).collect());
        let r = eval_accuracy(&Model::zeros(cfg()).unwrap(), &d, &NeuronMask::empty(), "none").unwrap();
        assert!(r.predictions.iter().all(|p| p.predicted == 0));
        assert_eq!(r.value, 25.0);
        assert!(eval_accuracy(&oracle_model(), &dataset(vec![]), &NeuronMask::empty(), "none").is_err());
    }

    fn item(options: &[f64], majority: f64, prediction: f64) -> LikertItem {
        LikertItem {
            options: options.to_vec(),
            majority,
            prediction,
        }
    }

    #[test]
    fn score_c_worked_examples() {
        let five = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(score_c(&[item(&five, 2.0, 2.0), item(&five, 5.0, 5.0)]).unwrap(), 100.0);
        assert_eq!(score_c(&[item(&five, 3.0, 1.0)]).unwrap(), 0.0);
        assert_eq!(score_c(&[item(&five, 4.0, 4.0), item(&five, 3.0, 5.0)]).unwrap(), 50.0);
        assert!(matches!(score_c(&[item(&five, 3.0, 6.0)]), Err(Error::Range(_))));
    }

    #[test]
    fn score_c_is_shift_invariant() {
        let items = [item(&[1.0, 2.0, 3.0, 4.0], 1.0, 3.0), item(&[0.0, 1.0, 2.0], 1.0, 2.0)];
        let shifted: Vec<LikertItem> = items
            .iter()
            .map(|i| item(&i.options.iter().map(|o| o + 7.0).collect::<Vec<_>>(), i.majority + 7.0, i.prediction + 7.0))
            .collect();
        assert!((score_c(&items).unwrap() - score_c(&shifted).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn empty_random_masks_reproduce_the_unmasked_metric() {
        let m = Model::init_with_std(cfg(), 3, 0.5).unwrap();
        let d = dataset((0..12).map(|i| inst(i, i % 4, i % 4)).collect());
        let base = eval_accuracy(&m, &d, &NeuronMask::empty(), "none").unwrap();
        let r = random_mask_baseline(&m, &d, &BTreeMap::new(), &[1, 2, 3], &base).unwrap();
        assert!(r.per_seed.iter().all(|&v| v == base.value));
        assert!(r.drops.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_masks_match_composition_and_are_seeded() {
        let m = Model::zeros(cfg()).unwrap();
        let counts = BTreeMap::from([(Family::MlpGate, 3), (Family::AttnV, 1)]);
        let a = random_mask(&m, &counts, 9).unwrap();
        assert_eq!(composition(&a), counts);
        assert_eq!(a, random_mask(&m, &counts, 9).unwrap());
        let too_many = BTreeMap::from([(Family::MlpGate, 7)]);
        assert!(matches!(random_mask(&m, &too_many, 1), Err(Error::Capacity(_))));
    }

    #[test]
    fn bootstrap_extremes_and_enumeration() {
        let drops = [1.0, 2.0, 3.0];
        assert_eq!(bootstrap_pvalue(0.5, &drops, 2000, 1).unwrap(), 1.0);
        assert_eq!(bootstrap_pvalue(3.5, &drops, 2000, 1).unwrap(), 0.0);
        let mut reach = 0;
        for a in drops {
            for b in drops {
                for c in drops {
                    reach += ((a + b + c) / 3.0 >= 2.0) as usize;
                }
            }
        }
        let exact = reach as f64 / 27.0;
        let p = bootstrap_pvalue(2.0, &drops, 2000, 7).unwrap();
        assert!((p - exact).abs() < 0.02, "{p} vs {exact}");
        assert!(bootstrap_pvalue(1.0, &[1.0], 10, 1).is_err());
    }

    #[test]
    fn cross_culture_empty_and_saturated_masks() {
        let m = oracle_model();
        let d = dataset((0..8).map(|i| inst(i, i % 4, i % 4)).collect());
        let tests = vec![("a".to_string(), d.for_culture("a")), ("b".to_string(), d.for_culture("b"))];
        let empty = vec![("a".to_string(), NeuronMask::empty()), ("b".to_string(), NeuronMask::empty())];
        let r = cross_culture_matrix(&m, &empty, &tests).unwrap();
        assert!(r.drops.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(r.diagonal_rank_one(), 2);
        assert_eq!(competition_ranks(&[3.0, 5.0, 3.0, 1.0]), vec![2, 1, 2, 4]);
    }
}
