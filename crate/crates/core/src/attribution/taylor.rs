use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{point_effect, token_scores};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::neuron::{universe, NeuronId};
use crate::stats::spearman;
use crate::world::Instance;

/// Instances drawn from the dataset to build the pool of candidate pairs.
pub const POOL_INSTANCES: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorSample {
    pub instance: String,
    pub neuron: NeuronId,
    pub position: usize,
    /// 0 holds the smallest |s|, 9 the largest.
    pub decile: usize,
    pub score: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecileSummary {
    pub decile: usize,
    pub count: usize,
    /// `None` when either side is constant.
    pub spearman: Option<f64>,
    pub sign_agreement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorReport {
    pub samples: Vec<TaylorSample>,
    pub deciles: Vec<DecileSummary>,
    pub spearman: Option<f64>,
    pub sign_agreement: f64,
}

impl TaylorReport {
    pub fn top_decile(&self) -> &DecileSummary {
        &self.deciles[9]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("instance,layer,family,index,position,decile,score,delta\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:e},{:e}\n",
                s.instance, s.neuron.layer, s.neuron.family, s.neuron.index, s.position, s.decile, s.score, s.delta
            ));
        }
        out
    }
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

fn summarize(decile: usize, samples: &[&TaylorSample]) -> DecileSummary {
    let s: Vec<f64> = samples.iter().map(|x| x.score).collect();
    let d: Vec<f64> = samples.iter().map(|x| x.delta).collect();
    let agree = samples.iter().filter(|x| sign(x.score) == sign(x.delta)).count();
    DecileSummary {
        decile,
        count: samples.len(),
        spearman: spearman(&s, &d),
        sign_agreement: if samples.is_empty() {
            0.0
        } else {
            agree as f64 / samples.len() as f64
        },
    }
}

/// Compares first-order scores with exact single-position ablation effects.
///
/// All (instance, neuron, position) pairs of up to [`POOL_INSTANCES`] seeded
/// instances are ranked by |s| and cut into deciles; `per_decile` pairs are
/// drawn from each and re-run with that one value clamped to zero.
pub fn taylor_report(model: &Model, instances: &[Instance], per_decile: usize, seed: u64) -> Result<TaylorReport> {
    if per_decile < 10 {
        return Err(Error::Config(format!("taylor sample size {per_decile} is below 10")));
    }
    if instances.is_empty() {
        return Err(Error::Empty("dataset for taylor report".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, instances.len(), POOL_INSTANCES.min(instances.len())).into_vec();
    chosen.sort_unstable();

    let neurons = universe(model.config());
    let tables = chosen
        .iter()
        .map(|&i| token_scores(model, &instances[i]))
        .collect::<Result<Vec<_>>>()?;
    // (slot in `chosen`, neuron index, position, score)
    let mut pool: Vec<(usize, usize, usize, f64)> = Vec::new();
    for (slot, ts) in tables.iter().enumerate() {
        for (k, &n) in neurons.iter().enumerate() {
            for pos in 0..ts.positions() {
                pool.push((slot, k, pos, ts.score(n, pos)));
            }
        }
    }
    pool.sort_by(|a, b| a.3.abs().total_cmp(&b.3.abs()).then((a.0, a.1, a.2).cmp(&(b.0, b.1, b.2))));

    let mut samples = Vec::with_capacity(per_decile * 10);
    for decile in 0..10 {
        let lo = pool.len() * decile / 10;
        let hi = pool.len() * (decile + 1) / 10;
        let take = per_decile.min(hi - lo);
        let mut picks = sample(&mut rng, hi - lo, take).into_vec();
        picks.sort_unstable();
        for p in picks {
            let (slot, k, position, score) = pool[lo + p];
            let inst = &instances[chosen[slot]];
            let delta = point_effect(model, inst, neurons[k], position, tables[slot].prob)?;
            samples.push(TaylorSample {
                instance: inst.id.clone(),
                neuron: neurons[k],
                position,
                decile,
                score,
                delta,
            });
        }
    }
    let deciles = (0..10)
        .map(|d| {
            let group: Vec<&TaylorSample> = samples.iter().filter(|s| s.decile == d).collect();
            summarize(d, &group)
        })
        .collect();
    let all = summarize(10, &samples.iter().collect::<Vec<_>>());
    Ok(TaylorReport {
        samples,
        deciles,
        spearman: all.spearman,
        sign_agreement: all.sign_agreement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelConfig};
    use crate::world::{Kind, Split};

    fn cfg(activation: Activation, layers: usize) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            hidden_size: 6,
            num_heads: 2,
            head_dim: 2,
            num_kv_heads: 2,
            intermediate_size: 8,
            vocab_size: 10,
            max_seq_len: 6,
            activation,
        }
    }

    fn instances() -> Vec<Instance> {
        (0..5)
            .map(|i| Instance {
                id: format!("t{i}"),
                kind: Kind::Mcq,
                culture: None,
                category: None,
                prompt: vec![i + 1, 2 * i % 10, 7],
                choices: vec![0, 1, 2, 3],
                answer: i % 4,
                split: Split::Test,
                source: None,
            })
            .collect()
    }

    #[test]
    fn zero_model_is_degenerate() {
        let m = Model::zeros(cfg(Activation::GeluTanh, 1)).unwrap();
        let r = taylor_report(&m, &instances(), 10, 1).unwrap();
        assert!(r.samples.iter().all(|s| s.score == 0.0 && s.delta == 0.0));
        assert_eq!(r.spearman, None);
        assert_eq!(r.top_decile().spearman, None);
        assert_eq!(r.sign_agreement, 1.0);
    }

    #[test]
    fn near_linear_model_is_first_order_exact() {
        let m = Model::init_with_std(cfg(Activation::Identity, 1), 4, 0.05).unwrap();
        let r = taylor_report(&m, &instances(), 10, 2).unwrap();
        for s in &r.samples {
            assert!((s.score - s.delta).abs() <= 1e-3 * s.score.abs() + 1e-15, "{s:?}");
        }
        assert!(r.spearman.unwrap() > 0.999);
    }

    #[test]
    fn rejects_small_samples() {
        let m = Model::zeros(cfg(Activation::GeluTanh, 1)).unwrap();
        assert!(taylor_report(&m, &instances(), 9, 1).is_err());
    }
}
