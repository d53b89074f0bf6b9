//! Gradient-times-activation neuron attribution.
//!
//! For a prompt `x` with answer `y`, the score of neuron `n` at position `i`
//! is `n · ∂P(y|x)/∂n`, taken on the probability itself. Instance scores
//! reduce over positions (max or mean); the norm variant instead contracts
//! the neuron's subkey row with its weight gradient. Dataset tables weight
//! each instance by `P(y|x)` under the unmasked model.

mod table;
mod taylor;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Intervention, Model, ParamId, PointOverride, Proj};
use crate::neuron::{universe, NeuronId, NeuronMask, TapKey};
use crate::tensor::Tensor;
use crate::world::{DatasetFile, Instance};

pub use table::{ScoreMeta, ScoreTable};
pub use taylor::{taylor_report, DecileSummary, TaylorReport, TaylorSample};

/// How per-position scores become one score per neuron.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Max,
    Mean,
    Norm,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Max => "max",
            Variant::Mean => "mean",
            Variant::Norm => "norm",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Variant::Max),
            "mean" => Ok(Variant::Mean),
            "norm" => Ok(Variant::Norm),
            other => Err(Error::Config(format!("unknown attribution variant '{other}'"))),
        }
    }
}

/// Taped values and their gradients for one instance.
#[derive(Clone, Debug)]
pub struct TokenScores {
    /// `P(y|x)` under the unmasked model.
    pub prob: f64,
    positions: usize,
    values: BTreeMap<TapKey, Tensor>,
    grads: BTreeMap<TapKey, Tensor>,
}

impl TokenScores {
    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn value(&self, n: NeuronId, position: usize) -> f64 {
        self.values[&n.tap()].get(position, n.index)
    }

    pub fn gradient(&self, n: NeuronId, position: usize) -> f64 {
        self.grads[&n.tap()].get(position, n.index)
    }

    /// `n · ∂P/∂n` at one position.
    pub fn score(&self, n: NeuronId, position: usize) -> f64 {
        self.value(n, position) * self.gradient(n, position)
    }

    /// Every per-position score of one neuron.
    pub fn per_position(&self, n: NeuronId) -> Vec<f64> {
        (0..self.positions).map(|i| self.score(n, i)).collect()
    }
}

/// One forward pass and one reverse sweep over the instance's prompt.
pub fn token_scores(model: &Model, instance: &Instance) -> Result<TokenScores> {
    let none = NeuronMask::empty();
    let mut g = model.build_graph(&[&instance.prompt], Intervention::mask(&none), &|_| false)?;
    let picked = g.tape.softmax_pick(g.logits, &[instance.answer_token()])?;
    let p = g.tape.sum(picked);
    let prob = g.tape.value(p).data()[0];
    let grads = g.tape.backward(p)?;
    let mut values = BTreeMap::new();
    let mut gmap = BTreeMap::new();
    for (key, var) in g.tape.taps() {
        values.insert(key, g.tape.value(var).clone());
        gmap.insert(key, grads.wrt(&g.tape, var));
    }
    Ok(TokenScores {
        prob,
        positions: instance.prompt.len(),
        values,
        grads: gmap,
    })
}

/// Reduces token scores to one score per neuron, dense in universe order.
pub fn reduce_positions(ts: &TokenScores, neurons: &[NeuronId], variant: Variant) -> Result<Vec<f64>> {
    let t = ts.positions as f64;
    neurons
        .iter()
        .map(|&n| {
            let scores = ts.per_position(n);
            match variant {
                Variant::Max => Ok(scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
                Variant::Mean => Ok(scores.iter().sum::<f64>() / t),
                Variant::Norm => Err(Error::Config("norm scores are not a reduction over positions".into())),
            }
        })
        .collect()
}

/// Per-neuron score of one instance, dense in universe order, together with `P(y|x)`.
pub fn instance_score(model: &Model, instance: &Instance, variant: Variant) -> Result<(f64, Vec<f64>)> {
    let neurons = universe(model.config());
    match variant {
        Variant::Norm => norm_score(model, instance),
        v => {
            let ts = token_scores(model, instance)?;
            Ok((ts.prob, reduce_positions(&ts, &neurons, v)?))
        }
    }
}

fn subkey_param(n: NeuronId) -> ParamId {
    ParamId::Layer {
        layer: n.layer,
        proj: Proj::of_family(n.family),
    }
}

/// `Σ_j w_j · ∂P/∂w_j` over each neuron's subkey row, with `P(y|x)`.
pub fn norm_score(model: &Model, instance: &Instance) -> Result<(f64, Vec<f64>)> {
    let none = NeuronMask::empty();
    let subkeys = |id: ParamId| matches!(id, ParamId::Layer { proj, .. } if matches!(proj, Proj::Gate | Proj::Q | Proj::K | Proj::V));
    let mut g = model.build_graph(&[&instance.prompt], Intervention::mask(&none), &subkeys)?;
    let picked = g.tape.softmax_pick(g.logits, &[instance.answer_token()])?;
    let p = g.tape.sum(picked);
    let prob = g.tape.value(p).data()[0];
    let grads = g.tape.backward(p)?;
    let mut cache: BTreeMap<ParamId, Tensor> = BTreeMap::new();
    let scores = universe(model.config())
        .into_iter()
        .map(|n| {
            let id = subkey_param(n);
            let grad = cache
                .entry(id)
                .or_insert_with(|| grads.wrt(&g.tape, g.params[&id]));
            let w = model.param(id).row(n.index);
            w.iter().zip(grad.row(n.index)).map(|(a, b)| a * b).sum()
        })
        .collect();
    Ok((prob, scores))
}

/// Sums equal-length vectors pairwise over a fixed binary tree, so the result
/// depends only on the input order.
fn tree_sum(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap_or_default()
}

/// Probability-weighted sum of instance scores over a list of instances.
pub fn aggregate_instances(model: &Model, instances: &[Instance], variant: Variant) -> Result<Vec<f64>> {
    if instances.is_empty() {
        return Err(Error::Empty("dataset to score".into()));
    }
    let parts: Vec<Vec<f64>> = instances
        .par_iter()
        .map(|inst| {
            let (p, mut s) = instance_score(model, inst, variant)?;
            s.iter_mut().for_each(|v| *v *= p);
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let out = tree_sum(parts);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite aggregated score".into()));
    }
    Ok(out)
}

/// Dataset-level score table.
pub fn aggregate(model: &Model, dataset: &DatasetFile, variant: Variant) -> Result<ScoreTable> {
    let scores = aggregate_instances(model, &dataset.instances, variant)?;
    ScoreTable::new(
        model.config(),
        ScoreMeta {
            dataset: dataset.header.name.clone(),
            culture: None,
            variant,
            model_hash: model.hash(),
        },
        scores,
    )
}

/// Score table over the instances of one culture.
pub fn aggregate_culture(model: &Model, dataset: &DatasetFile, culture: &str, variant: Variant) -> Result<ScoreTable> {
    let subset: Vec<Instance> = dataset
        .instances
        .iter()
        .filter(|i| i.culture.as_deref() == Some(culture))
        .cloned()
        .collect();
    if subset.is_empty() {
        return Err(Error::Label(format!("no instances of culture '{culture}' in {}", dataset.header.name)));
    }
    let scores = aggregate_instances(model, &subset, variant)?;
    ScoreTable::new(
        model.config(),
        ScoreMeta {
            dataset: dataset.header.name.clone(),
            culture: Some(culture.to_string()),
            variant,
            model_hash: model.hash(),
        },
        scores,
    )
}

/// Exact effect of zeroing one neuron, by re-running the model.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalEffect {
    /// `P(y|x)` unmasked.
    pub base: f64,
    /// `P − P(n_i = 0)` for each single position `i`.
    pub per_position: Vec<f64>,
    /// `P − P(n = 0 at every position)`.
    pub all_positions: f64,
    /// The position of the largest token score.
    pub max_position: usize,
    pub at_max: f64,
}

pub fn point_effect(model: &Model, instance: &Instance, neuron: NeuronId, position: usize, base: f64) -> Result<f64> {
    let none = NeuronMask::empty();
    let point = [PointOverride {
        neuron,
        position,
        value: 0.0,
    }];
    let masked = model.answer_prob_with(
        &instance.prompt,
        instance.answer_token(),
        Intervention {
            mask: &none,
            points: &point,
        },
    )?;
    Ok(base - masked)
}

pub fn causal_effect(model: &Model, instance: &Instance, neuron: NeuronId) -> Result<CausalEffect> {
    neuron.validate(model.config())?;
    let ts = token_scores(model, instance)?;
    let base = ts.prob;
    let per_position = (0..ts.positions)
        .map(|i| point_effect(model, instance, neuron, i, base))
        .collect::<Result<Vec<_>>>()?;
    let mask = NeuronMask::new(model.config(), [neuron])?;
    let all_positions = base - model.answer_prob(&instance.prompt, instance.answer_token(), &mask)?;
    let scores = ts.per_position(neuron);
    let max_position = (0..scores.len())
        .fold(0, |best, i| if scores[i] > scores[best] { i } else { best });
    Ok(CausalEffect {
        base,
        at_max: per_position[max_position],
        per_position,
        all_positions,
        max_position,
    })
}
