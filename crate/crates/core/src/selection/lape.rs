//! Activation-probability entropy baselines over MLP gate neurons.

use std::collections::BTreeMap;

use super::{NeuronSet, Provenance, SelectionConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::neuron::{universe, Family, NeuronId, NeuronMask};

/// Fraction of tokens on which each gate neuron's activation is positive, per culture corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStats {
    pub model_hash: String,
    pub model: ModelConfig,
    pub cultures: Vec<String>,
    pub neurons: Vec<NeuronId>,
    /// `probs[culture][neuron]`.
    pub probs: Vec<Vec<f64>>,
}

/// Counts positive post-activation gate values over every position of every sequence.
pub fn activation_stats(model: &Model, corpora: &[(String, Vec<Vec<usize>>)]) -> Result<ActivationStats> {
    let cfg = model.config();
    let neurons: Vec<NeuronId> = universe(cfg)
        .into_iter()
        .filter(|n| n.family == Family::MlpGate)
        .collect();
    let none = NeuronMask::empty();
    let mut probs = Vec::with_capacity(corpora.len());
    for (name, seqs) in corpora {
        let mut positive = vec![0usize; neurons.len()];
        let mut tokens = 0usize;
        for s in seqs {
            let rec = model.forward(s, &none, true)?;
            tokens += s.len();
            for (k, n) in neurons.iter().enumerate() {
                let vals = rec.tap_values(n.tap()).expect("traced run keeps taps");
                // gelu(x) > 0 exactly when x > 0
                positive[k] += (0..s.len()).filter(|&p| vals.get(p, n.index) > 0.0).count();
            }
        }
        if tokens == 0 {
            return Err(Error::Empty(format!("activation corpus for {name}")));
        }
        probs.push(positive.iter().map(|&c| c as f64 / tokens as f64).collect());
    }
    Ok(ActivationStats {
        model_hash: model.hash(),
        model: cfg.clone(),
        cultures: corpora.iter().map(|(c, _)| c.clone()).collect(),
        neurons,
        probs,
    })
}

/// Entropy of `p` after normalizing it to sum to one; `None` for an all-zero vector.
pub fn entropy(p: &[f64]) -> Option<f64> {
    let total: f64 = p.iter().sum();
    if total <= 0.0 {
        return None;
    }
    Some(
        -p.iter()
            .filter(|&&x| x > 0.0)
            .map(|&x| {
                let q = x / total;
                q * q.ln()
            })
            .sum::<f64>(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct LapeSelection {
    pub sets: BTreeMap<String, NeuronSet>,
    /// Per neuron, in `ActivationStats::neurons` order.
    pub entropies: Vec<Option<f64>>,
    /// Neurons never active in any corpus.
    pub skipped: Vec<NeuronId>,
}

/// Neurons whose entropy is below `entropy_threshold`, assigned to every
/// culture whose activation probability exceeds `prob_threshold`.
pub fn lape_select(stats: &ActivationStats, entropy_threshold: f64, prob_threshold: f64) -> Result<LapeSelection> {
    let mut members: Vec<Vec<NeuronId>> = vec![Vec::new(); stats.cultures.len()];
    let mut entropies = Vec::with_capacity(stats.neurons.len());
    let mut skipped = Vec::new();
    for (k, &n) in stats.neurons.iter().enumerate() {
        let p: Vec<f64> = stats.probs.iter().map(|row| row[k]).collect();
        let h = entropy(&p);
        entropies.push(h);
        match h {
            None => skipped.push(n),
            Some(h) if h < entropy_threshold => {
                for (c, &pc) in p.iter().enumerate() {
                    if pc > prob_threshold {
                        members[c].push(n);
                    }
                }
            }
            Some(_) => {}
        }
    }
    let mut sets = BTreeMap::new();
    for (c, m) in stats.cultures.iter().zip(members) {
        let prov = Provenance {
            method: "lape".into(),
            culture: Some(c.clone()),
            model_hash: stats.model_hash.clone(),
            model: stats.model.clone(),
            selection: SelectionConfig::default(),
            datasets: stats.cultures.clone(),
            extra: BTreeMap::from([
                ("entropy_threshold".into(), entropy_threshold.to_string()),
                ("prob_threshold".into(), prob_threshold.to_string()),
            ]),
        };
        sets.insert(c.clone(), NeuronSet::new(prov, m)?);
    }
    Ok(LapeSelection {
        sets,
        entropies,
        skipped,
    })
}

/// Culture-corpus sets minus the matching base-corpus sets.
pub fn cape_select(
    culture_sets: &BTreeMap<String, NeuronSet>,
    base_sets: &BTreeMap<String, NeuronSet>,
) -> Result<BTreeMap<String, NeuronSet>> {
    let mut out = BTreeMap::new();
    for (c, set) in culture_sets {
        let mut prov = set.provenance.clone();
        prov.method = "cape".into();
        let members: Vec<NeuronId> = match base_sets.get(c) {
            Some(base) => {
                if base.provenance.model_hash != set.provenance.model_hash {
                    return Err(Error::Provenance(format!(
                        "culture set for {c} is from model {} but base set from {}",
                        set.provenance.model_hash, base.provenance.model_hash
                    )));
                }
                set.iter().filter(|n| !base.contains(n)).copied().collect()
            }
            None => set.iter().copied().collect(),
        };
        out.insert(c.clone(), NeuronSet::new(prov, members)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(probs: Vec<Vec<f64>>) -> ActivationStats {
        let model = ModelConfig {
            num_layers: 1,
            hidden_size: 2,
            num_heads: 1,
            head_dim: 2,
            num_kv_heads: 1,
            intermediate_size: probs[0].len(),
            vocab_size: 4,
            max_seq_len: 4,
            activation: Default::default(),
        };
        ActivationStats {
            model_hash: "m".into(),
            neurons: (0..probs[0].len()).map(|i| NeuronId::new(0, Family::MlpGate, i)).collect(),
            cultures: (0..probs.len()).map(|c| format!("c{c}")).collect(),
            model,
            probs,
        }
    }

    #[test]
    fn entropy_extremes() {
        assert_eq!(entropy(&[0.0, 0.7, 0.0]), Some(0.0));
        assert!((entropy(&[0.2; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&[0.0; 3]), None);
        // p = (0.1, 0.3) normalizes to (1/4, 3/4).
        let want = -(0.25 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert!((entropy(&[0.1, 0.3]).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn lape_assigns_single_culture_neurons() {
        // neuron 0: only c1; neuron 1: uniform; neuron 2: never active.
        let s = stats(vec![vec![0.0, 0.5, 0.0], vec![0.9, 0.5, 0.0], vec![0.0, 0.5, 0.0]]);
        let sel = lape_select(&s, 0.1, 0.2).unwrap();
        assert_eq!(sel.sets["c1"].iter().copied().collect::<Vec<_>>(), vec![s.neurons[0]]);
        assert!(sel.sets["c0"].is_empty() && sel.sets["c2"].is_empty());
        assert_eq!(sel.skipped, vec![s.neurons[2]]);
        assert!((sel.entropies[1].unwrap() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cape_is_set_difference() {
        let s = stats(vec![vec![0.9, 0.9, 0.9, 0.0], vec![0.0, 0.0, 0.0, 0.9]]);
        let cult = lape_select(&s, 0.5, 0.1).unwrap().sets;
        let same = cape_select(&cult, &cult).unwrap();
        assert!(same.values().all(NeuronSet::is_empty));
        let disjoint = cape_select(&cult, &BTreeMap::new()).unwrap();
        assert_eq!(disjoint["c0"].mask(), cult["c0"].mask());

        let base_stats = stats(vec![vec![0.9, 0.9, 0.0, 0.0], vec![0.0, 0.0, 0.0, 0.0]]);
        let base = lape_select(&base_stats, 0.5, 0.1).unwrap().sets;
        let pure = cape_select(&cult, &base).unwrap();
        assert_eq!(pure["c0"].iter().copied().collect::<Vec<_>>(), vec![s.neurons[2]]);
        assert_eq!(pure["c1"].mask(), cult["c1"].mask());

        let mut other = base.clone();
        other.get_mut("c0").unwrap().provenance.model_hash = "x".into();
        assert!(matches!(cape_select(&cult, &other), Err(Error::Provenance(_))));
    }
}
