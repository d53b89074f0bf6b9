//! Culture-general and culture-specific neuron selection, cross-culture
//! z-scores, block rankings and activation-entropy baselines.

mod lape;
mod set;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::attribution::{ScoreMeta, ScoreTable};
use crate::error::{Error, Result};
use crate::model::{Module, ModelConfig};
use crate::neuron::NeuronId;
use crate::stats::{mean, population_std};

pub use lape::{activation_stats, cape_select, entropy, lape_select, ActivationStats, LapeSelection};
pub use set::{NeuronSet, Provenance};

/// Thresholds, all in percent except `z_threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub t_mlp: f64,
    pub t_attn: f64,
    pub t_specific: f64,
    pub r_crc: f64,
    pub z_threshold: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            t_mlp: 1.0,
            t_attn: 0.2,
            t_specific: 0.3,
            r_crc: 1.0,
            z_threshold: 0.5,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("t_mlp", self.t_mlp),
            ("t_attn", self.t_attn),
            ("t_specific", self.t_specific),
            ("r_crc", self.r_crc),
        ] {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 100]")));
            }
        }
        if !self.z_threshold.is_finite() {
            return Err(Error::Config("z_threshold must be finite".into()));
        }
        Ok(())
    }
}

/// `floor(percent/100 · n)`, but at least 1 when both are positive.
pub fn percent_count(percent: f64, n: usize) -> usize {
    if percent <= 0.0 || n == 0 {
        return 0;
    }
    let raw = (percent * n as f64 / 100.0 + 1e-9).floor() as usize;
    raw.clamp(1, n)
}

/// The `k` highest-valued neurons, ties going to the smaller (layer, family, index).
pub fn top_k(neurons: &[NeuronId], values: &[f64], k: usize) -> Vec<NeuronId> {
    let mut order: Vec<usize> = (0..neurons.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(neurons[a].cmp(&neurons[b])));
    order.into_iter().take(k).map(|i| neurons[i]).collect()
}

/// `a − b` entrywise, for tables over the same model and neurons.
pub fn difference(a: &ScoreTable, b: &ScoreTable) -> Result<ScoreTable> {
    a.check_compatible(b)?;
    let scores: Vec<f64> = a.scores().iter().zip(b.scores()).map(|(x, y)| x - y).collect();
    let meta = ScoreMeta {
        dataset: format!("{}-minus-{}", a.meta.dataset, b.meta.dataset),
        culture: a.meta.culture.clone(),
        variant: a.meta.variant,
        model_hash: a.meta.model_hash.clone(),
    };
    ScoreTable::from_neurons(meta, a.neurons().to_vec(), scores)
}

fn crc_excluded(crc: &ScoreTable, r: f64) -> BTreeSet<NeuronId> {
    top_k(crc.neurons(), crc.scores(), percent_count(r, crc.len()))
        .into_iter()
        .collect()
}

fn provenance(method: &str, culture: Option<&str>, cfg: &SelectionConfig, model: &ModelConfig, tables: &[&ScoreTable]) -> Provenance {
    Provenance {
        method: method.into(),
        culture: culture.map(str::to_string),
        model_hash: tables[0].meta.model_hash.clone(),
        model: model.clone(),
        selection: cfg.clone(),
        datasets: tables
            .iter()
            .map(|t| match &t.meta.culture {
                Some(c) => format!("{}@{c}", t.meta.dataset),
                None => t.meta.dataset.clone(),
            })
            .collect(),
        extra: BTreeMap::new(),
    }
}

/// Top `t_mlp`% gate neurons and top `t_attn`% q/k/v neurons by
/// `s_neur − s_ctrl`, minus the top `r_crc`% of all neurons by `s_crc`.
pub fn select_general(
    model: &ModelConfig,
    s_neur: &ScoreTable,
    s_ctrl: &ScoreTable,
    s_crc: &ScoreTable,
    cfg: &SelectionConfig,
) -> Result<NeuronSet> {
    cfg.validate()?;
    s_neur.check_compatible(s_ctrl)?;
    s_neur.check_compatible(s_crc)?;
    let diff = difference(s_neur, s_ctrl)?;
    let mut picked = Vec::new();
    for (mlp, t) in [(true, cfg.t_mlp), (false, cfg.t_attn)] {
        let (ns, vs): (Vec<NeuronId>, Vec<f64>) = diff.iter().filter(|(n, _)| n.family.is_mlp() == mlp).unzip();
        picked.extend(top_k(&ns, &vs, percent_count(t, ns.len())));
    }
    let excluded = crc_excluded(s_crc, cfg.r_crc);
    picked.retain(|n| !excluded.contains(n));
    NeuronSet::new(provenance("general", None, cfg, model, &[s_neur, s_ctrl, s_crc]), picked)
}

/// Per-neuron z-scores of one score across cultures.
#[derive(Clone, Debug, PartialEq)]
pub struct ZScoreTable {
    pub cultures: Vec<String>,
    pub neurons: Vec<NeuronId>,
    /// `z[neuron][culture]`.
    pub z: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ZScoreTable {
    pub fn culture_column(&self, culture: &str) -> Result<Vec<f64>> {
        let c = self
            .cultures
            .iter()
            .position(|x| x == culture)
            .ok_or_else(|| Error::Label(format!("culture '{culture}' not in z-score table")))?;
        Ok(self.z.iter().map(|row| row[c]).collect())
    }
}

/// `z = (s − μ)/σ` with population σ; a neuron with σ = 0 gets z = 0 everywhere.
pub fn zscore_across_cultures(tables: &[ScoreTable]) -> Result<ZScoreTable> {
    if tables.len() < 2 {
        return Err(Error::Config(format!("z-scores need at least 2 cultures, got {}", tables.len())));
    }
    let mut cultures = Vec::with_capacity(tables.len());
    for t in tables {
        t.check_compatible(&tables[0])?;
        let c = t
            .meta
            .culture
            .clone()
            .ok_or_else(|| Error::Label(format!("table {} has no culture", t.meta.dataset)))?;
        if cultures.contains(&c) {
            return Err(Error::Label(format!("culture '{c}' appears twice")));
        }
        cultures.push(c);
    }
    let neurons = tables[0].neurons().to_vec();
    let mut z = Vec::with_capacity(neurons.len());
    let mut mus = Vec::with_capacity(neurons.len());
    let mut sigmas = Vec::with_capacity(neurons.len());
    for k in 0..neurons.len() {
        let s: Vec<f64> = tables.iter().map(|t| t.scores()[k]).collect();
        // Sorted so that the moments do not depend on culture order.
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        let constant = sorted[0] == sorted[sorted.len() - 1];
        let mu = if constant { sorted[0] } else { mean(&sorted) };
        let sigma = if constant { 0.0 } else { population_std(&sorted) };
        z.push(if sigma > 0.0 {
            s.iter().map(|x| (x - mu) / sigma).collect()
        } else {
            vec![0.0; s.len()]
        });
        mus.push(mu);
        sigmas.push(sigma);
    }
    Ok(ZScoreTable {
        cultures,
        neurons,
        z,
        mu: mus,
        sigma: sigmas,
    })
}

/// Per-culture score inputs for specific selection.
#[derive(Clone, Debug)]
pub struct CultureScores {
    pub neur: ScoreTable,
    pub ctrl: ScoreTable,
}

impl CultureScores {
    pub fn culture(&self) -> Option<&str> {
        self.neur.meta.culture.as_deref()
    }

    pub fn diff(&self) -> Result<ScoreTable> {
        if self.neur.meta.culture != self.ctrl.meta.culture {
            return Err(Error::Label(format!(
                "neur table is for {:?} but ctrl table for {:?}",
                self.neur.meta.culture, self.ctrl.meta.culture
            )));
        }
        difference(&self.neur, &self.ctrl)
    }
}

/// Culture-specific selection: top `t_specific`% of all neurons by the
/// culture's `s_neur − s_ctrl`, minus the CRC top `r_crc`%, minus neurons
/// whose z-score for that culture is below `z_threshold`.
pub fn select_specific(
    model: &ModelConfig,
    per_culture: &[CultureScores],
    s_crc: &ScoreTable,
    culture: &str,
    cfg: &SelectionConfig,
) -> Result<NeuronSet> {
    cfg.validate()?;
    let diffs = per_culture.iter().map(CultureScores::diff).collect::<Result<Vec<_>>>()?;
    let c = per_culture
        .iter()
        .position(|t| t.culture() == Some(culture))
        .ok_or_else(|| Error::Label(format!("unknown culture '{culture}'")))?;
    diffs[c].check_compatible(s_crc)?;
    let zt = zscore_across_cultures(&diffs)?;
    let zc = zt.culture_column(culture)?;
    let d = &diffs[c];
    let mut picked = top_k(d.neurons(), d.scores(), percent_count(cfg.t_specific, d.len()));
    let excluded = crc_excluded(s_crc, cfg.r_crc);
    picked.retain(|n| !excluded.contains(n));
    picked.retain(|n| {
        let k = d.neurons().binary_search(n).expect("neuron from the same table");
        zc[k] >= cfg.z_threshold
    });
    let inputs = [&per_culture[c].neur, &per_culture[c].ctrl, s_crc];
    NeuronSet::new(provenance("specific", Some(culture), cfg, model, &inputs), picked)
}

/// How many set members fall into one block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCount {
    pub module: Module,
    pub count: usize,
    pub params: usize,
}

/// Blocks in descending order of member count, ties by (layer, kind).
pub fn rank_modules_by_neuron_count(set: &NeuronSet, cfg: &ModelConfig) -> Vec<ModuleCount> {
    let mut counts: Vec<ModuleCount> = Module::all(cfg)
        .into_iter()
        .map(|module| ModuleCount {
            module,
            count: set.count_where(|n| n.layer == module.layer && Module::of_neuron(n).kind == module.kind),
            params: module.param_count(cfg),
        })
        .collect();
    counts.sort_by(|a, b| b.count.cmp(&a.count).then(a.module.cmp(&b.module)));
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::Variant;
    use crate::neuron::{universe, Family};

    fn model() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_size: 8,
            num_heads: 2,
            head_dim: 4,
            num_kv_heads: 1,
            intermediate_size: 500,
            vocab_size: 10,
            max_seq_len: 4,
            activation: Default::default(),
        }
    }

    fn table(dataset: &str, culture: Option<&str>, f: impl Fn(usize, NeuronId) -> f64) -> ScoreTable {
        let neurons = universe(&model());
        let scores = neurons.iter().enumerate().map(|(k, n)| f(k, *n)).collect();
        ScoreTable::new(
            &model(),
            ScoreMeta {
                dataset: dataset.into(),
                culture: culture.map(str::to_string),
                variant: Variant::Max,
                model_hash: "h".into(),
            },
            scores,
        )
        .unwrap()
    }

    fn zero(dataset: &str) -> ScoreTable {
        table(dataset, None, |_, _| 0.0)
    }

    fn hashed(k: usize) -> f64 {
        ((k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 11) as f64 / (1u64 << 53) as f64
    }

    #[test]
    fn counts_use_floor_with_minimum_one() {
        assert_eq!(percent_count(1.0, 1000), 10);
        assert_eq!(percent_count(0.2, 768), 1);
        assert_eq!(percent_count(0.3, 1792), 5);
        assert_eq!(percent_count(0.0, 100), 0);
        assert_eq!(percent_count(0.01, 5), 1);
        assert_eq!(percent_count(100.0, 7), 7);
    }

    #[test]
    fn full_threshold_without_exclusion_is_the_universe() {
        let cfg = SelectionConfig {
            t_mlp: 100.0,
            t_attn: 100.0,
            r_crc: 0.0,
            ..SelectionConfig::default()
        };
        let neur = table("neur", None, |k, _| hashed(k));
        let s = select_general(&model(), &neur, &zero("ctrl"), &zero("crc"), &cfg).unwrap();
        assert_eq!(s.len(), model().tappable_count());
    }

    #[test]
    fn one_percent_of_a_thousand_gate_neurons() {
        let cfg = SelectionConfig {
            t_mlp: 1.0,
            t_attn: 0.0,
            r_crc: 0.0,
            ..SelectionConfig::default()
        };
        let neur = table("neur", None, |k, _| hashed(k));
        let ctrl = table("ctrl", None, |k, _| hashed(k + 7) * 0.5);
        let s = select_general(&model(), &neur, &ctrl, &zero("crc"), &cfg).unwrap();
        assert_eq!(s.len(), 10);
        let mut diffs: Vec<(f64, NeuronId)> = neur
            .iter()
            .zip(ctrl.iter())
            .filter(|((n, _), _)| n.family == Family::MlpGate)
            .map(|((n, a), (_, b))| (a - b, n))
            .collect();
        diffs.sort_by(|x, y| y.0.total_cmp(&x.0));
        let want: BTreeSet<NeuronId> = diffs[..10].iter().map(|d| d.1).collect();
        assert_eq!(s.iter().copied().collect::<BTreeSet<_>>(), want);
    }

    #[test]
    fn ties_prefer_lower_coordinates() {
        let cfg = SelectionConfig {
            t_mlp: 0.1,
            t_attn: 0.0,
            r_crc: 0.0,
            ..SelectionConfig::default()
        };
        let s = select_general(&model(), &zero("n"), &zero("c"), &zero("r"), &cfg).unwrap();
        assert_eq!(s.iter().copied().collect::<Vec<_>>(), vec![NeuronId::new(0, Family::MlpGate, 0)]);
    }

    #[test]
    fn crc_exclusion_and_monotonicity() {
        let neur = table("neur", None, |k, _| hashed(k));
        let crc = table("crc", None, |k, _| hashed(k * 3 + 1));
        let mut cfg = SelectionConfig {
            r_crc: 0.0,
            ..SelectionConfig::default()
        };
        let base = select_general(&model(), &neur, &zero("c"), &crc, &cfg).unwrap();
        cfg.r_crc = 5.0;
        let filtered = select_general(&model(), &neur, &zero("c"), &crc, &cfg).unwrap();
        assert!(filtered.iter().all(|n| base.contains(n)));
        cfg.r_crc = 0.0;
        cfg.t_mlp = 3.0;
        let wider = select_general(&model(), &neur, &zero("c"), &crc, &cfg).unwrap();
        assert!(base.iter().all(|n| wider.contains(n)));
    }

    #[test]
    fn mismatched_hashes_are_rejected() {
        let mut other = zero("c");
        other.meta.model_hash = "other".into();
        let r = select_general(&model(), &zero("n"), &other, &zero("r"), &SelectionConfig::default());
        assert!(matches!(r, Err(Error::Provenance(_))));
    }

    fn cultures(n: usize, f: impl Fn(usize, usize) -> f64) -> Vec<ScoreTable> {
        let names = ["aurel", "borvan", "cendra", "dalmor", "esteva", "fiorin", "galdur", "hessa"];
        (0..n).map(|c| table("d", Some(names[c]), |k, _| f(c, k))).collect()
    }

    #[test]
    fn zscores_hand_case_and_normalization() {
        let t = cultures(4, |c, k| if k == 0 { [1.0, 1.0, 1.0, 5.0][c] } else { hashed(k * 8 + c) });
        let z = zscore_across_cultures(&t).unwrap();
        assert!((z.z[0][3] - 3f64.sqrt()).abs() < 1e-12);
        for row in &z.z {
            assert!(row.iter().sum::<f64>().abs() < 1e-9);
            assert!((population_std(row) - 1.0).abs() < 1e-9);
        }
        let same = cultures(3, |_, k| hashed(k));
        assert!(zscore_across_cultures(&same).unwrap().z.iter().flatten().all(|&v| v == 0.0));
        assert!(zscore_across_cultures(&same[..1]).is_err());
    }

    #[test]
    fn zscores_permute_with_cultures() {
        let t = cultures(4, |c, k| hashed(k * 4 + c));
        let mut rev = t.clone();
        rev.reverse();
        let a = zscore_across_cultures(&t).unwrap();
        let b = zscore_across_cultures(&rev).unwrap();
        for (ra, rb) in a.z.iter().zip(&b.z) {
            for c in 0..4 {
                assert_eq!(ra[c], rb[3 - c]);
            }
        }
    }

    fn per_culture(n: usize, f: impl Fn(usize, usize) -> f64 + Copy) -> Vec<CultureScores> {
        cultures(n, f)
            .into_iter()
            .map(|neur| {
                let mut ctrl = table("ctrl", None, |_, _| 0.0);
                ctrl.meta.culture = neur.meta.culture.clone();
                CultureScores { neur, ctrl }
            })
            .collect()
    }

    #[test]
    fn identical_cultures_select_nothing() {
        let pc = per_culture(4, |_, k| hashed(k));
        let s = select_specific(&model(), &pc, &zero("crc"), "borvan", &SelectionConfig::default()).unwrap();
        assert!(s.is_empty());
        assert!(select_specific(&model(), &pc, &zero("crc"), "nowhere", &SelectionConfig::default()).is_err());
    }

    #[test]
    fn disabled_z_filter_reduces_to_combined_general() {
        let pc = per_culture(4, |c, k| hashed(k * 4 + c));
        let cfg = SelectionConfig {
            z_threshold: -1e9,
            ..SelectionConfig::default()
        };
        let crc = table("crc", None, |k, _| hashed(k + 99));
        let s = select_specific(&model(), &pc, &crc, "cendra", &cfg).unwrap();
        let d = pc[2].diff().unwrap();
        let mut want = top_k(d.neurons(), d.scores(), percent_count(0.3, d.len()));
        let ex = crc_excluded(&crc, 1.0);
        want.retain(|n| !ex.contains(n));
        assert_eq!(s.iter().copied().collect::<BTreeSet<_>>(), want.into_iter().collect());
    }

    #[test]
    fn module_ranking() {
        let cfg = model();
        let prov = provenance("t", None, &SelectionConfig::default(), &cfg, &[&zero("x")]);
        let empty = NeuronSet::new(prov.clone(), []).unwrap();
        let r = rank_modules_by_neuron_count(&empty, &cfg);
        assert_eq!(r.iter().map(|m| m.module).collect::<Vec<_>>(), Module::all(&cfg));
        let s = NeuronSet::new(
            prov,
            [
                NeuronId::new(1, Family::MlpGate, 3),
                NeuronId::new(1, Family::MlpGate, 9),
                NeuronId::new(0, Family::AttnK, 0),
            ],
        )
        .unwrap();
        let r = rank_modules_by_neuron_count(&s, &cfg);
        assert_eq!(r[0].module, Module { layer: 1, kind: crate::model::ModuleKind::Mlp });
        assert_eq!(r.iter().map(|m| m.count).sum::<usize>(), 3);
        assert_eq!(r[0].params, 3 * 500 * 8);
    }
}
