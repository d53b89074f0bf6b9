use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Variant;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::neuron::{universe, NeuronId};

/// Where a score table came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreMeta {
    pub dataset: String,
    pub culture: Option<String>,
    pub variant: Variant,
    pub model_hash: String,
}

/// One aggregated score per tappable neuron, in (layer, family, index) order.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub meta: ScoreMeta,
    neurons: Vec<NeuronId>,
    scores: Vec<f64>,
}

const HEADER: &str = "layer,family,index,score";

impl ScoreTable {
    pub fn new(cfg: &ModelConfig, meta: ScoreMeta, scores: Vec<f64>) -> Result<Self> {
        let neurons = universe(cfg);
        Self::from_neurons(meta, neurons, scores)
    }

    pub fn from_neurons(meta: ScoreMeta, neurons: Vec<NeuronId>, scores: Vec<f64>) -> Result<Self> {
        if neurons.len() != scores.len() {
            return Err(Error::Dimension(format!(
                "{} scores for {} neurons",
                scores.len(),
                neurons.len()
            )));
        }
        if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("score of {} is {}", neurons[i], scores[i])));
        }
        for field in [&meta.dataset, &meta.model_hash].into_iter().chain(meta.culture.as_ref()) {
            if field.contains([',', '=', '\n']) {
                return Err(Error::Config(format!("metadata value '{field}' contains a separator")));
            }
        }
        Ok(Self { meta, neurons, scores })
    }

    pub fn neurons(&self) -> &[NeuronId] {
        &self.neurons
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, n: &NeuronId) -> Option<f64> {
        self.neurons.binary_search(n).ok().map(|i| self.scores[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (NeuronId, f64)> + '_ {
        self.neurons.iter().copied().zip(self.scores.iter().copied())
    }

    /// Fails unless both tables cover the same neurons of the same model.
    pub fn check_compatible(&self, other: &ScoreTable) -> Result<()> {
        if self.meta.model_hash != other.meta.model_hash {
            return Err(Error::Provenance(format!(
                "score tables come from different models: {} ({}) vs {} ({})",
                self.meta.model_hash, self.meta.dataset, other.meta.model_hash, other.meta.dataset
            )));
        }
        if self.neurons != other.neurons {
            return Err(Error::Provenance(format!(
                "score tables {} and {} cover different neurons",
                self.meta.dataset, other.meta.dataset
            )));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let m = &self.meta;
        let mut out = format!(
            "#dataset={},culture={},variant={},model={}\n{HEADER}\n",
            m.dataset,
            m.culture.as_deref().unwrap_or("-"),
            m.variant,
            m.model_hash
        );
        for (n, s) in self.iter() {
            out.push_str(&format!("{},{},{},{:e}\n", n.layer, n.family, n.index, s));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let parse = |line: usize, message: String| Error::Parse { line, message };
        let mut lines = text.lines();
        let meta_line = lines
            .next()
            .and_then(|l| l.strip_prefix('#'))
            .ok_or_else(|| parse(1, "missing metadata line".into()))?;
        let mut dataset = None;
        let mut culture = None;
        let mut variant = None;
        let mut model_hash = None;
        for kv in meta_line.split(',') {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| parse(1, format!("malformed metadata field '{kv}'")))?;
            match k {
                "dataset" => dataset = Some(v.to_string()),
                "culture" => culture = Some((v != "-").then(|| v.to_string())),
                "variant" => variant = Some(v.parse::<Variant>()?),
                "model" => model_hash = Some(v.to_string()),
                other => return Err(parse(1, format!("unknown metadata field '{other}'"))),
            }
        }
        let missing = |f: &str| parse(1, format!("metadata lacks '{f}'"));
        let meta = ScoreMeta {
            dataset: dataset.ok_or_else(|| missing("dataset"))?,
            culture: culture.ok_or_else(|| missing("culture"))?,
            variant: variant.ok_or_else(|| missing("variant"))?,
            model_hash: model_hash.ok_or_else(|| missing("model"))?,
        };
        if meta.model_hash.is_empty() {
            return Err(Error::Provenance("score table carries no model hash".into()));
        }
        if lines.next() != Some(HEADER) {
            return Err(parse(2, format!("expected column header '{HEADER}'")));
        }
        let mut neurons = Vec::new();
        let mut scores = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 3;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(parse(lineno, format!("expected 4 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| parse(lineno, e.to_string()));
            let n = NeuronId::new(num(f[0])?, f[1].parse()?, num(f[2])?);
            if neurons.last().is_some_and(|last| *last >= n) {
                return Err(parse(lineno, format!("neuron {n} out of order")));
            }
            neurons.push(n);
            scores.push(f[3].parse::<f64>().map_err(|e| parse(lineno, e.to_string()))?);
        }
        Self::from_neurons(meta, neurons, scores)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}
