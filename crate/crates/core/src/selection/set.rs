use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SelectionConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::neuron::{NeuronId, NeuronMask};

/// Enough context to recompute a selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// `general`, `specific`, `lape`, `cape` and so on.
    pub method: String,
    pub culture: Option<String>,
    pub model_hash: String,
    pub model: ModelConfig,
    pub selection: SelectionConfig,
    /// Dataset ids of every score table that went in.
    pub datasets: Vec<String>,
    /// Free-form extra keys, for example hashes of upstream artifacts.
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

/// A selected set of neurons together with how it was obtained.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronSet {
    pub provenance: Provenance,
    members: NeuronMask,
}

const MAGIC: &str = "cultlab-neuron-set/1";

impl NeuronSet {
    pub fn new(provenance: Provenance, members: impl IntoIterator<Item = NeuronId>) -> Result<Self> {
        let members = NeuronMask::new(&provenance.model, members)?;
        Ok(Self { provenance, members })
    }

    pub fn mask(&self) -> &NeuronMask {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, n: &NeuronId) -> bool {
        self.members.contains(n)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NeuronId> {
        self.members.iter()
    }

    /// Members of one family group.
    pub fn count_where(&self, pred: impl Fn(&NeuronId) -> bool) -> usize {
        self.members.iter().filter(|n| pred(n)).count()
    }

    /// Text form: a magic line, a JSON provenance line, a count, then one
    /// `layer family index` triple per line in ascending order.
    pub fn to_text(&self) -> Result<String> {
        let prov = serde_json::to_string(&self.provenance).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = format!("{MAGIC}\n{prov}\ncount {}\n", self.members.len());
        for n in self.members.iter() {
            out.push_str(&format!("{} {} {}\n", n.layer, n.family, n.index));
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let parse = |line: usize, message: String| Error::Parse { line, message };
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(parse(1, format!("expected '{MAGIC}'")));
        }
        let prov: Provenance = serde_json::from_str(lines.next().unwrap_or(""))
            .map_err(|e| parse(2, e.to_string()))?;
        if prov.model_hash.is_empty() {
            return Err(Error::Provenance("neuron set carries no model hash".into()));
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("count "))
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| parse(3, "expected 'count N'".into()))?;
        let mut members = Vec::with_capacity(count);
        for (i, line) in lines.enumerate() {
            let lineno = i + 4;
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 3 {
                return Err(parse(lineno, format!("expected 'layer family index', got '{line}'")));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| parse(lineno, e.to_string()));
            members.push(NeuronId::new(num(f[0])?, f[1].parse()?, num(f[2])?));
        }
        if members.len() != count {
            return Err(parse(3, format!("count {count} but {} members", members.len())));
        }
        Self::new(prov, members)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::Family;

    fn prov() -> Provenance {
        Provenance {
            method: "general".into(),
            culture: None,
            model_hash: "abcd".into(),
            model: ModelConfig::desk(30, 8),
            selection: SelectionConfig::default(),
            datasets: vec!["mcq-neur".into(), "ctrl".into(), "crc-neur".into()],
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn text_round_trip() {
        let s = NeuronSet::new(
            prov(),
            [NeuronId::new(3, Family::AttnV, 1), NeuronId::new(0, Family::MlpGate, 200)],
        )
        .unwrap();
        let text = s.to_text().unwrap();
        assert!(text.ends_with("0 mlp_gate 200\n3 attn_v 1\n"));
        assert_eq!(NeuronSet::from_text(&text).unwrap(), s);
    }

    #[test]
    fn rejects_out_of_range_members_and_bad_counts() {
        assert!(NeuronSet::new(prov(), [NeuronId::new(4, Family::MlpGate, 0)]).is_err());
        let s = NeuronSet::new(prov(), [NeuronId::new(1, Family::AttnQ, 2)]).unwrap();
        let text = s.to_text().unwrap().replace("count 1", "count 2");
        assert!(matches!(NeuronSet::from_text(&text), Err(Error::Parse { line: 3, .. })));
    }
}
