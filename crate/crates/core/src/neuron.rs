//! Neuron coordinates and masks.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// The projection a tapped neuron lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    MlpGate,
    AttnQ,
    AttnK,
    AttnV,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::MlpGate, Family::AttnQ, Family::AttnK, Family::AttnV];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::MlpGate => "mlp_gate",
            Family::AttnQ => "attn_q",
            Family::AttnK => "attn_k",
            Family::AttnV => "attn_v",
        }
    }

    pub fn is_mlp(self) -> bool {
        self == Family::MlpGate
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Label(format!("unknown module family '{s}'")))
    }
}

/// A tap site: one family in one layer. Its taped value is a `[positions × width]` matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TapKey {
    pub layer: usize,
    pub family: Family,
}

/// Coordinate of one tapped neuron.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub family: Family,
    pub index: usize,
}

impl NeuronId {
    pub fn new(layer: usize, family: Family, index: usize) -> Self {
        Self {
            layer,
            family,
            index,
        }
    }

    pub fn tap(&self) -> TapKey {
        TapKey {
            layer: self.layer,
            family: self.family,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer >= cfg.num_layers || self.index >= cfg.family_width(self.family) {
            return Err(Error::Label(format!(
                "neuron {self} is outside the model ({} layers, {} width {})",
                cfg.num_layers,
                self.family,
                cfg.family_width(self.family)
            )));
        }
        Ok(())
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}[{}]", self.layer, self.family, self.index)
    }
}

/// Every tappable neuron of a model, ordered by (layer, family, index).
pub fn universe(cfg: &ModelConfig) -> Vec<NeuronId> {
    let mut out = Vec::with_capacity(cfg.tappable_count());
    for layer in 0..cfg.num_layers {
        for family in Family::ALL {
            for index in 0..cfg.family_width(family) {
                out.push(NeuronId::new(layer, family, index));
            }
        }
    }
    out
}

/// A set of neurons whose taped values are clamped to zero.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronMask {
    members: BTreeSet<NeuronId>,
}

impl NeuronMask {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(cfg: &ModelConfig, members: impl IntoIterator<Item = NeuronId>) -> Result<Self> {
        let members: BTreeSet<NeuronId> = members.into_iter().collect();
        for n in &members {
            n.validate(cfg)?;
        }
        Ok(Self { members })
    }

    /// Every neuron of one family in every layer.
    pub fn whole_family(cfg: &ModelConfig, family: Family) -> Self {
        let members = universe(cfg)
            .into_iter()
            .filter(|n| n.family == family)
            .collect();
        Self { members }
    }

    pub fn contains(&self, n: &NeuronId) -> bool {
        self.members.contains(n)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NeuronId> {
        self.members.iter()
    }

    pub fn union(&self, other: &NeuronMask) -> NeuronMask {
        Self {
            members: self.members.union(&other.members).copied().collect(),
        }
    }

    /// Column indices masked at one tap site.
    pub fn columns(&self, tap: TapKey) -> Vec<usize> {
        self.members
            .iter()
            .filter(|n| n.tap() == tap)
            .map(|n| n.index)
            .collect()
    }
}

impl FromIterator<NeuronId> for NeuronMask {
    fn from_iter<I: IntoIterator<Item = NeuronId>>(iter: I) -> Self {
        Self {
            members: iter.into_iter().collect(),
        }
    }
}
