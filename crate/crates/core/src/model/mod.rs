//! A decoder-only transformer with gated MLPs and no normalization layers.
//!
//! Each layer computes `h = h_prev + a + f` where `a` is causal multi-head
//! attention (optionally with grouped key/value heads) and `f` is a gated
//! linear unit `W_down(σ(W_gate m) ⊙ W_up m)` applied to `m = h_prev + a`.
//! Every MLP gate pre-activation and every q/k/v component is a tap site.

mod checkpoint;
mod forward;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::{Family, NeuronId};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, MANIFEST_FILE, WEIGHTS_FILE};
pub use forward::{ForwardRecord, Intervention, PointOverride};

/// Pointwise nonlinearity applied to the gate projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    GeluTanh,
    /// Only used by tests that need a model linear in each gate neuron.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub num_kv_heads: usize,
    pub intermediate_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelConfig {
    /// Desk-scale default: 4 layers, width 64.
    pub fn desk(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            num_layers: 4,
            hidden_size: 64,
            num_heads: 4,
            head_dim: 16,
            num_kv_heads: 4,
            intermediate_size: 256,
            vocab_size,
            max_seq_len,
            activation: Activation::GeluTanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("num_kv_heads", self.num_kv_heads),
            ("intermediate_size", self.intermediate_size),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.num_heads % self.num_kv_heads != 0 {
            return Err(Error::Config(format!(
                "num_kv_heads {} does not divide num_heads {}",
                self.num_kv_heads, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn query_width(&self) -> usize {
        self.head_dim * self.num_heads
    }

    pub fn kv_width(&self) -> usize {
        self.head_dim * self.num_kv_heads
    }

    pub fn family_width(&self, family: Family) -> usize {
        match family {
            Family::MlpGate => self.intermediate_size,
            Family::AttnQ => self.query_width(),
            Family::AttnK | Family::AttnV => self.kv_width(),
        }
    }

    /// Tapped width of one layer, summed over families.
    pub fn layer_tap_width(&self) -> usize {
        Family::ALL.iter().map(|&f| self.family_width(f)).sum()
    }

    pub fn tappable_count(&self) -> usize {
        self.num_layers * self.layer_tap_width()
    }

    pub fn param_shape(&self, id: ParamId) -> [usize; 2] {
        let (d, n, v) = (self.hidden_size, self.intermediate_size, self.vocab_size);
        match id {
            ParamId::TokenEmbedding | ParamId::Unembedding => [v, d],
            ParamId::PositionEmbedding => [self.max_seq_len, d],
            ParamId::Layer { proj, .. } => match proj {
                Proj::Q => [self.query_width(), d],
                Proj::K | Proj::V => [self.kv_width(), d],
                Proj::O => [d, self.query_width()],
                Proj::Gate | Proj::Up => [n, d],
                Proj::Down => [d, n],
            },
        }
    }

    /// All parameter ids in canonical order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![ParamId::TokenEmbedding, ParamId::PositionEmbedding];
        for layer in 0..self.num_layers {
            ids.extend(Proj::ALL.iter().map(|&proj| ParamId::Layer { layer, proj }));
        }
        ids.push(ParamId::Unembedding);
        ids
    }

    pub fn param_count(&self) -> usize {
        self.param_ids()
            .into_iter()
            .map(|id| self.param_shape(id).iter().product::<usize>())
            .sum()
    }
}

/// A projection matrix inside one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 7] = [
        Proj::Q,
        Proj::K,
        Proj::V,
        Proj::O,
        Proj::Gate,
        Proj::Up,
        Proj::Down,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Proj::Q => "q",
            Proj::K => "k",
            Proj::V => "v",
            Proj::O => "o",
            Proj::Gate => "gate",
            Proj::Up => "up",
            Proj::Down => "down",
        }
    }

    /// The projection whose rows are the subkeys of a tapped family.
    pub fn of_family(family: Family) -> Proj {
        match family {
            Family::MlpGate => Proj::Gate,
            Family::AttnQ => Proj::Q,
            Family::AttnK => Proj::K,
            Family::AttnV => Proj::V,
        }
    }

    pub fn is_mlp(self) -> bool {
        matches!(self, Proj::Gate | Proj::Up | Proj::Down)
    }
}

/// A whole block of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Mlp,
    Attention,
}

impl ModuleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Mlp => "mlp",
            ModuleKind::Attention => "attention",
        }
    }

    /// Every projection the block owns: gate brings up and down along, and
    /// any of q/k/v brings the whole attention block including the output.
    pub fn projections(self) -> &'static [Proj] {
        match self {
            ModuleKind::Mlp => &[Proj::Gate, Proj::Up, Proj::Down],
            ModuleKind::Attention => &[Proj::Q, Proj::K, Proj::V, Proj::O],
        }
    }

    pub fn of_family(family: Family) -> ModuleKind {
        if family.is_mlp() {
            ModuleKind::Mlp
        } else {
            ModuleKind::Attention
        }
    }
}

impl FromStr for ModuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ModuleKind::Mlp),
            "attention" => Ok(ModuleKind::Attention),
            other => Err(Error::Label(format!("unknown module kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Module {
    pub layer: usize,
    pub kind: ModuleKind,
}

impl Module {
    /// The block a tapped neuron belongs to.
    pub fn of_neuron(n: &NeuronId) -> Module {
        Module {
            layer: n.layer,
            kind: ModuleKind::of_family(n.family),
        }
    }

    pub fn params(self) -> Vec<ParamId> {
        self.kind
            .projections()
            .iter()
            .map(|&proj| ParamId::Layer { layer: self.layer, proj })
            .collect()
    }

    pub fn param_count(self, cfg: &ModelConfig) -> usize {
        self.params()
            .into_iter()
            .map(|id| cfg.param_shape(id).iter().product::<usize>())
            .sum()
    }

    /// Every block of the model, ordered by (layer, kind).
    pub fn all(cfg: &ModelConfig) -> Vec<Module> {
        (0..cfg.num_layers)
            .flat_map(|layer| {
                [ModuleKind::Mlp, ModuleKind::Attention]
                    .into_iter()
                    .map(move |kind| Module { layer, kind })
            })
            .collect()
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}", self.layer, self.kind.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    TokenEmbedding,
    PositionEmbedding,
    Layer { layer: usize, proj: Proj },
    Unembedding,
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::TokenEmbedding => f.write_str("embed.token"),
            ParamId::PositionEmbedding => f.write_str("embed.position"),
            ParamId::Layer { layer, proj } => write!(f, "layers.{layer}.{}", proj.as_str()),
            ParamId::Unembedding => f.write_str("unembed"),
        }
    }
}

impl FromStr for ParamId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embed.token" => return Ok(ParamId::TokenEmbedding),
            "embed.position" => return Ok(ParamId::PositionEmbedding),
            "unembed" => return Ok(ParamId::Unembedding),
            _ => {}
        }
        let bad = || Error::Label(format!("unknown parameter name '{s}'"));
        let rest = s.strip_prefix("layers.").ok_or_else(bad)?;
        let (layer, proj) = rest.split_once('.').ok_or_else(bad)?;
        let layer = layer.parse().map_err(|_| bad())?;
        let proj = Proj::ALL
            .into_iter()
            .find(|p| p.as_str() == proj)
            .ok_or_else(bad)?;
        Ok(ParamId::Layer { layer, proj })
    }
}

/// Configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: BTreeMap<ParamId, Tensor>,
}

impl Model {
    /// Small-scale normal initialization (std 0.02), deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(config, seed, 0.02)
    }

    pub fn init_with_std(config: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let params = config
            .param_ids()
            .into_iter()
            .map(|id| {
                let [r, c] = config.param_shape(id);
                let data = (0..r * c).map(|_| normal.sample(&mut rng)).collect();
                (id, Tensor::from_parts(vec![r, c], data))
            })
            .collect();
        Ok(Self { config, params })
    }

    /// All weights zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_ids()
            .into_iter()
            .map(|id| (id, Tensor::zeros(&config.param_shape(id))))
            .collect();
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: BTreeMap<ParamId, Tensor>) -> Result<Self> {
        config.validate()?;
        for id in config.param_ids() {
            let t = params
                .get(&id)
                .ok_or_else(|| Error::Config(format!("missing parameter {id}")))?;
            if t.shape() != config.param_shape(id) {
                return Err(Error::Dimension(format!(
                    "parameter {id} has shape {:?}, expected {:?}",
                    t.shape(),
                    config.param_shape(id)
                )));
            }
            if !t.all_finite() {
                return Err(Error::Numeric(format!("parameter {id} is not finite")));
            }
        }
        if params.len() != config.param_ids().len() {
            return Err(Error::Config("unexpected extra parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[&id]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        self.params.get_mut(&id).expect("parameter exists for its config")
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Overwrite one weight entry; used to hand-build test models.
    pub fn set(&mut self, id: ParamId, row: usize, col: usize, value: f64) {
        let t = self.param_mut(id);
        let c = t.cols();
        t.data_mut()[row * c + col] = value;
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (*k, v))
    }

    /// Short content hash over the serialized checkpoint bytes.
    pub fn hash(&self) -> String {
        checkpoint::content_hash(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_names_round_trip() {
        let cfg = ModelConfig::desk(50, 8);
        for id in cfg.param_ids() {
            assert_eq!(id.to_string().parse::<ParamId>().unwrap(), id);
        }
        assert!("layers.x.q".parse::<ParamId>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::desk(50, 8);
        cfg.num_kv_heads = 3;
        assert!(cfg.validate().is_err());
        cfg.num_kv_heads = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tappable_arithmetic() {
        let cfg = ModelConfig::desk(50, 8);
        assert_eq!(cfg.layer_tap_width(), 256 + 64 * 3);
        assert_eq!(crate::neuron::universe(&cfg).len(), cfg.tappable_count());
    }
}
