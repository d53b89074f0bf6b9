use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Module, ParamId};
use crate::selection::{rank_modules_by_neuron_count, NeuronSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BudgetStrategy {
    /// Blocks holding the most selected neurons first.
    TopCulture,
    /// Randomly ordered blocks that hold no selected neuron.
    BottomCulture { seed: u64 },
}

/// The blocks unfrozen for selective fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleBudget {
    pub strategy: BudgetStrategy,
    /// Fraction of all model parameters the selection must exceed.
    pub target_fraction: f64,
    pub modules: Vec<Module>,
    pub params: usize,
    pub total_params: usize,
}

impl ModuleBudget {
    /// Every projection matrix of every selected block.
    pub fn trainable(&self) -> BTreeSet<ParamId> {
        self.modules.iter().flat_map(|m| m.params()).collect()
    }

    pub fn fraction(&self) -> f64 {
        self.params as f64 / self.total_params as f64
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }
}

/// Takes blocks in strategy order until their parameters exceed
/// `target_fraction` of the whole model, or the candidates run out.
pub fn select_modules(
    set: &NeuronSet,
    cfg: &ModelConfig,
    strategy: BudgetStrategy,
    target_fraction: f64,
) -> Result<ModuleBudget> {
    if !(0.0..=1.0).contains(&target_fraction) {
        return Err(Error::Config(format!("budget fraction {target_fraction} is outside [0, 1]")));
    }
    let ranked = rank_modules_by_neuron_count(set, cfg);
    let candidates: Vec<Module> = match strategy {
        BudgetStrategy::TopCulture => {
            if set.is_empty() {
                return Err(Error::Empty("neuron set for top-culture budget".into()));
            }
            ranked.iter().map(|m| m.module).collect()
        }
        BudgetStrategy::BottomCulture { seed } => {
            let mut zero: Vec<Module> = ranked.iter().filter(|m| m.count == 0).map(|m| m.module).collect();
            zero.sort();
            zero.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            zero
        }
    };
    let total = cfg.param_count();
    let target = target_fraction * total as f64;
    let mut modules = Vec::new();
    let mut params = 0usize;
    for m in candidates {
        if params as f64 > target {
            break;
        }
        params += m.param_count(cfg);
        modules.push(m);
    }
    let exhausted_all = modules.len() == Module::all(cfg).len();
    if params as f64 <= target && !exhausted_all {
        return Err(Error::Capacity(format!(
            "{} blocks hold {params} parameters, not more than {:.0}",
            modules.len(),
            target
        )));
    }
    Ok(ModuleBudget {
        strategy,
        target_fraction,
        modules,
        params,
        total_params: total,
    })
}
