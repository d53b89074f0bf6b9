use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::budget::ModuleBudget;
use super::{train_loop, TrainConfig, TrainLog};
use crate::error::{Error, Result};
use crate::eval::eval_accuracy;
use crate::model::Model;
use crate::neuron::NeuronMask;
use crate::world::{derive_seed, DatasetFile, TrainingExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates only before and after.
    pub eval_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-3,
            batch_size: 8,
            weight_decay: 0.0,
            seed: 1,
            eval_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub target_accuracy: f64,
    /// Accuracy per monitored dataset, keyed by dataset name.
    pub monitored: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneTrace {
    pub points: Vec<TracePoint>,
    pub log: TrainLog,
}

impl FinetuneTrace {
    pub fn first(&self) -> Option<&TracePoint> {
        self.points.first()
    }

    pub fn last(&self) -> Option<&TracePoint> {
        self.points.last()
    }

    pub fn to_csv(&self) -> String {
        let names: Vec<&String> = self.points.first().map(|p| p.monitored.keys().collect()).unwrap_or_default();
        let mut out = String::from("step,target");
        for n in &names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for p in &self.points {
            out.push_str(&format!("{},{:.2}", p.step, p.target_accuracy));
            for n in &names {
                out.push_str(&format!(",{:.2}", p.monitored[*n]));
            }
            out.push('\n');
        }
        out
    }
}

fn examples(dataset: &DatasetFile) -> Vec<TrainingExample> {
    dataset
        .instances
        .iter()
        .map(|i| TrainingExample {
            tokens: i.prompt.clone(),
            target: i.answer_token(),
        })
        .collect()
}

fn trace_point(model: &Model, step: usize, target: &DatasetFile, monitored: &[&DatasetFile]) -> Result<TracePoint> {
    let none = NeuronMask::empty();
    let target_accuracy = eval_accuracy(model, target, &none, "none")?.value;
    let mut acc = BTreeMap::new();
    for d in monitored {
        acc.insert(d.header.name.clone(), eval_accuracy(model, d, &none, "none")?.value);
    }
    Ok(TracePoint {
        step,
        target_accuracy,
        monitored: acc,
    })
}

/// Trains only the blocks in `budget` on `train` and records accuracy on
/// `target` and each `monitored` dataset along the way. The loss is a softmax
/// over the union of the training set's answer choices.
pub fn finetune_selective(
    model: &Model,
    budget: &ModuleBudget,
    train: &DatasetFile,
    target: &DatasetFile,
    monitored: &[&DatasetFile],
    cfg: &FinetuneConfig,
) -> Result<(Model, FinetuneTrace)> {
    let mut tuned = model.clone();
    let mut trace = FinetuneTrace::default();
    trace.points.push(trace_point(&tuned, 0, target, monitored)?);
    if cfg.steps == 0 {
        return Ok((tuned, trace));
    }
    if budget.is_empty() {
        return Err(Error::Config("fine-tuning budget selects no blocks".into()));
    }
    if train.is_empty() {
        return Err(Error::Empty(format!("training set {}", train.header.name)));
    }
    let pool = examples(train);
    let mut choices: Vec<usize> = train.instances.iter().flat_map(|i| i.choices.iter().copied()).collect();
    choices.sort_unstable();
    choices.dedup();
    let trainable = budget.trainable();
    let tc = TrainConfig {
        steps: cfg.steps,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        weight_decay: cfg.weight_decay,
        seed: cfg.seed,
        eval_every: cfg.eval_every,
        label_smoothing: 0.0,
        choices,
    };
    let mut points = Vec::new();
    let log = train_loop(
        &mut tuned,
        &trainable,
        &tc,
        |step| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0xF1, step as u64]));
            Ok((0..cfg.batch_size)
                .map(|_| pool[rng.random_range(0..pool.len())].clone())
                .collect())
        },
        |step, m| {
            let due = cfg.eval_every > 0 && step % cfg.eval_every == 0;
            if due || step == cfg.steps {
                points.push(trace_point(m, step, target, monitored)?);
            }
            Ok(())
        },
    )?;
    trace.points.extend(points);
    trace.log = log;
    Ok((tuned, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Module, ModuleKind};
    use crate::training::BudgetStrategy;
    use crate::world::{build_suite, generate_world, SuiteSizes, WorldSizes};

    fn small(vocab: usize) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_size: 16,
            num_heads: 2,
            head_dim: 8,
            num_kv_heads: 2,
            intermediate_size: 32,
            vocab_size: vocab,
            max_seq_len: 20,
            activation: Default::default(),
        }
    }

    fn budget(cfg: &ModelConfig, modules: Vec<Module>) -> ModuleBudget {
        let params = modules.iter().map(|m| m.param_count(cfg)).sum();
        ModuleBudget {
            strategy: BudgetStrategy::TopCulture,
            target_fraction: 0.1,
            modules,
            params,
            total_params: cfg.param_count(),
        }
    }

    fn tiny_suite() -> (crate::world::WorldSpec, crate::world::Suite) {
        let w = generate_world(1, &WorldSizes::default()).unwrap();
        let sizes = SuiteSizes {
            variants: 1,
            crc_per_culture: 2,
            filler: 8,
            target_train: 32,
            target_test: 16,
        };
        let s = build_suite(&w, &sizes).unwrap();
        (w, s)
    }

    #[test]
    fn frozen_blocks_are_bitwise_unchanged() {
        let (w, s) = tiny_suite();
        let cfg = small(w.vocab.len());
        let m = Model::init_with_std(cfg.clone(), 2, 0.1).unwrap();
        let b = budget(&cfg, vec![Module { layer: 1, kind: ModuleKind::Mlp }]);
        let fc = FinetuneConfig {
            steps: 3,
            lr: 1e-2,
            eval_every: 2,
            ..FinetuneConfig::default()
        };
        let (tuned, trace) = finetune_selective(&m, &b, &s.target_train, &s.target_test, &[&s.filler], &fc).unwrap();
        let trainable = b.trainable();
        for (id, t) in m.params() {
            if trainable.contains(&id) {
                assert_ne!(t, tuned.param(id), "{id} did not move");
            } else {
                assert_eq!(t.data(), tuned.param(id).data(), "{id} moved");
            }
        }
        let steps: Vec<usize> = trace.points.iter().map(|p| p.step).collect();
        assert_eq!(steps, vec![0, 2, 3]);
        assert_eq!(trace.log.rows.len(), 3);
        assert!(trace.to_csv().starts_with("step,target,filler\n"));
    }

    #[test]
    fn zero_steps_leave_the_model_alone() {
        let (w, s) = tiny_suite();
        let cfg = small(w.vocab.len());
        let m = Model::init(cfg.clone(), 2).unwrap();
        let fc = FinetuneConfig {
            steps: 0,
            ..FinetuneConfig::default()
        };
        let (tuned, trace) = finetune_selective(&m, &budget(&cfg, vec![]), &s.target_train, &s.target_test, &[], &fc).unwrap();
        assert_eq!(tuned, m);
        assert_eq!(trace.points.len(), 1);
    }

    #[test]
    fn empty_budget_is_rejected() {
        let (w, s) = tiny_suite();
        let cfg = small(w.vocab.len());
        let m = Model::init(cfg.clone(), 2).unwrap();
        let r = finetune_selective(&m, &budget(&cfg, vec![]), &s.target_train, &s.target_test, &[], &FinetuneConfig::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn runs_are_reproducible() {
        let (w, s) = tiny_suite();
        let cfg = small(w.vocab.len());
        let m = Model::init_with_std(cfg.clone(), 5, 0.1).unwrap();
        let b = budget(&cfg, vec![Module { layer: 0, kind: ModuleKind::Attention }]);
        let fc = FinetuneConfig {
            steps: 2,
            ..FinetuneConfig::default()
        };
        let a = finetune_selective(&m, &b, &s.target_train, &s.target_test, &[], &fc).unwrap();
        let b2 = finetune_selective(&m, &b, &s.target_train, &s.target_test, &[], &fc).unwrap();
        assert_eq!(a, b2);
    }
}
