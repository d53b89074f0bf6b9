//! Pretraining on the synthetic corpus and module-selective fine-tuning.

mod budget;
mod finetune;
mod optim;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Intervention, Model, ModelConfig, ParamId};
use crate::neuron::NeuronMask;
use crate::tensor::Tensor;
use crate::world::{CorpusMix, TrainingExample, TrainingStream, WorldSpec};

pub use budget::{select_modules, BudgetStrategy, ModuleBudget};
pub use finetune::{finetune_selective, FinetuneConfig, FinetuneTrace, TracePoint};
pub use optim::{linear_lr, AdamW, AdamWParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Mass moved from the target to the uniform distribution.
    #[serde(default)]
    pub label_smoothing: f64,
    /// When nonempty, the softmax runs over these token logits only and every
    /// target must be one of them.
    #[serde(default)]
    pub choices: Vec<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label smoothing {} is outside [0, 1)", self.label_smoothing)));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 3e-3,
            batch_size: 64,
            weight_decay: 0.01,
            seed: 1,
            eval_every: 500,
            label_smoothing: 0.0,
            choices: Vec::new(),
        }
    }
}

/// One row of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,lr\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.10},{:.10e}\n", r.step, r.loss, r.lr));
        }
        out
    }

    /// Mean loss over consecutive windows of `window` steps.
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        self.rows
            .chunks(window)
            .filter(|c| c.len() == window)
            .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / window as f64)
            .collect()
    }
}

/// Examples per gradient shard; fixed so that results do not depend on thread count.
const SHARD: usize = 16;

/// Mean (optionally label-smoothed) cross-entropy over `batch` and its
/// gradient for every trainable parameter.
pub fn loss_and_grads(
    model: &Model,
    batch: &[TrainingExample],
    trainable: &BTreeSet<ParamId>,
    smoothing: f64,
    choices: &[usize],
) -> Result<(f64, BTreeMap<ParamId, Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch".into()));
    }
    let vocab = model.config().vocab_size;
    let restrict = if choices.is_empty() {
        None
    } else {
        let mut sel = Tensor::zeros(&[vocab, choices.len()]);
        for (j, &c) in choices.iter().enumerate() {
            if c >= vocab {
                return Err(Error::Range(format!("choice token {c} outside vocabulary of {vocab}")));
            }
            sel.row_mut(c)[j] = 1.0;
        }
        Some(sel)
    };
    let none = NeuronMask::empty();
    let shards: Vec<Result<(f64, BTreeMap<ParamId, Tensor>)>> = batch
        .par_chunks(SHARD)
        .map(|chunk| {
            let seqs: Vec<&[usize]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
            let mut targets: Vec<usize> = chunk.iter().map(|e| e.target).collect();
            let mut g = model.build_graph(&seqs, Intervention::mask(&none), &|id| trainable.contains(&id))?;
            let mut logits = g.logits;
            if let Some(sel) = &restrict {
                for t in &mut targets {
                    *t = choices
                        .iter()
                        .position(|c| c == t)
                        .ok_or_else(|| Error::Range(format!("target {t} is not among the choices")))?;
                }
                let sel = g.tape.constant(sel.clone());
                logits = g.tape.matmul(logits, sel)?;
            }
            let loss = g.tape.cross_entropy_smoothed(logits, &targets, smoothing)?;
            let value = g.tape.value(loss).data()[0];
            let grads = g.tape.backward(loss)?;
            let mut out = BTreeMap::new();
            for id in trainable {
                out.insert(*id, grads.wrt(&g.tape, g.params[id]));
            }
            Ok((value, out))
        })
        .collect();
    let mut total = 0.0;
    let mut acc: BTreeMap<ParamId, Tensor> = BTreeMap::new();
    let n = batch.len() as f64;
    for (shard, chunk) in shards.into_iter().zip(batch.chunks(SHARD)) {
        let (loss, grads) = shard?;
        let w = chunk.len() as f64 / n;
        total += loss * w;
        for (id, g) in grads {
            let scaled = Tensor::from_parts(g.shape().to_vec(), g.data().iter().map(|v| v * w).collect());
            match acc.get_mut(&id) {
                Some(t) => t.add_assign(&scaled),
                None => {
                    acc.insert(id, scaled);
                }
            }
        }
    }
    Ok((total, acc))
}

/// Runs `steps` AdamW updates over batches from `next_batch`. Parameters not
/// in `trainable` are never written.
pub fn train_loop<F, C>(
    model: &mut Model,
    trainable: &BTreeSet<ParamId>,
    cfg: &TrainConfig,
    mut next_batch: F,
    mut on_step: C,
) -> Result<TrainLog>
where
    F: FnMut(usize) -> Result<Vec<TrainingExample>>,
    C: FnMut(usize, &Model) -> Result<()>,
{
    cfg.validate()?;
    let hp = AdamWParams {
        weight_decay: cfg.weight_decay,
        ..AdamWParams::default()
    };
    let mut opt = AdamW::new(model, trainable.iter().copied(), hp);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let batch = next_batch(step)?;
        let (loss, grads) = loss_and_grads(model, &batch, trainable, cfg.label_smoothing, &cfg.choices)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("loss became {loss}"),
            });
        }
        let lr = linear_lr(cfg.lr, step, cfg.steps);
        opt.step(model, &grads, lr);
        log.rows.push(LogRow { step, loss, lr });
        on_step(step + 1, model)?;
    }
    Ok(log)
}

/// Trains a freshly initialized model on the world's pretraining stream.
pub fn pretrain(
    world: &WorldSpec,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    mix: &CorpusMix,
) -> Result<(Model, TrainLog)> {
    let mut model = Model::init(model_cfg, cfg.seed)?;
    let stream = TrainingStream::new(world, mix.clone(), cfg.seed);
    let all: BTreeSet<ParamId> = model.config().param_ids().into_iter().collect();
    let log = train_loop(
        &mut model,
        &all,
        cfg,
        |step| stream.batch(step, cfg.batch_size),
        |_, _| Ok(()),
    )?;
    Ok((model, log))
}
