//! Training regimes selectable by name: per-task experts and the three full
//! fine-tuning baselines.

use crate::backbone::BackboneWeights;
use crate::error::{CoreError, Result};
use crate::lora::LoraExpert;
use crate::registry::Registry;
use crate::taskgen::{mean_loss, TaskDataset};

use super::{full_finetune, train_expert, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel {
    Expert(LoraExpert),
    Backbone(BackboneWeights),
}

#[derive(Clone, Debug)]
pub struct RegimeOutput {
    pub regime: &'static str,
    /// Labelled models in training order.
    pub models: Vec<(String, TrainedModel)>,
    /// `assignment[i]` indexes the model that serves task `i`.
    pub assignment: Vec<usize>,
    pub log: TrainLog,
}

impl RegimeOutput {
    /// Eval-split loss of every task under the model assigned to it.
    pub fn eval_losses(&self, base: &BackboneWeights, tasks: &[TaskDataset]) -> Result<Vec<f64>> {
        if tasks.len() != self.assignment.len() {
            return Err(CoreError::Dimension {
                what: "tasks vs regime assignment".into(),
                expected: self.assignment.len(),
                got: tasks.len(),
            });
        }
        tasks
            .iter()
            .zip(&self.assignment)
            .map(|(t, &m)| match &self.models[m].1 {
                TrainedModel::Expert(e) => mean_loss(base, Some(e), &t.eval),
                TrainedModel::Backbone(w) => mean_loss(w, None, &t.eval),
            })
            .collect()
    }

    /// Bytes each model needs on disk in the container format.
    pub fn storage_bytes(&self) -> Result<u64> {
        let mut total = 0u64;
        for (_, m) in &self.models {
            total += match m {
                TrainedModel::Expert(e) => crate::store::expert_file_len(e) as u64,
                TrainedModel::Backbone(w) => crate::store::encode_base(w)?.len() as u64,
            };
        }
        Ok(total)
    }
}

pub trait Regime: Send + Sync {
    fn name(&self) -> &'static str;

    /// Trains on `tasks` starting from `base`. `base` is never modified.
    fn train(&self, base: &BackboneWeights, tasks: &[TaskDataset], cfg: &TrainConfig) -> Result<RegimeOutput>;
}

fn with_mode(cfg: &TrainConfig, mode: &str) -> TrainConfig {
    TrainConfig {
        mode: mode.to_string(),
        ..cfg.clone()
    }
}

struct LoraExperts;

impl Regime for LoraExperts {
    fn name(&self) -> &'static str {
        "lora_expert"
    }

    fn train(&self, base: &BackboneWeights, tasks: &[TaskDataset], cfg: &TrainConfig) -> Result<RegimeOutput> {
        let cfg = with_mode(cfg, self.name());
        let mut frozen = base.clone();
        frozen.freeze();
        let mut log = TrainLog::default();
        let mut models = Vec::with_capacity(tasks.len());
        for t in tasks {
            let (e, l) = train_expert(&frozen, t, &cfg)?;
            log.extend(l);
            models.push((e.expert_id.clone(), TrainedModel::Expert(e)));
        }
        Ok(RegimeOutput {
            regime: self.name(),
            assignment: (0..tasks.len()).collect(),
            models,
            log,
        })
    }
}

struct Full(&'static str);

impl Regime for Full {
    fn name(&self) -> &'static str {
        self.0
    }

    fn train(&self, base: &BackboneWeights, tasks: &[TaskDataset], cfg: &TrainConfig) -> Result<RegimeOutput> {
        let cfg = with_mode(cfg, self.0);
        let (ckpts, log) = full_finetune(&base.thawed_copy(), tasks, &cfg)?;
        let last = ckpts.len() - 1;
        let assignment = match self.0 {
            "full_independent" => (0..tasks.len()).collect(),
            "full_joint" => vec![0; tasks.len()],
            _ => vec![last; tasks.len()],
        };
        Ok(RegimeOutput {
            regime: self.0,
            models: ckpts
                .into_iter()
                .map(|(l, w)| (l, TrainedModel::Backbone(w)))
                .collect(),
            assignment,
            log,
        })
    }
}

pub fn regimes() -> Registry<dyn Regime> {
    let mut r: Registry<dyn Regime> = Registry::new("training mode");
    r.register("lora_expert", || Box::new(LoraExperts))
        .register("full_independent", || Box::new(Full("full_independent")))
        .register("full_joint", || Box::new(Full("full_joint")))
        .register("full_sequential", || Box::new(Full("full_sequential")));
    r
}
