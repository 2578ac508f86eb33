//! Incremental training over a task stream.
//!
//! Each task goes through a training strategy picked by name from a
//! [`StrategyRegistry`]. After every task the run evaluates all tasks seen so
//! far and the zero-shot set, which is what forgetting and the normalized
//! curves are computed from.

mod modular;
mod sequential;
mod strategy;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use modular::{Flags, ModularStrategy, Selection};
pub use sequential::SequentialStrategy;
pub use strategy::{Learner, Strategy, StrategyRegistry, TaskCtx};

use crate::error::{Error, Result};
use crate::evalkit::{eval_snapshot, forgetting, EvalMode, EvalReport, ForgettingReport, Pristine};
use crate::lowrank::MergeConfig;
use crate::registry::ModuleLibrary;
use crate::taskgen::{Regime, TaskStream};
use crate::toydetect::{pretrain_base, BaseModel, Hyper, PretrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: String,
    /// Unset means the regime default.
    pub merge: Option<MergeConfig>,
    pub rank: usize,
    pub warmup_epochs: usize,
    pub spec_epochs: usize,
    pub batch_size: usize,
    pub hyper: Hyper,
    /// Standard deviation of fresh `A` entries.
    pub init_std: f64,
    pub pretrain: PretrainConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: "dithub".into(),
            merge: None,
            rank: 4,
            warmup_epochs: 10,
            spec_epochs: 10,
            batch_size: 16,
            hyper: Hyper {
                lr: 0.1,
                momentum: 0.9,
            },
            init_std: 0.02,
            pretrain: PretrainConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn merge_for(&self, regime: Regime) -> MergeConfig {
        self.merge.unwrap_or(match regime {
            Regime::DisjointLike => MergeConfig::DISJOINT,
            Regime::Overlapped => MergeConfig::OVERLAPPED,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.merge {
            m.validate()?;
        }
        if self.rank == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "rank and batch_size must be positive".into(),
            ));
        }
        let h = self.hyper;
        if !(h.lr >= 0.0 && h.lr.is_finite() && (0.0..1.0).contains(&h.momentum)) {
            return Err(Error::InvalidConfig(
                "lr must be finite and non-negative, momentum in [0, 1)".into(),
            ));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::InvalidConfig(
                "init_std must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// What one task's training did.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    /// How often each class was drawn during specialization.
    pub selection_counts: BTreeMap<String, u64>,
    /// Mean batch loss per warmup epoch.
    pub warmup_loss: Vec<f64>,
    /// Mean batch loss per specialization epoch.
    pub spec_loss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub task_id: String,
    pub log: TaskLog,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    pub regime: Regime,
    pub merge: MergeConfig,
    /// The shared `B` keeps evolving across a task's classes rather than
    /// restarting per class.
    pub b_opt_carries_through: bool,
    /// Zero-shot mAP of the frozen model before any task.
    pub zero_shot_before: f64,
    pub w_hash_before: String,
    pub w_hash_after: String,
    pub checkpoints: Vec<Checkpoint>,
    pub final_report: EvalReport,
    pub forgetting: ForgettingReport,
    pub wall_clock_ms: u64,
}

/// Trains `stream` task by task into `lib` with the strategy named in `cfg`.
pub fn run_stream(
    model: &BaseModel,
    stream: &TaskStream,
    lib: &mut ModuleLibrary,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    run_stream_with(&StrategyRegistry::builtin(), model, stream, lib, cfg)
}

pub fn run_stream_with(
    registry: &StrategyRegistry,
    model: &BaseModel,
    stream: &TaskStream,
    lib: &mut ModuleLibrary,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    cfg.validate()?;
    if stream.tasks.is_empty() {
        return Err(Error::Empty("task stream"));
    }
    let strategy = registry.get(&cfg.variant)?;
    let started = Instant::now();
    let merge = cfg.merge_for(stream.regime);
    let w_hash_before = format!("{:016x}", model.fingerprint());
    let zero_shot_before = eval_snapshot(
        model,
        &Pristine,
        &[],
        &stream.zero_shot_set,
        &stream.base_classes,
        &EvalMode::None,
    )?
    .zero_shot;

    let mut learner = strategy.start(model, cfg);
    let mut checkpoints = Vec::with_capacity(stream.tasks.len());
    for (index, task) in stream.tasks.iter().enumerate() {
        let log = learner.learn_task(TaskCtx {
            model,
            lib: &mut *lib,
            task,
            index,
            cfg,
            merge,
        })?;
        let seen: Vec<_> = stream.tasks[..=index].iter().collect();
        let source = learner.source(lib);
        let report = eval_snapshot(
            model,
            source.as_ref(),
            &seen,
            &stream.zero_shot_set,
            &stream.base_classes,
            &EvalMode::Composed,
        )?;
        checkpoints.push(Checkpoint {
            task_id: task.task_id.clone(),
            log,
            report,
        });
    }
    let history: Vec<EvalReport> = checkpoints.iter().map(|c| c.report.clone()).collect();
    let order: Vec<String> = stream.tasks.iter().map(|t| t.task_id.clone()).collect();
    let forgetting = forgetting(&history, &order)?;
    Ok(RunRecord {
        variant: cfg.variant.clone(),
        seed: cfg.seed,
        regime: stream.regime,
        merge,
        b_opt_carries_through: true,
        zero_shot_before,
        w_hash_before,
        w_hash_after: format!("{:016x}", model.fingerprint()),
        final_report: history.last().expect("non-empty stream").clone(),
        checkpoints,
        forgetting,
        wall_clock_ms: started.elapsed().as_millis() as u64,
    })
}

/// Pretrains the frozen model, creates a library at `root` (saving the model
/// under `root/base`) and runs the stream.
pub fn run_variant(stream: &TaskStream, cfg: &TrainConfig, root: &Path) -> Result<RunRecord> {
    let model = pretrain_base(stream, &cfg.pretrain, cfg.seed)?;
    run_variant_on(&model, stream, cfg, root)
}

/// As [`run_variant`] with an already pretrained model.
pub fn run_variant_on(
    model: &BaseModel,
    stream: &TaskStream,
    cfg: &TrainConfig,
    root: &Path,
) -> Result<RunRecord> {
    StrategyRegistry::builtin().get(&cfg.variant)?;
    let mut lib = ModuleLibrary::init(root)?;
    model.save(&root.join("base"))?;
    run_stream(model, stream, &mut lib, cfg)
}

#[cfg(test)]
mod tests;
