use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::evalkit::AdapterSource;
use crate::lowrank::MergeConfig;
use crate::registry::ModuleLibrary;
use crate::taskgen::TaskSpec;
use crate::toydetect::BaseModel;

use super::modular::{Flags, ModularStrategy, Selection};
use super::sequential::SequentialStrategy;
use super::{TaskLog, TrainConfig};

/// Everything a learner sees while training one task.
pub struct TaskCtx<'a> {
    pub model: &'a BaseModel,
    pub lib: &'a mut ModuleLibrary,
    pub task: &'a TaskSpec,
    /// Position of the task in the stream.
    pub index: usize,
    pub cfg: &'a TrainConfig,
    pub merge: MergeConfig,
}

/// Per-run training state.
pub trait Learner {
    fn learn_task(&mut self, ctx: TaskCtx<'_>) -> Result<TaskLog>;

    /// What evaluation composes from after the tasks learned so far.
    fn source<'a>(&'a self, lib: &'a ModuleLibrary) -> Box<dyn AdapterSource + 'a>;
}

/// A named training variant.
pub trait Strategy: Send + Sync {
    fn name(&self) -> &str;
    fn describe(&self) -> &str;
    fn start(&self, model: &BaseModel, cfg: &TrainConfig) -> Box<dyn Learner>;
}

pub struct StrategyRegistry {
    strategies: BTreeMap<String, Box<dyn Strategy>>,
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self {
            strategies: BTreeMap::new(),
        }
    }

    /// Every built-in variant.
    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        let full = Flags {
            warmup: true,
            merge_a: true,
            merge_b: true,
            selection: Selection::Present,
            per_class_b: false,
        };
        let none = Flags {
            warmup: false,
            merge_a: false,
            merge_b: false,
            ..full
        };
        let modular = [
            ("dithub", "warmup, expert merge, shared-B merge, present-class selection", full),
            (
                "ene",
                "as dithub, but each sample trains a module drawn from all task classes on all labels",
                Flags {
                    selection: Selection::TaskUniform,
                    ..full
                },
            ),
            ("base", "fresh A per class, B overwritten, no warmup", none),
            ("wu", "base plus warmup", Flags { warmup: true, ..none }),
            (
                "wu_merge_b",
                "base plus warmup and shared-B merge",
                Flags {
                    warmup: true,
                    merge_b: true,
                    ..none
                },
            ),
            (
                "full_lora",
                "class-specific B trained, branched and merged like A",
                Flags {
                    per_class_b: true,
                    ..full
                },
            ),
        ];
        for (name, about, flags) in modular {
            reg.register(Box::new(ModularStrategy::new(name, about, flags)));
        }
        reg.register(Box::new(SequentialStrategy));
        reg
    }

    /// Adds or replaces a strategy under its own name.
    pub fn register(&mut self, strategy: Box<dyn Strategy>) {
        self.strategies
            .insert(strategy.name().to_string(), strategy);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Strategy> {
        self.strategies
            .get(name)
            .map(|s| s.as_ref())
            .ok_or_else(|| Error::UnknownStrategy(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.strategies.keys().map(String::as_str).collect()
    }

    pub fn describe(&self) -> Vec<(&str, &str)> {
        self.strategies
            .values()
            .map(|s| (s.name(), s.describe()))
            .collect()
    }
}
