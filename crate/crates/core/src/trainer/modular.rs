//! Library-backed variants: one `A` per class, a shared or per-class `B`.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};

use crate::error::Result;
use crate::evalkit::{AdapterSource, LibrarySource};
use crate::lowrank::{merge_expert, merge_shared, DenseMatrix};
use crate::registry::{CommitMeta, ModuleLibrary};
use crate::rng;
use crate::taskgen::{Sample, TaskSpec};
use crate::toydetect::{heavy_ball, loss_and_grads, AdaptState, BaseModel, Grads, Labels, Which};

use super::strategy::{Learner, Strategy, TaskCtx};
use super::{TaskLog, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Draw among the sample's own classes; only that class's label counts.
    Present,
    /// Draw among all task classes; every task label counts.
    TaskUniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Flags {
    pub warmup: bool,
    /// Start returning classes from the expert merge.
    pub merge_a: bool,
    /// Merge the new shared `B` into the previous one instead of replacing it.
    pub merge_b: bool,
    pub selection: Selection,
    /// Train and store a `B` per class.
    pub per_class_b: bool,
}

pub struct ModularStrategy {
    name: String,
    about: String,
    flags: Flags,
}

impl ModularStrategy {
    pub fn new(name: &str, about: &str, flags: Flags) -> Self {
        Self {
            name: name.into(),
            about: about.into(),
            flags,
        }
    }
}

impl Strategy for ModularStrategy {
    fn name(&self) -> &str {
        &self.name
    }

    fn describe(&self) -> &str {
        &self.about
    }

    fn start(&self, _model: &BaseModel, _cfg: &TrainConfig) -> Box<dyn Learner> {
        Box::new(ModularLearner { flags: self.flags })
    }
}

struct ModularLearner {
    flags: Flags,
}

pub(super) fn shuffled<'a>(
    samples: &'a [Sample],
    seed: u64,
    label: &str,
    epoch: usize,
) -> Vec<&'a Sample> {
    let mut order: Vec<&Sample> = samples.iter().collect();
    order.shuffle(&mut rng::stream(seed, label, epoch as u64));
    order
}

fn scale(g: &Grads, s: f64) -> Grads {
    Grads {
        loss: g.loss * s,
        a: g.a.scaled(s),
        b: g.b.scaled(s),
    }
}

fn fresh_a(seed: u64, label: &str, rank: usize, d: usize, std: f64) -> DenseMatrix {
    let data = rng::gaussian_vec(&mut rng::stream(seed, label, 0), rank * d, std);
    DenseMatrix::from_vec(rank, d, data).expect("finite gaussian draws")
}

/// Trains `(a, b)` on every task label for the configured warmup epochs.
fn warmup(
    model: &BaseModel,
    task: &TaskSpec,
    cfg: &TrainConfig,
    index: usize,
    a: DenseMatrix,
    b: DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix, Vec<f64>)> {
    let mut state = AdaptState::new(a, b, cfg.hyper);
    let mut losses = Vec::with_capacity(cfg.warmup_epochs);
    for epoch in 0..cfg.warmup_epochs {
        let order = shuffled(
            &task.train,
            cfg.seed,
            &format!("warmup-order/{index}"),
            epoch,
        );
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let g = loss_and_grads(
                model,
                &state.a,
                &state.b,
                batch,
                Labels::All(&task.class_ids),
            )?;
            state.sgd_step(&g, Which::Both);
            total += g.loss;
            batches += 1;
        }
        losses.push(total / batches.max(1) as f64);
    }
    Ok((state.a, state.b, losses))
}

impl ModularLearner {
    fn draw<'a>(
        &self,
        sample: &'a Sample,
        classes: &'a [String],
        rng: &mut rng::Rng,
    ) -> Option<&'a String> {
        match self.flags.selection {
            Selection::TaskUniform => classes.choose(rng),
            Selection::Present => {
                let present: Vec<&String> = sample
                    .present
                    .iter()
                    .filter(|c| classes.contains(c))
                    .collect();
                present.choose(rng).copied()
            }
        }
    }
}

impl Learner for ModularLearner {
    fn learn_task(&mut self, ctx: TaskCtx<'_>) -> Result<TaskLog> {
        let TaskCtx {
            model,
            lib,
            task,
            index,
            cfg,
            merge,
        } = ctx;
        let flags = self.flags;
        let (d, r) = (model.dim(), cfg.rank);
        let classes = &task.class_ids;
        let mut log = TaskLog {
            selection_counts: classes.iter().map(|c| (c.clone(), 0)).collect(),
            ..TaskLog::default()
        };

        let b_prev = match lib.latest_shared()? {
            Some(s) if !flags.per_class_b => s.b,
            _ => DenseMatrix::zeros(d, r),
        };
        let a_init = fresh_a(
            cfg.seed,
            &format!("warmup-init/{index}"),
            r,
            d,
            cfg.init_std,
        );
        let (a_wu, b_wu) = if flags.warmup {
            let (a, b, losses) = warmup(model, task, cfg, index, a_init, b_prev.clone())?;
            log.warmup_loss = losses;
            lib.commit_warmup(&a, index as u64, CommitMeta::task(&task.task_id))?;
            (a, b)
        } else {
            (a_init, b_prev.clone())
        };

        // Branch: working copies of every task class.
        let mut lineage: BTreeMap<String, (Option<u64>, Option<f64>)> = BTreeMap::new();
        let mut states: BTreeMap<String, AdaptState> = BTreeMap::new();
        let branched = if flags.merge_a {
            Some(lib.branch(&task.task_id, classes, &a_wu, merge.lambda_a)?)
        } else {
            None
        };
        for c in classes {
            let parent = lib.latest_version(c);
            let (a, lambda) = match &branched {
                Some(b) => (b[c].a.clone(), parent.map(|_| merge.lambda_a)),
                None if flags.warmup => (a_wu.clone(), None),
                None => (
                    fresh_a(
                        cfg.seed,
                        &format!("branch-init/{index}/{c}"),
                        r,
                        d,
                        cfg.init_std,
                    ),
                    None,
                ),
            };
            let b = if flags.per_class_b {
                match lib.fetch_projection(c)? {
                    Some(old) if flags.merge_a => merge_expert(&old, &b_wu, merge.lambda_a)?,
                    _ => b_wu.clone(),
                }
            } else {
                DenseMatrix::zeros(0, 0)
            };
            lineage.insert(c.clone(), (parent, lambda));
            states.insert(c.clone(), AdaptState::new(a, b, cfg.hyper));
        }

        // Specialize: one class per sample, shared B evolving across classes.
        let mut b_opt = b_wu;
        let mut b_velocity = DenseMatrix::zeros(d, r);
        for epoch in 0..cfg.spec_epochs {
            let order = shuffled(&task.train, cfg.seed, &format!("spec-order/{index}"), epoch);
            let select_label = format!("select/{index}/{epoch}");
            let mut total = 0.0;
            let mut batches = 0;
            for batch in order.chunks(cfg.batch_size) {
                let mut groups: BTreeMap<&String, Vec<&Sample>> = BTreeMap::new();
                for s in batch {
                    let mut draw_rng = rng::stream(cfg.seed, &select_label, s.id);
                    if let Some(c) = self.draw(s, classes, &mut draw_rng) {
                        groups.entry(c).or_default().push(s);
                    }
                }
                let mut b_grad = DenseMatrix::zeros(d, r);
                for (c, group) in groups {
                    *log.selection_counts.get_mut(c).expect("task class") += group.len() as u64;
                    let labels = match flags.selection {
                        Selection::Present => Labels::Active(c),
                        Selection::TaskUniform => Labels::All(classes),
                    };
                    let state = states.get_mut(c).expect("task class");
                    let b_used = if flags.per_class_b { &state.b } else { &b_opt };
                    let g = loss_and_grads(model, &state.a, b_used, &group, labels)?;
                    let g = scale(&g, group.len() as f64 / batch.len() as f64);
                    total += g.loss;
                    if flags.per_class_b {
                        state.sgd_step(&g, Which::Both);
                    } else {
                        state.sgd_step(&g, Which::AOnly);
                        b_grad.axpy(1.0, &g.b)?;
                    }
                }
                if !flags.per_class_b {
                    heavy_ball(&mut b_opt, &mut b_velocity, &b_grad, cfg.hyper);
                }
                batches += 1;
            }
            log.spec_loss.push(total / batches.max(1) as f64);
        }

        for (c, state) in &states {
            let (parent, lambda) = lineage[c];
            let meta = CommitMeta {
                task_id: task.task_id.clone(),
                lambda_used: lambda,
                parent_versions: parent.into_iter().collect(),
            };
            lib.commit_expert(c, &state.a, meta.clone())?;
            if flags.per_class_b {
                lib.commit_projection(c, &state.b, meta)?;
            }
        }
        if !flags.per_class_b {
            let (b_new, lambda) = if flags.merge_b {
                (
                    merge_shared(&b_prev, &b_opt, merge.lambda_b)?,
                    Some(merge.lambda_b),
                )
            } else {
                (b_opt, None)
            };
            let meta = CommitMeta {
                task_id: task.task_id.clone(),
                lambda_used: lambda,
                parent_versions: Vec::new(),
            };
            lib.commit_shared(&b_new, index as u64, meta)?;
        }
        Ok(log)
    }

    fn source<'a>(&'a self, lib: &'a ModuleLibrary) -> Box<dyn AdapterSource + 'a> {
        Box::new(LibrarySource { lib })
    }
}
