//! Plain sequential fine-tuning of one global adapter pair. Nothing is
//! written to the library; every prompt sees the same adapter.

use rand::seq::SliceRandom;

use crate::error::Result;
use crate::evalkit::AdapterSource;
use crate::lowrank::DenseMatrix;
use crate::registry::ModuleLibrary;
use crate::rng;
use crate::toydetect::{loss_and_grads, AdaptState, Adapter, BaseModel, Labels, Which};

use super::strategy::{Learner, Strategy, TaskCtx};
use super::{TaskLog, TrainConfig};

pub struct SequentialStrategy;

impl Strategy for SequentialStrategy {
    fn name(&self) -> &str {
        "naive_seq"
    }

    fn describe(&self) -> &str {
        "one global (A, B) fine-tuned on every task in turn, no library"
    }

    fn start(&self, model: &BaseModel, cfg: &TrainConfig) -> Box<dyn Learner> {
        let d = model.dim();
        let data = rng::gaussian_vec(
            &mut rng::stream(cfg.seed, "global-init", 0),
            cfg.rank * d,
            cfg.init_std,
        );
        Box::new(SequentialLearner {
            adapter: Adapter {
                a: DenseMatrix::from_vec(cfg.rank, d, data).expect("finite gaussian draws"),
                b: DenseMatrix::zeros(d, cfg.rank),
            },
        })
    }
}

struct SequentialLearner {
    adapter: Adapter,
}

struct Global<'a>(&'a Adapter);

impl AdapterSource for Global<'_> {
    fn composite(&self, _: &[String]) -> Result<Option<(Adapter, Vec<String>)>> {
        Ok(Some((self.0.clone(), Vec::new())))
    }

    fn single(&self, _: &str) -> Result<Option<Adapter>> {
        Ok(Some(self.0.clone()))
    }
}

impl Learner for SequentialLearner {
    fn learn_task(&mut self, ctx: TaskCtx<'_>) -> Result<TaskLog> {
        let TaskCtx {
            model,
            task,
            index,
            cfg,
            ..
        } = ctx;
        let mut state = AdaptState::new(self.adapter.a.clone(), self.adapter.b.clone(), cfg.hyper);
        let mut log = TaskLog::default();
        for epoch in 0..cfg.warmup_epochs + cfg.spec_epochs {
            let mut order: Vec<_> = task.train.iter().collect();
            order.shuffle(&mut rng::stream(
                cfg.seed,
                &format!("seq-order/{index}"),
                epoch as u64,
            ));
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
            log.spec_loss.push(total / batches.max(1) as f64);
        }
        self.adapter = state.adapter();
        Ok(log)
    }

    fn source<'a>(&'a self, _lib: &'a ModuleLibrary) -> Box<dyn AdapterSource + 'a> {
        Box::new(Global(&self.adapter))
    }
}
