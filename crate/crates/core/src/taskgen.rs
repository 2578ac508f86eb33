//! Synthetic incremental task streams.
//!
//! Each class owns a unit-norm prototype that doubles as its prompt
//! embedding. A sample holds one to three classes and its features are
//! `sum(T * p_c) + noise`, where `T` is the domain transform of the task the
//! sample belongs to. Base classes live in an untransformed source domain and
//! supply both pretraining data and the zero-shot evaluation set; a fraction
//! of them also shows up inside the task stream under task domains.
//!
//! Two regimes are produced:
//! - `DisjointLike`: mostly fresh classes per task, with at most
//!   `max_pairwise_overlap` of any task shared with any other task.
//! - `Overlapped`: a small class pool where every class is revisited in at
//!   least two tasks, each under a different domain.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::FRAC_PI_2;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::{dot, DenseMatrix};
use crate::rng::{self, Rng};

pub const SOURCE_DOMAIN: &str = "source";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[default]
    DisjointLike,
    Overlapped,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTransform {
    #[default]
    Rotation,
    DiagonalScale,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub regime: Regime,
    pub d: usize,
    pub num_base_classes: usize,
    pub num_task_classes: usize,
    pub num_tasks: usize,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub zero_shot_samples_per_class: usize,
    pub base_samples_per_class: usize,
    pub rare_class_fraction: f64,
    /// Train-set multiplier for rare classes, in (0, 1].
    pub rare_multiplier: f64,
    pub noise_sigma: f64,
    pub domain_transform: DomainTransform,
    /// Rotation angle as a fraction of a right angle, or log-scale spread
    /// for diagonal transforms.
    pub shift_strength: f64,
    pub overlap_fraction_with_base: f64,
    pub max_pairwise_overlap: f64,
    /// Shuffles task order when set; otherwise tasks keep generation order.
    pub task_order_seed: Option<u64>,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            regime: Regime::DisjointLike,
            d: 32,
            num_base_classes: 8,
            num_task_classes: 4,
            num_tasks: 6,
            samples_per_class: 200,
            test_samples_per_class: 50,
            zero_shot_samples_per_class: 50,
            base_samples_per_class: 100,
            rare_class_fraction: 0.2,
            rare_multiplier: 0.1,
            noise_sigma: 0.1,
            domain_transform: DomainTransform::Rotation,
            shift_strength: 0.8,
            overlap_fraction_with_base: 0.25,
            max_pairwise_overlap: 0.25,
            task_order_seed: None,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn overlapped() -> Self {
        Self {
            regime: Regime::Overlapped,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.d < 2 {
            return bad("d must be at least 2");
        }
        if self.num_base_classes == 0
            || self.num_task_classes == 0
            || self.num_tasks == 0
            || self.samples_per_class == 0
            || self.test_samples_per_class == 0
            || self.zero_shot_samples_per_class == 0
            || self.base_samples_per_class == 0
        {
            return bad("all class and sample counts must be positive");
        }
        for (name, v) in [
            ("rare_class_fraction", self.rare_class_fraction),
            (
                "overlap_fraction_with_base",
                self.overlap_fraction_with_base,
            ),
            ("max_pairwise_overlap", self.max_pairwise_overlap),
            ("shift_strength", self.shift_strength),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.rare_multiplier > 0.0 && self.rare_multiplier <= 1.0) {
            return bad("rare_multiplier must lie in (0, 1]");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        if self.regime == Regime::Overlapped && self.num_tasks < 2 {
            return bad("the overlapped regime needs at least two tasks");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    /// Sorted, unique.
    pub present: Vec<String>,
    pub domain_id: String,
}

impl Sample {
    pub fn contains(&self, class_id: &str) -> bool {
        self.present
            .binary_search_by(|c| c.as_str().cmp(class_id))
            .is_ok()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub task_id: String,
    /// Sorted.
    pub class_ids: Vec<String>,
    pub domain_id: String,
    pub transform: DenseMatrix,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub regime: Regime,
    pub tasks: Vec<TaskSpec>,
    /// Held-out base-class samples in the source domain.
    pub zero_shot_set: Vec<Sample>,
    /// Base-class samples for pretraining the frozen scorer.
    pub base_train: Vec<Sample>,
    pub base_classes: Vec<String>,
    pub rare_classes: Vec<String>,
    /// Prompt embedding of every class (base and task).
    pub prompts: BTreeMap<String, Vec<f64>>,
}

impl TaskStream {
    /// Every class that occurs in at least one task, sorted.
    pub fn task_classes(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.tasks.iter().flat_map(|t| &t.class_ids).collect();
        set.into_iter().cloned().collect()
    }
}

fn base_id(i: usize) -> String {
    format!("base{i:02}")
}

fn novel_id(i: usize) -> String {
    format!("novel{i:02}")
}

fn unit_vector(rng: &mut Rng, d: usize) -> Vec<f64> {
    loop {
        let v = rng::gaussian_vec(rng, d, 1.0);
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn domain_matrix(cfg: &GenConfig, rng: &mut Rng) -> DenseMatrix {
    let d = cfg.d;
    let mut t = DenseMatrix::identity(d);
    match cfg.domain_transform {
        DomainTransform::Identity => {}
        DomainTransform::Rotation => {
            // Rotate disjoint random coordinate planes by the same angle, so
            // every vector keeps cos(angle) alignment with its image.
            let angle = cfg.shift_strength * FRAC_PI_2;
            let (c, s) = (angle.cos(), angle.sin());
            let mut idx: Vec<usize> = (0..d).collect();
            idx.shuffle(rng);
            let data = t.data_mut();
            for pair in idx.chunks_exact(2) {
                let (i, j) = (pair[0], pair[1]);
                data[i * d + i] = c;
                data[j * d + j] = c;
                data[i * d + j] = -s;
                data[j * d + i] = s;
            }
        }
        DomainTransform::DiagonalScale => {
            let spread = cfg.shift_strength * 3f64.ln();
            let data = t.data_mut();
            for i in 0..d {
                data[i * d + i] = rng.random_range(-spread..=spread).exp();
            }
        }
    }
    t
}

/// Assigns class ids to tasks. Returns (task class lists, base classes used
/// in tasks, all non-base task classes).
fn assign_classes(cfg: &GenConfig, rng: &mut Rng) -> Vec<Vec<String>> {
    let k = cfg.num_task_classes;
    let n_base_in_tasks = ((cfg.overlap_fraction_with_base * cfg.num_base_classes as f64).round()
        as usize)
        .min(cfg.num_base_classes);
    let mut base: Vec<String> = (0..cfg.num_base_classes).map(base_id).collect();
    base.shuffle(rng);
    base.truncate(n_base_in_tasks);

    match cfg.regime {
        Regime::DisjointLike => {
            let reuse = (cfg.max_pairwise_overlap * k as f64).floor() as usize;
            let mut seen: Vec<String> = Vec::new();
            let mut fresh = 0usize;
            let mut tasks = Vec::with_capacity(cfg.num_tasks);
            for t in 0..cfg.num_tasks {
                let mut classes: Vec<String> = Vec::with_capacity(k);
                if t > 0 {
                    let picks: Vec<String> = seen
                        .choose_multiple(rng, reuse.min(seen.len()))
                        .cloned()
                        .collect();
                    classes.extend(picks);
                }
                if let Some(b) = base.get(t) {
                    if classes.len() < k && !classes.contains(b) {
                        classes.push(b.clone());
                    }
                }
                while classes.len() < k {
                    classes.push(novel_id(fresh));
                    fresh += 1;
                }
                for c in &classes {
                    if !seen.contains(c) {
                        seen.push(c.clone());
                    }
                }
                classes.sort();
                tasks.push(classes);
            }
            tasks
        }
        Regime::Overlapped => {
            let slots = cfg.num_tasks * k;
            let pool_size = (slots / 2).max(k);
            let mut pool = base;
            pool.truncate(pool_size);
            let mut fresh = 0usize;
            while pool.len() < pool_size {
                pool.push(novel_id(fresh));
                fresh += 1;
            }
            pool.shuffle(rng);
            // Each class twice, remaining slots topped up with distinct picks.
            let mut multiset: Vec<String> = pool.iter().chain(pool.iter()).cloned().collect();
            let extra = slots.saturating_sub(multiset.len());
            multiset.extend(pool.choose_multiple(rng, extra).cloned());
            multiset.truncate(slots);
            for _ in 0..1000 {
                multiset.shuffle(rng);
                let tasks: Vec<Vec<String>> = multiset.chunks(k).map(|c| c.to_vec()).collect();
                if tasks
                    .iter()
                    .all(|t| t.iter().collect::<BTreeSet<_>>().len() == t.len())
                {
                    return tasks
                        .into_iter()
                        .map(|mut t| {
                            t.sort();
                            t
                        })
                        .collect();
                }
            }
            // Cyclic fallback: k consecutive entries of a period-P cycle are
            // distinct whenever k <= P.
            (0..cfg.num_tasks)
                .map(|t| {
                    let mut c: Vec<String> = (0..k)
                        .map(|j| pool[(t * k + j) % pool_size].clone())
                        .collect();
                    c.sort();
                    c
                })
                .collect()
        }
    }
}

struct SampleFactory<'a> {
    cfg: &'a GenConfig,
    prototypes: &'a BTreeMap<String, Vec<f64>>,
    next_id: u64,
}

impl SampleFactory<'_> {
    /// `count` samples anchored on `anchor`, each adding zero to two
    /// co-occurring classes drawn from `companions`.
    fn draw(
        &mut self,
        rng: &mut Rng,
        anchor: &str,
        companions: &[String],
        count: usize,
        transform: &DenseMatrix,
        domain_id: &str,
    ) -> Vec<Sample> {
        let others: Vec<&String> = companions.iter().filter(|c| *c != anchor).collect();
        (0..count)
            .map(|_| {
                let total = rng.random_range(1..=3usize);
                let mut present = vec![anchor.to_string()];
                present.extend(
                    others
                        .choose_multiple(rng, (total - 1).min(others.len()))
                        .map(|c| (*c).clone()),
                );
                present.sort();
                let mut features = rng::gaussian_vec(rng, self.cfg.d, self.cfg.noise_sigma);
                for c in &present {
                    let moved = transform.mul_vec(&self.prototypes[c]);
                    for (f, m) in features.iter_mut().zip(moved) {
                        *f += m;
                    }
                }
                let id = self.next_id;
                self.next_id += 1;
                Sample {
                    id,
                    features,
                    present,
                    domain_id: domain_id.to_string(),
                }
            })
            .collect()
    }
}

/// Builds a full stream. Deterministic in `cfg` (including its seed).
pub fn generate_stream(cfg: &GenConfig) -> Result<TaskStream> {
    cfg.validate()?;
    let mut class_rng = rng::stream(cfg.seed, "classes", 0);
    let task_classes = assign_classes(cfg, &mut class_rng);

    let base_classes: Vec<String> = (0..cfg.num_base_classes).map(base_id).collect();
    let mut all: BTreeSet<String> = base_classes.iter().cloned().collect();
    all.extend(task_classes.iter().flatten().cloned());

    let mut proto_rng = rng::stream(cfg.seed, "prototypes", 0);
    let prompts: BTreeMap<String, Vec<f64>> = all
        .iter()
        .map(|c| (c.clone(), unit_vector(&mut proto_rng, cfg.d)))
        .collect();

    // Rare classes are drawn among non-base task classes.
    let mut candidates: Vec<String> = task_classes
        .iter()
        .flatten()
        .filter(|c| !base_classes.contains(c))
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n_rare = (cfg.rare_class_fraction * candidates.len() as f64).round() as usize;
    candidates.shuffle(&mut rng::stream(cfg.seed, "rare", 0));
    let mut rare_classes: Vec<String> = candidates.into_iter().take(n_rare).collect();
    rare_classes.sort();

    let mut factory = SampleFactory {
        cfg,
        prototypes: &prompts,
        next_id: 0,
    };

    let source = DenseMatrix::identity(cfg.d);
    let mut base_rng = rng::stream(cfg.seed, "base-samples", 0);
    let mut base_train = Vec::new();
    for c in &base_classes {
        base_train.extend(factory.draw(
            &mut base_rng,
            c,
            &base_classes,
            cfg.base_samples_per_class,
            &source,
            SOURCE_DOMAIN,
        ));
    }
    let mut zs_rng = rng::stream(cfg.seed, "zero-shot-samples", 0);
    let mut zero_shot_set = Vec::new();
    for c in &base_classes {
        zero_shot_set.extend(factory.draw(
            &mut zs_rng,
            c,
            &base_classes,
            cfg.zero_shot_samples_per_class,
            &source,
            SOURCE_DOMAIN,
        ));
    }

    let n_rare_train =
        ((cfg.samples_per_class as f64 * cfg.rare_multiplier).round() as usize).max(1);
    let mut tasks = Vec::with_capacity(cfg.num_tasks);
    for (t, class_ids) in task_classes.into_iter().enumerate() {
        let domain_id = format!("domain{t:02}");
        let transform = domain_matrix(cfg, &mut rng::stream(cfg.seed, "domain", t as u64));
        // Companions are the task's common classes, so rare classes stay rare.
        let common: Vec<String> = class_ids
            .iter()
            .filter(|c| !rare_classes.contains(c))
            .cloned()
            .collect();
        let mut train_rng = rng::stream(cfg.seed, "train-samples", t as u64);
        let mut test_rng = rng::stream(cfg.seed, "test-samples", t as u64);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for c in &class_ids {
            let n = if rare_classes.contains(c) {
                n_rare_train
            } else {
                cfg.samples_per_class
            };
            train.extend(factory.draw(&mut train_rng, c, &common, n, &transform, &domain_id));
        }
        for c in &class_ids {
            test.extend(factory.draw(
                &mut test_rng,
                c,
                &common,
                cfg.test_samples_per_class,
                &transform,
                &domain_id,
            ));
        }
        tasks.push(TaskSpec {
            task_id: format!("task{t:02}"),
            class_ids,
            domain_id,
            transform,
            train,
            test,
        });
    }
    if let Some(order_seed) = cfg.task_order_seed {
        tasks.shuffle(&mut rng::stream(order_seed, "task-order", 0));
    }

    Ok(TaskStream {
        regime: cfg.regime,
        tasks,
        zero_shot_set,
        base_train,
        base_classes,
        rare_classes,
        prompts,
    })
}

/// Keeps at most `k` train samples per class; a sample counts toward every
/// class it contains. Classes left uncovered by the greedy pass get one
/// sample if that does not push any other class past `k`.
pub fn fewshot_subsample(task: &TaskSpec, k: usize, seed: u64) -> TaskSpec {
    let k = k.max(1);
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    order.shuffle(&mut rng::stream(
        seed,
        &format!("fewshot/{}", task.task_id),
        0,
    ));

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut keep = vec![false; task.train.len()];
    let fits = |s: &Sample, counts: &BTreeMap<&str, usize>| {
        s.present
            .iter()
            .all(|c| counts.get(c.as_str()).copied().unwrap_or(0) < k)
    };
    for &i in &order {
        let s = &task.train[i];
        if fits(s, &counts) {
            keep[i] = true;
            for c in &s.present {
                *counts.entry(c.as_str()).or_default() += 1;
            }
        }
    }
    for class in &task.class_ids {
        if counts.get(class.as_str()).copied().unwrap_or(0) > 0 {
            continue;
        }
        if let Some(&i) = order
            .iter()
            .find(|&&i| !keep[i] && task.train[i].contains(class) && fits(&task.train[i], &counts))
        {
            keep[i] = true;
            for c in &task.train[i].present {
                *counts.entry(c.as_str()).or_default() += 1;
            }
        }
    }
    TaskSpec {
        train: task
            .train
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(s, _)| s.clone())
            .collect(),
        ..task.clone()
    }
}

/// Applies [`fewshot_subsample`] to every task of a stream.
pub fn fewshot_stream(stream: &TaskStream, k: usize, seed: u64) -> TaskStream {
    TaskStream {
        tasks: stream
            .tasks
            .iter()
            .map(|t| fewshot_subsample(t, k, seed))
            .collect(),
        ..stream.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSize {
    pub task_id: String,
    pub num_classes: usize,
    pub train: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamDigest {
    pub regime: Regime,
    /// Number of tasks each class appears in.
    pub class_task_counts: BTreeMap<String, usize>,
    /// Train-set occurrences per class.
    pub class_train_counts: BTreeMap<String, usize>,
    /// `overlap[i][j] = |C_i ∩ C_j|`.
    pub overlap: Vec<Vec<usize>>,
    pub task_sizes: Vec<TaskSize>,
    pub zero_shot_size: usize,
    pub rare_classes: Vec<String>,
    /// Min and max norm of a transformed prototype over all tasks.
    pub min_scale: f64,
    pub max_scale: f64,
}

pub fn stream_digest(stream: &TaskStream) -> StreamDigest {
    let mut class_task_counts = BTreeMap::new();
    let mut class_train_counts = BTreeMap::new();
    for task in &stream.tasks {
        for c in &task.class_ids {
            *class_task_counts.entry(c.clone()).or_insert(0) += 1;
        }
        for s in &task.train {
            for c in &s.present {
                *class_train_counts.entry(c.clone()).or_insert(0) += 1;
            }
        }
    }
    let overlap = stream
        .tasks
        .iter()
        .map(|a| {
            stream
                .tasks
                .iter()
                .map(|b| {
                    a.class_ids
                        .iter()
                        .filter(|c| b.class_ids.contains(c))
                        .count()
                })
                .collect()
        })
        .collect();
    let (mut min_scale, mut max_scale) = (f64::INFINITY, 0.0f64);
    for task in &stream.tasks {
        for p in stream.prompts.values() {
            let moved = task.transform.mul_vec(p);
            let n = dot(&moved, &moved).sqrt();
            min_scale = min_scale.min(n);
            max_scale = max_scale.max(n);
        }
    }
    if stream.tasks.is_empty() {
        min_scale = 1.0;
        max_scale = 1.0;
    }
    StreamDigest {
        regime: stream.regime,
        class_task_counts,
        class_train_counts,
        overlap,
        task_sizes: stream
            .tasks
            .iter()
            .map(|t| TaskSize {
                task_id: t.task_id.clone(),
                num_classes: t.class_ids.len(),
                train: t.train.len(),
                test: t.test.len(),
            })
            .collect(),
        zero_shot_size: stream.zero_shot_set.len(),
        rare_classes: stream.rare_classes.clone(),
        min_scale,
        max_scale,
    }
}
