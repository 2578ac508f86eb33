//! Measurement: presence AP, task mAP snapshots, forgetting, normalized
//! curves, the lambda and rank sweeps, and the unlearning matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::{average_experts, dot, DenseMatrix, MergeConfig, RankConfig};
use crate::registry::ModuleLibrary;
use crate::taskgen::{Sample, TaskSpec, TaskStream};
use crate::toydetect::{Adapter, BaseModel};
use crate::trainer::{run_variant, TrainConfig};

/// Presence AP: rank by descending score (ties keep input order) and average
/// precision@rank over the positive ranks.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::ShapeMismatch {
            op: "average_precision",
            left: (scores.len(), 1),
            right: (positives.len(), 1),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort, so equal scores stay in index order.
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::NoPositives);
    }
    Ok(sum / hits as f64)
}

/// Where evaluation gets its adaptation from.
pub trait AdapterSource {
    /// The composite for a prompt, with the classes whose modules took part.
    /// `None` means the base weights alone.
    fn composite(&self, classes: &[String]) -> Result<Option<(Adapter, Vec<String>)>>;
    fn single(&self, class_id: &str) -> Result<Option<Adapter>>;
}

/// No adaptation at all.
pub struct Pristine;

impl AdapterSource for Pristine {
    fn composite(&self, _: &[String]) -> Result<Option<(Adapter, Vec<String>)>> {
        Ok(None)
    }

    fn single(&self, _: &str) -> Result<Option<Adapter>> {
        Ok(None)
    }
}

/// Composition from a module library: mean of the prompted classes' `A`
/// factors with the latest shared `B`. Libraries holding class-specific `B`
/// factors average those over the same classes instead.
pub struct LibrarySource<'a> {
    pub lib: &'a ModuleLibrary,
}

impl LibrarySource<'_> {
    fn projection_for(&self, classes: &[String], a: &DenseMatrix) -> Result<DenseMatrix> {
        if self.lib.has_projections() {
            let bs = classes
                .iter()
                .map(|c| {
                    self.lib
                        .fetch_projection(c)?
                        .ok_or_else(|| Error::UnknownClass(c.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            return average_experts(&bs.iter().collect::<Vec<_>>());
        }
        Ok(match self.lib.latest_shared()? {
            Some(s) => s.b,
            None => DenseMatrix::zeros(a.cols(), a.rows()),
        })
    }
}

impl AdapterSource for LibrarySource<'_> {
    fn composite(&self, classes: &[String]) -> Result<Option<(Adapter, Vec<String>)>> {
        let mut used = Vec::new();
        let mut mats = Vec::new();
        for c in classes {
            if let Some(m) = self.lib.fetch(c)? {
                used.push(c.clone());
                mats.push(m.a);
            }
        }
        if mats.is_empty() {
            return Ok(None);
        }
        let a = average_experts(&mats.iter().collect::<Vec<_>>())?;
        let b = self.projection_for(&used, &a)?;
        Ok(Some((Adapter { a, b }, used)))
    }

    fn single(&self, class_id: &str) -> Result<Option<Adapter>> {
        let Some(m) = self.lib.fetch(class_id)? else {
            return Ok(None);
        };
        let b = self.projection_for(&[class_id.to_string()], &m.a)?;
        Ok(Some(Adapter { a: m.a, b }))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Average every prompted class's module.
    Composed,
    /// Use one class's module for every prompt.
    Single(String),
    /// Base weights only.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Task id to task mAP.
    pub per_task_ap: BTreeMap<String, f64>,
    /// Task id to class id to AP.
    pub per_class_ap: BTreeMap<String, BTreeMap<String, f64>>,
    pub avg: f64,
    /// Base-class mAP on the zero-shot set, with composed modules for any
    /// base class that has one.
    pub zero_shot: f64,
    /// Base-class mAP on the zero-shot set with no modules.
    pub zero_shot_pristine: f64,
    pub composed_modules: Vec<String>,
}

fn prompt_adapter(
    source: &dyn AdapterSource,
    mode: &EvalMode,
    classes: &[String],
    used: &mut BTreeSet<String>,
) -> Result<Option<Adapter>> {
    Ok(match mode {
        EvalMode::None => None,
        EvalMode::Single(c) => {
            let ad = source.single(c)?;
            if ad.is_some() {
                used.insert(c.clone());
            }
            ad
        }
        EvalMode::Composed => source.composite(classes)?.map(|(ad, cs)| {
            used.extend(cs);
            ad
        }),
    })
}

/// Per-class AP of `classes` over `samples` under one adapter. Classes with
/// no positive sample are left out.
pub fn class_aps(
    model: &BaseModel,
    adapter: Option<&Adapter>,
    classes: &[String],
    samples: &[Sample],
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for c in classes {
        let positives: Vec<bool> = samples.iter().map(|s| s.contains(c)).collect();
        if !positives.contains(&true) {
            continue;
        }
        let v = model.readout(adapter, c)?;
        let scores: Vec<f64> = samples.iter().map(|s| dot(&v, &s.features)).collect();
        out.insert(c.clone(), average_precision(&scores, &positives)?);
    }
    Ok(out)
}

fn mean(values: impl IntoIterator<Item = f64>) -> Result<f64> {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return Err(Error::NoPositives);
    }
    Ok(sum / n as f64)
}

/// Evaluates every listed task on its test split plus the zero-shot set.
pub fn eval_snapshot(
    model: &BaseModel,
    source: &dyn AdapterSource,
    tasks: &[&TaskSpec],
    zero_shot_set: &[Sample],
    base_classes: &[String],
    mode: &EvalMode,
) -> Result<EvalReport> {
    let mut used = BTreeSet::new();
    let mut per_task_ap = BTreeMap::new();
    let mut per_class_ap = BTreeMap::new();
    for task in tasks {
        let adapter = prompt_adapter(source, mode, &task.class_ids, &mut used)?;
        let aps = class_aps(model, adapter.as_ref(), &task.class_ids, &task.test)?;
        per_task_ap.insert(task.task_id.clone(), mean(aps.values().copied())?);
        per_class_ap.insert(task.task_id.clone(), aps);
    }
    let avg = if per_task_ap.is_empty() {
        0.0
    } else {
        mean(per_task_ap.values().copied())?
    };
    let zs_adapter = prompt_adapter(source, mode, base_classes, &mut used)?;
    let zero_shot =
        mean(class_aps(model, zs_adapter.as_ref(), base_classes, zero_shot_set)?.into_values())?;
    let zero_shot_pristine =
        mean(class_aps(model, None, base_classes, zero_shot_set)?.into_values())?;
    Ok(EvalReport {
        per_task_ap,
        per_class_ap,
        avg,
        zero_shot,
        zero_shot_pristine,
        composed_modules: used.into_iter().collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub per_task: BTreeMap<String, f64>,
    pub avg: f64,
}

fn at_learning(history: &[EvalReport], learn_order: &[String], t: usize) -> Result<f64> {
    history
        .get(t)
        .and_then(|r| r.per_task_ap.get(&learn_order[t]))
        .copied()
        .ok_or_else(|| Error::InvalidConfig(format!("no checkpoint AP for {}", learn_order[t])))
}

/// Checkpoint `t` of `history` is the report taken right after learning
/// `learn_order[t]`. Each task's delta is its final AP minus that value.
pub fn forgetting(history: &[EvalReport], learn_order: &[String]) -> Result<ForgettingReport> {
    if history.len() != learn_order.len() || history.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "{} checkpoints for {} learned tasks",
            history.len(),
            learn_order.len()
        )));
    }
    let last = history.last().expect("non-empty");
    let mut per_task = BTreeMap::new();
    for (t, task) in learn_order.iter().enumerate() {
        let then = at_learning(history, learn_order, t)?;
        let now = last
            .per_task_ap
            .get(task)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("final checkpoint lacks {task}")))?;
        per_task.insert(task.clone(), now - then);
    }
    let avg = per_task.values().sum::<f64>() / per_task.len() as f64;
    Ok(ForgettingReport { per_task, avg })
}

/// Each task's AP trace from its own checkpoint on, divided by the AP at that
/// checkpoint. Tasks learned at AP 0 are left out.
pub fn normalized_curve(
    history: &[EvalReport],
    learn_order: &[String],
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (t, task) in learn_order.iter().enumerate() {
        let base = at_learning(history, learn_order, t)?;
        if base == 0.0 {
            continue;
        }
        let trace = history[t..]
            .iter()
            .map(|r| r.per_task_ap.get(task).map(|v| v / base))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| {
                Error::InvalidConfig(format!("{task} missing from a later checkpoint"))
            })?;
        out.insert(task.clone(), trace);
    }
    Ok(out)
}

/// `2 a z / (a + z)`; equal inputs return themselves unrounded.
pub fn harmonic(avg: f64, zero_shot: f64) -> f64 {
    if avg == zero_shot {
        avg
    } else if avg + zero_shot == 0.0 {
        0.0
    } else {
        2.0 * avg * zero_shot / (avg + zero_shot)
    }
}

pub const LAMBDA_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
pub const RANK_SET: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub avg: f64,
    pub zero_shot: f64,
    pub harmonic: f64,
}

/// One full run per grid point, each in its own library under `work_dir`.
pub fn harmonic_sweep(
    stream: &TaskStream,
    cfg: &TrainConfig,
    lambdas_a: &[f64],
    lambdas_b: &[f64],
    work_dir: &Path,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &lambda_a in lambdas_a {
        for &lambda_b in lambdas_b {
            let merge = MergeConfig { lambda_a, lambda_b };
            merge.validate()?;
            let cfg = TrainConfig {
                merge: Some(merge),
                ..cfg.clone()
            };
            let dir = work_dir.join(format!("lambda_a{lambda_a}_lambda_b{lambda_b}"));
            let rec = run_variant(stream, &cfg, &dir)?;
            let r = &rec.final_report;
            rows.push(SweepRow {
                lambda_a,
                lambda_b,
                avg: r.avg,
                zero_shot: r.zero_shot,
                harmonic: harmonic(r.avg, r.zero_shot),
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda_a,lambda_b,avg,zero_shot,harmonic\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.lambda_a, r.lambda_b, r.avg, r.zero_shot, r.harmonic
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rank: usize,
    /// Stored parameters for the run's classes with a shared `B`.
    pub param_count: u64,
    pub avg: f64,
    pub zero_shot: f64,
}

pub fn rank_sweep(
    stream: &TaskStream,
    cfg: &TrainConfig,
    ranks: &[usize],
    work_dir: &Path,
) -> Result<Vec<RankRow>> {
    let d = stream
        .prompts
        .values()
        .next()
        .map(Vec::len)
        .ok_or(Error::Empty("prompts"))?;
    let num_classes = stream.task_classes().len() as u64;
    let mut rows = Vec::new();
    for &rank in ranks {
        let rank_cfg = RankConfig::new(rank, d);
        rank_cfg.validate()?;
        let cfg = TrainConfig {
            rank,
            ..cfg.clone()
        };
        let rec = run_variant(stream, &cfg, &work_dir.join(format!("rank{rank}")))?;
        rows.push(RankRow {
            rank,
            param_count: crate::lowrank::param_count(&rank_cfg, num_classes, true).1,
            avg: rec.final_report.avg,
            zero_shot: rec.final_report.zero_shot,
        });
    }
    Ok(rows)
}

pub fn rank_csv(rows: &[RankRow]) -> String {
    let mut out = String::from("rank,param_count,avg,zero_shot\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.rank, r.param_count, r.avg, r.zero_shot
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnMatrix {
    /// Row and column labels, in the same order.
    pub classes: Vec<String>,
    /// `delta[i][j]`: AP change of class `j` after subtracting class `i`'s
    /// module from the base weight.
    pub delta: Vec<Vec<f64>>,
    pub baseline: Vec<f64>,
}

impl UnlearnMatrix {
    /// Share of columns whose own-module entry is the column minimum.
    pub fn diagonal_min_fraction(&self) -> f64 {
        let n = self.classes.len();
        if n == 0 {
            return 0.0;
        }
        let hits = (0..n)
            .filter(|&j| (0..n).all(|i| self.delta[j][j] <= self.delta[i][j]))
            .count();
        hits as f64 / n as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("removed");
        for c in &self.classes {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for (c, row) in self.classes.iter().zip(&self.delta) {
            out.push_str(c);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// AP of each class under weight `w` over `samples`.
fn weight_aps(
    model: &BaseModel,
    w: &DenseMatrix,
    classes: &[String],
    samples: &[Sample],
) -> Result<Vec<f64>> {
    classes
        .iter()
        .map(|c| {
            let v = model.readout_with_weight(w, c)?;
            let scores: Vec<f64> = samples.iter().map(|s| dot(&v, &s.features)).collect();
            let positives: Vec<bool> = samples.iter().map(|s| s.contains(c)).collect();
            average_precision(&scores, &positives)
        })
        .collect()
}

/// Rows are the given classes that have a module; columns are the same
/// classes. Every class must have a positive in `eval_set`.
pub fn unlearn_matrix(
    model: &BaseModel,
    source: &dyn AdapterSource,
    classes: &[String],
    eval_set: &[Sample],
    alpha: f64,
) -> Result<UnlearnMatrix> {
    let mut modules = Vec::new();
    let mut kept = Vec::new();
    for c in classes {
        if let Some(ad) = source.single(c)? {
            kept.push(c.clone());
            modules.push(ad);
        }
    }
    let baseline = weight_aps(model, model.w(), &kept, eval_set)?;
    let mut delta = Vec::with_capacity(kept.len());
    for ad in &modules {
        let removed = crate::lowrank::apply_adaptation(model.w(), &ad.a, &ad.b, -alpha)?;
        let aps = weight_aps(model, &removed, &kept, eval_set)?;
        delta.push(aps.iter().zip(&baseline).map(|(a, b)| a - b).collect());
    }
    Ok(UnlearnMatrix {
        classes: kept,
        delta,
        baseline,
    })
}

/// The union of the listed tasks' test samples, each sample once.
pub fn union_test_set(tasks: &[TaskSpec]) -> Vec<Sample> {
    let mut seen = BTreeSet::new();
    tasks
        .iter()
        .flat_map(|t| &t.test)
        .filter(|s| seen.insert(s.id))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Precision at every positive's rank, counted directly over the ranking.
    fn brute_ap(scores: &[f64], positives: &[bool]) -> f64 {
        let n = scores.len();
        // Position of i: items with higher score, plus equal-score items before i.
        let rank = |i: usize| {
            (0..n)
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count()
        };
        let mut total = 0.0;
        let mut count = 0.0;
        for i in (0..n).filter(|&i| positives[i]) {
            let r = rank(i);
            let pos_at_or_above = (0..n).filter(|&j| positives[j] && rank(j) <= r).count();
            total += pos_at_or_above as f64 / (r + 1) as f64;
            count += 1.0;
        }
        total / count
    }

    #[test]
    fn ap_hand_case() {
        let ap = average_precision(&[0.9, 0.8, 0.1], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(brute_ap(&[0.9, 0.8, 0.1], &[true, false, true]), ap);
    }

    #[test]
    fn ap_edges() {
        assert_eq!(average_precision(&[0.1, 0.2], &[true, true]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.9, 0.2], &[true, false]).unwrap(), 1.0);
        assert!(matches!(
            average_precision(&[0.9], &[false]),
            Err(Error::NoPositives)
        ));
        assert!(average_precision(&[0.9], &[true, false]).is_err());
    }

    #[test]
    fn ties_keep_input_order() {
        // Equal scores: the negative at index 0 ranks first.
        let ap = average_precision(&[0.5, 0.5], &[false, true]).unwrap();
        assert_eq!(ap, 0.5);
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 1.0);
    }

    fn report(pairs: &[(&str, f64)]) -> EvalReport {
        let per_task_ap: BTreeMap<String, f64> =
            pairs.iter().map(|(t, v)| (t.to_string(), *v)).collect();
        let avg = per_task_ap.values().sum::<f64>() / per_task_ap.len() as f64;
        EvalReport {
            per_task_ap,
            per_class_ap: BTreeMap::new(),
            avg,
            zero_shot: 0.0,
            zero_shot_pristine: 0.0,
            composed_modules: vec![],
        }
    }

    fn order() -> Vec<String> {
        vec!["t0".into(), "t1".into(), "t2".into()]
    }

    #[test]
    fn constant_history_has_no_forgetting() {
        let r = report(&[("t0", 0.5), ("t1", 0.5), ("t2", 0.5)]);
        let hist = vec![
            report(&[("t0", 0.5)]),
            report(&[("t0", 0.5), ("t1", 0.5)]),
            r,
        ];
        let f = forgetting(&hist, &order()).unwrap();
        assert!(f.per_task.values().all(|&v| v == 0.0));
        let curves = normalized_curve(&hist, &order()).unwrap();
        assert!(curves.values().flatten().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_at_learning_leaves_curve_absent() {
        let hist = vec![report(&[("t0", 0.0)]), report(&[("t0", 0.2), ("t1", 0.4)])];
        let curves = normalized_curve(&hist, &order()[..2]).unwrap();
        assert!(!curves.contains_key("t0"));
        assert_eq!(curves["t1"], vec![1.0]);
    }

    #[test]
    fn harmonic_cases() {
        assert_eq!(harmonic(0.0, 0.0), 0.0);
        assert_eq!(harmonic(0.4, 0.4), 0.4);
        assert!((harmonic(0.5, 1.0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn sweep_csv_header() {
        let csv = sweep_csv(&[SweepRow {
            lambda_a: 0.1,
            lambda_b: 0.7,
            avg: 0.5,
            zero_shot: 0.5,
            harmonic: 0.5,
        }]);
        assert_eq!(
            csv,
            "lambda_a,lambda_b,avg,zero_shot,harmonic\n0.1,0.7,0.5,0.5,0.5\n"
        );
    }

    #[test]
    fn diagonal_fraction() {
        let m = UnlearnMatrix {
            classes: vec!["a".into(), "b".into()],
            delta: vec![vec![-0.3, -0.1], vec![-0.4, -0.2]],
            baseline: vec![0.5, 0.5],
        };
        // Column a: diagonal -0.3 is above -0.4. Column b: -0.2 is the min.
        assert_eq!(m.diagonal_min_fraction(), 0.5);
        assert_eq!(m.to_csv(), "removed,a,b\na,-0.3,-0.1\nb,-0.4,-0.2\n");
    }

    proptest! {
        #[test]
        fn ap_matches_brute_force(
            pairs in prop::collection::vec((0u8..6, any::<bool>()), 1..30)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
            let positives: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(positives.contains(&true));
            let ap = average_precision(&scores, &positives).unwrap();
            prop_assert!((ap - brute_ap(&scores, &positives)).abs() < 1e-12);
            prop_assert!(ap > 0.0 && ap <= 1.0);
        }

        #[test]
        fn ap_invariant_under_monotone_maps(
            pairs in prop::collection::vec((-50.0f64..50.0, any::<bool>()), 1..30)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let positives: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(positives.contains(&true));
            let ap = average_precision(&scores, &positives).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| (s / 10.0).tanh() * 3.0 + 1.0).collect();
            let cubed: Vec<f64> = scores.iter().map(|s| s * s * s).collect();
            prop_assert_eq!(ap, average_precision(&mapped, &positives).unwrap());
            prop_assert_eq!(ap, average_precision(&cubed, &positives).unwrap());
        }

        #[test]
        fn harmonic_bounds(a in 0.0f64..1.0, z in 0.0f64..1.0) {
            let h = harmonic(a, z);
            prop_assert!(h <= 2.0 * a.min(z) + 1e-15);
            prop_assert!(h <= a.max(z) + 1e-15);
            prop_assert!(h >= 0.0);
        }

        #[test]
        fn last_task_never_forgets(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 1..6)
        ) {
            let n = rows.len();
            let names: Vec<String> = (0..n).map(|t| format!("t{t}")).collect();
            let hist: Vec<EvalReport> = (0..n)
                .map(|t| {
                    let pairs: Vec<(&str, f64)> =
                        (0..=t).map(|j| (names[j].as_str(), rows[t][j])).collect();
                    report(&pairs)
                })
                .collect();
            let f = forgetting(&hist, &names).unwrap();
            prop_assert_eq!(f.per_task[&names[n - 1]], 0.0);
            let curves = normalized_curve(&hist, &names).unwrap();
            for (t, name) in names.iter().enumerate() {
                if let Some(c) = curves.get(name) {
                    prop_assert_eq!(c[0], 1.0);
                    prop_assert_eq!(c.len(), n - t);
                }
            }
        }
    }
}
