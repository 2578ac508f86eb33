//! Canned experiment suites.
//!
//! Every suite repeats its runs over a list of seeds, fanned out across
//! threads with one library directory per run, and writes CSV/JSON tables
//! under its own subdirectory of the output directory. Nothing is written
//! anywhere else: scratch libraries live in `<out>/<suite>/work` and are
//! removed once the suite finishes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{
    class_aps, eval_snapshot, harmonic_sweep, normalized_curve, rank_csv, rank_sweep, sweep_csv,
    union_test_set, unlearn_matrix, AdapterSource, EvalMode, LibrarySource, Pristine, RankRow,
    SweepRow, LAMBDA_GRID, RANK_SET,
};
use crate::registry::ModuleLibrary;
use crate::taskgen::{fewshot_stream, generate_stream, GenConfig, Regime, TaskSpec, TaskStream};
use crate::toydetect::{pretrain_base, BaseModel};
use crate::trainer::{run_variant_on, RunRecord, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    /// Frozen model, then each component added in turn.
    Ablation,
    /// Present-class selection against training every task class per sample.
    Ene,
    LambdaSweep,
    RankSweep,
    /// Recurring classes against the sequential baseline and the other variants.
    Overlap,
    /// Shot counts per class.
    Fewshot,
    UnlearnHeatmap,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Ablation,
        Suite::Ene,
        Suite::LambdaSweep,
        Suite::RankSweep,
        Suite::Overlap,
        Suite::Fewshot,
        Suite::UnlearnHeatmap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Ablation => "ablation",
            Suite::Ene => "ene",
            Suite::LambdaSweep => "lambda-sweep",
            Suite::RankSweep => "rank-sweep",
            Suite::Overlap => "overlap",
            Suite::Fewshot => "fewshot",
            Suite::UnlearnHeatmap => "unlearn-heatmap",
        }
    }

    /// Regime forced by the suite; `None` keeps the configured one.
    fn regime(self) -> Option<Regime> {
        match self {
            Suite::Ablation | Suite::LambdaSweep | Suite::Overlap => Some(Regime::Overlapped),
            Suite::Ene | Suite::UnlearnHeatmap => Some(Regime::DisjointLike),
            Suite::RankSweep | Suite::Fewshot => None,
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown bench suite {s:?}")))
    }
}

/// Shared by every command: the stream generator, training and the seeds a
/// suite repeats over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            gen: GenConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

/// One run's headline numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub label: String,
    pub seed: u64,
    pub avg: f64,
    pub zero_shot: f64,
    pub zero_shot_pristine: f64,
    pub forgetting: Option<f64>,
    /// Mean single-module AP over the stream's rare classes.
    pub rare_single_ap: Option<f64>,
    pub wall_clock_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub seeds: usize,
    pub avg_mean: f64,
    pub avg_std: f64,
    pub zero_shot_mean: f64,
    pub forgetting_mean: Option<f64>,
    pub rare_single_ap_mean: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct BenchOutcome {
    pub files: Vec<PathBuf>,
    /// Human-readable digest, one line per row.
    pub lines: Vec<String>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; zero for a single value.
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn opt_mean(v: &[Option<f64>]) -> Option<f64> {
    let vals: Option<Vec<f64>> = v.iter().copied().collect();
    vals.filter(|v| !v.is_empty()).map(|v| mean(&v))
}

/// Groups rows by label in first-seen order.
pub fn summarize(rows: &[RunRow]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&RunRow>> = BTreeMap::new();
    for r in rows {
        if !groups.contains_key(r.label.as_str()) {
            order.push(&r.label);
        }
        groups.entry(&r.label).or_default().push(r);
    }
    order
        .into_iter()
        .map(|label| {
            let g = &groups[label];
            let avg: Vec<f64> = g.iter().map(|r| r.avg).collect();
            let zs: Vec<f64> = g.iter().map(|r| r.zero_shot).collect();
            SummaryRow {
                label: label.to_string(),
                seeds: g.len(),
                avg_mean: mean(&avg),
                avg_std: std_dev(&avg),
                zero_shot_mean: mean(&zs),
                forgetting_mean: opt_mean(&g.iter().map(|r| r.forgetting).collect::<Vec<_>>()),
                rare_single_ap_mean: opt_mean(
                    &g.iter().map(|r| r.rare_single_ap).collect::<Vec<_>>(),
                ),
            }
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn runs_csv(rows: &[RunRow]) -> String {
    let mut out = String::from(
        "label,seed,avg,zero_shot,zero_shot_pristine,forgetting,rare_single_ap,wall_clock_ms\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.label,
            r.seed,
            r.avg,
            r.zero_shot,
            r.zero_shot_pristine,
            cell(r.forgetting),
            cell(r.rare_single_ap),
            r.wall_clock_ms
        );
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "label,seeds,avg_mean,avg_std,zero_shot_mean,forgetting_mean,rare_single_ap_mean\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.label,
            r.seeds,
            r.avg_mean,
            r.avg_std,
            r.zero_shot_mean,
            cell(r.forgetting_mean),
            cell(r.rare_single_ap_mean)
        );
    }
    out
}

fn summary_line(r: &SummaryRow) -> String {
    let mut s = format!(
        "{:<16} Avg {:.4} ± {:.4}  zero-shot {:.4}",
        r.label, r.avg_mean, r.avg_std, r.zero_shot_mean
    );
    if let Some(f) = r.forgetting_mean {
        let _ = write!(s, "  forgetting {f:+.4}");
    }
    if let Some(a) = r.rare_single_ap_mean {
        let _ = write!(s, "  rare single-module AP {a:.4}");
    }
    s
}

/// Mean AP over the stream's rare classes, each with its own module alone,
/// scored on the test samples of the tasks containing it.
pub fn rare_single_ap(
    model: &BaseModel,
    lib: &ModuleLibrary,
    stream: &TaskStream,
) -> Result<Option<f64>> {
    let source = LibrarySource { lib };
    let mut aps = Vec::new();
    for c in &stream.rare_classes {
        let Some(adapter) = source.single(c)? else {
            continue;
        };
        let tasks: Vec<TaskSpec> = stream
            .tasks
            .iter()
            .filter(|t| t.class_ids.contains(c))
            .cloned()
            .collect();
        let scored = class_aps(
            model,
            Some(&adapter),
            std::slice::from_ref(c),
            &union_test_set(&tasks),
        )?;
        aps.extend(scored.get(c).copied());
    }
    Ok((!aps.is_empty()).then(|| mean(&aps)))
}

struct Writer {
    dir: PathBuf,
    outcome: BenchOutcome,
}

impl Writer {
    fn file(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents)?;
        self.outcome.files.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.file(name, &serde_json::to_string_pretty(value)?)
    }

    fn tables(&mut self, rows: &[RunRow]) -> Result<()> {
        let summary = summarize(rows);
        self.file("runs.csv", &runs_csv(rows))?;
        self.file("summary.csv", &summary_csv(&summary))?;
        self.outcome.lines.extend(summary.iter().map(summary_line));
        Ok(())
    }
}

/// Everything one seed needs: its stream, pretrained model and a scratch dir.
struct SeedCtx {
    seed: u64,
    stream: TaskStream,
    model: BaseModel,
    train: TrainConfig,
    work: PathBuf,
}

impl SeedCtx {
    fn new(cfg: &BenchConfig, suite: Suite, seed: u64, work: &Path) -> Result<Self> {
        let gen = GenConfig {
            seed,
            regime: suite.regime().unwrap_or(cfg.gen.regime),
            ..cfg.gen.clone()
        };
        let train = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let stream = generate_stream(&gen)?;
        let model = pretrain_base(&stream, &train.pretrain, seed)?;
        Ok(Self {
            seed,
            stream,
            model,
            train,
            work: work.join(format!("seed{seed}")),
        })
    }

    fn run(
        &self,
        stream: &TaskStream,
        variant: &str,
        tag: &str,
    ) -> Result<(RunRecord, ModuleLibrary)> {
        let cfg = TrainConfig {
            variant: variant.into(),
            ..self.train.clone()
        };
        let root = self.work.join(tag);
        let rec = run_variant_on(&self.model, stream, &cfg, &root)?;
        Ok((rec, ModuleLibrary::open(&root)?))
    }

    fn row(
        &self,
        label: &str,
        stream: &TaskStream,
        variant: &str,
        with_rare: bool,
    ) -> Result<(RunRow, RunRecord)> {
        let (rec, lib) = self.run(stream, variant, label)?;
        let rare = if with_rare {
            rare_single_ap(&self.model, &lib, stream)?
        } else {
            None
        };
        let r = &rec.final_report;
        let row = RunRow {
            label: label.to_string(),
            seed: self.seed,
            avg: r.avg,
            zero_shot: r.zero_shot,
            zero_shot_pristine: r.zero_shot_pristine,
            forgetting: Some(rec.forgetting.avg),
            rare_single_ap: rare,
            wall_clock_ms: rec.wall_clock_ms,
        };
        Ok((row, rec))
    }

    /// The frozen model with no adaptation on every task.
    fn frozen_row(&self) -> Result<RunRow> {
        let tasks: Vec<&TaskSpec> = self.stream.tasks.iter().collect();
        let r = eval_snapshot(
            &self.model,
            &Pristine,
            &tasks,
            &self.stream.zero_shot_set,
            &self.stream.base_classes,
            &EvalMode::None,
        )?;
        Ok(RunRow {
            label: "frozen".into(),
            seed: self.seed,
            avg: r.avg,
            zero_shot: r.zero_shot,
            zero_shot_pristine: r.zero_shot_pristine,
            forgetting: None,
            rare_single_ap: None,
            wall_clock_ms: 0,
        })
    }
}

fn per_seed<T: Send>(
    cfg: &BenchConfig,
    suite: Suite,
    work: &Path,
    f: impl Fn(&SeedCtx) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    cfg.seeds
        .par_iter()
        .map(|&seed| f(&SeedCtx::new(cfg, suite, seed, work)?))
        .collect()
}

fn variant_rows(
    cfg: &BenchConfig,
    suite: Suite,
    work: &Path,
    variants: &[&str],
    rare: bool,
) -> Result<Vec<RunRow>> {
    let per: Vec<Vec<RunRow>> = per_seed(cfg, suite, work, |ctx| {
        variants
            .iter()
            .map(|v| Ok(ctx.row(v, &ctx.stream, v, rare)?.0))
            .collect()
    })?;
    Ok(order_by_label(per))
}

/// Flattens per-seed rows so each label's seeds sit together.
fn order_by_label(per: Vec<Vec<RunRow>>) -> Vec<RunRow> {
    let width = per.first().map_or(0, Vec::len);
    (0..width)
        .flat_map(|i| per.iter().map(move |rows| rows[i].clone()))
        .collect()
}

fn mean_sweep(per: &[Vec<SweepRow>]) -> Vec<SweepRow> {
    let n = per.len() as f64;
    let mut rows = per[0].clone();
    for (k, row) in rows.iter_mut().enumerate() {
        row.avg = per.iter().map(|p| p[k].avg).sum::<f64>() / n;
        row.zero_shot = per.iter().map(|p| p[k].zero_shot).sum::<f64>() / n;
        row.harmonic = per.iter().map(|p| p[k].harmonic).sum::<f64>() / n;
    }
    rows
}

fn mean_rank(per: &[Vec<RankRow>]) -> Vec<RankRow> {
    let n = per.len() as f64;
    let mut rows = per[0].clone();
    for (k, row) in rows.iter_mut().enumerate() {
        row.avg = per.iter().map(|p| p[k].avg).sum::<f64>() / n;
        row.zero_shot = per.iter().map(|p| p[k].zero_shot).sum::<f64>() / n;
    }
    rows
}

/// Task id to normalized AP trace.
type Curves = BTreeMap<String, Vec<f64>>;

const FEWSHOT_KS: [usize; 3] = [1, 5, 10];

/// Runs `suite` and writes its tables under `out/<suite name>`.
pub fn run_suite(suite: Suite, cfg: &BenchConfig, out: &Path) -> Result<BenchOutcome> {
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidConfig("bench needs at least one seed".into()));
    }
    cfg.gen.validate()?;
    cfg.train.validate()?;
    let dir = out.join(suite.name());
    let work = dir.join("work");
    if work.exists() {
        fs::remove_dir_all(&work)?;
    }
    fs::create_dir_all(&dir)?;
    let mut w = Writer {
        dir: dir.clone(),
        outcome: BenchOutcome::default(),
    };
    w.json("config.json", cfg)?;

    match suite {
        Suite::Ablation => {
            let per: Vec<Vec<RunRow>> = per_seed(cfg, suite, &work, |ctx| {
                let mut rows = vec![ctx.frozen_row()?];
                for v in ["base", "wu", "wu_merge_b", "dithub"] {
                    rows.push(ctx.row(v, &ctx.stream, v, false)?.0);
                }
                Ok(rows)
            })?;
            w.tables(&order_by_label(per))?;
        }
        Suite::Ene => {
            let rows = variant_rows(cfg, suite, &work, &["dithub", "ene"], true)?;
            w.tables(&rows)?;
        }
        Suite::Overlap => {
            let variants = ["dithub", "naive_seq", "ene", "full_lora", "base"];
            let per: Vec<(Vec<RunRow>, BTreeMap<String, Curves>)> =
                per_seed(cfg, suite, &work, |ctx| {
                    let order: Vec<String> =
                        ctx.stream.tasks.iter().map(|t| t.task_id.clone()).collect();
                    let mut rows = Vec::new();
                    let mut curves = BTreeMap::new();
                    for v in variants {
                        let (row, rec) = ctx.row(v, &ctx.stream, v, false)?;
                        let history: Vec<_> =
                            rec.checkpoints.iter().map(|c| c.report.clone()).collect();
                        curves.insert(v.to_string(), normalized_curve(&history, &order)?);
                        rows.push(row);
                    }
                    Ok((rows, curves))
                })?;
            let curves: BTreeMap<String, _> = cfg
                .seeds
                .iter()
                .zip(&per)
                .map(|(s, (_, c))| (format!("seed{s}"), c.clone()))
                .collect();
            w.tables(&order_by_label(per.into_iter().map(|(r, _)| r).collect()))?;
            w.json("normalized_curves.json", &curves)?;
        }
        Suite::Fewshot => {
            let per: Vec<Vec<RunRow>> = per_seed(cfg, suite, &work, |ctx| {
                let mut rows = Vec::new();
                let streams = FEWSHOT_KS
                    .iter()
                    .map(|&k| (format!("{k}shot"), fewshot_stream(&ctx.stream, k, ctx.seed)))
                    .chain(std::iter::once(("full".to_string(), ctx.stream.clone())));
                for (tag, stream) in streams {
                    for v in ["dithub", "naive_seq"] {
                        rows.push(ctx.row(&format!("{v}@{tag}"), &stream, v, false)?.0);
                    }
                }
                Ok(rows)
            })?;
            w.tables(&order_by_label(per))?;
        }
        Suite::LambdaSweep => {
            let per = per_seed(cfg, suite, &work, |ctx| {
                harmonic_sweep(
                    &ctx.stream,
                    &ctx.train,
                    &LAMBDA_GRID,
                    &LAMBDA_GRID,
                    &ctx.work,
                )
            })?;
            for (seed, rows) in cfg.seeds.iter().zip(&per) {
                w.file(&format!("sweep_seed{seed}.csv"), &sweep_csv(rows))?;
            }
            let rows = mean_sweep(&per);
            w.file("sweep.csv", &sweep_csv(&rows))?;
            w.outcome.lines.extend(rows.iter().map(|r| {
                format!(
                    "lambda_a {:.1} lambda_b {:.1}  Avg {:.4}  zero-shot {:.4}  H {:.4}",
                    r.lambda_a, r.lambda_b, r.avg, r.zero_shot, r.harmonic
                )
            }));
        }
        Suite::RankSweep => {
            let per = per_seed(cfg, suite, &work, |ctx| {
                rank_sweep(&ctx.stream, &ctx.train, &RANK_SET, &ctx.work)
            })?;
            for (seed, rows) in cfg.seeds.iter().zip(&per) {
                w.file(&format!("rank_seed{seed}.csv"), &rank_csv(rows))?;
            }
            let rows = mean_rank(&per);
            w.file("rank.csv", &rank_csv(&rows))?;
            w.outcome.lines.extend(rows.iter().map(|r| {
                format!(
                    "rank {:>2}  params {:>6}  Avg {:.4}  zero-shot {:.4}",
                    r.rank, r.param_count, r.avg, r.zero_shot
                )
            }));
        }
        Suite::UnlearnHeatmap => {
            let alpha = 0.3;
            let per = per_seed(cfg, suite, &work, |ctx| {
                let (_, lib) = ctx.run(&ctx.stream, "dithub", "dithub")?;
                unlearn_matrix(
                    &ctx.model,
                    &LibrarySource { lib: &lib },
                    &ctx.stream.task_classes(),
                    &union_test_set(&ctx.stream.tasks),
                    alpha,
                )
            })?;
            let mut fractions = BTreeMap::new();
            for (seed, m) in cfg.seeds.iter().zip(&per) {
                w.file(&format!("unlearn_seed{seed}.csv"), &m.to_csv())?;
                fractions.insert(format!("seed{seed}"), m.diagonal_min_fraction());
                w.outcome.lines.push(format!(
                    "seed {seed}: own module is the largest drop for {:.3} of {} classes",
                    m.diagonal_min_fraction(),
                    m.classes.len()
                ));
            }
            w.json(
                "summary.json",
                &serde_json::json!({ "alpha": alpha, "diagonal_min_fraction": fractions }),
            )?;
        }
    }
    if work.exists() {
        fs::remove_dir_all(&work)?;
    }
    Ok(w.outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(label: &str, seed: u64, avg: f64) -> RunRow {
        RunRow {
            label: label.into(),
            seed,
            avg,
            zero_shot: 0.5,
            zero_shot_pristine: 0.5,
            forgetting: Some(-avg),
            rare_single_ap: None,
            wall_clock_ms: 0,
        }
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("fig7".parse::<Suite>().is_err());
    }

    #[test]
    fn summary_keeps_first_seen_order_and_sample_std() {
        let rows = [
            row("b", 0, 0.2),
            row("a", 0, 0.5),
            row("b", 1, 0.4),
            row("a", 1, 0.5),
        ];
        let s = summarize(&rows);
        assert_eq!(
            s.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(),
            ["b", "a"]
        );
        assert!((s[0].avg_mean - 0.3).abs() < 1e-15);
        assert!((s[0].avg_std - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[1].avg_std, 0.0);
        assert!((s[0].forgetting_mean.unwrap() + 0.3).abs() < 1e-15);
        assert_eq!(s[0].rare_single_ap_mean, None);
    }

    #[test]
    fn small_suite_stays_inside_its_directory() {
        let out = tempfile::tempdir().unwrap();
        let cfg = BenchConfig {
            gen: GenConfig {
                d: 12,
                num_tasks: 2,
                samples_per_class: 20,
                test_samples_per_class: 10,
                zero_shot_samples_per_class: 10,
                base_samples_per_class: 30,
                ..GenConfig::default()
            },
            train: TrainConfig {
                warmup_epochs: 2,
                spec_epochs: 2,
                ..TrainConfig::default()
            },
            seeds: vec![0, 1],
        };
        let res = run_suite(Suite::Ene, &cfg, out.path()).unwrap();
        let top: Vec<_> = fs::read_dir(out.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(top, ["ene"]);
        assert!(!out.path().join("ene/work").exists());
        assert!(res
            .files
            .iter()
            .all(|f| f.starts_with(out.path().join("ene"))));
        let runs = fs::read_to_string(out.path().join("ene/runs.csv")).unwrap();
        assert_eq!(runs.lines().count(), 1 + 2 * 2);
        assert_eq!(res.lines.len(), 2);
    }
}
