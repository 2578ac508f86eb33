use std::collections::BTreeMap;

use super::modular::shuffled;
use super::*;
use crate::evalkit::{class_aps, LibrarySource};
use crate::lowrank::DenseMatrix;
use crate::registry::CommitKind;
use crate::rng;
use crate::taskgen::{generate_stream, GenConfig, Sample, TaskSpec};
use crate::toydetect::{heavy_ball, loss_and_grads, AdaptState, Labels, Which};

fn small(regime: Regime, seed: u64) -> TaskStream {
    let base = match regime {
        Regime::DisjointLike => GenConfig::default(),
        Regime::Overlapped => GenConfig::overlapped(),
    };
    generate_stream(&GenConfig {
        d: 16,
        num_tasks: 4,
        samples_per_class: 24,
        test_samples_per_class: 8,
        base_samples_per_class: 30,
        zero_shot_samples_per_class: 8,
        seed,
        ..base
    })
    .unwrap()
}

fn quick(variant: &str, seed: u64) -> TrainConfig {
    TrainConfig {
        variant: variant.into(),
        warmup_epochs: 2,
        spec_epochs: 2,
        seed,
        ..TrainConfig::default()
    }
}

fn run(stream: &TaskStream, cfg: &TrainConfig) -> (tempfile::TempDir, BaseModel, RunRecord) {
    let dir = tempfile::tempdir().unwrap();
    let model = pretrain_base(stream, &cfg.pretrain, cfg.seed).unwrap();
    let rec = run_variant_on(&model, stream, cfg, &dir.path().join("lib")).unwrap();
    (dir, model, rec)
}

fn open(dir: &tempfile::TempDir) -> ModuleLibrary {
    ModuleLibrary::open(dir.path().join("lib")).unwrap()
}

/// A one-task stream built from the first task of `stream` with `classes`.
fn one_task(stream: &TaskStream, task: TaskSpec) -> TaskStream {
    TaskStream {
        tasks: vec![task],
        ..stream.clone()
    }
}

#[test]
fn builtin_registry_names() {
    let reg = StrategyRegistry::builtin();
    assert_eq!(
        reg.names(),
        vec![
            "base",
            "dithub",
            "ene",
            "full_lora",
            "naive_seq",
            "wu",
            "wu_merge_b"
        ]
    );
    assert!(matches!(reg.get("nope"), Err(Error::UnknownStrategy(_))));
}

#[test]
fn unknown_variant_is_rejected_before_touching_disk() {
    let stream = small(Regime::DisjointLike, 0);
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick("gd", 0);
    let model = pretrain_base(&stream, &cfg.pretrain, 0).unwrap();
    let root = dir.path().join("lib");
    assert!(matches!(
        run_variant_on(&model, &stream, &cfg, &root),
        Err(Error::UnknownStrategy(_))
    ));
    assert!(!root.exists());
}

#[test]
fn zero_epochs_leave_warmup_at_its_initialization() {
    let stream = small(Regime::DisjointLike, 1);
    let cfg = TrainConfig {
        warmup_epochs: 0,
        spec_epochs: 0,
        ..quick("dithub", 1)
    };
    let (dir, model, _) = run(&stream, &cfg);
    let lib = open(&dir);
    let init = rng::gaussian_vec(
        &mut rng::stream(1, "warmup-init/0", 0),
        cfg.rank * model.dim(),
        cfg.init_std,
    );
    let a_wu = lib.warmup_at(0).unwrap().unwrap();
    assert_eq!(a_wu.data(), init.as_slice());
    // Incoming B at the first task is zero and nothing trains it.
    assert!(lib.shared_at(0).unwrap().unwrap().b.is_zero());
    for c in &stream.tasks[0].class_ids {
        assert_eq!(lib.checkout(c, 1).unwrap().a, a_wu);
    }
}

#[test]
fn single_class_task_is_a_plain_continuation_of_warmup() {
    let stream = small(Regime::DisjointLike, 2);
    let src = &stream.tasks[0];
    let class = src.class_ids[0].clone();
    let keep = |v: &[Sample]| -> Vec<Sample> {
        v.iter()
            .filter(|s| s.contains(&class))
            .map(|s| Sample {
                present: vec![class.clone()],
                ..s.clone()
            })
            .collect()
    };
    let task = TaskSpec {
        class_ids: vec![class.clone()],
        train: keep(&src.train),
        test: keep(&src.test),
        ..src.clone()
    };
    let solo = one_task(&stream, task.clone());

    // Spec epochs 0 with lambda_b 1 exposes the post-warmup B as the shared commit.
    let merge = Some(crate::lowrank::MergeConfig {
        lambda_a: 0.3,
        lambda_b: 1.0,
    });
    let probe = TrainConfig {
        spec_epochs: 0,
        merge,
        ..quick("dithub", 2)
    };
    let (dir0, model, _) = run(&solo, &probe);
    let lib0 = open(&dir0);
    let a_wu = lib0.warmup_at(0).unwrap().unwrap();
    let b_wu = lib0.shared_at(0).unwrap().unwrap().b;

    let cfg = TrainConfig {
        merge,
        ..quick("dithub", 2)
    };
    let (dir, _, rec) = run(&solo, &cfg);
    let lib = open(&dir);

    let mut state = AdaptState::new(a_wu, b_wu.clone(), cfg.hyper);
    let mut b = b_wu;
    let mut vb = DenseMatrix::zeros(b.rows(), b.cols());
    for epoch in 0..cfg.spec_epochs {
        let order = shuffled(&task.train, cfg.seed, "spec-order/0", epoch);
        for batch in order.chunks(cfg.batch_size) {
            let g = loss_and_grads(&model, &state.a, &b, batch, Labels::Active(&class)).unwrap();
            state.sgd_step(&g, Which::AOnly);
            heavy_ball(&mut b, &mut vb, &g.b, cfg.hyper);
        }
    }
    assert_eq!(lib.fetch(&class).unwrap().unwrap().a, state.a);
    assert_eq!(lib.shared_at(0).unwrap().unwrap().b, b);
    let n = (task.train.len() * cfg.spec_epochs) as u64;
    assert_eq!(rec.checkpoints[0].log.selection_counts[&class], n);
}

#[test]
fn never_present_class_keeps_its_branch_init() {
    let stream = small(Regime::DisjointLike, 3);
    let mut task = stream.tasks[0].clone();
    let ghost = "ghost".to_string();
    task.class_ids.push(ghost.clone());
    task.class_ids.sort();
    let mut solo = one_task(&stream, task);
    solo.prompts.insert(ghost.clone(), {
        let mut p = vec![0.0; 16];
        p[0] = 1.0;
        p
    });
    let (dir, _, rec) = run(&solo, &quick("dithub", 3));
    let lib = open(&dir);
    assert_eq!(
        lib.fetch(&ghost).unwrap().unwrap().a,
        lib.warmup_at(0).unwrap().unwrap()
    );
    assert_eq!(rec.checkpoints[0].log.selection_counts[&ghost], 0);
}

#[test]
fn two_class_selection_counts_follow_a_fair_coin() {
    let stream = small(Regime::DisjointLike, 4);
    let src = &stream.tasks[0];
    let (c0, c1) = (src.class_ids[0].clone(), src.class_ids[1].clone());
    let both = |v: &[Sample]| -> Vec<Sample> {
        v.iter()
            .map(|s| Sample {
                present: vec![c0.clone(), c1.clone()],
                ..s.clone()
            })
            .collect()
    };
    let task = TaskSpec {
        class_ids: vec![c0.clone(), c1.clone()],
        train: both(&src.train),
        test: both(&src.test),
        ..src.clone()
    };
    let solo = one_task(&stream, task.clone());
    for seed in 0..5 {
        let cfg = TrainConfig {
            warmup_epochs: 0,
            spec_epochs: 3,
            ..quick("dithub", seed)
        };
        let (_dir, _, rec) = run(&solo, &cfg);
        let counts = &rec.checkpoints[0].log.selection_counts;
        let n = (task.train.len() * cfg.spec_epochs) as f64;
        let sigma = (n * 0.25).sqrt();
        assert_eq!(counts[&c0] + counts[&c1], n as u64);
        let k = counts[&c0] as f64;
        assert!(
            (k - n / 2.0).abs() <= 3.0 * sigma,
            "seed {seed}: {k} of {n}"
        );
    }
}

#[test]
fn library_holds_exactly_the_seen_classes() {
    for regime in [Regime::DisjointLike, Regime::Overlapped] {
        let stream = small(regime, 5);
        let (dir, _, rec) = run(&stream, &quick("dithub", 5));
        let lib = open(&dir);
        assert_eq!(lib.classes(), stream.task_classes());
        assert_eq!(rec.checkpoints.len(), stream.tasks.len());
        assert_eq!(lib.num_shared(), stream.tasks.len());
    }
}

#[test]
fn expert_merge_is_recorded_only_for_returning_classes() {
    let stream = small(Regime::Overlapped, 6);
    let cfg = quick("dithub", 6);
    let (dir, _, _) = run(&stream, &cfg);
    let lib = open(&dir);
    let lambda = cfg.merge_for(Regime::Overlapped).lambda_a;
    let mut seen = BTreeMap::new();
    let mut merged = 0;
    for rec in lib
        .log(None)
        .into_iter()
        .filter(|r| r.kind == CommitKind::Expert)
    {
        let class = rec.class_id.clone().unwrap();
        let before = seen.insert(class, rec.version);
        match before {
            Some(v) => {
                assert_eq!(rec.lambda_used, Some(lambda));
                assert_eq!(rec.parent_versions, vec![v]);
                merged += 1;
            }
            None => {
                assert_eq!(rec.lambda_used, None);
                assert!(rec.parent_versions.is_empty());
            }
        }
    }
    assert!(merged > 0);
}

#[test]
fn zero_lambda_keeps_returning_classes_bit_exact() {
    let stream = small(Regime::Overlapped, 7);
    let cfg = TrainConfig {
        spec_epochs: 0,
        merge: Some(crate::lowrank::MergeConfig {
            lambda_a: 0.0,
            lambda_b: 0.7,
        }),
        ..quick("dithub", 7)
    };
    let (dir, _, _) = run(&stream, &cfg);
    let lib = open(&dir);
    let mut returning = 0;
    for c in lib.classes() {
        let versions = lib.latest_version(&c).unwrap();
        let first = lib.checkout(&c, 1).unwrap().a;
        for v in 2..=versions {
            assert_eq!(
                lib.checkout(&c, v).unwrap().a.to_le_bytes(),
                first.to_le_bytes()
            );
            returning += 1;
        }
    }
    assert!(returning > 0);
}

#[test]
fn runs_are_deterministic() {
    let stream = small(Regime::Overlapped, 8);
    for variant in ["dithub", "ene", "naive_seq"] {
        let cfg = quick(variant, 8);
        let (_d1, _, mut r1) = run(&stream, &cfg);
        let (_d2, _, mut r2) = run(&stream, &cfg);
        r1.wall_clock_ms = 0;
        r2.wall_clock_ms = 0;
        assert_eq!(r1, r2, "{variant}");
    }
}

#[test]
fn every_variant_leaves_the_base_untouched() {
    let stream = small(Regime::Overlapped, 9);
    for variant in StrategyRegistry::builtin().names() {
        let (dir, model, rec) = run(&stream, &quick(variant, 9));
        assert_eq!(rec.w_hash_before, rec.w_hash_after, "{variant}");
        assert_eq!(
            rec.zero_shot_before, rec.final_report.zero_shot_pristine,
            "{variant}"
        );
        let saved = BaseModel::load(&dir.path().join("lib/base")).unwrap();
        assert_eq!(saved.fingerprint(), model.fingerprint());
    }
}

#[test]
fn variant_library_footprints() {
    let stream = small(Regime::Overlapped, 10);
    let (dir, _, _) = run(&stream, &quick("naive_seq", 10));
    assert_eq!(open(&dir).num_experts(), 0);

    let (dir, _, _) = run(&stream, &quick("full_lora", 10));
    let lib = open(&dir);
    assert!(lib.has_projections());
    assert_eq!(lib.num_shared(), 0);
    assert_eq!(lib.num_experts(), stream.task_classes().len());

    let (dir, _, _) = run(&stream, &quick("base", 10));
    let lib = open(&dir);
    assert!(lib.warmup_at(0).unwrap().is_none());
    assert!(lib.log(None).iter().all(|r| r.lambda_used.is_none()));
}

#[test]
fn warmup_beats_zero_shot_on_a_clean_single_class_task() {
    let stream = generate_stream(&GenConfig {
        d: 16,
        noise_sigma: 0.0,
        num_tasks: 1,
        samples_per_class: 40,
        test_samples_per_class: 20,
        base_samples_per_class: 30,
        zero_shot_samples_per_class: 8,
        seed: 11,
        ..GenConfig::default()
    })
    .unwrap();
    let src = &stream.tasks[0];
    let class = src
        .class_ids
        .iter()
        .find(|c| !stream.base_classes.contains(c))
        .unwrap()
        .clone();
    let task = TaskSpec {
        class_ids: vec![class.clone()],
        ..src.clone()
    };
    let solo = one_task(&stream, task.clone());
    let cfg = TrainConfig {
        spec_epochs: 0,
        ..quick("dithub", 11)
    };
    let (dir, model, rec) = run(&solo, &cfg);
    let lib = open(&dir);
    let zero_shot = class_aps(&model, None, &task.class_ids, &task.test).unwrap()[&class];
    let adapted = rec.final_report.per_task_ap[&task.task_id];
    assert!(adapted > zero_shot, "{adapted} vs {zero_shot}");
    let src = LibrarySource { lib: &lib };
    let single = crate::evalkit::eval_snapshot(
        &model,
        &src,
        &[&task],
        &solo.zero_shot_set,
        &solo.base_classes,
        &crate::evalkit::EvalMode::Single(class.clone()),
    )
    .unwrap();
    // A single prompted class with one module: composed and single agree.
    assert_eq!(single.per_task_ap, rec.final_report.per_task_ap);
}
