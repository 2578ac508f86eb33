//! Stream files: one JSON sample per line plus a sidecar metadata document.
//!
//! Each line of the stream file is
//! `{"id", "features", "classes", "domain", "task", "split"}` with `split`
//! one of `train`, `test`, `zero_shot`, `base` and `task` null outside the
//! task splits. The sidecar (`<stem>.meta.json`) holds the generator config,
//! prompts, class roles and per-task domain transforms.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::DenseMatrix;
use crate::taskgen::{GenConfig, Regime, Sample, TaskSpec, TaskStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    ZeroShot,
    Base,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    id: u64,
    features: Vec<f64>,
    classes: Vec<String>,
    domain: String,
    task: Option<String>,
    split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMeta {
    pub task_id: String,
    pub class_ids: Vec<String>,
    pub domain_id: String,
    /// Row-major rows of the domain transform.
    pub transform: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamMeta {
    pub config: GenConfig,
    pub regime: Regime,
    /// Shots per class when the stream was subsampled.
    pub fewshot: Option<usize>,
    pub base_classes: Vec<String>,
    pub rare_classes: Vec<String>,
    pub prompts: BTreeMap<String, Vec<f64>>,
    pub tasks: Vec<TaskMeta>,
}

pub fn meta_path(stream_path: &Path) -> PathBuf {
    stream_path.with_extension("meta.json")
}

fn line(s: &Sample, task: Option<&str>, split: Split) -> Line {
    Line {
        id: s.id,
        features: s.features.clone(),
        classes: s.present.clone(),
        domain: s.domain_id.clone(),
        task: task.map(str::to_string),
        split,
    }
}

/// Writes the stream file and its sidecar.
pub fn write_stream(
    path: &Path,
    stream: &TaskStream,
    config: &GenConfig,
    fewshot: Option<usize>,
) -> Result<()> {
    let mut out = Vec::new();
    let mut emit = |l: Line| -> Result<()> {
        serde_json::to_writer(&mut out, &l)?;
        out.push(b'\n');
        Ok(())
    };
    for s in &stream.base_train {
        emit(line(s, None, Split::Base))?;
    }
    for s in &stream.zero_shot_set {
        emit(line(s, None, Split::ZeroShot))?;
    }
    for t in &stream.tasks {
        for s in &t.train {
            emit(line(s, Some(&t.task_id), Split::Train))?;
        }
        for s in &t.test {
            emit(line(s, Some(&t.task_id), Split::Test))?;
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::File::create(path)?.write_all(&out)?;

    let meta = StreamMeta {
        config: config.clone(),
        regime: stream.regime,
        fewshot,
        base_classes: stream.base_classes.clone(),
        rare_classes: stream.rare_classes.clone(),
        prompts: stream.prompts.clone(),
        tasks: stream
            .tasks
            .iter()
            .map(|t| TaskMeta {
                task_id: t.task_id.clone(),
                class_ids: t.class_ids.clone(),
                domain_id: t.domain_id.clone(),
                transform: (0..t.transform.rows())
                    .map(|r| t.transform.row(r).to_vec())
                    .collect(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(meta_path(path), text)?;
    Ok(())
}

pub fn read_meta(stream_path: &Path) -> Result<StreamMeta> {
    Ok(serde_json::from_slice(&fs::read(meta_path(stream_path))?)?)
}

/// Reads a stream file and its sidecar back into a [`TaskStream`].
pub fn read_stream(path: &Path) -> Result<(TaskStream, StreamMeta)> {
    let meta = read_meta(path)?;
    let mut tasks: Vec<TaskSpec> = meta
        .tasks
        .iter()
        .map(|t| {
            let rows: Vec<&[f64]> = t.transform.iter().map(Vec::as_slice).collect();
            Ok(TaskSpec {
                task_id: t.task_id.clone(),
                class_ids: t.class_ids.clone(),
                domain_id: t.domain_id.clone(),
                transform: DenseMatrix::from_rows(&rows)?,
                train: Vec::new(),
                test: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;
    let index: BTreeMap<String, usize> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| (t.task_id.clone(), i))
        .collect();
    let mut base_train = Vec::new();
    let mut zero_shot_set = Vec::new();
    let reader = BufReader::new(fs::File::open(path)?);
    for (n, text) in reader.lines().enumerate() {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&text)?;
        let sample = Sample {
            id: l.id,
            features: l.features,
            present: l.classes,
            domain_id: l.domain,
        };
        let task = |name: &Option<String>| {
            name.as_ref()
                .and_then(|t| index.get(t).copied())
                .ok_or_else(|| {
                    Error::InvalidConfig(format!("line {}: unknown or missing task", n + 1))
                })
        };
        match l.split {
            Split::Base => base_train.push(sample),
            Split::ZeroShot => zero_shot_set.push(sample),
            Split::Train => tasks[task(&l.task)?].train.push(sample),
            Split::Test => tasks[task(&l.task)?].test.push(sample),
        }
    }
    let stream = TaskStream {
        regime: meta.regime,
        tasks,
        zero_shot_set,
        base_train,
        base_classes: meta.base_classes.clone(),
        rare_classes: meta.rare_classes.clone(),
        prompts: meta.prompts.clone(),
    };
    Ok((stream, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::generate_stream;

    #[test]
    fn round_trip_is_exact() {
        let cfg = GenConfig {
            samples_per_class: 12,
            test_samples_per_class: 4,
            base_samples_per_class: 5,
            zero_shot_samples_per_class: 3,
            seed: 11,
            ..GenConfig::overlapped()
        };
        let stream = generate_stream(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        write_stream(&path, &stream, &cfg, None).unwrap();
        let (back, meta) = read_stream(&path).unwrap();
        assert_eq!(back, stream);
        assert_eq!(meta.config, cfg);
        assert!(meta_path(&path).ends_with("s.meta.json"));
    }
}
