//! On-disk versioned library of expert modules.
//!
//! Layout under the library root:
//!
//! ```text
//! manifest.json                      latest version + hash per key, seq counter
//! log.jsonl                          one CommitRecord per line, append-only
//! modules/<class_id>/<version>.ditm  expert A factors
//! projections/<class_id>/<version>.ditm  per-class B factors (full-pair variant)
//! shared/<task_index>.ditm           shared B after each task
//! warmup/<task_index>.ditm           warmup A of each task
//! ```
//!
//! A commit writes the blob to a temp file and renames it into place,
//! appends the log record, then replaces the manifest with another
//! temp-and-rename. The manifest rename is the commit point: a blob or log
//! line without a manifest update is invisible, and the dangling log tail is
//! truncated on the next open or commit.
//!
//! One writer per directory. Readers may share a library with each other but
//! not with an in-flight commit; nothing here takes locks.

pub mod blob;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::{merge_expert, DenseMatrix, ExpertModule, Phase, SharedProjection};

const MANIFEST: &str = "manifest.json";
const LOG: &str = "log.jsonl";
const MANIFEST_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitKind {
    Expert,
    Shared,
    Warmup,
    /// Class-specific `B`, only written by the full-pair variant.
    Projection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub seq: u64,
    pub kind: CommitKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<String>,
    pub task_id: String,
    pub version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_used: Option<f64>,
    #[serde(default)]
    pub parent_versions: Vec<u64>,
    #[serde(with = "hex_u64")]
    pub content_hash: u64,
    pub timestamp_ms: u64,
}

mod hex_u64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16).map_err(serde::de::Error::custom)
    }
}

/// Extra fields recorded with a commit.
#[derive(Clone, Debug, Default)]
pub struct CommitMeta {
    pub task_id: String,
    pub lambda_used: Option<f64>,
    pub parent_versions: Vec<u64>,
}

impl CommitMeta {
    pub fn task(task_id: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Head {
    version: u64,
    #[serde(with = "hex_u64")]
    hash: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    next_seq: u64,
    #[serde(default)]
    last_timestamp_ms: u64,
    #[serde(default)]
    expert_shape: Option<(usize, usize)>,
    #[serde(default)]
    projection_shape: Option<(usize, usize)>,
    #[serde(default)]
    shared_shape: Option<(usize, usize)>,
    experts: BTreeMap<String, Head>,
    #[serde(default)]
    projections: BTreeMap<String, Head>,
    /// Keyed by task index; JSON object keys are strings.
    shared: BTreeMap<u64, Head>,
    #[serde(default)]
    warmups: BTreeMap<u64, Head>,
}

/// Test hook: abort the next commit at a given step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultPoint {
    /// Temp blob fully written, not yet renamed.
    BlobWritten,
    /// Blob renamed into place, log not yet appended.
    BlobRenamed,
    /// Log appended, manifest not yet replaced.
    LogAppended,
}

#[derive(Debug)]
pub struct ModuleLibrary {
    root: PathBuf,
    manifest: Manifest,
    log: Vec<CommitRecord>,
    log_bytes: u64,
    hashes: HashMap<(CommitKind, String, u64), u64>,
    fault: Option<FaultPoint>,
}

fn check_class_id(class_id: &str) -> Result<()> {
    let ok = !class_id.is_empty()
        && class_id != "."
        && class_id != ".."
        && class_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "invalid class id {class_id:?}"
        )))
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn sync_dir(dir: &Path) {
    // Directory fsync is not supported everywhere; the rename is still atomic.
    if let Ok(f) = File::open(dir) {
        let _ = f.sync_all();
    }
}

impl ModuleLibrary {
    /// Creates the layout in an absent or empty directory.
    pub fn init(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if root.exists() {
            if !root.is_dir() || fs::read_dir(&root)?.next().is_some() {
                return Err(Error::LibraryExists(root));
            }
        } else {
            fs::create_dir_all(&root)?;
        }
        for sub in ["modules", "projections", "shared", "warmup"] {
            fs::create_dir_all(root.join(sub))?;
        }
        File::create(root.join(LOG))?.sync_all()?;
        let mut lib = Self {
            root,
            manifest: Manifest {
                format: MANIFEST_FORMAT,
                ..Manifest::default()
            },
            log: Vec::new(),
            log_bytes: 0,
            hashes: HashMap::new(),
            fault: None,
        };
        lib.write_manifest(&lib.manifest.clone())?;
        Ok(lib)
    }

    /// Opens an existing library, dropping any log tail past the manifest.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest_path = root.join(MANIFEST);
        if !manifest_path.is_file() {
            return Err(Error::NotALibrary(root));
        }
        let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::InvalidConfig(format!(
                "unsupported manifest format {}",
                manifest.format
            )));
        }
        let mut log = Vec::new();
        let mut log_bytes = 0u64;
        let reader = BufReader::new(File::open(root.join(LOG))?);
        for line in reader.split(b'\n') {
            let line = line?;
            if log.len() as u64 >= manifest.next_seq {
                break;
            }
            let record: CommitRecord = serde_json::from_slice(&line)?;
            log_bytes += line.len() as u64 + 1;
            log.push(record);
        }
        if (log.len() as u64) < manifest.next_seq {
            return Err(Error::CorruptBlob {
                path: root.join(LOG),
                reason: format!(
                    "log has {} records, manifest expects {}",
                    log.len(),
                    manifest.next_seq
                ),
            });
        }
        let hashes = log
            .iter()
            .map(|r| ((r.kind, record_key(r), r.version), r.content_hash))
            .collect();
        Ok(Self {
            root,
            manifest,
            log,
            log_bytes,
            hashes,
            fault: None,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, point: Option<FaultPoint>) {
        self.fault = point;
    }

    fn trip(&mut self, at: FaultPoint) -> Result<()> {
        if self.fault == Some(at) {
            self.fault = None;
            return Err(Error::InjectedFault(at));
        }
        Ok(())
    }

    pub fn num_experts(&self) -> usize {
        self.manifest.experts.len()
    }

    pub fn num_shared(&self) -> usize {
        self.manifest.shared.len()
    }

    /// Class ids with at least one committed expert, sorted.
    pub fn classes(&self) -> Vec<String> {
        self.manifest.experts.keys().cloned().collect()
    }

    pub fn latest_version(&self, class_id: &str) -> Option<u64> {
        self.manifest.experts.get(class_id).map(|h| h.version)
    }

    fn expert_path(&self, class_id: &str, version: u64) -> PathBuf {
        self.root
            .join("modules")
            .join(class_id)
            .join(format!("{version}.ditm"))
    }

    fn projection_path(&self, class_id: &str, version: u64) -> PathBuf {
        self.root
            .join("projections")
            .join(class_id)
            .join(format!("{version}.ditm"))
    }

    fn shared_path(&self, task_index: u64) -> PathBuf {
        self.root.join("shared").join(format!("{task_index}.ditm"))
    }

    fn warmup_path(&self, task_index: u64) -> PathBuf {
        self.root.join("warmup").join(format!("{task_index}.ditm"))
    }

    fn write_manifest(&mut self, manifest: &Manifest) -> Result<()> {
        let path = self.root.join(MANIFEST);
        let tmp = self.root.join("manifest.json.tmp");
        let mut f = File::create(&tmp)?;
        f.write_all(&serde_json::to_vec_pretty(manifest)?)?;
        f.sync_all()?;
        fs::rename(&tmp, &path)?;
        sync_dir(&self.root);
        Ok(())
    }

    fn append_log(&mut self, record: &CommitRecord) -> Result<u64> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        let mut f = OpenOptions::new().write(true).open(self.root.join(LOG))?;
        // Drop anything past the committed prefix left by an aborted commit.
        f.set_len(self.log_bytes)?;
        use std::io::Seek;
        f.seek(std::io::SeekFrom::End(0))?;
        f.write_all(&line)?;
        f.sync_all()?;
        Ok(self.log_bytes + line.len() as u64)
    }

    /// Shared commit path. `update` applies the new head to a manifest copy.
    fn commit_blob(
        &mut self,
        path: PathBuf,
        m: &DenseMatrix,
        mut record: CommitRecord,
        update: impl FnOnce(&mut Manifest, Head),
    ) -> Result<CommitRecord> {
        let bytes = blob::encode(m);
        let hash = blob::fnv1a64(&bytes);
        let tmp = blob::write_temp(&path, &bytes)?;
        self.trip(FaultPoint::BlobWritten)?;
        fs::rename(&tmp, &path)?;
        if let Some(parent) = path.parent() {
            sync_dir(parent);
        }
        self.trip(FaultPoint::BlobRenamed)?;

        record.seq = self.manifest.next_seq;
        record.content_hash = hash;
        record.timestamp_ms = now_ms().max(self.manifest.last_timestamp_ms);
        let log_bytes = self.append_log(&record)?;
        self.trip(FaultPoint::LogAppended)?;

        let mut next = self.manifest.clone();
        next.next_seq += 1;
        next.last_timestamp_ms = record.timestamp_ms;
        update(
            &mut next,
            Head {
                version: record.version,
                hash,
            },
        );
        self.write_manifest(&next)?;

        self.manifest = next;
        self.log_bytes = log_bytes;
        self.hashes
            .insert((record.kind, record_key(&record), record.version), hash);
        self.log.push(record.clone());
        Ok(record)
    }

    fn check_shape(
        expected: Option<(usize, usize)>,
        m: &DenseMatrix,
        op: &'static str,
    ) -> Result<()> {
        match expected {
            Some(shape) if shape != m.shape() => Err(Error::ShapeMismatch {
                op,
                left: shape,
                right: m.shape(),
            }),
            _ => Ok(()),
        }
    }

    /// Commits a new version of a class expert and returns it.
    pub fn commit_expert(
        &mut self,
        class_id: &str,
        a: &DenseMatrix,
        meta: CommitMeta,
    ) -> Result<u64> {
        check_class_id(class_id)?;
        Self::check_shape(self.manifest.expert_shape, a, "commit_expert")?;
        let version = self.latest_version(class_id).map_or(1, |v| v + 1);
        let record = CommitRecord {
            seq: 0,
            kind: CommitKind::Expert,
            class_id: Some(class_id.to_string()),
            task_id: meta.task_id,
            version,
            lambda_used: meta.lambda_used,
            parent_versions: meta.parent_versions,
            content_hash: 0,
            timestamp_ms: 0,
        };
        let shape = a.shape();
        let key = class_id.to_string();
        self.commit_blob(self.expert_path(class_id, version), a, record, |m, head| {
            m.expert_shape = Some(shape);
            m.experts.insert(key, head);
        })?;
        Ok(version)
    }

    /// Commits a class-specific `B` (full-pair variant only).
    pub fn commit_projection(
        &mut self,
        class_id: &str,
        b: &DenseMatrix,
        meta: CommitMeta,
    ) -> Result<u64> {
        check_class_id(class_id)?;
        Self::check_shape(self.manifest.projection_shape, b, "commit_projection")?;
        let version = self
            .manifest
            .projections
            .get(class_id)
            .map_or(1, |h| h.version + 1);
        let record = CommitRecord {
            seq: 0,
            kind: CommitKind::Projection,
            class_id: Some(class_id.to_string()),
            task_id: meta.task_id,
            version,
            lambda_used: meta.lambda_used,
            parent_versions: meta.parent_versions,
            content_hash: 0,
            timestamp_ms: 0,
        };
        let shape = b.shape();
        let key = class_id.to_string();
        self.commit_blob(
            self.projection_path(class_id, version),
            b,
            record,
            |m, head| {
                m.projection_shape = Some(shape);
                m.projections.insert(key, head);
            },
        )?;
        Ok(version)
    }

    /// Commits the shared `B` produced by task `task_index`.
    pub fn commit_shared(
        &mut self,
        b: &DenseMatrix,
        task_index: u64,
        meta: CommitMeta,
    ) -> Result<()> {
        if self.manifest.shared.contains_key(&task_index) {
            return Err(Error::InvalidConfig(format!(
                "shared projection for task index {task_index} already committed"
            )));
        }
        Self::check_shape(self.manifest.shared_shape, b, "commit_shared")?;
        let record = CommitRecord {
            seq: 0,
            kind: CommitKind::Shared,
            class_id: None,
            task_id: meta.task_id,
            version: task_index,
            lambda_used: meta.lambda_used,
            parent_versions: meta.parent_versions,
            content_hash: 0,
            timestamp_ms: 0,
        };
        let shape = b.shape();
        self.commit_blob(self.shared_path(task_index), b, record, |m, head| {
            m.shared_shape = Some(shape);
            m.shared.insert(task_index, head);
        })?;
        Ok(())
    }

    /// Persists a task's warmup factor for later inspection.
    pub fn commit_warmup(
        &mut self,
        a_wu: &DenseMatrix,
        task_index: u64,
        meta: CommitMeta,
    ) -> Result<()> {
        let record = CommitRecord {
            seq: 0,
            kind: CommitKind::Warmup,
            class_id: None,
            task_id: meta.task_id,
            version: task_index,
            lambda_used: None,
            parent_versions: meta.parent_versions,
            content_hash: 0,
            timestamp_ms: 0,
        };
        self.commit_blob(self.warmup_path(task_index), a_wu, record, |m, head| {
            m.warmups.insert(task_index, head);
        })?;
        Ok(())
    }

    fn record_for(&self, kind: CommitKind, key: &str, version: u64) -> Option<&CommitRecord> {
        self.log
            .iter()
            .rev()
            .find(|r| r.kind == kind && r.version == version && record_key(r) == key)
    }

    fn expert_from(&self, class_id: &str, version: u64, a: DenseMatrix) -> ExpertModule {
        let record = self.record_for(CommitKind::Expert, class_id, version);
        ExpertModule {
            class_id: class_id.to_string(),
            a,
            version,
            parent_version: record.and_then(|r| r.parent_versions.first().copied()),
            task_id: record.map(|r| r.task_id.clone()).unwrap_or_default(),
            phase: Phase::Specialized,
        }
    }

    /// Latest committed expert for `class_id`, or `None` if never committed.
    /// A blob that fails its hash check is an error, not a miss.
    pub fn fetch(&self, class_id: &str) -> Result<Option<ExpertModule>> {
        let Some(head) = self.manifest.experts.get(class_id) else {
            return Ok(None);
        };
        let a = blob::read_verified(&self.expert_path(class_id, head.version), head.hash)?;
        Ok(Some(self.expert_from(class_id, head.version, a)))
    }

    /// Any historical version of a class expert.
    pub fn checkout(&self, class_id: &str, version: u64) -> Result<ExpertModule> {
        let known = self
            .latest_version(class_id)
            .is_some_and(|v| version >= 1 && version <= v);
        let hash = known
            .then(|| {
                self.hashes
                    .get(&(CommitKind::Expert, class_id.to_string(), version))
            })
            .flatten()
            .ok_or_else(|| Error::UnknownVersion {
                class_id: class_id.to_string(),
                version,
            })?;
        let a = blob::read_verified(&self.expert_path(class_id, version), *hash)?;
        Ok(self.expert_from(class_id, version, a))
    }

    pub fn fetch_projection(&self, class_id: &str) -> Result<Option<DenseMatrix>> {
        let Some(head) = self.manifest.projections.get(class_id) else {
            return Ok(None);
        };
        blob::read_verified(&self.projection_path(class_id, head.version), head.hash).map(Some)
    }

    pub fn has_projections(&self) -> bool {
        !self.manifest.projections.is_empty()
    }

    fn read_shared(&self, task_index: u64, hash: u64) -> Result<DenseMatrix> {
        blob::read_verified(&self.shared_path(task_index), hash)
    }

    /// The shared `B` with the highest task index.
    pub fn latest_shared(&self) -> Result<Option<SharedProjection>> {
        match self.manifest.shared.iter().next_back() {
            None => Ok(None),
            Some((&task_index, head)) => Ok(Some(SharedProjection {
                b: self.read_shared(task_index, head.hash)?,
                task_index,
            })),
        }
    }

    pub fn shared_at(&self, task_index: u64) -> Result<Option<SharedProjection>> {
        match self.manifest.shared.get(&task_index) {
            None => Ok(None),
            Some(head) => Ok(Some(SharedProjection {
                b: self.read_shared(task_index, head.hash)?,
                task_index,
            })),
        }
    }

    pub fn warmup_at(&self, task_index: u64) -> Result<Option<DenseMatrix>> {
        match self.manifest.warmups.get(&task_index) {
            None => Ok(None),
            Some(head) => blob::read_verified(&self.warmup_path(task_index), head.hash).map(Some),
        }
    }

    /// Working copies for a task's classes. A class already in the library
    /// starts from `merge_expert(old, a_wu, lambda_a)`, any other class from a
    /// copy of `a_wu`. Nothing is written.
    pub fn branch(
        &self,
        task_id: &str,
        classes: &[String],
        a_wu: &DenseMatrix,
        lambda_a: f64,
    ) -> Result<BTreeMap<String, ExpertModule>> {
        classes
            .iter()
            .map(|c| {
                let (a, parent) = match self.fetch(c)? {
                    Some(old) => (merge_expert(&old.a, a_wu, lambda_a)?, Some(old.version)),
                    None => (a_wu.clone(), None),
                };
                Ok((
                    c.clone(),
                    ExpertModule {
                        class_id: c.clone(),
                        a,
                        version: 0,
                        parent_version: parent,
                        task_id: task_id.to_string(),
                        phase: Phase::Warmup,
                    },
                ))
            })
            .collect()
    }

    /// Commit history in sequence order, optionally for one class.
    pub fn log(&self, class_id: Option<&str>) -> Vec<CommitRecord> {
        self.log
            .iter()
            .filter(|r| class_id.is_none_or(|c| r.class_id.as_deref() == Some(c)))
            .cloned()
            .collect()
    }
}

fn record_key(r: &CommitRecord) -> String {
    r.class_id.clone().unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(v: f64) -> DenseMatrix {
        DenseMatrix::from_vec(2, 3, vec![v, -v, 0.5, 1.0, 2.0, v * 3.0]).unwrap()
    }

    #[test]
    fn init_creates_empty_library() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("lib");
        let lib = ModuleLibrary::init(&root).unwrap();
        assert_eq!(lib.num_experts(), 0);
        assert_eq!(lib.num_shared(), 0);
        assert!(lib.fetch("dog").unwrap().is_none());
        assert!(root.join("manifest.json").is_file());
        assert!(root.join("log.jsonl").is_file());
        assert!(matches!(
            ModuleLibrary::init(&root),
            Err(Error::LibraryExists(_))
        ));
    }

    #[test]
    fn init_accepts_existing_empty_dir() {
        let dir = tempfile::tempdir().unwrap();
        ModuleLibrary::init(dir.path()).unwrap();
    }

    #[test]
    fn commit_fetch_round_trip_and_latest_wins() {
        let dir = tempfile::tempdir().unwrap();
        let mut lib = ModuleLibrary::init(dir.path().join("l")).unwrap();
        let v1 = mat(0.1);
        let v2 = mat(0.7);
        assert_eq!(
            lib.commit_expert("dog", &v1, CommitMeta::task("t0"))
                .unwrap(),
            1
        );
        let got = lib.fetch("dog").unwrap().unwrap();
        assert_eq!(got.a.to_le_bytes(), v1.to_le_bytes());
        assert_eq!(got.version, 1);
        assert_eq!(
            lib.commit_expert("dog", &v2, CommitMeta::task("t1"))
                .unwrap(),
            2
        );
        assert_eq!(lib.fetch("dog").unwrap().unwrap().a, v2);
        assert_eq!(lib.checkout("dog", 1).unwrap().a, v1);
        assert!(matches!(
            lib.checkout("dog", 3),
            Err(Error::UnknownVersion { .. })
        ));

        let reopened = ModuleLibrary::open(lib.root()).unwrap();
        assert_eq!(reopened.fetch("dog").unwrap().unwrap().a, v2);
        assert_eq!(reopened.log(Some("dog")).len(), 2);
    }

    #[test]
    fn corrupted_blob_is_not_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let mut lib = ModuleLibrary::init(dir.path().join("l")).unwrap();
        lib.commit_expert("cat", &mat(1.0), CommitMeta::task("t"))
            .unwrap();
        let path = lib.root().join("modules/cat/1.ditm");
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(lib.fetch("cat"), Err(Error::CorruptBlob { .. })));
        assert!(lib.fetch("dog").unwrap().is_none());
    }

    #[test]
    fn branch_merges_hits_and_copies_misses() {
        let dir = tempfile::tempdir().unwrap();
        let mut lib = ModuleLibrary::init(dir.path().join("l")).unwrap();
        let old = mat(2.0);
        lib.commit_expert("dog", &old, CommitMeta::task("t0"))
            .unwrap();
        let before_log = lib.log(None);
        let wu = mat(-1.0);
        let classes = vec!["dog".to_string(), "cat".to_string()];
        let br = lib.branch("t1", &classes, &wu, 0.3).unwrap();
        assert_eq!(br["dog"].a, merge_expert(&old, &wu, 0.3).unwrap());
        assert_eq!(br["dog"].parent_version, Some(1));
        assert_eq!(br["cat"].a, wu);
        assert_eq!(lib.log(None), before_log);
        assert_eq!(lib.latest_version("cat"), None);

        let br0 = lib.branch("t1", &classes, &wu, 0.0).unwrap();
        assert_eq!(br0["dog"].a.to_le_bytes(), old.to_le_bytes());
    }

    #[test]
    fn shared_is_unique_per_task_index() {
        let dir = tempfile::tempdir().unwrap();
        let mut lib = ModuleLibrary::init(dir.path().join("l")).unwrap();
        let b = DenseMatrix::zeros(3, 2);
        lib.commit_shared(&b, 0, CommitMeta::task("t0")).unwrap();
        assert!(lib.commit_shared(&b, 0, CommitMeta::task("t0")).is_err());
        lib.commit_shared(&mat(1.0).transpose(), 1, CommitMeta::task("t1"))
            .unwrap();
        assert_eq!(lib.latest_shared().unwrap().unwrap().task_index, 1);
        assert!(lib
            .commit_shared(&DenseMatrix::zeros(2, 2), 2, CommitMeta::task("t2"))
            .is_err());
    }

    #[test]
    fn expert_shape_is_fixed_by_first_commit() {
        let dir = tempfile::tempdir().unwrap();
        let mut lib = ModuleLibrary::init(dir.path().join("l")).unwrap();
        lib.commit_expert("a", &mat(1.0), CommitMeta::task("t"))
            .unwrap();
        assert!(matches!(
            lib.commit_expert("b", &DenseMatrix::zeros(3, 3), CommitMeta::task("t")),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(lib
            .commit_expert("../x", &mat(1.0), CommitMeta::task("t"))
            .is_err());
    }

    #[test]
    fn faults_never_expose_partial_commits() {
        for point in [
            FaultPoint::BlobWritten,
            FaultPoint::BlobRenamed,
            FaultPoint::LogAppended,
        ] {
            let dir = tempfile::tempdir().unwrap();
            let mut lib = ModuleLibrary::init(dir.path().join("l")).unwrap();
            lib.commit_expert("dog", &mat(1.0), CommitMeta::task("t0"))
                .unwrap();
            lib.inject_fault(Some(point));
            assert!(matches!(
                lib.commit_expert("dog", &mat(9.0), CommitMeta::task("t1")),
                Err(Error::InjectedFault(p)) if p == point
            ));
            for view in [&lib, &ModuleLibrary::open(lib.root()).unwrap()] {
                let got = view.fetch("dog").unwrap().unwrap();
                assert_eq!(got.version, 1, "{point:?}");
                assert_eq!(got.a, mat(1.0));
                assert_eq!(view.log(None).len(), 1);
            }
            // The library keeps working after the aborted commit.
            assert_eq!(
                lib.commit_expert("dog", &mat(5.0), CommitMeta::task("t1"))
                    .unwrap(),
                2
            );
            let reopened = ModuleLibrary::open(lib.root()).unwrap();
            assert_eq!(reopened.fetch("dog").unwrap().unwrap().a, mat(5.0));
            let seqs: Vec<u64> = reopened.log(None).iter().map(|r| r.seq).collect();
            assert_eq!(seqs, vec![0, 1]);
        }
    }
}
