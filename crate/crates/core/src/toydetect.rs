//! A frozen bilinear scorer with one low-rank adaptation slot.
//!
//! The presence score of class `c` for features `x` is
//! `s_c = q_c^T (W + B A) x`, where `q_c` is the class prompt embedding and
//! `W` is pretrained on base classes and then frozen. Training is a logistic
//! presence loss over (sample, class) pairs; only `A` and `B` move after
//! pretraining.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::average_precision;
use crate::lowrank::{dot, DenseMatrix};
use crate::registry::blob;
use crate::rng;
use crate::taskgen::{Sample, TaskStream};

/// The adaptation factors: `a` is r x d, `b` is d x r.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    w: DenseMatrix,
    prompts: BTreeMap<String, Vec<f64>>,
}

impl BaseModel {
    pub fn new(w: DenseMatrix, prompts: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        if w.rows() != w.cols() {
            return Err(Error::ShapeMismatch {
                op: "BaseModel::new",
                left: w.shape(),
                right: (w.cols(), w.cols()),
            });
        }
        for (c, q) in &prompts {
            if q.len() != w.rows() {
                return Err(Error::InvalidConfig(format!(
                    "prompt for {c} has dim {}, model dim is {}",
                    q.len(),
                    w.rows()
                )));
            }
        }
        Ok(Self { w, prompts })
    }

    pub fn dim(&self) -> usize {
        self.w.rows()
    }

    pub fn w(&self) -> &DenseMatrix {
        &self.w
    }

    pub fn prompts(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.prompts
    }

    pub fn prompt(&self, class_id: &str) -> Result<&[f64]> {
        self.prompts
            .get(class_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownClass(class_id.to_string()))
    }

    /// FNV-1a of the frozen weight bytes.
    pub fn fingerprint(&self) -> u64 {
        blob::fnv1a64(&self.w.to_le_bytes())
    }

    /// Effective readout `(W + B A)^T q_c`, so that `s_c = readout . x`.
    pub fn readout(&self, adapter: Option<&Adapter>, class_id: &str) -> Result<Vec<f64>> {
        let q = self.prompt(class_id)?;
        let mut v = self.w.tr_mul_vec(q);
        if let Some(ad) = adapter {
            check_adapter(self, ad)?;
            let z = ad.b.tr_mul_vec(q);
            for (o, extra) in v.iter_mut().zip(ad.a.tr_mul_vec(&z)) {
                *o += extra;
            }
        }
        Ok(v)
    }

    /// Readout with an arbitrary replacement weight (used for unlearning).
    pub fn readout_with_weight(&self, w: &DenseMatrix, class_id: &str) -> Result<Vec<f64>> {
        Ok(w.tr_mul_vec(self.prompt(class_id)?))
    }

    pub fn score(&self, adapter: Option<&Adapter>, x: &[f64], class_id: &str) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "score",
                left: (self.dim(), 1),
                right: (x.len(), 1),
            });
        }
        Ok(dot(&self.readout(adapter, class_id)?, x))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        blob::write_atomic(&dir.join("w.ditm"), &self.w)?;
        let tmp = dir.join("prompts.json.tmp");
        fs::write(&tmp, serde_json::to_vec(&self.prompts)?)?;
        fs::rename(tmp, dir.join("prompts.json"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let w = blob::read(&dir.join("w.ditm"))?;
        let prompts = serde_json::from_slice(&fs::read(dir.join("prompts.json"))?)?;
        Self::new(w, prompts)
    }
}

fn check_adapter(model: &BaseModel, ad: &Adapter) -> Result<()> {
    let d = model.dim();
    if ad.a.cols() != d || ad.b.rows() != d || ad.a.rows() != ad.b.cols() {
        return Err(Error::ShapeMismatch {
            op: "adapter",
            left: ad.b.shape(),
            right: ad.a.shape(),
        });
    }
    Ok(())
}

/// Which labels enter the loss.
#[derive(Clone, Copy, Debug)]
pub enum Labels<'a> {
    /// Every listed class against every sample.
    All(&'a [String]),
    /// Only this class's term.
    Active(&'a str),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub loss: f64,
    pub a: DenseMatrix,
    pub b: DenseMatrix,
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^s) - y s`, the logistic loss in a stable form.
fn logistic_loss(s: f64, y: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p() - y * s
}

/// Mean logistic presence loss over the batch's (sample, class) pairs and
/// its exact gradients with respect to `A` and `B`.
pub fn loss_and_grads(
    model: &BaseModel,
    a: &DenseMatrix,
    b: &DenseMatrix,
    batch: &[&Sample],
    labels: Labels<'_>,
) -> Result<Grads> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let adapter = Adapter {
        a: a.clone(),
        b: b.clone(),
    };
    check_adapter(model, &adapter)?;
    let classes: Vec<&str> = match labels {
        Labels::All(cs) => cs.iter().map(String::as_str).collect(),
        Labels::Active(c) => vec![c],
    };
    if classes.is_empty() {
        return Err(Error::Empty("label set"));
    }
    // Per class: base readout W^T q and low-rank code z = B^T q.
    let per_class: Vec<(&[f64], Vec<f64>, Vec<f64>)> = classes
        .iter()
        .map(|c| {
            let q = model.prompt(c)?;
            Ok((q, model.w.tr_mul_vec(q), b.tr_mul_vec(q)))
        })
        .collect::<Result<_>>()?;

    let pairs = (batch.len() * classes.len()) as f64;
    let mut loss = 0.0;
    let mut grad_a = DenseMatrix::zeros(a.rows(), a.cols());
    let mut grad_b = DenseMatrix::zeros(b.rows(), b.cols());
    for sample in batch {
        let x = &sample.features;
        let h = a.mul_vec(x);
        for (class, (q, wq, z)) in classes.iter().zip(&per_class) {
            let y = if sample.contains(class) { 1.0 } else { 0.0 };
            let s = dot(wq, x) + dot(z, &h);
            loss += logistic_loss(s, y);
            let g = (sigmoid(s) - y) / pairs;
            grad_a.add_outer(g, z, x);
            grad_b.add_outer(g, q, &h);
        }
    }
    Ok(Grads {
        loss: loss / pairs,
        a: grad_a,
        b: grad_b,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lr: 0.5,
            momentum: 0.9,
        }
    }
}

/// Heavy-ball update: `v <- momentum * v + grad`, `param <- param - lr * v`.
pub fn heavy_ball(
    param: &mut DenseMatrix,
    velocity: &mut DenseMatrix,
    grad: &DenseMatrix,
    hyper: Hyper,
) {
    for ((p, v), g) in param
        .data_mut()
        .iter_mut()
        .zip(velocity.data_mut().iter_mut())
        .zip(grad.data())
    {
        *v = hyper.momentum * *v + g;
        *p -= hyper.lr * *v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    AOnly,
    BOnly,
    Both,
}

/// Trainable factors plus optimizer velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptState {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    velocity_a: DenseMatrix,
    velocity_b: DenseMatrix,
    pub hyper: Hyper,
}

impl AdaptState {
    pub fn new(a: DenseMatrix, b: DenseMatrix, hyper: Hyper) -> Self {
        Self {
            velocity_a: DenseMatrix::zeros(a.rows(), a.cols()),
            velocity_b: DenseMatrix::zeros(b.rows(), b.cols()),
            a,
            b,
            hyper,
        }
    }

    pub fn sgd_step(&mut self, grads: &Grads, which: Which) {
        if which != Which::BOnly {
            heavy_ball(&mut self.a, &mut self.velocity_a, &grads.a, self.hyper);
        }
        if which != Which::AOnly {
            heavy_ball(&mut self.b, &mut self.velocity_b, &grads.b, self.hyper);
        }
    }

    pub fn adapter(&self) -> Adapter {
        Adapter {
            a: self.a.clone(),
            b: self.b.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub hyper: Hyper,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub target_ap: f64,
    /// Share of base samples held out for the stopping check.
    pub holdout_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            hyper: Hyper {
                lr: 0.5,
                momentum: 0.9,
            },
            batch_size: 32,
            max_epochs: 200,
            target_ap: 0.9,
            holdout_fraction: 0.2,
        }
    }
}

/// Mean per-class AP of the model alone over `samples`.
pub fn base_map(model: &BaseModel, classes: &[String], samples: &[Sample]) -> Result<f64> {
    let mut aps = Vec::new();
    for c in classes {
        let positives: Vec<bool> = samples.iter().map(|s| s.contains(c)).collect();
        if !positives.iter().any(|&p| p) {
            continue;
        }
        let v = model.readout(None, c)?;
        let scores: Vec<f64> = samples.iter().map(|s| dot(&v, &s.features)).collect();
        aps.push(average_precision(&scores, &positives)?);
    }
    if aps.is_empty() {
        return Err(Error::NoPositives);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Trains the full weight on base-class samples, starting from the identity,
/// until held-out base AP reaches the target (at least one epoch runs).
pub fn pretrain_base(stream: &TaskStream, cfg: &PretrainConfig, seed: u64) -> Result<BaseModel> {
    if stream.base_train.is_empty() || stream.base_classes.is_empty() {
        return Err(Error::Empty("base training set"));
    }
    let d = stream
        .prompts
        .values()
        .next()
        .map(Vec::len)
        .ok_or(Error::Empty("prompts"))?;
    let mut order: Vec<usize> = (0..stream.base_train.len()).collect();
    order.shuffle(&mut rng::stream(seed, "pretrain-split", 0));
    let n_hold =
        ((order.len() as f64 * cfg.holdout_fraction).round() as usize).min(order.len() - 1);
    let holdout: Vec<Sample> = order[..n_hold]
        .iter()
        .map(|&i| stream.base_train[i].clone())
        .collect();
    let mut train: Vec<&Sample> = order[n_hold..]
        .iter()
        .map(|&i| &stream.base_train[i])
        .collect();

    let mut model = BaseModel::new(DenseMatrix::identity(d), stream.prompts.clone())?;
    let mut velocity = DenseMatrix::zeros(d, d);
    let batch_size = cfg.batch_size.max(1);
    let check = |m: &BaseModel| {
        if holdout.is_empty() {
            Ok(1.0)
        } else {
            base_map(m, &stream.base_classes, &holdout)
        }
    };
    let mut reached = 0.0;
    for epoch in 0..cfg.max_epochs.max(1) {
        train.shuffle(&mut rng::stream(seed, "pretrain-epoch", epoch as u64));
        for batch in train.chunks(batch_size) {
            let grad = full_weight_grad(&model, batch, &stream.base_classes)?;
            heavy_ball(&mut model.w, &mut velocity, &grad, cfg.hyper);
        }
        reached = check(&model)?;
        if reached >= cfg.target_ap {
            return Ok(model);
        }
    }
    Err(Error::PretrainStalled {
        target: cfg.target_ap,
        epochs: cfg.max_epochs,
        reached,
    })
}

/// Gradient of the mean logistic loss with respect to `W` itself.
pub fn full_weight_grad(
    model: &BaseModel,
    batch: &[&Sample],
    classes: &[String],
) -> Result<DenseMatrix> {
    let d = model.dim();
    let mut grad = DenseMatrix::zeros(d, d);
    let pairs = (batch.len() * classes.len()) as f64;
    for c in classes {
        let q = model.prompt(c)?;
        let v = model.w.tr_mul_vec(q);
        for s in batch {
            let y = if s.contains(c) { 1.0 } else { 0.0 };
            let g = (sigmoid(dot(&v, &s.features)) - y) / pairs;
            grad.add_outer(g, q, &s.features);
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{generate_stream, GenConfig};

    fn sample(features: Vec<f64>, present: &[&str]) -> Sample {
        Sample {
            id: 0,
            features,
            present: present.iter().map(|s| s.to_string()).collect(),
            domain_id: "x".into(),
        }
    }

    fn two_dim_model() -> BaseModel {
        let prompts = BTreeMap::from([
            ("p".to_string(), vec![1.0, 0.0]),
            ("q".to_string(), vec![0.0, 1.0]),
        ]);
        BaseModel::new(DenseMatrix::identity(2), prompts).unwrap()
    }

    #[test]
    fn identity_scores() {
        let m = two_dim_model();
        assert_eq!(m.score(None, &[1.0, 0.0], "p").unwrap(), 1.0);
        assert!(matches!(
            m.score(None, &[1.0, 0.0], "zz"),
            Err(Error::UnknownClass(_))
        ));
    }

    #[test]
    fn zero_adapter_matches_zero_shot_bits() {
        let m = two_dim_model();
        let ad = Adapter {
            a: DenseMatrix::zeros(1, 2),
            b: DenseMatrix::from_rows(&[&[3.0], &[-2.0]]).unwrap(),
        };
        let x = [0.3, -1.7];
        assert_eq!(
            m.score(Some(&ad), &x, "q").unwrap().to_bits(),
            m.score(None, &x, "q").unwrap().to_bits()
        );
    }

    #[test]
    fn hand_two_dim_adapted_score() {
        // W = I, B = [1, 2]^T, A = [3, -1], so W + BA = [[4, -1], [6, -1]].
        // q = (0, 1), x = (1, 2): q^T (W + BA) x = 6 - 2 = 4.
        let m = two_dim_model();
        let ad = Adapter {
            a: DenseMatrix::from_rows(&[&[3.0, -1.0]]).unwrap(),
            b: DenseMatrix::from_rows(&[&[1.0], &[2.0]]).unwrap(),
        };
        assert_eq!(m.score(Some(&ad), &[1.0, 2.0], "q").unwrap(), 4.0);
    }

    #[test]
    fn saturated_scores_have_vanishing_loss() {
        let m = two_dim_model();
        // B A = 40 * I pushes the right class far up and the other far down.
        let ad = Adapter {
            a: DenseMatrix::from_rows(&[&[40.0, -40.0]]).unwrap(),
            b: DenseMatrix::from_rows(&[&[1.0], &[-1.0]]).unwrap(),
        };
        let batch = [
            sample(vec![1.0, 0.0], &["p"]),
            sample(vec![0.0, 1.0], &["q"]),
        ];
        let refs: Vec<&Sample> = batch.iter().collect();
        let classes = vec!["p".to_string(), "q".to_string()];
        let g = loss_and_grads(&m, &ad.a, &ad.b, &refs, Labels::All(&classes)).unwrap();
        assert!(g.loss < 1e-6, "{}", g.loss);
        assert!(g.a.data().iter().chain(g.b.data()).all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn active_class_masks_other_terms() {
        let m = two_dim_model();
        let a = DenseMatrix::from_rows(&[&[0.3, -0.2]]).unwrap();
        let b = DenseMatrix::from_rows(&[&[0.5], &[0.0]]).unwrap();
        // Class q's code B^T q is zero, so only the q prompt could move B;
        // with p active, the B gradient is q-free and the A gradient follows p.
        let batch = [sample(vec![1.0, 1.0], &["p", "q"])];
        let refs: Vec<&Sample> = batch.iter().collect();
        let active = loss_and_grads(&m, &a, &b, &refs, Labels::Active("p")).unwrap();
        let only_p = loss_and_grads(&m, &a, &b, &refs, Labels::All(&["p".to_string()])).unwrap();
        assert_eq!(active, only_p);
        assert_eq!(active.b.get(1, 0), 0.0);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let m = two_dim_model();
        let a = DenseMatrix::zeros(1, 2);
        let b = DenseMatrix::zeros(2, 1);
        assert!(matches!(
            loss_and_grads(&m, &a, &b, &[], Labels::Active("p")),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn sgd_step_cases() {
        let a = DenseMatrix::from_rows(&[&[1.0, 2.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[&[0.5], &[-0.5]]).unwrap();
        let grads = Grads {
            loss: 0.0,
            a: DenseMatrix::from_rows(&[&[0.1, -0.2]]).unwrap(),
            b: DenseMatrix::from_rows(&[&[1.0], &[1.0]]).unwrap(),
        };
        let mut frozen = AdaptState::new(
            a.clone(),
            b.clone(),
            Hyper {
                lr: 0.0,
                momentum: 0.9,
            },
        );
        frozen.sgd_step(&grads, Which::Both);
        assert_eq!((&frozen.a, &frozen.b), (&a, &b));

        let mut plain = AdaptState::new(
            a.clone(),
            b.clone(),
            Hyper {
                lr: 0.5,
                momentum: 0.0,
            },
        );
        plain.sgd_step(&grads, Which::Both);
        assert_eq!(plain.a.data(), &[1.0 - 0.05, 2.0 + 0.1]);
        assert_eq!(plain.b.data(), &[0.0, -1.0]);

        let mut a_only = AdaptState::new(a.clone(), b.clone(), Hyper::default());
        a_only.sgd_step(&grads, Which::AOnly);
        assert_eq!(a_only.b.to_le_bytes(), b.to_le_bytes());
        assert_ne!(a_only.a, a);
    }

    #[test]
    fn pretraining_is_deterministic_and_reaches_target() {
        let cfg = GenConfig {
            d: 16,
            noise_sigma: 0.0,
            base_samples_per_class: 40,
            samples_per_class: 10,
            ..GenConfig::default()
        };
        let stream = generate_stream(&cfg).unwrap();
        let pcfg = PretrainConfig::default();
        let m1 = pretrain_base(&stream, &pcfg, 3).unwrap();
        let m2 = pretrain_base(&stream, &pcfg, 3).unwrap();
        assert_eq!(m1.fingerprint(), m2.fingerprint());
        let ap = base_map(&m1, &stream.base_classes, &stream.zero_shot_set).unwrap();
        assert!(ap >= pcfg.target_ap, "{ap}");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = two_dim_model();
        m.save(dir.path()).unwrap();
        assert_eq!(BaseModel::load(dir.path()).unwrap(), m);
    }
}
