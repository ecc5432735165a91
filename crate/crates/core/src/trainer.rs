//! Adam, the epoch loop, checkpoints and the epoch log.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{accuracy, roc_auc, score_dataset, DEFAULT_THRESHOLD};
use crate::losses::LossBreakdown;
use crate::model::{run_batch, ModelConfig, ModelParams, Objective};
use crate::numeric::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = shapes.into_iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState { v: m.clone(), m, t: 0 }
    }

    pub fn for_model(p: &ModelParams) -> Self {
        Self::new(p.tensors().into_iter().map(|(_, t)| t))
    }

    /// One Adam update. Every gradient is checked for finiteness before any
    /// parameter moves; the error names the offending tensor.
    pub fn step(
        &mut self,
        params: Vec<(String, &mut Tensor)>,
        grads: Vec<(String, &Tensor)>,
        cfg: &AdamConfig,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((name, p), (_, g)) in params.iter().zip(&grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "adam: gradient of {name} has shape {:?}",
                    g.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (k, ((_, p), (_, g))) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` down to `max_norm` if its global L2 norm exceeds it.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|g| g * g)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for (_, t) in grads.tensors_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub objective: Objective,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_images: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub threads: usize,
    /// Share of the training images held out for the epoch log when no
    /// separate validation set is given.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            objective: Objective::default(),
            adam: AdamConfig::default(),
            epochs: 10,
            batch_images: 16,
            clip_norm: 5.0,
            seed: 0,
            threads: 1,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.weights.validate()?;
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_images == 0 {
            return fail("epochs and batch_images must be positive");
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return fail("learning rate must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || !(self.adam.eps > 0.0) {
            return fail("adam betas must lie in [0, 1) and eps must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return fail("clip_norm must be positive");
        }
        if self.threads == 0 {
            return fail("threads must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail("val_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_face_auc: f64,
    pub val_image_acc: f64,
}

pub const LOG_HEADER: &str = "epoch,L_total,L_global,L_local,L_pull,L_push,val_face_auc,val_image_acc";

pub fn format_log(records: &[EpochRecord]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in records {
        let l = &r.loss;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.epoch, l.total, l.global, l.local, l.pull, l.push, r.val_face_auc, r.val_image_acc
        );
    }
    s
}

/// Paths written by a run whose final checkpoint is `out`.
pub fn epoch_checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.epoch{epoch:03}.ckpt"))
}

pub fn log_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.log.csv"))
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub adam: AdamState,
    pub history: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Splits off the last `fraction` of the images after a seeded shuffle.
pub fn holdout_split(ds: &Dataset, fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let mut idx: Vec<usize> = (0..ds.images.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED));
    let n_val = ((ds.images.len() as f64) * fraction).round() as usize;
    let (train_idx, val_idx) = idx.split_at(ds.images.len() - n_val);
    let pick = |ix: &[usize]| Dataset {
        feature_dim: ds.feature_dim,
        images: ix.iter().map(|&i| ds.images[i].clone()).collect(),
        split_tag: ds.split_tag.clone(),
    };
    (pick(train_idx), pick(val_idx))
}

fn val_metrics(params: &ModelParams, val: &Dataset) -> Result<(f64, f64)> {
    if val.images.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let scored = score_dataset(params, val)?;
    let mut fs = Vec::new();
    let mut fl = Vec::new();
    for f in scored.images.iter().flat_map(|im| &im.faces) {
        fs.push(f.score.unwrap_or(f64::NAN));
        fl.push(f.label);
    }
    let auc = roc_auc(&fs, &fl).unwrap_or(f64::NAN);
    let is: Vec<f64> = scored.images.iter().map(|im| im.score.unwrap_or(f64::NAN)).collect();
    let il: Vec<u8> = scored.images.iter().map(|im| im.label).collect();
    Ok((auc, accuracy(&is, &il, DEFAULT_THRESHOLD)?))
}

/// Trains from scratch. With `out`, writes a checkpoint after every epoch,
/// the final checkpoint at `out` and the CSV epoch log next to it.
pub fn train(train_ds: &Dataset, val_ds: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_ds.validate()?;
    if train_ds.feature_dim != cfg.model.feature_dim {
        return Err(Error::Config(format!(
            "data has feature_dim {}, model expects {}",
            train_ds.feature_dim, cfg.model.feature_dim
        )));
    }
    if train_ds.images.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(&cfg.model, &mut rng)?;
    let mut adam = AdamState::for_model(&params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::new();
    let mut order: Vec<usize> = (0..train_ds.images.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_images).enumerate() {
            let batch: Vec<_> = chunk.iter().map(|&i| train_ds.images[i].clone()).collect();
            let r = pool
                .install(|| run_batch(&params, &batch, &cfg.objective, true))
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, batch {bi}: {m}")),
                    other => other,
                })?;
            let mut grads = r.grads.expect("gradients requested");
            let norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if norm > cfg.clip_norm {
                debug!("epoch {epoch} batch {bi}: clipped gradient norm {norm:.3}");
            }
            adam.step(params.tensors_mut(), grads.tensors(), &cfg.adam)?;
            let b = r.breakdown;
            for (s, v) in sums.iter_mut().zip([b.total, b.global, b.local, b.pull, b.push]) {
                *s += v;
            }
            batches += 1;
        }
        let inv = 1.0 / batches as f64;
        let loss = LossBreakdown {
            total: sums[0] * inv,
            global: sums[1] * inv,
            local: sums[2] * inv,
            pull: sums[3] * inv,
            push: sums[4] * inv,
            weights: cfg.objective.weights,
        };
        let (val_face_auc, val_image_acc) = pool.install(|| val_metrics(&params, val_ds))?;
        info!(
            "epoch {epoch}: loss {:.5} (global {:.4}, local {:.4}, pull {:.4}, push {:.4}) val face AUC {val_face_auc:.4} image ACC {val_image_acc:.4}",
            loss.total, loss.global, loss.local, loss.pull, loss.push
        );
        history.push(EpochRecord {
            epoch,
            loss,
            val_face_auc,
            val_image_acc,
        });
        if let Some(out) = out {
            let ck = Checkpoint {
                config: cfg.clone(),
                epoch,
                params: params.clone(),
                adam: adam.clone(),
            };
            let path = epoch_checkpoint_path(out, epoch);
            save_checkpoint(&ck, &path)?;
            checkpoints.push(path);
            let log = log_path(out);
            fs::write(&log, format_log(&history)).map_err(|e| Error::io(&log, e))?;
        }
    }
    if let Some(out) = out {
        let ck = Checkpoint {
            config: cfg.clone(),
            epoch: cfg.epochs,
            params: params.clone(),
            adam: adam.clone(),
        };
        save_checkpoint(&ck, out)?;
    }
    Ok(TrainOutcome {
        params,
        adam,
        history,
        checkpoints,
    })
}

pub const MAGIC: &[u8; 4] = b"FILT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub params: ModelParams,
    pub adam: AdamState,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: TrainConfig,
    epoch: usize,
    adam_t: u64,
    tensors: Vec<TensorEntry>,
}

fn named_tensors(ck: &Checkpoint) -> Vec<(String, &Tensor)> {
    let mut out = ck.params.tensors();
    let names: Vec<String> = out.iter().map(|(n, _)| n.clone()).collect();
    out.extend(names.iter().zip(&ck.adam.m).map(|(n, t)| (format!("adam.m.{n}"), t)));
    out.extend(names.iter().zip(&ck.adam.v).map(|(n, t)| (format!("adam.v.{n}"), t)));
    out
}

/// Serialises a checkpoint: magic, version, manifest length, JSON
/// manifest, then little-endian `f32` payloads in manifest order.
pub fn checkpoint_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let tensors = named_tensors(ck);
    let manifest = Manifest {
        config: ck.config.clone(),
        epoch: ck.epoch,
        adam_t: ck.adam.t,
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in tensors {
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(ck)?).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| {
        Error::Checkpoint(format!(
            "truncated: need {n} bytes at offset {pos}, file has {}",
            bytes.len()
        ))
    })?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic (not a checkpoint file)".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Checkpoint("manifest length overflows".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(take(bytes, &mut pos, len)?).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    manifest.config.validate()?;
    // Shapes come from the config; the manifest must agree with them.
    let mut params = ModelParams::init(&manifest.config.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut adam = AdamState::for_model(&params);
    adam.t = manifest.adam_t;
    let expected_len = params.tensors().len() * 3;
    if manifest.tensors.len() != expected_len {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, config implies {expected_len}",
            manifest.tensors.len()
        )));
    }
    let mut targets: Vec<(String, &mut Tensor)> = params.tensors_mut();
    let names: Vec<String> = targets.iter().map(|(n, _)| n.clone()).collect();
    targets.extend(
        names
            .iter()
            .zip(adam.m.iter_mut())
            .map(|(n, t)| (format!("adam.m.{n}"), t)),
    );
    targets.extend(
        names
            .iter()
            .zip(adam.v.iter_mut())
            .map(|(n, t)| (format!("adam.v.{n}"), t)),
    );
    for (entry, (name, t)) in manifest.tensors.iter().zip(targets) {
        if entry.name != name {
            return Err(Error::Checkpoint(format!(
                "expected tensor {name}, found {}",
                entry.name
            )));
        }
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: unsupported dtype {}",
                entry.dtype
            )));
        }
        if entry.shape != t.shape() {
            return Err(Error::Shape(format!(
                "tensor {name} has shape {:?} in the file but {:?} under its config",
                entry.shape,
                t.shape()
            )));
        }
        let raw = take(bytes, &mut pos, 4 * t.len())?;
        for (v, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *v = f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
        }
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(Checkpoint {
        config: manifest.config,
        epoch: manifest.epoch,
        params,
        adam,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}
