//! The full detection head: parameters, batch forward/backward and
//! inference.
//!
//! A batch of images is packed into similarity groups. Each group runs
//! similarity → channel maps → tokens → encoder → local head; each image
//! also runs the global branch. Group results are reduced in group order,
//! so the outcome is the same for any thread count.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageRecord;
use crate::encoder::{
    add_into, encoder_backward, encoder_forward, local_head, local_head_backward, EncoderParams, LocalHeadParams,
};
use crate::error::{Error, Result};
use crate::global::{global_backward, global_forward, GlobalParams, Pooling, DEFAULT_HIDDEN};
use crate::losses::{bce, bce_grad, pull_loss, push_loss, total_loss, LossBreakdown, LossWeights, MetricLoss};
use crate::numeric::{matmul, matmul_tn, Tensor};
use crate::simmat::{
    build_groups, build_simmat, expand_channels, expand_channels_backward, face_tokens, face_tokens_backward,
    SimilarityGroup, TokenLayout,
};

/// Which per-face features a loss or branch reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    /// The fixed input features.
    Backbone,
    /// The encoder outputs.
    Encoder,
}

impl FromStr for FeatureSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(FeatureSource::Backbone),
            "encoder" => Ok(FeatureSource::Encoder),
            other => Err(Error::Config(format!(
                "unknown feature source '{other}' (backbone|encoder)"
            ))),
        }
    }
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSource::Backbone => "backbone",
            FeatureSource::Encoder => "encoder",
        })
    }
}

/// Architecture hyper-parameters; fixes every tensor shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub group_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub global_hidden: usize,
    pub token_layout: TokenLayout,
    pub pooling: Pooling,
    pub global_input: FeatureSource,
    /// Tokens come from a projection of the raw features instead of the
    /// similarity maps.
    pub no_sm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 32,
            group_size: 40,
            channels: 8,
            d_model: 128,
            heads: 4,
            d_ff: 256,
            global_hidden: DEFAULT_HIDDEN,
            token_layout: TokenLayout::Sorted,
            pooling: Pooling::Max,
            global_input: FeatureSource::Encoder,
            no_sm: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive".into());
        }
        if self.group_size < 2 {
            return fail(format!("group_size must be at least 2, got {}", self.group_size));
        }
        if self.channels == 0 {
            return fail("channels must be positive".into());
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_ff == 0 || self.global_hidden == 0 {
            return fail("d_ff and global_hidden must be positive".into());
        }
        Ok(())
    }

    fn token_width(&self) -> usize {
        if self.no_sm {
            self.feature_dim
        } else {
            self.channels * self.group_size
        }
    }

    fn global_dim(&self) -> usize {
        match self.global_input {
            FeatureSource::Backbone => self.feature_dim,
            FeatureSource::Encoder => self.d_model,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub expand_w: Tensor,
    pub expand_b: Tensor,
    /// `(C·n) × d_model`, or `D × d_model` without the similarity branch.
    pub token_proj: Tensor,
    pub encoder: EncoderParams,
    pub local: LocalHeadParams,
    pub global: GlobalParams,
}

impl ModelParams {
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        Ok(ModelParams {
            config: config.clone(),
            expand_w: Tensor::filled(&[c], 1.0),
            expand_b: Tensor::zeros(&[c]),
            token_proj: Tensor::xavier_uniform(config.token_width(), config.d_model, rng),
            encoder: EncoderParams::init(config.d_model, config.heads, config.d_ff, rng)?,
            local: LocalHeadParams::init(config.d_model, rng),
            global: GlobalParams::init(config.global_dim(), config.global_hidden, rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|(_, t)| t.fill(0.0));
        z
    }

    /// Every parameter tensor under a stable, unique name.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("expand.w".into(), &self.expand_w),
            ("expand.b".into(), &self.expand_b),
            ("token.proj".into(), &self.token_proj),
        ];
        out.extend(
            self.encoder
                .tensors()
                .into_iter()
                .map(|(n, t)| (format!("encoder.{n}"), t)),
        );
        out.push(("local.w".into(), &self.local.weight));
        out.push(("local.b".into(), &self.local.bias));
        out.extend(
            self.global
                .tensors()
                .into_iter()
                .map(|(n, t)| (format!("global.{n}"), t)),
        );
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("expand.w".into(), &mut self.expand_w),
            ("expand.b".into(), &mut self.expand_b),
            ("token.proj".into(), &mut self.token_proj),
        ];
        out.extend(
            self.encoder
                .tensors_mut()
                .into_iter()
                .map(|(n, t)| (format!("encoder.{n}"), t)),
        );
        out.push(("local.w".into(), &mut self.local.weight));
        out.push(("local.b".into(), &mut self.local.bias));
        out.extend(
            self.global
                .tensors_mut()
                .into_iter()
                .map(|(n, t)| (format!("global.{n}"), t)),
        );
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    /// Flattened copy of every scalar, in [`tensors`](Self::tensors) order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape(format!(
                "expected {} scalars, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut off = 0;
        for (_, t) in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Loss weights plus the switches that remove loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Objective {
    pub weights: LossWeights,
    pub no_global: bool,
    pub no_pull: bool,
    pub no_push: bool,
    pub metric_input: FeatureSource,
}

impl Default for Objective {
    fn default() -> Self {
        Objective {
            weights: LossWeights::default(),
            no_global: false,
            no_pull: false,
            no_push: false,
            metric_input: FeatureSource::Encoder,
        }
    }
}

/// Forward activations of one group.
struct GroupForward {
    encoded: Tensor,
    face_scores: Vec<f64>,
    tokens_cache: Option<crate::simmat::TokenCache>,
    maps_len: usize,
    s: Option<Tensor>,
    enc_cache: crate::encoder::EncoderCache,
}

fn forward_group(p: &ModelParams, group: &SimilarityGroup) -> Result<GroupForward> {
    let cfg = &p.config;
    let n = group.group_size;
    if n != cfg.group_size {
        return Err(Error::Shape(format!(
            "group has {n} slots, model expects {}",
            cfg.group_size
        )));
    }
    if group.features.cols() != cfg.feature_dim {
        return Err(Error::Shape(format!(
            "features have dimension {}, model expects {}",
            group.features.cols(),
            cfg.feature_dim
        )));
    }
    let mask = &group.mask;
    let (tokens, tokens_cache, maps_len, s) = if cfg.no_sm {
        let mut t = matmul(
            group.features.data(),
            p.token_proj.data(),
            n,
            cfg.feature_dim,
            cfg.d_model,
        );
        for i in (0..n).filter(|&i| !mask[i]) {
            t[i * cfg.d_model..(i + 1) * cfg.d_model].fill(0.0);
        }
        (Tensor::from_vec(&[n, cfg.d_model], t)?, None, 0, None)
    } else {
        let s = build_simmat(group)?;
        let maps = expand_channels(&s, mask, p.expand_w.data(), p.expand_b.data())?;
        let (tokens, cache) = face_tokens(&maps, mask, &p.token_proj, cfg.token_layout)?;
        (tokens, Some(cache), maps.maps.len(), Some(s))
    };
    let (encoded, enc_cache) = encoder_forward(&tokens, mask, &p.encoder)?;
    let mut face_scores = vec![0.0; n];
    for i in (0..n).filter(|&i| mask[i]) {
        face_scores[i] = local_head(encoded.row(i), &p.local)?;
    }
    Ok(GroupForward {
        encoded,
        face_scores,
        tokens_cache,
        maps_len,
        s,
        enc_cache,
    })
}

fn image_rows<'a>(
    group: &'a SimilarityGroup,
    encoded: &'a Tensor,
    src: FeatureSource,
    first: usize,
    count: usize,
) -> Vec<&'a [f64]> {
    (first..first + count)
        .map(|i| match src {
            FeatureSource::Backbone => group.features.row(i),
            FeatureSource::Encoder => encoded.row(i),
        })
        .collect()
}

/// Sums (not means) contributed by one group, plus its gradient.
struct GroupResult {
    local_sum: f64,
    global_sum: f64,
    pull: f64,
    push: f64,
    grads: Option<ModelParams>,
    face_scores: Vec<f64>,
    image_scores: Vec<(usize, f64)>,
}

fn metric_terms(group: &SimilarityGroup, encoded: &Tensor, obj: &Objective) -> Result<(MetricLoss, MetricLoss)> {
    let feats = match obj.metric_input {
        FeatureSource::Backbone => &group.features,
        FeatureSource::Encoder => encoded,
    };
    let zero = || MetricLoss {
        value: 0.0,
        grad: vec![0.0; feats.len()],
        terms: 0,
    };
    if obj.no_pull && obj.no_push {
        return Ok((zero(), zero()));
    }
    let pull = if obj.no_pull {
        Ok(zero())
    } else {
        pull_loss(feats, &group.labels, &group.mask)
    };
    let push = if obj.no_push {
        Ok(zero())
    } else {
        push_loss(feats, &group.labels, &group.mask)
    };
    match (pull, push) {
        (Ok(a), Ok(b)) => Ok((a, b)),
        (Err(Error::DegeneratePrototype(msg)), _) | (_, Err(Error::DegeneratePrototype(msg))) => {
            warn!("skipping metric losses for a group: {msg}");
            Ok((zero(), zero()))
        }
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

struct Scales {
    local: f64,
    global: f64,
}

fn run_group(
    p: &ModelParams,
    group: &SimilarityGroup,
    image_labels: &[u8],
    obj: &Objective,
    scales: &Scales,
    want_grad: bool,
) -> Result<GroupResult> {
    let cfg = &p.config;
    let n = group.group_size;
    let dm = cfg.d_model;
    let mask = &group.mask;
    let fwd = forward_group(p, group)?;
    let mut local_sum = 0.0;
    for i in (0..n).filter(|&i| mask[i]) {
        local_sum += bce(fwd.face_scores[i], group.labels[i]);
    }
    let (pull, push) = metric_terms(group, &fwd.encoded, obj)?;
    let mut global_sum = 0.0;
    let mut image_scores = Vec::with_capacity(group.images.len());
    let mut global_caches = Vec::with_capacity(group.images.len());
    for &(b, first, count) in &group.images {
        let rows = image_rows(group, &fwd.encoded, cfg.global_input, first, count);
        let cache = global_forward(&rows, &p.global, cfg.pooling)?;
        global_sum += bce(cache.y_hat, image_labels[b]);
        image_scores.push((b, cache.y_hat));
        global_caches.push(cache);
    }
    let mut result = GroupResult {
        local_sum,
        global_sum,
        pull: pull.value,
        push: push.value,
        grads: None,
        face_scores: fwd.face_scores.clone(),
        image_scores,
    };
    if !want_grad {
        return Ok(result);
    }

    let mut g = p.zeros_like();
    let mut d_enc = vec![0.0; n * dm];
    for i in (0..n).filter(|&i| mask[i]) {
        let y = fwd.face_scores[i];
        let dy = obj.weights.local * scales.local * bce_grad(y, group.labels[i]);
        let d_f = local_head_backward(fwd.encoded.row(i), y, dy, &p.local, &mut g.local);
        add_into(&mut d_enc[i * dm..(i + 1) * dm], &d_f);
    }
    if obj.metric_input == FeatureSource::Encoder {
        for (d, (a, b)) in d_enc.iter_mut().zip(pull.grad.iter().zip(&push.grad)) {
            *d += obj.weights.pull * a + obj.weights.push * b;
        }
    }
    if !obj.no_global {
        for (cache, &(b, first, _)) in global_caches.iter().zip(&group.images) {
            let dy = scales.global * bce_grad(cache.y_hat, image_labels[b]);
            let d_faces = global_backward(cache, &p.global, dy, &mut g.global);
            if cfg.global_input == FeatureSource::Encoder {
                for (k, row) in d_faces.iter().enumerate() {
                    add_into(&mut d_enc[(first + k) * dm..(first + k + 1) * dm], row);
                }
            }
        }
    }
    let d_tokens = encoder_backward(&fwd.enc_cache, mask, &p.encoder, &d_enc, &mut g.encoder);
    if cfg.no_sm {
        let d_proj = matmul_tn(group.features.data(), &d_tokens, n, cfg.feature_dim, dm);
        add_into(g.token_proj.data_mut(), &d_proj);
    } else {
        let cache = fwd.tokens_cache.as_ref().expect("similarity branch caches tokens");
        let s = fwd.s.as_ref().expect("similarity branch keeps S");
        let (d_proj, d_maps) = face_tokens_backward(cache, mask, &p.token_proj, &d_tokens, fwd.maps_len);
        add_into(g.token_proj.data_mut(), &d_proj);
        let eg = expand_channels_backward(s, mask, p.expand_w.data(), &d_maps);
        add_into(g.expand_w.data_mut(), &eg.d_weight);
        add_into(g.expand_b.data_mut(), &eg.d_bias);
    }
    result.grads = Some(g);
    Ok(result)
}

/// Loss, gradient and predictions for one batch of images.
pub struct BatchResult {
    pub breakdown: LossBreakdown,
    pub grads: Option<ModelParams>,
    /// Per batch image, one score per face.
    pub face_scores: Vec<Vec<f64>>,
    pub image_scores: Vec<f64>,
}

pub fn run_batch(p: &ModelParams, batch: &[ImageRecord], obj: &Objective, want_grad: bool) -> Result<BatchResult> {
    obj.weights.validate()?;
    let groups = build_groups(batch, p.config.group_size)?;
    let n_faces: usize = groups.iter().map(|g| g.live()).sum();
    if n_faces == 0 {
        return Err(Error::Invalid("batch has no faces".into()));
    }
    let scales = Scales {
        local: 1.0 / n_faces as f64,
        global: 1.0 / batch.len() as f64,
    };
    let image_labels: Vec<u8> = batch.iter().map(|im| im.label).collect();
    let results: Vec<Result<GroupResult>> = groups
        .par_iter()
        .map(|g| run_group(p, g, &image_labels, obj, &scales, want_grad))
        .collect();
    let mut face_scores: Vec<Vec<f64>> = batch.iter().map(|im| vec![0.0; im.faces.len()]).collect();
    let mut image_scores = vec![0.0; batch.len()];
    let (mut local, mut global, mut pull, mut push) = (0.0, 0.0, 0.0, 0.0);
    let mut grads = want_grad.then(|| p.zeros_like());
    for (gi, (group, r)) in groups.iter().zip(results).enumerate() {
        let r = r.map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("group {gi}: {m}")),
            other => other,
        })?;
        local += r.local_sum;
        global += r.global_sum;
        pull += r.pull;
        push += r.push;
        for (slot, m) in group.members.iter().enumerate() {
            if let Some(m) = m {
                face_scores[m.batch_index][m.face_index] = r.face_scores[slot];
            }
        }
        for (b, y) in r.image_scores {
            image_scores[b] = y;
        }
        if let (Some(acc), Some(g)) = (grads.as_mut(), r.grads.as_ref()) {
            acc.add_assign(g);
        }
    }
    let l_local = local * scales.local;
    let l_global = if obj.no_global { 0.0 } else { global * scales.global };
    let breakdown = total_loss(l_global, l_local, pull, push, obj.weights)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("batch loss is {}", breakdown.total)));
    }
    Ok(BatchResult {
        breakdown,
        grads,
        face_scores,
        image_scores,
    })
}

pub struct Predictions {
    pub face_scores: Vec<Vec<f64>>,
    pub image_scores: Vec<f64>,
}

/// Scores every face and image; images are packed into groups in order.
pub fn predict(p: &ModelParams, images: &[ImageRecord]) -> Result<Predictions> {
    let r = run_batch(p, images, &Objective::default(), false)?;
    Ok(Predictions {
        face_scores: r.face_scores,
        image_scores: r.image_scores,
    })
}

/// Encoder outputs of one group, for inspecting the learned similarity.
pub fn encode_group(p: &ModelParams, group: &SimilarityGroup) -> Result<Tensor> {
    Ok(forward_group(p, group)?.encoded)
}
