//! Named finite-difference checks for every differentiable piece of the
//! model, each evaluated at freshly drawn random points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::{BBox, FaceRecord, ImageRecord};
use crate::encoder::{
    encoder_backward, encoder_forward, local_head, local_head_backward, EncoderParams, LocalHeadParams,
};
use crate::error::{Error, Result};
use crate::global::{global_backward, global_forward, GlobalParams, Pooling};
use crate::losses::{bce, bce_grad, pull_loss, push_loss, total_loss, LossWeights};
use crate::model::{run_batch, FeatureSource, ModelConfig, ModelParams, Objective};
use crate::numeric::{cosine_sim, cosine_sim_grad, grad_check, DiffOp, Tensor, DEFAULT_FD_STEP};
use crate::simmat::{
    expand_channels, expand_channels_backward, face_tokens, face_tokens_backward, SimTensor, TokenLayout,
};

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const DEFAULT_POINTS: usize = 10;

type Forward = Box<dyn Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync>;
type Backward = Box<dyn Fn(&[f64], &[f64]) -> Result<Vec<f64>> + Send + Sync>;

struct FnOp {
    name: &'static str,
    f: Forward,
    b: Backward,
}

impl DiffOp for FnOp {
    fn name(&self) -> &str {
        self.name
    }
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        (self.f)(x)
    }
    fn backward(&self, x: &[f64], dy: &[f64]) -> Result<Vec<f64>> {
        (self.b)(x, dy)
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize, min_live: usize) -> Vec<bool> {
    let live = rng.random_range(min_live..=n);
    (0..n).map(|i| i < live).collect()
}

type Builder = fn(&mut ChaCha8Rng) -> Result<(FnOp, Vec<f64>)>;

fn cosine(rng: &mut ChaCha8Rng) -> Result<(FnOp, Vec<f64>)> {
    let d = rng.random_range(2..8);
    let x = uniform(rng, 2 * d, -1.0, 1.0);
    let op = FnOp {
        name: "cosine",
        f: Box::new(move |x| Ok(vec![cosine_sim(&x[..d], &x[d..])?])),
        b: Box::new(move |x, dy| {
            let (gu, gv) = cosine_sim_grad(&x[..d], &x[d..])?;
            Ok(gu.iter().chain(&gv).map(|g| g * dy[0]).collect())
        }),
    };
    Ok((op, x))
}

fn expand(rng: &mut ChaCha8Rng) -> Result<(FnOp, Vec<f64>)> {
    let n = rng.random_range(2..6);
    let c = rng.random_range(1..4);
    let mask = random_mask(rng, n, 1);
    let mut x = uniform(rng, n * n, -1.0, 1.0);
    x.extend(uniform(rng, 2 * c, -1.5, 1.5));
    let split = move |x: &[f64]| -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let s = Tensor::from_vec(&[n, n], x[..n * n].to_vec())?;
        Ok((s, x[n * n..n * n + c].to_vec(), x[n * n + c..].to_vec()))
    };
    let m2 = mask.clone();
    let op = FnOp {
        name: "channel-expansion",
        f: Box::new(move |x| {
            let (s, w, b) = split(x)?;
            Ok(expand_channels(&s, &mask, &w, &b)?.maps)
        }),
        b: Box::new(move |x, dy| {
            let (s, w, _) = split(x)?;
            let g = expand_channels_backward(&s, &m2, &w, dy);
            Ok(g.d_s.into_iter().chain(g.d_weight).chain(g.d_bias).collect())
        }),
    };
    Ok((op, x))
}

fn tokens_with(rng: &mut ChaCha8Rng, layout: TokenLayout, name: &'static str) -> Result<(FnOp, Vec<f64>)> {
    let n = rng.random_range(2..6);
    let c = rng.random_range(1..3);
    let dm = rng.random_range(2..5);
    let mask = random_mask(rng, n, 1);
    let maps_len = c * n * n;
    let mut x = uniform(rng, maps_len, -1.0, 1.0);
    x.extend(uniform(rng, c * n * dm, -1.0, 1.0));
    let split = move |x: &[f64]| -> Result<(SimTensor, Tensor)> {
        let t = SimTensor {
            channels: c,
            n,
            maps: x[..maps_len].to_vec(),
        };
        Ok((t, Tensor::from_vec(&[c * n, dm], x[maps_len..].to_vec())?))
    };
    let m2 = mask.clone();
    let op = FnOp {
        name,
        f: Box::new(move |x| {
            let (t, proj) = split(x)?;
            Ok(face_tokens(&t, &mask, &proj, layout)?.0.into_data())
        }),
        b: Box::new(move |x, dy| {
            let (t, proj) = split(x)?;
            let (_, cache) = face_tokens(&t, &m2, &proj, layout)?;
            let (d_proj, d_maps) = face_tokens_backward(&cache, &m2, &proj, dy, maps_len);
            Ok(d_maps.into_iter().chain(d_proj).collect())
        }),
    };
    Ok((op, x))
}

fn tokens_sorted(rng: &mut ChaCha8Rng) -> Result<(FnOp, Vec<f64>)> {
    tokens_with(rng, TokenLayout::Sorted, "token-projection")
}

fn tokens_slot(rng: &mut ChaCha8Rng) -> Result<(FnOp, Vec<f64>)> {
    tokens_with(rng, TokenLayout::Slot, "token-projection-slot")
}

fn set_flat(template: &EncoderParams, flat: &[f64]) -> EncoderParams {
    let mut p = template.clone();
    let mut off = 0;
    for (_, t) in p.tensors_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    p
}

fn encoder_block(rng: &mut ChaCha8Rng) -> Result<(FnOp, Vec<f64>)> {
    // d_model = 2 is avoided: layer norm of a 2-vector is ±(1, −1) up to
    // the epsilon, so true gradients fall below finite-difference noise.
    let heads = rng.random_range(1..3);
    let d = if heads == 1 {
        rng.random_range(3..5)
    } else {
        2 * rng.random_range(2..4)
    };
    let d_ff = rng.random_range(2..7);
    let n = rng.random_range(2..5);
    let mask = random_mask(rng, n, 1);
    let mut template = EncoderParams::init(d, heads, d_ff, rng)?;
    // non-trivial layer-norm affine parameters
    for (_, t) in template.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let mut x = uniform(rng, n * d, -1.0, 1.0);
    x.extend(template.tensors().iter().flat_map(|(_, t)| t.data().to_vec()));
    let nd = n * d;
    let (t2, m2) = (template.clone(), mask.clone());
    let op = FnOp {
        name: "encoder-block",
        f: Box::new(move |x| {
            let p = set_flat(&template, &x[nd..]);
            let tokens = Tensor::from_vec(&[n, d], x[..nd].to_vec())?;
            Ok(encoder_forward(&tokens, &mask, &p)?.0.into_data())
        }),
        b: Box::new(move |x, dy| {
            let p = set_flat(&t2, &x[nd..]);
            let tokens = Tensor::from_vec(&[n, d], x[..nd].to_vec())?;
            let (_, cache) = encoder_forward(&tokens, &m2, &p)?;
            let mut grads = p.zeros_like();
            let d_tokens = encoder_backward(&cache, &m2, &p, dy, &mut grads);
            Ok(d_tokens
                .into_iter()
                .chain(grads.tensors().iter().flat_map(|(_, t)| t.data().to_vec()))
                .collect())
        }),
    };
    Ok((op, x))
}

fn local(rng: &mut ChaCha8Rng) -> Result<(FnOp, Vec<f64>)> {
    let d = rng.random_range(1..6);
    let x = uniform(rng, 2 * d + 1, -1.0, 1.0);
    let split = move |x: &[f64]| -> Result<(Vec<f64>, LocalHeadParams)> {
        Ok((
            x[..d].to_vec(),
            LocalHeadParams {
                weight: Tensor::from_vec(&[d, 1], x[d..2 * d].to_vec())?,
                bias: Tensor::from_vec(&[1], vec![x[2 * d]])?,
            },
        ))
    };
    let op = FnOp {
        name: "local-head",
        f: Box::new(move |x| {
            let (f, p) = split(x)?;
            Ok(vec![local_head(&f, &p)?])
        }),
        b: Box::new(move |x, dy| {
            let (f, p) = split(x)?;
            let y = local_head(&f, &p)?;
            let mut g = LocalHeadParams {
                weight: Tensor::zeros(&[d, 1]),
                bias: Tensor::zeros(&[1]),
            };
            let df = local_head_backward(&f, y, dy[0], &p, &mut g);
            Ok(df
                .into_iter()
                .chain(g.weight.into_data())
                .chain(g.bias.into_data())
                .collect())
        }),
    };
    Ok((op, x))
}

fn global_with(rng: &mut ChaCha8Rng, pooling: Pooling, name: &'static str) -> Result<(FnOp, Vec<f64>)> {
    let d = rng.random_range(2..5);
    let h = rng.random_range(2..6);
    let m = rng.random_range(1..5);
    let template = GlobalParams::init(d, h, rng);
    let mut x = uniform(rng, m * d, -1.0, 1.0);
    x.extend(template.tensors().iter().flat_map(|(_, t)| t.data().to_vec()));
    let md = m * d;
    let split = move |x: &[f64], template: &GlobalParams| {
        let mut p = template.clone();
        let mut off = md;
        for (_, t) in p.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&x[off..off + n]);
            off += n;
        }
        let faces: Vec<Vec<f64>> = x[..md].chunks(d).map(<[f64]>::to_vec).collect();
        (faces, p)
    };
    let t2 = template.clone();
    let op = FnOp {
        name,
        f: Box::new(move |x| {
            let (faces, p) = split(x, &template);
            let rows: Vec<&[f64]> = faces.iter().map(Vec::as_slice).collect();
            Ok(vec![global_forward(&rows, &p, pooling)?.y_hat])
        }),
        b: Box::new(move |x, dy| {
            let (faces, p) = split(x, &t2);
            let rows: Vec<&[f64]> = faces.iter().map(Vec::as_slice).collect();
            let cache = global_forward(&rows, &p, pooling)?;
            let mut g = GlobalParams {
                conv_w: Tensor::zeros(p.conv_w.shape()),
                conv_b: Tensor::zeros(p.conv_b.shape()),
                fc1_w: Tensor::zeros(p.fc1_w.shape()),
                fc1_b: Tensor::zeros(p.fc1_b.shape()),
                fc2_w: Tensor::zeros(p.fc2_w.shape()),
                fc2_b: Tensor::zeros(p.fc2_b.shape()),
            };
            let d_faces = global_backward(&cache, &p, dy[0], &mut g);
            Ok(d_faces
                .into_iter()
                .flatten()
                .chain(g.tensors().iter().flat_map(|(_, t)| t.data().to_vec()))
                .collect())
        }),
    };
    Ok((op, x))
}

fn global_mean(rng: &mut ChaCha8Rng) -> Result<(FnOp, Vec<f64>)> {
    global_with(rng, Pooling::Mean, "global-head")
}

fn global_max(rng: &mut ChaCha8Rng) -> Result<(FnOp, Vec<f64>)> {
    global_with(rng, Pooling::Max, "global-head-max")
}

/// Random group with at least two members of each class.
fn metric_group(rng: &mut ChaCha8Rng) -> (usize, usize, Vec<u8>, Vec<bool>, Vec<f64>) {
    let d = rng.random_range(2..6);
    let n = rng.random_range(4..8);
    let mask = random_mask(rng, n, 4);
    let live = mask.iter().filter(|&&m| m).count();
    let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
    // a lone member sits on its own prototype: its gradient is exactly zero
    // and the finite difference returns pure rounding noise
    labels[..2].fill(0);
    labels[live - 2..live].fill(1);
    let x = uniform(rng, n * d, -1.0, 1.0);
    (n, d, labels, mask, x)
}

fn metric(rng: &mut ChaCha8Rng, push: bool) -> Result<(FnOp, Vec<f64>)> {
    let (n, d, labels, mask, x) = metric_group(rng);
    let eval = move |x: &[f64]| {
        let t = Tensor::from_vec(&[n, d], x.to_vec())?;
        if push {
            push_loss(&t, &labels, &mask)
        } else {
            pull_loss(&t, &labels, &mask)
        }
    };
    let eval = std::sync::Arc::new(eval);
    let e2 = eval.clone();
    let op = FnOp {
        name: if push { "push-loss" } else { "pull-loss" },
        f: Box::new(move |x| Ok(vec![eval(x)?.value])),
        b: Box::new(move |x, dy| Ok(e2(x)?.grad.into_iter().map(|g| g * dy[0]).collect())),
    };
    Ok((op, x))
}

fn pull(rng: &mut ChaCha8Rng) -> Result<(FnOp, Vec<f64>)> {
    metric(rng, false)
}

fn push(rng: &mut ChaCha8Rng) -> Result<(FnOp, Vec<f64>)> {
    metric(rng, true)
}

fn bce_op(rng: &mut ChaCha8Rng) -> Result<(FnOp, Vec<f64>)> {
    let n = rng.random_range(1..6);
    let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
    let x = uniform(rng, n, 0.02, 0.98);
    let l2 = labels.clone();
    let op = FnOp {
        name: "bce",
        f: Box::new(move |x| Ok(x.iter().zip(&labels).map(|(&p, &y)| bce(p, y)).collect())),
        b: Box::new(move |x, dy| {
            Ok(x.iter()
                .zip(&l2)
                .zip(dy)
                .map(|((&p, &y), g)| g * bce_grad(p, y))
                .collect())
        }),
    };
    Ok((op, x))
}

fn total(rng: &mut ChaCha8Rng) -> Result<(FnOp, Vec<f64>)> {
    let w = LossWeights::default();
    let x = uniform(rng, 4, 0.0, 2.0);
    let op = FnOp {
        name: "total-loss",
        f: Box::new(move |x| Ok(vec![total_loss(x[0], x[1], x[2], x[3], w)?.total])),
        b: Box::new(move |_, dy| Ok(vec![dy[0], dy[0] * w.local, dy[0] * w.pull, dy[0] * w.push])),
    };
    Ok((op, x))
}

fn tiny_batch(rng: &mut ChaCha8Rng, dim: usize) -> Vec<ImageRecord> {
    (0..rng.random_range(2..4))
        .map(|i| {
            let k = rng.random_range(2..4);
            let faces: Vec<FaceRecord> = (0..k)
                .map(|j| FaceRecord {
                    face_id: format!("g{i}-f{j}"),
                    bbox: BBox {
                        x: 0.0,
                        y: 0.0,
                        w: 1.0,
                        h: 1.0,
                    },
                    label: u8::from(j > 0 && rng.random_bool(0.5)),
                    feature: uniform(rng, dim, -1.0, 1.0),
                    track_id: None,
                    score: None,
                })
                .collect();
            let label = faces.iter().map(|f| f.label).max().unwrap_or(0);
            ImageRecord {
                image_id: format!("g{i}"),
                label,
                faces,
                score: None,
            }
        })
        .collect()
}

fn model_with(
    rng: &mut ChaCha8Rng,
    name: &'static str,
    no_sm: bool,
    inputs: FeatureSource,
) -> Result<(FnOp, Vec<f64>)> {
    let cfg = ModelConfig {
        feature_dim: 3,
        group_size: 6,
        channels: 2,
        d_model: 4,
        heads: 2,
        d_ff: 5,
        global_hidden: 3,
        no_sm,
        global_input: inputs,
        pooling: if rng.random_bool(0.5) {
            Pooling::Mean
        } else {
            Pooling::Max
        },
        ..Default::default()
    };
    let mut template = ModelParams::init(&cfg, rng)?;
    for (_, t) in template.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let batch = tiny_batch(rng, cfg.feature_dim);
    let obj = Objective {
        metric_input: inputs,
        ..Default::default()
    };
    let x = template.flatten();
    let t2 = template.clone();
    let b2 = batch.clone();
    let op = FnOp {
        name,
        f: Box::new(move |x| {
            let mut p = template.clone();
            p.unflatten(x)?;
            Ok(vec![run_batch(&p, &batch, &obj, false)?.breakdown.total])
        }),
        b: Box::new(move |x, dy| {
            let mut p = t2.clone();
            p.unflatten(x)?;
            let g = run_batch(&p, &b2, &obj, true)?.grads.expect("gradients requested");
            Ok(g.flatten().into_iter().map(|v| v * dy[0]).collect())
        }),
    };
    Ok((op, x))
}

fn model_full(rng: &mut ChaCha8Rng) -> Result<(FnOp, Vec<f64>)> {
    model_with(rng, "model", false, FeatureSource::Backbone)
}

fn model_encoder_inputs(rng: &mut ChaCha8Rng) -> Result<(FnOp, Vec<f64>)> {
    model_with(rng, "model-encoder-inputs", false, FeatureSource::Encoder)
}

fn model_no_sm(rng: &mut ChaCha8Rng) -> Result<(FnOp, Vec<f64>)> {
    model_with(rng, "model-no-sm", true, FeatureSource::Backbone)
}

const REGISTRY: &[(&str, Builder)] = &[
    ("cosine", cosine),
    ("channel-expansion", expand),
    ("token-projection", tokens_sorted),
    ("token-projection-slot", tokens_slot),
    ("encoder-block", encoder_block),
    ("local-head", local),
    ("global-head", global_mean),
    ("global-head-max", global_max),
    ("pull-loss", pull),
    ("push-loss", push),
    ("bce", bce_op),
    ("total-loss", total),
    ("model", model_full),
    ("model-encoder-inputs", model_encoder_inputs),
    ("model-no-sm", model_no_sm),
];

pub fn op_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct OpSummary {
    pub op: String,
    pub points: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Checks one op at `points` random points drawn from `seed`.
pub fn check_op(name: &str, seed: u64, points: usize) -> Result<OpSummary> {
    let (idx, &(_, build)) = REGISTRY
        .iter()
        .enumerate()
        .find(|(_, (n, _))| *n == name)
        .ok_or_else(|| Error::Config(format!("unknown op '{name}'; known: {}", op_names().join(", "))))?;
    let mut worst: f64 = 0.0;
    for k in 0..points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((idx as u64) << 32) ^ (k as u64).wrapping_mul(0x9E37_79B9));
        let (op, x) = build(&mut rng)?;
        let report = grad_check(&op, &x, DEFAULT_FD_STEP)?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(OpSummary {
        op: name.to_string(),
        points,
        max_rel_err: worst,
        passed: worst < GRADCHECK_TOL,
    })
}

pub fn check_all(seed: u64, points: usize) -> Result<Vec<OpSummary>> {
    op_names().into_iter().map(|n| check_op(n, seed, points)).collect()
}
