//! Image-level branch: pool an image's face features, apply a 1×1 conv
//! (a D×D affine map on a feature vector), then a two-layer classifier.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::sigmoid;
use crate::error::{Error, Result};
use crate::numeric::{dot, matmul, stable_sum, Tensor};

pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Max,
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            other => Err(Error::Config(format!("unknown pooling '{other}' (mean|max)"))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalParams {
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

impl GlobalParams {
    pub fn init<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        GlobalParams {
            conv_w: Tensor::xavier_uniform(dim, dim, rng),
            conv_b: Tensor::zeros(&[dim]),
            fc1_w: Tensor::xavier_uniform(dim, hidden, rng),
            fc1_b: Tensor::zeros(&[hidden]),
            fc2_w: Tensor::xavier_uniform(hidden, 1, rng),
            fc2_b: Tensor::zeros(&[1]),
        }
    }

    pub fn dim(&self) -> usize {
        self.conv_b.len()
    }

    pub fn hidden(&self) -> usize {
        self.fc1_b.len()
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("conv.w", &self.conv_w),
            ("conv.b", &self.conv_b),
            ("fc1.w", &self.fc1_w),
            ("fc1.b", &self.fc1_b),
            ("fc2.w", &self.fc2_w),
            ("fc2.b", &self.fc2_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("conv.w", &mut self.conv_w),
            ("conv.b", &mut self.conv_b),
            ("fc1.w", &mut self.fc1_w),
            ("fc1.b", &mut self.fc1_b),
            ("fc2.w", &mut self.fc2_w),
            ("fc2.b", &mut self.fc2_b),
        ]
    }
}

fn pool(faces: &[&[f64]], pooling: Pooling) -> Result<(Vec<f64>, Vec<usize>)> {
    let Some(first) = faces.first() else {
        return Err(Error::Invalid("cannot aggregate an image with no faces".into()));
    };
    let d = first.len();
    if faces.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("faces of one image differ in dimension".into()));
    }
    let mut pooled = vec![0.0; d];
    let mut argmax = vec![0; d];
    let mut terms = Vec::with_capacity(faces.len());
    for k in 0..d {
        match pooling {
            Pooling::Mean => {
                terms.clear();
                terms.extend(faces.iter().map(|f| f[k]));
                pooled[k] = stable_sum(&mut terms) / faces.len() as f64;
            }
            Pooling::Max => {
                let mut best = 0;
                for (i, f) in faces.iter().enumerate() {
                    if f[k] > faces[best][k] {
                        best = i;
                    }
                }
                pooled[k] = faces[best][k];
                argmax[k] = best;
            }
        }
    }
    Ok((pooled, argmax))
}

/// `Conv(Pool(faces))`.
pub fn aggregate(faces: &[&[f64]], p: &GlobalParams, pooling: Pooling) -> Result<Vec<f64>> {
    let (pooled, _) = pool(faces, pooling)?;
    conv(&pooled, p)
}

fn conv(pooled: &[f64], p: &GlobalParams) -> Result<Vec<f64>> {
    let d = p.dim();
    if pooled.len() != d {
        return Err(Error::Shape(format!(
            "global branch expects dim {d}, got {}",
            pooled.len()
        )));
    }
    let mut out = matmul(pooled, p.conv_w.data(), 1, d, d);
    out.iter_mut().zip(p.conv_b.data()).for_each(|(o, b)| *o += b);
    Ok(out)
}

fn head_hidden(g: &[f64], p: &GlobalParams) -> (Vec<f64>, Vec<f64>) {
    let h = p.hidden();
    let mut pre = matmul(g, p.fc1_w.data(), 1, g.len(), h);
    pre.iter_mut().zip(p.fc1_b.data()).for_each(|(o, b)| *o += b);
    let hidden = pre.iter().map(|&v| v.max(0.0)).collect();
    (pre, hidden)
}

/// `σ(W2·relu(W1·g + b1) + b2)`.
pub fn global_head(g: &[f64], p: &GlobalParams) -> Result<f64> {
    if g.len() != p.dim() {
        return Err(Error::Shape(format!(
            "global head expects dim {}, got {}",
            p.dim(),
            g.len()
        )));
    }
    let (_, hidden) = head_hidden(g, p);
    Ok(sigmoid(dot(&hidden, p.fc2_w.data()) + p.fc2_b.data()[0]))
}

pub struct GlobalCache {
    n_faces: usize,
    pooling: Pooling,
    argmax: Vec<usize>,
    pooled: Vec<f64>,
    agg: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    pub y_hat: f64,
}

pub fn global_forward(faces: &[&[f64]], p: &GlobalParams, pooling: Pooling) -> Result<GlobalCache> {
    let (pooled, argmax) = pool(faces, pooling)?;
    let agg = conv(&pooled, p)?;
    let (pre, hidden) = head_hidden(&agg, p);
    let y_hat = sigmoid(dot(&hidden, p.fc2_w.data()) + p.fc2_b.data()[0]);
    Ok(GlobalCache {
        n_faces: faces.len(),
        pooling,
        argmax,
        pooled,
        agg,
        pre,
        hidden,
        y_hat,
    })
}

/// Backward from `∂L/∂ŷ`; accumulates into `grads` and returns one
/// gradient row per input face.
pub fn global_backward(cache: &GlobalCache, p: &GlobalParams, d_y_hat: f64, grads: &mut GlobalParams) -> Vec<Vec<f64>> {
    let d = p.dim();
    let h = p.hidden();
    let dz = d_y_hat * cache.y_hat * (1.0 - cache.y_hat);
    grads.fc2_b.data_mut()[0] += dz;
    let mut d_pre = vec![0.0; h];
    for j in 0..h {
        grads.fc2_w.data_mut()[j] += cache.hidden[j] * dz;
        if cache.pre[j] > 0.0 {
            d_pre[j] = p.fc2_w.data()[j] * dz;
        }
    }
    let mut d_agg = vec![0.0; d];
    for k in 0..d {
        let w_row = &p.fc1_w.data()[k * h..(k + 1) * h];
        let g_row = &mut grads.fc1_w.data_mut()[k * h..(k + 1) * h];
        for j in 0..h {
            g_row[j] += cache.agg[k] * d_pre[j];
        }
        d_agg[k] = dot(w_row, &d_pre);
    }
    grads.fc1_b.data_mut().iter_mut().zip(&d_pre).for_each(|(g, v)| *g += v);
    let mut d_pooled = vec![0.0; d];
    for k in 0..d {
        let w_row = &p.conv_w.data()[k * d..(k + 1) * d];
        let g_row = &mut grads.conv_w.data_mut()[k * d..(k + 1) * d];
        for j in 0..d {
            g_row[j] += cache.pooled[k] * d_agg[j];
        }
        d_pooled[k] = dot(w_row, &d_agg);
    }
    grads
        .conv_b
        .data_mut()
        .iter_mut()
        .zip(&d_agg)
        .for_each(|(g, v)| *g += v);
    let mut d_faces = vec![vec![0.0; d]; cache.n_faces];
    match cache.pooling {
        Pooling::Mean => {
            let inv = 1.0 / cache.n_faces as f64;
            for row in &mut d_faces {
                row.iter_mut().zip(&d_pooled).for_each(|(r, g)| *r = g * inv);
            }
        }
        Pooling::Max => {
            for k in 0..d {
                d_faces[cache.argmax[k]][k] = d_pooled[k];
            }
        }
    }
    d_faces
}
