//! Class prototypes, pull/push metric losses, binary cross-entropy and the
//! weighted total.
//!
//! The metric losses are plain sums over a group's live faces; gradients
//! flow through the prototype means back into every member.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{checked_norm, cosine_sim, cosine_sim_grad, Tensor, EPS_NORM};

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub real: Option<Vec<f64>>,
    pub fake: Option<Vec<f64>>,
    pub n_real: usize,
    pub n_fake: usize,
}

fn class_mean(features: &Tensor, members: &[usize], what: &str) -> Result<Option<Vec<f64>>> {
    if members.is_empty() {
        return Ok(None);
    }
    let d = features.cols();
    let mut mean = vec![0.0; d];
    for &i in members {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    let inv = 1.0 / members.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    let n = checked_norm(&mean, what)
        .map_err(|_| Error::DegeneratePrototype(format!("{what} prototype norm below {EPS_NORM:e}")))?;
    debug_assert!(n >= EPS_NORM);
    Ok(Some(mean))
}

fn split_classes(labels: &[u8], mask: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let live = (0..mask.len()).filter(|&i| mask[i]);
    live.partition(|&i| labels[i] == 0)
}

fn check_inputs(features: &Tensor, labels: &[u8], mask: &[bool]) -> Result<()> {
    if features.shape().len() != 2 || features.rows() != mask.len() || labels.len() != mask.len() {
        return Err(Error::Shape(format!(
            "metric loss inputs: features {:?}, {} labels, {} mask slots",
            features.shape(),
            labels.len(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Invalid("metric loss on a group with no live faces".into()));
    }
    Ok(())
}

/// Per-class means of the live rows of `features`.
pub fn prototypes(features: &Tensor, labels: &[u8], mask: &[bool]) -> Result<Prototypes> {
    check_inputs(features, labels, mask)?;
    let (reals, fakes) = split_classes(labels, mask);
    Ok(Prototypes {
        real: class_mean(features, &reals, "real")?,
        fake: class_mean(features, &fakes, "fake")?,
        n_real: reals.len(),
        n_fake: fakes.len(),
    })
}

/// A scalar loss with its gradient with respect to every feature row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricLoss {
    pub value: f64,
    /// Same shape as the features; zero on padding rows.
    pub grad: Vec<f64>,
    /// Number of summands (pull) or exponential terms (push) that fired.
    pub terms: usize,
}

/// Routes a prototype gradient back to the members it averages.
fn spread(grad: &mut [f64], d: usize, members: &[usize], d_proto: &[f64]) {
    let inv = 1.0 / members.len() as f64;
    for &i in members {
        for (g, p) in grad[i * d..(i + 1) * d].iter_mut().zip(d_proto) {
            *g += p * inv;
        }
    }
}

/// `Σ_real (1 − cos(f, F_R)) + Σ_fake (1 − cos(f, F_F))`.
pub fn pull_loss(features: &Tensor, labels: &[u8], mask: &[bool]) -> Result<MetricLoss> {
    let protos = prototypes(features, labels, mask)?;
    let (reals, fakes) = split_classes(labels, mask);
    let d = features.cols();
    let mut grad = vec![0.0; features.len()];
    let mut value = 0.0;
    for (members, proto) in [(&reals, &protos.real), (&fakes, &protos.fake)] {
        let Some(proto) = proto else { continue };
        let mut d_proto = vec![0.0; d];
        for &i in members {
            let f = features.row(i);
            value += 1.0 - cosine_sim(f, proto)?;
            let (gf, gp) = cosine_sim_grad(f, proto)?;
            for k in 0..d {
                grad[i * d + k] -= gf[k];
                d_proto[k] -= gp[k];
            }
        }
        spread(&mut grad, d, members, &d_proto);
    }
    Ok(MetricLoss {
        value,
        grad,
        terms: reals.len() + fakes.len(),
    })
}

/// `exp(Σ_fake −(1 − cos(f, F_R))) + exp(Σ_real −(1 − cos(f, F_F)))`.
///
/// Each term compares one class against the other's prototype, so a group
/// missing either class contributes nothing.
pub fn push_loss(features: &Tensor, labels: &[u8], mask: &[bool]) -> Result<MetricLoss> {
    let protos = prototypes(features, labels, mask)?;
    let d = features.cols();
    let mut grad = vec![0.0; features.len()];
    let (Some(real_p), Some(fake_p)) = (&protos.real, &protos.fake) else {
        return Ok(MetricLoss {
            value: 0.0,
            grad,
            terms: 0,
        });
    };
    let (reals, fakes) = split_classes(labels, mask);
    let mut value = 0.0;
    // (members compared, their prototype, owners of the prototype)
    for (members, proto, owners) in [(&fakes, real_p, &reals), (&reals, fake_p, &fakes)] {
        let mut exponent = 0.0;
        for &i in members.iter() {
            exponent -= 1.0 - cosine_sim(features.row(i), proto)?;
        }
        let term = exponent.exp();
        value += term;
        let mut d_proto = vec![0.0; d];
        for &i in members.iter() {
            let (gf, gp) = cosine_sim_grad(features.row(i), proto)?;
            for k in 0..d {
                grad[i * d + k] += term * gf[k];
                d_proto[k] += term * gp[k];
            }
        }
        spread(&mut grad, d, owners, &d_proto);
    }
    Ok(MetricLoss { value, grad, terms: 2 })
}

/// Binary cross-entropy with the prediction clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce(y_hat: f64, y: u8) -> f64 {
    let p = y_hat.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// `∂ bce / ∂ŷ`; zero where the clamp is active.
pub fn bce_grad(y_hat: f64, y: u8) -> f64 {
    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&y_hat) {
        return 0.0;
    }
    if y == 1 {
        -1.0 / y_hat
    } else {
        1.0 / (1.0 - y_hat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub local: f64,
    pub pull: f64,
    pub push: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            local: 1.0,
            pull: 4.0,
            push: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("local", self.local), ("pull", self.pull), ("push", self.push)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub global: f64,
    pub local: f64,
    pub pull: f64,
    pub push: f64,
    pub total: f64,
    pub weights: LossWeights,
}

pub fn total_loss(global: f64, local: f64, pull: f64, push: f64, weights: LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    for (name, v) in [("global", global), ("local", local), ("pull", pull), ("push", push)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name} is {v}")));
        }
    }
    let total = global + weights.local * local + weights.pull * pull + weights.push * push;
    Ok(LossBreakdown {
        global,
        local,
        pull,
        push,
        total,
        weights,
    })
}
