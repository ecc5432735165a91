//! Dense arithmetic, deterministic reductions and the finite-difference
//! gradient oracle shared by every learnable piece of the model.
//!
//! Matrices are row-major `f64` slices. A linear layer is `y = x · W` with
//! `x: rows × in` and `W: in × out`, so `dW = xᵀ · dy` and `dx = dy · Wᵀ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest vector norm accepted by the cosine routines.
pub const EPS_NORM: f64 = 1e-8;

/// Default finite-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                len,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor entry {i} is {}", data[i])));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Glorot/Xavier uniform initialisation for a `fan_in × fan_out` matrix.
    pub fn xavier_uniform<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
        Tensor {
            shape: vec![fan_in, fan_out],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            self.shape.first().copied().unwrap_or(1)
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `a (m×k) · b (k×n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `aᵀ · b` for `a: m×k`, `b: m×n`, giving `k×n`.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` for `a: m×n`, `b: k×n`, giving `m×k`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = dot(arow, &b[j * n..(j + 1) * n]);
        }
    }
    out
}

/// Order-independent sum: the terms are sorted by value and reduced with a
/// fixed pairwise tree, so any permutation of the input gives the same bits.
pub fn stable_sum(terms: &mut [f64]) -> f64 {
    terms.sort_by(f64::total_cmp);
    pairwise_sum(terms)
}

fn pairwise_sum(terms: &[f64]) -> f64 {
    match terms.len() {
        0 => 0.0,
        1 => terms[0],
        2 => terms[0] + terms[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&terms[..mid]) + pairwise_sum(&terms[mid..])
        }
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = checked_norm(u, "cosine_sim first argument")?;
    let nv = checked_norm(v, "cosine_sim second argument")?;
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Gradient of `cos(u, v)` with respect to both arguments.
pub fn cosine_sim_grad(u: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = checked_norm(u, "cosine_sim_grad first argument")?;
    let nv = checked_norm(v, "cosine_sim_grad second argument")?;
    let c = dot(u, v) / (nu * nv);
    let inv = 1.0 / (nu * nv);
    let du = u.iter().zip(v).map(|(a, b)| b * inv - c * a / (nu * nu)).collect();
    let dv = u.iter().zip(v).map(|(a, b)| a * inv - c * b / (nv * nv)).collect();
    Ok((du, dv))
}

pub(crate) fn checked_norm(v: &[f64], context: &str) -> Result<f64> {
    let n = norm(v);
    if !(n >= EPS_NORM) {
        return Err(Error::NearZeroNorm {
            norm: n,
            min: EPS_NORM,
            context: context.to_string(),
        });
    }
    Ok(n)
}

/// Softmax over the entries whose mask is `true`; masked entries get exactly 0.
pub fn softmax_masked(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} logits with {} mask entries",
            logits.len(),
            mask.len()
        )));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Invalid("softmax with every entry masked".into()));
    }
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { (l - max).exp() } else { 0.0 })
        .collect();
    let mut terms: Vec<f64> = out.iter().zip(mask).filter(|(_, &m)| m).map(|(&e, _)| e).collect();
    let total = stable_sum(&mut terms);
    for (p, &m) in out.iter_mut().zip(mask) {
        if m {
            *p /= total;
        }
    }
    Ok(out)
}

/// Backward of a softmax given its output `p` and the output gradient.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner = dot(p, dp);
    p.iter().zip(dp).map(|(pi, di)| pi * (di - inner)).collect()
}

/// A differentiable map from a flat input vector to a flat output vector.
///
/// Fixed, non-differentiated context (masks, labels, hyperparameters) lives
/// inside the implementor.
pub trait DiffOp {
    fn name(&self) -> &str;
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// Vector-Jacobian product: gradient of `⟨dy, forward(x)⟩` with respect to `x`.
    fn backward(&self, x: &[f64], dy: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Compares `op.backward` against central differences of the scalar
/// `⟨r, forward(x)⟩`, where `r` is a fixed pseudo-random cotangent.
pub fn grad_check(op: &dyn DiffOp, x: &[f64], eps: f64) -> Result<GradCheckReport> {
    let y0 = op.forward(x)?;
    if let Some(i) = y0.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{}: forward output {i} is {}",
            op.name(),
            y0[i]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164 ^ y0.len() as u64);
    let cot: Vec<f64> = (0..y0.len())
        .map(|_| {
            let m: f64 = rng.random_range(0.5..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let analytic = op.backward(x, &cot)?;
    if analytic.len() != x.len() {
        return Err(Error::Shape(format!(
            "{}: backward returned {} entries for {} inputs",
            op.name(),
            analytic.len(),
            x.len()
        )));
    }
    let scalar = |y: Vec<f64>| -> Result<f64> {
        let s = dot(&cot, &y);
        if s.is_finite() {
            Ok(s)
        } else {
            Err(Error::NonFinite(format!("{}: perturbed forward", op.name())))
        }
    };
    let mut probe = x.to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let fp = scalar(op.forward(&probe)?)?;
        probe[i] = orig - eps;
        let fm = scalar(op.forward(&probe)?)?;
        probe[i] = orig;
        numeric.push((fp - fm) / (2.0 * eps));
    }
    let (worst_index, max_rel_err) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
    })
}
