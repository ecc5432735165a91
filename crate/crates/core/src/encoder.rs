//! Single-layer transformer encoder over face tokens, and the per-face
//! classification head.
//!
//! Block layout: `x1 = LN(t + MHA(t))`, `out = LN(x1 + FFN(x1))`, with
//! padding slots excluded as attention keys and zeroed on output. Every
//! reduction over slots goes through [`stable_sum`], so permuting the
//! slots permutes the outputs bit for bit.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{dot, matmul, matmul_nt, matmul_tn, softmax_backward, softmax_masked, stable_sum, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub heads: usize,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl EncoderParams {
    pub fn init<R: Rng>(d_model: usize, heads: usize, d_ff: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} must be divisible by heads {heads}"
            )));
        }
        if d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        Ok(EncoderParams {
            heads,
            wq: Tensor::xavier_uniform(d_model, d_model, rng),
            wk: Tensor::xavier_uniform(d_model, d_model, rng),
            wv: Tensor::xavier_uniform(d_model, d_model, rng),
            wo: Tensor::xavier_uniform(d_model, d_model, rng),
            ln1_gain: Tensor::filled(&[d_model], 1.0),
            ln1_bias: Tensor::zeros(&[d_model]),
            ffn_w1: Tensor::xavier_uniform(d_model, d_ff, rng),
            ffn_b1: Tensor::zeros(&[d_ff]),
            ffn_w2: Tensor::xavier_uniform(d_ff, d_model, rng),
            ffn_b2: Tensor::zeros(&[d_model]),
            ln2_gain: Tensor::filled(&[d_model], 1.0),
            ln2_bias: Tensor::zeros(&[d_model]),
        })
    }

    pub fn d_model(&self) -> usize {
        self.wq.rows()
    }

    pub fn d_ff(&self) -> usize {
        self.ffn_b1.len()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|(_, t)| t.fill(0.0));
        z
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("ffn.w1", &self.ffn_w1),
            ("ffn.b1", &self.ffn_b1),
            ("ffn.w2", &self.ffn_w2),
            ("ffn.b2", &self.ffn_b2),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ln1.gain", &mut self.ln1_gain),
            ("ln1.bias", &mut self.ln1_bias),
            ("ffn.w1", &mut self.ffn_w1),
            ("ffn.b1", &mut self.ffn_b1),
            ("ffn.w2", &mut self.ffn_w2),
            ("ffn.b2", &mut self.ffn_b2),
            ("ln2.gain", &mut self.ln2_gain),
            ("ln2.bias", &mut self.ln2_bias),
        ]
    }
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(z: &[f64], mask: &[bool], d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, LnCache) {
    let n = mask.len();
    let mut out = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut rstd = vec![0.0; n];
    for i in (0..n).filter(|&i| mask[i]) {
        let row = &z[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for k in 0..d {
            let xh = (row[k] - mean) * r;
            xhat[i * d + k] = xh;
            out[i * d + k] = gain[k] * xh + bias[k];
        }
    }
    (out, LnCache { xhat, rstd })
}

/// Returns the input gradient; accumulates gain and bias gradients.
fn layer_norm_backward(
    cache: &LnCache,
    mask: &[bool],
    d: usize,
    gain: &[f64],
    dy: &[f64],
    d_gain: &mut [f64],
    d_bias: &mut [f64],
) -> Vec<f64> {
    let n = mask.len();
    let mut dz = vec![0.0; n * d];
    for i in (0..n).filter(|&i| mask[i]) {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let g = &dy[i * d..(i + 1) * d];
        let dxh: Vec<f64> = (0..d).map(|k| g[k] * gain[k]).collect();
        for k in 0..d {
            d_gain[k] += g[k] * xh[k];
            d_bias[k] += g[k];
        }
        let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
        let mean_dxh_xh = dot(&dxh, xh) / d as f64;
        for k in 0..d {
            dz[i * d + k] = cache.rstd[i] * (dxh[k] - mean_dxh - xh[k] * mean_dxh_xh);
        }
    }
    dz
}

/// Forward state kept for [`encoder_backward`].
pub struct EncoderCache {
    tokens: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads × n × n` attention weights (zero rows for padding queries).
    attn: Vec<f64>,
    ctx: Vec<f64>,
    ln1: LnCache,
    x1: Vec<f64>,
    pre_act: Vec<f64>,
    hidden: Vec<f64>,
    ln2: LnCache,
}

impl EncoderCache {
    /// Attention weights of head `h` for query slot `i`.
    pub fn attention_row(&self, h: usize, i: usize) -> &[f64] {
        let n = self.ln1.rstd.len();
        &self.attn[h * n * n + i * n..h * n * n + (i + 1) * n]
    }
}

pub fn encoder_forward(tokens: &Tensor, mask: &[bool], p: &EncoderParams) -> Result<(Tensor, EncoderCache)> {
    let n = mask.len();
    let d = p.d_model();
    if tokens.shape() != [n, d] {
        return Err(Error::Shape(format!(
            "encoder tokens {:?}, expected [{n}, {d}]",
            tokens.shape()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Invalid("encoder input has every slot masked".into()));
    }
    let x = tokens.data();
    let heads = p.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = matmul(x, p.wq.data(), n, d, d);
    let k = matmul(x, p.wk.data(), n, d, d);
    let v = matmul(x, p.wv.data(), n, d, d);
    let mut attn = vec![0.0; heads * n * n];
    let mut ctx = vec![0.0; n * d];
    let mut terms = Vec::with_capacity(n);
    for h in 0..heads {
        let off = h * dh;
        for i in (0..n).filter(|&i| mask[i]) {
            let qi = &q[i * d + off..i * d + off + dh];
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    if mask[j] {
                        dot(qi, &k[j * d + off..j * d + off + dh]) * scale
                    } else {
                        0.0
                    }
                })
                .collect();
            let a = softmax_masked(&logits, mask)?;
            for c in 0..dh {
                terms.clear();
                terms.extend((0..n).filter(|&j| mask[j]).map(|j| a[j] * v[j * d + off + c]));
                ctx[i * d + off + c] = stable_sum(&mut terms);
            }
            attn[h * n * n + i * n..h * n * n + (i + 1) * n].copy_from_slice(&a);
        }
    }
    let att = matmul(&ctx, p.wo.data(), n, d, d);
    let z1: Vec<f64> = x.iter().zip(&att).map(|(a, b)| a + b).collect();
    let (x1, ln1) = layer_norm(&z1, mask, d, p.ln1_gain.data(), p.ln1_bias.data());
    let d_ff = p.d_ff();
    let mut pre_act = matmul(&x1, p.ffn_w1.data(), n, d, d_ff);
    for i in 0..n {
        for c in 0..d_ff {
            pre_act[i * d_ff + c] += p.ffn_b1.data()[c];
        }
    }
    let hidden: Vec<f64> = pre_act.iter().map(|&a| a.max(0.0)).collect();
    let f = matmul(&hidden, p.ffn_w2.data(), n, d_ff, d);
    let z2: Vec<f64> = (0..n * d)
        .map(|idx| x1[idx] + f[idx] + p.ffn_b2.data()[idx % d])
        .collect();
    let (out, ln2) = layer_norm(&z2, mask, d, p.ln2_gain.data(), p.ln2_bias.data());
    let cache = EncoderCache {
        tokens: x.to_vec(),
        q,
        k,
        v,
        attn,
        ctx,
        ln1,
        x1,
        pre_act,
        hidden,
        ln2,
    };
    Ok((Tensor::from_vec(&[n, d], out)?, cache))
}

/// Accumulates parameter gradients into `grads` and returns `d tokens`.
pub fn encoder_backward(
    cache: &EncoderCache,
    mask: &[bool],
    p: &EncoderParams,
    d_out: &[f64],
    grads: &mut EncoderParams,
) -> Vec<f64> {
    let n = mask.len();
    let d = p.d_model();
    let d_ff = p.d_ff();
    let heads = p.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let dz2 = layer_norm_backward(
        &cache.ln2,
        mask,
        d,
        p.ln2_gain.data(),
        d_out,
        grads.ln2_gain.data_mut(),
        grads.ln2_bias.data_mut(),
    );
    // z2 = x1 + hidden·W2 + b2
    let mut dx1 = dz2.clone();
    add_into(grads.ffn_w2.data_mut(), &matmul_tn(&cache.hidden, &dz2, n, d_ff, d));
    for i in (0..n).filter(|&i| mask[i]) {
        for c in 0..d {
            grads.ffn_b2.data_mut()[c] += dz2[i * d + c];
        }
    }
    let mut d_pre = matmul_nt(&dz2, p.ffn_w2.data(), n, d, d_ff);
    for (g, &a) in d_pre.iter_mut().zip(&cache.pre_act) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
    add_into(grads.ffn_w1.data_mut(), &matmul_tn(&cache.x1, &d_pre, n, d, d_ff));
    for i in (0..n).filter(|&i| mask[i]) {
        for c in 0..d_ff {
            grads.ffn_b1.data_mut()[c] += d_pre[i * d_ff + c];
        }
    }
    add_into(&mut dx1, &matmul_nt(&d_pre, p.ffn_w1.data(), n, d_ff, d));
    let dz1 = layer_norm_backward(
        &cache.ln1,
        mask,
        d,
        p.ln1_gain.data(),
        &dx1,
        grads.ln1_gain.data_mut(),
        grads.ln1_bias.data_mut(),
    );
    // z1 = tokens + ctx·Wo
    let mut d_tokens = dz1.clone();
    add_into(grads.wo.data_mut(), &matmul_tn(&cache.ctx, &dz1, n, d, d));
    let d_ctx = matmul_nt(&dz1, p.wo.data(), n, d, d);
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    for h in 0..heads {
        let off = h * dh;
        for i in (0..n).filter(|&i| mask[i]) {
            let a = &cache.attn[h * n * n + i * n..h * n * n + (i + 1) * n];
            let gi = &d_ctx[i * d + off..i * d + off + dh];
            let mut da = vec![0.0; n];
            for j in (0..n).filter(|&j| mask[j]) {
                da[j] = dot(gi, &cache.v[j * d + off..j * d + off + dh]);
                for c in 0..dh {
                    dv[j * d + off + c] += a[j] * gi[c];
                }
            }
            let dl = softmax_backward(a, &da);
            for j in (0..n).filter(|&j| mask[j]) {
                let g = dl[j] * scale;
                if g == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    dq[i * d + off + c] += g * cache.k[j * d + off + c];
                    dk[j * d + off + c] += g * cache.q[i * d + off + c];
                }
            }
        }
    }
    let x = &cache.tokens;
    for (w, gw, g) in [
        (&p.wq, &mut grads.wq, &dq),
        (&p.wk, &mut grads.wk, &dk),
        (&p.wv, &mut grads.wv, &dv),
    ] {
        add_into(gw.data_mut(), &matmul_tn(x, g, n, d, d));
        add_into(&mut d_tokens, &matmul_nt(g, w.data(), n, d, d));
    }
    for i in (0..n).filter(|&i| !mask[i]) {
        d_tokens[i * d..(i + 1) * d].fill(0.0);
    }
    d_tokens
}

pub(crate) fn add_into(acc: &mut [f64], g: &[f64]) {
    debug_assert_eq!(acc.len(), g.len());
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalHeadParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LocalHeadParams {
    pub fn init<R: Rng>(d_model: usize, rng: &mut R) -> Self {
        LocalHeadParams {
            weight: Tensor::xavier_uniform(d_model, 1, rng),
            bias: Tensor::zeros(&[1]),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ŷ_i = σ(W·F_i + b)`.
pub fn local_head(feature: &[f64], p: &LocalHeadParams) -> Result<f64> {
    if feature.len() != p.weight.len() {
        return Err(Error::Shape(format!(
            "local head expects {} inputs, got {}",
            p.weight.len(),
            feature.len()
        )));
    }
    Ok(sigmoid(dot(feature, p.weight.data()) + p.bias.data()[0]))
}

/// Backward of [`local_head`] from `∂L/∂ŷ`: accumulates into `grads` and
/// returns `∂L/∂F`.
pub fn local_head_backward(
    feature: &[f64],
    y_hat: f64,
    d_y_hat: f64,
    p: &LocalHeadParams,
    grads: &mut LocalHeadParams,
) -> Vec<f64> {
    let dz = d_y_hat * y_hat * (1.0 - y_hat);
    grads.bias.data_mut()[0] += dz;
    for (g, f) in grads.weight.data_mut().iter_mut().zip(feature) {
        *g += f * dz;
    }
    p.weight.data().iter().map(|w| w * dz).collect()
}
