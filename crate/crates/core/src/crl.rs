//! Cross-domain representation learning: the space-frequency and
//! time-frequency cross-attention stages that fuse the frequency prior into
//! the time-domain latent.
//!
//! Block ordering follows the post-norm form: attention output plus the
//! value-source residual goes through layer norm, then a position-wise
//! feed-forward with its own residual and norm.

use crate::autodiff::{SteMode, Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::pfd::{pfd_tape, BandpassMask, PsmParams, PsmVars};
use rand::Rng;
use rand_distr::StandardNormal;

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Projections, feed-forward and norm parameters of one attention block.
/// The feed-forward hidden width is 2D.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
}

impl AttentionParams {
    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        let h = 2 * d;
        let gauss = |rng: &mut R, n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| 0.02 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        AttentionParams {
            wq: Tensor::raw(vec![d, d], gauss(rng, d * d)),
            wk: Tensor::raw(vec![d, d], gauss(rng, d * d)),
            wv: Tensor::raw(vec![d, d], gauss(rng, d * d)),
            ffn_w1: Tensor::raw(vec![d, h], gauss(rng, d * h)),
            ffn_b1: Tensor::zeros(&[h]),
            ffn_w2: Tensor::raw(vec![h, d], gauss(rng, h * d)),
            ffn_b2: Tensor::zeros(&[d]),
            norm1_gain: Tensor::raw(vec![d], vec![1.0; d]),
            norm1_bias: Tensor::zeros(&[d]),
            norm2_gain: Tensor::raw(vec![d], vec![1.0; d]),
            norm2_bias: Tensor::zeros(&[d]),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }
}

/// Attention-block leaves on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
}

impl AttentionVars {
    pub fn bind(tape: &mut Tape, p: &AttentionParams) -> Self {
        AttentionVars {
            wq: tape.leaf(p.wq.clone()),
            wk: tape.leaf(p.wk.clone()),
            wv: tape.leaf(p.wv.clone()),
            ffn_w1: tape.leaf(p.ffn_w1.clone()),
            ffn_b1: tape.leaf(p.ffn_b1.clone()),
            ffn_w2: tape.leaf(p.ffn_w2.clone()),
            ffn_b2: tape.leaf(p.ffn_b2.clone()),
            norm1_gain: tape.leaf(p.norm1_gain.clone()),
            norm1_bias: tape.leaf(p.norm1_bias.clone()),
            norm2_gain: tape.leaf(p.norm2_gain.clone()),
            norm2_bias: tape.leaf(p.norm2_bias.clone()),
        }
    }
}

/// One batched cross-attention block: query/key from `query_source`, values
/// and the residual path from `value_source`. Shapes are `[B, S, D]`.
pub fn cross_attention_tape(
    tape: &mut Tape,
    query_source: Var,
    value_source: Var,
    vars: &AttentionVars,
    heads: usize,
) -> Var {
    let d = tape.value(query_source).shape()[2];
    let q = tape.matmul(query_source, vars.wq);
    let k = tape.matmul(query_source, vars.wk);
    let v = tape.matmul(value_source, vars.wv);
    let scores = tape.mha_scores(q, k, heads, 1.0 / (d as f64).sqrt());
    let probs = tape.softmax_last(scores);
    let attended = tape.mha_combine(probs, v);
    let res1 = tape.add(attended, value_source);
    let s1 = tape.layernorm_last(res1, vars.norm1_gain, vars.norm1_bias, LAYERNORM_EPS);
    let hidden = tape.matmul(s1, vars.ffn_w1);
    let hidden = tape.add_bias(hidden, vars.ffn_b1);
    let hidden = tape.relu(hidden);
    let ffn = tape.matmul(hidden, vars.ffn_w2);
    let ffn = tape.add_bias(ffn, vars.ffn_b2);
    let res2 = tape.add(s1, ffn);
    tape.layernorm_last(res2, vars.norm2_gain, vars.norm2_bias, LAYERNORM_EPS)
}

/// Plain single-sequence wrapper over [`cross_attention_tape`].
pub fn cross_attention(
    query_source: &Tensor,
    value_source: &Tensor,
    params: &AttentionParams,
    heads: usize,
) -> Result<Tensor> {
    if query_source.shape() != value_source.shape() || query_source.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "cross_attention expects matching [S, D] inputs, got {:?} and {:?}",
            query_source.shape(),
            value_source.shape()
        )));
    }
    let (s, d) = (query_source.shape()[0], query_source.shape()[1]);
    if d % heads != 0 {
        return Err(Error::Config(format!("heads {heads} must divide D={d}")));
    }
    let mut tape = Tape::new();
    let q = tape.constant(query_source.clone().reshape(vec![1, s, d])?);
    let v = tape.constant(value_source.clone().reshape(vec![1, s, d])?);
    let vars = AttentionVars::bind(&mut tape, params);
    let out = cross_attention_tape(&mut tape, q, v, &vars, heads);
    tape.value(out).clone().reshape(vec![s, d])
}

/// Per-layer parameters: two attention blocks, spectrum modulation, and the
/// learnable selection threshold.
#[derive(Debug, Clone)]
pub struct CrlLayerParams {
    pub space_attn: AttentionParams,
    pub time_attn: AttentionParams,
    pub psm: PsmParams,
    pub tau: Tensor,
    pub ste_temperature: f64,
}

impl CrlLayerParams {
    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        CrlLayerParams {
            space_attn: AttentionParams::init(d, rng),
            time_attn: AttentionParams::init(d, rng),
            psm: PsmParams::near_identity(d, rng),
            tau: Tensor::scalar(0.0),
            ste_temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CrlLayerVars {
    pub space_attn: AttentionVars,
    pub time_attn: AttentionVars,
    pub psm: PsmVars,
    pub tau: Var,
}

impl CrlLayerVars {
    pub fn bind(tape: &mut Tape, p: &CrlLayerParams) -> Self {
        CrlLayerVars {
            space_attn: AttentionVars::bind(tape, &p.space_attn),
            time_attn: AttentionVars::bind(tape, &p.time_attn),
            psm: PsmVars {
                w_re: tape.leaf(p.psm.w_re.clone()),
                w_im: tape.leaf(p.psm.w_im.clone()),
                b_re: tape.leaf(p.psm.b_re.clone()),
                b_im: tape.leaf(p.psm.b_im.clone()),
            },
            tau: tape.leaf(p.tau.clone()),
        }
    }
}

/// One full layer over a `[T, N, D]` latent: frequency denoising, then
/// cross-attention over the region axis per timestamp, then over the time
/// axis per region. The frequency prior is computed once per layer and
/// drives query/key in both stages.
pub fn crl_layer_tape(
    tape: &mut Tape,
    z: Var,
    vars: &CrlLayerVars,
    mask: &BandpassMask,
    ste_temperature: f64,
    heads: usize,
    mode: SteMode,
) -> Var {
    let zp = pfd_tape(tape, z, mask, &vars.psm, vars.tau, ste_temperature, mode);
    // Space-frequency stage: attention over regions, batched over time.
    let zs = cross_attention_tape(tape, zp, z, &vars.space_attn, heads);
    // Time-frequency stage: attention over time, batched over regions.
    let zp_t = tape.transpose01(zp);
    let zs_t = tape.transpose01(zs);
    let zt = cross_attention_tape(tape, zp_t, zs_t, &vars.time_attn, heads);
    tape.transpose01(zt)
}

/// Plain wrapper over [`crl_layer_tape`] for a single `[T, N, D]` input.
pub fn crl_layer(
    z: &Tensor,
    params: &CrlLayerParams,
    mask: &BandpassMask,
    heads: usize,
) -> Result<Tensor> {
    if z.shape().len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "crl_layer expects [T, N, D], got {:?}",
            z.shape()
        )));
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let vars = CrlLayerVars::bind(&mut tape, params);
    let out = crl_layer_tape(
        &mut tape,
        zv,
        &vars,
        mask,
        params.ste_temperature,
        heads,
        SteMode::Hard,
    );
    Ok(tape.value(out).clone())
}
