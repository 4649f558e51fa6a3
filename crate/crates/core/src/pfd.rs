//! Physiological frequency denoiser: ideal bandpass (PBF), learnable
//! complex spectrum modulation (PSM), adaptive energy-threshold selection
//! (ASS), composed as `irdft(ASS(PSM(PBF(rdft(z)))))`.
//!
//! Everything here exists twice: as plain functions over spectra (used for
//! data preparation and as test oracles) and as tape builders used inside
//! the denoising network. Both share the same kernels.

use crate::autodiff::{SteMode, Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{n_half_bins, ComplexTensor, HalfSpectrum, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

/// Heart-rate band lower edge in Hz.
pub const LOW_HZ: f64 = 0.66;
/// Heart-rate band upper edge in Hz.
pub const HIGH_HZ: f64 = 3.0;

/// Binary indicator over half-spectrum bins: 1 iff the bin's physical
/// frequency lies in `[LOW_HZ, HIGH_HZ]`, inclusive at both edges.
#[derive(Debug, Clone)]
pub struct BandpassMask {
    mask: Vec<bool>,
    pub low_hz: f64,
    pub high_hz: f64,
    pub sample_rate: f64,
    pub origin_len: usize,
}

impl BandpassMask {
    pub fn bins(&self) -> &[bool] {
        &self.mask
    }

    pub fn passes(&self, bin: usize) -> bool {
        self.mask[bin]
    }

    pub fn n_pass(&self) -> usize {
        self.mask.iter().filter(|b| **b).count()
    }

    /// Mask expanded to a `[F, rest...]` constant tensor of 0/1.
    pub fn expanded(&self, rest_shape: &[usize]) -> Tensor {
        let rest: usize = rest_shape.iter().product();
        let f = self.mask.len();
        let mut data = vec![0.0; f * rest];
        for (i, &pass) in self.mask.iter().enumerate() {
            if pass {
                data[i * rest..(i + 1) * rest].fill(1.0);
            }
        }
        let mut shape = vec![f];
        shape.extend_from_slice(rest_shape);
        Tensor::raw(shape, data)
    }
}

/// Builds the heart-rate band indicator for a (T, fs) pair.
pub fn pbf_mask(origin_len: usize, sample_rate: f64) -> Result<BandpassMask> {
    if origin_len < 2 || sample_rate <= 0.0 {
        return Err(Error::Config(format!(
            "bandpass mask needs T >= 2 and fs > 0, got T={origin_len}, fs={sample_rate}"
        )));
    }
    let f = n_half_bins(origin_len);
    let mask: Vec<bool> = (0..f)
        .map(|i| {
            let lambda = i as f64 * sample_rate / origin_len as f64;
            (LOW_HZ..=HIGH_HZ).contains(&lambda)
        })
        .collect();
    if !mask.iter().any(|b| *b) {
        return Err(Error::EmptyPassband {
            low: LOW_HZ,
            high: HIGH_HZ,
            origin_len,
            sample_rate,
        });
    }
    Ok(BandpassMask {
        mask,
        low_hz: LOW_HZ,
        high_hz: HIGH_HZ,
        sample_rate,
        origin_len,
    })
}

/// Zeroes out-of-band bins; in-band bins are copied bit-for-bit.
pub fn apply_pbf(spec: &HalfSpectrum, mask: &BandpassMask) -> Result<HalfSpectrum> {
    let f = spec.n_bins();
    if f != mask.bins().len() {
        return Err(Error::ShapeMismatch(format!(
            "mask has {} bins, spectrum has {}",
            mask.bins().len(),
            f
        )));
    }
    let rest: usize = spec.bins.shape()[1..].iter().product();
    let mut out = ComplexTensor::zeros(spec.bins.shape());
    for i in 0..f {
        if mask.passes(i) {
            out.re_mut()[i * rest..(i + 1) * rest]
                .copy_from_slice(&spec.bins.re()[i * rest..(i + 1) * rest]);
            out.im_mut()[i * rest..(i + 1) * rest]
                .copy_from_slice(&spec.bins.im()[i * rest..(i + 1) * rest]);
        }
    }
    Ok(HalfSpectrum {
        bins: out,
        origin_len: spec.origin_len,
        sample_rate: spec.sample_rate,
    })
}

/// Complex-weight modulation parameters: 𝒲 = w_re + j·w_im (D×D),
/// ℬ = b_re + j·b_im (D).
#[derive(Debug, Clone)]
pub struct PsmParams {
    pub w_re: Tensor,
    pub w_im: Tensor,
    pub b_re: Tensor,
    pub b_im: Tensor,
}

impl PsmParams {
    pub fn new(w_re: Tensor, w_im: Tensor, b_re: Tensor, b_im: Tensor) -> Result<Self> {
        let d = b_re.len();
        if w_re.shape() != [d, d] || w_im.shape() != [d, d] || b_im.len() != d {
            return Err(Error::ShapeMismatch(
                "PSM weights must be square matrices matching the bias length".into(),
            ));
        }
        Ok(PsmParams {
            w_re,
            w_im,
            b_re,
            b_im,
        })
    }

    /// Identity real weight plus small Gaussian noise; zero biases.
    /// Keeps early training close to plain bandpass filtering.
    pub fn near_identity<R: Rng>(d: usize, rng: &mut R) -> Self {
        let mut w_re = vec![0.0; d * d];
        let mut w_im = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let eye = if i == j { 1.0 } else { 0.0 };
                w_re[i * d + j] = eye + 0.02 * rng.sample::<f64, _>(StandardNormal);
                w_im[i * d + j] = 0.02 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        PsmParams {
            w_re: Tensor::raw(vec![d, d], w_re),
            w_im: Tensor::raw(vec![d, d], w_im),
            b_re: Tensor::zeros(&[d]),
            b_im: Tensor::zeros(&[d]),
        }
    }

    pub fn dim(&self) -> usize {
        self.b_re.len()
    }

    /// Identity weights and zero biases (modulation M equals the input).
    pub fn exact_identity(d: usize) -> Self {
        let mut w_re = vec![0.0; d * d];
        for i in 0..d {
            w_re[i * d + i] = 1.0;
        }
        PsmParams {
            w_re: Tensor::raw(vec![d, d], w_re),
            w_im: Tensor::zeros(&[d, d]),
            b_re: Tensor::zeros(&[d]),
            b_im: Tensor::zeros(&[d]),
        }
    }
}

/// Adaptive selection parameters: the energy threshold and the sharpness of
/// the sigmoid surrogate used for the straight-through backward pass.
#[derive(Debug, Clone)]
pub struct AssParams {
    pub tau: f64,
    pub ste_temperature: f64,
}

impl AssParams {
    pub fn new(tau: f64, ste_temperature: f64) -> Result<Self> {
        if !tau.is_finite() || tau < 0.0 {
            return Err(Error::Config(format!("tau must be finite and >= 0, got {tau}")));
        }
        if ste_temperature <= 0.0 {
            return Err(Error::Config(format!(
                "ste_temperature must be > 0, got {ste_temperature}"
            )));
        }
        Ok(AssParams {
            tau,
            ste_temperature,
        })
    }
}

impl Default for AssParams {
    fn default() -> Self {
        // τ = 0 passes everything so training starts from an identity-like
        // selection stage.
        AssParams {
            tau: 0.0,
            ste_temperature: 1.0,
        }
    }
}

/// Computes the modulation M per Eq-style per-part expansion and returns
/// Z̃ = M ⊙ Z. The last axis must match the parameter dimension D.
pub fn psm_forward(spec: &HalfSpectrum, params: &PsmParams) -> Result<HalfSpectrum> {
    let d = params.dim();
    let shape = spec.bins.shape().to_vec();
    if *shape.last().unwrap() != d {
        return Err(Error::ShapeMismatch(format!(
            "spectrum latent dim {} vs PSM dim {}",
            shape.last().unwrap(),
            d
        )));
    }
    let rows = spec.bins.re().len() / d;
    let (zre, zim) = (spec.bins.re(), spec.bins.im());
    let (wre, wim) = (params.w_re.data(), params.w_im.data());
    let (bre, bim) = (params.b_re.data(), params.b_im.data());
    let mut out_re = vec![0.0; rows * d];
    let mut out_im = vec![0.0; rows * d];
    for r in 0..rows {
        let zr = &zre[r * d..(r + 1) * d];
        let zi = &zim[r * d..(r + 1) * d];
        for jb in 0..d {
            let mut m_re = bre[jb];
            let mut m_im = bim[jb];
            for ja in 0..d {
                m_re += zr[ja] * wre[ja * d + jb] - zi[ja] * wim[ja * d + jb];
                m_im += zr[ja] * wim[ja * d + jb] + zi[ja] * wre[ja * d + jb];
            }
            m_re = m_re.max(0.0);
            m_im = m_im.max(0.0);
            out_re[r * d + jb] = m_re * zr[jb] - m_im * zi[jb];
            out_im[r * d + jb] = m_re * zi[jb] + m_im * zr[jb];
        }
    }
    Ok(HalfSpectrum {
        bins: ComplexTensor::raw(shape, out_re, out_im),
        origin_len: spec.origin_len,
        sample_rate: spec.sample_rate,
    })
}

/// Per-element energy E = sqrt(re² + im²).
pub fn ass_energy(spec: &HalfSpectrum) -> Tensor {
    let data: Vec<f64> = spec
        .bins
        .re()
        .iter()
        .zip(spec.bins.im())
        .map(|(r, i)| r.hypot(*i))
        .collect();
    Tensor::raw(spec.bins.shape().to_vec(), data)
}

/// Hard selection: zeroes every element whose energy is below τ.
pub fn ass_select(spec: &HalfSpectrum, energy: &Tensor, params: &AssParams) -> Result<HalfSpectrum> {
    if energy.shape() != spec.bins.shape() {
        return Err(Error::ShapeMismatch(
            "energy shape must match spectrum".into(),
        ));
    }
    let mut out = spec.bins.clone();
    for (k, e) in energy.data().iter().enumerate() {
        if *e < params.tau {
            out.re_mut()[k] = 0.0;
            out.im_mut()[k] = 0.0;
        }
    }
    Ok(HalfSpectrum {
        bins: out,
        origin_len: spec.origin_len,
        sample_rate: spec.sample_rate,
    })
}

/// Full frequency-denoiser forward pass over a real `[T, ...]` tensor.
pub fn pfd_forward(
    z: &Tensor,
    mask: &BandpassMask,
    psm: &PsmParams,
    ass: &AssParams,
) -> Result<Tensor> {
    let spec = crate::numerics::rdft(z, mask.sample_rate)?;
    let banded = apply_pbf(&spec, mask)?;
    let modulated = psm_forward(&banded, psm)?;
    let energy = ass_energy(&modulated);
    let selected = ass_select(&modulated, &energy, ass)?;
    crate::numerics::irdft(&selected)
}

/// PSM parameter leaves on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PsmVars {
    pub w_re: Var,
    pub w_im: Var,
    pub b_re: Var,
    pub b_im: Var,
}

/// Tape builder mirroring [`pfd_forward`], with the threshold as a
/// differentiable leaf.
pub fn pfd_tape(
    tape: &mut Tape,
    z: Var,
    mask: &BandpassMask,
    psm: &PsmVars,
    tau: Var,
    ste_temperature: f64,
    mode: SteMode,
) -> Var {
    let shape = tape.value(z).shape().to_vec();
    let t = shape[0];
    let stacked = tape.rdft_stack(z);
    let re = tape.pair_part(stacked, 0);
    let im = tape.pair_part(stacked, 1);
    let mask_const = tape.constant(mask.expanded(&shape[1..]));
    let re = tape.mul(re, mask_const);
    let im = tape.mul(im, mask_const);
    // M = ReLU applied separately to the real/imaginary parts of Z·W + B.
    let rr = tape.matmul(re, psm.w_re);
    let ii = tape.matmul(im, psm.w_im);
    let m_re = tape.sub(rr, ii);
    let m_re = tape.add_bias(m_re, psm.b_re);
    let m_re = tape.relu(m_re);
    let ri = tape.matmul(re, psm.w_im);
    let ir = tape.matmul(im, psm.w_re);
    let m_im = tape.add(ri, ir);
    let m_im = tape.add_bias(m_im, psm.b_im);
    let m_im = tape.relu(m_im);
    // Z̃ = M ⊙ Z (complex elementwise product).
    let ac = tape.mul(m_re, re);
    let bd = tape.mul(m_im, im);
    let z_re = tape.sub(ac, bd);
    let ad = tape.mul(m_re, im);
    let bc = tape.mul(m_im, re);
    let z_im = tape.add(ad, bc);
    // ASS threshold selection.
    let sel = tape.ass_mask(z_re, z_im, tau, ste_temperature, mode);
    let z_re = tape.mul(z_re, sel);
    let z_im = tape.mul(z_im, sel);
    tape.irdft(z_re, z_im, t)
}
