//! Real/complex tensor primitives and the real-input DFT/IDFT pair.
//!
//! Conventions: the forward transform is unnormalized, the inverse carries
//! the 1/T factor. Real signals are represented in the frequency domain by
//! the first `⌊T/2⌋+1` bins; the remaining bins are implied by conjugate
//! symmetry and reconstructed inside [`irdft`]. Bin `i` maps to the physical
//! frequency `i·fs/T` Hz.

use crate::error::{Error, Result};
use std::f64::consts::TAU;

/// A complex scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub fn new(re: f64, im: f64) -> Self {
        Complex { re, im }
    }

    pub fn abs(self) -> f64 {
        self.re.hypot(self.im)
    }
}

/// (a + jb)(c + jd) = (ac − bd) + j(ad + bc).
pub fn complex_mul(a: Complex, b: Complex) -> Complex {
    Complex {
        re: a.re * b.re - a.im * b.im,
        im: a.re * b.im + a.im * b.re,
    }
}

/// Dense row-major real tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Constructs a tensor, validating shape/data agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor value {v}")));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor that skips the finiteness scan.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Reinterprets the same data under a new shape.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Dense row-major complex tensor stored as parallel real/imaginary arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexTensor {
    pub fn new(shape: Vec<usize>, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != re.len() || n != im.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got re={} im={}",
                shape,
                n,
                re.len(),
                im.len()
            )));
        }
        if re.iter().chain(im.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("complex tensor value".into()));
        }
        Ok(ComplexTensor { shape, re, im })
    }

    pub(crate) fn raw(shape: Vec<usize>, re: Vec<f64>, im: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), re.len());
        debug_assert_eq!(re.len(), im.len());
        ComplexTensor { shape, re, im }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        ComplexTensor {
            shape: shape.to_vec(),
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut [f64] {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut [f64] {
        &mut self.im
    }

    pub fn get(&self, idx: usize) -> Complex {
        Complex::new(self.re[idx], self.im[idx])
    }
}

/// The first `⌊T/2⌋+1` DFT bins of a length-T real signal.
///
/// For even T, bins 0 and T/2 are purely real for any real input; [`irdft`]
/// treats their imaginary parts as zero after checking they are negligible.
#[derive(Debug, Clone)]
pub struct HalfSpectrum {
    pub bins: ComplexTensor,
    pub origin_len: usize,
    pub sample_rate: f64,
}

impl HalfSpectrum {
    pub fn n_bins(&self) -> usize {
        self.bins.shape()[0]
    }

    /// Physical frequency of bin `i` in Hz.
    pub fn freq(&self, i: usize) -> f64 {
        i as f64 * self.sample_rate / self.origin_len as f64
    }
}

pub fn n_half_bins(t: usize) -> usize {
    t / 2 + 1
}

/// Forward real DFT along axis 0: bin i = Σ_t x[t]·exp(−j2πit/T).
///
/// Any trailing axes are transformed independently.
pub fn rdft(x: &Tensor, sample_rate: f64) -> Result<HalfSpectrum> {
    let t = *x
        .shape()
        .first()
        .ok_or_else(|| Error::InvalidLength("rdft input has no axes".into()))?;
    if t < 2 {
        return Err(Error::InvalidLength(format!(
            "rdft needs time length >= 2, got {t}"
        )));
    }
    let rest: usize = x.shape()[1..].iter().product();
    let (re, im) = rdft_kernel(x.data(), t, rest);
    let mut shape = x.shape().to_vec();
    shape[0] = n_half_bins(t);
    Ok(HalfSpectrum {
        bins: ComplexTensor::raw(shape, re, im),
        origin_len: t,
        sample_rate,
    })
}

/// Raw forward transform over a `[t, rest]` row-major block.
pub(crate) fn rdft_kernel(data: &[f64], t: usize, rest: usize) -> (Vec<f64>, Vec<f64>) {
    let f = n_half_bins(t);
    let mut re = vec![0.0; f * rest];
    let mut im = vec![0.0; f * rest];
    let mut cos_row = vec![0.0; t];
    let mut sin_row = vec![0.0; t];
    for i in 0..f {
        fill_twiddles(i, t, &mut cos_row, &mut sin_row);
        let (re_out, im_out) = (&mut re[i * rest..(i + 1) * rest], &mut im[i * rest..(i + 1) * rest]);
        for ti in 0..t {
            let (c, s) = (cos_row[ti], sin_row[ti]);
            let row = &data[ti * rest..(ti + 1) * rest];
            for j in 0..rest {
                re_out[j] += row[j] * c;
                im_out[j] -= row[j] * s;
            }
        }
    }
    (re, im)
}

/// cos/sin of 2π·i·t/T for t = 0..T, with the angle reduced mod T first.
fn fill_twiddles(i: usize, t: usize, cos_row: &mut [f64], sin_row: &mut [f64]) {
    for ti in 0..t {
        let angle = TAU * ((i * ti) % t) as f64 / t as f64;
        cos_row[ti] = angle.cos();
        sin_row[ti] = angle.sin();
    }
}

/// Inverse of [`rdft`]: reconstructs the real signal via conjugate symmetry
/// with the 1/T-normalized inverse sum.
///
/// Errors if the purely-real bins (0 and, for even T, T/2) carry an
/// imaginary residue above `1e-9·(1 + max amplitude)` — that signals a bug
/// upstream, since no symmetric spectrum can produce one.
pub fn irdft(spec: &HalfSpectrum) -> Result<Tensor> {
    let t = spec.origin_len;
    let f = n_half_bins(t);
    if spec.bins.shape()[0] != f {
        return Err(Error::ShapeMismatch(format!(
            "spectrum has {} bins, expected {} for T={}",
            spec.bins.shape()[0],
            f,
            t
        )));
    }
    let rest: usize = spec.bins.shape()[1..].iter().product();
    check_real_bins(spec.bins.re(), spec.bins.im(), t, rest)?;
    let data = irdft_kernel(spec.bins.re(), spec.bins.im(), t, rest);
    let mut shape = spec.bins.shape().to_vec();
    shape[0] = t;
    Ok(Tensor::raw(shape, data))
}

fn check_real_bins(re: &[f64], im: &[f64], t: usize, rest: usize) -> Result<()> {
    let max_amp = re
        .iter()
        .zip(im)
        .map(|(r, i)| r.hypot(*i))
        .fold(0.0f64, f64::max);
    let tolerance = 1e-9 * (1.0 + max_amp);
    let mut residue = im[..rest].iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if t % 2 == 0 {
        let nyq = (t / 2) * rest;
        residue = im[nyq..nyq + rest]
            .iter()
            .fold(residue, |a, v| a.max(v.abs()));
    }
    if residue > tolerance {
        return Err(Error::SymmetryViolation { residue, tolerance });
    }
    Ok(())
}

/// Raw inverse transform over a `[f, rest]` block back to `[t, rest]`.
/// Imaginary parts of the purely-real bins are ignored.
pub(crate) fn irdft_kernel(re: &[f64], im: &[f64], t: usize, rest: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * rest];
    let inv_t = 1.0 / t as f64;
    // DC term.
    for ti in 0..t {
        let row = &mut out[ti * rest..(ti + 1) * rest];
        for j in 0..rest {
            row[j] = re[j];
        }
    }
    // Paired bins 1..=mid contribute 2(re·cos − im·sin).
    let mid = (t - 1) / 2;
    let mut cos_row = vec![0.0; t];
    let mut sin_row = vec![0.0; t];
    for i in 1..=mid {
        fill_twiddles(i, t, &mut cos_row, &mut sin_row);
        let (re_in, im_in) = (&re[i * rest..(i + 1) * rest], &im[i * rest..(i + 1) * rest]);
        for ti in 0..t {
            let (c, s) = (2.0 * cos_row[ti], 2.0 * sin_row[ti]);
            let row = &mut out[ti * rest..(ti + 1) * rest];
            for j in 0..rest {
                row[j] += re_in[j] * c - im_in[j] * s;
            }
        }
    }
    // Nyquist bin for even T alternates sign; its imaginary part is ignored.
    if t % 2 == 0 {
        let nyq = t / 2;
        let re_in = &re[nyq * rest..(nyq + 1) * rest];
        for ti in 0..t {
            let sign = if ti % 2 == 0 { 1.0 } else { -1.0 };
            let row = &mut out[ti * rest..(ti + 1) * rest];
            for j in 0..rest {
                row[j] += re_in[j] * sign;
            }
        }
    }
    for v in &mut out {
        *v *= inv_t;
    }
    out
}

/// Per-bin amplitude and phase. Phase uses atan2, with atan2(0,0) = 0.
pub fn amplitude_phase(spec: &HalfSpectrum) -> (Tensor, Tensor) {
    let shape = spec.bins.shape().to_vec();
    let amp: Vec<f64> = spec
        .bins
        .re()
        .iter()
        .zip(spec.bins.im())
        .map(|(r, i)| r.hypot(*i))
        .collect();
    let phase: Vec<f64> = spec
        .bins
        .re()
        .iter()
        .zip(spec.bins.im())
        .map(|(r, i)| if *r == 0.0 && *i == 0.0 { 0.0 } else { i.atan2(*r) })
        .collect();
    (Tensor::raw(shape.clone(), amp), Tensor::raw(shape, phase))
}

/// Circular convolution Y[v] = Σ_u m[u]·z[(v−u) mod T].
///
/// Brute-force double loop; serves as the independent oracle for the
/// convolution theorem.
pub fn circular_convolve(m: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    if m.len() != z.len() {
        return Err(Error::ShapeMismatch(format!(
            "circular_convolve lengths {} vs {}",
            m.len(),
            z.len()
        )));
    }
    let t = m.len();
    let mut out = vec![0.0; t];
    for v in 0..t {
        let mut acc = 0.0;
        for u in 0..t {
            acc += m[u] * z[(v + t - u) % t];
        }
        out[v] = acc;
    }
    Ok(out)
}
