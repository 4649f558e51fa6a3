//! Synthetic data generation with the pulse-plus-drift-plus-noise structure
//! of real face-video traces, frequency-condition construction, and file
//! I/O for signals and temporal maps.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{irdft, rdft, Tensor};
use crate::pfd::{apply_pbf, pbf_mask, HIGH_HZ, LOW_HZ};
use rand::Rng;
use rand_distr::StandardNormal;

/// Tensor file magic.
const TENSOR_MAGIC: &[u8; 4] = b"FQPT";
const TENSOR_VERSION: u32 = 1;

/// A length-T real time series with its sampling rate.
#[derive(Debug, Clone)]
pub struct PulseSignal {
    pub samples: Tensor,
    pub sample_rate: f64,
}

/// A T×N×C multi-region temporal map.
#[derive(Debug, Clone)]
pub struct MSTmap {
    pub values: Tensor,
    pub sample_rate: f64,
}

/// Parameters of one synthetic recording.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub t: usize,
    pub sample_rate: f64,
    pub n: usize,
    pub c: usize,
    /// Heart rate in beats per minute; must sit inside the passband.
    pub hr_bpm: f64,
    /// Relative amplitudes of the fundamental and higher harmonics.
    pub harmonic_amps: Vec<f64>,
    /// Out-of-band drift frequency, strictly below the passband.
    pub drift_freq_hz: f64,
    pub drift_amp: f64,
    /// Standard deviation of the band-limited in-band noise.
    pub inband_noise_std: f64,
    /// Per-region multiplicative gain jitter range (±).
    pub roi_gain_jitter: f64,
    /// Per-region phase jitter range in radians (±).
    pub roi_phase_jitter: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t < 8 {
            return Err(Error::Config(format!("T must be >= 8, got {}", self.t)));
        }
        if self.n < 1 || self.c < 1 {
            return Err(Error::Config("N and C must be >= 1".into()));
        }
        let hz = self.hr_bpm / 60.0;
        if !(LOW_HZ..=HIGH_HZ).contains(&hz) {
            return Err(Error::Config(format!(
                "heart rate {} bpm ({hz:.3} Hz) is outside the {LOW_HZ}-{HIGH_HZ} Hz band",
                self.hr_bpm
            )));
        }
        if self.drift_freq_hz >= LOW_HZ {
            return Err(Error::Config(format!(
                "drift frequency {} Hz must stay below the passband edge {LOW_HZ} Hz",
                self.drift_freq_hz
            )));
        }
        if self.harmonic_amps.is_empty() {
            return Err(Error::Config("need at least one harmonic".into()));
        }
        pbf_mask(self.t, self.sample_rate)?;
        Ok(())
    }
}

fn zscore(data: &mut [f64]) -> Result<()> {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(Error::DegenerateSignal(
            "cannot normalize a constant signal".into(),
        ));
    }
    let istd = 1.0 / var.sqrt();
    for v in data {
        *v = (*v - mean) * istd;
    }
    Ok(())
}

/// Generates a clean quasi-periodic pulse: a sum of harmonic cosines with
/// random phases, z-score normalized.
pub fn gen_pulse<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Result<PulseSignal> {
    spec.validate()?;
    let f0 = spec.hr_bpm / 60.0;
    let phases: Vec<f64> = (0..spec.harmonic_amps.len())
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let mut data: Vec<f64> = (0..spec.t)
        .map(|t| {
            spec.harmonic_amps
                .iter()
                .zip(&phases)
                .enumerate()
                .map(|(h, (amp, phi))| {
                    let freq = (h + 1) as f64 * f0;
                    amp * (std::f64::consts::TAU * freq * t as f64 / spec.sample_rate + phi).cos()
                })
                .sum()
        })
        .collect();
    zscore(&mut data)?;
    Ok(PulseSignal {
        samples: Tensor::raw(vec![spec.t], data),
        sample_rate: spec.sample_rate,
    })
}

/// Band-limits a trace to the pulse band (spectral zeroing outside
/// [0.66, 3.0] Hz). Works on any tensor whose first axis is time.
fn bandpass(x: &Tensor, sample_rate: f64) -> Result<Tensor> {
    let mask = pbf_mask(x.shape()[0], sample_rate)?;
    let spec = rdft(x, sample_rate)?;
    irdft(&apply_pbf(&spec, &mask)?)
}

/// Mixes a pulse into a noisy multi-region map: each (region, channel)
/// trace is a gain- and phase-jittered copy of the pulse plus a
/// low-frequency drift sinusoid plus band-limited Gaussian noise.
pub fn gen_mstmap<R: Rng>(spec: &SynthSpec, pulse: &PulseSignal, rng: &mut R) -> Result<MSTmap> {
    spec.validate()?;
    if pulse.samples.shape() != [spec.t] {
        return Err(Error::ShapeMismatch(format!(
            "pulse length {:?} does not match spec T={}",
            pulse.samples.shape(),
            spec.t
        )));
    }
    let (t, n, c) = (spec.t, spec.n, spec.c);
    let f0 = spec.hr_bpm / 60.0;
    let mut values = vec![0.0; t * n * c];

    for ni in 0..n {
        let gain = 1.0 + rng.random_range(-spec.roi_gain_jitter..=spec.roi_gain_jitter);
        let phase = rng.random_range(-spec.roi_phase_jitter..=spec.roi_phase_jitter);
        // A phase offset on the fundamental corresponds to a fractional
        // time shift; apply the same shift to every harmonic.
        let shift = if f0 > 0.0 {
            phase / (std::f64::consts::TAU * f0)
        } else {
            0.0
        };
        let drift_phi = rng.random_range(0.0..std::f64::consts::TAU);
        for ci in 0..c {
            // Channel gains mimic color channels carrying the pulse with
            // different strengths.
            let channel_gain = 1.0 / (1.0 + ci as f64 * 0.25);
            // Fractional-shift resample of the pulse via its harmonics
            // would need the generating phases; instead shift the sampled
            // pulse with linear interpolation on the circular buffer.
            for ti in 0..t {
                let pos = ti as f64 + shift * spec.sample_rate;
                let base = pos.floor();
                let frac = pos - base;
                let i0 = base.rem_euclid(t as f64) as usize;
                let i1 = (i0 + 1) % t;
                let p = pulse.samples.data()[i0] * (1.0 - frac)
                    + pulse.samples.data()[i1] * frac;
                let drift = spec.drift_amp
                    * (std::f64::consts::TAU * spec.drift_freq_hz * ti as f64 / spec.sample_rate
                        + drift_phi)
                        .sin();
                values[(ti * n + ni) * c + ci] = gain * channel_gain * p + drift;
            }
        }
    }

    let mut map = Tensor::raw(vec![t, n, c], values);
    if spec.inband_noise_std > 0.0 {
        let white = Tensor::raw(
            vec![t, n, c],
            (0..t * n * c)
                .map(|_| spec.inband_noise_std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        let inband = bandpass(&white, spec.sample_rate)?;
        for (v, w) in map.data_mut().iter_mut().zip(inband.data()) {
            *v += w;
        }
    }
    Ok(MSTmap {
        values: map,
        sample_rate: spec.sample_rate,
    })
}

/// The frequency condition: every trace of the map band-limited to the
/// pulse band.
pub fn make_freq_condition(x: &MSTmap) -> Result<MSTmap> {
    Ok(MSTmap {
        values: bandpass(&x.values, x.sample_rate)?,
        sample_rate: x.sample_rate,
    })
}

/// Mean over regions and channels of a map, as a 1-D trace.
pub fn mean_trace(x: &MSTmap) -> Tensor {
    let t = x.values.shape()[0];
    let rest: usize = x.values.shape()[1..].iter().product();
    let mut out = vec![0.0; t];
    for (ti, o) in out.iter_mut().enumerate() {
        *o = x.values.data()[ti * rest..(ti + 1) * rest].iter().sum::<f64>() / rest as f64;
    }
    Tensor::raw(vec![t], out)
}

/// Writes a tensor: magic, version, rank, dims, 64-bit little-endian
/// row-major payload.
pub fn save_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
    for d in tensor.shape() {
        w.write_all(&(*d as u32).to_le_bytes())?;
    }
    for v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a tensor written by [`save_tensor`].
pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad tensor magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank == 0 {
        return Err(Error::Format("zero-rank tensor".into()));
    }
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut len: usize = 1;
    for _ in 0..rank {
        r.read_exact(&mut b4)?;
        let d = u32::from_le_bytes(b4) as usize;
        len = len
            .checked_mul(d)
            .ok_or_else(|| Error::Format("tensor dimensions overflow".into()))?;
        shape.push(d);
    }
    let mut data = Vec::with_capacity(len);
    let mut b8 = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    // Trailing bytes mean the header lied about the shape.
    if r.read(&mut b8)? != 0 {
        return Err(Error::Format("trailing bytes after tensor payload".into()));
    }
    Ok(Tensor::raw(shape, data))
}

/// Writes a signal as text CSV with header `t,value` and 17 significant
/// digits per value.
pub fn save_signal_csv(path: &Path, pulse: &PulseSignal) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "t,value")?;
    for (t, v) in pulse.samples.data().iter().enumerate() {
        writeln!(w, "{t},{v:.16e}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a signal written by [`save_signal_csv`]. The sampling rate is not
/// stored in the file and must be supplied.
pub fn load_signal_csv(path: &Path, sample_rate: f64) -> Result<PulseSignal> {
    let r = BufReader::new(File::open(path)?);
    let mut data = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != "t,value" {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header \"t,value\", got {line:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.splitn(2, ',');
        let t_cell = cells.next().unwrap_or_default();
        let v_cell = cells.next().ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "missing value column".into(),
        })?;
        let t: usize = t_cell.trim().parse().map_err(|_| Error::Parse {
            line: i + 1,
            message: format!("bad sample index {t_cell:?}"),
        })?;
        if t != data.len() {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("sample index {t} out of order, expected {}", data.len()),
            });
        }
        let v: f64 = v_cell.trim().parse().map_err(|_| Error::Parse {
            line: i + 1,
            message: format!("bad value {v_cell:?}"),
        })?;
        data.push(v);
    }
    if data.is_empty() {
        return Err(Error::InsufficientData("signal file has no samples".into()));
    }
    Ok(PulseSignal {
        samples: Tensor::raw(vec![data.len()], data),
        sample_rate,
    })
}
