//! Training: the correlation-plus-spectrum loss, reverse-mode gradients
//! through the full denoiser, the Adam optimizer, the training loop, and
//! the finite-difference gradient verification harness.

use std::io::Write;

use crate::autodiff::{SteMode, Tape, Var};
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{build_forward, DenoiserParams, ModelConfig, ModelVars};
use crate::numerics::{n_half_bins, rdft, Tensor};
use crate::pfd::BandpassMask;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Guard added under the square root of the correlation denominator so the
/// gradient stays finite as either variance approaches zero.
const PEARSON_GUARD: f64 = 1e-24;

/// Centered correlation coefficient of two equal-length signals.
pub fn pearson(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.shape().len() != 1 || a.len() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "pearson expects two equal-length 1-D signals of length >= 2, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.len() as f64;
    let ma = a.data().iter().sum::<f64>() / n;
    let mb = b.data().iter().sum::<f64>() / n;
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x - ma, y - mb);
        num += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::DegenerateSignal(
            "pearson is undefined for a constant signal".into(),
        ));
    }
    Ok((num / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Training loss: (1 − pearson) plus the mean over frequency bins of the
/// squared complex magnitude of the spectrum difference.
pub fn loss(y_hat: &Tensor, y0: &Tensor) -> Result<f64> {
    let r = pearson(y_hat, y0)?;
    let t = y0.len();
    let fs = 1.0; // the spectral term never uses physical frequencies
    let sa = rdft(y_hat, fs)?;
    let sb = rdft(y0, fs)?;
    let f = n_half_bins(t);
    let mut acc = 0.0;
    for i in 0..f {
        let dre = sa.bins.re()[i] - sb.bins.re()[i];
        let dim = sa.bins.im()[i] - sb.bins.im()[i];
        acc += dre * dre + dim * dim;
    }
    Ok((1.0 - r) + acc / f as f64)
}

/// Correlation of two equal-shape 1-D nodes, composed from tape primitives.
pub fn pearson_tape(tape: &mut Tape, a: Var, b: Var) -> Var {
    let ma = tape.mean_all(a);
    let ca = tape.sub(a, ma);
    let mb = tape.mean_all(b);
    let cb = tape.sub(b, mb);
    let prod = tape.mul(ca, cb);
    let num = tape.mean_all(prod);
    let aa = tape.mul(ca, ca);
    let va = tape.mean_all(aa);
    let bb = tape.mul(cb, cb);
    let vb = tape.mean_all(bb);
    let vv = tape.mul(va, vb);
    let vv = tape.affine(vv, 1.0, PEARSON_GUARD);
    let denom = tape.sqrt(vv);
    tape.div(num, denom)
}

/// Tape version of [`loss`].
pub fn loss_tape(tape: &mut Tape, y_hat: Var, y0: Var) -> Var {
    let r = pearson_tape(tape, y_hat, y0);
    let time_term = tape.affine(r, -1.0, 1.0);
    let sa = tape.rdft_stack(y_hat);
    let sb = tape.rdft_stack(y0);
    let d = tape.sub(sa, sb);
    let sq = tape.mul(d, d);
    let total = tape.sum_all(sq);
    let f = n_half_bins(tape.value(y_hat).len());
    let freq_term = tape.affine(total, 1.0 / f as f64, 0.0);
    tape.add(time_term, freq_term)
}

/// Builds forward + loss for one sample on a fresh tape and returns the
/// loss value together with the parameter gradients in canonical order.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss_and_grads(
    params: &DenoiserParams,
    config: &ModelConfig,
    mask: &BandpassMask,
    x: &Tensor,
    cp: &Tensor,
    y0: &Tensor,
    k: usize,
    eps: &Tensor,
    mode: SteMode,
) -> Result<(f64, Vec<Tensor>)> {
    let y_k = q_sample(y0, k, eps, &crate::diffusion::make_schedule(
        config.k_steps,
        config.beta_start,
        config.beta_end,
    )?)?;
    let ste_temperature = params
        .layers
        .first()
        .map(|l| l.ste_temperature)
        .unwrap_or(1.0);
    let mut tape = Tape::new();
    let vars = ModelVars::bind(&mut tape, params);
    let xv = tape.constant(x.clone());
    let cpv = tape.constant(cp.clone());
    let ykv = tape.constant(y_k);
    let y0v = tape.constant(y0.clone());
    let y_hat = build_forward(
        &mut tape,
        &vars,
        config,
        mask,
        xv,
        cpv,
        ykv,
        k,
        mode,
        ste_temperature,
    );
    let l = loss_tape(&mut tape, y_hat, y0v);
    let grads = tape.backward(l);
    let flat = vars.flat();
    let out = flat.iter().map(|v| grads[v.index()].clone()).collect();
    Ok((tape.value(l).data()[0], out))
}

/// Adam optimizer state, shaped like the parameter list in canonical order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &DenoiserParams, lr: f64) -> Self {
        let mut m = Vec::new();
        params.visit(&mut |_, t| m.push(Tensor::zeros(t.shape())));
        let v = m.clone();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    /// One bias-corrected update with the given gradients (canonical order).
    pub fn update(&mut self, params: &mut DenoiserParams, grads: &[Tensor]) -> Result<()> {
        let mut count = 0;
        params.visit(&mut |_, _| count += 1);
        if grads.len() != count {
            return Err(Error::ShapeMismatch(format!(
                "expected {count} gradient tensors, got {}",
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut i = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let mut shape_err = None;
        params.visit_mut(&mut |name, t| {
            if grads[i].shape() != t.shape() {
                shape_err = Some(name);
            } else {
                for ((p, g), (mm, vv)) in t
                    .data_mut()
                    .iter_mut()
                    .zip(grads[i].data())
                    .zip(m[i].data_mut().iter_mut().zip(v[i].data_mut()))
                {
                    *mm = b1 * *mm + (1.0 - b1) * g;
                    *vv = b2 * *vv + (1.0 - b2) * g * g;
                    let m_hat = *mm / bc1;
                    let v_hat = *vv / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            i += 1;
        });
        if let Some(name) = shape_err {
            return Err(Error::ShapeMismatch(format!(
                "gradient shape mismatch at {name}"
            )));
        }
        Ok(())
    }
}

/// One training sample: raw map, filtered condition map, clean target.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub x: Tensor,
    pub cp: Tensor,
    pub y0: Tensor,
}

/// One optimizer step over a batch: per sample draw a uniform step index
/// and fresh noise, corrupt the target, run forward + loss, and Adam-update
/// with the gradient averaged over non-degenerate samples. Returns the mean
/// loss. Randomness is consumed sequentially before the (parallel) pass so
/// the trajectory is reproducible regardless of worker count.
pub fn train_step<R: Rng>(
    params: &mut DenoiserParams,
    config: &ModelConfig,
    mask: &BandpassMask,
    batch: &[&TrainSample],
    sched: &NoiseSchedule,
    adam: &mut AdamState,
    rng: &mut R,
) -> Result<f64> {
    let mut jobs = Vec::new();
    for sample in batch {
        let k = rng.random_range(1..=sched.k_steps);
        let eps = Tensor::raw(
            vec![config.t],
            (0..config.t)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        let constant = sample
            .y0
            .data()
            .iter()
            .all(|v| *v == sample.y0.data()[0]);
        if constant {
            eprintln!("warning: skipping degenerate (constant) training target");
            continue;
        }
        jobs.push((*sample, k, eps));
    }
    if jobs.is_empty() {
        return Err(Error::InsufficientData(
            "batch contains no usable training targets".into(),
        ));
    }
    let results: Vec<Result<(f64, Vec<Tensor>)>> = jobs
        .par_iter()
        .map(|(sample, k, eps)| {
            sample_loss_and_grads(
                params,
                config,
                mask,
                &sample.x,
                &sample.cp,
                &sample.y0,
                *k,
                eps,
                SteMode::Hard,
            )
        })
        .collect();
    let mut mean_loss = 0.0;
    let mut mean_grads: Option<Vec<Tensor>> = None;
    let n = results.len() as f64;
    for r in results {
        let (l, grads) = r?;
        mean_loss += l / n;
        match &mut mean_grads {
            None => {
                let mut scaled = grads;
                for g in &mut scaled {
                    for v in g.data_mut() {
                        *v /= n;
                    }
                }
                mean_grads = Some(scaled);
            }
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                        *av += gv / n;
                    }
                }
            }
        }
    }
    adam.update(params, &mean_grads.unwrap())?;
    Ok(mean_loss)
}

/// Runs `steps` optimizer steps over uniformly drawn batches, appending
/// `step,loss,tau,lr` lines to `log` when given. Returns the per-step
/// losses.
#[allow(clippy::too_many_arguments)]
pub fn train_loop<R: Rng>(
    params: &mut DenoiserParams,
    config: &ModelConfig,
    dataset: &[TrainSample],
    sched: &NoiseSchedule,
    adam: &mut AdamState,
    steps: usize,
    batch_size: usize,
    rng: &mut R,
    mut log: Option<&mut dyn Write>,
    start_step: u64,
) -> Result<Vec<f64>> {
    if dataset.is_empty() || batch_size == 0 {
        return Err(Error::InsufficientData(
            "training needs a non-empty dataset and batch".into(),
        ));
    }
    let mask = config.mask()?;
    let mut losses = Vec::with_capacity(steps);
    for s in 0..steps {
        let batch: Vec<&TrainSample> = (0..batch_size)
            .map(|_| &dataset[rng.random_range(0..dataset.len())])
            .collect();
        let l = train_step(params, config, &mask, &batch, sched, adam, rng)?;
        if let Some(w) = log.as_deref_mut() {
            let tau = params
                .layers
                .first()
                .map(|layer| layer.tau.data()[0])
                .unwrap_or(0.0);
            writeln!(w, "{},{:.17e},{:.17e},{:.17e}", start_step + s as u64 + 1, l, tau, adam.lr)?;
        }
        losses.push(l);
    }
    Ok(losses)
}

/// Result of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Tensor name and coordinate where the maximum occurred.
    pub worst: Option<(String, usize)>,
}

/// Verifies analytic gradients (canonical order) against central
/// differences of `eval` on a random subsample of at least
/// `coords_per_tensor` coordinates per tensor (all of them for small
/// tensors). The relative error uses a small absolute floor so that
/// near-zero gradient pairs are compared absolutely.
pub fn grad_check<F, R>(
    eval: F,
    params: &DenoiserParams,
    analytic: &[Tensor],
    step: f64,
    coords_per_tensor: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&DenoiserParams) -> Result<f64>,
    R: Rng,
{
    let mut names = Vec::new();
    params.visit(&mut |name, t| names.push((name, t.len())));
    if names.len() != analytic.len() {
        return Err(Error::ShapeMismatch(format!(
            "expected {} gradient tensors, got {}",
            names.len(),
            analytic.len()
        )));
    }
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for (ti, (name, len)) in names.iter().enumerate() {
        let coords: Vec<usize> = if *len <= coords_per_tensor {
            (0..*len).collect()
        } else {
            // Sample without replacement.
            let mut all: Vec<usize> = (0..*len).collect();
            for i in 0..coords_per_tensor {
                let j = rng.random_range(i..*len);
                all.swap(i, j);
            }
            all.truncate(coords_per_tensor);
            all
        };
        for &ci in &coords {
            let mut plus = params.clone();
            let mut minus = params.clone();
            let mut idx = 0;
            plus.visit_mut(&mut |_, t| {
                if idx == ti {
                    t.data_mut()[ci] += step;
                }
                idx += 1;
            });
            idx = 0;
            minus.visit_mut(&mut |_, t| {
                if idx == ti {
                    t.data_mut()[ci] -= step;
                }
                idx += 1;
            });
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let an = analytic[ti].data()[ci];
            let rel = (fd - an).abs() / (fd.abs().max(an.abs()) + 1e-3);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), ci));
            }
        }
    }
    Ok(report)
}
