//! Command-line entry point: synthetic dataset generation, training,
//! denoising inference, evaluation, and the self-check property suite.
//!
//! Exit codes: 0 success, 1 property/assertion failure, 2 usage or input
//! error.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::SteMode;
use crate::data::{
    gen_mstmap, gen_pulse, load_signal_csv, load_tensor, make_freq_condition, save_signal_csv,
    save_tensor, PulseSignal, SynthSpec,
};
use crate::diffusion::{make_schedule, posterior_mean, sample};
use crate::error::{Error, Result};
use crate::metrics::{hr_from_spectrum, EvalReport};
use crate::model::{
    denoise_forward, init_params, load_checkpoint, save_checkpoint, ModelConfig,
};
use crate::numerics::{amplitude_phase, circular_convolve, irdft, rdft, Tensor};
use crate::training::{
    grad_check, sample_loss_and_grads, train_loop, AdamState, TrainSample,
};

#[derive(Parser)]
#[command(name = "freqphys", about = "Frequency-guided diffusion pulse denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of noisy maps and clean targets.
    Gen(GenArgs),
    /// Train a denoiser on a generated dataset.
    Train(TrainArgs),
    /// Run diffusion inference with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Compare predicted and ground-truth signals.
    Eval(EvalArgs),
    /// Run the numerical property suite.
    Check,
}

#[derive(Args, Debug, Clone)]
pub struct GenArgs {
    /// Window length in samples.
    #[arg(long, default_value_t = 128)]
    pub t: usize,
    /// Sampling rate in Hz.
    #[arg(long, default_value_t = 30.0)]
    pub fs: f64,
    /// Number of spatial regions.
    #[arg(long, default_value_t = 4)]
    pub rois: usize,
    /// Channels per region.
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    /// Center heart rate in bpm.
    #[arg(long, default_value_t = 72.0)]
    pub hr: f64,
    /// Per-sample heart-rate spread (uniform ±, bpm).
    #[arg(long, default_value_t = 0.0)]
    pub hr_spread: f64,
    /// Low-frequency drift amplitude.
    #[arg(long, default_value_t = 2.0)]
    pub drift_amp: f64,
    /// Drift frequency in Hz (must stay below the passband).
    #[arg(long, default_value_t = 0.2)]
    pub drift_freq: f64,
    /// Standard deviation of band-limited in-band noise.
    #[arg(long, default_value_t = 0.5)]
    pub inband_std: f64,
    /// Per-region gain jitter (±).
    #[arg(long, default_value_t = 0.2)]
    pub gain_jitter: f64,
    /// Per-region phase jitter in radians (±).
    #[arg(long, default_value_t = 0.3)]
    pub phase_jitter: f64,
    /// Number of samples.
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    /// Master seed.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Dataset directory produced by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Model config file (`key = value` lines); defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to resume from; its config takes precedence.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Optimizer steps to run.
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// Batch size.
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Training randomness seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training-log CSV path (defaults to the checkpoint path + ".log.csv").
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct DenoiseArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of input samples (from `gen`).
    #[arg(long)]
    pub input: PathBuf,
    /// Number of deterministic inference steps.
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Seed for the initial noise draw.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory for predicted signals and spectra.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Directory of predicted signals (`*_pred.csv`).
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth signals (`*_y.csv`).
    #[arg(long)]
    pub gt: PathBuf,
    /// Sampling rate in Hz.
    #[arg(long, default_value_t = 30.0)]
    pub fs: f64,
    /// Optional report CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses and dispatches; returns the process exit code.
pub fn run() -> i32 {
    if let Ok(threads) = std::env::var("FREQPHYS_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Denoise(args) => cmd_denoise(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Check => {
            return if cmd_check(&mut std::io::stdout()) { 0 } else { 1 };
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn sample_stem(i: usize) -> String {
    format!("sample{i:04}")
}

/// Generates `count` samples: per sample a noisy map, its band-limited
/// condition map, and the clean target, plus a manifest of seeds and heart
/// rates.
pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    let mut master = ChaCha8Rng::seed_from_u64(args.seed);
    let manifest_path = args.out.join("manifest.csv");
    let mut manifest = BufWriter::new(File::create(&manifest_path)?);
    writeln!(manifest, "sample,seed,hr_bpm")?;
    for i in 0..args.count {
        let sample_seed: u64 = master.random();
        let hr = if args.hr_spread > 0.0 {
            args.hr + master.random_range(-args.hr_spread..=args.hr_spread)
        } else {
            args.hr
        };
        let spec = SynthSpec {
            t: args.t,
            sample_rate: args.fs,
            n: args.rois,
            c: args.channels,
            hr_bpm: hr,
            harmonic_amps: vec![1.0, 0.3],
            drift_freq_hz: args.drift_freq,
            drift_amp: args.drift_amp,
            inband_noise_std: args.inband_std,
            roi_gain_jitter: args.gain_jitter,
            roi_phase_jitter: args.phase_jitter,
            seed: sample_seed,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let pulse = gen_pulse(&spec, &mut rng)?;
        let map = gen_mstmap(&spec, &pulse, &mut rng)?;
        let cp = make_freq_condition(&map)?;
        let stem = sample_stem(i);
        save_tensor(&args.out.join(format!("{stem}_x.fqpt")), &map.values)?;
        save_tensor(&args.out.join(format!("{stem}_cp.fqpt")), &cp.values)?;
        save_signal_csv(&args.out.join(format!("{stem}_y.csv")), &pulse)?;
        writeln!(manifest, "{i},{sample_seed},{hr:.6}")?;
    }
    manifest.flush()?;
    Ok(())
}

/// Parses a line-based `key = value` model config; unknown keys are
/// rejected with their line number. Missing keys keep desk-scale defaults.
pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut config = ModelConfig::desk_scale();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected `key = value`, got {raw:?}"),
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| Error::Parse {
            line: i + 1,
            message: format!("bad {what} value {value:?}"),
        };
        match key {
            "t" => config.t = value.parse().map_err(|_| bad("t"))?,
            "n" => config.n = value.parse().map_err(|_| bad("n"))?,
            "c" => config.c = value.parse().map_err(|_| bad("c"))?,
            "d" => config.d = value.parse().map_err(|_| bad("d"))?,
            "l" => config.l = value.parse().map_err(|_| bad("l"))?,
            "k" => config.k_steps = value.parse().map_err(|_| bad("k"))?,
            "heads" => config.heads = value.parse().map_err(|_| bad("heads"))?,
            "seed" => config.seed = value.parse().map_err(|_| bad("seed"))?,
            "beta_start" => config.beta_start = value.parse().map_err(|_| bad("beta_start"))?,
            "beta_end" => config.beta_end = value.parse().map_err(|_| bad("beta_end"))?,
            "fs" => config.sample_rate = value.parse().map_err(|_| bad("fs"))?,
            other => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("unknown config key {other:?}"),
                })
            }
        }
    }
    config.validate()?;
    Ok(config)
}

/// Loads every sample of a generated dataset, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<TrainSample>> {
    let manifest = fs::read_to_string(dir.join("manifest.csv"))?;
    let mut samples = Vec::new();
    for (i, line) in manifest.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let index: usize = line
            .split(',')
            .next()
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad manifest line {line:?}"),
            })?;
        let stem = sample_stem(index);
        let x = load_tensor(&dir.join(format!("{stem}_x.fqpt")))?;
        let cp = load_tensor(&dir.join(format!("{stem}_cp.fqpt")))?;
        let y = load_signal_csv(&dir.join(format!("{stem}_y.csv")), 0.0)?;
        samples.push(TrainSample {
            x,
            cp,
            y0: y.samples,
        });
    }
    Ok(samples)
}

/// Trains (or resumes) a model on a generated dataset and writes the
/// checkpoint plus a `step,loss,tau,lr` log.
pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    if dataset.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no samples found in {}",
            args.data.display()
        )));
    }
    let (config, mut params, start_step) = match &args.resume {
        Some(path) => load_checkpoint(path)?,
        None => {
            let config = match &args.config {
                Some(path) => parse_config(&fs::read_to_string(path)?)?,
                None => ModelConfig::desk_scale(),
            };
            let params = init_params(&config)?;
            (config, params, 0)
        }
    };
    let expect = [config.t, config.n, config.c];
    for (i, s) in dataset.iter().enumerate() {
        if s.x.shape() != expect || s.y0.shape() != [config.t] {
            return Err(Error::ShapeMismatch(format!(
                "sample {i} has shape {:?}/{:?}, config expects {:?}",
                s.x.shape(),
                s.y0.shape(),
                expect
            )));
        }
    }
    let sched = make_schedule(config.k_steps, config.beta_start, config.beta_end)?;
    let mut adam = AdamState::new(&params, args.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(start_step));
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("log.csv"));
    let mut log = BufWriter::new(File::create(&log_path)?);
    writeln!(log, "step,loss,tau,lr")?;
    train_loop(
        &mut params,
        &config,
        &dataset,
        &sched,
        &mut adam,
        args.steps,
        args.batch,
        &mut rng,
        Some(&mut log),
        start_step,
    )?;
    log.flush()?;
    save_checkpoint(&args.out, &config, &params, start_step + args.steps as u64)?;
    Ok(())
}

/// Runs deterministic reverse diffusion for one input pair.
pub fn denoise_one(
    params: &crate::model::DenoiserParams,
    config: &ModelConfig,
    x: &Tensor,
    cp: &Tensor,
    num_steps: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let sched = make_schedule(config.k_steps, config.beta_start, config.beta_end)?;
    sample(
        |y_k, k| denoise_forward(params, config, y_k, x, cp, k),
        config.t,
        &sched,
        num_steps,
        rng,
    )
}

/// Denoises every sample of an input directory, writing predicted signals
/// and their amplitude spectra.
pub fn cmd_denoise(args: &DenoiseArgs) -> Result<()> {
    let (config, params, _) = load_checkpoint(&args.model)?;
    fs::create_dir_all(&args.out)?;
    let manifest = fs::read_to_string(args.input.join("manifest.csv"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    for (i, line) in manifest.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let index: usize = line
            .split(',')
            .next()
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad manifest line {line:?}"),
            })?;
        let stem = sample_stem(index);
        let x = load_tensor(&args.input.join(format!("{stem}_x.fqpt")))?;
        let cp = load_tensor(&args.input.join(format!("{stem}_cp.fqpt")))?;
        let pred = denoise_one(&params, &config, &x, &cp, args.steps, &mut rng)?;
        let signal = PulseSignal {
            samples: pred,
            sample_rate: config.sample_rate,
        };
        save_signal_csv(&args.out.join(format!("{stem}_pred.csv")), &signal)?;
        let spec = rdft(&signal.samples, config.sample_rate)?;
        let (amps, _) = amplitude_phase(&spec);
        let mut w = BufWriter::new(File::create(
            args.out.join(format!("{stem}_spectrum.csv")),
        )?);
        writeln!(w, "freq_hz,amplitude")?;
        for b in 0..spec.n_bins() {
            writeln!(w, "{:.6},{:.10e}", spec.freq(b), amps.data()[b])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn signals_by_stem(dir: &Path, suffix: &str, fs: f64) -> Result<Vec<(String, PulseSignal)>> {
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if let Some(stem) = name.strip_suffix(suffix) {
            out.push((stem.to_string(), load_signal_csv(&path, fs)?));
        }
    }
    Ok(out)
}

/// Pairs predicted and ground-truth signals by sample stem, estimates heart
/// rate for each, and prints the aggregate report.
pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let preds = signals_by_stem(&args.pred, "_pred.csv", args.fs)?;
    let gts = signals_by_stem(&args.gt, "_y.csv", args.fs)?;
    let gt_map: std::collections::HashMap<&str, &PulseSignal> =
        gts.iter().map(|(s, p)| (s.as_str(), p)).collect();
    let mut pairs = Vec::new();
    for (stem, pred) in &preds {
        if let Some(gt) = gt_map.get(stem.as_str()) {
            pairs.push((hr_from_spectrum(gt)?, hr_from_spectrum(pred)?));
        }
    }
    if pairs.is_empty() {
        return Err(Error::InsufficientData(
            "no matching prediction/ground-truth pairs".into(),
        ));
    }
    let report = EvalReport::from_pairs(pairs)?;
    println!("samples: {}", report.pairs.len());
    println!("mae_bpm: {:.4}", report.mae_bpm);
    println!("rmse_bpm: {:.4}", report.rmse_bpm);
    println!("sd_bpm: {:.4}", report.sd_bpm);
    if report.pearson_r.is_nan() {
        println!("pearson_r: undefined (needs >= 2 non-constant pairs)");
    } else {
        println!("pearson_r: {:.4}", report.pearson_r);
    }
    if let Some(path) = &args.out {
        let mut w = BufWriter::new(File::create(path)?);
        report.write_csv(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Property suite
// ---------------------------------------------------------------------------

/// One suite entry: name, pass flag, detail string.
pub type CheckResult = (String, bool, String);

fn check_convolution_theorem() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for t in [8usize, 64, 300] {
        for _ in 0..100 {
            let m: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
            let conv = circular_convolve(&m, &z).unwrap();
            let sc = rdft(&Tensor::raw(vec![t], conv), 1.0).unwrap();
            let sm = rdft(&Tensor::raw(vec![t], m.clone()), 1.0).unwrap();
            let sz = rdft(&Tensor::raw(vec![t], z.clone()), 1.0).unwrap();
            for i in 0..sc.n_bins() {
                let re = sm.bins.re()[i] * sz.bins.re()[i] - sm.bins.im()[i] * sz.bins.im()[i];
                let im = sm.bins.re()[i] * sz.bins.im()[i] + sm.bins.im()[i] * sz.bins.re()[i];
                worst = worst
                    .max((re - sc.bins.re()[i]).abs())
                    .max((im - sc.bins.im()[i]).abs());
            }
        }
    }
    (
        "convolution theorem".into(),
        worst < 1e-9,
        format!("max deviation {worst:.3e} (limit 1e-9)"),
    )
}

fn check_round_trip() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut ok = true;
    let mut detail = String::new();
    for t in [8usize, 127, 300] {
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 1.0;
        for _ in 0..100 {
            let x = Tensor::raw(
                vec![t],
                (0..t).map(|_| rng.random_range(-10.0..10.0)).collect(),
            );
            let back = irdft(&rdft(&x, 1.0).unwrap()).unwrap();
            let max_x = x.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
            scale = scale.max(1.0 + max_x);
            for (a, b) in back.data().iter().zip(x.data()) {
                worst = worst.max((a - b).abs());
            }
        }
        if worst >= 1e-10 * scale {
            ok = false;
        }
        detail = format!("{detail}T={t}: {worst:.3e}; ");
    }
    ("dft round trip".into(), ok, detail)
}

fn check_diffusion_closed_form() -> CheckResult {
    let sched = make_schedule(10, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let y0 = 1.3;
    let trials = 100_000;
    let mut ok = true;
    let mut detail = String::new();
    for k in [1usize, 5, 10] {
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..trials {
            let mut y = y0;
            for s in 1..=k {
                let e: f64 = rng.sample(StandardNormal);
                y = sched.alpha[s - 1].sqrt() * y + sched.beta[s - 1].sqrt() * e;
            }
            sum += y;
            sum2 += y * y;
        }
        let mean = sum / trials as f64;
        let var = sum2 / trials as f64 - mean * mean;
        let em = sched.alpha_bar[k].sqrt() * y0;
        let ev = 1.0 - sched.alpha_bar[k];
        let mean_err = (mean - em).abs() / em.abs();
        let var_err = (var - ev).abs() / ev;
        if mean_err >= 0.01 || var_err >= 0.03 {
            ok = false;
        }
        detail = format!("{detail}k={k}: mean {mean_err:.4}, var {var_err:.4}; ");
    }
    ("diffusion closed form".into(), ok, detail)
}

fn check_schedule_identities() -> CheckResult {
    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    let mut ok = sched.alpha_bar[0] == 1.0 && sched.sigma2[0] == 0.0;
    for k in 1..=1000 {
        ok &= sched.alpha[k - 1] == 1.0 - sched.beta[k - 1];
        ok &= sched.alpha_bar[k] == sched.alpha_bar[k - 1] * sched.alpha[k - 1];
        ok &= sched.sigma2[k - 1]
            == (1.0 - sched.alpha_bar[k - 1]) * sched.beta[k - 1] / (1.0 - sched.alpha_bar[k]);
    }
    ok &= sched.alpha_bar[1000] < 1e-4;

    // Posterior algebra: k=1 commits to the prediction, and the two
    // coefficients recombine constants per the schedule oracle.
    let y_k = Tensor::raw(vec![4], vec![0.3, -0.1, 0.7, 0.2]);
    let y0 = Tensor::raw(vec![4], vec![-0.4, 0.9, 0.1, 0.5]);
    let mu1 = posterior_mean(&y_k, &y0, 1, &sched).unwrap();
    ok &= mu1.data() == y0.data();
    let c = Tensor::raw(vec![1], vec![2.0]);
    for k in [2usize, 500, 1000] {
        let mu = posterior_mean(&c, &c, k, &sched).unwrap().data()[0];
        let denom = 1.0 - sched.alpha_bar[k];
        let coef = (sched.alpha[k - 1].sqrt() * (1.0 - sched.alpha_bar[k - 1])
            + sched.alpha_bar[k - 1].sqrt() * sched.beta[k - 1])
            / denom;
        ok &= (mu - 2.0 * coef).abs() < 1e-12;
    }
    (
        "schedule & posterior algebra".into(),
        ok,
        format!("alpha_bar[1000] = {:.3e}", sched.alpha_bar[1000]),
    )
}

fn check_gradients() -> CheckResult {
    let config = ModelConfig {
        t: 16,
        n: 2,
        c: 2,
        d: 8,
        l: 1,
        k_steps: 10,
        heads: 2,
        seed: 11,
        beta_start: 1e-4,
        beta_end: 0.02,
        sample_rate: 30.0,
    };
    let params = init_params(&config).unwrap();
    let mask = config.mask().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let shape = vec![config.t, config.n, config.c];
    let count: usize = shape.iter().product();
    let x = Tensor::raw(
        shape.clone(),
        (0..count).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    let cp = Tensor::raw(
        shape,
        (0..count).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    let y0 = {
        let raw: Vec<f64> = (0..config.t)
            .map(|t| (std::f64::consts::TAU * 1.2 * t as f64 / 30.0).cos())
            .collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / raw.len() as f64;
        Tensor::raw(
            vec![config.t],
            raw.iter().map(|v| (v - mean) / var.sqrt()).collect(),
        )
    };
    let eps = Tensor::raw(
        vec![config.t],
        (0..config.t)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect(),
    );
    let k = 4;
    let (_, analytic) = sample_loss_and_grads(
        &params,
        &config,
        &mask,
        &x,
        &cp,
        &y0,
        k,
        &eps,
        SteMode::Soft,
    )
    .unwrap();
    let eval = |p: &crate::model::DenoiserParams| -> Result<f64> {
        Ok(
            sample_loss_and_grads(p, &config, &mask, &x, &cp, &y0, k, &eps, SteMode::Soft)?
                .0,
        )
    };
    let report = grad_check(eval, &params, &analytic, 1e-5, 8, &mut rng).unwrap();
    (
        "gradient check".into(),
        report.max_rel_err < 1e-4,
        format!(
            "max rel err {:.3e} over {} coords (limit 1e-4)",
            report.max_rel_err, report.coords_checked
        ),
    )
}

/// Runs every property check, printing one line per entry; true when all
/// pass.
pub fn cmd_check<W: Write>(w: &mut W) -> bool {
    let checks = [
        check_convolution_theorem(),
        check_round_trip(),
        check_diffusion_closed_form(),
        check_schedule_identities(),
        check_gradients(),
    ];
    let mut all = true;
    let _ = writeln!(w, "{:<32} {:<6} detail", "check", "status");
    for (name, ok, detail) in checks {
        all &= ok;
        let _ = writeln!(w, "{name:<32} {:<6} {detail}", if ok { "PASS" } else { "FAIL" });
    }
    all
}
