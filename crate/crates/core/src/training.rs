//! Unsupervised training of the support policy.
//!
//! Each step normalizes a batch of gain cubes, runs both message-passing
//! networks, draws `M` reparametrized power matrices per sample and ascends
//! `L = mean J − κ·ψ` with Adam. The loss is computed per hertz so that the
//! penalty weight lives on the same scale regardless of the bandwidth;
//! reported EE values are in bit/Joule.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{GnnArch, PolicyParams};
use crate::objective::{
    draw_uniforms, sum_ee_kernel, support_objective_on_tape, EeParams, KappaState, SupportBounds,
};
use crate::scalar::Scalar;
use crate::scenario::dataset::{read_f64, read_u32};
use crate::scenario::{ChannelSample, Dataset};
use crate::tensor::{Tape, Tensor};

/// Shift and scale applied to raw gains before they enter the networks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub mu_prime: f64,
    pub sigma_prime: f64,
}

impl Default for NormalizationParams {
    fn default() -> Self {
        Self {
            mu_prime: 1e-11,
            sigma_prime: 1e-10,
        }
    }
}

impl NormalizationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_prime > 0.0 && self.sigma_prime.is_finite()) || !self.mu_prime.is_finite() {
            return Err(Error::InvalidParams(format!(
                "normalization needs finite mu_prime and positive sigma_prime, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// `(x − μ′) / σ′` elementwise.
pub fn normalize<T: Scalar>(gains: &Tensor<T>, norm: &NormalizationParams) -> Tensor<T> {
    let (mu, inv) = (T::of(norm.mu_prime), T::one() / T::of(norm.sigma_prime));
    gains.map(|x| (x - mu) * inv)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_iterations: u64,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    /// Monte-Carlo draws per sample and step.
    pub mc_samples: usize,
    /// Step of the penalty weight.
    pub kappa_delta: f64,
    /// Warm-up length and trailing window of the penalty weight.
    pub kappa_window: usize,
    pub p_max: f64,
    pub seed: u64,
    pub norm: NormalizationParams,
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iterations: 120_000,
            batch_size: 64,
            lr_init: 1e-3,
            lr_final: 1e-7,
            mc_samples: 16,
            kappa_delta: 1e-3,
            kappa_window: 100,
            p_max: 1.0,
            seed: 0,
            norm: NormalizationParams::default(),
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.batch_size == 0 || self.mc_samples == 0 || self.kappa_window == 0 || self.eval_every == 0 {
            return bad("batch_size, mc_samples, kappa_window and eval_every must be ≥ 1".into());
        }
        if !(self.lr_init > 0.0 && self.lr_final > 0.0 && self.lr_final <= self.lr_init) {
            return bad(format!(
                "need 0 < lr_final ≤ lr_init, got {} and {}",
                self.lr_final, self.lr_init
            ));
        }
        if !(self.kappa_delta > 0.0 && self.p_max > 0.0) {
            return bad("kappa_delta and p_max must be positive".into());
        }
        self.norm.validate()
    }
}

/// `lr_init · (lr_final / lr_init)^(iteration / total)`.
pub fn lr_at(iteration: u64, config: &TrainConfig) -> f64 {
    if config.total_iterations == 0 {
        return config.lr_init;
    }
    let t = iteration.min(config.total_iterations) as f64 / config.total_iterations as f64;
    config.lr_init * (config.lr_final / config.lr_init).powf(t)
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One descent step on `params` along `grads`.
    pub fn update(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() / (T::one() - b1.powi(self.step as i32));
        let c2 = T::one() / (T::one() - b2.powi(self.step as i32));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *x -= lr * (*mi * c1) / ((*vi * c2).sqrt() + eps);
            }
        }
    }
}

/// Everything a training run mutates.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub policy: PolicyParams<T>,
    pub adam: Adam<T>,
    pub kappa: KappaState,
    /// Steps completed.
    pub iteration: u64,
    /// Source of the Monte-Carlo draws.
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(arch: &GnnArch, config: &TrainConfig) -> Self {
        let policy = PolicyParams::init(arch, config.p_max, &mut stream_rng(config.seed, 0));
        let adam = Adam::new(&policy.tensors());
        Self {
            policy,
            adam,
            kappa: KappaState::new(config.kappa_delta, config.kappa_window),
            iteration: 0,
            rng: stream_rng(config.seed, 1),
        }
    }
}

/// Streams 0 (initialization), 1 (Monte-Carlo) and `2 + epoch` (shuffling).
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Network inputs for a batch.
#[derive(Clone, Debug)]
pub struct BatchInputs<T> {
    /// `[B, L, K, K, 1]` normalized observed gains.
    pub features: Tensor<T>,
    /// `[B, L, K, K]` true gains.
    pub gains: Tensor<T>,
    /// `[B, K, L]` service mask, present when a serve threshold is set.
    pub mask: Option<Tensor<T>>,
}

pub fn batch_inputs<T: Scalar>(
    samples: &[&ChannelSample],
    norm: &NormalizationParams,
    serve_threshold: Option<f64>,
) -> BatchInputs<T> {
    assert!(!samples.is_empty(), "empty batch");
    let (nl, nk) = (samples[0].n_aps, samples[0].n_ues);
    let b = samples.len();
    let mut gains = Vec::with_capacity(b * nl * nk * nk);
    let mut observed = Vec::with_capacity(b * nl * nk * nk);
    for s in samples {
        assert_eq!((s.n_aps, s.n_ues), (nl, nk), "mixed sample dimensions in batch");
        gains.extend(s.gains.iter().map(|&g| T::of(g)));
        observed.extend(s.observed_gains(serve_threshold).into_iter().map(T::of));
    }
    let observed = Tensor::new(vec![b, nl, nk, nk, 1], observed);
    let mask = serve_threshold.map(|t| {
        let mut m = Vec::with_capacity(b * nk * nl);
        for s in samples {
            let served = s.served_mask(Some(t));
            for k in 0..nk {
                m.extend((0..nl).map(|l| if served[l * nk + k] { T::one() } else { T::zero() }));
            }
        }
        Tensor::new(vec![b, nk, nl], m)
    });
    BatchInputs {
        features: normalize(&observed, norm),
        gains: Tensor::new(vec![b, nl, nk, nk], gains),
        mask,
    }
}

/// Supports for a batch of samples.
pub fn infer<T: Scalar>(
    policy: &PolicyParams<T>,
    samples: &[&ChannelSample],
    norm: &NormalizationParams,
    serve_threshold: Option<f64>,
) -> Vec<SupportBounds> {
    let inputs = batch_inputs::<T>(samples, norm, serve_threshold);
    policy.bounds(&inputs.features, inputs.mask.as_ref())
}

/// Quantities logged after a step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    /// Zero-based index of the step.
    pub iteration: u64,
    /// `L` in bit/Joule/Hz.
    pub loss: f64,
    /// Batch-mean EE at the support midpoints, bit/Joule.
    pub mean_ee: f64,
    pub psi: f64,
    /// Penalty weight after the step's update.
    pub kappa: f64,
    pub lr: f64,
}

/// One Adam step on a batch.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    config: &TrainConfig,
    ee: &EeParams<f64>,
    serve_threshold: Option<f64>,
    batch: &[&ChannelSample],
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let iteration = state.iteration;
    let lr = lr_at(iteration, config);
    let inputs = batch_inputs::<T>(batch, &config.norm, serve_threshold);
    let (b, nk, nl) = (batch.len(), batch[0].n_ues, batch[0].n_aps);
    let m = config.mc_samples;
    let uniforms: Tensor<T> = draw_uniforms(&mut state.rng, b * m, nk, nl).reshaped(&[b, m, nk, nl]);

    let mut tape = Tape::new();
    let vars = state.policy.bind(&mut tape, true);
    let x = tape.constant(inputs.features);
    let mask = inputs.mask.map(|t| tape.constant(t));
    let out = vars.forward(&mut tape, x, mask);
    let loss_ee = EeParams::<T> {
        noise_power: T::of(ee.noise_power),
        amp_inefficiency: T::of(ee.amp_inefficiency),
        static_power: T::of(ee.static_power),
        bandwidth: T::one(),
    };
    let obj = support_objective_on_tape(
        &mut tape,
        out.a,
        out.width,
        uniforms,
        inputs.gains.clone(),
        T::of(state.kappa.kappa),
        loss_ee,
    );
    let loss = tape.value(obj.loss).item().as_f64();
    if !loss.is_finite() {
        return Err(diagnose(&tape, &obj, &out, iteration, m, nk * nl));
    }
    let descent = tape.scale(obj.loss, -T::one());
    let grads_all = tape.backward(descent);
    let grads: Vec<Tensor<T>> = vars.vars().into_iter().map(|v| grads_all.wrt(&tape, v)).collect();
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        let index = grads[i].data().iter().position(|v| !v.is_finite()).unwrap_or(0);
        return Err(Error::NonFinite {
            iteration,
            sample: i,
            index,
            term: "gradient",
        });
    }

    let psi = tape.value(obj.psi).item().as_f64();
    let (a, w) = (tape.value(out.a), tape.value(out.width));
    let ee_t = EeParams::<T> {
        bandwidth: T::of(ee.bandwidth),
        ..loss_ee
    };
    let block = nk * nl;
    let gblock = nl * nk * nk;
    let half = T::of(0.5);
    let mut mid = vec![T::zero(); block];
    let mut mean_ee = 0.0;
    for s in 0..b {
        for (i, p) in mid.iter_mut().enumerate() {
            *p = a.data()[s * block + i] + half * w.data()[s * block + i];
        }
        let g = &inputs.gains.data()[s * gblock..(s + 1) * gblock];
        mean_ee += sum_ee_kernel(g, &mid, nk, nl, &ee_t).as_f64();
    }
    mean_ee /= b as f64;

    state.adam.update(state.policy.tensors_mut(), &grads, lr);
    state.kappa.update(psi);
    state.iteration += 1;
    Ok(StepMetrics {
        iteration,
        loss,
        mean_ee,
        psi,
        kappa: state.kappa.kappa,
        lr,
    })
}

fn diagnose<T: Scalar>(
    tape: &Tape<T>,
    obj: &crate::objective::ObjectiveVars,
    out: &crate::gnn::PolicyOutput,
    iteration: u64,
    m: usize,
    block: usize,
) -> Error {
    let first_bad = |t: &Tensor<T>| t.data().iter().position(|v| !v.is_finite());
    for (term, var, per_sample) in [("lower bound", out.a, block), ("width", out.width, block), ("ee", obj.ee, m)] {
        if let Some(i) = first_bad(tape.value(var)) {
            return Error::NonFinite {
                iteration,
                sample: i / per_sample,
                index: i % per_sample,
                term,
            };
        }
    }
    Error::NonFinite {
        iteration,
        sample: 0,
        index: 0,
        term: "penalty",
    }
}

/// Dataset index used at position `pos` of the cyclic, per-pass shuffled order.
fn epoch_order(seed: u64, n: usize, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, 2 + epoch));
    order
}

/// Samples consumed by step `iteration`.
pub fn batch_indices(seed: u64, n: usize, batch_size: usize, iteration: u64) -> Vec<usize> {
    let start = iteration as u128 * batch_size as u128;
    let mut out = Vec::with_capacity(batch_size);
    let mut epoch = u64::MAX;
    let mut order = Vec::new();
    for pos in start..start + batch_size as u128 {
        let e = (pos / n as u128) as u64;
        if e != epoch {
            epoch = e;
            order = epoch_order(seed, n, e);
        }
        out.push(order[(pos % n as u128) as usize]);
    }
    out
}

/// Samples used to pick the retained checkpoint.
pub const BEST_PROBE_SAMPLES: usize = 256;

/// A finished (or paused) run.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters with the highest probe EE seen at a logged step.
    pub best: PolicyParams<T>,
    pub best_ee: f64,
    pub state: TrainState<T>,
    /// One row per logged step.
    pub metrics: Vec<StepMetrics>,
}

pub fn train<T: Scalar>(config: &TrainConfig, arch: &GnnArch, dataset: &Dataset) -> Result<TrainOutcome<T>> {
    let state = TrainState::new(arch, config);
    let best = state.policy.clone();
    resume(config, dataset, state, best, f64::NEG_INFINITY)
}

/// Continues `state` up to `config.total_iterations`.
pub fn resume<T: Scalar>(
    config: &TrainConfig,
    dataset: &Dataset,
    state: TrainState<T>,
    best: PolicyParams<T>,
    best_ee: f64,
) -> Result<TrainOutcome<T>> {
    train_until(config, dataset, state, best, best_ee, config.total_iterations)
}

/// Continues `state` up to step `stop` (capped at `config.total_iterations`)
/// on the schedule of the full run.
pub fn train_until<T: Scalar>(
    config: &TrainConfig,
    dataset: &Dataset,
    mut state: TrainState<T>,
    mut best: PolicyParams<T>,
    mut best_ee: f64,
    stop: u64,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let probe = dataset.subset(0..dataset.len().min(BEST_PROBE_SAMPLES));
    let ee = EeParams::from_system(&dataset.params);
    let threshold = dataset.params.serve_threshold;
    let mut metrics = Vec::new();
    while state.iteration < stop.min(config.total_iterations) {
        let i = state.iteration;
        let idx = batch_indices(config.seed, dataset.len(), config.batch_size, i);
        let batch: Vec<&ChannelSample> = idx.iter().map(|&j| &dataset.samples[j]).collect();
        let logged = i % config.eval_every == 0;
        let step = train_step(&mut state, config, &ee, threshold, &batch)?;
        if logged {
            metrics.push(step);
            let probe_ee = evaluate_policy(&state.policy, &probe, &config.norm)?.mean;
            if probe_ee > best_ee {
                best_ee = probe_ee;
                best = state.policy.clone();
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_ee,
        state,
        metrics,
    })
}

/// Mean and per-sample EE (bit/Joule) at the support midpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mean: f64,
    pub per_sample: Vec<f64>,
}

const EVAL_CHUNK: usize = 64;

pub fn evaluate_policy<T: Scalar>(
    policy: &PolicyParams<T>,
    dataset: &Dataset,
    norm: &NormalizationParams,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ee = EeParams::from_system(&dataset.params);
    let threshold = dataset.params.serve_threshold;
    let per_sample: Vec<f64> = dataset
        .samples
        .par_chunks(EVAL_CHUNK)
        .flat_map_iter(|chunk| {
            let refs: Vec<&ChannelSample> = chunk.iter().collect();
            let bounds = infer(policy, &refs, norm, threshold);
            chunk
                .iter()
                .zip(bounds)
                .map(|(s, b)| crate::objective::sum_ee_with(s, &b.midpoint(), &ee))
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(EvalReport {
        mean: per_sample.iter().sum::<f64>() / per_sample.len() as f64,
        per_sample,
    })
}

pub const STATE_MAGIC: &[u8; 4] = b"CFTS";
pub const STATE_VERSION: u32 = 1;

/// Writes `best` followed by a trailer holding `state` (for resuming).
pub fn write_checkpoint<T: Scalar, W: Write>(
    mut w: W,
    best: &PolicyParams<T>,
    resume: Option<(&TrainState<T>, f64)>,
) -> Result<()> {
    best.write_to(&mut w)?;
    let Some((state, best_ee)) = resume else {
        return Ok(());
    };
    w.write_all(STATE_MAGIC)?;
    w.write_all(&STATE_VERSION.to_le_bytes())?;
    let k = &state.kappa;
    for v in [state.iteration, k.iteration, k.window as u64, k.history.len() as u64, state.adam.step] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in [best_ee, k.kappa, k.delta] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in &k.history {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&state.rng.get_seed())?;
    w.write_all(&state.rng.get_stream().to_le_bytes())?;
    w.write_all(&state.rng.get_word_pos().to_le_bytes())?;
    state.policy.write_to(&mut w)?;
    for t in state.adam.m.iter().chain(&state.adam.v) {
        for v in t.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

/// A checkpoint's retained policy and, if present, the state to resume from.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub best: PolicyParams<T>,
    pub resume: Option<(TrainState<T>, f64)>,
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<Checkpoint<T>> {
    let fmt = |reason: String| Error::Format {
        kind: "checkpoint",
        reason,
    };
    let best = PolicyParams::read_from(&mut r)?;
    let mut magic = [0u8; 4];
    match r.read(&mut magic[..1])? {
        0 => return Ok(Checkpoint { best, resume: None }),
        _ => r
            .read_exact(&mut magic[1..])
            .map_err(|e| fmt(format!("trailer header: {e}")))?,
    }
    if &magic != STATE_MAGIC {
        return Err(fmt(format!("bad trailer magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != STATE_VERSION {
        return Err(fmt(format!("unsupported trailer version {version}")));
    }
    let mut u = [0u64; 5];
    for v in u.iter_mut() {
        *v = read_u64(&mut r)?;
    }
    let [iteration, k_iter, window, hist_len, adam_step] = u;
    if window == 0 || hist_len > window {
        return Err(fmt("inconsistent penalty-weight window".into()));
    }
    let best_ee = read_f64(&mut r)?;
    let kappa = read_f64(&mut r)?;
    let delta = read_f64(&mut r)?;
    if !(delta > 0.0) || !(kappa >= 0.0) {
        return Err(fmt("invalid penalty-weight state".into()));
    }
    let history = (0..hist_len).map(|_| read_f64(&mut r)).collect::<Result<_>>()?;
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed).map_err(|e| fmt(format!("rng: {e}")))?;
    let stream = read_u64(&mut r)?;
    let mut wp = [0u8; 16];
    r.read_exact(&mut wp).map_err(|e| fmt(format!("rng: {e}")))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from_le_bytes(wp));
    let policy: PolicyParams<T> = PolicyParams::read_from(&mut r)?;
    let mut adam = Adam::new(&policy.tensors());
    adam.step = adam_step;
    for t in adam.m.iter_mut().chain(adam.v.iter_mut()) {
        for v in t.data_mut() {
            *v = T::of(read_f64(&mut r)?);
        }
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(fmt("trailing bytes after training state".into()));
    }
    let state = TrainState {
        policy,
        adam,
        kappa: KappaState {
            kappa,
            delta,
            window: window as usize,
            history,
            iteration: k_iter,
        },
        iteration,
        rng,
    };
    Ok(Checkpoint {
        best,
        resume: Some((state, best_ee)),
    })
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let lo = read_u32(r)? as u64;
    let hi = read_u32(r)? as u64;
    Ok(lo | (hi << 32))
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    best: &PolicyParams<T>,
    resume: Option<(&TrainState<T>, f64)>,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, best, resume)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Metrics CSV with a header row.
pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[StepMetrics]) -> Result<()> {
    writeln!(w, "iteration,loss_L,mean_ee_bit_per_joule,psi,kappa,lr")?;
    for r in rows {
        writeln!(
            w,
            "{},{:e},{:e},{:e},{:e},{:e}",
            r.iteration, r.loss, r.mean_ee, r.psi, r.kappa, r.lr
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{sum_ee_with, PowerAllocation};
    use crate::scenario::SystemParams;

    fn tiny_arch() -> GnnArch {
        GnnArch {
            layers: 1,
            node_dim: 3,
            message_dim: 2,
            sinr_widths: vec![8],
        }
    }

    fn small_params(n_aps: usize, n_ues: usize) -> SystemParams {
        SystemParams {
            n_aps,
            n_ues,
            n_antennas: 2,
            ..Default::default()
        }
    }

    fn quick_config(iterations: u64) -> TrainConfig {
        TrainConfig {
            total_iterations: iterations,
            batch_size: 4,
            mc_samples: 4,
            kappa_window: 5,
            eval_every: 3,
            ..Default::default()
        }
    }

    #[test]
    fn normalize_examples() {
        let x: Tensor<f64> = Tensor::new(vec![3], vec![2.5e-9, -1.0, 7.0]);
        let identity = NormalizationParams {
            mu_prime: 0.0,
            sigma_prime: 1.0,
        };
        assert_eq!(normalize(&x, &identity), x);
        let y = normalize(&x, &NormalizationParams::default());
        assert!((y.data()[0] - 24.9).abs() < 1e-12);
        let c = normalize(&Tensor::<f64>::full(&[4], 3e-10), &NormalizationParams::default());
        assert!(c.data().iter().all(|&v| v == c.data()[0]));
        assert!((c.data()[0] - 2.9).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_is_geometric() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 1e-3);
        assert!((lr_at(c.total_iterations, &c) - 1e-7).abs() < 1e-20);
        assert!((lr_at(c.total_iterations / 2, &c) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.lr_final = 1.0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_gain_batch_only_shrinks_the_support() {
        let (nl, nk) = (2, 2);
        let sample = ChannelSample::from_gains(nl, nk, vec![0.0; nl * nk * nk]);
        let batch = vec![&sample; 3];
        let cfg = quick_config(60);
        let ee = EeParams::from_system(&small_params(nl, nk));
        let mut state = TrainState::<f64>::new(&tiny_arch(), &cfg);
        let mut last = f64::INFINITY;
        let mut moved = false;
        for _ in 0..60 {
            let m = train_step(&mut state, &cfg, &ee, None, &batch).unwrap();
            assert_eq!(m.mean_ee, 0.0);
            assert!(m.psi <= last, "psi rose from {last} to {}", m.psi);
            moved |= m.psi < last && last.is_finite();
            last = m.psi;
        }
        assert!(moved);
    }

    #[test]
    fn step_is_deterministic() {
        let ds = Dataset::generate(&small_params(3, 2), 4, 9).unwrap();
        let batch: Vec<&ChannelSample> = ds.samples.iter().collect();
        let cfg = quick_config(10);
        let ee = EeParams::from_system(&ds.params);
        let mut a = TrainState::<f64>::new(&tiny_arch(), &cfg);
        let mut b = a.clone();
        let ma = train_step(&mut a, &cfg, &ee, None, &batch).unwrap();
        let mb = train_step(&mut b, &cfg, &ee, None, &batch).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.iteration, 1);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let cfg = quick_config(1);
        let mut state = TrainState::<f64>::new(&tiny_arch(), &cfg);
        let ee = EeParams::from_system(&small_params(1, 1));
        assert!(matches!(train_step(&mut state, &cfg, &ee, None, &[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn single_link_training_reaches_the_grid_optimum() {
        let params = small_params(1, 1);
        let ds = Dataset::generate(&params, 1, 4).unwrap();
        let cfg = TrainConfig {
            total_iterations: 2000,
            batch_size: 1,
            lr_init: 1e-2,
            lr_final: 1e-4,
            eval_every: 100,
            ..Default::default()
        };
        let out = train::<f64>(&cfg, &GnnArch::default(), &ds).unwrap();
        let ee = EeParams::from_system(&params);
        let s = &ds.samples[0];
        let best = (0..=100_000)
            .map(|i| sum_ee_with(s, &PowerAllocation::uniform(1, 1, i as f64 / 1e5), &ee))
            .fold(0.0, f64::max);
        let got = evaluate_policy(&out.state.policy, &ds, &cfg.norm).unwrap().mean;
        assert!(got >= 0.98 * best, "midpoint EE {got} vs optimum {best}");
    }

    #[test]
    fn zero_iterations_return_the_initialization() {
        let ds = Dataset::generate(&small_params(2, 2), 3, 1).unwrap();
        let cfg = quick_config(0);
        let out = train::<f64>(&cfg, &tiny_arch(), &ds).unwrap();
        assert_eq!(out.best, TrainState::<f64>::new(&tiny_arch(), &cfg).policy);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn one_metrics_row_per_eval_interval() {
        let ds = Dataset::generate(&small_params(2, 2), 5, 1).unwrap();
        for iters in [1, 3, 7, 9] {
            let out = train::<f64>(&quick_config(iters), &tiny_arch(), &ds).unwrap();
            assert_eq!(out.metrics.len() as u64, iters.div_ceil(3));
            let mut csv = Vec::new();
            write_metrics_csv(&mut csv, &out.metrics).unwrap();
            let text = String::from_utf8(csv).unwrap();
            assert_eq!(text.lines().count() as u64, 1 + iters.div_ceil(3));
        }
    }

    #[test]
    fn training_is_reproducible() {
        let ds = Dataset::generate(&small_params(2, 3), 6, 2).unwrap();
        let a = train::<f64>(&quick_config(8), &tiny_arch(), &ds).unwrap();
        let b = train::<f64>(&quick_config(8), &tiny_arch(), &ds).unwrap();
        assert_eq!(a.best, b.best);
        assert_eq!(a.state.policy, b.state.policy);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn batches_cover_every_sample_once_per_pass() {
        let n = 10;
        let mut seen: Vec<usize> = (0..5).flat_map(|i| batch_indices(3, n, 2, i)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        assert_ne!(batch_indices(3, n, n, 0), batch_indices(3, n, n, 1));
    }

    #[test]
    fn zero_heads_evaluate_at_five_eighths() {
        let params = small_params(2, 3);
        let ds = Dataset::generate(&params, 2, 5).unwrap();
        let mut policy = PolicyParams::<f64>::init(&tiny_arch(), 2.0, &mut stream_rng(0, 0));
        for t in policy.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let report = evaluate_policy(&policy, &ds, &NormalizationParams::default()).unwrap();
        let ee = EeParams::from_system(&params);
        for (s, got) in ds.samples.iter().zip(&report.per_sample) {
            let want = sum_ee_with(s, &PowerAllocation::uniform(3, 2, 1.25), &ee);
            assert!((got - want).abs() <= 1e-12 * want);
        }
    }

    #[test]
    fn zero_gain_sample_evaluates_to_zero() {
        let mut ds = Dataset::generate(&small_params(2, 2), 1, 0).unwrap();
        ds.samples[0] = ChannelSample::from_gains(2, 2, vec![0.0; 8]);
        let policy = TrainState::<f64>::new(&tiny_arch(), &quick_config(1)).policy;
        let r = evaluate_policy(&policy, &ds, &NormalizationParams::default()).unwrap();
        assert_eq!(r.per_sample, vec![0.0]);
    }

    #[test]
    fn evaluation_ignores_sample_order() {
        let ds = Dataset::generate(&small_params(3, 3), 130, 8).unwrap();
        let policy = TrainState::<f64>::new(&tiny_arch(), &quick_config(1)).policy;
        let norm = NormalizationParams::default();
        let fwd = evaluate_policy(&policy, &ds, &norm).unwrap();
        let rev = evaluate_policy(&policy, &ds.subset((0..ds.len()).rev()), &norm).unwrap();
        assert!((fwd.mean - rev.mean).abs() <= 1e-12 * fwd.mean);
        let mut a = fwd.per_sample.clone();
        a.reverse();
        assert_eq!(a, rev.per_sample);
    }

    #[test]
    fn resumed_run_matches_an_uninterrupted_one() {
        let ds = Dataset::generate(&small_params(2, 2), 6, 3).unwrap();
        let full = train::<f64>(&quick_config(12), &tiny_arch(), &ds).unwrap();
        let init = TrainState::<f64>::new(&tiny_arch(), &quick_config(12));
        let first = init.policy.clone();
        let half = train_until(&quick_config(12), &ds, init, first, f64::NEG_INFINITY, 5).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &half.best, Some((&half.state, half.best_ee))).unwrap();
        let ck = read_checkpoint::<f64, _>(bytes.as_slice()).unwrap();
        assert_eq!(ck.best, half.best);
        let (state, best_ee) = ck.resume.unwrap();
        assert_eq!(state.iteration, 5);
        let rest = resume(&quick_config(12), &ds, state, ck.best, best_ee).unwrap();
        assert_eq!(rest.state.policy, full.state.policy);
        assert_eq!(rest.best, full.best);
        assert_eq!(rest.state.kappa, full.state.kappa);
        let joined: Vec<_> = half.metrics.iter().chain(&rest.metrics).cloned().collect();
        assert_eq!(joined, full.metrics);
    }

    #[test]
    fn checkpoint_without_trailer_and_with_garbage() {
        let policy = TrainState::<f32>::new(&tiny_arch(), &quick_config(1)).policy;
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &policy, None).unwrap();
        let ck = read_checkpoint::<f32, _>(bytes.as_slice()).unwrap();
        assert_eq!(ck.best, policy);
        assert!(ck.resume.is_none());
        bytes.extend_from_slice(b"JUNKJUNK");
        assert!(read_checkpoint::<f32, _>(bytes.as_slice()).is_err());
    }
}
