//! Sum energy efficiency, the support-regularized stochastic objective and
//! the adaptive penalty weight.
//!
//! Power matrices are `K × L` row-major (`p[k][l]`: power AP `l` spends on
//! UE `k`); gain blocks are `L × K × K` as produced by [`crate::scenario`].

use std::collections::VecDeque;

use rand::Rng;

use crate::scalar::Scalar;
use crate::scenario::{ChannelSample, SystemParams};
use crate::tensor::{CustomOp, Tape, Tensor, Var};

/// Constants entering the energy-efficiency ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EeParams<T> {
    pub noise_power: T,
    pub amp_inefficiency: T,
    pub static_power: T,
    /// Multiplies every rate; `1` yields bit/Joule/Hz.
    pub bandwidth: T,
}

impl<T: Scalar> EeParams<T> {
    pub fn from_system(p: &SystemParams) -> Self {
        Self {
            noise_power: T::of(p.noise_power),
            amp_inefficiency: T::of(p.amp_inefficiency),
            static_power: T::of(p.static_power),
            bandwidth: T::of(p.bandwidth),
        }
    }

    /// Same constants with the bandwidth factor removed.
    pub fn per_hz(self) -> Self {
        Self {
            bandwidth: T::one(),
            ..self
        }
    }
}

/// Transmit powers, `K × L` row-major, watts.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerAllocation {
    pub n_ues: usize,
    pub n_aps: usize,
    pub p: Vec<f64>,
}

impl PowerAllocation {
    pub fn new(n_ues: usize, n_aps: usize, p: Vec<f64>) -> Self {
        assert_eq!(p.len(), n_ues * n_aps, "power matrix size");
        Self { n_ues, n_aps, p }
    }

    pub fn uniform(n_ues: usize, n_aps: usize, value: f64) -> Self {
        Self::new(n_ues, n_aps, vec![value; n_ues * n_aps])
    }

    #[inline]
    pub fn at(&self, k: usize, l: usize) -> f64 {
        self.p[k * self.n_aps + l]
    }

    pub fn is_feasible(&self, p_max: f64) -> bool {
        self.p.iter().all(|&x| (0.0..=p_max).contains(&x))
    }
}

/// Lower bound `a` and width `ℓ` of the per-entry uniform power law, `K × L`.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportBounds {
    pub n_ues: usize,
    pub n_aps: usize,
    pub a: Vec<f64>,
    pub width: Vec<f64>,
}

impl SupportBounds {
    pub fn upper(&self) -> Vec<f64> {
        self.a.iter().zip(&self.width).map(|(a, w)| a + w).collect()
    }

    /// The deterministic power `a + ℓ/2`.
    pub fn midpoint(&self) -> PowerAllocation {
        PowerAllocation::new(
            self.n_ues,
            self.n_aps,
            self.a.iter().zip(&self.width).map(|(a, w)| a + 0.5 * w).collect(),
        )
    }
}

/// `ψ = Σ ℓ`.
pub fn support_penalty(bounds: &SupportBounds) -> f64 {
    bounds.width.iter().sum()
}

/// Sum EE of one `K × L` power matrix over one `L × K × K` gain block.
pub fn sum_ee_kernel<T: Scalar>(gains: &[T], p: &[T], n_ues: usize, n_aps: usize, ee: &EeParams<T>) -> T {
    let (nk, nl) = (n_ues, n_aps);
    let inv_ln2 = T::one() / T::LN_2();
    let mut total = T::zero();
    for k in 0..nk {
        let mut signal = T::zero();
        let mut interference = T::zero();
        let mut spent = T::zero();
        for l in 0..nl {
            let row = &gains[(l * nk + k) * nk..(l * nk + k + 1) * nk];
            signal += row[k] * p[k * nl + l];
            spent += p[k * nl + l];
            for (j, &g) in row.iter().enumerate() {
                if j != k {
                    interference += g * p[j * nl + l];
                }
            }
        }
        let rate = ee.bandwidth * (signal / (ee.noise_power + interference)).ln_1p() * inv_ln2;
        total += rate / (ee.amp_inefficiency * spent + ee.static_power);
    }
    total
}

/// `∂J/∂p` for one sample, written into `grad` (`K × L`).
pub fn sum_ee_grad_kernel<T: Scalar>(
    gains: &[T],
    p: &[T],
    n_ues: usize,
    n_aps: usize,
    ee: &EeParams<T>,
    grad: &mut [T],
) {
    let (nk, nl) = (n_ues, n_aps);
    let scale = ee.bandwidth / T::LN_2();
    let mut g_signal = vec![T::zero(); nk];
    let mut g_denom = vec![T::zero(); nk];
    let mut g_cost = vec![T::zero(); nk];
    for k in 0..nk {
        let mut signal = T::zero();
        let mut interference = T::zero();
        let mut spent = T::zero();
        for l in 0..nl {
            let row = &gains[(l * nk + k) * nk..(l * nk + k + 1) * nk];
            signal += row[k] * p[k * nl + l];
            spent += p[k * nl + l];
            for (j, &g) in row.iter().enumerate() {
                if j != k {
                    interference += g * p[j * nl + l];
                }
            }
        }
        let d = ee.noise_power + interference;
        let cost = ee.amp_inefficiency * spent + ee.static_power;
        let rate = scale * (signal / d).ln_1p();
        g_signal[k] = scale / (d + signal) / cost;
        g_denom[k] = -scale * signal / (d * (d + signal)) / cost;
        g_cost[k] = -rate / (cost * cost);
    }
    for k in 0..nk {
        for l in 0..nl {
            let mut g = g_signal[k] * gains[(l * nk + k) * nk + k] + ee.amp_inefficiency * g_cost[k];
            for (kk, &gd) in g_denom.iter().enumerate() {
                if kk != k {
                    g += gd * gains[(l * nk + kk) * nk + k];
                }
            }
            grad[k * nl + l] = g;
        }
    }
}

/// Sum EE in bit/Joule (`bandwidth` from `params`).
///
/// Panics on shape mismatch.
pub fn sum_ee(sample: &ChannelSample, power: &PowerAllocation, params: &SystemParams) -> f64 {
    sum_ee_with(sample, power, &EeParams::from_system(params))
}

pub fn sum_ee_with(sample: &ChannelSample, power: &PowerAllocation, ee: &EeParams<f64>) -> f64 {
    assert_eq!(
        (power.n_ues, power.n_aps),
        (sample.n_ues, sample.n_aps),
        "power matrix does not match the sample"
    );
    sum_ee_kernel(&sample.gains, &power.p, sample.n_ues, sample.n_aps, ee)
}

/// Sum EE as a tape op: powers `[B, M, K, L]`, gains `[B, L, K, K]` → `[B, M]`.
pub struct SumEeOp<T> {
    gains: Tensor<T>,
    ee: EeParams<T>,
}

impl<T: Scalar> SumEeOp<T> {
    fn dims(&self, p: &Tensor<T>) -> (usize, usize, usize, usize) {
        let s = p.shape();
        assert_eq!(s.len(), 4, "sum_ee powers must be [B, M, K, L], got {s:?}");
        let g = self.gains.shape();
        assert_eq!(
            g,
            &[s[0], s[3], s[2], s[2]],
            "sum_ee gains {g:?} do not match powers {s:?}"
        );
        (s[0], s[1], s[2], s[3])
    }
}

impl<T: Scalar> CustomOp<T> for SumEeOp<T> {
    fn name(&self) -> &'static str {
        "sum_ee"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let p = inputs[0];
        let (b, m, k, l) = self.dims(p);
        let block = l * k * k;
        let out = (0..b * m)
            .map(|i| {
                let gains = &self.gains.data()[(i / m) * block..(i / m + 1) * block];
                sum_ee_kernel(gains, &p.data()[i * k * l..(i + 1) * k * l], k, l, &self.ee)
            })
            .collect();
        Tensor::new(vec![b, m], out)
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Tensor<T>> {
        let p = inputs[0];
        let (b, m, k, l) = self.dims(p);
        let block = l * k * k;
        let mut dp = Tensor::zeros(p.shape());
        let mut local = vec![T::zero(); k * l];
        for i in 0..b * m {
            let gains = &self.gains.data()[(i / m) * block..(i / m + 1) * block];
            sum_ee_grad_kernel(gains, &p.data()[i * k * l..(i + 1) * k * l], k, l, &self.ee, &mut local);
            let up = grad.data()[i];
            for (d, &g) in dp.data_mut()[i * k * l..(i + 1) * k * l].iter_mut().zip(&local) {
                *d = up * g;
            }
        }
        vec![dp]
    }
}

/// Records `J(P)` for every `[b, m]` power matrix in `powers`.
pub fn sum_ee_on_tape<T: Scalar>(tape: &mut Tape<T>, powers: Var, gains: Tensor<T>, ee: EeParams<T>) -> Var {
    tape.custom(Box::new(SumEeOp { gains, ee }), &[powers])
}

/// `M` matrices of i.i.d. U(0, 1) draws, shape `[M, K, L]`.
pub fn draw_uniforms<T: Scalar, R: Rng + ?Sized>(rng: &mut R, m: usize, n_ues: usize, n_aps: usize) -> Tensor<T> {
    Tensor::from_fn(&[m, n_ues, n_aps], |_| T::of(rng.gen::<f64>()))
}

/// Nodes of the batch loss recorded by [`support_objective_on_tape`].
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    /// Scalar `L`: batch mean of `mean_m J(a + ℓ⊙u_m) − κ·ψ`.
    pub loss: Var,
    /// `[B, M]` sampled energy efficiencies.
    pub ee: Var,
    /// Scalar batch-mean `ψ`.
    pub psi: Var,
}

/// Records the reparametrized, support-penalized objective for a batch.
///
/// `a` and `width` are `[B, K, L]`, `uniforms` is `[B, M, K, L]` and gains
/// `[B, L, K, K]`. The same draws feed the forward value and the gradient.
pub fn support_objective_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    width: Var,
    uniforms: Tensor<T>,
    gains: Tensor<T>,
    kappa: T,
    ee: EeParams<T>,
) -> ObjectiveVars {
    let m = uniforms.shape()[1];
    let batch = T::of(tape.value(a).shape()[0] as f64);
    let u = tape.constant(uniforms);
    let a_m = tape.expand(a, 1, m);
    let w_m = tape.expand(width, 1, m);
    let spread = tape.mul(w_m, u);
    let powers = tape.add(a_m, spread);
    let ee_vals = sum_ee_on_tape(tape, powers, gains, ee);
    let expected = tape.mean(ee_vals);
    let total_width = tape.sum(width);
    let psi = tape.scale(total_width, T::one() / batch);
    let penalty = tape.scale(psi, kappa);
    let loss = tape.sub(expected, penalty);
    ObjectiveVars { loss, ee: ee_vals, psi }
}

/// Result of a Monte-Carlo evaluation of the support objective.
#[derive(Clone, Debug)]
pub struct StochasticEval {
    pub value: f64,
    pub mean_ee: f64,
    pub psi: f64,
    pub powers: Vec<PowerAllocation>,
}

/// `mean_m J(a + ℓ⊙u_m) − κ·ψ` for one sample with `m` fresh uniform draws.
pub fn stochastic_objective<R: Rng + ?Sized>(
    sample: &ChannelSample,
    bounds: &SupportBounds,
    kappa: f64,
    m: usize,
    rng: &mut R,
    ee: &EeParams<f64>,
) -> StochasticEval {
    assert!(m >= 1, "need at least one Monte-Carlo draw");
    let (nk, nl) = (bounds.n_ues, bounds.n_aps);
    let u: Tensor<f64> = draw_uniforms(rng, m, nk, nl);
    let powers: Vec<PowerAllocation> = u
        .data()
        .chunks(nk * nl)
        .map(|ui| {
            PowerAllocation::new(
                nk,
                nl,
                ui.iter()
                    .zip(bounds.a.iter().zip(&bounds.width))
                    .map(|(&x, (&a, &w))| a + w * x)
                    .collect(),
            )
        })
        .collect();
    let mean_ee = powers.iter().map(|p| sum_ee_with(sample, p, ee)).sum::<f64>() / m as f64;
    let psi = support_penalty(bounds);
    StochasticEval {
        value: mean_ee - kappa * psi,
        mean_ee,
        psi,
        powers,
    }
}

/// Adaptive weight of the support penalty.
///
/// Held at zero for the first `window` iterations; afterwards it grows by
/// `delta` whenever the penalty is not below its trailing-window mean and
/// shrinks by `delta / 2` (floored at zero) otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct KappaState {
    pub kappa: f64,
    pub delta: f64,
    pub window: usize,
    pub history: VecDeque<f64>,
    /// Number of updates applied so far.
    pub iteration: u64,
}

impl KappaState {
    pub fn new(delta: f64, window: usize) -> Self {
        assert!(delta > 0.0, "Δκ must be positive");
        assert!(window >= 1, "κ window must be ≥ 1");
        Self {
            kappa: 0.0,
            delta,
            window,
            history: VecDeque::with_capacity(window),
            iteration: 0,
        }
    }

    /// Applies one step with the current iteration's penalty `psi`.
    pub fn update(&mut self, psi: f64) {
        let i = self.iteration + 1;
        if i <= self.window as u64 || self.history.is_empty() {
            self.kappa = 0.0;
        } else {
            let trailing = self.history.iter().sum::<f64>() / self.history.len() as f64;
            if trailing <= psi {
                self.kappa += self.delta;
            } else {
                self.kappa = (self.kappa - self.delta / 2.0).max(0.0);
            }
        }
        self.history.push_back(psi);
        while self.history.len() > self.window {
            self.history.pop_front();
        }
        self.iteration = i;
    }
}
