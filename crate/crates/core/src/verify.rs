//! Self-checks exposed to operators: gradient correctness, permutation
//! equivariance, and a one-dimensional demonstration that a shrinking
//! uniform support finds a narrow global maximum more often than plain
//! gradient ascent.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gnn::{GnnArch, PolicyParams};
use crate::objective::{draw_uniforms, support_objective_on_tape, EeParams, KappaState};
use crate::scenario::dataset::sample_rng;
use crate::scenario::{generate_sample, ChannelSample, SystemParams};
use crate::tensor::{CustomOp, Tape, Tensor};
use crate::training::{batch_inputs, infer, Adam, NormalizationParams};

/// An entry agrees when its absolute error is within the floor or its
/// relative error is below the tolerance.
pub const GRAD_REL_TOL: f64 = 1e-4;
pub const GRAD_ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub instances: usize,
    pub entries: usize,
    /// Entries off by more than both tolerances.
    pub failures: usize,
    /// Largest relative error over entries whose absolute error exceeds the floor.
    pub max_rel_error: f64,
    /// Largest absolute error over the remaining entries.
    pub max_abs_error: f64,
    pub worst: String,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Small networks keep the number of finite-difference evaluations modest.
pub fn gradcheck_arch() -> GnnArch {
    GnnArch {
        layers: 2,
        node_dim: 4,
        message_dim: 4,
        sinr_widths: vec![8, 8],
    }
}

/// Checks `∂L/∂λ` of the full training loss against central differences
/// on `instances` random scenarios with `K ≤ 4`, `L ≤ 3`.
pub fn gradcheck_suite(instances: usize, seed: u64) -> GradcheckReport {
    let mut report = GradcheckReport {
        instances,
        entries: 0,
        failures: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: String::new(),
    };
    for inst in 0..instances {
        let mut rng = sample_rng(seed, inst as u64);
        let params = SystemParams {
            n_aps: rng.gen_range(1..=3),
            n_ues: rng.gen_range(1..=4),
            n_antennas: rng.gen_range(1..=4),
            ..Default::default()
        };
        let batch = rng.gen_range(1..=2);
        let samples: Vec<ChannelSample> = (0..batch)
            .map(|_| generate_sample(&params, &mut rng, false).expect("valid parameters"))
            .collect();
        let refs: Vec<&ChannelSample> = samples.iter().collect();
        let mut policy: PolicyParams<f64> = PolicyParams::init(&gradcheck_arch(), 1.0, &mut rng);
        // spread the zero-initialized biases so no activation sits exactly on a kink
        for t in policy.tensors_mut() {
            if t.shape().len() == 1 {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            }
        }
        let inputs = batch_inputs::<f64>(&refs, &NormalizationParams::default(), None);
        let (nk, nl) = (params.n_ues, params.n_aps);
        let m = 4;
        let uniforms = draw_uniforms(&mut rng, batch * m, nk, nl).reshaped(&[batch, m, nk, nl]);
        let kappa = rng.gen_range(0.0..0.5);
        let ee = EeParams::<f64>::from_system(&params).per_hz();
        let loss = |p: &PolicyParams<f64>, grads: bool| -> (f64, Vec<Tensor<f64>>) {
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape, grads);
            let x = tape.constant(inputs.features.clone());
            let out = vars.forward(&mut tape, x, None);
            let obj = support_objective_on_tape(
                &mut tape,
                out.a,
                out.width,
                uniforms.clone(),
                inputs.gains.clone(),
                kappa,
                ee,
            );
            let value = tape.value(obj.loss).item();
            if !grads {
                return (value, Vec::new());
            }
            let g = tape.backward(obj.loss);
            (value, vars.vars().into_iter().map(|v| g.wrt(&tape, v)).collect())
        };
        let (_, analytic) = loss(&policy, true);
        let h = 1e-6;
        for (ti, grad) in analytic.iter().enumerate() {
            for e in 0..grad.len() {
                let at = |offset: f64| {
                    let mut moved = policy.clone();
                    moved.tensors_mut()[ti].data_mut()[e] += offset;
                    loss(&moved, false).0
                };
                let fd = (at(h) - at(-h)) / (2.0 * h);
                let a = grad.data()[e];
                let scale = a.abs().max(fd.abs());
                let abs = (a - fd).abs();
                report.entries += 1;
                let (err, slot) = if abs <= GRAD_ABS_FLOOR {
                    (abs, &mut report.max_abs_error)
                } else {
                    (abs / scale, &mut report.max_rel_error)
                };
                if abs > GRAD_ABS_FLOOR && err >= GRAD_REL_TOL {
                    report.failures += 1;
                }
                if err > *slot {
                    *slot = err;
                    report.worst = format!(
                        "instance {inst} (K={nk}, L={nl}) tensor {ti} entry {e}: analytic {a:e}, finite difference {fd:e}"
                    );
                }
            }
        }
    }
    report
}

/// Tolerance on permuted policy outputs.
pub const EQUIVARIANCE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct EquivarianceReport {
    pub samples: usize,
    pub max_ue_deviation: f64,
    pub max_ap_deviation: f64,
}

impl EquivarianceReport {
    pub fn passed(&self) -> bool {
        self.max_ue_deviation < EQUIVARIANCE_TOL && self.max_ap_deviation < EQUIVARIANCE_TOL
    }
}

/// Permutes UEs and, separately, APs of random samples and compares the
/// policy's supports with the correspondingly permuted originals.
pub fn equivariance_suite(samples: usize, seed: u64, arch: &GnnArch) -> EquivarianceReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy: PolicyParams<f64> = PolicyParams::init(arch, 1.0, &mut rng);
    let norm = NormalizationParams::default();
    let mut report = EquivarianceReport {
        samples,
        max_ue_deviation: 0.0,
        max_ap_deviation: 0.0,
    };
    for i in 0..samples {
        let mut srng = sample_rng(seed, i as u64);
        let params = SystemParams {
            n_aps: srng.gen_range(1..=6),
            n_ues: srng.gen_range(1..=6),
            n_antennas: srng.gen_range(1..=5),
            ..Default::default()
        };
        let s = generate_sample(&params, &mut srng, false).expect("valid parameters");
        let (nk, nl) = (params.n_ues, params.n_aps);
        let mut ue: Vec<usize> = (0..nk).collect();
        ue.shuffle(&mut srng);
        let mut ap: Vec<usize> = (0..nl).collect();
        ap.shuffle(&mut srng);
        let (su, sa) = (s.permute_ues(&ue), s.permute_aps(&ap));
        let out = infer(&policy, &[&s, &su, &sa], &norm, None);
        let (base, by_ue, by_ap) = (&out[0], &out[1], &out[2]);
        for k in 0..nk {
            for l in 0..nl {
                let i = k * nl + l;
                let iu = ue[k] * nl + l;
                let ia = k * nl + ap[l];
                let du = (by_ue.a[i] - base.a[iu]).abs().max((by_ue.width[i] - base.width[iu]).abs());
                let da = (by_ap.a[i] - base.a[ia]).abs().max((by_ap.width[i] - base.width[ia]).abs());
                report.max_ue_deviation = report.max_ue_deviation.max(du);
                report.max_ap_deviation = report.max_ap_deviation.max(da);
            }
        }
    }
    report
}

/// A wide local bump and a higher, narrow global bump on `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoBumps {
    pub wide_center: f64,
    pub wide_std: f64,
    pub wide_height: f64,
    pub narrow_center: f64,
    pub narrow_std: f64,
}

impl TwoBumps {
    /// Random member of the family used by [`toy1d_suite`].
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            wide_center: rng.gen_range(0.15..0.35),
            wide_std: 0.12,
            wide_height: 0.75,
            narrow_center: rng.gen_range(0.6..0.85),
            narrow_std: 0.05,
        }
    }

    fn bump(x: f64, c: f64, s: f64) -> (f64, f64) {
        let e = (-(x - c).powi(2) / (2.0 * s * s)).exp();
        (e, -(x - c) / (s * s) * e)
    }

    /// Value and derivative at `x`.
    pub fn eval(&self, x: f64) -> (f64, f64) {
        let (w, dw) = Self::bump(x, self.wide_center, self.wide_std);
        let (n, dn) = Self::bump(x, self.narrow_center, self.narrow_std);
        (self.wide_height * w + n, self.wide_height * dw + dn)
    }

    /// Maximizer on a grid of `points` over `[0, 1]`.
    pub fn argmax(&self, points: usize) -> f64 {
        (0..points)
            .map(|i| i as f64 / (points - 1) as f64)
            .fold((f64::NEG_INFINITY, 0.0), |best, x| {
                let v = self.eval(x).0;
                if v > best.0 {
                    (v, x)
                } else {
                    best
                }
            })
            .1
    }
}

impl CustomOp<f64> for TwoBumps {
    fn name(&self) -> &'static str {
        "two_bumps"
    }

    fn forward(&self, inputs: &[&Tensor<f64>]) -> Tensor<f64> {
        inputs[0].map(|x| self.eval(x).0)
    }

    fn backward(&self, inputs: &[&Tensor<f64>], _output: &Tensor<f64>, grad: &Tensor<f64>) -> Vec<Tensor<f64>> {
        vec![grad.zip_map(inputs[0], |g, x| g * self.eval(x).1)]
    }
}

/// Settings of the one-dimensional comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Toy1dConfig {
    pub iterations: usize,
    pub mc_samples: usize,
    pub support_lr: f64,
    pub plain_lr: f64,
    pub kappa_delta: f64,
    pub kappa_window: usize,
    /// Success: `|x − x*| ≤ tolerance · x*`.
    pub tolerance: f64,
}

impl Default for Toy1dConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            mc_samples: 16,
            support_lr: 0.02,
            plain_lr: 0.01,
            kappa_delta: 0.01,
            kappa_window: 100,
            tolerance: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Toy1dReport {
    pub seeds: usize,
    pub support_successes: usize,
    pub plain_successes: usize,
}

impl Toy1dReport {
    pub fn support_rate(&self) -> f64 {
        self.support_successes as f64 / self.seeds as f64
    }

    pub fn plain_rate(&self) -> f64 {
        self.plain_successes as f64 / self.seeds as f64
    }

    pub fn passed(&self) -> bool {
        self.support_rate() >= 0.8 && self.support_successes > self.plain_successes
    }
}

/// Support-regularized ascent from (nearly) the full interval; returns the
/// final support midpoint.
pub fn toy_support_run<R: Rng + ?Sized>(f: &TwoBumps, config: &Toy1dConfig, rng: &mut R) -> f64 {
    let mut params = vec![Tensor::new(vec![1], vec![-4.0]), Tensor::new(vec![1], vec![4.0])];
    let mut adam = Adam::new(&params.iter().collect::<Vec<_>>());
    let mut kappa = KappaState::new(config.kappa_delta, config.kappa_window);
    let m = config.mc_samples;
    let support = |tape: &mut Tape<f64>, p: &[Tensor<f64>]| {
        let (ua, ul) = (tape.leaf(p[0].clone()), tape.leaf(p[1].clone()));
        let a = tape.sigmoid(ua);
        let neg = tape.scale(a, -1.0);
        let headroom = tape.add_scalar(neg, 1.0);
        let s = tape.sigmoid(ul);
        let width = tape.mul(headroom, s);
        (ua, ul, a, width)
    };
    for _ in 0..config.iterations {
        let mut tape = Tape::new();
        let (ua, ul, a, width) = support(&mut tape, &params);
        let u = tape.constant(Tensor::from_fn(&[m, 1], |_| rng.gen::<f64>()));
        let a_m = tape.expand(a, 0, m);
        let w_m = tape.expand(width, 0, m);
        let spread = tape.mul(w_m, u);
        let x = tape.add(a_m, spread);
        let fx = tape.custom(Box::new(*f), &[x]);
        let expected = tape.mean(fx);
        let psi_var = tape.sum(width);
        let penalty = tape.scale(psi_var, kappa.kappa);
        let l = tape.sub(expected, penalty);
        let descent = tape.scale(l, -1.0);
        let g = tape.backward(descent);
        let grads = [g.wrt(&tape, ua), g.wrt(&tape, ul)];
        let psi = tape.value(psi_var).item();
        adam.update(params.iter_mut().collect(), &grads, config.support_lr);
        kappa.update(psi);
    }
    let mut tape = Tape::new();
    let (_, _, a, width) = support(&mut tape, &params);
    tape.value(a).item() + 0.5 * tape.value(width).item()
}

/// Projected Adam ascent on `f` from a uniform random point.
pub fn toy_plain_run<R: Rng + ?Sized>(f: &TwoBumps, config: &Toy1dConfig, rng: &mut R) -> f64 {
    let mut params = vec![Tensor::new(vec![1], vec![rng.gen::<f64>()])];
    let mut adam = Adam::new(&params.iter().collect::<Vec<_>>());
    for _ in 0..config.iterations {
        let mut tape = Tape::new();
        let x = tape.leaf(params[0].clone());
        let fx = tape.custom(Box::new(*f), &[x]);
        let descent = tape.scale(fx, -1.0);
        let s = tape.sum(descent);
        let g = tape.backward(s).wrt(&tape, x);
        adam.update(params.iter_mut().collect(), &[g], config.plain_lr);
        let v = &mut params[0].data_mut()[0];
        *v = v.clamp(0.0, 1.0);
    }
    params[0].item()
}

/// Runs both methods on `seeds` random members of the two-bump family.
pub fn toy1d_suite(seeds: usize, seed: u64, config: &Toy1dConfig) -> Toy1dReport {
    let mut report = Toy1dReport {
        seeds,
        support_successes: 0,
        plain_successes: 0,
    };
    for i in 0..seeds {
        let mut rng = sample_rng(seed, i as u64);
        let f = TwoBumps::draw(&mut rng);
        let target = f.argmax(200_001);
        let hit = |x: f64| (x - target).abs() <= config.tolerance * target;
        if hit(toy_support_run(&f, config, &mut rng)) {
            report.support_successes += 1;
        }
        if hit(toy_plain_run(&f, config, &mut rng)) {
            report.plain_successes += 1;
        }
    }
    report
}
