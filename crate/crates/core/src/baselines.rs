//! Reference allocators: equal power, random power and a multi-start
//! projected-gradient optimizer run separately on every sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::objective::{sum_ee_on_tape, sum_ee_with, EeParams, PowerAllocation};
use crate::scenario::{ChannelSample, Dataset};
use crate::tensor::{Tape, Tensor};

/// Smallest power on the equal-power search grid, watts.
pub const EQUAL_POWER_FLOOR: f64 = 1e-6;

/// The same power on every link, chosen on a log-spaced grid over
/// `[1e-6, p_max]`; ties go to the smallest power.
pub fn equal_power(sample: &ChannelSample, ee: &EeParams<f64>, p_max: f64, grid: usize) -> Result<PowerAllocation> {
    if grid < 2 {
        return Err(Error::InvalidParams(format!("equal-power grid needs ≥ 2 points, got {grid}")));
    }
    if !(p_max > EQUAL_POWER_FLOOR) {
        return Err(Error::InvalidParams(format!("p_max {p_max} must exceed {EQUAL_POWER_FLOOR}")));
    }
    let (nk, nl) = (sample.n_ues, sample.n_aps);
    let ratio = (p_max / EQUAL_POWER_FLOOR).ln();
    let mut best = (f64::NEG_INFINITY, EQUAL_POWER_FLOOR);
    for i in 0..grid {
        let p = if i + 1 == grid {
            p_max
        } else {
            EQUAL_POWER_FLOOR * (ratio * i as f64 / (grid - 1) as f64).exp()
        };
        let v = sum_ee_with(sample, &PowerAllocation::uniform(nk, nl, p), ee);
        if v > best.0 {
            best = (v, p);
        }
    }
    Ok(PowerAllocation::uniform(nk, nl, best.1))
}

/// i.i.d. `U(0, p_max)` entries.
pub fn random_power<R: Rng + ?Sized>(sample: &ChannelSample, rng: &mut R, p_max: f64) -> PowerAllocation {
    let n = sample.n_ues * sample.n_aps;
    PowerAllocation::new(sample.n_ues, sample.n_aps, (0..n).map(|_| rng.gen::<f64>() * p_max).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultistartConfig {
    pub restarts: usize,
    pub steps: usize,
    /// First step length as a fraction of `p_max`.
    pub step_init: f64,
    /// Last step length as a fraction of `p_max`.
    pub step_final: f64,
    pub seed: u64,
}

impl Default for MultistartConfig {
    fn default() -> Self {
        Self {
            restarts: 16,
            steps: 2000,
            step_init: 0.5,
            step_final: 1e-5,
            seed: 0,
        }
    }
}

/// Best allocation found and its EE.
#[derive(Clone, Debug, PartialEq)]
pub struct MultistartResult {
    pub power: PowerAllocation,
    pub ee: f64,
}

/// Projected gradient ascent on `J` from `restarts` random starts.
///
/// Each start ascends along its gradient scaled to unit max-norm, with a step
/// length decaying geometrically from `step_init·p_max` to
/// `step_final·p_max`, clipped to `[0, p_max]` after every step. Start `r`
/// depends only on `seed` and `r`, so more restarts never do worse. Returns
/// the best iterate seen.
pub fn multistart_ascent(
    sample: &ChannelSample,
    ee: &EeParams<f64>,
    p_max: f64,
    config: &MultistartConfig,
) -> Result<MultistartResult> {
    if config.restarts == 0 || config.steps == 0 {
        return Err(Error::InvalidParams("restarts and steps must be ≥ 1".into()));
    }
    if !(config.step_init > 0.0 && config.step_final > 0.0 && config.step_final <= config.step_init) {
        return Err(Error::InvalidParams("need 0 < step_final ≤ step_init".into()));
    }
    let (nk, nl) = (sample.n_ues, sample.n_aps);
    let (r, n) = (config.restarts, nk * nl);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut p: Vec<f64> = (0..r * n).map(|_| rng.gen::<f64>() * p_max).collect();
    let gains = Tensor::new(vec![1, nl, nk, nk], sample.gains.clone());
    let decay = if config.steps > 1 {
        (config.step_final / config.step_init).powf(1.0 / (config.steps - 1) as f64)
    } else {
        1.0
    };
    let mut best = vec![(f64::NEG_INFINITY, 0usize); r];
    let mut best_p = p.clone();
    let mut step = config.step_init * p_max;
    for it in 0..=config.steps {
        let mut tape = Tape::new();
        let pv = tape.leaf(Tensor::new(vec![1, r, nk, nl], p.clone()));
        let values = sum_ee_on_tape(&mut tape, pv, gains.clone(), *ee);
        let total = tape.sum(values);
        for (i, &v) in tape.value(values).data().iter().enumerate() {
            if v > best[i].0 {
                best[i] = (v, it);
                best_p[i * n..(i + 1) * n].copy_from_slice(&p[i * n..(i + 1) * n]);
            }
        }
        if it == config.steps {
            break;
        }
        let grads = tape.backward(total).wrt(&tape, pv);
        for (pi, gi) in p.chunks_exact_mut(n).zip(grads.data().chunks_exact(n)) {
            let norm = gi.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            if norm > 0.0 && norm.is_finite() {
                for (x, g) in pi.iter_mut().zip(gi) {
                    *x = (*x + step * g / norm).clamp(0.0, p_max);
                }
            }
        }
        step *= decay;
    }
    let (i, (v, _)) = best
        .iter()
        .enumerate()
        .fold((0, (f64::NEG_INFINITY, 0)), |acc, (i, b)| if b.0 > acc.1 .0 { (i, *b) } else { acc });
    Ok(MultistartResult {
        power: PowerAllocation::new(nk, nl, best_p[i * n..(i + 1) * n].to_vec()),
        ee: v,
    })
}

/// Per-sample EE (bit/Joule) of every baseline on a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineReport {
    pub equal: Vec<f64>,
    pub random: Vec<f64>,
    pub multistart: Vec<f64>,
}

/// Runs all baselines on every sample in parallel. Sample `i` draws its
/// random allocation from stream `i` of `seed`.
pub fn run_baselines(
    dataset: &Dataset,
    p_max: f64,
    equal_grid: usize,
    multistart: &MultistartConfig,
    seed: u64,
) -> Result<BaselineReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ee = EeParams::from_system(&dataset.params);
    let rows = dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let equal = sum_ee_with(s, &equal_power(s, &ee, p_max, equal_grid)?, &ee);
            let random = sum_ee_with(s, &random_power(s, &mut rng, p_max), &ee);
            let ms = multistart_ascent(s, &ee, p_max, multistart)?.ee;
            Ok((equal, random, ms))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BaselineReport {
        equal: rows.iter().map(|r| r.0).collect(),
        random: rows.iter().map(|r| r.1).collect(),
        multistart: rows.iter().map(|r| r.2).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{Dataset, SystemParams};

    fn params(n_aps: usize, n_ues: usize) -> SystemParams {
        SystemParams {
            n_aps,
            n_ues,
            n_antennas: 3,
            ..Default::default()
        }
    }

    /// Dense scan of `J(p)` for a single link.
    fn grid_optimum(sample: &ChannelSample, ee: &EeParams<f64>, p_max: f64, points: usize) -> (f64, f64) {
        (0..points)
            .map(|i| p_max * i as f64 / (points - 1) as f64)
            .map(|p| (sum_ee_with(sample, &PowerAllocation::uniform(1, 1, p), ee), p))
            .fold((f64::NEG_INFINITY, 0.0), |a, b| if b.0 > a.0 { b } else { a })
    }

    #[test]
    fn equal_power_on_zero_gains_picks_the_floor() {
        let s = ChannelSample::from_gains(2, 2, vec![0.0; 8]);
        let ee = EeParams::from_system(&params(2, 2));
        let p = equal_power(&s, &ee, 1.0, 50).unwrap();
        assert!(p.p.iter().all(|&v| v == EQUAL_POWER_FLOOR));
        assert!(equal_power(&s, &ee, 1.0, 1).is_err());
    }

    #[test]
    fn equal_power_single_link_lands_within_a_grid_cell() {
        let ds = Dataset::generate(&params(1, 1), 5, 11).unwrap();
        let ee = EeParams::from_system(&ds.params);
        let grid = 200;
        let cell = (1.0f64 / EQUAL_POWER_FLOOR).ln() / (grid - 1) as f64;
        for s in &ds.samples {
            let p = equal_power(s, &ee, 1.0, grid).unwrap().p[0];
            let (_, reference) = grid_optimum(s, &ee, 1.0, 10_000);
            assert!((p.ln() - reference.ln()).abs() <= cell + 1e-4 / reference, "{p} vs {reference}");
        }
    }

    #[test]
    fn equal_power_is_independent_of_sample_order() {
        let ds = Dataset::generate(&params(3, 2), 6, 1).unwrap();
        let ee = EeParams::from_system(&ds.params);
        let fwd: Vec<_> = ds.samples.iter().map(|s| equal_power(s, &ee, 1.0, 64).unwrap()).collect();
        let mut rev: Vec<_> = ds.samples.iter().rev().map(|s| equal_power(s, &ee, 1.0, 64).unwrap()).collect();
        rev.reverse();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn random_power_is_uniform_on_the_box() {
        let s = ChannelSample::from_gains(10, 10, vec![1.0; 1000]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sum = 0.0;
        let mut n = 0;
        for _ in 0..1000 {
            let p = random_power(&s, &mut rng, 2.0);
            assert!(p.is_feasible(2.0));
            sum += p.p.iter().sum::<f64>();
            n += p.p.len();
        }
        assert!(n >= 100_000);
        assert!((sum / n as f64 - 1.0).abs() < 0.01);
        let again = random_power(&s, &mut ChaCha8Rng::seed_from_u64(5), 2.0);
        assert_eq!(again, random_power(&s, &mut ChaCha8Rng::seed_from_u64(5), 2.0));
    }

    #[test]
    fn multistart_single_link_matches_the_grid() {
        let ds = Dataset::generate(&params(1, 1), 5, 12).unwrap();
        let ee = EeParams::from_system(&ds.params);
        for s in &ds.samples {
            let r = multistart_ascent(s, &ee, 1.0, &MultistartConfig::default()).unwrap();
            let (best, _) = grid_optimum(s, &ee, 1.0, 100_001);
            assert!(r.ee >= 0.995 * best, "{} vs {best}", r.ee);
            assert!(r.power.is_feasible(1.0));
        }
    }

    #[test]
    fn multistart_beats_equal_power() {
        let ds = Dataset::generate(&params(3, 3), 256, 13).unwrap();
        let ee = EeParams::from_system(&ds.params);
        let cfg = MultistartConfig {
            restarts: 4,
            steps: 300,
            ..Default::default()
        };
        let wins = ds
            .samples
            .iter()
            .filter(|s| {
                let eq = sum_ee_with(s, &equal_power(s, &ee, 1.0, 100).unwrap(), &ee);
                multistart_ascent(s, &ee, 1.0, &cfg).unwrap().ee >= eq
            })
            .count();
        assert!(wins as f64 >= 0.95 * 256.0, "{wins} of 256");
    }

    #[test]
    fn more_restarts_never_hurt_and_seed_fixes_the_result() {
        let ds = Dataset::generate(&params(3, 4), 4, 14).unwrap();
        let ee = EeParams::from_system(&ds.params);
        for s in &ds.samples {
            let mut last = f64::NEG_INFINITY;
            for restarts in 1..=4 {
                let cfg = MultistartConfig {
                    restarts,
                    steps: 200,
                    ..Default::default()
                };
                let r = multistart_ascent(s, &ee, 1.0, &cfg).unwrap();
                assert!(r.ee >= last);
                assert_eq!(r, multistart_ascent(s, &ee, 1.0, &cfg).unwrap());
                last = r.ee;
            }
        }
    }

    #[test]
    fn multistart_rejects_empty_budgets() {
        let s = ChannelSample::from_gains(1, 1, vec![1.0]);
        let ee = EeParams::from_system(&params(1, 1));
        let cfg = MultistartConfig {
            restarts: 0,
            ..Default::default()
        };
        assert!(multistart_ascent(&s, &ee, 1.0, &cfg).is_err());
    }
}
