use cfee_core::baselines::{equal_power, multistart_ascent, random_power, MultistartConfig};
use cfee_core::gnn::{GnnArch, PolicyParams};
use cfee_core::objective::{
    stochastic_objective, sum_ee_with, support_penalty, EeParams, KappaState, PowerAllocation, SupportBounds,
};
use cfee_core::scenario::{generate_sample, ChannelSample, Dataset, SystemParams};
use cfee_core::sinrnet::{Category, CategoryMask, SinrNetParams, SinrNetShape};
use cfee_core::tensor::{Tape, Tensor};
use cfee_core::training::{evaluate_policy, NormalizationParams};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn system(n_aps: usize, n_ues: usize) -> SystemParams {
    SystemParams {
        n_aps,
        n_ues,
        n_antennas: 3,
        ..Default::default()
    }
}

fn sample(n_aps: usize, n_ues: usize, seed: u64) -> ChannelSample {
    generate_sample(&system(n_aps, n_ues), &mut ChaCha8Rng::seed_from_u64(seed), false).unwrap()
}

fn perm(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + 1e-300
}

fn small_arch() -> GnnArch {
    GnnArch {
        layers: 2,
        node_dim: 3,
        message_dim: 3,
        sinr_widths: vec![8],
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn gains_are_finite_nonnegative_and_diagonal_dominant(l in 1usize..6, k in 1usize..6, seed in any::<u64>()) {
        let s = sample(l, k, seed);
        prop_assert!(s.gains.iter().all(|g| g.is_finite() && *g >= 0.0));
        for ap in 0..l {
            for u in 0..k {
                for j in 0..k {
                    prop_assert!(s.gain(ap, u, u) >= s.gain(ap, u, j) * (1.0 - 1e-12));
                }
            }
        }
    }

    #[test]
    fn datasets_are_determined_by_seed_and_round_trip(l in 1usize..4, k in 1usize..4, seed in any::<u64>()) {
        let a = Dataset::generate(&system(l, k), 3, seed).unwrap();
        let b = Dataset::generate(&system(l, k), 3, seed).unwrap();
        prop_assert_eq!(&a.samples, &b.samples);
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        let back = Dataset::read_from(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back.samples, &a.samples);
        prop_assert_eq!(&back.params, &a.params);
    }

    #[test]
    fn sum_ee_is_invariant_under_ue_and_ap_relabeling(l in 1usize..5, k in 1usize..5, seed in any::<u64>()) {
        let s = sample(l, k, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let p = PowerAllocation::new(k, l, (0..k * l).map(|_| rng.gen::<f64>()).collect());
        let ee = EeParams::from_system(&system(l, k));
        let base = sum_ee_with(&s, &p, &ee);
        let (ue, ap) = (perm(k, seed), perm(l, seed ^ 2));
        let p_ue = PowerAllocation::new(k, l, (0..k * l).map(|i| p.at(ue[i / l], i % l)).collect());
        let p_ap = PowerAllocation::new(k, l, (0..k * l).map(|i| p.at(i / l, ap[i % l])).collect());
        prop_assert!(close(sum_ee_with(&s.permute_ues(&ue), &p_ue, &ee), base, 1e-12));
        prop_assert!(close(sum_ee_with(&s.permute_aps(&ap), &p_ap, &ee), base, 1e-12));
    }

    #[test]
    fn sum_ee_is_zero_at_zero_power_and_never_negative(l in 1usize..5, k in 1usize..5, seed in any::<u64>()) {
        let s = sample(l, k, seed);
        let ee = EeParams::from_system(&system(l, k));
        prop_assert_eq!(sum_ee_with(&s, &PowerAllocation::uniform(k, l, 0.0), &ee), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = PowerAllocation::new(k, l, (0..k * l).map(|_| rng.gen::<f64>()).collect());
        prop_assert!(sum_ee_with(&s, &p, &ee) >= 0.0);
    }

    #[test]
    fn penalty_is_zero_exactly_for_point_supports(width in proptest::collection::vec(0.0f64..1.0, 1..12)) {
        let n = width.len();
        let b = SupportBounds { n_ues: n, n_aps: 1, a: vec![0.1; n], width: width.clone() };
        let psi = support_penalty(&b);
        prop_assert!(psi >= 0.0);
        prop_assert_eq!(psi == 0.0, width.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn kappa_is_zero_during_warmup_and_never_negative(
        window in 1usize..20,
        delta in 1e-4f64..1.0,
        psi in proptest::collection::vec(0.0f64..10.0, 1..200),
    ) {
        let mut k = KappaState::new(delta, window);
        for (i, &p) in psi.iter().enumerate() {
            k.update(p);
            prop_assert!(k.kappa >= 0.0);
            if i < window {
                prop_assert_eq!(k.kappa, 0.0);
            }
        }
    }

    #[test]
    fn point_support_objective_is_deterministic(l in 1usize..4, k in 1usize..4, seed in any::<u64>(), kappa in 0.0f64..5.0) {
        let s = sample(l, k, seed);
        let ee = EeParams::from_system(&system(l, k));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..k * l).map(|_| rng.gen()).collect();
        let b = SupportBounds { n_ues: k, n_aps: l, a: a.clone(), width: vec![0.0; k * l] };
        let v = stochastic_objective(&s, &b, kappa, 8, &mut rng, &ee);
        let point = sum_ee_with(&s, &PowerAllocation::new(k, l, a), &ee);
        prop_assert!(close(v.value, point, 1e-14));
        prop_assert!(v.powers.iter().all(|p| p.p == v.powers[0].p));
    }

    #[test]
    fn backward_is_pure_and_deterministic(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[3, n], |_| rng.gen_range(-2.0..2.0));
        let w = Tensor::from_fn(&[n, 4], |_| rng.gen_range(-2.0..2.0));
        let mut tape = Tape::<f64>::new();
        let (xv, wv) = (tape.leaf(x), tape.leaf(w));
        let h = tape.matmul(xv, wv);
        let s = tape.sigmoid(h);
        let r = tape.relu(h);
        let m = tape.mul(s, r);
        let out = tape.mean(m);
        let before: Vec<Tensor<f64>> = [xv, wv, h, s, r, m, out].iter().map(|&v| tape.value(v).clone()).collect();
        let g1 = tape.backward(out);
        let g2 = tape.backward(out);
        let after: Vec<Tensor<f64>> = [xv, wv, h, s, r, m, out].iter().map(|&v| tape.value(v).clone()).collect();
        prop_assert_eq!(before, after);
        prop_assert_eq!(g1.wrt(&tape, xv), g2.wrt(&tape, xv));
        prop_assert_eq!(g1.wrt(&tape, wv), g2.wrt(&tape, wv));
    }

    #[test]
    fn categories_partition_every_position(k in 1usize..7) {
        let mask = CategoryMask::new(k);
        let cats = [Category::Same, Category::SameReceiver, Category::SameTransmitter, Category::Other];
        for t in 0..k * k {
            let mut seen = vec![0; k * k];
            for c in cats {
                let set = mask.set(t / k, t % k, c);
                prop_assert_eq!(set.len(), mask.cardinality(c));
                for q in set {
                    seen[q] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn sinrnet_is_ue_permutation_equivariant(k in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = SinrNetShape { input: 2, widths: vec![8, 8], output: 3 };
        let mut net: SinrNetParams<f64> = SinrNetParams::init(&shape, &mut rng);
        for t in net.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
        let x = Tensor::from_fn(&[k, k, 2], |_| rng.gen_range(-1.0..1.0));
        let p = perm(k, seed);
        let px = Tensor::from_fn(&[k, k, 2], |i| x.data()[(p[i / (2 * k)] * k + p[(i / 2) % k]) * 2 + i % 2]);
        let run = |input: Tensor<f64>| {
            let mut tape = Tape::new();
            let vars = net.bind(&mut tape, false);
            let xv = tape.constant(input);
            let y = vars.forward(&mut tape, xv);
            tape.value(y).clone()
        };
        let (y, py) = (run(x), run(px));
        for i in 0..k * k * 3 {
            let (r, c, f) = (i / (3 * k), (i / 3) % k, i % 3);
            prop_assert!((py.data()[i] - y.data()[(p[r] * k + p[c]) * 3 + f]).abs() <= 1e-12);
        }
    }

    #[test]
    fn policy_bounds_stay_in_the_box(l in 1usize..5, k in 1usize..5, seed in any::<u64>(), p_max in 0.1f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy: PolicyParams<f64> = PolicyParams::init(&small_arch(), p_max, &mut rng);
        let x = Tensor::from_fn(&[2, l, k, k, 1], |_| rng.gen_range(-30.0..30.0));
        for b in policy.bounds(&x, None) {
            for (a, w) in b.a.iter().zip(&b.width) {
                prop_assert!(*a >= 0.0 && *w >= 0.0 && a + w <= p_max * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn held_out_ee_ignores_relabeling(l in 1usize..5, k in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy: PolicyParams<f64> = PolicyParams::init(&small_arch(), 1.0, &mut rng);
        let ds = Dataset::generate(&system(l, k), 4, seed).unwrap();
        let (ue, ap) = (perm(k, seed), perm(l, seed ^ 5));
        let mut moved = ds.clone();
        for s in &mut moved.samples {
            *s = s.permute_ues(&ue).permute_aps(&ap);
        }
        let norm = NormalizationParams::default();
        let a = evaluate_policy(&policy, &ds, &norm).unwrap();
        let b = evaluate_policy(&policy, &moved, &norm).unwrap();
        for (x, y) in a.per_sample.iter().zip(&b.per_sample) {
            prop_assert!(close(*x, *y, 1e-9));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn baselines_respect_the_power_box(l in 1usize..4, k in 1usize..4, seed in any::<u64>(), p_max in 0.01f64..2.0) {
        let s = sample(l, k, seed);
        let ee = EeParams::from_system(&system(l, k));
        prop_assert!(equal_power(&s, &ee, p_max, 30).unwrap().is_feasible(p_max));
        prop_assert!(random_power(&s, &mut ChaCha8Rng::seed_from_u64(seed), p_max).is_feasible(p_max));
        let cfg = MultistartConfig { restarts: 2, steps: 40, ..Default::default() };
        prop_assert!(multistart_ascent(&s, &ee, p_max, &cfg).unwrap().power.is_feasible(p_max));
    }

    #[test]
    fn multistart_is_monotone_in_restarts(l in 1usize..4, k in 1usize..4, seed in any::<u64>(), r in 1usize..4) {
        let s = sample(l, k, seed);
        let ee = EeParams::from_system(&system(l, k));
        let run = |restarts| {
            let cfg = MultistartConfig { restarts, steps: 40, seed, ..Default::default() };
            multistart_ascent(&s, &ee, 1.0, &cfg).unwrap().ee
        };
        prop_assert!(run(r + 1) >= run(r));
    }
}
