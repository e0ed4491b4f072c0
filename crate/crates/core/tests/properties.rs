use proptest::prelude::*;

use rendertime_core::baselines::{bruder_mean, online_learn};
use rendertime_core::camera::{pose_to_rays, CameraPose};
use rendertime_core::eval::{mean_err, mrd, rmse, std_err, RmseTable};
use rendertime_core::lpt::{brute_force_optimal, graham_bound, lpt_assign, uniform_assign, Assignment};
use rendertime_core::nn::{Adam, Layer, Linear, OptimConfig, Param, Tensor};
use rendertime_core::raycast::{RenderConfig, Renderer};
use rendertime_core::stepctl::{adapt_delta, g_eval, g_inverse, isotonic_non_increasing, ControllerConfig, GTable};
use rendertime_core::transfer::{Lobe, TransferFunction};
use rendertime_core::util::rng_for;
use rendertime_core::volume::{downsample, gen_synthetic, normalize_to_signed_unit, Recipe, ValueRange, Volume};

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, ..ProptestConfig::default() }
}

fn lobe() -> impl Strategy<Value = Lobe> {
    (0.0f32..=1.0, 0.005f32..=0.2, 0.0f32..=1.0).prop_map(|(center, width, height)| Lobe { center, width, height })
}

fn g_table() -> impl Strategy<Value = GTable> {
    prop::collection::vec(0.01f64..1.0, 8..12).prop_map(|drops| {
        let n = drops.len();
        let deltas: Vec<f64> = (0..n).map(|i| 0.25 + 3.75 * i as f64 / (n - 1) as f64).collect();
        let mut t: Vec<f64> = drops.iter().scan(20.0, |acc, d| { *acc -= d; Some(*acc) }).collect();
        let r = n / 3;
        let scale = t[r];
        t.iter_mut().for_each(|v| *v /= scale);
        GTable { delta_ref: deltas[r], deltas, tnorm: t }
    })
}

proptest! {
    #![proptest_config(cfg(48))]

    #[test]
    fn normalize_is_idempotent(vals in prop::collection::vec(-1.0f32..=1.0, 27)) {
        let v = Volume::new([3, 3, 3], vals, ValueRange::SignedUnit).unwrap();
        let once = normalize_to_signed_unit(&v);
        let twice = normalize_to_signed_unit(&once);
        for (a, b) in once.values().iter().zip(twice.values()) {
            prop_assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn downsample_commutes_with_shift(seed in 0u64..1000, c in -0.3f32..0.3, t in 2usize..9) {
        let (v, _) = gen_synthetic(seed, [16, 16, 16], Recipe::ALL[(seed % 3) as usize]).unwrap();
        let v = Volume::from_fn([16, 16, 16], ValueRange::SignedUnit, |x, y, z| 0.5 * v.get(x, y, z)).unwrap();
        let shifted = v.shifted_unchecked(c);
        let a = downsample(&shifted, [t, t + 1, t]).unwrap();
        let b = downsample(&v, [t, t + 1, t]).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - (y + c)).abs() <= 1e-6);
        }
    }

    #[test]
    fn opacity_is_permutation_invariant(lobes in prop::collection::vec(lobe(), 1..5), s in 0.0f32..=1.0) {
        let a = TransferFunction::new(lobes.clone()).unwrap();
        let mut rev = lobes;
        rev.reverse();
        let b = TransferFunction::new(rev).unwrap();
        prop_assert!((a.opacity(s) - b.opacity(s)).abs() <= 1e-6);
    }

    #[test]
    fn kappa_round_trip(lobes in prop::collection::vec(lobe(), 1..5)) {
        let tf = TransferFunction::new(lobes).unwrap();
        prop_assert_eq!(TransferFunction::from_kappa(&tf.kappa()).unwrap(), tf);
    }

    #[test]
    fn rays_are_periodic_in_azimuth(rx in 0.0f64..360.0, ry in -89.0f64..=89.0, dz in 1.2f64..=4.0) {
        let a = pose_to_rays(&CameraPose { rx, ry, dz }, [20, 24, 28], (5, 4), 40.0);
        let b = pose_to_rays(&CameraPose { rx: rx + 360.0, ry, dz }, [20, 24, 28], (5, 4), 40.0);
        for ((oa, da), (ob, db)) in a.iter().zip(&b) {
            for k in 0..3 {
                prop_assert!((oa[k] - ob[k]).abs() <= 1e-6 * oa[k].abs().max(1.0));
                prop_assert!((da[k] - db[k]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn rmse_bias_variance(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..40)) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let r = rmse(&p, &t).unwrap();
        let m = mean_err(&p, &t).unwrap();
        let s = std_err(&p, &t).unwrap();
        prop_assert!(r >= 0.0);
        prop_assert!((r * r - (m * m + s * s)).abs() <= 1e-9 * (r * r).max(1.0));
        prop_assert_eq!(rmse(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn rmse_zero_only_for_exact(t in prop::collection::vec(-10.0f64..10.0, 1..20), i in 0usize..20, d in 1e-6f64..1.0) {
        let mut p = t.clone();
        let i = i % p.len();
        p[i] += d;
        prop_assert!(rmse(&p, &t).unwrap() > 0.0);
    }

    #[test]
    fn mrd_invariant_under_column_scaling(
        rows in prop::collection::vec(prop::collection::vec(0.1f64..10.0, 3), 2..5),
        col in 0usize..3,
        k in 0.01f64..100.0,
    ) {
        let models: Vec<String> = (0..rows.len()).map(|i| format!("m{i}")).collect();
        let scenarios: Vec<String> = (0..3).map(|j| format!("s{j}")).collect();
        let a = RmseTable { models: models.clone(), scenarios: scenarios.clone(), rmse: rows.clone() };
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().enumerate().map(|(j, &v)| if j == col { v * k } else { v }).collect()).collect();
        let b = RmseTable { models, scenarios, rmse: scaled };
        let (ra, rb) = (mrd(&a).unwrap(), mrd(&b).unwrap());
        for (x, y) in ra.iter().zip(&rb) {
            prop_assert!((x.mrd - y.mrd).abs() <= 1e-9 * x.mrd.abs().max(1.0));
        }
    }

    #[test]
    fn bruder_is_constant_and_from_sampled(times in prop::collection::vec(0.0f64..100.0, 1..60), seed in 0u64..100) {
        let e = bruder_mean(&times, 0.15, seed).unwrap();
        prop_assert_eq!(e.sampled.len(), ((0.15 * times.len() as f64) - 1e-9).ceil().max(1.0) as usize);
        let lo = e.sampled.iter().map(|&i| times[i]).fold(f64::INFINITY, f64::min);
        let hi = e.sampled.iter().map(|&i| times[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo - 1e-9 <= e.prediction && e.prediction <= hi + 1e-9);
    }

    #[test]
    fn online_shift_equivariance(h in prop::collection::vec(-100.0f64..100.0, 1..10), c in -50.0f64..50.0, w in 1usize..6) {
        let shifted: Vec<f64> = h.iter().map(|x| x + c).collect();
        let a = online_learn(&h, w).unwrap();
        let b = online_learn(&shifted, w).unwrap();
        prop_assert!((b - (a + c)).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn isotonic_output_is_non_increasing_projection(y in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let p = isotonic_non_increasing(&y);
        prop_assert_eq!(p.len(), y.len());
        for w in p.windows(2) {
            prop_assert!(w[0] >= w[1] - 1e-12);
        }
        let s: f64 = y.iter().sum();
        let sp: f64 = p.iter().sum();
        prop_assert!((s - sp).abs() <= 1e-9 * s.abs().max(1.0));
    }

    #[test]
    fn g_inverse_round_trip_within_a_cell(g in g_table(), u in 0.0f64..1.0) {
        prop_assert!((g_eval(&g, g.delta_ref) - 1.0).abs() <= 1e-6);
        let d = 0.25 + 3.75 * u;
        let back = g_inverse(&g, g_eval(&g, d));
        let cell = g.deltas[1] - g.deltas[0];
        prop_assert!((back - d).abs() <= cell + 1e-9);
    }

    #[test]
    fn adapt_delta_monotone_and_bounded(g in g_table(), a in 0.1f64..500.0, b in 0.1f64..500.0) {
        let cfg = ControllerConfig::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let dl = adapt_delta(&g, &cfg, lo);
        let dh = adapt_delta(&g, &cfg, hi);
        prop_assert!(dl <= dh + 1e-12);
        for d in [dl, dh] {
            prop_assert!(cfg.delta_min <= d && d <= cfg.delta_max);
        }
    }

    #[test]
    fn lpt_within_graham_bound(times in prop::collection::vec(1u32..50, 1..9), m in 2usize..4) {
        let t: Vec<f64> = times.iter().map(|&x| x as f64).collect();
        let a = Assignment::from_nodes(lpt_assign(&t, m), &t, m);
        let opt = brute_force_optimal(&t, m).unwrap();
        prop_assert!(a.makespan <= graham_bound(m) * opt + 1e-9);
        prop_assert_eq!(a.counts().iter().sum::<usize>(), t.len());
    }

    #[test]
    fn uniform_counts_differ_by_at_most_one(n in 0usize..200, m in 1usize..40, seed in 0u64..50) {
        let a = Assignment::from_nodes(uniform_assign(n, m, seed), &vec![1.0; n], m);
        let c = a.counts();
        prop_assert_eq!(c.iter().sum::<usize>(), n);
        prop_assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
    }
}

proptest! {
    #![proptest_config(cfg(12))]

    #[test]
    fn primary_samples_non_increasing_in_step(seed in 0u64..100, rx in 0.0f64..360.0, ry in -60.0f64..60.0) {
        let (v, _) = gen_synthetic(seed, [24, 24, 24], Recipe::ALL[(seed % 3) as usize]).unwrap();
        let r = Renderer::new(&v);
        let tf = rendertime_core::transfer::sample_tf(&mut rng_for(seed, 1), 3);
        let pose = CameraPose::new(rx, ry, 2.0).unwrap();
        let mut last = u64::MAX;
        for step in [0.5f32, 1.0, 2.0, 4.0] {
            let cfg = RenderConfig::default().with_image(24, 24).with_step(step);
            let s = r.cost(&tf, &pose, &cfg).unwrap().samples_primary;
            prop_assert!(s <= last, "step {} gave {} after {}", step, s, last);
            last = s;
        }
    }

    #[test]
    fn ert_one_never_decreases_samples(seed in 0u64..100, rx in 0.0f64..360.0) {
        let (v, _) = gen_synthetic(seed, [24, 24, 24], Recipe::ALL[(seed % 3) as usize]).unwrap();
        let r = Renderer::new(&v);
        let tf = rendertime_core::transfer::sample_tf(&mut rng_for(seed, 2), 3);
        let pose = CameraPose::new(rx, 10.0, 2.0).unwrap();
        let base = RenderConfig::default().with_image(24, 24);
        let off = RenderConfig { ert_threshold: 1.0, ..base.clone() };
        let (fa, sa) = r.render(&tf, &pose, &base).unwrap();
        let (fb, sb) = r.render(&tf, &pose, &off).unwrap();
        prop_assert!(sb.samples_primary >= sa.samples_primary);
        // A terminated ray leaves at most 1 - 0.99 of transmittance unspent.
        let bound = ((1.0 - base.ert_threshold) * 255.0).ceil() as u8;
        prop_assert!(fa.max_channel_diff(&fb) <= bound, "diff {}", fa.max_channel_diff(&fb));
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let mut rng = rng_for(seed, 0);
        let mut fc = Linear::<f64>::new(5, 3, &mut rng);
        let x = Tensor::from_fn(&[4, 5], |i| (i as f64 * 0.37).sin());
        let a = fc.forward(&x, true).unwrap();
        let b = fc.forward(&x, true).unwrap();
        prop_assert_eq!(a.data(), b.data());
        let c = fc.infer(&x).unwrap();
        prop_assert_eq!(c.data(), a.data());
    }

    #[test]
    fn adam_with_zero_gradient_is_a_no_op(vals in prop::collection::vec(-5.0f64..5.0, 1..20), lr in 1e-5f64..1e-1) {
        let mut p = Param::new(Tensor::new(vec![vals.len()], vals.clone()).unwrap());
        let mut adam = Adam::new(&OptimConfig::default());
        for _ in 0..3 {
            adam.step(&mut [&mut p], lr);
        }
        prop_assert_eq!(p.value.data(), vals.as_slice());
    }
}
