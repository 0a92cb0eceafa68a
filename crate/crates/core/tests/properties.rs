use std::f64::consts::PI;

use demix::certificate::{build_system, construct_certificate, solve_coefficients, verify_certificate, VerifyOptions};
use demix::fejer::FejerKernel;
use demix::harness::{grid_from_csv, grid_to_csv, trial_seed, PhaseTransitionGrid};
use demix::localize::{greedy_match, locate, DEFAULT_THRESHOLD};
use demix::sdp::{dual_norm, toeplitz_adjoint, toeplitz_from_generator};
use demix::signal::{atom, sample_psf_ratio, PointSourceModel, sample_sources, synthesize_signal, wrap_distance, AmpLaw};
use demix::trig::eval_poly;
use demix::Complex64;
use proptest::prelude::*;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn complex_vec(len: usize) -> impl Strategy<Value = Vec<Complex64>> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0).prop_map(|(a, b)| c(a, b)), len)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn wrap_distance_is_a_metric_on_the_circle(a in 0.0f64..1.0, b in 0.0f64..1.0, d in 0.0f64..1.0) {
        let ab = wrap_distance(a, b);
        prop_assert!((0.0..=0.5).contains(&ab));
        prop_assert_eq!(ab, wrap_distance(b, a));
        prop_assert!(ab <= wrap_distance(a, d) + wrap_distance(d, b) + 1e-15);
        prop_assert!((wrap_distance(a + 1.0, b) - ab).abs() < 1e-12);
    }

    #[test]
    fn atoms_have_unit_modulus_and_shift_by_phase(tau in 0.0f64..1.0, shift in 0.0f64..1.0, m in 1usize..12) {
        let a = atom(tau, m).unwrap();
        let b = atom((tau + shift).rem_euclid(1.0), m).unwrap();
        for (i, (za, zb)) in a.iter().zip(&b).enumerate() {
            let n = i as f64 - 2.0 * m as f64;
            prop_assert!((za.norm() - 1.0).abs() < 1e-12);
            let expected = za * Complex64::from_polar(1.0, -2.0 * PI * n * shift);
            prop_assert!((zb - expected).norm() < 1e-9);
        }
    }

    #[test]
    fn synthesis_is_linear_in_amplitudes(seed in 0u64..1000, k in 1usize..5, re in -2.0f64..2.0, im in -2.0f64..2.0) {
        let m = 6;
        let s = sample_sources(1, k, 1.0 / m as f64, AmpLaw::ComplexGaussian, seed).unwrap();
        let factor = c(re, im);
        prop_assume!(factor.norm() > 1e-3);
        let x = synthesize_signal(&s, m).unwrap();
        let y = synthesize_signal(&s.scaled(factor), m).unwrap();
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((a * factor - b).norm() < 1e-10);
        }
    }

    #[test]
    fn kernel_is_real_even_and_bounded(tau in -1.0f64..1.0, m in 2usize..20) {
        let k = FejerKernel::new(m).unwrap();
        let v = k.eval(tau, 0);
        prop_assert!(v.im.abs() < 1e-12);
        prop_assert!(v.re <= 1.0 + 1e-12);
        prop_assert!((v - k.eval(-tau, 0)).norm() < 1e-12);
        // odd derivatives are odd functions
        prop_assert!((k.eval(tau, 1) + k.eval(-tau, 1)).norm() < 1e-9 * (1.0 + k.kpp0().abs()));
    }

    #[test]
    fn toeplitz_adjoint_matches_inner_products(u in complex_vec(5), h in complex_vec(25)) {
        let mut u = u;
        u[0].im = 0.0;
        let t = toeplitz_from_generator(&u).unwrap();
        let mut hm = faer::Mat::<Complex64>::zeros(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                hm[(i, j)] = h[i * 5 + j];
            }
        }
        // Hermitian part so the real inner products are the natural ones
        let hh = faer::Mat::<Complex64>::from_fn(5, 5, |i, j| (hm[(i, j)] + hm[(j, i)].conj()) * 0.5);
        let lhs: f64 = (0..5).flat_map(|i| (0..5).map(move |j| (i, j))).map(|(i, j)| (t[(i, j)].conj() * hh[(i, j)]).re).sum();
        let adj = toeplitz_adjoint(&hh);
        let rhs: f64 = u.iter().zip(&adj).map(|(a, b)| (a.conj() * b).re).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn dual_norm_bounds_every_value(p in complex_vec(17), tau in 0.0f64..1.0) {
        let sup = dual_norm(&p, 16 * 4 * 4).unwrap();
        prop_assert!(eval_poly(&p, tau, 0).norm() <= sup + 1e-9);
        let coarse = dual_norm(&p, 64).unwrap();
        prop_assert!(coarse <= sup + 1e-6);
    }

    #[test]
    fn greedy_matches_exhaustive_assignment_on_perturbed_estimates(
        seed in 0u64..10_000,
        k in 1usize..5,
        noise in prop::collection::vec(-1e-3f64..1e-3, 4),
        perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let m = 8;
        let truth = sample_sources(1, k, 1.0 / m as f64, AmpLaw::UnitCircle, seed).unwrap().taus();
        let order: Vec<usize> = perm.into_iter().filter(|&i| i < k).collect();
        let est: Vec<f64> = order.iter().map(|&i| (truth[i] + noise[i]).rem_euclid(1.0)).collect();
        let greedy = greedy_match(&est, &truth, 0.5 / m as f64);
        let greedy_cost: f64 = greedy.iter().enumerate().map(|(t, e)| wrap_distance(truth[t], est[e.unwrap()])).sum();
        let best = permutations(k).into_iter().map(|p| {
            p.iter().enumerate().map(|(t, &e)| wrap_distance(truth[t], est[e])).sum::<f64>()
        }).fold(f64::INFINITY, f64::min);
        prop_assert!((greedy_cost - best).abs() < 1e-15);
    }

    #[test]
    fn grid_csv_round_trips(rates in prop::collection::vec(prop::option::of(0u32..=20), 9), trials in 1usize..50) {
        let grid = PhaseTransitionGrid {
            m: 8,
            k_range: vec![1, 2, 3],
            success_rate: rates.chunks(3).map(|row| row.iter().map(|r| r.map(|w| w as f64 / 20.0)).collect()).collect(),
            trials_per_cell: trials,
        };
        prop_assert_eq!(grid_from_csv(&grid_to_csv(&grid), 8).unwrap(), grid);
    }

    #[test]
    fn trial_seeds_do_not_collide_across_cells(base in any::<u64>()) {
        let mut seen = std::collections::HashSet::new();
        for k1 in 1..=6 {
            for k2 in 1..=6 {
                for t in 0..20 {
                    prop_assert!(seen.insert(trial_seed(base, k1, k2, t)));
                }
            }
        }
    }
}

fn draw(channel: u8, k: usize, delta: f64, seed: u64) -> PointSourceModel {
    if k == 0 {
        PointSourceModel::new(channel, vec![]).unwrap()
    } else {
        sample_sources(channel, k, delta, AmpLaw::UnitCircle, seed).unwrap()
    }
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn certificates_interpolate_and_blocks_are_adjoint(seed in 0u64..100_000, m in 8usize..=16, k1 in 0usize..=2, k2 in 0usize..=2) {
        prop_assume!(k1 + k2 > 0);
        let delta = 1.0 / m as f64;
        let s1 = draw(1, k1, delta, seed);
        let s2 = draw(2, k2, delta, seed + 1);
        let g = sample_psf_ratio(m, seed + 2).unwrap();
        let kern = FejerKernel::new(m).unwrap();
        let sys = build_system(&kern, &g, &s1.taus(), &s2.taus()).unwrap();
        let (wg, wgb) = (sys.wg(), sys.wgbar());
        for i in 0..wg.nrows() {
            for j in 0..wg.ncols() {
                prop_assert!((wg[(i, j)] - wgb[(j, i)].conj()).norm() < 1e-12);
            }
        }
        let Ok(sys) = solve_coefficients(sys, &s1.signs(), &s2.signs()) else {
            return Ok(());
        };
        prop_assert!(sys.coefficients().unwrap().relative_residual <= 1e-10);
        let (_, dual) = construct_certificate(&kern, &g, &s1.taus(), &s1.signs(), &s2.taus(), &s2.signs()).unwrap();
        for (t, s) in s1.taus().iter().zip(s1.signs()) {
            prop_assert!((dual.eval_p(*t, 0) - s).norm() <= 1e-8);
            prop_assert!(dual.eval_p(*t, 1).norm() <= 1e-8 * kern.scale());
        }
        for (t, s) in s2.taus().iter().zip(s2.signs()) {
            prop_assert!((dual.eval_q(*t, 0) - s).norm() <= 1e-8);
        }
    }

    #[test]
    fn localization_is_shift_covariant(seed in 0u64..100_000, shift in 0.0f64..1.0) {
        let m = 8;
        let delta = 1.0 / m as f64;
        let s1 = sample_sources(1, 2, delta, AmpLaw::UnitCircle, seed).unwrap();
        let s2 = sample_sources(2, 2, delta, AmpLaw::UnitCircle, seed + 1).unwrap();
        let g = sample_psf_ratio(m, seed + 2).unwrap();
        let kern = FejerKernel::new(m).unwrap();
        let Ok((_, dual)) = construct_certificate(&kern, &g, &s1.taus(), &s1.signs(), &s2.taus(), &s2.signs()) else {
            return Ok(());
        };
        let (a1, a2) = (s1.shifted(shift), s2.shifted(shift));
        let (_, moved) = construct_certificate(&kern, &g, &a1.taus(), &a1.signs(), &a2.taus(), &a2.signs()).unwrap();
        let before = locate(&dual.p, g.values(), DEFAULT_THRESHOLD, 64 * m).unwrap();
        let after = locate(&moved.p, g.values(), DEFAULT_THRESHOLD, 64 * m).unwrap();
        prop_assert_eq!(before.0.len(), after.0.len());
        prop_assert_eq!(before.1.len(), after.1.len());
        for (list, moved_list) in [(&before.0, &after.0), (&before.1, &after.1)] {
            for t in list {
                let target = (t + shift).rem_euclid(1.0);
                let nearest = moved_list.iter().map(|u| wrap_distance(*u, target)).fold(f64::INFINITY, f64::min);
                prop_assert!(nearest <= 1e-6, "{} vs {:?}", target, moved_list);
            }
        }
    }

    #[test]
    fn localization_never_swaps_channels(seed in 0u64..100_000) {
        let m = 16;
        let delta = 1.0 / m as f64;
        let s1 = sample_sources(1, 2, delta, AmpLaw::UnitCircle, seed).unwrap();
        let s2 = sample_sources(2, 2, delta, AmpLaw::UnitCircle, seed + 1).unwrap();
        let g = sample_psf_ratio(m, seed + 2).unwrap();
        let kern = FejerKernel::new(m).unwrap();
        let Ok((_, dual)) = construct_certificate(&kern, &g, &s1.taus(), &s1.signs(), &s2.taus(), &s2.signs()) else {
            return Ok(());
        };
        let (taus1, taus2) = locate(&dual.p, g.values(), DEFAULT_THRESHOLD, 64 * m).unwrap();
        for channel in [1, 2] {
            let (own, other, found) = if channel == 1 { (s1.taus(), s2.taus(), &taus1) } else { (s2.taus(), s1.taus(), &taus2) };
            for t in other {
                let value = if channel == 1 { dual.eval_p(t, 0).norm() } else { dual.eval_q(t, 0).norm() };
                // only meaningful when this channel's polynomial stays clear of 1 there
                if value > 1.0 - 2.0 * DEFAULT_THRESHOLD || own.iter().any(|&o| wrap_distance(o, t) < 0.1 / m as f64) {
                    continue;
                }
                prop_assert!(found.iter().all(|&f| wrap_distance(f, t) > 1e-4));
            }
        }
    }
}

#[test]
fn degenerate_single_channel_certificate_is_valid() {
    let m = 16;
    let kern = FejerKernel::new(m).unwrap();
    let g = sample_psf_ratio(m, 77).unwrap();
    let sign = c(0.6, -0.8);
    let (_, dual) = construct_certificate(&kern, &g, &[0.42], &[sign], &[], &[]).unwrap();
    for i in 0..200 {
        let t = i as f64 / 200.0;
        assert!((dual.eval_p(t, 0) - sign * kern.eval(t - 0.42, 0)).norm() < 1e-10);
    }
    let rep = verify_certificate(&dual, &[0.42], &[], &[sign], &[], &VerifyOptions::for_bandwidth(m)).unwrap();
    assert!(rep.valid, "{rep:?}");
}
