use demix::dense::min_eigenvalue;
use demix::harness::{run_trials, TrialConfig};
use demix::localize::{localize, match_and_score, DEFAULT_THRESHOLD};
use demix::sdp::{dual_feasibility, extract_dual, solve_demix, DemixProblem, SolverOptions};
use demix::signal::{
    atom, measure, sample_psf_ratio, sample_sources, synthesize_signal, AmpLaw, PointSourceModel, Source,
};
use demix::Complex64;

fn norm(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn rel(a: &[Complex64], b: &[Complex64]) -> f64 {
    let d: Vec<Complex64> = a.iter().zip(b).map(|(a, b)| a - b).collect();
    norm(&d) / norm(b)
}

#[test]
fn single_atom_is_assigned_to_the_first_channel() {
    let m = 8;
    let g = sample_psf_ratio(m, 21).unwrap();
    let y = atom(0.3, m).unwrap();
    let prob = DemixProblem::new(y.clone(), &g).unwrap();
    let sol = solve_demix(&prob, &SolverOptions::default()).unwrap();
    assert!(sol.converged);
    assert!(rel(&sol.x1, &y) <= 1e-4);
    assert!(norm(&sol.x2) <= 1e-4 * norm(&y));
    assert!((sol.objective - 1.0).abs() <= 1e-3);
    let p = extract_dual(&sol).unwrap();
    let dual: f64 = p.iter().zip(&y).map(|(p, y)| (p.conj() * y).re).sum();
    assert!((dual - sol.objective).abs() <= 1e-3);
    let feas = dual_feasibility(&sol, &prob.g, 4096).unwrap();
    assert!(feas.sup_p <= 1.0 + 1e-3 && feas.sup_q <= 1.0 + 1e-3, "{feas:?}");
    for ch in [1, 2] {
        let t = if ch == 1 { sol.t1 } else { sol.t2 };
        assert!(min_eigenvalue(sol.block(ch).unwrap().as_ref()).unwrap() >= -1e-8 * (1.0 + t));
    }
}

#[test]
fn solution_scales_with_the_measurement() {
    let m = 8;
    let s1 = sample_sources(1, 2, 1.0 / m as f64, AmpLaw::ComplexGaussian, 5).unwrap();
    let s2 = sample_sources(2, 1, 1.0 / m as f64, AmpLaw::ComplexGaussian, 6).unwrap();
    let g = sample_psf_ratio(m, 7).unwrap();
    let meas = measure(&synthesize_signal(&s1, m).unwrap(), &synthesize_signal(&s2, m).unwrap(), &g).unwrap();
    let opts = SolverOptions::default();
    let a = solve_demix(&DemixProblem::new(meas.y.clone(), &g).unwrap(), &opts).unwrap();
    let doubled: Vec<Complex64> = meas.y.iter().map(|z| z * 2.0).collect();
    let b = solve_demix(&DemixProblem::new(doubled, &g).unwrap(), &opts).unwrap();
    let twice: Vec<Complex64> = a.x1.iter().map(|z| z * 2.0).collect();
    assert!(rel(&b.x1, &twice) <= 1e-6);
    let twice: Vec<Complex64> = a.x2.iter().map(|z| z * 2.0).collect();
    assert!(rel(&b.x2, &twice) <= 1e-6);
    assert!((b.objective - 2.0 * a.objective).abs() <= 1e-6 * a.objective);
}

#[test]
fn easy_cell_succeeds_nearly_always() {
    let cfg = TrialConfig::new(8, 1, 1, 20, 77);
    let results = run_trials(&cfg).unwrap();
    let wins = results.iter().filter(|r| r.success).count();
    assert!(wins >= 19, "{wins}/20");
    assert_eq!(results, run_trials(&cfg).unwrap());
}

#[test]
fn shared_locations_across_channels_are_separable() {
    // every channel-2 source sits exactly on a channel-1 source
    let m = 16;
    let mut ok = 0;
    for seed in 0..20u64 {
        let s1 = sample_sources(1, 2, 1.0 / m as f64, AmpLaw::ComplexGaussian, 300 + seed).unwrap();
        let amps2 = sample_sources(2, 2, 1.0 / m as f64, AmpLaw::ComplexGaussian, 400 + seed).unwrap().amps();
        let s2 = PointSourceModel::new(
            2,
            s1.taus().iter().zip(&amps2).map(|(&t, &a)| Source::new(t, a)).collect(),
        )
        .unwrap();
        let g = sample_psf_ratio(m, 500 + seed).unwrap();
        let x1 = synthesize_signal(&s1, m).unwrap();
        let x2 = synthesize_signal(&s2, m).unwrap();
        let meas = measure(&x1, &x2, &g).unwrap();
        let prob = DemixProblem::from_measurement(&meas).unwrap();
        let sol = solve_demix(&prob, &SolverOptions::default()).unwrap();
        if !sol.converged {
            continue;
        }
        let loc = localize(&prob.y, &prob.g, &sol.p, DEFAULT_THRESHOLD, 64 * m).unwrap();
        let score = match_and_score(&loc, &s1, &s2, 0.5 / m as f64);
        if score.exact_counts() && score.channel1.max_location_error <= 1e-3 && score.channel2.max_location_error <= 1e-3 {
            ok += 1;
        }
    }
    assert!(ok >= 16, "{ok}/20");
}

#[test]
fn localization_counts_match_without_model_order() {
    let m = 16;
    let cfg = TrialConfig::new(m, 2, 2, 1, 99);
    let (res, art) = demix::harness::run_trial_detailed(&cfg, 0).unwrap();
    let art = art.unwrap();
    assert!(res.success);
    let loc = localize(&art.problem.y, &art.problem.g, &art.solution.p, DEFAULT_THRESHOLD, 64 * m).unwrap();
    assert_eq!((loc.taus1.len(), loc.taus2.len()), (2, 2));
    let score = match_and_score(&loc, &art.sources1, &art.sources2, 0.5 / m as f64);
    assert!(score.channel1.max_location_error <= 1e-3);
    assert!(score.channel2.max_location_error <= 1e-3);
    assert!(loc.residual < 1e-3);
}
