use std::collections::BTreeMap;

use dirichlet_core::conditional_predict::{conditional_type1, conditional_type2, PredictionRequest, Scale};
use dirichlet_core::estimation::{
    self, jeffreys_gradient, jeffreys_log_posterior, log_likelihood_gradient, mdi_gradient, mdi_log_posterior,
    FitSettings, Objective, SufficientStats,
};
use dirichlet_core::model_core::{
    aggregate, log_density_type1, log_density_type2, log_likelihood_type1, sample_dirichlet, to_type1, to_type2,
    CompositionMatrix, DirichletParams,
};
use dirichlet_core::special_fns::{self, RngStream};
use proptest::prelude::*;

fn params(k: &[f64]) -> DirichletParams {
    DirichletParams::new(k.to_vec()).unwrap()
}

fn k_vec(p: std::ops::RangeInclusive<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    p.prop_flat_map(move |p| proptest::collection::vec(lo..hi, p))
}

fn sample(k: &[f64], n: usize, seed: u64) -> CompositionMatrix {
    sample_dirichlet(&params(k), n, &mut RngStream::new(seed)).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn polygamma_signs(x in 0.01f64..500.0) {
        prop_assert!(special_fns::trigamma(x).unwrap() > 0.0);
        prop_assert!(special_fns::tetragamma(x).unwrap() < 0.0);
    }

    #[test]
    fn inv_digamma_round_trip(x in 0.01f64..1000.0) {
        let back = special_fns::inv_digamma(special_fns::digamma(x).unwrap()).unwrap();
        prop_assert!((back - x).abs() <= 1e-8 * x);
    }

    #[test]
    fn transform_round_trip(k in k_vec(2..=6, 0.5, 20.0), seed in 0u64..1000) {
        let x = sample(&k, 8, seed);
        for r in 0..k.len() {
            let back = to_type1(&to_type2(&x, r).unwrap()).unwrap();
            for (a, b) in back.rows().flatten().zip(x.rows().flatten()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn type2_density_is_change_of_variables(k in k_vec(2..=6, 0.5, 20.0), seed in 0u64..1000) {
        let pk = params(&k);
        let x = sample(&k, 3, seed);
        let y = to_type2(&x, k.len() - 1).unwrap();
        for (xr, yr) in x.rows().zip(y.rows()) {
            let s: f64 = yr.iter().sum();
            let lhs = log_density_type2(&pk, yr).unwrap();
            let rhs = log_density_type1(&pk, xr).unwrap() - k.len() as f64 * (1.0 + s).ln();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn likelihood_is_sum_of_densities(k in k_vec(2..=6, 0.3, 50.0), seed in 0u64..1000, n in 1usize..30) {
        let pk = params(&k);
        let x = sample(&k, n, seed);
        let total: f64 = x.rows().map(|r| log_density_type1(&pk, r).unwrap()).sum();
        let ll = log_likelihood_type1(&pk, &x).unwrap();
        prop_assert!((ll - total).abs() <= 1e-9 * total.abs().max(1.0));
    }

    #[test]
    fn aggregation_sums_merged_parameters(k in k_vec(3..=6, 0.5, 20.0), a in 0usize..6, b in 0usize..6) {
        let p = k.len();
        let (a, b) = (a % p, b % p);
        prop_assume!(a != b);
        let merged = aggregate(&params(&k), &[a, b]).unwrap();
        prop_assert_eq!(merged.dim(), p - 1);
        prop_assert!((merged.k0() - params(&k).k0()).abs() < 1e-12);
        prop_assert!(merged.k().iter().any(|&v| (v - (k[a] + k[b])).abs() < 1e-12));
    }

    #[test]
    fn gradients_match_finite_differences(k in k_vec(2..=5, 0.5, 200.0), seed in 0u64..1000) {
        let x = sample(&k, 20, seed);
        let stats = SufficientStats::from_data(&x);
        let pk = params(&k);
        let mdi = mdi_gradient(&pk, &stats);
        let ll = log_likelihood_gradient(&pk, &stats);
        let jeff = jeffreys_gradient(&pk, &stats).unwrap();
        for j in 0..k.len() {
            let h = 1e-5 * k[j];
            let at = |d: f64| { let mut v = k.clone(); v[j] += d; params(&v) };
            let fd = |f: &dyn Fn(&DirichletParams) -> f64| (f(&at(h)) - f(&at(-h))) / (2.0 * h);
            let fd_mdi = fd(&|p| mdi_log_posterior(p, &stats));
            let fd_ll = fd(&|p| stats.log_likelihood(p));
            let fd_jeff = fd(&|p| jeffreys_log_posterior(p, &stats).unwrap());
            // Tolerance scales with the magnitude of the terms being differenced.
            let scale = |g: f64| g.abs().max(stats.n() as f64 * 1e-2);
            prop_assert!((mdi[j] - fd_mdi).abs() <= 1e-5 * scale(mdi[j]), "mdi {j}: {} vs {fd_mdi}", mdi[j]);
            prop_assert!((ll[j] - fd_ll).abs() <= 1e-5 * scale(ll[j]), "ll {j}: {} vs {fd_ll}", ll[j]);
            prop_assert!((jeff[j] - fd_jeff).abs() <= 1e-5 * scale(jeff[j]), "jeff {j}: {} vs {fd_jeff}", jeff[j]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn estimators_are_permutation_equivariant(k in k_vec(2..=5, 1.0, 20.0), seed in 0u64..1000) {
        let x = sample(&k, 40, seed);
        let p = k.len();
        let perm: Vec<usize> = (0..p).rev().collect();
        let xp = x.permute_columns(&perm).unwrap();
        for objective in [Objective::Ml, Objective::MdiMode, Objective::JeffreysMode] {
            let a = estimation::fit(&x, &FitSettings::with_objective(objective)).unwrap().estimate;
            let b = estimation::fit(&xp, &FitSettings::with_objective(objective)).unwrap().estimate;
            for (i, &j) in perm.iter().enumerate() {
                prop_assert!(rel_err(b.k()[i], a.k()[j]) < 1e-6, "{objective:?}: {:?} vs {:?}", a.k(), b.k());
            }
        }
        // The moment estimator takes k0 from column 1, so only permutations
        // that keep column 1 in place carry over.
        let fixed_first: Vec<usize> = std::iter::once(0).chain((1..p).rev()).collect();
        let a = estimation::method_of_moments(&x).unwrap();
        let b = estimation::method_of_moments(&x.permute_columns(&fixed_first).unwrap()).unwrap();
        for (i, &j) in fixed_first.iter().enumerate() {
            prop_assert!(rel_err(b.k()[i], a.k()[j]) < 1e-12);
        }
    }

    #[test]
    fn fixed_point_agrees_with_gradient_ascent(k in k_vec(2..=5, 1.0, 20.0), seed in 0u64..1000) {
        let x = sample(&k, 50, seed);
        let stats = SufficientStats::from_data(&x);
        let init = estimation::method_of_moments(&x).unwrap();
        let settings = FitSettings::with_objective(Objective::Ml);
        let fp = estimation::mle_fixed_point(&stats, &init, &settings).unwrap();
        let ga = estimation::posterior_mode(&stats, &settings, &init).unwrap();
        prop_assert!(fp.converged && ga.converged);
        for (a, b) in fp.estimate.k().iter().zip(ga.estimate.k()) {
            prop_assert!((a - b).abs() <= 10.0 * settings.tolerance * a.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn recursive_conditioning_equals_joint(k in k_vec(4..=6, 0.5, 20.0), x1 in 0.05f64..0.4, x2 in 0.05f64..0.4) {
        let pk = params(&k);
        let p = k.len();
        let (a, b) = (p - 1, 0);
        let joint = conditional_type1(&pk, &[(a, x1), (b, x2)].into_iter().collect()).unwrap();
        // Eliminate a, then b inside the rescaled remainder.
        let first = conditional_type1(&pk, &[(a, x1)].into_iter().collect()).unwrap();
        let inner = params(&first.reduced);
        let second = conditional_type1(&inner, &[(0, x2 / first.scale)].into_iter().collect()).unwrap();
        prop_assert!((first.scale * second.scale - joint.scale).abs() <= 1e-12);
        prop_assert_eq!(&second.reduced, &joint.reduced);
    }

    #[test]
    fn conditional_draws_close_the_simplex(k in k_vec(3..=6, 0.2, 20.0), x1 in 0.01f64..0.9, seed in 0u64..1000) {
        let known: BTreeMap<usize, f64> = [(1, x1)].into_iter().collect();
        let spec = conditional_type1(&params(&k), &known).unwrap();
        let mut rng = RngStream::new(seed);
        for _ in 0..20 {
            let draw = spec.sample(&mut rng);
            prop_assert!(draw.iter().all(|&v| v > 0.0));
            prop_assert!((draw.iter().sum::<f64>() + x1 - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn conditional_means_are_permutation_equivariant(k in k_vec(3..=6, 0.5, 20.0), y in 0.1f64..5.0) {
        let p = k.len();
        let perm: Vec<usize> = (0..p).rev().collect();
        let kp: Vec<f64> = perm.iter().map(|&j| k[j]).collect();
        let known: BTreeMap<usize, f64> = [(1, y)].into_iter().collect();
        let a = conditional_type2(&params(&k), p - 1, &known).unwrap();
        // Component 1 stays at position p-2; the reference moves to position 0.
        let known_p: BTreeMap<usize, f64> = [(p - 2, y)].into_iter().collect();
        let b = conditional_type2(&params(&kp), 0, &known_p).unwrap();
        let (ma, mb) = (a.mean(), b.mean());
        for (qa, &ja) in a.unknown.iter().enumerate() {
            let qb = b.unknown.iter().position(|&jb| perm[jb] == ja).unwrap();
            prop_assert!((ma[qa] - mb[qb]).abs() <= 1e-12 * ma[qa].abs().max(1.0));
        }
        prop_assert_eq!(a.scale, b.scale);
    }
}

#[test]
fn beta_case_runs_through_every_routine() {
    let x = sample(&[3.0, 5.0], 200, 4);
    for objective in [Objective::Ml, Objective::MdiMode, Objective::JeffreysMode] {
        let r = estimation::fit(&x, &FitSettings::with_objective(objective)).unwrap();
        assert!(r.converged, "{objective:?}");
        assert_eq!(r.estimate.dim(), 2);
    }
    let y = to_type2(&x, 1).unwrap();
    assert_eq!(y.width(), 1);
    let req = PredictionRequest::new(vec![Some(0.3), None], Scale::Type1);
    assert_eq!(req.known(2).unwrap().len(), 1);
}
