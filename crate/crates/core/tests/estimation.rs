use approx::assert_relative_eq;
use lccmkit::builtin::{self, TABLE3_FREE};
use lccmkit::data::{AltLabel, PanelDataset};
use lccmkit::estimation::{canonicalize_classes, fit, stepwise_prune, FitOptions, FitStatus};
use lccmkit::likelihood::{ChoiceRule, PanelLikelihood};
use lccmkit::simulate::{simulate_dataset, SimulationConfig};
use lccmkit::spec::{ClassMembershipSpec, ClassSpec, MembershipSpec, ModelSpec, Role};
use lccmkit::Error;

/// Single-class model with the first published class as truth.
fn mnl_truth() -> ModelSpec {
    let mut spec = builtin::paper_mnl();
    for (class, name, value) in TABLE3_FREE {
        if class == 0 {
            let i = spec.resolve(0, name).unwrap();
            spec.parameters[i].initial_value = value;
        }
    }
    spec
}

fn zero_start(spec: &ModelSpec) -> ModelSpec {
    spec.with_initial_free(&vec![0.0; spec.n_free()])
}

fn simulate(spec: &ModelSpec, n: usize, seed: u64) -> PanelDataset {
    let config = SimulationConfig {
        n_respondents: n,
        seed,
        ..Default::default()
    };
    simulate_dataset(spec, &config).unwrap().dataset
}

/// Two copies of the single-class model with an intercept-only membership.
fn exchangeable_two_class() -> ModelSpec {
    let base = builtin::paper_mnl();
    let mut parameters = Vec::new();
    for c in 0..2 {
        for p in &base.parameters {
            let mut p = p.clone();
            p.class_index = Some(c);
            parameters.push(p);
        }
    }
    parameters.push(lccmkit::ParameterSpec::free("intercept", Some(1)));
    let class = |name: &str| ClassSpec {
        name: name.into(),
        utility: base.classes[0].utility.clone(),
    };
    ModelSpec {
        name: "two-copies".into(),
        schema: base.schema.clone(),
        parameters,
        classes: vec![class("a"), class("b")],
        membership: MembershipSpec {
            covariates: vec![],
            classes: vec![
                ClassMembershipSpec::default(),
                ClassMembershipSpec {
                    intercept: Some("intercept".into()),
                    ..Default::default()
                },
            ],
        },
    }
}

#[test]
fn mnl_recovers_truth_within_three_standard_errors() {
    let truth = mnl_truth();
    let data = simulate(&truth, 500, 11);
    let result = fit(&data, &zero_start(&truth), &FitOptions { starts: 3, ..Default::default() }).unwrap();
    assert_eq!(result.status, FitStatus::Converged);
    for (i, t) in truth.free_indices().into_iter().zip(truth.initial_free()) {
        let est = &result.parameters[i];
        let se = est.std_error.unwrap();
        assert!((est.value - t).abs() < 3.0 * se, "{}: {} vs {t} (se {se})", est.name, est.value);
    }
    assert!(result.diagnostics.gradient_norm < 1e-6);
}

#[test]
fn reported_standard_errors_match_monte_carlo_spread() {
    // the crowding x infection coefficient is zero in truth, so its p-values
    // should be uniform across replications
    let mut truth = mnl_truth();
    let zero = truth.resolve(0, "crowd_x_infect").unwrap();
    truth.parameters[zero].initial_value = 0.0;
    let free = truth.free_indices();
    let reps = 50;
    let mut estimates = vec![Vec::with_capacity(reps); free.len()];
    let mut ses = vec![0.0; free.len()];
    let mut p_values = Vec::new();
    for rep in 0..reps {
        let data = simulate(&truth, 500, 100 + rep as u64);
        let r = fit(&data, &zero_start(&truth), &FitOptions { starts: 1, ..Default::default() }).unwrap();
        for (k, &i) in free.iter().enumerate() {
            estimates[k].push(r.parameters[i].value);
            ses[k] += r.parameters[i].std_error.unwrap() / reps as f64;
        }
        p_values.push(r.parameters[zero].p_value.unwrap());
    }
    // one ratio per parameter has ~10% sampling noise at 50 replications,
    // so the 20% band applies to their mean
    let mut mean_ratio = 0.0;
    for (k, &i) in free.iter().enumerate() {
        let m = estimates[k].iter().sum::<f64>() / reps as f64;
        let sd = (estimates[k].iter().map(|e| (e - m).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let ratio = sd / ses[k];
        assert!((0.65..=1.35).contains(&ratio), "{}: empirical sd {sd}, mean se {}", truth.qualified_name(i), ses[k]);
        mean_ratio += ratio / free.len() as f64;
    }
    assert!((0.8..=1.2).contains(&mean_ratio), "mean sd/se ratio {mean_ratio}");
    // Kolmogorov-Smirnov against U(0,1), 1% critical value for n = 50
    p_values.sort_by(f64::total_cmp);
    let n = p_values.len() as f64;
    let d = p_values
        .iter()
        .enumerate()
        .map(|(i, &p)| (p - i as f64 / n).max((i + 1) as f64 / n - p))
        .fold(0.0, f64::max);
    assert!(d < 1.63 / n.sqrt(), "KS statistic {d}");
}

#[test]
fn always_opting_out_is_reported_as_boundary() {
    let truth = mnl_truth();
    let mut data = simulate(&truth, 60, 3);
    for r in &mut data.respondents {
        for o in &mut r.observations {
            o.ranking = vec![AltLabel::OptOut, AltLabel::Train1, AltLabel::Train2];
        }
    }
    let options = FitOptions { starts: 2, ..Default::default() };
    let diagnostics = match fit(&data, &zero_start(&truth), &options) {
        Ok(r) => {
            assert_eq!(r.status, FitStatus::Boundary);
            r.diagnostics
        }
        Err(Error::NotConverged { best, .. }) => best.diagnostics,
        Err(e) => panic!("{e}"),
    };
    assert!(diagnostics.boundary_parameters.iter().any(|p| p.ends_with("opt_out")), "{diagnostics:?}");
}

#[test]
fn same_seed_reproduces_the_fit() {
    let truth = builtin::paper_2class_table3();
    let data = simulate(&truth, 120, 5);
    let options = FitOptions { starts: 4, seed: 9, ..Default::default() };
    let spec = builtin::paper_2class();
    let a = fit(&data, &spec, &options);
    let b = fit(&data, &spec, &options);
    let (a, b) = match (a, b) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(Error::NotConverged { best: a, .. }), Err(Error::NotConverged { best: b, .. })) => (*a, *b),
        (a, b) => panic!("outcomes differ: {:?} / {:?}", a.is_ok(), b.is_ok()),
    };
    assert_eq!(a, b);
    let best = a.diagnostics.start_log_likelihoods.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(a.statistics.final_ll >= best - 1e-9);
}

#[test]
fn fixed_cells_have_no_standard_error_and_derived_cells_do() {
    let truth = builtin::paper_2class_table3();
    let data = simulate(&truth, 300, 8);
    let result = fit(&data, &builtin::paper_2class(), &FitOptions { starts: 4, ..Default::default() }).unwrap();
    assert_eq!(result.statistics.n_free_params, 23);
    assert_eq!(result.statistics.n_observations, 300 * 15);
    for p in &result.parameters {
        match p.role {
            Role::Fixed { .. } => assert!(p.std_error.is_none() && p.p_value.is_none(), "{}", p.name),
            Role::DerivedEffectReference { .. } => assert!(p.derived && p.std_error.is_some(), "{}", p.name),
            Role::Free => assert!(!p.derived && p.std_error.is_some(), "{}", p.name),
        }
    }
    let sizes: f64 = result.class_sizes.iter().sum();
    assert_relative_eq!(sizes, 1.0, epsilon = 1e-12);
    for h in &result.posteriors {
        assert_relative_eq!(h.probabilities.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }
}

#[test]
fn robust_and_hessian_errors_agree_for_a_correct_model() {
    let truth = mnl_truth();
    let data = simulate(&truth, 400, 21);
    let plain = fit(&data, &zero_start(&truth), &FitOptions { starts: 1, ..Default::default() }).unwrap();
    let robust = fit(
        &data,
        &zero_start(&truth),
        &FitOptions {
            starts: 1,
            robust: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(robust.robust_covariance);
    for (a, b) in plain.parameters.iter().zip(&robust.parameters) {
        if let (Some(x), Some(y)) = (a.std_error, b.std_error) {
            assert!((y / x - 1.0).abs() < 0.25, "{}: {x} vs {y}", a.name);
        }
    }
}

#[test]
fn exhausted_iterations_carry_the_best_solution() {
    let truth = mnl_truth();
    let data = simulate(&truth, 50, 2);
    let options = FitOptions {
        starts: 2,
        max_iter: 1,
        ..Default::default()
    };
    match fit(&data, &zero_start(&truth), &options) {
        Err(Error::NotConverged { starts, best, best_ll }) => {
            assert_eq!(starts, 2);
            assert_eq!(best.status, FitStatus::NotConverged);
            assert_eq!(best.statistics.final_ll, best_ll);
        }
        other => panic!("expected non-convergence, got {:?}", other.map(|r| r.status)),
    }
}

#[test]
fn swapped_classes_are_canonicalised() {
    let spec = exchangeable_two_class();
    spec.validate().unwrap();
    let truth = mnl_truth();
    let data = simulate(&truth, 80, 4);
    let lik = PanelLikelihood::new(&spec, &data, ChoiceRule::Top).unwrap();

    // class b twice as likely as class a, with different tastes
    let n = spec.n_free();
    let mut free: Vec<f64> = (0..n).map(|j| 0.01 * (j as f64 % 7.0) - 0.03).collect();
    free[n - 1] = 2f64.ln();
    let sizes = vec![1.0 / 3.0, 2.0 / 3.0];
    let swapped = canonicalize_classes(&spec, &free, &sizes).unwrap();
    assert_ne!(swapped, free);
    assert_relative_eq!(lik.loglik(&swapped).unwrap(), lik.loglik(&free).unwrap(), epsilon = 1e-9);
    assert_relative_eq!(swapped[n - 1], -(2f64.ln()), epsilon = 1e-12);
    let per_class = (n - 1) / 2;
    assert_eq!(&swapped[..per_class], &free[per_class..2 * per_class]);

    // already in canonical order
    assert_eq!(canonicalize_classes(&spec, &free, &[0.7, 0.3]).unwrap(), free);
    // class-specific structure is left alone
    let paper = builtin::paper_2class();
    let x = paper.initial_free();
    assert_eq!(canonicalize_classes(&paper, &x, &[0.1, 0.9]).unwrap(), x);
}

#[test]
fn stepwise_pruning_leaves_only_significant_parameters() {
    let truth = mnl_truth();
    let data = simulate(&truth, 150, 31);
    let (pruned, result) = stepwise_prune(&data, &zero_start(&truth), &FitOptions { starts: 1, ..Default::default() }, 0.10).unwrap();
    assert!(pruned.n_free() <= truth.n_free());
    for p in &result.parameters {
        if p.role.is_free() {
            assert!(p.p_value.unwrap() <= 0.10, "{} p = {:?}", p.name, p.p_value);
        }
    }
}
