use approx::assert_abs_diff_eq;
use lccmkit::analysis::{class_profile, descriptive_shares};
use lccmkit::builtin;
use lccmkit::data::{AltLabel, PanelDataset};
use lccmkit::estimation::FitOptions;
use lccmkit::likelihood::{ChoiceRule, PanelLikelihood};
use lccmkit::simulate::{recovery_experiment, simulate_dataset, SimulationConfig};
use lccmkit::spec::ModelSpec;

fn table3() -> ModelSpec {
    builtin::paper_2class_table3()
}

fn simulate(n: usize, seed: u64) -> (PanelDataset, Vec<usize>) {
    let config = SimulationConfig {
        n_respondents: n,
        seed,
        ..Default::default()
    };
    let p = simulate_dataset(&table3(), &config).unwrap();
    (p.dataset, p.classes)
}

#[test]
fn identical_classes_leave_the_prior_unchanged() {
    let mut spec = table3();
    // copy class 0 tastes into class 1, and free the class 1 zeros
    for i in 0..spec.parameters.len() {
        let p = spec.parameters[i].clone();
        if p.class_index == Some(1) && !spec.membership_parameters().contains(&i) {
            let src = spec.resolve(0, &p.name).unwrap();
            spec.parameters[i].role = spec.parameters[src].role.clone();
            spec.parameters[i].initial_value = spec.parameters[src].initial_value;
        }
    }
    let (data, _) = simulate(50, 1);
    let lik = PanelLikelihood::new(&spec, &data, ChoiceRule::Top).unwrap();
    let free = spec.initial_free();
    let prior = lik.membership_probabilities(&free).unwrap();
    let post = lik.posteriors(&free).unwrap();
    for (a, b) in prior.iter().zip(&post) {
        for (x, y) in a.iter().zip(b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }
}

#[test]
fn always_opting_out_shifts_mass_to_the_conscious_class() {
    let spec = table3();
    let (mut data, _) = simulate(1, 2);
    for o in &mut data.respondents[0].observations {
        o.ranking = vec![AltLabel::OptOut, AltLabel::Train1, AltLabel::Train2];
    }
    let lik = PanelLikelihood::new(&spec, &data, ChoiceRule::Top).unwrap();
    let free = spec.initial_free();
    let prior = &lik.membership_probabilities(&free).unwrap()[0];
    let post = &lik.posteriors(&free).unwrap()[0];
    assert!(post[0] > prior[0] && post[0] > 0.99, "prior {prior:?}, posterior {post:?}");
    assert_abs_diff_eq!(post.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
}

#[test]
fn average_posterior_tracks_class_sizes() {
    let spec = table3();
    let (data, _) = simulate(500, 3);
    let lik = PanelLikelihood::new(&spec, &data, ChoiceRule::Top).unwrap();
    let free = spec.initial_free();
    let post = lik.posteriors(&free).unwrap();
    let prior = lik.membership_probabilities(&free).unwrap();
    for s in 0..2 {
        let mp = post.iter().map(|h| h[s]).sum::<f64>() / 500.0;
        let mq = prior.iter().map(|h| h[s]).sum::<f64>() / 500.0;
        assert!((mp - mq).abs() < 0.03, "class {s}: posterior {mp}, prior {mq}");
    }
}

#[test]
fn profile_concentrates_where_the_indicator_lives() {
    let spec = table3();
    let (mut data, classes) = simulate(400, 4);
    // a Likert-style indicator that is "worried" (5) exactly for class 0
    for (r, &c) in data.respondents.iter_mut().zip(&classes) {
        r.covariates.insert("worried".into(), if c == 0 { 5.0 } else { 1.0 });
    }
    let lik = PanelLikelihood::new(&spec, &data, ChoiceRule::Top).unwrap();
    let post = lik.posteriors(&spec.initial_free()).unwrap();
    let prof = class_profile(&post, &data.covariate_values("worried")).unwrap();
    let share_worried = |s: usize| prof[s].histogram.iter().find(|h| h.0 == 5.0).map_or(0.0, |h| h.1);
    assert!(share_worried(0) > 0.8, "{:?}", prof[0]);
    assert!(share_worried(1) < 0.2, "{:?}", prof[1]);
    assert!(prof[0].mean > prof[1].mean + 2.0);

    let constant = vec![Some(3.0); post.len()];
    let prof = class_profile(&post, &constant).unwrap();
    assert_eq!(prof[0].histogram, prof[1].histogram);
}

#[test]
fn everyone_opting_out_is_a_full_non_trader_share() {
    let (mut data, _) = simulate(20, 5);
    for r in &mut data.respondents {
        for o in &mut r.observations {
            o.ranking = vec![AltLabel::OptOut, AltLabel::Train2, AltLabel::Train1];
        }
    }
    let s = descriptive_shares(&data).unwrap();
    assert_eq!((s.always_opt_out, s.never_opt_out), (1.0, 0.0));
}

#[test]
fn simulated_non_trader_shares_are_plausible() {
    let (data, _) = simulate(513, 6);
    let s = descriptive_shares(&data).unwrap();
    for v in [s.always_opt_out, s.never_opt_out, s.always_less_crowded, s.always_more_crowded] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(s.always_opt_out < 0.2);
    let n: usize = s.crowded_curve.iter().map(|p| p.observations).sum();
    assert!(n > 0 && n <= data.n_observations());
}

#[test]
fn small_samples_are_flagged_low_power() {
    let config = SimulationConfig {
        n_respondents: 50,
        seed: 7,
        ..Default::default()
    };
    let options = FitOptions {
        starts: 3,
        ..Default::default()
    };
    match recovery_experiment(&table3(), &config, &options) {
        Ok(report) => {
            assert!(report.low_power);
            assert_eq!(report.parameters.len(), 23);
        }
        Err(lccmkit::Error::NotConverged { best, .. }) => assert_eq!(best.parameters.len(), 34),
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn single_class_recovery_is_near_perfect_at_large_n() {
    let mut generator = builtin::paper_mnl();
    for (class, name, value) in builtin::TABLE3_FREE {
        if class == 0 {
            let i = generator.resolve(0, name).unwrap();
            generator.parameters[i].initial_value = value;
        }
    }
    let config = SimulationConfig {
        n_respondents: 10_000,
        seed: 8,
        ..Default::default()
    };
    let report = recovery_experiment(&generator, &config, &FitOptions { starts: 1, ..Default::default() }).unwrap();
    assert!(!report.low_power);
    for p in &report.parameters {
        let se = p.std_error.unwrap();
        assert!(se < 0.05, "{}: se {se}", p.name);
        assert!(p.z.unwrap().abs() < 4.0, "{}: z {:?}", p.name, p.z);
    }
    assert_abs_diff_eq!(report.estimated_class_sizes[0], 1.0, epsilon = 1e-12);
}
