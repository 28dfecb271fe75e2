//! Bundled model specifications.
//!
//! `paper-2class` is the two-class train-choice model: effect-coded
//! crowding on both trains, linear waiting time, crowding interacted with
//! infection rate (and with in-vehicle time, fixed out), and an opt-out with
//! effect-coded infection rate. Class 0 is the membership reference; class 1
//! membership depends on age, gender and train use during COVID.

use std::collections::BTreeMap;

use crate::data::AltLabel;
use crate::error::{Error, Result};
use crate::schema::{Schema, CROWD, CROWD_LEVELS, INFECT, INFECT_LEVELS, IVT, WAIT};
use crate::spec::{
    ClassMembershipSpec, ClassSpec, MembershipSpec, ModelSpec, ParameterSpec, Term, UtilitySpec,
    UtilityTerm,
};

pub const PAPER_2CLASS: &str = "paper-2class";
pub const PAPER_2CLASS_TABLE3: &str = "paper-2class-table3";

pub const CROWD_PARAMS: [&str; 5] = [
    "crowd_almost_empty",
    "crowd_can_sit_alone",
    "crowd_not_crowded",
    "crowd_quite_crowded",
    "crowd_almost_full",
];
pub const INFECT_PARAMS: [&str; 5] = ["infect_0.01", "infect_0.1", "infect_0.5", "infect_2", "infect_10"];

pub const AGE: &str = "age";
pub const FEMALE: &str = "female";
pub const TRAIN_FREQ_COVID: &str = "train_freq_covid";

/// Published two-class estimates, `(class, parameter, value)`, free
/// parameters only.
pub const TABLE3_FREE: [(usize, &str, f64); 23] = [
    (0, "crowd_can_sit_alone", 0.792),
    (0, "crowd_not_crowded", -0.531),
    (0, "crowd_quite_crowded", -0.921),
    (0, "crowd_almost_full", -1.570),
    (0, "wt", -0.014),
    (0, "crowd_x_infect", -0.0046),
    (0, "infect_0.01", -0.720),
    (0, "infect_0.5", 0.133),
    (0, "infect_2", 0.521),
    (0, "infect_10", 0.279),
    (0, "opt_out", 0.927),
    (1, "crowd_not_crowded", 0.110),
    (1, "crowd_quite_crowded", -0.262),
    (1, "crowd_almost_full", -0.538),
    (1, "wt", -0.038),
    (1, "crowd_x_infect", -0.0026),
    (1, "infect_2", 0.254),
    (1, "infect_10", 0.234),
    (1, "opt_out", -2.02),
    (1, "intercept", -1.160),
    (1, "age", -0.107),
    (1, "female", -0.275),
    (1, "train_freq_covid", 0.820),
];

/// Zero-constrained cells of the published table.
const CLASS1_FIXED_ZERO: [&str; 3] = ["crowd_can_sit_alone", "infect_0.01", "infect_0.5"];

fn class_parameters(class: usize, fixed_zero: &[&str]) -> Vec<ParameterSpec> {
    let c = Some(class);
    let member = |name: &str, group: &str| {
        if fixed_zero.contains(&name) {
            ParameterSpec::fixed(name, 0.0, c).in_group(group)
        } else {
            ParameterSpec::free(name, c).in_group(group)
        }
    };
    let mut params = vec![ParameterSpec::derived(CROWD_PARAMS[0], CROWD, c)];
    params.extend(CROWD_PARAMS[1..].iter().map(|n| member(n, CROWD)));
    params.push(ParameterSpec::free("wt", c));
    params.push(ParameterSpec::free("crowd_x_infect", c));
    params.push(ParameterSpec::fixed("crowd_x_ivt", 0.0, c));
    for (i, n) in INFECT_PARAMS.iter().enumerate() {
        if i == 1 {
            params.push(ParameterSpec::derived(n, INFECT, c));
        } else {
            params.push(member(n, INFECT));
        }
    }
    params.push(ParameterSpec::fixed("ivt", 0.0, c));
    params.push(ParameterSpec::free("opt_out", c));
    params
}

fn train_terms() -> Vec<UtilityTerm> {
    let mut terms: Vec<UtilityTerm> = CROWD_PARAMS
        .iter()
        .zip(CROWD_LEVELS)
        .map(|(p, l)| UtilityTerm::new(p, Term::level(CROWD, l)))
        .collect();
    terms.push(UtilityTerm::new("wt", Term::attribute(WAIT)));
    terms.push(UtilityTerm::new("crowd_x_infect", Term::product(CROWD, INFECT)));
    terms.push(UtilityTerm::new("crowd_x_ivt", Term::product(CROWD, IVT)));
    terms
}

fn opt_out_terms() -> Vec<UtilityTerm> {
    let mut terms = vec![
        UtilityTerm::new("opt_out", Term::Constant),
        UtilityTerm::new("ivt", Term::attribute(IVT)),
    ];
    terms.extend(
        INFECT_PARAMS
            .iter()
            .zip(INFECT_LEVELS)
            .map(|(p, l)| UtilityTerm::new(p, Term::level(INFECT, l))),
    );
    terms
}

fn paper_utility() -> UtilitySpec {
    UtilitySpec {
        alternatives: BTreeMap::from([
            (AltLabel::Train1, train_terms()),
            (AltLabel::Train2, train_terms()),
            (AltLabel::OptOut, opt_out_terms()),
        ]),
    }
}

/// The two-class structure with all free parameters starting at zero.
pub fn paper_2class() -> ModelSpec {
    let mut parameters = class_parameters(0, &[]);
    parameters.extend(class_parameters(1, &CLASS1_FIXED_ZERO));
    for n in ["intercept", AGE, FEMALE, TRAIN_FREQ_COVID] {
        parameters.push(ParameterSpec::free(n, Some(1)));
    }
    ModelSpec {
        name: PAPER_2CLASS.into(),
        schema: Schema::paper(),
        parameters,
        classes: vec![
            ClassSpec {
                name: "covid_conscious".into(),
                utility: paper_utility(),
            },
            ClassSpec {
                name: "infection_indifferent".into(),
                utility: paper_utility(),
            },
        ],
        membership: MembershipSpec {
            covariates: vec![AGE.into(), FEMALE.into(), TRAIN_FREQ_COVID.into()],
            classes: vec![
                ClassMembershipSpec::default(),
                ClassMembershipSpec {
                    intercept: Some("intercept".into()),
                    coefficients: [AGE, FEMALE, TRAIN_FREQ_COVID]
                        .into_iter()
                        .map(|c| (c.to_string(), c.to_string()))
                        .collect(),
                },
            ],
        },
    }
}

/// `paper-2class` with initial values set to the published estimates; used
/// as the simulation generator.
pub fn paper_2class_table3() -> ModelSpec {
    let mut spec = paper_2class();
    spec.name = PAPER_2CLASS_TABLE3.into();
    for (class, name, value) in TABLE3_FREE {
        let idx = spec.resolve(class, name).expect("table entries name spec parameters");
        spec.parameters[idx].initial_value = value;
    }
    spec
}

/// Single-class MNL with the same utility structure as class 0 of
/// `paper-2class`.
pub fn paper_mnl() -> ModelSpec {
    ModelSpec {
        name: "paper-mnl".into(),
        schema: Schema::paper(),
        parameters: class_parameters(0, &[]),
        classes: vec![ClassSpec {
            name: "mnl".into(),
            utility: paper_utility(),
        }],
        membership: MembershipSpec {
            covariates: vec![],
            classes: vec![ClassMembershipSpec::default()],
        },
    }
}

pub fn by_name(name: &str) -> Result<ModelSpec> {
    match name {
        PAPER_2CLASS => Ok(paper_2class()),
        PAPER_2CLASS_TABLE3 => Ok(paper_2class_table3()),
        "paper-mnl" => Ok(paper_mnl()),
        other => Err(Error::Config(format!("no built-in model named `{other}`"))),
    }
}
