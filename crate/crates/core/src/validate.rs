use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{is_permutation, AltLabel, PanelDataset};
use crate::spec::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    NoObservations,
    InvalidRanking,
    UnknownLevel,
    MissingAttribute,
    MissingCovariate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub respondent_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub situation_id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

/// Checks a dataset against the model's schema and membership covariates.
/// Covariates the model does not use may be missing.
/// Never fails; problems are listed in the report.
pub fn validate_dataset(dataset: &PanelDataset, spec: &ModelSpec) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |kind, respondent: &str, situation: Option<&str>, message: String| {
        violations.push(Violation {
            kind,
            respondent_id: respondent.to_string(),
            situation_id: situation.map(str::to_string),
            message,
        })
    };

    let required: BTreeSet<&String> = spec.membership.covariates.iter().collect();

    for r in &dataset.respondents {
        if r.observations.is_empty() {
            push(ViolationKind::NoObservations, &r.id, None, "respondent has no observations".into());
        }
        let missing: Vec<&str> = required
            .iter()
            .filter(|c| r.covariates.get(**c).is_none_or(|v| !v.is_finite()))
            .map(|c| c.as_str())
            .collect();
        if !missing.is_empty() {
            push(
                ViolationKind::MissingCovariate,
                &r.id,
                None,
                format!("missing covariates: {}", missing.join(", ")),
            );
        }
        for obs in &r.observations {
            let sid = Some(obs.situation_id());
            if !is_permutation(&obs.ranking) {
                let labels: Vec<&str> = obs.ranking.iter().map(|l| l.code()).collect();
                push(
                    ViolationKind::InvalidRanking,
                    &r.id,
                    sid,
                    format!("ranking [{}] is not a permutation of T1, T2, OO", labels.join(", ")),
                );
            }
            for attr in &spec.schema.attributes {
                let labels: &[AltLabel] = match attr.scope {
                    crate::schema::AttributeScope::Alternative => &[AltLabel::Train1, AltLabel::Train2],
                    crate::schema::AttributeScope::Context => &[AltLabel::OptOut],
                };
                for &label in labels {
                    match obs.situation.value(label, &attr.name) {
                        None => push(
                            ViolationKind::MissingAttribute,
                            &r.id,
                            sid,
                            format!("no value of `{}` for {label}", attr.name),
                        ),
                        Some(v) if !attr.has_level(v) => push(
                            ViolationKind::UnknownLevel,
                            &r.id,
                            sid,
                            format!("`{}` = {v} is not a declared level", attr.name),
                        ),
                        Some(_) => {}
                    }
                }
            }
        }
    }
    ValidationReport { violations }
}
