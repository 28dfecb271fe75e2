//! Choice situations, rankings and panel datasets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AltLabel {
    Train1,
    Train2,
    OptOut,
}

impl AltLabel {
    pub const ALL: [AltLabel; 3] = [AltLabel::Train1, AltLabel::Train2, AltLabel::OptOut];

    pub fn index(self) -> usize {
        match self {
            AltLabel::Train1 => 0,
            AltLabel::Train2 => 1,
            AltLabel::OptOut => 2,
        }
    }

    /// Short code used in dataset CSV files.
    pub fn code(self) -> &'static str {
        match self {
            AltLabel::Train1 => "T1",
            AltLabel::Train2 => "T2",
            AltLabel::OptOut => "OO",
        }
    }

    pub fn from_code(code: &str) -> Result<Self> {
        match code.trim() {
            "T1" => Ok(AltLabel::Train1),
            "T2" => Ok(AltLabel::Train2),
            "OO" => Ok(AltLabel::OptOut),
            other => Err(Error::Data(format!("unknown alternative label `{other}`"))),
        }
    }
}

impl fmt::Display for AltLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alternative {
    pub label: AltLabel,
    pub attribute_values: BTreeMap<String, f64>,
}

impl Alternative {
    pub fn train(label: AltLabel, values: impl IntoIterator<Item = (String, f64)>) -> Self {
        Alternative {
            label,
            attribute_values: values.into_iter().collect(),
        }
    }
}

/// Two train alternatives plus situation-level context. The opt-out
/// alternative carries no attributes of its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceSituation {
    pub id: String,
    pub train1: Alternative,
    pub train2: Alternative,
    pub context: BTreeMap<String, f64>,
}

impl ChoiceSituation {
    /// Attribute value seen by `label`: its own attributes first, then the
    /// shared context.
    pub fn value(&self, label: AltLabel, attribute: &str) -> Option<f64> {
        let own = match label {
            AltLabel::Train1 => self.train1.attribute_values.get(attribute),
            AltLabel::Train2 => self.train2.attribute_values.get(attribute),
            AltLabel::OptOut => None,
        };
        own.or_else(|| self.context.get(attribute)).copied()
    }

    /// Same situation with the two trains swapped.
    pub fn swapped(&self) -> Self {
        let mut train1 = self.train2.clone();
        let mut train2 = self.train1.clone();
        train1.label = AltLabel::Train1;
        train2.label = AltLabel::Train2;
        ChoiceSituation {
            id: self.id.clone(),
            train1,
            train2,
            context: self.context.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingObservation {
    pub situation: ChoiceSituation,
    /// Best first. Not guaranteed to be a permutation until validated.
    pub ranking: Vec<AltLabel>,
}

impl RankingObservation {
    pub fn situation_id(&self) -> &str {
        &self.situation.id
    }

    pub fn is_valid_permutation(&self) -> bool {
        is_permutation(&self.ranking)
    }

    pub fn top(&self) -> Option<AltLabel> {
        self.ranking.first().copied()
    }
}

pub fn is_permutation(ranking: &[AltLabel]) -> bool {
    ranking.len() == AltLabel::ALL.len()
        && AltLabel::ALL.iter().all(|l| ranking.contains(l))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Respondent {
    pub id: String,
    /// Age bin 1-7, female effect code (+1 female, -1 male), train use
    /// frequency during COVID 1-4, plus any extras.
    pub covariates: BTreeMap<String, f64>,
    pub observations: Vec<RankingObservation>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PanelDataset {
    pub respondents: Vec<Respondent>,
}

impl PanelDataset {
    pub fn n_respondents(&self) -> usize {
        self.respondents.len()
    }

    pub fn n_observations(&self) -> usize {
        self.respondents.iter().map(|r| r.observations.len()).sum()
    }

    /// Tasks per respondent, when every respondent has the same number.
    pub fn tasks_per_respondent(&self) -> Option<usize> {
        let first = self.respondents.first()?.observations.len();
        self.respondents
            .iter()
            .all(|r| r.observations.len() == first)
            .then_some(first)
    }

    pub fn covariate_names(&self) -> BTreeSet<String> {
        self.respondents
            .iter()
            .flat_map(|r| r.covariates.keys().cloned())
            .collect()
    }

    pub fn covariate_values(&self, name: &str) -> Vec<Option<f64>> {
        self.respondents
            .iter()
            .map(|r| r.covariates.get(name).copied())
            .collect()
    }
}
