//! Attribute declarations and effect coding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CROWD: &str = "crowd";
pub const WAIT: &str = "wt";
pub const INFECT: &str = "infect";
pub const IVT: &str = "ivt";

/// Occupied seats (out of 40) for the five crowding levels.
pub const CROWD_LEVELS: [f64; 5] = [5.0, 18.0, 23.0, 28.0, 36.0];
pub const WAIT_LEVELS: [f64; 3] = [3.0, 12.0, 25.0];
/// Share of the population that is infectious, in percent.
pub const INFECT_LEVELS: [f64; 5] = [0.01, 0.1, 0.5, 2.0, 10.0];
pub const IVT_LEVELS: [f64; 3] = [10.0, 25.0, 40.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coding {
    Linear,
    Effect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceDirection {
    LowerBetter,
    HigherBetter,
    None,
}

/// Whether an attribute varies per train alternative or is shared by the
/// whole choice situation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeScope {
    #[default]
    Alternative,
    Context,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub name: String,
    pub kind: AttributeKind,
    pub levels: Vec<f64>,
    pub coding: Coding,
    pub preference_direction: PreferenceDirection,
    #[serde(default)]
    pub scope: AttributeScope,
}

pub(crate) fn same_level(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1.0)
}

impl AttributeSchema {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Schema(format!("attribute `{}` has no levels", self.name)));
        }
        if self.levels.iter().any(|l| !l.is_finite()) {
            return Err(Error::Schema(format!("attribute `{}` has a non-finite level", self.name)));
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Schema(format!(
                "levels of `{}` must be distinct and sorted ascending",
                self.name
            )));
        }
        if self.coding == Coding::Effect
            && (self.kind != AttributeKind::Categorical || self.levels.len() < 2)
        {
            return Err(Error::Schema(format!(
                "effect coding of `{}` requires a categorical attribute with at least 2 levels",
                self.name
            )));
        }
        Ok(())
    }

    pub fn level_index(&self, value: f64) -> Option<usize> {
        self.levels.iter().position(|&l| same_level(l, value))
    }

    pub fn has_level(&self, value: f64) -> bool {
        self.level_index(value).is_some()
    }

    /// Effect-code `observed` against this attribute's own levels.
    pub fn effect_code(&self, observed: f64, reference: f64) -> Result<Vec<f64>> {
        effect_code(&self.levels, observed, reference)
    }

    /// Sign such that "lower is better" attributes compare as costs.
    fn goodness(&self, value: f64) -> Option<f64> {
        match self.preference_direction {
            PreferenceDirection::LowerBetter => Some(-value),
            PreferenceDirection::HigherBetter => Some(value),
            PreferenceDirection::None => None,
        }
    }
}

/// Effect codes for `observed` over the non-reference `levels`, in level
/// order: `+1` at the observed level, all `-1` when the reference level is
/// observed, `0` elsewhere.
pub fn effect_code(levels: &[f64], observed: f64, reference: f64) -> Result<Vec<f64>> {
    let ref_idx = levels
        .iter()
        .position(|&l| same_level(l, reference))
        .ok_or_else(|| Error::Schema(format!("reference level {reference} is not a declared level")))?;
    let obs_idx = levels
        .iter()
        .position(|&l| same_level(l, observed))
        .ok_or_else(|| Error::Schema(format!("observed level {observed} is not a declared level")))?;
    Ok((0..levels.len())
        .filter(|&i| i != ref_idx)
        .map(|i| {
            if obs_idx == ref_idx {
                -1.0
            } else if i == obs_idx {
                1.0
            } else {
                0.0
            }
        })
        .collect())
}

/// The set of attributes a model or design works over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema {
    pub attributes: Vec<AttributeSchema>,
}

impl Schema {
    pub fn new(attributes: Vec<AttributeSchema>) -> Result<Self> {
        let schema = Schema { attributes };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.attributes.iter().enumerate() {
            a.validate()?;
            if self.attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Schema(format!("attribute `{}` declared twice", a.name)));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&AttributeSchema> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&AttributeSchema> {
        self.get(name)
            .ok_or_else(|| Error::Schema(format!("unknown attribute `{name}`")))
    }

    pub fn alternative_attributes(&self) -> impl Iterator<Item = &AttributeSchema> {
        self.attributes
            .iter()
            .filter(|a| a.scope == AttributeScope::Alternative)
    }

    pub fn context_attributes(&self) -> impl Iterator<Item = &AttributeSchema> {
        self.attributes.iter().filter(|a| a.scope == AttributeScope::Context)
    }

    /// Crowding, waiting time, infection rate and in-vehicle time as used in
    /// the train experiment.
    pub fn paper() -> Self {
        Schema {
            attributes: vec![
                AttributeSchema {
                    name: CROWD.into(),
                    kind: AttributeKind::Categorical,
                    levels: CROWD_LEVELS.to_vec(),
                    coding: Coding::Effect,
                    preference_direction: PreferenceDirection::LowerBetter,
                    scope: AttributeScope::Alternative,
                },
                AttributeSchema {
                    name: WAIT.into(),
                    kind: AttributeKind::Continuous,
                    levels: WAIT_LEVELS.to_vec(),
                    coding: Coding::Linear,
                    preference_direction: PreferenceDirection::LowerBetter,
                    scope: AttributeScope::Alternative,
                },
                AttributeSchema {
                    name: INFECT.into(),
                    kind: AttributeKind::Categorical,
                    levels: INFECT_LEVELS.to_vec(),
                    coding: Coding::Effect,
                    preference_direction: PreferenceDirection::None,
                    scope: AttributeScope::Context,
                },
                AttributeSchema {
                    name: IVT.into(),
                    kind: AttributeKind::Continuous,
                    levels: IVT_LEVELS.to_vec(),
                    coding: Coding::Linear,
                    preference_direction: PreferenceDirection::None,
                    scope: AttributeScope::Context,
                },
            ],
        }
    }
}

/// `Some(true)` when `a` is at least as good as `b` on every attribute with a
/// preference direction. Attributes without a direction are ignored.
pub(crate) fn weakly_dominates<'a>(
    attrs: impl Iterator<Item = &'a AttributeSchema>,
    a: impl Fn(&str) -> f64,
    b: impl Fn(&str) -> f64,
) -> bool {
    attrs.into_iter().all(|attr| match (attr.goodness(a(&attr.name)), attr.goodness(b(&attr.name))) {
        (Some(ga), Some(gb)) => ga >= gb,
        _ => true,
    })
}
