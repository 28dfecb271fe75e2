//! Expansion of utility expressions into design rows.

use crate::data::{AltLabel, ChoiceSituation};
use crate::error::{Error, Result};
use crate::schema::same_level;
use crate::spec::{ModelSpec, Term};

fn lookup(situation: &ChoiceSituation, label: AltLabel, attribute: &str) -> Result<f64> {
    situation.value(label, attribute).ok_or_else(|| {
        Error::Data(format!(
            "situation `{}`: no value of `{attribute}` for {label}",
            situation.id
        ))
    })
}

pub fn term_value(term: &Term, situation: &ChoiceSituation, label: AltLabel) -> Result<f64> {
    Ok(match term {
        Term::Constant => 1.0,
        Term::Attribute { attribute } => lookup(situation, label, attribute)?,
        Term::EffectLevel { attribute, level } => {
            let v = lookup(situation, label, attribute)?;
            if same_level(v, *level) {
                1.0
            } else {
                0.0
            }
        }
        Term::Product { left, right } => {
            lookup(situation, label, left)? * lookup(situation, label, right)?
        }
    })
}

/// Design row of `label` in `situation` for class `class`, aligned with
/// `spec.parameters`. Its dot product with the expanded parameter table is
/// the systematic utility.
///
/// Effect-coded attributes must sit on a declared level.
pub fn expand_utility_row(
    situation: &ChoiceSituation,
    label: AltLabel,
    spec: &ModelSpec,
    class: usize,
) -> Result<Vec<f64>> {
    let mut row = vec![0.0; spec.parameters.len()];
    let class_spec = spec
        .classes
        .get(class)
        .ok_or_else(|| Error::spec("classes", format!("no class {class}")))?;
    for t in class_spec.utility.terms(label)? {
        if let Term::EffectLevel { attribute, .. } = &t.term {
            let v = lookup(situation, label, attribute)?;
            let schema = spec.schema.require(attribute)?;
            if !schema.has_level(v) {
                return Err(Error::Schema(format!(
                    "situation `{}`: {attribute} = {v} is not a declared level",
                    situation.id
                )));
            }
        }
        let idx = spec
            .resolve(class, &t.parameter)
            .ok_or_else(|| Error::spec(&t.parameter, "unknown parameter"))?;
        row[idx] += term_value(&t.term, situation, label)?;
    }
    Ok(row)
}

/// Systematic utilities of the three alternatives under `full` parameter
/// values.
pub fn utilities(
    situation: &ChoiceSituation,
    spec: &ModelSpec,
    class: usize,
    full: &[f64],
) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for label in AltLabel::ALL {
        let row = expand_utility_row(situation, label, spec, class)?;
        out[label.index()] = row.iter().zip(full).map(|(x, b)| x * b).sum();
    }
    Ok(out)
}
