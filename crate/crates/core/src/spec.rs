//! Model specification: parameters and their roles, per-class utilities and
//! the class-membership model.
//!
//! Effect-coded groups are written in dummy form: every level, reference
//! included, gets an indicator term and its own parameter. The reference
//! level's parameter has role [`Role::DerivedEffectReference`] and is always
//! minus the sum of the other members of its group, which makes the dummy
//! form identical to effect coding once expressed in free parameters (see
//! [`ParameterLayout::free_row`]).

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::AltLabel;
use crate::error::{Error, Result};
use crate::schema::{AttributeScope, Coding, Schema};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Free,
    Fixed { value: f64 },
    DerivedEffectReference { group: String },
}

impl Role {
    pub fn is_free(&self) -> bool {
        matches!(self, Role::Free)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    pub role: Role,
    #[serde(default)]
    pub initial_value: f64,
    /// `None` means shared by all classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_index: Option<usize>,
    /// Effect group this parameter belongs to (non-reference members).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

impl ParameterSpec {
    pub fn free(name: &str, class_index: Option<usize>) -> Self {
        ParameterSpec {
            name: name.into(),
            role: Role::Free,
            initial_value: 0.0,
            class_index,
            group: None,
        }
    }

    pub fn fixed(name: &str, value: f64, class_index: Option<usize>) -> Self {
        ParameterSpec {
            role: Role::Fixed { value },
            ..Self::free(name, class_index)
        }
    }

    pub fn in_group(mut self, group: &str) -> Self {
        self.group = Some(group.into());
        self
    }

    pub fn derived(name: &str, group: &str, class_index: Option<usize>) -> Self {
        ParameterSpec {
            role: Role::DerivedEffectReference { group: group.into() },
            group: Some(group.into()),
            ..Self::free(name, class_index)
        }
    }

    pub fn with_initial(mut self, value: f64) -> Self {
        self.initial_value = value;
        self
    }
}

/// Attribute expression multiplied by a parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Term {
    Constant,
    Attribute { attribute: String },
    /// Indicator of `attribute == level`.
    EffectLevel { attribute: String, level: f64 },
    Product { left: String, right: String },
}

impl Term {
    pub fn attribute(name: &str) -> Self {
        Term::Attribute {
            attribute: name.into(),
        }
    }

    pub fn level(name: &str, level: f64) -> Self {
        Term::EffectLevel {
            attribute: name.into(),
            level,
        }
    }

    pub fn product(left: &str, right: &str) -> Self {
        Term::Product {
            left: left.into(),
            right: right.into(),
        }
    }

    fn attributes(&self) -> Vec<&str> {
        match self {
            Term::Constant => vec![],
            Term::Attribute { attribute } | Term::EffectLevel { attribute, .. } => vec![attribute],
            Term::Product { left, right } => vec![left, right],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityTerm {
    pub parameter: String,
    pub term: Term,
}

impl UtilityTerm {
    pub fn new(parameter: &str, term: Term) -> Self {
        UtilityTerm {
            parameter: parameter.into(),
            term,
        }
    }
}

/// Linear-additive utility per alternative.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UtilitySpec {
    pub alternatives: BTreeMap<AltLabel, Vec<UtilityTerm>>,
}

impl UtilitySpec {
    pub fn terms(&self, label: AltLabel) -> Result<&[UtilityTerm]> {
        self.alternatives
            .get(&label)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::spec(format!("utility.{label}"), "alternative not in spec"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub utility: UtilitySpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMembershipSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intercept: Option<String>,
    /// covariate name -> parameter name
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub coefficients: BTreeMap<String, String>,
}

impl ClassMembershipSpec {
    pub fn is_reference(&self) -> bool {
        self.intercept.is_none() && self.coefficients.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MembershipSpec {
    #[serde(default)]
    pub covariates: Vec<String>,
    pub classes: Vec<ClassMembershipSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub schema: Schema,
    pub parameters: Vec<ParameterSpec>,
    pub classes: Vec<ClassSpec>,
    pub membership: MembershipSpec,
}

impl ModelSpec {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Index into `parameters` for `name` as seen from class `class`:
    /// class-scoped first, then shared.
    pub fn resolve(&self, class: usize, name: &str) -> Option<usize> {
        self.parameters
            .iter()
            .position(|p| p.class_index == Some(class) && p.name == name)
            .or_else(|| {
                self.parameters
                    .iter()
                    .position(|p| p.class_index.is_none() && p.name == name)
            })
    }

    pub fn qualified_name(&self, index: usize) -> String {
        let p = &self.parameters[index];
        match p.class_index {
            Some(c) => format!("{}.{}", self.classes[c].name, p.name),
            None => p.name.clone(),
        }
    }

    pub fn reference_class(&self) -> Option<usize> {
        self.membership.classes.iter().position(|m| m.is_reference())
    }

    pub fn n_free(&self) -> usize {
        self.parameters.iter().filter(|p| p.role.is_free()).count()
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.parameters.len())
            .filter(|&i| self.parameters[i].role.is_free())
            .collect()
    }

    pub fn free_names(&self) -> Vec<String> {
        self.free_indices()
            .into_iter()
            .map(|i| self.qualified_name(i))
            .collect()
    }

    pub fn initial_free(&self) -> Vec<f64> {
        self.parameters
            .iter()
            .filter(|p| p.role.is_free())
            .map(|p| p.initial_value)
            .collect()
    }

    /// Copy of the spec whose free parameters start at `free`.
    pub fn with_initial_free(&self, free: &[f64]) -> Self {
        let mut spec = self.clone();
        for (p, &v) in spec
            .parameters
            .iter_mut()
            .filter(|p| p.role.is_free())
            .zip(free)
        {
            p.initial_value = v;
        }
        spec
    }

    pub fn layout(&self) -> Result<ParameterLayout> {
        ParameterLayout::new(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.schema
            .validate()
            .map_err(|e| Error::spec("schema", e.to_string()))?;
        let n_classes = self.classes.len();
        if n_classes == 0 {
            return Err(Error::spec("classes", "at least one class is required"));
        }

        let mut seen = BTreeSet::new();
        for (i, p) in self.parameters.iter().enumerate() {
            let path = format!("parameters[{i}]");
            if let Some(c) = p.class_index {
                if c >= n_classes {
                    return Err(Error::spec(path, format!("class_index {c} out of range")));
                }
            }
            if !seen.insert((p.class_index, p.name.as_str())) {
                return Err(Error::spec(path, format!("duplicate parameter `{}`", p.name)));
            }
            match &p.role {
                Role::Fixed { value } if !value.is_finite() => {
                    return Err(Error::spec(path, "fixed value must be finite"));
                }
                Role::DerivedEffectReference { group } => {
                    if p.group.as_deref().is_some_and(|g| g != group) {
                        return Err(Error::spec(path, "role group and group field disagree"));
                    }
                }
                _ => {}
            }
            if !p.initial_value.is_finite() {
                return Err(Error::spec(path, "initial_value must be finite"));
            }
        }
        self.validate_groups()?;

        for (c, class) in self.classes.iter().enumerate() {
            for label in AltLabel::ALL {
                let path = format!("classes[{c}].utility.{}", serde_label(label));
                let terms = class
                    .utility
                    .alternatives
                    .get(&label)
                    .ok_or_else(|| Error::spec(&path, "alternative not in spec"))?;
                for (t, term) in terms.iter().enumerate() {
                    self.validate_term(c, label, term)
                        .map_err(|m| Error::spec(format!("{path}[{t}]"), m))?;
                }
            }
        }
        self.validate_membership()
    }

    fn group_members(&self) -> BTreeMap<(Option<usize>, &str), (Vec<usize>, Vec<usize>)> {
        // (class, group) -> (references, members)
        let mut groups: BTreeMap<(Option<usize>, &str), (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (i, p) in self.parameters.iter().enumerate() {
            match &p.role {
                Role::DerivedEffectReference { group } => {
                    groups.entry((p.class_index, group)).or_default().0.push(i)
                }
                _ => {
                    if let Some(g) = &p.group {
                        groups.entry((p.class_index, g)).or_default().1.push(i)
                    }
                }
            }
        }
        groups
    }

    fn validate_groups(&self) -> Result<()> {
        for ((class, group), (refs, members)) in self.group_members() {
            let path = format!("effect group `{group}` (class {class:?})");
            match refs.len() {
                1 => {}
                0 => return Err(Error::spec(path, "has no derived reference level")),
                n => return Err(Error::spec(path, format!("has {n} reference levels; exactly one is required"))),
            }
            if members.is_empty() {
                return Err(Error::spec(path, "has no non-reference levels"));
            }
        }
        Ok(())
    }

    fn validate_term(&self, class: usize, label: AltLabel, term: &UtilityTerm) -> std::result::Result<(), String> {
        if self.resolve(class, &term.parameter).is_none() {
            return Err(format!("unknown parameter `{}`", term.parameter));
        }
        for attr in term.term.attributes() {
            let schema = self
                .schema
                .get(attr)
                .ok_or_else(|| format!("unknown attribute `{attr}`"))?;
            if label == AltLabel::OptOut && schema.scope == AttributeScope::Alternative {
                return Err(format!("opt-out utility cannot use train attribute `{attr}`"));
            }
        }
        if let Term::EffectLevel { attribute, level } = &term.term {
            let schema = self.schema.get(attribute).expect("checked above");
            if schema.coding != Coding::Effect {
                return Err(format!("attribute `{attribute}` is not effect coded"));
            }
            if !schema.has_level(*level) {
                return Err(format!("level {level} is not declared for `{attribute}`"));
            }
        }
        Ok(())
    }

    fn validate_membership(&self) -> Result<()> {
        let m = &self.membership;
        if m.classes.len() != self.classes.len() {
            return Err(Error::spec(
                "membership.classes",
                format!("expected {} entries, found {}", self.classes.len(), m.classes.len()),
            ));
        }
        let refs = m.classes.iter().filter(|c| c.is_reference()).count();
        if refs != 1 {
            return Err(Error::spec(
                "membership.classes",
                format!("exactly one reference class is required, found {refs}"),
            ));
        }
        for (c, cm) in m.classes.iter().enumerate() {
            let path = format!("membership.classes[{c}]");
            if let Some(p) = &cm.intercept {
                if self.resolve(c, p).is_none() {
                    return Err(Error::spec(format!("{path}.intercept"), format!("unknown parameter `{p}`")));
                }
            }
            for (cov, p) in &cm.coefficients {
                if !m.covariates.contains(cov) {
                    return Err(Error::spec(
                        format!("{path}.coefficients.{cov}"),
                        "covariate not listed in membership.covariates",
                    ));
                }
                if self.resolve(c, p).is_none() {
                    return Err(Error::spec(format!("{path}.coefficients.{cov}"), format!("unknown parameter `{p}`")));
                }
            }
        }
        Ok(())
    }

    /// Parameter indices referenced by the utilities of `class`.
    pub fn utility_parameters(&self, class: usize) -> BTreeSet<usize> {
        self.classes[class]
            .utility
            .alternatives
            .values()
            .flatten()
            .filter_map(|t| self.resolve(class, &t.parameter))
            .collect()
    }

    /// Parameter indices of the membership model.
    pub fn membership_parameters(&self) -> BTreeSet<usize> {
        self.membership
            .classes
            .iter()
            .enumerate()
            .flat_map(|(c, cm)| {
                cm.intercept
                    .iter()
                    .chain(cm.coefficients.values())
                    .filter_map(move |p| self.resolve(c, p))
            })
            .collect()
    }
}

fn serde_label(label: AltLabel) -> &'static str {
    match label {
        AltLabel::Train1 => "train1",
        AltLabel::Train2 => "train2",
        AltLabel::OptOut => "opt_out",
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Expansion {
    Free(usize),
    Fixed(f64),
    /// Minus the sum of these (non-derived) parameters.
    Derived(Vec<usize>),
}

/// Maps the optimizer's free vector to the full parameter table
/// (free + fixed + derived) and back.
#[derive(Debug, Clone)]
pub struct ParameterLayout {
    entries: Vec<Expansion>,
    n_free: usize,
}

impl ParameterLayout {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        let groups = spec.group_members();
        let mut n_free = 0;
        let entries = spec
            .parameters
            .iter()
            .map(|p| match &p.role {
                Role::Free => {
                    n_free += 1;
                    Ok(Expansion::Free(n_free - 1))
                }
                Role::Fixed { value } => Ok(Expansion::Fixed(*value)),
                Role::DerivedEffectReference { group } => groups
                    .get(&(p.class_index, group.as_str()))
                    .map(|(_, members)| Expansion::Derived(members.clone()))
                    .ok_or_else(|| Error::spec(&p.name, "derived parameter without group")),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ParameterLayout { entries, n_free })
    }

    pub fn n_free(&self) -> usize {
        self.n_free
    }

    pub fn n_full(&self) -> usize {
        self.entries.len()
    }

    fn base(&self, idx: usize, free: &[f64]) -> f64 {
        match &self.entries[idx] {
            Expansion::Free(i) => free[*i],
            Expansion::Fixed(v) => *v,
            Expansion::Derived(_) => unreachable!("derived parameters only reference base parameters"),
        }
    }

    pub fn expand(&self, free: &[f64]) -> Vec<f64> {
        assert_eq!(free.len(), self.n_free, "free vector length");
        (0..self.entries.len())
            .map(|j| match &self.entries[j] {
                Expansion::Derived(members) => -members.iter().map(|&m| self.base(m, free)).sum::<f64>(),
                _ => self.base(j, free),
            })
            .collect()
    }

    /// Rewrites a row over the full parameter table as a row over the free
    /// vector plus a constant offset, so that
    /// `full_row . expand(free) == free_row . free + offset`.
    pub fn free_row(&self, full_row: &[f64]) -> (Vec<f64>, f64) {
        let mut row = vec![0.0; self.n_free];
        let mut offset = 0.0;
        let mut add = |entry: &Expansion, x: f64, row: &mut Vec<f64>| match entry {
            Expansion::Free(i) => row[*i] += x,
            Expansion::Fixed(v) => offset += v * x,
            Expansion::Derived(_) => unreachable!(),
        };
        for (j, &x) in full_row.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            match &self.entries[j] {
                Expansion::Derived(members) => {
                    for &m in members {
                        add(&self.entries[m], -x, &mut row);
                    }
                }
                e => add(e, x, &mut row),
            }
        }
        (row, offset)
    }

    /// Chain rule: gradient over the full table to gradient over free values.
    pub fn pullback(&self, full_grad: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n_free];
        for (j, &d) in full_grad.iter().enumerate() {
            match &self.entries[j] {
                Expansion::Free(i) => g[*i] += d,
                Expansion::Fixed(_) => {}
                Expansion::Derived(members) => {
                    for &m in members {
                        if let Expansion::Free(i) = self.entries[m] {
                            g[i] -= d;
                        }
                    }
                }
            }
        }
        g
    }

    /// d(full)/d(free), used for delta-method standard errors.
    pub fn jacobian(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.entries.len(), self.n_free);
        for (r, e) in self.entries.iter().enumerate() {
            match e {
                Expansion::Free(i) => j[(r, *i)] = 1.0,
                Expansion::Fixed(_) => {}
                Expansion::Derived(members) => {
                    for &m in members {
                        if let Expansion::Free(i) = self.entries[m] {
                            j[(r, i)] = -1.0;
                        }
                    }
                }
            }
        }
        j
    }

    /// Index in the free vector of full parameter `idx`, if it is free.
    pub fn free_index(&self, idx: usize) -> Option<usize> {
        match self.entries[idx] {
            Expansion::Free(i) => Some(i),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin;

    #[test]
    fn paper_spec_is_valid_with_23_free_parameters() {
        let spec = builtin::paper_2class();
        spec.validate().unwrap();
        assert_eq!(spec.n_free(), 23);
    }

    #[test]
    fn two_references_in_one_group_rejected() {
        let mut spec = builtin::paper_2class();
        let idx = spec.resolve(0, "crowd_can_sit_alone").unwrap();
        spec.parameters[idx].role = Role::DerivedEffectReference { group: "crowd".into() };
        let err = spec.validate().unwrap_err();
        assert!(err.to_string().contains("reference levels"), "{err}");
    }

    #[test]
    fn unknown_attribute_rejected() {
        let mut spec = builtin::paper_2class();
        spec.classes[0]
            .utility
            .alternatives
            .get_mut(&AltLabel::Train1)
            .unwrap()
            .push(UtilityTerm::new("wt", Term::attribute("price")));
        let err = spec.validate().unwrap_err();
        assert!(matches!(&err, Error::Spec { path, .. } if path.starts_with("classes[0].utility.train1")), "{err}");
    }

    #[test]
    fn unknown_parameter_and_missing_alternative_rejected() {
        let mut spec = builtin::paper_2class();
        spec.classes[1]
            .utility
            .alternatives
            .get_mut(&AltLabel::OptOut)
            .unwrap()
            .push(UtilityTerm::new("nope", Term::Constant));
        assert!(spec.validate().is_err());

        let mut spec = builtin::paper_2class();
        spec.classes[0].utility.alternatives.remove(&AltLabel::OptOut);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn opt_out_cannot_use_train_attributes() {
        let mut spec = builtin::paper_2class();
        spec.classes[0]
            .utility
            .alternatives
            .get_mut(&AltLabel::OptOut)
            .unwrap()
            .push(UtilityTerm::new("wt", Term::attribute("wt")));
        assert!(spec.validate().is_err());
    }

    #[test]
    fn membership_needs_one_reference() {
        let mut spec = builtin::paper_2class();
        spec.membership.classes[0].intercept = Some("intercept".into());
        spec.parameters.push(ParameterSpec::free("intercept", Some(0)));
        assert!(spec.validate().is_err());
    }

    #[test]
    fn derived_reference_reproduces_table3_cells() {
        let spec = builtin::paper_2class_table3();
        let layout = spec.layout().unwrap();
        let full = layout.expand(&spec.initial_free());
        let get = |c: usize, n: &str| full[spec.resolve(c, n).unwrap()];
        assert!((get(0, "crowd_almost_empty") - 2.230).abs() < 1e-9);
        assert!((get(0, "infect_0.1") - (-0.213)).abs() < 1e-9);
        assert!((get(1, "crowd_almost_empty") - 0.690).abs() < 1e-9);
        assert!((get(1, "infect_0.1") - (-0.488)).abs() < 1e-9);
    }

    #[test]
    fn free_row_matches_expanded_dot_product() {
        let spec = builtin::paper_2class_table3();
        let layout = spec.layout().unwrap();
        let free = spec.initial_free();
        let full = layout.expand(&free);
        let full_row: Vec<f64> = (0..full.len()).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        let (row, offset) = layout.free_row(&full_row);
        let a: f64 = full_row.iter().zip(&full).map(|(x, b)| x * b).sum();
        let b: f64 = row.iter().zip(&free).map(|(x, b)| x * b).sum::<f64>() + offset;
        assert!((a - b).abs() < 1e-12);
        // pullback is the transpose of the same map
        let g = layout.pullback(&full_row);
        assert_eq!(g, row);
    }

    #[test]
    fn json_round_trip() {
        let spec = builtin::paper_2class_table3();
        let text = serde_json::to_string_pretty(&spec).unwrap();
        let back: ModelSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }
}
