//! Semi-random stated-choice design: full factorial, removal of weakly
//! dominated and swap-duplicate situations, random blocks.

use std::cmp::Ordering;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AltLabel, Alternative, ChoiceSituation};
use crate::error::{Error, Result};
use crate::schema::{weakly_dominates, Schema};

fn default_schema() -> Schema {
    Schema::paper()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignConfig {
    #[serde(default = "default_schema")]
    pub schema: Schema,
    pub n_blocks: usize,
    pub block_size: usize,
    #[serde(default)]
    pub rng_seed: u64,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            schema: Schema::paper(),
            n_blocks: 4,
            block_size: 15,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub id: usize,
    pub situations: Vec<ChoiceSituation>,
}

fn cartesian(levels: &[&[f64]]) -> Vec<Vec<f64>> {
    levels.iter().fold(vec![vec![]], |acc, ls| {
        acc.iter()
            .flat_map(|prefix| {
                ls.iter().map(move |&l| {
                    let mut v = prefix.clone();
                    v.push(l);
                    v
                })
            })
            .collect()
    })
}

/// Every combination of train 1 attributes, train 2 attributes and context
/// attributes, each exactly once.
pub fn full_factorial(schema: &Schema) -> Result<Vec<ChoiceSituation>> {
    schema.validate()?;
    let alt: Vec<_> = schema.alternative_attributes().collect();
    let ctx: Vec<_> = schema.context_attributes().collect();
    if alt.is_empty() {
        return Err(Error::Schema("design needs at least one train attribute".into()));
    }
    let trains = cartesian(&alt.iter().map(|a| a.levels.as_slice()).collect::<Vec<_>>());
    let contexts = cartesian(&ctx.iter().map(|a| a.levels.as_slice()).collect::<Vec<_>>());

    let train = |label, values: &[f64]| {
        Alternative::train(label, alt.iter().map(|a| a.name.clone()).zip(values.iter().copied()))
    };
    let mut out = Vec::with_capacity(trains.len() * trains.len() * contexts.len());
    for t1 in &trains {
        for t2 in &trains {
            for c in &contexts {
                out.push(ChoiceSituation {
                    id: format!("s{}", out.len()),
                    train1: train(AltLabel::Train1, t1),
                    train2: train(AltLabel::Train2, t2),
                    context: ctx.iter().map(|a| a.name.clone()).zip(c.iter().copied()).collect(),
                });
            }
        }
    }
    Ok(out)
}

/// Train attribute values in schema order.
fn train_values(schema: &Schema, s: &ChoiceSituation, label: AltLabel) -> Vec<f64> {
    schema
        .alternative_attributes()
        .map(|a| s.value(label, &a.name).unwrap_or(f64::NAN))
        .collect()
}

/// `true` when one train is at least as good as the other on every
/// directional attribute (identical trains included).
pub fn has_weakly_dominant_train(schema: &Schema, s: &ChoiceSituation) -> bool {
    let v = |label| move |name: &str| s.value(label, name).unwrap_or(f64::NAN);
    weakly_dominates(schema.alternative_attributes(), v(AltLabel::Train1), v(AltLabel::Train2))
        || weakly_dominates(schema.alternative_attributes(), v(AltLabel::Train2), v(AltLabel::Train1))
}

/// Canonical order puts the train with lexicographically smaller attribute
/// values (crowding, then waiting time) first.
pub fn is_canonical(schema: &Schema, s: &ChoiceSituation) -> bool {
    let a = train_values(schema, s, AltLabel::Train1);
    let b = train_values(schema, s, AltLabel::Train2);
    a.iter()
        .zip(&b)
        .map(|(x, y)| x.partial_cmp(y).unwrap_or(Ordering::Equal))
        .find(|o| *o != Ordering::Equal)
        == Some(Ordering::Less)
}

/// Keeps situations where the trains trade off against each other, one per
/// swap pair.
pub fn filter_dominated_and_symmetric(schema: &Schema, situations: Vec<ChoiceSituation>) -> Vec<ChoiceSituation> {
    situations
        .into_iter()
        .filter(|s| !has_weakly_dominant_train(schema, s) && is_canonical(schema, s))
        .collect()
}

/// Uniform random blocks without replacement; reproducible from the seed.
pub fn make_blocks(admissible: &[ChoiceSituation], config: &DesignConfig) -> Result<Vec<Block>> {
    if config.n_blocks == 0 || config.block_size == 0 {
        return Err(Error::Config("n_blocks and block_size must be positive".into()));
    }
    let needed = config.n_blocks * config.block_size;
    if needed > admissible.len() {
        return Err(Error::Config(format!(
            "{} blocks of {} need {needed} situations, only {} admissible",
            config.n_blocks,
            config.block_size,
            admissible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let picked = index::sample(&mut rng, admissible.len(), needed).into_vec();
    Ok(picked
        .chunks(config.block_size)
        .enumerate()
        .map(|(id, idx)| Block {
            id,
            situations: idx.iter().map(|&i| admissible[i].clone()).collect(),
        })
        .collect())
}

/// Full pipeline: factorial, filtering, blocking.
pub fn generate(config: &DesignConfig) -> Result<Vec<Block>> {
    let admissible = filter_dominated_and_symmetric(&config.schema, full_factorial(&config.schema)?);
    make_blocks(&admissible, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{AttributeKind, Coding, PreferenceDirection, CROWD, WAIT};
    use crate::test_support::situation;
    use std::collections::HashSet;

    fn tiny_schema(crowd: Vec<f64>) -> Schema {
        let mut s = Schema::paper();
        s.attributes[0].levels = crowd;
        s.attributes[0].coding = Coding::Linear;
        s.attributes[0].kind = AttributeKind::Continuous;
        for a in &mut s.attributes[1..] {
            a.levels.truncate(1);
            a.coding = Coding::Linear;
            a.kind = AttributeKind::Continuous;
        }
        s
    }

    #[test]
    fn factorial_counts() {
        assert_eq!(full_factorial(&Schema::paper()).unwrap().len(), 3375);
        assert_eq!(full_factorial(&tiny_schema(vec![5.0])).unwrap().len(), 1);
        assert_eq!(full_factorial(&tiny_schema(vec![5.0, 18.0])).unwrap().len(), 4);
    }

    #[test]
    fn empty_levels_is_a_schema_error() {
        let s = tiny_schema(vec![]);
        assert!(matches!(full_factorial(&s), Err(Error::Schema(_))));
    }

    #[test]
    fn dominance_examples() {
        let schema = Schema::paper();
        assert!(has_weakly_dominant_train(&schema, &situation(5.0, 3.0, 18.0, 12.0, 0.1, 10.0)));
        assert!(!has_weakly_dominant_train(&schema, &situation(5.0, 12.0, 18.0, 3.0, 0.1, 10.0)));
        // tie on one attribute still dominates
        assert!(has_weakly_dominant_train(&schema, &situation(5.0, 3.0, 5.0, 12.0, 0.1, 10.0)));
        // identical trains
        assert!(has_weakly_dominant_train(&schema, &situation(23.0, 12.0, 23.0, 12.0, 0.1, 10.0)));
    }

    #[test]
    fn paper_design_has_450_admissible_situations() {
        let schema = Schema::paper();
        let admissible = filter_dominated_and_symmetric(&schema, full_factorial(&schema).unwrap());
        assert_eq!(admissible.len(), 450);
        let pairs: HashSet<(u64, u64, u64, u64)> = admissible
            .iter()
            .map(|s| {
                let v = |l, a| s.value(l, a).unwrap().to_bits();
                (v(AltLabel::Train1, CROWD), v(AltLabel::Train1, WAIT), v(AltLabel::Train2, CROWD), v(AltLabel::Train2, WAIT))
            })
            .collect();
        assert_eq!(pairs.len(), 30);
    }

    #[test]
    fn blocks_are_disjoint_and_reproducible() {
        let config = DesignConfig { rng_seed: 11, ..Default::default() };
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let ids: HashSet<&str> = a.iter().flat_map(|b| b.situations.iter().map(|s| s.id.as_str())).collect();
        assert_eq!(ids.len(), 60);
        let other = generate(&DesignConfig { rng_seed: 12, ..Default::default() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn one_block_of_everything() {
        let schema = Schema::paper();
        let admissible = filter_dominated_and_symmetric(&schema, full_factorial(&schema).unwrap());
        let config = DesignConfig { n_blocks: 1, block_size: admissible.len(), ..Default::default() };
        let blocks = make_blocks(&admissible, &config).unwrap();
        let mut got: Vec<&str> = blocks[0].situations.iter().map(|s| s.id.as_str()).collect();
        let mut want: Vec<&str> = admissible.iter().map(|s| s.id.as_str()).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn too_many_blocks_is_a_config_error() {
        let config = DesignConfig { n_blocks: 31, block_size: 15, ..Default::default() };
        assert!(matches!(generate(&config), Err(Error::Config(_))));
    }

    #[test]
    fn attributes_without_direction_never_dominate() {
        let mut schema = Schema::paper();
        schema.attributes[1].preference_direction = PreferenceDirection::None;
        // only crowding counts now: every pair with distinct crowding is dominated
        let admissible = filter_dominated_and_symmetric(&schema, full_factorial(&schema).unwrap());
        assert!(admissible.is_empty());
    }
}
