//! Synthetic panels from a known latent class model, and end-to-end
//! parameter recovery.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gumbel;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::builtin::{AGE, FEMALE, TRAIN_FREQ_COVID};
use crate::data::{AltLabel, ChoiceSituation, PanelDataset, RankingObservation, Respondent};
use crate::design::{generate, Block, DesignConfig};
use crate::error::{Error, Result};
use crate::estimation::{fit, FitOptions, FitStatus};
use crate::likelihood::{class_membership_probabilities, MembershipModel};
use crate::spec::ModelSpec;
use crate::utility::utilities;

/// Age bins 1-7 with the sample's shares.
pub const PAPER_AGE: [(f64, f64); 7] = [
    (1.0, 0.15),
    (2.0, 0.18),
    (3.0, 0.17),
    (4.0, 0.17),
    (5.0, 0.19),
    (6.0, 0.13),
    (7.0, 0.02),
];
/// Female effect code: +1 female, -1 male.
pub const PAPER_FEMALE: [(f64, f64); 2] = [(1.0, 0.49), (-1.0, 0.50)];
/// Train use during COVID, 1 = never .. 4 = more than 4 times per week.
pub const PAPER_TRAIN_FREQ: [(f64, f64); 4] = [(1.0, 0.55), (2.0, 0.25), (3.0, 0.15), (4.0, 0.05)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateSampler {
    /// Independent draws from the survey sample's marginals.
    #[default]
    Paper,
    /// Independent draws per covariate from `(value, weight)` lists.
    Marginals { marginals: BTreeMap<String, Vec<(f64, f64)>> },
    /// Respondent `i` gets row `i mod len`.
    Table { rows: Vec<BTreeMap<String, f64>> },
}

impl CovariateSampler {
    fn marginals(&self) -> Option<BTreeMap<String, Vec<(f64, f64)>>> {
        match self {
            CovariateSampler::Paper => Some(BTreeMap::from([
                (AGE.to_string(), PAPER_AGE.to_vec()),
                (FEMALE.to_string(), PAPER_FEMALE.to_vec()),
                (TRAIN_FREQ_COVID.to_string(), PAPER_TRAIN_FREQ.to_vec()),
            ])),
            CovariateSampler::Marginals { marginals } => Some(marginals.clone()),
            CovariateSampler::Table { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlockAssignment {
    /// Respondent `i` answers block `i mod n_blocks`.
    #[default]
    RoundRobin,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n_respondents: usize,
    #[serde(default)]
    pub design: DesignConfig,
    #[serde(default)]
    pub covariates: CovariateSampler,
    #[serde(default)]
    pub block_assignment: BlockAssignment,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            n_respondents: 513,
            design: DesignConfig::default(),
            covariates: CovariateSampler::Paper,
            block_assignment: BlockAssignment::RoundRobin,
            seed: 0,
        }
    }
}

fn respondent_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn draw_index(probabilities: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probabilities.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// One latent class per respondent drawn from its membership probabilities.
pub fn assign_classes(
    covariates: &[BTreeMap<String, f64>],
    membership: &MembershipModel,
    seed: u64,
) -> Result<Vec<usize>> {
    covariates
        .par_iter()
        .enumerate()
        .map(|(i, z)| {
            let p = class_membership_probabilities(z, membership)?;
            Ok(draw_index(&p, &mut respondent_rng(seed, i)))
        })
        .collect()
}

/// Ranking of alternative indices by utility plus independent standard
/// Gumbel noise, best first.
pub fn simulate_ranking(utilities: &[f64], rng: &mut impl Rng) -> Vec<usize> {
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid Gumbel");
    let total: Vec<f64> = utilities.iter().map(|v| v + gumbel.sample(rng)).collect();
    let mut order: Vec<usize> = (0..utilities.len()).collect();
    order.sort_by(|&a, &b| total[b].total_cmp(&total[a]));
    order
}

pub fn simulate_rankings(
    situations: &[ChoiceSituation],
    spec: &ModelSpec,
    full: &[f64],
    class: usize,
    rng: &mut impl Rng,
) -> Result<Vec<RankingObservation>> {
    situations
        .iter()
        .map(|s| {
            let v = utilities(s, spec, class, full)?;
            Ok(RankingObservation {
                situation: s.clone(),
                ranking: simulate_ranking(&v, rng).into_iter().map(|i| AltLabel::ALL[i]).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPanel {
    pub dataset: PanelDataset,
    /// True latent class of each respondent.
    pub classes: Vec<usize>,
}

fn sample_covariates(
    sampler: &CovariateSampler,
    marginals: &Option<Vec<(String, WeightedIndex<f64>, Vec<f64>)>>,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> BTreeMap<String, f64> {
    match (sampler, marginals) {
        (CovariateSampler::Table { rows }, _) => rows[index % rows.len()].clone(),
        (_, Some(m)) => m
            .iter()
            .map(|(name, dist, values)| (name.clone(), values[dist.sample(rng)]))
            .collect(),
        _ => BTreeMap::new(),
    }
}

/// Simulates a panel from `generator`, whose initial values are the true
/// parameters. Respondents use independent random streams derived from the
/// seed, so the result does not depend on thread count.
pub fn simulate_dataset(generator: &ModelSpec, config: &SimulationConfig) -> Result<SimulatedPanel> {
    generator.validate()?;
    if let CovariateSampler::Table { rows } = &config.covariates {
        if rows.is_empty() {
            return Err(Error::Config("covariate table is empty".into()));
        }
    }
    let marginals = config
        .covariates
        .marginals()
        .map(|m| {
            m.into_iter()
                .map(|(name, pairs)| {
                    let dist = WeightedIndex::new(pairs.iter().map(|p| p.1))
                        .map_err(|e| Error::Config(format!("covariate `{name}` weights: {e}")))?;
                    Ok((name, dist, pairs.iter().map(|p| p.0).collect()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    let blocks: Vec<Block> = generate(&config.design)?;
    let full = generator.layout()?.expand(&generator.initial_free());
    let membership = MembershipModel::from_spec(generator, &full);

    let simulated: Vec<(Respondent, usize)> = (0..config.n_respondents)
        .into_par_iter()
        .map(|i| {
            let mut rng = respondent_rng(config.seed, i);
            let covariates = sample_covariates(&config.covariates, &marginals, i, &mut rng);
            let p = class_membership_probabilities(&covariates, &membership)?;
            let class = draw_index(&p, &mut rng);
            let block = match config.block_assignment {
                BlockAssignment::RoundRobin => i % blocks.len(),
                BlockAssignment::Random => rng.random_range(0..blocks.len()),
            };
            let observations = simulate_rankings(&blocks[block].situations, generator, &full, class, &mut rng)?;
            Ok((
                Respondent {
                    id: format!("r{}", i + 1),
                    covariates,
                    observations,
                },
                class,
            ))
        })
        .collect::<Result<_>>()?;
    let (respondents, classes) = simulated.into_iter().unzip();
    Ok(SimulatedPanel {
        dataset: PanelDataset { respondents },
        classes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredParameter {
    pub name: String,
    pub truth: f64,
    pub estimate: f64,
    pub std_error: Option<f64>,
    /// `(estimate - truth) / SE`
    pub z: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub parameters: Vec<RecoveredParameter>,
    /// Share of free parameters within two standard errors of the truth.
    pub coverage_2se: f64,
    pub realized_class_shares: Vec<f64>,
    pub estimated_class_sizes: Vec<f64>,
    /// Largest absolute gap between estimated class sizes and realized
    /// class shares.
    pub class_size_error: f64,
    pub final_ll: f64,
    pub status: FitStatus,
    /// Few respondents or unidentified parameters: read with care.
    pub low_power: bool,
}

pub const LOW_POWER_RESPONDENTS: usize = 200;

/// Simulate from `generator`, estimate the same structure from zero starts
/// and compare with the truth.
pub fn recovery_experiment(
    generator: &ModelSpec,
    config: &SimulationConfig,
    options: &FitOptions,
) -> Result<RecoveryReport> {
    let panel = simulate_dataset(generator, config)?;
    let truth = generator.initial_free();
    let estimator = generator.with_initial_free(&vec![0.0; truth.len()]);
    let result = fit(&panel.dataset, &estimator, options)?;

    let free_idx = generator.free_indices();
    let parameters: Vec<RecoveredParameter> = free_idx
        .iter()
        .zip(&truth)
        .map(|(&i, &t)| {
            let est = &result.parameters[i];
            let z = est.std_error.filter(|se| *se > 0.0).map(|se| (est.value - t) / se);
            RecoveredParameter {
                name: generator.qualified_name(i),
                truth: t,
                estimate: est.value,
                std_error: est.std_error,
                z,
            }
        })
        .collect();
    let covered = parameters.iter().filter(|p| p.z.is_some_and(|z| z.abs() <= 2.0)).count();
    let s = generator.n_classes();
    let mut realized = vec![0.0; s];
    for &c in &panel.classes {
        realized[c] += 1.0 / panel.classes.len().max(1) as f64;
    }
    let class_size_error = realized
        .iter()
        .zip(&result.class_sizes)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(RecoveryReport {
        coverage_2se: covered as f64 / parameters.len().max(1) as f64,
        low_power: config.n_respondents < LOW_POWER_RESPONDENTS || parameters.iter().any(|p| p.z.is_none()),
        parameters,
        realized_class_shares: realized,
        estimated_class_sizes: result.class_sizes.clone(),
        class_size_error,
        final_ll: result.statistics.final_ll,
        status: result.status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin;
    use crate::likelihood::rmnl_ranking_probability;

    #[test]
    fn degenerate_membership_puts_everyone_in_one_class() {
        let m = MembershipModel {
            covariates: vec![],
            intercepts: vec![0.0, -1e6],
            coefficients: vec![vec![], vec![]],
        };
        let z = vec![BTreeMap::new(); 100];
        assert!(assign_classes(&z, &m, 3).unwrap().iter().all(|&c| c == 0));
    }

    #[test]
    fn even_membership_splits_evenly() {
        let z = vec![BTreeMap::new(); 10_000];
        let classes = assign_classes(&z, &MembershipModel::uniform(2), 9).unwrap();
        let share = classes.iter().filter(|&&c| c == 0).count() as f64 / 1e4;
        assert!((share - 0.5).abs() < 0.02, "{share}");
    }

    #[test]
    fn paper_marginals_give_published_class_shares() {
        let spec = builtin::paper_2class_table3();
        let full = spec.layout().unwrap().expand(&spec.initial_free());
        let m = MembershipModel::from_spec(&spec, &full);
        // exact expectation over the independent marginals
        let mut share2 = 0.0;
        for (a, wa) in PAPER_AGE {
            for (f, wf) in PAPER_FEMALE {
                for (t, wt) in PAPER_TRAIN_FREQ {
                    let z = BTreeMap::from([(AGE.into(), a), (FEMALE.into(), f), (TRAIN_FREQ_COVID.into(), t)]);
                    share2 += wa * wf / 0.99 * wt * class_membership_probabilities(&z, &m).unwrap()[1];
                }
            }
        }
        assert!((share2 - 0.4627).abs() < 0.03, "{share2}");
    }

    #[test]
    fn dominant_utility_wins() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let wins = (0..100_000).filter(|_| simulate_ranking(&[10.0, 0.0, -10.0], &mut rng)[0] == 0).count();
        assert!(wins as f64 / 1e5 > 0.9999);
    }

    #[test]
    fn ranking_frequencies_match_exploded_logit() {
        let u = [0.4, -0.3, 0.9];
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let n = 200_000;
        let mut counts = [0usize; 6];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..n {
            let r = simulate_ranking(&u, &mut rng);
            counts[perms.iter().position(|p| p[..] == r[..]).unwrap()] += 1;
        }
        for (p, c) in perms.iter().zip(counts) {
            let prob = rmnl_ranking_probability(&u, p).unwrap();
            let sd = (n as f64 * prob * (1.0 - prob)).sqrt();
            assert!((c as f64 - n as f64 * prob).abs() < 4.0 * sd, "{p:?}: {c} vs {}", n as f64 * prob);
        }
    }

    #[test]
    fn same_seed_same_panel() {
        let config = SimulationConfig {
            n_respondents: 40,
            seed: 5,
            ..Default::default()
        };
        let spec = builtin::paper_2class_table3();
        let a = simulate_dataset(&spec, &config).unwrap();
        let b = simulate_dataset(&spec, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dataset.n_observations(), 600);
        let c = simulate_dataset(&spec, &SimulationConfig { seed: 6, ..config }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn table_sampler_cycles_rows() {
        let rows = vec![
            BTreeMap::from([(AGE.into(), 1.0), (FEMALE.into(), 1.0), (TRAIN_FREQ_COVID.into(), 1.0)]),
            BTreeMap::from([(AGE.into(), 7.0), (FEMALE.into(), -1.0), (TRAIN_FREQ_COVID.into(), 4.0)]),
        ];
        let config = SimulationConfig {
            n_respondents: 5,
            covariates: CovariateSampler::Table { rows: rows.clone() },
            ..Default::default()
        };
        let p = simulate_dataset(&builtin::paper_2class_table3(), &config).unwrap();
        assert_eq!(p.dataset.respondents[3].covariates, rows[1]);
        let empty = SimulationConfig {
            covariates: CovariateSampler::Table { rows: vec![] },
            ..config
        };
        assert!(matches!(simulate_dataset(&builtin::paper_2class_table3(), &empty), Err(Error::Config(_))));
    }
}
