//! Post-estimation quantities: values of crowding, scaled impacts,
//! posterior membership and class profiles, opt-out curves and descriptive
//! non-trader shares.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::data::{AltLabel, Alternative, ChoiceSituation, PanelDataset};
use crate::error::{Error, Result};
use crate::estimation::FitResult;
use crate::likelihood::{mnl_probabilities, PanelLikelihood};
use crate::schema::{CROWD, INFECT, IVT, WAIT};
use crate::spec::{ModelSpec, Role, Term};
use crate::utility::utilities;

/// Crowding level coefficients and the waiting-time coefficient of one
/// class, read off the train 1 utility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdingCoefficients {
    /// Persons on board per level, ascending.
    pub persons: Vec<f64>,
    pub coefficients: Vec<f64>,
    /// Levels whose coefficient is a constraint rather than an estimate.
    pub constrained: Vec<bool>,
    pub wait: f64,
}

impl CrowdingCoefficients {
    pub fn from_model(spec: &ModelSpec, full: &[f64], class: usize) -> Result<Self> {
        let terms = spec
            .classes
            .get(class)
            .ok_or_else(|| Error::spec("classes", format!("no class {class}")))?
            .utility
            .terms(AltLabel::Train1)?;
        let mut levels = Vec::new();
        let mut wait = None;
        for t in terms {
            let idx = spec
                .resolve(class, &t.parameter)
                .ok_or_else(|| Error::spec(&t.parameter, "unknown parameter"))?;
            match &t.term {
                Term::EffectLevel { attribute, level } if attribute == CROWD => {
                    let fixed = matches!(spec.parameters[idx].role, Role::Fixed { .. });
                    levels.push((*level, full[idx], fixed));
                }
                Term::Attribute { attribute } if attribute == WAIT => wait = Some(full[idx]),
                _ => {}
            }
        }
        if levels.len() < 2 {
            return Err(Error::spec("classes", "model has no effect-coded crowding levels"));
        }
        let wait = wait.ok_or_else(|| Error::spec("classes", "model has no linear waiting-time term"))?;
        levels.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(CrowdingCoefficients {
            persons: levels.iter().map(|l| l.0).collect(),
            coefficients: levels.iter().map(|l| l.1).collect(),
            constrained: levels.iter().map(|l| l.2).collect(),
            wait,
        })
    }

    pub fn from_fit(fit: &FitResult, class: usize) -> Result<Self> {
        Self::from_model(&fit.model, &fit.full_values()?, class)
    }

    fn coefficient_at(&self, persons: f64) -> Result<f64> {
        self.persons
            .iter()
            .position(|&p| crate::schema::same_level(p, persons))
            .map(|i| self.coefficients[i])
            .ok_or_else(|| Error::Data(format!("{persons} is not a crowding level")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdingSegment {
    pub from_persons: f64,
    pub to_persons: f64,
    /// Waiting minutes per person on board.
    pub value: f64,
    /// Set when the segment lies inside a span bridged over a constrained
    /// level.
    pub interpolated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdingValueTable {
    pub segments: Vec<CrowdingSegment>,
    pub average: f64,
}

/// Values of crowding between adjacent levels and their persons-weighted
/// average. Constrained interior levels are bridged: the value across the
/// span between the surrounding estimated levels is used for each segment
/// inside it.
pub fn value_of_crowding(c: &CrowdingCoefficients) -> Result<CrowdingValueTable> {
    if c.wait == 0.0 {
        return Err(Error::UndefinedTradeOff("waiting-time coefficient is zero".into()));
    }
    let n = c.persons.len();
    let anchors: Vec<usize> = (0..n)
        .filter(|&i| i == 0 || i == n - 1 || !c.constrained[i])
        .collect();
    let mut segments = Vec::with_capacity(n - 1);
    for w in anchors.windows(2) {
        let (a, b) = (w[0], w[1]);
        let slope = (c.coefficients[a] - c.coefficients[b]) / (c.persons[a] - c.persons[b]);
        let value = slope / c.wait;
        for i in a..b {
            segments.push(CrowdingSegment {
                from_persons: c.persons[i],
                to_persons: c.persons[i + 1],
                value,
                interpolated: b - a > 1,
            });
        }
    }
    let (num, den) = segments.iter().fold((0.0, 0.0), |(num, den), s| {
        let gap = s.to_persons - s.from_persons;
        (num + s.value * gap, den + gap)
    });
    Ok(CrowdingValueTable {
        segments,
        average: num / den,
    })
}

/// Extra waiting minutes accepted for a seat at crowding `level_a` rather
/// than `level_b`: `-(beta_a - beta_b) / beta_wt`.
pub fn uncrowded_vs_crowded_wait(c: &CrowdingCoefficients, level_a: f64, level_b: f64) -> Result<f64> {
    if c.wait == 0.0 {
        return Err(Error::UndefinedTradeOff("waiting-time coefficient is zero".into()));
    }
    let d = c.coefficient_at(level_a)? - c.coefficient_at(level_b)?;
    Ok(if d == 0.0 { 0.0 } else { -d / c.wait })
}

/// `beta_j / reference` for every coefficient.
pub fn scaled_impacts(coefficients: &[f64], reference: f64) -> Result<Vec<f64>> {
    if reference == 0.0 || !reference.is_finite() {
        return Err(Error::UndefinedTradeOff(format!("reference coefficient is {reference}")));
    }
    Ok(coefficients.iter().map(|b| b / reference).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledRow {
    pub class_index: usize,
    pub class_name: String,
    pub parameter: String,
    pub value: f64,
    pub role: Role,
    pub membership: bool,
    /// `None` for constrained cells and where the reference is undefined.
    pub scaled: Option<f64>,
}

/// Scaled column for every class-specific parameter: taste coefficients
/// relative to the class waiting-time coefficient, membership coefficients
/// relative to the class intercept.
pub fn scaled_table(spec: &ModelSpec, full: &[f64]) -> Result<Vec<ScaledRow>> {
    let membership = spec.membership_parameters();
    let mut rows = Vec::new();
    for (c, class) in spec.classes.iter().enumerate() {
        let wait_ref = CrowdingCoefficients::from_model(spec, full, c).ok().map(|cc| cc.wait);
        let intercept_ref = spec.membership.classes[c]
            .intercept
            .as_ref()
            .and_then(|n| spec.resolve(c, n))
            .map(|i| full[i]);
        for (i, p) in spec.parameters.iter().enumerate().filter(|(_, p)| p.class_index == Some(c)) {
            let is_membership = membership.contains(&i);
            let reference = if is_membership { intercept_ref } else { wait_ref };
            let scaled = match (&p.role, reference) {
                (Role::Fixed { .. }, _) => None,
                (_, Some(r)) => scaled_impacts(&[full[i]], r).ok().map(|v| v[0]),
                _ => None,
            };
            rows.push(ScaledRow {
                class_index: c,
                class_name: class.name.clone(),
                parameter: p.name.clone(),
                value: full[i],
                role: p.role.clone(),
                membership: is_membership,
                scaled,
            });
        }
    }
    Ok(rows)
}

/// Posterior class probabilities per respondent given their whole choice
/// sequence.
pub fn posterior_membership(fit: &FitResult, dataset: &PanelDataset) -> Result<Vec<Vec<f64>>> {
    PanelLikelihood::new(&fit.model, dataset, fit.choice_rule)?.posteriors(&fit.free_values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub class_index: usize,
    pub total_weight: f64,
    pub mean: f64,
    /// `(value, share of the class weight)` for every observed value.
    pub histogram: Vec<(f64, f64)>,
}

/// Posterior-weighted distribution of a covariate in each class. Missing
/// values are skipped.
pub fn class_profile(posteriors: &[Vec<f64>], values: &[Option<f64>]) -> Result<Vec<ClassDistribution>> {
    if posteriors.len() != values.len() {
        return Err(Error::Data(format!(
            "{} posterior rows but {} covariate values",
            posteriors.len(),
            values.len()
        )));
    }
    let n_classes = posteriors.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(n_classes);
    for s in 0..n_classes {
        let mut weights: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
        let (mut total, mut sum) = (0.0, 0.0);
        for (h, v) in posteriors.iter().zip(values) {
            let Some(v) = *v else { continue };
            let w = h[s];
            total += w;
            sum += w * v;
            let key = v.to_bits();
            weights.entry(key).or_insert((v, 0.0)).1 += w;
        }
        let mut histogram: Vec<(f64, f64)> = weights
            .into_values()
            .map(|(v, w)| (v, if total > 0.0 { w / total } else { 0.0 }))
            .collect();
        histogram.sort_by(|a, b| a.0.total_cmp(&b.0));
        out.push(ClassDistribution {
            class_index: s,
            total_weight: total,
            mean: if total > 0.0 { sum / total } else { f64::NAN },
            histogram,
        });
    }
    Ok(out)
}

pub const DEFAULT_CURVE_IVT: f64 = 25.0;

/// Opt-out probability at each infection level when both trains have the
/// same crowding and waiting time.
pub fn opt_out_curve(
    spec: &ModelSpec,
    full: &[f64],
    class: usize,
    crowding: f64,
    wait: f64,
    infection_grid: &[f64],
    ivt: f64,
) -> Result<Vec<f64>> {
    let train = |label| Alternative::train(label, [(CROWD.to_string(), crowding), (WAIT.to_string(), wait)]);
    infection_grid
        .iter()
        .map(|&infect| {
            let s = ChoiceSituation {
                id: format!("curve-{crowding}-{infect}"),
                train1: train(AltLabel::Train1),
                train2: train(AltLabel::Train2),
                context: [(INFECT.to_string(), infect), (IVT.to_string(), ivt)].into_iter().collect(),
            };
            let v = utilities(&s, spec, class, full)?;
            Ok(mnl_probabilities(&v)?[AltLabel::OptOut.index()])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdedChoicePoint {
    /// Extra waiting minutes per person avoided by taking the less
    /// crowded train.
    pub extra_wait_per_person: f64,
    pub observations: usize,
    /// Share of observations ranking the more crowded train above the
    /// less crowded one.
    pub share_crowded: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendTest {
    pub increases: usize,
    pub decreases: usize,
    /// One-sided binomial sign-test p-value for an increasing trend.
    pub p_value: f64,
    /// Observation-weighted least-squares slope of share on extra wait.
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveShares {
    pub respondents: usize,
    pub always_opt_out: f64,
    pub never_opt_out: f64,
    pub always_less_crowded: f64,
    pub always_more_crowded: f64,
    pub crowded_curve: Vec<CrowdedChoicePoint>,
    pub trend: TrendTest,
}

fn trend(points: &[CrowdedChoicePoint]) -> TrendTest {
    let (mut inc, mut dec) = (0, 0);
    for w in points.windows(2) {
        if w[1].share_crowded > w[0].share_crowded {
            inc += 1;
        } else if w[1].share_crowded < w[0].share_crowded {
            dec += 1;
        }
    }
    let m = inc + dec;
    let p_value = if m == 0 || inc == 0 {
        1.0
    } else {
        let b = Binomial::new(0.5, m as u64).expect("valid binomial");
        1.0 - b.cdf(inc as u64 - 1)
    };
    let w: f64 = points.iter().map(|p| p.observations as f64).sum();
    let slope = if w > 0.0 {
        let mx = points.iter().map(|p| p.observations as f64 * p.extra_wait_per_person).sum::<f64>() / w;
        let my = points.iter().map(|p| p.observations as f64 * p.share_crowded).sum::<f64>() / w;
        let sxy: f64 = points
            .iter()
            .map(|p| p.observations as f64 * (p.extra_wait_per_person - mx) * (p.share_crowded - my))
            .sum();
        let sxx: f64 = points.iter().map(|p| p.observations as f64 * (p.extra_wait_per_person - mx).powi(2)).sum();
        if sxx > 0.0 {
            sxy / sxx
        } else {
            0.0
        }
    } else {
        0.0
    };
    TrendTest {
        increases: inc,
        decreases: dec,
        p_value,
        slope,
    }
}

/// Respondent-level non-trader shares and the share of observations that
/// prefer the more crowded train, binned by the extra wait per person it
/// saves. Situations with equally crowded trains are left out of the
/// crowding statistics.
pub fn descriptive_shares(dataset: &PanelDataset) -> Result<DescriptiveShares> {
    let (mut always_oo, mut never_oo, mut always_less, mut always_more) = (0usize, 0usize, 0usize, 0usize);
    let mut bins: BTreeMap<i64, (f64, usize, usize)> = BTreeMap::new();
    for r in &dataset.respondents {
        let mut tops_oo = 0;
        let (mut comparable, mut less, mut more) = (0, 0, 0);
        for obs in &r.observations {
            let s = &obs.situation;
            if obs.top() == Some(AltLabel::OptOut) {
                tops_oo += 1;
            }
            let get = |l, a| {
                s.value(l, a)
                    .ok_or_else(|| Error::Data(format!("situation `{}` lacks `{a}`", s.id)))
            };
            let (c1, c2) = (get(AltLabel::Train1, CROWD)?, get(AltLabel::Train2, CROWD)?);
            if c1 == c2 {
                continue;
            }
            let (w1, w2) = (get(AltLabel::Train1, WAIT)?, get(AltLabel::Train2, WAIT)?);
            let (crowded, calm, wc, wl, cc, cl) = if c1 > c2 {
                (AltLabel::Train1, AltLabel::Train2, w1, w2, c1, c2)
            } else {
                (AltLabel::Train2, AltLabel::Train1, w2, w1, c2, c1)
            };
            let pos = |l| obs.ranking.iter().position(|&x| x == l);
            let (Some(pc), Some(pl)) = (pos(crowded), pos(calm)) else {
                return Err(Error::Data(format!("respondent `{}`: incomplete ranking", r.id)));
            };
            comparable += 1;
            let chose_crowded = pc < pl;
            if chose_crowded {
                more += 1;
            } else {
                less += 1;
            }
            let x = (wl - wc) / (cc - cl);
            let entry = bins.entry((x * 1e6).round() as i64).or_insert((x, 0, 0));
            entry.1 += 1;
            entry.2 += usize::from(chose_crowded);
        }
        let t = r.observations.len();
        if t > 0 && tops_oo == t {
            always_oo += 1;
        }
        if tops_oo == 0 {
            never_oo += 1;
        }
        if comparable > 0 && less == comparable {
            always_less += 1;
        }
        if comparable > 0 && more == comparable {
            always_more += 1;
        }
    }
    let n = dataset.respondents.len();
    let share = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let crowded_curve: Vec<CrowdedChoicePoint> = bins
        .into_values()
        .map(|(x, count, crowded)| CrowdedChoicePoint {
            extra_wait_per_person: x,
            observations: count,
            share_crowded: crowded as f64 / count as f64,
        })
        .collect();
    Ok(DescriptiveShares {
        respondents: n,
        always_opt_out: share(always_oo),
        never_opt_out: share(never_oo),
        always_less_crowded: share(always_less),
        always_more_crowded: share(always_more),
        trend: trend(&crowded_curve),
        crowded_curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin;
    use crate::data::{RankingObservation, Respondent};
    use crate::schema::{CROWD_LEVELS, INFECT_LEVELS};
    use crate::test_support::situation;
    use AltLabel::*;

    fn table3() -> (ModelSpec, Vec<f64>) {
        let spec = builtin::paper_2class_table3();
        let full = spec.layout().unwrap().expand(&spec.initial_free());
        (spec, full)
    }

    #[test]
    fn value_of_crowding_both_classes() {
        let (spec, full) = table3();
        let c1 = CrowdingCoefficients::from_model(&spec, &full, 0).unwrap();
        let t1 = value_of_crowding(&c1).unwrap();
        assert!((t1.average - 8.75).abs() < 0.05, "{}", t1.average);
        let c2 = CrowdingCoefficients::from_model(&spec, &full, 1).unwrap();
        let t2 = value_of_crowding(&c2).unwrap();
        assert!((t2.average - 1.04).abs() < 0.02, "{}", t2.average);
        assert_eq!(t2.segments.len(), 4);
        assert!(t2.segments[0].interpolated && t2.segments[1].interpolated);
        assert_eq!(t2.segments[0].value, t2.segments[1].value);
        assert!((t2.segments[0].value - 0.58 / 18.0 / 0.038).abs() < 1e-12);
    }

    #[test]
    fn average_equals_telescoped_form() {
        let (spec, full) = table3();
        for class in 0..2 {
            let c = CrowdingCoefficients::from_model(&spec, &full, class).unwrap();
            let t = value_of_crowding(&c).unwrap();
            let n = c.persons.len() - 1;
            let tele = (c.coefficients[0] - c.coefficients[n]) / ((c.persons[n] - c.persons[0]) * c.wait);
            assert!((t.average + tele).abs() < 1e-10 || (t.average - tele).abs() < 1e-10);
        }
    }

    #[test]
    fn flat_crowding_has_zero_value() {
        let c = CrowdingCoefficients {
            persons: CROWD_LEVELS.to_vec(),
            coefficients: vec![0.3; 5],
            constrained: vec![false; 5],
            wait: -0.02,
        };
        let t = value_of_crowding(&c).unwrap();
        assert!(t.segments.iter().all(|s| s.value == 0.0));
        assert_eq!(t.average, 0.0);
    }

    #[test]
    fn zero_wait_is_undefined() {
        let c = CrowdingCoefficients {
            persons: CROWD_LEVELS.to_vec(),
            coefficients: vec![1.0, 0.5, 0.0, -0.5, -1.0],
            constrained: vec![false; 5],
            wait: 0.0,
        };
        assert!(matches!(value_of_crowding(&c), Err(Error::UndefinedTradeOff(_))));
        assert!(matches!(uncrowded_vs_crowded_wait(&c, 23.0, 36.0), Err(Error::UndefinedTradeOff(_))));
    }

    #[test]
    fn seat_contrasts() {
        let (spec, full) = table3();
        let c1 = CrowdingCoefficients::from_model(&spec, &full, 0).unwrap();
        let c2 = CrowdingCoefficients::from_model(&spec, &full, 1).unwrap();
        assert!((uncrowded_vs_crowded_wait(&c1, 23.0, 36.0).unwrap() - 1.039 / 0.014).abs() < 1e-9);
        assert!((uncrowded_vs_crowded_wait(&c2, 23.0, 36.0).unwrap() - 0.648 / 0.038).abs() < 1e-9);
        assert_eq!(uncrowded_vs_crowded_wait(&c1, 28.0, 28.0).unwrap(), 0.0);
        assert!(uncrowded_vs_crowded_wait(&c1, 20.0, 36.0).is_err());
    }

    #[test]
    fn scaled_examples() {
        assert!((scaled_impacts(&[2.230], -0.014).unwrap()[0] + 159.29).abs() < 0.01);
        assert!((scaled_impacts(&[0.820], -1.160).unwrap()[0] + 0.71).abs() < 0.01);
        assert_eq!(scaled_impacts(&[-0.3], -0.3).unwrap(), vec![1.0]);
        assert!(scaled_impacts(&[1.0], 0.0).is_err());
    }

    #[test]
    fn scaled_table_marks_references() {
        let (spec, full) = table3();
        let rows = scaled_table(&spec, &full).unwrap();
        let get = |c: usize, n: &str| rows.iter().find(|r| r.class_index == c && r.parameter == n).unwrap();
        assert_eq!(get(0, "wt").scaled, Some(1.0));
        assert_eq!(get(1, "wt").scaled, Some(1.0));
        assert_eq!(get(1, "intercept").scaled, Some(1.0));
        assert_eq!(get(1, "crowd_can_sit_alone").scaled, None);
        assert!(get(1, "age").membership);
    }

    #[test]
    fn opt_out_curve_hand_value() {
        let (spec, full) = table3();
        let p = opt_out_curve(&spec, &full, 1, 36.0, 12.0, &[2.0], DEFAULT_CURVE_IVT).unwrap()[0];
        let (t, o) = (-1.1812f64, -1.766f64);
        let want = o.exp() / (2.0 * t.exp() + o.exp());
        assert!((p - want).abs() < 1e-12 && (p - 0.218).abs() < 5e-4, "{p}");
    }

    #[test]
    fn opt_out_curve_class1_monotone_to_2_percent() {
        let (spec, full) = table3();
        for crowd in CROWD_LEVELS {
            let p = opt_out_curve(&spec, &full, 0, crowd, 12.0, &INFECT_LEVELS[..4], DEFAULT_CURVE_IVT).unwrap();
            assert!(p.windows(2).all(|w| w[1] >= w[0]), "{crowd}: {p:?}");
        }
    }

    #[test]
    fn class_profile_examples() {
        let post = vec![vec![0.5, 0.5]; 4];
        let values = vec![Some(1.0), Some(2.0), Some(2.0), None];
        let prof = class_profile(&post, &values).unwrap();
        assert_eq!((prof[0].mean, &prof[0].histogram), (prof[1].mean, &prof[1].histogram));
        assert!((prof[0].mean - 5.0 / 3.0).abs() < 1e-12);
        assert_eq!(prof[0].histogram, vec![(1.0, 1.0 / 3.0), (2.0, 2.0 / 3.0)]);

        let post = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let prof = class_profile(&post, &[Some(3.0), Some(7.0)]).unwrap();
        assert_eq!((prof[0].mean, prof[1].mean), (3.0, 7.0));
        assert!(class_profile(&post, &[Some(1.0)]).is_err());
    }

    fn respondent(id: &str, obs: Vec<(ChoiceSituation, [AltLabel; 3])>) -> Respondent {
        Respondent {
            id: id.into(),
            covariates: Default::default(),
            observations: obs
                .into_iter()
                .map(|(situation, r)| RankingObservation {
                    situation,
                    ranking: r.to_vec(),
                })
                .collect(),
        }
    }

    #[test]
    fn non_trader_shares() {
        let s = || situation(5.0, 12.0, 23.0, 3.0, 0.1, 25.0);
        let all_oo = respondent("a", vec![(s(), [OptOut, Train1, Train2]); 3]);
        let alternating = respondent(
            "b",
            vec![(s(), [Train1, Train2, OptOut]), (s(), [Train2, Train1, OptOut])],
        );
        let d = PanelDataset {
            respondents: vec![all_oo.clone()],
        };
        let sh = descriptive_shares(&d).unwrap();
        assert_eq!(sh.always_opt_out, 1.0);
        let d = PanelDataset {
            respondents: vec![alternating],
        };
        let sh = descriptive_shares(&d).unwrap();
        assert_eq!(
            (sh.always_opt_out, sh.always_less_crowded, sh.always_more_crowded),
            (0.0, 0.0, 0.0)
        );
        assert_eq!(sh.never_opt_out, 1.0);
        // extra wait (12 - 3) / (23 - 5)
        assert_eq!(sh.crowded_curve.len(), 1);
        assert!((sh.crowded_curve[0].extra_wait_per_person - 0.5).abs() < 1e-12);
        assert_eq!(sh.crowded_curve[0].share_crowded, 0.5);
    }

    #[test]
    fn equal_crowding_is_excluded_from_curve() {
        let r = respondent("a", vec![(situation(23.0, 3.0, 23.0, 12.0, 0.1, 25.0), [Train1, Train2, OptOut])]);
        let sh = descriptive_shares(&PanelDataset { respondents: vec![r] }).unwrap();
        assert!(sh.crowded_curve.is_empty());
        assert_eq!(sh.always_less_crowded, 0.0);
    }
}
