//! Choice probabilities and the panel latent-class log-likelihood.
//!
//! A respondent's class is drawn once and held for all of their tasks, so
//! the class mixture sits outside the product over tasks:
//!
//! ```text
//! LL = sum_n log sum_s pi_ns * prod_t P(y_nt | class s)
//! ```
//!
//! Products over tasks are accumulated as sums of log-probabilities and the
//! mixture is taken with log-sum-exp.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{is_permutation, AltLabel, PanelDataset};
use crate::error::{Error, Result};
use crate::spec::{ModelSpec, ParameterLayout};
use crate::utility::expand_utility_row;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChoiceRule {
    /// MNL on the top-ranked alternative only.
    #[default]
    Top,
    /// Rank-ordered (exploded) MNL on the full ranking.
    Rank,
}

impl std::str::FromStr for ChoiceRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(ChoiceRule::Top),
            "rank" => Ok(ChoiceRule::Rank),
            other => Err(Error::Config(format!("unknown choice rule `{other}` (expected top|rank)"))),
        }
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max == f64::INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn check_finite(utilities: &[f64]) -> Result<()> {
    if utilities.is_empty() {
        return Err(Error::Numeric("empty choice set".into()));
    }
    if let Some(u) = utilities.iter().find(|u| u.is_nan()) {
        return Err(Error::Numeric(format!("utility is {u}")));
    }
    Ok(())
}

/// Softmax with a max shift. `-inf` utilities get probability zero.
pub fn mnl_probabilities(utilities: &[f64]) -> Result<Vec<f64>> {
    check_finite(utilities)?;
    let max = utilities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numeric("no alternative has finite utility".into()));
    }
    let exps: Vec<f64> = utilities.iter().map(|u| (u - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Probability of a complete ranking (indices into `utilities`, best first)
/// as a sequence of MNL choices over the not-yet-ranked alternatives.
pub fn rmnl_ranking_probability(utilities: &[f64], ranking: &[usize]) -> Result<f64> {
    check_finite(utilities)?;
    let n = utilities.len();
    let mut seen = vec![false; n];
    if ranking.len() != n || ranking.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
        return Err(Error::Data(format!("{ranking:?} is not a permutation of {n} alternatives")));
    }
    let mut log_p = 0.0;
    let mut remaining: Vec<f64> = Vec::with_capacity(n);
    for k in 0..n - 1 {
        remaining.clear();
        remaining.extend(ranking[k..].iter().map(|&i| utilities[i]));
        log_p += utilities[ranking[k]] - log_sum_exp(&remaining);
    }
    Ok(log_p.exp())
}

/// Class-membership logit: per-class intercept and covariate coefficients,
/// the reference class all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipModel {
    pub covariates: Vec<String>,
    pub intercepts: Vec<f64>,
    /// `[class][covariate]`
    pub coefficients: Vec<Vec<f64>>,
}

impl MembershipModel {
    pub fn uniform(n_classes: usize) -> Self {
        MembershipModel {
            covariates: vec![],
            intercepts: vec![0.0; n_classes],
            coefficients: vec![vec![]; n_classes],
        }
    }

    pub fn from_spec(spec: &ModelSpec, full: &[f64]) -> Self {
        let covariates = spec.membership.covariates.clone();
        let value = |c: usize, name: &String| spec.resolve(c, name).map_or(0.0, |i| full[i]);
        let intercepts = spec
            .membership
            .classes
            .iter()
            .enumerate()
            .map(|(c, m)| m.intercept.as_ref().map_or(0.0, |p| value(c, p)))
            .collect();
        let coefficients = spec
            .membership
            .classes
            .iter()
            .enumerate()
            .map(|(c, m)| {
                covariates
                    .iter()
                    .map(|cov| m.coefficients.get(cov).map_or(0.0, |p| value(c, p)))
                    .collect()
            })
            .collect();
        MembershipModel {
            covariates,
            intercepts,
            coefficients,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.intercepts.len()
    }

    pub fn scores(&self, covariates: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
        let z = self
            .covariates
            .iter()
            .map(|name| {
                covariates
                    .get(name)
                    .copied()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Data(format!("missing covariate `{name}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(self
            .intercepts
            .iter()
            .zip(&self.coefficients)
            .map(|(d, g)| d + g.iter().zip(&z).map(|(g, z)| g * z).sum::<f64>())
            .collect())
    }
}

pub fn class_membership_probabilities(
    covariates: &BTreeMap<String, f64>,
    membership: &MembershipModel,
) -> Result<Vec<f64>> {
    mnl_probabilities(&membership.scores(covariates)?)
}

/// Sparse linear form over the free parameter vector.
#[derive(Debug, Clone, Default)]
struct Row {
    idx: Vec<u32>,
    val: Vec<f64>,
    offset: f64,
}

impl Row {
    fn from_full(layout: &ParameterLayout, full_row: &[f64]) -> Self {
        let (dense, offset) = layout.free_row(full_row);
        let mut row = Row {
            offset,
            ..Default::default()
        };
        for (i, v) in dense.into_iter().enumerate() {
            if v != 0.0 {
                row.idx.push(i as u32);
                row.val.push(v);
            }
        }
        row
    }

    #[inline]
    fn eval(&self, free: &[f64]) -> f64 {
        self.offset
            + self
                .idx
                .iter()
                .zip(&self.val)
                .map(|(&i, v)| free[i as usize] * v)
                .sum::<f64>()
    }

    #[inline]
    fn add_to(&self, grad: &mut [f64], weight: f64) {
        for (&i, v) in self.idx.iter().zip(&self.val) {
            grad[i as usize] += weight * v;
        }
    }
}

#[derive(Debug, Clone)]
struct Task {
    /// `[class][alternative]`
    rows: Vec<[Row; 3]>,
    ranking: [usize; 3],
}

#[derive(Debug, Clone)]
struct CompiledRespondent {
    membership: Vec<Row>,
    tasks: Vec<Task>,
}

/// Per-respondent quantities at one parameter point.
struct RespondentEval {
    loglik: f64,
    log_prior: Vec<f64>,
    log_posterior: Vec<f64>,
    gradient: Option<Vec<f64>>,
}

/// Dataset and model compiled into sparse design rows over the free
/// parameter vector. Immutable; evaluation is parallel over respondents
/// with a fixed-order reduction, so results do not depend on thread count.
#[derive(Debug, Clone)]
pub struct PanelLikelihood {
    n_free: usize,
    n_classes: usize,
    rule: ChoiceRule,
    respondents: Vec<CompiledRespondent>,
    layout: ParameterLayout,
}

impl PanelLikelihood {
    pub fn new(spec: &ModelSpec, dataset: &PanelDataset, rule: ChoiceRule) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout()?;
        let n_classes = spec.n_classes();
        let n_full = spec.parameters.len();

        let membership_rows: Vec<Vec<(usize, f64)>> = spec
            .membership
            .classes
            .iter()
            .enumerate()
            .map(|(c, m)| {
                let mut terms = Vec::new();
                if let Some(p) = &m.intercept {
                    terms.push((spec.resolve(c, p).expect("validated"), f64::NAN));
                }
                for (cov, p) in &m.coefficients {
                    let k = spec.membership.covariates.iter().position(|x| x == cov).expect("validated");
                    terms.push((spec.resolve(c, p).expect("validated"), k as f64));
                }
                terms
            })
            .collect();

        let respondents = dataset
            .respondents
            .iter()
            .map(|r| {
                if r.observations.is_empty() {
                    return Err(Error::Data(format!("respondent `{}` has no observations", r.id)));
                }
                let z = spec
                    .membership
                    .covariates
                    .iter()
                    .map(|name| {
                        r.covariates.get(name).copied().filter(|v| v.is_finite()).ok_or_else(|| {
                            Error::Data(format!("respondent `{}`: missing covariate `{name}`", r.id))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let membership = membership_rows
                    .iter()
                    .map(|terms| {
                        let mut full = vec![0.0; n_full];
                        for &(idx, k) in terms {
                            // NaN marks the intercept column
                            full[idx] += if k.is_nan() { 1.0 } else { z[k as usize] };
                        }
                        Row::from_full(&layout, &full)
                    })
                    .collect();
                let tasks = r
                    .observations
                    .iter()
                    .map(|obs| {
                        if !is_permutation(&obs.ranking) {
                            return Err(Error::Data(format!(
                                "respondent `{}`, situation `{}`: ranking is not a permutation",
                                r.id,
                                obs.situation_id()
                            )));
                        }
                        let rows = (0..n_classes)
                            .map(|c| {
                                let mut rows: [Row; 3] = Default::default();
                                for label in AltLabel::ALL {
                                    let full = expand_utility_row(&obs.situation, label, spec, c)?;
                                    rows[label.index()] = Row::from_full(&layout, &full);
                                }
                                Ok(rows)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        let ranking = [
                            obs.ranking[0].index(),
                            obs.ranking[1].index(),
                            obs.ranking[2].index(),
                        ];
                        Ok(Task { rows, ranking })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(CompiledRespondent { membership, tasks })
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(PanelLikelihood {
            n_free: layout.n_free(),
            n_classes,
            rule,
            respondents,
            layout,
        })
    }

    pub fn n_free(&self) -> usize {
        self.n_free
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_respondents(&self) -> usize {
        self.respondents.len()
    }

    pub fn n_observations(&self) -> usize {
        self.respondents.iter().map(|r| r.tasks.len()).sum()
    }

    pub fn rule(&self) -> ChoiceRule {
        self.rule
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    /// Largest absolute design value of each free parameter, used to scale
    /// the optimizer's coordinates.
    pub fn column_scales(&self) -> Vec<f64> {
        let mut scale = vec![0.0f64; self.n_free];
        let mut visit = |row: &Row| {
            for (&i, v) in row.idx.iter().zip(&row.val) {
                scale[i as usize] = scale[i as usize].max(v.abs());
            }
        };
        for r in &self.respondents {
            r.membership.iter().for_each(&mut visit);
            for t in &r.tasks {
                t.rows.iter().flatten().for_each(&mut visit);
            }
        }
        scale.into_iter().map(|s| if s > 0.0 { s } else { 1.0 }).collect()
    }

    fn check_point(&self, free: &[f64]) -> Result<()> {
        if free.len() != self.n_free {
            return Err(Error::Numeric(format!(
                "expected {} free parameters, got {}",
                self.n_free,
                free.len()
            )));
        }
        if let Some(i) = free.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("free parameter {i} is {}", free[i])));
        }
        Ok(())
    }

    /// Log-probability of one task under one class, optionally adding its
    /// score into `grad`.
    fn task_log_prob(&self, rows: &[Row; 3], ranking: &[usize; 3], free: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let v = [rows[0].eval(free), rows[1].eval(free), rows[2].eval(free)];
        let stages = match self.rule {
            ChoiceRule::Top => 1,
            ChoiceRule::Rank => 2,
        };
        let mut log_p = 0.0;
        let mut grad = grad;
        for k in 0..stages {
            let rest = &ranking[k..];
            let max = rest.iter().map(|&i| v[i]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = rest.iter().map(|&i| (v[i] - max).exp()).sum();
            let lse = max + denom.ln();
            log_p += v[ranking[k]] - lse;
            if let Some(g) = grad.as_deref_mut() {
                rows[ranking[k]].add_to(g, 1.0);
                for &i in rest {
                    rows[i].add_to(g, -(v[i] - lse).exp());
                }
            }
        }
        log_p
    }

    fn eval_respondent(&self, r: &CompiledRespondent, free: &[f64], with_grad: bool) -> RespondentEval {
        let s_count = self.n_classes;
        let scores: Vec<f64> = r.membership.iter().map(|row| row.eval(free)).collect();
        let lse_scores = log_sum_exp(&scores);
        let log_prior: Vec<f64> = scores.iter().map(|s| s - lse_scores).collect();

        let mut class_ll = vec![0.0; s_count];
        let mut class_grad = if with_grad {
            vec![vec![0.0; self.n_free]; s_count]
        } else {
            vec![]
        };
        for task in &r.tasks {
            for s in 0..s_count {
                let g = class_grad.get_mut(s).map(|g| g.as_mut_slice());
                class_ll[s] += self.task_log_prob(&task.rows[s], &task.ranking, free, g);
            }
        }
        let joint: Vec<f64> = (0..s_count).map(|s| log_prior[s] + class_ll[s]).collect();
        let loglik = log_sum_exp(&joint);
        let log_posterior: Vec<f64> = joint.iter().map(|j| j - loglik).collect();

        let gradient = with_grad.then(|| {
            let mut g = vec![0.0; self.n_free];
            for s in 0..s_count {
                let h = log_posterior[s].exp();
                let pi = log_prior[s].exp();
                for (gi, ci) in g.iter_mut().zip(&class_grad[s]) {
                    *gi += h * ci;
                }
                r.membership[s].add_to(&mut g, h - pi);
            }
            g
        });
        RespondentEval {
            loglik,
            log_prior,
            log_posterior,
            gradient,
        }
    }

    fn eval_all(&self, free: &[f64], with_grad: bool) -> Result<Vec<RespondentEval>> {
        self.check_point(free)?;
        let evals: Vec<RespondentEval> = self
            .respondents
            .par_iter()
            .map(|r| self.eval_respondent(r, free, with_grad))
            .collect();
        if let Some(n) = evals.iter().position(|e| !e.loglik.is_finite()) {
            return Err(Error::Numeric(format!(
                "respondent {n} has log-likelihood {} under every class",
                evals[n].loglik
            )));
        }
        Ok(evals)
    }

    pub fn loglik(&self, free: &[f64]) -> Result<f64> {
        Ok(self.eval_all(free, false)?.iter().map(|e| e.loglik).sum())
    }

    /// Log-likelihood and its analytic gradient over the free parameters.
    pub fn loglik_gradient(&self, free: &[f64]) -> Result<(f64, Vec<f64>)> {
        let evals = self.eval_all(free, true)?;
        let mut ll = 0.0;
        let mut grad = vec![0.0; self.n_free];
        for e in &evals {
            ll += e.loglik;
            for (g, x) in grad.iter_mut().zip(e.gradient.as_ref().expect("requested")) {
                *g += x;
            }
        }
        Ok((ll, grad))
    }

    /// Per-respondent score vectors (for sandwich covariance).
    pub fn respondent_gradients(&self, free: &[f64]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .eval_all(free, true)?
            .into_iter()
            .map(|e| e.gradient.expect("requested"))
            .collect())
    }

    /// Prior class-membership probabilities per respondent.
    pub fn membership_probabilities(&self, free: &[f64]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .eval_all(free, false)?
            .into_iter()
            .map(|e| e.log_prior.into_iter().map(f64::exp).collect())
            .collect())
    }

    /// Posterior class probabilities given each respondent's choices.
    pub fn posteriors(&self, free: &[f64]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .eval_all(free, false)?
            .into_iter()
            .map(|e| e.log_posterior.into_iter().map(f64::exp).collect())
            .collect())
    }
}

/// One-shot log-likelihood of `dataset` at free values `free`.
pub fn lccm_panel_loglik(dataset: &PanelDataset, spec: &ModelSpec, free: &[f64], rule: ChoiceRule) -> Result<f64> {
    PanelLikelihood::new(spec, dataset, rule)?.loglik(free)
}

/// One-shot gradient of the log-likelihood over the free parameters.
pub fn loglik_gradient(dataset: &PanelDataset, spec: &ModelSpec, free: &[f64], rule: ChoiceRule) -> Result<Vec<f64>> {
    Ok(PanelLikelihood::new(spec, dataset, rule)?.loglik_gradient(free)?.1)
}
