//! Maximum-likelihood estimation with multiple starts, standard errors and
//! fit statistics.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::data::PanelDataset;
use crate::error::{Error, Result};
use crate::likelihood::{ChoiceRule, PanelLikelihood};
use crate::optim::{minimize, BfgsOptions, BfgsOutcome};
use crate::spec::{ModelSpec, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub starts: usize,
    pub seed: u64,
    /// Gradient infinity-norm tolerance on the log-likelihood.
    pub tolerance: f64,
    pub max_iter: usize,
    pub rule: ChoiceRule,
    /// Reference log-likelihood for adjusted rho-squared. Defaults to the
    /// log-likelihood with every free parameter at zero.
    pub initial_ll: Option<f64>,
    /// Sandwich (robust) instead of inverse-Hessian covariance.
    pub robust: bool,
    /// Parameters whose utility-scale magnitude `|theta_j| * max|x_j|`
    /// exceeds this are reported as sitting on the boundary.
    pub boundary_threshold: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            starts: 20,
            seed: 0,
            tolerance: 1e-6,
            max_iter: 1000,
            rule: ChoiceRule::Top,
            initial_ll: None,
            robust: false,
            boundary_threshold: 15.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    /// Converged, but some parameters ran off towards infinity
    /// (separation); their values and standard errors are not meaningful.
    Boundary,
    NotConverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterEstimate {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_index: Option<usize>,
    pub role: Role,
    pub value: f64,
    pub std_error: Option<f64>,
    pub p_value: Option<f64>,
    /// Set for effect-reference cells computed from their group.
    pub derived: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitStatistics {
    pub final_ll: f64,
    pub initial_ll: f64,
    pub n_free_params: usize,
    pub n_observations: usize,
    pub adjusted_rho2: f64,
    pub bic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub gradient_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub restarts: usize,
    pub converged_starts: usize,
    pub best_start: usize,
    pub start_log_likelihoods: Vec<f64>,
    pub hessian_condition: Option<f64>,
    pub boundary_parameters: Vec<String>,
    pub singular_parameters: Vec<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RespondentPosterior {
    pub respondent_id: String,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: ModelSpec,
    pub choice_rule: ChoiceRule,
    pub status: FitStatus,
    pub parameters: Vec<ParameterEstimate>,
    pub free_values: Vec<f64>,
    pub covariance: Option<Vec<Vec<f64>>>,
    pub robust_covariance: bool,
    pub statistics: FitStatistics,
    /// Mean prior membership probability per class.
    pub class_sizes: Vec<f64>,
    pub posteriors: Vec<RespondentPosterior>,
    pub diagnostics: FitDiagnostics,
    pub best_of_multi_start: bool,
}

impl FitResult {
    pub fn full_values(&self) -> Result<Vec<f64>> {
        Ok(self.model.layout()?.expand(&self.free_values))
    }

    /// Estimate of parameter `name` in class `class` (shared parameters
    /// resolve too).
    pub fn value(&self, class: usize, name: &str) -> Option<f64> {
        self.model.resolve(class, name).map(|i| self.parameters[i].value)
    }

    pub fn estimate(&self, class: usize, name: &str) -> Option<&ParameterEstimate> {
        self.model.resolve(class, name).map(|i| &self.parameters[i])
    }

    /// The model spec with its initial values set to these estimates.
    pub fn as_generator(&self) -> ModelSpec {
        self.model.with_initial_free(&self.free_values)
    }
}

/// Adjusted rho-squared `1 - (LL - k) / LL0` and BIC `-2 LL + k ln(n_obs)`,
/// `n_obs` counting choice observations.
pub fn fit_statistics(final_ll: f64, initial_ll: f64, k: usize, n_obs: usize) -> FitStatistics {
    let kf = k as f64;
    FitStatistics {
        final_ll,
        initial_ll,
        n_free_params: k,
        n_observations: n_obs,
        adjusted_rho2: 1.0 - (final_ll - kf) / initial_ll,
        bic: -2.0 * final_ll + kf * (n_obs.max(1) as f64).ln(),
    }
}

pub fn two_sided_p_value(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone)]
pub struct StandardErrors {
    /// Covariance of the free parameters (pseudo-inverse when singular).
    pub covariance: DMatrix<f64>,
    /// Per full-table parameter; `None` for fixed or unidentified ones.
    pub std_errors: Vec<Option<f64>>,
    pub p_values: Vec<Option<f64>>,
    pub condition_number: f64,
    /// Free-vector indices that load on a (near) null direction of the
    /// Hessian.
    pub singular: Vec<usize>,
}

/// Numerical Hessian of the log-likelihood by central differences of the
/// analytic gradient, symmetrised.
pub fn numerical_hessian(lik: &PanelLikelihood, free: &[f64]) -> Result<DMatrix<f64>> {
    let n = free.len();
    let scales = lik.column_scales();
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let step = 1e-5 * (free[j].abs() * scales[j]).max(1.0) / scales[j];
        let mut x = free.to_vec();
        x[j] = free[j] + step;
        let (_, gp) = lik.loglik_gradient(&x)?;
        x[j] = free[j] - step;
        let (_, gm) = lik.loglik_gradient(&x)?;
        for i in 0..n {
            h[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Inverse-Hessian (or sandwich) standard errors at `free`, propagated to
/// derived effect-reference cells by the delta method.
pub fn standard_errors(lik: &PanelLikelihood, spec: &ModelSpec, free: &[f64], robust: bool) -> Result<StandardErrors> {
    let n = free.len();
    let layout = spec.layout()?;
    let info = -numerical_hessian(lik, free)?;
    let eig = SymmetricEigen::new(info);
    let max_ev = eig.eigenvalues.iter().copied().fold(0.0f64, |a, b| a.max(b.abs()));
    let min_ev = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let condition_number = if min_ev > 0.0 { max_ev / min_ev } else { f64::INFINITY };
    let cutoff = max_ev * 1e-10;

    let mut singular = Vec::new();
    let mut inv = DMatrix::zeros(n, n);
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        if ev > cutoff {
            inv += (v * v.transpose()) / ev;
        } else {
            for j in 0..n {
                if v[j].abs() > 0.1 && !singular.contains(&j) {
                    singular.push(j);
                }
            }
        }
    }
    singular.sort_unstable();

    let covariance = if robust {
        let mut meat = DMatrix::zeros(n, n);
        for g in lik.respondent_gradients(free)? {
            let g = nalgebra::DVector::from_vec(g);
            meat += &g * g.transpose();
        }
        &inv * meat * &inv
    } else {
        inv
    };

    let jac = layout.jacobian();
    let full_cov = &jac * &covariance * jac.transpose();
    let full = layout.expand(free);
    let mut std_errors = Vec::with_capacity(full.len());
    let mut p_values = Vec::with_capacity(full.len());
    for (i, p) in spec.parameters.iter().enumerate() {
        let depends_on_singular = (0..n).any(|j| jac[(i, j)] != 0.0 && singular.contains(&j));
        let se = match p.role {
            Role::Fixed { .. } => None,
            _ if depends_on_singular => None,
            _ => {
                let var = full_cov[(i, i)];
                (var > 0.0).then(|| var.sqrt())
            }
        };
        p_values.push(se.map(|se| two_sided_p_value(full[i] / se)));
        std_errors.push(se);
    }
    Ok(StandardErrors {
        covariance,
        std_errors,
        p_values,
        condition_number,
        singular,
    })
}

/// Reorders classes of a model whose classes share one structure so that
/// the largest class takes the reference slot and the rest follow in
/// descending size. Leaves `free` unchanged for models with class-specific
/// structure, whose labels are already identified.
pub fn canonicalize_classes(spec: &ModelSpec, free: &[f64], class_sizes: &[f64]) -> Result<Vec<f64>> {
    let s_count = spec.n_classes();
    let Some(reference) = spec.reference_class() else {
        return Ok(free.to_vec());
    };
    if s_count < 2 || !exchangeable(spec) {
        return Ok(free.to_vec());
    }
    let mut by_size: Vec<usize> = (0..s_count).collect();
    by_size.sort_by(|&a, &b| class_sizes[b].total_cmp(&class_sizes[a]).then(a.cmp(&b)));
    // slot -> old class
    let mut order = vec![0; s_count];
    order[reference] = by_size[0];
    let mut rest = by_size[1..].iter();
    for (slot, o) in order.iter_mut().enumerate() {
        if slot != reference {
            *o = *rest.next().expect("one class per slot");
        }
    }
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        return Ok(free.to_vec());
    }

    let layout = spec.layout()?;
    let full = layout.expand(free);
    let mut out = free.to_vec();
    let mut set = |idx: usize, v: f64| {
        if let Some(f) = layout.free_index(idx) {
            out[f] = v;
        }
    };
    for slot in 0..s_count {
        let old = order[slot];
        for idx in spec.utility_parameters(slot) {
            let p = &spec.parameters[idx];
            if p.class_index.is_some() {
                set(idx, full[spec.resolve(old, &p.name).expect("exchangeable")]);
            }
        }
    }
    // membership relative to the class now in the reference slot
    let m = &spec.membership;
    let member_value = |class: usize, name: Option<&String>| name.and_then(|n| spec.resolve(class, n)).map_or(0.0, |i| full[i]);
    let template = m.classes.iter().find(|c| !c.is_reference()).expect("S >= 2");
    for slot in (0..s_count).filter(|&s| s != reference) {
        let old = order[slot];
        let base = order[reference];
        if let Some(name) = &m.classes[slot].intercept {
            let v = member_value(old, m.classes[old].intercept.as_ref()) - member_value(base, m.classes[base].intercept.as_ref());
            set(spec.resolve(slot, name).expect("validated"), v);
        }
        for cov in template.coefficients.keys() {
            let v = member_value(old, m.classes[old].coefficients.get(cov)) - member_value(base, m.classes[base].coefficients.get(cov));
            if let Some(name) = m.classes[slot].coefficients.get(cov) {
                set(spec.resolve(slot, name).expect("validated"), v);
            }
        }
    }
    Ok(out)
}

fn exchangeable(spec: &ModelSpec) -> bool {
    let class_params = |c: usize| {
        let mut v: Vec<_> = spec
            .parameters
            .iter()
            .filter(|p| p.class_index == Some(c))
            .filter(|p| !spec.membership_parameters().contains(&spec.resolve(c, &p.name).unwrap_or(usize::MAX)))
            .map(|p| (p.name.clone(), p.role.clone(), p.group.clone()))
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    };
    let first = class_params(0);
    let same_taste = (1..spec.n_classes())
        .all(|c| spec.classes[c].utility == spec.classes[0].utility && class_params(c) == first);
    let non_ref: Vec<_> = spec.membership.classes.iter().filter(|c| !c.is_reference()).collect();
    let same_membership = non_ref.windows(2).all(|w| {
        w[0].intercept.is_some() == w[1].intercept.is_some()
            && w[0].coefficients.keys().eq(w[1].coefficients.keys())
    });
    let all_free = spec.membership_parameters().iter().all(|&i| spec.parameters[i].role.is_free());
    same_taste && same_membership && all_free
}

fn start_points(spec: &ModelSpec, scales: &[f64], starts: usize, seed: u64) -> Vec<Vec<f64>> {
    let base = spec.initial_free();
    (0..starts.max(1))
        .map(|k| {
            if k == 0 {
                return base.clone();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            base.iter()
                .zip(scales)
                .map(|(b, s)| b + rng.random_range(-1.0..1.0) / s)
                .collect()
        })
        .collect()
}

fn run_start(lik: &PanelLikelihood, x0: &[f64], scales: &[f64], options: &FitOptions) -> BfgsOutcome {
    // optimise over u = theta * scale so every coordinate moves utilities
    // on the same order of magnitude
    let u0: Vec<f64> = x0.iter().zip(scales).map(|(x, s)| x * s).collect();
    let objective = |u: &[f64]| {
        let theta: Vec<f64> = u.iter().zip(scales).map(|(u, s)| u / s).collect();
        let (ll, g) = lik.loglik_gradient(&theta).ok()?;
        Some((-ll, g.iter().zip(scales).map(|(g, s)| -g / s).collect()))
    };
    let opts = BfgsOptions {
        max_iter: options.max_iter,
        gtol: options.tolerance,
        gradient_weights: Some(scales.to_vec()),
        ..Default::default()
    };
    let mut out = minimize(&u0, objective, &opts);
    for (x, s) in out.x.iter_mut().zip(scales) {
        *x /= s;
    }
    out
}

/// Multi-start maximum likelihood. Starts run in parallel; the best
/// log-likelihood wins, ties going to the lower start index.
pub fn fit(dataset: &PanelDataset, spec: &ModelSpec, options: &FitOptions) -> Result<FitResult> {
    let lik = PanelLikelihood::new(spec, dataset, options.rule)?;
    let scales = lik.column_scales();
    let points = start_points(spec, &scales, options.starts, options.seed);
    let outcomes: Vec<BfgsOutcome> = points
        .par_iter()
        .map(|x0| run_start(&lik, x0, &scales, options))
        .collect();

    let start_lls: Vec<f64> = outcomes.iter().map(|o| -o.f).collect();
    let best_start = (0..outcomes.len())
        .filter(|&k| start_lls[k].is_finite())
        .fold(None, |best: Option<usize>, k| match best {
            Some(b) if start_lls[b] >= start_lls[k] => Some(b),
            _ => Some(k),
        })
        .ok_or_else(|| Error::Numeric("log-likelihood undefined at every start".into()))?;
    let best = &outcomes[best_start];
    let converged_starts = outcomes.iter().filter(|o| o.converged).count();

    let membership = lik.membership_probabilities(&best.x)?;
    let class_sizes = mean_columns(&membership, spec.n_classes());
    let free = canonicalize_classes(spec, &best.x, &class_sizes)?;
    let (final_ll, grad) = lik.loglik_gradient(&free)?;
    let membership = lik.membership_probabilities(&free)?;
    let class_sizes = mean_columns(&membership, spec.n_classes());

    let boundary: Vec<usize> = (0..free.len())
        .filter(|&j| (free[j] * scales[j]).abs() > options.boundary_threshold)
        .collect();
    let se = standard_errors(&lik, spec, &free, options.robust)?;

    let initial_ll = match options.initial_ll {
        Some(v) => v,
        None => lik.loglik(&vec![0.0; free.len()])?,
    };
    let statistics = fit_statistics(final_ll, initial_ll, free.len(), lik.n_observations());

    let full = lik.layout().expand(&free);
    let parameters = spec
        .parameters
        .iter()
        .enumerate()
        .map(|(i, p)| ParameterEstimate {
            name: p.name.clone(),
            class_index: p.class_index,
            role: p.role.clone(),
            value: full[i],
            std_error: se.std_errors[i],
            p_value: se.p_values[i],
            derived: matches!(p.role, Role::DerivedEffectReference { .. }),
        })
        .collect();
    let free_names = spec.free_names();
    let status = if !best.converged {
        FitStatus::NotConverged
    } else if boundary.is_empty() {
        FitStatus::Converged
    } else {
        FitStatus::Boundary
    };
    let result = FitResult {
        model: spec.clone(),
        choice_rule: options.rule,
        status,
        parameters,
        covariance: Some(
            se.covariance
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        ),
        robust_covariance: options.robust,
        statistics,
        class_sizes,
        posteriors: dataset
            .respondents
            .iter()
            .zip(lik.posteriors(&free)?)
            .map(|(r, p)| RespondentPosterior {
                respondent_id: r.id.clone(),
                probabilities: p,
            })
            .collect(),
        diagnostics: FitDiagnostics {
            gradient_norm: grad.iter().fold(0.0f64, |a, g| a.max(g.abs())),
            iterations: best.iterations,
            evaluations: outcomes.iter().map(|o| o.evaluations).sum(),
            restarts: outcomes.len(),
            converged_starts,
            best_start,
            start_log_likelihoods: start_lls,
            hessian_condition: se.condition_number.is_finite().then_some(se.condition_number),
            boundary_parameters: boundary.iter().map(|&j| free_names[j].clone()).collect(),
            singular_parameters: se.singular.iter().map(|&j| free_names[j].clone()).collect(),
            message: best.message.clone(),
        },
        free_values: free,
        best_of_multi_start: outcomes.len() > 1,
    };
    if converged_starts == 0 {
        return Err(Error::NotConverged {
            starts: outcomes.len(),
            best_ll: final_ll,
            best: Box::new(result),
        });
    }
    Ok(result)
}

fn mean_columns(rows: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    let count = rows.len().max(1) as f64;
    out.into_iter().map(|v| v / count).collect()
}

/// Backward elimination: refit, fixing to zero the free taste parameter
/// with the largest p-value above `threshold`, until none is left.
/// Membership intercepts are never removed.
pub fn stepwise_prune(
    dataset: &PanelDataset,
    spec: &ModelSpec,
    options: &FitOptions,
    threshold: f64,
) -> Result<(ModelSpec, FitResult)> {
    let mut spec = spec.clone();
    loop {
        let result = fit(dataset, &spec, options)?;
        let intercepts: Vec<usize> = spec
            .membership
            .classes
            .iter()
            .enumerate()
            .filter_map(|(c, m)| m.intercept.as_ref().and_then(|n| spec.resolve(c, n)))
            .collect();
        let worst = result
            .parameters
            .iter()
            .enumerate()
            .filter(|(i, p)| p.role.is_free() && !intercepts.contains(i))
            .filter_map(|(i, p)| p.p_value.map(|pv| (i, pv)))
            .filter(|&(_, pv)| pv > threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match worst {
            None => return Ok((spec, result)),
            Some((i, _)) => {
                let warm = result.as_generator();
                spec = warm;
                spec.parameters[i].role = Role::Fixed { value: 0.0 };
                spec.parameters[i].initial_value = 0.0;
            }
        }
    }
}
