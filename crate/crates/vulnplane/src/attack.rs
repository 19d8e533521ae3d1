//! Membership-inference measurement tools.
//!
//! The primary engine is LiRA: per sample and checkpoint it fits Gaussians
//! to the logit-scaled confidences of the models that trained on the sample
//! and of those that did not, scores each model's observation by the
//! log-likelihood ratio, and counts hard decisions into per-sample TPR/FPR.
//! The second engine is the classic shadow-classifier attack: per-class
//! binary logistic regressions on descending-sorted posterior vectors.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MembershipPlan;
use crate::error::{Error, Result};
use crate::plane::{Trajectory, VulnerabilityState};
use crate::train::ScoreLog;

/// Variances below this floor are lifted to it; only non-finite statistics
/// are treated as errors.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    /// Pool the in/out variances across every sample at one epoch.
    Global,
    /// Fit each sample's variances from its own observations.
    PerSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiraConfig {
    pub variance_mode: VarianceMode,
    /// Log-likelihood-ratio decision cutoff.
    pub threshold: f64,
    /// Exclude the scored model's own observation from the reference fits.
    pub leave_one_out: bool,
}

impl Default for LiraConfig {
    fn default() -> Self {
        LiraConfig {
            variance_mode: VarianceMode::Global,
            threshold: 0.0,
            leave_one_out: true,
        }
    }
}

/// Logit scaling of a confidence: log(p / (1 - p)). Strictly monotone;
/// inputs are clamped upstream so the result is finite.
pub fn logit_scale(conf: f64) -> f64 {
    (conf / (1.0 - conf)).ln()
}

/// Pooled within-sample variances of the in and out observation groups at
/// one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PooledVariance {
    pub var_in: f64,
    pub var_out: f64,
}

fn log_normal_pdf(x: f64, mu: f64, var: f64) -> f64 {
    let d = x - mu;
    -0.5 * ((std::f64::consts::TAU * var).ln() + d * d / var)
}

/// log N(target; mu_in, var_in) - log N(target; mu_out, var_out).
pub fn gaussian_log_lr(target: f64, mu_in: f64, var_in: f64, mu_out: f64, var_out: f64) -> f64 {
    log_normal_pdf(target, mu_in, var_in) - log_normal_pdf(target, mu_out, var_out)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Maximum-likelihood variance (denominator n).
fn ml_variance(xs: &[f64], mu: f64) -> f64 {
    xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / xs.len() as f64
}

fn floor_variance(var: f64, epoch: u32, sample: u32) -> Result<f64> {
    if !var.is_finite() || var < 0.0 {
        return Err(Error::DegenerateVariance {
            epoch,
            sample,
            variance: var,
            floor: VARIANCE_FLOOR,
        });
    }
    Ok(var.max(VARIANCE_FLOOR))
}

/// Log-likelihood ratio of one target observation against Gaussians fit on
/// the given reference draws. In global mode the caller supplies the pooled
/// variances; means always come from the reference draws.
pub fn lira_score(
    target_phi: f64,
    in_phis: &[f64],
    out_phis: &[f64],
    cfg: &LiraConfig,
    pooled: Option<PooledVariance>,
) -> Result<f64> {
    if in_phis.is_empty() || out_phis.is_empty() {
        return Err(Error::EmptyPopulation(
            "lira_score needs both in and out observations".into(),
        ));
    }
    let mu_in = mean(in_phis);
    let mu_out = mean(out_phis);
    let (var_in, var_out) = match cfg.variance_mode {
        VarianceMode::Global => {
            let p = pooled.ok_or_else(|| {
                Error::InvalidArgument("global variance mode needs pooled variances".into())
            })?;
            (p.var_in, p.var_out)
        }
        VarianceMode::PerSample => (ml_variance(in_phis, mu_in), ml_variance(out_phis, mu_out)),
    };
    let var_in = floor_variance(var_in, 0, 0)?;
    let var_out = floor_variance(var_out, 0, 0)?;
    Ok(gaussian_log_lr(target_phi, mu_in, var_in, mu_out, var_out))
}

/// One model's observation of one sample, logit scaled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub model: u32,
    pub member: bool,
    pub phi: f64,
}

/// One model's attack decision for one (epoch, sample) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelDecision {
    pub model: u32,
    pub member: bool,
    pub flagged: bool,
    pub score: f64,
}

/// Per-(epoch, sample) attack result: the per-model decisions and the
/// derived vulnerability state.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub epoch: u32,
    pub sample: u32,
    pub decisions: Vec<ModelDecision>,
    pub state: VulnerabilityState,
}

/// TPR/FPR counting over hard decisions; shared by both attack engines.
pub fn state_from_decisions(decisions: &[ModelDecision]) -> Result<VulnerabilityState> {
    let in_count = decisions.iter().filter(|d| d.member).count();
    let out_count = decisions.len() - in_count;
    if in_count == 0 || out_count == 0 {
        return Err(Error::EmptyPopulation(
            "counting needs both member and non-member decisions".into(),
        ));
    }
    let flagged_in = decisions.iter().filter(|d| d.member && d.flagged).count();
    let flagged_out = decisions.iter().filter(|d| !d.member && d.flagged).count();
    VulnerabilityState::new(
        flagged_out as f64 / out_count as f64,
        flagged_in as f64 / in_count as f64,
    )
}

fn score_observations(
    obs: &[Observation],
    cfg: &LiraConfig,
    pooled: Option<PooledVariance>,
    epoch: u32,
    sample: u32,
) -> Result<AttackOutcome> {
    let in_phis: Vec<f64> = obs.iter().filter(|o| o.member).map(|o| o.phi).collect();
    let out_phis: Vec<f64> = obs.iter().filter(|o| !o.member).map(|o| o.phi).collect();
    if in_phis.is_empty() || out_phis.is_empty() {
        return Err(Error::EmptyPopulation(format!(
            "sample {sample} at epoch {epoch} lacks in or out observations"
        )));
    }

    let decide = |target: f64, hold_out: Option<(bool, f64)>| -> Result<f64> {
        // reference draws, optionally with the target's own observation removed
        let filter = |member_side: bool, phis: &[f64]| -> Vec<f64> {
            match hold_out {
                Some((m, phi)) if m == member_side => {
                    let mut v = phis.to_vec();
                    if let Some(pos) = v.iter().position(|&p| p == phi) {
                        v.remove(pos);
                    }
                    v
                }
                _ => phis.to_vec(),
            }
        };
        let ins = filter(true, &in_phis);
        let outs = filter(false, &out_phis);
        if ins.is_empty() || outs.is_empty() {
            // leave-one-out exhausted one side; fall back to the full fit
            return lira_score(target, &in_phis, &out_phis, cfg, pooled);
        }
        lira_score(target, &ins, &outs, cfg, pooled)
    };

    let mut decisions = Vec::with_capacity(obs.len());
    for o in obs {
        let hold_out = if cfg.leave_one_out {
            Some((o.member, o.phi))
        } else {
            None
        };
        let score = decide(o.phi, hold_out).map_err(|e| match e {
            Error::DegenerateVariance { variance, floor, .. } => Error::DegenerateVariance {
                epoch,
                sample,
                variance,
                floor,
            },
            other => other,
        })?;
        decisions.push(ModelDecision {
            model: o.model,
            member: o.member,
            flagged: score > cfg.threshold,
            score,
        });
    }
    let state = state_from_decisions(&decisions)?;
    Ok(AttackOutcome {
        epoch,
        sample,
        decisions,
        state,
    })
}

// ---------------------------------------------------------------------------
// Score-log indexing
// ---------------------------------------------------------------------------

/// Observations grouped by epoch and sample, with completeness checks.
#[derive(Debug)]
pub struct ScoreTable {
    /// Ascending epochs.
    pub epochs: Vec<u32>,
    /// Ascending sample ids.
    pub samples: Vec<u32>,
    /// `groups[epoch_idx][sample_idx]` -> per-model observations, ascending
    /// by model id.
    groups: Vec<Vec<Vec<Observation>>>,
}

impl ScoreTable {
    /// Indexes a score log, verifying that every (epoch, model, sample)
    /// combination appears exactly once and agrees with the plan shape.
    pub fn build(log: &ScoreLog, plan: &MembershipPlan) -> Result<Self> {
        let epochs = log.epochs();
        if epochs.is_empty() {
            return Err(Error::EmptyPopulation("score log has no records".into()));
        }
        let mut samples: Vec<u32> = log.records.iter().map(|r| r.sample).collect();
        samples.sort_unstable();
        samples.dedup();
        if samples.len() != plan.n_samples {
            return Err(Error::ShapeMismatch(format!(
                "score log covers {} samples, plan expects {}",
                samples.len(),
                plan.n_samples
            )));
        }

        let epoch_idx: BTreeMap<u32, usize> = epochs.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        let sample_idx: BTreeMap<u32, usize> =
            samples.iter().enumerate().map(|(i, &s)| (s, i)).collect();

        let mut groups = vec![vec![Vec::with_capacity(plan.n_models); samples.len()]; epochs.len()];
        for r in &log.records {
            let e = epoch_idx[&r.epoch];
            let s = sample_idx[&r.sample];
            groups[e][s].push(Observation {
                model: r.model,
                member: r.member == 1,
                phi: logit_scale(r.conf),
            });
        }

        for (e, per_sample) in groups.iter_mut().enumerate() {
            for (s, obs) in per_sample.iter_mut().enumerate() {
                obs.sort_by_key(|o| o.model);
                if obs.len() != plan.n_models
                    || obs.iter().enumerate().any(|(i, o)| o.model as usize != i)
                {
                    let missing = (0..plan.n_models as u32)
                        .find(|m| !obs.iter().any(|o| o.model == *m))
                        .unwrap_or(0);
                    return Err(Error::MissingRecord {
                        epoch: epochs[e],
                        model: missing,
                        sample: samples[s],
                    });
                }
            }
        }

        // membership bits must agree with the plan when sample ids index it
        for (s, &sid) in samples.iter().enumerate() {
            if (sid as usize) < plan.n_samples {
                for obs in &groups[0][s] {
                    if obs.member != plan.is_member(obs.model as usize, sid as usize) {
                        return Err(Error::InvalidArgument(format!(
                            "score log membership for model {}, sample {sid} disagrees with the plan",
                            obs.model
                        )));
                    }
                }
            }
        }

        Ok(ScoreTable {
            epochs,
            samples,
            groups,
        })
    }

    pub fn observations(&self, epoch_idx: usize, sample_idx: usize) -> &[Observation] {
        &self.groups[epoch_idx][sample_idx]
    }

    /// Pooled within-sample ML variances of the in/out groups at one epoch.
    pub fn pooled_variances(&self, epoch_idx: usize) -> Result<PooledVariance> {
        let mut acc = [(0.0f64, 0usize); 2]; // [out, in]
        for obs in &self.groups[epoch_idx] {
            for member in [false, true] {
                let phis: Vec<f64> = obs.iter().filter(|o| o.member == member).map(|o| o.phi).collect();
                if phis.is_empty() {
                    continue;
                }
                let mu = mean(&phis);
                let ssq: f64 = phis.iter().map(|p| (p - mu) * (p - mu)).sum();
                let slot = &mut acc[member as usize];
                slot.0 += ssq;
                slot.1 += phis.len();
            }
        }
        if acc[0].1 == 0 || acc[1].1 == 0 {
            return Err(Error::EmptyPopulation(
                "pooled variance needs observations on both sides".into(),
            ));
        }
        Ok(PooledVariance {
            var_in: acc[1].0 / acc[1].1 as f64,
            var_out: acc[0].0 / acc[0].1 as f64,
        })
    }
}

/// Estimates one sample's state at one epoch straight from a score log.
/// One-off convenience; [`vulnerability_field`] batches the same
/// computation across the whole log.
pub fn estimate_state(
    sample: u32,
    epoch: u32,
    log: &ScoreLog,
    plan: &MembershipPlan,
    cfg: &LiraConfig,
) -> Result<AttackOutcome> {
    let table = ScoreTable::build(log, plan)?;
    let e = table
        .epochs
        .iter()
        .position(|&x| x == epoch)
        .ok_or_else(|| Error::InvalidArgument(format!("epoch {epoch} not in score log")))?;
    let s = table
        .samples
        .iter()
        .position(|&x| x == sample)
        .ok_or_else(|| Error::InvalidArgument(format!("sample {sample} not in score log")))?;
    let pooled = match cfg.variance_mode {
        VarianceMode::Global => Some(table.pooled_variances(e)?),
        VarianceMode::PerSample => None,
    };
    score_observations(table.observations(e, s), cfg, pooled, epoch, sample)
}

/// All trajectories assembled from per-epoch attack states.
#[derive(Debug, Clone, PartialEq)]
pub struct VulnerabilityField {
    pub epochs: Vec<u32>,
    /// One trajectory per pool sample, ascending by sample id.
    pub trajectories: Vec<Trajectory>,
}

impl VulnerabilityField {
    pub fn states_at(&self, epoch_idx: usize) -> Vec<VulnerabilityState> {
        self.trajectories.iter().map(|t| t.states[epoch_idx]).collect()
    }

    pub fn mean_advantage_at(&self, epoch_idx: usize) -> f64 {
        let sum: f64 = self
            .trajectories
            .iter()
            .map(|t| t.states[epoch_idx].advantage())
            .sum();
        sum / self.trajectories.len() as f64
    }

    pub fn final_mean_advantage(&self) -> f64 {
        self.mean_advantage_at(self.epochs.len() - 1)
    }
}

/// Runs the LiRA estimator for every sample at every checkpoint and
/// assembles one trajectory per sample.
pub fn vulnerability_field(
    log: &ScoreLog,
    plan: &MembershipPlan,
    cfg: &LiraConfig,
) -> Result<VulnerabilityField> {
    let table = ScoreTable::build(log, plan)?;
    let mut per_epoch_states: Vec<Vec<VulnerabilityState>> = Vec::with_capacity(table.epochs.len());
    for e in 0..table.epochs.len() {
        let pooled = match cfg.variance_mode {
            VarianceMode::Global => Some(table.pooled_variances(e)?),
            VarianceMode::PerSample => None,
        };
        let states: Result<Vec<VulnerabilityState>> = (0..table.samples.len())
            .into_par_iter()
            .map(|s| {
                score_observations(
                    table.observations(e, s),
                    cfg,
                    pooled,
                    table.epochs[e],
                    table.samples[s],
                )
                .map(|o| o.state)
            })
            .collect();
        per_epoch_states.push(states?);
    }
    assemble_field(table.epochs, &table.samples, per_epoch_states)
}

fn assemble_field(
    epochs: Vec<u32>,
    samples: &[u32],
    per_epoch_states: Vec<Vec<VulnerabilityState>>,
) -> Result<VulnerabilityField> {
    let trajectories: Result<Vec<Trajectory>> = samples
        .iter()
        .enumerate()
        .map(|(s, &sid)| {
            let states: Vec<VulnerabilityState> =
                per_epoch_states.iter().map(|epoch| epoch[s]).collect();
            Trajectory::new(sid, epochs.clone(), states)
        })
        .collect();
    Ok(VulnerabilityField {
        epochs,
        trajectories: trajectories?,
    })
}

// ---------------------------------------------------------------------------
// Shokri shadow-classifier attack
// ---------------------------------------------------------------------------

/// Binary logistic regression used as the per-class attack model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryLogit {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl BinaryLogit {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn prob(&self, x: &[f64]) -> f64 {
        1.0 / (1.0 + (-self.logit(x)).exp())
    }
}

/// One training example for the attack model: the sample's class, the
/// posterior vector sorted descending, and the membership label.
#[derive(Debug, Clone)]
pub struct ShokriExample {
    pub class: u16,
    pub sorted_posterior: Vec<f64>,
    pub member: bool,
}

/// Descending sort of a posterior vector, the attack model's input space.
pub fn sorted_posterior(probs: &[f64]) -> Vec<f64> {
    let mut v = probs.to_vec();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v
}

/// Per-class membership classifiers over sorted posterior vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ShokriAttackModel {
    pub per_class: Vec<BinaryLogit>,
}

impl ShokriAttackModel {
    /// Membership probability for one observation.
    pub fn prob(&self, class: u16, sorted_post: &[f64]) -> f64 {
        self.per_class[class as usize].prob(sorted_post)
    }
}

const SHOKRI_L2: f64 = 1e-3;
const SHOKRI_TOL: f64 = 1e-6;
const SHOKRI_MAX_ITERS: usize = 500;

/// Trains the per-class attack classifiers by Newton iteration on the
/// L2-regularized logistic loss, to gradient tolerance 1e-6 or 500
/// iterations. Deterministic: no random initialization.
pub fn shokri_train(examples: &[ShokriExample], n_classes: usize) -> Result<ShokriAttackModel> {
    if n_classes == 0 {
        return Err(Error::InvalidArgument("n_classes must be positive".into()));
    }
    let mut per_class = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let subset: Vec<&ShokriExample> = examples
            .iter()
            .filter(|e| e.class as usize == class)
            .collect();
        if subset.is_empty()
            || subset.iter().all(|e| e.member)
            || subset.iter().all(|e| !e.member)
        {
            return Err(Error::DegenerateClass { class });
        }
        per_class.push(fit_logit(&subset)?);
    }
    Ok(ShokriAttackModel { per_class })
}

fn fit_logit(examples: &[&ShokriExample]) -> Result<BinaryLogit> {
    let dim = examples[0].sorted_posterior.len();
    if examples.iter().any(|e| e.sorted_posterior.len() != dim) {
        return Err(Error::ShapeMismatch("posterior vector lengths differ".into()));
    }
    let n = examples.len() as f64;
    let d = dim + 1; // bias folded in as the last coordinate
    let mut w = vec![0.0f64; d];

    for _ in 0..SHOKRI_MAX_ITERS {
        // gradient of mean NLL + 0.5 * l2 * |w|^2 and its Hessian
        let mut grad = vec![0.0f64; d];
        let mut hess = vec![0.0f64; d * d];
        for e in examples {
            let logit = w[dim]
                + w[..dim]
                    .iter()
                    .zip(&e.sorted_posterior)
                    .map(|(wi, xi)| wi * xi)
                    .sum::<f64>();
            let p = 1.0 / (1.0 + (-logit).exp());
            let err = p - e.member as u8 as f64;
            let s = p * (1.0 - p);
            let x_at = |i: usize| -> f64 {
                if i == dim {
                    1.0
                } else {
                    e.sorted_posterior[i]
                }
            };
            for i in 0..d {
                grad[i] += err * x_at(i) / n;
                for j in 0..d {
                    hess[i * d + j] += s * x_at(i) * x_at(j) / n;
                }
            }
        }
        for i in 0..d {
            grad[i] += SHOKRI_L2 * w[i];
            hess[i * d + i] += SHOKRI_L2;
        }
        let gnorm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gnorm < SHOKRI_TOL {
            break;
        }
        let step = solve_dense(&mut hess, &mut grad.clone(), d)?;
        for i in 0..d {
            w[i] -= step[i];
            if !w[i].is_finite() {
                return Err(Error::NonFinite("attack model weights".into()));
            }
        }
    }
    Ok(BinaryLogit {
        weights: w[..dim].to_vec(),
        bias: w[dim],
    })
}

/// Gaussian elimination with partial pivoting; consumes its inputs.
pub(crate) fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Result<Vec<f64>> {
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * n + col].abs() < 1e-300 {
            return Err(Error::NonFinite("singular normal equations".into()));
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] / diag;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row * n + k] * x[k];
        }
        x[row] = s / a[row * n + row];
    }
    Ok(x)
}

/// Per-sample states at one epoch under the Shokri attack.
///
/// `posteriors[model][sample]` holds the full probability vectors at that
/// epoch; `classes` the pool's training labels; membership comes from the
/// plan. The attack model is trained on the whole population's
/// observations at that epoch, then applied per model. A model's
/// observation is flagged when the classifier's membership log-odds exceed
/// `threshold`; zero is the plain p > 0.5 rule and positive values give a
/// conservative operating point comparable to a LiRA log-LR cutoff.
pub fn shokri_states_at_epoch(
    epoch: u32,
    posteriors: &[Vec<Vec<f64>>],
    classes: &[u16],
    plan: &MembershipPlan,
    n_classes: usize,
    threshold: f64,
) -> Result<Vec<AttackOutcome>> {
    if posteriors.len() != plan.n_models {
        return Err(Error::ShapeMismatch(format!(
            "posteriors for {} models, plan has {}",
            posteriors.len(),
            plan.n_models
        )));
    }
    let m = classes.len();
    let mut examples = Vec::with_capacity(plan.n_models * m);
    for (model, per_sample) in posteriors.iter().enumerate() {
        if per_sample.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "model {model} scored {} samples, pool holds {m}",
                per_sample.len()
            )));
        }
        for (sample, probs) in per_sample.iter().enumerate() {
            examples.push(ShokriExample {
                class: classes[sample],
                sorted_posterior: sorted_posterior(probs),
                member: plan.is_member(model, sample),
            });
        }
    }
    let attack = shokri_train(&examples, n_classes)?;

    (0..m)
        .into_par_iter()
        .map(|sample| {
            let decisions: Vec<ModelDecision> = (0..plan.n_models)
                .map(|model| {
                    let post = sorted_posterior(&posteriors[model][sample]);
                    let score = attack.per_class[classes[sample] as usize].logit(&post);
                    ModelDecision {
                        model: model as u32,
                        member: plan.is_member(model, sample),
                        flagged: score > threshold,
                        score,
                    }
                })
                .collect();
            let state = state_from_decisions(&decisions)?;
            Ok(AttackOutcome {
                epoch,
                sample: sample as u32,
                decisions,
                state,
            })
        })
        .collect()
}

/// Assembles the full Shokri-attack vulnerability field from per-epoch
/// posterior tables (`posteriors[epoch][model][sample]`).
pub fn shokri_field(
    epochs: &[u32],
    posteriors: &[Vec<Vec<Vec<f64>>>],
    classes: &[u16],
    plan: &MembershipPlan,
    n_classes: usize,
    threshold: f64,
) -> Result<VulnerabilityField> {
    if epochs.len() != posteriors.len() {
        return Err(Error::ShapeMismatch("epoch count vs posterior tables".into()));
    }
    let mut per_epoch_states = Vec::with_capacity(epochs.len());
    for (i, &epoch) in epochs.iter().enumerate() {
        let outcomes =
            shokri_states_at_epoch(epoch, &posteriors[i], classes, plan, n_classes, threshold)?;
        per_epoch_states.push(outcomes.into_iter().map(|o| o.state).collect());
    }
    let samples: Vec<u32> = (0..classes.len() as u32).collect();
    assemble_field(epochs.to_vec(), &samples, per_epoch_states)
}

// ---------------------------------------------------------------------------
// states.jsonl persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct StateRecord {
    epoch: u32,
    sample: u32,
    fpr: f64,
    tpr: f64,
    adv: f64,
}

/// Writes `states.jsonl`: one record per (epoch, sample) with keys
/// `epoch,sample,fpr,tpr,adv`, ordered by (epoch, sample).
pub fn save_states_jsonl(field: &VulnerabilityField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (e, &epoch) in field.epochs.iter().enumerate() {
        for traj in &field.trajectories {
            let s = traj.states[e];
            let rec = StateRecord {
                epoch,
                sample: traj.sample_id,
                fpr: s.fpr,
                tpr: s.tpr,
                adv: s.advantage(),
            };
            serde_json::to_writer(&mut out, &rec)
                .map_err(|e| Error::InvalidArgument(format!("state serialization: {e}")))?;
            out.push(b'\n');
        }
    }
    fs::write(path, &out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads a field persisted by [`save_states_jsonl`].
pub fn load_states_jsonl(path: impl AsRef<Path>) -> Result<VulnerabilityField> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let file = fs::File::open(path).map_err(|e| Error::io(&pstr, e))?;
    let mut by_sample: BTreeMap<u32, BTreeMap<u32, VulnerabilityState>> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&pstr, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StateRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRow {
            path: pstr.clone(),
            row: i + 1,
            reason: e.to_string(),
        })?;
        by_sample
            .entry(rec.sample)
            .or_default()
            .insert(rec.epoch, VulnerabilityState::new(rec.fpr, rec.tpr)?);
    }
    if by_sample.is_empty() {
        return Err(Error::EmptyPopulation(format!("no states in {pstr}")));
    }
    let epochs: Vec<u32> = by_sample.values().next().unwrap().keys().copied().collect();
    let mut trajectories = Vec::with_capacity(by_sample.len());
    for (sid, states) in &by_sample {
        let these: Vec<u32> = states.keys().copied().collect();
        if these != epochs {
            return Err(Error::MalformedFile {
                path: pstr,
                reason: format!("sample {sid} covers different epochs than the first sample"),
            });
        }
        trajectories.push(Trajectory::new(
            *sid,
            epochs.clone(),
            states.values().copied().collect(),
        )?);
    }
    Ok(VulnerabilityField {
        epochs,
        trajectories,
    })
}
