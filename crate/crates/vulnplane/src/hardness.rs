//! Per-sample learning-difficulty metrics and their correlation with
//! membership vulnerability: gradient norms, iteration learned, damped
//! self-influence, and the aleatoric/epistemic split of ensemble
//! predictive entropy.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SamplePool;
use crate::error::{Error, Result};
use crate::nn;
use crate::plane::{self, Trajectory};
use crate::train::{ScoreLog, TrainRun};

/// Per-sample hardness vector. `iteration_learned` is a checkpoint index;
/// None means the sample is never consistently learned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardnessProfile {
    pub sample_id: u32,
    pub grad_norm: f64,
    pub iteration_learned: Option<u32>,
    pub influence: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
}

/// Mean absolute advantage change per interval: L(z) / (T - 1).
pub fn encoding_rate_v_alpha(traj: &Trajectory) -> Result<f64> {
    if traj.len() < 2 {
        return Err(Error::InvalidArgument(
            "encoding rate needs at least 2 checkpoints".into(),
        ));
    }
    Ok(plane::path_length(traj) / (traj.len() - 1) as f64)
}

/// Smallest index t such that the history is correct at every recorded
/// checkpoint from t on; None when the final entry is wrong.
pub fn iteration_learned(history: &[bool]) -> Option<u32> {
    if history.is_empty() || !history[history.len() - 1] {
        return None;
    }
    let mut t = history.len() - 1;
    while t > 0 && history[t - 1] {
        t -= 1;
    }
    Some(t as u32)
}

/// Per-sample correct-majority history over the sample's in-models, one
/// entry per checkpoint epoch (ascending). Majority means strictly more
/// than half of the in-models classify the sample correctly.
pub fn correct_histories(scores: &ScoreLog) -> BTreeMap<u32, Vec<bool>> {
    let epochs = scores.epochs();
    let mut tally: BTreeMap<u32, Vec<(u32, u32)>> = BTreeMap::new(); // sample -> per-epoch (correct, total)
    let epoch_idx: BTreeMap<u32, usize> = epochs.iter().enumerate().map(|(i, &e)| (e, i)).collect();
    for r in &scores.records {
        if r.member != 1 {
            continue;
        }
        let slot = tally
            .entry(r.sample)
            .or_insert_with(|| vec![(0, 0); epochs.len()]);
        let e = epoch_idx[&r.epoch];
        slot[e].0 += r.correct as u32;
        slot[e].1 += 1;
    }
    tally
        .into_iter()
        .map(|(sample, counts)| {
            (
                sample,
                counts.iter().map(|&(c, n)| 2 * c > n).collect(),
            )
        })
        .collect()
}

/// Mean l2 norm of the sample's loss gradient over every recorded
/// checkpoint of every model that trained on it.
pub fn mean_grad_norm(runs: &[TrainRun], pool: &SamplePool, sample_idx: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for run in runs.iter().filter(|r| r.member_bits[sample_idx]) {
        for params in &run.checkpoints {
            let g = nn::per_sample_gradient(params, pool.feature_row(sample_idx), pool.labels[sample_idx])?;
            sum += g.iter().map(|x| x * x).sum::<f64>().sqrt();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyPopulation(format!(
            "sample {sample_idx} has no in-models"
        )));
    }
    Ok(sum / count as f64)
}

// ---------------------------------------------------------------------------
// Influence: damped inverse-Hessian products
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfluenceOptions {
    /// Damping added to the Hessian diagonal.
    pub damping: f64,
    pub cg_max_iters: usize,
    /// Relative residual tolerance.
    pub cg_tol: f64,
    /// Below this parameter count the solve goes dense.
    pub dense_threshold: usize,
}

impl Default for InfluenceOptions {
    fn default() -> Self {
        InfluenceOptions {
            damping: 0.01,
            cg_max_iters: 100,
            cg_tol: 1e-6,
            dense_threshold: 2000,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves (H + damping * I) x = b by conjugate gradient, given only
/// Hessian-vector products. Terminates early on a direction of
/// non-positive curvature, returning the iterate reached so far.
pub fn damped_solve_cg<F>(mut hvp: F, b: &[f64], opts: &InfluenceOptions) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = b.len();
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let apply = |hvp: &mut F, v: &[f64]| -> Result<Vec<f64>> {
        let mut hv = hvp(v)?;
        for (h, vi) in hv.iter_mut().zip(v) {
            *h += opts.damping * vi;
        }
        Ok(hv)
    };

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = b.to_vec();
    let mut rs = dot(&r, &r);
    let mut residual = rs.sqrt() / b_norm;
    for _ in 0..opts.cg_max_iters {
        let ap = apply(&mut hvp, &p)?;
        let p_ap = dot(&p, &ap);
        if p_ap <= 0.0 {
            // non-positive curvature despite damping: stop at this iterate
            return Ok(x);
        }
        let alpha = rs / p_ap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new = dot(&r, &r);
        residual = rs_new.sqrt() / b_norm;
        if residual <= opts.cg_tol {
            return Ok(x);
        }
        let beta = rs_new / rs;
        rs = rs_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Err(Error::CgNonConvergence {
        residual,
        iterations: opts.cg_max_iters,
        tol: opts.cg_tol,
    })
}

/// Dense route: materializes H column by column through the product
/// operator and solves the damped system by elimination.
pub fn damped_solve_dense<F>(mut hvp: F, b: &[f64], damping: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = b.len();
    let mut a = vec![0.0f64; n * n];
    let mut unit = vec![0.0f64; n];
    for col in 0..n {
        unit[col] = 1.0;
        let h_col = hvp(&unit)?;
        unit[col] = 0.0;
        for row in 0..n {
            a[row * n + col] = h_col[row];
        }
        a[col * n + col] += damping;
    }
    let mut rhs = b.to_vec();
    crate::attack::solve_dense(&mut a, &mut rhs, n)
}

/// g' (H + damping I)^{-1} g for an arbitrary product operator.
pub fn self_influence<F>(hvp: F, g: &[f64], opts: &InfluenceOptions) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if g.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    let x = if g.len() < opts.dense_threshold {
        damped_solve_dense(hvp, g, opts.damping)?
    } else {
        damped_solve_cg(hvp, g, opts)?
    };
    Ok(dot(g, &x))
}

/// Self-influence of one pool sample on one run: the loss gradient at the
/// final checkpoint against the Hessian of the run's mean training loss.
pub fn influence(
    run: &TrainRun,
    pool: &SamplePool,
    sample_idx: usize,
    opts: &InfluenceOptions,
) -> Result<f64> {
    if opts.damping <= 0.0 {
        return Err(Error::InvalidArgument("influence damping must be positive".into()));
    }
    let params = run.final_params();
    let g = nn::per_sample_gradient(params, pool.feature_row(sample_idx), pool.labels[sample_idx])?;
    let members = run.member_samples();
    if members.is_empty() {
        return Err(Error::EmptyPopulation(format!(
            "run {} trained on no samples",
            run.model_id
        )));
    }
    let batch: Vec<(&[f64], u16)> = members
        .iter()
        .map(|&s| (pool.feature_row(s), pool.labels[s]))
        .collect();
    self_influence(
        |v| nn::hessian_vector_product(params, &batch, v),
        &g,
        opts,
    )
}

// ---------------------------------------------------------------------------
// Predictive uncertainty
// ---------------------------------------------------------------------------

/// Shannon entropy in nats; zero probabilities contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum()
}

/// Splits ensemble predictive entropy into its aleatoric (mean member
/// entropy) and epistemic (mutual information) parts. The identity
/// total = aleatoric + epistemic holds up to the non-negativity floor.
pub fn uncertainty_decomposition(ensemble: &[Vec<f64>]) -> Result<(f64, f64)> {
    if ensemble.len() < 2 {
        return Err(Error::InvalidArgument(
            "uncertainty decomposition needs at least 2 ensemble members".into(),
        ));
    }
    let c = ensemble[0].len();
    if ensemble.iter().any(|p| p.len() != c) {
        return Err(Error::ShapeMismatch("ensemble member dimensions differ".into()));
    }
    let k = ensemble.len() as f64;
    let mut mean = vec![0.0; c];
    let mut aleatoric = 0.0;
    for p in ensemble {
        for (m, &pi) in mean.iter_mut().zip(p) {
            *m += pi / k;
        }
        aleatoric += entropy(p) / k;
    }
    let total = entropy(&mean);
    let epistemic = (total - aleatoric).max(0.0);
    Ok((aleatoric, epistemic))
}

/// Posterior vectors of the sample's out-models at one checkpoint epoch,
/// the ensemble behind the epistemic metric.
pub fn out_model_posteriors(
    runs: &[TrainRun],
    pool: &SamplePool,
    sample_idx: usize,
    epoch: u32,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for run in runs.iter().filter(|r| !r.member_bits[sample_idx]) {
        let params = run.params_at(epoch).ok_or_else(|| Error::InvalidArgument(format!(
            "run {} has no checkpoint at epoch {epoch}",
            run.model_id
        )))?;
        out.push(nn::forward(params, pool.feature_row(sample_idx))?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Correlation analysis
// ---------------------------------------------------------------------------

/// Product-moment correlation. None flags a constant input instead of NaN.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "pearson inputs of length {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::InvalidArgument(
            "pearson needs at least 3 observations".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (xi, yi) in x.iter().zip(y) {
        let dx = xi - mx;
        let dy = yi - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

pub const HARDNESS_METRICS: [&str; 5] = [
    "grad_norm",
    "iteration_learned",
    "influence",
    "aleatoric",
    "epistemic",
];

pub const CORRELATION_TARGETS: [&str; 2] = ["alpha", "v_alpha"];
pub const CORRELATION_SUBSETS: [&str; 3] = ["all", "alpha_pos", "alpha_nonpos"];

/// One cell of the hardness-vs-vulnerability table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub metric: String,
    pub target: String,
    pub subset: String,
    /// None flags an undefined correlation (subset too small or constant).
    pub r: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub entries: Vec<CorrelationEntry>,
}

impl CorrelationTable {
    pub fn get(&self, metric: &str, target: &str, subset: &str) -> Option<&CorrelationEntry> {
        self.entries
            .iter()
            .find(|e| e.metric == metric && e.target == target && e.subset == subset)
    }
}

/// Correlates every hardness metric with final advantage and encoding
/// rate, overall and conditioned on final vulnerability status. Samples
/// never learned rank after every finite checkpoint (index T + 1).
pub fn correlation_table(
    profiles: &[HardnessProfile],
    trajectories: &[Trajectory],
    theta_vuln: f64,
) -> Result<CorrelationTable> {
    if profiles.is_empty() || profiles.len() != trajectories.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} profiles vs {} trajectories",
            profiles.len(),
            trajectories.len()
        )));
    }
    let by_id: BTreeMap<u32, &Trajectory> =
        trajectories.iter().map(|t| (t.sample_id, t)).collect();
    let n_checkpoints = trajectories[0].len();
    let never_value = (n_checkpoints + 1) as f64;

    let mut alphas = Vec::with_capacity(profiles.len());
    let mut v_alphas = Vec::with_capacity(profiles.len());
    for p in profiles {
        let traj = by_id.get(&p.sample_id).ok_or_else(|| {
            Error::ShapeMismatch(format!("no trajectory for sample {}", p.sample_id))
        })?;
        alphas.push(traj.final_advantage());
        v_alphas.push(encoding_rate_v_alpha(traj)?);
    }

    let metric_values = |name: &str| -> Vec<f64> {
        profiles
            .iter()
            .map(|p| match name {
                "grad_norm" => p.grad_norm,
                "iteration_learned" => p
                    .iteration_learned
                    .map_or(never_value, |t| t as f64),
                "influence" => p.influence,
                "aleatoric" => p.aleatoric,
                "epistemic" => p.epistemic,
                _ => unreachable!("unknown metric {name}"),
            })
            .collect()
    };

    let subset_indices = |name: &str| -> Vec<usize> {
        (0..profiles.len())
            .filter(|&i| match name {
                "all" => true,
                "alpha_pos" => alphas[i] > theta_vuln,
                "alpha_nonpos" => alphas[i] <= theta_vuln,
                _ => unreachable!("unknown subset {name}"),
            })
            .collect()
    };

    let mut entries = Vec::new();
    for metric in HARDNESS_METRICS {
        let values = metric_values(metric);
        for target in CORRELATION_TARGETS {
            let target_values: &[f64] = if target == "alpha" { &alphas } else { &v_alphas };
            for subset in CORRELATION_SUBSETS {
                let idx = subset_indices(subset);
                let r = if idx.len() < 3 {
                    None
                } else {
                    let xs: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
                    let ys: Vec<f64> = idx.iter().map(|&i| target_values[i]).collect();
                    pearson(&xs, &ys)?
                };
                entries.push(CorrelationEntry {
                    metric: metric.into(),
                    target: target.into(),
                    subset: subset.into(),
                    r,
                    n: idx.len(),
                });
            }
        }
    }
    Ok(CorrelationTable { entries })
}

// ---------------------------------------------------------------------------
// Batch profile computation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct HardnessConfig {
    pub influence: InfluenceOptions,
    /// Checkpoint epoch for the uncertainty ensemble; None means the final
    /// checkpoint.
    pub uncertainty_epoch: Option<u32>,
}


/// Computes the full hardness vector for every pool sample, in parallel.
/// Influence is taken on the sample's lowest-id in-model; the uncertainty
/// ensemble is the sample's out-models.
pub fn hardness_profiles(
    runs: &[TrainRun],
    pool: &SamplePool,
    scores: &ScoreLog,
    cfg: &HardnessConfig,
) -> Result<Vec<HardnessProfile>> {
    if runs.is_empty() {
        return Err(Error::EmptyPopulation("no runs".into()));
    }
    let final_epoch = *runs[0]
        .checkpoint_epochs
        .last()
        .ok_or_else(|| Error::EmptyPopulation("run has no checkpoints".into()))?;
    let uncertainty_epoch = cfg.uncertainty_epoch.unwrap_or(final_epoch);
    let histories = correct_histories(scores);

    (0..pool.len())
        .into_par_iter()
        .map(|s| {
            let sample_id = pool.sample_ids[s];
            let grad_norm = mean_grad_norm(runs, pool, s)?;
            let learned = histories
                .get(&sample_id)
                .map(|h| iteration_learned(h))
                .unwrap_or(None);
            let first_in = runs
                .iter()
                .find(|r| r.member_bits[s])
                .ok_or_else(|| Error::EmptyPopulation(format!("sample {sample_id} has no in-models")))?;
            let infl = influence(first_in, pool, s, &cfg.influence)?;
            let ensemble = out_model_posteriors(runs, pool, s, uncertainty_epoch)?;
            let (aleatoric, epistemic) = uncertainty_decomposition(&ensemble)?;
            Ok(HardnessProfile {
                sample_id,
                grad_norm,
                iteration_learned: learned,
                influence: infl,
                aleatoric,
                epistemic,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Tabular outputs
// ---------------------------------------------------------------------------

/// Writes `hardness.csv`: sample, grad_norm, iteration_learned, influence,
/// aleatoric, epistemic. A sample never learned shows as `never`.
pub fn save_hardness_csv(profiles: &[HardnessProfile], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("sample,grad_norm,iteration_learned,influence,aleatoric,epistemic\n");
    for p in profiles {
        let learned = p
            .iteration_learned
            .map_or_else(|| "never".to_string(), |t| t.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.sample_id, p.grad_norm, learned, p.influence, p.aleatoric, p.epistemic
        ));
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_hardness_csv(path: impl AsRef<Path>) -> Result<Vec<HardnessProfile>> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(&pstr, e))?;
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    if header != "sample,grad_norm,iteration_learned,influence,aleatoric,epistemic" {
        return Err(Error::MalformedFile {
            path: pstr,
            reason: format!("unexpected header `{header}`"),
        });
    }
    let mut profiles = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row = lineno + 1;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::MalformedRow {
                path: pstr.clone(),
                row,
                reason: format!("expected 6 fields, got {}", f.len()),
            });
        }
        let parse = |v: &str, what: &str| -> Result<f64> {
            v.parse().map_err(|_| Error::MalformedRow {
                path: pstr.clone(),
                row,
                reason: format!("bad {what} `{v}`"),
            })
        };
        profiles.push(HardnessProfile {
            sample_id: f[0].parse().map_err(|_| Error::MalformedRow {
                path: pstr.clone(),
                row,
                reason: format!("bad sample id `{}`", f[0]),
            })?,
            grad_norm: parse(f[1], "grad_norm")?,
            iteration_learned: if f[2] == "never" {
                None
            } else {
                Some(f[2].parse().map_err(|_| Error::MalformedRow {
                    path: pstr.clone(),
                    row,
                    reason: format!("bad iteration_learned `{}`", f[2]),
                })?)
            },
            influence: parse(f[3], "influence")?,
            aleatoric: parse(f[4], "aleatoric")?,
            epistemic: parse(f[5], "epistemic")?,
        });
    }
    Ok(profiles)
}

/// Writes `correlations.csv`: metric, target, subset, r, n; undefined
/// correlations carry the literal `undefined`.
pub fn save_correlations_csv(table: &CorrelationTable, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("metric,target,subset,r,n\n");
    for e in &table.entries {
        let r = e.r.map_or_else(|| "undefined".to_string(), |v| v.to_string());
        out.push_str(&format!("{},{},{},{},{}\n", e.metric, e.target, e.subset, r, e.n));
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
