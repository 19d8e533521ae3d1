//! Population-level dynamics over assembled trajectories: empirical
//! transition matrices on the 3×3 grid, center-of-mass motion, spatial
//! entropy, density-based clustering, early-exposure curves and
//! high/low-travel stratification.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::{self, GridCell, PlaneGrid, Trajectory, VulnerabilityState};

/// Transition grid is fixed at 3×3; cells are flattened TPR-band major.
pub const TRANSITION_CELLS: usize = 9;

/// Empirical one-interval transition matrix between the nine grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub epoch_from: u32,
    pub counts: [[u64; TRANSITION_CELLS]; TRANSITION_CELLS],
    /// Row-normalized counts; all-zero rows stay all-zero.
    pub probs: [[f64; TRANSITION_CELLS]; TRANSITION_CELLS],
    /// Whether any sample occupied the row's cell at `epoch_from`.
    pub occupied: [bool; TRANSITION_CELLS],
}

impl TransitionMatrix {
    pub fn total_count(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Probability entry by (from, to) cells; None when the from-row is
    /// unoccupied.
    pub fn prob(&self, from: GridCell, to: GridCell) -> Option<f64> {
        let grid = PlaneGrid::transition();
        let f = grid.flat_index(from);
        if !self.occupied[f] {
            return None;
        }
        Some(self.probs[f][grid.flat_index(to)])
    }
}

/// Robust cell: low TPR, low FPR.
pub const S11: GridCell = GridCell { tpr_band: 1, fpr_band: 1 };
/// Highly vulnerable cell: high TPR, low FPR.
pub const S31: GridCell = GridCell { tpr_band: 3, fpr_band: 1 };

/// Counts grid-cell movements between two aligned state snapshots.
pub fn transition_matrix(
    epoch_from: u32,
    states_t: &[VulnerabilityState],
    states_t1: &[VulnerabilityState],
) -> Result<TransitionMatrix> {
    if states_t.len() != states_t1.len() {
        return Err(Error::ShapeMismatch(format!(
            "transition snapshots of length {} vs {}",
            states_t.len(),
            states_t1.len()
        )));
    }
    let grid = PlaneGrid::transition();
    let mut counts = [[0u64; TRANSITION_CELLS]; TRANSITION_CELLS];
    for (a, b) in states_t.iter().zip(states_t1) {
        let from = grid.flat_index(plane::cell_of(*a, grid));
        let to = grid.flat_index(plane::cell_of(*b, grid));
        counts[from][to] += 1;
    }
    let mut probs = [[0.0; TRANSITION_CELLS]; TRANSITION_CELLS];
    let mut occupied = [false; TRANSITION_CELLS];
    for r in 0..TRANSITION_CELLS {
        let row_sum: u64 = counts[r].iter().sum();
        if row_sum > 0 {
            occupied[r] = true;
            for c in 0..TRANSITION_CELLS {
                probs[r][c] = counts[r][c] as f64 / row_sum as f64;
            }
        }
    }
    Ok(TransitionMatrix {
        epoch_from,
        counts,
        probs,
        occupied,
    })
}

fn check_aligned(trajectories: &[Trajectory]) -> Result<&[u32]> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::EmptyPopulation("no trajectories".into()))?;
    for t in trajectories {
        if t.checkpoints != first.checkpoints {
            return Err(Error::ShapeMismatch(format!(
                "trajectory for sample {} covers different checkpoints",
                t.sample_id
            )));
        }
    }
    Ok(&first.checkpoints)
}

fn states_at(trajectories: &[Trajectory], idx: usize) -> Vec<VulnerabilityState> {
    trajectories.iter().map(|t| t.states[idx]).collect()
}

/// One transition matrix per consecutive checkpoint pair.
pub fn transition_series(trajectories: &[Trajectory]) -> Result<Vec<TransitionMatrix>> {
    let checkpoints = check_aligned(trajectories)?;
    if checkpoints.len() < 2 {
        return Err(Error::InvalidArgument(
            "transition series needs at least 2 checkpoints".into(),
        ));
    }
    (0..checkpoints.len() - 1)
        .map(|i| {
            transition_matrix(
                checkpoints[i],
                &states_at(trajectories, i),
                &states_at(trajectories, i + 1),
            )
        })
        .collect()
}

/// The robust-to-vulnerable entry a_{11,31} per interval; None flags an
/// unoccupied robust cell rather than a zero probability.
pub fn robust_to_vulnerable_series(trajectories: &[Trajectory]) -> Result<Vec<Option<f64>>> {
    Ok(transition_series(trajectories)?
        .iter()
        .map(|m| m.prob(S11, S31))
        .collect())
}

/// Largest observed a_{11,31}; None when the robust cell is never occupied.
pub fn peak_robust_to_vulnerable(trajectories: &[Trajectory]) -> Result<Option<f64>> {
    Ok(robust_to_vulnerable_series(trajectories)?
        .into_iter()
        .flatten()
        .fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |a| a.max(p)))))
}

// ---------------------------------------------------------------------------
// Motion metrics
// ---------------------------------------------------------------------------

/// Per-checkpoint mean (fpr, tpr) of the population.
pub fn com_series(trajectories: &[Trajectory]) -> Result<Vec<[f64; 2]>> {
    let checkpoints = check_aligned(trajectories)?;
    let m = trajectories.len() as f64;
    Ok((0..checkpoints.len())
        .map(|i| {
            let (mut f, mut t) = (0.0, 0.0);
            for traj in trajectories {
                f += traj.states[i].fpr;
                t += traj.states[i].tpr;
            }
            [f / m, t / m]
        })
        .collect())
}

/// Cumulative path length of the center of mass.
pub fn com_displacement(series: &[[f64; 2]]) -> f64 {
    series
        .windows(2)
        .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
        .sum()
}

/// Which trajectories enter a speed average.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpeedFilter {
    All,
    /// Keep samples whose final advantage exceeds the threshold.
    FinalAdvantageAbove(f64),
}

impl SpeedFilter {
    fn keep(&self, traj: &Trajectory) -> bool {
        match self {
            SpeedFilter::All => true,
            SpeedFilter::FinalAdvantageAbove(theta) => traj.final_advantage() > *theta,
        }
    }
}

/// Mean velocity magnitude over all (sample, interval) pairs passing the
/// filter; None when the filter keeps nothing.
pub fn mean_encoding_speed(
    trajectories: &[Trajectory],
    filter: SpeedFilter,
) -> Result<Option<f64>> {
    let checkpoints = check_aligned(trajectories)?;
    if checkpoints.len() < 2 {
        return Err(Error::InvalidArgument(
            "speed needs at least 2 checkpoints".into(),
        ));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for traj in trajectories.iter().filter(|t| filter.keep(t)) {
        for t in 0..traj.len() - 1 {
            sum += plane::velocity(traj, t)?.speed();
            count += 1;
        }
    }
    if count == 0 {
        return Ok(None);
    }
    Ok(Some(sum / count as f64))
}

/// Dominant axis of the CoM velocity field, in radians in (-pi, pi].
///
/// The principal eigenvector of the velocity covariance is sign-oriented to
/// have a non-negative dot product with the mean velocity. A degenerate
/// covariance falls back to the mean-velocity angle; if that is zero too
/// the angle is undefined (None).
pub fn directional_angle(com: &[[f64; 2]]) -> Result<Option<f64>> {
    if com.len() < 3 {
        return Err(Error::InvalidArgument(
            "directional angle needs at least 2 velocity vectors".into(),
        ));
    }
    let vels: Vec<[f64; 2]> = com
        .windows(2)
        .map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1]])
        .collect();
    let k = vels.len() as f64;
    let mean = vels.iter().fold([0.0, 0.0], |m, v| [m[0] + v[0] / k, m[1] + v[1] / k]);
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for v in &vels {
        let dx = v[0] - mean[0];
        let dy = v[1] - mean[1];
        a += dx * dx / k;
        b += dx * dy / k;
        c += dy * dy / k;
    }

    let mean_norm = mean[0].hypot(mean[1]);
    if a + c < 1e-18 {
        // no spread in the velocity field
        if mean_norm == 0.0 {
            return Ok(None);
        }
        return Ok(Some(mean[1].atan2(mean[0])));
    }

    let lambda = 0.5 * (a + c + ((a - c) * (a - c) + 4.0 * b * b).sqrt());
    let mut v = if b.abs() > 1e-300 {
        [b, lambda - a]
    } else if a >= c {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    };
    let norm = v[0].hypot(v[1]);
    v = [v[0] / norm, v[1] / norm];

    let dot = v[0] * mean[0] + v[1] * mean[1];
    if dot < 0.0 {
        v = [-v[0], -v[1]];
    } else if dot == 0.0 {
        // orthogonal to the drift: orient upward, then rightward
        if v[1] < 0.0 || (v[1] == 0.0 && v[0] < 0.0) {
            v = [-v[0], -v[1]];
        }
    }
    Ok(Some(v[1].atan2(v[0])))
}

// ---------------------------------------------------------------------------
// Information metrics
// ---------------------------------------------------------------------------

/// Shannon entropy (nats) of the grid-cell occupancy histogram.
pub fn spatial_entropy(states: &[VulnerabilityState], grid: PlaneGrid) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::EmptyPopulation("entropy of an empty snapshot".into()));
    }
    let mut counts = vec![0u64; grid.cell_count()];
    for s in states {
        counts[grid.flat_index(plane::cell_of(*s, grid))] += 1;
    }
    let n = states.len() as f64;
    let mut h = 0.0;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * p.ln();
        }
    }
    Ok(h)
}

/// Entropy per checkpoint on the given grid.
pub fn entropy_series(trajectories: &[Trajectory], grid: PlaneGrid) -> Result<Vec<f64>> {
    let checkpoints = check_aligned(trajectories)?;
    (0..checkpoints.len())
        .map(|i| spatial_entropy(&states_at(trajectories, i), grid))
        .collect()
}

// ---------------------------------------------------------------------------
// Clustering metrics (DBSCAN)
// ---------------------------------------------------------------------------

/// Cluster label per point: None is noise.
pub type ClusterLabels = Vec<Option<usize>>;

/// DBSCAN on plane coordinates with Euclidean distance (d <= eps reaches).
/// Core points need at least `min_pts` neighbors including themselves.
/// Points are visited in index order, which fixes the labeling.
pub fn dbscan(points: &[[f64; 2]], eps: f64, min_pts: usize) -> Result<ClusterLabels> {
    if eps <= 0.0 || min_pts == 0 {
        return Err(Error::InvalidArgument(
            "dbscan needs eps > 0 and min_pts >= 1".into(),
        ));
    }
    // bin points into eps-sized cells so neighbor queries scan 3x3 bins
    let mut bins: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let key = |p: &[f64; 2]| ((p[0] / eps).floor() as i64, (p[1] / eps).floor() as i64);
    for (i, p) in points.iter().enumerate() {
        bins.entry(key(p)).or_default().push(i);
    }
    let eps2 = eps * eps;
    let neighbors = |i: usize| -> Vec<usize> {
        let (bx, by) = key(&points[i]);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(cand) = bins.get(&(bx + dx, by + dy)) {
                    for &j in cand {
                        let ddx = points[i][0] - points[j][0];
                        let ddy = points[i][1] - points[j][1];
                        if ddx * ddx + ddy * ddy <= eps2 {
                            out.push(j);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    };

    let mut labels: ClusterLabels = vec![None; points.len()];
    let mut visited = vec![false; points.len()];
    let mut next_cluster = 0usize;
    for i in 0..points.len() {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let nbrs = neighbors(i);
        if nbrs.len() < min_pts {
            continue; // noise unless some core point reaches it later
        }
        let cluster = next_cluster;
        next_cluster += 1;
        labels[i] = Some(cluster);
        let mut queue: Vec<usize> = nbrs;
        let mut qi = 0;
        while qi < queue.len() {
            let j = queue[qi];
            qi += 1;
            if labels[j].is_none() {
                labels[j] = Some(cluster); // border or core of this cluster
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            let jn = neighbors(j);
            if jn.len() >= min_pts {
                queue.extend(jn);
            }
        }
    }
    Ok(labels)
}

/// Number of clusters (noise excluded) in a labeling.
pub fn count_clusters(labels: &ClusterLabels) -> usize {
    let mut ids: Vec<usize> = labels.iter().flatten().copied().collect();
    ids.sort_unstable();
    ids.dedup();
    ids.len()
}

/// DBSCAN cluster count per checkpoint.
pub fn cluster_counts(
    trajectories: &[Trajectory],
    eps: f64,
    min_pts: usize,
) -> Result<Vec<usize>> {
    let checkpoints = check_aligned(trajectories)?;
    (0..checkpoints.len())
        .map(|i| {
            let pts: Vec<[f64; 2]> = trajectories
                .iter()
                .map(|t| [t.states[i].fpr, t.states[i].tpr])
                .collect();
            Ok(count_clusters(&dbscan(&pts, eps, min_pts)?))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Early exposure and travel stratification
// ---------------------------------------------------------------------------

/// How many samples are flagged high-risk at each checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetRule {
    /// Flag exactly |V| samples, the size of the final vulnerable set.
    VulnerableCount,
    /// Flag a fixed fraction of the pool.
    Fraction(f64),
}

/// Fraction of the final vulnerable population already flagged at each
/// checkpoint when ranking by prefix path length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureCurve {
    pub checkpoints: Vec<u32>,
    pub coverage: Vec<f64>,
    pub vulnerable_set_size: usize,
    pub flag_budget: usize,
}

/// At each checkpoint t, flags the `budget` samples with the largest
/// prefix path length (ties by sample id) and measures what fraction of
/// the final vulnerable set V = {z : alpha_T(z) > theta} they cover.
pub fn exposure_curve(
    trajectories: &[Trajectory],
    theta_vuln: f64,
    budget_rule: BudgetRule,
) -> Result<ExposureCurve> {
    let checkpoints = check_aligned(trajectories)?.to_vec();
    if checkpoints.len() < 2 {
        return Err(Error::InvalidArgument(
            "exposure curve needs at least 2 checkpoints".into(),
        ));
    }
    let vulnerable: Vec<u32> = trajectories
        .iter()
        .filter(|t| t.final_advantage() > theta_vuln)
        .map(|t| t.sample_id)
        .collect();
    if vulnerable.is_empty() {
        return Err(Error::EmptyVulnerableSet);
    }
    let budget = match budget_rule {
        BudgetRule::VulnerableCount => vulnerable.len(),
        BudgetRule::Fraction(q) => {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::InvalidArgument("budget fraction outside [0,1]".into()));
            }
            ((q * trajectories.len() as f64).round() as usize).max(1)
        }
    };
    let vulnerable_set: std::collections::BTreeSet<u32> = vulnerable.iter().copied().collect();

    let mut coverage = Vec::with_capacity(checkpoints.len());
    for t in 0..checkpoints.len() {
        let mut ranked: Vec<(f64, u32)> = trajectories
            .iter()
            .map(|traj| Ok((plane::prefix_path_length(traj, t)?, traj.sample_id)))
            .collect::<Result<_>>()?;
        // longest first, ties by ascending sample id
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let flagged = ranked.iter().take(budget);
        let hit = flagged.filter(|(_, id)| vulnerable_set.contains(id)).count();
        coverage.push(hit as f64 / vulnerable_set.len() as f64);
    }
    Ok(ExposureCurve {
        checkpoints,
        coverage,
        vulnerable_set_size: vulnerable_set.len(),
        flag_budget: budget,
    })
}

/// Top-q and bottom-q sample ids by total vulnerability path length, each
/// sorted ascending by id; deterministic id-ordered split under ties.
pub fn travel_stratification(
    trajectories: &[Trajectory],
    q: f64,
) -> Result<(Vec<u32>, Vec<u32>)> {
    if !(0.0..0.5).contains(&q) || q == 0.0 {
        return Err(Error::InvalidArgument(format!("quantile {q} outside (0, 0.5)")));
    }
    let m = trajectories.len();
    if (m as f64) * q < 2.0 {
        return Err(Error::InvalidArgument(format!(
            "population {m} smaller than 2/q = {}",
            2.0 / q
        )));
    }
    let k = (q * m as f64).floor() as usize;
    let mut ranked: Vec<(f64, u32)> = trajectories
        .iter()
        .map(|t| (plane::path_length(t), t.sample_id))
        .collect();
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut low: Vec<u32> = ranked[..k].iter().map(|&(_, id)| id).collect();
    let mut high: Vec<u32> = ranked[m - k..].iter().map(|&(_, id)| id).collect();
    low.sort_unstable();
    high.sort_unstable();
    Ok((high, low))
}

// ---------------------------------------------------------------------------
// Population summary
// ---------------------------------------------------------------------------

/// Aggregate motion, information and clustering metrics for one run;
/// serialized as `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSummary {
    pub com_series: Vec<[f64; 2]>,
    pub com_displacement: f64,
    pub mean_speed: f64,
    /// Speed over samples with final advantage above the vulnerable
    /// threshold; null when that subset is empty.
    pub mean_speed_vulnerable: Option<f64>,
    /// Radians; null when the CoM never moves.
    pub directional_angle: Option<f64>,
    pub entropy_series: Vec<f64>,
    pub delta_entropy: f64,
    pub cluster_counts: Vec<usize>,
    pub avg_clusters: f64,
    pub delta_clusters: i64,
}

/// Knobs for [`population_summary`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryConfig {
    pub entropy_resolution: u32,
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
    pub theta_vuln: f64,
}

impl Default for SummaryConfig {
    fn default() -> Self {
        SummaryConfig {
            entropy_resolution: 30,
            dbscan_eps: 0.02,
            dbscan_min_pts: 5,
            theta_vuln: 0.0,
        }
    }
}

pub fn population_summary(
    trajectories: &[Trajectory],
    cfg: &SummaryConfig,
) -> Result<PopulationSummary> {
    let com = com_series(trajectories)?;
    let entropy_grid = PlaneGrid::new(cfg.entropy_resolution)?;
    let entropy = entropy_series(trajectories, entropy_grid)?;
    let clusters = cluster_counts(trajectories, cfg.dbscan_eps, cfg.dbscan_min_pts)?;
    let mean_speed = mean_encoding_speed(trajectories, SpeedFilter::All)?
        .ok_or_else(|| Error::EmptyPopulation("speed over empty population".into()))?;
    let mean_speed_vulnerable = mean_encoding_speed(
        trajectories,
        SpeedFilter::FinalAdvantageAbove(cfg.theta_vuln),
    )?;
    let directional = directional_angle(&com)?;
    Ok(PopulationSummary {
        com_displacement: com_displacement(&com),
        directional_angle: directional,
        delta_entropy: entropy[entropy.len() - 1] - entropy[0],
        avg_clusters: clusters.iter().sum::<usize>() as f64 / clusters.len() as f64,
        delta_clusters: clusters[clusters.len() - 1] as i64 - clusters[0] as i64,
        com_series: com,
        mean_speed,
        mean_speed_vulnerable,
        entropy_series: entropy,
        cluster_counts: clusters,
    })
}

// ---------------------------------------------------------------------------
// Tabular outputs
// ---------------------------------------------------------------------------

fn cell_name(flat: usize) -> String {
    format!("S{}{}", flat / 3 + 1, flat % 3 + 1)
}

/// Writes `transitions.csv`: epoch_from, from_cell, to_cell, count, prob;
/// only observed transitions appear.
pub fn save_transitions_csv(series: &[TransitionMatrix], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("epoch_from,from_cell,to_cell,count,prob\n");
    for m in series {
        for from in 0..TRANSITION_CELLS {
            for to in 0..TRANSITION_CELLS {
                if m.counts[from][to] > 0 {
                    out.push_str(&format!(
                        "{},{},{},{},{}\n",
                        m.epoch_from,
                        cell_name(from),
                        cell_name(to),
                        m.counts[from][to],
                        m.probs[from][to]
                    ));
                }
            }
        }
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes `exposure.csv`: epoch, coverage.
pub fn save_exposure_csv(curve: &ExposureCurve, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("epoch,coverage\n");
    for (e, c) in curve.checkpoints.iter().zip(&curve.coverage) {
        out.push_str(&format!("{e},{c}\n"));
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes `clusters.csv`: epoch, clusters.
pub fn save_clusters_csv(
    checkpoints: &[u32],
    counts: &[usize],
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut out = String::from("epoch,clusters\n");
    for (e, k) in checkpoints.iter().zip(counts) {
        out.push_str(&format!("{e},{k}\n"));
    }
    let path = path.as_ref();
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes `metrics.json`.
pub fn save_metrics_json(summary: &PopulationSummary, path: impl AsRef<Path>) -> Result<()> {
    let json = serde_json::to_vec_pretty(summary)
        .map_err(|e| Error::InvalidArgument(format!("metrics serialization: {e}")))?;
    let path = path.as_ref();
    fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_metrics_json(path: impl AsRef<Path>) -> Result<PopulationSummary> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}
