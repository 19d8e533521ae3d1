//! The vulnerability plane: per-sample (FPR, TPR) states, trajectories and
//! the elementary per-sample dynamic quantities defined on them.
//!
//! A sample's vulnerability state is a point in the unit square with the
//! false positive rate on the x axis and the true positive rate on the y
//! axis. The diagonal FPR = TPR is the non-vulnerable locus: an attack that
//! flags members and non-members at the same rate has no advantage there.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sample's (FPR, TPR) coordinate at one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityState {
    pub fpr: f64,
    pub tpr: f64,
}

impl VulnerabilityState {
    /// Builds a state, checking both coordinates lie in [0, 1].
    pub fn new(fpr: f64, tpr: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fpr) || !(0.0..=1.0).contains(&tpr) {
            return Err(Error::InvalidArgument(format!(
                "state ({fpr}, {tpr}) outside the unit square"
            )));
        }
        Ok(VulnerabilityState { fpr, tpr })
    }

    /// Membership advantage of this state: TPR − FPR, in [−1, 1].
    pub fn advantage(&self) -> f64 {
        self.tpr - self.fpr
    }
}

/// Membership advantage of a state; TPR − FPR.
pub fn advantage(state: VulnerabilityState) -> f64 {
    state.advantage()
}

/// Per-interval state change (discrete derivative of a trajectory).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Velocity {
    pub dfpr: f64,
    pub dtpr: f64,
}

impl Velocity {
    /// Euclidean magnitude of the velocity vector.
    pub fn speed(&self) -> f64 {
        self.dfpr.hypot(self.dtpr)
    }
}

/// A sample's sequence of vulnerability states across recorded checkpoints.
///
/// States are stored densely, one per recorded checkpoint; gaps are an
/// ingestion error, never interpolated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub sample_id: u32,
    pub checkpoints: Vec<u32>,
    pub states: Vec<VulnerabilityState>,
}

impl Trajectory {
    /// Builds a trajectory, validating that it is non-empty, that the
    /// checkpoint indices strictly increase, and that lengths agree.
    pub fn new(sample_id: u32, checkpoints: Vec<u32>, states: Vec<VulnerabilityState>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "trajectory for sample {sample_id} has no states"
            )));
        }
        if checkpoints.len() != states.len() {
            return Err(Error::InvalidArgument(format!(
                "trajectory for sample {sample_id}: {} checkpoints vs {} states",
                checkpoints.len(),
                states.len()
            )));
        }
        if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "trajectory for sample {sample_id}: checkpoints not strictly increasing"
            )));
        }
        Ok(Trajectory {
            sample_id,
            checkpoints,
            states,
        })
    }

    /// Number of recorded checkpoints.
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Advantage sequence alpha_t = TPR_t − FPR_t along the trajectory.
    pub fn advantages(&self) -> impl Iterator<Item = f64> + '_ {
        self.states.iter().map(|s| s.advantage())
    }

    /// Advantage at the final recorded checkpoint.
    pub fn final_advantage(&self) -> f64 {
        self.states[self.states.len() - 1].advantage()
    }
}

/// Velocity of a trajectory over the interval starting at checkpoint `t`.
///
/// Errors when `t` addresses the last checkpoint (no following state).
pub fn velocity(traj: &Trajectory, t: usize) -> Result<Velocity> {
    if t + 1 >= traj.len() {
        return Err(Error::CheckpointOutOfRange {
            index: t,
            len: traj.len(),
        });
    }
    let a = traj.states[t];
    let b = traj.states[t + 1];
    Ok(Velocity {
        dfpr: b.fpr - a.fpr,
        dtpr: b.tpr - a.tpr,
    })
}

/// Vulnerability path length: the cumulative absolute change of advantage
/// over all intervals. Movement parallel to the diagonal leaves the
/// advantage unchanged and contributes nothing.
pub fn path_length(traj: &Trajectory) -> f64 {
    let mut total = 0.0;
    for w in traj.states.windows(2) {
        total += (w[1].advantage() - w[0].advantage()).abs();
    }
    total
}

/// Path length restricted to the transitions before checkpoint `upto`.
///
/// `prefix_path_length(traj, 0)` is 0 and `prefix_path_length(traj, last)`
/// equals the full path length.
pub fn prefix_path_length(traj: &Trajectory, upto: usize) -> Result<f64> {
    if upto >= traj.len() {
        return Err(Error::CheckpointOutOfRange {
            index: upto,
            len: traj.len(),
        });
    }
    let mut total = 0.0;
    for w in traj.states[..=upto].windows(2) {
        total += (w[1].advantage() - w[0].advantage()).abs();
    }
    Ok(total)
}

/// A band pair identifying one cell of a grid partition of the plane.
///
/// Bands are 1-based; on the 3×3 transition grid the cell S_ij has TPR band
/// i and FPR band j, so S_31 is the low-FPR, high-TPR (highly vulnerable)
/// corner and S_11 the robust corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridCell {
    pub tpr_band: u32,
    pub fpr_band: u32,
}

/// A uniform grid partition of the unit square into `resolution`² cells.
///
/// Interior bands are half-open; the upper edge 1.0 belongs to the top
/// band, so the map is total on [0, 1]².
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlaneGrid {
    resolution: u32,
}

impl PlaneGrid {
    /// Builds a grid; resolution must be at least 2.
    pub fn new(resolution: u32) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid resolution must be >= 2, got {resolution}"
            )));
        }
        Ok(PlaneGrid { resolution })
    }

    /// The fixed 3×3 grid used for transition analysis.
    pub fn transition() -> Self {
        PlaneGrid { resolution: 3 }
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    /// Total number of cells.
    pub fn cell_count(&self) -> usize {
        (self.resolution as usize) * (self.resolution as usize)
    }

    fn band(&self, coord: f64) -> u32 {
        let r = self.resolution;
        // coordinate 1.0 would floor into band r+1; clamp it into the top band
        let b = (coord * r as f64).floor() as u32;
        b.min(r - 1) + 1
    }

    /// Flat row-major index of a cell: TPR band major, FPR band minor.
    pub fn flat_index(&self, cell: GridCell) -> usize {
        ((cell.tpr_band - 1) as usize) * (self.resolution as usize) + (cell.fpr_band - 1) as usize
    }
}

/// Maps a state to its grid cell. Total: every point of the unit square
/// lands in exactly one cell.
pub fn cell_of(state: VulnerabilityState, grid: PlaneGrid) -> GridCell {
    GridCell {
        tpr_band: grid.band(state.tpr),
        fpr_band: grid.band(state.fpr),
    }
}
