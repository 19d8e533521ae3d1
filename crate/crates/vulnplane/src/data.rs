//! Synthetic dataset generation, small-file loaders, and per-model
//! membership assignment for the MIA game.
//!
//! Synthetic pools come in two kinds: `gaussian-blobs` places class centers
//! on scaled coordinate axes so every pair of centers is exactly
//! `class_separation * sqrt(2)` apart under unit isotropic noise, and
//! `concentric-rings` puts classes on rings `class_separation` apart in the
//! first two dimensions (non-linearly separable). Difficulty is controlled
//! by `class_separation` and `label_noise_rate`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dataset kinds understood by [`generate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    GaussianBlobs,
    ConcentricRings,
    CsvFile,
    IdxFile,
}

/// Recipe for a sample pool of controllable difficulty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_classes: usize,
    /// Pool size M.
    pub n_samples: usize,
    pub dim: usize,
    #[serde(default)]
    pub class_separation: f64,
    #[serde(default)]
    pub label_noise_rate: f64,
    pub seed: u64,
    /// Source for `csv-file` pools.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<String>,
    /// Image file for `idx-file` pools.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx_images: Option<String>,
    /// Label file for `idx-file` pools.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx_labels: Option<String>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_samples == 0 || self.dim == 0 {
            return Err(Error::InvalidArgument(
                "n_classes, n_samples and dim must be positive".into(),
            ));
        }
        if !self.n_samples.is_multiple_of(self.n_classes) {
            return Err(Error::InvalidArgument(format!(
                "pool size {} not divisible by n_classes {}",
                self.n_samples, self.n_classes
            )));
        }
        if !(0.0..1.0).contains(&self.label_noise_rate) {
            return Err(Error::InvalidArgument(format!(
                "label_noise_rate {} outside [0, 1)",
                self.label_noise_rate
            )));
        }
        if self.class_separation < 0.0 {
            return Err(Error::InvalidArgument(
                "class_separation must be non-negative".into(),
            ));
        }
        if self.n_classes > u16::MAX as usize {
            return Err(Error::InvalidArgument(
                "n_classes exceeds the u16 label range".into(),
            ));
        }
        Ok(())
    }
}

/// The full pool of M candidate samples; models draw their training sets
/// from it according to a [`MembershipPlan`].
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePool {
    /// Row-major M × dim feature matrix.
    pub features: Vec<f64>,
    /// Training labels, possibly noised.
    pub labels: Vec<u16>,
    /// Pre-noise labels.
    pub true_labels: Vec<u16>,
    pub sample_ids: Vec<u32>,
    pub dim: usize,
    pub n_classes: usize,
}

impl SamplePool {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    fn validate(&self) -> Result<()> {
        let m = self.labels.len();
        if self.features.len() != m * self.dim
            || self.true_labels.len() != m
            || self.sample_ids.len() != m
        {
            return Err(Error::ShapeMismatch("pool fields disagree on M".into()));
        }
        if self.features.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("pool features".into()));
        }
        if let Some(&l) = self.labels.iter().chain(&self.true_labels).find(|&&l| l as usize >= self.n_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {l} outside [0, {})",
                self.n_classes
            )));
        }
        let mut ids = self.sample_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != m {
            return Err(Error::InvalidArgument("duplicate sample ids".into()));
        }
        Ok(())
    }
}

/// Per-model membership bits for the whole pool: `bits[model][sample]`.
///
/// Each bit is Bernoulli(0.5); columns are resampled until every sample has
/// at least two in-models and two out-models, so both attack Gaussians can
/// be fit for every sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipPlan {
    pub n_models: usize,
    pub n_samples: usize,
    bits: Vec<bool>,
}

impl MembershipPlan {
    pub fn is_member(&self, model: usize, sample: usize) -> bool {
        self.bits[model * self.n_samples + sample]
    }

    /// Members of one model, as sample indices.
    pub fn members_of(&self, model: usize) -> Vec<usize> {
        (0..self.n_samples)
            .filter(|&s| self.is_member(model, s))
            .collect()
    }

    /// Number of models that trained on `sample`.
    pub fn in_count(&self, sample: usize) -> usize {
        (0..self.n_models)
            .filter(|&m| self.is_member(m, sample))
            .count()
    }
}

/// Draws the N × M membership plan. Requires N >= 4 so the two-in /
/// two-out balance constraint is satisfiable.
pub fn plan_membership(n_samples: usize, n_models: usize, seed: u64) -> Result<MembershipPlan> {
    if n_models < 4 {
        return Err(Error::InvalidArgument(format!(
            "membership plan needs at least 4 models, got {n_models}"
        )));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("empty pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x706c616e)); // "plan"
    let mut bits = vec![false; n_models * n_samples];
    for b in bits.iter_mut() {
        *b = rng.random::<bool>();
    }
    // Per-sample rebalance: redraw only the offending column so other
    // samples' bits stay untouched.
    for s in 0..n_samples {
        loop {
            let ins = (0..n_models)
                .filter(|&m| bits[m * n_samples + s])
                .count();
            if ins >= 2 && n_models - ins >= 2 {
                break;
            }
            for m in 0..n_models {
                bits[m * n_samples + s] = rng.random::<bool>();
            }
        }
    }
    Ok(MembershipPlan {
        n_models,
        n_samples,
        bits,
    })
}

/// Builds a pool from a spec. Deterministic given the spec's seed.
pub fn generate(spec: &DatasetSpec) -> Result<SamplePool> {
    spec.validate()?;
    match spec.kind {
        DatasetKind::GaussianBlobs => generate_synthetic(spec, blob_point),
        DatasetKind::ConcentricRings => {
            if spec.dim < 2 {
                return Err(Error::InvalidArgument(
                    "concentric-rings needs dim >= 2".into(),
                ));
            }
            generate_synthetic(spec, ring_point)
        }
        DatasetKind::CsvFile => {
            let path = spec.csv_path.as_deref().ok_or_else(|| {
                Error::InvalidArgument("csv-file spec is missing csv_path".into())
            })?;
            let pool = load_csv(path, spec.n_classes)?;
            check_loaded_shape(spec, &pool, path)?;
            Ok(pool)
        }
        DatasetKind::IdxFile => {
            let images = spec.idx_images.as_deref().ok_or_else(|| {
                Error::InvalidArgument("idx-file spec is missing idx_images".into())
            })?;
            let labels = spec.idx_labels.as_deref().ok_or_else(|| {
                Error::InvalidArgument("idx-file spec is missing idx_labels".into())
            })?;
            let pool = load_idx(images, labels, spec.n_classes)?;
            check_loaded_shape(spec, &pool, images)?;
            Ok(pool)
        }
    }
}

fn check_loaded_shape(spec: &DatasetSpec, pool: &SamplePool, path: &str) -> Result<()> {
    if pool.len() != spec.n_samples || pool.dim != spec.dim {
        return Err(Error::MalformedFile {
            path: path.into(),
            reason: format!(
                "spec expects M={} dim={}, file holds M={} dim={}",
                spec.n_samples, spec.dim, pool.len(), pool.dim
            ),
        });
    }
    Ok(())
}

/// Blob center for class c: `class_separation` along axis c, so any two
/// centers are class_separation * sqrt(2) apart.
fn blob_point(spec: &DatasetSpec, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = vec![0.0; spec.dim];
    for v in x.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    x[class % spec.dim] += spec.class_separation;
    x
}

/// Ring point for class c: radius (c+1) * class_separation in the first two
/// dimensions with radial noise 0.5; remaining dimensions are pure noise.
fn ring_point(spec: &DatasetSpec, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = vec![0.0; spec.dim];
    let angle: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let radial: f64 = StandardNormal.sample(rng);
    let r = (class as f64 + 1.0) * spec.class_separation + 0.5 * radial;
    x[0] = r * angle.cos();
    x[1] = r * angle.sin();
    for v in x.iter_mut().skip(2) {
        *v = StandardNormal.sample(rng);
    }
    x
}

fn generate_synthetic(
    spec: &DatasetSpec,
    point: fn(&DatasetSpec, usize, &mut ChaCha8Rng) -> Vec<f64>,
) -> Result<SamplePool> {
    if spec.kind == DatasetKind::GaussianBlobs && spec.dim < spec.n_classes {
        return Err(Error::InvalidArgument(format!(
            "gaussian-blobs needs dim >= n_classes ({} < {})",
            spec.dim, spec.n_classes
        )));
    }
    let m = spec.n_samples;
    let per_class = m / spec.n_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x64617461)); // "data"
    let mut features = Vec::with_capacity(m * spec.dim);
    let mut true_labels = Vec::with_capacity(m);
    for class in 0..spec.n_classes {
        for _ in 0..per_class {
            features.extend(point(spec, class, &mut rng));
            true_labels.push(class as u16);
        }
    }
    standardize(&mut features, m, spec.dim);

    // Flip exactly round(rate * M) labels to a uniformly random wrong class.
    let mut labels = true_labels.clone();
    let n_flips = (spec.label_noise_rate * m as f64).round() as usize;
    if n_flips > 0 {
        let mut idx: Vec<usize> = (0..m).collect();
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(n_flips) {
            let offset = rng.random_range(1..spec.n_classes);
            labels[i] = ((labels[i] as usize + offset) % spec.n_classes) as u16;
        }
    }

    let pool = SamplePool {
        features,
        labels,
        true_labels,
        sample_ids: (0..m as u32).collect(),
        dim: spec.dim,
        n_classes: spec.n_classes,
    };
    pool.validate()?;
    Ok(pool)
}

/// Zero mean, unit variance per dimension; dimensions with no spread are
/// only centered.
fn standardize(features: &mut [f64], m: usize, dim: usize) {
    for d in 0..dim {
        let mut mean = 0.0;
        for i in 0..m {
            mean += features[i * dim + d];
        }
        mean /= m as f64;
        let mut var = 0.0;
        for i in 0..m {
            let c = features[i * dim + d] - mean;
            var += c * c;
        }
        var /= m as f64;
        let scale = if var > 1e-24 { var.sqrt().recip() } else { 1.0 };
        for i in 0..m {
            let v = &mut features[i * dim + d];
            *v = (*v - mean) * scale;
        }
    }
}

// ---------------------------------------------------------------------------
// File loaders
// ---------------------------------------------------------------------------

/// Loads a pool from CSV with header `id,label,f0..f{d-1}`.
pub fn load_csv(path: impl AsRef<Path>, n_classes: usize) -> Result<SamplePool> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(&pstr, e))?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| Error::MalformedFile {
        path: pstr.clone(),
        reason: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "id" || cols[1] != "label" {
        return Err(Error::MalformedFile {
            path: pstr.clone(),
            reason: format!("header must be `id,label,f0..f{{d-1}}`, got `{header}`"),
        });
    }
    let dim = cols.len() - 2;
    for (d, col) in cols[2..].iter().enumerate() {
        if *col != format!("f{d}") {
            return Err(Error::MalformedFile {
                path: pstr.clone(),
                reason: format!("feature column {} named `{col}`, expected `f{d}`", d + 2),
            });
        }
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut sample_ids = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row = lineno + 1; // 1-based, header is row 1
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::MalformedRow {
                path: pstr.clone(),
                row,
                reason: format!("expected {} fields, got {}", cols.len(), fields.len()),
            });
        }
        let id: u32 = fields[0].parse().map_err(|_| Error::MalformedRow {
            path: pstr.clone(),
            row,
            reason: format!("bad id `{}`", fields[0]),
        })?;
        let label: u16 = fields[1].parse().map_err(|_| Error::MalformedRow {
            path: pstr.clone(),
            row,
            reason: format!("bad label `{}`", fields[1]),
        })?;
        if label as usize >= n_classes {
            return Err(Error::MalformedRow {
                path: pstr.clone(),
                row,
                reason: format!("label {label} >= n_classes {n_classes}"),
            });
        }
        for (d, f) in fields[2..].iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| Error::MalformedRow {
                path: pstr.clone(),
                row,
                reason: format!("bad feature f{d} `{f}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::MalformedRow {
                    path: pstr.clone(),
                    row,
                    reason: format!("non-finite feature f{d}"),
                });
            }
            features.push(v);
        }
        sample_ids.push(id);
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::MalformedFile {
            path: pstr,
            reason: "no data rows".into(),
        });
    }
    let pool = SamplePool {
        features,
        true_labels: labels.clone(),
        labels,
        sample_ids,
        dim,
        n_classes,
    };
    pool.validate()?;
    Ok(pool)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Loads an IDX image/label file pair; pixels are flattened and scaled to
/// [0, 1].
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    n_classes: usize,
) -> Result<SamplePool> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let ipath = images_path.display().to_string();
    let lpath = labels_path.display().to_string();

    let ibytes = fs::read(images_path).map_err(|e| Error::io(&ipath, e))?;
    let lbytes = fs::read(labels_path).map_err(|e| Error::io(&lpath, e))?;

    let mut ir = IdxReader::new(&ibytes, &ipath);
    if ir.u32()? != IDX_IMAGES_MAGIC {
        return Err(Error::MalformedFile {
            path: ipath,
            reason: "bad magic, expected 0x00000803 (u8 images, 3 dims)".into(),
        });
    }
    let n = ir.u32()? as usize;
    let rows = ir.u32()? as usize;
    let cols = ir.u32()? as usize;
    let dim = rows * cols;
    let pixels = ir.bytes(n * dim)?;

    let mut lr = IdxReader::new(&lbytes, &lpath);
    if lr.u32()? != IDX_LABELS_MAGIC {
        return Err(Error::MalformedFile {
            path: lpath,
            reason: "bad magic, expected 0x00000801 (u8 labels, 1 dim)".into(),
        });
    }
    let ln = lr.u32()? as usize;
    if ln != n {
        return Err(Error::MalformedFile {
            path: lpath,
            reason: format!("label count {ln} does not match image count {n}"),
        });
    }
    let raw_labels = lr.bytes(n)?;

    let mut labels = Vec::with_capacity(n);
    for (i, &l) in raw_labels.iter().enumerate() {
        if l as usize >= n_classes {
            return Err(Error::MalformedFile {
                path: lpath,
                reason: format!("label {l} at offset {i} >= n_classes {n_classes}"),
            });
        }
        labels.push(l as u16);
    }
    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let pool = SamplePool {
        features,
        true_labels: labels.clone(),
        labels,
        sample_ids: (0..n as u32).collect(),
        dim,
        n_classes,
    };
    pool.validate()?;
    Ok(pool)
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a str,
}

impl<'a> IdxReader<'a> {
    fn new(bytes: &'a [u8], path: &'a str) -> Self {
        IdxReader { bytes, offset: 0, path }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::MalformedFile {
                path: self.path.into(),
                reason: format!(
                    "truncated at offset {} (needed {} more bytes)",
                    self.offset, n
                ),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }
}

// ---------------------------------------------------------------------------
// Pool persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct PoolMeta {
    n_samples: usize,
    dim: usize,
    n_classes: usize,
    sample_ids: Vec<u32>,
    true_labels: Vec<u16>,
    features_sha256: String,
    labels_sha256: String,
    /// Echo of the generating spec when the pool came from one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<DatasetSpec>,
}

/// Persists a pool as `pool.meta.json` + `features.f32` (row-major
/// little-endian) + `labels.u16` inside `dir`.
pub fn save_pool(pool: &SamplePool, spec: Option<&DatasetSpec>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    let mut fbytes = Vec::with_capacity(pool.features.len() * 4);
    for &v in &pool.features {
        fbytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut lbytes = Vec::with_capacity(pool.labels.len() * 2);
    for &l in &pool.labels {
        lbytes.extend_from_slice(&l.to_le_bytes());
    }
    let meta = PoolMeta {
        n_samples: pool.len(),
        dim: pool.dim,
        n_classes: pool.n_classes,
        sample_ids: pool.sample_ids.clone(),
        true_labels: pool.true_labels.clone(),
        features_sha256: hex::encode(Sha256::digest(&fbytes)),
        labels_sha256: hex::encode(Sha256::digest(&lbytes)),
        spec: spec.cloned(),
    };
    write_file(&dir.join("features.f32"), &fbytes)?;
    write_file(&dir.join("labels.u16"), &lbytes)?;
    let json = serde_json::to_vec_pretty(&meta)
        .map_err(|e| Error::InvalidArgument(format!("pool meta serialization: {e}")))?;
    write_file(&dir.join("pool.meta.json"), &json)?;
    Ok(())
}

/// Loads a pool persisted by [`save_pool`], verifying content hashes.
pub fn load_pool(dir: impl AsRef<Path>) -> Result<SamplePool> {
    let dir = dir.as_ref();
    let meta_path = dir.join("pool.meta.json");
    let meta_str = fs::read_to_string(&meta_path)
        .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let meta: PoolMeta = serde_json::from_str(&meta_str).map_err(|e| Error::MalformedFile {
        path: meta_path.display().to_string(),
        reason: e.to_string(),
    })?;

    let fpath = dir.join("features.f32");
    let fbytes = fs::read(&fpath).map_err(|e| Error::io(fpath.display().to_string(), e))?;
    if hex::encode(Sha256::digest(&fbytes)) != meta.features_sha256 {
        return Err(Error::MalformedFile {
            path: fpath.display().to_string(),
            reason: "feature hash mismatch".into(),
        });
    }
    let lpath = dir.join("labels.u16");
    let lbytes = fs::read(&lpath).map_err(|e| Error::io(lpath.display().to_string(), e))?;
    if hex::encode(Sha256::digest(&lbytes)) != meta.labels_sha256 {
        return Err(Error::MalformedFile {
            path: lpath.display().to_string(),
            reason: "label hash mismatch".into(),
        });
    }
    if fbytes.len() != meta.n_samples * meta.dim * 4 || lbytes.len() != meta.n_samples * 2 {
        return Err(Error::MalformedFile {
            path: fpath.display().to_string(),
            reason: "size disagrees with pool.meta.json".into(),
        });
    }

    let features = fbytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let labels = lbytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let pool = SamplePool {
        features,
        labels,
        true_labels: meta.true_labels,
        sample_ids: meta.sample_ids,
        dim: meta.dim,
        n_classes: meta.n_classes,
    };
    pool.validate()?;
    Ok(pool)
}

/// Persists a membership plan as JSON (one bit string per model).
pub fn save_plan(plan: &MembershipPlan, path: impl AsRef<Path>) -> Result<()> {
    #[derive(Serialize)]
    struct PlanFile<'a> {
        n_models: usize,
        n_samples: usize,
        rows: Vec<&'a str>,
    }
    let strings: Vec<String> = (0..plan.n_models)
        .map(|m| {
            (0..plan.n_samples)
                .map(|s| if plan.is_member(m, s) { '1' } else { '0' })
                .collect()
        })
        .collect();
    let file = PlanFile {
        n_models: plan.n_models,
        n_samples: plan.n_samples,
        rows: strings.iter().map(String::as_str).collect(),
    };
    let json = serde_json::to_vec_pretty(&file)
        .map_err(|e| Error::InvalidArgument(format!("plan serialization: {e}")))?;
    write_file(path.as_ref(), &json)
}

/// Loads a plan persisted by [`save_plan`].
pub fn load_plan(path: impl AsRef<Path>) -> Result<MembershipPlan> {
    #[derive(Deserialize)]
    struct PlanFile {
        n_models: usize,
        n_samples: usize,
        rows: Vec<String>,
    }
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(&pstr, e))?;
    let file: PlanFile = serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
        path: pstr.clone(),
        reason: e.to_string(),
    })?;
    if file.rows.len() != file.n_models {
        return Err(Error::MalformedFile {
            path: pstr,
            reason: "row count disagrees with n_models".into(),
        });
    }
    let mut bits = Vec::with_capacity(file.n_models * file.n_samples);
    for (m, row) in file.rows.iter().enumerate() {
        if row.len() != file.n_samples {
            return Err(Error::MalformedFile {
                path: pstr,
                reason: format!("row {m} has {} bits, expected {}", row.len(), file.n_samples),
            });
        }
        bits.extend(row.chars().map(|c| c == '1'));
    }
    Ok(MembershipPlan {
        n_models: file.n_models,
        n_samples: file.n_samples,
        bits,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Splitmix64-style seed derivation so independent RNG streams never share
/// state across purposes.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_spec(sep: f64, noise: f64) -> DatasetSpec {
        DatasetSpec {
            kind: DatasetKind::GaussianBlobs,
            n_classes: 4,
            n_samples: 200,
            dim: 8,
            class_separation: sep,
            label_noise_rate: noise,
            seed: 11,
            csv_path: None,
            idx_images: None,
            idx_labels: None,
        }
    }

    /// Nearest-centroid accuracy, with centroids fit on true labels.
    fn nearest_centroid_accuracy(pool: &SamplePool) -> f64 {
        let c = pool.n_classes;
        let mut centroids = vec![vec![0.0; pool.dim]; c];
        let mut counts = vec![0usize; c];
        for i in 0..pool.len() {
            let class = pool.true_labels[i] as usize;
            counts[class] += 1;
            for (d, v) in pool.feature_row(i).iter().enumerate() {
                centroids[class][d] += v;
            }
        }
        for (centroid, &n) in centroids.iter_mut().zip(&counts) {
            for v in centroid.iter_mut() {
                *v /= n as f64;
            }
        }
        let mut hits = 0;
        for i in 0..pool.len() {
            let row = pool.feature_row(i);
            let best = (0..c)
                .min_by(|&a, &b| {
                    let da: f64 = row.iter().zip(&centroids[a]).map(|(x, c)| (x - c) * (x - c)).sum();
                    let db: f64 = row.iter().zip(&centroids[b]).map(|(x, c)| (x - c) * (x - c)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == pool.true_labels[i] as usize {
                hits += 1;
            }
        }
        hits as f64 / pool.len() as f64
    }

    #[test]
    fn separable_limit_is_nearest_centroid_perfect() {
        let pool = generate(&blob_spec(100.0, 0.0)).unwrap();
        assert_eq!(nearest_centroid_accuracy(&pool), 1.0);
    }

    #[test]
    fn zero_noise_preserves_labels() {
        let pool = generate(&blob_spec(3.0, 0.0)).unwrap();
        assert_eq!(pool.labels, pool.true_labels);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&blob_spec(2.0, 0.1)).unwrap();
        let b = generate(&blob_spec(2.0, 0.1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_flips_exactly_rounded_fraction() {
        for rate in [0.1, 0.25, 0.033] {
            let pool = generate(&blob_spec(2.0, rate)).unwrap();
            let flips = pool
                .labels
                .iter()
                .zip(&pool.true_labels)
                .filter(|(a, b)| a != b)
                .count();
            assert_eq!(flips, (rate * 200.0).round() as usize);
        }
    }

    #[test]
    fn features_are_standardized() {
        let pool = generate(&blob_spec(2.0, 0.0)).unwrap();
        let m = pool.len() as f64;
        for d in 0..pool.dim {
            let mean: f64 = (0..pool.len()).map(|i| pool.feature_row(i)[d]).sum::<f64>() / m;
            let var: f64 = (0..pool.len())
                .map(|i| {
                    let c = pool.feature_row(i)[d] - mean;
                    c * c
                })
                .sum::<f64>()
                / m;
            assert!(mean.abs() < 1e-9, "dim {d} mean {mean}");
            assert!((var - 1.0).abs() < 1e-9, "dim {d} var {var}");
        }
    }

    #[test]
    fn rings_generate_and_are_deterministic() {
        let spec = DatasetSpec {
            kind: DatasetKind::ConcentricRings,
            class_separation: 3.0,
            ..blob_spec(0.0, 0.0)
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);
        // balanced pool
        for c in 0..4u16 {
            assert_eq!(a.true_labels.iter().filter(|&&l| l == c).count(), 50);
        }
    }

    #[test]
    fn spec_rejects_unbalanced_pool() {
        let mut spec = blob_spec(1.0, 0.0);
        spec.n_samples = 201;
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn plan_counts_and_balance() {
        let plan = plan_membership(1000, 16, 5).unwrap();
        let mut total_in = 0usize;
        for s in 0..1000 {
            let ins = plan.in_count(s);
            assert!((2..=14).contains(&ins), "sample {s} has {ins} in-models");
            total_in += ins;
        }
        // Binomial(16, 0.5) mean check over the generated plan
        let mean = total_in as f64 / 1000.0;
        assert!((mean - 8.0).abs() < 0.5, "mean in-count {mean}");
    }

    #[test]
    fn plan_in_plus_out_is_n_and_deterministic() {
        let plan = plan_membership(50, 8, 42).unwrap();
        for s in 0..50 {
            let ins = plan.in_count(s);
            let outs = (0..8).filter(|&m| !plan.is_member(m, s)).count();
            assert_eq!(ins + outs, 8);
        }
        assert_eq!(plan, plan_membership(50, 8, 42).unwrap());
        assert_ne!(plan, plan_membership(50, 8, 43).unwrap());
    }

    #[test]
    fn plan_rejects_small_populations() {
        assert!(plan_membership(10, 3, 0).is_err());
        assert!(plan_membership(10, 4, 0).is_ok());
    }

    #[test]
    fn members_and_holdout_partition_the_pool() {
        let plan = plan_membership(30, 6, 9).unwrap();
        for m in 0..6 {
            let members = plan.members_of(m);
            let holdout: Vec<usize> = (0..30).filter(|&s| !plan.is_member(m, s)).collect();
            assert_eq!(members.len() + holdout.len(), 30);
            assert!(members.iter().all(|s| !holdout.contains(s)));
        }
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.csv");
        fs::write(&good, "id,label,f0,f1\n0,0,0.5,1.0\n1,1,-0.25,2.0\n2,0,0.0,0.125\n").unwrap();
        let pool = load_csv(&good, 2).unwrap();
        assert_eq!(pool.len(), 3);
        assert_eq!(pool.dim, 2);
        assert_eq!(pool.labels, vec![0, 1, 0]);
        assert_eq!(pool.true_labels, pool.labels);
        assert_eq!(pool.feature_row(1), &[-0.25, 2.0]);

        let bad_label = dir.path().join("bad_label.csv");
        fs::write(&bad_label, "id,label,f0\n0,0,0.5\n1,7,1.0\n").unwrap();
        match load_csv(&bad_label, 2) {
            Err(Error::MalformedRow { row, reason, .. }) => {
                assert_eq!(row, 3);
                assert!(reason.contains("label 7"));
            }
            other => panic!("expected MalformedRow, got {other:?}"),
        }

        let bad_header = dir.path().join("bad_header.csv");
        fs::write(&bad_header, "sample,label,f0\n0,0,0.5\n").unwrap();
        assert!(matches!(load_csv(&bad_header, 2), Err(Error::MalformedFile { .. })));
    }

    #[test]
    fn idx_fixture_roundtrip() {
        // hand-built pair: 4 images of 2x2 pixels plus 4 labels
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("fixture-images.idx");
        let labels = dir.path().join("fixture-labels.idx");

        let mut ibytes = Vec::new();
        ibytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        ibytes.extend_from_slice(&4u32.to_be_bytes());
        ibytes.extend_from_slice(&2u32.to_be_bytes());
        ibytes.extend_from_slice(&2u32.to_be_bytes());
        ibytes.extend_from_slice(&[0, 51, 102, 153, 204, 255, 0, 255, 10, 20, 30, 40, 1, 2, 3, 4]);
        fs::write(&images, &ibytes).unwrap();

        let mut lbytes = Vec::new();
        lbytes.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lbytes.extend_from_slice(&4u32.to_be_bytes());
        lbytes.extend_from_slice(&[0, 1, 1, 0]);
        fs::write(&labels, &lbytes).unwrap();

        let pool = load_idx(&images, &labels, 2).unwrap();
        assert_eq!(pool.len(), 4);
        assert_eq!(pool.dim, 4);
        assert_eq!(pool.labels, vec![0, 1, 1, 0]);
        assert!((pool.feature_row(0)[1] - 51.0 / 255.0).abs() < 1e-12);
        assert_eq!(pool.feature_row(1)[1], 1.0);

        // wrong magic
        ibytes[3] = 0x01;
        fs::write(&images, &ibytes).unwrap();
        assert!(matches!(load_idx(&images, &labels, 2), Err(Error::MalformedFile { .. })));
    }

    #[test]
    fn pool_persistence_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = blob_spec(2.0, 0.1);
        let pool = generate(&spec).unwrap();
        save_pool(&pool, Some(&spec), dir.path()).unwrap();
        let loaded = load_pool(dir.path()).unwrap();
        assert_eq!(loaded.labels, pool.labels);
        assert_eq!(loaded.true_labels, pool.true_labels);
        assert_eq!(loaded.sample_ids, pool.sample_ids);
        // features round-trip through f32
        for (a, b) in loaded.features.iter().zip(&pool.features) {
            assert!((a - b).abs() <= (*b as f32).abs() as f64 * 1e-7 + 1e-7);
        }

        // corrupting a binary is detected
        let fpath = dir.path().join("features.f32");
        let mut bytes = fs::read(&fpath).unwrap();
        bytes[0] ^= 0xFF;
        fs::write(&fpath, &bytes).unwrap();
        assert!(matches!(load_pool(dir.path()), Err(Error::MalformedFile { .. })));
    }

    #[test]
    fn plan_persistence_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let plan = plan_membership(40, 6, 3).unwrap();
        let path = dir.path().join("plan.json");
        save_plan(&plan, &path).unwrap();
        assert_eq!(load_plan(&path).unwrap(), plan);
    }
}
