//! Shadow-population training: each model trains only on its members and
//! every pool sample (member or not) is scored at every checkpoint.
//!
//! Runs are independent tasks with RNG streams derived from
//! (master seed, model id), so results do not depend on execution order or
//! thread count; the merged score log is canonically sorted by
//! (epoch, model, sample).

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, MembershipPlan, SamplePool};
use crate::error::{Error, Result};
use crate::nn::{self, ModelParams};
use crate::optim::{self, OptimizerConfig, OptimizerKind, OptimizerState};

/// Probabilities are clamped to this band before logging so downstream
/// logit scaling stays finite.
pub const CONF_CLAMP: f64 = 1e-6;

/// One black-box observation of one model on one pool sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub epoch: u32,
    pub model: u32,
    pub sample: u32,
    pub member: u8,
    pub conf: f64,
    pub loss: f64,
    pub correct: u8,
}

/// The per-(checkpoint, model, sample) instrumentation table; the interface
/// between training and the attack/analysis stages.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreLog {
    pub records: Vec<ScoreRecord>,
}

impl ScoreLog {
    /// Sorts records into the canonical (epoch, model, sample) order.
    pub fn canonicalize(&mut self) {
        self.records.sort_by_key(|r| (r.epoch, r.model, r.sample));
    }

    /// Distinct checkpoint epochs, ascending.
    pub fn epochs(&self) -> Vec<u32> {
        let mut e: Vec<u32> = self.records.iter().map(|r| r.epoch).collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Model shape: hidden layers only; input width and class count come from
/// the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_widths: Vec<usize>,
}

impl ModelConfig {
    pub fn widths(&self, input_dim: usize, n_classes: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_widths.len() + 2);
        w.push(input_dim);
        w.extend_from_slice(&self.hidden_widths);
        w.push(n_classes);
        w
    }
}

/// Schedule and reproducibility knobs shared by every run in a population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: u32,
    /// Checkpoints land on every multiple of this, plus epoch 0.
    pub checkpoint_interval: u32,
    pub batch_size: usize,
    pub master_seed: u64,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.checkpoint_interval == 0 {
            return Err(Error::InvalidArgument(
                "epochs and checkpoint_interval must be positive".into(),
            ));
        }
        if !self.epochs.is_multiple_of(self.checkpoint_interval) {
            return Err(Error::InvalidArgument(format!(
                "checkpoint_interval {} does not divide epochs {}",
                self.checkpoint_interval, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Recorded checkpoint epochs: 0 (pre-training) plus every interval.
    pub fn checkpoint_epochs(&self) -> Vec<u32> {
        let mut e = vec![0];
        e.extend((1..=self.epochs / self.checkpoint_interval).map(|k| k * self.checkpoint_interval));
        e
    }
}

/// One trained shadow model: its membership column and parameter snapshots.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model_id: u32,
    pub member_bits: Vec<bool>,
    pub checkpoint_epochs: Vec<u32>,
    pub checkpoints: Vec<ModelParams>,
    pub rng_seed: u64,
}

impl TrainRun {
    pub fn final_params(&self) -> &ModelParams {
        self.checkpoints.last().expect("run has checkpoints")
    }

    pub fn params_at(&self, epoch: u32) -> Option<&ModelParams> {
        self.checkpoint_epochs
            .iter()
            .position(|&e| e == epoch)
            .map(|i| &self.checkpoints[i])
    }

    pub fn member_samples(&self) -> Vec<usize> {
        (0..self.member_bits.len())
            .filter(|&s| self.member_bits[s])
            .collect()
    }
}

/// A trained shadow population plus its merged score log.
#[derive(Debug)]
pub struct Population {
    pub runs: Vec<TrainRun>,
    pub scores: ScoreLog,
}

/// Deterministic per-model stream seed.
pub fn model_seed(master_seed: u64, model_id: u32) -> u64 {
    mix_seed(master_seed, 0x7368_6477 ^ (model_id as u64).wrapping_shl(17) ^ model_id as u64)
}

/// Trains the whole shadow population in parallel. Model i sees only the
/// samples with plan bit 1; every pool sample is scored at every recorded
/// checkpoint.
pub fn train_population(
    pool: &SamplePool,
    plan: &MembershipPlan,
    model_cfg: &ModelConfig,
    opt_cfg: &OptimizerConfig,
    settings: &TrainSettings,
) -> Result<Population> {
    settings.validate()?;
    opt_cfg.validate()?;
    if plan.n_samples != pool.len() {
        return Err(Error::ShapeMismatch(format!(
            "plan covers {} samples, pool holds {}",
            plan.n_samples,
            pool.len()
        )));
    }

    let mut results: Vec<Result<(TrainRun, Vec<ScoreRecord>)>> = (0..plan.n_models as u32)
        .into_par_iter()
        .map(|model_id| train_one(pool, plan, model_cfg, opt_cfg, settings, model_id))
        .collect();

    let mut runs = Vec::with_capacity(results.len());
    let mut scores = ScoreLog::default();
    for r in results.drain(..) {
        let (run, recs) = r?;
        runs.push(run);
        scores.records.extend(recs);
    }
    runs.sort_by_key(|r| r.model_id);
    scores.canonicalize();
    Ok(Population { runs, scores })
}

fn train_one(
    pool: &SamplePool,
    plan: &MembershipPlan,
    model_cfg: &ModelConfig,
    opt_cfg: &OptimizerConfig,
    settings: &TrainSettings,
    model_id: u32,
) -> Result<(TrainRun, Vec<ScoreRecord>)> {
    let seed = model_seed(settings.master_seed, model_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = model_cfg.widths(pool.dim, pool.n_classes);
    let mut params = ModelParams::he_uniform(&widths, &mut rng)?;
    let mut opt_state = OptimizerState::new(opt_cfg, params.param_count());

    let member_bits: Vec<bool> = (0..pool.len())
        .map(|s| plan.is_member(model_id as usize, s))
        .collect();
    let mut members: Vec<usize> = (0..pool.len()).filter(|&s| member_bits[s]).collect();

    let checkpoint_epochs = settings.checkpoint_epochs();
    let mut checkpoints = Vec::with_capacity(checkpoint_epochs.len());
    let mut records = Vec::with_capacity(checkpoint_epochs.len() * pool.len());

    // epoch 0: pre-training snapshot
    checkpoints.push(params.clone());
    score_all(pool, &member_bits, &params, 0, model_id, &mut records)?;

    for epoch in 1..=settings.epochs {
        members.shuffle(&mut rng);
        for batch in members.chunks(settings.batch_size) {
            step_batch(pool, batch, &mut params, &mut opt_state, opt_cfg)
                .map_err(|e| diverged(model_id, epoch, e))?;
        }
        if epoch % settings.checkpoint_interval == 0 {
            checkpoints.push(params.clone());
            score_all(pool, &member_bits, &params, epoch, model_id, &mut records)?;
        }
    }

    Ok((
        TrainRun {
            model_id,
            member_bits,
            checkpoint_epochs,
            checkpoints,
            rng_seed: seed,
        },
        records,
    ))
}

fn diverged(model: u32, epoch: u32, e: Error) -> Error {
    match e {
        Error::NonFinite(detail) => Error::Diverged { model, epoch, detail },
        other => other,
    }
}

fn step_batch(
    pool: &SamplePool,
    batch: &[usize],
    params: &mut ModelParams,
    opt_state: &mut OptimizerState,
    opt_cfg: &OptimizerConfig,
) -> Result<()> {
    let mean_grad = |p: &ModelParams| -> Result<Vec<f64>> {
        let mut grad = vec![0.0; p.param_count()];
        let scale = 1.0 / batch.len() as f64;
        for &s in batch {
            nn::accumulate_loss_gradient(p, pool.feature_row(s), pool.labels[s], scale, &mut grad)?;
        }
        Ok(grad)
    };
    match opt_cfg.kind {
        OptimizerKind::SgdMomentum => {
            let g = mean_grad(params)?;
            optim::sgd_momentum_step(opt_state, &mut params.data, &g, opt_cfg)
        }
        OptimizerKind::Adamw => {
            let g = mean_grad(params)?;
            optim::adamw_step(opt_state, &mut params.data, &g, opt_cfg)
        }
        OptimizerKind::SamOverSgd => {
            let widths = params.layer_widths.clone();
            optim::sam_step(
                opt_state,
                &mut params.data,
                |flat| {
                    let view = ModelParams {
                        layer_widths: widths.clone(),
                        data: flat.to_vec(),
                    };
                    mean_grad(&view)
                },
                opt_cfg,
            )
        }
    }
}

fn score_all(
    pool: &SamplePool,
    member_bits: &[bool],
    params: &ModelParams,
    epoch: u32,
    model_id: u32,
    records: &mut Vec<ScoreRecord>,
) -> Result<()> {
    for s in 0..pool.len() {
        let probs = nn::forward(params, pool.feature_row(s))?;
        let label = pool.labels[s] as usize;
        let conf = probs[label].clamp(CONF_CLAMP, 1.0 - CONF_CLAMP);
        records.push(ScoreRecord {
            epoch,
            model: model_id,
            sample: pool.sample_ids[s],
            member: member_bits[s] as u8,
            conf,
            loss: -conf.ln(),
            correct: (nn::argmax(&probs) == label) as u8,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Score log persistence
// ---------------------------------------------------------------------------

/// Writes `scores.jsonl`: one record per line, keys exactly
/// `epoch,model,sample,member,conf,loss,correct`, canonical order.
pub fn save_scores_jsonl(scores: &ScoreLog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(scores.records.len() * 96);
    for r in &scores.records {
        serde_json::to_writer(&mut out, r)
            .map_err(|e| Error::InvalidArgument(format!("score serialization: {e}")))?;
        out.push(b'\n');
    }
    fs::write(path, &out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_scores_jsonl(path: impl AsRef<Path>) -> Result<ScoreLog> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let file = fs::File::open(path).map_err(|e| Error::io(&pstr, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&pstr, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoreRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRow {
            path: pstr.clone(),
            row: i + 1,
            reason: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(ScoreLog { records })
}

const SCORES_BIN_MAGIC: &[u8; 4] = b"VPS1";

/// Columnar binary score log: header with the record count, then column
/// blocks u32 epoch / u32 model / u32 sample / u8 member / f32 conf /
/// f32 loss / u8 correct, all little-endian.
pub fn save_scores_bin(scores: &ScoreLog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let n = scores.records.len();
    let mut out = Vec::with_capacity(16 + n * 22);
    out.extend_from_slice(SCORES_BIN_MAGIC);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for r in &scores.records {
        out.extend_from_slice(&r.epoch.to_le_bytes());
    }
    for r in &scores.records {
        out.extend_from_slice(&r.model.to_le_bytes());
    }
    for r in &scores.records {
        out.extend_from_slice(&r.sample.to_le_bytes());
    }
    for r in &scores.records {
        out.push(r.member);
    }
    for r in &scores.records {
        out.extend_from_slice(&(r.conf as f32).to_le_bytes());
    }
    for r in &scores.records {
        out.extend_from_slice(&(r.loss as f32).to_le_bytes());
    }
    for r in &scores.records {
        out.push(r.correct);
    }
    fs::write(path, &out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_scores_bin(path: impl AsRef<Path>) -> Result<ScoreLog> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(&pstr, e))?;
    let bad = |reason: String| Error::MalformedFile {
        path: pstr.clone(),
        reason,
    };
    if bytes.len() < 12 || &bytes[..4] != SCORES_BIN_MAGIC {
        return Err(bad("missing score-log magic".into()));
    }
    let n = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let expected = 12 + n * (4 + 4 + 4 + 1 + 4 + 4 + 1);
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut off = 12;
    let read_u32 = |off: &mut usize| -> Vec<u32> {
        let v = bytes[*off..*off + n * 4]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *off += n * 4;
        v
    };
    let epochs = read_u32(&mut off);
    let models = read_u32(&mut off);
    let samples = read_u32(&mut off);
    let members = bytes[off..off + n].to_vec();
    off += n;
    let read_f32 = |off: &mut usize| -> Vec<f32> {
        let v = bytes[*off..*off + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *off += n * 4;
        v
    };
    let confs = read_f32(&mut off);
    let losses = read_f32(&mut off);
    let corrects = bytes[off..off + n].to_vec();

    let records = (0..n)
        .map(|i| ScoreRecord {
            epoch: epochs[i],
            model: models[i],
            sample: samples[i],
            member: members[i],
            conf: confs[i] as f64,
            loss: losses[i] as f64,
            correct: corrects[i],
        })
        .collect();
    Ok(ScoreLog { records })
}

/// Persists every run's checkpoints under `dir/run_<id>/ckpt_<epoch>.params`.
pub fn save_checkpoints(runs: &[TrainRun], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for run in runs {
        let run_dir = dir.join(format!("run_{}", run.model_id));
        fs::create_dir_all(&run_dir).map_err(|e| Error::io(run_dir.display().to_string(), e))?;
        for (epoch, params) in run.checkpoint_epochs.iter().zip(&run.checkpoints) {
            nn::save_params(params, run_dir.join(format!("ckpt_{epoch}.params")))?;
        }
    }
    Ok(())
}

/// Loads one persisted checkpoint.
pub fn load_checkpoint(dir: impl AsRef<Path>, model_id: u32, epoch: u32) -> Result<ModelParams> {
    nn::load_params(
        dir.as_ref()
            .join(format!("run_{model_id}"))
            .join(format!("ckpt_{epoch}.params")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, plan_membership, DatasetKind, DatasetSpec};

    fn small_spec(sep: f64) -> DatasetSpec {
        DatasetSpec {
            kind: DatasetKind::GaussianBlobs,
            n_classes: 2,
            n_samples: 60,
            dim: 4,
            class_separation: sep,
            label_noise_rate: 0.0,
            seed: 3,
            csv_path: None,
            idx_images: None,
            idx_labels: None,
        }
    }

    fn small_population(sep: f64, opt: OptimizerConfig, seed: u64) -> Population {
        let pool = generate(&small_spec(sep)).unwrap();
        let plan = plan_membership(pool.len(), 4, 7).unwrap();
        let settings = TrainSettings {
            epochs: 10,
            checkpoint_interval: 5,
            batch_size: 8,
            master_seed: seed,
        };
        train_population(
            &pool,
            &plan,
            &ModelConfig { hidden_widths: vec![8] },
            &opt,
            &settings,
        )
        .unwrap()
    }

    #[test]
    fn record_count_covers_every_checkpoint_model_sample() {
        let pop = small_population(3.0, OptimizerConfig::adamw(1e-3, 0.0), 1);
        // checkpoints: 0, 5, 10
        assert_eq!(pop.scores.len(), 4 * 60 * 3);
        assert_eq!(pop.scores.epochs(), vec![0, 5, 10]);
        // exactly one record per key
        let mut keys: Vec<(u32, u32, u32)> = pop
            .scores
            .records
            .iter()
            .map(|r| (r.epoch, r.model, r.sample))
            .collect();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), pop.scores.len());
    }

    #[test]
    fn separable_pool_is_learned() {
        let pop = small_population(100.0, OptimizerConfig::adamw(2e-2, 0.0), 2);
        let last_epoch = *pop.scores.epochs().last().unwrap();
        let (mut hits, mut total) = (0u32, 0u32);
        for r in &pop.scores.records {
            if r.epoch == last_epoch && r.member == 1 {
                hits += r.correct as u32;
                total += 1;
            }
        }
        assert!(total > 0);
        assert!(
            hits as f64 / total as f64 > 0.99,
            "member accuracy {}",
            hits as f64 / total as f64
        );
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| small_population(2.0, OptimizerConfig::adamw(1e-3, 0.0), 9))
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.scores, b.scores);
        for (ra, rb) in a.runs.iter().zip(&b.runs) {
            assert_eq!(ra.model_id, rb.model_id);
            assert_eq!(ra.checkpoints, rb.checkpoints);
        }
    }

    #[test]
    fn loss_equals_negative_log_conf() {
        let pop = small_population(2.0, OptimizerConfig::adamw(1e-3, 0.0), 4);
        for r in &pop.scores.records {
            assert!((r.loss - (-r.conf.ln())).abs() < 1e-12);
            assert!(r.conf >= CONF_CLAMP && r.conf <= 1.0 - CONF_CLAMP);
        }
    }

    #[test]
    fn non_members_never_influence_parameters() {
        let pool = generate(&small_spec(2.0)).unwrap();
        let plan = plan_membership(pool.len(), 4, 7).unwrap();
        let settings = TrainSettings {
            epochs: 4,
            checkpoint_interval: 2,
            batch_size: 8,
            master_seed: 5,
        };
        let cfg = ModelConfig { hidden_widths: vec![8] };
        let opt = OptimizerConfig::adamw(1e-3, 0.0);
        let base = train_population(&pool, &plan, &cfg, &opt, &settings).unwrap();

        // scramble the features of model 0's non-members
        let mut scrambled = pool.clone();
        for s in 0..pool.len() {
            if !plan.is_member(0, s) {
                for d in 0..pool.dim {
                    scrambled.features[s * pool.dim + d] = -7.5 * (d as f64 + 1.0);
                }
            }
        }
        let perturbed = train_population(&scrambled, &plan, &cfg, &opt, &settings).unwrap();
        assert_eq!(base.runs[0].checkpoints, perturbed.runs[0].checkpoints);
    }

    #[test]
    fn sam_and_sgd_share_the_initial_checkpoint() {
        let sgd = small_population(2.0, OptimizerConfig::sgd_momentum(0.05, 0.9, 0.0), 11);
        let sam = small_population(2.0, OptimizerConfig::sam_over_sgd(0.05, 0.9, 0.0, 0.05), 11);
        assert_eq!(sgd.runs[0].checkpoints[0], sam.runs[0].checkpoints[0]);
        assert_ne!(
            sgd.runs[0].checkpoints.last().unwrap(),
            sam.runs[0].checkpoints.last().unwrap()
        );
    }

    #[test]
    fn divergence_reports_model_and_epoch() {
        let pool = generate(&small_spec(2.0)).unwrap();
        let plan = plan_membership(pool.len(), 4, 7).unwrap();
        let settings = TrainSettings {
            epochs: 2,
            checkpoint_interval: 1,
            batch_size: 8,
            master_seed: 5,
        };
        let insane = OptimizerConfig::sgd_momentum(1e300, 0.0, 0.0);
        let err = train_population(
            &pool,
            &plan,
            &ModelConfig { hidden_widths: vec![8] },
            &insane,
            &settings,
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::Diverged { .. } | Error::NonFinite(_)),
            "got {err:?}"
        );
    }

    #[test]
    fn settings_validation() {
        let mut s = TrainSettings {
            epochs: 10,
            checkpoint_interval: 3,
            batch_size: 8,
            master_seed: 0,
        };
        assert!(s.validate().is_err()); // 3 does not divide 10
        s.checkpoint_interval = 5;
        assert!(s.validate().is_ok());
        assert_eq!(s.checkpoint_epochs(), vec![0, 5, 10]);
    }

    #[test]
    fn score_log_roundtrips_jsonl_and_bin() {
        let dir = tempfile::tempdir().unwrap();
        let pop = small_population(2.0, OptimizerConfig::adamw(1e-3, 0.0), 13);

        let jpath = dir.path().join("scores.jsonl");
        save_scores_jsonl(&pop.scores, &jpath).unwrap();
        assert_eq!(load_scores_jsonl(&jpath).unwrap(), pop.scores);

        // jsonl field names are the exact contract
        let text = std::fs::read_to_string(&jpath).unwrap();
        let first_line = text.lines().next().unwrap();
        for key in [
            "\"epoch\":",
            "\"model\":",
            "\"sample\":",
            "\"member\":",
            "\"conf\":",
            "\"loss\":",
            "\"correct\":",
        ] {
            assert!(first_line.contains(key), "missing {key} in {first_line}");
        }

        let bpath = dir.path().join("scores.bin");
        save_scores_bin(&pop.scores, &bpath).unwrap();
        let loaded = load_scores_bin(&bpath).unwrap();
        assert_eq!(loaded.len(), pop.scores.len());
        for (a, b) in loaded.records.iter().zip(&pop.scores.records) {
            assert_eq!(
                (a.epoch, a.model, a.sample, a.member, a.correct),
                (b.epoch, b.model, b.sample, b.member, b.correct)
            );
            assert!((a.conf - b.conf).abs() < 1e-6);
            assert!((a.loss - b.loss).abs() < 1e-5);
        }
    }

    #[test]
    fn checkpoints_roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let pop = small_population(2.0, OptimizerConfig::adamw(1e-3, 0.0), 17);
        save_checkpoints(&pop.runs, dir.path()).unwrap();
        let loaded = load_checkpoint(dir.path(), 2, 10).unwrap();
        let original = pop.runs[2].params_at(10).unwrap();
        assert_eq!(loaded.layer_widths, original.layer_widths);
        for (a, b) in loaded.data.iter().zip(&original.data) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
