//! Stage orchestration: generate -> train -> attack -> dynamics ->
//! hardness -> correlate -> report, driven by one config into one output
//! directory.
//!
//! Every stage records its outputs with content hashes in `manifest.json`.
//! A stage whose outputs all still hash-verify is skipped on rerun; a
//! stage whose recorded inputs no longer match refuses to run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use vulnplane::attack::{self, VulnerabilityField};
use vulnplane::data;
use vulnplane::dynamics;
use vulnplane::hardness;
use vulnplane::nn;
use vulnplane::plane::Trajectory;
use vulnplane::train::{self, TrainRun};

use crate::config::{AttackMethod, PipelineConfig};
use crate::render;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Train,
    Attack,
    Dynamics,
    Hardness,
    Correlate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenData,
        Stage::Train,
        Stage::Attack,
        Stage::Dynamics,
        Stage::Hardness,
        Stage::Correlate,
        Stage::Report,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::Attack => "attack",
            Stage::Dynamics => "dynamics",
            Stage::Hardness => "hardness",
            Stage::Correlate => "correlate",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: String,
    pub wall_time_ms: u64,
    /// Relative artifact path -> sha256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_sha256: String,
    pub stages: BTreeMap<String, StageRecord>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl RunManifest {
    fn new(config_hash: String) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: config_hash,
            stages: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Option<Self>, CliError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::Config(format!("cannot parse {}: {e}", path.display())))
    }

    fn save(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        fs::write(&path, json)
            .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
    }

    /// Hash recorded for an artifact by whichever stage produced it.
    fn recorded_hash(&self, rel: &str) -> Option<&str> {
        self.stages
            .values()
            .find_map(|s| s.outputs.get(rel).map(String::as_str))
    }
}

/// What actually happened on one `run_stages` call.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub manifest: RunManifest,
    pub executed: Vec<&'static str>,
    pub skipped: Vec<&'static str>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Config(format!(
        "cannot read {}: {e}",
        path.display()
    )))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    out: &'a Path,
}

impl Ctx<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }
}

fn stage_err(stage: &'static str, e: impl std::fmt::Display) -> CliError {
    CliError::Stage {
        stage,
        message: e.to_string(),
    }
}

/// Runs every stage with resume semantics.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    out: &Path,
    threads: Option<usize>,
) -> Result<RunReport, CliError> {
    run_stages(cfg, out, &Stage::ALL, threads)
}

/// Runs the given stages in order inside a thread pool of the requested
/// size (None means the rayon default / VULNPLANE_THREADS).
pub fn run_stages(
    cfg: &PipelineConfig,
    out: &Path,
    stages: &[Stage],
    threads: Option<usize>,
) -> Result<RunReport, CliError> {
    cfg.validate()?;
    fs::create_dir_all(out)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", out.display())))?;

    let config_hash = cfg.sha256();
    let mut manifest = match RunManifest::load(out)? {
        Some(m) => {
            if m.config_sha256 != config_hash {
                return Err(CliError::Config(format!(
                    "output directory {} was produced by a different config \
                     (manifest hash {}, current {config_hash}); use a fresh directory",
                    out.display(),
                    m.config_sha256
                )));
            }
            m
        }
        None => RunManifest::new(config_hash),
    };

    let pool = build_thread_pool(threads)?;
    let mut executed = Vec::new();
    let mut skipped = Vec::new();
    for &stage in stages {
        if stage_is_current(&manifest, out, stage)? {
            skipped.push(stage.name());
            continue;
        }
        verify_inputs(&manifest, out, cfg, stage)?;
        let ctx = Ctx { cfg, out };
        let start = Instant::now();
        let (outputs, notes) = pool.install(|| dispatch(stage, &ctx))?;
        let mut hashed = BTreeMap::new();
        for rel in outputs {
            let h = sha256_file(&out.join(&rel))?;
            hashed.insert(rel, h);
        }
        manifest.stages.insert(
            stage.name().to_string(),
            StageRecord {
                status: "completed".into(),
                wall_time_ms: start.elapsed().as_millis() as u64,
                outputs: hashed,
                notes,
            },
        );
        manifest.save(out)?;
        executed.push(stage.name());
    }
    Ok(RunReport {
        manifest,
        executed,
        skipped,
    })
}

fn build_thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    let n = threads.or_else(|| {
        std::env::var("VULNPLANE_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = n {
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| CliError::Config(format!("cannot build thread pool: {e}")))
}

/// A stage is current when it completed before and every recorded output
/// still hashes to the recorded value.
fn stage_is_current(manifest: &RunManifest, out: &Path, stage: Stage) -> Result<bool, CliError> {
    let Some(record) = manifest.stages.get(stage.name()) else {
        return Ok(false);
    };
    if record.status != "completed" {
        return Ok(false);
    }
    for (rel, expected) in &record.outputs {
        let path = out.join(rel);
        if !path.exists() || sha256_file(&path)? != *expected {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Inputs a stage consumes, as relative paths. Paths recorded in the
/// manifest must hash-verify; unrecorded paths only need to exist.
fn stage_inputs(cfg: &PipelineConfig, stage: Stage) -> Vec<String> {
    let pool_files = || {
        vec![
            "pool/pool.meta.json".to_string(),
            "pool/features.f32".to_string(),
            "pool/labels.u16".to_string(),
        ]
    };
    let ckpts = || checkpoint_paths(cfg);
    match stage {
        Stage::GenData => vec![],
        Stage::Train => {
            let mut v = pool_files();
            v.push("plan.json".into());
            v
        }
        Stage::Attack => {
            let mut v = vec!["scores.jsonl".to_string(), "plan.json".to_string()];
            if cfg.attack.method == AttackMethod::Shokri {
                v.extend(pool_files());
                v.extend(ckpts());
            }
            v
        }
        Stage::Dynamics => vec!["states.jsonl".into()],
        Stage::Hardness => {
            let mut v = pool_files();
            v.push("plan.json".into());
            v.push("scores.jsonl".into());
            v.extend(ckpts());
            v
        }
        Stage::Correlate => vec!["hardness.csv".into(), "states.jsonl".into()],
        Stage::Report => vec!["states.jsonl".into(), "metrics.json".into(), "scores.jsonl".into()],
    }
}

fn checkpoint_paths(cfg: &PipelineConfig) -> Vec<String> {
    let epochs = cfg.train_settings().checkpoint_epochs();
    let mut v = Vec::new();
    for model in 0..cfg.n_shadow {
        for &e in &epochs {
            v.push(format!("runs/run_{model}/ckpt_{e}.params"));
        }
    }
    v
}

fn verify_inputs(
    manifest: &RunManifest,
    out: &Path,
    cfg: &PipelineConfig,
    stage: Stage,
) -> Result<(), CliError> {
    for rel in stage_inputs(cfg, stage) {
        let path = out.join(&rel);
        if !path.exists() {
            return Err(stage_err(
                stage.name(),
                format!("missing input {rel}; run the producing stage first"),
            ));
        }
        if let Some(expected) = manifest.recorded_hash(&rel) {
            let actual = sha256_file(&path)?;
            if actual != expected {
                return Err(stage_err(
                    stage.name(),
                    format!(
                        "input {rel} hash mismatch: manifest records {expected}, file hashes to {actual}"
                    ),
                ));
            }
        }
    }
    Ok(())
}

type StageOutput = (Vec<String>, Vec<String>);

fn dispatch(stage: Stage, ctx: &Ctx) -> Result<StageOutput, CliError> {
    match stage {
        Stage::GenData => gen_data(ctx),
        Stage::Train => train_stage(ctx),
        Stage::Attack => attack_stage(ctx),
        Stage::Dynamics => dynamics_stage(ctx),
        Stage::Hardness => hardness_stage(ctx),
        Stage::Correlate => correlate_stage(ctx),
        Stage::Report => report_stage(ctx),
    }
}

// ---------------------------------------------------------------------------
// Stage bodies
// ---------------------------------------------------------------------------

fn gen_data(ctx: &Ctx) -> Result<StageOutput, CliError> {
    let name = Stage::GenData.name();
    let pool = data::generate(&ctx.cfg.dataset).map_err(|e| stage_err(name, e))?;
    data::save_pool(&pool, Some(&ctx.cfg.dataset), ctx.path("pool")).map_err(|e| stage_err(name, e))?;
    let plan = data::plan_membership(pool.len(), ctx.cfg.n_shadow, ctx.cfg.plan_seed())
        .map_err(|e| stage_err(name, e))?;
    data::save_plan(&plan, ctx.path("plan.json")).map_err(|e| stage_err(name, e))?;
    Ok((
        vec![
            "pool/pool.meta.json".into(),
            "pool/features.f32".into(),
            "pool/labels.u16".into(),
            "plan.json".into(),
        ],
        vec![],
    ))
}

fn train_stage(ctx: &Ctx) -> Result<StageOutput, CliError> {
    let name = Stage::Train.name();
    let pool = data::load_pool(ctx.path("pool")).map_err(|e| stage_err(name, e))?;
    let plan = data::load_plan(ctx.path("plan.json")).map_err(|e| stage_err(name, e))?;
    let population = train::train_population(
        &pool,
        &plan,
        &ctx.cfg.model,
        &ctx.cfg.optimizer,
        &ctx.cfg.train_settings(),
    )
    .map_err(|e| stage_err(name, e))?;

    train::save_scores_jsonl(&population.scores, ctx.path("scores.jsonl"))
        .map_err(|e| stage_err(name, e))?;
    train::save_checkpoints(&population.runs, ctx.path("runs")).map_err(|e| stage_err(name, e))?;

    let mut outputs = vec!["scores.jsonl".to_string()];
    outputs.extend(checkpoint_paths(ctx.cfg));
    if ctx.cfg.emit_binary_scores {
        train::save_scores_bin(&population.scores, ctx.path("scores.bin"))
            .map_err(|e| stage_err(name, e))?;
        outputs.push("scores.bin".into());
    }
    Ok((outputs, vec![]))
}

/// Rebuilds the shadow runs from persisted checkpoints.
fn load_runs(ctx: &Ctx, plan: &data::MembershipPlan) -> Result<Vec<TrainRun>, CliError> {
    let name = "checkpoint-load";
    let settings = ctx.cfg.train_settings();
    let epochs = settings.checkpoint_epochs();
    let mut runs = Vec::with_capacity(ctx.cfg.n_shadow);
    for model_id in 0..ctx.cfg.n_shadow as u32 {
        let checkpoints: Result<Vec<_>, _> = epochs
            .iter()
            .map(|&e| train::load_checkpoint(ctx.path("runs"), model_id, e))
            .collect();
        runs.push(TrainRun {
            model_id,
            member_bits: (0..plan.n_samples)
                .map(|s| plan.is_member(model_id as usize, s))
                .collect(),
            checkpoint_epochs: epochs.clone(),
            checkpoints: checkpoints.map_err(|e| stage_err(name, e))?,
            rng_seed: train::model_seed(settings.master_seed, model_id),
        });
    }
    Ok(runs)
}

fn attack_stage(ctx: &Ctx) -> Result<StageOutput, CliError> {
    let name = Stage::Attack.name();
    let plan = data::load_plan(ctx.path("plan.json")).map_err(|e| stage_err(name, e))?;
    let field = match ctx.cfg.attack.method {
        AttackMethod::Lira => {
            let scores =
                train::load_scores_jsonl(ctx.path("scores.jsonl")).map_err(|e| stage_err(name, e))?;
            attack::vulnerability_field(&scores, &plan, &ctx.cfg.attack.lira())
                .map_err(|e| stage_err(name, e))?
        }
        AttackMethod::Shokri => {
            let pool = data::load_pool(ctx.path("pool")).map_err(|e| stage_err(name, e))?;
            let runs = load_runs(ctx, &plan)?;
            let epochs = ctx.cfg.train_settings().checkpoint_epochs();
            let mut posteriors = Vec::with_capacity(epochs.len());
            for &epoch in &epochs {
                let mut per_model = Vec::with_capacity(runs.len());
                for run in &runs {
                    let params = run.params_at(epoch).expect("checkpoint present");
                    let probs: Result<Vec<Vec<f64>>, _> = (0..pool.len())
                        .map(|s| nn::forward(params, pool.feature_row(s)))
                        .collect();
                    per_model.push(probs.map_err(|e| stage_err(name, e))?);
                }
                posteriors.push(per_model);
            }
            attack::shokri_field(
                &epochs,
                &posteriors,
                &pool.labels,
                &plan,
                pool.n_classes,
                ctx.cfg.attack.threshold,
            )
            .map_err(|e| stage_err(name, e))?
        }
    };
    attack::save_states_jsonl(&field, ctx.path("states.jsonl")).map_err(|e| stage_err(name, e))?;
    Ok((vec!["states.jsonl".into()], vec![]))
}

fn dynamics_stage(ctx: &Ctx) -> Result<StageOutput, CliError> {
    let name = Stage::Dynamics.name();
    let field =
        attack::load_states_jsonl(ctx.path("states.jsonl")).map_err(|e| stage_err(name, e))?;
    let trajs = &field.trajectories;

    let series = dynamics::transition_series(trajs).map_err(|e| stage_err(name, e))?;
    dynamics::save_transitions_csv(&series, ctx.path("transitions.csv"))
        .map_err(|e| stage_err(name, e))?;

    let summary =
        dynamics::population_summary(trajs, &ctx.cfg.summary_config()).map_err(|e| stage_err(name, e))?;
    dynamics::save_metrics_json(&summary, ctx.path("metrics.json"))
        .map_err(|e| stage_err(name, e))?;
    dynamics::save_clusters_csv(
        &field.epochs,
        &summary.cluster_counts,
        ctx.path("clusters.csv"),
    )
    .map_err(|e| stage_err(name, e))?;

    let mut outputs = vec![
        "transitions.csv".to_string(),
        "metrics.json".to_string(),
        "clusters.csv".to_string(),
    ];
    let mut notes = Vec::new();
    match dynamics::exposure_curve(trajs, ctx.cfg.theta_vuln, ctx.cfg.budget_rule.to_rule()) {
        Ok(curve) => {
            dynamics::save_exposure_csv(&curve, ctx.path("exposure.csv"))
                .map_err(|e| stage_err(name, e))?;
            outputs.push("exposure.csv".into());
        }
        Err(vulnplane::Error::EmptyVulnerableSet) => {
            notes.push("exposure curve undefined: empty vulnerable set".into());
        }
        Err(e) => return Err(stage_err(name, e)),
    }
    Ok((outputs, notes))
}

fn hardness_stage(ctx: &Ctx) -> Result<StageOutput, CliError> {
    let name = Stage::Hardness.name();
    let pool = data::load_pool(ctx.path("pool")).map_err(|e| stage_err(name, e))?;
    let plan = data::load_plan(ctx.path("plan.json")).map_err(|e| stage_err(name, e))?;
    let scores =
        train::load_scores_jsonl(ctx.path("scores.jsonl")).map_err(|e| stage_err(name, e))?;
    let runs = load_runs(ctx, &plan)?;
    let profiles = hardness::hardness_profiles(&runs, &pool, &scores, &ctx.cfg.hardness_config())
        .map_err(|e| stage_err(name, e))?;
    hardness::save_hardness_csv(&profiles, ctx.path("hardness.csv"))
        .map_err(|e| stage_err(name, e))?;
    let notes = vec![
        "influence computed on each sample's lowest-id in-model at the final checkpoint".into(),
        "uncertainty ensemble: out-model posteriors at the final checkpoint".into(),
        "grad_norm averaged over all in-models and checkpoints".into(),
    ];
    Ok((vec!["hardness.csv".into()], notes))
}

fn correlate_stage(ctx: &Ctx) -> Result<StageOutput, CliError> {
    let name = Stage::Correlate.name();
    let profiles =
        hardness::load_hardness_csv(ctx.path("hardness.csv")).map_err(|e| stage_err(name, e))?;
    let field =
        attack::load_states_jsonl(ctx.path("states.jsonl")).map_err(|e| stage_err(name, e))?;
    let table = hardness::correlation_table(&profiles, &field.trajectories, ctx.cfg.theta_vuln)
        .map_err(|e| stage_err(name, e))?;
    hardness::save_correlations_csv(&table, ctx.path("correlations.csv"))
        .map_err(|e| stage_err(name, e))?;
    let n_checkpoints = field.epochs.len();
    let notes = vec![format!(
        "iteration_learned `never` mapped to {} (T + 1, after every finite checkpoint) for correlations",
        n_checkpoints + 1
    )];
    Ok((vec!["correlations.csv".into()], notes))
}

fn report_stage(ctx: &Ctx) -> Result<StageOutput, CliError> {
    let name = Stage::Report.name();
    let field =
        attack::load_states_jsonl(ctx.path("states.jsonl")).map_err(|e| stage_err(name, e))?;
    let summary =
        dynamics::load_metrics_json(ctx.path("metrics.json")).map_err(|e| stage_err(name, e))?;
    let scores =
        train::load_scores_jsonl(ctx.path("scores.jsonl")).map_err(|e| stage_err(name, e))?;
    let mut outputs = Vec::new();
    let mut notes = Vec::new();
    let last = field.epochs.len() - 1;
    let final_epoch = field.epochs[last];

    // plane with the most vulnerable samples' trajectories overlaid
    let mut by_alpha: Vec<&Trajectory> = field.trajectories.iter().collect();
    by_alpha.sort_by(|a, b| {
        b.final_advantage()
            .abs()
            .partial_cmp(&a.final_advantage().abs())
            .unwrap()
            .then(a.sample_id.cmp(&b.sample_id))
    });
    let overlays: Vec<&Trajectory> = by_alpha.into_iter().take(8).collect();
    let plane_svg = render::render_plane(
        &field.states_at(last),
        &overlays,
        &render::PlaneOptions {
            title: format!("vulnerability plane, epoch {final_epoch}"),
            marginals: true,
        },
    );
    write_artifact(ctx, "plane.svg", plane_svg.as_bytes(), &mut outputs)?;

    // entropy over training
    let entropy_series = vec![render::Series {
        label: "H(t)".into(),
        points: field
            .epochs
            .iter()
            .zip(&summary.entropy_series)
            .map(|(&e, &h)| (e as f64, h))
            .collect(),
    }];
    let (svg, w) = render::render_curves(
        &entropy_series,
        &render::CurveOptions {
            title: "spatial entropy".into(),
            x_label: "epoch".into(),
            y_label: "H (nats)".into(),
            y_range: None,
        },
    );
    notes.extend(w);
    write_artifact(ctx, "entropy.svg", svg.as_bytes(), &mut outputs)?;

    // robust-to-vulnerable transition probability
    let rv = dynamics::robust_to_vulnerable_series(&field.trajectories)
        .map_err(|e| stage_err(name, e))?;
    let rv_points: Vec<(f64, f64)> = field.epochs[..last]
        .iter()
        .zip(&rv)
        .filter_map(|(&e, p)| p.map(|p| (e as f64, p)))
        .collect();
    let (svg, w) = render::render_curves(
        &[render::Series {
            label: "a_{11,31}".into(),
            points: rv_points,
        }],
        &render::CurveOptions {
            title: "robust-to-vulnerable transition probability".into(),
            x_label: "epoch".into(),
            y_label: "probability".into(),
            y_range: Some((0.0, 1.0)),
        },
    );
    notes.extend(w);
    write_artifact(ctx, "transitions.svg", svg.as_bytes(), &mut outputs)?;

    // exposure curve, when the vulnerable set is non-empty
    match dynamics::exposure_curve(
        &field.trajectories,
        ctx.cfg.theta_vuln,
        ctx.cfg.budget_rule.to_rule(),
    ) {
        Ok(curve) => {
            let pts: Vec<(f64, f64)> = curve
                .checkpoints
                .iter()
                .zip(&curve.coverage)
                .map(|(&e, &c)| (e as f64, c))
                .collect();
            let (svg, w) = render::render_curves(
                &[render::Series {
                    label: "coverage".into(),
                    points: pts,
                }],
                &render::CurveOptions {
                    title: "early exposure of the final vulnerable set".into(),
                    x_label: "epoch".into(),
                    y_label: "coverage".into(),
                    y_range: Some((0.0, 1.0)),
                },
            );
            notes.extend(w);
            write_artifact(ctx, "exposure.svg", svg.as_bytes(), &mut outputs)?;
        }
        Err(vulnplane::Error::EmptyVulnerableSet) => {
            notes.push("exposure plot skipped: empty vulnerable set".into());
        }
        Err(e) => return Err(stage_err(name, e)),
    }

    // member-loss distributions of high- vs low-travel samples
    match dynamics::travel_stratification(&field.trajectories, ctx.cfg.travel_quantile) {
        Ok((high, low)) => {
            let collect = |ids: &[u32]| -> Vec<f64> {
                let set: std::collections::BTreeSet<u32> = ids.iter().copied().collect();
                scores
                    .records
                    .iter()
                    .filter(|r| r.epoch == final_epoch && r.member == 1 && set.contains(&r.sample))
                    .map(|r| r.loss)
                    .collect()
            };
            let svg = render::render_histogram(
                &[
                    render::HistGroup {
                        label: "high-travel".into(),
                        values: collect(&high),
                    },
                    render::HistGroup {
                        label: "low-travel".into(),
                        values: collect(&low),
                    },
                ],
                24,
                &format!("member losses at epoch {final_epoch}"),
            );
            write_artifact(ctx, "loss_hist.svg", svg.as_bytes(), &mut outputs)?;
        }
        Err(e) => {
            notes.push(format!("loss histogram skipped: {e}"));
        }
    }

    Ok((outputs, notes))
}

fn write_artifact(
    ctx: &Ctx,
    rel: &str,
    bytes: &[u8],
    outputs: &mut Vec<String>,
) -> Result<(), CliError> {
    fs::write(ctx.path(rel), bytes)
        .map_err(|e| stage_err("report", format!("cannot write {rel}: {e}")))?;
    outputs.push(rel.to_string());
    Ok(())
}

/// Convenience for tests and tooling: the assembled field of a finished
/// run.
pub fn load_field(out: &Path) -> Result<VulnerabilityField, CliError> {
    attack::load_states_jsonl(out.join("states.jsonl"))
        .map_err(|e| CliError::Config(format!("cannot load states: {e}")))
}
