//! Config-driven runs: single localization runs, ablation suites and
//! particle-count sweeps over synthetic airways.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::airway::{generate_tree, load_tree, AirwayError, AirwayTree, TreeGenSpec};
use crate::filter::{self, FilterConfig, FilterError, FilterMode, Observations, ParticleFilter, StepDiagnostics};
use crate::metrics::{mean_std, FrameErrors, GenerationAte, MetricsError, Throughput, TrajectoryReport};
use crate::perception::{
    DepthProvider, LandmarkProvider, OdometryProvider, PerceptionConfig, SimulatedPerception,
};
use crate::rng;
use crate::sim::{simulate_trajectory, InsertionSpec, InsertionTarget, SimError};
use crate::trajectory::{Trajectory, TrajectoryError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("airway: {0}")]
    Airway(#[from] AirwayError),
    #[error("trajectory: {0}")]
    Trajectory(#[from] TrajectoryError),
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("filter: {0}")]
    Filter(#[from] FilterError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TreeSource {
    File { path: PathBuf },
    /// Generated from the run seed.
    Generated { spec: TreeGenSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TrajectorySource {
    /// Ground-truth CSV.
    File { path: PathBuf },
    Simulated { spec: InsertionSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    /// Independent trees; seed `i` of a suite started with seed `s` is `s + i`.
    pub seeds: usize,
    /// Insertions per tree, each to a different leaf.
    pub trajectories_per_seed: usize,
    /// Run independent jobs on the rayon pool.
    pub parallel_runs: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: 10,
            trajectories_per_seed: 4,
            parallel_runs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub n_particles: Vec<usize>,
    pub seeds: usize,
    pub trajectories_per_seed: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n_particles: vec![27, 54, 108, 216, 432],
            seeds: 3,
            trajectories_per_seed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub tree: TreeSource,
    pub trajectory: TrajectorySource,
    pub filter: FilterConfig,
    pub perception: PerceptionConfig,
    /// Used when no seed is given on the command line.
    pub seed: u64,
    pub suite: SuiteConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            tree: TreeSource::Generated {
                spec: TreeGenSpec::default(),
            },
            trajectory: TrajectorySource::Simulated {
                spec: InsertionSpec::default(),
            },
            filter: FilterConfig::default(),
            perception: PerceptionConfig::default(),
            seed: 0,
            suite: SuiteConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a config; relative file paths are resolved against the
    /// config's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let TreeSource::File { path } = &mut cfg.tree {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        if let TrajectorySource::File { path } = &mut cfg.trajectory {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.filter.validate()?;
        for cam in [&self.perception.camera, &self.perception.ncc_camera] {
            cam.validate().map_err(FilterError::from)?;
        }
        self.perception.odometry_noise.validate().map_err(FilterError::from)?;
        let lm = &self.perception.landmarks;
        if !(lm.sigma_depth >= 0.0 && (0.0..=1.0).contains(&lm.label_swap_prob) && lm.max_points >= 1) {
            return Err(ExperimentError::Config("invalid landmark noise settings".into()));
        }
        if !(self.perception.sigma_depth_map >= 0.0) {
            return Err(ExperimentError::Config("sigma_depth_map must be >= 0".into()));
        }
        match &self.tree {
            TreeSource::Generated { spec } => spec.validate()?,
            TreeSource::File { path } if !path.is_file() => {
                return Err(ExperimentError::Config(format!("tree file {} does not exist", path.display())))
            }
            TreeSource::File { .. } => {}
        }
        match &self.trajectory {
            TrajectorySource::Simulated { spec } => spec.validate()?,
            TrajectorySource::File { path } if !path.is_file() => {
                return Err(ExperimentError::Config(format!(
                    "trajectory file {} does not exist",
                    path.display()
                )))
            }
            TrajectorySource::File { .. } => {}
        }
        if self.suite.seeds == 0 || self.suite.trajectories_per_seed == 0 {
            return Err(ExperimentError::Config("suite needs at least one seed and trajectory".into()));
        }
        if self.sweep.n_particles.is_empty() || self.sweep.n_particles.contains(&0) {
            return Err(ExperimentError::Config("sweep needs a nonempty list of positive particle counts".into()));
        }
        if self.sweep.seeds == 0 || self.sweep.trajectories_per_seed == 0 {
            return Err(ExperimentError::Config("sweep needs at least one seed and trajectory".into()));
        }
        Ok(())
    }

    pub fn build_tree(&self, seed: u64) -> Result<AirwayTree, ExperimentError> {
        match &self.tree {
            TreeSource::File { path } => Ok(load_tree(path)?),
            TreeSource::Generated { spec } => Ok(generate_tree(spec, &mut rng::stream_rng(seed, rng::TREE, 0))?),
        }
    }

    pub fn ground_truth(&self, tree: &AirwayTree, seed: u64) -> Result<Trajectory, ExperimentError> {
        match &self.trajectory {
            TrajectorySource::File { path } => Ok(Trajectory::load(path)?),
            TrajectorySource::Simulated { spec } => {
                Ok(simulate_trajectory(tree, spec, &mut rng::stream_rng(seed, rng::TRAJECTORY, 0))?)
            }
        }
    }
}

/// Localization method compared in ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Filter(FilterMode),
    /// Composition of odometry deltas from the true start pose.
    DeadReckoning,
}

impl Method {
    pub const ABLATION: [Method; 4] = [
        Method::Filter(FilterMode::Full),
        Method::Filter(FilterMode::NoBsa),
        Method::Filter(FilterMode::NoDvr),
        Method::DeadReckoning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Filter(mode) => mode.name(),
            Method::DeadReckoning => "dead_reckoning",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub method: Method,
    pub estimate: Trajectory,
    pub diagnostics: Vec<StepDiagnostics>,
    pub errors: FrameErrors,
    pub report: TrajectoryReport,
}

/// Seeds of one localization run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub perception: u64,
    pub filter: u64,
}

impl RunSeeds {
    pub fn single(seed: u64) -> Self {
        Self {
            perception: seed,
            filter: rng::derive_seed(seed, rng::FILTER),
        }
    }
}

/// Localizes along `gt` with simulated perception.
pub fn run_method(
    tree: &AirwayTree,
    gt: &Trajectory,
    method: Method,
    filter_cfg: &FilterConfig,
    perception: &PerceptionConfig,
    seeds: RunSeeds,
) -> Result<RunOutput, ExperimentError> {
    if gt.is_empty() {
        return Err(ExperimentError::Config("ground-truth trajectory is empty".into()));
    }
    let mut sim = SimulatedPerception::new(tree, &gt.poses, perception.clone(), seeds.perception);
    let mut poses = Vec::with_capacity(gt.len());
    let mut diagnostics = Vec::new();
    match method {
        Method::DeadReckoning => {
            let mut est = gt.poses[0];
            poses.push(est);
            for k in 1..gt.len() {
                est = est.compose(&sim.odometry(k).delta);
                poses.push(est);
            }
        }
        Method::Filter(mode) => {
            let cfg = FilterConfig {
                mode,
                ..filter_cfg.clone()
            };
            let pf = ParticleFilter::new(tree, cfg, perception.camera, perception.ncc_camera)?;
            let mut frng = rng::stream_rng(seeds.filter, rng::FILTER, 0);
            let mut set = pf.initialize(&gt.poses[0], &mut frng);
            poses.push(filter::estimate(&set));
            for k in 1..gt.len() {
                let odo = sim.odometry(k);
                let landmarks = if mode == FilterMode::Full { sim.landmarks(k) } else { Vec::new() };
                let depth = (mode == FilterMode::NoBsa).then(|| sim.depth(k));
                let obs = Observations {
                    landmarks: &landmarks,
                    depth: depth.as_ref(),
                };
                let (pose, diag) = pf.step(&mut set, &odo, &obs, &mut frng);
                poses.push(pose);
                diagnostics.push(diag);
            }
        }
    }
    let estimate = Trajectory {
        times: gt.times.clone(),
        poses,
    };
    let errors = FrameErrors::compute(&estimate, gt, tree)?;
    let report = errors.report(&diagnostics);
    Ok(RunOutput {
        method,
        estimate,
        diagnostics,
        errors,
        report,
    })
}

/// Single run with the configured filter mode.
pub fn run(cfg: &ExperimentConfig, seed: u64) -> Result<(AirwayTree, Trajectory, RunOutput), ExperimentError> {
    cfg.validate()?;
    let tree = cfg.build_tree(seed)?;
    let gt = cfg.ground_truth(&tree, seed)?;
    let out = run_method(
        &tree,
        &gt,
        Method::Filter(cfg.filter.mode),
        &cfg.filter,
        &cfg.perception,
        RunSeeds::single(seed),
    )?;
    Ok((tree, gt, out))
}

#[derive(Serialize)]
struct RunReportFile<'a> {
    method: &'static str,
    seed: u64,
    #[serde(flatten)]
    report: &'a TrajectoryReport,
}

fn create_out_dir(dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Pretty JSON of the effective config, so outputs are self-describing.
pub fn write_config_echo(dir: &Path, cfg: &ExperimentConfig, seed: u64) -> Result<(), ExperimentError> {
    let mut value = serde_json::to_value(cfg)?;
    value["seed"] = seed.into();
    write_file(&dir.join("config.json"), serde_json::to_string_pretty(&value)?.as_bytes())
}

/// Writes `estimate.csv`, `ground_truth.csv`, `report.json`, `errors.csv`,
/// `diag.jsonl` and `config.json`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, seed: u64, gt: &Trajectory, out: &RunOutput) -> Result<(), ExperimentError> {
    let mut estimate = Vec::new();
    out.estimate.write_csv(&mut estimate)?;
    let mut truth = Vec::new();
    gt.write_csv(&mut truth)?;
    let mut errors = Vec::new();
    out.errors.write_csv(&mut errors)?;
    let mut diag = Vec::new();
    for d in &out.diagnostics {
        serde_json::to_writer(&mut diag, d)?;
        diag.push(b'\n');
    }
    let report = serde_json::to_string_pretty(&RunReportFile {
        method: out.method.name(),
        seed,
        report: &out.report,
    })?;

    create_out_dir(dir)?;
    write_file(&dir.join("estimate.csv"), &estimate)?;
    write_file(&dir.join("ground_truth.csv"), &truth)?;
    write_file(&dir.join("errors.csv"), &errors)?;
    write_file(&dir.join("diag.jsonl"), &diag)?;
    write_file(&dir.join("report.json"), report.as_bytes())?;
    write_config_echo(dir, cfg, seed)
}

/// One (tree, insertion) pair of a suite.
struct Job {
    seed: u64,
    trajectory: usize,
    /// Index into the suite inputs.
    input: usize,
}

struct JobInput {
    tree: AirwayTree,
    gts: Vec<Trajectory>,
}

/// Trees and ground truths for a suite: one tree per seed and insertions to
/// distinct leaves (cycling if the tree has fewer leaves than requested).
fn suite_inputs(cfg: &ExperimentConfig, seed: u64, seeds: usize, per_seed: usize) -> Result<Vec<(u64, JobInput)>, ExperimentError> {
    let mut inputs = Vec::with_capacity(seeds);
    for i in 0..seeds {
        let s = seed.wrapping_add(i as u64);
        let tree = cfg.build_tree(s)?;
        let gts = match &cfg.trajectory {
            TrajectorySource::File { path } => vec![Trajectory::load(path)?],
            TrajectorySource::Simulated { spec } => {
                let mut leaves: Vec<String> = tree.leaves().iter().map(|b| b.anatomical_label.clone()).collect();
                leaves.shuffle(&mut rng::stream_rng(s, rng::TRAJECTORY, 0));
                (0..per_seed)
                    .map(|j| {
                        let leaf_spec = InsertionSpec {
                            target: InsertionTarget::Leaf {
                                label: leaves[j % leaves.len()].clone(),
                            },
                            ..spec.clone()
                        };
                        simulate_trajectory(&tree, &leaf_spec, &mut rng::stream_rng(s, rng::TRAJECTORY, j as u64 + 1))
                    })
                    .collect::<Result<_, _>>()?
            }
        };
        inputs.push((s, JobInput { tree, gts }));
    }
    Ok(inputs)
}

fn job_seeds(job: &Job) -> RunSeeds {
    RunSeeds {
        perception: rng::derive_seed(job.seed, 1000 + job.trajectory as u64),
        filter: rng::derive_seed(job.seed, 2000 + job.trajectory as u64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub trajectory: usize,
    pub method: String,
    pub n_particles: usize,
    pub frames: usize,
    pub ate_mean: f64,
    pub ate_std: f64,
    pub sr5: f64,
    pub sr10: f64,
    pub steps_per_second: Option<f64>,
    pub degenerate_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    /// Median over runs of the per-run mean error.
    pub ate_median: f64,
    /// Mean and std over all frames of all runs.
    pub ate_mean: f64,
    pub ate_std_frames: f64,
    /// Std over runs of the per-run mean error.
    pub ate_std_runs: f64,
    pub sr5: f64,
    pub sr10: f64,
    pub steps_per_second: Option<f64>,
    pub per_generation: std::collections::BTreeMap<u32, GenerationAte>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn summarize(method: Method, outs: &[&RunOutput]) -> MethodSummary {
    let per_run: Vec<f64> = outs.iter().map(|o| o.report.ate_mean).collect();
    let mut all = FrameErrors {
        times: Vec::new(),
        errors: Vec::new(),
        generations: Vec::new(),
    };
    let mut diags = Vec::new();
    for o in outs {
        all.times.extend(&o.errors.times);
        all.errors.extend(&o.errors.errors);
        all.generations.extend(&o.errors.generations);
        diags.extend(&o.diagnostics);
    }
    let pooled = all.report(&diags);
    MethodSummary {
        method: method.name().to_string(),
        runs: outs.len(),
        ate_median: median(&per_run),
        ate_mean: pooled.ate_mean,
        ate_std_frames: pooled.ate_std,
        ate_std_runs: mean_std(&per_run).1,
        sr5: pooled.sr5,
        sr10: pooled.sr10,
        steps_per_second: pooled.steps_per_second(),
        per_generation: pooled.per_generation,
    }
}

fn summary_row(job: &Job, n_particles: usize, o: &RunOutput) -> RunSummary {
    RunSummary {
        seed: job.seed,
        trajectory: job.trajectory,
        method: o.method.name().to_string(),
        n_particles,
        frames: o.report.frames,
        ate_mean: o.report.ate_mean,
        ate_std: o.report.ate_std,
        sr5: o.report.sr5,
        sr10: o.report.sr10,
        steps_per_second: o.report.steps_per_second(),
        degenerate_steps: o.report.degenerate_steps,
    }
}

fn run_jobs<T: Send>(parallel: bool, jobs: Vec<Job>, f: impl Fn(&Job) -> Result<T, ExperimentError> + Sync) -> Result<Vec<(Job, T)>, ExperimentError> {
    use rayon::prelude::*;
    let results: Vec<Result<T, ExperimentError>> = if parallel {
        jobs.par_iter().map(&f).collect()
    } else {
        jobs.iter().map(&f).collect()
    };
    jobs.into_iter().zip(results).map(|(j, r)| r.map(|v| (j, v))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub methods: Vec<MethodSummary>,
    pub runs: Vec<RunSummary>,
}

impl AblationReport {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// Writes `ablation.csv`, `runs.csv`, `per_generation.csv`,
    /// `report.json` and `config.json`.
    pub fn write(&self, dir: &Path, cfg: &ExperimentConfig) -> Result<(), ExperimentError> {
        let mut table = csv::Writer::from_writer(Vec::new());
        table.write_record(["method", "runs", "ate_median", "ate_mean", "ate_std_frames", "ate_std_runs", "sr5", "sr10", "steps_per_second"])?;
        for m in &self.methods {
            table.write_record([
                m.method.clone(),
                m.runs.to_string(),
                m.ate_median.to_string(),
                m.ate_mean.to_string(),
                m.ate_std_frames.to_string(),
                m.ate_std_runs.to_string(),
                m.sr5.to_string(),
                m.sr10.to_string(),
                m.steps_per_second.map_or(String::new(), |v| v.to_string()),
            ])?;
        }
        let table = table.into_inner().map_err(|e| ExperimentError::Config(e.to_string()))?;
        let runs = runs_csv(&self.runs)?;
        let mut generations = csv::Writer::from_writer(Vec::new());
        generations.write_record(["method", "generation", "ate_mean", "count"])?;
        for m in &self.methods {
            for (g, s) in &m.per_generation {
                generations.write_record([m.method.clone(), g.to_string(), s.ate_mean.to_string(), s.count.to_string()])?;
            }
        }
        let generations = generations.into_inner().map_err(|e| ExperimentError::Config(e.to_string()))?;
        let report = serde_json::to_string_pretty(self)?;

        create_out_dir(dir)?;
        write_file(&dir.join("ablation.csv"), &table)?;
        write_file(&dir.join("runs.csv"), &runs)?;
        write_file(&dir.join("per_generation.csv"), &generations)?;
        write_file(&dir.join("report.json"), report.as_bytes())?;
        write_config_echo(dir, cfg, self.seed)
    }
}

fn runs_csv(rows: &[RunSummary]) -> Result<Vec<u8>, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| ExperimentError::Config(e.to_string()))
}

/// Every ablation method on the same trees, insertions and perception
/// streams.
pub fn ablation(cfg: &ExperimentConfig, seed: u64) -> Result<AblationReport, ExperimentError> {
    cfg.validate()?;
    let inputs = suite_inputs(cfg, seed, cfg.suite.seeds, cfg.suite.trajectories_per_seed)?;
    let mut jobs = Vec::new();
    for (i, (s, input)) in inputs.iter().enumerate() {
        for j in 0..input.gts.len() {
            jobs.push(Job {
                seed: *s,
                trajectory: j,
                input: i,
            });
        }
    }
    let results = run_jobs(cfg.suite.parallel_runs, jobs, |job| {
        let input = &inputs[job.input].1;
        Method::ABLATION
            .iter()
            .map(|m| run_method(&input.tree, &input.gts[job.trajectory], *m, &cfg.filter, &cfg.perception, job_seeds(job)))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let mut runs = Vec::new();
    for (job, outs) in &results {
        for o in outs {
            runs.push(summary_row(job, cfg.filter.n_particles, o));
        }
    }
    let methods = Method::ABLATION
        .iter()
        .enumerate()
        .map(|(mi, m)| {
            let outs: Vec<&RunOutput> = results.iter().map(|(_, o)| &o[mi]).collect();
            summarize(*m, &outs)
        })
        .collect();
    Ok(AblationReport { seed, methods, runs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_particles: usize,
    /// Mean over runs of the per-run mean error, mm.
    pub ate_mean: f64,
    /// `100 · lowest ate_mean / ate_mean`.
    pub accuracy_pct: f64,
    /// Median over runs.
    pub steps_per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    pub rows: Vec<SweepRow>,
    pub runs: Vec<RunSummary>,
}

impl SweepReport {
    /// Writes `sweep.csv`, `runs.csv`, `report.json` and `config.json`.
    pub fn write(&self, dir: &Path, cfg: &ExperimentConfig) -> Result<(), ExperimentError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let table = w.into_inner().map_err(|e| ExperimentError::Config(e.to_string()))?;
        let runs = runs_csv(&self.runs)?;
        let report = serde_json::to_string_pretty(self)?;
        create_out_dir(dir)?;
        write_file(&dir.join("sweep.csv"), &table)?;
        write_file(&dir.join("runs.csv"), &runs)?;
        write_file(&dir.join("report.json"), report.as_bytes())?;
        write_config_echo(dir, cfg, self.seed)
    }
}

/// Configured filter mode at each particle count. Runs are sequential so
/// the timings are comparable.
pub fn sweep(cfg: &ExperimentConfig, seed: u64) -> Result<SweepReport, ExperimentError> {
    cfg.validate()?;
    let inputs = suite_inputs(cfg, seed, cfg.sweep.seeds, cfg.sweep.trajectories_per_seed)?;
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for &n in &cfg.sweep.n_particles {
        let filter_cfg = FilterConfig {
            n_particles: n,
            ..cfg.filter.clone()
        };
        let mut ates = Vec::new();
        let mut rates = Vec::new();
        for (i, (s, input)) in inputs.iter().enumerate() {
            for (j, gt) in input.gts.iter().enumerate() {
                let job = Job {
                    seed: *s,
                    trajectory: j,
                    input: i,
                };
                let out = run_method(&input.tree, gt, Method::Filter(cfg.filter.mode), &filter_cfg, &cfg.perception, job_seeds(&job))?;
                ates.push(out.report.ate_mean);
                if let Some(r) = out.report.steps_per_second() {
                    rates.push(r);
                }
                runs.push(summary_row(&job, n, &out));
            }
        }
        rows.push(SweepRow {
            n_particles: n,
            ate_mean: ates.iter().sum::<f64>() / ates.len() as f64,
            accuracy_pct: 0.0,
            steps_per_second: median(&rates),
        });
    }
    let best = rows.iter().map(|r| r.ate_mean).fold(f64::INFINITY, f64::min);
    for r in &mut rows {
        r.accuracy_pct = if r.ate_mean > 0.0 { 100.0 * best / r.ate_mean } else { 100.0 };
    }
    Ok(SweepReport { seed, rows, runs })
}

/// Pooled phase timings of a set of runs.
pub fn pooled_throughput(outs: &[RunOutput]) -> Option<Throughput> {
    let diags: Vec<StepDiagnostics> = outs.iter().flat_map(|o| o.diagnostics.iter().copied()).collect();
    crate::metrics::throughput(&diags)
}

/// Writes `tree.json` for the configured tree source.
pub fn gen_tree(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<AirwayTree, ExperimentError> {
    cfg.validate()?;
    let tree = cfg.build_tree(seed)?;
    let json = crate::airway::tree_to_json(&tree)?;
    create_out_dir(dir)?;
    write_file(&dir.join("tree.json"), json.as_bytes())?;
    write_config_echo(dir, cfg, seed)?;
    Ok(tree)
}

/// Writes `tree.json` and the simulated `ground_truth.csv`.
pub fn sim_traj(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<Trajectory, ExperimentError> {
    cfg.validate()?;
    let tree = cfg.build_tree(seed)?;
    let gt = cfg.ground_truth(&tree, seed)?;
    let json = crate::airway::tree_to_json(&tree)?;
    let mut csv_bytes = Vec::new();
    gt.write_csv(&mut csv_bytes)?;
    create_out_dir(dir)?;
    write_file(&dir.join("tree.json"), json.as_bytes())?;
    write_file(&dir.join("ground_truth.csv"), &csv_bytes)?;
    write_config_echo(dir, cfg, seed)?;
    Ok(gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::MotionNoise;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            tree: TreeSource::Generated {
                spec: TreeGenSpec {
                    max_generation: 2,
                    ..TreeGenSpec::default()
                },
            },
            filter: FilterConfig {
                n_particles: 32,
                ..FilterConfig::default()
            },
            suite: SuiteConfig {
                seeds: 2,
                trajectories_per_seed: 2,
                parallel_runs: false,
            },
            sweep: SweepConfig {
                n_particles: vec![8, 32],
                seeds: 1,
                trajectories_per_seed: 1,
            },
            ..ExperimentConfig::default()
        }
    }

    fn zero_noise(mut cfg: ExperimentConfig) -> ExperimentConfig {
        cfg.perception = PerceptionConfig::noiseless();
        cfg.filter.motion_noise = MotionNoise::zero();
        cfg.filter.init_noise = MotionNoise::zero();
        cfg
    }

    #[test]
    fn config_defaults_and_json() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"seed": 4, "filter": {"n_particles": 9}}"#).unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.filter.n_particles, 9);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 4}"#).is_err());
    }

    #[test]
    fn missing_tree_file_is_a_config_error() {
        let cfg = ExperimentConfig {
            tree: TreeSource::File {
                path: "/definitely/not/here.json".into(),
            },
            ..ExperimentConfig::default()
        };
        assert!(matches!(run(&cfg, 1), Err(ExperimentError::Config(_))));
    }

    #[test]
    fn zero_noise_run_is_exact() {
        let (_, gt, out) = run(&zero_noise(small()), 3).unwrap();
        assert_eq!(out.estimate.len(), gt.len());
        assert!(out.report.ate_mean < 1e-3, "{}", out.report.ate_mean);
    }

    #[test]
    fn run_is_deterministic_and_writes_outputs() {
        let cfg = small();
        let dir = tempfile::tempdir().unwrap();
        for name in ["a", "b"] {
            let (_, gt, out) = run(&cfg, 5).unwrap();
            write_run(&dir.path().join(name), &cfg, 5, &gt, &out).unwrap();
        }
        let a = fs::read(dir.path().join("a/estimate.csv")).unwrap();
        let b = fs::read(dir.path().join("b/estimate.csv")).unwrap();
        assert_eq!(a, b);
        for f in ["report.json", "errors.csv", "diag.jsonl", "config.json", "ground_truth.csv"] {
            assert!(dir.path().join("a").join(f).is_file(), "{f}");
        }
        let echo: ExperimentConfig = serde_json::from_slice(&fs::read(dir.path().join("a/config.json")).unwrap()).unwrap();
        assert_eq!(echo.seed, 5);
        assert_eq!(echo.filter, cfg.filter);
    }

    #[test]
    fn ablation_has_four_rows_and_zero_noise_is_exact() {
        let cfg = zero_noise(small());
        let report = ablation(&cfg, 1).unwrap();
        assert_eq!(report.methods.len(), 4);
        assert_eq!(report.runs.len(), 4 * 4);
        for m in &report.methods {
            assert!(m.ate_mean < 1e-3, "{}: {}", m.method, m.ate_mean);
            assert!(m.sr5 <= m.sr10);
        }
        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path(), &cfg).unwrap();
        let table = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
        assert_eq!(table.lines().count(), 5);
    }

    #[test]
    fn parallel_suite_matches_sequential() {
        let mut cfg = small();
        cfg.suite.seeds = 1;
        let a = ablation(&cfg, 2).unwrap();
        cfg.suite.parallel_runs = true;
        cfg.filter.parallel = true;
        let b = ablation(&cfg, 2).unwrap();
        let ates = |r: &AblationReport| r.runs.iter().map(|x| x.ate_mean).collect::<Vec<_>>();
        assert_eq!(ates(&a), ates(&b));
    }

    #[test]
    fn sweep_normalizes_to_best() {
        let cfg = small();
        let report = sweep(&cfg, 3).unwrap();
        assert_eq!(report.rows.len(), 2);
        let best = report.rows.iter().map(|r| r.accuracy_pct).fold(0.0, f64::max);
        assert!((best - 100.0).abs() < 1e-9);

        let single = ExperimentConfig {
            sweep: SweepConfig {
                n_particles: vec![16],
                ..cfg.sweep.clone()
            },
            ..cfg
        };
        let report = sweep(&single, 3).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].accuracy_pct, 100.0);
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
