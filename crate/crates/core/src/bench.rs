//! Iteration-matched RANSAC, the exhaustive oracle, accuracy metrics and the
//! evaluation harness.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{select_max, select_probabilistic, PolicyNet};
use crate::env::{binomial, polish, Combinations, ConsensusEnv, EpisodeConfig, StepRecord};
use crate::error::{Error, Result};
use crate::geometry::{line_angular_error, pose_errors, pose_from_fundamental};
use crate::scenes::{GroundTruth, Hypothesis, SceneData};

/// Number of thresholds in the mAA step average.
pub const MAA_STEPS: usize = 20;
pub const LINE_MAA_TOLERANCE: f64 = 0.5;
pub const POSE_MAA_TOLERANCE: f64 = 10.0;

/// Mean accuracy over `MAA_STEPS` equally spaced thresholds up to
/// `tolerance`, counting errors strictly below each threshold.
pub fn maa(errors: &[f64], tolerance: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Contract("mAA of an empty error list".into()));
    }
    if !(tolerance > 0.0) {
        return Err(Error::Contract("mAA tolerance must be positive".into()));
    }
    let n = errors.len() as f64;
    let total: f64 = (1..=MAA_STEPS)
        .map(|j| {
            let t = j as f64 * tolerance / MAA_STEPS as f64;
            errors.iter().filter(|&&e| e < t).count() as f64 / n
        })
        .sum();
    Ok(total / MAA_STEPS as f64)
}

/// Lower median.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("median of an empty list".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v[(v.len() - 1) / 2])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// Polished model, `None` if no minimal set produced a hypothesis.
    pub hypothesis: Option<Hypothesis>,
    pub best_inlier_ratio: f64,
    pub hypotheses_used: usize,
    /// Per-step records of the guided search; empty for RANSAC.
    pub step_log: Vec<StepRecord>,
}

/// Classic RANSAC: `budget` uniform draws with replacement across draws,
/// best inlier ratio kept, then the same inlier refit as the environment.
pub fn ransac_run<R: Rng + ?Sized>(scene: &SceneData, budget: usize, rng: &mut R) -> Result<SearchOutcome> {
    if budget == 0 {
        return Err(Error::Contract("RANSAC budget must be at least 1".into()));
    }
    let m = scene.minimal_set_size();
    if scene.n < m {
        return Err(Error::Contract("scene smaller than a minimal set".into()));
    }
    let mut draws = (0..budget).map(|_| rand::seq::index::sample(rng, scene.n, m).into_vec());
    Ok(ransac_over(scene, &mut draws))
}

/// RANSAC scoring loop over an explicit sequence of minimal sets.
pub fn ransac_over(scene: &SceneData, draws: &mut dyn Iterator<Item = Vec<usize>>) -> SearchOutcome {
    let mut best: Option<(Hypothesis, usize)> = None;
    let mut used = 0;
    for set in draws {
        used += 1;
        let Ok(h) = scene.solve(&set) else { continue };
        let count = scene.inlier_count(&h);
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((h, count));
        }
    }
    match best {
        Some((h, count)) => {
            let mask: Vec<bool> = (0..scene.n)
                .map(|i| scene.residual(&h, i) <= scene.epsilon)
                .collect();
            SearchOutcome {
                hypothesis: Some(polish(scene, &h, &mask, scene.epsilon)),
                best_inlier_ratio: count as f64 / scene.n as f64,
                hypotheses_used: used,
                step_log: Vec::new(),
            }
        }
        None => SearchOutcome {
            hypothesis: None,
            best_inlier_ratio: 0.0,
            hypotheses_used: used,
            step_log: Vec::new(),
        },
    }
}

/// Largest instance the oracle will enumerate.
pub const ORACLE_LIMIT: u64 = 1_000_000;

/// Best unpolished hypothesis over every minimal set (first in
/// lexicographic order on ties).
pub fn exhaustive_oracle(scene: &SceneData) -> Result<(Hypothesis, f64)> {
    let m = scene.minimal_set_size();
    let total = binomial(scene.n, m);
    if total > ORACLE_LIMIT {
        return Err(Error::Config(format!(
            "oracle refuses {total} minimal sets (limit {ORACLE_LIMIT})"
        )));
    }
    let mut best: Option<(Hypothesis, usize)> = None;
    for set in Combinations::new(scene.n, m) {
        let Ok(h) = scene.solve(&set) else { continue };
        let count = scene.inlier_count(&h);
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((h, count));
        }
    }
    best.map(|(h, c)| (h, c as f64 / scene.n as f64))
        .ok_or_else(|| Error::Degenerate("every minimal set is degenerate".into()))
}

/// Per-scene task errors in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskError {
    /// Line angle, or `max(rotation, translation)` for poses.
    pub combined: f64,
    pub rotation: Option<f64>,
    pub translation: Option<f64>,
}

/// Error of a polished hypothesis against the scene's ground truth. Pose
/// recovery uses the hypothesis's inliers for the cheirality vote.
pub fn task_error(scene: &SceneData, h: Option<&Hypothesis>) -> TaskError {
    let fail = scene.task.failure_error_deg();
    let failed = || TaskError {
        combined: fail,
        rotation: matches!(scene.ground_truth, GroundTruth::Epipolar { .. }).then_some(fail),
        translation: matches!(scene.ground_truth, GroundTruth::Epipolar { .. }).then_some(fail),
    };
    match (h, &scene.ground_truth) {
        (Some(Hypothesis::Line(l)), GroundTruth::Line(gt)) => TaskError {
            combined: line_angular_error(l, gt),
            rotation: None,
            translation: None,
        },
        (Some(hf @ Hypothesis::Fundamental(f)), GroundTruth::Epipolar { pose, k1, k2, .. }) => {
            let inliers: Vec<[f64; 4]> = (0..scene.n)
                .filter(|&i| scene.residual(hf, i) <= scene.epsilon)
                .map(|i| scene.pixels[i])
                .collect();
            match pose_from_fundamental(f, k1, k2, &inliers) {
                Ok(est) => {
                    let (er, et) = pose_errors(&est, pose);
                    TaskError {
                        combined: er.max(et),
                        rotation: Some(er),
                        translation: Some(et),
                    }
                }
                Err(_) => failed(),
            }
        }
        _ => failed(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    Max,
    Probabilistic,
}

impl SamplingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplingMode::Max => "max",
            SamplingMode::Probabilistic => "probabilistic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(SamplingMode::Max),
            "probabilistic" => Ok(SamplingMode::Probabilistic),
            other => Err(Error::Config(format!("unknown sampling mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Episodes per scene (ν).
    pub episodes_per_scene: usize,
    /// Steps per episode (ψ).
    pub steps_per_episode: usize,
    pub sampling: SamplingMode,
    /// Overrides the scene threshold when set.
    pub epsilon: Option<f64>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes_per_scene: 10,
            steps_per_episode: 15,
            sampling: SamplingMode::Max,
            epsilon: None,
            seed: 0,
        }
    }
}

impl EvalConfig {
    /// Hypotheses per scene: `ν·(ψ+1)`, counting every episode's random start.
    pub fn budget(&self) -> usize {
        self.episodes_per_scene * (self.steps_per_episode + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_scene == 0 || self.steps_per_episode == 0 {
            return Err(Error::Config("episodes and steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Estimator under evaluation.
#[derive(Clone, Copy)]
pub enum Method<'a> {
    Ransac,
    Rlsac(&'a PolicyNet),
}

impl Method<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ransac => "ransac",
            Method::Rlsac(_) => "rlsac",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub scene_id: usize,
    pub error: TaskError,
    pub best_inlier_ratio: f64,
    pub hypotheses_used: usize,
    pub wall_ms: f64,
    pub step_log: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub n_scenes: usize,
    /// mAA of the combined error.
    pub maa: f64,
    pub median_deg: f64,
    pub maa_rotation: Option<f64>,
    pub maa_translation: Option<f64>,
    pub median_rotation: Option<f64>,
    pub median_translation: Option<f64>,
}

/// Seed of the per-scene estimator RNG; identical for every method so the
/// random starts line up.
pub fn scene_rng(seed: u64, scene_id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (scene_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Runs the guided search on one scene with ν episodes of ψ steps sharing
/// one registry and tracker.
pub fn rlsac_run<R: Rng + ?Sized>(
    policy: &PolicyNet,
    scene: &SceneData,
    config: &EvalConfig,
    rng: &mut R,
) -> Result<SearchOutcome> {
    let episode = EpisodeConfig {
        psi_max_steps: config.steps_per_episode,
        epsilon: config.epsilon,
        train_mode: false,
        ..Default::default()
    };
    let mut env = ConsensusEnv::new(scene, episode)?;
    let graph = policy.graph_for(scene)?;
    let m = scene.minimal_set_size();
    for _ in 0..config.episodes_per_scene {
        let mut out = env.reset(rng)?;
        while !out.done {
            let probs = policy.probabilities(env.state(), &graph)?;
            let action = match config.sampling {
                SamplingMode::Max => select_max(&probs, m, env.registry(), rng)?,
                SamplingMode::Probabilistic => select_probabilistic(&probs, m, env.registry(), rng)?,
            };
            out = env.step(&action)?;
        }
    }
    Ok(SearchOutcome {
        hypothesis: Some(env.finalize()?),
        best_inlier_ratio: env.tracker().best_inlier_ratio,
        hypotheses_used: env.hypotheses_used(),
        step_log: env.log().to_vec(),
    })
}

/// Runs one method on one scene.
pub fn run_scene(method: Method<'_>, scene: &SceneData, scene_id: usize, config: &EvalConfig) -> Result<RunResult> {
    let mut rng = scene_rng(config.seed, scene_id);
    let start = Instant::now();
    let outcome = match method {
        Method::Ransac => {
            let mut s = scene.clone();
            if let Some(eps) = config.epsilon {
                s.epsilon = eps;
            }
            ransac_run(&s, config.budget(), &mut rng)?
        }
        Method::Rlsac(policy) => rlsac_run(policy, scene, config, &mut rng)?,
    };
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(RunResult {
        scene_id,
        error: task_error(scene, outcome.hypothesis.as_ref()),
        best_inlier_ratio: outcome.best_inlier_ratio,
        hypotheses_used: outcome.hypotheses_used,
        wall_ms,
        step_log: outcome.step_log,
    })
}

/// Thread count for evaluation: `RLSAC_THREADS` if set, otherwise the
/// available parallelism.
pub fn eval_threads() -> usize {
    std::env::var("RLSAC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Evaluates `method` on every scene; results come back in scene order
/// whatever the thread count.
pub fn evaluate(method: Method<'_>, scenes: &[SceneData], config: &EvalConfig) -> Result<(Vec<RunResult>, Summary)> {
    config.validate()?;
    let threads = eval_threads().clamp(1, scenes.len().max(1));
    let results: Vec<RunResult> = if threads <= 1 {
        scenes
            .iter()
            .enumerate()
            .map(|(i, s)| run_scene(method, s, i, config))
            .collect::<Result<_>>()?
    } else {
        let chunk = scenes.len().div_ceil(threads);
        let parts: Vec<Result<Vec<RunResult>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = scenes
                .chunks(chunk)
                .enumerate()
                .map(|(ci, part)| {
                    scope.spawn(move || {
                        part.iter()
                            .enumerate()
                            .map(|(j, s)| run_scene(method, s, ci * chunk + j, config))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(scenes.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };
    let summary = summarize(&results, scenes.first().map(|s| s.task))?;
    Ok((results, summary))
}

pub fn summarize(results: &[RunResult], task: Option<crate::scenes::Task>) -> Result<Summary> {
    let tol = match task {
        Some(crate::scenes::Task::Fundamental) => POSE_MAA_TOLERANCE,
        _ => LINE_MAA_TOLERANCE,
    };
    let combined: Vec<f64> = results.iter().map(|r| r.error.combined).collect();
    let rot: Option<Vec<f64>> = results.iter().map(|r| r.error.rotation).collect();
    let tra: Option<Vec<f64>> = results.iter().map(|r| r.error.translation).collect();
    let opt_maa = |v: &Option<Vec<f64>>| -> Result<Option<f64>> {
        v.as_ref().filter(|v| !v.is_empty()).map(|v| maa(v, tol)).transpose()
    };
    let opt_med = |v: &Option<Vec<f64>>| -> Result<Option<f64>> {
        v.as_ref().filter(|v| !v.is_empty()).map(|v| median(v)).transpose()
    };
    Ok(Summary {
        n_scenes: results.len(),
        maa: maa(&combined, tol)?,
        median_deg: median(&combined)?,
        maa_rotation: opt_maa(&rot)?,
        maa_translation: opt_maa(&tra)?,
        median_rotation: opt_med(&rot)?,
        median_translation: opt_med(&tra)?,
    })
}
