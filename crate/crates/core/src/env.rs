//! The sample-consensus environment: actions are minimal sets, the reward is
//! the inlier ratio of the solved hypothesis, and the state is the data
//! features concatenated with three memory channels.

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scenes::{Hypothesis, SceneData, Task};

/// Upper bound of the normalized residual channel.
pub const RESIDUAL_CLIP: f64 = 5.0;
/// Consecutive degenerate draws tolerated by [`ConsensusEnv::reset`].
pub const MAX_DEGENERATE_DRAWS: usize = 100;

/// N×C state matrix, `C = c + 3`. Channels `[0, c)` hold data features,
/// then action (±1), normalized residual and usage history.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub n: usize,
    pub data_channels: usize,
    pub values: Vec<f64>,
}

impl State {
    pub fn channels(&self) -> usize {
        self.data_channels + 3
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.channels();
        &self.values[i * c..(i + 1) * c]
    }

    fn column(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        let c = self.channels();
        (0..self.n).map(move |i| self.values[i * c + k])
    }

    pub fn action_channel(&self) -> Vec<f64> {
        self.column(self.data_channels).collect()
    }

    pub fn residual_channel(&self) -> Vec<f64> {
        self.column(self.data_channels + 1).collect()
    }

    pub fn history_channel(&self) -> Vec<f64> {
        self.column(self.data_channels + 2).collect()
    }

    /// Assembles a state from the scene's features and an N×3 memory block.
    pub fn assemble(scene: &SceneData, memory: &[f64]) -> Self {
        let c = scene.c + 3;
        let mut values = Vec::with_capacity(scene.n * c);
        for i in 0..scene.n {
            values.extend_from_slice(scene.feature_row(i));
            values.extend_from_slice(&memory[i * 3..i * 3 + 3]);
        }
        Self {
            n: scene.n,
            data_channels: scene.c,
            values,
        }
    }
}

/// A minimal set: sorted, distinct point indices.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Action {
    indices: Vec<usize>,
}

impl Action {
    pub fn new(mut indices: Vec<usize>, n: usize) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("duplicate index in minimal set".into()));
        }
        if indices.last().is_some_and(|&i| i >= n) {
            return Err(Error::Contract("minimal-set index out of range".into()));
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }
}

/// Number of `m`-subsets of `n` items, saturating at `u64::MAX`.
pub fn binomial(n: usize, m: usize) -> u64 {
    if m > n {
        return 0;
    }
    let m = m.min(n - m);
    let mut acc: u128 = 1;
    for i in 0..m {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Minimal sets already solved for the current scene.
#[derive(Debug, Clone, Default)]
pub struct UsedSetRegistry {
    used: BTreeSet<Action>,
}

impl UsedSetRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, a: &Action) -> bool {
        self.used.contains(a)
    }

    /// Returns false if the set was already present.
    pub fn insert(&mut self, a: Action) -> bool {
        self.used.insert(a)
    }

    pub fn len(&self) -> usize {
        self.used.len()
    }

    pub fn is_empty(&self) -> bool {
        self.used.is_empty()
    }

    pub fn clear(&mut self) {
        self.used.clear();
    }

    pub fn is_exhausted(&self, n: usize, m: usize) -> bool {
        self.used.len() as u64 >= binomial(n, m)
    }

    /// Uniformly random unused `m`-subset: rejection sampling, then explicit
    /// enumeration when the space is nearly full.
    pub fn sample_unused<R: Rng + ?Sized>(&self, n: usize, m: usize, rng: &mut R) -> Result<Action> {
        if self.is_exhausted(n, m) {
            return Err(Error::Exhausted(format!(
                "all {} minimal sets of size {m} used",
                binomial(n, m)
            )));
        }
        for _ in 0..1000 {
            let idx = rand::seq::index::sample(rng, n, m).into_vec();
            let a = Action::new(idx, n)?;
            if !self.contains(&a) {
                return Ok(a);
            }
        }
        let unused: Vec<Action> = Combinations::new(n, m)
            .map(|c| Action { indices: c })
            .filter(|a| !self.contains(a))
            .collect();
        if unused.is_empty() {
            return Err(Error::Exhausted("no unused minimal set".into()));
        }
        Ok(unused[rng.gen_range(0..unused.len())].clone())
    }
}

/// Lexicographic enumeration of `m`-subsets of `0..n`.
pub struct Combinations {
    n: usize,
    cur: Option<Vec<usize>>,
}

impl Combinations {
    pub fn new(n: usize, m: usize) -> Self {
        Self {
            n,
            cur: (m <= n).then(|| (0..m).collect()),
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.cur.clone()?;
        let m = out.len();
        let mut next = out.clone();
        let mut i = m;
        loop {
            if i == 0 {
                self.cur = None;
                break;
            }
            i -= 1;
            if next[i] < self.n - m + i {
                next[i] += 1;
                for j in i + 1..m {
                    next[j] = next[j - 1] + 1;
                }
                self.cur = Some(next);
                break;
            }
        }
        Some(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DoneReason {
    InliersUnchanged,
    NoImprovement,
    MaxSteps,
    Running,
}

impl DoneReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DoneReason::InliersUnchanged => "inliers_unchanged",
            DoneReason::NoImprovement => "no_improvement",
            DoneReason::MaxSteps => "max_steps",
            DoneReason::Running => "running",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeConfig {
    /// Steps with an unchanged inlier count before termination.
    pub kappa: usize,
    /// Steps without exceeding the episode's best ratio before termination.
    pub sigma_no_improve: usize,
    pub psi_max_steps: usize,
    /// Overrides the scene's inlier threshold when set.
    pub epsilon: Option<f64>,
    /// Conditions (i) and (ii) only apply while training.
    pub train_mode: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            kappa: 2,
            sigma_no_improve: 3,
            psi_max_steps: 15,
            epsilon: None,
            train_mode: false,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kappa == 0 || self.sigma_no_improve == 0 || self.psi_max_steps == 0 {
            return Err(Error::Config("episode counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-episode history; entry 0 belongs to the hypothesis of the reset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeStats {
    pub inlier_counts: Vec<usize>,
    pub ratios: Vec<f64>,
}

impl EpisodeStats {
    pub fn steps(&self) -> usize {
        self.inlier_counts.len().saturating_sub(1)
    }

    pub fn push(&mut self, count: usize, ratio: f64) {
        self.inlier_counts.push(count);
        self.ratios.push(ratio);
    }
}

pub fn check_termination(stats: &EpisodeStats, config: &EpisodeConfig) -> DoneReason {
    let steps = stats.steps();
    if config.train_mode {
        let counts = &stats.inlier_counts;
        if counts.len() > config.kappa
            && counts[counts.len() - 1 - config.kappa..]
                .windows(2)
                .all(|w| w[0] == w[1])
        {
            return DoneReason::InliersUnchanged;
        }
        let r = &stats.ratios;
        if r.len() > config.sigma_no_improve {
            let split = r.len() - config.sigma_no_improve;
            let mut best = r[..split].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut improved = false;
            for &x in &r[split..] {
                if x > best {
                    improved = true;
                    best = x;
                }
            }
            if !improved {
                return DoneReason::NoImprovement;
            }
        }
    }
    if steps >= config.psi_max_steps {
        DoneReason::MaxSteps
    } else {
        DoneReason::Running
    }
}

/// The N×3 memory block: action membership (±1), residual / ε clipped to
/// [`RESIDUAL_CLIP`], and the usage history with the action's entries
/// incremented.
pub fn encode_memory_channels(
    action: &Action,
    residuals: &[f64],
    history: &[u32],
    epsilon: f64,
) -> Vec<f64> {
    let n = residuals.len();
    let mut out = Vec::with_capacity(n * 3);
    for i in 0..n {
        let used = action.contains(i);
        out.push(if used { 1.0 } else { -1.0 });
        out.push((residuals[i] / epsilon).min(RESIDUAL_CLIP));
        out.push(f64::from(history[i] + u32::from(used)));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: State,
    pub reward: f64,
    /// `None` when the minimal set was degenerate.
    pub hypothesis: Option<Hypothesis>,
    pub residuals: Vec<f64>,
    pub inlier_mask: Vec<bool>,
    pub inlier_count: usize,
    pub done: bool,
    pub done_reason: DoneReason,
}

#[derive(Debug, Clone, Default)]
pub struct BestTracker {
    pub best_hypothesis: Option<Hypothesis>,
    pub best_inlier_ratio: f64,
    pub best_inlier_mask: Vec<bool>,
}

impl BestTracker {
    /// Strictly better ratios replace the incumbent, so ties keep the first.
    pub fn offer(&mut self, h: &Hypothesis, ratio: f64, mask: &[bool]) -> bool {
        if self.best_hypothesis.is_none() || ratio > self.best_inlier_ratio {
            self.best_hypothesis = Some(*h);
            self.best_inlier_ratio = ratio;
            self.best_inlier_mask = mask.to_vec();
            true
        } else {
            false
        }
    }
}

/// One row of the audit log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub episode: usize,
    pub step: usize,
    pub action: Vec<usize>,
    pub reward: f64,
    pub inlier_count: usize,
    pub done_reason: DoneReason,
}

/// Environment bound to one scene. The registry and tracker are scene-wide;
/// the history channel and episode statistics restart at every reset.
pub struct ConsensusEnv<'a> {
    scene: &'a SceneData,
    config: EpisodeConfig,
    epsilon: f64,
    registry: UsedSetRegistry,
    tracker: BestTracker,
    history: Vec<u32>,
    stats: EpisodeStats,
    state: Option<State>,
    last_memory: Vec<f64>,
    episode: usize,
    hypotheses: usize,
    log: Vec<StepRecord>,
    residual_buf: Vec<f64>,
}

impl<'a> ConsensusEnv<'a> {
    pub fn new(scene: &'a SceneData, config: EpisodeConfig) -> Result<Self> {
        config.validate()?;
        scene.validate()?;
        Ok(Self {
            scene,
            epsilon: config.epsilon.unwrap_or(scene.epsilon),
            config,
            registry: UsedSetRegistry::new(),
            tracker: BestTracker::default(),
            history: vec![0; scene.n],
            stats: EpisodeStats::default(),
            state: None,
            last_memory: Vec::new(),
            episode: 0,
            hypotheses: 0,
            log: Vec::new(),
            residual_buf: Vec::with_capacity(scene.n),
        })
    }

    pub fn scene(&self) -> &SceneData {
        self.scene
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.config
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn registry(&self) -> &UsedSetRegistry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut UsedSetRegistry {
        &mut self.registry
    }

    pub fn tracker(&self) -> &BestTracker {
        &self.tracker
    }

    pub fn stats(&self) -> &EpisodeStats {
        &self.stats
    }

    pub fn history(&self) -> &[u32] {
        &self.history
    }

    /// Current state; panics before the first reset.
    pub fn state(&self) -> &State {
        self.state.as_ref().expect("reset() before reading the state")
    }

    /// Hypotheses solved so far (one per reset plus one per step).
    pub fn hypotheses_used(&self) -> usize {
        self.hypotheses
    }

    pub fn log(&self) -> &[StepRecord] {
        &self.log
    }

    /// Episodes started so far.
    pub fn episodes(&self) -> usize {
        self.episode
    }

    fn evaluate(&mut self, h: &Hypothesis) -> (Vec<bool>, usize) {
        let mut buf = std::mem::take(&mut self.residual_buf);
        self.scene.residuals_into(h, &mut buf);
        let mask: Vec<bool> = buf.iter().map(|&r| r <= self.epsilon).collect();
        let count = mask.iter().filter(|&&b| b).count();
        self.residual_buf = buf;
        (mask, count)
    }

    fn outcome(&mut self, h: Option<Hypothesis>, mask: Vec<bool>, count: usize, reason: DoneReason) -> StepOutcome {
        StepOutcome {
            next_state: self.state().clone(),
            reward: count as f64 / self.scene.n as f64,
            hypothesis: h,
            residuals: self.residual_buf.clone(),
            inlier_mask: mask,
            inlier_count: count,
            done: reason != DoneReason::Running,
            done_reason: reason,
        }
    }

    /// Starts a new episode from a uniformly sampled unused minimal set.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<StepOutcome> {
        let (n, m) = (self.scene.n, self.scene.minimal_set_size());
        let mut drawn = None;
        for _ in 0..MAX_DEGENERATE_DRAWS {
            let a = self.registry.sample_unused(n, m, rng)?;
            self.registry.insert(a.clone());
            if let Ok(h) = self.scene.solve(a.indices()) {
                drawn = Some((a, h));
                break;
            }
        }
        let (action, h) = drawn.ok_or_else(|| {
            Error::Degenerate(format!("{MAX_DEGENERATE_DRAWS} consecutive degenerate minimal sets"))
        })?;
        self.episode += 1;
        self.hypotheses += 1;
        self.history.iter_mut().for_each(|v| *v = 0);
        let (mask, count) = self.evaluate(&h);
        let memory = encode_memory_channels(&action, &self.residual_buf, &self.history, self.epsilon);
        for &i in action.indices() {
            self.history[i] += 1;
        }
        self.state = Some(State::assemble(self.scene, &memory));
        self.last_memory = memory;
        let ratio = count as f64 / n as f64;
        self.tracker.offer(&h, ratio, &mask);
        self.stats = EpisodeStats::default();
        self.stats.push(count, ratio);
        self.log.push(StepRecord {
            episode: self.episode - 1,
            step: 0,
            action: action.indices().to_vec(),
            reward: ratio,
            inlier_count: count,
            done_reason: DoneReason::Running,
        });
        Ok(self.outcome(Some(h), mask, count, DoneReason::Running))
    }

    /// Applies an unused minimal set.
    pub fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        if self.state.is_none() {
            return Err(Error::Contract("step() before reset()".into()));
        }
        let (n, m) = (self.scene.n, self.scene.minimal_set_size());
        if action.indices().len() != m || action.indices().last().is_some_and(|&i| i >= n) {
            return Err(Error::Contract("action does not index a minimal set of this scene".into()));
        }
        if !self.registry.insert(action.clone()) {
            return Err(Error::Contract(format!(
                "minimal set {:?} already used",
                action.indices()
            )));
        }
        self.hypotheses += 1;
        let solved = self.scene.solve(action.indices()).ok();
        let (mask, count, memory) = match &solved {
            Some(h) => {
                let (mask, count) = self.evaluate(h);
                let memory =
                    encode_memory_channels(action, &self.residual_buf, &self.history, self.epsilon);
                (mask, count, memory)
            }
            None => {
                // residual channel carried over from the previous state
                let mut memory = self.last_memory.clone();
                for i in 0..n {
                    let used = action.contains(i);
                    memory[i * 3] = if used { 1.0 } else { -1.0 };
                    memory[i * 3 + 2] = f64::from(self.history[i] + u32::from(used));
                }
                self.residual_buf = (0..n)
                    .map(|i| memory[i * 3 + 1] * self.epsilon)
                    .collect();
                (vec![false; n], 0, memory)
            }
        };
        for &i in action.indices() {
            self.history[i] += 1;
        }
        self.state = Some(State::assemble(self.scene, &memory));
        self.last_memory = memory;
        let ratio = count as f64 / n as f64;
        if let Some(h) = &solved {
            self.tracker.offer(h, ratio, &mask);
        }
        self.stats.push(count, ratio);
        let reason = if solved.is_some() {
            check_termination(&self.stats, &self.config)
        } else if self.stats.steps() >= self.config.psi_max_steps {
            DoneReason::MaxSteps
        } else {
            DoneReason::Running
        };
        self.log.push(StepRecord {
            episode: self.episode - 1,
            step: self.stats.steps(),
            action: action.indices().to_vec(),
            reward: ratio,
            inlier_count: count,
            done_reason: reason,
        });
        Ok(self.outcome(solved, mask, count, reason))
    }

    pub fn finalize(&self) -> Result<Hypothesis> {
        finalize_scene(&self.tracker, self.scene, self.epsilon)
    }
}

/// Refits the tracked best hypothesis on its inliers. The refit is kept only
/// if it does not lose inliers at `epsilon`.
pub fn finalize_scene(tracker: &BestTracker, scene: &SceneData, epsilon: f64) -> Result<Hypothesis> {
    let best = tracker
        .best_hypothesis
        .ok_or_else(|| Error::Contract("no hypothesis tracked".into()))?;
    Ok(polish(scene, &best, &tracker.best_inlier_mask, epsilon))
}

pub fn polish(scene: &SceneData, best: &Hypothesis, mask: &[bool], epsilon: f64) -> Hypothesis {
    let inliers: Vec<usize> = (0..scene.n).filter(|&i| mask[i]).collect();
    let enough = match scene.task {
        Task::Line2d => inliers.len() >= 2,
        Task::Fundamental => inliers.len() >= 8,
    };
    if !enough {
        return *best;
    }
    let Ok(refit) = scene.solve(&inliers) else {
        return *best;
    };
    let count = |h: &Hypothesis| (0..scene.n).filter(|&i| scene.residual(h, i) <= epsilon).count();
    if count(&refit) >= count(best) {
        refit
    } else {
        *best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::gen_line_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn memory_channel_examples() {
        let a = Action::new(vec![3, 0], 5).unwrap();
        let mem = encode_memory_channels(&a, &[0.0; 5], &[0; 5], 0.1);
        let col0: Vec<f64> = (0..5).map(|i| mem[i * 3]).collect();
        assert_eq!(col0, vec![1.0, -1.0, -1.0, 1.0, -1.0]);

        let a = Action::new(vec![1], 5).unwrap();
        let mem = encode_memory_channels(&a, &[0.0; 5], &[0, 2, 1, 0, 0], 0.1);
        let col2: Vec<f64> = (0..5).map(|i| mem[i * 3 + 2]).collect();
        assert_eq!(col2, vec![0.0, 3.0, 1.0, 0.0, 0.0]);

        let mem = encode_memory_channels(&a, &[0.05, 10.0, 0.0, 0.0, 0.0], &[0; 5], 0.1);
        assert!((mem[1] - 0.5).abs() < 1e-15);
        assert_eq!(mem[4], 5.0);
    }

    fn stats(counts: &[usize], ratios: &[f64]) -> EpisodeStats {
        EpisodeStats {
            inlier_counts: counts.to_vec(),
            ratios: ratios.to_vec(),
        }
    }

    #[test]
    fn termination_examples() {
        let train = EpisodeConfig {
            train_mode: true,
            ..Default::default()
        };
        let test = EpisodeConfig::default();
        let s = stats(&[40, 40, 40], &[0.4, 0.4, 0.4]);
        assert_eq!(check_termination(&s, &train), DoneReason::InliersUnchanged);
        let s = stats(&[40, 40], &[0.4, 0.4]);
        assert_eq!(check_termination(&s, &train), DoneReason::Running);

        let s = stats(&[60, 50, 55, 58], &[0.6, 0.5, 0.55, 0.58]);
        assert_eq!(check_termination(&s, &train), DoneReason::NoImprovement);
        let s = stats(&[60, 50, 55, 61], &[0.6, 0.5, 0.55, 0.61]);
        assert_eq!(check_termination(&s, &train), DoneReason::Running);

        let counts: Vec<usize> = (0..16).collect();
        let ratios: Vec<f64> = counts.iter().map(|&c| c as f64 / 100.0).collect();
        let s = stats(&counts, &ratios);
        assert_eq!(check_termination(&s, &test), DoneReason::MaxSteps);
        assert_eq!(check_termination(&s, &train), DoneReason::MaxSteps);
        // test mode ignores the training-only conditions
        let s = stats(&[40, 40, 40, 40], &[0.4; 4]);
        assert_eq!(check_termination(&s, &test), DoneReason::Running);
    }

    #[test]
    fn reset_state_and_exhaustion() {
        let scene = gen_line_scene(0.5, 6, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut env = ConsensusEnv::new(&scene, EpisodeConfig::default()).unwrap();
        let out = env.reset(&mut rng).unwrap();
        let plus = out.next_state.action_channel().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(plus, 2);
        assert_eq!(out.reward, out.inlier_count as f64 / 6.0);
        for c in Combinations::new(6, 2) {
            env.registry_mut().insert(Action::new(c, 6).unwrap());
        }
        assert!(matches!(env.reset(&mut rng), Err(Error::Exhausted(_))));
    }

    #[test]
    fn step_rejects_reuse_and_scores_reward() {
        let scene = gen_line_scene(0.4, 100, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut env = ConsensusEnv::new(&scene, EpisodeConfig::default()).unwrap();
        env.reset(&mut rng).unwrap();
        let a = env.registry().sample_unused(100, 2, &mut rng).unwrap();
        let out = env.step(&a).unwrap();
        let h = out.hypothesis.unwrap();
        assert_eq!(out.inlier_count, scene.inlier_count(&h));
        assert_eq!(out.reward, out.inlier_count as f64 / 100.0);
        assert!(matches!(env.step(&a), Err(Error::Contract(_))));
    }

    #[test]
    fn degenerate_step_scores_zero_and_keeps_residuals() {
        let mut scene = gen_line_scene(0.0, 10, 5).unwrap();
        // make points 0 and 1 coincide
        let p = scene.point(0);
        scene.features[2] = p[0];
        scene.features[3] = p[1];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut env = ConsensusEnv::new(&scene, EpisodeConfig::default()).unwrap();
        let first = env.reset(&mut rng).unwrap();
        let prev = first.next_state.residual_channel();
        let a = Action::new(vec![0, 1], 10).unwrap();
        if env.registry().contains(&a) {
            return;
        }
        let out = env.step(&a).unwrap();
        assert_eq!(out.reward, 0.0);
        assert!(out.hypothesis.is_none());
        assert!(!out.done);
        assert_eq!(out.next_state.residual_channel(), prev);
    }

    #[test]
    fn polishing_noiseless_line_is_exact() {
        let scene = gen_line_scene(0.0, 50, 8).unwrap();
        let mut s = scene.clone();
        let crate::scenes::GroundTruth::Line(gt) = scene.ground_truth else {
            panic!()
        };
        // project every point onto the line to remove the noise
        for i in 0..s.n {
            let p = s.point(i);
            let d = gt.signed_distance(p);
            s.features[2 * i] = p[0] - d * gt.a;
            s.features[2 * i + 1] = p[1] - d * gt.b;
        }
        let mut env = ConsensusEnv::new(&s, EpisodeConfig::default()).unwrap();
        env.reset(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let Hypothesis::Line(l) = env.finalize().unwrap() else {
            panic!()
        };
        assert!(crate::geometry::line_angular_error(&l, &gt) < 1e-6);
    }

    #[test]
    fn combinations_enumerate_all() {
        let all: Vec<_> = Combinations::new(5, 2).collect();
        assert_eq!(all.len(), 10);
        assert_eq!(all[0], vec![0, 1]);
        assert_eq!(all[9], vec![3, 4]);
        assert_eq!(binomial(100, 2), 4950);
        assert_eq!(binomial(12, 2), 66);
        assert_eq!(binomial(3, 5), 0);
    }
}
