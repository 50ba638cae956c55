//! Graph policy, minimal-set selection and the discrete soft actor-critic
//! trainer.
//!
//! Actions are sets of `m` points while the networks score single points. The
//! policy is a per-point categorical; a set's critic value is the mean of its
//! members' per-point values.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffmath::{knn_graph, read_params, write_params, NeighborGraph, Tape, Tensor, Var};
use crate::env::{Action, ConsensusEnv, EpisodeConfig, State, UsedSetRegistry};
use crate::error::{Error, Result};
use crate::scenes::{SceneData, Task};

const LEAKY_SLOPE: f64 = 0.2;
/// Whole-set retries of [`select_probabilistic`] before falling back to
/// uniform sampling over unused sets.
pub const SET_RETRIES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyConfig {
    pub k_neighbors: usize,
    pub edgeconv_layers: usize,
    pub hidden_width: usize,
    pub head_width: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 15,
            edgeconv_layers: 2,
            hidden_width: 64,
            head_width: 64,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors == 0 || self.edgeconv_layers == 0 || self.hidden_width == 0 || self.head_width == 0 {
            return Err(Error::Config("policy sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Edge-convolution layers followed by a per-point two-layer head with a
/// single output per point.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphNet {
    config: PolicyConfig,
    in_channels: usize,
    params: Vec<Tensor>,
}

fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl GraphNet {
    pub fn new(config: PolicyConfig, in_channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_width;
        let mut params = Vec::new();
        let mut cin = in_channels;
        for _ in 0..config.edgeconv_layers {
            // the first edge linear map sees [x_i, x_j - x_i], fan-in 2·cin
            params.push(uniform_init(&[cin, h], 2 * cin, rng));
            params.push(uniform_init(&[cin, h], 2 * cin, rng));
            params.push(uniform_init(&[h], 2 * cin, rng));
            params.push(uniform_init(&[h, h], h, rng));
            params.push(uniform_init(&[h], h, rng));
            cin = h;
        }
        params.push(uniform_init(&[h, config.head_width], h, rng));
        params.push(uniform_init(&[config.head_width], h, rng));
        params.push(uniform_init(&[config.head_width, 1], config.head_width, rng));
        params.push(uniform_init(&[1], config.head_width, rng));
        Ok(Self {
            config,
            in_channels,
            params,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.config.edgeconv_layers {
            for p in ["w_center", "w_diff", "b_edge", "w_edge", "b_out"] {
                names.push(format!("conv{l}.{p}"));
            }
        }
        for p in ["head.w1", "head.b1", "head.w2", "head.b2"] {
            names.push(p.to_string());
        }
        names
    }

    /// Rebuilds a network from named tensors, checking every shape.
    pub fn from_named(config: PolicyConfig, in_channels: usize, named: Vec<(String, Tensor)>) -> Result<Self> {
        let template = Self::new(config, in_channels, &mut ChaCha8Rng::seed_from_u64(0))?;
        let names = template.param_names();
        if named.len() != names.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                names.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(names.len());
        for ((name, t), (want, like)) in named.into_iter().zip(names.iter().zip(&template.params)) {
            if &name != want || t.shape() != like.shape() {
                return Err(Error::Config(format!(
                    "parameter `{name}` {:?} does not match `{want}` {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Divergence(format!("stored parameter `{name}` is not finite")));
            }
            params.push(t);
        }
        Ok(Self {
            config,
            in_channels,
            params,
        })
    }

    /// Places the parameters on `tape`, tracked or constant.
    pub fn load(&self, tape: &mut Tape, track: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|t| if track { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    /// Per-point outputs `[M]` for the stacked inputs `x` `[M × in_channels]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, graph: &NeighborGraph) -> Result<Var> {
        let mut h = x;
        let mut it = vars.iter().copied();
        let mut next = || it.next().ok_or_else(|| Error::Dimension("missing parameter".into()));
        for _ in 0..self.config.edgeconv_layers {
            let (wc, wd, b1, w2, b2) = (next()?, next()?, next()?, next()?, next()?);
            let center = tape.matmul(h, wc)?;
            let center = tape.add_bias(center, b1)?;
            let nbr = tape.matmul(h, wd)?;
            h = tape.edge_conv(center, nbr, w2, b2, graph, LEAKY_SLOPE)?;
        }
        let (w1, b1, w2, b2) = (next()?, next()?, next()?, next()?);
        let z = tape.matmul(h, w1)?;
        let z = tape.add_bias(z, b1)?;
        let z = tape.leaky_relu(z, LEAKY_SLOPE);
        let z = tape.matmul(z, w2)?;
        let z = tape.add_bias(z, b2)?;
        let m = tape.value(z).len();
        tape.reshape(z, &[m])
    }
}

/// Scene inputs that stay fixed across steps: the data features and the
/// k-NN graph built on them.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneContext {
    pub n: usize,
    pub c: usize,
    pub features: Vec<f64>,
    pub graph: NeighborGraph,
}

impl SceneContext {
    pub fn new(scene: &SceneData, k: usize) -> Result<Self> {
        let pts = Tensor::new(vec![scene.n, scene.c], scene.features.clone())?;
        Ok(Self {
            n: scene.n,
            c: scene.c,
            features: scene.features.clone(),
            graph: knn_graph(&pts, k)?,
        })
    }

    fn write_input(&self, memory: &[f64], out: &mut Vec<f64>) {
        for i in 0..self.n {
            out.extend_from_slice(&self.features[i * self.c..(i + 1) * self.c]);
            out.extend_from_slice(&memory[i * 3..i * 3 + 3]);
        }
    }
}

/// The N×3 memory block of a state.
pub fn memory_of(state: &State) -> Vec<f64> {
    let c = state.channels();
    let mut out = Vec::with_capacity(state.n * 3);
    for i in 0..state.n {
        out.extend_from_slice(&state.values[i * c + state.data_channels..(i + 1) * c]);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    net: GraphNet,
}

impl PolicyNet {
    pub fn new(config: PolicyConfig, data_channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            net: GraphNet::new(config, data_channels + 3, rng)?,
        })
    }

    pub fn from_net(net: GraphNet) -> Self {
        Self { net }
    }

    pub fn net(&self) -> &GraphNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut GraphNet {
        &mut self.net
    }

    pub fn config(&self) -> &PolicyConfig {
        self.net.config()
    }

    pub fn data_channels(&self) -> usize {
        self.net.in_channels() - 3
    }

    /// k-NN graph over the scene's data-feature columns.
    pub fn graph_for(&self, scene: &SceneData) -> Result<NeighborGraph> {
        if scene.c != self.data_channels() {
            return Err(Error::Dimension(format!(
                "scene has {} feature channels, policy expects {}",
                scene.c,
                self.data_channels()
            )));
        }
        let pts = Tensor::new(vec![scene.n, scene.c], scene.features.clone())?;
        knn_graph(&pts, self.config().k_neighbors)
    }

    /// Per-point probabilities and log-probabilities.
    pub fn forward(&self, state: &State, graph: &NeighborGraph) -> Result<(Vec<f64>, Vec<f64>)> {
        if state.channels() != self.net.in_channels() || graph.n() != state.n {
            return Err(Error::Dimension(format!(
                "state {}×{} with a graph over {} points, policy expects {} channels",
                state.n,
                state.channels(),
                graph.n(),
                self.net.in_channels()
            )));
        }
        let mut tape = Tape::new();
        let vars = self.net.load(&mut tape, false);
        let x = tape.constant(Tensor::new(vec![state.n, state.channels()], state.values.clone())?);
        let logits = self.net.forward(&mut tape, &vars, x, graph)?;
        let logp = tape.log_softmax(logits)?;
        let logp = tape.value(logp).data().to_vec();
        let probs = logp.iter().map(|v| v.exp()).collect();
        Ok((probs, logp))
    }

    pub fn probabilities(&self, state: &State, graph: &NeighborGraph) -> Result<Vec<f64>> {
        Ok(self.forward(state, graph)?.0)
    }
}

/// Twin per-point critics and their target copies.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticParameters {
    pub q1: GraphNet,
    pub q2: GraphNet,
    pub q1_target: GraphNet,
    pub q2_target: GraphNet,
}

impl CriticParameters {
    pub fn new(config: PolicyConfig, data_channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let q1 = GraphNet::new(config, data_channels + 3, rng)?;
        let q2 = GraphNet::new(config, data_channels + 3, rng)?;
        Ok(Self {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
        })
    }

    pub fn soft_update(&mut self, polyak: f64) -> Result<()> {
        soft_update(&self.q1, &mut self.q1_target, polyak)?;
        soft_update(&self.q2, &mut self.q2_target, polyak)
    }
}

/// `target ← polyak·online + (1 − polyak)·target`, element-wise.
pub fn soft_update(online: &GraphNet, target: &mut GraphNet, polyak: f64) -> Result<()> {
    if online.params.len() != target.params.len() {
        return Err(Error::Dimension("online and target networks differ".into()));
    }
    for (o, t) in online.params.iter().zip(target.params.iter_mut()) {
        if o.shape() != t.shape() {
            return Err(Error::Dimension("online and target shapes differ".into()));
        }
        for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = polyak * ov + (1.0 - polyak) * *tv;
        }
    }
    Ok(())
}

fn check_probs(probs: &[f64], m: usize) -> Result<()> {
    if m == 0 || probs.len() < m {
        return Err(Error::Dimension(format!(
            "cannot pick {m} of {} points",
            probs.len()
        )));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Divergence("policy probabilities are not a distribution".into()));
    }
    Ok(())
}

/// The `m` most probable points (ties to the lower index). If that set was
/// used before, falls back to [`select_probabilistic`].
pub fn select_max<R: Rng + ?Sized>(
    probs: &[f64],
    m: usize,
    registry: &UsedSetRegistry,
    rng: &mut R,
) -> Result<Action> {
    check_probs(probs, m)?;
    let n = probs.len();
    if registry.is_exhausted(n, m) {
        return Err(Error::Exhausted(format!("all minimal sets of {n} points used")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(m);
    let top = Action::new(order, n)?;
    if !registry.contains(&top) {
        return Ok(top);
    }
    select_probabilistic(probs, m, registry, rng)
}

/// Draws `m` distinct points one at a time, each proportional to the
/// remaining probability mass. Used sets are redrawn up to [`SET_RETRIES`]
/// times before falling back to a uniform unused set.
pub fn select_probabilistic<R: Rng + ?Sized>(
    probs: &[f64],
    m: usize,
    registry: &UsedSetRegistry,
    rng: &mut R,
) -> Result<Action> {
    check_probs(probs, m)?;
    let n = probs.len();
    if registry.is_exhausted(n, m) {
        return Err(Error::Exhausted(format!("all minimal sets of {n} points used")));
    }
    let mut taken = vec![false; n];
    let mut picked = Vec::with_capacity(m);
    for _ in 0..SET_RETRIES {
        taken.iter_mut().for_each(|t| *t = false);
        picked.clear();
        for _ in 0..m {
            let i = draw_one(probs, &taken, rng);
            taken[i] = true;
            picked.push(i);
        }
        let a = Action::new(picked.clone(), n)?;
        if !registry.contains(&a) {
            return Ok(a);
        }
    }
    registry.sample_unused(n, m, rng)
}

fn draw_one<R: Rng + ?Sized>(probs: &[f64], taken: &[bool], rng: &mut R) -> usize {
    let total: f64 = probs.iter().zip(taken).filter(|(_, &t)| !t).map(|(p, _)| p).sum();
    if total > 0.0 && total.is_finite() {
        let u = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut last = None;
        for (i, (&p, &t)) in probs.iter().zip(taken).enumerate() {
            if t || p <= 0.0 {
                continue;
            }
            acc += p;
            last = Some(i);
            if u < acc {
                return i;
            }
        }
        if let Some(i) = last {
            return i;
        }
    }
    let free: Vec<usize> = (0..probs.len()).filter(|&i| !taken[i]).collect();
    *free.choose(rng).expect("fewer points than the set size")
}

/// One environment transition. States are stored as their N×3 memory blocks
/// next to a shared scene context.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub context: Arc<SceneContext>,
    pub memory: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_memory: Vec<f64>,
    pub done: bool,
}

impl Transition {
    fn state_of(&self, memory: &[f64]) -> State {
        let c = self.context.c + 3;
        let mut values = Vec::with_capacity(self.context.n * c);
        self.context.write_input(memory, &mut values);
        State {
            n: self.context.n,
            data_channels: self.context.c,
            values,
        }
    }

    pub fn state(&self) -> State {
        self.state_of(&self.memory)
    }

    pub fn next_state(&self) -> State {
        self.state_of(&self.next_memory)
    }
}

/// FIFO ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// All transitions share one point count and one set size.
    pub fn push(&mut self, t: Transition) -> Result<()> {
        if let Some(first) = self.items.front() {
            if first.context.n != t.context.n
                || first.context.c != t.context.c
                || first.action.indices().len() != t.action.indices().len()
            {
                return Err(Error::Contract("transitions in one buffer must share N, c and m".into()));
            }
        }
        if t.memory.len() != t.context.n * 3 || t.next_memory.len() != t.context.n * 3 {
            return Err(Error::Dimension("memory block must be N×3".into()));
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(())
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&Transition> {
        (0..batch)
            .map(|_| &self.items[rng.gen_range(0..self.items.len())])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub polyak: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub alpha: f64,
    /// One gradient update every this many environment steps.
    pub update_interval: usize,
    pub warmup: usize,
    pub epochs: usize,
    pub scenes_per_epoch: usize,
    pub buffer_capacity: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            polyak: 0.005,
            learning_rate: 3e-4,
            batch_size: 64,
            alpha: 0.2,
            update_interval: 1,
            warmup: 500,
            epochs: 100,
            scenes_per_epoch: 1000,
            buffer_capacity: 100_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma = {} must lie in (0, 1)", self.gamma)));
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return Err(Error::Config(format!("polyak = {} must lie in (0, 1]", self.polyak)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be finite and nonnegative".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be finite and nonnegative".into()));
        }
        if self.batch_size == 0 || self.update_interval == 0 || self.buffer_capacity == 0 {
            return Err(Error::Config(
                "batch size, update interval and buffer capacity must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Stacked network inputs of a batch.
struct BatchInput {
    states: Tensor,
    next_states: Tensor,
    graph: NeighborGraph,
    n: usize,
    m: usize,
    actions: Vec<u32>,
    rewards: Vec<f64>,
    dones: Vec<f64>,
}

impl BatchInput {
    fn new(batch: &[&Transition]) -> Result<Self> {
        let first = batch
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let (n, c) = (first.context.n, first.context.c + 3);
        let m = first.action.indices().len();
        let mut s = Vec::with_capacity(batch.len() * n * c);
        let mut s2 = Vec::with_capacity(batch.len() * n * c);
        let mut actions = Vec::with_capacity(batch.len() * m);
        for t in batch {
            if t.context.n != n || t.context.c + 3 != c || t.action.indices().len() != m {
                return Err(Error::Dimension("batch mixes scene shapes".into()));
            }
            t.context.write_input(&t.memory, &mut s);
            t.context.write_input(&t.next_memory, &mut s2);
            actions.extend(t.action.indices().iter().map(|&i| i as u32));
        }
        Ok(Self {
            states: Tensor::new(vec![batch.len() * n, c], s)?,
            next_states: Tensor::new(vec![batch.len() * n, c], s2)?,
            graph: NeighborGraph::stack(batch.iter().map(|t| &t.context.graph))?,
            n,
            m,
            actions,
            rewards: batch.iter().map(|t| t.reward).collect(),
            dones: batch.iter().map(|t| f64::from(u8::from(t.done))).collect(),
        })
    }

    fn b(&self) -> usize {
        self.rewards.len()
    }
}

/// Bootstrap targets `y = r + γ(1 − done)·V(s')` with
/// `V(s') = Σ p'·(min target q − α·log p')`.
fn soft_targets(
    policy: &PolicyNet,
    critics: &CriticParameters,
    input: &BatchInput,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    let (b, n) = (input.b(), input.n);
    let mut tape = Tape::new();
    let x = tape.constant(input.next_states.clone());
    let pv = policy.net.load(&mut tape, false);
    let logits = policy.net.forward(&mut tape, &pv, x, &input.graph)?;
    let logits = tape.reshape(logits, &[b, n])?;
    let logp = tape.log_softmax(logits)?;
    let v1 = critics.q1_target.load(&mut tape, false);
    let q1 = critics.q1_target.forward(&mut tape, &v1, x, &input.graph)?;
    let v2 = critics.q2_target.load(&mut tape, false);
    let q2 = critics.q2_target.forward(&mut tape, &v2, x, &input.graph)?;
    let (logp, q1, q2) = (tape.value(logp).data(), tape.value(q1).data(), tape.value(q2).data());
    Ok((0..b)
        .map(|r| {
            let v: f64 = (r * n..(r + 1) * n)
                .map(|i| logp[i].exp() * (q1[i].min(q2[i]) - config.alpha * logp[i]))
                .sum();
            input.rewards[r] + config.gamma * (1.0 - input.dones[r]) * v
        })
        .collect())
}

fn min_elementwise(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).collect()
}

/// Loss nodes for a batch given parameter leaves already on `tape`.
/// Returns `(critic_loss, actor_loss)`; the sum of the two is the training
/// objective, and the parameter sets of the two terms are disjoint.
fn loss_graph(
    tape: &mut Tape,
    policy: (&GraphNet, &[Var]),
    q1: (&GraphNet, &[Var]),
    q2: (&GraphNet, &[Var]),
    input: &BatchInput,
    targets: &[f64],
    fixed_min_q: Option<Vec<f64>>,
    alpha: f64,
) -> Result<(Var, Var)> {
    let (b, n, m) = (input.b(), input.n, input.m);
    let x = tape.constant(input.states.clone());
    let y = tape.constant(Tensor::new(vec![b], targets.to_vec())?);
    let mut critic_terms = Vec::with_capacity(2);
    let mut q_values = Vec::with_capacity(2);
    for (net, vars) in [q1, q2] {
        let q = net.forward(tape, vars, x, &input.graph)?;
        let q = tape.reshape(q, &[b, n])?;
        q_values.push(tape.value(q).data().to_vec());
        let qa = tape.gather_cols(q, input.actions.clone(), m)?;
        let qa = tape.row_sum(qa);
        let qa = tape.scale(qa, 1.0 / m as f64);
        let d = tape.sub(qa, y)?;
        let d = tape.square(d);
        critic_terms.push(tape.mean(d));
    }
    let critic = tape.add(critic_terms[0], critic_terms[1])?;
    let min_q = fixed_min_q.unwrap_or_else(|| min_elementwise(&q_values[0], &q_values[1]));
    let min_q = tape.constant(Tensor::new(vec![b, n], min_q)?);
    let logits = policy.0.forward(tape, policy.1, x, &input.graph)?;
    let logits = tape.reshape(logits, &[b, n])?;
    let logp = tape.log_softmax(logits)?;
    let p = tape.exp(logp);
    let inner = tape.scale(logp, alpha);
    let inner = tape.sub(inner, min_q)?;
    let weighted = tape.mul(p, inner)?;
    let per_row = tape.row_sum(weighted);
    let actor = tape.mean(per_row);
    Ok((critic, actor))
}

/// Loss values and gradients of one batch.
#[derive(Debug, Clone)]
pub struct Losses {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub policy_grads: Vec<Vec<f64>>,
    pub q1_grads: Vec<Vec<f64>>,
    pub q2_grads: Vec<Vec<f64>>,
}

pub fn compute_losses(
    batch: &[&Transition],
    policy: &PolicyNet,
    critics: &CriticParameters,
    config: &TrainConfig,
) -> Result<Losses> {
    let input = BatchInput::new(batch)?;
    let targets = soft_targets(policy, critics, &input, config)?;
    let mut tape = Tape::new();
    let pv = policy.net.load(&mut tape, true);
    let v1 = critics.q1.load(&mut tape, true);
    let v2 = critics.q2.load(&mut tape, true);
    let (critic, actor) = loss_graph(
        &mut tape,
        (&policy.net, &pv),
        (&critics.q1, &v1),
        (&critics.q2, &v2),
        &input,
        &targets,
        None,
        config.alpha,
    )?;
    let critic_loss = tape.value(critic).data()[0];
    let actor_loss = tape.value(actor).data()[0];
    if !critic_loss.is_finite() || !actor_loss.is_finite() {
        let reward_range = input
            .rewards
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| (lo.min(r), hi.max(r)));
        return Err(Error::Divergence(format!(
            "critic loss {critic_loss}, actor loss {actor_loss}, rewards in [{}, {}], finite targets: {}",
            reward_range.0,
            reward_range.1,
            targets.iter().all(|t| t.is_finite())
        )));
    }
    let total = tape.add(critic, actor)?;
    tape.backward(total)?;
    let grads = |tape: &Tape, vars: &[Var]| -> Vec<Vec<f64>> {
        vars.iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
            })
            .collect()
    };
    Ok(Losses {
        critic_loss,
        actor_loss,
        policy_grads: grads(&tape, &pv),
        q1_grads: grads(&tape, &v1),
        q2_grads: grads(&tape, &v2),
    })
}

/// Which network a parameter belongs to in [`loss_for_params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetId {
    Policy,
    Q1,
    Q2,
}

/// The loss a network is trained on (actor loss for the policy, summed critic
/// loss for either critic) as a function of one parameter tensor, with the
/// bootstrap targets and the actor's critic values held at the unperturbed
/// networks. Exposed for finite-difference checks.
pub fn loss_for_params(
    tape: &mut Tape,
    replaced: (NetId, usize, Var),
    batch: &[&Transition],
    policy: &PolicyNet,
    critics: &CriticParameters,
    config: &TrainConfig,
) -> Result<Var> {
    let input = BatchInput::new(batch)?;
    let targets = soft_targets(policy, critics, &input, config)?;
    let fixed_min_q = {
        let mut t = Tape::new();
        let x = t.constant(input.states.clone());
        let v1 = critics.q1.load(&mut t, false);
        let q1 = critics.q1.forward(&mut t, &v1, x, &input.graph)?;
        let v2 = critics.q2.load(&mut t, false);
        let q2 = critics.q2.forward(&mut t, &v2, x, &input.graph)?;
        min_elementwise(t.value(q1).data(), t.value(q2).data())
    };
    let load = |id: NetId, net: &GraphNet, tape: &mut Tape| -> Vec<Var> {
        let mut vars = net.load(tape, false);
        if replaced.0 == id {
            vars[replaced.1] = replaced.2;
        }
        vars
    };
    let pv = load(NetId::Policy, &policy.net, tape);
    let v1 = load(NetId::Q1, &critics.q1, tape);
    let v2 = load(NetId::Q2, &critics.q2, tape);
    let (critic, actor) = loss_graph(
        tape,
        (&policy.net, &pv),
        (&critics.q1, &v1),
        (&critics.q2, &v2),
        &input,
        &targets,
        Some(fixed_min_q),
        config.alpha,
    )?;
    Ok(match replaced.0 {
        NetId::Policy => actor,
        NetId::Q1 | NetId::Q2 => critic,
    })
}

/// Adam state for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(net: &GraphNet, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = net.params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, net: &mut GraphNet, grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (l, (p, g)) in net.params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[l], &mut self.v[l]);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *x -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Learner state: networks, optimizers and replay.
pub struct Learner {
    pub policy: PolicyNet,
    pub critics: CriticParameters,
    pub buffer: ReplayBuffer,
    pub config: TrainConfig,
    policy_opt: Adam,
    q1_opt: Adam,
    q2_opt: Adam,
}

impl Learner {
    pub fn new(
        policy_config: PolicyConfig,
        config: TrainConfig,
        data_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let policy = PolicyNet::new(policy_config, data_channels, rng)?;
        let critics = CriticParameters::new(policy_config, data_channels, rng)?;
        Ok(Self {
            policy_opt: Adam::new(policy.net(), config.learning_rate),
            q1_opt: Adam::new(&critics.q1, config.learning_rate),
            q2_opt: Adam::new(&critics.q2, config.learning_rate),
            buffer: ReplayBuffer::new(config.buffer_capacity)?,
            policy,
            critics,
            config,
        })
    }

    /// One gradient step on a uniformly sampled batch.
    pub fn update<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<(f64, f64)> {
        let batch = self.buffer.sample(self.config.batch_size, rng);
        let losses = compute_losses(&batch, &self.policy, &self.critics, &self.config)?;
        self.policy_opt.step(&mut self.policy.net, &losses.policy_grads);
        self.q1_opt.step(&mut self.critics.q1, &losses.q1_grads);
        self.q2_opt.step(&mut self.critics.q2, &losses.q2_grads);
        self.critics.soft_update(self.config.polyak)?;
        Ok((losses.critic_loss, losses.actor_loss))
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over the epoch's episodes of the best inlier ratio reached.
    pub mean_reward: f64,
    /// Mean over the epoch's updates; zero when no update ran.
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub buffer_size: usize,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,mean_reward,critic_loss,actor_loss,buffer_size";

pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from(TRAIN_LOG_HEADER);
    s.push('\n');
    for r in log {
        let _ = writeln!(
            s,
            "{},{:.16e},{:.16e},{:.16e},{}",
            r.epoch, r.mean_reward, r.critic_loss, r.actor_loss, r.buffer_size
        );
    }
    s
}

/// Trains a policy with one probabilistic episode per scene.
/// `scenes(epoch, index)` supplies the training scenes; `on_epoch` sees
/// each log row as it completes.
pub fn train(
    policy_config: PolicyConfig,
    config: TrainConfig,
    episode: EpisodeConfig,
    scenes: &mut dyn FnMut(usize, usize) -> Result<SceneData>,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(PolicyNet, Vec<EpochLog>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let episode = EpisodeConfig {
        train_mode: true,
        ..episode
    };
    episode.validate()?;
    let mut learner: Option<Learner> = None;
    let mut log = Vec::with_capacity(config.epochs);
    let mut env_steps = 0usize;
    for epoch in 0..config.epochs {
        let (mut reward_sum, mut episodes) = (0.0, 0usize);
        let (mut closs, mut aloss, mut updates) = (0.0, 0.0, 0usize);
        for index in 0..config.scenes_per_epoch {
            let scene = scenes(epoch, index)?;
            let l = match &mut learner {
                Some(l) => l,
                None => learner.insert(Learner::new(policy_config, config, scene.c, &mut rng)?),
            };
            let ctx = Arc::new(SceneContext::new(&scene, policy_config.k_neighbors)?);
            let m = scene.minimal_set_size();
            let mut env = ConsensusEnv::new(&scene, episode)?;
            let mut out = env.reset(&mut rng)?;
            let mut memory = memory_of(&out.next_state);
            while !out.done {
                let (probs, _) = l.policy.forward(env.state(), &ctx.graph)?;
                let action = select_probabilistic(&probs, m, env.registry(), &mut rng)?;
                out = env.step(&action)?;
                let next_memory = memory_of(&out.next_state);
                l.buffer.push(Transition {
                    context: Arc::clone(&ctx),
                    memory: std::mem::replace(&mut memory, next_memory.clone()),
                    action,
                    reward: out.reward,
                    next_memory,
                    done: out.done,
                })?;
                env_steps += 1;
                if l.buffer.len() >= config.warmup.max(1) && env_steps.is_multiple_of(config.update_interval) {
                    let (c, a) = l.update(&mut rng)?;
                    closs += c;
                    aloss += a;
                    updates += 1;
                }
            }
            reward_sum += env.tracker().best_inlier_ratio;
            episodes += 1;
        }
        let row = EpochLog {
            epoch,
            mean_reward: if episodes > 0 { reward_sum / episodes as f64 } else { 0.0 },
            critic_loss: if updates > 0 { closs / updates as f64 } else { 0.0 },
            actor_loss: if updates > 0 { aloss / updates as f64 } else { 0.0 },
            buffer_size: learner.as_ref().map_or(0, |l| l.buffer.len()),
        };
        on_epoch(&row);
        log.push(row);
    }
    let policy = match learner {
        Some(l) => l.policy,
        None => {
            // no scene was seen: initialize from a probe scene's channel count
            let probe = scenes(0, 0)?;
            PolicyNet::new(policy_config, probe.c, &mut rng)?
        }
    };
    Ok((policy, log))
}

pub const MODEL_HEADER: &str = "RLSAC-MODEL v1";

/// A trained policy with the settings it was trained under. `extra` holds
/// additional `key = value` header entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub task: Task,
    pub policy: PolicyNet,
    pub train: TrainConfig,
    pub extra: Vec<(String, String)>,
}

impl Model {
    pub fn to_text(&self) -> String {
        let p = self.policy.config();
        let t = &self.train;
        let mut s = String::new();
        let _ = writeln!(s, "{MODEL_HEADER}");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("task", self.task.tag().to_string());
        kv("data_channels", self.policy.data_channels().to_string());
        kv("k_neighbors", p.k_neighbors.to_string());
        kv("edgeconv_layers", p.edgeconv_layers.to_string());
        kv("hidden_width", p.hidden_width.to_string());
        kv("head_width", p.head_width.to_string());
        kv("gamma", t.gamma.to_string());
        kv("polyak", t.polyak.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("alpha", t.alpha.to_string());
        kv("update_interval", t.update_interval.to_string());
        kv("warmup", t.warmup.to_string());
        kv("epochs", t.epochs.to_string());
        kv("scenes_per_epoch", t.scenes_per_epoch.to_string());
        kv("buffer_capacity", t.buffer_capacity.to_string());
        for (k, v) in &self.extra {
            kv(k, v.clone());
        }
        let named: Vec<(String, Tensor)> = self
            .policy
            .net()
            .param_names()
            .into_iter()
            .zip(self.policy.net().params().iter().cloned())
            .collect();
        write_params(&mut s, &named);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MODEL_HEADER => {}
            Some((_, l)) if l.starts_with("RLSAC-MODEL") => {
                return Err(Error::UnsupportedVersion(l.to_string()))
            }
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected `{MODEL_HEADER}`"),
                })
            }
        }
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        let mut params_at = None;
        for (i, line) in lines {
            if line.starts_with("DIFFMATH-PARAMS") {
                params_at = Some(i);
                break;
            }
            let (k, v) = line.split_once('=').ok_or(Error::Parse {
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            entries.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let params_at = params_at.ok_or(Error::Parse {
            line: text.lines().count() + 1,
            msg: "missing parameter block".into(),
        })?;
        let find = |key: &str| -> Result<(usize, &str)> {
            entries
                .iter()
                .find(|(_, k, _)| k == key)
                .map(|(l, _, v)| (*l, v.as_str()))
                .ok_or(Error::Parse {
                    line: params_at + 1,
                    msg: format!("missing header key `{key}`"),
                })
        };
        fn num<T: std::str::FromStr>(entry: (usize, &str)) -> Result<T> {
            entry.1.parse().map_err(|_| Error::Parse {
                line: entry.0,
                msg: format!("invalid value `{}`", entry.1),
            })
        }
        let task = Task::parse(find("task")?.1)?;
        let data_channels: usize = num(find("data_channels")?)?;
        let policy_config = PolicyConfig {
            k_neighbors: num(find("k_neighbors")?)?,
            edgeconv_layers: num(find("edgeconv_layers")?)?,
            hidden_width: num(find("hidden_width")?)?,
            head_width: num(find("head_width")?)?,
        };
        let train = TrainConfig {
            gamma: num(find("gamma")?)?,
            polyak: num(find("polyak")?)?,
            learning_rate: num(find("learning_rate")?)?,
            batch_size: num(find("batch_size")?)?,
            alpha: num(find("alpha")?)?,
            update_interval: num(find("update_interval")?)?,
            warmup: num(find("warmup")?)?,
            epochs: num(find("epochs")?)?,
            scenes_per_epoch: num(find("scenes_per_epoch")?)?,
            buffer_capacity: num(find("buffer_capacity")?)?,
        };
        const KNOWN: [&str; 16] = [
            "task",
            "data_channels",
            "k_neighbors",
            "edgeconv_layers",
            "hidden_width",
            "head_width",
            "gamma",
            "polyak",
            "learning_rate",
            "batch_size",
            "alpha",
            "update_interval",
            "warmup",
            "epochs",
            "scenes_per_epoch",
            "buffer_capacity",
        ];
        let extra = entries
            .iter()
            .filter(|(_, k, _)| !KNOWN.contains(&k.as_str()))
            .map(|(_, k, v)| (k.clone(), v.clone()))
            .collect();
        let block: String = text.lines().skip(params_at).flat_map(|l| [l, "\n"]).collect();
        let named = read_params(&block, params_at + 1)?;
        let net = GraphNet::from_named(policy_config, data_channels + 3, named)?;
        Ok(Self {
            task,
            policy: PolicyNet::from_net(net),
            train,
            extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::gradient_check_coords;
    use crate::scenes::gen_line_scene;

    fn small_config() -> PolicyConfig {
        PolicyConfig {
            k_neighbors: 4,
            edgeconv_layers: 2,
            hidden_width: 6,
            head_width: 5,
        }
    }

    fn random_state(scene: &SceneData, rng: &mut ChaCha8Rng) -> State {
        let memory: Vec<f64> = (0..scene.n)
            .flat_map(|_| {
                [
                    if rng.gen_bool(0.1) { 1.0 } else { -1.0 },
                    rng.gen_range(0.0..5.0),
                    f64::from(rng.gen_range(0u8..4)),
                ]
            })
            .collect();
        State::assemble(scene, &memory)
    }

    #[test]
    fn select_max_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let empty = UsedSetRegistry::new();
        let a = select_max(&[0.1, 0.5, 0.4], 2, &empty, &mut rng).unwrap();
        assert_eq!(a.indices(), &[1, 2]);
        let a = select_max(&[0.25; 4], 2, &empty, &mut rng).unwrap();
        assert_eq!(a.indices(), &[0, 1]);

        let mut reg = UsedSetRegistry::new();
        reg.insert(Action::new(vec![1, 2], 3).unwrap());
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let got = select_max(&[0.1, 0.5, 0.4], 2, &reg, &mut r1).unwrap();
        // replay: sequential draws without replacement until an unused pair
        let probs = [0.1, 0.5, 0.4];
        let expect = loop {
            let mut taken = [false; 3];
            let mut set = Vec::new();
            for _ in 0..2 {
                let total: f64 = (0..3).filter(|&i| !taken[i]).map(|i| probs[i]).sum();
                let u = r2.gen::<f64>() * total;
                let mut acc = 0.0;
                let i = (0..3)
                    .filter(|&i| !taken[i])
                    .find(|&i| {
                        acc += probs[i];
                        u < acc
                    })
                    .unwrap();
                taken[i] = true;
                set.push(i);
            }
            set.sort();
            if set != [1, 2] {
                break set;
            }
        };
        assert_eq!(got.indices(), expect.as_slice());
    }

    #[test]
    fn selection_exhaustion_and_last_unused() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut reg = UsedSetRegistry::new();
        for (a, b) in [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3)] {
            reg.insert(Action::new(vec![a, b], 4).unwrap());
        }
        let a = select_probabilistic(&[0.97, 0.01, 0.01, 0.01], 2, &reg, &mut rng).unwrap();
        assert_eq!(a.indices(), &[2, 3]);
        reg.insert(a);
        assert!(matches!(
            select_max(&[0.25; 4], 2, &reg, &mut rng),
            Err(Error::Exhausted(_))
        ));
        assert!(matches!(
            select_probabilistic(&[0.25; 4], 2, &reg, &mut rng),
            Err(Error::Exhausted(_))
        ));
    }

    #[test]
    fn probabilistic_selection_follows_the_categorical_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reg = UsedSetRegistry::new();
        let draws = 100_000;
        let probs = [0.999, 0.0005, 0.0005];
        let hits = (0..draws)
            .filter(|_| select_probabilistic(&probs, 1, &reg, &mut rng).unwrap().indices() == [0])
            .count();
        assert!((hits as f64 / draws as f64 - 0.999).abs() < 0.005);

        let mut counts = std::collections::HashMap::new();
        for _ in 0..draws {
            let a = select_probabilistic(&[0.25; 4], 2, &reg, &mut rng).unwrap();
            *counts.entry(a.indices().to_vec()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        for c in counts.values() {
            assert!((*c as f64 / draws as f64 - 1.0 / 6.0).abs() < 0.01);
        }
    }

    #[test]
    fn policy_outputs_a_distribution_and_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scene = gen_line_scene(0.5, 30, 11).unwrap();
        let policy = PolicyNet::new(small_config(), 2, &mut rng).unwrap();
        let state = random_state(&scene, &mut rng);
        let graph = policy.graph_for(&scene).unwrap();
        let probs = policy.probabilities(&state, &graph).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(probs.iter().all(|&p| p >= 0.0));

        let mut perm: Vec<usize> = (0..scene.n).collect();
        perm.shuffle(&mut rng);
        let mut permuted = scene.clone();
        let mut values = state.values.clone();
        let c = state.channels();
        for i in 0..scene.n {
            let dst = perm[i];
            permuted.features[dst * 2..dst * 2 + 2].copy_from_slice(scene.feature_row(i));
            values[dst * c..(dst + 1) * c].copy_from_slice(state.row(i));
        }
        let pstate = State { values, ..state.clone() };
        let pgraph = policy.graph_for(&permuted).unwrap();
        assert_eq!(pgraph, graph.permuted(&perm));
        let pprobs = policy.probabilities(&pstate, &pgraph).unwrap();
        for i in 0..scene.n {
            assert!((pprobs[perm[i]] - probs[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn identical_neighborhoods_get_equal_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let policy = PolicyNet::new(small_config(), 2, &mut rng).unwrap();
        // two copies of one five-point cluster, each wired only to itself
        let cluster = [[0.0, 0.0], [0.3, 0.1], [0.1, 0.4], [-0.2, 0.3], [0.2, -0.3]];
        let scene = gen_line_scene(0.0, 10, 1).unwrap();
        let memory: Vec<f64> = (0..10).flat_map(|i| [-1.0, (i % 5) as f64 * 0.5, 0.0]).collect();
        let mut dup = scene.clone();
        dup.features = cluster.iter().chain(cluster.iter()).flat_map(|p| *p).collect();
        let graph = NeighborGraph::from_indices(
            10,
            4,
            (0..10u32)
                .flat_map(|i| {
                    let base = i / 5 * 5;
                    (0..5u32).filter(move |&j| j != i % 5).map(move |j| base + j)
                })
                .collect(),
        )
        .unwrap();
        let state = State::assemble(&dup, &memory);
        let probs = policy.probabilities(&state, &graph).unwrap();
        for i in 0..5 {
            assert_eq!(probs[i], probs[i + 5]);
        }
    }

    fn tiny_batch(rng: &mut ChaCha8Rng) -> (Vec<Transition>, PolicyNet, CriticParameters) {
        let config = small_config();
        let policy = PolicyNet::new(config, 2, rng).unwrap();
        let mut critics = CriticParameters::new(config, 2, rng).unwrap();
        // make the targets differ from the online critics
        for p in critics.q1_target.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v *= 0.7);
        }
        let mut batch = Vec::new();
        for s in 0..3 {
            let scene = gen_line_scene(0.4, 12, 20 + s).unwrap();
            let ctx = Arc::new(SceneContext::new(&scene, config.k_neighbors).unwrap());
            let st = random_state(&scene, rng);
            let next = random_state(&scene, rng);
            batch.push(Transition {
                context: ctx,
                memory: memory_of(&st),
                action: Action::new(vec![s as usize, 5 + s as usize], 12).unwrap(),
                reward: rng.gen_range(0.0..1.0),
                next_memory: memory_of(&next),
                done: s == 1,
            });
        }
        (batch, policy, critics)
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (batch, policy, critics) = tiny_batch(&mut rng);
        let refs: Vec<&Transition> = batch.iter().collect();
        let config = TrainConfig::default();
        let losses = compute_losses(&refs, &policy, &critics, &config).unwrap();
        assert!(losses.critic_loss.is_finite() && losses.actor_loss.is_finite());
        for (id, net) in [
            (NetId::Policy, policy.net()),
            (NetId::Q1, &critics.q1),
            (NetId::Q2, &critics.q2),
        ] {
            for (j, t) in net.params().iter().enumerate() {
                let coords: Vec<usize> = (0..t.len()).step_by((t.len() / 6).max(1)).collect();
                let err = gradient_check_coords(
                    |tape, p| loss_for_params(tape, (id, j, p), &refs, &policy, &critics, &config),
                    t,
                    1e-5,
                    &coords,
                )
                .unwrap();
                assert!(err < 1e-4, "{id:?} tensor {j}: {err}");
            }
        }
        // the analytic gradients of compute_losses match the checked graph
        let mut tape = Tape::new();
        let p = tape.param(critics.q2.params()[3].clone());
        let l = loss_for_params(&mut tape, (NetId::Q2, 3, p), &refs, &policy, &critics, &config).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(p).unwrap(), losses.q2_grads[3].as_slice());
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut batch, policy, mut critics) = tiny_batch(&mut rng);
        batch.iter_mut().for_each(|t| t.done = true);
        let refs: Vec<&Transition> = batch.iter().collect();
        let config = TrainConfig::default();
        let input = BatchInput::new(&refs).unwrap();
        let y = soft_targets(&policy, &critics, &input, &config).unwrap();
        for (t, y) in batch.iter().zip(&y) {
            assert_eq!(*y, t.reward);
        }
        // constant-zero critics and α = 0 give a zero actor loss
        for net in [&mut critics.q1, &mut critics.q2] {
            for p in net.params_mut() {
                p.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let zero_alpha = TrainConfig { alpha: 0.0, ..config };
        let l = compute_losses(&refs, &policy, &critics, &zero_alpha).unwrap();
        assert_eq!(l.actor_loss, 0.0);
        let y: f64 = 0.5 + 0.95 * (1.0 - 0.0) * 1.0;
        assert!((y - 1.45).abs() < 1e-15);
    }

    #[test]
    fn soft_update_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let online = GraphNet::new(small_config(), 5, &mut rng).unwrap();
        let start = GraphNet::new(small_config(), 5, &mut rng).unwrap();
        let mut t = start.clone();
        soft_update(&online, &mut t, 1.0).unwrap();
        assert_eq!(t, online);
        let mut t = start.clone();
        soft_update(&online, &mut t, 0.0).unwrap();
        assert_eq!(t, start);
        let mut two = online.clone();
        two.params_mut().iter_mut().for_each(|p| p.data_mut().iter_mut().for_each(|v| *v = 2.0));
        let mut zero = online.clone();
        zero.params_mut().iter_mut().for_each(|p| p.data_mut().iter_mut().for_each(|v| *v = 0.0));
        soft_update(&two, &mut zero, 0.5).unwrap();
        assert!(zero.params().iter().all(|p| p.data().iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn replay_buffer_evicts_oldest() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (batch, _, _) = tiny_batch(&mut rng);
        let mut buf = ReplayBuffer::new(2).unwrap();
        for t in &batch {
            buf.push(t.clone()).unwrap();
        }
        assert_eq!(buf.len(), 2);
        assert_eq!(buf.get(0).unwrap(), &batch[1]);
        assert_eq!(buf.get(1).unwrap(), &batch[2]);
    }

    fn tiny_train(lr: f64, epochs: usize) -> (PolicyNet, Vec<EpochLog>) {
        let config = TrainConfig {
            learning_rate: lr,
            epochs,
            scenes_per_epoch: 6,
            warmup: 10,
            batch_size: 4,
            ..Default::default()
        };
        train(
            small_config(),
            config,
            EpisodeConfig::default(),
            &mut |e, i| gen_line_scene(0.5, 20, (e * 100 + i) as u64),
            5,
            &mut |_| {},
        )
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_the_initialization() {
        let (trained, log) = tiny_train(0.0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let init = PolicyNet::new(small_config(), 2, &mut rng).unwrap();
        assert_eq!(trained, init);
        assert_eq!(log.len(), 2);
        assert!(log[1].critic_loss > 0.0);
    }

    #[test]
    fn training_is_deterministic_and_counts_transitions() {
        let (a, log_a) = tiny_train(3e-4, 2);
        let (b, log_b) = tiny_train(3e-4, 2);
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        assert!(log_a[1].buffer_size > log_a[0].buffer_size);
    }

    #[test]
    fn model_file_round_trips() {
        let (policy, _) = tiny_train(3e-4, 1);
        let model = Model {
            task: Task::Line2d,
            policy,
            train: TrainConfig::default(),
            extra: vec![("outlier_rate".into(), "0.7".into())],
        };
        let text = model.to_text();
        assert!(text.starts_with("RLSAC-MODEL v1\n"));
        assert_eq!(Model::from_text(&text).unwrap(), model);
        let broken = text.replace("hidden_width = 6", "hidden_width = 7");
        assert!(Model::from_text(&broken).is_err());
    }
}
