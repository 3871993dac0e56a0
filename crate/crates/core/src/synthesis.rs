//! Attack synthesis: an episodic environment in which an agent switches the
//! deprivation attack on and off to push the vehicle toward a goal, the
//! reward that scores it, and a small clipped-surrogate policy-gradient
//! trainer.
//!
//! Episodes start from a mid-mission checkpoint of a clean flight. Each agent
//! step holds the chosen γ for a fixed number of fast-loop ticks.

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AttackMode, ScenarioConfig};
use crate::error::{Result, SimError};
use crate::rng::{mix, stream, SimRng, Stream};
use crate::sim::{Outcome, Simulation};

pub const OBS_DIM: usize = 26;

/// Inputs seen by the policy network: the observation plus goal minus position.
pub const FEATURE_DIM: usize = OBS_DIM + 3;

pub const POLICY_FORMAT: &str = "sdasim-policy";
pub const POLICY_VERSION: u32 = 1;

/// How branches (2) and (3) of the reward combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardVariant {
    /// Both branches evaluated in sequence, so both else-arms can apply.
    #[default]
    Verbatim,
    /// One term per (upright, approaching) combination: +1.5, +0.5, -0.5, -1.5.
    Exclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Agent steps of experience to collect.
    pub total_steps: usize,
    pub rollout_steps: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    /// Rewards are multiplied by this before learning.
    pub reward_scale: f64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            total_steps: 50_000,
            rollout_steps: 2048,
            epochs: 4,
            minibatch: 256,
            hidden: vec![32, 32],
            learning_rate: 1e-3,
            discount: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            reward_scale: 0.05,
            eval_every: 10_000,
            eval_episodes: 20,
            seed: 1,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("total_steps", self.total_steps),
            ("rollout_steps", self.rollout_steps),
            ("epochs", self.epochs),
            ("minibatch", self.minibatch),
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SimError::config(format!("synthesis.trainer.{name}"), "must be > 0"));
            }
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(SimError::config("synthesis.trainer.hidden", "needs at least one non-empty layer"));
        }
        let unit = [("discount", self.discount), ("gae_lambda", self.gae_lambda)];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(SimError::config(format!("synthesis.trainer.{name}"), "must be in [0, 1]"));
            }
        }
        let pos = [
            ("learning_rate", self.learning_rate),
            ("clip", self.clip),
            ("max_grad_norm", self.max_grad_norm),
            ("reward_scale", self.reward_scale),
        ];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::config(format!("synthesis.trainer.{name}"), "must be > 0"));
            }
        }
        if !(self.entropy_coef >= 0.0 && self.value_coef >= 0.0) {
            return Err(SimError::config("synthesis.trainer", "loss coefficients must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    /// Deprivation behaviour the agent switches on.
    pub mode: AttackMode,
    /// Fast-loop ticks per agent step.
    pub agent_ticks: u64,
    /// Mission time at which episodes start, s.
    pub checkpoint_time: f64,
    pub max_steps: usize,
    /// Goal box relative to the checkpoint: distance ahead along the path, m.
    pub goal_ahead: [f64; 2],
    /// Goal box half-width across the path, m.
    pub goal_lateral: f64,
    /// Goal box half-height around mission altitude, m.
    pub goal_vertical: f64,
    /// Goals closer than this to the planned path are redrawn, m.
    pub goal_exclusion: f64,
    /// Goal reached below this distance, m.
    pub goal_radius: f64,
    /// Upright while |roll| and |pitch| stay below this, degrees.
    pub upright_limit_deg: f64,
    /// Close to the planned path below this cross-track distance, m.
    pub path_radius: f64,
    pub reward_variant: RewardVariant,
    /// Give every episode fresh noise streams derived from its seed. When
    /// off, episodes differ only in their goal.
    pub reseed_episodes: bool,
    pub trainer: TrainerConfig,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            mode: AttackMode::Stale,
            agent_ticks: 40,
            checkpoint_time: 15.0,
            max_steps: 200,
            goal_ahead: [20.0, 80.0],
            goal_lateral: 40.0,
            goal_vertical: 10.0,
            goal_exclusion: 5.0,
            goal_radius: 1.0,
            upright_limit_deg: 90.0,
            path_radius: 2.0,
            reward_variant: RewardVariant::Verbatim,
            reseed_episodes: true,
            trainer: TrainerConfig::default(),
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.agent_ticks == 0 || self.max_steps == 0 {
            return Err(SimError::config("synthesis", "agent_ticks and max_steps must be > 0"));
        }
        let pos = [
            ("checkpoint_time", self.checkpoint_time),
            ("goal_radius", self.goal_radius),
            ("upright_limit_deg", self.upright_limit_deg),
            ("path_radius", self.path_radius),
        ];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::config(format!("synthesis.{name}"), "must be > 0"));
            }
        }
        let [near, far] = self.goal_ahead;
        if !(near.is_finite() && far.is_finite() && near <= far) {
            return Err(SimError::config("synthesis.goal_ahead", "must be [near, far] with near <= far"));
        }
        if !(self.goal_exclusion >= 0.0 && self.goal_vertical >= 0.0) {
            return Err(SimError::config("synthesis", "goal box sizes must be >= 0"));
        }
        // Rejection sampling needs room outside the exclusion tube.
        if !(self.goal_lateral > self.goal_exclusion || self.goal_vertical > self.goal_exclusion) {
            return Err(SimError::config(
                "synthesis.goal_lateral",
                "goal box must extend beyond the exclusion tube",
            ));
        }
        self.trainer.validate()
    }
}

/// The 26 entries handed to the agent, all from the true vehicle state:
/// position (0..3), attitude quaternion w,x,y,z (3..7), roll/pitch/yaw
/// (7..10), velocity (10..13), body angular rate (13..16), motor commands
/// (16..20), Euler-angle rates (20..23) and goal position (23..26).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation(#[serde(with = "obs_array")] pub [f64; OBS_DIM]);

mod obs_array {
    use super::OBS_DIM;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64; OBS_DIM], s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; OBS_DIM], D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        v.try_into()
            .map_err(|v: Vec<f64>| serde::de::Error::invalid_length(v.len(), &"26 entries"))
    }
}

/// Roll, pitch and yaw rates from body rates (ZYX angles).
fn euler_rates(roll: f64, pitch: f64, w: &Vector3<f64>) -> Vector3<f64> {
    let (sr, cr) = roll.sin_cos();
    let cp = pitch.cos();
    let cp = if cp.abs() < 1e-6 { 1e-6f64.copysign(cp) } else { cp };
    let tp = pitch.sin() / cp;
    Vector3::new(
        w.x + sr * tp * w.y + cr * tp * w.z,
        cr * w.y - sr * w.z,
        (sr * w.y + cr * w.z) / cp,
    )
}

impl Observation {
    pub fn from_sim(sim: &Simulation, goal: &Vector3<f64>) -> Self {
        let s = sim.truth();
        let q = s.attitude.quaternion();
        let (roll, pitch, yaw) = s.attitude.euler_angles();
        let rates = euler_rates(roll, pitch, &s.angular_rate);
        let m = sim.command().0;
        let mut o = [0.0; OBS_DIM];
        o[0..3].copy_from_slice(s.position.as_slice());
        o[3..7].copy_from_slice(&[q.w, q.i, q.j, q.k]);
        o[7..10].copy_from_slice(&[roll, pitch, yaw]);
        o[10..13].copy_from_slice(s.velocity.as_slice());
        o[13..16].copy_from_slice(s.angular_rate.as_slice());
        o[16..20].copy_from_slice(&m);
        o[20..23].copy_from_slice(rates.as_slice());
        o[23..26].copy_from_slice(goal.as_slice());
        Self(o)
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn quaternion(&self) -> [f64; 4] {
        [self.0[3], self.0[4], self.0[5], self.0[6]]
    }

    pub fn roll(&self) -> f64 {
        self.0[7]
    }

    pub fn pitch(&self) -> f64 {
        self.0[8]
    }

    pub fn goal(&self) -> Vector3<f64> {
        Vector3::new(self.0[23], self.0[24], self.0[25])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Network inputs: the observation followed by goal minus position.
    pub fn features(&self) -> [f64; FEATURE_DIM] {
        let mut f = [0.0; FEATURE_DIM];
        f[..OBS_DIM].copy_from_slice(&self.0);
        let d = self.goal() - self.position();
        f[OBS_DIM..].copy_from_slice(d.as_slice());
        f
    }
}

/// State carried by the reward between steps of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardContext {
    pub flips: u32,
    pub prev_dist: f64,
}

impl RewardContext {
    pub fn new(initial_dist: f64) -> Self {
        Self { flips: 0, prev_dist: initial_dist }
    }
}

/// Predicates evaluated on the state after an agent step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardInputs {
    pub goal_dist: f64,
    pub drone_up: bool,
    pub flipped: bool,
    pub close_to_path: bool,
    pub failsafe: bool,
}

/// Step reward, evaluated statement by statement with the later overwrites
/// (flip penalty, failsafe, goal) replacing what came before.
pub fn reward(inp: &RewardInputs, ctx: &mut RewardContext, variant: RewardVariant) -> f64 {
    let delta = ctx.prev_dist - inp.goal_dist;
    let close_to_goal = delta > 0.0;
    let mut r = 0.0;
    match variant {
        RewardVariant::Verbatim => {
            r += if inp.drone_up && close_to_goal { 1.5 } else { -0.5 };
            r += if !inp.drone_up && close_to_goal { 0.5 } else { -1.5 };
        }
        RewardVariant::Exclusive => {
            r += match (inp.drone_up, close_to_goal) {
                (true, true) => 1.5,
                (false, true) => 0.5,
                (true, false) => -0.5,
                (false, false) => -1.5,
            };
        }
    }
    if inp.flipped {
        ctx.flips += 1;
        r = -(ctx.flips as f64);
    } else {
        ctx.flips = 0;
    }
    if inp.close_to_path {
        r -= 2.0;
    }
    if inp.failsafe {
        r = -40.0;
    }
    if inp.goal_dist < 1.0 {
        r = 100.0;
    }
    ctx.prev_dist = inp.goal_dist;
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub time: f64,
    pub goal_distance: f64,
    pub failsafe: bool,
    pub crashed: bool,
    pub goal_reached: bool,
    pub flips: u32,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Episodic environment over the closed-loop simulation.
#[derive(Debug, Clone)]
pub struct AttackEnv {
    cfg: SynthesisConfig,
    checkpoint: Simulation,
    sim: Simulation,
    goal: Vector3<f64>,
    ctx: RewardContext,
    steps: usize,
    done: bool,
    was_up: bool,
}

impl AttackEnv {
    /// Fly the clean mission up to the checkpoint. The attack layer is armed
    /// with the synthesis mode but held off until the agent acts.
    pub fn new(scenario: &ScenarioConfig) -> Result<Self> {
        let cfg = scenario.synthesis.clone();
        cfg.validate()?;
        let mut sc = scenario.clone().with_attack(cfg.mode);
        sc.duration = sc.duration.max(cfg.checkpoint_time + cfg.max_steps as f64 * cfg.agent_ticks as f64 * sc.loop_config.dt() + 1.0);
        let mut sim = Simulation::new(&sc)?;
        sim.set_record_trace(false);
        sim.set_gamma_override(Some(false));
        let ticks = (cfg.checkpoint_time * sc.loop_config.loop_rate).round() as u64;
        if let Some(outcome) = sim.advance(ticks)? {
            return Err(SimError::config(
                "synthesis.checkpoint_time",
                format!("clean flight ended ({}) before the checkpoint", outcome.name()),
            ));
        }
        Ok(Self {
            cfg,
            checkpoint: sim.clone(),
            sim,
            goal: Vector3::zeros(),
            ctx: RewardContext::new(0.0),
            steps: 0,
            done: true,
            was_up: true,
        })
    }

    pub fn config(&self) -> &SynthesisConfig {
        &self.cfg
    }

    pub fn checkpoint(&self) -> &Simulation {
        &self.checkpoint
    }

    pub fn sim(&self) -> &Simulation {
        &self.sim
    }

    pub fn goal(&self) -> Vector3<f64> {
        self.goal
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Uniform draw from the goal box, redrawn while inside the exclusion
    /// tube around the planned path.
    pub fn sample_goal(&self, seed: u64) -> Vector3<f64> {
        let mut rng = stream(seed, Stream::Goal);
        let plan = &self.checkpoint.config().mission;
        let here = self.checkpoint.truth().position;
        // Leg containing the checkpoint and its unit direction.
        let (origin, dir) = leg_at(plan.waypoints.as_slice(), &here);
        let along0 = (here.xy() - origin).dot(&dir);
        let normal = nalgebra::Vector2::new(-dir.y, dir.x);
        loop {
            let ahead = rng.random_range(self.cfg.goal_ahead[0]..=self.cfg.goal_ahead[1]);
            let lateral = rng.random_range(-self.cfg.goal_lateral..=self.cfg.goal_lateral);
            let vertical = rng.random_range(-self.cfg.goal_vertical..=self.cfg.goal_vertical);
            let xy = origin + dir * (along0 + ahead) + normal * lateral;
            let goal = Vector3::new(xy.x, xy.y, plan.altitude + vertical);
            if distance_to_path(plan, &goal) >= self.cfg.goal_exclusion {
                return goal;
            }
        }
    }

    pub fn reset(&mut self, seed: u64) -> Observation {
        self.sim = self.checkpoint.clone();
        if self.cfg.reseed_episodes {
            self.sim.reseed(mix(seed, 0x5EED));
        }
        self.sim.set_gamma_override(Some(false));
        self.goal = self.sample_goal(seed);
        self.ctx = RewardContext::new((self.sim.truth().position - self.goal).norm());
        self.steps = 0;
        self.done = false;
        self.was_up = self.is_up();
        self.observe()
    }

    pub fn observe(&self) -> Observation {
        Observation::from_sim(&self.sim, &self.goal)
    }

    fn is_up(&self) -> bool {
        let (roll, pitch, _) = self.sim.truth().attitude.euler_angles();
        let lim = self.cfg.upright_limit_deg.to_radians();
        roll.abs() < lim && pitch.abs() < lim
    }

    /// Hold γ = `action` for one agent step.
    pub fn step(&mut self, action: bool) -> Result<StepResult> {
        if self.done {
            return Err(SimError::contract("step on a finished episode; call reset first"));
        }
        self.sim.set_gamma_override(Some(action));
        let outcome = self.sim.advance(self.cfg.agent_ticks)?;
        self.steps += 1;

        let pos = self.sim.truth().position;
        let goal_dist = (pos - self.goal).norm();
        let up = self.is_up();
        let flipped = self.was_up && !up;
        self.was_up = up;
        let failsafe = self.sim.failsafe_triggered();
        let plan = &self.sim.config().mission;
        let inputs = RewardInputs {
            goal_dist,
            drone_up: up,
            flipped,
            close_to_path: plan.cross_track_distance(&pos) < self.cfg.path_radius,
            failsafe,
        };
        let r = reward(&inputs, &mut self.ctx, self.cfg.reward_variant);
        let crashed = outcome == Some(Outcome::Crash);
        let goal_reached = goal_dist < self.cfg.goal_radius;
        self.done = goal_reached || failsafe || outcome.is_some() || self.steps >= self.cfg.max_steps;
        Ok(StepResult {
            obs: self.observe(),
            reward: r,
            done: self.done,
            info: StepInfo {
                time: self.sim.time(),
                goal_distance: goal_dist,
                failsafe,
                crashed,
                goal_reached,
                flips: self.ctx.flips,
                steps: self.steps,
            },
        })
    }
}

/// Start and unit direction of the leg nearest to `p`.
fn leg_at(waypoints: &[[f64; 2]], p: &Vector3<f64>) -> (nalgebra::Vector2<f64>, nalgebra::Vector2<f64>) {
    let mut best = (f64::INFINITY, nalgebra::Vector2::zeros(), nalgebra::Vector2::x());
    for w in waypoints.windows(2) {
        let a = nalgebra::Vector2::from(w[0]);
        let b = nalgebra::Vector2::from(w[1]);
        let len = (b - a).norm();
        if len == 0.0 {
            continue;
        }
        let dir = (b - a) / len;
        let s = (p.xy() - a).dot(&dir).clamp(0.0, len);
        let d = (p.xy() - (a + dir * s)).norm();
        if d < best.0 {
            best = (d, a, dir);
        }
    }
    (best.1, best.2)
}

/// 3-D distance from `p` to the planned path flown at mission altitude.
pub fn distance_to_path(plan: &crate::control::MissionPlan, p: &Vector3<f64>) -> f64 {
    let ct = plan.cross_track_distance(p);
    ct.hypot(p.z - plan.altitude)
}

/// Fully connected network with tanh hidden layers and one linear output.
/// Parameters are stored flat, layer by layer, weights (row-major, output x
/// input) then biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

impl Mlp {
    pub fn new(input: usize, hidden: &[usize], out_scale: f64, rng: &mut SimRng) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut params = Vec::new();
        for (l, w) in sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            let scale = if l == sizes.len() - 2 { out_scale } else { 1.0 };
            for _ in 0..n_in * n_out {
                params.push(rng.random_range(-bound..bound) * scale);
            }
            params.extend(std::iter::repeat_n(0.0, n_out));
        }
        Self { sizes, params }
    }

    pub fn param_count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 || *self.sizes.last().unwrap() != 1 || self.sizes.contains(&0) {
            return Err(SimError::contract("network needs an input layer and a single output"));
        }
        let n = Self::param_count(&self.sizes);
        if self.params.len() != n {
            return Err(SimError::Dimension(format!("network expects {n} parameters, has {}", self.params.len())));
        }
        Ok(())
    }

    /// Activations of every layer, input first.
    fn forward_all(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let mut off = 0;
        let last = self.sizes.len() - 2;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let input = &acts[l];
            let (weights, rest) = self.params[off..].split_at(n_in * n_out);
            let bias = &rest[..n_out];
            let out: Vec<f64> = (0..n_out)
                .map(|j| {
                    let z = bias[j] + weights[j * n_in..(j + 1) * n_in].iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                    if l == last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            off += n_in * n_out + n_out;
            acts.push(out);
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        self.forward_all(x).last().unwrap()[0]
    }

    /// Add d(output)/d(params) * `dout` into `grad`.
    fn backward(&self, acts: &[Vec<f64>], dout: f64, grad: &mut [f64]) {
        let mut offsets = Vec::new();
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut delta = vec![dout];
        for l in (0..self.sizes.len() - 1).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let input = &acts[l];
            for j in 0..n_out {
                let row = off + j * n_in;
                for i in 0..n_in {
                    grad[row + i] += delta[j] * input[i];
                }
                grad[off + n_in * n_out + j] += delta[j];
            }
            if l == 0 {
                break;
            }
            let mut next = vec![0.0; n_in];
            for (i, n) in next.iter_mut().enumerate() {
                let mut s = 0.0;
                for j in 0..n_out {
                    s += self.params[off + j * n_in + i] * delta[j];
                }
                // Hidden activations are tanh outputs.
                *n = s * (1.0 - input[i] * input[i]);
            }
            delta = next;
        }
    }
}

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Welford running mean and variance of the network inputs.
#[derive(Debug, Clone)]
struct RunningNorm {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningNorm {
    fn new(n: usize) -> Self {
        Self { count: 0.0, mean: vec![0.0; n], m2: vec![0.0; n] }
    }

    fn update(&mut self, x: &[f64]) {
        self.count += 1.0;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / self.count;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    fn std(&self) -> Vec<f64> {
        self.m2
            .iter()
            .map(|m| if self.count > 1.0 { (m / (self.count - 1.0)).sqrt().max(1e-6) } else { 1.0 })
            .collect()
    }
}

/// Learned attack policy: probability of switching the attack on.
///
/// Stored as JSON with `format` = "sdasim-policy" and `version` = 1. Inputs
/// are the observation features (observation then goal minus position),
/// standardized with `norm_mean`/`norm_std` and clipped to ±10, fed to `net`
/// whose output is the logit of P(γ = 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub format: String,
    pub version: u32,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub net: Mlp,
}

impl Policy {
    pub fn new(hidden: &[usize], rng: &mut SimRng) -> Self {
        Self {
            format: POLICY_FORMAT.into(),
            version: POLICY_VERSION,
            norm_mean: vec![0.0; FEATURE_DIM],
            norm_std: vec![1.0; FEATURE_DIM],
            net: Mlp::new(FEATURE_DIM, hidden, 0.01, rng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != POLICY_FORMAT || self.version != POLICY_VERSION {
            return Err(SimError::contract(format!(
                "unsupported policy file {} v{} (expected {POLICY_FORMAT} v{POLICY_VERSION})",
                self.format, self.version
            )));
        }
        if self.norm_mean.len() != FEATURE_DIM || self.norm_std.len() != FEATURE_DIM || self.net.sizes[0] != FEATURE_DIM {
            return Err(SimError::Dimension(format!("policy inputs must have {FEATURE_DIM} entries")));
        }
        self.net.validate()?;
        if self.net.params.iter().chain(&self.norm_mean).chain(&self.norm_std).any(|v| !v.is_finite()) {
            return Err(SimError::TrainingDiverged("policy has non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn input(&self, obs: &Observation) -> Vec<f64> {
        obs.features()
            .iter()
            .zip(self.norm_mean.iter().zip(&self.norm_std))
            .map(|(x, (m, s))| ((x - m) / s).clamp(-10.0, 10.0))
            .collect()
    }

    pub fn logit(&self, obs: &Observation) -> f64 {
        self.net.forward(&self.input(obs))
    }

    /// Probability of attacking, in [0, 1].
    pub fn prob(&self, obs: &Observation) -> f64 {
        sigmoid(self.logit(obs))
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Who decides γ in an episode.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackPolicy {
    Never,
    Always,
    /// Attack each step with probability `p`.
    Random { p: f64 },
    /// Greedy (attack when P > 0.5) unless sampling is requested.
    Learned(Policy),
}

impl AttackPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            AttackPolicy::Never => "never",
            AttackPolicy::Always => "always",
            AttackPolicy::Random { .. } => "random",
            AttackPolicy::Learned(_) => "learned",
        }
    }

    pub fn act(&self, obs: &Observation, rng: &mut SimRng) -> bool {
        match self {
            AttackPolicy::Never => false,
            AttackPolicy::Always => true,
            AttackPolicy::Random { p } => rng.random_bool(p.clamp(0.0, 1.0)),
            AttackPolicy::Learned(pi) => pi.prob(obs) > 0.5,
        }
    }
}

/// One agent step of a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutRow {
    pub step: usize,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub gamma: u8,
    pub reward: f64,
    pub goal_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub policy: String,
    pub seed: u64,
    pub goal: [f64; 3],
    pub initial_distance: f64,
    pub final_distance: f64,
    pub episode_return: f64,
    pub steps: usize,
    pub attacked_steps: usize,
    pub failsafe: bool,
    pub crashed: bool,
    pub goal_reached: bool,
    pub rows: Vec<RolloutRow>,
}

/// Play one episode. Learned policies act greedily, so the result depends
/// only on the environment, the policy and `seed`.
pub fn rollout(env: &mut AttackEnv, policy: &AttackPolicy, seed: u64) -> Result<Rollout> {
    let mut obs = env.reset(seed);
    let mut rng = stream(mix(seed, 0xAC7), Stream::Policy);
    let initial_distance = (obs.position() - obs.goal()).norm();
    let mut rows = Vec::new();
    let mut ret = 0.0;
    let mut last = None;
    while !env.is_done() {
        let a = policy.act(&obs, &mut rng);
        let r = env.step(a)?;
        ret += r.reward;
        let p = r.obs.position();
        rows.push(RolloutRow {
            step: r.info.steps,
            t: r.info.time,
            x: p.x,
            y: p.y,
            z: p.z,
            gamma: a as u8,
            reward: r.reward,
            goal_distance: r.info.goal_distance,
        });
        obs = r.obs;
        last = Some(r.info);
    }
    let info = last.ok_or(SimError::Empty("rollout steps"))?;
    Ok(Rollout {
        policy: policy.name().into(),
        seed,
        goal: env.goal().into(),
        initial_distance,
        final_distance: info.goal_distance,
        episode_return: ret,
        steps: rows.len(),
        attacked_steps: rows.iter().filter(|r| r.gamma == 1).count(),
        failsafe: info.failsafe,
        crashed: info.crashed,
        goal_reached: info.goal_reached,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub episodes: usize,
    pub mean_return: f64,
    /// Sample standard deviation of the episode returns.
    pub std_return: f64,
    /// Half-width of the normal 95% interval of the mean return.
    pub ci95: f64,
    pub mean_final_distance: f64,
    pub std_final_distance: f64,
}

impl EvalStats {
    pub fn interval(&self) -> (f64, f64) {
        (self.mean_return - self.ci95, self.mean_return + self.ci95)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Seeds of the held-out evaluation episodes.
pub fn eval_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n).map(|i| mix(base ^ 0xE7A1_0000_0000_0000, i as u64)).collect()
}

/// Roll out `policy` once per seed (in parallel) and summarize.
pub fn evaluate(env: &AttackEnv, policy: &AttackPolicy, seeds: &[u64]) -> Result<(EvalStats, Vec<Rollout>)> {
    if seeds.is_empty() {
        return Err(SimError::Empty("evaluation seeds"));
    }
    let runs = seeds
        .par_iter()
        .map(|s| rollout(&mut env.clone(), policy, *s))
        .collect::<Result<Vec<_>>>()?;
    let returns: Vec<f64> = runs.iter().map(|r| r.episode_return).collect();
    let dists: Vec<f64> = runs.iter().map(|r| r.final_distance).collect();
    let (mean_return, std_return) = mean_std(&returns);
    let (mean_final_distance, std_final_distance) = mean_std(&dists);
    Ok((
        EvalStats {
            episodes: runs.len(),
            mean_return,
            std_return,
            ci95: 1.96 * std_return / (runs.len() as f64).sqrt(),
            mean_final_distance,
            std_final_distance,
        },
        runs,
    ))
}

/// Reward-curve point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Agent steps collected so far.
    pub step: usize,
    pub eval_mean: f64,
    pub eval_std: f64,
    pub eval_final_distance: f64,
    /// Mean return of training episodes finished since the previous point.
    pub train_mean: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub policy: Policy,
    pub initial: EvalStats,
    pub trained: EvalStats,
    pub curve: Vec<CurvePoint>,
}

struct Sample {
    x: Vec<f64>,
    action: bool,
    logp: f64,
    value: f64,
    reward: f64,
    done: bool,
}

fn log_prob(z: f64, action: bool) -> f64 {
    if action {
        z - softplus(z)
    } else {
        -softplus(z)
    }
}

fn global_clip(grad: &mut [f64], max_norm: f64) {
    let n = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if n > max_norm {
        let s = max_norm / n;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Train an attack policy with clipped-surrogate policy optimization.
pub fn train(env: &mut AttackEnv) -> Result<TrainReport> {
    let tc = env.config().trainer.clone();
    let mut init_rng = stream(tc.seed, Stream::Policy);
    let mut policy = Policy::new(&tc.hidden, &mut init_rng);
    let mut value = Mlp::new(FEATURE_DIM, &tc.hidden, 1.0, &mut init_rng);
    let mut act_rng = stream(mix(tc.seed, 1), Stream::Policy);
    let mut pi_opt = Adam::new(policy.net.params.len(), tc.learning_rate);
    let mut v_opt = Adam::new(value.params.len(), tc.learning_rate);
    let mut norm = RunningNorm::new(FEATURE_DIM);
    let seeds = eval_seeds(tc.seed, tc.eval_episodes);

    let (initial, _) = evaluate(env, &AttackPolicy::Learned(policy.clone()), &seeds)?;
    let mut curve = vec![CurvePoint {
        step: 0,
        eval_mean: initial.mean_return,
        eval_std: initial.std_return,
        eval_final_distance: initial.mean_final_distance,
        train_mean: None,
    }];

    let mut episode = 0u64;
    let mut obs = env.reset(mix(tc.seed, episode));
    let mut ep_ret = 0.0;
    let mut finished: Vec<f64> = Vec::new();
    let mut collected = 0usize;
    let mut next_eval = tc.eval_every;

    while collected < tc.total_steps {
        let n = tc.rollout_steps.min(tc.total_steps - collected);
        // Refresh input statistics from this batch's observations as they arrive.
        let mut batch: Vec<Sample> = Vec::with_capacity(n);
        for _ in 0..n {
            norm.update(&obs.features());
            policy.norm_mean.clone_from(&norm.mean);
            policy.norm_std = norm.std();
            let x = policy.input(&obs);
            let z = policy.net.forward(&x);
            let action = act_rng.random_bool(sigmoid(z));
            let v = value.forward(&x);
            let r = env.step(action)?;
            ep_ret += r.reward;
            batch.push(Sample {
                x,
                action,
                logp: log_prob(z, action),
                value: v,
                reward: r.reward * tc.reward_scale,
                done: r.done,
            });
            if r.done {
                finished.push(ep_ret);
                ep_ret = 0.0;
                episode += 1;
                obs = env.reset(mix(tc.seed, episode));
            } else {
                obs = r.obs;
            }
        }
        collected += n;

        // Generalized advantage estimation, bootstrapping an unfinished tail.
        let tail = if batch.last().is_some_and(|s| s.done) {
            0.0
        } else {
            value.forward(&policy.input(&obs))
        };
        let mut adv = vec![0.0; batch.len()];
        let mut next_value = tail;
        let mut gae = 0.0;
        for t in (0..batch.len()).rev() {
            let s = &batch[t];
            let nonterminal = if s.done { 0.0 } else { 1.0 };
            let delta = s.reward + tc.discount * next_value * nonterminal - s.value;
            gae = delta + tc.discount * tc.gae_lambda * nonterminal * gae;
            adv[t] = gae;
            next_value = s.value;
        }
        let returns: Vec<f64> = adv.iter().zip(&batch).map(|(a, s)| a + s.value).collect();
        let (am, asd) = mean_std(&adv);
        let adv: Vec<f64> = adv.iter().map(|a| (a - am) / (asd + 1e-8)).collect();

        let mut order: Vec<usize> = (0..batch.len()).collect();
        for _ in 0..tc.epochs {
            for i in (1..order.len()).rev() {
                let j = act_rng.random_range(0..=i);
                order.swap(i, j);
            }
            for mb in order.chunks(tc.minibatch) {
                let mut g_pi = vec![0.0; policy.net.params.len()];
                let mut g_v = vec![0.0; value.params.len()];
                let scale = 1.0 / mb.len() as f64;
                for &k in mb {
                    let s = &batch[k];
                    let acts = policy.net.forward_all(&s.x);
                    let z = acts.last().unwrap()[0];
                    let p = sigmoid(z);
                    let ratio = (log_prob(z, s.action) - s.logp).exp();
                    let a = adv[k];
                    let clipped = ratio.clamp(1.0 - tc.clip, 1.0 + tc.clip);
                    // Gradient of -min(ratio*A, clip(ratio)*A) wrt the logit.
                    let mut dz = if ratio * a <= clipped * a {
                        -a * ratio * ((s.action as u8 as f64) - p)
                    } else {
                        0.0
                    };
                    // Entropy bonus: dH/dz = -z p (1 - p).
                    dz -= tc.entropy_coef * (-z * p * (1.0 - p));
                    policy.net.backward(&acts, dz * scale, &mut g_pi);

                    let vacts = value.forward_all(&s.x);
                    let v = vacts.last().unwrap()[0];
                    value.backward(&vacts, tc.value_coef * (v - returns[k]) * scale, &mut g_v);
                }
                global_clip(&mut g_pi, tc.max_grad_norm);
                global_clip(&mut g_v, tc.max_grad_norm);
                pi_opt.step(&mut policy.net.params, &g_pi);
                v_opt.step(&mut value.params, &g_v);
            }
        }
        if policy.net.params.iter().chain(&value.params).any(|v| !v.is_finite()) {
            return Err(SimError::TrainingDiverged(format!("non-finite parameters after {collected} steps")));
        }

        if collected >= next_eval || collected >= tc.total_steps {
            let (ev, _) = evaluate(env, &AttackPolicy::Learned(policy.clone()), &seeds)?;
            let train_mean = (!finished.is_empty()).then(|| finished.iter().sum::<f64>() / finished.len() as f64);
            finished.clear();
            curve.push(CurvePoint {
                step: collected,
                eval_mean: ev.mean_return,
                eval_std: ev.std_return,
                eval_final_distance: ev.mean_final_distance,
                train_mean,
            });
            while next_eval <= collected {
                next_eval += tc.eval_every;
            }
        }
    }
    let (trained, _) = evaluate(env, &AttackPolicy::Learned(policy.clone()), &seeds)?;
    Ok(TrainReport { policy, initial, trained, curve })
}

/// Attitude from an observation's quaternion entries.
pub fn observed_attitude(obs: &Observation) -> UnitQuaternion<f64> {
    let [w, x, y, z] = obs.quaternion();
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(goal_dist: f64) -> RewardInputs {
        RewardInputs {
            goal_dist,
            drone_up: true,
            flipped: false,
            close_to_path: false,
            failsafe: false,
        }
    }

    #[test]
    fn upright_and_approaching_scores_zero() {
        let mut ctx = RewardContext::new(10.0);
        assert_eq!(reward(&inputs(9.0), &mut ctx, RewardVariant::Verbatim), 0.0);
        assert_eq!(ctx.prev_dist, 9.0);
    }

    #[test]
    fn path_penalty_adds() {
        let mut ctx = RewardContext::new(10.0);
        let inp = RewardInputs { close_to_path: true, ..inputs(9.0) };
        assert_eq!(reward(&inp, &mut ctx, RewardVariant::Verbatim), -2.0);
    }

    #[test]
    fn failsafe_overrides_and_goal_overrides_failsafe() {
        let mut ctx = RewardContext::new(10.0);
        let inp = RewardInputs { failsafe: true, flipped: true, ..inputs(9.0) };
        assert_eq!(reward(&inp, &mut ctx, RewardVariant::Verbatim), -40.0);
        let inp = RewardInputs { failsafe: true, ..inputs(0.5) };
        assert_eq!(reward(&inp, &mut ctx, RewardVariant::Verbatim), 100.0);
    }

    #[test]
    fn flips_accumulate_then_reset() {
        let mut ctx = RewardContext::new(10.0);
        let flip = RewardInputs { flipped: true, ..inputs(10.0) };
        assert_eq!(reward(&flip, &mut ctx, RewardVariant::Verbatim), -1.0);
        assert_eq!(reward(&flip, &mut ctx, RewardVariant::Verbatim), -2.0);
        assert_eq!(ctx.flips, 2);
        reward(&inputs(10.0), &mut ctx, RewardVariant::Verbatim);
        assert_eq!(ctx.flips, 0);
    }

    #[test]
    fn exclusive_variant() {
        let mut ctx = RewardContext::new(10.0);
        assert_eq!(reward(&inputs(9.0), &mut ctx, RewardVariant::Exclusive), 1.5);
        assert_eq!(reward(&inputs(9.5), &mut ctx, RewardVariant::Exclusive), -0.5);
    }

    #[test]
    fn network_gradient_matches_finite_difference() {
        let mut rng = stream(3, Stream::Policy);
        let net = Mlp::new(4, &[5, 3], 1.0, &mut rng);
        let x = [0.3, -0.7, 1.1, 0.2];
        let mut grad = vec![0.0; net.params.len()];
        net.backward(&net.forward_all(&x), 1.0, &mut grad);
        for i in (0..net.params.len()).step_by(3) {
            let mut p = net.clone();
            p.params[i] += 1e-6;
            let mut m = net.clone();
            m.params[i] -= 1e-6;
            let fd = (p.forward(&x) - m.forward(&x)) / 2e-6;
            assert!((fd - grad[i]).abs() < 1e-6, "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn policy_json_round_trip() {
        let mut rng = stream(1, Stream::Policy);
        let p = Policy::new(&[8], &mut rng);
        let back = Policy::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(p, back);
        let mut bad = p.clone();
        bad.version = 99;
        assert!(Policy::from_json(&bad.to_json().unwrap()).is_err());
    }

    #[test]
    fn fresh_policy_is_near_even() {
        let mut rng = stream(1, Stream::Policy);
        let p = Policy::new(&[32, 32], &mut rng);
        let obs = Observation([0.5; OBS_DIM]);
        assert!((p.prob(&obs) - 0.5).abs() < 0.05);
    }

    #[test]
    fn euler_rates_at_level() {
        let w = Vector3::new(0.1, -0.2, 0.3);
        assert_eq!(euler_rates(0.0, 0.0, &w), w);
    }

    #[test]
    fn config_checks() {
        SynthesisConfig::default().validate().unwrap();
        let bad = SynthesisConfig { goal_ahead: [50.0, 10.0], ..SynthesisConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SynthesisConfig { goal_lateral: 1.0, goal_vertical: 1.0, ..SynthesisConfig::default() };
        assert!(bad.validate().is_err());
    }
}
