//! Per-robot observations and the attention and MLP policies built on them.
//!
//! Every robot contributes one observation row. Row `i` holds, in robot `i`'s
//! translated frame:
//!
//! * (a) the tracked particles of the current state,
//! * (b) the same particles of the goal,
//! * (c) the offset to the nearest other robot, `(dx, dy, 0)`,
//! * (d) goal minus current for each tracked particle.
//!
//! Vectors are 3-D with a zero vertical component. Policies emit normalised
//! commands; multiplying by `action_scale` (the training velocity limit)
//! gives workspace units.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::{concatenate, s, Array2, Array3, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffsim::{SimState, Vec2};
use crate::error::{Error, Result};
use crate::nnet::{
    load_tensors, save_tensors, tanh, tanh_backward, AttentionCache, AttentionLayer, Linear, LogitScale, Mlp, MlpCache,
    Params, VisibilityMask,
};
use crate::scene::GoalSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Attention,
    Mlp,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Attention => "attention",
            Arch::Mlp => "mlp",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Tracked particles per observation.
    pub n_obs_particles: usize,
    pub d_feat: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_attention_layers: usize,
    pub logit_scale: LogitScale,
    pub mlp_hidden: Vec<usize>,
    pub smoothing_window: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            n_obs_particles: 102,
            d_feat: 128,
            heads: 4,
            d_k: 32,
            d_v: 32,
            n_attention_layers: 2,
            logit_scale: LogitScale::InputWidth,
            mlp_hidden: vec![64, 64],
            smoothing_window: 5,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_obs_particles", self.n_obs_particles),
            ("d_feat", self.d_feat),
            ("heads", self.heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("smoothing_window", self.smoothing_window),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("policy.{name} must be >= 1")));
            }
        }
        if self.n_attention_layers > 0 && self.heads * self.d_v != self.d_feat {
            return Err(Error::Config(format!(
                "policy.heads * policy.d_v ({}) must equal policy.d_feat ({})",
                self.heads * self.d_v,
                self.d_feat
            )));
        }
        if self.mlp_hidden.contains(&0) {
            return Err(Error::Config("policy.mlp_hidden widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn obs_width(&self) -> usize {
        obs_width(self.n_obs_particles)
    }
}

/// `9n + 3`: parts (a), (b) and (d) are `3n` each, part (c) is 3.
pub fn obs_width(n: usize) -> usize {
    9 * n + 3
}

/// `n` stride-spaced indices out of `n_total`, shifted by a seeded offset.
pub fn downsample_particles(n_total: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > n_total {
        return Err(Error::contract(format!("cannot track {n} particles out of {n_total}")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let offset = ChaCha8Rng::seed_from_u64(seed).random_range(0..n);
    Ok((0..n).map(|k| (k * n_total + offset) / n).collect())
}

/// Nearest other robot by Euclidean distance, ties to the lower index.
pub fn nearest_neighbors(robots: &[Vec2]) -> Vec<Option<usize>> {
    (0..robots.len())
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (j, r) in robots.iter().enumerate() {
                if j == i {
                    continue;
                }
                let d = (r - robots[i]).norm_squared();
                if best.is_none_or(|(_, b)| d < b) {
                    best = Some((j, d));
                }
            }
            best.map(|(j, _)| j)
        })
        .collect()
}

/// Robot `i` sees itself and its nearest neighbour.
pub fn visibility_mask(robots: &[Vec2]) -> VisibilityMask {
    let nn = nearest_neighbors(robots);
    VisibilityMask::from_fn(robots.len(), |i, j| j == i || nn[i] == Some(j))
}

/// Fixed tracked-particle set and the matching goal particles for one episode.
#[derive(Debug, Clone)]
pub struct ObsBuilder {
    indices: Vec<usize>,
    goal: Vec<Vec2>,
    n_particles: usize,
}

impl ObsBuilder {
    pub fn new(goal: &GoalSpec, indices: Vec<usize>) -> Result<Self> {
        let planar = goal.planar();
        if let Some(&bad) = indices.iter().find(|&&i| i >= planar.len()) {
            return Err(Error::contract(format!(
                "tracked index {bad} out of range for {} goal particles",
                planar.len()
            )));
        }
        Ok(ObsBuilder {
            goal: indices.iter().map(|&i| planar[i]).collect(),
            n_particles: planar.len(),
            indices,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn width(&self) -> usize {
        obs_width(self.indices.len())
    }

    pub fn goal_tracked(&self) -> &[Vec2] {
        &self.goal
    }

    /// Current positions of the tracked particles.
    pub fn tracked(&self, state: &SimState) -> Result<Vec<Vec2>> {
        if state.particles.len() != self.n_particles {
            return Err(Error::contract(format!(
                "state has {} particles, goal has {}",
                state.particles.len(),
                self.n_particles
            )));
        }
        Ok(self.indices.iter().map(|&i| state.particles.x[i]).collect())
    }

    pub fn build(&self, state: &SimState) -> Result<Array2<f64>> {
        Ok(observation_from_parts(
            &self.tracked(state)?,
            &self.goal,
            &state.robots.x,
        ))
    }
}

/// Observation rows from tracked particle positions, their goal positions,
/// and the robot positions.
pub fn observation_from_parts(cur: &[Vec2], goal: &[Vec2], robots: &[Vec2]) -> Array2<f64> {
    debug_assert_eq!(cur.len(), goal.len());
    let n = cur.len();
    let nn = nearest_neighbors(robots);
    let mut obs = Array2::zeros((robots.len(), obs_width(n)));
    for (i, r) in robots.iter().enumerate() {
        let mut row = obs.row_mut(i);
        for k in 0..n {
            let a = cur[k] - r;
            let b = goal[k] - r;
            let d = goal[k] - cur[k];
            row[3 * k] = a.x;
            row[3 * k + 1] = a.y;
            row[3 * (n + k)] = b.x;
            row[3 * (n + k) + 1] = b.y;
            row[6 * n + 3 + 3 * k] = d.x;
            row[6 * n + 3 + 3 * k + 1] = d.y;
        }
        if let Some(j) = nn[i] {
            let c = robots[j] - r;
            row[6 * n] = c.x;
            row[6 * n + 1] = c.y;
        }
    }
    obs
}

pub fn build_observation(state: &SimState, goal: &GoalSpec, indices: &[usize]) -> Result<Array2<f64>> {
    ObsBuilder::new(goal, indices.to_vec())?.build(state)
}

/// Embedding, masked attention stack, and a linear head on `[obs, features]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPolicy {
    pub embed: Linear,
    pub layers: Vec<AttentionLayer>,
    pub head: Linear,
    pub action_scale: f64,
}

pub struct AttentionPolicyCache {
    x: Array2<f64>,
    /// Post-activation features, embedding first.
    h: Vec<Array2<f64>>,
    attn: Vec<AttentionCache>,
    z: Array2<f64>,
}

impl AttentionPolicyCache {
    /// Per layer, `heads × N_r × N_r`.
    pub fn attention(&self) -> Vec<Array3<f64>> {
        self.attn.iter().map(|c| c.attn.clone()).collect()
    }
}

impl AttentionPolicy {
    pub fn new(rng: &mut impl Rng, cfg: &PolicyConfig, action_scale: f64) -> Result<Self> {
        cfg.validate()?;
        let d_in = cfg.obs_width();
        Ok(AttentionPolicy {
            embed: Linear::new(rng, d_in, cfg.d_feat),
            layers: (0..cfg.n_attention_layers)
                .map(|_| AttentionLayer::new(rng, cfg.d_feat, cfg.heads, cfg.d_k, cfg.d_v, cfg.logit_scale))
                .collect(),
            head: Linear::new(rng, d_in + cfg.d_feat, 2),
            action_scale,
        })
    }

    pub fn zeros_like(&self) -> Self {
        AttentionPolicy {
            embed: Linear::zeros(self.embed.fan_in(), self.embed.fan_out()),
            layers: self.layers.iter().map(AttentionLayer::zeros_like).collect(),
            head: Linear::zeros(self.head.fan_in(), self.head.fan_out()),
            action_scale: self.action_scale,
        }
    }

    pub fn obs_width(&self) -> usize {
        self.embed.fan_in()
    }

    /// Normalised commands, `N_r × 2`.
    pub fn forward(&self, obs: &Array2<f64>, mask: &VisibilityMask) -> Result<(Array2<f64>, AttentionPolicyCache)> {
        let mut h = vec![tanh(&self.embed.forward(obs)?)];
        let mut attn = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward(h.last().unwrap(), mask)?;
            h.push(tanh(&y));
            attn.push(c);
        }
        let z = concatenate![Axis(1), *obs, *h.last().unwrap()];
        let y = self.head.forward(&z)?;
        Ok((
            y,
            AttentionPolicyCache {
                x: obs.clone(),
                h,
                attn,
                z,
            },
        ))
    }

    pub fn backward(&self, cache: &AttentionPolicyCache, dy: &Array2<f64>, grad: &mut AttentionPolicy) {
        let dz = self.head.backward(&cache.z, dy, &mut grad.head);
        let d_in = self.obs_width();
        let mut dh = dz.slice(s![.., d_in..]).to_owned();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let dy_l = tanh_backward(&cache.h[l + 1], &dh);
            dh = layer.backward(&cache.h[l], &cache.attn[l], &dy_l, &mut grad.layers[l]);
        }
        let de = tanh_backward(&cache.h[0], &dh);
        self.embed.backward(&cache.x, &de, &mut grad.embed);
    }
}

impl Params for AttentionPolicy {
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = self.embed.tensors_mut("embed");
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.tensors_mut(&format!("attn.{i}")));
        }
        out.extend(self.head.tensors_mut("head"));
        out
    }
}

/// Fixed-order baseline: the flattened observation matrix through an MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy {
    pub net: Mlp,
    pub n_robots: usize,
    pub action_scale: f64,
}

impl MlpPolicy {
    pub fn new(rng: &mut impl Rng, cfg: &PolicyConfig, n_robots: usize, action_scale: f64) -> Result<Self> {
        cfg.validate()?;
        if n_robots == 0 {
            return Err(Error::Config("the MLP policy needs at least one robot".into()));
        }
        let mut sizes = vec![n_robots * cfg.obs_width()];
        sizes.extend(&cfg.mlp_hidden);
        sizes.push(2 * n_robots);
        Ok(MlpPolicy {
            net: Mlp::new(rng, &sizes),
            n_robots,
            action_scale,
        })
    }

    pub fn zeros_like(&self) -> Self {
        MlpPolicy {
            net: self.net.zeros_like(),
            n_robots: self.n_robots,
            action_scale: self.action_scale,
        }
    }

    pub fn obs_width(&self) -> usize {
        self.net.fan_in() / self.n_robots
    }

    /// `batch` observation matrices stacked row-wise become one input row each.
    fn flat(&self, obs: &Array2<f64>, batch: usize) -> Result<Array2<f64>> {
        if obs.nrows() != batch * self.n_robots {
            return Err(Error::contract(format!(
                "MLP policy was built for {} robots, observation has {} rows for {batch} sample(s)",
                self.n_robots,
                obs.nrows()
            )));
        }
        Ok(obs
            .to_shape((batch, obs.len() / batch.max(1)))
            .expect("contiguous")
            .to_owned())
    }

    pub fn forward(&self, obs: &Array2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        self.forward_batch(obs, 1)
    }

    pub fn forward_batch(&self, obs: &Array2<f64>, batch: usize) -> Result<(Array2<f64>, MlpCache)> {
        let (y, cache) = self.net.forward(&self.flat(obs, batch)?)?;
        Ok((
            y.into_shape_with_order((batch * self.n_robots, 2))
                .expect("2 per robot"),
            cache,
        ))
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Array2<f64>, grad: &mut MlpPolicy) {
        let rows = dy.nrows() / self.n_robots;
        let dy = dy.to_shape((rows, 2 * self.n_robots)).expect("contiguous").to_owned();
        self.net.backward(cache, &dy, &mut grad.net);
    }
}

impl Params for MlpPolicy {
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        self.net.tensors_mut()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Attention(AttentionPolicy),
    Mlp(MlpPolicy),
}

pub enum PolicyCache {
    Attention(AttentionPolicyCache),
    Mlp(MlpCache),
}

/// Commands in workspace units plus, for the attention policy, every layer's
/// attention weights.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub actions: Vec<Vec2>,
    pub attention: Option<Vec<Array3<f64>>>,
}

impl Policy {
    pub fn new(arch: Arch, rng: &mut impl Rng, cfg: &PolicyConfig, n_robots: usize, action_scale: f64) -> Result<Self> {
        Ok(match arch {
            Arch::Attention => Policy::Attention(AttentionPolicy::new(rng, cfg, action_scale)?),
            Arch::Mlp => Policy::Mlp(MlpPolicy::new(rng, cfg, n_robots, action_scale)?),
        })
    }

    pub fn arch(&self) -> Arch {
        match self {
            Policy::Attention(_) => Arch::Attention,
            Policy::Mlp(_) => Arch::Mlp,
        }
    }

    pub fn action_scale(&self) -> f64 {
        match self {
            Policy::Attention(p) => p.action_scale,
            Policy::Mlp(p) => p.action_scale,
        }
    }

    pub fn obs_width(&self) -> usize {
        match self {
            Policy::Attention(p) => p.obs_width(),
            Policy::Mlp(p) => p.obs_width(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Policy::Attention(p) => Policy::Attention(p.zeros_like()),
            Policy::Mlp(p) => Policy::Mlp(p.zeros_like()),
        }
    }

    /// Normalised outputs; the mask is ignored by the MLP.
    pub fn forward(&self, obs: &Array2<f64>, mask: &VisibilityMask) -> Result<(Array2<f64>, PolicyCache)> {
        self.forward_batch(obs, mask, 1)
    }

    /// `batch` observations stacked row-wise. The attention policy needs a
    /// block-diagonal mask over the stack.
    pub fn forward_batch(
        &self,
        obs: &Array2<f64>,
        mask: &VisibilityMask,
        batch: usize,
    ) -> Result<(Array2<f64>, PolicyCache)> {
        Ok(match self {
            Policy::Attention(p) => {
                let (y, c) = p.forward(obs, mask)?;
                (y, PolicyCache::Attention(c))
            }
            Policy::Mlp(p) => {
                let (y, c) = p.forward_batch(obs, batch)?;
                (y, PolicyCache::Mlp(c))
            }
        })
    }

    /// Accumulates into `grad`, which must have the same architecture.
    pub fn backward(&self, cache: &PolicyCache, dy: &Array2<f64>, grad: &mut Policy) {
        match (self, cache, grad) {
            (Policy::Attention(p), PolicyCache::Attention(c), Policy::Attention(g)) => p.backward(c, dy, g),
            (Policy::Mlp(p), PolicyCache::Mlp(c), Policy::Mlp(g)) => p.backward(c, dy, g),
            _ => panic!("policy, cache and gradient architectures differ"),
        }
    }

    /// Commands for every robot, each component clamped to `limit`.
    pub fn act(&self, obs: &Array2<f64>, robots: &[Vec2], limit: f64) -> Result<PolicyOutput> {
        let mask = visibility_mask(robots);
        let (y, cache) = self.forward(obs, &mask)?;
        let k = self.action_scale();
        let actions = y
            .rows()
            .into_iter()
            .map(|r| Vec2::new((r[0] * k).clamp(-limit, limit), (r[1] * k).clamp(-limit, limit)))
            .collect();
        let attention = match cache {
            PolicyCache::Attention(c) => Some(c.attention()),
            PolicyCache::Mlp(_) => None,
        };
        Ok(PolicyOutput { actions, attention })
    }
}

impl Params for Policy {
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        match self {
            Policy::Attention(p) => p.tensors_mut(),
            Policy::Mlp(p) => p.tensors_mut(),
        }
    }
}

/// Architecture description stored in a weight file's header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyMeta {
    pub arch: Arch,
    /// Fixed robot count of the MLP policy; 0 for the attention policy.
    pub n_robots: usize,
    pub action_scale: f64,
    pub config: PolicyConfig,
    /// Hash of the run configuration that produced the weights, if any.
    #[serde(default)]
    pub config_hash: Option<String>,
}

pub fn save_policy(path: &Path, policy: &Policy, config: &PolicyConfig, config_hash: Option<&str>) -> Result<()> {
    let meta = PolicyMeta {
        arch: policy.arch(),
        n_robots: match policy {
            Policy::Mlp(p) => p.n_robots,
            Policy::Attention(_) => 0,
        },
        action_scale: policy.action_scale(),
        config: config.clone(),
        config_hash: config_hash.map(str::to_string),
    };
    save_tensors(path, &serde_json::to_string(&meta)?, &policy.clone().export())
}

pub fn load_policy(path: &Path) -> Result<(Policy, PolicyMeta)> {
    let (text, tensors) = load_tensors(path)?;
    let meta: PolicyMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: format!("policy metadata: {e}"),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut policy = Policy::new(meta.arch, &mut rng, &meta.config, meta.n_robots, meta.action_scale)?;
    policy.import(&tensors)?;
    Ok((policy, meta))
}

/// Mean of the latest `window` command sets.
#[derive(Debug, Clone)]
pub struct Smoother {
    window: usize,
    history: VecDeque<Vec<Vec2>>,
}

impl Smoother {
    pub fn new(window: usize) -> Self {
        Smoother {
            window: window.max(1),
            history: VecDeque::new(),
        }
    }

    pub fn push(&mut self, actions: Vec<Vec2>) -> Vec<Vec2> {
        if self.history.len() == self.window {
            self.history.pop_front();
        }
        self.history.push_back(actions);
        self.mean()
    }

    pub fn mean(&self) -> Vec<Vec2> {
        let n = self.history.len();
        let width = self.history.back().map_or(0, |a| a.len());
        let mut out = vec![Vec2::zeros(); width];
        for a in &self.history {
            for (o, x) in out.iter_mut().zip(a) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        out
    }

    pub fn clear(&mut self) {
        self.history.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffsim::{ParticleField, RobotSet, SimConfig};
    use crate::scene::{Cubic, GoalRecord, SceneConfig};

    fn tiny_cfg() -> PolicyConfig {
        PolicyConfig {
            n_obs_particles: 3,
            d_feat: 8,
            heads: 2,
            d_k: 3,
            d_v: 4,
            ..Default::default()
        }
    }

    #[test]
    fn downsample_strides() {
        assert_eq!(downsample_particles(7, 7, 3).unwrap(), (0..7).collect::<Vec<_>>());
        let idx = downsample_particles(2328, 102, 11).unwrap();
        assert_eq!(idx.len(), 102);
        let gaps: Vec<usize> = idx.windows(2).map(|w| w[1] - w[0]).collect();
        let (lo, hi) = (gaps.iter().min().unwrap(), gaps.iter().max().unwrap());
        assert!(hi - lo <= 1, "{lo}..{hi}");
        assert!(*idx.last().unwrap() < 2328);
        assert_eq!(idx, downsample_particles(2328, 102, 11).unwrap());
        assert!(downsample_particles(5, 6, 0).is_err());
    }

    #[test]
    fn neighbours_and_part_c() {
        let robots = vec![Vec2::new(0.2, 0.5), Vec2::new(0.4, 0.5), Vec2::new(0.9, 0.5)];
        assert_eq!(nearest_neighbors(&robots), vec![Some(1), Some(0), Some(1)]);
        assert_eq!(nearest_neighbors(&robots[..1]), vec![None]);
        let tie = vec![Vec2::new(0.5, 0.5), Vec2::new(0.4, 0.5), Vec2::new(0.6, 0.5)];
        assert_eq!(nearest_neighbors(&tie)[0], Some(1));

        let particles = ParticleField::at_rest(vec![Vec2::new(0.3, 0.3); 4], 1.0, 1.0);
        let goal = GoalSpec {
            curve: Cubic::straight(0.3),
            rope: Default::default(),
            goal_particles: vec![[0.3, 0.3, 0.0]; 4],
            particle_mass: 1.0,
        };
        let state = SimState {
            particles,
            robots: RobotSet::new(robots, 0.02),
            step_index: 0,
        };
        let obs = build_observation(&state, &goal, &[0, 2]).unwrap();
        assert_eq!(obs.ncols(), obs_width(2));
        let c = obs.slice(s![0, 12..15]).to_vec();
        assert!((c[0] - 0.2).abs() < 1e-15 && c[1] == 0.0 && c[2] == 0.0);
        assert!(obs.slice(s![.., 15..]).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn robot_at_origin_sees_world_positions() {
        let cfg = SimConfig::default();
        let scene = SceneConfig {
            n_particles: 16,
            ..Default::default()
        };
        let mut s0 = scene.initial_state(&cfg, 1).unwrap();
        s0.robots.x[0] = Vec2::zeros();
        let goal = scene
            .goal(
                &GoalRecord {
                    id: 0,
                    curve: Cubic::straight(0.5),
                },
                &cfg,
            )
            .unwrap();
        let obs = build_observation(&s0, &goal, &[0, 5, 9]).unwrap();
        for (k, &i) in [0, 5, 9].iter().enumerate() {
            assert_eq!(obs[[0, 3 * k]], s0.particles.x[i].x);
            assert_eq!(obs[[0, 3 * k + 1]], s0.particles.x[i].y);
            assert_eq!(obs[[0, 3 * k + 2]], 0.0);
        }
    }

    #[test]
    fn equal_current_and_goal_zero_part_d() {
        let cfg = SimConfig::default();
        let scene = SceneConfig {
            n_particles: 16,
            ..Default::default()
        };
        let s0 = scene.initial_state(&cfg, 2).unwrap();
        let goal = crate::scene::make_goal(&scene.initial_curve(), &scene.rope, &s0.particles).unwrap();
        let obs = build_observation(&s0, &goal, &[1, 2, 3, 4]).unwrap();
        assert!(obs.slice(s![.., 6 * 4 + 3..]).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn zero_weights_give_zero_actions() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let robots = vec![Vec2::new(0.1, 0.1), Vec2::new(0.5, 0.2), Vec2::new(0.7, 0.3)];
        let obs = Array2::from_shape_fn((3, cfg.obs_width()), |_| rng.random_range(-1.0..1.0));
        for arch in [Arch::Attention, Arch::Mlp] {
            let mut p = Policy::new(arch, &mut rng, &cfg, 3, 0.015).unwrap();
            p.fill(0.0);
            let out = p.act(&obs, &robots, 0.015).unwrap();
            assert!(out.actions.iter().all(|a| a.norm() == 0.0));
        }
    }

    #[test]
    fn mlp_rejects_other_robot_counts_and_is_order_sensitive() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Policy::new(Arch::Mlp, &mut rng, &cfg, 3, 1.0).unwrap();
        let obs = Array2::from_shape_fn((3, cfg.obs_width()), |_| rng.random_range(-1.0..1.0));
        let robots = vec![Vec2::new(0.1, 0.1), Vec2::new(0.5, 0.2), Vec2::new(0.7, 0.3)];
        assert!(p.act(&obs.slice(s![..2, ..]).to_owned(), &robots[..2], 1.0).is_err());
        let a = p.act(&obs, &robots, 10.0).unwrap().actions;
        let perm = [2, 0, 1];
        let pobs = obs.select(Axis(0), &perm);
        let probots: Vec<Vec2> = perm.iter().map(|&i| robots[i]).collect();
        let b = p.act(&pobs, &probots, 10.0).unwrap().actions;
        let moved = perm.iter().enumerate().any(|(i, &pi)| (b[i] - a[pi]).norm() > 1e-9);
        assert!(moved);
    }

    #[test]
    fn attention_mass_stays_inside_mask() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Policy::new(Arch::Attention, &mut rng, &cfg, 0, 1.0).unwrap();
        let robots: Vec<Vec2> = (0..6).map(|_| Vec2::new(rng.random(), rng.random())).collect();
        let obs = Array2::from_shape_fn((6, cfg.obs_width()), |_| rng.random_range(-1.0..1.0));
        let nn = nearest_neighbors(&robots);
        let out = p.act(&obs, &robots, 1.0).unwrap();
        for a in out.attention.unwrap() {
            for h in 0..a.shape()[0] {
                for i in 0..6 {
                    let inside: f64 = (0..6)
                        .filter(|&j| j == i || nn[i] == Some(j))
                        .map(|j| a[[h, i, j]])
                        .sum();
                    assert!((inside - 1.0).abs() < 1e-12);
                    for j in 0..6 {
                        if j != i && nn[i] != Some(j) {
                            assert_eq!(a[[h, i, j]], 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn attention_policy_gradient_matches_finite_differences() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = AttentionPolicy::new(&mut rng, &cfg, 1.0).unwrap();
        let robots: Vec<Vec2> = (0..4).map(|_| Vec2::new(rng.random(), rng.random())).collect();
        let mask = visibility_mask(&robots);
        let obs = Array2::from_shape_fn((4, cfg.obs_width()), |_| rng.random_range(-1.0..1.0));
        let target = Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0));
        let loss = |p: &AttentionPolicy| crate::nnet::mse(&p.forward(&obs, &mask).unwrap().0, &target).unwrap();
        let (y, cache) = p.forward(&obs, &mask).unwrap();
        let (_, dy) = crate::nnet::mse(&y, &target).unwrap();
        let mut g = p.zeros_like();
        p.backward(&cache, &dy, &mut g);
        let theta = p.flatten();
        let gf = g.flatten();
        let h = 1e-6;
        for k in (0..theta.len()).step_by(7) {
            let mut q = theta.clone();
            q[k] += h;
            p.unflatten(&q);
            let lp = loss(&p).0;
            q[k] -= 2.0 * h;
            p.unflatten(&q);
            let lm = loss(&p).0;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - gf[k]).abs() <= 1e-5 * fd.abs().max(1e-3),
                "{k}: {fd} vs {}",
                gf[k]
            );
        }
    }

    #[test]
    fn saved_policy_loads_identically() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        for (k, arch) in [Arch::Attention, Arch::Mlp].into_iter().enumerate() {
            let mut p = Policy::new(arch, &mut ChaCha8Rng::seed_from_u64(k as u64), &cfg, 3, 0.02).unwrap();
            let path = dir.path().join(format!("p{k}.bin"));
            save_policy(&path, &p, &cfg, Some("abc")).unwrap();
            let (mut q, meta) = load_policy(&path).unwrap();
            assert_eq!(meta.arch, arch);
            assert_eq!(meta.config_hash.as_deref(), Some("abc"));
            assert_eq!(q.action_scale(), 0.02);
            assert_eq!(q.flatten(), p.flatten());
        }
    }

    #[test]
    fn batched_forward_matches_single_samples() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let robots: Vec<Vec<Vec2>> = (0..3)
            .map(|_| (0..3).map(|_| Vec2::new(rng.random(), rng.random())).collect())
            .collect();
        let obs: Vec<Array2<f64>> = (0..3)
            .map(|_| Array2::from_shape_fn((3, cfg.obs_width()), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let masks: Vec<VisibilityMask> = robots.iter().map(|r| visibility_mask(r)).collect();
        let views: Vec<_> = obs.iter().map(|o| o.view()).collect();
        let stacked = concatenate(Axis(0), &views).unwrap();
        let block = VisibilityMask::block_diag(&masks);
        for arch in [Arch::Attention, Arch::Mlp] {
            let p = Policy::new(arch, &mut rng, &cfg, 3, 1.0).unwrap();
            let (y, _) = p.forward_batch(&stacked, &block, 3).unwrap();
            for k in 0..3 {
                let (yk, _) = p.forward(&obs[k], &masks[k]).unwrap();
                let diff = (&y.slice(s![3 * k..3 * k + 3, ..]) - &yk)
                    .mapv(f64::abs)
                    .fold(0.0, |a: f64, b| a.max(*b));
                assert!(diff < 1e-12, "{arch} {k}: {diff}");
            }
        }
    }

    #[test]
    fn smoother_averages_latest_window() {
        let mut s = Smoother::new(5);
        let one = |v| vec![Vec2::new(v, -v)];
        assert_eq!(s.push(one(0.0)), one(0.0));
        assert_eq!(s.push(one(1.0)), one(0.5));
        for _ in 0..5 {
            s.push(one(2.0));
        }
        assert_eq!(s.mean(), one(2.0));
    }
}
