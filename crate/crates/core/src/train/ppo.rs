//! Clipped-surrogate PPO with a diagonal Gaussian head over normalised
//! commands. The actor mean is an [`MlpPolicy`]; the critic is an MLP of the
//! same hidden shape. The per-step reward is the negative shaping loss of the
//! next state divided by the loss of the initial state.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffsim::{SimConfig, Simulator, StepLoss, Vec2};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nnet::{Mlp, ParamAdam};
use crate::optim::Adam;
use crate::policy::{downsample_particles, MlpPolicy, ObsBuilder, Policy, PolicyConfig};
use crate::provenance::substream;
use crate::scene::{GoalRecord, LossCoeffs, SceneConfig, Task};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    /// Environment steps gathered per update.
    pub buffer_steps: usize,
    pub minibatch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Number of collect-then-update rounds.
    pub iterations: usize,
    pub horizon: usize,
    pub init_log_std: f64,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            buffer_steps: 2048,
            minibatch: 32,
            epochs: 10,
            learning_rate: 3e-4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            iterations: 20,
            horizon: 40,
            init_log_std: -0.5,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.buffer_steps == 0 || self.minibatch == 0 {
            return Err(Error::Config(
                "train.ppo horizon, buffer_steps and minibatch must be >= 1".into(),
            ));
        }
        if !(self.clip > 0.0 && self.learning_rate > 0.0) {
            return Err(Error::Config(
                "train.ppo clip and learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `min(r·A, clip(r, 1-ε, 1+ε)·A)` and its derivative in `r`. The derivative
/// is zero whenever the clipped branch is the active one.
pub fn clipped_surrogate(ratio: f64, adv: f64, clip: f64) -> (f64, f64) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
    if unclipped <= clipped {
        (unclipped, adv)
    } else {
        (clipped, 0.0)
    }
}

/// Generalised advantage estimates for one episode that terminates after
/// its last step. Returns `(advantages, returns)`.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if n == 0.0 {
        return;
    }
    let m = adv.iter().sum::<f64>() / n;
    let s = (adv.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n).sqrt();
    for a in adv.iter_mut() {
        *a = (*a - m) / (s + 1e-8);
    }
}

fn log_prob(a: &[f64], mu: &[f64], log_std: &[f64]) -> f64 {
    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
    a.iter()
        .zip(mu)
        .zip(log_std)
        .map(|((a, m), ls)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

struct Transition {
    obs: Array2<f64>,
    action: Vec<f64>,
    log_prob: f64,
    advantage: f64,
    ret: f64,
}

struct Episode {
    transitions: Vec<Transition>,
    final_reward: f64,
}

struct Env<'a> {
    sim: &'a Simulator,
    scene: &'a SceneConfig,
    goals: &'a [GoalRecord],
    n_robots: usize,
    coeffs: &'a LossCoeffs,
    n_obs: usize,
}

impl Env<'_> {
    fn episode(
        &self,
        actor: &MlpPolicy,
        log_std: &[f64],
        critic: &Mlp,
        horizon: usize,
        cfg: &PpoConfig,
        seed: u64,
    ) -> Result<Episode> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let goal = &self.goals[rng.random_range(0..self.goals.len())];
        let task = Task::new(self.sim.config(), self.scene, goal, self.n_robots, *self.coeffs)?;
        let indices = downsample_particles(task.state0.particles.len(), self.n_obs, rng.random())?;
        let obs_b = ObsBuilder::new(&task.goal, indices)?;
        let l0 = task.loss.eval(&task.state0).abs().max(1e-12);
        let limit = self.sim.config().velocity_limit;
        let mut state = task.state0.clone();
        let mut obs_l = Vec::with_capacity(horizon);
        let mut act_l: Vec<Vec<f64>> = Vec::with_capacity(horizon);
        let (mut lp_l, mut val_l, mut rew_l) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..horizon {
            let obs = obs_b.build(&state)?;
            let (mu, _) = actor.forward(&obs)?;
            let mu: Vec<f64> = mu.iter().cloned().collect();
            let a: Vec<f64> = mu
                .iter()
                .zip(log_std)
                .map(|(m, ls)| {
                    m + ls.exp() * {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        e
                    }
                })
                .collect();
            let (v, _) = critic.forward(&obs.to_shape((1, obs.len())).unwrap().to_owned())?;
            let cmds: Vec<Vec2> = a
                .chunks(2)
                .map(|c| Vec2::new(c[0].clamp(-1.0, 1.0) * limit, c[1].clamp(-1.0, 1.0) * limit))
                .collect();
            state = self.sim.step(&state, &cmds)?;
            lp_l.push(log_prob(&a, &mu, log_std));
            val_l.push(v[[0, 0]]);
            rew_l.push(-task.loss.eval(&state) / l0);
            obs_l.push(obs);
            act_l.push(a);
        }
        let (adv, ret) = gae(&rew_l, &val_l, cfg.gamma, cfg.gae_lambda);
        let transitions = obs_l
            .into_iter()
            .zip(act_l)
            .zip(lp_l)
            .zip(adv.into_iter().zip(ret))
            .map(|(((obs, action), log_prob), (advantage, ret))| Transition {
                obs,
                action,
                log_prob,
                advantage,
                ret,
            })
            .collect();
        Ok(Episode {
            transitions,
            final_reward: task.reward.reward(&state.particles),
        })
    }
}

#[derive(Debug, Clone)]
pub struct PpoResult {
    /// Deterministic actor (the Gaussian mean).
    pub policy: Policy,
    pub log_std: Vec<f64>,
    /// `r(s_T)` of every training episode, in collection order.
    pub episode_rewards: Vec<f64>,
    pub diverged: Option<usize>,
    pub env_steps: usize,
}

/// Trains the MLP actor-critic on episodes against goals drawn from `goals`.
#[allow(clippy::too_many_arguments)]
pub fn ppo_fit(
    sim_cfg: &SimConfig,
    scene: &SceneConfig,
    goals: &[GoalRecord],
    n_robots: usize,
    coeffs: &LossCoeffs,
    policy_cfg: &PolicyConfig,
    cfg: &PpoConfig,
    exec: Exec,
) -> Result<PpoResult> {
    cfg.validate()?;
    if goals.is_empty() {
        return Err(Error::Config("ppo needs at least one goal".into()));
    }
    let sim = Simulator::new(sim_cfg.clone())?;
    let env = Env {
        sim: &sim,
        scene,
        goals,
        n_robots,
        coeffs,
        n_obs: policy_cfg.n_obs_particles,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(substream(cfg.seed, "ppo/init"));
    let mut actor = MlpPolicy::new(&mut rng, policy_cfg, n_robots, sim_cfg.velocity_limit)?;
    let mut critic_sizes = vec![n_robots * policy_cfg.obs_width()];
    critic_sizes.extend(&policy_cfg.mlp_hidden);
    critic_sizes.push(1);
    let mut critic = Mlp::new(&mut rng, &critic_sizes);
    let dim = 2 * n_robots;
    let mut log_std = vec![cfg.init_log_std; dim];
    let mut opt_actor = ParamAdam::new(&mut actor, cfg.learning_rate);
    let mut opt_critic = ParamAdam::new(&mut critic, cfg.learning_rate);
    let mut opt_std = Adam::new(dim, cfg.learning_rate);
    let episodes_per_iter = cfg.buffer_steps.div_ceil(cfg.horizon);
    let mut rewards = Vec::new();
    let mut diverged = None;
    let mut env_steps = 0;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(substream(cfg.seed, "ppo/shuffle"));

    'outer: for it in 0..cfg.iterations {
        let seeds: Vec<u64> = (0..episodes_per_iter)
            .map(|e| substream(cfg.seed, &format!("ppo/episode/{it}/{e}")))
            .collect();
        let episodes = exec.map(&seeds, |_, &s| {
            env.episode(&actor, &log_std, &critic, cfg.horizon, cfg, s)
        });
        let mut buffer = Vec::new();
        for e in episodes {
            let e = e?;
            rewards.push(e.final_reward);
            buffer.extend(e.transitions);
        }
        env_steps += buffer.len();
        let mut order: Vec<usize> = (0..buffer.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut shuffle_rng);
            for part in order.chunks(cfg.minibatch) {
                let b = part.len();
                let views: Vec<ArrayView2<f64>> = part.iter().map(|&i| buffer[i].obs.view()).collect();
                let x = concatenate(Axis(0), &views).expect("equal widths");
                let (mu, acache) = actor.forward_batch(&x, b)?;
                let flat = x.to_shape((b, x.len() / b)).unwrap().to_owned();
                let (v, ccache) = critic.forward(&flat)?;
                let mut adv: Vec<f64> = part.iter().map(|&i| buffer[i].advantage).collect();
                normalize_advantages(&mut adv);
                let mut dmu = Array2::zeros((b * n_robots, 2));
                let mut dlog_std = vec![-cfg.entropy_coef; dim];
                let mut dv = Array2::zeros((b, 1));
                let mut loss = 0.0;
                for (k, &i) in part.iter().enumerate() {
                    let tr = &buffer[i];
                    let m: Vec<f64> = mu
                        .slice(ndarray::s![k * n_robots..(k + 1) * n_robots, ..])
                        .iter()
                        .cloned()
                        .collect();
                    let lp = log_prob(&tr.action, &m, &log_std);
                    let ratio = (lp - tr.log_prob).exp();
                    let (s, ds_dr) = clipped_surrogate(ratio, adv[k], cfg.clip);
                    loss -= s / b as f64;
                    let dl_dlp = -ds_dr * ratio / b as f64;
                    for d in 0..dim {
                        let sd = log_std[d].exp();
                        let z = (tr.action[d] - m[d]) / sd;
                        dmu[[k * n_robots + d / 2, d % 2]] += dl_dlp * z / sd;
                        dlog_std[d] += dl_dlp * (z * z - 1.0);
                    }
                    let err = v[[k, 0]] - tr.ret;
                    loss += cfg.value_coef * err * err / b as f64;
                    dv[[k, 0]] = 2.0 * cfg.value_coef * err / b as f64;
                }
                if !loss.is_finite() {
                    log::warn!("ppo: non-finite loss in iteration {it}");
                    diverged = Some(it);
                    break 'outer;
                }
                let mut ga = actor.zeros_like();
                actor.backward(&acache, &dmu, &mut ga);
                opt_actor.step(&mut actor, &mut ga);
                let mut gc = critic.zeros_like();
                critic.backward(&ccache, &dv, &mut gc);
                opt_critic.step(&mut critic, &mut gc);
                opt_std.step(&mut log_std, &dlog_std);
            }
        }
        let recent = &rewards[rewards.len() - episodes_per_iter..];
        log::info!(
            "ppo iteration {it}: mean episode reward {:.4}",
            recent.iter().sum::<f64>() / recent.len() as f64
        );
    }
    Ok(PpoResult {
        policy: Policy::Mlp(actor),
        log_std,
        episode_rewards: rewards,
        diverged,
        env_steps,
    })
}
