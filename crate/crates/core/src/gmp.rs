//! Gradient-based motion planning: Adam on the summed shaping loss of a
//! full rollout, differentiated through the simulator.
//!
//! Commands are optimised in normalised units `u ∈ [-1, 1]` per axis, with
//! `command = u · velocity_limit`, so the learning rate is independent of
//! the configured limit.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffsim::{ActionPlan, SimState, Simulator, StepLoss, Vec2};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::scene::LossCoeffs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmpConfig {
    pub learning_rate: f64,
    /// Adam updates; 0 returns the initial plan.
    pub iterations: usize,
    pub coeffs: LossCoeffs,
    /// Standard deviation of the initial commands, as a fraction of the limit.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for GmpConfig {
    fn default() -> Self {
        GmpConfig {
            learning_rate: 0.1,
            iterations: 50,
            coeffs: LossCoeffs::default(),
            init_scale: 1.0 / 3.0,
            seed: 0,
        }
    }
}

impl GmpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("gmp.learning_rate must be positive".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("gmp.init_scale must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmpResult {
    /// Lowest-loss iterate.
    pub plan: ActionPlan,
    /// Loss of every iterate, the initial plan first.
    pub loss_history: Vec<f64>,
    pub best_iteration: usize,
}

fn initial_plan(cfg: &GmpConfig, horizon: usize, n_robots: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.init_scale).expect("finite scale");
    (0..horizon * n_robots * 2)
        .map(|_| normal.sample(&mut rng).clamp(-1.0, 1.0))
        .collect()
}

fn to_plan(u: &[f64], horizon: usize, n_robots: usize, limit: f64) -> ActionPlan {
    ActionPlan {
        horizon,
        n_robots,
        commands: u.chunks(2).map(|c| Vec2::new(c[0] * limit, c[1] * limit)).collect(),
    }
}

fn diverged(iteration: usize, detail: String) -> Error {
    Error::Diverged {
        stage: "gmp",
        iteration,
        detail,
    }
}

/// Optimises a `horizon`-step plan from `state0` against `loss`.
pub fn plan(
    sim: &Simulator,
    state0: &SimState,
    loss: &dyn StepLoss,
    horizon: usize,
    cfg: &GmpConfig,
) -> Result<GmpResult> {
    cfg.validate()?;
    let nr = state0.robots.len();
    let limit = sim.config().velocity_limit;
    let mut u = initial_plan(cfg, horizon, nr);
    let mut adam = Adam::new(u.len(), cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.iterations + 1);
    let mut best = (f64::INFINITY, u.clone(), 0);

    for it in 0..=cfg.iterations {
        let p = to_plan(&u, horizon, nr, limit);
        let value = if it < cfg.iterations {
            let rollout = sim
                .rollout(state0, &p, true)
                .map_err(|e| diverged(it, format!("rollout failed: {e}")))?;
            let g = sim
                .backward(&rollout, loss)
                .map_err(|e| diverged(it, format!("{e}; plan max |command| = {:.3e}", p.max_abs())))?;
            let grad: Vec<f64> = g.grad.iter().flat_map(|v| [v.x * limit, v.y * limit]).collect();
            let before = u.clone();
            adam.step(&mut u, &grad);
            if it == 0 {
                let dot: f64 = u.iter().zip(&before).zip(&grad).map(|((a, b), g)| (a - b) * g).sum();
                if dot > 0.0 {
                    return Err(diverged(
                        0,
                        format!("first update is not a descent direction (⟨Δu, ∇⟩ = {dot:.3e})"),
                    ));
                }
            }
            for x in u.iter_mut() {
                *x = x.clamp(-1.0, 1.0);
            }
            g.loss
        } else {
            sim.rollout_cost(state0, &p, loss)
                .map_err(|e| diverged(it, format!("rollout failed: {e}")))?
                .0
        };
        if !value.is_finite() {
            return Err(diverged(
                it,
                format!("loss is {value}; plan max |command| = {:.3e}", p.max_abs()),
            ));
        }
        history.push(value);
        if value < best.0 {
            best = (
                value,
                p.commands.iter().flat_map(|c| [c.x / limit, c.y / limit]).collect(),
                it,
            );
        }
    }
    log::debug!("gmp: best loss {:.4} at iteration {}", best.0, best.2);
    let mut plan = to_plan(&best.1, horizon, nr, limit);
    plan.clamp(limit);
    Ok(GmpResult {
        plan,
        loss_history: history,
        best_iteration: best.2,
    })
}

/// Receding-horizon query: plans `horizon` steps from `state` and returns
/// only the first command slice with the wall time it took.
pub fn replan_receding(
    sim: &Simulator,
    state: &SimState,
    loss: &dyn StepLoss,
    horizon: usize,
    cfg: &GmpConfig,
) -> Result<(Vec<Vec2>, Duration)> {
    let start = Instant::now();
    let r = plan(sim, state, loss, horizon, cfg)?;
    Ok((r.plan.at(0).to_vec(), start.elapsed()))
}
