//! Model predictive path integral planning with forward-only rollouts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffsim::{ActionPlan, SimState, Simulator, StepLoss, Vec2};
use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MppiConfig {
    pub n_samples: usize,
    /// Plan length; callers may override it per task.
    pub horizon: usize,
    pub n_stages: usize,
    /// Noise moments in normalised units (multiples of the velocity limit).
    pub noise_mean: f64,
    pub noise_std: f64,
    /// `None` uses the standard deviation of the first stage's costs.
    pub temperature: Option<f64>,
    pub seed: u64,
}

impl Default for MppiConfig {
    fn default() -> Self {
        MppiConfig {
            n_samples: 1200,
            horizon: 100,
            n_stages: 30,
            noise_mean: 0.0,
            noise_std: 1.0,
            temperature: None,
            seed: 0,
        }
    }
}

impl MppiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("mppi.n_samples must be >= 1".into()));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config("mppi.temperature must be positive".into()));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite() && self.noise_mean.is_finite()) {
            return Err(Error::Config(
                "mppi noise moments must be finite, std non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    /// Lowest sampled cost of the stage.
    pub best: f64,
    /// Importance-weighted mean cost.
    pub weighted: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MppiResult {
    pub plan: ActionPlan,
    pub cost_history: Vec<StageCost>,
    pub temperature: f64,
}

/// Normalised `exp(-(c - c_min) / temperature)`; non-finite costs get zero weight.
pub fn importance_weights(costs: &[f64], temperature: f64) -> Vec<f64> {
    let min = costs
        .iter()
        .cloned()
        .filter(|c| c.is_finite())
        .fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = costs
        .iter()
        .map(|c| {
            if c.is_finite() {
                (-(c - min) / temperature).exp()
            } else {
                0.0
            }
        })
        .collect();
    let z: f64 = w.iter().sum();
    for x in &mut w {
        *x /= z;
    }
    w
}

fn std_dev(xs: &[f64]) -> f64 {
    let f: Vec<f64> = xs.iter().cloned().filter(|c| c.is_finite()).collect();
    let n = f.len() as f64;
    let m = f.iter().sum::<f64>() / n;
    (f.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

/// Open-loop MPPI. Each stage perturbs the mean plan, clamps the samples to
/// the limit, and moves the mean to their importance-weighted average. From
/// the second stage on, the best plan seen so far is re-evaluated in slot 0
/// so the best sampled cost never increases.
pub fn mppi_plan(
    sim: &Simulator,
    state0: &SimState,
    loss: &dyn StepLoss,
    horizon: usize,
    cfg: &MppiConfig,
    exec: Exec,
) -> Result<MppiResult> {
    cfg.validate()?;
    let nr = state0.robots.len();
    let limit = sim.config().velocity_limit;
    let dim = horizon * nr * 2;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(cfg.noise_mean, cfg.noise_std).expect("validated");
    let mut mean = vec![0.0; dim];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut temperature = cfg.temperature;
    let mut history = Vec::with_capacity(cfg.n_stages);

    let to_plan = |u: &[f64]| ActionPlan {
        horizon,
        n_robots: nr,
        commands: u.chunks(2).map(|c| Vec2::new(c[0] * limit, c[1] * limit)).collect(),
    };

    for stage in 0..cfg.n_stages {
        let samples: Vec<Vec<f64>> = (0..cfg.n_samples)
            .map(|k| match (&best, k) {
                (Some((_, b)), 0) => b.clone(),
                _ => mean
                    .iter()
                    .map(|m| (m + noise.sample(&mut rng)).clamp(-1.0, 1.0))
                    .collect(),
            })
            .collect();
        let costs: Vec<f64> = exec.map(&samples, |_, u| match sim.rollout_cost(state0, &to_plan(u), loss) {
            Ok((c, _)) if c.is_finite() => c,
            _ => f64::INFINITY,
        });
        if costs.iter().all(|c| !c.is_finite()) {
            return Err(Error::Diverged {
                stage: "mppi",
                iteration: stage,
                detail: "every sampled rollout was non-finite".into(),
            });
        }
        let lambda = *temperature.get_or_insert_with(|| {
            let s = std_dev(&costs);
            if s > 0.0 {
                s
            } else {
                1.0
            }
        });
        let w = importance_weights(&costs, lambda);
        mean = vec![0.0; dim];
        for (wk, u) in w.iter().zip(&samples) {
            if *wk > 0.0 {
                for (m, x) in mean.iter_mut().zip(u) {
                    *m += wk * x;
                }
            }
        }
        let (kbest, cbest) = costs
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |a, (k, &c)| if c < a.1 { (k, c) } else { a });
        if best.as_ref().is_none_or(|(c, _)| cbest < *c) {
            best = Some((cbest, samples[kbest].clone()));
        }
        let weighted = w
            .iter()
            .zip(&costs)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, c)| w * c)
            .sum();
        history.push(StageCost { best: cbest, weighted });
        log::debug!("mppi stage {stage}: best {cbest:.4}, weighted {weighted:.4}");
    }
    let mut plan = to_plan(&mean);
    plan.clamp(limit);
    Ok(MppiResult {
        plan,
        cost_history: history,
        temperature: temperature.unwrap_or(1.0),
    })
}
