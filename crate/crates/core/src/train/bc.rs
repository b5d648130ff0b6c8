use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Demo;
use crate::error::{Error, Result};
use crate::nnet::{mse, ParamAdam, Params, VisibilityMask};
use crate::policy::{Arch, Policy, PolicyConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BcConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config(
                "train.bc needs a positive learning rate and batch size".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("train.bc.val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One time step of one demo: every robot's observation row and command.
#[derive(Debug, Clone)]
pub struct BcSample {
    pub obs: Array2<f64>,
    pub mask: VisibilityMask,
    /// Normalised commands, `N_r × 2`.
    pub target: Array2<f64>,
    /// Goal id, used to stratify the validation split.
    pub group: usize,
}

/// Targets are the demo commands divided by `action_scale`.
pub fn bc_samples(demos: &[Demo], action_scale: f64) -> Vec<BcSample> {
    let mut out = Vec::new();
    for d in demos {
        for ((obs, mask), step) in d.observations().into_iter().zip(&d.steps) {
            let target = Array2::from_shape_fn((step.actions.len(), 2), |(i, a)| step.actions[i][a] / action_scale);
            out.push(BcSample {
                obs,
                mask,
                target,
                group: d.goal.id,
            });
        }
    }
    out
}

/// Per group, a seeded shuffle sends `round(fraction · size)` members to
/// validation. Returns `(train, validation)` indices.
pub fn stratified_split(groups: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for g in ids {
        let mut members: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == g).collect();
        members.shuffle(&mut rng);
        let k = (fraction * members.len() as f64).round() as usize;
        val.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Plateau,
    MaxEpochs,
    /// A non-finite loss appeared in this epoch; the last finite best is kept.
    Diverged {
        epoch: usize,
    },
}

#[derive(Debug, Clone)]
pub struct BcResult {
    pub policy: Policy,
    pub train_loss: Vec<f64>,
    /// Equal to `train_loss` when the validation split is empty.
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stop: StopReason,
}

impl BcResult {
    pub fn best_train_loss(&self) -> f64 {
        self.train_loss[self.best_epoch]
    }

    pub fn best_val_loss(&self) -> f64 {
        self.val_loss[self.best_epoch]
    }
}

fn stack(samples: &[BcSample], idx: &[usize]) -> (Array2<f64>, VisibilityMask, Array2<f64>) {
    let obs: Vec<ArrayView2<f64>> = idx.iter().map(|&i| samples[i].obs.view()).collect();
    let tgt: Vec<ArrayView2<f64>> = idx.iter().map(|&i| samples[i].target.view()).collect();
    let masks: Vec<VisibilityMask> = idx.iter().map(|&i| samples[i].mask.clone()).collect();
    (
        concatenate(Axis(0), &obs).expect("equal widths"),
        VisibilityMask::block_diag(&masks),
        concatenate(Axis(0), &tgt).expect("two columns"),
    )
}

fn mean_loss(policy: &Policy, samples: &[BcSample], idx: &[usize], chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for part in idx.chunks(chunk) {
        let (x, m, t) = stack(samples, part);
        let (y, _) = policy.forward_batch(&x, &m, part.len())?;
        total += mse(&y, &t)?.0 * t.len() as f64;
        count += t.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Minimises the MSE between policy outputs and demo commands with Adam,
/// keeping the parameters of the best validation epoch.
pub fn bc_fit(
    samples: &[BcSample],
    arch: Arch,
    policy_cfg: &PolicyConfig,
    action_scale: f64,
    cfg: &BcConfig,
) -> Result<BcResult> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let n_robots = samples[0].obs.nrows();
    if arch == Arch::Mlp && samples.iter().any(|s| s.obs.nrows() != n_robots) {
        return Err(Error::Config(
            "the MLP policy needs a constant robot count across the dataset".into(),
        ));
    }
    if samples.iter().any(|s| s.obs.ncols() != policy_cfg.obs_width()) {
        return Err(Error::Config(format!(
            "dataset observations are not {} wide; check policy.n_obs_particles",
            policy_cfg.obs_width()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = Policy::new(arch, &mut rng, policy_cfg, n_robots, action_scale)?;
    let groups: Vec<usize> = samples.iter().map(|s| s.group).collect();
    let (mut train, val) = stratified_split(&groups, cfg.val_fraction, cfg.seed);
    let mut opt = ParamAdam::new(&mut policy, cfg.learning_rate);
    let mut best = (f64::INFINITY, 0, policy.clone());
    let (mut train_curve, mut val_curve) = (Vec::new(), Vec::new());
    let mut stop = StopReason::MaxEpochs;
    for epoch in 0..cfg.max_epochs {
        train.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for part in train.chunks(cfg.batch_size) {
            let (x, m, t) = stack(samples, part);
            let (y, cache) = policy.forward_batch(&x, &m, part.len())?;
            let (l, dy) = mse(&y, &t)?;
            total += l * t.len() as f64;
            count += t.len();
            if !l.is_finite() {
                break;
            }
            let mut grad = policy.zeros_like();
            policy.backward(&cache, &dy, &mut grad);
            opt.step(&mut policy, &mut grad);
        }
        let tl = total / count.max(1) as f64;
        if !tl.is_finite() || !policy.all_finite() {
            log::warn!("bc: non-finite loss at epoch {epoch}, keeping epoch {}", best.1);
            stop = StopReason::Diverged { epoch };
            break;
        }
        let vl = if val.is_empty() {
            mean_loss(&policy, samples, &train, 256)?
        } else {
            mean_loss(&policy, samples, &val, 256)?
        };
        let tl_eval = mean_loss(&policy, samples, &train, 256)?;
        train_curve.push(tl_eval);
        val_curve.push(vl);
        log::debug!("bc epoch {epoch}: train {tl_eval:.5} val {vl:.5}");
        if vl < best.0 {
            best = (vl, epoch, policy.clone());
        } else if epoch - best.1 >= cfg.patience {
            stop = StopReason::Plateau;
            break;
        }
    }
    if train_curve.is_empty() {
        return Err(Error::Diverged {
            stage: "bc",
            iteration: 0,
            detail: "loss was non-finite in the first epoch".into(),
        });
    }
    Ok(BcResult {
        policy: best.2,
        train_loss: train_curve,
        val_loss: val_curve,
        best_epoch: best.1,
        stop,
    })
}
