//! Experiment harness: closed- and open-loop episodes, reward statistics,
//! and the comparison, generalisation, robot-count, kidnap and latency
//! suites.
//!
//! Wall-clock columns are only filled when [`EvalConfig::record_timing`] is
//! set; everything else in a report is a deterministic function of the
//! configuration and seed.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffsim::{ActionPlan, SimConfig, SimState, Simulator, Vec2};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::gmp::{self, GmpConfig};
use crate::mppi::{mppi_plan, MppiConfig};
use crate::policy::{downsample_particles, nearest_neighbors, ObsBuilder, Policy, PolicyConfig, Smoother};
use crate::provenance::{hash_json, substream};
use crate::scene::{GoalRecord, LossCoeffs, SceneConfig, Task};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_goals: usize,
    pub horizon: usize,
    pub n_robots: usize,
    pub robot_counts: Vec<usize>,
    pub sweep_episodes: usize,
    pub kidnap_episodes: usize,
    pub kidnap_step: usize,
    /// Steps before and after the kidnap compared by the attention signal.
    pub kidnap_window: usize,
    pub timing_robot_counts: Vec<usize>,
    pub timing_repeats: usize,
    pub record_timing: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_goals: 20,
            horizon: 40,
            n_robots: 3,
            robot_counts: vec![3, 4, 5],
            sweep_episodes: 20,
            kidnap_episodes: 5,
            kidnap_step: 20,
            kidnap_window: 10,
            timing_robot_counts: vec![6, 100],
            timing_repeats: 50,
            record_timing: false,
            seed: 0,
        }
    }
}

/// Shared environment for every episode of an experiment.
#[derive(Debug, Clone)]
pub struct EvalContext {
    pub sim: SimConfig,
    pub scene: SceneConfig,
    pub coeffs: LossCoeffs,
    pub policy: PolicyConfig,
    pub exec: Exec,
    pub record_timing: bool,
}

#[derive(Debug, Clone)]
pub enum Method {
    /// Open-loop plan from the gradient planner.
    Gmp(GmpConfig),
    /// Open-loop plan from MPPI; sample rollouts run on the context's executor.
    Mppi(MppiConfig),
    /// Uniform commands within the velocity limit.
    Random,
    /// Closed loop with action smoothing.
    Policy(Policy),
}

/// Teleport a robot to a workspace corner at step `step` and zero its commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kidnap {
    pub step: usize,
    pub victim: usize,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub goal: GoalRecord,
    pub n_robots: usize,
    pub horizon: usize,
    pub sim: SimConfig,
    pub seed: u64,
    pub kidnap: Option<Kidnap>,
}

/// Head- and layer-averaged attention of every robot to itself and to its
/// nearest neighbour at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStep {
    pub step: usize,
    pub nearest: Vec<Option<usize>>,
    pub self_weight: Vec<f64>,
    pub neighbor_weight: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub method: String,
    pub param: String,
    pub episode: usize,
    pub goal_id: usize,
    pub reward: f64,
    /// Seconds per control step, when timing is recorded.
    pub time_per_step: Option<f64>,
    pub failed: Option<String>,
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub reward: f64,
    pub seconds: f64,
    pub attention: Vec<AttentionStep>,
    pub final_state: SimState,
}

fn corner(sim: &SimConfig) -> Vec2 {
    let m = sim.robot_radius + 2.0 / sim.grid_res as f64;
    Vec2::new(m, m)
}

fn summarize_attention(step: usize, robots: &[Vec2], attn: &[ndarray::Array3<f64>]) -> AttentionStep {
    let nn = nearest_neighbors(robots);
    let n = robots.len();
    let mut sw = vec![0.0; n];
    let mut nw = vec![0.0; n];
    let mut count = 0.0;
    for a in attn {
        for h in 0..a.shape()[0] {
            count += 1.0;
            for i in 0..n {
                sw[i] += a[[h, i, i]];
                if let Some(j) = nn[i] {
                    nw[i] += a[[h, i, j]];
                }
            }
        }
    }
    if count > 0.0 {
        for i in 0..n {
            sw[i] /= count;
            nw[i] /= count;
        }
    }
    AttentionStep {
        step,
        nearest: nn,
        self_weight: sw,
        neighbor_weight: nw,
    }
}

impl EvalContext {
    fn task(&self, ep: &Episode) -> Result<(Simulator, Task)> {
        let sim = Simulator::new(ep.sim.clone())?;
        let task = Task::new(&ep.sim, &self.scene, &ep.goal, ep.n_robots, self.coeffs)?;
        Ok((sim, task))
    }

    fn run_plan(&self, sim: &Simulator, task: &Task, plan: &ActionPlan, seconds: f64) -> Result<EpisodeOutcome> {
        let state = sim.rollout(&task.state0, plan, false)?.final_state().clone();
        Ok(EpisodeOutcome {
            reward: task.reward.reward(&state.particles),
            seconds,
            attention: Vec::new(),
            final_state: state,
        })
    }

    pub fn run(&self, method: &Method, ep: &Episode) -> Result<EpisodeOutcome> {
        let (sim, task) = self.task(ep)?;
        let limit = ep.sim.velocity_limit;
        match method {
            Method::Gmp(cfg) => {
                let start = Instant::now();
                let cfg = GmpConfig {
                    seed: substream(ep.seed, "gmp"),
                    ..cfg.clone()
                };
                let plan = gmp::plan(&sim, &task.state0, &task.loss, ep.horizon, &cfg)?.plan;
                self.run_plan(&sim, &task, &plan, start.elapsed().as_secs_f64())
            }
            Method::Mppi(cfg) => {
                let start = Instant::now();
                let cfg = MppiConfig {
                    seed: substream(ep.seed, "mppi"),
                    ..cfg.clone()
                };
                let plan = mppi_plan(&sim, &task.state0, &task.loss, ep.horizon, &cfg, self.exec)?.plan;
                self.run_plan(&sim, &task, &plan, start.elapsed().as_secs_f64())
            }
            Method::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(substream(ep.seed, "random"));
                let mut plan = ActionPlan::zeros(ep.horizon, ep.n_robots);
                for c in &mut plan.commands {
                    *c = Vec2::new(rng.random_range(-limit..=limit), rng.random_range(-limit..=limit));
                }
                self.run_plan(&sim, &task, &plan, 0.0)
            }
            Method::Policy(policy) => self.run_policy(&sim, &task, policy, ep),
        }
    }

    fn run_policy(&self, sim: &Simulator, task: &Task, policy: &Policy, ep: &Episode) -> Result<EpisodeOutcome> {
        let limit = ep.sim.velocity_limit;
        let indices = downsample_particles(
            task.state0.particles.len(),
            self.policy.n_obs_particles,
            substream(ep.seed, "obs"),
        )?;
        let obs = ObsBuilder::new(&task.goal, indices)?;
        let mut smoother = Smoother::new(self.policy.smoothing_window);
        let mut state = task.state0.clone();
        let mut attention = Vec::new();
        let mut seconds = 0.0;
        for t in 0..ep.horizon {
            if let Some(k) = ep.kidnap.filter(|k| k.step == t) {
                state.robots.x[k.victim] = corner(&ep.sim);
                state.robots.v[k.victim] = Vec2::zeros();
            }
            let start = Instant::now();
            let o = obs.build(&state)?;
            let out = policy.act(&o, &state.robots.x, limit)?;
            let mut cmds = smoother.push(out.actions);
            seconds += start.elapsed().as_secs_f64();
            if let Some(attn) = &out.attention {
                attention.push(summarize_attention(t, &state.robots.x, attn));
            }
            if let Some(k) = ep.kidnap.filter(|k| t >= k.step) {
                cmds[k.victim] = Vec2::zeros();
            }
            state = sim.step(&state, &cmds)?;
        }
        Ok(EpisodeOutcome {
            reward: task.reward.reward(&state.particles),
            seconds,
            attention,
            final_state: state,
        })
    }

    /// Runs every episode, recording failures instead of aborting.
    pub fn records(
        &self,
        experiment: &str,
        name: &str,
        param: &str,
        method: &Method,
        eps: &[Episode],
    ) -> Vec<RunRecord> {
        // MPPI parallelises internally; the outer loop stays sequential for it.
        let outer = match method {
            Method::Mppi(_) => Exec::Sequential,
            _ => self.exec,
        };
        let outcomes = outer.map(eps, |_, ep| self.run(method, ep));
        eps.iter()
            .zip(outcomes)
            .enumerate()
            .map(|(k, (ep, r))| {
                let (reward, time, failed) = match r {
                    Ok(o) => (o.reward, Some(o.seconds / ep.horizon.max(1) as f64), None),
                    Err(e) => (f64::NAN, None, Some(e.to_string())),
                };
                RunRecord {
                    experiment: experiment.into(),
                    method: name.into(),
                    param: param.into(),
                    episode: k,
                    goal_id: ep.goal.id,
                    reward,
                    time_per_step: time.filter(|_| self.record_timing),
                    failed,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardStats {
    pub n: usize,
    pub failed: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// The single statistics routine for every report. Failed episodes are
/// counted and excluded.
pub fn reward_stats<'a>(records: impl IntoIterator<Item = &'a RunRecord>) -> RewardStats {
    let mut xs = Vec::new();
    let mut failed = 0;
    for r in records {
        if r.failed.is_some() {
            failed += 1;
        } else {
            xs.push(r.reward);
        }
    }
    let n = xs.len();
    let mean = if n == 0 {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / n as f64
    };
    let std = if n == 0 {
        f64::NAN
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
    };
    RewardStats { n, failed, mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub sim_config_hash: String,
    pub goals: Vec<GoalRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub records: Vec<RunRecord>,
    pub provenance: Provenance,
}

pub const CSV_HEADER: &str = "experiment,method,param,episode,reward,time_per_step";

impl ExperimentReport {
    pub fn stats(&self, method: &str, param: &str) -> RewardStats {
        reward_stats(self.records.iter().filter(|r| r.method == method && r.param == param))
    }

    /// Distinct `(method, param)` pairs in first-seen order.
    pub fn groups(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        for r in &self.records {
            let key = (r.method.clone(), r.param.clone());
            if !out.contains(&key) {
                out.push(key);
            }
        }
        out
    }

    /// One row per episode; failed episodes carry an empty reward.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let reward = if r.failed.is_some() {
                String::new()
            } else {
                format!("{:.17e}", r.reward)
            };
            let time = r.time_per_step.map(|t| format!("{t:.6e}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{reward},{time}",
                r.experiment, r.method, r.param, r.episode
            );
        }
        s
    }

    /// `method,param,n,failed,mean,std` per group.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("experiment,method,param,n,failed,mean,std\n");
        for (m, p) in self.groups() {
            let st = self.stats(&m, &p);
            let _ = writeln!(
                s,
                "{},{m},{p},{},{},{:.6},{:.6}",
                self.experiment, st.n, st.failed, st.mean, st.std
            );
        }
        s
    }
}

fn episodes(goals: &[GoalRecord], n_robots: usize, horizon: usize, sim: &SimConfig, seed: u64) -> Vec<Episode> {
    goals
        .iter()
        .enumerate()
        .map(|(k, g)| Episode {
            goal: g.clone(),
            n_robots,
            horizon,
            sim: sim.clone(),
            seed: substream(seed, &format!("episode/{k}")),
            kidnap: None,
        })
        .collect()
}

fn provenance(ctx: &EvalContext, goals: &[GoalRecord], seed: u64) -> Provenance {
    Provenance {
        seed,
        sim_config_hash: hash_json(&ctx.sim),
        goals: goals.to_vec(),
    }
}

pub fn compare_methods(
    ctx: &EvalContext,
    methods: &[(String, Method)],
    goals: &[GoalRecord],
    n_robots: usize,
    horizon: usize,
    seed: u64,
) -> ExperimentReport {
    let eps = episodes(goals, n_robots, horizon, &ctx.sim, seed);
    let mut records = Vec::new();
    for (name, m) in methods {
        records.extend(ctx.records("compare", name, "nominal", m, &eps));
    }
    ExperimentReport {
        experiment: "compare".into(),
        records,
        provenance: provenance(ctx, goals, seed),
    }
}

/// A physical parameter varied in a generalisation sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Friction,
    YieldStress,
    VelocityLimit,
    RobotRadius,
}

impl SweepParam {
    pub const ALL: [SweepParam; 4] = [
        SweepParam::Friction,
        SweepParam::YieldStress,
        SweepParam::VelocityLimit,
        SweepParam::RobotRadius,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::Friction => "friction",
            SweepParam::YieldStress => "yield_stress",
            SweepParam::VelocityLimit => "velocity_limit",
            SweepParam::RobotRadius => "robot_radius",
        }
    }

    /// Test range used by the generalisation study.
    pub fn test_range(&self) -> [f64; 2] {
        match self {
            SweepParam::Friction => [1.0, 2.5],
            SweepParam::YieldStress => [15.0, 45.0],
            SweepParam::VelocityLimit => [0.005, 0.02],
            SweepParam::RobotRadius => [0.02, 0.035],
        }
    }

    pub fn apply(&self, cfg: &mut SimConfig, v: f64) {
        match self {
            SweepParam::Friction => cfg.friction = v,
            SweepParam::YieldStress => cfg.yield_stress = v,
            SweepParam::VelocityLimit => cfg.velocity_limit = v,
            SweepParam::RobotRadius => cfg.robot_radius = v,
        }
    }
}

/// Nominal episodes plus, per parameter, the same episodes with that
/// parameter drawn uniformly from its range. `goals` are cycled to fill
/// `n_episodes`.
#[allow(clippy::too_many_arguments)]
pub fn generalization_sweep(
    ctx: &EvalContext,
    name: &str,
    method: &Method,
    sweeps: &[(SweepParam, [f64; 2])],
    goals: &[GoalRecord],
    n_robots: usize,
    horizon: usize,
    n_episodes: usize,
    seed: u64,
) -> ExperimentReport {
    let cycled: Vec<GoalRecord> = (0..n_episodes).map(|k| goals[k % goals.len()].clone()).collect();
    let nominal = episodes(&cycled, n_robots, horizon, &ctx.sim, seed);
    let mut records = ctx.records("generalization", name, "nominal", method, &nominal);
    for (p, range) in sweeps {
        let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, &format!("sweep/{}", p.name())));
        let eps: Vec<Episode> = nominal
            .iter()
            .map(|e| {
                let v = if range[0] == range[1] {
                    range[0]
                } else {
                    rng.random_range(range[0]..=range[1])
                };
                let mut e = e.clone();
                p.apply(&mut e.sim, v);
                e
            })
            .collect();
        records.extend(ctx.records("generalization", name, p.name(), method, &eps));
    }
    ExperimentReport {
        experiment: "generalization".into(),
        records,
        provenance: provenance(ctx, goals, seed),
    }
}

/// Attention policy only; the MLP cannot run at other robot counts.
pub fn robot_count_eval(
    ctx: &EvalContext,
    policy: &Policy,
    counts: &[usize],
    goals: &[GoalRecord],
    horizon: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    if !matches!(policy, Policy::Attention(_)) {
        return Err(Error::contract("robot-count evaluation needs the attention policy"));
    }
    let method = Method::Policy(policy.clone());
    let mut records = Vec::new();
    for &n in counts {
        let eps = episodes(goals, n, horizon, &ctx.sim, seed);
        records.extend(ctx.records("robot_count", "bc_attention", &format!("n_r={n}"), &method, &eps));
    }
    Ok(ExperimentReport {
        experiment: "robot_count".into(),
        records,
        provenance: provenance(ctx, goals, seed),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KidnapTrace {
    pub episode: usize,
    pub goal_id: usize,
    pub kidnap: Kidnap,
    pub reward: f64,
    pub baseline_reward: f64,
    pub attention: Vec<AttentionStep>,
    /// Mean neighbour weight of the other robots over the window before the kidnap.
    pub neighbor_before: f64,
    /// Same over the window starting at the kidnap step.
    pub neighbor_after: f64,
}

impl KidnapTrace {
    pub fn signal(&self) -> bool {
        self.neighbor_after > self.neighbor_before
    }
}

fn window_mean(trace: &[AttentionStep], lo: usize, hi: usize, skip: usize) -> f64 {
    let mut s = 0.0;
    let mut n = 0;
    for a in trace.iter().filter(|a| a.step >= lo && a.step < hi) {
        for (i, w) in a.neighbor_weight.iter().enumerate() {
            if i != skip {
                s += w;
                n += 1;
            }
        }
    }
    s / n.max(1) as f64
}

/// One kidnap episode per goal, with the victim cycling over robots; also
/// runs the matching episode without a kidnap.
#[allow(clippy::too_many_arguments)]
pub fn kidnap_study(
    ctx: &EvalContext,
    policy: &Policy,
    goals: &[GoalRecord],
    n_robots: usize,
    horizon: usize,
    step: usize,
    window: usize,
    seed: u64,
) -> Result<(ExperimentReport, Vec<KidnapTrace>)> {
    if step == 0 || step > horizon {
        return Err(Error::contract(format!("kidnap step {step} must lie in 1..={horizon}")));
    }
    let method = Method::Policy(policy.clone());
    let base = episodes(goals, n_robots, horizon, &ctx.sim, seed);
    let kid: Vec<Episode> = base
        .iter()
        .enumerate()
        .map(|(k, e)| Episode {
            kidnap: Some(Kidnap {
                step,
                victim: k % n_robots,
            }),
            ..e.clone()
        })
        .collect();
    let pairs: Vec<(Episode, Episode)> = base.into_iter().zip(kid).collect();
    let outcomes = ctx.exec.map(&pairs, |_, (b, k)| -> Result<_> {
        Ok((ctx.run(&method, b)?, ctx.run(&method, k)?))
    });
    let mut records = Vec::new();
    let mut traces = Vec::new();
    for (k, ((_, ep), out)) in pairs.iter().zip(outcomes).enumerate() {
        let (b, o) = out?;
        let kn = ep.kidnap.unwrap();
        let lo = step.saturating_sub(window);
        traces.push(KidnapTrace {
            episode: k,
            goal_id: ep.goal.id,
            kidnap: kn,
            reward: o.reward,
            baseline_reward: b.reward,
            neighbor_before: window_mean(&o.attention, lo, step, kn.victim),
            neighbor_after: window_mean(&o.attention, step, step + window, kn.victim),
            attention: o.attention,
        });
        for (param, r) in [("no_kidnap", b.reward), ("kidnap", o.reward)] {
            records.push(RunRecord {
                experiment: "kidnap".into(),
                method: policy.arch().to_string(),
                param: param.into(),
                episode: k,
                goal_id: ep.goal.id,
                reward: r,
                time_per_step: None,
                failed: None,
            });
        }
    }
    Ok((
        ExperimentReport {
            experiment: "kidnap".into(),
            records,
            provenance: provenance(ctx, goals, seed),
        },
        traces,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub n_robots: usize,
    pub median_seconds: f64,
    pub repeats: usize,
}

/// Median per-step inference latency on random observations, single worker.
pub fn timing_scaling(policy: &Policy, counts: &[usize], repeats: usize, seed: u64) -> Result<Vec<LatencyRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = policy.obs_width();
    let limit = policy.action_scale();
    let mut rows = Vec::new();
    for &n in counts {
        let obs = Array2::from_shape_fn((n, width), |_| rng.random_range(-1.0..1.0));
        let robots: Vec<Vec2> = (0..n).map(|_| Vec2::new(rng.random(), rng.random())).collect();
        policy.act(&obs, &robots, limit)?;
        let mut times: Vec<f64> = (0..repeats.max(1))
            .map(|_| {
                let start = Instant::now();
                let out = policy.act(&obs, &robots, limit);
                let dt = start.elapsed().as_secs_f64();
                std::hint::black_box(out).map(|_| dt)
            })
            .collect::<Result<_>>()?;
        times.sort_by(f64::total_cmp);
        rows.push(LatencyRow {
            n_robots: n,
            median_seconds: times[times.len() / 2],
            repeats: times.len(),
        });
    }
    Ok(rows)
}

/// Rope, goal and robots of one frame as a standalone SVG.
pub fn render_svg(state: &SimState, goal: &[Vec2], size: u32) -> String {
    let s = size as f64;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let pt = |p: &Vec2| (p.x * s, (1.0 - p.y) * s);
    for p in goal {
        let (x, y) = pt(p);
        let _ = writeln!(out, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"1.5\" fill=\"#9ecae1\"/>");
    }
    for p in &state.particles.x {
        let (x, y) = pt(p);
        let _ = writeln!(out, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"1.5\" fill=\"#d95f02\"/>");
    }
    for r in &state.robots.x {
        let (x, y) = pt(r);
        let _ = writeln!(
            out,
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{:.2}\" fill=\"none\" stroke=\"#333\" stroke-width=\"1.5\"/>",
            state.robots.radius * s
        );
    }
    out.push_str("</svg>\n");
    out
}
