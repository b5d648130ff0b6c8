//! Demonstration datasets from the gradient planner, behaviour cloning, and
//! the PPO baseline.
//!
//! A demo stores the tracked particle subset rather than full observation
//! matrices; [`Demo::observations`] rebuilds them exactly.

mod bc;
mod ppo;

pub use bc::{bc_fit, bc_samples, stratified_split, BcConfig, BcResult, BcSample, StopReason};
pub use ppo::{clipped_surrogate, gae, normalize_advantages, ppo_fit, PpoConfig, PpoResult};

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffsim::{ActionPlan, SimConfig, Simulator, Vec2};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::gmp::{self, GmpConfig};
use crate::nnet::VisibilityMask;
use crate::policy::{downsample_particles, observation_from_parts, visibility_mask, ObsBuilder};
use crate::provenance::{hash_bytes, hash_json, substream};
use crate::scene::{GoalRecord, SceneConfig, Task};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoStep {
    /// Tracked particles of the state the actions were taken in.
    pub tracked: Vec<Vec2>,
    pub robots: Vec<Vec2>,
    pub actions: Vec<Vec2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demo {
    pub goal: GoalRecord,
    pub horizon: usize,
    pub n_robots: usize,
    pub repeat: usize,
    pub gmp_seed: u64,
    pub indices: Vec<usize>,
    pub goal_tracked: Vec<Vec2>,
    pub steps: Vec<DemoStep>,
    pub final_reward: f64,
}

impl Demo {
    pub fn plan(&self) -> ActionPlan {
        ActionPlan {
            horizon: self.steps.len(),
            n_robots: self.n_robots,
            commands: self.steps.iter().flat_map(|s| s.actions.iter().cloned()).collect(),
        }
    }

    pub fn observations(&self) -> Vec<(Array2<f64>, VisibilityMask)> {
        self.steps
            .iter()
            .map(|s| {
                (
                    observation_from_parts(&s.tracked, &self.goal_tracked, &s.robots),
                    visibility_mask(&s.robots),
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectConfig {
    pub horizons: Vec<usize>,
    pub n_robots: usize,
    /// GMP runs per (goal, horizon), each from a different initial plan.
    pub demos_per_goal: usize,
    /// Draw GMP's initial plan per (horizon, repeat) instead of per goal.
    pub shared_init: bool,
    pub seed: u64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            horizons: vec![40],
            n_robots: 3,
            demos_per_goal: 3,
            shared_init: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub demo_count: usize,
    pub goal_count: usize,
    pub horizons: Vec<usize>,
    pub n_robots: usize,
    pub n_obs_particles: usize,
    pub seed: u64,
    pub skipped: usize,
    pub skip_notes: Vec<String>,
    pub sim: SimConfig,
    pub scene: SceneConfig,
    pub gmp: GmpConfig,
    pub sim_config_hash: String,
    /// Hash of the run configuration; the simulator hash when collected
    /// without one.
    #[serde(default)]
    pub config_hash: String,
    /// SHA-256 of the demo records as stored, one JSON line each.
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub demos: Vec<Demo>,
}

struct Job {
    goal: GoalRecord,
    horizon: usize,
    repeat: usize,
}

fn run_job(
    sim: &Simulator,
    scene: &SceneConfig,
    gmp_cfg: &GmpConfig,
    job: &Job,
    cfg: &CollectConfig,
    n_obs: usize,
) -> Result<Demo> {
    let (seed, n_robots) = (cfg.seed, cfg.n_robots);
    let tag = format!("{}/{}/{}", job.goal.id, job.horizon, job.repeat);
    let task = Task::new(sim.config(), scene, &job.goal, n_robots, gmp_cfg.coeffs)?;
    let gmp_seed = if cfg.shared_init {
        substream(seed, &format!("gmp/shared/{}/{}", job.horizon, job.repeat))
    } else {
        substream(seed, &format!("gmp/{tag}"))
    };
    let cfg = GmpConfig {
        seed: gmp_seed,
        ..gmp_cfg.clone()
    };
    let result = gmp::plan(sim, &task.state0, &task.loss, job.horizon, &cfg)?;
    let rollout = sim.rollout(&task.state0, &result.plan, false)?;
    let indices = downsample_particles(
        task.state0.particles.len(),
        n_obs,
        substream(seed, &format!("obs/{tag}")),
    )?;
    let obs = ObsBuilder::new(&task.goal, indices.clone())?;
    let steps = (0..job.horizon)
        .map(|t| {
            let s = &rollout.states[t];
            Ok(DemoStep {
                tracked: obs.tracked(s)?,
                robots: s.robots.x.clone(),
                actions: result.plan.at(t).to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Demo {
        goal: job.goal.clone(),
        horizon: job.horizon,
        n_robots,
        repeat: job.repeat,
        gmp_seed,
        indices,
        goal_tracked: obs.goal_tracked().to_vec(),
        steps,
        final_reward: task.reward.reward(&rollout.final_state().particles),
    })
}

/// Runs the planner for every (goal, horizon, repeat) and records each
/// rollout. Failed plans are skipped and noted in the manifest.
pub fn collect(
    sim_cfg: &SimConfig,
    scene: &SceneConfig,
    gmp_cfg: &GmpConfig,
    goals: &[GoalRecord],
    cfg: &CollectConfig,
    n_obs_particles: usize,
    exec: Exec,
) -> Result<Dataset> {
    if goals.is_empty() {
        return Err(Error::Config("collect needs at least one goal".into()));
    }
    if cfg.horizons.is_empty() || cfg.horizons.contains(&0) {
        return Err(Error::Config("collect horizons must be non-empty and positive".into()));
    }
    let sim = Simulator::new(sim_cfg.clone())?;
    let mut jobs = Vec::new();
    for g in goals {
        for &horizon in &cfg.horizons {
            for repeat in 0..cfg.demos_per_goal {
                jobs.push(Job {
                    goal: g.clone(),
                    horizon,
                    repeat,
                });
            }
        }
    }
    let results = exec.map(&jobs, |_, job| run_job(&sim, scene, gmp_cfg, job, cfg, n_obs_particles));
    let mut demos = Vec::new();
    let mut skip_notes = Vec::new();
    for (job, r) in jobs.iter().zip(results) {
        match r {
            Ok(d) => demos.push(d),
            Err(e) => {
                let note = format!(
                    "goal {} horizon {} repeat {}: {e}",
                    job.goal.id, job.horizon, job.repeat
                );
                log::warn!("demo skipped: {note}");
                skip_notes.push(note);
            }
        }
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        demo_count: demos.len(),
        goal_count: goals.len(),
        horizons: cfg.horizons.clone(),
        n_robots: cfg.n_robots,
        n_obs_particles,
        seed: cfg.seed,
        skipped: skip_notes.len(),
        skip_notes,
        sim: sim_cfg.clone(),
        scene: scene.clone(),
        gmp: gmp_cfg.clone(),
        sim_config_hash: hash_json(sim_cfg),
        config_hash: hash_json(sim_cfg),
        content_hash: content_hash(&demos),
    };
    Ok(Dataset { manifest, demos })
}

fn demo_lines(demos: &[Demo]) -> Vec<String> {
    demos
        .iter()
        .map(|d| serde_json::to_string(d).expect("serialisable demo"))
        .collect()
}

fn content_hash(demos: &[Demo]) -> String {
    let mut buf = String::new();
    for l in demo_lines(demos) {
        buf.push_str(&l);
        buf.push('\n');
    }
    hash_bytes(buf.as_bytes())
}

#[derive(Debug, Serialize, Deserialize)]
struct DemoHeader {
    format: String,
    version: u32,
    config_hash: String,
    demo_count: usize,
}

const MANIFEST_FILE: &str = "manifest.json";
const DEMOS_FILE: &str = "demos.jsonl";

/// Writes `manifest.json` and `demos.jsonl` (header line, then one demo per line).
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&ds.manifest)? + "\n",
    )?;
    let mut f = std::io::BufWriter::new(fs::File::create(dir.join(DEMOS_FILE))?);
    let header = DemoHeader {
        format: "softpush-demos".into(),
        version: DATASET_VERSION,
        config_hash: ds.manifest.config_hash.clone(),
        demo_count: ds.demos.len(),
    };
    writeln!(f, "{}", serde_json::to_string(&header)?)?;
    for l in demo_lines(&ds.demos) {
        writeln!(f, "{l}")?;
    }
    f.flush()?;
    Ok(())
}

/// Loads a dataset and checks it against its manifest.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&mpath)?).map_err(|e| Error::Format {
        path: mpath.display().to_string(),
        detail: e.to_string(),
    })?;
    let dpath = dir.join(DEMOS_FILE);
    let bad = |detail: String| Error::Format {
        path: dpath.display().to_string(),
        detail,
    };
    let mut lines = BufReader::new(fs::File::open(&dpath)?).lines();
    let header: DemoHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l?).map_err(|e| bad(format!("bad header: {e}")))?,
        None => return Err(bad("missing header line".into())),
    };
    if header.version != DATASET_VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    let mut demos = Vec::new();
    for (i, l) in lines.enumerate() {
        demos.push(serde_json::from_str(&l?).map_err(|e| bad(format!("record {}: {e}", i + 1)))?);
    }
    if demos.len() != manifest.demo_count || content_hash(&demos) != manifest.content_hash {
        return Err(bad("demo records do not match the manifest hash".into()));
    }
    Ok(Dataset { manifest, demos })
}

/// Re-executes a stored demo's commands from the scene's initial state and
/// returns the final reward.
pub fn replay_demo(manifest: &DatasetManifest, demo: &Demo) -> Result<f64> {
    let sim = Simulator::new(manifest.sim.clone())?;
    let task = Task::new(
        &manifest.sim,
        &manifest.scene,
        &demo.goal,
        demo.n_robots,
        manifest.gmp.coeffs,
    )?;
    let rollout = sim.rollout(&task.state0, &demo.plan(), false)?;
    Ok(task.reward.reward(&rollout.final_state().particles))
}
