//! `softpush`: plan, collect demonstrations, train policies and run the
//! evaluation suites from one TOML configuration.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use softpush::diffsim::Simulator;
use softpush::evalbench::{
    compare_methods, generalization_sweep, kidnap_study, robot_count_eval, timing_scaling, EvalContext,
    ExperimentReport, Method, SweepParam,
};
use softpush::exec::Exec;
use softpush::gmp;
use softpush::mppi::mppi_plan;
use softpush::policy::{load_policy, save_policy, Arch, Policy};
use softpush::provenance::substream;
use softpush::scene::{sample_goals, GoalRecord, Task};
use softpush::train::{bc_fit, bc_samples, collect, load_dataset, ppo_fit, save_dataset};

use config::RunConfig;

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<softpush::Error> for CliError {
    fn from(e: softpush::Error) -> Self {
        use softpush::Error as E;
        match &e {
            E::Config(_) | E::Scene(_) | E::Format { .. } => CliError::Config(e.to_string()),
            E::SimFault { .. } => CliError::Runtime(format!("diffsim: {e}")),
            E::Diverged { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("writing {}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(
    name = "softpush",
    version,
    about = "Soft-body pushing: planners, demonstrations, policies and evaluations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; overrides `seed` in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel workers; 1 runs sequentially.
    #[arg(long)]
    jobs: Option<usize>,
    /// Run directory for every output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Plan one evaluation goal with GMP or MPPI.
    Plan {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Planner::Gmp)]
        method: Planner,
        #[arg(long)]
        goal: usize,
    },
    /// Collect GMP demonstrations on the training goals.
    Collect {
        #[command(flatten)]
        common: Common,
    },
    /// Behaviour-clone a policy from a dataset, or train the PPO baseline.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        arch: TrainArch,
        /// Dataset directory written by `collect` (not used by PPO).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run an evaluation suite.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        suite: Suite,
        /// `name=path` of a trained policy; repeatable.
        #[arg(long = "policy", value_parser = parse_named)]
        policies: Vec<(String, PathBuf)>,
        /// Planner baselines included in the comparison suite.
        #[arg(long, value_delimiter = ',', default_values_t = vec![Baseline::Gmp, Baseline::Mppi, Baseline::Random])]
        baselines: Vec<Baseline>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Planner {
    Gmp,
    Mppi,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TrainArch {
    Attention,
    Mlp,
    Ppo,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Suite {
    Compare,
    Generalization,
    RobotCount,
    Kidnap,
    Timing,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq)]
enum Baseline {
    Gmp,
    Mppi,
    Random,
}

impl std::fmt::Display for Baseline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.to_possible_value().unwrap().get_name())
    }
}

fn parse_named(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
        _ => Err(format!("expected name=path, got {s:?}")),
    }
}

/// Resolved configuration plus the run directory.
struct Run {
    cfg: RunConfig,
    hash: String,
    out: PathBuf,
    exec: Exec,
    files: Vec<String>,
}

impl Run {
    fn open(common: &Common) -> Result<Self, CliError> {
        let cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        }
        .resolve(common.seed)?;
        let hash = cfg.hash();
        fs::create_dir_all(&common.out).map_err(|e| io_err(&common.out, e))?;
        let mut run = Run {
            cfg,
            hash,
            out: common.out.clone(),
            exec: Exec::from_jobs(common.jobs),
            files: Vec::new(),
        };
        let snapshot = format!("# softpush {VERSION} config_hash={}\n{}", run.hash, run.cfg.to_toml());
        run.write("config.toml", &snapshot)?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| io_err(&p, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn header(&self, format: &str) -> serde_json::Value {
        json!({"format": format, "version": VERSION, "config_hash": self.hash})
    }

    /// Header line, then one JSON object per record.
    fn write_jsonl<T: Serialize>(&mut self, name: &str, format: &str, records: &[T]) -> Result<(), CliError> {
        let mut s = self.header(format).to_string();
        s.push('\n');
        for r in records {
            s.push_str(&serde_json::to_string(r).map_err(|e| CliError::Runtime(e.to_string()))?);
            s.push('\n');
        }
        self.write(name, &s)
    }

    /// Comment line with version and hash, then the CSV itself.
    fn write_csv(&mut self, name: &str, csv: &str) -> Result<(), CliError> {
        let text = format!("# softpush {VERSION} config_hash={}\n{csv}", self.hash);
        self.write(name, &text)
    }

    fn finish(mut self, command: &str) -> Result<(), CliError> {
        self.files.push("run.json".into());
        let manifest = json!({
            "format": "softpush-run",
            "version": VERSION,
            "config_hash": self.hash,
            "command": command,
            "seed": self.cfg.seed,
            "files": self.files,
        });
        let p = self.path("run.json");
        fs::write(&p, serde_json::to_string_pretty(&manifest).unwrap() + "\n").map_err(|e| io_err(&p, e))
    }

    fn train_goals(&self) -> Result<Vec<GoalRecord>, CliError> {
        let mut rng = ChaCha8Rng::seed_from_u64(substream(self.cfg.seed, "train-goals"));
        Ok(sample_goals(&self.cfg.scene, self.cfg.train.n_goals, &mut rng)?)
    }

    fn eval_goals(&self) -> Result<Vec<GoalRecord>, CliError> {
        let mut rng = ChaCha8Rng::seed_from_u64(substream(self.cfg.seed, "eval-goals"));
        Ok(sample_goals(&self.cfg.scene, self.cfg.eval.n_goals, &mut rng)?)
    }

    fn context(&self) -> EvalContext {
        EvalContext {
            sim: self.cfg.sim.clone(),
            scene: self.cfg.scene.clone(),
            coeffs: self.cfg.gmp.coeffs,
            policy: self.cfg.policy.clone(),
            exec: self.exec,
            record_timing: self.cfg.eval.record_timing,
        }
    }
}

fn cmd_plan(common: &Common, method: Planner, goal_id: usize) -> Result<(), CliError> {
    let mut run = Run::open(common)?;
    let goals = run.eval_goals()?;
    let goal = goals.iter().find(|g| g.id == goal_id).ok_or_else(|| {
        CliError::Config(format!(
            "goal {goal_id} does not exist: eval.n_goals = {} gives ids 0..{}",
            goals.len(),
            goals.len()
        ))
    })?;
    let cfg = &run.cfg;
    let sim = Simulator::new(cfg.sim.clone())?;
    let task = Task::new(&cfg.sim, &cfg.scene, goal, cfg.eval.n_robots, cfg.gmp.coeffs)?;
    let horizon = cfg.eval.horizon;
    let (name, plan, history) = match method {
        Planner::Gmp => {
            let r = gmp::plan(&sim, &task.state0, &task.loss, horizon, &cfg.gmp)?;
            ("gmp", r.plan, r.loss_history)
        }
        Planner::Mppi => {
            let r = mppi_plan(&sim, &task.state0, &task.loss, horizon, &cfg.mppi, run.exec)?;
            ("mppi", r.plan, r.cost_history.iter().map(|c| c.best).collect())
        }
    };
    let final_state = sim.rollout(&task.state0, &plan, false)?.final_state().clone();
    let reward = task.reward.reward(&final_state.particles);
    let commands: Vec<[f64; 2]> = plan.commands.iter().map(|c| [c.x, c.y]).collect();
    let record = json!({
        "method": name,
        "goal_id": goal_id,
        "horizon": plan.horizon,
        "n_robots": plan.n_robots,
        "plan": commands,
        "loss_history": history,
        "reward": reward,
    });
    run.write_jsonl("plan.jsonl", "softpush-plan", &[record])?;
    println!("{name} goal {goal_id}: reward {reward:.4}");
    run.finish("plan")
}

fn cmd_collect(common: &Common) -> Result<(), CliError> {
    let mut run = Run::open(common)?;
    let goals = run.train_goals()?;
    let cfg = &run.cfg;
    let mut ds = collect(
        &cfg.sim,
        &cfg.scene,
        &cfg.gmp,
        &goals,
        &cfg.train.collect,
        cfg.policy.n_obs_particles,
        run.exec,
    )?;
    ds.manifest.config_hash = run.hash.clone();
    save_dataset(&run.out, &ds)?;
    run.files
        .extend(["manifest.json".to_string(), "demos.jsonl".to_string()]);
    println!(
        "collected {} demos from {} goals ({} skipped)",
        ds.manifest.demo_count, ds.manifest.goal_count, ds.manifest.skipped
    );
    run.finish("collect")
}

fn cmd_train(common: &Common, arch: TrainArch, data: Option<&Path>) -> Result<(), CliError> {
    let mut run = Run::open(common)?;
    let cfg = run.cfg.clone();
    let policy = match arch {
        TrainArch::Ppo => {
            let goals = run.train_goals()?;
            let r = ppo_fit(
                &cfg.sim,
                &cfg.scene,
                &goals,
                cfg.train.collect.n_robots,
                &cfg.gmp.coeffs,
                &cfg.policy,
                &cfg.train.ppo,
                run.exec,
            )?;
            let curve: Vec<_> = r
                .episode_rewards
                .iter()
                .enumerate()
                .map(|(k, r)| json!({"episode": k, "reward": r}))
                .collect();
            run.write_jsonl("curve.jsonl", "softpush-ppo-curve", &curve)?;
            if let Some(it) = r.diverged {
                log::warn!("ppo stopped early at iteration {it}");
            }
            r.policy
        }
        TrainArch::Attention | TrainArch::Mlp => {
            let dir = data.ok_or_else(|| CliError::Config("--data is required for behaviour cloning".into()))?;
            let ds = load_dataset(dir)?;
            if ds.demos.is_empty() {
                return Err(CliError::Config(format!("empty dataset in {}", dir.display())));
            }
            let a = if matches!(arch, TrainArch::Attention) {
                Arch::Attention
            } else {
                Arch::Mlp
            };
            let samples = bc_samples(&ds.demos, ds.manifest.sim.velocity_limit);
            let r = bc_fit(&samples, a, &cfg.policy, ds.manifest.sim.velocity_limit, &cfg.train.bc)?;
            let curve: Vec<_> = r
                .train_loss
                .iter()
                .zip(&r.val_loss)
                .enumerate()
                .map(|(e, (t, v))| json!({"epoch": e, "train_loss": t, "val_loss": v}))
                .collect();
            run.write_jsonl("curve.jsonl", "softpush-bc-curve", &curve)?;
            println!(
                "{a}: best epoch {} train {:.5} val {:.5} ({:?})",
                r.best_epoch,
                r.best_train_loss(),
                r.best_val_loss(),
                r.stop
            );
            r.policy
        }
    };
    save_policy(&run.path("policy.bin"), &policy, &cfg.policy, Some(&run.hash))?;
    run.files.push("policy.bin".into());
    run.finish("train")
}

fn load_policies(named: &[(String, PathBuf)]) -> Result<Vec<(String, Policy)>, CliError> {
    named.iter().map(|(n, p)| Ok((n.clone(), load_policy(p)?.0))).collect()
}

fn write_report(run: &mut Run, rep: &ExperimentReport) -> Result<(), CliError> {
    run.write_csv("report.csv", &rep.to_csv())?;
    run.write_csv("summary.csv", &rep.summary_csv())?;
    run.write_jsonl("records.jsonl", "softpush-run-records", &rep.records)?;
    for (m, p) in rep.groups() {
        let s = rep.stats(&m, &p);
        println!(
            "{m} [{p}]: {:.3} ± {:.3} over {} episodes ({} failed)",
            s.mean, s.std, s.n, s.failed
        );
    }
    Ok(())
}

fn single_attention(policies: &[(String, Policy)]) -> Result<&Policy, CliError> {
    match policies {
        [(_, p @ Policy::Attention(_))] => Ok(p),
        _ => Err(CliError::Config(
            "this suite needs exactly one attention policy via --policy".into(),
        )),
    }
}

fn cmd_eval(
    common: &Common,
    suite: Suite,
    named: &[(String, PathBuf)],
    baselines: &[Baseline],
) -> Result<(), CliError> {
    let mut run = Run::open(common)?;
    let policies = load_policies(named)?;
    let goals = run.eval_goals()?;
    let ctx = run.context();
    let e = run.cfg.eval.clone();
    match suite {
        Suite::Compare => {
            let mut methods: Vec<(String, Method)> = Vec::new();
            for b in baselines {
                let m = match b {
                    Baseline::Gmp => Method::Gmp(run.cfg.gmp.clone()),
                    Baseline::Mppi => Method::Mppi(run.cfg.mppi.clone()),
                    Baseline::Random => Method::Random,
                };
                methods.push((b.to_string(), m));
            }
            methods.extend(policies.into_iter().map(|(n, p)| (n, Method::Policy(p))));
            let rep = compare_methods(&ctx, &methods, &goals, e.n_robots, e.horizon, e.seed);
            write_report(&mut run, &rep)?;
        }
        Suite::Generalization => {
            if policies.is_empty() {
                return Err(CliError::Config("the generalization suite needs --policy".into()));
            }
            let sweeps: Vec<_> = SweepParam::ALL.iter().map(|p| (*p, p.test_range())).collect();
            let mut all = Vec::new();
            let mut prov = None;
            for (n, p) in policies {
                let rep = generalization_sweep(
                    &ctx,
                    &n,
                    &Method::Policy(p),
                    &sweeps,
                    &goals,
                    e.n_robots,
                    e.horizon,
                    e.sweep_episodes,
                    e.seed,
                );
                all.extend(rep.records);
                prov = Some(rep.provenance);
            }
            let rep = ExperimentReport {
                experiment: "generalization".into(),
                records: all,
                provenance: prov.unwrap(),
            };
            write_report(&mut run, &rep)?;
        }
        Suite::RobotCount => {
            let p = single_attention(&policies)?;
            let rep = robot_count_eval(&ctx, p, &e.robot_counts, &goals, e.horizon, e.seed)?;
            write_report(&mut run, &rep)?;
        }
        Suite::Kidnap => {
            let p = single_attention(&policies)?;
            let n = e.kidnap_episodes.min(goals.len());
            let (rep, traces) = kidnap_study(
                &ctx,
                p,
                &goals[..n],
                e.n_robots,
                e.horizon,
                e.kidnap_step,
                e.kidnap_window,
                e.seed,
            )?;
            write_report(&mut run, &rep)?;
            run.write_jsonl("attention.jsonl", "softpush-kidnap-attention", &traces)?;
            let hits = traces.iter().filter(|t| t.signal()).count();
            println!(
                "neighbour attention rose after the kidnap in {hits} of {} episodes",
                traces.len()
            );
        }
        Suite::Timing => {
            let p = single_attention(&policies)?;
            let rows = timing_scaling(p, &e.timing_robot_counts, e.timing_repeats, e.seed)?;
            let mut csv = String::from("n_robots,median_seconds,repeats\n");
            for r in &rows {
                let _ = writeln!(csv, "{},{:.6e},{}", r.n_robots, r.median_seconds, r.repeats);
                println!("N_r = {}: {:.3} ms", r.n_robots, r.median_seconds * 1e3);
            }
            run.write_csv("latency.csv", &csv)?;
        }
    }
    run.finish("eval")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Plan { common, method, goal } => cmd_plan(common, *method, *goal),
        Command::Collect { common } => cmd_collect(common),
        Command::Train { common, arch, data } => cmd_train(common, *arch, data.as_deref()),
        Command::Eval {
            common,
            suite,
            policies,
            baselines,
        } => cmd_eval(common, *suite, policies, baselines),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
