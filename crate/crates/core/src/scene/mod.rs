//! Rope and box scenes, goal poses, and the metrics that compare them.

mod grid;
mod loss;
mod rope;

pub use grid::{iou, occupancy, sdf, Lattice, OccupancyGrid, SdfGrid};
pub use loss::{
    make_goal, reward, reward_from_similarity, similarity, DensityRaster, DistTerm, GoalSpec, LossCoeffs, LossTerms,
    PushLoss, RewardFn, DEFAULT_REWARD_EPS, GRASP_TEMPERATURE,
};
pub use rope::{box_spacing, build_box_scene, build_rope_scene, sample_rope, BoxScene, Centerline, Cubic, RopeSpec};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffsim::{RobotSet, SimConfig, SimState, Vec2};
use crate::error::{Error, Result};

/// Initial layout: a straight rope with the robots lined up beneath it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub rope: RopeSpec,
    pub n_particles: usize,
    /// Height of the straight initial rope.
    pub rope_y: f64,
    /// Free space between the robot discs and the rope's lower edge.
    pub robot_clearance: f64,
    pub goals: GoalRanges,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            rope: RopeSpec::default(),
            n_particles: 512,
            rope_y: 0.4,
            robot_clearance: 0.01,
            goals: GoalRanges::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::Config("scene.n_particles must be >= 1".into()));
        }
        if !(self.rope.half_width > 0.0 && self.rope.length > 0.0) {
            return Err(Error::Config("scene.rope dimensions must be positive".into()));
        }
        self.goals.validate()
    }

    pub fn initial_curve(&self) -> Cubic {
        Cubic::straight(self.rope_y)
    }

    /// Robot `j` of `n`, evenly spread under the rope's span.
    pub fn robot_positions(&self, n: usize, radius: f64) -> Vec<Vec2> {
        let half = 0.5 * self.rope.length;
        let y = self.rope_y - self.rope.half_width - self.robot_clearance - radius;
        (0..n)
            .map(|j| {
                let x = self.rope.x_center - half + self.rope.length * (j as f64 + 0.5) / n as f64;
                Vec2::new(x, y)
            })
            .collect()
    }

    pub fn initial_state(&self, cfg: &SimConfig, n_robots: usize) -> Result<SimState> {
        let particles = build_rope_scene(cfg, &self.rope, &self.initial_curve(), self.n_particles)?;
        let robots = RobotSet::new(self.robot_positions(n_robots, cfg.robot_radius), cfg.robot_radius);
        Ok(SimState {
            particles,
            robots,
            step_index: 0,
        })
    }

    pub fn goal(&self, record: &GoalRecord, cfg: &SimConfig) -> Result<GoalSpec> {
        let template = build_rope_scene(cfg, &self.rope, &self.initial_curve(), self.n_particles)?;
        make_goal(&record.curve, &self.rope, &template)
    }
}

/// Everything one episode against one goal needs.
pub struct Task {
    pub record: GoalRecord,
    pub goal: GoalSpec,
    pub state0: SimState,
    pub loss: PushLoss,
    pub reward: RewardFn,
}

impl Task {
    pub fn new(
        sim: &SimConfig,
        scene: &SceneConfig,
        record: &GoalRecord,
        n_robots: usize,
        coeffs: LossCoeffs,
    ) -> Result<Self> {
        let goal = scene.goal(record, sim)?;
        let state0 = scene.initial_state(sim, n_robots)?;
        let lattice = Lattice::workspace(sim.grid_res);
        let loss = PushLoss::new(&goal, lattice, coeffs)?;
        let reward = RewardFn::new(&goal, &state0.particles, lattice);
        Ok(Task {
            record: record.clone(),
            goal,
            state0,
            loss,
            reward,
        })
    }
}

/// Coefficient ranges for random goal curves. The constant term is not drawn:
/// it is set so the curve's mean height over its span is `rope_y + lift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoalRanges {
    pub a3: [f64; 2],
    pub a2: [f64; 2],
    pub a1: [f64; 2],
    pub lift: [f64; 2],
}

impl Default for GoalRanges {
    fn default() -> Self {
        GoalRanges {
            a3: [-1.0, 1.0],
            a2: [-0.8, 0.8],
            a1: [-0.5, 0.5],
            lift: [0.05, 0.10],
        }
    }
}

impl GoalRanges {
    fn validate(&self) -> Result<()> {
        for (name, r) in [("a3", self.a3), ("a2", self.a2), ("a1", self.a1), ("lift", self.lift)] {
            if !(r[0] <= r[1]) {
                return Err(Error::Config(format!("scene.goals.{name} must be an ordered range")));
            }
        }
        Ok(())
    }
}

/// Reproducible description of one goal; the particles are regenerated from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalRecord {
    pub id: usize,
    pub curve: Cubic,
}

fn draw(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Rejection-samples `count` goal curves that keep the rope inside the
/// workspace with a margin of its half width.
pub fn sample_goals(scene: &SceneConfig, count: usize, rng: &mut impl Rng) -> Result<Vec<GoalRecord>> {
    let g = &scene.goals;
    let mut out = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count {
        tries += 1;
        if tries > 1000 * (count + 1) {
            return Err(Error::Scene("goal ranges admit no in-bounds curve".into()));
        }
        let mut c = Cubic([draw(rng, g.a3), draw(rng, g.a2), draw(rng, g.a1), 0.0]);
        let lift = draw(rng, g.lift);
        let span = scene.rope.span(&c);
        let n = 256;
        let mean = (0..=n)
            .map(|i| c.y(span[0] + (span[1] - span[0]) * i as f64 / n as f64))
            .sum::<f64>()
            / (n + 1) as f64;
        c.0[3] = scene.rope_y + lift - mean;
        if sample_rope(&scene.rope, &c, 8).is_ok() {
            out.push(GoalRecord {
                id: out.len(),
                curve: c,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn goal_equal_to_initial_curve_reproduces_scene() {
        let cfg = SimConfig::default();
        let scene = SceneConfig::default();
        let s0 = scene.initial_state(&cfg, 3).unwrap();
        let goal = scene
            .goal(
                &GoalRecord {
                    id: 0,
                    curve: scene.initial_curve(),
                },
                &cfg,
            )
            .unwrap();
        assert_eq!(goal.len(), s0.particles.len());
        assert_eq!(goal.planar(), s0.particles.x);
        let lat = Lattice::workspace(cfg.grid_res);
        assert_eq!(similarity(&s0.particles.positions3(), &goal.goal_particles, &lat), 1.0);
    }

    #[test]
    fn sampled_goals_are_deterministic_and_lifted() {
        let scene = SceneConfig::default();
        let a = sample_goals(&scene, 10, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_goals(&scene, 10, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        for g in &a {
            let span = scene.rope.span(&g.curve);
            let mid = g.curve.y(0.5 * (span[0] + span[1]));
            assert!(mid > scene.rope_y - 0.3, "{mid}");
        }
    }

    #[test]
    fn robots_start_below_the_rope() {
        let cfg = SimConfig::default();
        let s = SceneConfig::default().initial_state(&cfg, 4).unwrap();
        let low = s.particles.x.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        for r in &s.robots.x {
            assert!(r.y + cfg.robot_radius < low);
        }
    }
}
