//! Differentiable planar material-point simulator.
//!
//! Soft bodies are MLS-MPM particles (quadratic B-splines, APIC transfer)
//! with fixed-corotated elasticity and a von Mises return mapping on the
//! Hencky strain. Robots are rigid discs driven kinematically by their
//! commands; they push the material through a grid-node velocity projection
//! with Coulomb friction and a particle-level rim projection, and never feel
//! a reaction force.
//!
//! [`Simulator::rollout`] can record a tape of per-substep snapshots from
//! which [`Simulator::backward`] computes the gradient of a summed per-step
//! loss with respect to every robot command.

mod backward;
pub mod dual;
pub mod kernels;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use kernels::ContactParams;

pub use backward::{PlanGradient, StepLoss};

pub type Vec2 = Vector2<f64>;
pub type Mat2 = Matrix2<f64>;

/// Height of the plane the planar dynamics live in. Carried as the constant z
/// component of every exported position.
pub const PLANE_Z: f64 = 1.0 / 64.0;

/// Number of grid nodes next to each wall whose outward velocity is zeroed.
const BOUNDARY_NODES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Coulomb coefficient between robots and the soft body.
    pub friction: f64,
    pub yield_stress: f64,
    /// Per-axis command clamp, in workspace units per control step.
    pub velocity_limit: f64,
    pub robot_radius: f64,
    /// MPM substep length in seconds.
    pub dt: f64,
    /// Grid cells per side of the unit workspace.
    pub grid_res: usize,
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    pub substeps_per_control: usize,
    /// Material density (mass per unit area).
    pub density: f64,
    /// Ground friction, as an exponential velocity decay rate (1/s).
    pub ground_damping: f64,
    /// Sharpness `k` of the contact influence `exp(-k·sdf)` (1/m).
    pub contact_softness: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            friction: 1.5,
            yield_stress: 30.0,
            velocity_limit: 0.015,
            robot_radius: 0.02,
            dt: 2e-3,
            grid_res: 32,
            youngs_modulus: 5e3,
            poisson_ratio: 0.2,
            substeps_per_control: 5,
            density: 200.0,
            ground_damping: 10.0,
            contact_softness: 150.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("friction", self.friction),
            ("yield_stress", self.yield_stress),
            ("velocity_limit", self.velocity_limit),
            ("robot_radius", self.robot_radius),
            ("dt", self.dt),
            ("youngs_modulus", self.youngs_modulus),
            ("poisson_ratio", self.poisson_ratio),
            ("density", self.density),
            ("contact_softness", self.contact_softness),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("sim.{name} must be positive, got {v}")));
            }
        }
        if !(self.ground_damping >= 0.0 && self.ground_damping.is_finite()) {
            return Err(Error::Config("sim.ground_damping must be non-negative".into()));
        }
        if self.poisson_ratio >= 0.5 {
            return Err(Error::Config("sim.poisson_ratio must be below 0.5".into()));
        }
        if self.grid_res < 8 {
            return Err(Error::Config(format!(
                "sim.grid_res must be >= 8, got {}",
                self.grid_res
            )));
        }
        if self.substeps_per_control == 0 {
            return Err(Error::Config("sim.substeps_per_control must be >= 1".into()));
        }
        Ok(())
    }

    pub fn lame(&self) -> (f64, f64) {
        let e = self.youngs_modulus;
        let nu = self.poisson_ratio;
        let mu = e / (2.0 * (1.0 + nu));
        let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
        (mu, lambda)
    }

    pub fn control_period(&self) -> f64 {
        self.dt * self.substeps_per_control as f64
    }
}

/// Soft-body state. Positions and velocities are planar; the exported rows
/// pad them with the constant [`PLANE_Z`] and zero vertical velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleField {
    pub x: Vec<Vec2>,
    pub v: Vec<Vec2>,
    /// Deformation gradients.
    pub f: Vec<Mat2>,
    /// APIC affine velocity fields.
    pub c: Vec<Mat2>,
    pub mass: f64,
    pub volume: f64,
}

impl ParticleField {
    pub fn at_rest(x: Vec<Vec2>, mass: f64, volume: f64) -> Self {
        let n = x.len();
        ParticleField {
            x,
            v: vec![Vec2::zeros(); n],
            f: vec![Mat2::identity(); n],
            c: vec![Mat2::zeros(); n],
            mass,
            volume,
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass * self.len() as f64
    }

    pub fn centroid(&self) -> Vec2 {
        let n = self.len().max(1) as f64;
        self.x.iter().fold(Vec2::zeros(), |a, p| a + p) / n
    }

    pub fn positions3(&self) -> Vec<[f64; 3]> {
        self.x.iter().map(|p| [p.x, p.y, PLANE_Z]).collect()
    }

    /// `N_p × 6` rows: position and linear velocity in 3-D.
    pub fn rows(&self) -> Vec<[f64; 6]> {
        self.x
            .iter()
            .zip(&self.v)
            .map(|(p, v)| [p.x, p.y, PLANE_Z, v.x, v.y, 0.0])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotSet {
    pub x: Vec<Vec2>,
    /// Last applied (clamped) command.
    pub v: Vec<Vec2>,
    pub radius: f64,
}

impl RobotSet {
    pub fn new(x: Vec<Vec2>, radius: f64) -> Self {
        let n = x.len();
        RobotSet {
            x,
            v: vec![Vec2::zeros(); n],
            radius,
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// `N_r × 5` rows: 3-D position and planar velocity.
    pub fn rows(&self) -> Vec<[f64; 5]> {
        self.x
            .iter()
            .zip(&self.v)
            .map(|(p, v)| [p.x, p.y, PLANE_Z, v.x, v.y])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub particles: ParticleField,
    pub robots: RobotSet,
    pub step_index: usize,
}

/// `T × N_r` planar commands, stored time-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionPlan {
    pub horizon: usize,
    pub n_robots: usize,
    pub commands: Vec<Vec2>,
}

impl ActionPlan {
    pub fn zeros(horizon: usize, n_robots: usize) -> Self {
        ActionPlan {
            horizon,
            n_robots,
            commands: vec![Vec2::zeros(); horizon * n_robots],
        }
    }

    pub fn from_steps(steps: &[Vec<Vec2>]) -> Result<Self> {
        let n_robots = steps.first().map_or(0, |s| s.len());
        if steps.iter().any(|s| s.len() != n_robots) {
            return Err(Error::contract("ragged action plan"));
        }
        Ok(ActionPlan {
            horizon: steps.len(),
            n_robots,
            commands: steps.concat(),
        })
    }

    pub fn at(&self, t: usize) -> &[Vec2] {
        &self.commands[t * self.n_robots..(t + 1) * self.n_robots]
    }

    pub fn at_mut(&mut self, t: usize) -> &mut [Vec2] {
        &mut self.commands[t * self.n_robots..(t + 1) * self.n_robots]
    }

    pub fn clamp(&mut self, limit: f64) {
        for c in &mut self.commands {
            c.x = c.x.clamp(-limit, limit);
            c.y = c.y.clamp(-limit, limit);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.commands
            .iter()
            .map(|c| c.x.abs().max(c.y.abs()))
            .fold(0.0, f64::max)
    }
}

/// Per-substep snapshots recorded during a rollout.
#[derive(Debug, Clone)]
pub struct Tape {
    substeps: usize,
    snapshots: Vec<(ParticleField, Vec<Vec2>)>,
    plan: ActionPlan,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Rewind to the state before control step `t`.
    pub fn restore(&self, t: usize, radius: f64) -> Option<SimState> {
        let (p, r) = self.snapshots.get(t * self.substeps)?;
        let mut robots = RobotSet::new(r.clone(), radius);
        if t > 0 {
            robots.v = self.plan.at(t - 1).to_vec();
        }
        Some(SimState {
            particles: p.clone(),
            robots,
            step_index: t,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub states: Vec<SimState>,
    pub tape: Option<Tape>,
}

impl Rollout {
    pub fn final_state(&self) -> &SimState {
        self.states.last().expect("rollout always holds the initial state")
    }
}

/// Stencil of one particle over its 3×3 neighbouring nodes.
#[derive(Clone, Copy)]
pub(crate) struct Stencil {
    base: [usize; 2],
    w: [[f64; 3]; 2],
    /// Weight derivatives, already scaled by `1/dx`.
    dw: [[f64; 3]; 2],
}

/// Intermediates of one substep needed by the reverse sweep.
#[derive(Default)]
pub(crate) struct SubstepCache {
    f_tmp: Vec<Mat2>,
    plastic: Vec<bool>,
    affine: Vec<Mat2>,
    grid_m: Vec<f64>,
    grid_v0: Vec<Vec2>,
    grid_v: Vec<Vec2>,
    contact_in: Vec<Vec<(usize, Vec2)>>,
    wall: Vec<[bool; 2]>,
    disc_in: Vec<Vec<(usize, Vec2, Vec2)>>,
    clamped: Vec<[bool; 2]>,
    r0: Vec<Vec2>,
    r1: Vec<Vec2>,
    rvel: Vec<Vec2>,
    robot_clamped: Vec<[bool; 2]>,
}

#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: SimConfig,
    n: usize,
    dx: f64,
    inv_dx: f64,
    mu: f64,
    lambda: f64,
    tau_y: f64,
    damping: f64,
    contact: ContactParams,
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let (mu, lambda) = cfg.lame();
        let n = cfg.grid_res;
        Ok(Simulator {
            n,
            dx: 1.0 / n as f64,
            inv_dx: n as f64,
            mu,
            lambda,
            tau_y: cfg.yield_stress / (2.0 * mu),
            damping: (-cfg.ground_damping * cfg.dt).exp(),
            contact: ContactParams {
                radius: cfg.robot_radius,
                friction: cfg.friction,
                softness: cfg.contact_softness,
            },
            cfg,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    fn nodes(&self) -> usize {
        (self.n + 1) * (self.n + 1)
    }

    #[inline]
    fn node_index(&self, i: usize, j: usize) -> usize {
        i * (self.n + 1) + j
    }

    #[inline]
    fn node_pos(&self, k: usize) -> Vec2 {
        let i = k / (self.n + 1);
        let j = k % (self.n + 1);
        Vec2::new(i as f64 * self.dx, j as f64 * self.dx)
    }

    /// Closed interval particles are kept in so their stencil stays on the grid.
    fn particle_bounds(&self) -> (f64, f64) {
        (0.5 * self.dx + 1e-9, 1.0 - 0.5 * self.dx - 1e-9)
    }

    fn robot_bounds(&self) -> (f64, f64) {
        (self.cfg.robot_radius, 1.0 - self.cfg.robot_radius)
    }

    #[inline]
    pub(crate) fn stencil(&self, x: &Vec2) -> Stencil {
        let mut base = [0usize; 2];
        let mut w = [[0.0; 3]; 2];
        let mut dw = [[0.0; 3]; 2];
        for a in 0..2 {
            let gx = x[a] * self.inv_dx;
            let b = (gx - 0.5).floor();
            let fx = gx - b;
            base[a] = b as usize;
            w[a] = [
                0.5 * (1.5 - fx) * (1.5 - fx),
                0.75 - (fx - 1.0) * (fx - 1.0),
                0.5 * (fx - 0.5) * (fx - 0.5),
            ];
            dw[a] = [
                -(1.5 - fx) * self.inv_dx,
                -2.0 * (fx - 1.0) * self.inv_dx,
                (fx - 0.5) * self.inv_dx,
            ];
        }
        Stencil { base, w, dw }
    }

    /// Grid node masses after particle-to-grid transfer. Exposed for the
    /// conservation checks.
    pub fn grid_mass(&self, particles: &ParticleField) -> Vec<f64> {
        let mut gm = vec![0.0; self.nodes()];
        for x in &particles.x {
            let st = self.stencil(x);
            for i in 0..3 {
                for j in 0..3 {
                    let k = self.node_index(st.base[0] + i, st.base[1] + j);
                    gm[k] += st.w[0][i] * st.w[1][j] * particles.mass;
                }
            }
        }
        gm
    }

    fn check_actions(&self, step: usize, actions: &[Vec2], n_robots: usize) -> Result<()> {
        if actions.len() != n_robots {
            return Err(Error::contract(format!(
                "{} commands for {} robots",
                actions.len(),
                n_robots
            )));
        }
        if let Some(i) = actions.iter().position(|a| !(a.x.is_finite() && a.y.is_finite())) {
            return Err(Error::SimFault {
                step,
                detail: format!("non-finite command for robot {i}"),
            });
        }
        Ok(())
    }

    fn check_state(&self, state: &SimState) -> Result<()> {
        let p = &state.particles;
        let bad = (0..p.len()).find(|&i| {
            !(p.x[i].iter().all(|v| v.is_finite())
                && p.v[i].iter().all(|v| v.is_finite())
                && p.f[i].iter().all(|v| v.is_finite()))
        });
        if let Some(i) = bad {
            return Err(Error::SimFault {
                step: state.step_index,
                detail: format!("non-finite state for particle {i}"),
            });
        }
        if let Some(i) = state.robots.x.iter().position(|r| !r.iter().all(|v| v.is_finite())) {
            return Err(Error::SimFault {
                step: state.step_index,
                detail: format!("non-finite position for robot {i}"),
            });
        }
        Ok(())
    }

    /// Per-substep robot displacement for a command.
    fn displacement(&self, a: &Vec2) -> Vec2 {
        let lim = self.cfg.velocity_limit;
        let s = self.cfg.substeps_per_control as f64;
        Vec2::new(a.x.clamp(-lim, lim), a.y.clamp(-lim, lim)) / s
    }

    /// Advance one control step (`substeps_per_control` MPM substeps).
    pub fn step(&self, state: &SimState, actions: &[Vec2]) -> Result<SimState> {
        self.check_actions(state.step_index, actions, state.robots.len())?;
        let mut next = state.clone();
        let disp: Vec<Vec2> = actions.iter().map(|a| self.displacement(a)).collect();
        for _ in 0..self.cfg.substeps_per_control {
            self.substep(&mut next.particles, &mut next.robots.x, &disp, None);
        }
        let lim = self.cfg.velocity_limit;
        next.robots.v = actions
            .iter()
            .map(|a| Vec2::new(a.x.clamp(-lim, lim), a.y.clamp(-lim, lim)))
            .collect();
        next.step_index += 1;
        self.check_state(&next)?;
        Ok(next)
    }

    /// Apply a plan; `states[0]` is `state0` and `states[t + 1] = step(states[t], plan[t])`.
    pub fn rollout(&self, state0: &SimState, plan: &ActionPlan, record: bool) -> Result<Rollout> {
        if plan.n_robots != state0.robots.len() && plan.horizon > 0 {
            return Err(Error::contract(format!(
                "plan has {} robots, state has {}",
                plan.n_robots,
                state0.robots.len()
            )));
        }
        let s = self.cfg.substeps_per_control;
        let mut states = Vec::with_capacity(plan.horizon + 1);
        let mut snapshots = Vec::new();
        if record {
            snapshots.reserve(plan.horizon * s);
        }
        states.push(state0.clone());
        for t in 0..plan.horizon {
            let cur = &states[t];
            self.check_actions(cur.step_index, plan.at(t), cur.robots.len())?;
            let mut next = cur.clone();
            let disp: Vec<Vec2> = plan.at(t).iter().map(|a| self.displacement(a)).collect();
            for _ in 0..s {
                if record {
                    snapshots.push((next.particles.clone(), next.robots.x.clone()));
                }
                self.substep(&mut next.particles, &mut next.robots.x, &disp, None);
            }
            let lim = self.cfg.velocity_limit;
            next.robots.v = plan
                .at(t)
                .iter()
                .map(|a| Vec2::new(a.x.clamp(-lim, lim), a.y.clamp(-lim, lim)))
                .collect();
            next.step_index += 1;
            self.check_state(&next)?;
            states.push(next);
        }
        let tape = record.then(|| Tape {
            substeps: s,
            snapshots,
            plan: plan.clone(),
        });
        Ok(Rollout { states, tape })
    }

    /// Forward-only rollout returning `Σ_{t=1..T} loss(state_t)` and the final state.
    pub fn rollout_cost(&self, state0: &SimState, plan: &ActionPlan, loss: &dyn StepLoss) -> Result<(f64, SimState)> {
        let mut state = state0.clone();
        let mut total = 0.0;
        for t in 0..plan.horizon {
            state = self.step(&state, plan.at(t))?;
            total += loss.eval(&state);
        }
        Ok((total, state))
    }

    pub(crate) fn substep(
        &self,
        p: &mut ParticleField,
        robots: &mut [Vec2],
        disp: &[Vec2],
        cache: Option<&mut SubstepCache>,
    ) {
        let dt = self.cfg.dt;
        let nr = robots.len();
        let np = p.len();
        let m = p.mass;

        // Kinematic robots.
        let (rlo, rhi) = self.robot_bounds();
        let r0: Vec<Vec2> = robots.to_vec();
        let mut rclamped = vec![[false; 2]; nr];
        for j in 0..nr {
            for a in 0..2 {
                let want = r0[j][a] + disp[j][a];
                rclamped[j][a] = want < rlo || want > rhi;
                robots[j][a] = want.clamp(rlo, rhi);
            }
        }
        let rvel: Vec<Vec2> = (0..nr).map(|j| (robots[j] - r0[j]) / dt).collect();

        // Constitutive update and particle-to-grid transfer.
        let stress_scale = -dt * p.volume * 4.0 * self.inv_dx * self.inv_dx;
        let mut gm = vec![0.0; self.nodes()];
        let mut gp = vec![Vec2::zeros(); self.nodes()];
        let mut f_tmp_all = Vec::new();
        let mut plastic_all = Vec::new();
        let mut affine_all = Vec::new();
        if cache.is_some() {
            f_tmp_all.reserve(np);
            plastic_all.reserve(np);
            affine_all.reserve(np);
        }
        for q in 0..np {
            let f_tmp = (Mat2::identity() + p.c[q] * dt) * p.f[q];
            let rm = to_rm(&f_tmp);
            let active = kernels::yield_excess(rm, self.tau_y) > 0.0;
            let f_new = if active {
                from_rm(kernels::plastic_return(rm, self.tau_y))
            } else {
                f_tmp
            };
            let tau = from_rm(kernels::kirchhoff(to_rm(&f_new), self.mu, self.lambda));
            let affine = tau * stress_scale + p.c[q] * m;
            let st = self.stencil(&p.x[q]);
            let mv = p.v[q] * m;
            for i in 0..3 {
                for j in 0..3 {
                    let k = self.node_index(st.base[0] + i, st.base[1] + j);
                    let w = st.w[0][i] * st.w[1][j];
                    let d = self.node_pos(k) - p.x[q];
                    gm[k] += w * m;
                    gp[k] += (mv + affine * d) * w;
                }
            }
            p.f[q] = f_new;
            if cache.is_some() {
                f_tmp_all.push(f_tmp);
                plastic_all.push(active);
                affine_all.push(affine);
            }
        }

        // Grid update: momentum to velocity, ground friction, robot contact, walls.
        let mut gv = vec![Vec2::zeros(); self.nodes()];
        let mut gv0 = if cache.is_some() {
            vec![Vec2::zeros(); self.nodes()]
        } else {
            Vec::new()
        };
        for k in 0..self.nodes() {
            if gm[k] > 0.0 {
                let v0 = gp[k] / gm[k];
                gv[k] = v0 * self.damping;
                if cache.is_some() {
                    gv0[k] = v0;
                }
            }
        }
        let mut contact_in: Vec<Vec<(usize, Vec2)>> = vec![Vec::new(); nr];
        let reach = self.cfg.robot_radius + self.contact.cutoff();
        for j in 0..nr {
            let c = r0[j];
            let lo_i = ((c.x - reach) * self.inv_dx).floor().max(0.0) as usize;
            let hi_i = (((c.x + reach) * self.inv_dx).ceil() as usize).min(self.n);
            let lo_j = ((c.y - reach) * self.inv_dx).floor().max(0.0) as usize;
            let hi_j = (((c.y + reach) * self.inv_dx).ceil() as usize).min(self.n);
            for i in lo_i..=hi_i {
                for jj in lo_j..=hi_j {
                    let k = self.node_index(i, jj);
                    if gm[k] <= 0.0 {
                        continue;
                    }
                    let node = self.node_pos(k);
                    if (node - c).norm() - self.cfg.robot_radius > self.contact.cutoff() {
                        continue;
                    }
                    if cache.is_some() {
                        contact_in[j].push((k, gv[k]));
                    }
                    let out = kernels::grid_contact(
                        [gv[k].x, gv[k].y],
                        [node.x, node.y],
                        [c.x, c.y],
                        [rvel[j].x, rvel[j].y],
                        &self.contact,
                    );
                    gv[k] = Vec2::new(out[0], out[1]);
                }
            }
        }
        let mut wall = if cache.is_some() {
            vec![[false; 2]; self.nodes()]
        } else {
            Vec::new()
        };
        let n = self.n;
        for k in 0..self.nodes() {
            if gm[k] <= 0.0 {
                continue;
            }
            let idx = [k / (n + 1), k % (n + 1)];
            for a in 0..2 {
                let hit =
                    (idx[a] < BOUNDARY_NODES && gv[k][a] < 0.0) || (idx[a] > n - BOUNDARY_NODES && gv[k][a] > 0.0);
                if hit {
                    gv[k][a] = 0.0;
                    if cache.is_some() {
                        wall[k][a] = true;
                    }
                }
            }
        }

        // Grid-to-particle transfer and advection.
        let apic = 4.0 * self.inv_dx * self.inv_dx;
        for q in 0..np {
            let st = self.stencil(&p.x[q]);
            let mut v = Vec2::zeros();
            let mut c = Mat2::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    let k = self.node_index(st.base[0] + i, st.base[1] + j);
                    let w = st.w[0][i] * st.w[1][j];
                    let d = self.node_pos(k) - p.x[q];
                    v += gv[k] * w;
                    c += gv[k] * d.transpose() * (w * apic);
                }
            }
            p.v[q] = v;
            p.c[q] = c;
            p.x[q] += v * dt;
        }

        // Nothing stays inside a robot.
        let mut disc_in: Vec<Vec<(usize, Vec2, Vec2)>> = vec![Vec::new(); nr];
        let radius = self.cfg.robot_radius;
        for j in 0..nr {
            let c = robots[j];
            for q in 0..np {
                if (p.x[q] - c).norm_squared() >= radius * radius {
                    continue;
                }
                if cache.is_some() {
                    disc_in[j].push((q, p.x[q], p.v[q]));
                }
                let (xo, vo) = kernels::particle_disc(
                    [p.x[q].x, p.x[q].y],
                    [p.v[q].x, p.v[q].y],
                    [c.x, c.y],
                    [rvel[j].x, rvel[j].y],
                    radius,
                );
                p.x[q] = Vec2::new(xo[0], xo[1]);
                p.v[q] = Vec2::new(vo[0], vo[1]);
            }
        }

        let (lo, hi) = self.particle_bounds();
        let mut clamped = if cache.is_some() {
            vec![[false; 2]; np]
        } else {
            Vec::new()
        };
        for q in 0..np {
            for a in 0..2 {
                let x = p.x[q][a];
                if x < lo || x > hi {
                    p.x[q][a] = x.clamp(lo, hi);
                    if cache.is_some() {
                        clamped[q][a] = true;
                    }
                }
            }
        }

        if let Some(cache) = cache {
            *cache = SubstepCache {
                f_tmp: f_tmp_all,
                plastic: plastic_all,
                affine: affine_all,
                grid_m: gm,
                grid_v0: gv0,
                grid_v: gv,
                contact_in,
                wall,
                disc_in,
                clamped,
                r0,
                r1: robots.to_vec(),
                rvel,
                robot_clamped: rclamped,
            };
        }
    }
}

#[inline]
pub(crate) fn to_rm(m: &Mat2) -> [f64; 4] {
    [m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]]
}

#[inline]
pub(crate) fn from_rm(a: [f64; 4]) -> Mat2 {
    Mat2::new(a[0], a[1], a[2], a[3])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lone_particle(x: Vec2, v: Vec2) -> SimState {
        let mut p = ParticleField::at_rest(vec![x], 1e-3, 1e-5);
        p.v[0] = v;
        SimState {
            particles: p,
            robots: RobotSet::new(vec![Vec2::new(0.1, 0.1)], 0.02),
            step_index: 0,
        }
    }

    #[test]
    fn free_particle_advects_ballistically() {
        let cfg = SimConfig {
            dt: 0.01,
            substeps_per_control: 1,
            ground_damping: 0.0,
            ..SimConfig::default()
        };
        let sim = Simulator::new(cfg).unwrap();
        let s0 = lone_particle(Vec2::new(0.5, 0.5), Vec2::new(0.01, 0.0));
        let s1 = sim.step(&s0, &[Vec2::zeros()]).unwrap();
        let d = s1.particles.x[0] - s0.particles.x[0];
        assert!((d.x - 1e-4).abs() < 1e-15, "{d:?}");
        assert!(d.y.abs() < 1e-15);
    }

    #[test]
    fn idle_robot_stays_put() {
        let sim = Simulator::new(SimConfig::default()).unwrap();
        let s0 = lone_particle(Vec2::new(0.5, 0.5), Vec2::zeros());
        let s1 = sim.step(&s0, &[Vec2::zeros()]).unwrap();
        assert_eq!(s1.robots.x, s0.robots.x);
    }

    #[test]
    fn commands_are_clamped_per_axis() {
        let sim = Simulator::new(SimConfig::default()).unwrap();
        let s0 = lone_particle(Vec2::new(0.5, 0.5), Vec2::zeros());
        let s1 = sim.step(&s0, &[Vec2::new(1.0, -0.001)]).unwrap();
        let d = s1.robots.x[0] - s0.robots.x[0];
        assert!((d.x - 0.015).abs() < 1e-12);
        assert!((d.y + 0.001).abs() < 1e-12);
        assert_eq!(s1.robots.v[0], Vec2::new(0.015, -0.001));
    }

    #[test]
    fn non_finite_command_is_a_fault() {
        let sim = Simulator::new(SimConfig::default()).unwrap();
        let s0 = lone_particle(Vec2::new(0.5, 0.5), Vec2::zeros());
        let err = sim.step(&s0, &[Vec2::new(f64::NAN, 0.0)]).unwrap_err();
        assert!(matches!(err, Error::SimFault { step: 0, .. }));
    }

    #[test]
    fn rollout_plan_shape_is_checked() {
        let sim = Simulator::new(SimConfig::default()).unwrap();
        let s0 = lone_particle(Vec2::new(0.5, 0.5), Vec2::zeros());
        let err = sim.rollout(&s0, &ActionPlan::zeros(3, 2), false).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let r = sim.rollout(&s0, &ActionPlan::zeros(0, 1), false).unwrap();
        assert_eq!(r.states, vec![s0]);
    }

    #[test]
    fn config_rejects_bad_values() {
        for cfg in [
            SimConfig {
                grid_res: 4,
                ..SimConfig::default()
            },
            SimConfig {
                friction: 0.0,
                ..SimConfig::default()
            },
            SimConfig {
                dt: f64::NAN,
                ..SimConfig::default()
            },
        ] {
            assert!(Simulator::new(cfg).is_err());
        }
    }
}
