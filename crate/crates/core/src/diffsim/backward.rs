//! Reverse sweep through a recorded rollout.
//!
//! Each substep is recomputed from its snapshot to recover the grid
//! intermediates, then differentiated by hand; the local constitutive and
//! contact kernels are differentiated with forward-mode duals.

use super::dual::Dual;
use super::kernels;
use super::{to_rm, Mat2, Rollout, SimState, Simulator, SubstepCache, Vec2};
use crate::error::{Error, Result};

/// A per-control-step loss evaluated on the state after each command.
pub trait StepLoss: Sync {
    fn eval(&self, state: &SimState) -> f64;

    /// Loss value; adds `∂loss/∂x` of every particle into `gx` and of every
    /// robot position into `gr`.
    fn eval_grad(&self, state: &SimState, gx: &mut [Vec2], gr: &mut [Vec2]) -> f64;
}

#[derive(Debug, Clone)]
pub struct PlanGradient {
    /// `Σ_{t=1..T} loss(state_t)`.
    pub loss: f64,
    /// Same layout as `ActionPlan::commands`.
    pub grad: Vec<Vec2>,
}

/// Adjoint of the particle state.
struct Adjoint {
    x: Vec<Vec2>,
    v: Vec<Vec2>,
    c: Vec<Mat2>,
    f: Vec<Mat2>,
    r: Vec<Vec2>,
}

/// Jacobian-transpose product of `f: R^N -> R^M` evaluated on duals.
#[inline]
fn vjp<const N: usize>(out: &[Dual<N>], bar: &[f64]) -> [f64; N] {
    let mut g = [0.0; N];
    for (o, b) in out.iter().zip(bar) {
        if *b == 0.0 {
            continue;
        }
        for i in 0..N {
            g[i] += o.d[i] * b;
        }
    }
    g
}

fn duals<const N: usize>(vals: [f64; N]) -> [Dual<N>; N] {
    std::array::from_fn(|i| Dual::var(vals[i], i))
}

impl Simulator {
    /// Gradient of `Σ_{t=1..T} loss(state_t)` with respect to every command.
    pub fn backward(&self, rollout: &Rollout, loss: &dyn StepLoss) -> Result<PlanGradient> {
        let tape = rollout
            .tape
            .as_ref()
            .ok_or_else(|| Error::contract("rollout was recorded without a tape"))?;
        let plan = &tape.plan;
        let s = self.cfg.substeps_per_control;
        let horizon = plan.horizon;
        let nr = plan.n_robots;
        let np = rollout.states[0].particles.len();

        let mut adj = Adjoint {
            x: vec![Vec2::zeros(); np],
            v: vec![Vec2::zeros(); np],
            c: vec![Mat2::zeros(); np],
            f: vec![Mat2::zeros(); np],
            r: vec![Vec2::zeros(); nr],
        };
        let mut grad = vec![Vec2::zeros(); horizon * nr];
        let mut total = 0.0;
        let mut cache = SubstepCache::default();

        for t in (0..horizon).rev() {
            total += loss.eval_grad(&rollout.states[t + 1], &mut adj.x, &mut adj.r);
            let disp: Vec<Vec2> = plan.at(t).iter().map(|a| self.displacement(a)).collect();
            let mut disp_bar = vec![Vec2::zeros(); nr];
            for sub in (0..s).rev() {
                let (p0, r0) = &tape.snapshots[t * s + sub];
                let mut p = p0.clone();
                let mut r = r0.clone();
                self.substep(&mut p, &mut r, &disp, Some(&mut cache));
                self.substep_backward(p0, &cache, &mut adj, &mut disp_bar);
            }
            let lim = self.cfg.velocity_limit;
            for j in 0..nr {
                let a = plan.at(t)[j];
                for ax in 0..2 {
                    if a[ax].abs() <= lim {
                        grad[t * nr + j][ax] = disp_bar[j][ax] / s as f64;
                    }
                }
            }
        }
        if !total.is_finite() || grad.iter().any(|g| !(g.x.is_finite() && g.y.is_finite())) {
            return Err(Error::SimFault {
                step: horizon,
                detail: "non-finite loss or gradient in reverse sweep".into(),
            });
        }
        Ok(PlanGradient { loss: total, grad })
    }

    fn substep_backward(
        &self,
        p0: &super::ParticleField,
        cache: &SubstepCache,
        adj: &mut Adjoint,
        disp_bar: &mut [Vec2],
    ) {
        let dt = self.cfg.dt;
        let m = p0.mass;
        let np = p0.len();
        let nr = cache.r0.len();
        let radius = self.cfg.robot_radius;

        // adj.r holds the adjoint of the robot positions after this substep.
        let mut r1_bar = std::mem::take(&mut adj.r);
        let mut r0_bar = vec![Vec2::zeros(); nr];
        let mut rvel_bar = vec![Vec2::zeros(); nr];

        // Position clamp.
        for q in 0..np {
            for a in 0..2 {
                if cache.clamped[q][a] {
                    adj.x[q][a] = 0.0;
                }
            }
        }

        // Rim projection, robots in reverse order.
        for j in (0..nr).rev() {
            let c = cache.r1[j];
            let vr = cache.rvel[j];
            for &(q, xin, vin) in &cache.disc_in[j] {
                let d = duals::<8>([xin.x, xin.y, vin.x, vin.y, c.x, c.y, vr.x, vr.y]);
                let (xo, vo) = kernels::particle_disc([d[0], d[1]], [d[2], d[3]], [d[4], d[5]], [d[6], d[7]], radius);
                let bar = [adj.x[q].x, adj.x[q].y, adj.v[q].x, adj.v[q].y];
                let g = vjp(&[xo[0], xo[1], vo[0], vo[1]], &bar);
                adj.x[q] = Vec2::new(g[0], g[1]);
                adj.v[q] = Vec2::new(g[2], g[3]);
                r1_bar[j] += Vec2::new(g[4], g[5]);
                rvel_bar[j] += Vec2::new(g[6], g[7]);
            }
        }

        // Grid-to-particle.
        let apic = 4.0 * self.inv_dx * self.inv_dx;
        let mut gv_bar = vec![Vec2::zeros(); self.nodes()];
        for q in 0..np {
            let x0 = p0.x[q];
            let vbar = adj.v[q] + adj.x[q] * dt;
            let cbar = adj.c[q];
            let st = self.stencil(&x0);
            let mut xbar = Vec2::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    let k = self.node_index(st.base[0] + i, st.base[1] + j);
                    let w = st.w[0][i] * st.w[1][j];
                    let gw = Vec2::new(st.dw[0][i] * st.w[1][j], st.w[0][i] * st.dw[1][j]);
                    let d = self.node_pos(k) - x0;
                    let g = cache.grid_v[k];
                    let cd = cbar * d;
                    gv_bar[k] += (vbar + cd * apic) * w;
                    xbar += gw * (g.dot(&vbar) + apic * g.dot(&cd));
                    xbar -= cbar.transpose() * g * (apic * w);
                }
            }
            adj.x[q] += xbar;
            adj.v[q] = Vec2::zeros();
            adj.c[q] = Mat2::zeros();
        }

        // Walls.
        for k in 0..self.nodes() {
            if cache.grid_m[k] <= 0.0 {
                gv_bar[k] = Vec2::zeros();
                continue;
            }
            for a in 0..2 {
                if cache.wall[k][a] {
                    gv_bar[k][a] = 0.0;
                }
            }
        }

        // Robot contact on the grid, robots in reverse order.
        for j in (0..nr).rev() {
            let c = cache.r0[j];
            let vr = cache.rvel[j];
            for &(k, vin) in cache.contact_in[j].iter().rev() {
                let bar = [gv_bar[k].x, gv_bar[k].y];
                if bar == [0.0, 0.0] {
                    continue;
                }
                let node = self.node_pos(k);
                let d = duals::<6>([vin.x, vin.y, c.x, c.y, vr.x, vr.y]);
                let out = kernels::grid_contact(
                    [d[0], d[1]],
                    [node.x, node.y],
                    [d[2], d[3]],
                    [d[4], d[5]],
                    &self.contact,
                );
                let g = vjp(&out, &bar);
                gv_bar[k] = Vec2::new(g[0], g[1]);
                r0_bar[j] += Vec2::new(g[2], g[3]);
                rvel_bar[j] += Vec2::new(g[4], g[5]);
            }
        }

        // Momentum to velocity and damping.
        let mut gm_bar = vec![0.0; self.nodes()];
        let mut gp_bar = vec![Vec2::zeros(); self.nodes()];
        for k in 0..self.nodes() {
            let gm = cache.grid_m[k];
            if gm <= 0.0 {
                continue;
            }
            let v0_bar = gv_bar[k] * self.damping;
            gp_bar[k] = v0_bar / gm;
            gm_bar[k] = -v0_bar.dot(&cache.grid_v0[k]) / gm;
        }

        // Particle-to-grid and the constitutive update.
        let stress_scale = -dt * p0.volume * 4.0 * self.inv_dx * self.inv_dx;
        for q in 0..np {
            let x0 = p0.x[q];
            let v0 = p0.v[q];
            let affine = cache.affine[q];
            let st = self.stencil(&x0);
            let mv = v0 * m;
            let mut a_bar = Mat2::zeros();
            let mut xbar = Vec2::zeros();
            let mut vbar = Vec2::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    let k = self.node_index(st.base[0] + i, st.base[1] + j);
                    let w = st.w[0][i] * st.w[1][j];
                    let gw = Vec2::new(st.dw[0][i] * st.w[1][j], st.w[0][i] * st.dw[1][j]);
                    let d = self.node_pos(k) - x0;
                    let gpb = gp_bar[k];
                    vbar += gpb * (w * m);
                    a_bar += gpb * d.transpose() * w;
                    xbar += gw * (m * gm_bar[k] + gpb.dot(&(mv + affine * d)));
                    xbar -= affine.transpose() * gpb * w;
                }
            }
            adj.x[q] += xbar;
            adj.v[q] += vbar;
            adj.c[q] += a_bar * m;

            // tau -> F_new
            let tau_bar = a_bar * stress_scale;
            let f_tmp = cache.f_tmp[q];
            let f_new = if cache.plastic[q] {
                super::from_rm(kernels::plastic_return(to_rm(&f_tmp), self.tau_y))
            } else {
                f_tmp
            };
            let tau = kernels::kirchhoff(duals::<4>(to_rm(&f_new)), self.mu, self.lambda);
            let g = vjp(&tau, &to_rm(&tau_bar));
            let fnew_bar = adj.f[q] + super::from_rm(g);
            // F_new -> F_tmp
            let ftmp_bar = if cache.plastic[q] {
                let out = kernels::plastic_return(duals::<4>(to_rm(&f_tmp)), self.tau_y);
                super::from_rm(vjp(&out, &to_rm(&fnew_bar)))
            } else {
                fnew_bar
            };
            // F_tmp = (I + dt C) F
            let f0 = p0.f[q];
            let c0 = p0.c[q];
            adj.c[q] += ftmp_bar * f0.transpose() * dt;
            adj.f[q] = (Mat2::identity() + c0 * dt).transpose() * ftmp_bar;
        }

        // Robot kinematics.
        for j in 0..nr {
            r1_bar[j] += rvel_bar[j] / dt;
            r0_bar[j] -= rvel_bar[j] / dt;
            for a in 0..2 {
                if !cache.robot_clamped[j][a] {
                    r0_bar[j][a] += r1_bar[j][a];
                    disp_bar[j][a] += r1_bar[j][a];
                }
            }
        }
        adj.r = r0_bar;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffsim::{ActionPlan, ParticleField, RobotSet, SimConfig};

    /// Pulls particles toward a fixed point and robots toward the particles.
    struct Quadratic;

    impl StepLoss for Quadratic {
        fn eval(&self, s: &SimState) -> f64 {
            let mut gx = vec![Vec2::zeros(); s.particles.len()];
            let mut gr = vec![Vec2::zeros(); s.robots.len()];
            self.eval_grad(s, &mut gx, &mut gr)
        }

        fn eval_grad(&self, s: &SimState, gx: &mut [Vec2], gr: &mut [Vec2]) -> f64 {
            let target = Vec2::new(0.5, 0.6);
            let mut l = 0.0;
            for (i, x) in s.particles.x.iter().enumerate() {
                let d = x - target;
                l += d.norm_squared();
                gx[i] += d * 2.0;
            }
            let c = s.particles.centroid();
            let n = s.particles.len() as f64;
            for (j, r) in s.robots.x.iter().enumerate() {
                let d = r - c;
                l += 0.1 * d.norm_squared();
                gr[j] += d * 0.2;
                for g in gx.iter_mut() {
                    *g -= d * (0.2 / n);
                }
            }
            l
        }
    }

    fn scene() -> SimState {
        let x: Vec<Vec2> = (0..64)
            .map(|i| Vec2::new(0.4 + 0.2 * (i / 4) as f64 / 16.0, 0.49 + 0.02 * (i % 4) as f64 / 3.0))
            .collect();
        SimState {
            particles: ParticleField::at_rest(x, 200.0 * 0.004 / 64.0, 0.004 / 64.0),
            robots: RobotSet::new(vec![Vec2::new(0.45, 0.455), Vec2::new(0.55, 0.455)], 0.02),
            step_index: 0,
        }
    }

    #[test]
    fn quadratic_loss_gradient_matches_central_differences() {
        let sim = Simulator::new(SimConfig::default()).unwrap();
        let s0 = scene();
        let mut plan = ActionPlan::zeros(6, 2);
        for (i, c) in plan.commands.iter_mut().enumerate() {
            *c = Vec2::new(0.004 * ((i * 7 % 5) as f64 - 2.0), 0.01 + 0.001 * (i % 3) as f64);
        }
        let ro = sim.rollout(&s0, &plan, true).unwrap();
        let g = sim.backward(&ro, &Quadratic).unwrap();
        let h = 1e-7;
        let mut worst: f64 = 0.0;
        for i in 0..plan.commands.len() {
            for a in 0..2 {
                let mut p = plan.clone();
                p.commands[i][a] += h;
                let lp = sim.rollout_cost(&s0, &p, &Quadratic).unwrap().0;
                p.commands[i][a] -= 2.0 * h;
                let lm = sim.rollout_cost(&s0, &p, &Quadratic).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let an = g.grad[i][a];
                let rel = (fd - an).abs() / (fd.abs().max(an.abs()) + 1e-8);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }
}
