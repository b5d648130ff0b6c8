//! Goal specification, the IoU reward and the differentiable shaping loss.

use serde::{Deserialize, Serialize};

use super::grid::{iou, occupancy, sdf, Lattice, OccupancyGrid, SdfGrid};
use super::rope::{sample_rope, Cubic, RopeSpec};
use crate::diffsim::{ParticleField, SimState, StepLoss, Vec2, PLANE_Z};
use crate::error::Result;

/// Target rope pose: the curve it was sampled from and the fixed particles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub curve: Cubic,
    pub rope: RopeSpec,
    /// In construction order; index `i` corresponds to scene particle `i`.
    pub goal_particles: Vec<[f64; 3]>,
    pub particle_mass: f64,
}

impl GoalSpec {
    pub fn rope_half_width(&self) -> f64 {
        self.rope.half_width
    }

    pub fn planar(&self) -> Vec<Vec2> {
        self.goal_particles.iter().map(|p| Vec2::new(p[0], p[1])).collect()
    }

    pub fn len(&self) -> usize {
        self.goal_particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.goal_particles.is_empty()
    }
}

/// Goal particles sampled exactly as the scene's rope, with the template's
/// particle count and mass.
pub fn make_goal(curve: &Cubic, rope: &RopeSpec, template: &ParticleField) -> Result<GoalSpec> {
    let x = sample_rope(rope, curve, template.len())?;
    Ok(GoalSpec {
        curve: *curve,
        rope: rope.clone(),
        goal_particles: x.iter().map(|p| [p.x, p.y, PLANE_Z]).collect(),
        particle_mass: template.mass,
    })
}

/// IoU of the binary occupancies of two point sets.
pub fn similarity(a: &[[f64; 3]], b: &[[f64; 3]], lattice: &Lattice) -> f64 {
    iou(&occupancy(a, lattice), &occupancy(b, lattice)).expect("same lattice")
}

/// Normalised improvement of similarity to the goal, clipped below at zero.
pub fn reward_from_similarity(f_t: f64, f_0: f64, eps: f64) -> f64 {
    ((f_t - f_0) / (1.0 - f_0).max(eps)).max(0.0)
}

pub fn reward(s_t: &[[f64; 3]], s_0: &[[f64; 3]], s_g: &[[f64; 3]], lattice: &Lattice, eps: f64) -> f64 {
    reward_from_similarity(similarity(s_t, s_g, lattice), similarity(s_0, s_g, lattice), eps)
}

pub const DEFAULT_REWARD_EPS: f64 = 1e-6;

/// Scores states against one goal, caching the goal occupancy.
#[derive(Debug, Clone)]
pub struct RewardFn {
    lattice: Lattice,
    goal: OccupancyGrid,
    f0: f64,
    eps: f64,
}

impl RewardFn {
    pub fn new(goal: &GoalSpec, initial: &ParticleField, lattice: Lattice) -> Self {
        let goal_occ = occupancy(&goal.goal_particles, &lattice);
        let f0 = iou(&occupancy(&initial.positions3(), &lattice), &goal_occ).expect("same lattice");
        RewardFn {
            lattice,
            goal: goal_occ,
            f0,
            eps: DEFAULT_REWARD_EPS,
        }
    }

    pub fn initial_similarity(&self) -> f64 {
        self.f0
    }

    pub fn similarity(&self, p: &ParticleField) -> f64 {
        iou(&occupancy(&p.positions3(), &self.lattice), &self.goal).expect("same lattice")
    }

    pub fn reward(&self, p: &ParticleField) -> f64 {
        reward_from_similarity(self.similarity(p), self.f0, self.eps)
    }
}

/// Mass-conserving bilinear splat onto cell centres. Indices past the
/// border are clamped, so weights merge rather than leak.
#[derive(Debug, Clone)]
pub struct DensityRaster {
    lattice: Lattice,
}

/// Four (cell, weight, ∂weight/∂x) taps of one particle.
type Taps = [(usize, f64, Vec2); 4];

impl DensityRaster {
    pub fn new(lattice: Lattice) -> Self {
        DensityRaster { lattice }
    }

    fn axis(&self, x: f64, a: usize, n: usize) -> ([usize; 2], [f64; 2], [f64; 2]) {
        let h = self.lattice.cell_size;
        let u = (x - self.lattice.origin[a]) / h - 0.5;
        let i0 = u.floor();
        let fr = u - i0;
        let clampi = |i: f64| (i.max(0.0) as usize).min(n - 1);
        ([clampi(i0), clampi(i0 + 1.0)], [1.0 - fr, fr], [-1.0 / h, 1.0 / h])
    }

    fn taps(&self, p: Vec2) -> Taps {
        let (ix, wx, dx) = self.axis(p.x, 0, self.lattice.nx);
        let (iy, wy, dy) = self.axis(p.y, 1, self.lattice.ny);
        let mut t = [(0, 0.0, Vec2::zeros()); 4];
        for a in 0..2 {
            for b in 0..2 {
                t[2 * a + b] = (
                    self.lattice.index(ix[a], iy[b], 0),
                    wx[a] * wy[b],
                    Vec2::new(dx[a] * wy[b], wx[a] * dy[b]),
                );
            }
        }
        t
    }

    pub fn splat(&self, x: &[Vec2], mass: f64) -> Vec<f64> {
        let mut rho = vec![0.0; self.lattice.cells()];
        for p in x {
            for (c, w, _) in self.taps(*p) {
                rho[c] += mass * w;
            }
        }
        rho
    }

    /// Adds `mass · Σ_c g[c] ∂ρ_c/∂x_i` into `gx[i]`.
    pub fn pullback(&self, x: &[Vec2], mass: f64, g: &[f64], gx: &mut [Vec2]) {
        for (p, out) in x.iter().zip(gx.iter_mut()) {
            for (c, _, dw) in self.taps(*p) {
                *out += dw * (mass * g[c]);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossCoeffs {
    pub mass: f64,
    pub dist: f64,
    pub grasp: f64,
}

impl Default for LossCoeffs {
    fn default() -> Self {
        LossCoeffs {
            mass: 500.0,
            dist: 500.0,
            grasp: 1.0,
        }
    }
}

/// How the distance term pairs the current state with the goal SDF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistTerm {
    /// `Σ ρ_t · SDF_g`.
    #[default]
    Density,
    /// `Σ SDF_t · SDF_g` on binary occupancy. Not differentiable; its
    /// gradient is reported as zero.
    SdfProduct,
}

/// Softmin temperature for the robot-to-rope distance (m).
pub const GRASP_TEMPERATURE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub mass: f64,
    pub dist: f64,
    /// Σ over robots of the softmin surface distance.
    pub grasp: f64,
    /// Same with a hard minimum; logged only.
    pub grasp_hard: f64,
    pub total: f64,
}

/// Per-step shaping loss `c1·L_mass + c2·L_dist + c3·L_grasp` against one goal.
#[derive(Debug, Clone)]
pub struct PushLoss {
    raster: DensityRaster,
    coeffs: LossCoeffs,
    dist_term: DistTerm,
    goal_rho: Vec<f64>,
    goal_sdf: SdfGrid,
    mass: f64,
}

impl PushLoss {
    pub fn new(goal: &GoalSpec, lattice: Lattice, coeffs: LossCoeffs) -> Result<Self> {
        let goal_sdf = sdf(&occupancy(&goal.goal_particles, &lattice))?;
        let raster = DensityRaster::new(lattice);
        let goal_rho = raster.splat(&goal.planar(), goal.particle_mass);
        Ok(PushLoss {
            raster,
            coeffs,
            dist_term: DistTerm::Density,
            goal_rho,
            goal_sdf,
            mass: goal.particle_mass,
        })
    }

    pub fn with_dist_term(mut self, term: DistTerm) -> Self {
        self.dist_term = term;
        self
    }

    pub fn goal_sdf(&self) -> &SdfGrid {
        &self.goal_sdf
    }

    pub fn raster(&self) -> &DensityRaster {
        &self.raster
    }

    pub fn terms(&self, state: &SimState) -> LossTerms {
        self.eval_terms(state, None)
    }

    fn eval_terms(&self, state: &SimState, grads: Option<(&mut [Vec2], &mut [Vec2])>) -> LossTerms {
        let x = &state.particles.x;
        let rho = self.raster.splat(x, self.mass);
        let mass: f64 = rho.iter().zip(&self.goal_rho).map(|(a, b)| (a - b).abs()).sum();
        let dist = match self.dist_term {
            DistTerm::Density => rho.iter().zip(&self.goal_sdf.values).map(|(a, b)| a * b).sum(),
            DistTerm::SdfProduct => match sdf(&occupancy(&state.particles.positions3(), &self.raster.lattice)) {
                Ok(s) => s.values.iter().zip(&self.goal_sdf.values).map(|(a, b)| a * b).sum(),
                Err(_) => 0.0,
            },
        };
        let r = state.robots.radius;
        let (mut grasp, mut grasp_hard) = (0.0, 0.0);
        let mut weights = vec![0.0; x.len()];
        let (mut gx, mut gr) = match grads {
            Some((gx, gr)) => (Some(gx), Some(gr)),
            None => (None, None),
        };
        for (j, rp) in state.robots.x.iter().enumerate() {
            let d: Vec<f64> = x.iter().map(|p| (p - rp).norm() - r).collect();
            let m = d.iter().cloned().fold(f64::INFINITY, f64::min);
            if !m.is_finite() {
                continue;
            }
            let mut z = 0.0;
            for (w, di) in weights.iter_mut().zip(&d) {
                *w = (-(di - m) / GRASP_TEMPERATURE).exp();
                z += *w;
            }
            grasp += m - GRASP_TEMPERATURE * z.ln();
            grasp_hard += m;
            if let (Some(gx), Some(gr)) = (gx.as_deref_mut(), gr.as_deref_mut()) {
                for (i, p) in x.iter().enumerate() {
                    let diff = p - rp;
                    let n = diff.norm();
                    if n == 0.0 || weights[i] == 0.0 {
                        continue;
                    }
                    let g = diff * (self.coeffs.grasp * weights[i] / (z * n));
                    gx[i] += g;
                    gr[j] -= g;
                }
            }
        }
        if let Some(gx) = gx {
            let g: Vec<f64> = rho
                .iter()
                .zip(&self.goal_rho)
                .zip(&self.goal_sdf.values)
                .map(|((a, b), s)| {
                    let dm = if a > b {
                        1.0
                    } else if a < b {
                        -1.0
                    } else {
                        0.0
                    };
                    let dd = if self.dist_term == DistTerm::Density { *s } else { 0.0 };
                    self.coeffs.mass * dm + self.coeffs.dist * dd
                })
                .collect();
            self.raster.pullback(x, self.mass, &g, gx);
        }
        let total = self.coeffs.mass * mass + self.coeffs.dist * dist + self.coeffs.grasp * grasp;
        LossTerms {
            mass,
            dist,
            grasp,
            grasp_hard,
            total,
        }
    }
}

impl StepLoss for PushLoss {
    fn eval(&self, state: &SimState) -> f64 {
        self.eval_terms(state, None).total
    }

    fn eval_grad(&self, state: &SimState, gx: &mut [Vec2], gr: &mut [Vec2]) -> f64 {
        self.eval_terms(state, Some((gx, gr))).total
    }
}
