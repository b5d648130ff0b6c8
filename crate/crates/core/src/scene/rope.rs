//! Rope and box construction from cubic centerlines.

use serde::{Deserialize, Serialize};

use crate::diffsim::{ParticleField, SimConfig, Vec2};
use crate::error::{Error, Result};

/// `y = a3·x³ + a2·x² + a1·x + a0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cubic(pub [f64; 4]);

impl Cubic {
    pub fn straight(y: f64) -> Self {
        Cubic([0.0, 0.0, 0.0, y])
    }

    pub fn y(&self, x: f64) -> f64 {
        let [a3, a2, a1, a0] = self.0;
        ((a3 * x + a2) * x + a1) * x + a0
    }

    pub fn slope(&self, x: f64) -> f64 {
        let [a3, a2, a1, _] = self.0;
        (3.0 * a3 * x + 2.0 * a2) * x + a1
    }

    fn speed(&self, x: f64) -> f64 {
        (1.0 + self.slope(x).powi(2)).sqrt()
    }

    /// Arc length over `[x0, x1]` by composite Simpson.
    pub fn arc_length(&self, x0: f64, x1: f64) -> f64 {
        let n = 512;
        let h = (x1 - x0) / n as f64;
        let mut s = self.speed(x0) + self.speed(x1);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * self.speed(x0 + i as f64 * h);
        }
        s * h / 3.0
    }

    pub fn point(&self, x: f64) -> Vec2 {
        Vec2::new(x, self.y(x))
    }

    /// Unit normal, rotated +90° from the tangent.
    pub fn normal(&self, x: f64) -> Vec2 {
        let k = self.slope(x);
        Vec2::new(-k, 1.0) / (1.0 + k * k).sqrt()
    }
}

/// Cross-section and length of the rope; the same for the scene and every goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RopeSpec {
    pub half_width: f64,
    pub length: f64,
    /// Centerlines are laid out symmetrically in x around this abscissa.
    pub x_center: f64,
}

impl Default for RopeSpec {
    fn default() -> Self {
        RopeSpec {
            half_width: 0.02,
            length: 0.6,
            x_center: 0.5,
        }
    }
}

impl RopeSpec {
    pub fn area(&self) -> f64 {
        self.length * 2.0 * self.half_width
    }

    /// x-interval, centred on `x_center`, over which `curve` has the rope's length.
    pub fn span(&self, curve: &Cubic) -> [f64; 2] {
        let (mut lo, mut hi) = (0.0, self.length / 2.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if curve.arc_length(self.x_center - mid, self.x_center + mid) < self.length {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let h = 0.5 * (lo + hi);
        [self.x_center - h, self.x_center + h]
    }
}

/// Arc-length parameterisation of a centerline, tabulated densely.
pub struct Centerline {
    curve: Cubic,
    xs: Vec<f64>,
    s: Vec<f64>,
}

impl Centerline {
    pub fn new(curve: Cubic, span: [f64; 2]) -> Self {
        let n = 4096;
        let xs: Vec<f64> = (0..=n)
            .map(|i| span[0] + (span[1] - span[0]) * i as f64 / n as f64)
            .collect();
        let mut s = vec![0.0; n + 1];
        for i in 1..=n {
            s[i] = s[i - 1] + curve.point(xs[i - 1]).metric_distance(&curve.point(xs[i]));
        }
        Centerline { curve, xs, s }
    }

    pub fn length(&self) -> f64 {
        *self.s.last().unwrap()
    }

    /// Abscissa at arc length `s`, by linear interpolation of the table.
    pub fn x_at(&self, s: f64) -> f64 {
        let i = self.s.partition_point(|&v| v < s).clamp(1, self.s.len() - 1);
        let (s0, s1) = (self.s[i - 1], self.s[i]);
        let t = if s1 > s0 { (s - s0) / (s1 - s0) } else { 0.0 };
        self.xs[i - 1] + t * (self.xs[i] - self.xs[i - 1])
    }

    /// `n` points equally spaced in arc length, endpoints excluded by half a gap.
    pub fn stations(&self, n: usize) -> Vec<Vec2> {
        let l = self.length();
        (0..n)
            .map(|k| self.curve.point(self.x_at((k as f64 + 0.5) / n as f64 * l)))
            .collect()
    }
}

fn check_inside(curve: &Cubic, span: [f64; 2], margin: f64) -> Result<()> {
    let n = 2048;
    for i in 0..=n {
        let x = span[0] + (span[1] - span[0]) * i as f64 / n as f64;
        let y = curve.y(x);
        let ok = x >= margin && x <= 1.0 - margin && y >= margin && y <= 1.0 - margin;
        if !ok {
            return Err(Error::Scene(format!(
                "curve {:?} leaves the workspace at x = {x:.4} (y = {y:.4}, margin {margin})",
                curve.0
            )));
        }
    }
    Ok(())
}

/// Golden-ratio sequence; uniform low-discrepancy offsets across the rope.
fn cross_offset(k: usize) -> f64 {
    const G: f64 = 0.618_033_988_749_894_8;
    ((k as f64 + 0.5) * G).fract() * 2.0 - 1.0
}

/// Rope particles: one cross-section per equally spaced centerline station,
/// offsets spread uniformly over the section width.
pub fn sample_rope(rope: &RopeSpec, curve: &Cubic, n: usize) -> Result<Vec<Vec2>> {
    if n == 0 {
        return Err(Error::Scene("a rope needs at least one particle".into()));
    }
    let span = rope.span(curve);
    check_inside(curve, span, rope.half_width)?;
    let line = Centerline::new(*curve, span);
    let l = line.length();
    Ok((0..n)
        .map(|k| {
            let x = line.x_at((k as f64 + 0.5) / n as f64 * l);
            curve.point(x) + curve.normal(x) * (cross_offset(k) * rope.half_width)
        })
        .collect())
}

pub fn build_rope_scene(cfg: &SimConfig, rope: &RopeSpec, curve: &Cubic, n_particles: usize) -> Result<ParticleField> {
    let x = sample_rope(rope, curve, n_particles)?;
    let volume = rope.area() / n_particles as f64;
    Ok(ParticleField::at_rest(x, cfg.density * volume, volume))
}

/// A stiff block and the configuration that makes it behave near-rigidly.
#[derive(Debug, Clone)]
pub struct BoxScene {
    pub particles: ParticleField,
    pub config: SimConfig,
}

/// Lattice spacing of box particles: half a grid cell.
pub fn box_spacing(cfg: &SimConfig) -> f64 {
    0.5 / cfg.grid_res as f64
}

pub fn build_box_scene(cfg: &SimConfig, center: [f64; 2], half_extents: [f64; 2]) -> Result<BoxScene> {
    let inside = (0..2)
        .all(|a| half_extents[a] > 0.0 && center[a] - half_extents[a] >= 0.0 && center[a] + half_extents[a] <= 1.0);
    if !inside {
        return Err(Error::Scene(format!(
            "box at {center:?} with half extents {half_extents:?} is not inside the workspace"
        )));
    }
    let h = box_spacing(cfg);
    let nx = (2.0 * half_extents[0] / h).floor() as usize;
    let ny = (2.0 * half_extents[1] / h).floor() as usize;
    if nx == 0 || ny == 0 {
        return Err(Error::Scene("box is thinner than the particle spacing".into()));
    }
    let mut x = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            x.push(Vec2::new(
                center[0] + (i as f64 + 0.5 - nx as f64 / 2.0) * h,
                center[1] + (j as f64 + 0.5 - ny as f64 / 2.0) * h,
            ));
        }
    }
    let volume = 4.0 * half_extents[0] * half_extents[1] / x.len() as f64;
    let config = SimConfig {
        yield_stress: 1e6,
        ..cfg.clone()
    };
    Ok(BoxScene {
        particles: ParticleField::at_rest(x, cfg.density * volume, volume),
        config,
    })
}
