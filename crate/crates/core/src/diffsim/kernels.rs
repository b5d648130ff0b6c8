//! Local constitutive and contact kernels.
//!
//! 2×2 matrices are row-major `[a, b, c, d]` = `[[a, b], [c, d]]`.

use super::dual::Real;

pub type M2<R> = [R; 4];
pub type V2<R> = [R; 2];

#[inline]
fn matmul<R: Real>(x: M2<R>, y: M2<R>) -> M2<R> {
    [
        x[0] * y[0] + x[1] * y[2],
        x[0] * y[1] + x[1] * y[3],
        x[2] * y[0] + x[3] * y[2],
        x[2] * y[1] + x[3] * y[3],
    ]
}

#[inline]
fn transpose<R: Real>(x: M2<R>) -> M2<R> {
    [x[0], x[2], x[1], x[3]]
}

/// Rotation factor of the polar decomposition `F = R S` for `det F > 0`.
#[inline]
fn polar_rotation<R: Real>(f: M2<R>) -> M2<R> {
    let theta = (f[2] - f[1]).atan2(f[0] + f[3]);
    let (c, s) = (theta.cos(), theta.sin());
    [c, -s, s, c]
}

/// Kirchhoff stress `τ = 2μ(F − R)Fᵀ + λ(J − 1)J·I` of the fixed-corotated model.
pub fn kirchhoff<R: Real>(f: M2<R>, mu: f64, lambda: f64) -> M2<R> {
    let r = polar_rotation(f);
    let j = f[0] * f[3] - f[1] * f[2];
    let diff = [f[0] - r[0], f[1] - r[1], f[2] - r[2], f[3] - r[3]];
    let mut tau = matmul(diff, transpose(f));
    for t in tau.iter_mut() {
        *t = t.scale(2.0 * mu);
    }
    let vol = (j - R::cst(1.0)) * j * R::cst(lambda);
    tau[0] += vol;
    tau[3] += vol;
    tau
}

/// Symmetric part `S = Rᵀ F` eigen-decomposed: returns `(U, [σ1, σ2], V)`
/// with `F = U diag(σ) Vᵀ`, σ1 ≥ σ2.
fn svd<R: Real>(f: M2<R>) -> (M2<R>, V2<R>, M2<R>) {
    let r = polar_rotation(f);
    let s = matmul(transpose(r), f);
    let p = s[0];
    let q = (s[1] + s[2]).scale(0.5);
    let w = s[3];
    let mean = (p + w).scale(0.5);
    let half = (p - w).scale(0.5);
    let h = (half * half + q * q).sqrt();
    let phi = (q.scale(2.0)).atan2(p - w).scale(0.5);
    let (c, sn) = (phi.cos(), phi.sin());
    let v = [c, -sn, sn, c];
    (matmul(r, v), [mean + h, mean - h], v)
}

/// Amount by which the deviatoric Hencky strain exceeds the yield surface.
/// Positive means the return mapping is active.
pub fn yield_excess(f: M2<f64>, tau_y: f64) -> f64 {
    let (_, sig, _) = svd(f);
    if !(sig[1] > 0.0) {
        return f64::NAN;
    }
    let d = (sig[0].ln() - sig[1].ln()).abs() / std::f64::consts::SQRT_2;
    d - tau_y
}

/// Von Mises return mapping on the logarithmic principal strains.
///
/// Only valid where [`yield_excess`] is positive; there σ1 ≠ σ2 and the
/// decomposition is smooth.
pub fn plastic_return<R: Real>(f: M2<R>, tau_y: f64) -> M2<R> {
    let (u, sig, v) = svd(f);
    let e1 = sig[0].ln();
    let e2 = sig[1].ln();
    let mean = (e1 + e2).scale(0.5);
    let (h1, h2) = (e1 - mean, e2 - mean);
    let norm = (h1 * h1 + h2 * h2).sqrt();
    let shrink = (norm - R::cst(tau_y)) / norm;
    let s1 = (e1 - shrink * h1).exp();
    let s2 = (e2 - shrink * h2).exp();
    let us = [u[0] * s1, u[1] * s2, u[2] * s1, u[3] * s2];
    matmul(us, transpose(v))
}

/// Static parameters of the grid/robot contact projection.
#[derive(Debug, Clone, Copy)]
pub struct ContactParams {
    pub radius: f64,
    pub friction: f64,
    pub softness: f64,
}

impl ContactParams {
    /// Nodes farther than this from the disc surface are not touched; the
    /// influence there is below `exp(-25)`.
    pub fn cutoff(&self) -> f64 {
        25.0 / self.softness
    }
}

/// Grid-node velocity after contact with one rigid disc.
///
/// The approaching normal component of the node velocity relative to the disc
/// is removed and the tangential part is reduced by Coulomb friction. The
/// projected velocity is blended with the input by a soft influence
/// `min(exp(-k·sdf), 1)`.
pub fn grid_contact<R: Real>(v: V2<R>, node: [f64; 2], center: V2<R>, disc_vel: V2<R>, p: &ContactParams) -> V2<R> {
    let dx = R::cst(node[0]) - center[0];
    let dy = R::cst(node[1]) - center[1];
    let dist = (dx * dx + dy * dy).sqrt();
    if dist.val() < 1e-12 {
        return v;
    }
    let sdf = dist - R::cst(p.radius);
    let influence = if sdf.val() <= 0.0 {
        R::cst(1.0)
    } else {
        (-sdf.scale(p.softness)).exp()
    };
    let n = [dx / dist, dy / dist];
    let rel = [v[0] - disc_vel[0], v[1] - disc_vel[1]];
    let vn = rel[0] * n[0] + rel[1] * n[1];
    if vn.val() >= 0.0 {
        return v;
    }
    let mut t = [rel[0] - vn * n[0], rel[1] - vn * n[1]];
    let tn = (t[0] * t[0] + t[1] * t[1]).sqrt();
    if tn.val() > 1e-30 {
        let kept = tn + vn.scale(p.friction);
        if kept.val() > 0.0 {
            let k = kept / tn;
            t = [t[0] * k, t[1] * k];
        } else {
            t = [R::cst(0.0), R::cst(0.0)];
        }
    }
    let out = [disc_vel[0] + t[0], disc_vel[1] + t[1]];
    let keep = R::cst(1.0) - influence;
    [out[0] * influence + v[0] * keep, out[1] * influence + v[1] * keep]
}

/// Pushes a particle that ended inside a disc back onto its rim and removes
/// the approaching normal velocity.
pub fn particle_disc<R: Real>(x: V2<R>, v: V2<R>, center: V2<R>, disc_vel: V2<R>, radius: f64) -> (V2<R>, V2<R>) {
    let dx = x[0] - center[0];
    let dy = x[1] - center[1];
    let dist = (dx * dx + dy * dy).sqrt();
    if dist.val() >= radius || dist.val() < 1e-12 {
        return (x, v);
    }
    let n = [dx / dist, dy / dist];
    let xo = [center[0] + n[0].scale(radius), center[1] + n[1].scale(radius)];
    let vn = (v[0] - disc_vel[0]) * n[0] + (v[1] - disc_vel[1]) * n[1];
    let vo = if vn.val() < 0.0 {
        [v[0] - vn * n[0], v[1] - vn * n[1]]
    } else {
        v
    };
    (xo, vo)
}
