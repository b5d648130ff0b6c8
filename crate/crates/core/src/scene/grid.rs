//! Workspace lattice, binary occupancy, IoU and exact signed distance fields.

use serde::{Deserialize, Serialize};

use crate::diffsim::PLANE_Z;
use crate::error::{Error, Result};

/// Cell lattice covering the unit workspace: `nx × ny` cells in the plane and
/// a single slab of thickness `cell_size` centred on [`PLANE_Z`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub cell_size: f64,
    pub origin: [f64; 3],
}

impl Lattice {
    pub fn workspace(grid_res: usize) -> Self {
        let h = 1.0 / grid_res as f64;
        Lattice {
            nx: grid_res,
            ny: grid_res,
            nz: 1,
            cell_size: h,
            origin: [0.0, 0.0, PLANE_Z - 0.5 * h],
        }
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    /// Flat index, x fastest.
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.ny + j) * self.nx + i
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let h = self.cell_size;
        [
            self.origin[0] + (i as f64 + 0.5) * h,
            self.origin[1] + (j as f64 + 0.5) * h,
            self.origin[2] + (k as f64 + 0.5) * h,
        ]
    }

    /// Cell containing `p`; points on or past the outer faces map to the
    /// boundary cells.
    pub fn cell_of(&self, p: [f64; 3]) -> usize {
        let d = self.dims();
        let c: [usize; 3] = std::array::from_fn(|a| {
            let u = ((p[a] - self.origin[a]) / self.cell_size).floor();
            (u.max(0.0) as usize).min(d[a] - 1)
        });
        self.index(c[0], c[1], c[2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    pub lattice: Lattice,
    pub values: Vec<f64>,
}

impl OccupancyGrid {
    pub fn occupied(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }
}

pub fn occupancy(points: &[[f64; 3]], lattice: &Lattice) -> OccupancyGrid {
    let mut values = vec![0.0; lattice.cells()];
    for p in points {
        values[lattice.cell_of(*p)] = 1.0;
    }
    OccupancyGrid {
        lattice: *lattice,
        values,
    }
}

/// Intersection over union, `Σ min / Σ max`. Two empty grids count as identical.
pub fn iou(a: &OccupancyGrid, b: &OccupancyGrid) -> Result<f64> {
    if a.lattice != b.lattice {
        return Err(Error::contract("iou of grids on different lattices"));
    }
    let (mut inter, mut union) = (0.0, 0.0);
    for (x, y) in a.values.iter().zip(&b.values) {
        inter += x.min(*y);
        union += x.max(*y);
    }
    Ok(if union == 0.0 { 1.0 } else { inter / union })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdfGrid {
    pub lattice: Lattice,
    pub values: Vec<f64>,
}

/// One-dimensional squared distance transform (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        if f[v[0]].is_infinite() {
            v[0] = q;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if f[v[0]].is_infinite() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance, in cells, from every cell centre to the
/// nearest cell where `seed` is true.
fn squared_edt(lattice: &Lattice, seed: impl Fn(usize) -> bool) -> Vec<f64> {
    let dims = lattice.dims();
    let mut d: Vec<f64> = (0..lattice.cells())
        .map(|c| if seed(c) { 0.0 } else { f64::INFINITY })
        .collect();
    let m = *dims.iter().max().unwrap();
    let (mut f, mut out) = (vec![0.0; m], vec![0.0; m]);
    let (mut v, mut z) = (vec![0usize; m], vec![0.0; m + 1]);
    for axis in 0..3 {
        let n = dims[axis];
        if n == 1 {
            continue;
        }
        let [a, b] = match axis {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        };
        for u in 0..dims[a] {
            for w in 0..dims[b] {
                let idx = |q: usize| {
                    let mut c = [0; 3];
                    c[axis] = q;
                    c[a] = u;
                    c[b] = w;
                    lattice.index(c[0], c[1], c[2])
                };
                for q in 0..n {
                    f[q] = d[idx(q)];
                }
                edt_1d(&f[..n], &mut out[..n], &mut v, &mut z);
                for q in 0..n {
                    d[idx(q)] = out[q];
                }
            }
        }
    }
    d
}

/// Signed distance between cell centres and the occupied region.
///
/// Outside cells get the centre-to-centre distance to the nearest occupied
/// cell; inside cells get `-(d_in - h/2)` where `d_in` is the distance to the
/// nearest empty cell, so a lone occupied cell sits at `-h/2`.
pub fn sdf(occ: &OccupancyGrid) -> Result<SdfGrid> {
    let filled = occ.occupied();
    if filled == 0 {
        return Err(Error::Scene("signed distance of an empty grid is undefined".into()));
    }
    if filled == occ.values.len() {
        return Err(Error::Scene("signed distance of a full grid is undefined".into()));
    }
    let lat = &occ.lattice;
    let h = lat.cell_size;
    let out = squared_edt(lat, |c| occ.values[c] > 0.0);
    let inn = squared_edt(lat, |c| occ.values[c] <= 0.0);
    let values = (0..lat.cells())
        .map(|c| {
            if occ.values[c] > 0.0 {
                -(inn[c].sqrt() * h - 0.5 * h)
            } else {
                out[c].sqrt() * h
            }
        })
        .collect();
    Ok(SdfGrid { lattice: *lat, values })
}
