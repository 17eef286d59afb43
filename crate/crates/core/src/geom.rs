//! Uniform Cartesian grids over convex domains, node-masked fields, and the
//! interior/thin-shell quadrature shared by every other module.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smooth, bounded, uniformly convex domains given by a level function
/// `phi` with the domain `{phi < 0}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConvexDomain {
    /// Disk (2D) of the given radius.
    Disk { radius: f64, #[serde(default)] center: [f64; 3] },
    /// Ball (3D) of the given radius.
    Ball { radius: f64, #[serde(default)] center: [f64; 3] },
    /// Ellipse (2D) with semi-axes a, b.
    Ellipse { a: f64, b: f64, #[serde(default)] center: [f64; 3] },
    /// Ellipsoid (3D) with semi-axes a, b, c.
    Ellipsoid { a: f64, b: f64, c: f64, #[serde(default)] center: [f64; 3] },
    /// Smooth convex quartic level set `sum ((x_i-c_i)/r)^4 < 1`, inscribed in
    /// the square/cube of half-width r.
    Quartic { r: f64, dim: usize, #[serde(default)] center: [f64; 3] },
}

impl ConvexDomain {
    pub fn disk(radius: f64) -> Self {
        ConvexDomain::Disk { radius, center: [0.0; 3] }
    }

    pub fn ball(radius: f64) -> Self {
        ConvexDomain::Ball { radius, center: [0.0; 3] }
    }

    pub fn ellipse(a: f64, b: f64) -> Self {
        ConvexDomain::Ellipse { a, b, center: [0.0; 3] }
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexDomain::Disk { .. } | ConvexDomain::Ellipse { .. } => 2,
            ConvexDomain::Ball { .. } | ConvexDomain::Ellipsoid { .. } => 3,
            ConvexDomain::Quartic { dim, .. } => *dim,
        }
    }

    pub fn center(&self) -> [f64; 3] {
        match self {
            ConvexDomain::Disk { center, .. }
            | ConvexDomain::Ball { center, .. }
            | ConvexDomain::Ellipse { center, .. }
            | ConvexDomain::Ellipsoid { center, .. }
            | ConvexDomain::Quartic { center, .. } => *center,
        }
    }

    /// Level function, negative inside the domain.
    pub fn phi(&self, p: [f64; 3]) -> f64 {
        let c = self.center();
        let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        match self {
            ConvexDomain::Disk { radius, .. } => d[0] * d[0] + d[1] * d[1] - radius * radius,
            ConvexDomain::Ball { radius, .. } => {
                d[0] * d[0] + d[1] * d[1] + d[2] * d[2] - radius * radius
            }
            ConvexDomain::Ellipse { a, b, .. } => (d[0] / a).powi(2) + (d[1] / b).powi(2) - 1.0,
            ConvexDomain::Ellipsoid { a, b, c: cc, .. } => {
                (d[0] / a).powi(2) + (d[1] / b).powi(2) + (d[2] / cc).powi(2) - 1.0
            }
            ConvexDomain::Quartic { r, dim, .. } => {
                let mut s = (d[0] / r).powi(4) + (d[1] / r).powi(4);
                if *dim == 3 {
                    s += (d[2] / r).powi(4);
                }
                s - 1.0
            }
        }
    }

    /// Largest radius of a ball centered at `center()` inside the domain.
    pub fn inradius(&self) -> f64 {
        match self {
            ConvexDomain::Disk { radius, .. } | ConvexDomain::Ball { radius, .. } => *radius,
            ConvexDomain::Ellipse { a, b, .. } => a.min(*b),
            ConvexDomain::Ellipsoid { a, b, c, .. } => a.min(*b).min(*c),
            ConvexDomain::Quartic { r, .. } => *r,
        }
    }

    /// Axis-aligned bounding box (min corner, max corner).
    pub fn bbox(&self) -> ([f64; 3], [f64; 3]) {
        let c = self.center();
        let half = match self {
            ConvexDomain::Disk { radius, .. } => [*radius, *radius, 0.0],
            ConvexDomain::Ball { radius, .. } => [*radius; 3],
            ConvexDomain::Ellipse { a, b, .. } => [*a, *b, 0.0],
            ConvexDomain::Ellipsoid { a, b, c: cc, .. } => [*a, *b, *cc],
            ConvexDomain::Quartic { r, dim, .. } => {
                if *dim == 3 { [*r; 3] } else { [*r, *r, 0.0] }
            }
        };
        (
            [c[0] - half[0], c[1] - half[1], c[2] - half[2]],
            [c[0] + half[0], c[1] + half[1], c[2] + half[2]],
        )
    }

    /// First-order signed distance estimate phi/|grad phi| (exact for disks
    /// and balls). Negative inside.
    pub fn signed_distance(&self, p: [f64; 3]) -> f64 {
        let c = self.center();
        let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        match self {
            ConvexDomain::Disk { radius, .. } => {
                (d[0] * d[0] + d[1] * d[1]).sqrt() - radius
            }
            ConvexDomain::Ball { radius, .. } => {
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - radius
            }
            _ => {
                let phi = self.phi(p);
                let eps = 1e-6;
                let mut g2 = 0.0;
                for a in 0..self.dim() {
                    let mut pp = p;
                    let mut pm = p;
                    pp[a] += eps;
                    pm[a] -= eps;
                    let g = (self.phi(pp) - self.phi(pm)) / (2.0 * eps);
                    g2 += g * g;
                }
                phi / g2.sqrt().max(1e-30)
            }
        }
    }

    /// Distance along `dir` (unit axis vector) from `p` to the boundary
    /// crossing, if one exists within `max_dist`. Bisection on phi.
    pub fn boundary_crossing(&self, p: [f64; 3], dir: [f64; 3], max_dist: f64) -> Option<f64> {
        let at = |s: f64| {
            self.phi([p[0] + s * dir[0], p[1] + s * dir[1], p[2] + s * dir[2]])
        };
        if at(0.0) >= 0.0 {
            return None;
        }
        // find a bracketing endpoint
        let mut hi = max_dist;
        if at(hi) < 0.0 {
            return None;
        }
        let mut lo = 0.0;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if at(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }
}

/// Per-node classification. "Inside" nodes are Interior or BoundaryAdjacent;
/// boundary-adjacent nodes are inside nodes with at least one exterior axis
/// neighbor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeClass {
    Exterior,
    BoundaryAdjacent,
    Interior,
}

/// Uniform Cartesian grid with node masks over a convex domain.
#[derive(Debug)]
pub struct Grid {
    pub dim: usize,
    pub h: f64,
    pub origin: [f64; 3],
    /// Node counts per axis (n[2] = 1 in 2D).
    pub n: [usize; 3],
    pub class: Vec<NodeClass>,
    pub domain: ConvexDomain,
}

pub const AXES: [[isize; 3]; 3] = [[1, 0, 0], [0, 1, 0], [0, 0, 1]];

impl Grid {
    pub fn len(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.n[1] + j) * self.n[0] + i
    }

    #[inline]
    pub fn ijk(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.n[0];
        let j = (idx / self.n[0]) % self.n[1];
        let k = idx / (self.n[0] * self.n[1]);
        [i, j, k]
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [f64; 3] {
        let [i, j, k] = self.ijk(idx);
        [
            self.origin[0] + i as f64 * self.h,
            self.origin[1] + j as f64 * self.h,
            self.origin[2] + k as f64 * self.h,
        ]
    }

    /// Neighbor index offset by `step` nodes along `axis`; None if off-grid.
    #[inline]
    pub fn shift(&self, idx: usize, axis: usize, step: isize) -> Option<usize> {
        let [i, j, k] = self.ijk(idx);
        let mut c = [i as isize, j as isize, k as isize];
        c[axis] += step;
        if c[0] < 0
            || c[1] < 0
            || c[2] < 0
            || c[0] >= self.n[0] as isize
            || c[1] >= self.n[1] as isize
            || c[2] >= self.n[2] as isize
        {
            None
        } else {
            Some(self.idx(c[0] as usize, c[1] as usize, c[2] as usize))
        }
    }

    #[inline]
    pub fn is_inside(&self, idx: usize) -> bool {
        self.class[idx] != NodeClass::Exterior
    }

    /// All inside nodes (interior + boundary-adjacent), ascending.
    pub fn inside_nodes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_inside(i)).collect()
    }

    /// Nearest grid node to a point.
    pub fn nearest_node(&self, p: [f64; 3]) -> usize {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.h).round();
            c[a] = f.clamp(0.0, (self.n[a] - 1) as f64) as usize;
        }
        self.idx(c[0], c[1], c[2])
    }

    /// Cell volume h^dim.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    /// True when every node of the full 3^dim box around `idx` is inside.
    pub fn has_full_box(&self, idx: usize) -> bool {
        let [i, j, k] = self.ijk(idx);
        let kr = if self.dim == 3 { 1isize } else { 0 };
        for dk in -kr..=kr {
            for dj in -1isize..=1 {
                for di in -1isize..=1 {
                    let (ci, cj, ck) = (i as isize + di, j as isize + dj, k as isize + dk);
                    if ci < 0
                        || cj < 0
                        || ck < 0
                        || ci >= self.n[0] as isize
                        || cj >= self.n[1] as isize
                        || ck >= self.n[2] as isize
                    {
                        return false;
                    }
                    if !self.is_inside(self.idx(ci as usize, cj as usize, ck as usize)) {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// Build a grid over the domain with spacing `h`. Fails when `h` is too
/// coarse: the precondition is `h < inradius/4` and at least 8 interior
/// nodes per axis.
pub fn build_grid(domain: &ConvexDomain, h: f64) -> Result<Arc<Grid>> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("grid spacing must be positive, got {h}")));
    }
    if h >= domain.inradius() / 4.0 {
        return Err(Error::Config(format!(
            "grid spacing h={h} too coarse for domain with inradius {}",
            domain.inradius()
        )));
    }
    let dim = domain.dim();
    let (lo, hi) = domain.bbox();
    let pad = 2.0 * h;
    let mut origin = [0.0; 3];
    let mut n = [1usize; 3];
    for a in 0..dim {
        // align the origin to the lattice h*Z so that lattice-aligned points
        // (domain centers, poles at rational coordinates) land on nodes and
        // dyadic refinements nest
        origin[a] = (((lo[a] - pad) / h).floor()) * h;
        let ext = (hi[a] + pad) - origin[a];
        n[a] = (ext / h).floor() as usize + 1;
    }
    let mut grid = Grid {
        dim,
        h,
        origin,
        n,
        class: vec![NodeClass::Exterior; n[0] * n[1] * n[2]],
        domain: domain.clone(),
    };
    for idx in 0..grid.len() {
        if domain.phi(grid.coords(idx)) < 0.0 {
            grid.class[idx] = NodeClass::Interior;
        }
    }
    // mark inside nodes with an exterior axis neighbor
    let inside: Vec<bool> = grid.class.iter().map(|&c| c != NodeClass::Exterior).collect();
    for idx in 0..grid.len() {
        if !inside[idx] {
            continue;
        }
        let mut adjacent = false;
        for axis in 0..dim {
            for step in [-1isize, 1] {
                match grid.shift(idx, axis, step) {
                    Some(nb) if inside[nb] => {}
                    _ => adjacent = true,
                }
            }
        }
        if adjacent {
            grid.class[idx] = NodeClass::BoundaryAdjacent;
        }
    }
    // coarseness check: interior span per axis
    for a in 0..dim {
        let mut max_run = 0usize;
        match dim {
            2 => {
                for j in 0..grid.n[1 - a] {
                    let mut run = 0;
                    for i in 0..grid.n[a] {
                        let idx = if a == 0 { grid.idx(i, j, 0) } else { grid.idx(j, i, 0) };
                        if grid.is_inside(idx) {
                            run += 1;
                            max_run = max_run.max(run);
                        } else {
                            run = 0;
                        }
                    }
                }
            }
            _ => {
                // sample the line through the domain center
                let c = grid.nearest_node(domain.center());
                let [ci, cj, ck] = grid.ijk(c);
                let mut run = 0;
                for i in 0..grid.n[a] {
                    let idx = match a {
                        0 => grid.idx(i, cj, ck),
                        1 => grid.idx(ci, i, ck),
                        _ => grid.idx(ci, cj, i),
                    };
                    if grid.is_inside(idx) {
                        run += 1;
                        max_run = max_run.max(run);
                    } else {
                        run = 0;
                    }
                }
            }
        }
        if max_run < 8 {
            return Err(Error::Config(format!(
                "grid too coarse: only {max_run} interior nodes along axis {a} (need >= 8)"
            )));
        }
    }
    Ok(Arc::new(grid))
}

/// A set of grid nodes with O(1) membership.
#[derive(Debug, Clone)]
pub struct NodeSet {
    mask: Vec<bool>,
    nodes: Vec<usize>,
}

impl NodeSet {
    pub fn from_mask(mask: Vec<bool>) -> Self {
        let nodes = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        NodeSet { mask, nodes }
    }

    pub fn from_nodes(len: usize, nodes: Vec<usize>) -> Self {
        let mut mask = vec![false; len];
        for &i in &nodes {
            mask[i] = true;
        }
        let mut nodes = nodes;
        nodes.sort_unstable();
        nodes.dedup();
        NodeSet { mask, nodes }
    }

    #[inline]
    pub fn contains(&self, idx: usize) -> bool {
        self.mask[idx]
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_subset_of(&self, other: &NodeSet) -> bool {
        self.nodes.iter().all(|&i| other.contains(i))
    }

    /// Nodes of the set with at least one axis neighbor outside the set.
    pub fn boundary_ring(&self, grid: &Grid) -> Vec<usize> {
        self.nodes
            .iter()
            .copied()
            .filter(|&idx| {
                (0..grid.dim).any(|axis| {
                    [-1isize, 1].iter().any(|&s| match grid.shift(idx, axis, s) {
                        Some(nb) => !self.contains(nb),
                        None => true,
                    })
                })
            })
            .collect()
    }
}

/// Scalar field on a grid; NaN outside the domain by convention.
#[derive(Debug, Clone)]
pub struct ScalarField {
    pub grid: Arc<Grid>,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn constant(grid: &Arc<Grid>, v: f64) -> Self {
        let values = grid
            .class
            .iter()
            .map(|&c| if c == NodeClass::Exterior { f64::NAN } else { v })
            .collect();
        ScalarField { grid: Arc::clone(grid), values }
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn([f64; 3]) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|idx| {
                if grid.is_inside(idx) {
                    f(grid.coords(idx))
                } else {
                    f64::NAN
                }
            })
            .collect();
        ScalarField { grid: Arc::clone(grid), values }
    }

    /// Like `from_fn` but also defined on exterior nodes (used for level
    /// functions that need values on both sides of a boundary).
    pub fn from_fn_everywhere(grid: &Arc<Grid>, f: impl Fn([f64; 3]) -> f64) -> Self {
        let values = (0..grid.len()).map(|idx| f(grid.coords(idx))).collect();
        ScalarField { grid: Arc::clone(grid), values }
    }

    #[inline]
    pub fn get(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    /// Multilinear interpolation at a point; requires every corner of the
    /// containing cell to hold a finite value.
    pub fn interp(&self, p: [f64; 3]) -> Option<f64> {
        let grid = &self.grid;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..grid.dim {
            let s = (p[a] - grid.origin[a]) / grid.h;
            let i = s.floor();
            if i < 0.0 || i as usize + 1 >= grid.n[a] {
                return None;
            }
            base[a] = i as usize;
            frac[a] = s - i;
        }
        let mut acc = 0.0;
        let corners = if grid.dim == 2 { 4 } else { 8 };
        for c in 0..corners {
            let mut w = 1.0;
            let mut ijk = base;
            for a in 0..grid.dim {
                if (c >> a) & 1 == 1 {
                    ijk[a] += 1;
                    w *= frac[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            let v = self.values[grid.idx(ijk[0], ijk[1], ijk[2])];
            if !v.is_finite() {
                return None;
            }
            acc += w * v;
        }
        Some(acc)
    }

    /// Check the field invariant: finite on all inside nodes.
    pub fn assert_finite_inside(&self) -> Result<()> {
        for idx in 0..self.grid.len() {
            if self.grid.is_inside(idx) && !self.values[idx].is_finite() {
                return Err(Error::Domain(format!(
                    "field not finite at inside node {idx}"
                )));
            }
        }
        Ok(())
    }
}

/// Vector field (dim components per node).
#[derive(Debug, Clone)]
pub struct VectorField {
    pub grid: Arc<Grid>,
    pub comps: Vec<f64>, // stride = dim
}

impl VectorField {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        VectorField {
            grid: Arc::clone(grid),
            comps: vec![f64::NAN; grid.len() * grid.dim],
        }
    }

    #[inline]
    pub fn get(&self, idx: usize) -> [f64; 3] {
        let d = self.grid.dim;
        let mut v = [0.0; 3];
        for a in 0..d {
            v[a] = self.comps[idx * d + a];
        }
        v
    }

    #[inline]
    pub fn set(&mut self, idx: usize, v: [f64; 3]) {
        let d = self.grid.dim;
        for a in 0..d {
            self.comps[idx * d + a] = v[a];
        }
    }

    #[inline]
    pub fn magnitude(&self, idx: usize) -> f64 {
        let v = self.get(idx);
        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
    }
}

/// Symmetric matrix field stored as the upper triangle.
/// 2D layout: [xx, yy, xy]; 3D layout: [xx, yy, zz, xy, xz, yz].
#[derive(Debug, Clone)]
pub struct MatrixField {
    pub grid: Arc<Grid>,
    pub comps: Vec<f64>,
}

impl MatrixField {
    pub fn ncomp(dim: usize) -> usize {
        if dim == 2 { 3 } else { 6 }
    }

    pub fn zeros(grid: &Arc<Grid>) -> Self {
        MatrixField {
            grid: Arc::clone(grid),
            comps: vec![f64::NAN; grid.len() * Self::ncomp(grid.dim)],
        }
    }

    #[inline]
    pub fn get(&self, idx: usize) -> SymMat {
        let nc = Self::ncomp(self.grid.dim);
        let s = &self.comps[idx * nc..idx * nc + nc];
        if self.grid.dim == 2 {
            SymMat { dim: 2, m: [s[0], s[1], 0.0, s[2], 0.0, 0.0] }
        } else {
            SymMat { dim: 3, m: [s[0], s[1], s[2], s[3], s[4], s[5]] }
        }
    }

    #[inline]
    pub fn set(&mut self, idx: usize, m: SymMat) {
        let nc = Self::ncomp(self.grid.dim);
        let s = &mut self.comps[idx * nc..idx * nc + nc];
        if self.grid.dim == 2 {
            s[0] = m.m[0];
            s[1] = m.m[1];
            s[2] = m.m[3];
        } else {
            s.copy_from_slice(&m.m);
        }
    }
}

/// Small symmetric matrix: diagonal [0..dim], then off-diagonals xy, xz, yz.
#[derive(Debug, Clone, Copy)]
pub struct SymMat {
    pub dim: usize,
    /// [xx, yy, zz, xy, xz, yz] (zz, xz, yz unused in 2D).
    pub m: [f64; 6],
}

impl SymMat {
    pub fn identity(dim: usize) -> Self {
        let mut m = [0.0; 6];
        for a in 0..dim {
            m[a] = 1.0;
        }
        SymMat { dim, m }
    }

    #[inline]
    pub fn entry(&self, a: usize, b: usize) -> f64 {
        if a == b {
            self.m[a]
        } else {
            match (a.min(b), a.max(b)) {
                (0, 1) => self.m[3],
                (0, 2) => self.m[4],
                (1, 2) => self.m[5],
                _ => unreachable!(),
            }
        }
    }

    #[inline]
    pub fn set_entry(&mut self, a: usize, b: usize, v: f64) {
        if a == b {
            self.m[a] = v;
        } else {
            match (a.min(b), a.max(b)) {
                (0, 1) => self.m[3] = v,
                (0, 2) => self.m[4] = v,
                (1, 2) => self.m[5] = v,
                _ => unreachable!(),
            }
        }
    }

    pub fn det(&self) -> f64 {
        if self.dim == 2 {
            self.m[0] * self.m[1] - self.m[3] * self.m[3]
        } else {
            let (a, b, c) = (self.m[0], self.m[1], self.m[2]);
            let (d, e, f) = (self.m[3], self.m[4], self.m[5]);
            a * (b * c - f * f) - d * (d * c - f * e) + e * (d * f - b * e)
        }
    }

    pub fn trace(&self) -> f64 {
        self.m[..self.dim].iter().sum()
    }

    /// Cofactor matrix (transposed adjugate; equals the adjugate for
    /// symmetric input): `cof(M) * M = det(M) * I`.
    pub fn cofactor(&self) -> SymMat {
        let mut out = SymMat { dim: self.dim, m: [0.0; 6] };
        if self.dim == 2 {
            out.m[0] = self.m[1];
            out.m[1] = self.m[0];
            out.m[3] = -self.m[3];
        } else {
            let (a, b, c) = (self.m[0], self.m[1], self.m[2]);
            let (d, e, f) = (self.m[3], self.m[4], self.m[5]);
            out.m[0] = b * c - f * f;
            out.m[1] = a * c - e * e;
            out.m[2] = a * b - d * d;
            out.m[3] = -(d * c - f * e);
            out.m[4] = d * f - b * e;
            out.m[5] = -(a * f - d * e);
        }
        out
    }

    /// M v for a dim-vector.
    pub fn mul_vec(&self, v: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for a in 0..self.dim {
            for b in 0..self.dim {
                out[a] += self.entry(a, b) * v[b];
            }
        }
        out
    }

    pub fn quad_form(&self, v: [f64; 3]) -> f64 {
        let mv = self.mul_vec(v);
        (0..self.dim).map(|a| v[a] * mv[a]).sum()
    }

    /// Eigenvalues, ascending. Closed form in 2D, Jacobi rotations in 3D.
    pub fn eigenvalues(&self) -> [f64; 3] {
        if self.dim == 2 {
            let (a, b, d) = (self.m[0], self.m[1], self.m[3]);
            let t = 0.5 * (a + b);
            let r = (0.25 * (a - b) * (a - b) + d * d).sqrt();
            [t - r, t + r, 0.0]
        } else {
            let (evals, _) = self.jacobi_eigen();
            evals
        }
    }

    /// Eigen-decomposition by cyclic Jacobi rotations (3D path; in 2D one
    /// rotation is exact). Returns (eigenvalues ascending, column
    /// eigenvectors).
    pub fn jacobi_eigen(&self) -> ([f64; 3], [[f64; 3]; 3]) {
        let n = self.dim;
        let mut a = [[0.0f64; 3]; 3];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = self.entry(i, j);
            }
        }
        let mut v = [[0.0f64; 3]; 3];
        for (i, row) in v.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for _sweep in 0..50 {
            let mut off = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    off += a[i][j] * a[i][j];
                }
            }
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = v[k][p];
                        let vkq = v[k][q];
                        v[k][p] = c * vkp - s * vkq;
                        v[k][q] = s * vkp + c * vkq;
                    }
                }
            }
        }
        let mut evals = [0.0; 3];
        for i in 0..n {
            evals[i] = a[i][i];
        }
        // sort ascending, permuting eigenvectors alongside
        let mut order = [0usize, 1, 2];
        order[..n].sort_by(|&i, &j| evals[i].total_cmp(&evals[j]));
        let mut sorted = [0.0; 3];
        let mut vecs = [[0.0; 3]; 3];
        for (slot, &src) in order[..n].iter().enumerate() {
            sorted[slot] = evals[src];
            for k in 0..n {
                vecs[k][slot] = v[k][src];
            }
        }
        (sorted, vecs)
    }

    /// Project eigenvalues to be at least `floor` (convexity safeguard).
    pub fn clamp_eigenvalues(&self, floor: f64) -> SymMat {
        let (evals, vecs) = self.jacobi_eigen();
        if evals[..self.dim].iter().all(|&e| e >= floor) {
            return *self;
        }
        let mut out = SymMat { dim: self.dim, m: [0.0; 6] };
        for a in 0..self.dim {
            for b in a..self.dim {
                let mut s = 0.0;
                for k in 0..self.dim {
                    s += evals[k].max(floor) * vecs[a][k] * vecs[b][k];
                }
                out.set_entry(a, b, s);
            }
        }
        out
    }
}

/// Midpoint-rule integral of a field over a node set: h^dim * sum.
/// Errors when the region touches an exterior node.
pub fn integrate_region(field: &ScalarField, region: &NodeSet) -> Result<f64> {
    let grid = &field.grid;
    let mut sum = 0.0;
    for &idx in region.nodes() {
        if !grid.is_inside(idx) {
            return Err(Error::Domain(format!(
                "region contains exterior node {idx}"
            )));
        }
        sum += field.get(idx);
    }
    Ok(sum * grid.cell_volume())
}

/// Which side of the level set the coarea shell is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShellSide {
    /// `level < level_fn < level + delta` (outside the sublevel set).
    Outer,
    /// `level - delta < level_fn < level` (inside).
    Inner,
    /// `level - delta/2 < level_fn < level + delta/2`.
    Centered,
}

/// Gradient magnitude of a nodal field by central differences, one-sided at
/// nodes missing an inside neighbor. NaN where no difference is available.
pub fn gradient_magnitude(field: &ScalarField) -> ScalarField {
    let grid = &field.grid;
    let h = grid.h;
    let mut out = ScalarField::constant(grid, f64::NAN);
    for idx in 0..grid.len() {
        if !grid.is_inside(idx) {
            continue;
        }
        let mut g2 = 0.0;
        let mut ok = true;
        for axis in 0..grid.dim {
            let fwd = grid
                .shift(idx, axis, 1)
                .filter(|&n| grid.is_inside(n) && field.get(n).is_finite());
            let bwd = grid
                .shift(idx, axis, -1)
                .filter(|&n| grid.is_inside(n) && field.get(n).is_finite());
            let g = match (bwd, fwd) {
                (Some(b), Some(f)) => (field.get(f) - field.get(b)) / (2.0 * h),
                (None, Some(f)) => (field.get(f) - field.get(idx)) / h,
                (Some(b), None) => (field.get(idx) - field.get(b)) / h,
                (None, None) => {
                    ok = false;
                    0.0
                }
            };
            g2 += g * g;
        }
        if ok {
            out.values[idx] = g2.sqrt();
        }
    }
    out
}

/// Thin-shell coarea approximation of a surface integral over the level set
/// `{level_fn = level}`:
/// `int_{level set} density dS ~ (1/delta) int_shell density * |grad level_fn|`.
///
/// Shell width is `3h * max |grad level_fn|` over the shell (recorded by the
/// caller when needed); the precondition `delta >= 2h*max|grad|` always holds
/// by construction.
pub fn level_surface_integral(
    density: &ScalarField,
    level_fn: &ScalarField,
    level: f64,
    side: ShellSide,
) -> Result<f64> {
    level_surface_integral_with(density, level_fn, level, side, 1.0)
}

/// As `level_surface_integral` with a shell-width multiplier. Densities that
/// are constant across levels (unit source fluxes) gain from wider one-sided
/// shells: the bias stays zero while the boundary-ring noise is diluted.
pub fn level_surface_integral_with(
    density: &ScalarField,
    level_fn: &ScalarField,
    level: f64,
    side: ShellSide,
    width_mult: f64,
) -> Result<f64> {
    let grid = &density.grid;
    let grad = gradient_magnitude(level_fn);
    // first pass: max |grad| near the level set (within 4h in level value)
    let mut gmax: f64 = 0.0;
    for idx in 0..grid.len() {
        if !grid.is_inside(idx) {
            continue;
        }
        let w = level_fn.get(idx);
        let g = grad.get(idx);
        if w.is_finite() && g.is_finite() && (w - level).abs() <= 4.0 * grid.h * g.max(1.0) {
            gmax = gmax.max(g);
        }
    }
    if gmax <= 0.0 {
        return Err(Error::Degenerate(
            "level function gradient vanishes near the level set".into(),
        ));
    }
    let delta = 3.0 * grid.h * gmax * width_mult;
    let (lo, hi) = match side {
        ShellSide::Outer => (level, level + delta),
        ShellSide::Inner => (level - delta, level),
        ShellSide::Centered => (level - 0.5 * delta, level + 0.5 * delta),
    };
    // Smooth kernels vanishing at the window edges: node counts of thin
    // lattice bands fluctuate at the percent level, and a kernel that fades
    // at the edges removes that quantization noise. The centered cosine
    // kernel also has vanishing first moment (second order in delta); the
    // one-sided sine bump keeps the flat window's O(delta) moment bias but
    // loses the count noise (for level-constant fluxes the bias is zero and
    // the estimate is clean).
    let weight = |w: f64| -> f64 {
        use std::f64::consts::PI;
        match side {
            ShellSide::Centered => {
                let tau = (w - level) / delta; // in (-1/2, 1/2)
                1.0 + (2.0 * PI * tau).cos()
            }
            ShellSide::Outer => {
                let s = (w - level) / delta; // in (0, 1)
                0.5 * PI * (PI * s).sin()
            }
            ShellSide::Inner => {
                let s = (level - w) / delta;
                0.5 * PI * (PI * s).sin()
            }
        }
    };
    let mut sum = 0.0;
    let mut count = 0usize;
    for idx in 0..grid.len() {
        if !grid.is_inside(idx) {
            continue;
        }
        let w = level_fn.get(idx);
        if !(w > lo && w < hi) {
            continue;
        }
        let d = density.get(idx);
        let g = grad.get(idx);
        if !d.is_finite() || !g.is_finite() {
            return Err(Error::Degenerate(format!(
                "non-finite density or gradient inside the coarea shell at node {idx}"
            )));
        }
        sum += d * g * weight(w);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Degenerate(format!(
            "empty coarea shell at level {level} (width {delta:.3e})"
        )));
    }
    Ok(sum * grid.cell_volume() / delta)
}
