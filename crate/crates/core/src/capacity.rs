//! Variational capacity for the linearized operator: equilibrium potentials,
//! the explicit cutoff upper bounds, capacity-Green reciprocity, and the
//! level-set capacity law.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::{integrate_region, NodeSet, ScalarField};
use crate::green::operator::{
    assemble_operator, DirichletStats, GreenFunction, Region,
};
use crate::sections::build_section;
use crate::solver::PotentialState;

/// Equilibrium capacity `cap(K, V) = Q_u(Phi)` with the capacitary potential.
pub struct CapacityResult {
    pub value: f64,
    /// Potential over the lattice: 1 on K, equilibrium values on V \ K, 0
    /// outside V.
    pub potential: ScalarField,
    /// Discrete capacitary mass: flux into K; equals `value` up to the
    /// linear-solve residual.
    pub mass: f64,
    pub k_nodes: NodeSet,
    pub v_nodes: NodeSet,
    pub stats: Option<DirichletStats>,
    pub potential_min: f64,
    pub potential_max: f64,
}

/// Capacity from level descriptions of K and V (negative inside each).
/// Both boundaries get exact-crossing legs, so the value is second order.
pub fn capacity_from_levels(
    state: &PotentialState,
    k_level: &ScalarField,
    v_level: &ScalarField,
) -> Result<CapacityResult> {
    let grid = &state.grid;
    let k_nodes = NodeSet::from_nodes(
        grid.len(),
        (0..grid.len())
            .filter(|&i| grid.is_inside(i) && k_level.get(i) < 0.0)
            .collect(),
    );
    let v_nodes = NodeSet::from_nodes(
        grid.len(),
        (0..grid.len())
            .filter(|&i| grid.is_inside(i) && v_level.get(i) < 0.0)
            .collect(),
    );
    if k_nodes.is_empty() {
        return Err(Error::Parameter("capacity: K is empty".into()));
    }
    if !k_nodes.is_subset_of(&v_nodes) {
        return Err(Error::Domain("capacity: K is not contained in V".into()));
    }
    // K must sit inside the interior of V
    let ring = v_nodes.boundary_ring(grid);
    if ring.iter().any(|&i| k_nodes.contains(i)) {
        return Err(Error::Domain("capacity: K touches the boundary ring of V".into()));
    }

    // annulus V \ K: inside V and outside K
    let mut k_flip = k_level.clone();
    for v in k_flip.values.iter_mut() {
        *v = -*v;
    }
    let annulus = match Region::from_levels(grid, &[v_level, &k_flip]) {
        Ok(r) => r,
        Err(Error::Domain(_)) => {
            // K fills the interior of V: Phi = 1, energy is the
            // boundary-layer flux of the indicator
            return capacity_of_indicator(state, k_nodes, v_nodes, v_level);
        }
        Err(e) => return Err(e),
    };
    let op = assemble_operator(state, annulus)?;
    let bc = |label: u8, _p: [f64; 3]| if label == 1 { 1.0 } else { 0.0 };
    let rhs = vec![0.0; op.n()];
    let (mut phi, stats) = op.solve_dirichlet(&rhs, &[], &bc)?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &idx in op.unknowns.iter() {
        lo = lo.min(phi.get(idx));
        hi = hi.max(phi.get(idx));
    }
    let value = op.energy(&phi, &bc);
    let mass = op
        .boundary_flux(&phi, &bc)
        .into_iter()
        .filter(|&(label, _)| label == 1)
        .map(|(_, f)| f)
        .sum();
    for &idx in k_nodes.nodes() {
        phi.values[idx] = 1.0;
    }
    Ok(CapacityResult {
        value,
        potential: phi,
        mass,
        k_nodes,
        v_nodes,
        stats: Some(stats),
        potential_min: lo,
        potential_max: hi,
    })
}

fn capacity_of_indicator(
    state: &PotentialState,
    k_nodes: NodeSet,
    v_nodes: NodeSet,
    v_level: &ScalarField,
) -> Result<CapacityResult> {
    let grid = &state.grid;
    let region = Region::from_levels(grid, &[v_level])?;
    let op = assemble_operator(state, region)?;
    let mut phi = ScalarField { grid: Arc::clone(grid), values: vec![0.0; grid.len()] };
    for &idx in op.unknowns.iter() {
        phi.values[idx] = 1.0;
    }
    let value = op.energy(&phi, &|_, _| 0.0);
    Ok(CapacityResult {
        value,
        potential: phi,
        mass: value,
        k_nodes,
        v_nodes,
        stats: None,
        potential_min: 1.0,
        potential_max: 1.0,
    })
}

/// Capacity of plain node sets (no level information: one-cell boundary
/// resolution). `K` must be a nonempty subset of the interior of `V`.
pub fn capacity_on_nodes(
    state: &PotentialState,
    k: &NodeSet,
    v: &NodeSet,
) -> Result<CapacityResult> {
    let grid = &state.grid;
    let indicator = |s: &NodeSet| ScalarField {
        grid: Arc::clone(grid),
        values: (0..grid.len())
            .map(|i| if s.contains(i) { -0.5 } else { 0.5 })
            .collect(),
    };
    capacity_from_levels(state, &indicator(k), &indicator(v))
}

/// Capacity of a closed section `S(x0, t)` within the set `{v_level < 0}`.
pub fn section_capacity(
    state: &PotentialState,
    x0: usize,
    t: f64,
    v_level: &ScalarField,
) -> Result<CapacityResult> {
    let k_level = section_level(state, x0, t);
    capacity_from_levels(state, &k_level, v_level)
}

/// Level field of a convex shape usable as a V description.
pub fn shape_level(state: &PotentialState, shape: &crate::geom::ConvexDomain) -> ScalarField {
    ScalarField::from_fn_everywhere(&state.grid, |p| shape.phi(p))
}

/// Level field of a section `S(x0, t)`.
pub fn section_level(state: &PotentialState, x0: usize, t: f64) -> ScalarField {
    let mut w = state.height_field(x0);
    for v in w.values.iter_mut() {
        *v -= t;
    }
    w
}

/// Cutoff energy against the direct capacity and the measure-side bound.
#[derive(Debug, Clone, Serialize)]
pub struct CutoffReport {
    pub t: f64,
    pub energy: f64,
    /// Direct capacity of (closure of S(t), S(2t) resp. S(sqrt t)).
    pub capacity: f64,
    /// The measure-side expression the energy is compared against.
    pub bound_expr: f64,
}

/// The explicit 3D cutoff: 1 below t, the s^{-1/2} interpolant on [t, 2t],
/// 0 above, evaluated through the face quadratic form.
pub fn cutoff_energy_3d(state: &PotentialState, x0: usize, t: f64) -> Result<CutoffReport> {
    if state.dim() != 3 {
        return Err(Error::Parameter("cutoff_energy_3d requires a 3D state".into()));
    }
    if !(t > 0.0) {
        return Err(Error::Parameter(format!("height must be positive, got {t}")));
    }
    // hypothesis: S(x0, 2t) compactly contained
    build_section(state, x0, 2.0 * t)?;
    let s_t = build_section(state, x0, t)?;
    let c = t.sqrt() / (1.0 - 0.5f64.sqrt());
    let gamma = |s: f64| -> f64 {
        if s <= t {
            1.0
        } else if s >= 2.0 * t {
            0.0
        } else {
            c * (1.0 / s.sqrt() - 1.0 / (2.0 * t).sqrt())
        }
    };
    debug_assert!((gamma(t) - 1.0).abs() < 1e-12);
    debug_assert!(gamma(2.0 * t).abs() < 1e-12);
    let energy = cutoff_energy(state, x0, 2.0 * t, gamma)?;
    let v_level = section_level(state, x0, 2.0 * t);
    let cap = section_capacity(state, x0, t, &v_level)?;
    let bound_expr = s_t.measure_mu / t;
    Ok(CutoffReport { t, energy, capacity: cap.value, bound_expr })
}

/// The logarithmic 2D cutoff `gamma(s) = 2 log s / log t - 1` on [t, sqrt t].
/// The measure side `(8/|log t|^2) int_t^{sqrt t} mu(S(x0,s)) ds/s^2` is
/// evaluated by log-spaced trapezoid quadrature; the energy equals it up to
/// quadrature error.
pub fn cutoff_energy_2d(state: &PotentialState, x0: usize, t: f64) -> Result<CutoffReport> {
    if state.dim() != 2 {
        return Err(Error::Parameter("cutoff_energy_2d requires a 2D state".into()));
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Parameter(format!("height must lie in (0, 1), got {t}")));
    }
    let t_outer = t.sqrt();
    build_section(state, x0, t_outer)?; // hypothesis check
    let log_t = t.ln();
    let gamma = |s: f64| -> f64 {
        if s <= t {
            1.0
        } else if s >= t_outer {
            0.0
        } else {
            2.0 * s.ln() / log_t - 1.0
        }
    };
    let energy = cutoff_energy(state, x0, t_outer, gamma)?;
    // measure side by trapezoid on >= 32 log-spaced points
    let m = 48usize;
    let mut integral = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    for k in 0..m {
        let frac = k as f64 / (m - 1) as f64;
        let s = t * (t_outer / t).powf(frac);
        let sec = build_section(state, x0, s)?;
        let val = sec.measure_mu / (s * s);
        if let Some((s0, v0)) = prev {
            integral += 0.5 * (v0 + val) * (s - s0);
        }
        prev = Some((s, val));
    }
    let bound_expr = 8.0 / (log_t * log_t) * integral;
    let v_level = section_level(state, x0, t_outer);
    let cap = section_capacity(state, x0, t, &v_level)?;
    Ok(CutoffReport { t, energy, capacity: cap.value, bound_expr })
}

/// Face quadrature of `Q_u(gamma o w)` over the support section of height
/// `t_support` (the cutoff vanishes continuously at its boundary).
fn cutoff_energy(
    state: &PotentialState,
    x0: usize,
    t_support: f64,
    gamma: impl Fn(f64) -> f64,
) -> Result<f64> {
    let grid = &state.grid;
    let w = state.height_field(x0);
    let mut level = w.clone();
    for v in level.values.iter_mut() {
        *v -= t_support;
    }
    let region = Region::from_levels(grid, &[&level])?;
    let op = assemble_operator(state, region)?;
    let mut hfield = ScalarField { grid: Arc::clone(grid), values: vec![0.0; grid.len()] };
    for &idx in op.unknowns.iter() {
        hfield.values[idx] = gamma(w.get(idx));
    }
    Ok(op.energy(&hfield, &|_, _| 0.0))
}

/// Per-height reciprocity data: min/max of g on the section boundary times
/// the capacity of the closed section in V.
#[derive(Debug, Clone, Serialize)]
pub struct ReciprocityRow {
    pub t: f64,
    pub g_min: f64,
    pub g_max: f64,
    pub capacity: f64,
    pub sandwich_lo: f64,
    pub sandwich_hi: f64,
}

/// Verify `min g * cap <= 1 <= max g * cap` over the heights, with g the
/// Green's function of `V = {v_level < 0}` with pole x0.
pub fn reciprocity_check(
    state: &PotentialState,
    v_level: &ScalarField,
    x0: usize,
    t_list: &[f64],
) -> Result<Vec<ReciprocityRow>> {
    let grid = &state.grid;
    let v_region = Region::from_levels(grid, &[v_level])?;
    let v_nodes = v_region.nodes.clone();
    let op = assemble_operator(state, v_region)?;
    let g = op.green_function(x0)?;
    let ring = NodeSet::from_nodes(grid.len(), v_nodes.boundary_ring(grid));
    let mut rows = Vec::new();
    for &t in t_list {
        let section = build_section(state, x0, t)?;
        // hypothesis: S(x0, 2t) compactly inside V
        let s2 = build_section(state, x0, 2.0 * t)?;
        for &idx in s2.node_set.nodes() {
            if !v_nodes.contains(idx) || ring.contains(idx) {
                return Err(Error::NotCompactlyContained(format!(
                    "S(x0, 2t) escapes V at t = {t}"
                )));
            }
        }
        let (g_min, g_max) = section.boundary_values(state, &g.field);
        let cap = section_capacity(state, x0, t, v_level)?;
        rows.push(ReciprocityRow {
            t,
            g_min,
            g_max,
            capacity: cap.value,
            sandwich_lo: g_min * cap.value,
            sandwich_hi: g_max * cap.value,
        });
    }
    Ok(rows)
}

/// Capacity of the Green superlevel set `J_a = {g >= a}` in V; the continuum
/// law is `cap(J_a, V) * a = 1`.
#[derive(Debug, Clone, Serialize)]
pub struct LevelSetCapacity {
    pub a: f64,
    pub capacity: f64,
    pub product: f64,
    /// Node diameter of J_a; below 8 nodes the resolution floor is reached
    /// and the row is excluded from pass/fail.
    pub diameter_nodes: usize,
    pub resolved: bool,
}

pub fn level_set_capacity(
    state: &PotentialState,
    g: &GreenFunction,
    a: f64,
    v_level: &ScalarField,
) -> Result<LevelSetCapacity> {
    let grid = &state.grid;
    let g_max = g.field.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(a > 0.0 && a < g_max) {
        return Err(Error::Degenerate(format!(
            "level {a} outside the range (0, {g_max:.3e}) of g"
        )));
    }
    // K level: a - g < 0 inside J_a
    let k_level = ScalarField {
        grid: Arc::clone(grid),
        values: g.field.values.iter().map(|&v| a - v).collect(),
    };
    let cap = capacity_from_levels(state, &k_level, v_level)?;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for &idx in cap.k_nodes.nodes() {
        let ijk = grid.ijk(idx);
        for a in 0..3 {
            lo[a] = lo[a].min(ijk[a]);
            hi[a] = hi[a].max(ijk[a]);
        }
    }
    let diameter_nodes = (0..grid.dim)
        .map(|a| hi[a].saturating_sub(lo[a]) + 1)
        .max()
        .unwrap_or(0);
    Ok(LevelSetCapacity {
        a,
        capacity: cap.value,
        product: cap.value * a,
        diameter_nodes,
        resolved: diameter_nodes >= 8,
    })
}

/// Spot-check the variational minimality of an equilibrium potential:
/// perturbations vanishing on K and outside V cannot lower the energy.
pub fn check_minimality(
    state: &PotentialState,
    result: &CapacityResult,
    seed: u64,
    count: usize,
) -> Result<bool> {
    use rand::{Rng, SeedableRng};
    let grid = &state.grid;
    let v_region = Region::from_nodes(grid, &result.v_nodes)?;
    let op = assemble_operator(state, v_region)?;
    let base = op.energy(&result.potential, &|_, _| 0.0);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..count {
        let (kx, ky, kz): (f64, f64, f64) =
            (rng.gen_range(1.0..4.0), rng.gen_range(1.0..4.0), rng.gen_range(1.0..4.0));
        let amp: f64 = rng.gen_range(0.01..0.1);
        let mut trial = result.potential.clone();
        for &idx in result.v_nodes.nodes() {
            if result.k_nodes.contains(idx) {
                continue;
            }
            let p = grid.coords(idx);
            trial.values[idx] +=
                amp * (kx * p[0]).sin() * (ky * p[1]).cos() * (kz * p[2] + 0.3).sin();
        }
        let q = op.energy(&trial, &|_, _| 0.0);
        if q < base * (1.0 - 1e-9) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Lebesgue measure of a node set.
pub fn node_volume(state: &PotentialState, nodes: &NodeSet) -> Result<f64> {
    let one = ScalarField::constant(&state.grid, 1.0);
    integrate_region(&one, nodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{build_grid, ConvexDomain};
    use crate::solver::DensitySpec;
    use std::f64::consts::PI;

    fn radial_state_2d(h: f64, outer: f64) -> PotentialState {
        let grid = build_grid(&ConvexDomain::disk(outer), h).unwrap();
        PotentialState::from_closed_form(
            &grid,
            |p| 0.5 * (p[0] * p[0] + p[1] * p[1]),
            DensitySpec::constant(1.0),
        )
        .unwrap()
    }

    fn radial_state_3d(h: f64, outer: f64) -> PotentialState {
        let grid = build_grid(&ConvexDomain::ball(outer), h).unwrap();
        PotentialState::from_closed_form(
            &grid,
            |p| 0.5 * (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]),
            DensitySpec::constant(1.0),
        )
        .unwrap()
    }

    #[test]
    fn annulus_capacity_2d_matches_the_closed_form() {
        // cap(disk r, disk R) = 2 pi / log(R/r) for the Laplacian
        let state = radial_state_2d(1.0 / 64.0, 1.2);
        let k = shape_level(&state, &ConvexDomain::disk(0.2));
        let v = shape_level(&state, &ConvexDomain::disk(0.8));
        let cap = capacity_from_levels(&state, &k, &v).unwrap();
        let exact = 2.0 * PI / 4f64.ln();
        let rel = (cap.value - exact).abs() / exact;
        assert!(rel < 0.03, "capacity {} vs {exact} (rel {rel})", cap.value);
        // potential bounds and the discrete capacitary mass
        assert!(cap.potential_min >= -1e-10);
        assert!(cap.potential_max <= 1.0 + 1e-10);
        let mass_rel = (cap.mass - cap.value).abs() / cap.value;
        assert!(mass_rel < 1e-8, "mass {} vs energy {}", cap.mass, cap.value);
    }

    #[test]
    fn annulus_capacity_3d_matches_the_closed_form() {
        // cap(ball r, ball R) = 4 pi / (1/r - 1/R)
        let state = radial_state_3d(1.0 / 20.0, 1.2);
        let k = shape_level(&state, &ConvexDomain::ball(0.2));
        let v = shape_level(&state, &ConvexDomain::ball(0.8));
        let cap = capacity_from_levels(&state, &k, &v).unwrap();
        let exact = 4.0 * PI / (1.0 / 0.2 - 1.0 / 0.8);
        let rel = (cap.value - exact).abs() / exact;
        assert!(rel < 0.05, "capacity {} vs {exact} (rel {rel})", cap.value);
    }

    #[test]
    fn capacity_monotonicity() {
        let state = radial_state_2d(1.0 / 48.0, 1.2);
        let v = shape_level(&state, &ConvexDomain::disk(0.8));
        let c1 = capacity_from_levels(&state, &shape_level(&state, &ConvexDomain::disk(0.15)), &v)
            .unwrap();
        let c2 = capacity_from_levels(&state, &shape_level(&state, &ConvexDomain::disk(0.3)), &v)
            .unwrap();
        assert!(c1.value <= c2.value, "monotone in K: {} vs {}", c1.value, c2.value);
        // antitone in V
        let v_small = shape_level(&state, &ConvexDomain::disk(0.6));
        let c3 = capacity_from_levels(
            &state,
            &shape_level(&state, &ConvexDomain::disk(0.15)),
            &v_small,
        )
        .unwrap();
        assert!(c3.value >= c1.value);
    }

    #[test]
    fn degenerate_k_inputs() {
        let state = radial_state_2d(1.0 / 32.0, 1.2);
        let v = shape_level(&state, &ConvexDomain::disk(0.8));
        // empty K
        let empty = ScalarField::constant(&state.grid, 1.0);
        assert!(matches!(
            capacity_from_levels(&state, &empty, &v),
            Err(Error::Parameter(_))
        ));
        // K not inside V
        let big = shape_level(&state, &ConvexDomain::disk(0.9));
        assert!(matches!(
            capacity_from_levels(&state, &big, &v),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn k_filling_v_gives_the_indicator_energy() {
        // K = all of V but its boundary ring: Phi = 1 on K, and the value is
        // the boundary-layer flux energy
        let state = radial_state_2d(1.0 / 32.0, 1.2);
        let grid = &state.grid;
        let v_nodes = NodeSet::from_nodes(
            grid.len(),
            (0..grid.len())
                .filter(|&i| {
                    grid.is_inside(i) && shape_level(&state, &ConvexDomain::disk(0.5)).get(i) < 0.0
                })
                .collect(),
        );
        let ring = NodeSet::from_nodes(grid.len(), v_nodes.boundary_ring(grid));
        let k_nodes = NodeSet::from_nodes(
            grid.len(),
            v_nodes.nodes().iter().copied().filter(|&i| !ring.contains(i)).collect(),
        );
        let cap = capacity_on_nodes(&state, &k_nodes, &v_nodes).unwrap();
        assert!(cap.value.is_finite() && cap.value > 0.0);
        for &idx in k_nodes.nodes() {
            assert_eq!(cap.potential.get(idx), 1.0);
        }
    }

    #[test]
    fn minimality_of_the_equilibrium_potential() {
        let state = radial_state_2d(1.0 / 32.0, 1.2);
        let k = shape_level(&state, &ConvexDomain::disk(0.2));
        let v = shape_level(&state, &ConvexDomain::disk(0.8));
        let cap = capacity_from_levels(&state, &k, &v).unwrap();
        assert!(check_minimality(&state, &cap, 42, 5).unwrap());
    }

    #[test]
    fn logarithmic_cutoff_is_optimal_for_the_radial_state() {
        // energy = 8 pi / |log t|, equal to both the measure expression and
        // the direct capacity of (closure S(t), S(sqrt t))
        let state = radial_state_2d(1.0 / 64.0, 1.2);
        let x0 = state.grid.nearest_node([0.0, 0.0, 0.0]);
        let t = 0.01;
        let rep = cutoff_energy_2d(&state, x0, t).unwrap();
        let exact = 8.0 * PI / (t.ln().abs());
        assert!(
            (rep.energy - exact).abs() / exact < 0.03,
            "energy {} vs 8pi/|log t| = {exact}",
            rep.energy
        );
        assert!(
            (rep.bound_expr - exact).abs() / exact < 0.03,
            "measure side {} vs {exact}",
            rep.bound_expr
        );
        assert!(
            (rep.capacity - rep.energy).abs() / rep.energy < 0.05,
            "capacity {} vs energy {}",
            rep.capacity,
            rep.energy
        );
        // admissibility: the cutoff energy dominates the capacity
        assert!(rep.energy >= rep.capacity * (1.0 - 0.05));
        assert!(matches!(cutoff_energy_2d(&state, x0, 1.5), Err(Error::Parameter(_))));
    }

    #[test]
    fn radial_cutoff_3d_matches_capacity() {
        // the s^{-1/2} profile is the radial equilibrium shape: its energy
        // equals cap(S(t), S(2t)) for the paraboloid
        let state = radial_state_3d(1.0 / 16.0, 1.2);
        let x0 = state.grid.nearest_node([0.0, 0.0, 0.0]);
        let t = 0.08;
        let rep = cutoff_energy_3d(&state, x0, t).unwrap();
        let ratio = rep.energy / rep.capacity;
        assert!(
            (0.9..=1.15).contains(&ratio),
            "energy {} vs capacity {} (ratio {ratio})",
            rep.energy,
            rep.capacity
        );
        // closed form: cap = 4 pi / (1/sqrt(2t) - 1/sqrt(4t))
        let exact = 4.0 * PI / (1.0 / (2.0 * t).sqrt() - 1.0 / (4.0 * t).sqrt());
        assert!(
            (rep.energy - exact).abs() / exact < 0.08,
            "energy {} vs exact {exact}",
            rep.energy
        );
        let r = rep.energy / rep.bound_expr;
        assert!(r > 0.0 && r < 50.0);
    }

    #[test]
    fn reciprocity_sandwich_radial() {
        let state = radial_state_2d(1.0 / 64.0, 1.4);
        let x0 = state.grid.nearest_node([0.0, 0.0, 0.0]);
        let v = shape_level(&state, &ConvexDomain::disk(1.0));
        let rows = reciprocity_check(&state, &v, x0, &[0.02, 0.04, 0.08]).unwrap();
        for row in rows {
            assert!(
                (row.sandwich_lo - 1.0).abs() < 0.05,
                "t={}: lo {}",
                row.t,
                row.sandwich_lo
            );
            assert!((row.sandwich_hi - 1.0).abs() < 0.05);
            assert!(row.sandwich_lo <= row.sandwich_hi);
        }
    }

    #[test]
    fn level_set_capacity_law() {
        let state = radial_state_2d(1.0 / 64.0, 1.2);
        let x0 = state.grid.nearest_node([0.0, 0.0, 0.0]);
        let v = shape_level(&state, &ConvexDomain::disk(0.8));
        let region = Region::from_levels(&state.grid, &[&v]).unwrap();
        let op = assemble_operator(&state, region).unwrap();
        let g = op.green_function(x0).unwrap();
        // a = (1/2pi) log 2: J_a = disk of radius 0.4, cap = 2pi/log 2
        let a = 2f64.ln() / (2.0 * PI);
        let rep = level_set_capacity(&state, &g, a, &v).unwrap();
        assert!(rep.resolved);
        assert!(
            (rep.product - 1.0).abs() < 0.03,
            "cap * a = {} (cap {})",
            rep.product,
            rep.capacity
        );
        // doubling a halves the capacity
        let rep2 = level_set_capacity(&state, &g, 2.0 * a, &v).unwrap();
        assert!(
            (rep2.capacity / rep.capacity - 0.5).abs() < 0.045,
            "cap ratio {}",
            rep2.capacity / rep.capacity
        );
        // level beyond max g
        assert!(level_set_capacity(&state, &g, 1e9, &v).is_err());
    }
}
