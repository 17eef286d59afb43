//! Sections `S_u(x0, t)` of a convex potential: node sets, dilations about
//! the center of mass, volume-growth and doubling measurements.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fit::{FitModel, FitReport};
use crate::geom::{integrate_region, NodeSet, ScalarField};
use crate::solver::PotentialState;

/// A section `S_u(x0, t) = {u < u(x0) + grad u(x0).(x - x0) + t}` restricted
/// to grid nodes.
#[derive(Debug, Clone)]
pub struct Section {
    /// Lattice index of the (snapped) center.
    pub x0: usize,
    pub t: f64,
    pub node_set: NodeSet,
    /// h^dim * node count.
    pub volume: f64,
    /// Volume-weighted centroid.
    pub center_of_mass: [f64; 3],
    /// mu(S) = int_S f dx.
    pub measure_mu: f64,
}

/// Measured doubling constants over a section family.
#[derive(Debug, Clone, Serialize)]
pub struct DoublingParams {
    pub alpha: f64,
    pub beta: f64,
    pub beta_prime: f64,
    /// Per-height (t, beta_t, beta_prime_t) samples.
    pub table: Vec<(f64, f64, f64)>,
}

/// Volume growth fit |S(t)| ~ t^(n/2) with the measured ratio extremes.
#[derive(Debug, Clone, Serialize)]
pub struct VolumeGrowthReport {
    pub fit: FitReport,
    pub ratio_min: f64,
    pub ratio_max: f64,
}

/// Build the section of `state` at center `x0` (lattice index) and height t.
/// Fails when t <= 0 or the section is not compactly contained in the domain.
pub fn build_section(state: &PotentialState, x0: usize, t: f64) -> Result<Section> {
    if !(t > 0.0) {
        return Err(Error::Parameter(format!("section height must be positive, got {t}")));
    }
    let grid = &state.grid;
    if !grid.is_inside(x0) {
        return Err(Error::Domain(format!("section center {x0} is not an interior node")));
    }
    let w = state.height_field(x0);
    let mut nodes = Vec::new();
    for idx in 0..grid.len() {
        if grid.is_inside(idx) && w.get(idx) < t {
            nodes.push(idx);
        }
    }
    let node_set = NodeSet::from_nodes(grid.len(), nodes);
    // compactly contained: no boundary-adjacent node, and at least 2h from
    // the domain boundary (signed-distance estimate)
    for &idx in node_set.nodes() {
        if grid.class[idx] == crate::geom::NodeClass::BoundaryAdjacent {
            return Err(Error::NotCompactlyContained(format!(
                "section S(x0={x0}, t={t}) touches a boundary-adjacent node"
            )));
        }
        if grid.domain.signed_distance(grid.coords(idx)) > -2.0 * grid.h {
            return Err(Error::NotCompactlyContained(format!(
                "section S(x0={x0}, t={t}) within 2h of the domain boundary"
            )));
        }
    }
    finish_section(state, x0, t, node_set)
}

fn finish_section(
    state: &PotentialState,
    x0: usize,
    t: f64,
    node_set: NodeSet,
) -> Result<Section> {
    let grid = &state.grid;
    let volume = node_set.len() as f64 * grid.cell_volume();
    let mut com = [0.0; 3];
    for &idx in node_set.nodes() {
        let p = grid.coords(idx);
        for a in 0..3 {
            com[a] += p[a];
        }
    }
    let n = node_set.len().max(1) as f64;
    for c in com.iter_mut() {
        *c /= n;
    }
    let measure_mu = integrate_region(&state.f, &node_set)?;
    Ok(Section { x0, t, node_set, volume, center_of_mass: com, measure_mu })
}

impl Section {
    /// Grid-convexity check: along every axis line the node set is an
    /// interval (no holes).
    pub fn is_grid_convex(&self, state: &PotentialState) -> bool {
        let grid = &state.grid;
        for &start in self.node_set.nodes() {
            for axis in 0..grid.dim {
                // only check from the left end of each run
                if let Some(prev) = grid.shift(start, axis, -1) {
                    if self.node_set.contains(prev) {
                        continue;
                    }
                }
                let mut cur = start;
                let mut left_run = true;
                loop {
                    match grid.shift(cur, axis, 1) {
                        Some(next) => {
                            let inside = self.node_set.contains(next);
                            if inside && !left_run {
                                return false; // re-entered after a gap
                            }
                            if !inside {
                                left_run = false;
                            }
                            cur = next;
                        }
                        None => break,
                    }
                }
            }
        }
        true
    }

    /// Nodes of the section with an axis neighbor outside it.
    pub fn boundary_ring(&self, state: &PotentialState) -> Vec<usize> {
        self.node_set.boundary_ring(&state.grid)
    }

    /// Extremes of a field over the exact section boundary: the field is
    /// interpolated linearly to the level crossings `w = t` on outward faces.
    /// Raw ring-node extremes would sample the ragged lattice ring instead of
    /// the level set and bias steep fields near a Green pole.
    pub fn boundary_values(&self, state: &PotentialState, field: &ScalarField) -> (f64, f64) {
        let grid = &state.grid;
        let w = state.height_field(self.x0);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &i in self.node_set.nodes() {
            for axis in 0..grid.dim {
                for step in [-1isize, 1] {
                    let j = match grid.shift(i, axis, step) {
                        Some(j) if !self.node_set.contains(j) && grid.is_inside(j) => j,
                        _ => continue,
                    };
                    let (wi, wj) = (w.get(i), w.get(j));
                    if !(wi < self.t && wj >= self.t) {
                        continue;
                    }
                    let theta = ((self.t - wi) / (wj - wi)).clamp(0.0, 1.0);
                    let fi = field.get(i);
                    let fj = field.get(j);
                    if !fi.is_finite() || !fj.is_finite() {
                        continue;
                    }
                    let v = fi + theta * (fj - fi);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        (lo, hi)
    }
}

/// Dilate a section by factor `alpha` in (0, 1] about its center of mass,
/// using pull-back membership (a node belongs to the dilation when its
/// pull-back lands in the original section, point-in-set by nearest node).
pub fn dilate_section(state: &PotentialState, s: &Section, alpha: f64) -> Result<Section> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Parameter(format!("dilation factor must be in (0, 1], got {alpha}")));
    }
    let grid = &state.grid;
    let com = s.center_of_mass;
    let mut nodes = Vec::new();
    for idx in 0..grid.len() {
        if !grid.is_inside(idx) {
            continue;
        }
        let p = grid.coords(idx);
        let pull = [
            com[0] + (p[0] - com[0]) / alpha,
            com[1] + (p[1] - com[1]) / alpha,
            com[2] + (p[2] - com[2]) / alpha,
        ];
        let nearest = grid.nearest_node(pull);
        if s.node_set.contains(nearest) {
            nodes.push(idx);
        }
    }
    if nodes.is_empty() {
        return Err(Error::Degenerate(format!(
            "dilation by alpha={alpha} produced an empty node set"
        )));
    }
    let node_set = NodeSet::from_nodes(grid.len(), nodes);
    finish_section(state, s.x0, s.t * alpha * alpha, node_set)
}

/// Fit log |S(x0,t)| against log t over the heights; the slope approximates
/// n/2 and |S|/t^(n/2) stays within two-sided bounds.
pub fn volume_growth_report(
    state: &PotentialState,
    x0: usize,
    t_list: &[f64],
) -> Result<VolumeGrowthReport> {
    if t_list.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "volume growth needs >= 4 heights, got {}",
            t_list.len()
        )));
    }
    let half_dim = state.dim() as f64 / 2.0;
    let mut pts = Vec::new();
    let mut ratio_min = f64::INFINITY;
    let mut ratio_max = f64::NEG_INFINITY;
    for &t in t_list {
        let s = build_section(state, x0, t)?;
        pts.push((t, s.volume));
        let r = s.volume / t.powf(half_dim);
        ratio_min = ratio_min.min(r);
        ratio_max = ratio_max.max(r);
    }
    let fit = FitReport::fit(FitModel::PowerLaw, &pts)?;
    Ok(VolumeGrowthReport { fit, ratio_min, ratio_max })
}

/// Measure the doubling constants: `beta = max_t mu(S(t)) / mu(alpha S(t/2))`
/// and the parameter-doubling constant `beta' = max_t mu(S(2t)) / mu(S(t))`.
pub fn doubling_report(
    state: &PotentialState,
    x0: usize,
    t_list: &[f64],
    alpha: f64,
) -> Result<DoublingParams> {
    if !(alpha > 0.0 && alpha < 1.0 || alpha == 1.0) {
        return Err(Error::Parameter(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let mut beta: f64 = 0.0;
    let mut beta_prime: f64 = 0.0;
    let mut table = Vec::new();
    for &t in t_list {
        let s_t = build_section(state, x0, t)?;
        let s_half = build_section(state, x0, t / 2.0)?;
        let s_2t = build_section(state, x0, 2.0 * t)?;
        let dilated = dilate_section(state, &s_half, alpha)?;
        if dilated.measure_mu <= 0.0 {
            return Err(Error::Degenerate(format!(
                "dilated section at t={t} has zero measure"
            )));
        }
        let b = s_t.measure_mu / dilated.measure_mu;
        let bp = s_2t.measure_mu / s_t.measure_mu;
        beta = beta.max(b);
        beta_prime = beta_prime.max(bp);
        table.push((t, b, bp));
    }
    Ok(DoublingParams { alpha, beta, beta_prime, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{build_grid, ConvexDomain};
    use crate::solver::{DensitySpec, PotentialState};
    use std::f64::consts::PI;

    fn radial_state(h: f64, radius: f64) -> PotentialState {
        let grid = build_grid(&ConvexDomain::disk(radius), h).unwrap();
        PotentialState::from_closed_form(
            &grid,
            |p| 0.5 * (p[0] * p[0] + p[1] * p[1]),
            DensitySpec::constant(1.0),
        )
        .unwrap()
    }

    #[test]
    fn paraboloid_section_is_a_disk() {
        let h = 1.0 / 64.0;
        let state = radial_state(h, 1.0);
        let x0 = state.grid.nearest_node([0.0, 0.0, 0.0]);
        let s = build_section(&state, x0, 0.18).unwrap();
        // S(0, 0.18) = {|x| < 0.6}: volume pi*0.36, centroid at 0
        let expect = PI * 0.36;
        assert!((s.volume - expect).abs() / expect < 0.03, "volume {}", s.volume);
        assert!(s.center_of_mass[0].abs() < h && s.center_of_mass[1].abs() < h);
        assert!(s.node_set.contains(x0));
        assert!(s.is_grid_convex(&state));
        // every node is within the disk of radius 0.6 (plus a cell)
        for &idx in s.node_set.nodes() {
            let p = state.grid.coords(idx);
            assert!((p[0] * p[0] + p[1] * p[1]).sqrt() < 0.6 + h);
        }
    }

    #[test]
    fn off_center_section_of_paraboloid() {
        // sections of the paraboloid are balls around the touching point
        let h = 1.0 / 64.0;
        let state = radial_state(h, 1.0);
        let x0 = state.grid.nearest_node([0.2, 0.0, 0.0]);
        let s = build_section(&state, x0, 0.02).unwrap();
        let expect = PI * 0.04; // radius 0.2 disk
        assert!((s.volume - expect).abs() / expect < 0.06, "volume {}", s.volume);
        let p0 = state.grid.coords(x0);
        assert!((s.center_of_mass[0] - p0[0]).abs() < 1.5 * h);
        assert!((s.center_of_mass[1] - p0[1]).abs() < 1.5 * h);
    }

    #[test]
    fn escaping_section_is_rejected() {
        let state = radial_state(1.0 / 32.0, 1.0);
        let x0 = state.grid.nearest_node([0.0, 0.0, 0.0]);
        assert!(matches!(
            build_section(&state, x0, 0.6),
            Err(Error::NotCompactlyContained(_))
        ));
        assert!(matches!(build_section(&state, x0, -0.1), Err(Error::Parameter(_))));
    }

    #[test]
    fn nesting_in_t_is_exact_on_node_sets() {
        let state = radial_state(1.0 / 32.0, 1.0);
        let x0 = state.grid.nearest_node([0.1, -0.05, 0.0]);
        let s1 = build_section(&state, x0, 0.05).unwrap();
        let s2 = build_section(&state, x0, 0.12).unwrap();
        assert!(s1.node_set.is_subset_of(&s2.node_set));
        assert!(s1.measure_mu <= s2.measure_mu);
    }

    #[test]
    fn dilation_identity_and_scaling() {
        let h = 1.0 / 64.0;
        let state = radial_state(h, 1.0);
        let x0 = state.grid.nearest_node([0.0, 0.0, 0.0]);
        let s = build_section(&state, x0, 0.18).unwrap();
        // alpha = 1 keeps the node set
        let same = dilate_section(&state, &s, 1.0).unwrap();
        assert_eq!(same.node_set.nodes(), s.node_set.nodes());
        // alpha = 1/2 quarters the area (2D similarity)
        let half = dilate_section(&state, &s, 0.5).unwrap();
        let ratio = half.volume / s.volume;
        assert!((ratio - 0.25).abs() < 0.05 * 0.25 + 0.02, "ratio {ratio}");
        assert!(dilate_section(&state, &s, 0.0).is_err());
        assert!(dilate_section(&state, &s, 1.5).is_err());
    }

    #[test]
    fn dilation_of_elliptic_sections_preserves_shape() {
        let h = 1.0 / 64.0;
        let grid = build_grid(&ConvexDomain::disk(1.0), h).unwrap();
        let state = PotentialState::from_closed_form(
            &grid,
            |p| 0.5 * (2.0 * p[0] * p[0] + 0.5 * p[1] * p[1]),
            DensitySpec::constant(1.0),
        )
        .unwrap();
        let x0 = grid.nearest_node([0.0, 0.0, 0.0]);
        let s = build_section(&state, x0, 0.1).unwrap();
        let half = dilate_section(&state, &s, 0.5).unwrap();
        // centroid fixed within h
        for a in 0..2 {
            assert!((half.center_of_mass[a] - s.center_of_mass[a]).abs() < h);
        }
        // axes ratio preserved: compare second moments
        let moments = |sec: &Section| {
            let mut mxx = 0.0;
            let mut myy = 0.0;
            for &idx in sec.node_set.nodes() {
                let p = grid.coords(idx);
                mxx += (p[0] - sec.center_of_mass[0]).powi(2);
                myy += (p[1] - sec.center_of_mass[1]).powi(2);
            }
            mxx / myy
        };
        let r1 = moments(&s);
        let r2 = moments(&half);
        assert!((r1 / r2 - 1.0).abs() < 0.15, "axes ratio drifted: {r1} vs {r2}");
    }

    #[test]
    fn volume_growth_of_radial_sections() {
        let state = radial_state(1.0 / 64.0, 1.0);
        let x0 = state.grid.nearest_node([0.0, 0.0, 0.0]);
        let report =
            volume_growth_report(&state, x0, &[0.02, 0.04, 0.08, 0.16]).unwrap();
        assert!((report.fit.slope - 1.0).abs() <= 0.05, "slope {}", report.fit.slope);
        // |S| = 2 pi t
        let two_pi = 2.0 * PI;
        assert!((report.ratio_min - two_pi).abs() / two_pi < 0.05);
        assert!((report.ratio_max - two_pi).abs() / two_pi < 0.05);
        assert!(matches!(
            volume_growth_report(&state, x0, &[0.02, 0.04, 0.08]),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn volume_growth_3d() {
        let grid = build_grid(&ConvexDomain::ball(1.0), 1.0 / 24.0).unwrap();
        let state = PotentialState::from_closed_form(
            &grid,
            |p| 0.5 * (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]),
            DensitySpec::constant(1.0),
        )
        .unwrap();
        let x0 = grid.nearest_node([0.0, 0.0, 0.0]);
        let report =
            volume_growth_report(&state, x0, &[0.02, 0.04, 0.08, 0.16]).unwrap();
        assert!((report.fit.slope - 1.5).abs() <= 0.07, "slope {}", report.fit.slope);
    }

    #[test]
    fn doubling_constants_for_lebesgue_measure() {
        let state = radial_state(1.0 / 64.0, 1.0);
        let x0 = state.grid.nearest_node([0.0, 0.0, 0.0]);
        let heights = [0.02, 0.04, 0.08];
        let params = doubling_report(&state, x0, &heights, 0.5).unwrap();
        // |S(t)| = 2 pi t, |S(t/2)| = pi t, half-dilation quarters the area:
        // beta = (2 pi t) / (pi t / 4) = 8 in 2D
        assert!((params.beta - 8.0).abs() / 8.0 < 0.05, "beta {}", params.beta);
        assert!((params.beta_prime - 2.0).abs() / 2.0 < 0.05, "beta' {}", params.beta_prime);
        // alpha = 1 reduces to parameter doubling at t/2
        let params1 = doubling_report(&state, x0, &heights, 1.0).unwrap();
        assert!((params1.beta - 2.0).abs() / 2.0 < 0.05, "beta|alpha=1 {}", params1.beta);
    }

    #[test]
    fn affine_images_have_matching_section_volumes() {
        // T = diag(a, 1/a): sections of u(Tx) at T^-1 x0 are T^-1 images
        let h = 1.0 / 64.0;
        let state = radial_state(h, 1.0);
        let grid2 = build_grid(&ConvexDomain::ellipse(0.5, 2.0), h).unwrap();
        let tilde = PotentialState::from_closed_form(
            &grid2,
            |p| 0.5 * (4.0 * p[0] * p[0] + 0.25 * p[1] * p[1]),
            DensitySpec::constant(1.0),
        )
        .unwrap();
        let x0 = state.grid.nearest_node([0.0, 0.0, 0.0]);
        let y0 = grid2.nearest_node([0.0, 0.0, 0.0]);
        for t in [0.04, 0.08] {
            let s = build_section(&state, x0, t).unwrap();
            let st = build_section(&tilde, y0, t).unwrap();
            assert!(
                (s.volume - st.volume).abs() / s.volume < 0.05,
                "t={t}: {} vs {}",
                s.volume,
                st.volume
            );
        }
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use crate::geom::{build_grid, ConvexDomain};
    use crate::solver::{DensitySpec, PotentialState};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn nesting_and_grid_convexity(
            cx in -0.2..0.2f64,
            cy in -0.2..0.2f64,
            t1 in 0.01..0.06f64,
            scale in 1.05..2.0f64,
        ) {
            let grid = build_grid(&ConvexDomain::disk(1.0), 1.0 / 24.0).unwrap();
            let state = PotentialState::from_closed_form(
                &grid,
                |p| 0.5 * (p[0] * p[0] + p[1] * p[1]),
                DensitySpec::constant(1.0),
            )
            .unwrap();
            let x0 = grid.nearest_node([cx, cy, 0.0]);
            let t2 = t1 * scale;
            let s1 = build_section(&state, x0, t1).unwrap();
            let s2 = build_section(&state, x0, t2).unwrap();
            prop_assert!(s1.node_set.is_subset_of(&s2.node_set));
            prop_assert!(s1.measure_mu <= s2.measure_mu + 1e-12);
            prop_assert!(s1.node_set.contains(x0));
            prop_assert!(s1.is_grid_convex(&state));
            prop_assert!(s2.is_grid_convex(&state));
        }
    }
}
