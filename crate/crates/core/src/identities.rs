//! Numerical verification of the exact integral identities behind the
//! Green's-function bounds: the mass identity, the unit boundary flux of
//! rho, the section boundary-flux identity, the trace bound, the dual
//! ABP-type norm bound, and the logarithmic energy bound.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::{
    gradient_magnitude, integrate_region, level_surface_integral, ScalarField, ShellSide,
};
use crate::green::operator::{GreenFunction, LinearizedOperator};
use crate::sections::{build_section, Section};
use crate::solver::PotentialState;

/// One verified identity: left/right values, relative discrepancy, and the
/// grid spacing the run used (so refinement behavior is visible).
#[derive(Debug, Clone, Serialize)]
pub struct IdentityReport {
    pub name: String,
    pub left: f64,
    pub right: f64,
    pub rel: f64,
    pub h: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl IdentityReport {
    pub fn new(name: &str, left: f64, right: f64, h: f64, threshold: f64) -> Self {
        let rel = (left - right).abs() / left.abs().max(right.abs()).max(1e-14);
        IdentityReport { name: name.to_string(), left, right, rel, h, threshold, pass: rel <= threshold }
    }
}

/// Quadrature of a nodal density over the region of `op`, excluding the pole
/// cell (the discrete delta makes the pole value h-divergent; the excluded
/// cell volume vanishes under refinement).
fn integrate_minus_pole(
    op: &LinearizedOperator,
    pole: usize,
    density: impl Fn(usize) -> f64,
) -> f64 {
    let mut sum = 0.0;
    for &idx in op.region.nodes.nodes() {
        if idx == pole {
            continue;
        }
        sum += density(idx);
    }
    sum * op.grid.cell_volume()
}

/// Mass identity `int_V n f g = t` on `V = S(x0, t)` and the two-sided
/// consequence `t/(n Lambda) <= int_V g <= t/(n lambda)`.
pub struct GreenMassReport {
    pub report: IdentityReport,
    pub sigma_integral: f64,
    pub sigma_lower: f64,
    pub sigma_upper: f64,
    pub bounds_pass: bool,
}

pub fn green_mass_identity(
    state: &PotentialState,
    section: &Section,
    op: &LinearizedOperator,
    g: &GreenFunction,
) -> Result<GreenMassReport> {
    if !section.node_set.contains(g.pole) {
        return Err(Error::Domain(
            "green_mass_identity: the Green pole is not inside the section".into(),
        ));
    }
    if op.n() != section.node_set.len() {
        return Err(Error::Domain(
            "green_mass_identity: operator region is not the section".into(),
        ));
    }
    let n = state.dim() as f64;
    let left = integrate_minus_pole(op, g.pole, |idx| n * state.f.get(idx) * g.field.get(idx));
    let right = section.t;
    let report = IdentityReport::new("green_mass", left, right, state.grid.h, 0.03);
    let sigma = integrate_minus_pole(op, g.pole, |idx| g.field.get(idx));
    let lo = section.t / (n * state.density.f_max);
    let hi = section.t / (n * state.density.f_min);
    // quadrature slack on the two-sided consequence
    let slack = 0.03 * hi;
    let bounds_pass = sigma >= lo - slack && sigma <= hi + slack;
    Ok(GreenMassReport {
        report,
        sigma_integral: sigma,
        sigma_lower: lo,
        sigma_upper: hi,
        bounds_pass,
    })
}

/// Boundary density `rho = U grad g . grad g / |grad g|` of a Green's
/// function, with the cut-aware one-sided gradient near the region boundary.
pub fn rho_density(
    state: &PotentialState,
    op: &LinearizedOperator,
    g: &GreenFunction,
) -> ScalarField {
    let grid = &state.grid;
    let grad = op.region_gradient(&g.field);
    let mut out = ScalarField::constant(grid, f64::NAN);
    for &idx in op.region.nodes.nodes() {
        let gv = grad.get(idx);
        let mag = (gv[0] * gv[0] + gv[1] * gv[1] + gv[2] * gv[2]).sqrt();
        if mag < 1e-14 {
            continue; // flagged by the shell integral if it lands there
        }
        let u = state.cofactor_u.get(idx);
        out.values[idx] = u.quad_form(gv) / mag;
    }
    out
}

/// `int_{dV} rho dS = 1`: the unit flux of the Green source through the
/// region boundary, evaluated on the inner coarea shell (g vanishes outside
/// V, so the density exists on one side only).
pub fn rho_unit_mass(
    state: &PotentialState,
    op: &LinearizedOperator,
    g: &GreenFunction,
    threshold: f64,
) -> Result<IdentityReport> {
    let density = rho_density(state, op, g);
    let level = &op.region.levels[0];
    let left = level_surface_integral(&density, level, 0.0, ShellSide::Inner)?;
    Ok(IdentityReport::new("rho_unit_mass", left, 1.0, state.grid.h, threshold))
}

/// Section boundary-flux identity
/// `int_{dS(x0,s)} U grad u . grad u / |grad u| = n int_{S(x0,s)} det D2u`.
pub fn boundary_flux_identity(
    state: &PotentialState,
    x0: usize,
    s_list: &[f64],
    threshold: f64,
) -> Result<Vec<IdentityReport>> {
    let grid = &state.grid;
    let w = state.height_field(x0);
    // density from the state's own fields (smooth across section boundaries)
    let mut density = ScalarField::constant(grid, f64::NAN);
    for idx in 0..grid.len() {
        if !grid.is_inside(idx) {
            continue;
        }
        let gv = state.grad_u.get(idx);
        let g0 = state.grad_u.get(x0);
        let rel = [gv[0] - g0[0], gv[1] - g0[1], gv[2] - g0[2]];
        let mag = (rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2]).sqrt();
        if mag < 1e-14 {
            density.values[idx] = 0.0;
            continue;
        }
        let u = state.cofactor_u.get(idx);
        density.values[idx] = u.quad_form(rel) / mag;
    }
    let n = state.dim() as f64;
    let mut out = Vec::new();
    for &s in s_list {
        let section = build_section(state, x0, s)?;
        if section.node_set.len() < 8 {
            return Err(Error::InsufficientData(format!(
                "section at s={s} is under-resolved ({} nodes)",
                section.node_set.len()
            )));
        }
        let left = level_surface_integral(&density, &w, s, ShellSide::Centered)?;
        let right = n * section.measure_mu;
        out.push(IdentityReport::new(
            &format!("boundary_flux[s={s}]"),
            left,
            right,
            grid.h,
            threshold,
        ));
    }
    Ok(out)
}

/// Trace identity `2 int_V trace(U) g = int_{dV} |x|^2 rho - |x0|^2` plus the
/// bounded ratio from the trace-integral corollary.
pub struct TraceBoundReport {
    pub identity: IdentityReport,
    /// (t, int_{S(t)} trace U / bound) rows; the ratio must stay bounded.
    pub ratios: Vec<(f64, f64)>,
}

pub fn trace_bound_check(
    state: &PotentialState,
    op: &LinearizedOperator,
    g: &GreenFunction,
    x0: usize,
    t_list: &[f64],
    threshold: f64,
) -> Result<TraceBoundReport> {
    let grid = &state.grid;
    let left = 2.0
        * integrate_minus_pole(op, g.pole, |idx| {
            state.cofactor_u.get(idx).trace() * g.field.get(idx)
        });
    // |x|^2-weighted rho flux over the region boundary. The weight is
    // evaluated at the node's first-order projection onto the level set:
    // inside the one-sided shell the raw weight varies at O(delta) and
    // would bias the flux.
    let rho = rho_density(state, op, g);
    let level = &op.region.levels[0];
    let mut weighted = rho.clone();
    for idx in 0..grid.len() {
        if !weighted.values[idx].is_finite() {
            continue;
        }
        let p = grid.coords(idx);
        let mut gphi = [0.0; 3];
        let mut ok = true;
        for (axis, gc) in gphi.iter_mut().enumerate().take(grid.dim) {
            match (grid.shift(idx, axis, 1), grid.shift(idx, axis, -1)) {
                (Some(a), Some(b)) if level.get(a).is_finite() && level.get(b).is_finite() => {
                    *gc = (level.get(a) - level.get(b)) / (2.0 * grid.h);
                }
                _ => ok = false,
            }
        }
        let g2: f64 = gphi.iter().map(|v| v * v).sum();
        let proj = if ok && g2 > 1e-20 {
            let s = level.get(idx) / g2;
            [p[0] - s * gphi[0], p[1] - s * gphi[1], p[2] - s * gphi[2]]
        } else {
            p
        };
        weighted.values[idx] *= proj[0] * proj[0] + proj[1] * proj[1] + proj[2] * proj[2];
    }
    let flux = level_surface_integral(&weighted, level, 0.0, ShellSide::Inner)?;
    let p0 = grid.coords(x0);
    let x0_sq = p0[0] * p0[0] + p0[1] * p0[1] + p0[2] * p0[2];
    let identity =
        IdentityReport::new("trace_identity", left, flux - x0_sq, grid.h, threshold);

    // corollary ratio: int_{S(t)} trace U / [t^((n-2)/2) or 1/|log t|] (max |x|^2 - |x0|^2)
    let max_sq = op
        .region
        .nodes
        .boundary_ring(grid)
        .iter()
        .map(|&idx| {
            let p = grid.coords(idx);
            p[0] * p[0] + p[1] * p[1] + p[2] * p[2]
        })
        .fold(0.0f64, f64::max);
    let mut ratios = Vec::new();
    for &t in t_list {
        let section = build_section(state, x0, t)?;
        let trace_field = ScalarField {
            grid: std::sync::Arc::clone(grid),
            values: (0..grid.len())
                .map(|idx| {
                    if grid.is_inside(idx) {
                        state.cofactor_u.get(idx).trace()
                    } else {
                        f64::NAN
                    }
                })
                .collect(),
        };
        let integral = integrate_region(&trace_field, &section.node_set)?;
        let scale = if state.dim() == 2 {
            1.0 / t.ln().abs()
        } else {
            t.sqrt()
        };
        ratios.push((t, integral / (scale * (max_sq - x0_sq))));
    }
    Ok(TraceBoundReport { identity, ratios })
}

/// Dual bound `(int_V g^{n/(n-1)})^{(n-1)/n} <= C |V|^{1/n}`: reports the
/// ratio, which must stay bounded under refinement.
#[derive(Debug, Clone, Serialize)]
pub struct AbpReport {
    pub norm: f64,
    pub volume_root: f64,
    pub ratio: f64,
    pub h: f64,
}

pub fn abp_dual_bound(
    state: &PotentialState,
    op: &LinearizedOperator,
    g: &GreenFunction,
) -> Result<AbpReport> {
    let n = state.dim() as f64;
    let q = n / (n - 1.0);
    let integral = integrate_minus_pole(op, g.pole, |idx| g.field.get(idx).max(0.0).powf(q));
    let norm = integral.powf(1.0 / q);
    let volume = op.region.nodes.len() as f64 * state.grid.cell_volume();
    let volume_root = volume.powf(1.0 / n);
    Ok(AbpReport { norm, volume_root, ratio: norm / volume_root, h: state.grid.h })
}

/// Logarithmic energy `int_S U grad g . grad g / g^2 <= C mu(S)/r` on a
/// section of height r with the pole inside.
#[derive(Debug, Clone, Serialize)]
pub struct LogEnergyReport {
    pub energy: f64,
    pub bound_expr: f64,
    pub ratio: f64,
}

pub fn log_energy_bound(
    state: &PotentialState,
    section: &Section,
    g: &GreenFunction,
) -> Result<LogEnergyReport> {
    if state.dim() != 2 {
        return Err(Error::Parameter("log_energy_bound is a 2D statement".into()));
    }
    if !section.node_set.contains(g.pole) {
        return Err(Error::Domain("log_energy_bound: pole outside the section".into()));
    }
    let grid = &state.grid;
    let grad_mag = gradient_magnitude(&g.field);
    let mut energy = 0.0;
    for &idx in section.node_set.nodes() {
        if idx == g.pole {
            continue;
        }
        let gv = g.field.get(idx);
        if gv <= 0.0 {
            return Err(Error::Degenerate(format!(
                "g <= 0 at node {idx} inside the section (positivity violated)"
            )));
        }
        // central gradient of g (smooth inside the section)
        let h = grid.h;
        let mut gvec = [0.0; 3];
        for (axis, gc) in gvec.iter_mut().enumerate().take(grid.dim) {
            let p = grid.shift(idx, axis, 1).unwrap();
            let q = grid.shift(idx, axis, -1).unwrap();
            *gc = (g.field.get(p) - g.field.get(q)) / (2.0 * h);
        }
        let u = state.cofactor_u.get(idx);
        energy += u.quad_form(gvec) / (gv * gv);
    }
    let _ = grad_mag;
    let energy = energy * grid.cell_volume();
    let bound_expr = section.measure_mu / section.t;
    Ok(LogEnergyReport { energy, bound_expr, ratio: energy / bound_expr })
}

/// Pointwise algebraic inequality `U grad v . grad v >= det(D2u) |grad v|^2 / Delta u`:
/// exact linear algebra, checked at every PDE node for sampled smooth fields.
/// Returns the worst signed margin (negative = violation) relative to scale.
pub fn pointwise_energy_inequality(state: &PotentialState, seed: u64, fields: usize) -> f64 {
    use rand::{Rng, SeedableRng};
    let grid = &state.grid;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = f64::INFINITY;
    for trial in 0..fields {
        let (kx, ky, kz): (f64, f64, f64) =
            (rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0));
        for idx in 0..grid.len() {
            if state.kind[idx] != crate::solver::NodeKind::Pde {
                continue;
            }
            let p = grid.coords(idx);
            // gradient of an explicit smooth v (first trial: v = x)
            let gv = if trial == 0 {
                [1.0, 0.0, 0.0]
            } else {
                [
                    kx * (kx * p[0]).cos(),
                    -ky * (ky * p[1]).sin(),
                    if grid.dim == 3 { kz * (kz * p[2]).cos() } else { 0.0 },
                ]
            };
            let u = state.cofactor_u.get(idx);
            let hess = state.hess_u.get(idx);
            let det = hess.det();
            let lap = hess.trace();
            let norm2 = gv[0] * gv[0] + gv[1] * gv[1] + gv[2] * gv[2];
            let lhs = u.quad_form(gv);
            let rhs = det * norm2 / lap;
            let scale = lhs.abs().max(rhs.abs()).max(1e-14);
            worst = worst.min((lhs - rhs) / scale);
        }
    }
    worst
}
