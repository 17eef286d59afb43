//! Command-line front end: solve states, sweep sections, compute Green's
//! functions and capacities, run verification suites and the acceptance gate.
//!
//! Exit codes: 0 pass, 1 assertion failure, 2 configuration error,
//! 3 solver failure.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use malab::capacity::{reciprocity_check, section_level, shape_level};
use malab::error::Error;
use malab::geom::{build_grid, ConvexDomain, Grid, ScalarField};
use malab::green::operator::{assemble_operator, Region};
use malab::green::verify::{
    distribution_decay, gradient_lp_norm, verify_bounds_doubling, verify_bounds_fixed_density,
};
use malab::harness::acceptance::{run_acceptance, AcceptanceConfig};
use malab::harness::suites::{convergence_sweep, run_suite};
use malab::harness::ExperimentConfig;
use malab::identities::{
    abp_dual_bound, boundary_flux_identity, green_mass_identity, rho_unit_mass,
    trace_bound_check,
};
use malab::io::Container;
use malab::sections::{build_section, dilate_section};
use malab::solver::{solve_on_grid, DensitySpec, PotentialState};

#[derive(Parser)]
#[command(name = "malab", about = "Linearized Monge-Ampere laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve det D2u = f with zero boundary data and write the state.
    Solve(SolveArgs),
    /// Section sweep: volumes, measures, centroids, optional dilation.
    Sections(SectionsArgs),
    /// Green's function of the linearized operator on V.
    Green(GreenArgs),
    /// Capacity of K in V, optionally with the reciprocity sweep.
    Capacity(CapacityArgs),
    /// Verification modes (thm1i, thm1ii, thm1iii, decay) and suites.
    Verify(VerifyArgs),
    /// Config-driven suite sweep (includes the convergence suite).
    Sweep(SweepArgs),
    /// Run the acceptance gate.
    Acceptance(AcceptanceArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// Domain, e.g. disk:1.0, ball:1.4142, ellipse:1.0,0.5, quartic2:0.5
    #[arg(long)]
    domain: String,
    /// Density expression in x, y, z, h.
    #[arg(long)]
    f: String,
    /// Density bounds (derived automatically only for constant f).
    #[arg(long)]
    f_min: Option<f64>,
    #[arg(long)]
    f_max: Option<f64>,
    #[arg(long)]
    h: f64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SectionsArgs {
    #[arg(long)]
    state: PathBuf,
    /// Pole point, comma-separated.
    #[arg(long)]
    x0: String,
    /// Heights, comma-separated.
    #[arg(long)]
    heights: String,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    csv: PathBuf,
}

#[derive(Args)]
struct GreenArgs {
    #[arg(long)]
    state: PathBuf,
    /// V shape, e.g. disk:1.0, or section:t=0.25
    #[arg(long = "V")]
    v: String,
    #[arg(long)]
    x0: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CapacityArgs {
    #[arg(long)]
    state: PathBuf,
    /// K set: section:x0=0,0:t=0.05 or disk:0.3
    #[arg(long = "K")]
    k: String,
    #[arg(long = "V")]
    v: String,
    /// Optional check: reciprocity
    #[arg(long)]
    check: Option<String>,
    #[arg(long)]
    heights: Option<String>,
    /// JSON output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    state: PathBuf,
    /// thm1i | thm1ii | thm1iii | decay
    #[arg(long)]
    mode: Option<String>,
    /// identities
    #[arg(long)]
    suite: Option<String>,
    #[arg(long = "V")]
    v: Option<String>,
    #[arg(long)]
    x0: Option<String>,
    #[arg(long)]
    heights: Option<String>,
    #[arg(long)]
    csv: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Worker-count override.
    #[arg(long)]
    workers: Option<usize>,
    /// Run only the convergence sweep and print the orders.
    #[arg(long, default_value_t = false)]
    convergence_only: bool,
}

#[derive(Args)]
struct AcceptanceArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Sections(a) => cmd_sections(a),
        Command::Green(a) => cmd_green(a),
        Command::Capacity(a) => cmd_capacity(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Acceptance(a) => cmd_acceptance(a),
    }
}

fn parse_domain(s: &str) -> Result<ConvexDomain, Error> {
    let (kind, rest) = s
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("domain '{s}': expected kind:params")))?;
    let nums: Vec<f64> = rest
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Error::Config(format!("domain '{s}': {e}")))?;
    let need = |n: usize| -> Result<(), Error> {
        if nums.len() != n {
            return Err(Error::Config(format!("domain '{s}': expected {n} parameter(s)")));
        }
        Ok(())
    };
    match kind {
        "disk" => {
            need(1)?;
            Ok(ConvexDomain::disk(nums[0]))
        }
        "ball" => {
            need(1)?;
            Ok(ConvexDomain::ball(nums[0]))
        }
        "ellipse" => {
            need(2)?;
            Ok(ConvexDomain::ellipse(nums[0], nums[1]))
        }
        "ellipsoid" => {
            need(3)?;
            Ok(ConvexDomain::Ellipsoid { a: nums[0], b: nums[1], c: nums[2], center: [0.0; 3] })
        }
        "quartic2" => {
            need(1)?;
            Ok(ConvexDomain::Quartic { r: nums[0], dim: 2, center: [0.0; 3] })
        }
        "quartic3" => {
            need(1)?;
            Ok(ConvexDomain::Quartic { r: nums[0], dim: 3, center: [0.0; 3] })
        }
        other => Err(Error::Config(format!("domain kind '{other}' unknown"))),
    }
}

fn parse_point(s: &str) -> Result<[f64; 3], Error> {
    let nums: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Error::Config(format!("point '{s}': {e}")))?;
    if nums.is_empty() || nums.len() > 3 {
        return Err(Error::Config(format!("point '{s}': expected 1-3 coordinates")));
    }
    let mut p = [0.0; 3];
    for (a, &v) in nums.iter().enumerate() {
        p[a] = v;
    }
    Ok(p)
}

fn parse_list(s: &str) -> Result<Vec<f64>, Error> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("list '{s}': {e}")))
        })
        .collect()
}

fn cmd_solve(a: SolveArgs) -> Result<i32, Error> {
    let domain = parse_domain(&a.domain)?;
    let constant = a.f.trim().parse::<f64>().ok();
    let (f_min, f_max) = match (a.f_min, a.f_max, constant) {
        (Some(lo), Some(hi), _) => (lo, hi),
        (None, None, Some(c)) => (c, c),
        _ => {
            return Err(Error::Config(
                "--f-min/--f-max are required for non-constant densities".into(),
            ))
        }
    };
    let density = DensitySpec::from_expr(&a.f, f_min, f_max)?;
    let grid = build_grid(&domain, a.h)?;
    let state = solve_on_grid(&grid, &density, a.tol)?;
    let stats = state.stats.expect("solved state has stats");
    let mut c = Container::new(
        &grid,
        serde_json::json!({
            "density": { "expr": a.f, "f_min": f_min, "f_max": f_max },
            "tol": a.tol,
        }),
    );
    c.push_field("u", &state.u.values);
    c.push_field("f", &state.f.values);
    c.write(&a.out)?;
    let sidecar = serde_json::json!({
        "residual": stats.residual,
        "newton_iters": stats.newton_iters,
        "min_hessian_eig": stats.min_hessian_eig,
    });
    std::fs::write(
        a.out.with_extension("bin.json"),
        serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    eprintln!(
        "solved: residual {:.3e}, {} Newton steps",
        stats.residual, stats.newton_iters
    );
    Ok(0)
}

fn load_state(path: &Path) -> Result<(Arc<Grid>, PotentialState), Error> {
    let c = Container::read(path)?;
    let grid = c.grid()?;
    let u = c.field("u", &grid)?;
    let meta = &c.header.meta;
    let expr = meta["density"]["expr"]
        .as_str()
        .ok_or_else(|| Error::Format("state meta lacks density.expr".into()))?;
    let f_min = meta["density"]["f_min"]
        .as_f64()
        .ok_or_else(|| Error::Format("state meta lacks density.f_min".into()))?;
    let f_max = meta["density"]["f_max"]
        .as_f64()
        .ok_or_else(|| Error::Format("state meta lacks density.f_max".into()))?;
    let density = DensitySpec::from_expr(expr, f_min, f_max)?;
    let state = PotentialState::from_u_field(&grid, u, density)?;
    Ok((grid, state))
}

fn v_level_from_arg(state: &PotentialState, x0: usize, spec: &str) -> Result<ScalarField, Error> {
    if let Some(rest) = spec.strip_prefix("section:") {
        let t = rest
            .strip_prefix("t=")
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| Error::Config(format!("V '{spec}': expected section:t=<height>")))?;
        Ok(section_level(state, x0, t))
    } else {
        Ok(shape_level(state, &parse_domain(spec)?))
    }
}

fn cmd_sections(a: SectionsArgs) -> Result<i32, Error> {
    let (grid, state) = load_state(&a.state)?;
    let x0 = grid.nearest_node(parse_point(&a.x0)?);
    let heights = parse_list(&a.heights)?;
    let mut w = csv::Writer::from_path(&a.csv).map_err(|e| Error::Format(e.to_string()))?;
    let mut header = vec!["t", "volume", "mu", "com_x", "com_y"];
    if grid.dim == 3 {
        header.push("com_z");
    }
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for &t in &heights {
        let mut s = build_section(&state, x0, t)?;
        if let Some(alpha) = a.alpha {
            s = dilate_section(&state, &s, alpha)?;
        }
        let mut row = vec![
            format!("{t:.12e}"),
            format!("{:.12e}", s.volume),
            format!("{:.12e}", s.measure_mu),
        ];
        for axis in 0..grid.dim {
            row.push(format!("{:.12e}", s.center_of_mass[axis]));
        }
        w.write_record(&row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(0)
}

fn cmd_green(a: GreenArgs) -> Result<i32, Error> {
    let (grid, state) = load_state(&a.state)?;
    let x0 = grid.nearest_node(parse_point(&a.x0)?);
    let v = v_level_from_arg(&state, x0, &a.v)?;
    let region = Region::from_levels(&grid, &[&v])?;
    let op = assemble_operator(&state, region)?;
    let g = op.green_function(x0)?;
    let mut c = Container::new(
        &grid,
        serde_json::json!({
            "pole": grid.coords(x0),
            "V": a.v,
            "source_value": g.source_value,
            "solver": g.stats,
            "min_value": g.min_value,
            "lumped_faces": op.lumped,
        }),
    );
    c.push_field("g", &g.field.values);
    c.write(&a.out)?;
    eprintln!(
        "green: {} unknowns, residual {:.2e}, min g {:.3e}",
        op.n(),
        g.stats.rel_residual,
        g.min_value
    );
    Ok(0)
}

fn cmd_capacity(a: CapacityArgs) -> Result<i32, Error> {
    let (grid, state) = load_state(&a.state)?;
    // K: section:x0=..:t=.. or a shape
    let (x0, k_level) = if let Some(rest) = a.k.strip_prefix("section:") {
        let mut x0p = [0.0; 3];
        let mut t = None;
        for part in rest.split(':') {
            if let Some(v) = part.strip_prefix("x0=") {
                x0p = parse_point(v)?;
            } else if let Some(v) = part.strip_prefix("t=") {
                t = v.parse::<f64>().ok();
            }
        }
        let t = t.ok_or_else(|| Error::Config(format!("K '{}': missing t=", a.k)))?;
        let x0 = grid.nearest_node(x0p);
        (x0, section_level(&state, x0, t))
    } else {
        let x0 = grid.nearest_node([0.0; 3]);
        (x0, shape_level(&state, &parse_domain(&a.k)?))
    };
    let v_level = v_level_from_arg(&state, x0, &a.v)?;
    let cap = malab::capacity::capacity_from_levels(&state, &k_level, &v_level)?;
    let mut sandwich_lo = serde_json::Value::Null;
    let mut sandwich_hi = serde_json::Value::Null;
    let mut rows_json = serde_json::Value::Null;
    if a.check.as_deref() == Some("reciprocity") {
        let heights = parse_list(
            a.heights
                .as_deref()
                .ok_or_else(|| Error::Config("--check reciprocity requires --heights".into()))?,
        )?;
        let rows = reciprocity_check(&state, &v_level, x0, &heights)?;
        let lo = rows.iter().map(|r| r.sandwich_lo).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r.sandwich_hi).fold(f64::NEG_INFINITY, f64::max);
        sandwich_lo = serde_json::json!(lo);
        sandwich_hi = serde_json::json!(hi);
        rows_json = serde_json::to_value(&rows).map_err(|e| Error::Format(e.to_string()))?;
    }
    let out = serde_json::json!({
        "cap": cap.value,
        "q_form": cap.mass,
        "sandwich_lo": sandwich_lo,
        "sandwich_hi": sandwich_hi,
        "rows": rows_json,
    });
    let text = serde_json::to_string_pretty(&out).map_err(|e| Error::Format(e.to_string()))?;
    match &a.out {
        Some(p) => std::fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(0)
}

fn cmd_verify(a: VerifyArgs) -> Result<i32, Error> {
    let (grid, state) = load_state(&a.state)?;
    let x0 = grid.nearest_node(parse_point(a.x0.as_deref().unwrap_or("0,0,0"))?);
    let mut w = csv::Writer::from_path(&a.csv).map_err(|e| Error::Format(e.to_string()))?;
    let mut failed = false;

    if a.suite.as_deref() == Some("identities") {
        let heights = parse_list(a.heights.as_deref().unwrap_or("0.08,0.18"))?;
        let t = heights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        w.write_record(["name", "h", "left", "right", "rel_err", "pass"])
            .map_err(|e| Error::Format(e.to_string()))?;
        let section = build_section(&state, x0, t)?;
        let region = Region::from_section(&state, &section)?;
        let op = assemble_operator(&state, region)?;
        let g = op.green_function(x0)?;
        let mass = green_mass_identity(&state, &section, &op, &g)?;
        let v = match a.v.as_deref() {
            Some(s) => v_level_from_arg(&state, x0, s)?,
            None => section_level(&state, x0, t),
        };
        let vregion = Region::from_levels(&grid, &[&v])?;
        let vop = assemble_operator(&state, vregion)?;
        let gv = vop.green_function(x0)?;
        let rho = rho_unit_mass(&state, &vop, &gv, 0.05)?;
        let fluxes = boundary_flux_identity(&state, x0, &heights, 0.04)?;
        let trace = trace_bound_check(&state, &vop, &gv, x0, &heights, 0.04)?;
        let abp = abp_dual_bound(&state, &vop, &gv)?;
        let mut reports = vec![mass.report, rho];
        reports.extend(fluxes);
        reports.push(trace.identity);
        for rep in &reports {
            failed |= !rep.pass;
            w.write_record([
                rep.name.clone(),
                format!("{:.12e}", rep.h),
                format!("{:.12e}", rep.left),
                format!("{:.12e}", rep.right),
                format!("{:.12e}", rep.rel),
                rep.pass.to_string(),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;
        eprintln!("abp ratio: {:.4}", abp.ratio);
        return Ok(if failed { 1 } else { 0 });
    }

    let mode = a
        .mode
        .as_deref()
        .ok_or_else(|| Error::Config("verify: --mode or --suite is required".into()))?;
    let heights = parse_list(
        a.heights
            .as_deref()
            .ok_or_else(|| Error::Config("verify: --heights is required".into()))?,
    )?;
    let v = v_level_from_arg(
        &state,
        x0,
        a.v.as_deref()
            .ok_or_else(|| Error::Config("verify: --V is required".into()))?,
    )?;
    match mode {
        "thm1i" => {
            let rep = verify_bounds_fixed_density(&state, &v, x0, &heights)?;
            w.write_record(["t", "g_min", "g_max"])
                .map_err(|e| Error::Format(e.to_string()))?;
            for (k, &(t, lo)) in rep.lower.points.iter().enumerate() {
                w.write_record([
                    format!("{t:.12e}"),
                    format!("{lo:.12e}"),
                    format!("{:.12e}", rep.upper.points[k].1),
                ])
                .map_err(|e| Error::Format(e.to_string()))?;
            }
            w.flush()?;
            println!(
                "{}",
                serde_json::to_string_pretty(&rep.lower)
                    .map_err(|e| Error::Format(e.to_string()))?
            );
        }
        "thm1ii" => {
            let rep = verify_bounds_doubling(&state, &v, x0, &heights)?;
            w.write_record(["t", "g_min", "bound", "ratio"])
                .map_err(|e| Error::Format(e.to_string()))?;
            for &(t, g, b, r) in &rep.rows {
                w.write_record([
                    format!("{t:.12e}"),
                    format!("{g:.12e}"),
                    format!("{b:.12e}"),
                    format!("{r:.12e}"),
                ])
                .map_err(|e| Error::Format(e.to_string()))?;
            }
            w.flush()?;
            eprintln!("ratio spread: {:.4}", rep.spread);
        }
        "thm1iii" => {
            let region = Region::from_levels(&grid, &[&v])?;
            let op = assemble_operator(&state, region)?;
            let g = op.green_function(x0)?;
            let section = build_section(&state, x0, heights[0])?;
            w.write_record(["p", "value"]).map_err(|e| Error::Format(e.to_string()))?;
            for p in [1.1, 1.25, 1.5] {
                let val = gradient_lp_norm(&state, &g, &section, p)?;
                w.write_record([format!("{p:.12e}"), format!("{val:.12e}")])
                    .map_err(|e| Error::Format(e.to_string()))?;
            }
            w.flush()?;
        }
        "decay" => {
            let region = Region::from_levels(&grid, &[&v])?;
            let v_nodes = region.nodes.clone();
            let op = assemble_operator(&state, region)?;
            let g = op.green_function(x0)?;
            let rep = distribution_decay(&state, &g.field, &v_nodes, &heights)?;
            w.write_record(["T", "mu"]).map_err(|e| Error::Format(e.to_string()))?;
            for &(t, mu) in &rep.rows {
                w.write_record([format!("{t:.12e}"), format!("{mu:.12e}")])
                    .map_err(|e| Error::Format(e.to_string()))?;
            }
            w.flush()?;
            if let Some(fit) = &rep.fit {
                println!(
                    "{}",
                    serde_json::to_string_pretty(fit).map_err(|e| Error::Format(e.to_string()))?
                );
            }
        }
        other => return Err(Error::Config(format!("verify mode '{other}' unknown"))),
    }
    Ok(if failed { 1 } else { 0 })
}

fn cmd_sweep(a: SweepArgs) -> Result<i32, Error> {
    let mut cfg = ExperimentConfig::from_toml_path(&a.config)?;
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if a.convergence_only {
        let table = convergence_sweep(&cfg)?;
        for row in &table.rows {
            println!("{}: order {:.3}", row.metric, row.order);
        }
        return Ok(0);
    }
    let summary = run_suite(&cfg)?;
    for rec in &summary.records {
        println!(
            "{} {}::{} = {:.6e} ({})",
            if rec.pass { "PASS" } else { "FAIL" },
            rec.suite,
            rec.name,
            rec.value,
            rec.expected
        );
    }
    for f in &summary.solver_failures {
        eprintln!("solver failure: {f}");
    }
    Ok(summary.exit_code())
}

fn cmd_acceptance(a: AcceptanceArgs) -> Result<i32, Error> {
    let mut cfg = match &a.config {
        Some(p) => AcceptanceConfig::from_toml_path(p)?,
        None => AcceptanceConfig::shipped(),
    };
    if a.out.is_some() {
        cfg.out_dir = a.out;
    }
    let outcome = run_acceptance(&cfg)?;
    Ok(if outcome.all_passed() { 0 } else { 1 })
}
