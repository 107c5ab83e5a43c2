//! Command-line interface: loads system and observable configuration,
//! dispatches to the library, and emits CSV/JSON artifacts.
//!
//! Exit codes: 0 success/PASS, 1 computation error, 2 configuration
//! error, 3 verification failure.

use clap::{Args, Parser, Subcommand};
use fiberdis::base::{self, BaseMetric, DensityMethod};
use fiberdis::catalog::SkewSystem;
use fiberdis::config::{system_from_config, validate_system, RawConfig};
use fiberdis::error::Error;
use fiberdis::expr::Expr;
use fiberdis::observable::FiberObservable;
use fiberdis::report::{csv_text, format_float, regularity_json, write_atomic, Json};
use fiberdis::suspension::{RoofFunction, SuspendedObservable};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "fiberdis",
    about = "Invariant measures of hyperbolic skew products, their disintegration along stable fibers, and quantitative regularity checks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Catalog system name (doubling-pure, doubling-cos, doubling-digit,
    /// gauss-affine); ignored when --config provides a custom system.
    #[arg(long, default_value = "doubling-cos")]
    system: String,

    /// Config file providing a custom system and defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Observable expression in x and z (and u for suspend).
    #[arg(long)]
    observable: Option<String>,

    /// Hölder exponent used by seminorm-based suites.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,

    /// Base metric: euclidean or symbolic.
    #[arg(long, default_value = "euclidean")]
    metric: String,

    /// Contraction base of the symbolic metric.
    #[arg(long, default_value_t = 0.5)]
    theta: f64,

    /// Target tolerance of the computation.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,

    /// Fixed operator depth: disintegrate then skips the adaptive
    /// stopping rule and evaluates at exactly this depth.
    #[arg(long)]
    depth: Option<usize>,

    /// Depth list for the regularity suites, e.g. `1..12` or `2,4,8`.
    #[arg(long = "n-list", default_value = "1..8")]
    n_list: String,

    /// Base-grid resolution for output tables.
    #[arg(long, default_value_t = 256)]
    grid: usize,

    /// Fiber-grid size for suprema over the fiber interval.
    #[arg(long = "z-grid", default_value_t = 33)]
    z_grid: usize,

    /// Seed for sampled pairs and Monte-Carlo streams.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Worker threads (0 = rayon default). Outputs are byte-identical
    /// regardless of this setting.
    #[arg(long, default_value_t = 0)]
    threads: usize,

    /// Output base path; artifacts get suffixes like `.csv` / `.json`.
    #[arg(long, default_value = "out/run")]
    out: PathBuf,

    /// Primary artifact format where a choice exists: csv or json.
    #[arg(long, default_value = "csv")]
    format: String,
}

#[derive(Subcommand)]
enum Command {
    /// Invariant density of the base map as CSV (x, phi, dphi).
    Density {
        #[command(flatten)]
        common: CommonArgs,
        /// analytic or operator-iteration.
        #[arg(long, default_value = "analytic")]
        method: String,
        /// Table resolution for operator iteration.
        #[arg(long, default_value_t = 1024)]
        resolution: usize,
    },
    /// Invariant-measure value of an observable via sandwich brackets.
    Eta {
        #[command(flatten)]
        common: CommonArgs,
        /// Depth cap of the sandwich iteration.
        #[arg(long = "n-cap", default_value_t = 25)]
        n_cap: usize,
        /// Quadrature resolution.
        #[arg(long = "quad-res", default_value_t = 8192)]
        quad_res: usize,
    },
    /// Disintegrated observable on the base grid plus convergence trace.
    Disintegrate {
        #[command(flatten)]
        common: CommonArgs,
        /// Gap between compared depths in the stopping rule.
        #[arg(long = "k-gap", default_value_t = 5)]
        k_gap: usize,
        #[arg(long = "n-cap", default_value_t = 25)]
        n_cap: usize,
        /// Distinguished fiber point (default: the fiber midpoint).
        #[arg(long)]
        z0: Option<f64>,
        /// Recompute at a shifted distinguished point and report the
        /// largest value change against the contraction-weighted bound.
        #[arg(long = "z0-check", default_value_t = false)]
        z0_check: bool,
    },
    /// Regularity suites; emits the JSON report.
    Regularity {
        #[command(flatten)]
        common: CommonArgs,
        /// holder, c1 or dk.
        #[arg(long, default_value = "holder")]
        suite: String,
        /// Gap depths for the dk suite.
        #[arg(long = "m-list", default_value = "1,5")]
        m_list: String,
        /// Pair count for seminorm estimation.
        #[arg(long = "pair-samples", default_value_t = 2048)]
        pair_samples: usize,
        /// Sample-point count for derivative suites.
        #[arg(long = "sample-count", default_value_t = 16)]
        sample_count: usize,
    },
    /// Disintegration over a suspension domain (needs --roof).
    Suspend {
        #[command(flatten)]
        common: CommonArgs,
        /// Roof expression R(x) > 0.
        #[arg(long)]
        roof: String,
        /// Declared lower bound of the roof.
        #[arg(long = "roof-inf", default_value_t = 1.0)]
        roof_inf: f64,
        /// Number of shared u levels.
        #[arg(long = "u-grid", default_value_t = 9)]
        u_grid: usize,
    },
    /// Runs the full verification suite; exit 0 iff every criterion holds.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Density { common, .. }
        | Command::Eta { common, .. }
        | Command::Disintegrate { common, .. }
        | Command::Regularity { common, .. }
        | Command::Suspend { common, .. }
        | Command::Verify { common } => common.clone(),
    };
    if common.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(common.threads)
            .build_global()
        {
            return fail(1, &format!("thread pool: {e}"));
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let code = match e {
                Error::Config(_)
                | Error::Parse { .. }
                | Error::UnknownIdentifier { .. }
                | Error::ArityMismatch { .. }
                | Error::Io { .. } => 2,
                _ => 1,
            };
            fail(code, &e.to_string())
        }
    }
}

fn fail(code: u8, message: &str) -> ExitCode {
    let doc = Json::obj(vec![
        ("error", Json::Str(message.to_string())),
        ("exit_code", Json::Int(code as i64)),
    ]);
    eprintln!("{}", doc.render().unwrap_or_else(|_| message.to_string()));
    ExitCode::from(code)
}

fn build_system(common: &CommonArgs) -> fiberdis::Result<SkewSystem> {
    let mut system = match &common.config {
        Some(path) => system_from_config(&RawConfig::load(path)?)?,
        None => fiberdis::catalog::build_named(&common.system)?,
    };
    match common.metric.as_str() {
        "euclidean" => {}
        "symbolic" => {
            if !(0.0 < common.theta && common.theta < 1.0) {
                return Err(Error::Config("theta must lie in (0, 1)".into()));
            }
            system.skew.metric = BaseMetric::Symbolic { theta: common.theta, cap: 48 };
        }
        other => return Err(Error::Config(format!("unknown metric `{other}`"))),
    }
    if common.tol <= 0.0 {
        return Err(Error::Config("tol must be positive".into()));
    }
    if common.grid < 2 || common.z_grid < 2 {
        return Err(Error::Config("grid resolutions must be at least 2".into()));
    }
    validate_system(&system)?;
    Ok(system)
}

fn parse_observable(common: &CommonArgs, system: &SkewSystem) -> fiberdis::Result<FiberObservable> {
    let text = common
        .observable
        .as_deref()
        .ok_or_else(|| Error::Config("--observable is required for this command".into()))?;
    let expr = Expr::parse(text)?;
    FiberObservable::from_expr_sampled(expr, system.skew.fiber.z_min, system.skew.fiber.z_max)
}

fn parse_n_list(text: &str) -> fiberdis::Result<Vec<usize>> {
    let bad = |m: &str| Error::Config(format!("bad n-list `{text}`: {m}"));
    if let Some((a, b)) = text.split_once("..") {
        let lo: usize = a.trim().parse().map_err(|_| bad("range start"))?;
        let hi: usize = b.trim().parse().map_err(|_| bad("range end"))?;
        if lo == 0 || hi < lo {
            return Err(bad("range must be 1-based and increasing"));
        }
        return Ok((lo..=hi).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| bad("entry")))
        .collect()
}

fn tail_tol_for(system: &SkewSystem, tol: f64) -> Option<f64> {
    system
        .skew
        .base
        .is_countable()
        .then_some((tol * 0.1).clamp(1e-6, 1e-3))
}

fn run(cli: Cli) -> fiberdis::Result<ExitCode> {
    match cli.command {
        Command::Density { common, method, resolution } => {
            let system = build_system(&common)?;
            let method = match method.as_str() {
                "analytic" => DensityMethod::Analytic,
                "operator-iteration" => DensityMethod::OperatorIteration,
                other => return Err(Error::Config(format!("unknown method `{other}`"))),
            };
            let density = fiberdis::base::density::invariant_density(
                &system.skew.base,
                method,
                resolution,
                common.tol,
            )?;
            let rows: Vec<Vec<f64>> = base::midpoints(common.grid)
                .into_iter()
                .map(|x| vec![x, density.eval(x), density.deriv(x)])
                .collect();
            let path = match common.format.as_str() {
                "csv" => {
                    let path = common.out.with_extension("csv");
                    write_atomic(&path, csv_text("x,phi,dphi", &rows)?.as_bytes())?;
                    path
                }
                "json" => {
                    let doc = Json::obj(vec![
                        ("columns", Json::Arr(
                            ["x", "phi", "dphi"].iter().map(|c| Json::Str(c.to_string())).collect(),
                        )),
                        ("rows", Json::Arr(
                            rows.iter()
                                .map(|r| Json::Arr(r.iter().map(|&v| Json::Num(v)).collect()))
                                .collect(),
                        )),
                        ("floor", Json::Num(density.floor)),
                        ("derivative_is_exact", Json::Bool(density.derivative_is_exact)),
                    ]);
                    let path = common.out.with_extension("json");
                    write_atomic(&path, doc.render()?.as_bytes())?;
                    path
                }
                other => return Err(Error::Config(format!("unknown format `{other}`"))),
            };
            println!(
                "density of `{}`: floor {}, fixed-point residual {} -> {}",
                system.skew.base.name,
                format_float(density.floor),
                format_float(density.fixed_point_residual),
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eta { common, n_cap, quad_res } => {
            let system = build_system(&common)?;
            let v = parse_observable(&common, &system)?;
            let est = fiberdis::eta::eta_trace(
                &system.skew,
                &system.density,
                &v,
                common.tol,
                n_cap,
                common.z_grid,
                quad_res,
            );
            let rows: Vec<Vec<f64>> = est
                .trace
                .iter()
                .map(|t| vec![t.n as f64, t.lower, t.upper, t.width, t.quad_err, t.trunc_err])
                .collect();
            let csv_path = common.out.with_extension("csv");
            write_atomic(
                &csv_path,
                csv_text("n,lower,upper,width,quad_err,trunc_err", &rows)?.as_bytes(),
            )?;
            let summary = Json::obj(vec![
                ("system", Json::Str(system.skew.base.name.clone())),
                ("observable", Json::Str(v.label.clone())),
                ("value", Json::Num(est.value)),
                ("lower", Json::Num(est.lower)),
                ("upper", Json::Num(est.upper)),
                ("converged", Json::Bool(est.converged)),
                ("depths", Json::Int(est.trace.len() as i64)),
            ]);
            let json_path = common.out.with_extension("json");
            write_atomic(&json_path, summary.render()?.as_bytes())?;
            println!(
                "eta({}) = {} in [{}, {}] -> {}, {}",
                v.label,
                format_float(est.value),
                format_float(est.lower),
                format_float(est.upper),
                csv_path.display(),
                json_path.display()
            );
            if !est.converged {
                return Err(Error::SandwichNotConverged {
                    bracket: est.upper - est.lower,
                    tol: common.tol,
                    n_cap,
                });
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Disintegrate { common, k_gap, n_cap, z0, z0_check } => {
            let mut system = build_system(&common)?;
            if let Some(z0) = z0 {
                if !system.skew.fiber.contains(z0) {
                    return Err(Error::Config(format!(
                        "z0 = {z0} lies outside the fiber interval"
                    )));
                }
                system.skew.fiber.z0 = z0;
            }
            let v = parse_observable(&common, &system)?;
            let xs = base::midpoints(common.grid);
            let tail = tail_tol_for(&system, common.tol);
            let (q, trace) = match common.depth {
                // Fixed depth: evaluate the operator directly; the error
                // bound is the a-priori Cauchy tail at that depth.
                Some(depth) if depth >= 1 => {
                    let m = fiberdis::disint::apply_mn(
                        &system.skew,
                        &system.density,
                        &v,
                        depth,
                        &xs,
                        tail,
                    )?;
                    let apriori = v.lip_z
                        * system.skew.fiber.c_lambda_s
                        * (-system.skew.fiber.lambda_s * depth as f64).exp()
                        * system.skew.fiber.diam();
                    let err = apriori + m.error_bound;
                    (
                        fiberdis::disint::QuotientObservable {
                            xs: xs.clone(),
                            values: m.values,
                            error_bounds: vec![err; xs.len()],
                            depth,
                            z0: system.skew.fiber.z0,
                        },
                        fiberdis::disint::ConvergenceTrace::default(),
                    )
                }
                _ => fiberdis::disint::quotient_observable(
                    &system.skew,
                    &system.density,
                    &v,
                    common.tol,
                    k_gap,
                    n_cap,
                    &xs,
                    tail,
                )?,
            };
            let rows: Vec<Vec<f64>> = q
                .xs
                .iter()
                .zip(&q.values)
                .zip(&q.error_bounds)
                .map(|((&x, &val), &err)| vec![x, val, err])
                .collect();
            let csv_path = common.out.with_extension("csv");
            write_atomic(&csv_path, csv_text("x,vbar,error_bound", &rows)?.as_bytes())?;
            let trace_doc = Json::obj(vec![
                ("system", Json::Str(system.skew.base.name.clone())),
                ("observable", Json::Str(v.label.clone())),
                ("depth", Json::Int(q.depth as i64)),
                ("z0", Json::Num(q.z0)),
                (
                    "trace",
                    Json::Arr(
                        trace
                            .rows
                            .iter()
                            .map(|r| {
                                Json::obj(vec![
                                    ("n", Json::Int(r.n as i64)),
                                    ("measured_diff", Json::Num(r.measured_diff)),
                                    ("apriori_bound", Json::Num(r.apriori_bound)),
                                ])
                            })
                            .collect(),
                    ),
                ),
            ]);
            let json_path = common.out.with_extension("trace.json");
            write_atomic(&json_path, trace_doc.render()?.as_bytes())?;
            println!(
                "vbar({}) on {} points at depth {} -> {}, {}",
                v.label,
                q.xs.len(),
                q.depth,
                csv_path.display(),
                json_path.display()
            );
            if z0_check {
                // Base-point robustness: recompute with a shifted
                // distinguished point; contraction bounds the change.
                let mut shifted = system.clone();
                let quarter = 0.25 * shifted.skew.fiber.diam();
                let moved = if shifted.skew.fiber.z0 + quarter <= shifted.skew.fiber.z_max {
                    shifted.skew.fiber.z0 + quarter
                } else {
                    shifted.skew.fiber.z0 - quarter
                };
                let dz = (moved - shifted.skew.fiber.z0).abs();
                shifted.skew.fiber.z0 = moved;
                let m = fiberdis::disint::apply_mn(
                    &shifted.skew,
                    &shifted.density,
                    &v,
                    q.depth,
                    &xs,
                    tail,
                )?;
                let worst = m
                    .values
                    .iter()
                    .zip(&q.values)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                let bound = v.lip_z
                    * system.skew.fiber.c_lambda_s
                    * (-system.skew.fiber.lambda_s * q.depth as f64).exp()
                    * dz;
                println!(
                    "z0 robustness: shift {} changes vbar by at most {} (bound {})",
                    format_float(dz),
                    format_float(worst),
                    format_float(bound)
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Regularity { common, suite, m_list, pair_samples, sample_count } => {
            let system = build_system(&common)?;
            let n_list = parse_n_list(&common.n_list)?;
            let mut v = parse_observable(&common, &system)?;
            let report = match suite.as_str() {
                "holder" => {
                    if v.holder.is_none() {
                        // Sampled seminorm estimate, flagged by construction.
                        let expr = Expr::parse(common.observable.as_deref().unwrap())?;
                        let sem = sample_product_seminorm(
                            &expr,
                            common.alpha,
                            system.skew.fiber.z_min,
                            system.skew.fiber.z_max,
                        )?;
                        v = v.with_holder(common.alpha, sem);
                    }
                    fiberdis::regularity::holder_suite(
                        &system.skew,
                        &system.density,
                        &v,
                        common.alpha,
                        &n_list,
                        pair_samples,
                        common.seed,
                    )?
                }
                "c1" => fiberdis::regularity::c1_suite(
                    &system.skew,
                    &system.density,
                    &v,
                    &n_list,
                    sample_count,
                    common.seed,
                )?,
                "dk" => {
                    let m_list = parse_n_list(&m_list)?;
                    fiberdis::regularity::dk_decay_suite(
                        &system.skew,
                        &system.density,
                        &v,
                        &n_list,
                        &m_list,
                        sample_count,
                        common.seed,
                    )?
                }
                other => return Err(Error::Config(format!("unknown suite `{other}`"))),
            };
            let path = common.out.with_extension("json");
            write_atomic(&path, regularity_json(&report).render()?.as_bytes())?;
            let pass = report.verdict == fiberdis::base::Verdict::Pass;
            println!(
                "{} suite on {}/{}: {} -> {}",
                report.suite,
                report.system,
                report.observable,
                if pass { "PASS" } else { "FAIL" },
                path.display()
            );
            for violation in &report.violations {
                println!("  violation: {violation}");
            }
            Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(3) })
        }
        Command::Suspend { common, roof, roof_inf, u_grid } => {
            let system = build_system(&common)?;
            let text = common
                .observable
                .as_deref()
                .ok_or_else(|| Error::Config("--observable is required".into()))?;
            let expr = Expr::parse(text)?;
            let (sup, lip) = sample_suspended_bounds(
                &expr,
                system.skew.fiber.z_min,
                system.skew.fiber.z_max,
                roof_inf * 2.0,
            )?;
            let v = SuspendedObservable::from_expr(expr, sup, lip)?;
            let roof =
                RoofFunction::from_expr(Expr::parse(&roof)?, roof_inf, (common.alpha, 1.0))?;
            let xs = base::midpoints(common.grid);
            let field = fiberdis::suspension::suspension_quotient(
                &system.skew,
                &system.density,
                &roof,
                &v,
                &xs,
                u_grid,
                common.tol,
            )?;
            let mut rows = Vec::new();
            for (k, &u) in field.us.iter().enumerate() {
                for (i, &x) in field.xs.iter().enumerate() {
                    rows.push(vec![x, u, field.values[k][i], field.error_bounds[k][i]]);
                }
            }
            let path = common.out.with_extension("csv");
            write_atomic(&path, csv_text("x,u,vbar,error_bound", &rows)?.as_bytes())?;
            println!(
                "suspension quotient of `{}` under roof `{}` on {} cells -> {}",
                v.label,
                roof.label,
                rows.len(),
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { common } => {
            let outcomes = fiberdis::verify::run_all(common.seed);
            let determinism = match fiberdis::verify::determinism_check(common.seed) {
                Ok((passed, detail)) => fiberdis::verify::CriterionOutcome {
                    id: 12,
                    name: "artifact determinism",
                    passed,
                    detail,
                },
                Err(e) => fiberdis::verify::CriterionOutcome {
                    id: 12,
                    name: "artifact determinism",
                    passed: false,
                    detail: format!("error: {e}"),
                },
            };
            let mut all = outcomes;
            all.push(determinism);
            let mut entries = BTreeMap::new();
            for o in &all {
                println!("{}", o.line());
                entries.insert(
                    format!("{:02}", o.id),
                    Json::obj(vec![
                        ("name", Json::Str(o.name.to_string())),
                        ("passed", Json::Bool(o.passed)),
                        ("detail", Json::Str(o.detail.clone())),
                    ]),
                );
            }
            let passed = all.iter().filter(|o| o.passed).count();
            let doc = Json::obj(vec![
                ("criteria", Json::Obj(entries)),
                ("passed", Json::Int(passed as i64)),
                ("total", Json::Int(all.len() as i64)),
                ("seed", Json::Int(common.seed as i64)),
                ("requested_system", Json::Str(common.system.clone())),
            ]);
            let path = common.out.with_extension("json");
            write_atomic(&path, doc.render()?.as_bytes())?;
            println!("{passed}/{} criteria pass -> {}", all.len(), path.display());
            if passed == all.len() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(3))
            }
        }
    }
}

/// Sampled product-space Hölder seminorm of an expression observable
/// (lower-bound estimate inflated by 10%).
fn sample_product_seminorm(
    expr: &Expr,
    alpha: f64,
    z_min: f64,
    z_max: f64,
) -> fiberdis::Result<f64> {
    use fiberdis::expr::Bindings;
    let mut worst = 0.0f64;
    let eval = |x: f64, z: f64| expr.eval(&Bindings::xz(x, z));
    for i in 0..64 {
        let x = 1e-6 + (i as f64 / 63.0) * (1.0 - 2e-6);
        for j in 0..32 {
            let z = z_min + (z_max - z_min) * j as f64 / 31.0;
            let dx = 1e-3;
            let dz = (z_max - z_min) * 1e-3;
            if x + dx < 1.0 {
                let q = (eval(x + dx, z)? - eval(x, z)?).abs() / dx.powf(alpha);
                worst = worst.max(q);
            }
            if z + dz <= z_max {
                let q = (eval(x, z + dz)? - eval(x, z)?).abs() / dz.powf(alpha);
                worst = worst.max(q);
            }
        }
    }
    Ok(worst * 1.1)
}

fn sample_suspended_bounds(
    expr: &Expr,
    z_min: f64,
    z_max: f64,
    u_max: f64,
) -> fiberdis::Result<(f64, f64)> {
    use fiberdis::expr::Bindings;
    let mut sup = 0.0f64;
    let mut lip = 0.0f64;
    let dz = (z_max - z_min) / 32.0;
    for i in 0..=32 {
        let x = 1e-6 + (i as f64 / 32.0) * (1.0 - 2e-6);
        for k in 0..=8 {
            let u = u_max * k as f64 / 8.0;
            let mut prev: Option<f64> = None;
            for j in 0..=32 {
                let z = z_min + dz * j as f64;
                let v = expr.eval(&Bindings::xzu(x, z, u))?;
                sup = sup.max(v.abs());
                if let Some(p) = prev {
                    lip = lip.max((v - p).abs() / dz);
                }
                prev = Some(v);
            }
        }
    }
    Ok((sup * 1.05, lip * 1.1))
}
