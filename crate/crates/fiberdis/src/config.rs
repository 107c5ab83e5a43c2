//! Flat key = value configuration files with `[section]` headers, used to
//! define custom systems and run parameters. No external schema: the
//! format is line-oriented and trivially diffable in test fixtures.
//!
//! ```text
//! [system]
//! name = custom
//! branch_endpoints = 0, 0.5, 1
//! branch_0 = 2*x
//! branch_1 = 2*x - 1
//! lambda = 0.6931471805599453
//! c_lambda = 1
//! fiber = (z + cos(2*pi*x))/3
//! fiber_min = -1
//! fiber_max = 1
//! z0 = 0
//! lambda_s = 1.0986122886681098
//! ```

use crate::base::{
    Branch, BranchFormula, BranchSet, DeclaredConstants, ExpandingMap, Smoothness,
    BOUNDARY_MARGIN,
};
use crate::base::{BaseMetric, DensityMethod};
use crate::catalog::{self, SkewSystem};
use crate::error::{Error, Result};
use crate::expr::{Bindings, Expr, Var};
use crate::skew::{FiberKind, FiberMap, FiberRegularity, SkewDeclared, SkewProduct};
use std::collections::BTreeMap;

/// Parsed sections of a config file.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<RawConfig> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::from("");
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                current = name.trim().to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            sections
                .entry(current.clone())
                .or_default()
                .insert(key.trim().to_string(), value.trim().trim_matches('"').to_string());
        }
        Ok(RawConfig { sections })
    }

    pub fn load(path: &std::path::Path) -> Result<RawConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        RawConfig::parse(&text)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section).and_then(|s| s.get(key)).map(|s| s.as_str())
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str> {
        self.get(section, key).ok_or_else(|| {
            Error::Config(format!("missing key `{key}` in section [{section}]"))
        })
    }

    pub fn get_f64(&self, section: &str, key: &str) -> Result<Option<f64>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(s) => s
                .parse::<f64>()
                .map(Some)
                .map_err(|_| Error::Config(format!("key `{key}`: `{s}` is not a number"))),
        }
    }

    pub fn require_f64(&self, section: &str, key: &str) -> Result<f64> {
        self.get_f64(section, key)?.ok_or_else(|| {
            Error::Config(format!("missing numeric key `{key}` in section [{section}]"))
        })
    }
}

/// Builds the system described by a config: a catalog name or a full
/// custom definition (branch endpoints plus expression-language branch
/// formulas and fiber). The assembled system is validated before use.
pub fn system_from_config(cfg: &RawConfig) -> Result<SkewSystem> {
    let name = cfg.require("system", "name")?;
    if name != "custom" {
        let mut system = catalog::build_named(name)?;
        apply_metric(cfg, &mut system)?;
        return Ok(system);
    }

    let endpoints: Vec<f64> = cfg
        .require("system", "branch_endpoints")?
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config("branch_endpoints must be comma-separated numbers".into()))?;
    if endpoints.len() < 2 || endpoints[0] != 0.0 || *endpoints.last().unwrap() != 1.0 {
        return Err(Error::Config(
            "branch_endpoints must start at 0, end at 1, and list every cut point".into(),
        ));
    }
    if endpoints.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("branch_endpoints must be strictly increasing".into()));
    }
    let mut branches = Vec::new();
    for i in 0..endpoints.len() - 1 {
        let text = cfg.require("system", &format!("branch_{i}"))?;
        let expr = Expr::parse(text)?;
        if expr.uses(Var::Z) || expr.uses(Var::U) {
            return Err(Error::Config(format!("branch_{i} may only depend on x")));
        }
        branches.push(Branch {
            lo: endpoints[i],
            hi: endpoints[i + 1],
            formula: BranchFormula::Custom(expr),
        });
    }

    let smoothness = match cfg.get("system", "smoothness").unwrap_or("c2") {
        "c2" => Smoothness::C2,
        s if s.starts_with("c1a:") => {
            let alpha = s[4..].parse::<f64>().map_err(|_| {
                Error::Config("smoothness must be `c2` or `c1a:<alpha>`".into())
            })?;
            Smoothness::C1Alpha(alpha)
        }
        other => return Err(Error::Config(format!("unknown smoothness `{other}`"))),
    };
    let constants = DeclaredConstants {
        lambda: cfg.require_f64("system", "lambda")?,
        c_lambda: cfg.get_f64("system", "c_lambda")?.unwrap_or(1.0),
        c_j: cfg.get_f64("system", "c_j")?.unwrap_or(f64::INFINITY),
        c_j_prime: cfg.get_f64("system", "c_j_prime")?.unwrap_or(f64::INFINITY),
        c_d: cfg.get_f64("system", "c_d")?.unwrap_or(f64::INFINITY),
        certified: matches!(cfg.get("system", "constants"), Some("certified")),
    };
    if constants.lambda <= 0.0 {
        return Err(Error::Config("lambda must be positive".into()));
    }
    let base = ExpandingMap {
        name: cfg.get("system", "label").unwrap_or("custom").to_string(),
        branch_set: BranchSet::Finite(branches),
        constants,
        smoothness,
        boundary_margin: BOUNDARY_MARGIN,
        min_slope: cfg.get_f64("system", "min_slope")?.unwrap_or(1.0),
        exact_binary_shift: false,
        known_density: None,
    };
    validate_expanding(&base)?;

    let fiber_expr = Expr::parse(cfg.require("system", "fiber")?)?;
    if fiber_expr.uses(Var::U) {
        return Err(Error::Config("fiber may only depend on x and z".into()));
    }
    if fiber_expr.has_nonsmooth_ops() {
        return Err(Error::Config(
            "custom fibers must be smooth expressions (the catalog provides the piecewise one)"
                .into(),
        ));
    }
    let fiber = FiberMap {
        z_min: cfg.require_f64("system", "fiber_min")?,
        z_max: cfg.require_f64("system", "fiber_max")?,
        kind: FiberKind::Custom(fiber_expr),
        lambda_s: cfg.require_f64("system", "lambda_s")?,
        c_lambda_s: cfg.get_f64("system", "c_lambda_s")?.unwrap_or(1.0),
        n0: cfg.get_f64("system", "n0")?.unwrap_or(1.0) as u32,
        z0: match cfg.get_f64("system", "z0")? {
            Some(z0) => z0,
            None => {
                0.5 * (cfg.require_f64("system", "fiber_min")?
                    + cfg.require_f64("system", "fiber_max")?)
            }
        },
        regularity: FiberRegularity::Smooth,
    };
    if fiber.z_max <= fiber.z_min {
        return Err(Error::Config("fiber interval is empty".into()));
    }
    if !fiber.contains(fiber.z0) {
        return Err(Error::Config("z0 must lie in the fiber interval".into()));
    }

    let density_res = cfg.get_f64("density", "resolution")?.unwrap_or(1024.0) as usize;
    let density_tol = cfg.get_f64("density", "tol")?.unwrap_or(1e-9);
    let density = crate::base::density::invariant_density(
        &base,
        DensityMethod::OperatorIteration,
        density_res,
        density_tol,
    )?;

    let mut system = SkewSystem {
        id: None,
        skew: SkewProduct {
            base,
            fiber,
            metric: BaseMetric::Euclidean,
            declared: SkewDeclared::default(),
        },
        density,
    };
    apply_metric(cfg, &mut system)?;
    validate_system(&system)?;
    Ok(system)
}

fn apply_metric(cfg: &RawConfig, system: &mut SkewSystem) -> Result<()> {
    match cfg.get("metric", "kind") {
        None | Some("euclidean") => Ok(()),
        Some("symbolic") => {
            let theta = cfg.require_f64("metric", "theta")?;
            if !(0.0 < theta && theta < 1.0) {
                return Err(Error::Config("theta must lie in (0, 1)".into()));
            }
            let cap = cfg.get_f64("metric", "cap")?.unwrap_or(48.0) as u32;
            system.skew.metric = BaseMetric::Symbolic { theta, cap };
            Ok(())
        }
        Some(other) => Err(Error::Config(format!("unknown metric `{other}`"))),
    }
}

/// Construction-time checks of a custom base map: branches map onto the
/// full interval, monotonically, with slope of one sign and magnitude
/// above 1.
fn validate_expanding(map: &ExpandingMap) -> Result<()> {
    let branches = match &map.branch_set {
        BranchSet::Finite(b) => b,
        BranchSet::Countable(_) => return Ok(()),
    };
    for (i, branch) in branches.iter().enumerate() {
        let eval = |x: f64| -> Result<f64> {
            match &branch.formula {
                BranchFormula::Affine { a, b } => Ok(a * x + b),
                BranchFormula::Custom(e) => e.eval(&Bindings::x_only(x)),
            }
        };
        let eps = 1e-9 * (branch.hi - branch.lo);
        let at_lo = eval(branch.lo + eps)?;
        let at_hi = eval(branch.hi - eps)?;
        let endpoints_ok = ((at_lo.abs() < 1e-6 && (at_hi - 1.0).abs() < 1e-6)
            || ((at_lo - 1.0).abs() < 1e-6 && at_hi.abs() < 1e-6))
            && at_lo.is_finite()
            && at_hi.is_finite();
        if !endpoints_ok {
            return Err(Error::Config(format!(
                "branch_{i} must map its interval onto (0, 1): endpoints map to {at_lo} and {at_hi}"
            )));
        }
        let mut last: Option<f64> = None;
        for k in 0..200 {
            let x = branch.lo + (branch.hi - branch.lo) * (k as f64 + 0.5) / 200.0;
            let v = eval(x)?;
            if let Some(prev) = last {
                let slope = (v - prev) / ((branch.hi - branch.lo) / 200.0);
                if slope.abs() < map.min_slope.max(1.0) - 1e-9 {
                    return Err(Error::Config(format!(
                        "branch_{i} is not expanding near x = {x}: |slope| = {}",
                        slope.abs()
                    )));
                }
                if (at_hi > at_lo) != (slope > 0.0) {
                    return Err(Error::Config(format!(
                        "branch_{i} is not monotone near x = {x}"
                    )));
                }
            }
            last = Some(v);
        }
    }
    Ok(())
}

/// Config-level system validation: fiber invariance spot-checked on 1e4
/// points, positive tolerances implied by construction.
pub fn validate_system(system: &SkewSystem) -> Result<()> {
    let fiber = &system.skew.fiber;
    let xs = crate::base::low_discrepancy_points(100, 1e-6);
    let zs = crate::skew::z_grid(fiber, 100);
    for &x in &xs {
        let branch = system.skew.base.branch_of(x)?;
        for &z in &zs {
            let gz = fiber.eval_on_branch(branch, x, z);
            if !fiber.contains(gz) {
                return Err(Error::Config(format!(
                    "fiber is not invariant: G({x}, {z}) = {gz} leaves [{}, {}]",
                    fiber.z_min, fiber.z_max
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::low_discrepancy_points;

    const DOUBLING_CLONE: &str = r#"
# A custom definition that reproduces the binary shift system.
[system]
name = custom
label = doubling-custom
branch_endpoints = 0, 0.5, 1
branch_0 = 2*x
branch_1 = 2*x - 1
lambda = 0.6931471805599453
c_lambda = 1
c_j = 0.1
c_j_prime = 1.1
c_d = 0.1
min_slope = 2
fiber = (z + cos(2*pi*x))/3
fiber_min = -1
fiber_max = 1
z0 = 0
lambda_s = 1.0986122886681098

[density]
resolution = 512
tol = 1e-10
"#;

    #[test]
    fn parses_sections_and_values() {
        let cfg = RawConfig::parse("a = 1\n[s]\nkey = two words\n# comment\n").unwrap();
        assert_eq!(cfg.get("", "a"), Some("1"));
        assert_eq!(cfg.get("s", "key"), Some("two words"));
        assert!(cfg.get("s", "missing").is_none());
        assert!(RawConfig::parse("[s]\nbroken line\n").is_err());
    }

    #[test]
    fn custom_system_reproduces_builtin() {
        let cfg = RawConfig::parse(DOUBLING_CLONE).unwrap();
        let custom = system_from_config(&cfg).unwrap();
        let builtin = catalog::build(catalog::SystemId::DoublingCos);
        for x in low_discrepancy_points(20, 1e-6) {
            let a = crate::skew::forward_iterate(
                &custom.skew,
                crate::skew::FiberPoint { x, z: 0.3 },
                3,
            )
            .unwrap();
            let b = crate::skew::forward_iterate(
                &builtin.skew,
                crate::skew::FiberPoint { x, z: 0.3 },
                3,
            )
            .unwrap();
            assert!((a.x - b.x).abs() < 1e-9, "x: {} vs {}", a.x, b.x);
            assert!((a.z - b.z).abs() < 1e-9, "z: {} vs {}", a.z, b.z);
        }
        // The iterated density is flat like the analytic one.
        for x in low_discrepancy_points(10, 1e-3) {
            assert!((custom.density.eval(x) - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_non_onto_branches() {
        let bad = DOUBLING_CLONE.replace("branch_1 = 2*x - 1", "branch_1 = x - 0.5");
        let cfg = RawConfig::parse(&bad).unwrap();
        assert!(matches!(system_from_config(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_fiber_escaping_interval() {
        let bad = DOUBLING_CLONE.replace(
            "fiber = (z + cos(2*pi*x))/3",
            "fiber = 2*z + cos(2*pi*x)",
        );
        let cfg = RawConfig::parse(&bad).unwrap();
        assert!(system_from_config(&cfg).is_err());
    }

    #[test]
    fn rejects_catalog_name_typos() {
        let cfg = RawConfig::parse("[system]\nname = doubling-cis\n").unwrap();
        assert!(matches!(system_from_config(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn symbolic_metric_from_config() {
        let text = format!("{DOUBLING_CLONE}\n[metric]\nkind = symbolic\ntheta = 0.5\n");
        let cfg = RawConfig::parse(&text).unwrap();
        let system = system_from_config(&cfg).unwrap();
        assert!(matches!(
            system.skew.metric,
            BaseMetric::Symbolic { theta, .. } if theta == 0.5
        ));
    }
}
