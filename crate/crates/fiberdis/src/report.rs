//! Byte-stable report emission: JSON with sorted keys and fixed float
//! formatting at 17 significant digits, CSV with LF line endings, and
//! atomic file writes. Identical inputs always serialize to identical
//! bytes; non-finite values are refused.

use crate::base::Verdict;
use crate::error::{Error, Result};
use crate::regularity::RegularityReport;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// JSON document tree. Objects keep sorted keys via `BTreeMap`.
#[derive(Debug, Clone)]
pub enum Json {
    Bool(bool),
    Int(i64),
    Num(f64),
    Str(String),
    Arr(Vec<Json>),
    Obj(BTreeMap<String, Json>),
}

impl Json {
    pub fn obj(entries: Vec<(&str, Json)>) -> Json {
        Json::Obj(entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }

    pub fn render(&self) -> Result<String> {
        let mut out = String::new();
        self.render_into(&mut out, "")?;
        Ok(out)
    }

    fn render_into(&self, out: &mut String, field: &str) -> Result<()> {
        match self {
            Json::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            Json::Int(i) => out.push_str(&i.to_string()),
            Json::Num(x) => {
                if !x.is_finite() {
                    return Err(Error::NonFiniteReport(field.to_string()));
                }
                out.push_str(&format_float(*x));
            }
            Json::Str(s) => {
                out.push('"');
                for c in s.chars() {
                    match c {
                        '"' => out.push_str("\\\""),
                        '\\' => out.push_str("\\\\"),
                        '\n' => out.push_str("\\n"),
                        '\t' => out.push_str("\\t"),
                        '\r' => out.push_str("\\r"),
                        c if (c as u32) < 0x20 => {
                            out.push_str(&format!("\\u{:04x}", c as u32));
                        }
                        c => out.push(c),
                    }
                }
                out.push('"');
            }
            Json::Arr(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    item.render_into(out, field)?;
                }
                out.push(']');
            }
            Json::Obj(map) => {
                out.push('{');
                for (i, (k, v)) in map.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    Json::Str(k.clone()).render_into(out, k)?;
                    out.push(':');
                    v.render_into(out, k)?;
                }
                out.push('}');
            }
        }
        Ok(())
    }
}

/// Fixed 17-significant-digit float rendering.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// CSV text with the exact header given, one row per record, LF endings.
pub fn csv_text(header: &str, rows: &[Vec<f64>]) -> Result<String> {
    let mut out = String::with_capacity(rows.len() * 32);
    out.push_str(header);
    out.push('\n');
    for row in rows {
        for (i, v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteReport(format!("csv column {i}")));
            }
            if i > 0 {
                out.push(',');
            }
            out.push_str(&format_float(*v));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Writes through a temp file in the same directory, then renames, so no
/// partial artifact is ever visible.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(io_err)?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp-{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(bytes).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    std::fs::rename(&tmp, path).map_err(io_err)
}

fn verdict_str(v: Verdict) -> &'static str {
    match v {
        Verdict::Pass => "PASS",
        Verdict::Fail => "FAIL",
    }
}

/// The pinned JSON layout of a regularity report.
pub fn regularity_json(report: &RegularityReport) -> Json {
    let params = Json::Obj(
        report
            .params
            .iter()
            .map(|(k, v)| (k.clone(), Json::Str(v.clone())))
            .collect(),
    );
    let tables = Json::Arr(
        report
            .tables
            .iter()
            .map(|t| {
                Json::obj(vec![
                    ("name", Json::Str(t.name.clone())),
                    (
                        "columns",
                        Json::Arr(t.columns.iter().map(|c| Json::Str(c.clone())).collect()),
                    ),
                    (
                        "rows",
                        Json::Arr(
                            t.rows
                                .iter()
                                .map(|r| Json::Arr(r.iter().map(|&v| Json::Num(v)).collect()))
                                .collect(),
                        ),
                    ),
                ])
            })
            .collect(),
    );
    let fitted = match report.fitted {
        Some(f) => Json::obj(vec![
            ("C", Json::Num(f.c)),
            ("lambda", Json::Num(f.lambda)),
            ("ci", Json::Num(f.ci)),
        ]),
        None => Json::Obj(BTreeMap::new()),
    };
    Json::obj(vec![
        ("suite", Json::Str(report.suite.clone())),
        ("system", Json::Str(report.system.clone())),
        ("observable", Json::Str(report.observable.clone())),
        ("params", params),
        ("tables", tables),
        ("fitted", fitted),
        ("verdict", Json::Str(verdict_str(report.verdict).to_string())),
        (
            "violations",
            Json::Arr(report.violations.iter().map(|v| Json::Str(v.clone())).collect()),
        ),
        (
            "meta",
            Json::obj(vec![
                ("pair_count", Json::Int(report.meta.pair_count as i64)),
                ("sample_count", Json::Int(report.meta.sample_count as i64)),
                ("margin", Json::Num(report.meta.margin)),
                ("seed", Json::Int(report.meta.seed as i64)),
                ("excluded_pairs", Json::Int(report.meta.excluded_pairs as i64)),
            ]),
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_identical_bytes() {
        let doc = Json::obj(vec![
            ("b", Json::Num(0.125)),
            ("a", Json::Arr(vec![Json::Int(3), Json::Num(1.0 / 3.0)])),
        ]);
        assert_eq!(doc.render().unwrap(), doc.render().unwrap());
        // Keys come out sorted.
        assert!(doc.render().unwrap().starts_with("{\"a\""));
    }

    #[test]
    fn nan_is_refused() {
        let doc = Json::obj(vec![("x", Json::Num(f64::NAN))]);
        assert!(matches!(doc.render(), Err(Error::NonFiniteReport(_))));
        assert!(csv_text("x", &[vec![f64::INFINITY]]).is_err());
    }

    #[test]
    fn float_formatting_is_17_digits() {
        assert_eq!(format_float(0.125), "1.2500000000000000e-1");
        assert_eq!(format_float(1.0 / 3.0), "3.3333333333333331e-1");
    }

    #[test]
    fn csv_layout() {
        let text = csv_text("x,vbar,error_bound", &[vec![0.5, 0.125, 1e-6]]).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "x,vbar,error_bound");
        assert_eq!(
            lines.next().unwrap(),
            "5.0000000000000000e-1,1.2500000000000000e-1,9.9999999999999995e-7"
        );
        assert!(text.ends_with('\n') && !text.contains('\r'));
    }

    #[test]
    fn atomic_write_round_trip() {
        let dir = std::env::temp_dir().join(format!("fiberdis-report-test-{}", std::process::id()));
        let path = dir.join("out.csv");
        write_atomic(&path, b"x\n1\n").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"x\n1\n");
        write_atomic(&path, b"x\n2\n").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"x\n2\n");
        std::fs::remove_dir_all(&dir).ok();
    }
}
