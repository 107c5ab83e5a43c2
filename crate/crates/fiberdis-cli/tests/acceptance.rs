//! The acceptance suite: one test per verification criterion, each at its
//! pinned tolerance, printing one pass/fail line (visible with
//! `--nocapture`). Criterion 12 drives the installed binary itself.

use fiberdis::verify;
use std::path::PathBuf;
use std::process::Command;

const SEED: u64 = 0;

fn check(result: fiberdis::Result<(bool, String)>, id: usize, name: &str) {
    match result {
        Ok((passed, detail)) => {
            println!("criterion {id:2} {}: {name} — {detail}", if passed { "PASS" } else { "FAIL" });
            assert!(passed, "criterion {id} failed: {detail}");
        }
        Err(e) => panic!("criterion {id} errored: {e}"),
    }
}

#[test]
fn criterion_01_digit_series_oracle() {
    check(verify::digit_series_oracle(), 1, "digit-series oracle");
}

#[test]
fn criterion_02_cancellation_identities() {
    check(verify::cancellation_identities(), 2, "cancellation identities");
}

#[test]
fn criterion_03_operator_identities() {
    check(verify::operator_identities(SEED), 3, "operator identities");
}

#[test]
fn criterion_04_disintegration_identity() {
    check(verify::disintegration_identity(), 4, "disintegration identity");
}

#[test]
fn criterion_05_monte_carlo_cross_check() {
    check(verify::monte_carlo_cross_check(SEED), 5, "Monte-Carlo cross-check");
}

#[test]
fn criterion_06_fiber_sensitivity_bound() {
    check(verify::fiber_sensitivity_bound(), 6, "fiber x-sensitivity bound");
}

#[test]
fn criterion_07_mixed_product_bound() {
    check(verify::mixed_product_bound(), 7, "mixed derivative product decay");
}

#[test]
fn criterion_08_derivative_oracle() {
    check(verify::derivative_oracle(SEED), 8, "quotient derivative oracle");
}

#[test]
fn criterion_09_ratio_trends() {
    check(verify::ratio_trends(SEED), 9, "norm-ratio uniform boundedness");
}

#[test]
fn criterion_10_dk_decay() {
    check(verify::dk_decay(SEED), 10, "differentiated Cauchy decay");
}

#[test]
fn criterion_11_suspension_consistency() {
    check(verify::suspension_consistency(), 11, "suspension slice consistency");
}

/// Criterion 12: `verify` artifacts are byte-identical across a same-seed
/// re-run and across `--threads 1` vs `--threads 8`. The in-process half
/// re-computes the artifact bundle under different rayon pools; the
/// external half runs the real binary on a fast artifact-producing
/// command.
#[test]
fn criterion_12_artifact_determinism() {
    check(verify::determinism_check(SEED), 12, "artifact determinism (in-process)");

    let bin = env!("CARGO_BIN_EXE_fiberdis");
    let dir = std::env::temp_dir().join(format!("fiberdis-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let run = |threads: &str, out: &str| -> Vec<u8> {
        let out_base: PathBuf = dir.join(out);
        let status = Command::new(bin)
            .args([
                "eta",
                "--system",
                "doubling-cos",
                "--observable",
                "z",
                "--tol",
                "1e-4",
                "--seed",
                "0",
                "--threads",
                threads,
                "--out",
            ])
            .arg(&out_base)
            .status()
            .expect("binary runs");
        assert!(status.success(), "eta run failed");
        let mut bytes = std::fs::read(out_base.with_extension("csv")).unwrap();
        bytes.extend(std::fs::read(out_base.with_extension("json")).unwrap());
        bytes
    };
    let first = run("1", "a");
    let second = run("1", "b");
    let eight = run("8", "c");
    assert_eq!(first, second, "same-seed re-run changed artifact bytes");
    assert_eq!(first, eight, "--threads 8 changed artifact bytes");
    println!("criterion 12 PASS: binary artifacts byte-identical across runs and thread counts");
    std::fs::remove_dir_all(&dir).ok();
}
