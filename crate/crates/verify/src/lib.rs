//! Acceptance suite for the pipeline. The checks live in `tests/acceptance.rs`;
//! this crate only formats their verdicts.

/// One verdict line: `criterion <n> [PASS|FAIL] <name>: <detail>`.
pub fn verdict(n: usize, name: &str, passed: bool, detail: &str) -> String {
    format!("criterion {n} [{}] {name}: {detail}", if passed { "PASS" } else { "FAIL" })
}
