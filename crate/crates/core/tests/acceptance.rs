//! Acceptance gate: runs every criterion at the tolerances pinned in
//! configs/acceptance.toml and prints one PASS/FAIL line per criterion
//! (visible with --nocapture; also available via `malab acceptance`).

use malab::harness::acceptance::run_default_acceptance;

#[test]
fn acceptance_suite() {
    let out = std::env::temp_dir().join(format!("malab-acceptance-{}", std::process::id()));
    let outcome = run_default_acceptance(Some(out.clone())).expect("acceptance suite runs");
    let mut failed = Vec::new();
    for c in &outcome.criteria {
        if !c.pass {
            failed.push(format!("criterion {}: {}\n    {}", c.id, c.name, c.details.join("\n    ")));
        }
    }
    std::fs::remove_dir_all(&out).ok();
    assert!(
        failed.is_empty(),
        "{} acceptance criteria failed:\n{}",
        failed.len(),
        failed.join("\n")
    );
}
