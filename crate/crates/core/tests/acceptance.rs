//! End-to-end acceptance criteria. Each test prints one PASS/FAIL line
//! (plus the individual checks) and asserts the criterion.

use rsmp_core::reproduce::{self, CriterionResult};

const SEED: u64 = 0;

fn report(result: CriterionResult) {
    println!("{}", result.summary());
    assert!(result.passed, "{}", result.summary());
}

#[test]
fn criterion_1_example1_state_matches_closed_form() {
    report(reproduce::criterion1(SEED));
}

#[test]
fn criterion_2_example1_adjoints_match_closed_form() {
    report(reproduce::criterion2(SEED));
}

#[test]
fn criterion_3_example1_verdicts() {
    report(reproduce::criterion3(SEED));
}

#[test]
fn criterion_4_example2_candidate_for_positive_sign() {
    report(reproduce::criterion4(1.0, SEED));
}

#[test]
fn criterion_4_example2_excluded_for_negative_sign() {
    report(reproduce::criterion4(-1.0, SEED));
}

#[test]
fn criterion_5_example2_taylor_orders() {
    report(reproduce::criterion5(SEED));
}

#[test]
fn criterion_6_duality_identity() {
    report(reproduce::criterion6(SEED));
}

#[test]
fn criterion_7_invariant_suite() {
    report(reproduce::criterion7(100, SEED));
}

#[test]
fn criterion_8_cost_solver_stability() {
    report(reproduce::criterion8(SEED));
}
