//! Runs every oracle, the gradient-check suite, and the off-by-one mutation
//! that the distance oracle must catch.

use mixcl::verify::{check_distance_transform, grad_check_suite, off_by_one_distance, run_oracle, ORACLE_NAMES};

fn main() {
    for name in ORACLE_NAMES {
        let o = run_oracle(name, 0).unwrap();
        println!("{:<20} {}  {}", o.name, if o.passed { "pass" } else { "FAIL" }, o.summary);
    }
    for row in grad_check_suite(5, 0).unwrap() {
        println!("{:<14} max relative error {:.2e}", row.loss, row.max_rel_error);
    }
    let mutant = check_distance_transform(50, 8, 0, off_by_one_distance);
    println!("mutated distance transform: {}", mutant.summary);
}
