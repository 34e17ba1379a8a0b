//! Finite-difference check of every autograd op and of the full decoder
//! fields in f64.

use pflux::harness::gradsuite;

fn main() {
    let report = gradsuite::run(1).expect("gradient suite");
    println!("max op error    {:.3e} (tolerance {:.0e})", report.max_op_error(), gradsuite::OP_TOLERANCE);
    println!("max field error {:.3e} (tolerance {:.0e})", report.max_field_error(), gradsuite::FIELD_TOLERANCE);
    println!("{}", if report.passed() { "passed" } else { "FAILED" });
}
