//! Runs the finite-difference suite and prints the worst relative error per
//! operation.
//!
//! cargo run --example gradcheck

use corrseg::gradcheck_suite::{run_suite, DEFAULT_SEEDS};

fn main() -> corrseg::Result<()> {
    let start = std::time::Instant::now();
    let report = run_suite(&DEFAULT_SEEDS)?;
    println!("{report}");
    println!("{:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
