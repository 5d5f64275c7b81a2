//! Finite-difference check of every analytic gradient.
//!
//! cargo run --release --example gradcheck [points]

use surfel_pbr::gradcheck::{run_all, GRADCHECK_TOL};

fn main() {
    let points = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let checks = run_all(points, 1);
    for c in &checks {
        println!("{:<34} {:>9.2e} {}", c.name, c.max_rel_error, if c.passed() { "ok" } else { "FAIL" });
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    println!("{} checks at {points} points, tolerance {GRADCHECK_TOL:e}: {failed} failed", checks.len());
    std::process::exit(i32::from(failed > 0));
}
