use gdifd_core::gradcheck::{run_gradient_suite, DEFAULT_TOL};
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let report = run_gradient_suite(20, DEFAULT_TOL, 2026).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    for e in &report.entries {
        println!(
            "{:26} {:3} instances {:6} coords max_rel {:.3e} {}",
            e.name,
            e.instances,
            e.coords_checked,
            e.max_rel_err,
            if e.passed { "pass" } else { "FAIL" }
        );
    }
    println!("suite: {} entries in {:.1}s, passed = {}", report.entries.len(), dt, report.passed());
}
