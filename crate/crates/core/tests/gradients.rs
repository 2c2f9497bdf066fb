mod common;

use std::time::Instant;

use common::{gradient_suite, GRAD_TOL};

#[test]
fn every_operation_matches_finite_differences() {
    let t0 = Instant::now();
    let cases = gradient_suite();
    let mut failed = Vec::new();
    for c in &cases {
        let r = &c.report;
        println!(
            "{:<28} coords {:>4}  max rel err {:.2e}",
            c.name, r.coords_checked, r.max_rel_err
        );
        if !r.passes(GRAD_TOL) || r.coords_checked == 0 {
            failed.push(format!(
                "{}: rel err {:.3e} at input {} index {} (analytic {}, numeric {})",
                c.name, r.max_rel_err, r.worst_input, r.worst_index, r.analytic, r.numeric
            ));
        }
    }
    println!("gradient suite took {:?}", t0.elapsed());
    assert!(failed.is_empty(), "{failed:#?}");
}
