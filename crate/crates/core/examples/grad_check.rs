//! Central finite differences over every differentiable component, in f64.

fn main() -> dualdiff::Result<()> {
    let cases = dualdiff::gradsuite::run_suite()?;
    for c in &cases {
        println!(
            "{:<20} {}  max rel err {:.2e} over {} coords",
            c.name,
            if c.report.pass { "pass" } else { "FAIL" },
            c.report.max_rel_err,
            c.report.coords_checked
        );
    }
    let failed = cases.iter().filter(|c| !c.report.pass).count();
    println!("{} cases, {failed} failed (tolerance {:e})", cases.len(), dualdiff::gradsuite::TOL);
    Ok(())
}
