//! Finite-difference check of every differentiable operation.

fn main() -> tpde::Result<()> {
    let report = tpde::gradcheck::run_suite(tpde::gradcheck::SUITE_TRIALS, 0)?;
    print!("{}", report.to_text());
    Ok(())
}
