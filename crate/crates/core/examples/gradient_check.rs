//! Compares analytic gradients of each objective with central differences
//! on a tiny model and prints the worst relative error per parameter block.

use mrgsrec::sequential::UserState;
use mrgsrec::verify::{check_gradient, gradient_fixture, gradient_weight_sets, GradientInstance};

fn main() -> mrgsrec::Result<()> {
    let (config, params, adj, batch) = gradient_fixture(GradientInstance::default(), UserState::LastItem, 0)?;
    for (name, weights) in gradient_weight_sets() {
        let report = check_gradient(&config, &params, &adj, &batch, &weights, 1e-5, 1e-4)?;
        println!("{name}: max relative error {:.2e}", report.max_rel_error());
        for b in &report.blocks {
            println!("  {:<20} {:.2e}{}", b.name, b.rel_error, if b.passed { "" } else { "  FAIL" });
        }
    }
    Ok(())
}
