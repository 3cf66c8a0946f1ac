//! Runs every oracle, causality probe and gradient check the library ships.

use volumix::verify::{causality_probe, gradcheck_suite, oracle_suite};

fn main() -> volumix::Result<()> {
    for r in oracle_suite(200, 0)? {
        println!("{r}");
    }
    let c = causality_probe(100, 0)?;
    println!("scan causal: {}  quasiseparable non-causal: {}", c.scan_is_causal(), c.quasi_is_non_causal());
    for r in gradcheck_suite("all", 0)? {
        println!("{r}");
    }
    Ok(())
}
