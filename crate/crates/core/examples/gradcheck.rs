//! Grad-check every differentiable op and print the worst relative error.
//!
//! cargo run --release --example gradcheck -- [instances] [seed]

use endonet::tensor::op_suite;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let instances: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    for r in op_suite(instances, seed, 1e-5, 1e-4)? {
        println!("{:<18}{:>4} instances  max rel err {:.2e}  {}", r.op, r.instances, r.max_rel_err, if r.passed { "ok" } else { "FAIL" });
    }
    Ok(())
}
