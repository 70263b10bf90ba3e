//! Finite-difference checks of the attention, loss and backbone derivatives.
//!
//! cargo run --example grad_check -- [points]

use msdetr::gradcheck::{run_suite, TOLERANCE};

fn main() -> msdetr::Result<()> {
    let points = std::env::args().nth(1).map_or(5, |s| s.parse().expect("points must be an integer"));
    for r in run_suite(0, points)? {
        println!(
            "{:<16} {:>4} dims  max rel err {:.2e}  {}",
            r.name,
            r.dims,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAILED" }
        );
    }
    println!("tolerance {TOLERANCE:e}");
    Ok(())
}
