//! How a batch is split between the task being learned and replayed data.
//!
//! cargo run --example replay_cap -- [batch]

use tacrl::replay::batch_split;

fn main() {
    let b: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    println!("{:>4} {:>14} {:>14} {:>14}", "n", "beta=1.0", "beta=0.8", "beta=0.5");
    for n in [1, 2, 3, 4, 5, 8, 10, 16, 32] {
        let row: Vec<String> = [1.0, 0.8, 0.5]
            .iter()
            .map(|&beta| {
                let (cur, old) = batch_split(n, b, beta, true);
                format!("{cur:>6} / {old:<6}")
            })
            .collect();
        println!("{n:>4} {}", row.join(" "));
    }
}
