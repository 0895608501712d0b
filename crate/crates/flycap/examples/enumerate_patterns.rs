//! Walks the switching-cycle pattern family for increasing converter
//! sizes: counts, the first and last patterns in search order, and the
//! permutation pair that generates a given cycle.

use flycap::CyclePatterns;

fn main() -> flycap::Result<()> {
    for levels in [3usize, 5, 7] {
        let width = levels - 1;
        let cycles = CyclePatterns::new(width)?;
        println!(
            "{levels}-level converter: {} switch pairs, {} admissible cycles",
            width,
            cycles.count()
        );

        let first = cycles.iter().next().expect("family is never empty");
        let last = cycles.iter().last().expect("family is never empty");
        println!("  first: {first}");
        println!("  last:  {last}");

        let (closing, opening) = cycles
            .orders_of(&first)
            .expect("every emitted pattern factors into its orders");
        println!("  first = close {closing:?} then open {opening:?}");
    }

    // Every cycle pays one sampling period per mode: the output period is
    // fixed by the pattern length, not the pattern choice.
    let cycles = CyclePatterns::new(4)?;
    let lengths: std::collections::BTreeSet<usize> = cycles.iter().map(|p| p.len()).collect();
    println!("5-level cycle lengths: {lengths:?} (all equal by construction)");
    Ok(())
}
