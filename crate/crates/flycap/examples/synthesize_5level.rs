//! Synthesizes the state-dependent controller for the 5-level converter
//! and prints the resulting cells and switching cycles.

use std::time::Instant;

use flycap::ConverterParams;

fn main() -> flycap::Result<()> {
    let params = ConverterParams::five_level_reference();
    let problem = params.default_problem()?;
    println!(
        "control box R = {}, safety box S = {}",
        problem.r(),
        problem.s()
    );

    let begin = Instant::now();
    let (decomposition, stats) = problem.decompose_with_stats()?;
    let elapsed = begin.elapsed();

    println!(
        "decomposed into {} cells in {:.2?} ({} patterns checked, {} subtrees pruned)",
        decomposition.cells().len(),
        elapsed,
        stats.patterns_checked,
        stats.nodes_pruned,
    );
    for (i, cell) in decomposition.cells().iter().enumerate() {
        println!("V_{} = {}", i + 1, cell.cell());
        println!("  pi_{} = {}", i + 1, cell.pattern());
    }

    let report = problem.validate(&decomposition)?;
    println!(
        "validation: pass = {}, coverage = {}, worst post margin = {:.6}",
        report.pass,
        report.coverage.pass,
        report
            .cells
            .iter()
            .map(|c| c.post_margin)
            .fold(f64::INFINITY, f64::min),
    );
    Ok(())
}
