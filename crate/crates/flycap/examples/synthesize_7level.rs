//! Synthesizes the controller for the 7-level converter (5 capacitor
//! voltages to balance, 64 modes, 518,400 candidate cycles per cell) and
//! validates the result.

use std::time::Instant;

use flycap::ConverterParams;

fn main() -> flycap::Result<()> {
    let params = ConverterParams::seven_level_reference();
    let problem = params.default_problem()?;
    println!("control box R = {}", problem.r());

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
        "validation: pass = {}, worst post margin = {:.6}, worst unfolding margin = {:.6}",
        report.pass,
        report
            .cells
            .iter()
            .map(|c| c.post_margin)
            .fold(f64::INFINITY, f64::min),
        report
            .cells
            .iter()
            .map(|c| c.unfolding_margin)
            .fold(f64::INFINITY, f64::min),
    );
    Ok(())
}
