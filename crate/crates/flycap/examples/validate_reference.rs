//! Loads the checked-in 5-level decomposition and re-checks every cell
//! independently: pattern images back inside the control box, unfoldings
//! inside the safety box, and full coverage of the control box.

use std::path::Path;

use flycap::synthesis::DecompositionFile;
use flycap::{ConverterParams, SynthesisProblem};

fn main() -> flycap::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/five-level-reference.json");
    let file = DecompositionFile::read(&path)?;
    let decomposition = file.to_decomposition()?;
    println!(
        "loaded {} cells for the {}-level converter from {}",
        decomposition.cells().len(),
        file.levels,
        path.display()
    );

    let params = ConverterParams::five_level_reference();
    let problem = SynthesisProblem::new(
        params.build_system()?,
        decomposition.r().clone(),
        file.safe_box()?,
        decomposition.controlled_dims().clone(),
        vec![(0.0, 0.0)],
    )?
    .with_eps(file.eps)?;

    let report = problem.validate(&decomposition)?;
    println!(
        "validation pass = {} (coverage {}, volume ratio {:.3})",
        report.pass, report.coverage.pass, report.coverage.volume_ratio
    );
    for cell in &report.cells {
        println!(
            "cell {}: pass = {}, post margin = {:.6}, unfolding margin = {:.6}, \
             cycle-end current in [{:.4}, {:.4}]",
            cell.index + 1,
            cell.pass,
            cell.post_margin,
            cell.unfolding_margin,
            cell.return_interval[0].0,
            cell.return_interval[0].1,
        );
    }
    if !report.pass {
        std::process::exit(4);
    }
    Ok(())
}
