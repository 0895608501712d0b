//! Synthesizes the 5-level controller, runs the closed loop from a
//! perturbed start for 50 switching cycles, and summarizes the trace: safe
//! box containment, the output staircase, and the capacitor excursions.

use flycap::sim::{check_trace, simulate, Controller};
use flycap::ConverterParams;
use nalgebra::DVector;

fn main() -> flycap::Result<()> {
    let params = ConverterParams::five_level_reference();
    let system = params.build_system()?;
    let problem = params.default_problem()?;
    let decomposition = problem.decompose()?;
    println!(
        "controller ready: {} cells over R = {:?}..{:?}",
        decomposition.cells().len(),
        problem.r().lower().as_slice(),
        problem.r().upper().as_slice()
    );

    // A start near the corner of the control box, zero load current.
    let x0 = DVector::from_vec(vec![146.0, 104.0, 46.0, 0.0]);
    let cycles = 50;
    let outcome = simulate(
        &system,
        Controller::Decomposition(&decomposition),
        x0.clone(),
        cycles,
        4,
        |mode, x| params.output_voltage(mode, x),
    )?;
    match &outcome.halt {
        None => println!("ran {cycles} cycles from {:?}", x0.as_slice()),
        Some(halt) => println!(
            "halted at cycle {} (t = {:.4} s): {}",
            halt.cycle, halt.time, halt.reason
        ),
    }

    let report = check_trace(
        &outcome.trace,
        problem.s(),
        problem.controlled_dims(),
        problem.eps(),
        &params.ideal_levels(),
    )?;
    println!(
        "safety: pass = {} over {} samples ({} violations)",
        report.pass, report.samples, report.violations
    );
    println!(
        "worst margins to the safe box per capacitor: {:?}",
        report
            .worst_margins
            .iter()
            .map(|m| (m * 1e3).round() / 1e3)
            .collect::<Vec<_>>()
    );
    println!(
        "output: levels visited {:?} V, span [{:.1}, {:.1}] V, worst distance to an ideal \
         level {:.2} V",
        report.levels_observed, report.output_min, report.output_max, report.max_level_deviation
    );

    let final_state = outcome.trace.final_state();
    println!("final state: {:?}", final_state.as_slice());

    let csv = std::env::temp_dir().join("flycap-closed-loop.csv");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&csv)?);
    outcome.trace.write_csv(&mut out)?;
    println!("trace written to {}", csv.display());
    Ok(())
}
