//! Builds the sampled 5-level converter model and inspects it: the affine
//! dynamics of a configuration, the exact one-period step map, and the
//! output staircase at the ideal capacitor setpoints.

use flycap::{ConverterParams, Mode};
use nalgebra::DVector;

fn main() -> flycap::Result<()> {
    let params = ConverterParams::five_level_reference();
    println!(
        "{}-level converter: {} flying capacitors, {} switch pairs, {} modes, tau = {} s",
        params.levels,
        params.n_caps(),
        params.switch_count(),
        1 << params.switch_count(),
        params.tau
    );
    println!(
        "ideal capacitor setpoints: {:?} V, ideal output levels: {:?} V",
        params.ideal_setpoints().as_slice(),
        params.ideal_levels()
    );

    let mode: Mode = "1010".parse()?;
    let dynamics = params.mode_dynamics(mode)?;
    println!("\nconfiguration {mode}: dx/dt = A x + b with");
    println!("A ={:.4}", dynamics.a());
    println!("b ={:.4}", dynamics.b());

    let step = dynamics.discretize(params.tau)?;
    println!("one sampling period, exactly: x' = C x + d with");
    println!("C ={:.6}", step.matrix());
    println!("d ={:.6}", step.offset());

    let system = params.build_system()?;
    let x = DVector::from_iterator(
        4,
        params.ideal_setpoints().iter().copied().chain([0.0]),
    );
    println!("output voltage by configuration at the setpoints:");
    for &mode in system.modes() {
        println!(
            "  {mode} (weight {}): {:>6.1} V",
            mode.weight(),
            params.output_voltage(mode, &x)?
        );
    }
    Ok(())
}
