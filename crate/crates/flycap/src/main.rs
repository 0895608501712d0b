//! Thin command-line front end over the library: model generation,
//! controller synthesis, validation, cycle enumeration, and simulation.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flycap::sim::{check_trace, simulate, Controller};
use flycap::synthesis::DecompositionFile;
use flycap::{ConverterParams, CyclePatterns, Error, Mode, Pattern, SynthesisProblem};

#[derive(Parser)]
#[command(name = "flycap", version, about = "Safe switching control for flying-capacitor converters")]
struct Cli {
    /// Worker threads for synthesis and validation (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Preset {
    /// 5-level benchmark configuration (tau 2.5 ms, 100 V input).
    #[value(name = "paper-5level")]
    Paper5Level,
    /// 7-level benchmark configuration (tau 1.667 ms, 300 V input).
    #[value(name = "paper-7level")]
    Paper7Level,
}

#[derive(Args)]
struct ParamArgs {
    /// Named benchmark configuration.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Converter parameter file (JSON); flags below override its fields.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Output levels (odd, at least 3).
    #[arg(long)]
    levels: Option<usize>,
    /// Sampling period in seconds.
    #[arg(long)]
    tau: Option<f64>,
    /// Input voltage in volts.
    #[arg(long)]
    vinput: Option<f64>,
    /// Load resistance in ohms.
    #[arg(long)]
    rload: Option<f64>,
    /// Load inductance in henries.
    #[arg(long)]
    lload: Option<f64>,
    /// Capacitances, one per flying capacitor (single value repeats).
    #[arg(long, value_delimiter = ',')]
    cap: Option<Vec<f64>>,
    /// Bleed resistances, one per flying capacitor (single value repeats).
    #[arg(long, value_delimiter = ',')]
    rpar: Option<Vec<f64>>,
    /// Half-width of the control box around the ideal voltages.
    #[arg(long)]
    tol: Option<f64>,
    /// Extra margin of the safety box beyond the control box.
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a safe decomposition and write it to a file.
    Synth {
        #[command(flatten)]
        params: ParamArgs,
        /// Maximum bisection depth before giving up.
        #[arg(long)]
        depth: Option<usize>,
        /// Maximum pattern length considered per cell.
        #[arg(long)]
        k: Option<usize>,
        /// Intra-period checks per sampling step.
        #[arg(long)]
        subsample: Option<u32>,
        #[arg(long, default_value = "decomposition.json")]
        out: PathBuf,
    },
    /// Re-check a decomposition file independently of how it was produced.
    Validate {
        file: PathBuf,
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long)]
        subsample: Option<u32>,
    },
    /// Run the closed loop and check the trace against the safety box.
    Simulate {
        /// Decomposition file; optional when --pattern fixes the cycle.
        #[arg(required_unless_present = "pattern")]
        file: Option<PathBuf>,
        /// Fixed switching cycle, e.g. "0000->0001->...".
        #[arg(long)]
        pattern: Option<String>,
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long, default_value_t = 50)]
        cycles: usize,
        /// Full start state (voltages then current), comma-separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        start: Option<Vec<f64>>,
        /// Draw the start voltages uniformly from R (current 0).
        #[arg(long, conflicts_with = "start")]
        seed: Option<u64>,
        #[arg(long)]
        subsample: Option<u32>,
        /// Trace CSV path.
        #[arg(long, default_value = "trace.csv")]
        out: PathBuf,
    },
    /// Count (and optionally list) the candidate switching cycles.
    Enumerate {
        #[arg(long, default_value_t = 5)]
        levels: usize,
        /// Print every pattern, not only the count.
        #[arg(long)]
        verbose: bool,
    },
    /// Print the dynamics of one mode and the ideal operating point.
    Model {
        /// Mode bitstring; defaults to all switches open.
        mode: Option<String>,
        #[command(flatten)]
        params: ParamArgs,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} workers: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Io(_) | Error::Format(_) => 2,
                Error::Synthesis(_) => 3,
                _ => 1,
            })
        }
    }
}

fn run(command: Command) -> flycap::Result<ExitCode> {
    match command {
        Command::Synth {
            params,
            depth,
            k,
            subsample,
            out,
        } => synth(&params, depth, k, subsample, &out),
        Command::Validate {
            file,
            params,
            subsample,
        } => validate(&file, &params, subsample),
        Command::Simulate {
            file,
            pattern,
            params,
            cycles,
            start,
            seed,
            subsample,
            out,
        } => simulate_cmd(
            file.as_deref(),
            pattern.as_deref(),
            &params,
            cycles,
            start,
            seed,
            subsample.unwrap_or(1),
            &out,
        ),
        Command::Enumerate { levels, verbose } => enumerate(levels, verbose),
        Command::Model { mode, params } => model(mode.as_deref(), &params),
    }
}

impl Preset {
    fn params(self) -> ConverterParams {
        match self {
            Preset::Paper5Level => ConverterParams::five_level_reference(),
            Preset::Paper7Level => ConverterParams::seven_level_reference(),
        }
    }
}

/// Base parameters for a level count without a named preset: the two
/// benchmark configurations for 5 and 7, otherwise the 5-level
/// electrical constants with the capacitor lists resized.
fn base_for_levels(levels: usize) -> ConverterParams {
    match levels {
        7 => ConverterParams::seven_level_reference(),
        5 => ConverterParams::five_level_reference(),
        _ => {
            let mut p = ConverterParams::five_level_reference();
            p.levels = levels;
            p.cap = vec![p.cap[0]; levels.saturating_sub(2)];
            p.r_par = vec![p.r_par[0]; levels.saturating_sub(2)];
            p
        }
    }
}

fn resolve_params(args: &ParamArgs, levels_hint: Option<usize>) -> flycap::Result<ConverterParams> {
    let mut p = if let Some(path) = &args.params {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str::<ConverterParams>(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
    } else if let Some(preset) = args.preset {
        preset.params()
    } else {
        base_for_levels(args.levels.or(levels_hint).unwrap_or(5))
    };
    if let Some(levels) = args.levels {
        if levels != p.levels {
            p.levels = levels;
            p.cap = vec![p.cap[0]; levels.saturating_sub(2)];
            p.r_par = vec![p.r_par[0]; levels.saturating_sub(2)];
        }
    }
    if let Some(v) = args.tau {
        p.tau = v;
    }
    if let Some(v) = args.vinput {
        p.v_input = v;
    }
    if let Some(v) = args.rload {
        p.r_load = v;
    }
    if let Some(v) = args.lload {
        p.l_load = v;
    }
    if let Some(cap) = &args.cap {
        p.cap = broadcast(cap, p.levels - 2);
    }
    if let Some(rpar) = &args.rpar {
        p.r_par = broadcast(rpar, p.levels - 2);
    }
    if let Some(v) = args.tol {
        p.tol = v;
    }
    if let Some(v) = args.epsilon {
        p.epsilon = v;
    }
    p.validate()?;
    Ok(p)
}

fn broadcast(values: &[f64], n: usize) -> Vec<f64> {
    if values.len() == 1 {
        vec![values[0]; n]
    } else {
        values.to_vec()
    }
}

fn problem_for(
    params: &ConverterParams,
    depth: Option<usize>,
    k: Option<usize>,
    subsample: Option<u32>,
) -> flycap::Result<SynthesisProblem> {
    let mut problem = params.default_problem()?;
    if let Some(d) = depth {
        problem = problem.with_depth(d);
    }
    if let Some(k) = k {
        problem = problem.with_k(k)?;
    }
    if let Some(q) = subsample {
        problem = problem.with_subsample(q)?;
    }
    Ok(problem)
}

fn synth(
    args: &ParamArgs,
    depth: Option<usize>,
    k: Option<usize>,
    subsample: Option<u32>,
    out: &std::path::Path,
) -> flycap::Result<ExitCode> {
    let params = resolve_params(args, None)?;
    let problem = problem_for(&params, depth, k, subsample)?;
    println!(
        "synthesizing for {} levels: R = {}, depth <= {}, patterns of length <= {}",
        params.levels,
        problem.r(),
        problem.depth(),
        problem.k()
    );
    let begin = Instant::now();
    let result = problem.decompose_with_stats();
    let elapsed = begin.elapsed();
    match result {
        Ok((decomposition, stats)) => {
            println!(
                "{} cells in {:.3?}; {} patterns checked, {} subtrees pruned, {} boxes searched",
                decomposition.cells().len(),
                elapsed,
                stats.patterns_checked,
                stats.nodes_pruned,
                stats.boxes_searched,
            );
            for (i, cell) in decomposition.cells().iter().enumerate() {
                println!("cell {}: {}  {}", i + 1, cell.cell(), cell.pattern());
            }
            let file = DecompositionFile::from_decomposition(
                params.levels,
                params.tau,
                problem.eps(),
                problem.s(),
                &decomposition,
            );
            file.write(out)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            println!(
                "synthesis failed after {:.3?}; counters: {}",
                elapsed,
                match &e {
                    Error::Synthesis(d) => format!("{} exhausted boxes", d.exhausted.len()),
                    _ => "no diagnostics".into(),
                }
            );
            Err(e)
        }
    }
}

fn validate(
    path: &std::path::Path,
    args: &ParamArgs,
    subsample: Option<u32>,
) -> flycap::Result<ExitCode> {
    let file = DecompositionFile::read(path)?;
    let params = resolve_params(args, Some(file.levels))?;
    if params.levels != file.levels {
        return Err(Error::Format(format!(
            "file is for {} levels but parameters describe {}",
            file.levels, params.levels
        )));
    }
    if (params.tau - file.tau).abs() > 1e-12 {
        return Err(Error::Format(format!(
            "file sampling period {} does not match parameter value {}",
            file.tau, params.tau
        )));
    }
    let decomposition = match file.to_decomposition() {
        Ok(d) => d,
        Err(e) => {
            println!("invalid decomposition: {e}");
            return Ok(ExitCode::from(4));
        }
    };
    let mut problem = SynthesisProblem::new(
        params.build_system()?,
        decomposition.r().clone(),
        file.safe_box()?,
        decomposition.controlled_dims().clone(),
        vec![(0.0, 0.0)],
    )?
    .with_eps(file.eps)?;
    if let Some(q) = subsample {
        problem = problem.with_subsample(q)?;
    }
    let begin = Instant::now();
    let report = problem.validate(&decomposition)?;
    println!(
        "validated {} cells in {:.3?} (coverage: {}, volume ratio {:.6})",
        report.cells.len(),
        begin.elapsed(),
        if report.coverage.pass { "ok" } else { "FAILED" },
        report.coverage.volume_ratio,
    );
    for cell in &report.cells {
        print!(
            "cell {}: {}  post margin {:+.6}, unfolding margin {:+.6}, cycle-end current [{:.4}, {:.4}]",
            cell.index + 1,
            if cell.pass { "ok" } else { "FAILED" },
            cell.post_margin,
            cell.unfolding_margin,
            cell.return_interval[0].0,
            cell.return_interval[0].1,
        );
        match &cell.first_violation {
            Some(v) => println!(
                "  (element {} dim {} leaves {} by {:.6})",
                v.element, v.dim, v.target, -v.margin
            ),
            None => println!(),
        }
    }
    if report.pass {
        println!("PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL");
        Ok(ExitCode::from(4))
    }
}

#[allow(clippy::too_many_arguments)]
fn simulate_cmd(
    file: Option<&std::path::Path>,
    pattern: Option<&str>,
    args: &ParamArgs,
    cycles: usize,
    start: Option<Vec<f64>>,
    seed: Option<u64>,
    subsample: u32,
    out: &std::path::Path,
) -> flycap::Result<ExitCode> {
    let stored;
    let parsed;
    let params;
    let controller;
    let s;
    match (file, pattern) {
        (Some(path), _) => {
            let file = DecompositionFile::read(path)?;
            params = resolve_params(args, Some(file.levels))?;
            if params.levels != file.levels {
                return Err(Error::Format(format!(
                    "file is for {} levels but parameters describe {}",
                    file.levels, params.levels
                )));
            }
            if (params.tau - file.tau).abs() > 1e-12 {
                return Err(Error::Format(format!(
                    "file sampling period {} does not match parameter value {}",
                    file.tau, params.tau
                )));
            }
            s = file.safe_box()?;
            stored = file.to_decomposition()?;
            controller = Controller::Decomposition(&stored);
        }
        (None, Some(text)) => {
            params = resolve_params(args, None)?;
            parsed = text.parse::<Pattern>()?;
            s = params.control_box()?.inflate(params.epsilon)?;
            controller = Controller::Fixed(&parsed);
        }
        (None, None) => unreachable!("clap requires file or --pattern"),
    }
    let sys = params.build_system()?;
    let x0 = resolve_start(start, seed, args.preset, &params)?;
    if x0.len() != sys.dim() {
        return Err(Error::Dimension {
            expected: sys.dim(),
            got: x0.len(),
        });
    }
    println!(
        "simulating {} cycles from {:?} with {} sub-samples per period",
        cycles,
        x0.as_slice(),
        subsample
    );
    let begin = Instant::now();
    let outcome = simulate(&sys, controller, x0, cycles, subsample, |mode, x| {
        params.output_voltage(mode, x)
    })?;
    let dims = flycap::DimSet::new((0..params.levels - 2).collect())?;
    let report = check_trace(&outcome.trace, &s, &dims, 0.0, &params.ideal_levels())?;
    println!("simulated in {:.3?}", begin.elapsed());
    if let Some(halt) = &outcome.halt {
        println!(
            "halted at cycle {} (t = {:.6}): {}",
            halt.cycle, halt.time, halt.reason
        );
    }
    let mut csv = std::io::BufWriter::new(std::fs::File::create(out)?);
    outcome.trace.write_csv(&mut csv)?;
    drop(csv);
    println!("wrote {}", out.display());
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?
    );
    if report.pass && outcome.halt.is_none() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(4))
    }
}

fn resolve_start(
    start: Option<Vec<f64>>,
    seed: Option<u64>,
    preset: Option<Preset>,
    params: &ConverterParams,
) -> flycap::Result<DVector<f64>> {
    if let Some(values) = start {
        return Ok(DVector::from_vec(values));
    }
    if let Some(seed) = seed {
        let r = params.control_box()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Vec<f64> = (0..r.dim())
            .map(|i| {
                let (lo, hi) = r.interval(i);
                rng.gen_range(lo..hi)
            })
            .collect();
        x.push(0.0);
        return Ok(DVector::from_vec(x));
    }
    let mut x: Vec<f64> = params.ideal_setpoints().iter().copied().collect();
    x.push(match preset {
        Some(Preset::Paper5Level) => -3.0,
        Some(Preset::Paper7Level) => -2.5,
        None => 0.0,
    });
    Ok(DVector::from_vec(x))
}

fn enumerate(levels: usize, verbose: bool) -> flycap::Result<ExitCode> {
    if levels < 3 || levels % 2 == 0 {
        return Err(Error::InvalidParameter(format!(
            "level count must be odd and at least 3, got {levels}"
        )));
    }
    let cycles = CyclePatterns::new(levels - 1)?;
    let begin = Instant::now();
    if verbose {
        for pattern in cycles.iter() {
            println!("{pattern}");
        }
    }
    println!("{}", cycles.count());
    println!(
        "({} switch pairs, cycles of {} modes, enumerated in {:.3?})",
        levels - 1,
        2 * (levels - 1),
        begin.elapsed()
    );
    Ok(ExitCode::SUCCESS)
}

fn model(mode_text: Option<&str>, args: &ParamArgs) -> flycap::Result<ExitCode> {
    let params = resolve_params(args, None)?;
    let mode = match mode_text {
        Some(text) => text.parse::<Mode>()?,
        None => Mode::all_clear(params.switch_count()),
    };
    if mode.width() != params.switch_count() {
        return Err(Error::Dimension {
            expected: params.switch_count(),
            got: mode.width(),
        });
    }
    let dynamics = params.mode_dynamics(mode)?;
    println!("mode {mode} ({} levels):", params.levels);
    println!("A ={}", dynamics.a());
    println!("b ={}", dynamics.b());
    let setpoints = params.ideal_setpoints();
    println!("ideal capacitor voltages: {:?}", setpoints.as_slice());
    println!("ideal output levels: {:?}", params.ideal_levels());
    let at_setpoint = DVector::from_vec(
        setpoints
            .iter()
            .copied()
            .chain(std::iter::once(0.0))
            .collect::<Vec<_>>(),
    );
    println!(
        "output voltage at the ideal point: {}",
        params.output_voltage(mode, &at_setpoint)?
    );
    Ok(ExitCode::SUCCESS)
}
