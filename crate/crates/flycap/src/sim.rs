//! Closed-loop simulation by exact affine stepping.
//!
//! The simulator never integrates numerically: each sub-step applies the
//! discretized map of the active mode, so a trace is exact up to floating
//! point and safety conclusions carry no integration error. The controller
//! is consulted once per cycle, at the cycle's first sample.

use std::collections::HashMap;

use nalgebra::DVector;
use serde::Serialize;

use crate::affine::AffineMap;
use crate::error::{Error, Result};
use crate::geometry::{DimSet, IntervalBox};
use crate::switched::{Mode, Pattern, SwitchedSystem};
use crate::synthesis::Decomposition;

/// What drives the mode choice at each cycle start.
#[derive(Clone, Copy)]
pub enum Controller<'a> {
    /// State-dependent lookup in a safe decomposition.
    Decomposition(&'a Decomposition),
    /// The same pattern every cycle, regardless of state.
    Fixed(&'a Pattern),
}

/// A sampled trajectory. `modes[j]` is active on `[times[j], times[j+1])`,
/// and `outputs[j]` is the output voltage at `times[j]` under the mode
/// active there (the final sample uses the last active mode), so both run
/// one entry shorter than `times` only when the trace is a bare start
/// point.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    times: Vec<f64>,
    states: Vec<DVector<f64>>,
    modes: Vec<Mode>,
    outputs: Vec<f64>,
}

impl Trace {
    pub fn new(
        times: Vec<f64>,
        states: Vec<DVector<f64>>,
        modes: Vec<Mode>,
        outputs: Vec<f64>,
    ) -> Result<Self> {
        if states.len() != times.len() || modes.len() + 1 != times.len() {
            return Err(Error::Dimension {
                expected: times.len(),
                got: states.len().min(modes.len() + 1),
            });
        }
        let expected_outputs = if modes.is_empty() { 0 } else { times.len() };
        if outputs.len() != expected_outputs {
            return Err(Error::Dimension {
                expected: expected_outputs,
                got: outputs.len(),
            });
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(
                "trace times must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            times,
            states,
            modes,
            outputs,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("a trace holds at least the start")
    }

    /// Writes the trace as CSV: `t,v1,...,v{n-1},i,mode,vo`, one row per
    /// sample, floats with 9 significant digits, the mode as a bitstring.
    /// The last state dimension is taken to be the current.
    pub fn write_csv(&self, out: &mut impl std::io::Write) -> Result<()> {
        let n = self.states[0].len();
        write!(out, "t")?;
        for j in 1..n {
            write!(out, ",v{j}")?;
        }
        writeln!(out, ",i,mode,vo")?;
        for (j, (t, x)) in self.times.iter().zip(self.states.iter()).enumerate() {
            write!(out, "{t:.8e}")?;
            for v in x.iter() {
                write!(out, ",{v:.8e}")?;
            }
            let mode_idx = j.min(self.modes.len().wrapping_sub(1));
            if self.modes.is_empty() {
                writeln!(out, ",,")?;
            } else {
                writeln!(out, ",{},{:.8e}", self.modes[mode_idx], self.outputs[j])?;
            }
        }
        Ok(())
    }
}

/// Why and where a simulation stopped early.
#[derive(Debug, Clone, Serialize)]
pub struct SafetyHalt {
    pub cycle: usize,
    pub time: f64,
    pub reason: String,
}

pub struct SimOutcome {
    pub trace: Trace,
    /// Set when a cycle start left the controller domain; the trace ends
    /// at that sample.
    pub halt: Option<SafetyHalt>,
}

/// Runs `cycles` switching cycles from `x0`, `subsample` exact affine
/// steps per sampling period. `output` computes the instantaneous output
/// voltage for a mode and state.
pub fn simulate<F>(
    system: &SwitchedSystem,
    controller: Controller<'_>,
    x0: DVector<f64>,
    cycles: usize,
    subsample: u32,
    output: F,
) -> Result<SimOutcome>
where
    F: Fn(Mode, &DVector<f64>) -> Result<f64>,
{
    if x0.len() != system.dim() {
        return Err(Error::Dimension {
            expected: system.dim(),
            got: x0.len(),
        });
    }
    if subsample == 0 {
        return Err(Error::InvalidParameter("subsample factor must be >= 1".into()));
    }
    let dt = system.tau() / subsample as f64;
    let mut sub_maps: HashMap<Mode, AffineMap> = HashMap::new();
    let mut times = vec![0.0];
    let mut states = vec![x0];
    let mut modes: Vec<Mode> = Vec::new();
    let mut outputs: Vec<f64> = Vec::new();
    let mut halt = None;
    let mut tick = 0u64;

    'cycles: for cycle in 0..cycles {
        let pattern = match controller {
            Controller::Fixed(p) => p,
            Controller::Decomposition(d) => match d.lookup(states.last().expect("nonempty")) {
                Ok(p) => p,
                Err(Error::OutOfDomain(reason)) => {
                    halt = Some(SafetyHalt {
                        cycle,
                        time: *times.last().expect("nonempty"),
                        reason,
                    });
                    break 'cycles;
                }
                Err(e) => return Err(e),
            },
        };
        for &mode in pattern.modes() {
            if !sub_maps.contains_key(&mode) {
                let map = if subsample == 1 {
                    system.step_map(mode)?.clone()
                } else {
                    system.dynamics(mode)?.discretize(dt)?
                };
                sub_maps.insert(mode, map);
            }
            let map = &sub_maps[&mode];
            for _ in 0..subsample {
                let x = states.last().expect("nonempty");
                outputs.push(output(mode, x)?);
                modes.push(mode);
                let next = map.apply(x)?;
                tick += 1;
                times.push(tick as f64 * dt);
                states.push(next);
            }
        }
    }
    if let Some(&mode) = modes.last() {
        outputs.push(output(mode, states.last().expect("nonempty"))?);
    }
    Ok(SimOutcome {
        trace: Trace::new(times, states, modes, outputs)?,
        halt,
    })
}

/// Where a trace first left the safe box.
#[derive(Debug, Clone, Serialize)]
pub struct TraceViolation {
    pub sample: usize,
    pub dim: usize,
    pub margin: f64,
}

/// Containment and waveform summary of one trace.
#[derive(Debug, Clone, Serialize)]
pub struct TraceReport {
    pub pass: bool,
    pub samples: usize,
    pub violations: usize,
    pub first_violation: Option<TraceViolation>,
    /// Worst containment margin per checked dimension, over all samples.
    pub worst_margins: Vec<f64>,
    /// Distinct ideal levels the output visited, ascending.
    pub levels_observed: Vec<f64>,
    /// Largest distance from an output sample to its nearest ideal level.
    pub max_level_deviation: f64,
    pub output_min: f64,
    pub output_max: f64,
}

/// Checks every sampled state of `trace` against `s` on the listed
/// dimensions (inflated by `eps`) and classifies the output waveform
/// against the ideal `levels`.
pub fn check_trace(
    trace: &Trace,
    s: &IntervalBox,
    dims: &DimSet,
    eps: f64,
    levels: &[f64],
) -> Result<TraceReport> {
    if s.dim() != dims.len() {
        return Err(Error::Dimension {
            expected: dims.len(),
            got: s.dim(),
        });
    }
    if levels.is_empty() {
        return Err(Error::InvalidParameter("no ideal output levels given".into()));
    }
    let n = trace.states()[0].len();
    if let Some(&d) = dims.iter().last() {
        if d >= n {
            return Err(Error::Dimension { expected: n, got: d });
        }
    }
    let mut worst = vec![f64::INFINITY; dims.len()];
    let mut violations = 0usize;
    let mut first_violation = None;
    for (sample, x) in trace.states().iter().enumerate() {
        let mut bad = false;
        for (j, &d) in dims.iter().enumerate() {
            let (lo, hi) = s.interval(j);
            let margin = (x[d] - lo).min(hi - x[d]);
            worst[j] = worst[j].min(margin);
            if margin < -eps {
                bad = true;
                if first_violation.is_none() {
                    first_violation = Some(TraceViolation { sample, dim: j, margin });
                }
            }
        }
        if bad {
            violations += 1;
        }
    }
    let mut observed: Vec<f64> = Vec::new();
    let mut max_dev: f64 = 0.0;
    let mut out_min = f64::NAN;
    let mut out_max = f64::NAN;
    for &vo in trace.outputs() {
        let nearest = levels
            .iter()
            .copied()
            .min_by(|a, b| {
                (a - vo).abs().partial_cmp(&(b - vo).abs()).expect("finite levels")
            })
            .expect("nonempty levels");
        max_dev = max_dev.max((vo - nearest).abs());
        if !observed.contains(&nearest) {
            observed.push(nearest);
        }
        out_min = if out_min.is_nan() { vo } else { out_min.min(vo) };
        out_max = if out_max.is_nan() { vo } else { out_max.max(vo) };
    }
    observed.sort_by(|a, b| a.partial_cmp(b).expect("finite levels"));
    Ok(TraceReport {
        pass: violations == 0,
        samples: trace.len(),
        violations,
        first_violation,
        worst_margins: worst,
        levels_observed: observed,
        max_level_deviation: max_dev,
        output_min: out_min,
        output_max: out_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::ModeDynamics;
    use crate::synthesis::{DecompositionCell, Decomposition};
    use nalgebra::{dvector, DMatrix};

    fn scalar_system(tau: f64, entries: &[(&str, f64, f64)]) -> SwitchedSystem {
        SwitchedSystem::new(
            tau,
            entries
                .iter()
                .map(|&(name, a, b)| {
                    (
                        name.parse().unwrap(),
                        ModeDynamics::new(DMatrix::from_element(1, 1, a), dvector![b]).unwrap(),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn state_output(_: Mode, x: &DVector<f64>) -> Result<f64> {
        Ok(x[0])
    }

    #[test]
    fn zero_cycles_keeps_only_the_start() {
        let sys = scalar_system(1.0, &[("0", 0.0, 1.0)]);
        let p: Pattern = "0".parse().unwrap();
        let out = simulate(&sys, Controller::Fixed(&p), dvector![7.0], 0, 1, state_output).unwrap();
        assert!(out.halt.is_none());
        assert_eq!(out.trace.times(), &[0.0]);
        assert_eq!(out.trace.states(), &[dvector![7.0]]);
        assert!(out.trace.modes().is_empty());
        assert!(out.trace.outputs().is_empty());
    }

    #[test]
    fn drift_advances_one_unit_per_period() {
        let sys = scalar_system(1.0, &[("0", 0.0, 1.0)]);
        let p: Pattern = "0".parse().unwrap();
        let out = simulate(&sys, Controller::Fixed(&p), dvector![0.0], 3, 1, state_output).unwrap();
        assert_eq!(out.trace.times(), &[0.0, 1.0, 2.0, 3.0]);
        for (t, x) in out.trace.times().iter().zip(out.trace.states()) {
            assert!((x[0] - t).abs() < 1e-12);
        }
        assert_eq!(out.trace.modes().len(), 3);
        assert_eq!(out.trace.outputs().len(), 4);
        assert!((out.trace.outputs()[3] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn subsampling_refines_without_changing_the_endpoint() {
        let sys = scalar_system(1.0, &[("0", -0.7, 0.3)]);
        let p: Pattern = "0->0".parse().unwrap();
        let coarse =
            simulate(&sys, Controller::Fixed(&p), dvector![1.0], 2, 1, state_output).unwrap();
        let fine =
            simulate(&sys, Controller::Fixed(&p), dvector![1.0], 2, 4, state_output).unwrap();
        assert_eq!(fine.trace.len(), 17);
        assert_eq!(coarse.trace.len(), 5);
        for (j, t) in coarse.trace.times().iter().enumerate() {
            let fj = 4 * j;
            assert!((fine.trace.times()[fj] - t).abs() < 1e-12);
            let a = coarse.trace.states()[j][0];
            let b = fine.trace.states()[fj][0];
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn single_cell_controller_equals_its_fixed_pattern() {
        let sys = scalar_system(1.0, &[("0", 0.5f64.ln(), 0.0)]);
        let r = IntervalBox::from_slices(&[-1.0], &[1.0]).unwrap();
        let pattern: Pattern = "0".parse().unwrap();
        let d = Decomposition::new(
            r.clone(),
            DimSet::all(1),
            vec![DecompositionCell::new(r, pattern.clone())],
            0,
        )
        .unwrap();
        let a = simulate(
            &sys,
            Controller::Decomposition(&d),
            dvector![0.8],
            5,
            1,
            state_output,
        )
        .unwrap();
        let b = simulate(&sys, Controller::Fixed(&pattern), dvector![0.8], 5, 1, state_output)
            .unwrap();
        assert!(a.halt.is_none());
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn leaving_the_control_box_halts_at_the_cycle_start() {
        let sys = scalar_system(1.0, &[("0", 0.0, 0.75)]);
        let r = IntervalBox::from_slices(&[-1.0], &[1.0]).unwrap();
        let pattern: Pattern = "0".parse().unwrap();
        let d = Decomposition::new(
            r.clone(),
            DimSet::all(1),
            vec![DecompositionCell::new(r, pattern)],
            0,
        )
        .unwrap();
        let out = simulate(
            &sys,
            Controller::Decomposition(&d),
            dvector![0.5],
            10,
            1,
            state_output,
        )
        .unwrap();
        let halt = out.halt.expect("drift must leave the box");
        assert_eq!(halt.cycle, 1);
        assert_eq!(halt.time, 1.0);
        assert_eq!(out.trace.len(), 2);
        assert!((out.trace.final_state()[0] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn check_trace_margins_and_levels() {
        let times = vec![0.0, 1.0, 2.0];
        let states = vec![dvector![0.0], dvector![0.4], dvector![-0.2]];
        let modes = vec!["0".parse().unwrap(), "0".parse().unwrap()];
        let outputs = vec![-99.0, -1.0, 52.0];
        let trace = Trace::new(times, states, modes, outputs).unwrap();
        let s = IntervalBox::from_slices(&[-0.5], &[0.5]).unwrap();
        let report = check_trace(
            &trace,
            &s,
            &DimSet::all(1),
            0.0,
            &[-100.0, -50.0, 0.0, 50.0, 100.0],
        )
        .unwrap();
        assert!(report.pass);
        assert_eq!(report.violations, 0);
        assert!((report.worst_margins[0] - 0.1).abs() < 1e-12);
        assert_eq!(report.levels_observed, vec![-100.0, 0.0, 50.0]);
        assert!((report.max_level_deviation - 2.0).abs() < 1e-12);
        assert_eq!(report.output_min, -99.0);
        assert_eq!(report.output_max, 52.0);
    }

    #[test]
    fn check_trace_locates_the_first_violation() {
        let times = vec![0.0, 1.0];
        let states = vec![dvector![0.0], dvector![0.7]];
        let modes = vec!["0".parse().unwrap()];
        let outputs = vec![0.0, 0.0];
        let trace = Trace::new(times, states, modes, outputs).unwrap();
        let s = IntervalBox::from_slices(&[-0.5], &[0.5]).unwrap();
        let report = check_trace(&trace, &s, &DimSet::all(1), 0.0, &[0.0]).unwrap();
        assert!(!report.pass);
        assert_eq!(report.violations, 1);
        let v = report.first_violation.unwrap();
        assert_eq!((v.sample, v.dim), (1, 0));
        assert!((v.margin + 0.2).abs() < 1e-12);
    }

    #[test]
    fn csv_has_the_stated_header_and_digits() {
        let sys = scalar_system(1.0, &[("0", 0.0, 1.0)]);
        let p: Pattern = "0".parse().unwrap();
        let out = simulate(
            &sys,
            Controller::Fixed(&p),
            dvector![150.0],
            1,
            1,
            |_, x| Ok(x[0] - 150.0),
        )
        .unwrap();
        let mut buf = Vec::new();
        out.trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,i,mode,vo"));
        assert_eq!(
            lines.next(),
            Some("0.00000000e0,1.50000000e2,0,0.00000000e0")
        );
        assert_eq!(
            lines.next(),
            Some("1.00000000e0,1.51000000e2,0,1.00000000e0")
        );
    }

    #[test]
    fn csv_headers_name_voltages_then_current() {
        let times = vec![0.0];
        let states = vec![dvector![150.0, 100.0, 50.0, -3.0]];
        let trace = Trace::new(times, states, vec![], vec![]).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,v1,v2,v3,i,mode,vo"));
        assert_eq!(
            lines.next(),
            Some("0.00000000e0,1.50000000e2,1.00000000e2,5.00000000e1,-3.00000000e0,,")
        );
    }
}
