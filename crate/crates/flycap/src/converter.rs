//! Flying-capacitor multilevel converter model.
//!
//! An `l`-level converter has `l-1` switching cells and state
//! `(v_1, ..., v_{l-2}, i)`: one voltage per flying capacitor plus the load
//! current. Every switch configuration yields affine dynamics, so the whole
//! converter is a sampled switched system with `2^(l-1)` modes.
//!
//! Switch `j` (0-based) carries the bit written `S_{j+1}` in circuit
//! notation; the textual mode form puts `S_1` leftmost.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::affine::ModeDynamics;
use crate::error::{Error, Result};
use crate::geometry::{DimSet, IntervalBox};
use crate::switched::{Mode, SwitchedSystem};
use crate::synthesis::SynthesisProblem;

/// Electrical and synthesis parameters of one converter instance.
///
/// `cap[j]` and `r_par[j]` are the capacitance and parallel bleed
/// resistance of flying capacitor `j+1`; both lists have `levels - 2`
/// entries. `tau` is the sampling period, so one switching cycle lasts
/// `2*(levels-1)*tau`. `tol` is the half-width of the control box around
/// the ideal capacitor voltages and `epsilon` the extra margin of the safe
/// box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConverterParams {
    pub levels: usize,
    pub v_input: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_high: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_low: Option<f64>,
    pub r_load: f64,
    pub l_load: f64,
    pub cap: Vec<f64>,
    pub r_par: Vec<f64>,
    pub tau: f64,
    pub tol: f64,
    pub epsilon: f64,
}

impl ConverterParams {
    /// The 5-level bench: 100 V rails, 50 ohm / 0.2 H load, 1.2 mF
    /// capacitors with 20 kohm bleed resistors, 2.5 ms sampling period
    /// (20 ms cycle).
    pub fn five_level_reference() -> Self {
        Self {
            levels: 5,
            v_input: 100.0,
            v_high: None,
            v_low: None,
            r_load: 50.0,
            l_load: 0.2,
            cap: vec![1.2e-3; 3],
            r_par: vec![20_000.0; 3],
            tau: 2.5e-3,
            tol: 5.0,
            epsilon: 1.0,
        }
    }

    /// The 6-cell bench: 300 V rails, 50 ohm / 0.137 H load, 0.1 F
    /// capacitors, 20 ms cycle split into 12 sampling periods. The bleed
    /// resistors keep the 20 kohm value of the 5-level bench.
    pub fn seven_level_reference() -> Self {
        Self {
            levels: 7,
            v_input: 300.0,
            v_high: None,
            v_low: None,
            r_load: 50.0,
            l_load: 0.137,
            cap: vec![0.1; 5],
            r_par: vec![20_000.0; 5],
            tau: 0.02 / 12.0,
            tol: 5.0,
            epsilon: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 3 || self.levels % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "levels must be an odd integer >= 3, got {}",
                self.levels
            )));
        }
        let nc = self.n_caps();
        if self.cap.len() != nc || self.r_par.len() != nc {
            return Err(Error::InvalidParameter(format!(
                "expected {} capacitances and bleed resistances, got {} and {}",
                nc,
                self.cap.len(),
                self.r_par.len()
            )));
        }
        let positives = [
            ("v_input", self.v_input),
            ("r_load", self.r_load),
            ("l_load", self.l_load),
            ("tau", self.tau),
            ("tol", self.tol),
        ];
        for (name, v) in positives {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        for (name, list) in [("cap", &self.cap), ("r_par", &self.r_par)] {
            if list.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "every {name} entry must be strictly positive"
                )));
            }
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be nonnegative, got {}",
                self.epsilon
            )));
        }
        for (name, v) in [("v_high", self.v_high), ("v_low", self.v_low)] {
            if let Some(v) = v {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "{name} must be strictly positive, got {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of flying capacitors, `levels - 2`.
    pub fn n_caps(&self) -> usize {
        self.levels - 2
    }

    /// State dimension `levels - 1`: capacitor voltages plus current.
    pub fn state_dim(&self) -> usize {
        self.levels - 1
    }

    /// Number of switching cells, `levels - 1`.
    pub fn switch_count(&self) -> usize {
        self.levels - 1
    }

    /// Duration of one full switching cycle, `2*(levels-1)*tau`.
    pub fn cycle_period(&self) -> f64 {
        2.0 * (self.levels - 1) as f64 * self.tau
    }

    pub fn v_high(&self) -> f64 {
        self.v_high.unwrap_or(self.v_input)
    }

    pub fn v_low(&self) -> f64 {
        self.v_low.unwrap_or(self.v_input)
    }

    /// Continuous-time dynamics of one switch configuration.
    ///
    /// Capacitor row `j`: `dv_j/dt = -v_j/(R_j C_j) + (S_j - S_{j+1}) i / C_j`.
    /// Current row: `di/dt = sum_j (S_{j+1} - S_j) v_j / L - (R/L) i + (S_1 v_high - (1 - S_1) v_low) / L`.
    pub fn mode_dynamics(&self, mode: Mode) -> Result<ModeDynamics> {
        self.validate()?;
        if mode.width() != self.switch_count() {
            return Err(Error::Dimension {
                expected: self.switch_count(),
                got: mode.width(),
            });
        }
        let n = self.state_dim();
        let nc = self.n_caps();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        let s = |j: usize| mode.switch(j) as i32 as f64;
        for j in 0..nc {
            a[(j, j)] = -1.0 / (self.r_par[j] * self.cap[j]);
            a[(j, n - 1)] = (s(j) - s(j + 1)) / self.cap[j];
            a[(n - 1, j)] = (s(j + 1) - s(j)) / self.l_load;
        }
        a[(n - 1, n - 1)] = -self.r_load / self.l_load;
        b[n - 1] = (s(0) * self.v_high() - (1.0 - s(0)) * self.v_low()) / self.l_load;
        ModeDynamics::new(a, b)
    }

    /// The full sampled switched system: all `2^(levels-1)` modes
    /// discretized over one sampling period.
    pub fn build_system(&self) -> Result<SwitchedSystem> {
        self.validate()?;
        let w = self.switch_count();
        let mut entries = Vec::with_capacity(1 << w);
        for bits in 0..(1u32 << w) {
            let mode = Mode::new(bits, w)?;
            entries.push((mode, self.mode_dynamics(mode)?));
        }
        SwitchedSystem::new(self.tau, entries)
    }

    /// Instantaneous output voltage for a configuration and capacitor
    /// voltages: `sum_j (S_{j+1} - S_j) v_j + S_1 v_high - (1 - S_1) v_low`.
    /// `v` may be the capacitor-voltage vector or the full state (the
    /// current entry is ignored).
    pub fn output_voltage(&self, mode: Mode, v: &DVector<f64>) -> Result<f64> {
        if mode.width() != self.switch_count() {
            return Err(Error::Dimension {
                expected: self.switch_count(),
                got: mode.width(),
            });
        }
        let nc = self.n_caps();
        if v.len() != nc && v.len() != self.state_dim() {
            return Err(Error::Dimension {
                expected: nc,
                got: v.len(),
            });
        }
        let s = |j: usize| mode.switch(j) as i32 as f64;
        let mut vo = s(0) * self.v_high() - (1.0 - s(0)) * self.v_low();
        for j in 0..nc {
            vo += (s(j + 1) - s(j)) * v[j];
        }
        Ok(vo)
    }

    /// Ideal capacitor voltages: evenly graded taps of the bus,
    /// `v_j* = (levels - 1 - j) * 2 v_input / (levels - 1)`.
    pub fn ideal_setpoints(&self) -> DVector<f64> {
        let l = self.levels as f64;
        DVector::from_iterator(
            self.n_caps(),
            (1..=self.n_caps()).map(|j| (l - 1.0 - j as f64) * 2.0 * self.v_input / (l - 1.0)),
        )
    }

    /// The `levels` ideal output levels, evenly spaced from `-v_input` to
    /// `+v_input`.
    pub fn ideal_levels(&self) -> Vec<f64> {
        let step = 2.0 * self.v_input / (self.levels - 1) as f64;
        (0..self.levels)
            .map(|i| -self.v_input + i as f64 * step)
            .collect()
    }

    /// Control box over the capacitor voltages: setpoints plus/minus `tol`.
    pub fn control_box(&self) -> Result<IntervalBox> {
        self.validate()?;
        let sp = self.ideal_setpoints();
        IntervalBox::new(sp.add_scalar(-self.tol), sp.add_scalar(self.tol))
    }

    /// The standard synthesis problem: control box around the setpoints,
    /// safe box inflated by `epsilon`, capacitor voltages controlled, the
    /// current fixed to 0 at cycle starts, patterns drawn from the
    /// switching-cycle family with length `2*(levels-1)`, one bisection
    /// level allowed.
    pub fn default_problem(&self) -> Result<SynthesisProblem> {
        let r = self.control_box()?;
        let s = r.inflate(self.epsilon)?;
        let system = self.build_system()?;
        SynthesisProblem::new(
            system,
            r,
            s,
            DimSet::new((0..self.n_caps()).collect())?,
            vec![(0.0, 0.0)],
        )?
        .with_k(2 * (self.levels - 1))
    }
}
