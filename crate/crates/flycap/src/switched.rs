//! Sampled switched systems: a finite mode set, each mode an affine
//! continuous-time dynamics, advanced in steps of a fixed period `tau`.
//!
//! One-step maps are discretized once at construction; pattern maps and
//! unfoldings are compositions of the cached maps, so repeated reachability
//! queries during synthesis pay no matrix exponentials.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::affine::{AffineMap, ModeDynamics};
use crate::error::{Error, Result};
use crate::geometry::Zonotope;

/// A switch configuration: one bit per switching cell.
///
/// Bit `j` is the state of switch `j`, and the textual form writes switch 0
/// leftmost, so `"0101"` has switches 1 and 3 closed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Mode {
    width: usize,
    bits: u32,
}

impl Mode {
    pub fn new(bits: u32, width: usize) -> Result<Self> {
        if width == 0 || width > 16 {
            return Err(Error::InvalidParameter(format!(
                "mode width {width} outside 1..=16"
            )));
        }
        if bits >> width != 0 {
            return Err(Error::InvalidParameter(format!(
                "mode bits {bits:#b} exceed width {width}"
            )));
        }
        Ok(Self { width, bits })
    }

    pub fn all_clear(width: usize) -> Self {
        Self::new(0, width).expect("width checked by caller")
    }

    pub fn all_set(width: usize) -> Self {
        Self::new((1 << width) - 1, width).expect("width checked by caller")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// State of switch `j`.
    pub fn switch(&self, j: usize) -> bool {
        assert!(j < self.width, "switch index out of range");
        self.bits >> j & 1 == 1
    }

    /// Number of closed switches.
    pub fn weight(&self) -> u32 {
        self.bits.count_ones()
    }

    pub fn with_switch(&self, j: usize, closed: bool) -> Self {
        assert!(j < self.width, "switch index out of range");
        let bits = if closed {
            self.bits | 1 << j
        } else {
            self.bits & !(1 << j)
        };
        Self { width: self.width, bits }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for j in 0..self.width {
            write!(f, "{}", if self.switch(j) { '1' } else { '0' })?;
        }
        Ok(())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.is_empty() || s.len() > 16 {
            return Err(Error::UnknownMode(s.into()));
        }
        let mut bits = 0u32;
        for (j, c) in s.chars().enumerate() {
            match c {
                '1' => bits |= 1 << j,
                '0' => {}
                _ => return Err(Error::UnknownMode(s.into())),
            }
        }
        Mode::new(bits, s.len())
    }
}

/// A finite mode sequence, applied left to right.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pattern(Vec<Mode>);

impl Pattern {
    pub fn new(modes: Vec<Mode>) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::InvalidParameter("empty pattern".into()));
        }
        if modes.windows(2).any(|w| w[0].width() != w[1].width()) {
            return Err(Error::InvalidParameter(
                "pattern mixes mode widths".into(),
            ));
        }
        Ok(Self(modes))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn modes(&self) -> &[Mode] {
        &self.0
    }

    pub fn mode_width(&self) -> usize {
        self.0[0].width()
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, m) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "->")?;
            }
            write!(f, "{m}")?;
        }
        Ok(())
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let modes = s
            .split("->")
            .map(|part| part.trim().parse())
            .collect::<Result<Vec<Mode>>>()?;
        Pattern::new(modes)
    }
}

/// A sampled switched system with cached one-step maps.
pub struct SwitchedSystem {
    tau: f64,
    dim: usize,
    mode_width: usize,
    modes: Vec<Mode>,
    dynamics: Vec<ModeDynamics>,
    step_maps: Vec<AffineMap>,
    index: HashMap<Mode, usize>,
}

impl SwitchedSystem {
    /// Builds the system and discretizes every mode over one period.
    pub fn new(tau: f64, entries: Vec<(Mode, ModeDynamics)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidParameter("no modes".into()));
        }
        let dim = entries[0].1.dim();
        let mode_width = entries[0].0.width();
        let mut modes = Vec::with_capacity(entries.len());
        let mut dynamics = Vec::with_capacity(entries.len());
        let mut step_maps = Vec::with_capacity(entries.len());
        let mut index = HashMap::with_capacity(entries.len());
        for (mode, dy) in entries {
            if dy.dim() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: dy.dim(),
                });
            }
            if mode.width() != mode_width {
                return Err(Error::InvalidParameter(
                    "modes of differing widths".into(),
                ));
            }
            if index.insert(mode, modes.len()).is_some() {
                return Err(Error::InvalidParameter(format!(
                    "duplicate mode {mode}"
                )));
            }
            step_maps.push(dy.discretize(tau)?);
            modes.push(mode);
            dynamics.push(dy);
        }
        Ok(Self {
            tau,
            dim,
            mode_width,
            modes,
            dynamics,
            step_maps,
            index,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode_width(&self) -> usize {
        self.mode_width
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    fn lookup(&self, mode: Mode) -> Result<usize> {
        self.index
            .get(&mode)
            .copied()
            .ok_or_else(|| Error::UnknownMode(mode.to_string()))
    }

    pub fn dynamics(&self, mode: Mode) -> Result<&ModeDynamics> {
        Ok(&self.dynamics[self.lookup(mode)?])
    }

    /// The exact one-period map of `mode`.
    pub fn step_map(&self, mode: Mode) -> Result<&AffineMap> {
        Ok(&self.step_maps[self.lookup(mode)?])
    }

    /// The exact map of a whole pattern: step maps composed left to right.
    pub fn pattern_map(&self, pattern: &Pattern) -> Result<AffineMap> {
        let mut acc = AffineMap::identity(self.dim);
        for &mode in pattern.modes() {
            acc = acc.then(self.step_map(mode)?)?;
        }
        Ok(acc)
    }

    /// Image of `x` after one period of `mode`.
    pub fn post_mode(&self, x: &Zonotope, mode: Mode) -> Result<Zonotope> {
        x.affine_image(self.step_map(mode)?)
    }

    /// Image of `x` after the whole pattern.
    pub fn post_pattern(&self, x: &Zonotope, pattern: &Pattern) -> Result<Zonotope> {
        let mut cur = x.clone();
        for &mode in pattern.modes() {
            cur = self.post_mode(&cur, mode)?;
        }
        Ok(cur)
    }

    /// All sets visited while applying the pattern: the start set followed by
    /// the image after each mode, `pattern.len() + 1` sets in total.
    pub fn unfold(&self, x: &Zonotope, pattern: &Pattern) -> Result<Vec<Zonotope>> {
        let mut sets = Vec::with_capacity(pattern.len() + 1);
        sets.push(x.clone());
        for &mode in pattern.modes() {
            let next = self.post_mode(sets.last().expect("nonempty"), mode)?;
            sets.push(next);
        }
        Ok(sets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dvector, DMatrix, DVector};

    fn scalar_mode(a: f64, b: f64) -> ModeDynamics {
        ModeDynamics::new(DMatrix::from_element(1, 1, a), dvector![b]).unwrap()
    }

    #[test]
    fn mode_text_round_trip() {
        let m: Mode = "0101".parse().unwrap();
        assert_eq!(m.width(), 4);
        assert!(!m.switch(0));
        assert!(m.switch(1));
        assert!(!m.switch(2));
        assert!(m.switch(3));
        assert_eq!(m.weight(), 2);
        assert_eq!(m.to_string(), "0101");
    }

    #[test]
    fn mode_rejects_bad_text() {
        assert!("".parse::<Mode>().is_err());
        assert!("01a1".parse::<Mode>().is_err());
        assert!("2".parse::<Mode>().is_err());
    }

    #[test]
    fn mode_switch_edits() {
        let m = Mode::all_clear(4).with_switch(2, true);
        assert_eq!(m.to_string(), "0010");
        assert_eq!(m.with_switch(2, false), Mode::all_clear(4));
        assert_eq!(Mode::all_set(4).to_string(), "1111");
    }

    #[test]
    fn pattern_text_round_trip() {
        let p: Pattern = "0000->0001->0101".parse().unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p.to_string(), "0000->0001->0101");
        assert!("".parse::<Pattern>().is_err());
        assert!("00->000".parse::<Pattern>().is_err());
    }

    #[test]
    fn pattern_map_matches_manual_composition() {
        // Mode "0": pure drift +1 per unit time. Mode "1": decay rate -1.
        let sys = SwitchedSystem::new(
            1.0,
            vec![
                ("0".parse().unwrap(), scalar_mode(0.0, 1.0)),
                ("1".parse().unwrap(), scalar_mode(-1.0, 0.0)),
            ],
        )
        .unwrap();
        let p: Pattern = "0->1".parse().unwrap();
        let map = sys.pattern_map(&p).unwrap();
        // x -> (x + 1) * e^{-1}
        let x = dvector![2.0];
        let expect = 3.0 * (-1.0f64).exp();
        assert!((map.apply(&x).unwrap()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn unfold_visits_every_intermediate_set() {
        let sys = SwitchedSystem::new(
            1.0,
            vec![("0".parse().unwrap(), scalar_mode(0.0, 1.0))],
        )
        .unwrap();
        let p: Pattern = "0->0->0".parse().unwrap();
        let start = Zonotope::point(DVector::from_element(1, 0.0)).unwrap();
        let sets = sys.unfold(&start, &p).unwrap();
        assert_eq!(sets.len(), 4);
        for (t, s) in sets.iter().enumerate() {
            assert!((s.center()[0] - t as f64).abs() < 1e-12);
        }
        let end = sys.post_pattern(&start, &p).unwrap();
        assert_eq!(end.center(), sets[3].center());
    }

    #[test]
    fn unknown_mode_is_reported() {
        let sys = SwitchedSystem::new(
            1.0,
            vec![("0".parse().unwrap(), scalar_mode(0.0, 0.0))],
        )
        .unwrap();
        let err = sys.step_map("1".parse().unwrap()).unwrap_err();
        assert!(matches!(err, Error::UnknownMode(_)));
    }

    #[test]
    fn duplicate_modes_rejected() {
        let res = SwitchedSystem::new(
            1.0,
            vec![
                ("0".parse().unwrap(), scalar_mode(0.0, 0.0)),
                ("0".parse().unwrap(), scalar_mode(1.0, 0.0)),
            ],
        );
        assert!(res.is_err());
    }
}
