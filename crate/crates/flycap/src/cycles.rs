//! The admissible switching cycles of a converter with `w` switching cells.
//!
//! A cycle starts from the all-open configuration, closes every switch one
//! at a time in some order, then opens them one at a time in some order. The
//! final opening step is omitted because the all-open configuration already
//! heads the next cycle, so a cycle visits `2w` configurations and is fully
//! determined by a pair of permutations (closing order, opening order).
//! There are `(w!)^2` such cycles.

use crate::error::{Error, Result};
use crate::switched::{Mode, Pattern};

/// Lexicographic permutations of `0..n`.
pub fn permutations(n: usize) -> Permutations {
    Permutations {
        next: Some((0..n).collect()),
    }
}

pub struct Permutations {
    next: Option<Vec<usize>>,
}

impl Iterator for Permutations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        // Standard next-permutation step; None after the descending one.
        let pivot = succ.windows(2).rposition(|w| w[0] < w[1]);
        if let Some(i) = pivot {
            let j = succ.iter().rposition(|&v| v > succ[i]).expect("pivot exists");
            succ.swap(i, j);
            succ[i + 1..].reverse();
            self.next = Some(succ);
        }
        Some(current)
    }
}

/// The family of switching cycles for a given switch count.
#[derive(Debug, Clone, Copy)]
pub struct CyclePatterns {
    width: usize,
}

impl CyclePatterns {
    pub fn new(width: usize) -> Result<Self> {
        if width == 0 || width > 16 {
            return Err(Error::InvalidParameter(format!(
                "switch count {width} outside 1..=16"
            )));
        }
        Ok(Self { width })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(w!)^2`.
    pub fn count(&self) -> u64 {
        let f: u64 = (1..=self.width as u64).product();
        f * f
    }

    /// The cycle for a given closing and opening order. Both arguments must
    /// be permutations of `0..width`.
    pub fn pattern_for(&self, closing: &[usize], opening: &[usize]) -> Pattern {
        debug_assert!(is_permutation(closing, self.width));
        debug_assert!(is_permutation(opening, self.width));
        let w = self.width;
        let mut modes = Vec::with_capacity(2 * w);
        let mut cur = Mode::all_clear(w);
        modes.push(cur);
        for &j in closing {
            cur = cur.with_switch(j, true);
            modes.push(cur);
        }
        for &j in &opening[..w - 1] {
            cur = cur.with_switch(j, false);
            modes.push(cur);
        }
        Pattern::new(modes).expect("cycle patterns are nonempty and uniform")
    }

    /// All cycles, ordered lexicographically by closing order and then by
    /// opening order.
    pub fn iter(&self) -> impl Iterator<Item = Pattern> + '_ {
        permutations(self.width).flat_map(move |closing| {
            permutations(self.width)
                .map(move |opening| self.pattern_for(&closing, &opening))
        })
    }

    /// Recovers the (closing, opening) orders of a cycle, or `None` if the
    /// pattern is not a cycle of this family.
    pub fn orders_of(&self, pattern: &Pattern) -> Option<(Vec<usize>, Vec<usize>)> {
        let w = self.width;
        let modes = pattern.modes();
        if modes.len() != 2 * w || pattern.mode_width() != w {
            return None;
        }
        if modes[0] != Mode::all_clear(w) {
            return None;
        }
        let mut closing = Vec::with_capacity(w);
        for t in 0..w {
            closing.push(single_flip(modes[t], modes[t + 1], true)?);
        }
        let mut opening = Vec::with_capacity(w);
        for t in w..2 * w - 1 {
            opening.push(single_flip(modes[t], modes[t + 1], false)?);
        }
        // The final opening step is implicit: exactly one switch is left.
        let last = modes[2 * w - 1];
        if last.weight() != 1 {
            return None;
        }
        opening.push(last.bits().trailing_zeros() as usize);
        Some((closing, opening))
    }

    pub fn is_cycle(&self, pattern: &Pattern) -> bool {
        self.orders_of(pattern).is_some()
    }
}

fn is_permutation(order: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    order.len() == n
        && order.iter().all(|&j| {
            j < n && !std::mem::replace(&mut seen[j], true)
        })
}

/// Index of the single switch that changed from `a` to `b` in the given
/// direction, or `None` if the step is not a single flip that way.
fn single_flip(a: Mode, b: Mode, closed: bool) -> Option<usize> {
    let diff = a.bits() ^ b.bits();
    if diff.count_ones() != 1 {
        return None;
    }
    let j = diff.trailing_zeros() as usize;
    (b.switch(j) == closed).then_some(j)
}
