//! Safe-decomposition synthesis.
//!
//! Given a control box R and safe box S over the controlled dimensions, the
//! synthesizer looks for one switching pattern per cell whose reachable
//! sets return to R with every intermediate set inside S. A cell without a
//! pattern is bisected and the parts are retried, down to a configured
//! depth. The result induces a state-dependent controller: look up the
//! cell containing the sampled state, play its pattern for one cycle.
//!
//! The searcher walks the candidate stream in a fixed order and must return
//! the first match of that order even when running in parallel, so results
//! are identical for any worker count.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine::AffineMap;
use crate::cycles::permutations;
use crate::error::{Error, Result};
use crate::geometry::{DimSet, IntervalBox, Zonotope};
use crate::switched::{Mode, Pattern, SwitchedSystem};

/// Where candidate patterns come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternSource {
    /// The switching-cycle family: close every switch one at a time, then
    /// open them one at a time, ordered lexicographically by the
    /// (closing order, opening order) permutation pair. All patterns have
    /// length twice the switch count.
    Cycles,
    /// Every mode sequence up to length `k`, shorter patterns first,
    /// lexicographic in mode-table order within a length.
    Exhaustive,
}

/// A pattern-synthesis instance over one sampled switched system.
///
/// `r` and `s` are boxes over the controlled dimensions only. Uncontrolled
/// dimensions take their cycle-start values from `initial_slice` and are
/// ignored by every containment check.
pub struct SynthesisProblem {
    system: SwitchedSystem,
    r: IntervalBox,
    s: IntervalBox,
    controlled_dims: DimSet,
    initial_slice: Vec<(f64, f64)>,
    depth: usize,
    k: usize,
    eps: f64,
    subsample: u32,
    source: PatternSource,
    return_bounds: Option<Vec<(f64, f64)>>,
}

impl SynthesisProblem {
    /// Builds a problem with defaults: depth 1, pattern length bound twice
    /// the switch count, strict containment (eps 0), no sub-sampling,
    /// cycle-family candidates.
    pub fn new(
        system: SwitchedSystem,
        r: IntervalBox,
        s: IntervalBox,
        controlled_dims: DimSet,
        initial_slice: Vec<(f64, f64)>,
    ) -> Result<Self> {
        let n = system.dim();
        if controlled_dims.len() != r.dim() || s.dim() != r.dim() {
            return Err(Error::Dimension {
                expected: controlled_dims.len(),
                got: r.dim(),
            });
        }
        if let Some(&d) = controlled_dims.iter().last() {
            if d >= n {
                return Err(Error::Dimension { expected: n, got: d });
            }
        }
        if controlled_dims.is_empty() {
            return Err(Error::InvalidParameter(
                "at least one controlled dimension required".into(),
            ));
        }
        if initial_slice.len() != n - controlled_dims.len() {
            return Err(Error::Dimension {
                expected: n - controlled_dims.len(),
                got: initial_slice.len(),
            });
        }
        for &(lo, hi) in &initial_slice {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "bad initial slice interval [{lo}, {hi}]"
                )));
            }
        }
        if !s.contains_box(&r) {
            return Err(Error::InvalidParameter(
                "safe box must contain the control box".into(),
            ));
        }
        let k = 2 * system.mode_width();
        Ok(Self {
            system,
            r,
            s,
            controlled_dims,
            initial_slice,
            depth: 1,
            k,
            eps: 0.0,
            subsample: 1,
            source: PatternSource::Cycles,
            return_bounds: None,
        })
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_k(mut self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("pattern length bound must be >= 1".into()));
        }
        self.k = k;
        Ok(self)
    }

    pub fn with_eps(mut self, eps: f64) -> Result<Self> {
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::InvalidParameter(format!("eps must be >= 0, got {eps}")));
        }
        self.eps = eps;
        Ok(self)
    }

    pub fn with_subsample(mut self, q: u32) -> Result<Self> {
        if q == 0 {
            return Err(Error::InvalidParameter("subsample factor must be >= 1".into()));
        }
        self.subsample = q;
        Ok(self)
    }

    pub fn with_source(mut self, source: PatternSource) -> Self {
        self.source = source;
        self
    }

    /// Strict mode: additionally require the uncontrolled dimensions to end
    /// the cycle inside these intervals.
    pub fn with_return_bounds(mut self, bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.len() != self.initial_slice.len() {
            return Err(Error::Dimension {
                expected: self.initial_slice.len(),
                got: bounds.len(),
            });
        }
        self.return_bounds = Some(bounds);
        Ok(self)
    }

    pub fn system(&self) -> &SwitchedSystem {
        &self.system
    }

    pub fn r(&self) -> &IntervalBox {
        &self.r
    }

    pub fn s(&self) -> &IntervalBox {
        &self.s
    }

    pub fn controlled_dims(&self) -> &DimSet {
        &self.controlled_dims
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn subsample(&self) -> u32 {
        self.subsample
    }

    pub fn source(&self) -> PatternSource {
        self.source
    }

    pub fn uncontrolled_dims(&self) -> Vec<usize> {
        (0..self.system.dim())
            .filter(|&d| !self.controlled_dims.contains(d))
            .collect()
    }

    /// Fingerprint of the problem geometry, matching
    /// [`problem_fingerprint`] on the same data.
    pub fn fingerprint(&self) -> u64 {
        problem_fingerprint(&self.r, &self.s, &self.controlled_dims, self.system.tau(), self.eps)
    }

    /// Embeds a box over the controlled dimensions into full state space,
    /// uncontrolled dimensions taking their initial-slice intervals.
    pub fn lift(&self, w: &IntervalBox) -> Result<IntervalBox> {
        if w.dim() != self.controlled_dims.len() {
            return Err(Error::Dimension {
                expected: self.controlled_dims.len(),
                got: w.dim(),
            });
        }
        let n = self.system.dim();
        let mut lo = DVector::zeros(n);
        let mut hi = DVector::zeros(n);
        let mut ci = 0;
        let mut ui = 0;
        for d in 0..n {
            if self.controlled_dims.contains(d) {
                let (a, b) = w.interval(ci);
                lo[d] = a;
                hi[d] = b;
                ci += 1;
            } else {
                let (a, b) = self.initial_slice[ui];
                lo[d] = a;
                hi[d] = b;
                ui += 1;
            }
        }
        IntervalBox::new(lo, hi)
    }

    /// First pattern of the configured source, in source order, that maps
    /// `w` back into R with its whole unfolding inside S; `None` when the
    /// stream is exhausted.
    pub fn find_pattern(&self, w: &IntervalBox) -> Result<Option<Pattern>> {
        if !self.r.contains_box(w) {
            return Err(Error::OutOfDomain(format!(
                "search box {w} not inside the control box {}",
                self.r
            )));
        }
        let checker = Checker::new(self)?;
        let counters = Counters::default();
        let best = Best::new();
        let start = Zonotope::from_box(&self.lift(w)?);
        checker.search(&start, &counters, &best)
    }

    /// Full synthesis from the control box at the configured depth.
    pub fn decompose(&self) -> Result<Decomposition> {
        self.decompose_with_stats().map(|(d, _)| d)
    }

    pub fn decompose_with_stats(&self) -> Result<(Decomposition, SynthesisStats)> {
        let checker = Checker::new(self)?;
        let counters = Counters::default();
        let outcome = self.decompose_rec(&checker, &self.r, self.depth, &counters)?;
        let stats = counters.snapshot();
        match outcome {
            Ok(cells) => {
                let d = Decomposition::new(
                    self.r.clone(),
                    self.controlled_dims.clone(),
                    cells,
                    self.fingerprint(),
                )?;
                Ok((d, stats))
            }
            Err(exhausted) => Err(Error::Synthesis(FailureDiagnostics { exhausted })),
        }
    }

    fn decompose_rec(
        &self,
        checker: &Checker<'_>,
        w: &IntervalBox,
        depth_left: usize,
        counters: &Counters,
    ) -> Result<std::result::Result<Vec<DecompositionCell>, Vec<ExhaustedBox>>> {
        counters.cells.fetch_add(1, Ordering::Relaxed);
        let best = Best::new();
        let start = Zonotope::from_box(&self.lift(w)?);
        if let Some(pattern) = checker.search(&start, counters, &best)? {
            return Ok(Ok(vec![DecompositionCell {
                cell: w.clone(),
                pattern,
            }]));
        }
        if depth_left == 0 {
            let (best_margin, best_pattern) = best.take();
            return Ok(Err(vec![ExhaustedBox {
                cell: w.clone(),
                best_margin,
                best_pattern,
            }]));
        }
        let parts = w.bisect(&DimSet::all(w.dim()))?;
        let results = parts
            .par_iter()
            .map(|part| self.decompose_rec(checker, part, depth_left - 1, counters))
            .collect::<Result<Vec<_>>>()?;
        let mut cells = Vec::new();
        let mut failed = Vec::new();
        for r in results {
            match r {
                Ok(cs) => cells.extend(cs),
                Err(es) => failed.extend(es),
            }
        }
        Ok(if failed.is_empty() { Ok(cells) } else { Err(failed) })
    }

    /// Independent re-check of a decomposition against this problem:
    /// coverage of R, per-cell pattern containment, return intervals of the
    /// uncontrolled dimensions.
    pub fn validate(&self, decomposition: &Decomposition) -> Result<ValidationReport> {
        if decomposition.controlled_dims() != &self.controlled_dims {
            return Err(Error::InvalidParameter(
                "decomposition and problem disagree on controlled dimensions".into(),
            ));
        }
        let checker = Checker::new(self)?;
        let cells = decomposition
            .cells()
            .par_iter()
            .enumerate()
            .map(|(i, c)| self.validate_cell(&checker, i, c))
            .collect::<Result<Vec<_>>>()?;
        let coverage = self.check_coverage(decomposition);
        let pass = coverage.pass && cells.iter().all(|c| c.pass);
        Ok(ValidationReport { pass, coverage, cells })
    }

    fn validate_cell(
        &self,
        checker: &Checker<'_>,
        index: usize,
        cell: &DecompositionCell,
    ) -> Result<CellReport> {
        let inside_r = self.r.contains_box(&cell.cell);
        let mut z = Zonotope::from_box(&self.lift(&cell.cell)?);
        let m = cell.pattern.len();
        let mut unfolding_margin = f64::INFINITY;
        let mut first_violation: Option<ViolationSite> = None;
        let note = |element: usize,
                        target: &'static str,
                        margins: &[f64],
                        first: &mut Option<ViolationSite>,
                        worst: Option<&mut f64>| {
            if let Some(w) = worst {
                for &mg in margins {
                    *w = w.min(mg);
                }
            }
            if first.is_none() {
                if let Some((dim, &mg)) = margins
                    .iter()
                    .enumerate()
                    .find(|(_, &mg)| mg < -self.eps)
                {
                    *first = Some(ViolationSite {
                        element,
                        dim,
                        margin: mg,
                        target: target.into(),
                    });
                }
            }
        };
        let margins0 = z.containment_margins(&self.s, &self.controlled_dims);
        note(0, "S", &margins0, &mut first_violation, Some(&mut unfolding_margin));
        for (t, &mode) in cell.pattern.modes().iter().enumerate() {
            for sub in checker.sub_maps.get(&mode).map(Vec::as_slice).unwrap_or(&[]) {
                let zi = z.affine_image(sub)?;
                let margins = zi.containment_margins(&self.s, &self.controlled_dims);
                note(t + 1, "S", &margins, &mut first_violation, Some(&mut unfolding_margin));
            }
            z = z.affine_image(self.system.step_map(mode)?)?;
            let margins = z.containment_margins(&self.s, &self.controlled_dims);
            note(t + 1, "S", &margins, &mut first_violation, Some(&mut unfolding_margin));
        }
        let post_margins = z.containment_margins(&self.r, &self.controlled_dims);
        let mut post_margin = f64::INFINITY;
        note(m, "R", &post_margins, &mut first_violation, Some(&mut post_margin));
        let hull = z.interval_hull();
        let return_interval = self
            .uncontrolled_dims()
            .iter()
            .map(|&d| (hull.lower()[d], hull.upper()[d]))
            .collect();
        let pass = inside_r && unfolding_margin >= -self.eps && post_margin >= -self.eps;
        Ok(CellReport {
            index,
            pass,
            inside_r,
            post_margin,
            unfolding_margin,
            first_violation,
            return_interval,
        })
    }

    fn check_coverage(&self, decomposition: &Decomposition) -> CoverageReport {
        let cells = decomposition.cells();
        let cells_inside_r = cells.iter().all(|c| self.r.contains_box(&c.cell));
        let volume_ratio = if self.r.volume() > 0.0 {
            cells.iter().map(|c| c.cell.volume()).sum::<f64>() / self.r.volume()
        } else {
            f64::NAN
        };
        let mut disjoint_interiors = true;
        'pairs: for i in 0..cells.len() {
            for j in i + 1..cells.len() {
                if open_overlap(&cells[i].cell, &cells[j].cell) {
                    disjoint_interiors = false;
                    break 'pairs;
                }
            }
        }
        // Deterministic grid over R: 11 points per dimension, endpoints
        // included. Every point must land in some cell.
        let k = self.r.dim();
        let mut idx = vec![0usize; k];
        let mut point = DVector::zeros(k);
        let mut checked = 0usize;
        let mut uncovered = 0usize;
        loop {
            for d in 0..k {
                let (lo, hi) = self.r.interval(d);
                point[d] = lo + (hi - lo) * idx[d] as f64 / 10.0;
            }
            checked += 1;
            if !cells.iter().any(|c| c.cell.contains_point(&point)) {
                uncovered += 1;
            }
            let mut d = 0;
            loop {
                if d == k {
                    let pass = cells_inside_r && uncovered == 0;
                    return CoverageReport {
                        pass,
                        cells_inside_r,
                        volume_ratio,
                        disjoint_interiors,
                        grid_points: checked,
                        uncovered_points: uncovered,
                    };
                }
                idx[d] += 1;
                if idx[d] < 11 {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
        }
    }
}

/// True iff the open interiors of two boxes intersect.
fn open_overlap(a: &IntervalBox, b: &IntervalBox) -> bool {
    (0..a.dim()).all(|d| {
        let (alo, ahi) = a.interval(d);
        let (blo, bhi) = b.interval(d);
        alo < bhi && blo < ahi
    })
}

/// Hash of the problem geometry shared by synthesized and loaded
/// decompositions: control and safe boxes, controlled dimensions, sampling
/// period, and containment tolerance.
pub fn problem_fingerprint(
    r: &IntervalBox,
    s: &IntervalBox,
    dims: &DimSet,
    tau: f64,
    eps: f64,
) -> u64 {
    let mut h = DefaultHasher::new();
    for v in r
        .lower()
        .iter()
        .chain(r.upper().iter())
        .chain(s.lower().iter())
        .chain(s.upper().iter())
    {
        v.to_bits().hash(&mut h);
    }
    dims.indices().hash(&mut h);
    tau.to_bits().hash(&mut h);
    eps.to_bits().hash(&mut h);
    h.finish()
}

/// One cell of a decomposition: a box of cycle-start states and the
/// pattern its controller plays.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionCell {
    cell: IntervalBox,
    pattern: Pattern,
}

impl DecompositionCell {
    pub fn new(cell: IntervalBox, pattern: Pattern) -> Self {
        Self { cell, pattern }
    }

    pub fn cell(&self) -> &IntervalBox {
        &self.cell
    }

    pub fn pattern(&self) -> &Pattern {
        &self.pattern
    }
}

/// A safe decomposition: cells covering the control box, each with its
/// pattern, inducing the state-dependent controller.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    r: IntervalBox,
    controlled_dims: DimSet,
    cells: Vec<DecompositionCell>,
    fingerprint: u64,
}

impl Decomposition {
    pub fn new(
        r: IntervalBox,
        controlled_dims: DimSet,
        cells: Vec<DecompositionCell>,
        fingerprint: u64,
    ) -> Result<Self> {
        if controlled_dims.len() != r.dim() {
            return Err(Error::Dimension {
                expected: controlled_dims.len(),
                got: r.dim(),
            });
        }
        for c in &cells {
            if c.cell.dim() != r.dim() {
                return Err(Error::Dimension {
                    expected: r.dim(),
                    got: c.cell.dim(),
                });
            }
        }
        Ok(Self {
            r,
            controlled_dims,
            cells,
            fingerprint,
        })
    }

    pub fn r(&self) -> &IntervalBox {
        &self.r
    }

    pub fn controlled_dims(&self) -> &DimSet {
        &self.controlled_dims
    }

    pub fn cells(&self) -> &[DecompositionCell] {
        &self.cells
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Pattern to play from a full state: the first stored cell containing
    /// the state's controlled projection (ties on shared faces go to the
    /// lowest index). States outside the control box have no pattern.
    pub fn lookup(&self, x: &DVector<f64>) -> Result<&Pattern> {
        if let Some(&d) = self.controlled_dims.iter().last() {
            if d >= x.len() {
                return Err(Error::Dimension {
                    expected: d + 1,
                    got: x.len(),
                });
            }
        }
        let proj =
            DVector::from_iterator(self.controlled_dims.len(), self.controlled_dims.iter().map(|&d| x[d]));
        if !self.r.contains_point(&proj) {
            return Err(Error::OutOfDomain(format!(
                "projection of the state onto the controlled dimensions is outside {}",
                self.r
            )));
        }
        self.cells
            .iter()
            .find(|c| c.cell.contains_point(&proj))
            .map(|c| &c.pattern)
            .ok_or_else(|| {
                Error::OutOfDomain("state inside the control box but covered by no cell".into())
            })
    }
}

/// Work counters from one synthesis or search run. Counts can vary
/// slightly across worker counts (parallel searches may speculatively
/// evaluate candidates past the first match); the synthesized result never
/// does.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct SynthesisStats {
    pub patterns_checked: u64,
    pub nodes_pruned: u64,
    pub boxes_searched: u64,
}

/// A sub-box on which the search exhausted its depth, with the closest
/// miss seen: the best worst-dimension margin over evaluated candidates
/// (an upper bound for candidates cut by pruning) and the pattern that
/// achieved it, when one was fully evaluated.
#[derive(Debug, Clone)]
pub struct ExhaustedBox {
    pub cell: IntervalBox,
    pub best_margin: f64,
    pub best_pattern: Option<Pattern>,
}

#[derive(Debug, Clone)]
pub struct FailureDiagnostics {
    pub exhausted: Vec<ExhaustedBox>,
}

impl fmt::Display for FailureDiagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let best = self
            .exhausted
            .iter()
            .map(|e| e.best_margin)
            .fold(f64::NEG_INFINITY, f64::max);
        write!(
            f,
            "{} sub-box(es) exhausted the bisection depth (best containment margin {best:.4})",
            self.exhausted.len()
        )
    }
}

/// Validator output: one verdict per cell plus the coverage check.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub pass: bool,
    pub coverage: CoverageReport,
    pub cells: Vec<CellReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub pass: bool,
    pub cells_inside_r: bool,
    /// Total cell volume over the control-box volume; 1 for a partition.
    pub volume_ratio: f64,
    pub disjoint_interiors: bool,
    pub grid_points: usize,
    pub uncovered_points: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellReport {
    pub index: usize,
    pub pass: bool,
    pub inside_r: bool,
    /// Worst margin of the cycle-end set against the control box.
    pub post_margin: f64,
    /// Worst margin of any unfolding element against the safe box.
    pub unfolding_margin: f64,
    pub first_violation: Option<ViolationSite>,
    /// Interval hull of the uncontrolled dimensions at cycle end.
    pub return_interval: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ViolationSite {
    /// Unfolding element index (0 is the start set).
    pub element: usize,
    /// Controlled-dimension position (index into the controlled set).
    pub dim: usize,
    pub margin: f64,
    /// Which box was violated: "S" or "R".
    pub target: String,
}

#[derive(Default)]
struct Counters {
    checked: AtomicU64,
    pruned: AtomicU64,
    cells: AtomicU64,
}

impl Counters {
    fn snapshot(&self) -> SynthesisStats {
        SynthesisStats {
            patterns_checked: self.checked.load(Ordering::Relaxed),
            nodes_pruned: self.pruned.load(Ordering::Relaxed),
            boxes_searched: self.cells.load(Ordering::Relaxed),
        }
    }
}

/// Running best-miss tracker, shared across search workers. The margin
/// maximum is order-independent, so failure diagnostics are stable.
struct Best {
    bits: AtomicU64,
    pattern: Mutex<Option<Pattern>>,
}

impl Best {
    fn new() -> Self {
        Self {
            bits: AtomicU64::new(f64::NEG_INFINITY.to_bits()),
            pattern: Mutex::new(None),
        }
    }

    fn update(&self, margin: f64, pattern: Option<&[Mode]>) {
        if margin <= f64::from_bits(self.bits.load(Ordering::Relaxed)) {
            return;
        }
        let mut guard = self.pattern.lock().expect("best tracker poisoned");
        if margin > f64::from_bits(self.bits.load(Ordering::Relaxed)) {
            self.bits.store(margin.to_bits(), Ordering::Relaxed);
            *guard = pattern.map(|m| Pattern::new(m.to_vec()).expect("nonempty searched prefix"));
        }
    }

    fn take(&self) -> (f64, Option<Pattern>) {
        let pattern = self.pattern.lock().expect("best tracker poisoned").clone();
        (f64::from_bits(self.bits.load(Ordering::Relaxed)), pattern)
    }
}

/// Shared search machinery: cached sub-step maps and margin helpers.
struct Checker<'a> {
    problem: &'a SynthesisProblem,
    uncontrolled: Vec<usize>,
    /// Cumulative intra-period maps per mode, at j*tau/q for j=1..q-1.
    sub_maps: HashMap<Mode, Vec<AffineMap>>,
}

impl<'a> Checker<'a> {
    fn new(problem: &'a SynthesisProblem) -> Result<Self> {
        let mut sub_maps = HashMap::new();
        let q = problem.subsample;
        if q > 1 {
            let dt = problem.system.tau() / q as f64;
            for &mode in problem.system.modes() {
                let step = problem.system.dynamics(mode)?.discretize(dt)?;
                let mut cum = Vec::with_capacity(q as usize - 1);
                let mut acc = AffineMap::identity(problem.system.dim());
                for _ in 1..q {
                    acc = acc.then(&step)?;
                    cum.push(acc.clone());
                }
                sub_maps.insert(mode, cum);
            }
        }
        Ok(Self {
            problem,
            uncontrolled: problem.uncontrolled_dims(),
            sub_maps,
        })
    }

    fn s_margin(&self, z: &Zonotope) -> f64 {
        z.containment_margins(&self.problem.s, &self.problem.controlled_dims)
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }

    /// Advances `z` one period under `mode`; the returned margin covers the
    /// landing set and any sub-samples against S.
    fn step(&self, z: &Zonotope, mode: Mode) -> Result<(Zonotope, f64)> {
        let mut margin = f64::INFINITY;
        if let Some(cums) = self.sub_maps.get(&mode) {
            for map in cums {
                margin = margin.min(self.s_margin(&z.affine_image(map)?));
            }
        }
        let img = z.affine_image(self.problem.system.step_map(mode)?)?;
        margin = margin.min(self.s_margin(&img));
        Ok((img, margin))
    }

    /// Cycle-end margin: against R, plus the strict return bounds if set.
    fn final_margin(&self, z: &Zonotope) -> f64 {
        let mut margin = z
            .containment_margins(&self.problem.r, &self.problem.controlled_dims)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if let Some(bounds) = &self.problem.return_bounds {
            let hull = z.interval_hull();
            for (&d, &(lo, hi)) in self.uncontrolled.iter().zip(bounds.iter()) {
                margin = margin.min((hull.lower()[d] - lo).min(hi - hull.upper()[d]));
            }
        }
        margin
    }

    fn search(&self, start: &Zonotope, counters: &Counters, best: &Best) -> Result<Option<Pattern>> {
        let margin0 = self.s_margin(start);
        if margin0 < -self.problem.eps {
            counters.pruned.fetch_add(1, Ordering::Relaxed);
            best.update(margin0, None);
            return Ok(None);
        }
        match self.problem.source {
            PatternSource::Cycles => self.search_cycles(start, margin0, counters, best),
            PatternSource::Exhaustive => self.search_exhaustive(start, margin0, counters, best),
        }
    }

    fn search_cycles(
        &self,
        start: &Zonotope,
        margin0: f64,
        counters: &Counters,
        best: &Best,
    ) -> Result<Option<Pattern>> {
        let w = self.problem.system.mode_width();
        if self.problem.k < 2 * w {
            return Ok(None);
        }
        // Every cycle opens with the all-open mode, so its image is shared.
        let m0 = Mode::all_clear(w);
        let (z1, sm) = self.step(start, m0)?;
        let margin1 = margin0.min(sm);
        if sm < -self.problem.eps {
            counters.pruned.fetch_add(1, Ordering::Relaxed);
            best.update(margin1, None);
            return Ok(None);
        }
        let closings: Vec<Vec<usize>> = permutations(w).collect();
        closings
            .par_iter()
            .find_map_first(|closing| {
                match self.search_one_closing(closing, &z1, margin1, counters, best) {
                    Ok(Some(p)) => Some(Ok(p)),
                    Ok(None) => None,
                    Err(e) => Some(Err(e)),
                }
            })
            .transpose()
    }

    fn search_one_closing(
        &self,
        closing: &[usize],
        z1: &Zonotope,
        margin1: f64,
        counters: &Counters,
        best: &Best,
    ) -> Result<Option<Pattern>> {
        let w = self.problem.system.mode_width();
        let mut modes = Vec::with_capacity(2 * w);
        let mut cur = Mode::all_clear(w);
        modes.push(cur);
        let mut z = z1.clone();
        let mut margin = margin1;
        for &j in closing {
            cur = cur.with_switch(j, true);
            modes.push(cur);
            let (zn, sm) = self.step(&z, cur)?;
            margin = margin.min(sm);
            if sm < -self.problem.eps {
                counters.pruned.fetch_add(1, Ordering::Relaxed);
                best.update(margin, None);
                return Ok(None);
            }
            z = zn;
        }
        self.opening_dfs(cur, &z, margin, &mut modes, counters, best)
    }

    fn opening_dfs(
        &self,
        cur: Mode,
        z: &Zonotope,
        margin: f64,
        modes: &mut Vec<Mode>,
        counters: &Counters,
        best: &Best,
    ) -> Result<Option<Pattern>> {
        let w = cur.width();
        if modes.len() == 2 * w {
            counters.checked.fetch_add(1, Ordering::Relaxed);
            let fm = self.final_margin(z);
            if fm >= -self.problem.eps {
                return Ok(Some(Pattern::new(modes.clone())?));
            }
            best.update(margin.min(fm), Some(modes));
            return Ok(None);
        }
        for j in 0..w {
            if !cur.switch(j) {
                continue;
            }
            let m = cur.with_switch(j, false);
            let (zn, sm) = self.step(z, m)?;
            let nm = margin.min(sm);
            if sm < -self.problem.eps {
                counters.pruned.fetch_add(1, Ordering::Relaxed);
                best.update(nm, None);
                continue;
            }
            modes.push(m);
            if let Some(p) = self.opening_dfs(m, &zn, nm, modes, counters, best)? {
                return Ok(Some(p));
            }
            modes.pop();
        }
        Ok(None)
    }

    fn search_exhaustive(
        &self,
        start: &Zonotope,
        margin0: f64,
        counters: &Counters,
        best: &Best,
    ) -> Result<Option<Pattern>> {
        for len in 1..=self.problem.k {
            let mut modes = Vec::with_capacity(len);
            if let Some(p) =
                self.exhaustive_dfs(start, margin0, len, &mut modes, counters, best)?
            {
                return Ok(Some(p));
            }
        }
        Ok(None)
    }

    fn exhaustive_dfs(
        &self,
        z: &Zonotope,
        margin: f64,
        len: usize,
        modes: &mut Vec<Mode>,
        counters: &Counters,
        best: &Best,
    ) -> Result<Option<Pattern>> {
        if modes.len() == len {
            counters.checked.fetch_add(1, Ordering::Relaxed);
            let fm = self.final_margin(z);
            if fm >= -self.problem.eps {
                return Ok(Some(Pattern::new(modes.clone())?));
            }
            best.update(margin.min(fm), Some(modes));
            return Ok(None);
        }
        for &mode in self.problem.system.modes() {
            let (zn, sm) = self.step(z, mode)?;
            let nm = margin.min(sm);
            if sm < -self.problem.eps {
                counters.pruned.fetch_add(1, Ordering::Relaxed);
                best.update(nm, None);
                continue;
            }
            modes.push(mode);
            if let Some(p) = self.exhaustive_dfs(&zn, nm, len, modes, counters, best)? {
                return Ok(Some(p));
            }
            modes.pop();
        }
        Ok(None)
    }
}

/// Interchange form of a decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn from_box(b: &IntervalBox) -> Self {
        Self {
            lower: b.lower().iter().copied().collect(),
            upper: b.upper().iter().copied().collect(),
        }
    }

    pub fn to_box(&self) -> Result<IntervalBox> {
        IntervalBox::from_slices(&self.lower, &self.upper)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEntry {
    #[serde(rename = "box")]
    pub bounds: BoxBounds,
    pub pattern: Vec<String>,
}

/// On-disk decomposition document: the contract between synthesis,
/// validation, and simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionFile {
    pub levels: usize,
    pub tau: f64,
    pub eps: f64,
    #[serde(rename = "R")]
    pub r: BoxBounds,
    #[serde(rename = "S")]
    pub s: BoxBounds,
    pub controlled_dims: Vec<usize>,
    pub cells: Vec<CellEntry>,
}

impl DecompositionFile {
    pub fn from_decomposition(
        levels: usize,
        tau: f64,
        eps: f64,
        s: &IntervalBox,
        decomposition: &Decomposition,
    ) -> Self {
        Self {
            levels,
            tau,
            eps,
            r: BoxBounds::from_box(decomposition.r()),
            s: BoxBounds::from_box(s),
            controlled_dims: decomposition.controlled_dims().indices().to_vec(),
            cells: decomposition
                .cells()
                .iter()
                .map(|c| CellEntry {
                    bounds: BoxBounds::from_box(c.cell()),
                    pattern: c.pattern().modes().iter().map(Mode::to_string).collect(),
                })
                .collect(),
        }
    }

    pub fn to_decomposition(&self) -> Result<Decomposition> {
        let r = self.r.to_box()?;
        let s = self.s.to_box()?;
        let dims = DimSet::new(self.controlled_dims.clone())?;
        let mut cells = Vec::with_capacity(self.cells.len());
        for entry in &self.cells {
            let b = entry.bounds.to_box()?;
            if b.dim() != r.dim() {
                return Err(Error::Format(format!(
                    "cell box has {} dimensions, control box has {}",
                    b.dim(),
                    r.dim()
                )));
            }
            let modes = entry
                .pattern
                .iter()
                .map(|m| m.parse())
                .collect::<Result<Vec<Mode>>>()?;
            cells.push(DecompositionCell::new(b, Pattern::new(modes)?));
        }
        let fingerprint = problem_fingerprint(&r, &s, &dims, self.tau, self.eps);
        Decomposition::new(r, dims, cells, fingerprint)
    }

    pub fn safe_box(&self) -> Result<IntervalBox> {
        self.s.to_box()
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("serializable by construction");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::ModeDynamics;
    use nalgebra::{dvector, DMatrix};

    /// One-dimensional modes given as (name, a, b) with dx/dt = a x + b.
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

    fn unit_problem(system: SwitchedSystem, s_half: f64) -> SynthesisProblem {
        SynthesisProblem::new(
            system,
            IntervalBox::from_slices(&[-1.0], &[1.0]).unwrap(),
            IntervalBox::from_slices(&[-s_half], &[s_half]).unwrap(),
            DimSet::all(1),
            vec![],
        )
        .unwrap()
    }

    /// dx/dt with a = ln(c)/tau gives the one-period map x -> c x + d with
    /// d = b (c - 1) / a.
    fn drift_for_offset(c: f64, d: f64) -> f64 {
        let a = c.ln();
        d * a / (c - 1.0)
    }

    #[test]
    fn contractive_mode_yields_a_length_one_pattern() {
        let sys = scalar_system(1.0, &[("0", 0.5f64.ln(), 0.0)]);
        let problem = unit_problem(sys, 1.2)
            .with_source(PatternSource::Exhaustive)
            .with_k(1)
            .unwrap();
        let p = problem.find_pattern(problem.r()).unwrap().unwrap();
        assert_eq!(p.to_string(), "0");
    }

    #[test]
    fn single_switch_cycle_search_finds_open_close() {
        let a = 0.25f64.ln();
        let sys = scalar_system(1.0, &[("0", a, 0.0), ("1", a, 0.0)]);
        let problem = unit_problem(sys, 1.2);
        let p = problem.find_pattern(problem.r()).unwrap().unwrap();
        assert_eq!(p.to_string(), "0->1");
    }

    #[test]
    fn runaway_drift_exhausts_any_depth() {
        let sys = scalar_system(1.0, &[("0", 0.0, 3.0)]);
        let problem = unit_problem(sys, 1.1)
            .with_source(PatternSource::Exhaustive)
            .with_k(2)
            .unwrap()
            .with_depth(2);
        assert!(problem.find_pattern(problem.r()).unwrap().is_none());
        match problem.decompose() {
            Err(Error::Synthesis(diag)) => {
                assert_eq!(diag.exhausted.len(), 4);
                assert!(diag.exhausted.iter().all(|e| e.best_margin < 0.0));
            }
            other => panic!("expected synthesis failure, got {other:?}"),
        }
    }

    /// Two drifting contractions, each valid on one half of R only; forces
    /// one bisection and fixes both cells and patterns.
    fn split_problem() -> SynthesisProblem {
        let c: f64 = 0.5;
        let a = c.ln();
        let b = drift_for_offset(c, 0.75);
        let sys = scalar_system(1.0, &[("0", a, -b), ("1", a, b)]);
        unit_problem(sys, 1.5)
            .with_source(PatternSource::Exhaustive)
            .with_k(1)
            .unwrap()
    }

    #[test]
    fn bisection_splits_into_the_derived_cells() {
        let d = split_problem().decompose().unwrap();
        assert_eq!(d.cells().len(), 2);
        assert_eq!(d.cells()[0].cell().interval(0), (-1.0, 0.0));
        assert_eq!(d.cells()[0].pattern().to_string(), "1");
        assert_eq!(d.cells()[1].cell().interval(0), (0.0, 1.0));
        assert_eq!(d.cells()[1].pattern().to_string(), "0");
    }

    #[test]
    fn synthesized_decompositions_validate_cleanly() {
        let problem = split_problem();
        let d = problem.decompose().unwrap();
        let report = problem.validate(&d).unwrap();
        assert!(report.pass);
        assert!(report.coverage.disjoint_interiors);
        assert!((report.coverage.volume_ratio - 1.0).abs() < 1e-12);
        assert_eq!(report.coverage.uncovered_points, 0);
        for cell in &report.cells {
            assert!(cell.pass);
            assert!(cell.post_margin > 0.0);
            assert!(cell.unfolding_margin > 0.0);
            assert!(cell.first_violation.is_none());
            assert!(cell.return_interval.is_empty());
        }
    }

    #[test]
    fn depth_zero_matches_find_pattern() {
        let split = split_problem().with_depth(0);
        assert!(split.find_pattern(split.r()).unwrap().is_none());
        assert!(matches!(split.decompose(), Err(Error::Synthesis(_))));

        let sys = scalar_system(1.0, &[("0", 0.5f64.ln(), 0.0)]);
        let whole = unit_problem(sys, 1.2)
            .with_source(PatternSource::Exhaustive)
            .with_k(1)
            .unwrap()
            .with_depth(0);
        let d = whole.decompose().unwrap();
        assert_eq!(d.cells().len(), 1);
        assert_eq!(d.cells()[0].cell(), whole.r());
    }

    #[test]
    fn extra_depth_changes_nothing_once_cells_succeed() {
        let d1 = split_problem().decompose().unwrap();
        let d2 = split_problem().with_depth(3).decompose().unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn decompositions_are_identical_across_worker_counts() {
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| split_problem().decompose().unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn lookup_follows_stored_order_and_domain() {
        let d = split_problem().decompose().unwrap();
        assert_eq!(d.lookup(&dvector![-0.5]).unwrap().to_string(), "1");
        // Shared face: lowest-index cell wins.
        assert_eq!(d.lookup(&dvector![0.0]).unwrap().to_string(), "1");
        assert_eq!(d.lookup(&dvector![0.5]).unwrap().to_string(), "0");
        assert!(matches!(
            d.lookup(&dvector![2.0]),
            Err(Error::OutOfDomain(_))
        ));
    }

    #[test]
    fn validator_flags_a_wrong_pattern() {
        let problem = split_problem();
        // Cell [-1, 0] with the pattern that drifts further left.
        let bad = Decomposition::new(
            problem.r().clone(),
            problem.controlled_dims().clone(),
            vec![
                DecompositionCell::new(
                    IntervalBox::from_slices(&[-1.0], &[0.0]).unwrap(),
                    "0".parse().unwrap(),
                ),
                DecompositionCell::new(
                    IntervalBox::from_slices(&[0.0], &[1.0]).unwrap(),
                    "0".parse().unwrap(),
                ),
            ],
            0,
        )
        .unwrap();
        let report = problem.validate(&bad).unwrap();
        assert!(!report.pass);
        let c0 = &report.cells[0];
        assert!(!c0.pass);
        assert!((c0.post_margin + 0.25).abs() < 1e-9);
        let v = c0.first_violation.as_ref().unwrap();
        assert_eq!((v.element, v.dim, v.target.as_str()), (1, 0, "R"));
        assert!(report.cells[1].pass);
    }

    #[test]
    fn empty_decomposition_fails_coverage() {
        let problem = split_problem();
        let empty = Decomposition::new(
            problem.r().clone(),
            problem.controlled_dims().clone(),
            vec![],
            0,
        )
        .unwrap();
        let report = problem.validate(&empty).unwrap();
        assert!(!report.pass);
        assert!(!report.coverage.pass);
        assert_eq!(report.coverage.uncovered_points, report.coverage.grid_points);
    }

    #[test]
    fn file_round_trip_preserves_cells_and_fingerprint() {
        let problem = split_problem();
        let d = problem.decompose().unwrap();
        let file = DecompositionFile::from_decomposition(
            2,
            problem.system().tau(),
            problem.eps(),
            problem.s(),
            &d,
        );
        let text = file.to_json();
        let back = DecompositionFile::from_json(&text).unwrap();
        assert_eq!(file, back);
        let d2 = back.to_decomposition().unwrap();
        assert_eq!(d, d2);
        assert_eq!(d.fingerprint(), problem.fingerprint());
    }

    /// Half-turn rotation per period around the origin, no drift.
    fn half_turn_problem() -> SynthesisProblem {
        let omega = std::f64::consts::PI;
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -omega, omega, 0.0]);
        let sys = SwitchedSystem::new(
            1.0,
            vec![(
                "0".parse().unwrap(),
                ModeDynamics::new(a, dvector![0.0, 0.0]).unwrap(),
            )],
        )
        .unwrap();
        let r = IntervalBox::from_slices(&[-1.2, -0.5], &[1.2, 0.5]).unwrap();
        SynthesisProblem::new(sys, r.clone(), r, DimSet::all(2), vec![])
            .unwrap()
            .with_source(PatternSource::Exhaustive)
            .with_k(1)
            .unwrap()
    }

    #[test]
    fn subsample_catches_intra_period_excursions() {
        // Both sampled endpoints of the half turn sit inside the flat safe
        // box; the quarter-turn point does not, so only a sub-sampled
        // check rejects the pattern.
        let w = IntervalBox::from_slices(&[0.9, -0.1], &[1.1, 0.1]).unwrap();
        assert!(half_turn_problem().find_pattern(&w).unwrap().is_some());
        let subsampled = half_turn_problem().with_subsample(4).unwrap();
        assert!(subsampled.find_pattern(&w).unwrap().is_none());
    }

    /// Controlled dim contracts toward 0; the uncontrolled dim starts at 0
    /// and drifts +2 per period.
    fn drifting_current_problem() -> SynthesisProblem {
        let a = DMatrix::from_row_slice(2, 2, &[0.5f64.ln(), 0.0, 0.0, 0.0]);
        let sys = SwitchedSystem::new(
            1.0,
            vec![(
                "0".parse().unwrap(),
                ModeDynamics::new(a, dvector![0.0, 2.0]).unwrap(),
            )],
        )
        .unwrap();
        SynthesisProblem::new(
            sys,
            IntervalBox::from_slices(&[-1.0], &[1.0]).unwrap(),
            IntervalBox::from_slices(&[-1.2], &[1.2]).unwrap(),
            DimSet::new(vec![0]).unwrap(),
            vec![(0.0, 0.0)],
        )
        .unwrap()
        .with_source(PatternSource::Exhaustive)
        .with_k(1)
        .unwrap()
    }

    #[test]
    fn strict_return_bounds_constrain_uncontrolled_dims() {
        let lax = drifting_current_problem();
        let r = lax.r().clone();
        assert!(lax.find_pattern(&r).unwrap().is_some());
        let strict = drifting_current_problem()
            .with_return_bounds(vec![(-1.0, 1.0)])
            .unwrap();
        assert!(strict.find_pattern(&r).unwrap().is_none());
    }

    #[test]
    fn find_pattern_rejects_boxes_outside_r() {
        let problem = split_problem();
        let outside = IntervalBox::from_slices(&[0.5], &[1.5]).unwrap();
        assert!(matches!(
            problem.find_pattern(&outside),
            Err(Error::OutOfDomain(_))
        ));
    }
}
