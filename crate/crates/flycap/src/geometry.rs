//! Box and zonotope set calculus.
//!
//! Reachable sets of affine maps are tracked as zonotopes: a box becomes a
//! zonotope with one axis-aligned generator per dimension, and affine images
//! keep the generator count, so sets never grow in representation size. The
//! interval hull of a zonotope is tight per dimension, which makes
//! zonotope-in-box containment checks exact rather than conservative.

use std::fmt;

use nalgebra::DVector;

use crate::affine::AffineMap;
use crate::error::{Error, Result};

/// An axis-aligned box: the cartesian product of closed intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBox {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl IntervalBox {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.iter().chain(upper.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("box bounds"));
        }
        for i in 0..lower.len() {
            if lower[i] > upper[i] {
                return Err(Error::InvalidParameter(format!(
                    "box interval {i} is empty: [{}, {}]",
                    lower[i], upper[i]
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn from_slices(lower: &[f64], upper: &[f64]) -> Result<Self> {
        Self::new(
            DVector::from_column_slice(lower),
            DVector::from_column_slice(upper),
        )
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn interval(&self, i: usize) -> (f64, f64) {
        (self.lower[i], self.upper[i])
    }

    pub fn midpoint(&self) -> DVector<f64> {
        (&self.lower + &self.upper) * 0.5
    }

    pub fn half_widths(&self) -> DVector<f64> {
        (&self.upper - &self.lower) * 0.5
    }

    pub fn volume(&self) -> f64 {
        (&self.upper - &self.lower).iter().product()
    }

    /// Grows every interval by `eps` on both sides.
    pub fn inflate(&self, eps: f64) -> Result<Self> {
        Self::new(self.lower.add_scalar(-eps), self.upper.add_scalar(eps))
    }

    /// Closed-box membership of a point.
    pub fn contains_point(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim()
            && (0..self.dim()).all(|i| self.lower[i] <= x[i] && x[i] <= self.upper[i])
    }

    /// True iff `other` lies inside `self` (closed intervals, per dimension).
    pub fn contains_box(&self, other: &IntervalBox) -> bool {
        other.dim() == self.dim()
            && (0..self.dim())
                .all(|i| self.lower[i] <= other.lower[i] && other.upper[i] <= self.upper[i])
    }

    /// Splits the listed dimensions at their midpoints, producing `2^|dims|`
    /// parts. Part ordering is lexicographic over the listed dimensions with
    /// the low half first, so the last listed dimension varies fastest.
    pub fn bisect(&self, dims: &DimSet) -> Result<Vec<IntervalBox>> {
        if dims.is_empty() {
            return Err(Error::InvalidParameter(
                "bisection needs at least one dimension".into(),
            ));
        }
        for &d in dims.iter() {
            if d >= self.dim() {
                return Err(Error::Dimension {
                    expected: self.dim(),
                    got: d,
                });
            }
        }
        let k = dims.len();
        let mid = self.midpoint();
        let mut parts = Vec::with_capacity(1 << k);
        for index in 0..(1usize << k) {
            let mut lo = self.lower.clone();
            let mut hi = self.upper.clone();
            for (j, &d) in dims.iter().enumerate() {
                let high_half = index >> (k - 1 - j) & 1 == 1;
                if high_half {
                    lo[d] = mid[d];
                } else {
                    hi[d] = mid[d];
                }
            }
            parts.push(IntervalBox::new(lo, hi)?);
        }
        Ok(parts)
    }
}

impl fmt::Display for IntervalBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.dim() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "[{}, {}]", self.lower[i], self.upper[i])?;
        }
        Ok(())
    }
}

/// A centrally symmetric set: `center + sum_i e_i g_i` over `e_i` in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Zonotope {
    center: DVector<f64>,
    generators: Vec<DVector<f64>>,
}

impl Zonotope {
    pub fn new(center: DVector<f64>, generators: Vec<DVector<f64>>) -> Result<Self> {
        let n = center.len();
        for g in &generators {
            if g.len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    got: g.len(),
                });
            }
        }
        if center
            .iter()
            .chain(generators.iter().flat_map(|g| g.iter()))
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("zonotope"));
        }
        Ok(Self { center, generators })
    }

    /// A single point (no extent).
    pub fn point(center: DVector<f64>) -> Result<Self> {
        Self::new(center, Vec::new())
    }

    /// A box as a zonotope: midpoint center plus one axis-aligned generator
    /// per dimension. Degenerate dimensions keep their zero generator.
    pub fn from_box(b: &IntervalBox) -> Self {
        let center = b.midpoint();
        let half = b.half_widths();
        let n = b.dim();
        let generators = (0..n)
            .map(|i| {
                let mut g = DVector::zeros(n);
                g[i] = half[i];
                g
            })
            .collect();
        Self { center, generators }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn generators(&self) -> &[DVector<f64>] {
        &self.generators
    }

    /// Image under an affine map: the center moves through the full map, the
    /// generators through its linear part. Generator count is preserved.
    pub fn affine_image(&self, map: &AffineMap) -> Result<Zonotope> {
        if map.dim() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: map.dim(),
            });
        }
        Ok(Zonotope {
            center: map.apply(&self.center)?,
            generators: self
                .generators
                .iter()
                .map(|g| map.matrix() * g)
                .collect(),
        })
    }

    /// Tightest enclosing box: per dimension, center plus/minus the summed
    /// absolute generator coordinates. Both bounds are attained by actual
    /// points of the zonotope, so box containment decided through this hull
    /// is exact.
    pub fn interval_hull(&self) -> IntervalBox {
        let mut lo = self.center.clone();
        let mut hi = self.center.clone();
        for i in 0..self.dim() {
            let spread: f64 = self.generators.iter().map(|g| g[i].abs()).sum();
            lo[i] -= spread;
            hi[i] += spread;
        }
        IntervalBox { lower: lo, upper: hi }
    }

    /// Per-dimension containment margins against `b` over the listed
    /// dimensions: `dims` selects coordinates of the zonotope, matched in
    /// order with the intervals of `b`. Positive means strictly inside.
    pub fn containment_margins(&self, b: &IntervalBox, dims: &DimSet) -> Vec<f64> {
        assert_eq!(
            b.dim(),
            dims.len(),
            "target box must have one interval per checked dimension"
        );
        let hull = self.interval_hull();
        dims.iter()
            .enumerate()
            .map(|(j, &d)| {
                let (lo, hi) = b.interval(j);
                (hull.lower[d] - lo).min(hi - hull.upper[d])
            })
            .collect()
    }

    /// True iff, on every listed dimension, the interval hull of the
    /// zonotope lies inside the matching interval of `b` inflated by `eps`
    /// on both sides. Dimensions not listed are ignored.
    pub fn contained_in(&self, b: &IntervalBox, dims: &DimSet, eps: f64) -> bool {
        self.containment_margins(b, dims)
            .iter()
            .all(|&m| m >= -eps)
    }
}

/// An ordered set of state-dimension indices (strictly increasing).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DimSet(Vec<usize>);

impl DimSet {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(
                "dimension indices must be strictly increasing".into(),
            ));
        }
        Ok(Self(indices))
    }

    /// All dimensions `0..n`.
    pub fn all(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, usize> {
        self.0.iter()
    }

    pub fn contains(&self, d: usize) -> bool {
        self.0.binary_search(&d).is_ok()
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }
}
