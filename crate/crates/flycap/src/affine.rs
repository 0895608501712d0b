//! Exact time discretization of affine continuous dynamics.
//!
//! Each mode of a switched system evolves as `x' = A x + b`. Holding a mode
//! for a fixed duration `tau` moves the state by an affine map `x -> C x + d`,
//! obtained from the exponential of the augmented matrix
//!
//! ```text
//!   [ A*tau  b*tau ]          [ C  d ]
//!   [   0      0   ]  |-->    [ 0  1 ]
//! ```
//!
//! which is well defined for singular `A` (no inversion involved). All maps
//! here are plain values: cheap to clone, safe to share across threads.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Continuous-time affine dynamics `x' = A x + b` for one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeDynamics {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl ModeDynamics {
    /// Builds the dynamics, rejecting inconsistent dimensions and non-finite
    /// entries.
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() == 0 || a.nrows() != a.ncols() {
            return Err(Error::Dimension {
                expected: a.nrows(),
                got: a.ncols(),
            });
        }
        if b.len() != a.nrows() {
            return Err(Error::Dimension {
                expected: a.nrows(),
                got: b.len(),
            });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("system matrix"));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("drift vector"));
        }
        Ok(Self { a, b })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    /// State derivative at `x`.
    pub fn derivative(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b
    }

    /// Exact sampled-time map of these dynamics over a step of `tau` seconds.
    ///
    /// The result satisfies `x(tau) = C x(0) + d` for the exact solution of
    /// `x' = A x + b`. Computed through the augmented-matrix exponential, so
    /// singular `A` needs no special casing.
    pub fn discretize(&self, tau: f64) -> Result<AffineMap> {
        if !tau.is_finite() || tau <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "sampling step must be positive, got {tau}"
            )));
        }
        let n = self.dim();
        let mut aug = DMatrix::<f64>::zeros(n + 1, n + 1);
        aug.view_mut((0, 0), (n, n)).copy_from(&(&self.a * tau));
        aug.view_mut((0, n), (n, 1)).copy_from(&(&self.b * tau));
        let exp = aug.exp();
        if exp.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow {
                norm: aug.abs().row_sum().max(),
            });
        }
        let c = exp.view((0, 0), (n, n)).into_owned();
        let d = exp.view((0, n), (n, 1)).column(0).into_owned();
        AffineMap::new(c, d)
    }
}

/// An affine state transformation `x -> C x + d`.
///
/// Closed under composition, which is what makes whole switching patterns
/// collapsible into a single map.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    c: DMatrix<f64>,
    d: DVector<f64>,
}

impl AffineMap {
    pub fn new(c: DMatrix<f64>, d: DVector<f64>) -> Result<Self> {
        if c.nrows() == 0 || c.nrows() != c.ncols() {
            return Err(Error::Dimension {
                expected: c.nrows(),
                got: c.ncols(),
            });
        }
        if d.len() != c.nrows() {
            return Err(Error::Dimension {
                expected: c.nrows(),
                got: d.len(),
            });
        }
        if c.iter().chain(d.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("affine map"));
        }
        Ok(Self { c, d })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            c: DMatrix::identity(n, n),
            d: DVector::zeros(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.d
    }

    /// The map equivalent to applying `self` first, then `after`:
    /// `(C2 C1, C2 d1 + d2)`.
    pub fn then(&self, after: &AffineMap) -> Result<AffineMap> {
        if after.dim() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: after.dim(),
            });
        }
        Ok(AffineMap {
            c: &after.c * &self.c,
            d: &after.c * &self.d + &after.d,
        })
    }

    /// Evaluates the map at a point.
    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(&self.c * x + &self.d)
    }
}
