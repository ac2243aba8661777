//! Inverses of symmetric positive-definite matrices maintained under
//! bordered extension (one new row and column) and positive rank-one updates.
//!
//! Every incremental routine in the crate reduces to these three operations:
//! a dense base case, the partitioned inversion identity
//!
//! ```text
//! [K  k]^-1   [K^-1 0]    1  [K^-1 k] [k' K^-1  -1]
//! [k' c]    = [0    0] + --- [  -1  ]
//!                         s
//! ```
//!
//! with `s = c - k' K^-1 k`, and the Sherman-Morrison identity for
//! `(S + b v v')^-1`.

use std::cell::Cell;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Jitter floor used when escalating a failed base-case factorization,
/// relative to the mean diagonal of the matrix.
pub const DEFAULT_RELATIVE_JITTER: f64 = 1e-10;

/// Schur complements at or below this (scaled by the corner magnitude when it
/// exceeds one) are rejected as degenerate.
pub const DEGENERACY_THRESHOLD: f64 = 1e-12;

const JITTER_RETRIES: usize = 3;

/// The maintained inverse of an SPD matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdInverse {
    inv: DMatrix<f64>,
    jitter: f64,
}

impl SpdInverse {
    /// Wraps an already-computed inverse. The matrix is symmetrized.
    pub fn from_inverse(mut inv: DMatrix<f64>, jitter: f64) -> Result<Self> {
        if !inv.is_square() || inv.nrows() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "inverse must be square and non-empty, got {}x{}",
                inv.nrows(),
                inv.ncols()
            )));
        }
        symmetrize(&mut inv);
        Ok(Self { inv, jitter })
    }

    pub fn dim(&self) -> usize {
        self.inv.nrows()
    }

    pub fn inv(&self) -> &DMatrix<f64> {
        &self.inv
    }

    /// Jitter that was added to the diagonal of the base-case factorization.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.inv
    }

    /// `v' inv v`
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        v.dot(&(&self.inv * v))
    }
}

/// The result of a bordered extension. `gvec` and the Schur complement are
/// reused by callers that maintain coupled blocks.
#[derive(Debug, Clone)]
pub struct BorderedExtension {
    pub inverse: SpdInverse,
    /// `prev^-1 * border`
    pub gvec: DVector<f64>,
    /// `corner - border' prev^-1 border`
    pub schur_complement: f64,
}

impl BorderedExtension {
    /// `1 / schur_complement`, the scale of the rank-one correction.
    pub fn schur_reciprocal(&self) -> f64 {
        self.schur_complement.recip()
    }
}

/// Average a square matrix with its transpose in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Largest `|m[i,j] - m[j,i]|` relative to the largest entry.
pub fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
}

fn degeneracy_floor(threshold: f64, corner: f64) -> f64 {
    threshold * corner.abs().max(1.0)
}

thread_local! {
    static DENSE_FACTORIZATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of dense factorizations started on this thread so far. Lets tests
/// confirm that incremental paths never fall back to one.
pub fn dense_factorization_count() -> u64 {
    DENSE_FACTORIZATIONS.with(Cell::get)
}

/// Inverse of `k + jitter * I` through a Cholesky factorization.
///
/// On failure the jitter is raised tenfold (starting no lower than
/// [`DEFAULT_RELATIVE_JITTER`] times the mean diagonal) up to three times.
pub fn dense_spd_inverse(k: &DMatrix<f64>, jitter: f64) -> Result<SpdInverse> {
    DENSE_FACTORIZATIONS.with(|c| c.set(c.get() + 1));
    let n = k.nrows();
    if n == 0 || !k.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "expected a non-empty square matrix, got {}x{}",
            k.nrows(),
            k.ncols()
        )));
    }
    if jitter < 0.0 || !jitter.is_finite() {
        return Err(Error::InvalidParameter(format!("jitter must be >= 0, got {jitter}")));
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite { jitter });
    }
    let scale = k.amax();
    if relative_asymmetry(k) > 1e-8 {
        return Err(Error::ShapeMismatch("matrix is not symmetric".into()));
    }

    let mean_diag = k.diagonal().mean();
    let floor = DEFAULT_RELATIVE_JITTER * mean_diag.abs().max(f64::MIN_POSITIVE);
    let mut current = jitter;
    for attempt in 0..=JITTER_RETRIES {
        if attempt > 0 {
            current = (current * 10.0).max(floor);
        }
        let mut shifted = k.clone();
        for i in 0..n {
            shifted[(i, i)] += current;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            let min_pivot = chol
                .l_dirty()
                .diagonal()
                .iter()
                .fold(f64::INFINITY, |acc, &d| acc.min(d * d));
            if min_pivot > f64::EPSILON * scale {
                let mut inv = chol.inverse();
                symmetrize(&mut inv);
                return Ok(SpdInverse { inv, jitter: current });
            }
        }
    }
    Err(Error::NotPositiveDefinite { jitter: current })
}

/// Extends the inverse of `K` to the inverse of `[[K, border], [border', corner]]`.
pub fn extend_spd_inverse(
    prev: &SpdInverse,
    border: &DVector<f64>,
    corner: f64,
) -> Result<BorderedExtension> {
    extend_spd_inverse_with_threshold(prev, border, corner, DEGENERACY_THRESHOLD)
}

pub fn extend_spd_inverse_with_threshold(
    prev: &SpdInverse,
    border: &DVector<f64>,
    corner: f64,
    threshold: f64,
) -> Result<BorderedExtension> {
    let n = prev.dim();
    if border.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: border.len(),
        });
    }
    let gvec = &prev.inv * border;
    let schur = corner - border.dot(&gvec);
    let floor = degeneracy_floor(threshold, corner);
    if !(schur > floor) {
        return Err(Error::DegenerateBorder {
            index: n,
            schur,
            threshold: floor,
        });
    }
    let scale = schur.recip();

    let mut inv = DMatrix::zeros(n + 1, n + 1);
    for j in 0..n {
        for i in 0..n {
            inv[(i, j)] = prev.inv[(i, j)] + scale * gvec[i] * gvec[j];
        }
        inv[(n, j)] = -scale * gvec[j];
        inv[(j, n)] = -scale * gvec[j];
    }
    inv[(n, n)] = scale;
    symmetrize(&mut inv);

    Ok(BorderedExtension {
        inverse: SpdInverse {
            inv,
            jitter: prev.jitter,
        },
        gvec,
        schur_complement: schur,
    })
}

/// Given the inverse of `S`, returns the inverse of `S + b v v'` for `b > 0`.
pub fn rank_one_update(prev: &SpdInverse, v: &DVector<f64>, b: f64) -> Result<SpdInverse> {
    let n = prev.dim();
    if v.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: v.len(),
        });
    }
    if !(b > 0.0) || !b.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "rank-one weight must be positive and finite, got {b}"
        )));
    }
    let u = &prev.inv * v;
    let denom = 1.0 + b * v.dot(&u);
    if !(denom > DEGENERACY_THRESHOLD) {
        return Err(Error::NumericalDegeneracy(format!(
            "rank-one update denominator {denom:e} is not positive"
        )));
    }
    let mut inv = prev.inv.clone();
    inv.ger(-b / denom, &u, &u, 1.0);
    symmetrize(&mut inv);
    Ok(SpdInverse {
        inv,
        jitter: prev.jitter,
    })
}

/// Schur complements produced by growing `k` one leading row/column at a
/// time, i.e. the squared pivots of its Cholesky factor. Returns the index
/// of the first degenerate pivot as an error.
pub fn check_leading_schur(k: &DMatrix<f64>, threshold: f64) -> Result<Vec<f64>> {
    let n = k.nrows();
    if !k.is_square() {
        return Err(Error::ShapeMismatch("expected a square matrix".into()));
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut pivots = Vec::with_capacity(n);
    for j in 0..n {
        let mut d = k[(j, j)];
        for p in 0..j {
            d -= l[(j, p)] * l[(j, p)];
        }
        let floor = degeneracy_floor(threshold, k[(j, j)]);
        if !(d > floor) {
            return Err(Error::DegenerateBorder {
                index: j,
                schur: d,
                threshold: floor,
            });
        }
        pivots.push(d);
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = k[(i, j)];
            for p in 0..j {
                s -= l[(i, p)] * l[(j, p)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(pivots)
}
