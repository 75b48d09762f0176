use super::matrix::{dot, DenseMatrix};
use super::rng::RngStream;
use crate::error::{Error, Result};

/// Residual norm (relative to `max(1, ‖original column‖)`) below which a
/// column is treated as linearly dependent on its predecessors.
pub const DEFICIENCY_TOL: f64 = 1e-12;

/// Output of an orthonormalization, with the number of directions that had to
/// be replaced by random draws because the input was rank deficient.
#[derive(Debug, Clone)]
pub struct Orthonormalized {
    pub matrix: DenseMatrix,
    pub deficient: usize,
}

impl Orthonormalized {
    pub fn is_deficient(&self) -> bool {
        self.deficient > 0
    }
}

/// Orthonormal columns spanning the columns of `m` (modified Gram–Schmidt with
/// re-orthogonalization). Dependent columns are replaced by Gaussian draws from
/// `rng`, orthogonalized against the basis built so far.
pub fn orthonormalize_columns(m: &DenseMatrix, rng: &mut RngStream) -> Result<Orthonormalized> {
    let (rows, cols) = m.shape();
    if rows < cols {
        return Err(Error::Shape(format!(
            "orthonormalize_columns needs rows >= cols, got {rows}x{cols}"
        )));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut deficient = 0;
    for c in 0..cols {
        let original = m.column(c);
        let scale = norm(&original).max(1.0);
        let mut v = original;
        let residual = project_out(&mut v, &basis);
        if residual <= DEFICIENCY_TOL * scale {
            deficient += 1;
            v = fresh_direction(rows, &basis, rng);
        } else {
            v.iter_mut().for_each(|x| *x /= residual);
        }
        basis.push(v);
    }
    let matrix = DenseMatrix::from_fn(rows, cols, |r, c| basis[c][r]);
    Ok(Orthonormalized { matrix, deficient })
}

/// Orthonormal rows spanning the rows of `m`; the transposed counterpart of
/// [`orthonormalize_columns`].
pub fn orthonormalize_rows(m: &DenseMatrix, rng: &mut RngStream) -> Result<Orthonormalized> {
    if m.cols() < m.rows() {
        return Err(Error::Shape(format!(
            "orthonormalize_rows needs cols >= rows, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let out = orthonormalize_columns(&m.transpose(), rng)?;
    Ok(Orthonormalized {
        matrix: out.matrix.transpose(),
        deficient: out.deficient,
    })
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Removes the components of `v` along `basis`, repeating the sweep while it
/// still cancels a large share of the norm. Returns the final norm.
fn project_out(v: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    let mut before = norm(v);
    if basis.is_empty() {
        return before;
    }
    for _ in 0..3 {
        for q in basis {
            let coeff = dot(q, v);
            for (x, qi) in v.iter_mut().zip(q) {
                *x -= coeff * qi;
            }
        }
        let after = norm(v);
        // "twice is enough" unless cancellation was severe
        if after >= 0.5 * before || after == 0.0 {
            return after;
        }
        before = after;
    }
    norm(v)
}

fn fresh_direction(len: usize, basis: &[Vec<f64>], rng: &mut RngStream) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..len).map(|_| rng.standard_normal()).collect();
        let scale = norm(&v).max(1.0);
        let residual = project_out(&mut v, basis);
        if residual > 1e-6 * scale {
            v.iter_mut().for_each(|x| *x /= residual);
            return v;
        }
    }
}
