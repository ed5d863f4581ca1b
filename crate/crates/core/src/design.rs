//! Monomial design matrices for the parametric baseline methods.
//!
//! Given covariates `z` (rows are units) and a degree `d`, the design
//! contains every monomial of total degree at most `d`, intercept first,
//! then in graded order: all degree-1 terms, then degree-2, and so on.
//! Within a grade the exponent vectors are in lexicographic order with the
//! first covariate varying slowest, so the layout for two covariates and
//! degree two is `1, z1, z2, z1^2, z1 z2, z2^2`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Exponent vectors of all monomials with total degree at most `degree`,
/// in the order described in the module docs.
pub fn monomial_exponents(p: usize, degree: u32) -> Vec<Vec<u32>> {
    fn fill(p: usize, remaining: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if p == 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in (0..=remaining).rev() {
            prefix.push(first);
            fill(p - 1, remaining - first, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for grade in 0..=degree {
        fill(p, grade, &mut Vec::new(), &mut out);
    }
    out
}

/// Number of monomials of total degree at most `degree` in `p` variables:
/// the binomial coefficient `C(p + degree, degree)`.
pub fn monomial_count(p: usize, degree: u32) -> usize {
    let mut count: usize = 1;
    for k in 1..=degree as usize {
        count = count * (p + k) / k;
    }
    count
}

/// Builds the monomial design matrix for the rows of `z`.
pub fn design_matrix(z: &DMatrix<f64>, degree: u32) -> Result<DMatrix<f64>> {
    if z.nrows() == 0 || z.ncols() == 0 {
        return Err(Error::InvalidArgument(
            "design matrix needs at least one row and one covariate".into(),
        ));
    }
    let exps = monomial_exponents(z.ncols(), degree);
    let mut out = DMatrix::zeros(z.nrows(), exps.len());
    for (col, exp) in exps.iter().enumerate() {
        for row in 0..z.nrows() {
            let mut v = 1.0;
            for (j, &e) in exp.iter().enumerate() {
                if e > 0 {
                    v *= z[(row, j)].powi(e as i32);
                }
            }
            out[(row, col)] = v;
        }
    }
    Ok(out)
}
