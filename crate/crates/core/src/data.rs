//! Dataset container, CSV loading, and covariate studentization.
//!
//! All downstream computation works on standardized covariates. Two modes are
//! provided:
//!
//! - `Full` (the default for kernels): rows are mapped through the inverse
//!   Cholesky factor of the sample covariance, so the transformed sample has
//!   identity covariance and inner products between transformed rows equal
//!   Mahalanobis inner products of the original rows. A near-singular sample
//!   covariance is repaired with a small diagonal ridge before factoring.
//! - `Diagonal` (used for polynomial design matrices): each column is
//!   centered and divided by its sample standard deviation; constant columns
//!   are passed through centered (all zeros) with unit scale and flagged.

use nalgebra::{DMatrix, DVector};
use std::path::Path;

use crate::error::{Error, Result};

/// Column name treated as a unit identifier when present in a CSV file.
pub const UNIT_ID_COLUMN: &str = "unit_id";

/// An observational dataset: covariates, binary treatment, optional outcome.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Covariate matrix, one row per unit.
    pub x: DMatrix<f64>,
    /// Treatment indicator per unit (0 = control, 1 = treated).
    pub t: Vec<u8>,
    /// Observed outcomes; absent for weight-only workflows.
    pub y: Option<DVector<f64>>,
    /// Unit identifiers, preserved from input when available.
    pub unit_ids: Vec<String>,
}

/// Covariate standardization mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Standardize {
    /// Whiten with the inverse Cholesky factor of the sample covariance.
    Full,
    /// Center and scale each column by its own standard deviation.
    Diagonal,
}

/// Standardized covariates together with the statistics and the affine
/// transform (`z = A (x - mu)`) used to produce them.
#[derive(Debug, Clone)]
pub struct StudentizedView {
    /// Transformed covariate matrix (same shape as the original).
    pub z: DMatrix<f64>,
    /// Column means of the original covariates.
    pub mu_hat: DVector<f64>,
    /// Sample covariance (full mode) or its diagonal as a matrix (diagonal
    /// mode), with the unbiased `n-1` denominator.
    pub sigma_hat: DMatrix<f64>,
    /// Row transform `A` with `z_i = A (x_i - mu_hat)`.
    pub transform: DMatrix<f64>,
    /// Inverse of the row transform (on the non-degenerate subspace).
    pub transform_inv: DMatrix<f64>,
    /// Mode that produced this view.
    pub mode: Standardize,
    /// Ridge added to the covariance diagonal before factoring (full mode;
    /// zero when no repair was needed).
    pub ridge: f64,
    /// Indices of constant covariate columns (diagonal mode), passed through
    /// centered with unit scale.
    pub constant_columns: Vec<usize>,
}

impl StudentizedView {
    /// Applies the inverse transform, recovering the original covariates on
    /// the non-degenerate subspace: `x_i = A^{-1} z_i + mu_hat`.
    pub fn un_studentize(&self) -> DMatrix<f64> {
        let mut x = &self.z * self.transform_inv.transpose();
        for j in 0..x.ncols() {
            x.column_mut(j).add_scalar_mut(self.mu_hat[j]);
        }
        x
    }
}

impl Dataset {
    /// Builds a dataset after validating shapes, treatment coding,
    /// finiteness, and arm presence (each arm needs at least one unit).
    pub fn new(
        x: DMatrix<f64>,
        t: Vec<u8>,
        y: Option<DVector<f64>>,
        unit_ids: Vec<String>,
    ) -> Result<Self> {
        let n = x.nrows();
        if n < 2 || x.ncols() == 0 {
            return Err(Error::InvalidData(
                "dataset needs at least two rows and one covariate".into(),
            ));
        }
        if t.len() != n || unit_ids.len() != n {
            return Err(Error::InvalidData(format!(
                "shape mismatch: {} covariate rows, {} treatments, {} ids",
                n,
                t.len(),
                unit_ids.len()
            )));
        }
        if let Some(y) = &y {
            if y.len() != n {
                return Err(Error::InvalidData(format!(
                    "shape mismatch: {} covariate rows but {} outcomes",
                    n,
                    y.len()
                )));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData("non-finite outcome value".into()));
            }
        }
        if let Some(bad) = t.iter().find(|&&ti| ti > 1) {
            return Err(Error::InvalidData(format!(
                "treatment values must be 0 or 1, found {bad}"
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite covariate value".into()));
        }
        let n1 = t.iter().filter(|&&ti| ti == 1).count();
        if n1 == 0 || n1 == n {
            return Err(Error::InvalidData(
                "both treatment arms must be nonempty".into(),
            ));
        }
        Ok(Dataset { x, t, y, unit_ids })
    }

    /// Number of units.
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Number of covariates.
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Indices of units with the given treatment value.
    pub fn arm_indices(&self, arm: u8) -> Vec<usize> {
        self.t
            .iter()
            .enumerate()
            .filter(|(_, &ti)| ti == arm)
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of treated units.
    pub fn n_treated(&self) -> usize {
        self.t.iter().filter(|&&ti| ti == 1).count()
    }

    /// Number of control units.
    pub fn n_control(&self) -> usize {
        self.n() - self.n_treated()
    }

    /// Outcomes, or an error for datasets loaded without an outcome column.
    pub fn outcomes(&self) -> Result<&DVector<f64>> {
        self.y.as_ref().ok_or_else(|| {
            Error::InvalidData("this operation requires outcomes, but none were loaded".into())
        })
    }

    /// Standardizes covariates; see the module docs for the two modes.
    pub fn studentize(&self, mode: Standardize) -> Result<StudentizedView> {
        let n = self.n();
        let p = self.p();
        let mu_hat = DVector::from_fn(p, |j, _| self.x.column(j).sum() / n as f64);
        let mut centered = self.x.clone();
        for j in 0..p {
            centered.column_mut(j).add_scalar_mut(-mu_hat[j]);
        }
        let denom = (n - 1) as f64;
        match mode {
            Standardize::Diagonal => {
                let mut constant_columns = Vec::new();
                let mut scale = DVector::from_element(p, 1.0);
                for j in 0..p {
                    let var = centered.column(j).norm_squared() / denom;
                    if var == 0.0 {
                        constant_columns.push(j);
                    } else {
                        scale[j] = var.sqrt();
                        centered.column_mut(j).scale_mut(1.0 / scale[j]);
                    }
                }
                let variances = DVector::from_fn(p, |j, _| {
                    if constant_columns.contains(&j) {
                        0.0
                    } else {
                        scale[j] * scale[j]
                    }
                });
                let sigma_hat = DMatrix::from_diagonal(&variances);
                let transform = DMatrix::from_diagonal(&scale.map(|s| 1.0 / s));
                let transform_inv = DMatrix::from_diagonal(&scale);
                Ok(StudentizedView {
                    z: centered,
                    mu_hat,
                    sigma_hat,
                    transform,
                    transform_inv,
                    mode,
                    ridge: 0.0,
                    constant_columns,
                })
            }
            Standardize::Full => {
                let cov = centered.transpose() * &centered / denom;
                let trace = cov.trace();
                if trace <= 0.0 {
                    return Err(Error::InvalidData(
                        "all covariate columns are constant".into(),
                    ));
                }
                // Ridge repair when the smallest eigenvalue is negligible
                // relative to the trace.
                let min_eig = cov
                    .clone()
                    .symmetric_eigen()
                    .eigenvalues
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min);
                let mut repaired = cov.clone();
                let mut ridge = 0.0;
                if min_eig < 1e-10 * trace {
                    ridge = 1e-8 * trace;
                    for j in 0..p {
                        repaired[(j, j)] += ridge;
                    }
                }
                let chol = repaired.clone().cholesky().ok_or_else(|| {
                    Error::Numerical(
                        "sample covariance could not be factored even after ridge repair".into(),
                    )
                })?;
                // z_i = L^{-1} (x_i - mu): solve L Z' = C' column-wise.
                let mut zt = centered.transpose();
                chol.l().solve_lower_triangular_mut(&mut zt);
                let l = chol.l();
                let transform = l
                    .clone()
                    .try_inverse()
                    .ok_or_else(|| Error::Numerical("Cholesky factor not invertible".into()))?;
                Ok(StudentizedView {
                    z: zt.transpose(),
                    mu_hat,
                    sigma_hat: cov,
                    transform,
                    transform_inv: l,
                    mode,
                    ridge,
                    constant_columns: Vec::new(),
                })
            }
        }
    }
}

/// Column-name mapping for [`load_csv`].
#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    /// Outcome column; `None` means no outcome is loaded. A named column that
    /// is absent from the file is tolerated (outcome-requiring operations
    /// fail later at their use site).
    pub outcome: Option<String>,
    /// Treatment column (required).
    pub treatment: String,
    /// Covariate columns in order; empty means every column other than the
    /// outcome, the treatment, and an optional `unit_id` column, in file
    /// order.
    pub covariates: Vec<String>,
}

/// Loads a dataset from a headered CSV file (UTF-8, decimal point).
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let require = |name: &str| -> Result<usize> {
        find(name).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "column '{name}' not found; available columns: {}",
                headers.join(", ")
            ))
        })
    };
    let t_col = require(&schema.treatment)?;
    let y_col = match &schema.outcome {
        Some(name) => find(name), // absent outcome tolerated; flagged by y = None
        None => None,
    };
    let id_col = find(UNIT_ID_COLUMN);
    let x_cols: Vec<usize> = if schema.covariates.is_empty() {
        (0..headers.len())
            .filter(|&j| j != t_col && Some(j) != y_col && Some(j) != id_col)
            .collect()
    } else {
        schema
            .covariates
            .iter()
            .map(|c| require(c))
            .collect::<Result<_>>()?
    };
    if x_cols.is_empty() {
        return Err(Error::InvalidArgument(
            "no covariate columns selected".into(),
        ));
    }
    if x_cols.contains(&t_col) || y_col.is_some_and(|y| x_cols.contains(&y)) {
        return Err(Error::InvalidArgument(
            "outcome and treatment columns cannot also be covariates".into(),
        ));
    }

    let mut xs: Vec<f64> = Vec::new();
    let mut ts: Vec<u8> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut ids: Vec<String> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let field = |j: usize| -> Result<f64> {
            let raw = record.get(j).unwrap_or("");
            raw.parse::<f64>().map_err(|_| {
                Error::Csv(format!(
                    "row {}: cannot parse '{}' in column '{}' as a number",
                    row_idx + 2,
                    raw,
                    headers[j]
                ))
            })
        };
        let t_raw = field(t_col)?;
        if t_raw != 0.0 && t_raw != 1.0 {
            return Err(Error::InvalidData(format!(
                "row {}: treatment must be 0 or 1, found {}",
                row_idx + 2,
                t_raw
            )));
        }
        ts.push(t_raw as u8);
        if let Some(j) = y_col {
            ys.push(field(j)?);
        }
        for &j in &x_cols {
            xs.push(field(j)?);
        }
        ids.push(match id_col {
            Some(j) => record.get(j).unwrap_or("").to_string(),
            None => row_idx.to_string(),
        });
    }
    let n = ts.len();
    if n == 0 {
        return Err(Error::InvalidData("csv contains no data rows".into()));
    }
    let x = DMatrix::from_row_slice(n, x_cols.len(), &xs);
    let y = y_col.map(|_| DVector::from_vec(ys));
    Dataset::new(x, ts, y, ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::io::Write;

    fn toy() -> Dataset {
        let x = DMatrix::from_row_slice(
            6,
            2,
            &[
                1.0, 2.0, //
                2.0, 1.0, //
                3.0, 5.0, //
                4.0, 3.0, //
                5.0, 8.0, //
                6.0, 4.0,
            ],
        );
        let t = vec![1, 0, 1, 0, 1, 0];
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let ids = (0..6).map(|i| i.to_string()).collect();
        Dataset::new(x, t, Some(y), ids).unwrap()
    }

    #[test]
    fn rejects_bad_treatment_and_empty_arm() {
        let x = DMatrix::from_element(4, 1, 1.5);
        let ids: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let err = Dataset::new(x.clone(), vec![0, 1, 2, 1], None, ids.clone()).unwrap_err();
        assert!(matches!(err, Error::InvalidData(_)));
        let err = Dataset::new(x, vec![1, 1, 1, 1], None, ids).unwrap_err();
        assert!(err.to_string().contains("nonempty"));
    }

    #[test]
    fn rejects_non_finite_values() {
        let mut x = DMatrix::from_element(4, 1, 1.0);
        x[(2, 0)] = f64::NAN;
        let ids: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let err = Dataset::new(x, vec![0, 0, 1, 1], None, ids).unwrap_err();
        assert!(err.to_string().contains("covariate"));
    }

    #[test]
    fn outcomes_accessor_reports_missing() {
        let x = DMatrix::from_element(4, 1, 1.0);
        let ids: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let d = Dataset::new(x, vec![0, 0, 1, 1], None, ids).unwrap();
        assert!(d.outcomes().unwrap_err().to_string().contains("outcome"));
    }

    #[test]
    fn diagonal_studentization_centers_and_scales() {
        let d = toy();
        let v = d.studentize(Standardize::Diagonal).unwrap();
        for j in 0..2 {
            let col = v.z.column(j);
            assert_abs_diff_eq!(col.sum(), 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(col.norm_squared() / 5.0, 1.0, epsilon = 1e-12);
        }
        assert!(v.constant_columns.is_empty());
    }

    #[test]
    fn full_studentization_whitens() {
        let d = toy();
        let v = d.studentize(Standardize::Full).unwrap();
        let cov = v.z.transpose() * &v.z / 5.0;
        assert_abs_diff_eq!(cov[(0, 0)], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(cov[(1, 1)], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(cov[(0, 1)], 0.0, epsilon = 1e-8);
        assert_eq!(v.ridge, 0.0);
    }

    #[test]
    fn whitening_matches_hand_computed_covariance_on_5x2_fixture() {
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 0.0, 2.0, 1.0, 3.0, 1.0, 4.0, 3.0, 5.0, 5.0]);
        let d = Dataset::new(
            x.clone(),
            vec![1, 0, 1, 0, 1],
            None,
            (0..5).map(|i| i.to_string()).collect(),
        )
        .unwrap();
        // Hand computation: means (3, 2); centered columns
        // (-2,-1,0,1,2) and (-2,-1,-1,1,3); S11 = 10/4, S22 = 16/4, S12 = 12/4.
        let v = d.studentize(Standardize::Full).unwrap();
        assert_abs_diff_eq!(v.mu_hat[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v.mu_hat[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v.sigma_hat[(0, 0)], 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(v.sigma_hat[(1, 1)], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v.sigma_hat[(0, 1)], 3.0, epsilon = 1e-12);
        let cov = v.z.transpose() * &v.z / 4.0;
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(cov[(i, j)], want, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn inner_products_match_mahalanobis_form() {
        let d = toy();
        let v = d.studentize(Standardize::Full).unwrap();
        let mut centered = d.x.clone();
        for j in 0..d.p() {
            let m = d.x.column(j).sum() / d.n() as f64;
            centered.column_mut(j).add_scalar_mut(-m);
        }
        let cov = centered.transpose() * &centered / 5.0;
        let cov_inv = cov.try_inverse().unwrap();
        for i in 0..d.n() {
            for l in 0..d.n() {
                let want = (centered.row(i) * &cov_inv * centered.row(l).transpose())[(0, 0)];
                let got = v.z.row(i).dot(&v.z.row(l));
                assert_abs_diff_eq!(got, want, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn round_trip_recovers_covariates() {
        let d = toy();
        for mode in [Standardize::Full, Standardize::Diagonal] {
            let v = d.studentize(mode).unwrap();
            let x_rec = v.un_studentize();
            for i in 0..d.n() {
                for j in 0..d.p() {
                    assert_abs_diff_eq!(x_rec[(i, j)], d.x[(i, j)], epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn studentization_is_permutation_equivariant() {
        let d = toy();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let xp = DMatrix::from_fn(6, 2, |i, j| d.x[(perm[i], j)]);
        let tp: Vec<u8> = perm.iter().map(|&i| d.t[i]).collect();
        let dp = Dataset::new(xp, tp, None, (0..6).map(|i| i.to_string()).collect()).unwrap();
        for mode in [Standardize::Full, Standardize::Diagonal] {
            let v = d.studentize(mode).unwrap();
            let vp = dp.studentize(mode).unwrap();
            for (i, &pi) in perm.iter().enumerate() {
                for j in 0..2 {
                    assert_abs_diff_eq!(vp.z[(i, j)], v.z[(pi, j)], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn ridge_repairs_collinear_columns_in_full_mode() {
        let base = toy();
        let mut x = DMatrix::zeros(6, 3);
        x.view_mut((0, 0), (6, 2)).copy_from(&base.x);
        let dup = base.x.column(0).clone_owned();
        x.set_column(2, &dup);
        let d = Dataset::new(x, base.t.clone(), None, base.unit_ids.clone()).unwrap();
        let v = d.studentize(Standardize::Full).unwrap();
        assert!(v.ridge > 0.0);
        assert!(v.z.iter().all(|e| e.is_finite()));
    }

    #[test]
    fn constant_column_flagged_and_zeroed_in_diagonal_mode() {
        let mut x = DMatrix::from_element(6, 2, 3.0);
        for i in 0..6 {
            x[(i, 0)] = i as f64;
        }
        let d = Dataset::new(
            x,
            vec![0, 1, 0, 1, 0, 1],
            None,
            (0..6).map(|i| i.to_string()).collect(),
        )
        .unwrap();
        let v = d.studentize(Standardize::Diagonal).unwrap();
        assert_eq!(v.constant_columns, vec![1]);
        assert!(v.z.column(1).iter().all(|&e| e == 0.0));
        // Unit scale on the constant column keeps the transform invertible.
        assert_abs_diff_eq!(v.transform[(1, 1)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn loads_csv_with_defaults_and_explicit_columns() {
        let dir = std::env::temp_dir().join("kom_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("toy.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "unit_id,x1,x2,treat,outcome").unwrap();
        writeln!(f, "a,1.0,2.0,1,0.5").unwrap();
        writeln!(f, "b,2.0,1.0,0,1.5").unwrap();
        writeln!(f, "c,3.0,4.0,1,2.5").unwrap();
        writeln!(f, "d,4.0,3.0,0,3.5").unwrap();
        drop(f);

        let schema = CsvSchema {
            outcome: Some("outcome".into()),
            treatment: "treat".into(),
            covariates: vec![],
        };
        let d = load_csv(&path, &schema).unwrap();
        assert_eq!(d.n(), 4);
        assert_eq!(d.p(), 2);
        assert_eq!(d.unit_ids, vec!["a", "b", "c", "d"]);
        assert_eq!(d.t, vec![1, 0, 1, 0]);
        assert_abs_diff_eq!(d.x[(2, 1)], 4.0);
        assert!(d.y.is_some());

        // Explicit selection reorders columns.
        let schema2 = CsvSchema {
            covariates: vec!["x2".into(), "x1".into()],
            ..schema.clone()
        };
        let d2 = load_csv(&path, &schema2).unwrap();
        assert_abs_diff_eq!(d2.x[(0, 0)], 2.0);
        assert_abs_diff_eq!(d2.x[(0, 1)], 1.0);

        let schema3 = CsvSchema {
            covariates: vec!["nope".into()],
            ..schema.clone()
        };
        let err = load_csv(&path, &schema3).unwrap_err();
        assert!(err.to_string().contains("available columns"));

        // A named-but-absent outcome column loads with no outcomes.
        let schema4 = CsvSchema {
            outcome: Some("not_there".into()),
            ..schema
        };
        let d4 = load_csv(&path, &schema4).unwrap();
        assert!(d4.y.is_none());
        assert!(d4.outcomes().is_err());
    }

    #[test]
    fn csv_rejects_bad_treatment_value() {
        let dir = std::env::temp_dir().join("kom_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("badt.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "x1,treat,outcome").unwrap();
        writeln!(f, "1.0,2,0.5").unwrap();
        writeln!(f, "2.0,1,0.7").unwrap();
        drop(f);
        let schema = CsvSchema {
            outcome: Some("outcome".into()),
            treatment: "treat".into(),
            covariates: vec![],
        };
        let err = load_csv(&path, &schema).unwrap_err();
        assert!(err.to_string().contains("treatment must be 0 or 1"));
    }
}
