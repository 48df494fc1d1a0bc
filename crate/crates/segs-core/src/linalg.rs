//! Dense row-major matrices, column centering, and PCA via symmetric
//! eigendecomposition of the sample covariance.
//!
//! Feature tensors are handled as `(samples * locations) x channels`
//! matrices; everything here is small enough (channels up to a few
//! hundred) that the explicit covariance route is the stable, boring
//! choice.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Dense matrix with row-major storage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from row-major data, validating shape and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("matrix entries must be finite"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, 0));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid("rows have inconsistent lengths"));
        }
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(v.is_finite());
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let out_row = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Remove the per-column mean; returns the centered matrix and the
    /// removed means.
    pub fn centered_columns(&self) -> Result<(Matrix, Vec<f64>)> {
        if self.rows == 0 {
            return Err(invalid("cannot center an empty matrix"));
        }
        let mut mean = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (m, v) in mean.iter_mut().zip(self.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= self.rows as f64;
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[r * self.cols + c] -= mean[c];
            }
        }
        Ok((out, mean))
    }

    /// Write as CSV with a `c0..cN` header row.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let header: Vec<String> = (0..self.cols).map(|c| format!("c{c}")).collect();
        wtr.write_record(&header)?;
        for r in 0..self.rows {
            wtr.write_record(self.row(r).iter().map(|v| v.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Read back a matrix written by [`Matrix::write_csv`].
    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Matrix> {
        let mut rdr = csv::Reader::from_reader(r);
        let cols = rdr.headers()?.len();
        let mut data = Vec::new();
        let mut rows = 0;
        for record in rdr.records() {
            let record = record?;
            if record.len() != cols {
                return Err(invalid("csv row width does not match header"));
            }
            for field in record.iter() {
                data.push(
                    field
                        .parse::<f64>()
                        .map_err(|e| invalid(format!("bad csv number {field:?}: {e}")))?,
                );
            }
            rows += 1;
        }
        Matrix::from_vec(rows, cols, data)
    }
}

/// PCA basis over channel space: per-channel mean, orthonormal components
/// in descending eigenvalue order, and the eigenvalues themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    mean: Vec<f64>,
    basis: Matrix,
    eigenvalues: Vec<f64>,
}

impl PcaModel {
    /// Assemble from parts, validating the orthonormality and ordering
    /// invariants (used when loading persisted bases).
    pub fn from_parts(mean: Vec<f64>, basis: Matrix, eigenvalues: Vec<f64>) -> Result<PcaModel> {
        if basis.rows() != mean.len() {
            return Err(invalid("basis row count must match mean length"));
        }
        if basis.cols() != eigenvalues.len() {
            return Err(invalid("one eigenvalue per component required"));
        }
        let gram = basis.transpose().matmul(&basis)?;
        for i in 0..gram.rows() {
            for j in 0..gram.cols() {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (gram.get(i, j) - expect).abs() > 1e-10 {
                    return Err(invalid("basis columns are not orthonormal"));
                }
            }
        }
        if eigenvalues.iter().any(|&v| v < 0.0) {
            return Err(invalid("eigenvalues must be non-negative"));
        }
        if eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return Err(invalid("eigenvalues must be non-increasing"));
        }
        Ok(PcaModel { mean, basis, eigenvalues })
    }

    /// Fit a PCA model: sample covariance (divisor `rows - 1`), symmetric
    /// eigendecomposition, components in descending eigenvalue order with
    /// a deterministic sign (largest-magnitude entry positive).
    pub fn fit(m: &Matrix, n_components: usize) -> Result<PcaModel> {
        if m.rows() < 2 {
            return Err(invalid("pca requires at least 2 rows"));
        }
        if n_components > m.cols() {
            return Err(invalid(format!(
                "n_components {} exceeds column count {}",
                n_components,
                m.cols()
            )));
        }
        let (centered, mean) = m.centered_columns()?;
        let c = m.cols();
        let norm = (m.rows() - 1) as f64;
        let mut cov = DMatrix::<f64>::zeros(c, c);
        for r in 0..centered.rows() {
            let row = centered.row(r);
            for i in 0..c {
                let vi = row[i];
                if vi == 0.0 {
                    continue;
                }
                for j in i..c {
                    cov[(i, j)] += vi * row[j];
                }
            }
        }
        for i in 0..c {
            for j in i..c {
                let v = cov[(i, j)] / norm;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }

        let eig = cov.symmetric_eigen();
        let mut order: Vec<usize> = (0..c).collect();
        // Stable sort keeps the solver's deterministic output order for
        // exactly tied eigenvalues.
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

        let mut basis = Matrix::zeros(c, n_components);
        let mut eigenvalues = Vec::with_capacity(n_components);
        for (out_col, &src) in order.iter().take(n_components).enumerate() {
            // Covariance is PSD; tiny negatives are roundoff.
            eigenvalues.push(eig.eigenvalues[src].max(0.0));
            let col = eig.eigenvectors.column(src);
            let mut max_idx = 0;
            for i in 1..c {
                if col[i].abs() > col[max_idx].abs() {
                    max_idx = i;
                }
            }
            let sign = if col[max_idx] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..c {
                basis.set(i, out_col, sign * col[i]);
            }
        }
        Ok(PcaModel { mean, basis, eigenvalues })
    }

    /// Project feature rows into the component subspace:
    /// `(features - mean) * basis`.
    pub fn project(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.mean.len() {
            return Err(invalid(format!(
                "feature width {} does not match model channels {}",
                features.cols(),
                self.mean.len()
            )));
        }
        let n_b = self.basis.cols();
        let mut out = Matrix::zeros(features.rows(), n_b);
        for r in 0..features.rows() {
            let row = features.row(r);
            for j in 0..n_b {
                let mut acc = 0.0;
                for c in 0..row.len() {
                    acc += (row[c] - self.mean[c]) * self.basis.get(c, j);
                }
                out.set(r, j, acc);
            }
        }
        Ok(out)
    }

    /// Inverse of [`PcaModel::project`] up to truncation:
    /// `mean + projected * basis^T`.
    pub fn reconstruct(&self, projected: &Matrix) -> Result<Matrix> {
        if projected.cols() != self.basis.cols() {
            return Err(invalid("projected width does not match component count"));
        }
        let c = self.mean.len();
        let mut out = Matrix::zeros(projected.rows(), c);
        for r in 0..projected.rows() {
            let row = projected.row(r);
            for i in 0..c {
                let mut acc = self.mean[i];
                for (j, p) in row.iter().enumerate() {
                    acc += p * self.basis.get(i, j);
                }
                out.set(r, i, acc);
            }
        }
        Ok(out)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn n_components(&self) -> usize {
        self.basis.cols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn centering_small_example() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let (centered, mean) = m.centered_columns().unwrap();
        assert_eq!(mean, vec![2.0, 3.0]);
        assert_eq!(centered.data(), &[-1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn centering_all_equal_rows_gives_zero() {
        let m = Matrix::from_rows(&[vec![5.0, -1.0], vec![5.0, -1.0], vec![5.0, -1.0]]).unwrap();
        let (centered, mean) = m.centered_columns().unwrap();
        assert_eq!(mean, vec![5.0, -1.0]);
        assert!(centered.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centering_random_column_sums_vanish() {
        let m = random_matrix(50, 8, 3);
        let (centered, _) = m.centered_columns().unwrap();
        // Direct summation oracle.
        for c in 0..centered.cols() {
            let sum: f64 = (0..centered.rows()).map(|r| centered.get(r, c)).sum();
            assert!(sum.abs() < 1e-12, "column {c} sums to {sum}");
        }
    }

    #[test]
    fn centering_empty_matrix_rejected() {
        let m = Matrix::zeros(0, 3);
        assert!(m.centered_columns().is_err());
    }

    #[test]
    fn pca_one_axis_variance() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let model = PcaModel::fit(&m, 1).unwrap();
        assert_relative_eq!(model.eigenvalues()[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(model.basis().get(0, 0), 1.0, epsilon = 1e-12);
        assert_relative_eq!(model.basis().get(1, 0), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pca_full_rank_round_trip() {
        let m = random_matrix(40, 5, 7);
        let model = PcaModel::fit(&m, 5).unwrap();
        let projected = model.project(&m).unwrap();
        let reconstructed = model.reconstruct(&projected).unwrap();
        // Reconstruct-and-compare oracle.
        let mut diff = 0.0;
        for (a, b) in m.data().iter().zip(reconstructed.data()) {
            diff += (a - b) * (a - b);
        }
        let rel = diff.sqrt() / m.frobenius_norm();
        assert!(rel < 1e-8, "relative reconstruction error {rel}");
    }

    #[test]
    fn pca_duplicate_row_zero_eigenvalues() {
        let m = Matrix::from_rows(&[vec![2.0, 3.0, -1.0], vec![2.0, 3.0, -1.0]]).unwrap();
        let model = PcaModel::fit(&m, 3).unwrap();
        for &ev in model.eigenvalues() {
            assert!(ev.abs() < 1e-12);
        }
    }

    #[test]
    fn pca_rejects_too_many_components() {
        let m = random_matrix(10, 3, 11);
        assert!(PcaModel::fit(&m, 4).is_err());
        assert!(PcaModel::fit(&Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap(), 1).is_err());
    }

    #[test]
    fn pca_eigen_residual_and_orthonormality() {
        let m = random_matrix(60, 6, 13);
        let model = PcaModel::fit(&m, 6).unwrap();

        // Rebuild the covariance with an independent naive loop.
        let (centered, _) = m.centered_columns().unwrap();
        let c = m.cols();
        let mut cov = vec![0.0; c * c];
        for r in 0..m.rows() {
            let row = centered.row(r);
            for i in 0..c {
                for j in 0..c {
                    cov[i * c + j] += row[i] * row[j] / (m.rows() as f64 - 1.0);
                }
            }
        }
        let cov_norm = cov.iter().map(|v| v * v).sum::<f64>().sqrt();

        for comp in 0..model.n_components() {
            let lambda = model.eigenvalues()[comp];
            let mut residual = 0.0;
            for i in 0..c {
                let mut acc = 0.0;
                for j in 0..c {
                    acc += cov[i * c + j] * model.basis().get(j, comp);
                }
                let r = acc - lambda * model.basis().get(i, comp);
                residual += r * r;
            }
            assert!(residual.sqrt() < 1e-8 * cov_norm);
        }

        let gram = model.basis().transpose().matmul(model.basis()).unwrap();
        for i in 0..gram.rows() {
            for j in 0..gram.cols() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram.get(i, j) - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn eigenvalues_sorted_descending() {
        let m = random_matrix(80, 7, 17);
        let model = PcaModel::fit(&m, 7).unwrap();
        for w in model.eigenvalues().windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(model.eigenvalues().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn project_centering_and_unit_responses() {
        let m = random_matrix(30, 4, 19);
        let model = PcaModel::fit(&m, 4).unwrap();

        let at_mean = Matrix::from_rows(&[model.mean().to_vec()]).unwrap();
        let p = model.project(&at_mean).unwrap();
        for &v in p.data() {
            assert!(v.abs() < 1e-12);
        }

        for j in 0..model.n_components() {
            let mut row = model.mean().to_vec();
            for c in 0..row.len() {
                row[c] += model.basis().get(c, j);
            }
            let p = model.project(&Matrix::from_rows(&[row]).unwrap()).unwrap();
            for (idx, &v) in p.data().iter().enumerate() {
                let expect = if idx == j { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn project_matches_naive_dot_product() {
        let m = random_matrix(25, 6, 23);
        let model = PcaModel::fit(&m, 4).unwrap();
        let feats = random_matrix(3, 6, 29);
        let p = model.project(&feats).unwrap();
        // Explicit dot-product oracle.
        for r in 0..feats.rows() {
            for j in 0..4 {
                let mut acc = 0.0;
                for c in 0..6 {
                    acc += (feats.get(r, c) - model.mean()[c]) * model.basis().get(c, j);
                }
                assert!((p.get(r, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn project_rejects_dimension_mismatch() {
        let m = random_matrix(10, 4, 31);
        let model = PcaModel::fit(&m, 2).unwrap();
        let bad = random_matrix(2, 5, 37);
        assert!(model.project(&bad).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = random_matrix(6, 3, 41);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = Matrix::read_csv(buf.as_slice()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn from_vec_validation() {
        assert!(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn project_is_linear(
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            ux in -2.0f64..2.0,
            uy in -2.0f64..2.0,
            vx in -2.0f64..2.0,
            vy in -2.0f64..2.0,
        ) {
            let m = random_matrix(20, 2, 43);
            let model = PcaModel::fit(&m, 2).unwrap();
            let mean = model.mean().to_vec();
            let mk = |dx: f64, dy: f64| {
                Matrix::from_rows(&[vec![mean[0] + dx, mean[1] + dy]]).unwrap()
            };
            let pu = model.project(&mk(ux, uy)).unwrap();
            let pv = model.project(&mk(vx, vy)).unwrap();
            let pc = model.project(&mk(a * ux + b * vx, a * uy + b * vy)).unwrap();
            for j in 0..2 {
                let combined = a * pu.get(0, j) + b * pv.get(0, j);
                prop_assert!((pc.get(0, j) - combined).abs() < 1e-10);
            }
        }
    }
}
