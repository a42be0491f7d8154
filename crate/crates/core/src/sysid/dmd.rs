//! Least-squares operator fitting from snapshot Gram matrices.
//!
//! For snapshot pairs `(psi_t, psi'_t)` the fitted operator is
//! `K = X pinv(Y)` with `X = mean(psi' psi^T)` and `Y = mean(psi psi^T)`.

use nalgebra::{DMatrix, DMatrixView, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub const DEFAULT_RCOND: f64 = 1e-10;

/// Running sums of the snapshot outer products.
#[derive(Debug, Clone, PartialEq)]
pub struct Gram {
    /// `sum psi' psi^T`, `target_dim x source_dim`.
    pub x: DMatrix<f64>,
    /// `sum psi psi^T`, `source_dim x source_dim`.
    pub y: DMatrix<f64>,
    /// `sum |psi'|^2`, used for the closed-form residual.
    pub target_sq: f64,
    pub pairs: usize,
}

impl Gram {
    pub fn new(target_dim: usize, source_dim: usize) -> Self {
        Self {
            x: DMatrix::zeros(target_dim, source_dim),
            y: DMatrix::zeros(source_dim, source_dim),
            target_sq: 0.0,
            pairs: 0,
        }
    }

    pub fn target_dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn source_dim(&self) -> usize {
        self.y.nrows()
    }

    /// Adds one snapshot pair.
    pub fn add_pair(&mut self, target: &[f64], source: &[f64]) -> Result<()> {
        if target.len() != self.target_dim() || source.len() != self.source_dim() {
            return Err(Error::Argument(format!(
                "snapshot dimensions ({}, {}) do not match the accumulator ({}, {})",
                target.len(),
                source.len(),
                self.target_dim(),
                self.source_dim()
            )));
        }
        if target.iter().chain(source).any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                index: self.pairs,
                message: "non-finite snapshot".into(),
            });
        }
        let t = DVector::from_column_slice(target);
        let s = DVector::from_column_slice(source);
        self.x.ger(1.0, &t, &s, 1.0);
        self.y.ger(1.0, &s, &s, 1.0);
        self.target_sq += t.norm_squared();
        self.pairs += 1;
        Ok(())
    }

    /// Adds the pairs stored column-wise in `targets` and `sources`.
    ///
    /// `first_index` is the global index of the first column, used to report
    /// non-finite input.
    pub fn add_columns(&mut self, targets: DMatrixView<f64>, sources: DMatrixView<f64>, first_index: usize) -> Result<()> {
        if targets.ncols() != sources.ncols()
            || targets.nrows() != self.target_dim()
            || sources.nrows() != self.source_dim()
        {
            return Err(Error::Argument("snapshot block dimensions do not match the accumulator".into()));
        }
        for c in 0..sources.ncols() {
            if targets.column(c).iter().chain(sources.column(c).iter()).any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    index: first_index + c,
                    message: "non-finite snapshot".into(),
                });
            }
        }
        let sources_t = sources.transpose();
        self.x.gemm(1.0, &targets, &sources_t, 1.0);
        self.y.gemm(1.0, &sources, &sources_t, 1.0);
        self.target_sq += targets.norm_squared();
        self.pairs += sources.ncols();
        Ok(())
    }

    pub fn merge(&mut self, other: &Gram) {
        self.x += &other.x;
        self.y += &other.y;
        self.target_sq += other.target_sq;
        self.pairs += other.pairs;
    }

    fn check_finite(&self) -> Result<()> {
        if self.x.iter().chain(self.y.iter()).any(|v| !v.is_finite()) || !self.target_sq.is_finite() {
            return Err(Error::Numeric {
                index: self.pairs,
                message: "Gram accumulation overflowed".into(),
            });
        }
        Ok(())
    }

    /// Mean Gram matrices `(X, Y)`.
    pub fn means(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.pairs.max(1) as f64;
        (&self.x / n, &self.y / n)
    }

    /// `K = X pinv(Y)`.
    pub fn solve(&self, rcond: f64) -> Result<DMatrix<f64>> {
        if self.pairs == 0 {
            return Err(Error::Argument("cannot fit an operator from zero pairs".into()));
        }
        self.check_finite()?;
        let (x, y) = self.means();
        let y_pinv = pinv_symmetric(&y, rcond)?;
        let mut k = &x * &y_pinv;
        // Iterative refinement on the normal equations within the retained subspace.
        for _ in 0..2 {
            let r = &x - &k * &y;
            k += r * &y_pinv;
        }
        Ok(k)
    }

    /// `J(K) / pairs = mean |psi' - K psi|^2`, via the Gram identity.
    pub fn residual_per_pair(&self, k: &DMatrix<f64>) -> f64 {
        let n = self.pairs.max(1) as f64;
        let cross = k.component_mul(&self.x).sum();
        let quad = (k * &self.y).component_mul(k).sum();
        ((self.target_sq - 2.0 * cross + quad) / n).max(0.0)
    }

    /// `|K Y - X|_F / max(1, |X|_F)` on the mean Gram matrices.
    pub fn normal_equation_residual(&self, k: &DMatrix<f64>) -> f64 {
        let (x, y) = self.means();
        (k * y - &x).norm() / x.norm().max(1.0)
    }
}

/// Pseudo-inverse of a symmetric positive semidefinite matrix.
///
/// The matrix is first scaled to unit diagonal; eigenvalues of the scaled
/// matrix below `rcond * lambda_max` are treated as zero.
pub fn pinv_symmetric(y: &DMatrix<f64>, rcond: f64) -> Result<DMatrix<f64>> {
    if !(rcond >= 0.0) {
        return Err(Error::Config(format!("rcond must be non-negative, got {rcond}")));
    }
    let n = y.nrows();
    if y.ncols() != n {
        return Err(Error::Argument("pseudo-inverse input must be square".into()));
    }
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            let d = y[(i, i)];
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut ys = y.clone();
    for j in 0..n {
        for i in 0..n {
            ys[(i, j)] *= scale[i] * scale[j];
        }
    }
    let ys = (&ys + ys.transpose()) * 0.5;
    let eig = SymmetricEigen::new(ys);
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if lmax == 0.0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let cutoff = rcond * lmax;
    let mut kept = DMatrix::zeros(n, n);
    for (k, lambda) in eig.eigenvalues.iter().enumerate() {
        if *lambda > cutoff {
            let col = eig.eigenvectors.column(k).clone_owned();
            kept.ger(1.0 / lambda, &col, &col, 1.0);
        }
    }
    for j in 0..n {
        for i in 0..n {
            kept[(i, j)] *= scale[i] * scale[j];
        }
    }
    Ok(kept)
}

/// Fits `target ~ K source` from column-stacked snapshots.
pub fn fit_snapshots(targets: &DMatrix<f64>, sources: &DMatrix<f64>, rcond: f64) -> Result<(DMatrix<f64>, Gram)> {
    let mut gram = Gram::new(targets.nrows(), sources.nrows());
    gram.add_columns(targets.as_view(), sources.as_view(), 0)?;
    let k = gram.solve(rcond)?;
    Ok((k, gram))
}
