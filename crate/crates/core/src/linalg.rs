//! Dense symmetric-matrix primitives.
//!
//! Everything here is a pure function on immutable inputs. Eigen-decompositions
//! use a fixed ordering (descending eigenvalues) and a fixed sign convention for
//! eigenvectors so that downstream results are reproducible bit-for-bit.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Default relative ridge added to the diagonal before inverses and
/// fractional powers of estimated covariances.
pub const DEFAULT_EPS_REG: f64 = 1e-6;

/// Eigenvalues at or below this floor make negative or fractional powers fail.
pub const EPS_EIG: f64 = 1e-10;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Real symmetric matrix. Entry `(i, j)` is bit-identical to entry `(j, i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Builds a symmetric matrix from a square one by averaging it with its
    /// transpose. `(a + b) / 2` is commutative in IEEE arithmetic, so the
    /// result is exactly symmetric.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        check_square(&m)?;
        check_finite(m.as_slice(), "matrix")?;
        Ok(Self::symmetrize(m))
    }

    /// Accepts only matrices that are already exactly symmetric.
    pub fn from_exact(m: DMatrix<f64>) -> Result<Self> {
        check_square(&m)?;
        check_finite(m.as_slice(), "matrix")?;
        let d = m.nrows();
        for i in 0..d {
            for j in 0..i {
                if m[(i, j)].to_bits() != m[(j, i)].to_bits() {
                    return Err(Error::Numeric(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(SymMatrix(m))
    }

    /// Row-major construction, mostly for tests and small literals.
    pub fn from_rows(d: usize, entries: &[f64]) -> Result<Self> {
        if d == 0 || entries.len() != d * d {
            return Err(Error::Shape(format!(
                "expected {} entries for a {d}x{d} matrix, got {}",
                d * d,
                entries.len()
            )));
        }
        Self::from_matrix(DMatrix::from_row_slice(d, d, entries))
    }

    pub fn identity(d: usize) -> Self {
        SymMatrix(DMatrix::identity(d, d))
    }

    pub fn zeros(d: usize) -> Self {
        SymMatrix(DMatrix::zeros(d, d))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_row_slice(diag)))
    }

    pub(crate) fn symmetrize(m: DMatrix<f64>) -> Self {
        let d = m.nrows();
        let mut out = m;
        for i in 0..d {
            for j in 0..i {
                let v = (out[(i, j)] + out[(j, i)]) * 0.5;
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        SymMatrix(out)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    /// Adds `eps * trace / d` to the diagonal.
    pub fn regularized(&self, eps: f64) -> SymMatrix {
        if eps == 0.0 {
            return self.clone();
        }
        let d = self.dim();
        let ridge = eps * self.trace() / d as f64;
        let mut m = self.0.clone();
        for i in 0..d {
            m[(i, i)] += ridge;
        }
        SymMatrix(m)
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 - &other.0)
    }

    pub fn scaled(&self, c: f64) -> SymMatrix {
        SymMatrix(&self.0 * c)
    }

    /// `a * self * a^T`.
    pub fn congruence(&self, a: &DMatrix<f64>) -> SymMatrix {
        SymMatrix::symmetrize(a * &self.0 * a.transpose())
    }

    /// `v^T * self * v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        v.dot(&(&self.0 * v))
    }

    /// Row-major copy of all entries.
    pub fn to_row_major(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }
}

/// Eigen-decomposition of a symmetric matrix. Values are sorted descending and
/// column `k` of `vectors` is the eigenvector for `values[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigPair {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigPair {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.vectors * DMatrix::from_diagonal(&self.values) * self.vectors.transpose()
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn map_values(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let mapped = self.values.map(f);
        let mut scaled = self.vectors.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col *= mapped[k];
        }
        SymMatrix::symmetrize(scaled * self.vectors.transpose())
    }
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() == 0 || m.nrows() != m.ncols() {
        return Err(Error::Shape(format!(
            "expected a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "{what} has non-finite entry at flat index {pos}"
        )));
    }
    Ok(())
}

fn check_dims(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: dimension {a} vs {b}")));
    }
    Ok(())
}

/// Arithmetic mean and biased (divide-by-N) covariance of a set of vectors.
pub fn estimate_mean_cov<V: AsRef<[f64]>>(vectors: &[V]) -> Result<(DVector<f64>, SymMatrix)> {
    if vectors.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "covariance estimation needs at least 2 vectors, got {}",
            vectors.len()
        )));
    }
    let d = vectors[0].as_ref().len();
    if d == 0 {
        return Err(Error::Shape("vectors have dimension 0".into()));
    }
    let n = vectors.len();
    let mut mean = DVector::zeros(d);
    for (i, v) in vectors.iter().enumerate() {
        let v = v.as_ref();
        if v.len() != d {
            return Err(Error::Shape(format!(
                "vector {i} has dimension {}, expected {d}",
                v.len()
            )));
        }
        check_finite(v, "input vector")?;
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean /= n as f64;

    let mut centered = DMatrix::zeros(n, d);
    for (i, v) in vectors.iter().enumerate() {
        for (j, x) in v.as_ref().iter().enumerate() {
            centered[(i, j)] = x - mean[j];
        }
    }
    let cov = (centered.transpose() * &centered) / n as f64;
    Ok((mean, SymMatrix::symmetrize(cov)))
}

/// Symmetric eigen-decomposition with descending eigenvalues. Each eigenvector
/// is signed so that its largest-magnitude component is positive (lowest index
/// wins ties).
pub fn sym_eig(m: &SymMatrix) -> Result<EigPair> {
    check_finite(m.matrix().as_slice(), "matrix")?;
    let d = m.dim();
    let eig = SymmetricEigen::new(m.matrix().clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut values = DVector::zeros(d);
    let mut vectors = DMatrix::zeros(d, d);
    for (k, &src) in order.iter().enumerate() {
        values[k] = eig.eigenvalues[src];
        let col = eig.eigenvectors.column(src);
        let mut pivot = 0;
        for i in 1..d {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            vectors[(i, k)] = sign * col[i];
        }
    }
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("eigen-decomposition did not converge".into()));
    }
    Ok(EigPair { values, vectors })
}

fn needs_floor(p: f64) -> bool {
    p < 0.0 || p.fract() != 0.0
}

fn power_from_eig(eig: &EigPair, p: f64, context: &str) -> Result<SymMatrix> {
    if needs_floor(p) {
        let min = eig.min_value();
        if min <= EPS_EIG {
            return Err(Error::singular(
                min,
                format!("{context}: power {p} requires eigenvalues above {EPS_EIG:e}"),
            ));
        }
    }
    if p == 0.5 {
        Ok(eig.map_values(f64::sqrt))
    } else if p == -0.5 {
        Ok(eig.map_values(|v| 1.0 / v.sqrt()))
    } else {
        Ok(eig.map_values(|v| v.powf(p)))
    }
}

/// `m^p` through the eigen-decomposition.
pub fn sym_power(m: &SymMatrix, p: f64) -> Result<SymMatrix> {
    if !p.is_finite() {
        return Err(Error::Numeric(format!("matrix power {p} is not finite")));
    }
    if p == 1.0 {
        check_finite(m.matrix().as_slice(), "matrix")?;
        return Ok(m.clone());
    }
    if p == 0.0 {
        return Ok(SymMatrix::identity(m.dim()));
    }
    let eig = sym_eig(m)?;
    power_from_eig(&eig, p, "sym_power")
}

/// Correlation-alignment (ZCA colouring) matrix `c_in^(1/2) * c_out^(-1/2)`.
/// Vectors with covariance `c_out` mapped through it have covariance `c_in`.
pub fn coral_transform(c_in: &SymMatrix, c_out: &SymMatrix) -> Result<DMatrix<f64>> {
    check_dims(c_in.dim(), c_out.dim(), "coral_transform")?;
    let root_in = sym_power(c_in, 0.5)?;
    let inv_root_out = sym_power(c_out, -0.5)?;
    Ok(root_in.matrix() * inv_root_out.matrix())
}

/// Result of diagonalizing two symmetric matrices with one congruence.
#[derive(Debug, Clone)]
pub struct SimulDiag {
    /// `b^T * phi1 * b = I` and `b^T * phi2 * b = diag(lambda)`.
    pub b: DMatrix<f64>,
    /// Inverse of `b`, computed in closed form.
    pub b_inv: DMatrix<f64>,
    /// Generalized eigenvalues, descending.
    pub lambda: DVector<f64>,
}

/// Simultaneous diagonalization of an SPD `phi1` and a symmetric `phi2`.
pub fn simul_diag(phi1: &SymMatrix, phi2: &SymMatrix) -> Result<SimulDiag> {
    check_dims(phi1.dim(), phi2.dim(), "simul_diag")?;
    check_finite(phi2.matrix().as_slice(), "phi2")?;
    let eig1 = sym_eig(phi1)?;
    let inv_root = power_from_eig(&eig1, -0.5, "simul_diag")?;
    let root = power_from_eig(&eig1, 0.5, "simul_diag")?;
    let whitened = phi2.congruence(inv_root.matrix());
    let eig2 = sym_eig(&whitened)?;
    let b = inv_root.matrix() * &eig2.vectors;
    let b_inv = eig2.vectors.transpose() * root.matrix();
    Ok(SimulDiag {
        b,
        b_inv,
        lambda: eig2.values,
    })
}

/// Multivariate normal density with a precomputed Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianDensity {
    mean: DVector<f64>,
    chol_l: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianDensity {
    pub fn new(mean: DVector<f64>, cov: &SymMatrix) -> Result<Self> {
        check_dims(mean.len(), cov.dim(), "gaussian mean vs covariance")?;
        check_finite(mean.as_slice(), "mean")?;
        let chol = match nalgebra::Cholesky::new(cov.matrix().clone()) {
            Some(c) => c,
            None => {
                let min = sym_eig(cov).map(|e| e.min_value()).unwrap_or(f64::NAN);
                return Err(Error::singular(min, "gaussian covariance"));
            }
        };
        let l = chol.unpack();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::singular(0.0, "gaussian covariance"));
        }
        let log_norm = -0.5 * (cov.dim() as f64 * LN_2PI + log_det);
        Ok(Self {
            mean,
            chol_l: l,
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn logpdf(&self, x: &DVector<f64>) -> Result<f64> {
        check_dims(x.len(), self.dim(), "gaussian point vs mean")?;
        let diff = x - &self.mean;
        let z = self
            .chol_l
            .solve_lower_triangular(&diff)
            .ok_or_else(|| Error::singular(0.0, "gaussian covariance"))?;
        let out = self.log_norm - 0.5 * z.norm_squared();
        if !out.is_finite() {
            return Err(Error::Numeric("log density is not finite".into()));
        }
        Ok(out)
    }
}

/// Exact multivariate normal log density.
pub fn gauss_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &SymMatrix) -> Result<f64> {
    GaussianDensity::new(mean.clone(), cov)?.logpdf(x)
}
