//! Dense tensor/matrix containers, a symmetric eigensolver, and the
//! finite-difference harness used to verify every analytic gradient.
//!
//! All arithmetic is f64; f32 appears only at file boundaries.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Deterministic RNG from a list of u64 stream labels. Each part is XORed
/// into the 32-byte ChaCha seed at a rotating offset, so (seed, epoch),
/// (seed, query), ... give independent, reproducible streams.
pub fn rng_from_parts(parts: &[u64]) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    for (i, part) in parts.iter().enumerate() {
        let at = (i % 4) * 8;
        let mixed = part.wrapping_add((i as u64).wrapping_mul(0x9e3779b97f4a7c15));
        for (j, byte) in mixed.to_le_bytes().iter().enumerate() {
            seed[at + j] ^= byte;
        }
    }
    ChaCha8Rng::from_seed(seed)
}

/// W×H×K stack of non-negative feature maps, laid out row-major and
/// map-minor: `index = (y*W + x)*K + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    pub width: usize,
    pub height: usize,
    pub maps: usize,
    pub values: Vec<f64>,
}

impl ActivationTensor {
    pub fn new(width: usize, height: usize, maps: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height * maps, "tensor length mismatch");
        Self {
            width,
            height,
            maps,
            values,
        }
    }

    pub fn zeros(width: usize, height: usize, maps: usize) -> Self {
        Self {
            width,
            height,
            maps,
            values: vec![0.0; width * height * maps],
        }
    }

    /// Number of spatial positions per feature map, |X_k|.
    pub fn plane_size(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, k: usize) -> f64 {
        self.values[(y * self.width + x) * self.maps + k]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, k: usize, v: f64) {
        self.values[(y * self.width + x) * self.maps + k] = v;
    }

    /// Iterates map k over all spatial positions.
    pub fn map_values(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().skip(k).step_by(self.maps).copied()
    }

    pub fn same_shape(&self, other: &ActivationTensor) -> bool {
        self.width == other.width && self.height == other.height && self.maps == other.maps
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.width, self.height, self.maps)
    }
}

/// K-dimensional image descriptor. `normalized` marks vectors that are
/// unit-norm (or the designated all-zero descriptor).
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl DescriptorVector {
    pub fn raw(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
            normalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Image id → descriptor, ordered for reproducible iteration.
pub type DescriptorTable = std::collections::BTreeMap<u64, DescriptorVector>;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            values.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            values,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.values[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    /// y = Aᵀ x for a column vector x of length `rows`.
    pub fn transpose_apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "transpose_apply shape mismatch");
        let mut y = vec![0.0; self.cols];
        for i in 0..self.rows {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            for j in 0..self.cols {
                y[j] += self.get(i, j) * xi;
            }
        }
        y
    }

    /// A += scale * v vᵀ.
    pub fn add_outer(&mut self, v: &[f64], scale: f64) {
        assert_eq!(self.rows, v.len(), "outer product shape mismatch");
        assert_eq!(self.cols, v.len(), "outer product shape mismatch");
        for i in 0..v.len() {
            let s = scale * v[i];
            for j in 0..v.len() {
                self.values[i * self.cols + j] += s * v[j];
            }
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }
}

/// Eigenvalues in non-increasing order; `eigenvectors` holds the matching
/// unit-norm eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DenseMatrix,
}

/// Scales `v` to unit Euclidean norm. A vector with norm below 1e-12 maps to
/// the all-zero descriptor, still flagged normalized: a dead-feature
/// descriptor has similarity 0 to everything instead of crashing indexing.
pub fn l2_normalize(v: &DescriptorVector) -> DescriptorVector {
    let norm = v.norm();
    if norm < 1e-12 {
        return DescriptorVector {
            values: vec![0.0; v.dim()],
            normalized: true,
        };
    }
    DescriptorVector {
        values: v.values.iter().map(|x| x / norm).collect(),
        normalized: true,
    }
}

/// Inner product Σ aᵢ·bᵢ, the similarity of two ℓ2-normalized descriptors.
pub fn inner_product(a: &DescriptorVector, b: &DescriptorVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            context: "inner_product",
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(dot(&a.values, &b.values))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// The input is symmetrized by (A+Aᵀ)/2 first; asymmetry beyond
/// 1e-9·(1+max|A|) is rejected. Eigenvalues come back sorted non-increasing
/// with eigenvector columns reordered to match.
pub fn sym_eig(a: &DenseMatrix) -> Result<EigenDecomposition> {
    if a.rows != a.cols {
        return Err(Error::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let n = a.rows;
    let scale = a.max_abs();
    let sym_tol = 1e-9 * (1.0 + scale);
    for i in 0..n {
        for j in (i + 1)..n {
            let dev = (a.get(i, j) - a.get(j, i)).abs();
            if dev > sym_tol {
                return Err(Error::NotSymmetric {
                    row: i,
                    col: j,
                    deviation: dev,
                });
            }
        }
    }

    // Work on the symmetrized copy.
    let mut m = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, 0.5 * (a.get(i, j) + a.get(j, i)));
        }
    }
    let mut v = DenseMatrix::identity(n);
    let mut d: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    let mut b = d.clone();
    let mut z = vec![0.0; n];

    let off_tol = 1e-14 * (1.0 + scale) * (n * n) as f64;
    let mut last_off = 0.0;
    for sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m.get(p, q).abs();
            }
        }
        last_off = off;
        if off <= off_tol {
            let _ = sweep;
            return Ok(sort_eigen(n, d, v));
        }

        // During the first sweeps only rotate on elements above a shrinking
        // threshold (Numerical Recipes eq. 11.1.25); afterwards rotate on
        // everything nonzero.
        let thresh = if sweep < 3 {
            0.2 * off / (n * n) as f64
        } else {
            0.0
        };

        for p in 0..(n - 1) {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                let g = 100.0 * apq.abs();
                // Small off-diagonal elements relative to the diagonal are
                // set to zero outright after a few sweeps.
                if sweep > 3
                    && d[p].abs() + g == d[p].abs()
                    && d[q].abs() + g == d[q].abs()
                {
                    m.set(p, q, 0.0);
                    continue;
                }
                if apq.abs() <= thresh {
                    continue;
                }

                let h = d[q] - d[p];
                let t = if h.abs() + g == h.abs() {
                    apq / h
                } else {
                    let theta = 0.5 * h / apq;
                    let mut t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                    if theta < 0.0 {
                        t = -t;
                    }
                    t
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);
                let h = t * apq;
                z[p] -= h;
                z[q] += h;
                d[p] -= h;
                d[q] += h;
                m.set(p, q, 0.0);

                let rotate = |m: &mut DenseMatrix, i: usize, j: usize, k: usize, l: usize| {
                    let g = m.get(i, j);
                    let h = m.get(k, l);
                    m.set(i, j, g - s * (h + g * tau));
                    m.set(k, l, h + s * (g - h * tau));
                };
                for j in 0..p {
                    rotate(&mut m, j, p, j, q);
                }
                for j in (p + 1)..q {
                    rotate(&mut m, p, j, j, q);
                }
                for j in (q + 1)..n {
                    rotate(&mut m, p, j, q, j);
                }
                for j in 0..n {
                    rotate(&mut v, j, p, j, q);
                }
            }
        }

        for p in 0..n {
            b[p] += z[p];
            d[p] = b[p];
            z[p] = 0.0;
        }
    }

    Err(Error::EigNoConvergence {
        sweeps: JACOBI_MAX_SWEEPS,
        residual: last_off,
    })
}

fn sort_eigen(n: usize, d: Vec<f64>, v: DenseMatrix) -> EigenDecomposition {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].total_cmp(&d[i]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    let mut eigenvectors = DenseMatrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for row in 0..n {
            eigenvectors.set(row, new_col, v.get(row, old_col));
        }
    }
    EigenDecomposition {
        eigenvalues,
        eigenvectors,
    }
}

/// V·diag(max(λᵢ, floor))^{-1/2}·Vᵀ. The floor clamps near-zero eigenvalues
/// of rank-deficient covariances.
pub fn inv_sqrt_psd(a: &DenseMatrix, floor: f64) -> Result<DenseMatrix> {
    let eig = sym_eig(a)?;
    let n = a.rows;
    let inv_sqrt: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| 1.0 / l.max(floor).sqrt())
        .collect();
    let mut out = DenseMatrix::zeros(n, n);
    for k in 0..n {
        let col = eig.eigenvectors.column(k);
        out.add_outer(&col, inv_sqrt[k]);
    }
    Ok(out)
}

/// Default eigenvalue floor for covariance inversion: 1e-10·trace(A)/dim.
pub fn default_eig_floor(a: &DenseMatrix) -> f64 {
    1e-10 * a.trace() / a.rows.max(1) as f64
}

/// Central finite differences (f(x+h·eᵢ) − f(x−h·eᵢ))/(2h) per coordinate.
/// This is the independent oracle every analytic gradient is checked against.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    point: &[f64],
    step: f64,
) -> Vec<f64> {
    assert!(step > 0.0, "step must be positive");
    let mut grad = vec![0.0; point.len()];
    let mut x = point.to_vec();
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Relative error |a−n| / max(1e-6, |a|+|n|) used by all gradient checks.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Largest componentwise relative error between two gradients.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}
