//! Descriptor post-processing: discriminative whitening learned from labeled
//! pairs (projection = inverse square root of the intraclass covariance
//! composed with a PCA rotation of the whitened interclass covariance), the
//! unsupervised PCA-whitening baseline, and their application.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::PairLabel;
use crate::numerics::{
    inv_sqrt_psd, l2_normalize, sym_eig, DenseMatrix, DescriptorTable, DescriptorVector,
};

/// Labeled descriptor pairs plus the table resolving their ids.
#[derive(Debug, Clone)]
pub struct LabeledPairSet {
    pub pairs: Vec<(u64, u64, PairLabel)>,
    pub descriptors: DescriptorTable,
}

impl LabeledPairSet {
    fn descriptor(&self, id: u64) -> Result<&DescriptorVector> {
        self.descriptors.get(&id).ok_or(Error::MissingDescriptor(id))
    }

    fn dim(&self) -> Result<usize> {
        self.descriptors
            .values()
            .next()
            .map(|d| d.dim())
            .ok_or(Error::TooFewDescriptors(0))
    }
}

/// Projection applied as Pᵀ(v−μ) followed by ℓ2 normalization. P has K rows
/// and D ≤ K columns.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningTransform {
    pub mean: Vec<f64>,
    pub projection: DenseMatrix,
}

impl WhiteningTransform {
    pub fn in_dim(&self) -> usize {
        self.projection.rows
    }

    pub fn out_dim(&self) -> usize {
        self.projection.cols
    }
}

/// C_S: mean outer product of matching-pair differences.
pub fn intraclass_cov(pairs: &LabeledPairSet) -> Result<DenseMatrix> {
    pair_covariance(pairs, PairLabel::Matching)
}

/// C_D: mean outer product of non-matching-pair differences.
pub fn interclass_cov(pairs: &LabeledPairSet) -> Result<DenseMatrix> {
    pair_covariance(pairs, PairLabel::NonMatching)
}

fn pair_covariance(pairs: &LabeledPairSet, label: PairLabel) -> Result<DenseMatrix> {
    let dim = pairs.dim()?;
    let mut cov = DenseMatrix::zeros(dim, dim);
    let mut count = 0usize;
    for &(i, j, y) in &pairs.pairs {
        if y != label {
            continue;
        }
        let fi = pairs.descriptor(i)?;
        let fj = pairs.descriptor(j)?;
        if fi.dim() != dim || fj.dim() != dim {
            return Err(Error::DimensionMismatch {
                context: "pair covariance",
                left: fi.dim(),
                right: dim,
            });
        }
        let d: Vec<f64> = fi.values.iter().zip(&fj.values).map(|(a, b)| a - b).collect();
        cov.add_outer(&d, 1.0);
        count += 1;
    }
    if count == 0 {
        return Err(match label {
            PairLabel::Matching => Error::NoMatchingPairs,
            PairLabel::NonMatching => Error::NoNonMatchingPairs,
        });
    }
    // normalizing by pair count only rescales the projection, which the
    // final ℓ2 normalization erases, but it keeps the eigensolver well fed
    let scale = 1.0 / count as f64;
    for v in &mut cov.values {
        *v *= scale;
    }
    Ok(cov)
}

/// Shift added to C_S before inversion, as a fraction of its mean eigenvalue.
/// Small enough that Pᵀ·C_S·P stays within 1e-6 of the identity for any
/// reasonably conditioned C_S, large enough to survive rank deficiency.
const LW_SHIFT: f64 = 1e-9;

/// Covariance traces below this are treated as zero. Descriptors are unit
/// vectors, so a trace this small means per-coordinate variation under
/// ~1e-10: rounding noise, not signal, and inverting it would only amplify
/// that noise.
const DEGENERATE_TRACE: f64 = 1e-20;

/// Learns the discriminative whitening: W = (C_S+λI)^{-1/2}, R = top-D
/// eigenvectors of W·C_D·W, P = W·R, centered on the mean of the distinct
/// descriptors appearing in the pair set.
pub fn learn_lw(pairs: &LabeledPairSet, target_dim: usize) -> Result<WhiteningTransform> {
    let dim = pairs.dim()?;
    if target_dim == 0 || target_dim > dim {
        return Err(Error::BadTargetDim {
            requested: target_dim,
            available: dim,
        });
    }
    let mut c_s = intraclass_cov(pairs)?;
    let c_d = interclass_cov(pairs)?;
    // A zero C_S means every matching pair has identical descriptors (a
    // collapsed model); the shift below would vanish with it and the
    // inverse square root blow up.
    if c_s.trace() < DEGENERATE_TRACE {
        return Err(Error::DegenerateCovariance { context: "intraclass" });
    }

    let lambda = LW_SHIFT * c_s.trace() / dim as f64;
    for i in 0..dim {
        c_s.set(i, i, c_s.get(i, i) + lambda);
    }
    let w = inv_sqrt_psd(&c_s, lambda)?;
    let rotated = w.matmul(&c_d).matmul(&w);
    let eig = sym_eig(&rotated)?;
    let mut r = DenseMatrix::zeros(dim, target_dim);
    for col in 0..target_dim {
        for row in 0..dim {
            r.set(row, col, eig.eigenvectors.get(row, col));
        }
    }
    let projection = w.matmul(&r);

    let mut seen = BTreeSet::new();
    for &(i, j, _) in &pairs.pairs {
        seen.insert(i);
        seen.insert(j);
    }
    let mut mean = vec![0.0; dim];
    for &id in &seen {
        let d = pairs.descriptor(id)?;
        for (m, v) in mean.iter_mut().zip(&d.values) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= seen.len() as f64;
    }

    let transform = WhiteningTransform { mean, projection };
    if transform.projection.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteTransform);
    }
    Ok(transform)
}

/// PCA whitening baseline: top-D eigenvectors of the descriptor covariance,
/// each scaled by λ^{-1/2} (floored), centered on the mean descriptor.
pub fn learn_pcaw(descriptors: &DescriptorTable, target_dim: usize) -> Result<WhiteningTransform> {
    let n = descriptors.len();
    if n < 2 {
        return Err(Error::TooFewDescriptors(n));
    }
    let dim = descriptors.values().next().expect("non-empty").dim();
    if target_dim == 0 || target_dim > dim {
        return Err(Error::BadTargetDim {
            requested: target_dim,
            available: dim,
        });
    }
    let mut mean = vec![0.0; dim];
    for d in descriptors.values() {
        if d.dim() != dim {
            return Err(Error::DimensionMismatch {
                context: "pcaw descriptors",
                left: d.dim(),
                right: dim,
            });
        }
        for (m, v) in mean.iter_mut().zip(&d.values) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DenseMatrix::zeros(dim, dim);
    let mut centered = vec![0.0; dim];
    for d in descriptors.values() {
        for (c, (v, m)) in centered.iter_mut().zip(d.values.iter().zip(&mean)) {
            *c = v - m;
        }
        cov.add_outer(&centered, 1.0 / n as f64);
    }
    if cov.trace() < DEGENERATE_TRACE {
        return Err(Error::DegenerateCovariance { context: "descriptor" });
    }
    let eig = sym_eig(&cov)?;
    let floor = crate::numerics::default_eig_floor(&cov).max(f64::MIN_POSITIVE);
    let mut projection = DenseMatrix::zeros(dim, target_dim);
    for col in 0..target_dim {
        let scale = 1.0 / eig.eigenvalues[col].max(floor).sqrt();
        for row in 0..dim {
            projection.set(row, col, eig.eigenvectors.get(row, col) * scale);
        }
    }
    let transform = WhiteningTransform { mean, projection };
    if transform.projection.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteTransform);
    }
    Ok(transform)
}

/// l2_normalize(Pᵀ(v−μ)).
pub fn apply_whitening(t: &WhiteningTransform, v: &DescriptorVector) -> Result<DescriptorVector> {
    if v.dim() != t.in_dim() {
        return Err(Error::DimensionMismatch {
            context: "apply_whitening",
            left: v.dim(),
            right: t.in_dim(),
        });
    }
    let centered: Vec<f64> = v.values.iter().zip(&t.mean).map(|(a, m)| a - m).collect();
    let projected = t.projection.transpose_apply(&centered);
    Ok(l2_normalize(&DescriptorVector::raw(projected)))
}

const WHITENING_MAGIC: [u8; 4] = *b"GEMW";

/// Writes magic, little-endian u32 K and D, then μ (K f32) and P (K·D f32,
/// row-major).
pub fn save_whitening(t: &WhiteningTransform, path: &Path) -> Result<()> {
    let (k, d) = (t.in_dim(), t.out_dim());
    let mut out = Vec::with_capacity(12 + (k + k * d) * 4);
    out.extend_from_slice(&WHITENING_MAGIC);
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in &t.mean {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &v in &t.projection.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_whitening(path: &Path) -> Result<WhiteningTransform> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    if data.len() < 12 {
        return Err(Error::Truncated { path: path.to_path_buf() });
    }
    if data[..4] != WHITENING_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: WHITENING_MAGIC,
        });
    }
    let k = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    let expected = k + k * d;
    let payload = &data[12..];
    if payload.len() != expected * 4 {
        return Err(Error::PayloadSizeMismatch {
            path: path.to_path_buf(),
            header: expected * 4,
            payload: payload.len(),
        });
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(WhiteningTransform {
        mean: values[..k].to_vec(),
        projection: DenseMatrix {
            rows: k,
            cols: d,
            values: values[k..].to_vec(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_from_parts;
    use rand::Rng;

    fn raw(values: Vec<f64>) -> DescriptorVector {
        DescriptorVector::raw(values)
    }

    /// Pair set whose matching differences are exactly ±d_m and non-matching
    /// differences exactly ±d_n, built from descriptors at those offsets.
    fn two_direction_pairs(d_m: [f64; 2], d_n: [f64; 2]) -> LabeledPairSet {
        let mut descriptors = DescriptorTable::new();
        descriptors.insert(0, raw(vec![0.0, 0.0]));
        descriptors.insert(1, raw(vec![d_m[0], d_m[1]]));
        descriptors.insert(2, raw(vec![d_n[0], d_n[1]]));
        LabeledPairSet {
            pairs: vec![
                (1, 0, PairLabel::Matching),
                (0, 1, PairLabel::Matching),
                (2, 0, PairLabel::NonMatching),
                (0, 2, PairLabel::NonMatching),
            ],
            descriptors,
        }
    }

    #[test]
    fn intraclass_single_pair_outer_product() {
        let mut descriptors = DescriptorTable::new();
        descriptors.insert(0, raw(vec![1.0, 0.0]));
        descriptors.insert(1, raw(vec![0.0, 0.0]));
        let pairs = LabeledPairSet {
            pairs: vec![(0, 1, PairLabel::Matching), (0, 1, PairLabel::NonMatching)],
            descriptors,
        };
        let c = intraclass_cov(&pairs).unwrap();
        assert_eq!(c.values, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn interclass_single_pair_outer_product() {
        let mut descriptors = DescriptorTable::new();
        descriptors.insert(0, raw(vec![0.0, 2.0]));
        descriptors.insert(1, raw(vec![0.0, 0.0]));
        let pairs = LabeledPairSet {
            pairs: vec![(0, 1, PairLabel::NonMatching), (0, 1, PairLabel::Matching)],
            descriptors,
        };
        let c = interclass_cov(&pairs).unwrap();
        assert_eq!(c.values, vec![0.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn identical_descriptor_pairs_give_zero_covariance() {
        let mut descriptors = DescriptorTable::new();
        descriptors.insert(0, raw(vec![0.3, 0.4]));
        let pairs = LabeledPairSet {
            pairs: vec![(0, 0, PairLabel::Matching), (0, 0, PairLabel::NonMatching)],
            descriptors,
        };
        assert!(intraclass_cov(&pairs).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_label_classes_error() {
        let mut descriptors = DescriptorTable::new();
        descriptors.insert(0, raw(vec![1.0]));
        descriptors.insert(1, raw(vec![0.0]));
        let only_matching = LabeledPairSet {
            pairs: vec![(0, 1, PairLabel::Matching)],
            descriptors: descriptors.clone(),
        };
        assert!(matches!(
            interclass_cov(&only_matching),
            Err(Error::NoNonMatchingPairs)
        ));
        let only_non = LabeledPairSet {
            pairs: vec![(0, 1, PairLabel::NonMatching)],
            descriptors,
        };
        assert!(matches!(intraclass_cov(&only_non), Err(Error::NoMatchingPairs)));
    }

    /// Matching differences ±2e₁ give C_S = diag(4,0); non-matching ±e₂ give
    /// C_D = diag(0,1). The first projected coordinate must align with e₂
    /// (the interclass direction), and projected matching differences must
    /// have variance 1 on the retained intraclass direction.
    #[test]
    fn lw_closed_form_2x2_fixture() {
        let pairs = two_direction_pairs([2.0, 0.0], [0.0, 1.0]);
        let c_s = intraclass_cov(&pairs).unwrap();
        assert_eq!(c_s.values, vec![4.0, 0.0, 0.0, 0.0]);
        let c_d = interclass_cov(&pairs).unwrap();
        assert_eq!(c_d.values, vec![0.0, 0.0, 0.0, 1.0]);

        let t = learn_lw(&pairs, 2).unwrap();
        // first column of P points along e2
        let c0 = t.projection.column(0);
        let c0_norm = (c0[0] * c0[0] + c0[1] * c0[1]).sqrt();
        assert!(c0[0].abs() / c0_norm < 1e-6);
        assert!(c0[1].abs() / c0_norm > 1.0 - 1e-6);

        // projected matching differences: variance 1 on the intraclass axis
        let d = vec![2.0, 0.0];
        let proj = t.projection.transpose_apply(&d);
        assert!(proj[0].abs() < 1e-6);
        assert!((proj[1].abs() - 1.0).abs() < 1e-6, "{}", proj[1]);
    }

    /// C_S = I by construction (matching differences ±√2·e₁ and ±√2·e₂), so
    /// the whitening is the identity and P reduces to the top eigenvectors
    /// of C_D.
    #[test]
    fn lw_with_identity_cs_is_pca_of_cd() {
        let mut descriptors = DescriptorTable::new();
        let s = 2.0_f64.sqrt();
        descriptors.insert(0, raw(vec![0.0, 0.0]));
        descriptors.insert(1, raw(vec![s, 0.0]));
        descriptors.insert(2, raw(vec![0.0, s]));
        // interclass differences along (1,1) and (1,-1)
        descriptors.insert(3, raw(vec![3.0, 3.0]));
        descriptors.insert(4, raw(vec![3.0 + 1.0, 3.0 - 1.0]));
        let pairs = LabeledPairSet {
            pairs: vec![
                (1, 0, PairLabel::Matching),
                (0, 1, PairLabel::Matching),
                (2, 0, PairLabel::Matching),
                (0, 2, PairLabel::Matching),
                (3, 0, PairLabel::NonMatching),
                (4, 3, PairLabel::NonMatching),
            ],
            descriptors,
        };
        let c_s = intraclass_cov(&pairs).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((c_s.get(i, j) - want).abs() < 1e-12);
            }
        }
        let c_d = interclass_cov(&pairs).unwrap();
        let eig = sym_eig(&c_d).unwrap();
        let t = learn_lw(&pairs, 1).unwrap();
        // top eigenvector of C_D, up to sign
        let p0 = t.projection.column(0);
        let v0 = eig.eigenvectors.column(0);
        let align = (p0[0] * v0[0] + p0[1] * v0[1]).abs();
        let p0_norm = (p0[0] * p0[0] + p0[1] * p0[1]).sqrt();
        assert!((align / p0_norm - 1.0).abs() < 1e-6);
    }

    fn random_pair_set(dim: usize, n: usize, seed: u64) -> LabeledPairSet {
        let mut rng = rng_from_parts(&[seed, 0x77686974]);
        let mut descriptors = DescriptorTable::new();
        for id in 0..n as u64 {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            descriptors.insert(id, raw(v));
        }
        let mut pairs = Vec::new();
        for _ in 0..6 * n {
            let i = rng.random_range(0..n as u64);
            let j = rng.random_range(0..n as u64);
            let label = PairLabel::from_matching(rng.random_range(0.0..1.0) < 0.5);
            pairs.push((i, j, label));
        }
        LabeledPairSet { pairs, descriptors }
    }

    #[test]
    fn lw_whitens_intraclass_and_diagonalizes_interclass() {
        let pairs = random_pair_set(6, 40, 3);
        let c_s = intraclass_cov(&pairs).unwrap();
        let c_d = interclass_cov(&pairs).unwrap();
        let t = learn_lw(&pairs, 6).unwrap();
        let p = &t.projection;
        let ident = p.transpose().matmul(&c_s).matmul(p);
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (ident.get(i, j) - want).abs() < 1e-6,
                    "PᵀC_SP[{i},{j}] = {}",
                    ident.get(i, j)
                );
            }
        }
        let diag = p.transpose().matmul(&c_d).matmul(p);
        for i in 0..6 {
            for j in 0..6 {
                if i != j {
                    assert!(diag.get(i, j).abs() < 1e-6, "PᵀC_DP[{i},{j}] = {}", diag.get(i, j));
                }
            }
        }
    }

    #[test]
    fn lw_full_dim_projection_is_invertible() {
        let pairs = random_pair_set(5, 30, 4);
        let t = learn_lw(&pairs, 5).unwrap();
        let gram = t.projection.transpose().matmul(&t.projection);
        let eig = sym_eig(&gram).unwrap();
        assert!(eig.eigenvalues.iter().all(|&l| l > 1e-12));
    }

    #[test]
    fn lw_rejects_bad_target_dim() {
        let pairs = random_pair_set(4, 10, 5);
        assert!(matches!(learn_lw(&pairs, 0), Err(Error::BadTargetDim { .. })));
        assert!(matches!(learn_lw(&pairs, 5), Err(Error::BadTargetDim { .. })));
    }

    /// A collapsed model maps every image to one descriptor; C_S is then the
    /// zero matrix and inversion would be infinite. The learner must refuse.
    #[test]
    fn lw_rejects_collapsed_descriptors() {
        let mut descriptors = DescriptorTable::new();
        for id in 0..4u64 {
            descriptors.insert(id, raw(vec![0.6, 0.8]));
        }
        let pairs = LabeledPairSet {
            pairs: vec![
                (0, 1, PairLabel::Matching),
                (2, 3, PairLabel::Matching),
                (0, 2, PairLabel::NonMatching),
                (1, 3, PairLabel::NonMatching),
            ],
            descriptors,
        };
        assert!(matches!(
            learn_lw(&pairs, 2),
            Err(Error::DegenerateCovariance { context: "intraclass" })
        ));
    }

    #[test]
    fn pcaw_isotropic_cloud_projects_to_identity_covariance() {
        let mut rng = rng_from_parts(&[6, 0x70636177]);
        let mut descriptors = DescriptorTable::new();
        for id in 0..500u64 {
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            descriptors.insert(id, raw(v));
        }
        let t = learn_pcaw(&descriptors, 3).unwrap();
        assert_projected_cov_near_identity(&descriptors, &t, 0.15);
    }

    #[test]
    fn pcaw_anisotropic_fixture() {
        // x has variance 9, y variance 1
        let mut rng = rng_from_parts(&[7, 0x70636177]);
        let mut descriptors = DescriptorTable::new();
        for id in 0..2000u64 {
            let x = 3.0 * gaussian(&mut rng);
            let y = gaussian(&mut rng);
            descriptors.insert(id, raw(vec![x, y]));
        }
        let t = learn_pcaw(&descriptors, 2).unwrap();
        assert_projected_cov_near_identity(&descriptors, &t, 0.15);

        // D=1 keeps the max-variance direction, the x axis
        let t1 = learn_pcaw(&descriptors, 1).unwrap();
        let col = t1.projection.column(0);
        assert!(col[0].abs() > 10.0 * col[1].abs());
    }

    fn gaussian<R: Rng>(rng: &mut R) -> f64 {
        // Box-Muller from two uniforms
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    fn assert_projected_cov_near_identity(
        descriptors: &DescriptorTable,
        t: &WhiteningTransform,
        tol: f64,
    ) {
        let d = t.out_dim();
        let mut cov = DenseMatrix::zeros(d, d);
        for v in descriptors.values() {
            let centered: Vec<f64> =
                v.values.iter().zip(&t.mean).map(|(a, m)| a - m).collect();
            let proj = t.projection.transpose_apply(&centered);
            cov.add_outer(&proj, 1.0 / descriptors.len() as f64);
        }
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (cov.get(i, j) - want).abs() < tol,
                    "projected cov[{i},{j}] = {}",
                    cov.get(i, j)
                );
            }
        }
    }

    #[test]
    fn pcaw_rejects_tiny_input() {
        let mut descriptors = DescriptorTable::new();
        descriptors.insert(0, raw(vec![1.0, 2.0]));
        assert!(matches!(
            learn_pcaw(&descriptors, 1),
            Err(Error::TooFewDescriptors(1))
        ));
    }

    #[test]
    fn pcaw_rejects_constant_descriptors() {
        let mut descriptors = DescriptorTable::new();
        for id in 0..3u64 {
            descriptors.insert(id, raw(vec![0.6, 0.8]));
        }
        assert!(matches!(
            learn_pcaw(&descriptors, 2),
            Err(Error::DegenerateCovariance { context: "descriptor" })
        ));
    }

    #[test]
    fn apply_identity_transform_is_noop() {
        let t = WhiteningTransform {
            mean: vec![0.0, 0.0],
            projection: DenseMatrix::identity(2),
        };
        let v = raw(vec![0.6, 0.8]);
        let out = apply_whitening(&t, &v).unwrap();
        assert!((out.values[0] - 0.6).abs() < 1e-15);
        assert!((out.values[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn apply_at_mean_gives_zero_vector() {
        let t = WhiteningTransform {
            mean: vec![0.3, -0.2],
            projection: DenseMatrix::identity(2),
        };
        let out = apply_whitening(&t, &raw(vec![0.3, -0.2])).unwrap();
        assert_eq!(out.values, vec![0.0, 0.0]);
        assert!(out.normalized);
    }

    #[test]
    fn apply_checks_dims() {
        let t = WhiteningTransform {
            mean: vec![0.0; 3],
            projection: DenseMatrix::identity(3),
        };
        assert!(matches!(
            apply_whitening(&t, &raw(vec![1.0, 2.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn apply_output_is_unit_or_zero() {
        let pairs = random_pair_set(5, 25, 8);
        let t = learn_lw(&pairs, 3).unwrap();
        for v in pairs.descriptors.values() {
            let out = apply_whitening(&t, v).unwrap();
            let n = out.norm();
            assert!(n == 0.0 || (n - 1.0).abs() < 1e-9);
            assert_eq!(out.dim(), 3);
        }
    }

    #[test]
    fn scaling_descriptors_preserves_whitened_ranking() {
        let pairs = random_pair_set(5, 25, 9);
        let t = learn_lw(&pairs, 5).unwrap();
        let ids: Vec<u64> = pairs.descriptors.keys().copied().collect();
        let q = &pairs.descriptors[&ids[0]];
        let wq = apply_whitening(&t, q).unwrap();

        let rank = |table: &DescriptorTable| -> Vec<u64> {
            let mut scored: Vec<(f64, u64)> = ids[1..]
                .iter()
                .map(|&i| {
                    let wi = apply_whitening(&t, &table[&i]).unwrap();
                    (crate::numerics::inner_product(&wq, &wi).unwrap(), i)
                })
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            scored.into_iter().map(|(_, i)| i).collect()
        };

        let base = rank(&pairs.descriptors);
        // scaling every descriptor and the query by c > 0 also scales the
        // mean-centered inputs only when μ is rescaled; rebuild the transform
        let mut scaled = pairs.clone();
        for d in scaled.descriptors.values_mut() {
            for v in &mut d.values {
                *v *= 2.5;
            }
        }
        let t2 = learn_lw(&scaled, 5).unwrap();
        let wq2 = apply_whitening(&t2, &scaled.descriptors[&ids[0]]).unwrap();
        let mut scored2: Vec<(f64, u64)> = ids[1..]
            .iter()
            .map(|&i| {
                let wi = apply_whitening(&t2, &scaled.descriptors[&i]).unwrap();
                (crate::numerics::inner_product(&wq2, &wi).unwrap(), i)
            })
            .collect();
        scored2.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let scaled_rank: Vec<u64> = scored2.into_iter().map(|(_, i)| i).collect();
        assert_eq!(base, scaled_rank);
    }

    #[test]
    fn whitening_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.gemw");
        let mut rng = rng_from_parts(&[10]);
        let t = WhiteningTransform {
            mean: (0..4).map(|_| rng.random_range(-1.0..1.0f64) as f32 as f64).collect(),
            projection: DenseMatrix {
                rows: 4,
                cols: 2,
                values: (0..8).map(|_| rng.random_range(-1.0..1.0f64) as f32 as f64).collect(),
            },
        };
        save_whitening(&t, &path).unwrap();
        let back = load_whitening(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn whitening_load_rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let bad_magic = dir.path().join("bad.gemw");
        std::fs::write(&bad_magic, b"XXXX\x01\0\0\0\x01\0\0\0").unwrap();
        assert!(matches!(load_whitening(&bad_magic), Err(Error::BadMagic { .. })));

        let truncated = dir.path().join("short.gemw");
        std::fs::write(&truncated, b"GEMW\x01\0").unwrap();
        assert!(matches!(load_whitening(&truncated), Err(Error::Truncated { .. })));

        let mismatched = dir.path().join("mismatch.gemw");
        let mut data = b"GEMW".to_vec();
        data.extend_from_slice(&2u32.to_le_bytes());
        data.extend_from_slice(&2u32.to_le_bytes());
        data.extend_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&mismatched, data).unwrap();
        assert!(matches!(
            load_whitening(&mismatched),
            Err(Error::PayloadSizeMismatch { .. })
        ));
    }
}
