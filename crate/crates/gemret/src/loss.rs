//! Contrastive loss over labeled descriptor pairs, plus the triplet-loss
//! baseline. Both operate on ℓ2-normalized descriptors; the chain back
//! through normalization is the trainer's job.

use crate::error::{Error, Result};
use crate::numerics::DescriptorVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel {
    NonMatching,
    Matching,
}

impl PairLabel {
    pub fn from_matching(matching: bool) -> Self {
        if matching {
            PairLabel::Matching
        } else {
            PairLabel::NonMatching
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Margin τ for the contrastive hinge.
    pub margin: f64,
    pub triplet_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.75,
            triplet_margin: 0.1,
        }
    }
}

/// Matching pairs pay ½‖f̄(i)−f̄(j)‖²; non-matching pairs pay
/// ½·max{0, τ−‖f̄(i)−f̄(j)‖}².
pub fn contrastive_loss(
    fi: &DescriptorVector,
    fj: &DescriptorVector,
    y: PairLabel,
    cfg: &LossConfig,
) -> Result<f64> {
    let d = diff(fi, fj, "contrastive_loss")?;
    let dist = norm(&d);
    Ok(match y {
        PairLabel::Matching => 0.5 * dist * dist,
        PairLabel::NonMatching => {
            let gap = (cfg.margin - dist).max(0.0);
            0.5 * gap * gap
        }
    })
}

/// Gradients w.r.t. the two normalized descriptors. Matching: (d, −d) with
/// d = f̄(i)−f̄(j). Non-matching inside the margin: ∓(τ−‖d‖)·d/‖d‖, with the
/// subgradient 0 chosen at the coincident-descriptor singularity.
pub fn contrastive_grad(
    fi: &DescriptorVector,
    fj: &DescriptorVector,
    y: PairLabel,
    cfg: &LossConfig,
) -> Result<(DescriptorVector, DescriptorVector)> {
    let d = diff(fi, fj, "contrastive_grad")?;
    let dist = norm(&d);
    let gi: Vec<f64> = match y {
        PairLabel::Matching => d,
        PairLabel::NonMatching => {
            if dist >= cfg.margin || dist == 0.0 {
                vec![0.0; d.len()]
            } else {
                let scale = -(cfg.margin - dist) / dist;
                d.iter().map(|v| scale * v).collect()
            }
        }
    };
    let gj: Vec<f64> = gi.iter().map(|v| -v).collect();
    Ok((DescriptorVector::raw(gi), DescriptorVector::raw(gj)))
}

/// max{0, ‖fq−fpos‖² − ‖fq−fneg‖² + margin}.
pub fn triplet_loss(
    fq: &DescriptorVector,
    fpos: &DescriptorVector,
    fneg: &DescriptorVector,
    cfg: &LossConfig,
) -> Result<f64> {
    let dp = diff(fq, fpos, "triplet_loss")?;
    let dn = diff(fq, fneg, "triplet_loss")?;
    Ok((sq_norm(&dp) - sq_norm(&dn) + cfg.triplet_margin).max(0.0))
}

/// Gradients w.r.t. (fq, fpos, fneg); zero when the hinge is inactive.
pub fn triplet_grad(
    fq: &DescriptorVector,
    fpos: &DescriptorVector,
    fneg: &DescriptorVector,
    cfg: &LossConfig,
) -> Result<(DescriptorVector, DescriptorVector, DescriptorVector)> {
    let dp = diff(fq, fpos, "triplet_grad")?;
    let dn = diff(fq, fneg, "triplet_grad")?;
    let dim = dp.len();
    if sq_norm(&dp) - sq_norm(&dn) + cfg.triplet_margin <= 0.0 {
        return Ok((
            DescriptorVector::zero(dim),
            DescriptorVector::zero(dim),
            DescriptorVector::zero(dim),
        ));
    }
    let gq = (0..dim).map(|i| 2.0 * (dp[i] - dn[i])).collect();
    let gp = dp.iter().map(|v| -2.0 * v).collect();
    let gn = dn.iter().map(|v| 2.0 * v).collect();
    Ok((
        DescriptorVector::raw(gq),
        DescriptorVector::raw(gp),
        DescriptorVector::raw(gn),
    ))
}

fn diff(a: &DescriptorVector, b: &DescriptorVector, context: &'static str) -> Result<Vec<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            context,
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect())
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn norm(v: &[f64]) -> f64 {
    sq_norm(v).sqrt()
}
