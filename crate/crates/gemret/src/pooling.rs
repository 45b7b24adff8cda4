//! Global pooling of activation tensors into descriptors: max (MAC), average
//! (SPoC), and the generalized mean (GeM) with learnable exponent that
//! interpolates between them. GeM ships analytic gradients for both the
//! activations and the exponent(s).

use crate::backbone::TinyFcn;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{l2_normalize, ActivationTensor, DescriptorVector};

/// Activations are clamped to at least this before x^p and log x. ReLU makes
/// exact zeros common and the GeM derivative is singular there; the clamp
/// perturbs pooled values by at most this amount.
pub const ACTIVATION_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingMode {
    Max,
    Average,
    Gem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExponentSharing {
    Shared,
    PerMap,
}

/// Pooling behaviour plus the exponent state when mode is GeM: one exponent
/// if shared, K if per-map. Exponents never drop below 1, which keeps the
/// power mean inside the average-to-max family.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingConfig {
    pub mode: PoolingMode,
    pub sharing: ExponentSharing,
    pub exponents: Vec<f64>,
    pub trainable: bool,
}

impl PoolingConfig {
    pub fn max() -> Self {
        Self {
            mode: PoolingMode::Max,
            sharing: ExponentSharing::Shared,
            exponents: Vec::new(),
            trainable: false,
        }
    }

    pub fn average() -> Self {
        Self {
            mode: PoolingMode::Average,
            sharing: ExponentSharing::Shared,
            exponents: Vec::new(),
            trainable: false,
        }
    }

    pub fn gem_shared(p: f64) -> Result<Self> {
        if p < 1.0 {
            return Err(Error::ExponentBelowOne { value: p });
        }
        Ok(Self {
            mode: PoolingMode::Gem,
            sharing: ExponentSharing::Shared,
            exponents: vec![p],
            trainable: true,
        })
    }

    pub fn gem_per_map(ps: Vec<f64>) -> Result<Self> {
        if let Some(&p) = ps.iter().find(|p| **p < 1.0) {
            return Err(Error::ExponentBelowOne { value: p });
        }
        Ok(Self {
            mode: PoolingMode::Gem,
            sharing: ExponentSharing::PerMap,
            exponents: ps,
            trainable: true,
        })
    }

    /// Exponent for map k under the sharing rule.
    #[inline]
    pub fn exponent(&self, k: usize) -> f64 {
        match self.sharing {
            ExponentSharing::Shared => self.exponents[0],
            ExponentSharing::PerMap => self.exponents[k],
        }
    }

    fn check_for(&self, maps: usize) -> Result<()> {
        if let Some(&p) = self.exponents.iter().find(|p| **p < 1.0) {
            return Err(Error::ExponentBelowOne { value: p });
        }
        let expected = match self.sharing {
            ExponentSharing::Shared => 1,
            ExponentSharing::PerMap => maps,
        };
        if self.exponents.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "pooling exponents",
                left: self.exponents.len(),
                right: expected,
            });
        }
        Ok(())
    }
}

/// f_k = max over map k.
pub fn mac_pool(x: &ActivationTensor) -> DescriptorVector {
    let values = (0..x.maps)
        .map(|k| x.map_values(k).fold(0.0_f64, f64::max))
        .collect();
    DescriptorVector::raw(values)
}

/// f_k = mean over map k.
pub fn spoc_pool(x: &ActivationTensor) -> DescriptorVector {
    let n = x.plane_size() as f64;
    let values = (0..x.maps)
        .map(|k| x.map_values(k).sum::<f64>() / n)
        .collect();
    DescriptorVector::raw(values)
}

/// f_k = ((1/|X_k|)·Σ x^{p_k})^{1/p_k} over the clamped map. Evaluated as
/// m·((1/N)·Σ(x/m)^p)^{1/p} with m the map maximum so large p cannot
/// overflow.
pub fn gem_pool(x: &ActivationTensor, cfg: &PoolingConfig) -> Result<DescriptorVector> {
    cfg.check_for(x.maps)?;
    let n = x.plane_size() as f64;
    let mut values = Vec::with_capacity(x.maps);
    for k in 0..x.maps {
        let p = cfg.exponent(k);
        let m = x
            .map_values(k)
            .fold(ACTIVATION_CLAMP, |acc, v| acc.max(v.max(ACTIVATION_CLAMP)));
        let t: f64 = x
            .map_values(k)
            .map(|v| (v.max(ACTIVATION_CLAMP) / m).powf(p))
            .sum();
        values.push(m * (t / n).powf(1.0 / p));
    }
    Ok(DescriptorVector::raw(values))
}

/// Gradient w.r.t. the activations:
/// ∂f_k/∂x_i = (1/|X_k|)·f_k^{1−p_k}·x_i^{p_k−1}, evaluated as
/// (1/N)·(x_i/f_k)^{p−1}. Elements sitting below the clamp are insensitive,
/// so their gradient is zero.
pub fn gem_backward_x(
    x: &ActivationTensor,
    cfg: &PoolingConfig,
    f: &DescriptorVector,
    grad_f: &DescriptorVector,
) -> Result<ActivationTensor> {
    cfg.check_for(x.maps)?;
    check_dim("gem_backward_x pooled", f.dim(), x.maps)?;
    check_dim("gem_backward_x upstream", grad_f.dim(), x.maps)?;
    let n = x.plane_size() as f64;
    let mut out = ActivationTensor::zeros(x.width, x.height, x.maps);
    for k in 0..x.maps {
        let p = cfg.exponent(k);
        let gf = grad_f.values[k];
        if gf == 0.0 {
            continue;
        }
        let fk = f.values[k];
        for (i, v) in x.map_values(k).enumerate() {
            if v < ACTIVATION_CLAMP {
                continue;
            }
            out.values[i * x.maps + k] = gf / n * (v / fk).powf(p - 1.0);
        }
    }
    Ok(out)
}

/// Gradient w.r.t. the exponent(s):
/// ∂f_k/∂p_k = (f_k/p_k²)·(log(|X_k|/Σx^p) + p_k·(Σx^p·log x)/(Σx^p)),
/// evaluated with Σx^p factored as m^p·T to stay finite at large p. Returns
/// one value when shared (the sum of per-map contributions), K when per-map.
pub fn gem_backward_p(
    x: &ActivationTensor,
    cfg: &PoolingConfig,
    f: &DescriptorVector,
    grad_f: &DescriptorVector,
) -> Result<Vec<f64>> {
    cfg.check_for(x.maps)?;
    check_dim("gem_backward_p pooled", f.dim(), x.maps)?;
    check_dim("gem_backward_p upstream", grad_f.dim(), x.maps)?;
    let n = x.plane_size() as f64;
    let mut per_map = Vec::with_capacity(x.maps);
    for k in 0..x.maps {
        let p = cfg.exponent(k);
        let gf = grad_f.values[k];
        if gf == 0.0 {
            per_map.push(0.0);
            continue;
        }
        let m = x
            .map_values(k)
            .fold(ACTIVATION_CLAMP, |acc, v| acc.max(v.max(ACTIVATION_CLAMP)));
        let mut t = 0.0;
        let mut t_log = 0.0;
        for v in x.map_values(k) {
            let xc = v.max(ACTIVATION_CLAMP);
            let w = (xc / m).powf(p);
            t += w;
            t_log += w * xc.ln();
        }
        // log(N/Σx^p) = log N − p·log m − log T with Σx^p = m^p·T
        let df_dp = f.values[k] / (p * p) * (n.ln() - p * m.ln() - t.ln() + p * t_log / t);
        per_map.push(gf * df_dp);
    }
    match cfg.sharing {
        ExponentSharing::Shared => Ok(vec![per_map.iter().sum()]),
        ExponentSharing::PerMap => Ok(per_map),
    }
}

/// Pools with the configured mode.
pub fn pool(x: &ActivationTensor, cfg: &PoolingConfig) -> Result<DescriptorVector> {
    match cfg.mode {
        PoolingMode::Max => Ok(mac_pool(x)),
        PoolingMode::Average => Ok(spoc_pool(x)),
        PoolingMode::Gem => gem_pool(x, cfg),
    }
}

/// Activation gradient for any pooling mode. Average pooling spreads the
/// upstream gradient uniformly; max pooling routes it to the first element
/// attaining the maximum (a subgradient choice under ties).
pub fn pool_backward_x(
    x: &ActivationTensor,
    cfg: &PoolingConfig,
    f: &DescriptorVector,
    grad_f: &DescriptorVector,
) -> Result<ActivationTensor> {
    if cfg.mode == PoolingMode::Gem {
        return gem_backward_x(x, cfg, f, grad_f);
    }
    check_dim("pool_backward_x pooled", f.dim(), x.maps)?;
    check_dim("pool_backward_x upstream", grad_f.dim(), x.maps)?;
    let mut out = ActivationTensor::zeros(x.width, x.height, x.maps);
    for k in 0..x.maps {
        match cfg.mode {
            PoolingMode::Average => {
                let g = grad_f.values[k] / x.plane_size() as f64;
                for i in 0..x.plane_size() {
                    out.values[i * x.maps + k] = g;
                }
            }
            PoolingMode::Max => {
                if let Some(at) = x.map_values(k).position(|v| v == f.values[k]) {
                    out.values[at * x.maps + k] = grad_f.values[k];
                }
            }
            PoolingMode::Gem => unreachable!("handled above"),
        }
    }
    Ok(out)
}

/// The full single-scale descriptor: forward, pool, ℓ2-normalize.
pub fn extract_descriptor(
    net: &TinyFcn,
    cfg: &PoolingConfig,
    img: &Image,
) -> Result<DescriptorVector> {
    let (tensor, _) = net.forward(img)?;
    Ok(l2_normalize(&pool(&tensor, cfg)?))
}

fn check_dim(context: &'static str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::DimensionMismatch {
            context,
            left: got,
            right: expected,
        });
    }
    Ok(())
}
