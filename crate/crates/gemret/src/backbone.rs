//! Tiny fully convolutional backbone: stride-1 valid-padding convolutions,
//! each followed by ReLU, so the final activation tensor is non-negative.
//! Also reads and writes the "GEMT" activation tensor format for pipelines
//! that extract features elsewhere.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{rng_from_parts, ActivationTensor};

/// One convolution layer. Weights are row-major over output map, kernel row,
/// kernel column, input map: `index = ((o*k + ky)*k + kx)*in_maps + ic`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: usize,
    pub in_maps: usize,
    pub out_maps: usize,
    pub stride: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(kernel: usize, in_maps: usize, out_maps: usize) -> Self {
        Self {
            kernel,
            in_maps,
            out_maps,
            stride: 1,
            weights: vec![0.0; out_maps * kernel * kernel * in_maps],
            biases: vec![0.0; out_maps],
        }
    }

    #[inline]
    fn w(&self, o: usize, ky: usize, kx: usize, ic: usize) -> f64 {
        self.weights[((o * self.kernel + ky) * self.kernel + kx) * self.in_maps + ic]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyFcn {
    pub layers: Vec<ConvLayer>,
}

/// Per-layer weight/bias gradients, shapes mirroring [`TinyFcn`].
#[derive(Debug, Clone)]
pub struct BackboneGradients {
    pub layers: Vec<LayerGradients>,
}

#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Intermediates retained by [`TinyFcn::forward`] for the backward pass:
/// the input to each layer and each layer's pre-activation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<ActivationTensor>,
    preacts: Vec<ActivationTensor>,
}

impl TinyFcn {
    /// Builds a net from (kernel, out_maps) specs chained onto `in_channels`,
    /// weights drawn uniformly from ±sqrt(6/(fan_in+fan_out)), biases zero.
    pub fn seeded(in_channels: usize, specs: &[(usize, usize)], seed: u64) -> Self {
        let mut rng = rng_from_parts(&[seed, 0x6261636b]);
        let mut layers = Vec::with_capacity(specs.len());
        let mut maps = in_channels;
        for &(kernel, out_maps) in specs {
            let mut layer = ConvLayer::zeros(kernel, maps, out_maps);
            let fan_in = (kernel * kernel * maps) as f64;
            let fan_out = (kernel * kernel * out_maps) as f64;
            let bound = (6.0 / (fan_in + fan_out)).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-bound..bound);
            }
            layers.push(layer);
            maps = out_maps;
        }
        Self { layers }
    }

    /// The default trunk: three 3x3 layers, 8 -> 16 -> `out_maps`.
    pub fn default_seeded(in_channels: usize, out_maps: usize, seed: u64) -> Self {
        Self::seeded(in_channels, &[(3, 8), (3, 16), (3, out_maps)], seed)
    }

    pub fn out_maps(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_maps)
    }

    /// Side length the valid-padding stack consumes: Σ (k−1)·s_prefix + 1.
    pub fn receptive_field(&self) -> usize {
        let mut field = 1;
        let mut jump = 1;
        for layer in &self.layers {
            field += (layer.kernel - 1) * jump;
            jump *= layer.stride;
        }
        field
    }

    pub fn forward(&self, img: &Image) -> Result<(ActivationTensor, ForwardCache)> {
        let first = self.layers.first().expect("net has at least one layer");
        if img.channels != first.in_maps {
            return Err(Error::ChannelMismatch {
                expected: first.in_maps,
                got: img.channels,
            });
        }
        let field = self.receptive_field();
        if img.width < field || img.height < field {
            return Err(Error::ImageTooSmall {
                width: img.width,
                height: img.height,
                field,
            });
        }

        let mut current = image_to_tensor(img);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let pre = convolve_valid(layer, &current);
            let mut act = pre.clone();
            for v in &mut act.values {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            inputs.push(current);
            preacts.push(pre);
            current = act;
        }
        Ok((current, ForwardCache { inputs, preacts }))
    }

    /// Exact gradients of the cached forward pass w.r.t. all weights and
    /// biases. ReLU gates pass gradient only where the pre-activation was
    /// strictly positive.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: &ActivationTensor,
    ) -> Result<BackboneGradients> {
        let last_pre = cache.preacts.last().expect("cache from a forward pass");
        if !grad_out.same_shape(last_pre) {
            return Err(Error::TensorShapeMismatch {
                expected: last_pre.shape_string(),
                got: grad_out.shape_string(),
            });
        }

        let mut grads: Vec<LayerGradients> = self
            .layers
            .iter()
            .map(|l| LayerGradients {
                weights: vec![0.0; l.weights.len()],
                biases: vec![0.0; l.biases.len()],
            })
            .collect();

        let mut grad = grad_out.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.preacts[idx];
            let input = &cache.inputs[idx];
            // gate through ReLU
            for (g, &p) in grad.values.iter_mut().zip(&pre.values) {
                if p <= 0.0 {
                    *g = 0.0;
                }
            }

            let g = &mut grads[idx];
            let mut grad_in = ActivationTensor::zeros(input.width, input.height, input.maps);
            let k = layer.kernel;
            let s = layer.stride;
            for y in 0..grad.height {
                for x in 0..grad.width {
                    for o in 0..layer.out_maps {
                        let gp = grad.get(x, y, o);
                        if gp == 0.0 {
                            continue;
                        }
                        g.biases[o] += gp;
                        for ky in 0..k {
                            for kx in 0..k {
                                let ix = x * s + kx;
                                let iy = y * s + ky;
                                let base = ((o * k + ky) * k + kx) * layer.in_maps;
                                for ic in 0..layer.in_maps {
                                    g.weights[base + ic] += gp * input.get(ix, iy, ic);
                                    let gi = grad_in.get(ix, iy, ic)
                                        + gp * layer.weights[base + ic];
                                    grad_in.set(ix, iy, ic, gi);
                                }
                            }
                        }
                    }
                }
            }
            grad = grad_in;
        }
        Ok(BackboneGradients { layers: grads })
    }

    /// Flattened parameters, layer by layer, weights then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.biases);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let mut pos = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&params[pos..pos + nw]);
            pos += nw;
            let nb = layer.biases.len();
            layer.biases.copy_from_slice(&params[pos..pos + nb]);
            pos += nb;
        }
        assert_eq!(pos, params.len(), "parameter count mismatch");
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }
}

impl BackboneGradients {
    /// Flattened in the same order as [`TinyFcn::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.biases);
        }
        out
    }

    pub fn zeros_like(net: &TinyFcn) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradients {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &BackboneGradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += y;
            }
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            for w in &mut layer.weights {
                *w *= factor;
            }
            for b in &mut layer.biases {
                *b *= factor;
            }
        }
    }
}

pub fn image_to_tensor(img: &Image) -> ActivationTensor {
    ActivationTensor::new(img.width, img.height, img.channels, img.pixels.clone())
}

fn convolve_valid(layer: &ConvLayer, input: &ActivationTensor) -> ActivationTensor {
    let k = layer.kernel;
    let s = layer.stride;
    let out_w = (input.width - k) / s + 1;
    let out_h = (input.height - k) / s + 1;
    let mut out = ActivationTensor::zeros(out_w, out_h, layer.out_maps);
    for y in 0..out_h {
        for x in 0..out_w {
            for o in 0..layer.out_maps {
                let mut acc = layer.biases[o];
                for ky in 0..k {
                    for kx in 0..k {
                        for ic in 0..layer.in_maps {
                            acc += layer.w(o, ky, kx, ic) * input.get(x * s + kx, y * s + ky, ic);
                        }
                    }
                }
                out.set(x, y, o, acc);
            }
        }
    }
    out
}

const TENSOR_MAGIC: [u8; 4] = *b"GEMT";

/// Writes `W,H,K` as little-endian u32 after the magic, then the values as
/// little-endian f32 in tensor layout order.
pub fn save_tensor(tensor: &ActivationTensor, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(16 + tensor.values.len() * 4);
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&(tensor.width as u32).to_le_bytes());
    out.extend_from_slice(&(tensor.height as u32).to_le_bytes());
    out.extend_from_slice(&(tensor.maps as u32).to_le_bytes());
    for &v in &tensor.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a "GEMT" tensor, rejecting bad magic, truncation, payload size
/// mismatches, and negative activations.
pub fn load_precomputed(path: &Path) -> Result<ActivationTensor> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    if data.len() < 16 {
        return Err(Error::Truncated { path: path.to_path_buf() });
    }
    if data[..4] != TENSOR_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: TENSOR_MAGIC,
        });
    }
    let read_u32 = |at: usize| u32::from_le_bytes(data[at..at + 4].try_into().unwrap()) as usize;
    let (w, h, k) = (read_u32(4), read_u32(8), read_u32(12));
    let expected = w * h * k;
    let payload = &data[16..];
    if payload.len() != expected * 4 {
        return Err(Error::PayloadSizeMismatch {
            path: path.to_path_buf(),
            header: expected * 4,
            payload: payload.len(),
        });
    }
    let mut values = Vec::with_capacity(expected);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if v < 0.0 {
            return Err(Error::NegativeActivation {
                path: path.to_path_buf(),
                index: i,
                value: v,
            });
        }
        values.push(v);
    }
    Ok(ActivationTensor::new(w, h, k, values))
}
