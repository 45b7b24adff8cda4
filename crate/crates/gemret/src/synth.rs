//! Seeded synthetic scenes at desk scale. Each cluster is a planar procedural
//! texture; each image is an axis-aligned crop of its cluster's plane; each 3D
//! point sits on the plane, and an (image, point) edge exists exactly when the
//! point falls inside the crop. Co-observation is therefore analytically known
//! and relevance coincides with cluster membership.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mining::{ImageNode, PointNode, VisibilityGraph};
use crate::numerics::rng_from_parts;

/// Knobs for scene generation. Image counts are drawn per cluster from the
/// inclusive range.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub clusters: usize,
    pub images_per_cluster: (usize, usize),
    pub points_per_cluster: usize,
    pub camera_jitter: f64,
    pub texture_seed: u64,
    pub image_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            clusters: 8,
            images_per_cluster: (10, 14),
            points_per_cluster: 48,
            camera_jitter: 0.02,
            texture_seed: 7,
            image_size: 32,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |message: &str| Error::Config {
            path: "<synth>".into(),
            line: 0,
            message: message.to_string(),
        };
        if self.clusters == 0 {
            return Err(bad("clusters must be positive"));
        }
        let (lo, hi) = self.images_per_cluster;
        if lo == 0 {
            return Err(bad("images per cluster must be positive"));
        }
        if lo > hi {
            return Err(bad("images per cluster range is reversed"));
        }
        if self.points_per_cluster == 0 {
            return Err(bad("points per cluster must be positive"));
        }
        if self.camera_jitter <= 0.0 {
            return Err(bad("camera jitter must be positive"));
        }
        if self.image_size == 0 {
            return Err(bad("image size must be positive"));
        }
        Ok(())
    }
}

/// A generated dataset: the visibility graph, the rendered pixels, and each
/// image's crop rectangle `[x0, y0, x1, y1]` in plane coordinates (kept so
/// tests can check co-observation against the analytic ground truth).
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub graph: VisibilityGraph,
    pub images: BTreeMap<u64, Image>,
    pub crops: BTreeMap<u64, [f64; 4]>,
}

/// One sinusoidal plane wave of the texture.
struct Wave {
    amp: f64,
    fx: f64,
    fy: f64,
    phase: f64,
}

fn draw_waves(rng: &mut impl Rng, count: usize, freq: (f64, f64)) -> Vec<Wave> {
    (0..count)
        .map(|_| Wave {
            amp: rng.random_range(0.5..1.0),
            fx: rng.random_range(freq.0..freq.1),
            fy: rng.random_range(freq.0..freq.1),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        })
        .collect()
}

/// Every cluster blends the shared waves (same for the whole dataset) with its
/// own. The shared part dominates so that clusters genuinely resemble each
/// other and an untrained descriptor cannot separate them for free; the
/// cluster part shares the common band so separation stays learned, not free.
const COMMON_WAVES: usize = 4;
const CLUSTER_WAVES: usize = 4;
const COMMON_WEIGHT: f64 = 0.75;
const COMMON_FREQ: (f64, f64) = (2.0, 8.0);
const CLUSTER_FREQ: (f64, f64) = (2.0, 8.0);

/// World x-offset between cluster planes; large against in-plane coordinates
/// so cross-cluster camera distances dwarf same-cluster ones.
const CLUSTER_SPACING: f64 = 10.0;

/// Crop side length range in plane units. The ratio of the extremes stays
/// under the default mining scale threshold of 1.5 even with camera jitter,
/// so same-cluster pairs are never scale-ineligible by construction.
const SIDE_RANGE: (f64, f64) = (0.44, 0.56);

/// Crop centers stay this close to the plane center, keeping same-cluster
/// views overlapping the way photos of one landmark do.
const CENTER_SPREAD: f64 = 0.14;

struct Texture {
    common: Vec<Wave>,
    own: Vec<Wave>,
    norm: f64,
}

impl Texture {
    fn for_cluster(texture_seed: u64, cluster: u64) -> Self {
        let mut common_rng = rng_from_parts(&[texture_seed, 0x636f6d6d]);
        let common = draw_waves(&mut common_rng, COMMON_WAVES, COMMON_FREQ);
        let mut own_rng = rng_from_parts(&[texture_seed, 0x77617665, cluster]);
        let own = draw_waves(&mut own_rng, CLUSTER_WAVES, CLUSTER_FREQ);
        let amp = |ws: &[Wave]| ws.iter().map(|w| w.amp).sum::<f64>();
        let norm = COMMON_WEIGHT * amp(&common) + (1.0 - COMMON_WEIGHT) * amp(&own);
        Self { common, own, norm }
    }

    /// Texture intensity in [0, 1] at plane position (u, v).
    fn at(&self, u: f64, v: f64) -> f64 {
        let sum = |ws: &[Wave]| -> f64 {
            ws.iter()
                .map(|w| w.amp * (std::f64::consts::TAU * (w.fx * u + w.fy * v) + w.phase).sin())
                .sum()
        };
        let raw = COMMON_WEIGHT * sum(&self.common) + (1.0 - COMMON_WEIGHT) * sum(&self.own);
        0.5 * (1.0 + raw / self.norm)
    }
}

fn render(texture: &Texture, crop: [f64; 4], size: usize) -> Image {
    let mut img = Image::zeros(size, size, 1);
    let (w, h) = (crop[2] - crop[0], crop[3] - crop[1]);
    for py in 0..size {
        let v = crop[1] + h * (py as f64 + 0.5) / size as f64;
        for px in 0..size {
            let u = crop[0] + w * (px as f64 + 0.5) / size as f64;
            img.set(px, py, 0, texture.at(u, v));
        }
    }
    img
}

fn crop_contains(crop: [f64; 4], u: f64, v: f64) -> bool {
    u >= crop[0] && u <= crop[2] && v >= crop[1] && v <= crop[3]
}

/// Generates the dataset. Image and point ids are sequential in generation
/// order; byte-identical output under a fixed (seed, config) pair.
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<SynthScene> {
    cfg.validate()?;
    let mut image_nodes = Vec::new();
    let mut point_nodes = Vec::new();
    let mut edges = Vec::new();
    let mut images = BTreeMap::new();
    let mut crops = BTreeMap::new();
    let mut next_image = 0u64;
    let mut next_point = 0u64;

    for cluster in 0..cfg.clusters as u64 {
        let texture = Texture::for_cluster(cfg.texture_seed, cluster);
        let offset = cluster as f64 * CLUSTER_SPACING;

        let mut point_rng = rng_from_parts(&[seed, 0x706e7473, cluster]);
        let first_point = next_point;
        let mut positions = Vec::with_capacity(cfg.points_per_cluster);
        for _ in 0..cfg.points_per_cluster {
            let u = point_rng.random_range(0.0..1.0);
            let v = point_rng.random_range(0.0..1.0);
            point_nodes.push(PointNode { id: next_point, xyz: [offset + u, v, 0.0] });
            positions.push((u, v));
            next_point += 1;
        }

        let mut view_rng = rng_from_parts(&[seed, 0x76696577, cluster]);
        let (lo, hi) = cfg.images_per_cluster;
        let count = view_rng.random_range(lo..=hi);
        for _ in 0..count {
            let side = view_rng.random_range(SIDE_RANGE.0..SIDE_RANGE.1);
            let spread = CENTER_SPREAD.min((1.0 - side) / 2.0);
            let cx = 0.5 + view_rng.random_range(-spread..spread);
            let cy = 0.5 + view_rng.random_range(-spread..spread);
            let crop = [cx - side / 2.0, cy - side / 2.0, cx + side / 2.0, cy + side / 2.0];
            let mut jitter = || view_rng.random_range(-cfg.camera_jitter..cfg.camera_jitter);
            // Depth matches the rendered scale: a crop of side s looks like a
            // camera hovering at height s above the plane.
            let camera = [offset + cx + jitter(), cy + jitter(), side + jitter()];

            let id = next_image;
            image_nodes.push(ImageNode {
                id,
                cluster,
                camera,
                file: format!("images/{id:04}.pgm"),
            });
            for (k, &(u, v)) in positions.iter().enumerate() {
                if crop_contains(crop, u, v) {
                    edges.push((id, first_point + k as u64));
                }
            }
            images.insert(id, render(&texture, crop, cfg.image_size));
            crops.insert(id, crop);
            next_image += 1;
        }
    }

    let graph = VisibilityGraph::new(image_nodes, point_nodes, edges)?;
    Ok(SynthScene { graph, images, crops })
}
