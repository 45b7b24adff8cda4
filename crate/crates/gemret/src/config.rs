//! Flat `key = value` run configuration. One struct carries every knob the
//! commands need; unknown keys are errors so a typo cannot silently fall back
//! to a default. Lines starting with `#` and blank lines are ignored.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::mining::{MiningConfig, NegativeStrategy, PositiveStrategy};
use crate::pooling::{PoolingConfig, PoolingMode};
use crate::synth::SynthConfig;
use crate::trainer::{LossKind, OptimizerKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SharingChoice {
    Shared,
    PerMap,
}

/// Every knob of the pipeline with its default. `--seed` on the command line
/// overrides the `seed` key.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // Scene generation.
    pub synth: SynthConfig,
    // Backbone.
    pub backbone_seed: u64,
    pub descriptor_dim: usize,
    // Pooling.
    pub pooling: PoolingMode,
    pub pooling_p: f64,
    pub pooling_sharing: SharingChoice,
    pub pooling_trainable: bool,
    // Training.
    pub optimizer: OptimizerKind,
    pub initial_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_tuples: usize,
    pub epochs: usize,
    pub remine_per_epoch: usize,
    pub loss: LossKind,
    pub contrastive_margin: f64,
    pub triplet_margin: f64,
    // Mining.
    pub pool_size: usize,
    pub inlier_overlap: f64,
    pub scale_threshold: f64,
    pub negatives_per_tuple: usize,
    pub positive_strategy: PositiveStrategy,
    pub negative_strategy: NegativeStrategy,
    pub extra_negatives_per_cluster: usize,
    pub max_queries_per_cluster: usize,
    // Descriptor extraction.
    pub scales: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::sgd();
        let mining = MiningConfig::default();
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            backbone_seed: 1,
            descriptor_dim: 16,
            pooling: PoolingMode::Gem,
            pooling_p: 3.0,
            pooling_sharing: SharingChoice::Shared,
            pooling_trainable: true,
            optimizer: train.optimizer,
            initial_lr: train.initial_lr,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            batch_tuples: train.batch_tuples,
            epochs: train.epochs,
            remine_per_epoch: train.remine_per_epoch,
            loss: train.loss,
            contrastive_margin: train.loss_cfg.margin,
            triplet_margin: train.loss_cfg.triplet_margin,
            pool_size: mining.pool_size,
            inlier_overlap: mining.inlier_overlap,
            scale_threshold: mining.scale_threshold,
            negatives_per_tuple: mining.negatives_per_tuple,
            positive_strategy: mining.positive_strategy,
            negative_strategy: mining.negative_strategy,
            extra_negatives_per_cluster: mining.extra_negatives_per_cluster,
            max_queries_per_cluster: mining.max_queries_per_cluster,
            scales: vec![1.0],
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            initial_lr: self.initial_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_tuples: self.batch_tuples,
            epochs: self.epochs,
            remine_per_epoch: self.remine_per_epoch,
            loss: self.loss,
            loss_cfg: LossConfig {
                margin: self.contrastive_margin,
                triplet_margin: self.triplet_margin,
            },
            seed: self.seed,
        }
    }

    pub fn mining_config(&self) -> MiningConfig {
        MiningConfig {
            pool_size: self.pool_size,
            inlier_overlap: self.inlier_overlap,
            scale_threshold: self.scale_threshold,
            negatives_per_tuple: self.negatives_per_tuple,
            positive_strategy: self.positive_strategy,
            negative_strategy: self.negative_strategy,
            extra_negatives_per_cluster: self.extra_negatives_per_cluster,
            max_queries_per_cluster: self.max_queries_per_cluster,
            seed: self.seed,
        }
    }

    /// Pooling layer for a backbone with `maps` output maps.
    pub fn pooling_config(&self, maps: usize) -> Result<PoolingConfig> {
        let mut cfg = match self.pooling {
            PoolingMode::Max => PoolingConfig::max(),
            PoolingMode::Average => PoolingConfig::average(),
            PoolingMode::Gem => match self.pooling_sharing {
                SharingChoice::Shared => PoolingConfig::gem_shared(self.pooling_p)?,
                SharingChoice::PerMap => {
                    PoolingConfig::gem_per_map(vec![self.pooling_p; maps])?
                }
            },
        };
        if self.pooling == PoolingMode::Gem {
            cfg.trainable = self.pooling_trainable;
        }
        Ok(cfg)
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}

/// Parses the flat text form. Unknown keys and unparsable values both fail
/// with the offending line number.
pub fn parse_config(text: &str, path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let fail = |message: String| Error::Config { path: path.to_path_buf(), line, message };
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| fail("expected `key = value`".to_string()))?;
        let key = key.trim();
        let value = value.trim();
        set_key(&mut cfg, key, value)
            .map_err(|message| fail(format!("key `{key}`: {message}")))?;
    }
    Ok(cfg)
}

/// Applies one assignment; the error is a bare message the caller wraps with
/// file and line context.
fn set_key(cfg: &mut RunConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    fn num<T: std::str::FromStr>(value: &str) -> std::result::Result<T, String>
    where
        T::Err: std::fmt::Display,
    {
        value.parse().map_err(|e| format!("{e}"))
    }
    match key {
        "seed" => cfg.seed = num(value)?,
        "clusters" => cfg.synth.clusters = num(value)?,
        "images_per_cluster_min" => cfg.synth.images_per_cluster.0 = num(value)?,
        "images_per_cluster_max" => cfg.synth.images_per_cluster.1 = num(value)?,
        "points_per_cluster" => cfg.synth.points_per_cluster = num(value)?,
        "camera_jitter" => cfg.synth.camera_jitter = num(value)?,
        "texture_seed" => cfg.synth.texture_seed = num(value)?,
        "image_size" => cfg.synth.image_size = num(value)?,
        "backbone_seed" => cfg.backbone_seed = num(value)?,
        "descriptor_dim" => cfg.descriptor_dim = num(value)?,
        "pooling" => {
            cfg.pooling = match value {
                "gem" => PoolingMode::Gem,
                "max" => PoolingMode::Max,
                "average" => PoolingMode::Average,
                _ => return Err(format!("unknown pooling `{value}`")),
            }
        }
        "pooling_p" => cfg.pooling_p = num(value)?,
        "pooling_sharing" => {
            cfg.pooling_sharing = match value {
                "shared" => SharingChoice::Shared,
                "per_map" => SharingChoice::PerMap,
                _ => return Err(format!("unknown sharing `{value}`")),
            }
        }
        "pooling_trainable" => cfg.pooling_trainable = parse_bool(value)?,
        "optimizer" => {
            cfg.optimizer = match value {
                "sgd" => OptimizerKind::Sgd,
                "adam" => OptimizerKind::Adam,
                _ => return Err(format!("unknown optimizer `{value}`")),
            }
        }
        "initial_lr" => cfg.initial_lr = num(value)?,
        "momentum" => cfg.momentum = num(value)?,
        "weight_decay" => cfg.weight_decay = num(value)?,
        "batch_tuples" => cfg.batch_tuples = num(value)?,
        "epochs" => cfg.epochs = num(value)?,
        "remine_per_epoch" => cfg.remine_per_epoch = num(value)?,
        "loss" => {
            cfg.loss = match value {
                "contrastive" => LossKind::Contrastive,
                "triplet" => LossKind::Triplet,
                _ => return Err(format!("unknown loss `{value}`")),
            }
        }
        "contrastive_margin" => cfg.contrastive_margin = num(value)?,
        "triplet_margin" => cfg.triplet_margin = num(value)?,
        "pool_size" => cfg.pool_size = num(value)?,
        "inlier_overlap" => cfg.inlier_overlap = num(value)?,
        "scale_threshold" => cfg.scale_threshold = num(value)?,
        "negatives_per_tuple" => cfg.negatives_per_tuple = num(value)?,
        "positive_strategy" => {
            cfg.positive_strategy = match value {
                "m1" => PositiveStrategy::M1,
                "m2" => PositiveStrategy::M2,
                "m3" => PositiveStrategy::M3,
                _ => return Err(format!("unknown positive strategy `{value}`")),
            }
        }
        "negative_strategy" => {
            cfg.negative_strategy = match value {
                "n1" => NegativeStrategy::N1,
                "n2" => NegativeStrategy::N2,
                _ => return Err(format!("unknown negative strategy `{value}`")),
            }
        }
        "extra_negatives_per_cluster" => cfg.extra_negatives_per_cluster = num(value)?,
        "max_queries_per_cluster" => cfg.max_queries_per_cluster = num(value)?,
        "scales" => {
            let parsed: std::result::Result<Vec<f64>, String> =
                value.split(',').map(|s| num(s.trim())).collect();
            let parsed = parsed?;
            if parsed.is_empty() {
                return Err("scales must not be empty".to_string());
            }
            cfg.scales = parsed;
        }
        _ => return Err("unknown key".to_string()),
    }
    Ok(())
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{value}`")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn parse(text: &str) -> Result<RunConfig> {
        parse_config(text, &PathBuf::from("test.cfg"))
    }

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = parse("# a comment\n\n  epochs = 3 \n").unwrap();
        assert_eq!(cfg.epochs, 3);
    }

    #[test]
    fn all_key_kinds_parse() {
        let text = "\
seed = 42
clusters = 3
images_per_cluster_min = 4
images_per_cluster_max = 6
pooling = gem
pooling_p = 2.5
pooling_sharing = per_map
pooling_trainable = false
optimizer = adam
loss = triplet
positive_strategy = m1
negative_strategy = n1
scales = 1.0, 0.7071, 0.5
";
        let cfg = parse(text).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.synth.clusters, 3);
        assert_eq!(cfg.synth.images_per_cluster, (4, 6));
        assert_eq!(cfg.pooling_p, 2.5);
        assert_eq!(cfg.pooling_sharing, SharingChoice::PerMap);
        assert!(!cfg.pooling_trainable);
        assert_eq!(cfg.optimizer, OptimizerKind::Adam);
        assert_eq!(cfg.loss, LossKind::Triplet);
        assert_eq!(cfg.positive_strategy, PositiveStrategy::M1);
        assert_eq!(cfg.negative_strategy, NegativeStrategy::N1);
        assert_eq!(cfg.scales, vec![1.0, 0.7071, 0.5]);
    }

    #[test]
    fn unknown_key_names_the_line() {
        match parse("epochs = 1\nepoch = 2\n") {
            Err(Error::Config { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("epoch"), "{message}");
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn bad_value_and_missing_equals_are_errors() {
        assert!(matches!(parse("epochs = soon"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(parse("epochs"), Err(Error::Config { line: 1, .. })));
        assert!(matches!(parse("scales = "), Err(Error::Config { .. })));
    }

    #[test]
    fn derived_configs_carry_the_values_through() {
        let cfg = parse("seed = 9\nepochs = 4\nnegatives_per_tuple = 2\npooling_p = 4.0\n")
            .unwrap();
        let train = cfg.train_config();
        assert_eq!(train.epochs, 4);
        assert_eq!(train.seed, 9);
        let mining = cfg.mining_config();
        assert_eq!(mining.negatives_per_tuple, 2);
        assert_eq!(mining.seed, 9);
        let pooling = cfg.pooling_config(3).unwrap();
        assert_eq!(pooling.exponents, vec![4.0]);
    }
}
