//! Trains one model per positive/negative strategy pairing and tabulates
//! held-out retrieval quality, the desk-scale version of comparing m1/m2/m3
//! against N1/N2. Directions depend on the random dataset; the table is a
//! measurement, not a theorem.
//!
//! Run with `cargo run --release --example strategy_comparison -- [epochs]`
//! (default 6; six trainings, so expect a few minutes unoptimized).

use std::collections::BTreeSet;

use gemret::backbone::TinyFcn;
use gemret::mining::{MiningConfig, NegativeStrategy, PositiveStrategy};
use gemret::numerics::DescriptorVector;
use gemret::pooling::PoolingConfig;
use gemret::retrieval::{evaluate, DescriptorIndex, GroundTruth};
use gemret::synth::{generate, SynthConfig, SynthScene};
use gemret::trainer::{cluster_split, fit, Model, TrainConfig};
use gemret::Result;

fn cluster_map(model: &Model, scene: &SynthScene, clusters: &BTreeSet<u64>) -> Result<f64> {
    let sub = scene.graph.restricted_to_clusters(clusters)?;
    let ids: Vec<u64> = sub.images().map(|i| i.id).collect();
    let table = model.descriptor_table(&scene.images, &ids)?;
    let mut index = DescriptorIndex::new(table[&ids[0]].dim());
    let mut queries: Vec<(u64, DescriptorVector)> = Vec::new();
    let mut gt = GroundTruth::new();
    for &id in &ids {
        index.push(id, table[&id].clone())?;
        queries.push((id, table[&id].clone()));
        let cluster = sub.cluster_of(id)?;
        gt.insert(
            id,
            sub.clusters()[&cluster].iter().copied().filter(|&j| j != id).collect(),
        );
    }
    Ok(evaluate(&index, &queries, &gt, None)?.map)
}

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map_or(6, |s| s.parse().expect("epochs"));
    let seed = 11;

    let synth = SynthConfig { images_per_cluster: (12, 12), ..SynthConfig::default() };
    let scene = generate(&synth, seed)?;
    let (_, heldout) = cluster_split(&scene.graph, seed)?;

    let baseline_model = Model::new(
        TinyFcn::default_seeded(1, 16, 1),
        PoolingConfig::gem_shared(3.0)?,
    );
    let baseline = cluster_map(&baseline_model, &scene, &heldout)?;
    println!("untrained baseline mAP {baseline:.4}   ({epochs} epochs per cell)\n");

    println!("{:<10} {:>10} {:>10}", "positives", "N1", "N2");
    for positive in [PositiveStrategy::M1, PositiveStrategy::M2, PositiveStrategy::M3] {
        let mut row = format!("{:<10}", format!("{positive:?}"));
        for negative in [NegativeStrategy::N1, NegativeStrategy::N2] {
            let mut model = Model::new(
                TinyFcn::default_seeded(1, 16, 1),
                PoolingConfig::gem_shared(3.0)?,
            );
            let train = TrainConfig {
                initial_lr: 0.15,
                momentum: 0.5,
                batch_tuples: 2,
                epochs,
                seed,
                ..TrainConfig::sgd()
            };
            let mining = MiningConfig {
                positive_strategy: positive,
                negative_strategy: negative,
                seed,
                ..MiningConfig::default()
            };
            fit(&mut model, &scene.graph, &scene.images, &train, &mining)?;
            let map = cluster_map(&model, &scene, &heldout)?;
            row.push_str(&format!(" {map:>10.4}"));
        }
        println!("{row}");
    }
    Ok(())
}
