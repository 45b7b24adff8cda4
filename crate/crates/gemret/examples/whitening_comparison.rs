//! Compares descriptor post-processing on held-out clusters: raw
//! descriptors, unsupervised PCA whitening, and discriminative whitening
//! learned from labeled pairs, each across output dimensions.
//!
//! Run with `cargo run --example whitening_comparison`.

use std::collections::BTreeSet;

use gemret::backbone::TinyFcn;
use gemret::loss::PairLabel;
use gemret::numerics::{DescriptorTable, DescriptorVector};
use gemret::pooling::PoolingConfig;
use gemret::retrieval::{evaluate, DescriptorIndex, GroundTruth};
use gemret::synth::{generate, SynthConfig, SynthScene};
use gemret::trainer::{cluster_split, Model};
use gemret::whitening::{apply_whitening, learn_lw, learn_pcaw, LabeledPairSet, WhiteningTransform};
use gemret::Result;

/// mAP over the given clusters after an optional projection.
fn projected_map(
    scene: &SynthScene,
    table: &DescriptorTable,
    clusters: &BTreeSet<u64>,
    transform: Option<&WhiteningTransform>,
) -> Result<f64> {
    let sub = scene.graph.restricted_to_clusters(clusters)?;
    let ids: Vec<u64> = sub.images().map(|i| i.id).collect();

    let project = |id: u64| -> Result<DescriptorVector> {
        match transform {
            Some(t) => apply_whitening(t, &table[&id]),
            None => Ok(table[&id].clone()),
        }
    };
    let mut index = DescriptorIndex::new(project(ids[0])?.dim());
    let mut queries = Vec::new();
    let mut gt = GroundTruth::new();
    for &id in &ids {
        let d = project(id)?;
        index.push(id, d.clone())?;
        queries.push((id, d));
        let cluster = sub.cluster_of(id)?;
        gt.insert(
            id,
            sub.clusters()[&cluster].iter().copied().filter(|&j| j != id).collect(),
        );
    }
    Ok(evaluate(&index, &queries, &gt, None)?.map)
}

fn main() -> Result<()> {
    let seed = 11;
    let synth = SynthConfig { images_per_cluster: (12, 12), ..SynthConfig::default() };
    let scene = generate(&synth, seed)?;
    let (train_clusters, heldout) = cluster_split(&scene.graph, seed)?;

    let model = Model::new(
        TinyFcn::default_seeded(1, 16, 1),
        PoolingConfig::gem_shared(3.0)?,
    );
    let ids: Vec<u64> = scene.graph.images().map(|i| i.id).collect();
    let table = model.descriptor_table(&scene.images, &ids)?;

    // Whitening only ever sees training clusters; evaluation never does.
    let train_ids: Vec<u64> = ids
        .iter()
        .copied()
        .filter(|&id| train_clusters.contains(&scene.graph.cluster_of(id).unwrap()))
        .collect();
    let mut pairs = Vec::new();
    for (i, &a) in train_ids.iter().enumerate() {
        for &b in &train_ids[i + 1..] {
            let label = if scene.graph.cluster_of(a)? == scene.graph.cluster_of(b)? {
                PairLabel::Matching
            } else {
                PairLabel::NonMatching
            };
            pairs.push((a, b, label));
        }
    }
    let train_table: DescriptorTable =
        train_ids.iter().map(|&id| (id, table[&id].clone())).collect();
    let set = LabeledPairSet { pairs, descriptors: train_table.clone() };

    println!("held-out clusters {heldout:?}, descriptor dimension 16\n");
    println!("{:<24} {:>6} {:>8}", "method", "dim", "mAP");
    let raw = projected_map(&scene, &table, &heldout, None)?;
    println!("{:<24} {:>6} {:>8.4}", "raw descriptors", 16, raw);
    for dim in [16, 8, 4] {
        let pcaw = learn_pcaw(&train_table, dim)?;
        let map = projected_map(&scene, &table, &heldout, Some(&pcaw))?;
        println!("{:<24} {:>6} {:>8.4}", "PCA whitening", dim, map);
    }
    for dim in [16, 8, 4] {
        let lw = learn_lw(&set, dim)?;
        let map = projected_map(&scene, &table, &heldout, Some(&lw))?;
        println!("{:<24} {:>6} {:>8.4}", "discriminative whitening", dim, map);
    }
    Ok(())
}
