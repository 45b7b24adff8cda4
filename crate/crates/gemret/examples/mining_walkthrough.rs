//! Walks through tuple mining on a small synthetic visibility graph: the
//! camera-space positive pool for one query, what each positive strategy
//! picks from it, and how the two negative strategies differ on the same
//! candidate set.
//!
//! Run with `cargo run --example mining_walkthrough`.

use gemret::backbone::TinyFcn;
use gemret::mining::{
    mine_negatives, select_positive_m1, select_positive_m2, select_positive_m3, Miner,
    MiningConfig, NegativeStrategy, PositiveStrategy,
};
use gemret::pooling::PoolingConfig;
use gemret::synth::{generate, SynthConfig};
use gemret::trainer::Model;
use gemret::Result;

fn main() -> Result<()> {
    // Six clusters: the default five negatives under N2 need five clusters
    // beyond the query's.
    let synth = SynthConfig {
        clusters: 6,
        images_per_cluster: (8, 8),
        image_size: 24,
        ..SynthConfig::default()
    };
    let scene = generate(&synth, 5)?;
    let g = &scene.graph;
    println!(
        "graph: {} images, {} clusters",
        g.image_count(),
        g.clusters().len()
    );

    // Descriptors under an untrained model; mining only needs similarities.
    let model = Model::new(
        TinyFcn::default_seeded(1, 8, 1),
        PoolingConfig::gem_shared(3.0)?,
    );
    let ids: Vec<u64> = g.images().map(|i| i.id).collect();
    let descriptors = model.descriptor_table(&scene.images, &ids)?;

    let cfg = MiningConfig::default();
    let q = ids[0];
    let q_points = g.observed_points(q)?;
    println!("\nquery {q}: cluster {}, {} observed points", g.cluster_of(q)?, q_points.len());

    let pool = g.positive_pool(q, cfg.pool_size)?;
    println!("positive pool (same cluster, nearest cameras first):");
    for &i in pool.iter().take(5) {
        let overlap = g.observed_points(i)?.intersection(q_points).count() as f64
            / q_points.len() as f64;
        println!(
            "  image {i:3}  co-observed share {:.2}  scale change {:.3}",
            overlap,
            g.scale_change(i, q)?
        );
    }

    let m1 = select_positive_m1(q, &pool, &descriptors)?;
    let m2 = select_positive_m2(g, q, &pool)?;
    let m3 = select_positive_m3(g, q, &pool, &cfg)?;
    println!("positive picks: m1 (nearest descriptor) {m1}, m2 (most co-observed) {m2}, m3 (random eligible) {m3}");

    // Both negative strategies rank the same candidates by similarity; N2
    // additionally caps each cluster at one contribution.
    let candidates: Vec<u64> = ids.iter().copied().filter(|&i| i != q).collect();
    for strategy in [NegativeStrategy::N1, NegativeStrategy::N2] {
        let cfg = MiningConfig { negative_strategy: strategy, negatives_per_tuple: 3, ..cfg.clone() };
        let negatives = mine_negatives(g, q, &candidates, &descriptors, &cfg)?;
        let clusters: Vec<u64> = negatives
            .iter()
            .map(|&n| g.cluster_of(n))
            .collect::<Result<_>>()?;
        println!("{strategy:?} negatives: {negatives:?}  from clusters {clusters:?}");
    }

    // The miner freezes positives once, then re-draws queries per epoch.
    let miner = Miner::new(
        g,
        &descriptors,
        MiningConfig { positive_strategy: PositiveStrategy::M3, ..cfg },
    )?;
    let tuples = miner.build_epoch_tuples(g, &descriptors, 0)?;
    println!("\nepoch 0 draws {} tuples; first:", tuples.len());
    let t = &tuples[0];
    println!(
        "  query {} (cluster {})  positive {}  negatives {:?}",
        t.query,
        g.cluster_of(t.query)?,
        t.positive,
        t.negatives
    );
    Ok(())
}
