//! Shows query expansion on the synthetic benchmark: plain search, average
//! expansion, and α-weighted expansion across α, plus the α=0 identity that
//! ties the two variants together. Expansion pools the top-ranked neighbors
//! into the query, so it needs descriptors whose top ranks are mostly right;
//! whitening gets the random backbone there without any training.
//!
//! Run with `cargo run --example query_expansion`.

use gemret::backbone::TinyFcn;
use gemret::loss::PairLabel;
use gemret::numerics::DescriptorVector;
use gemret::pooling::PoolingConfig;
use gemret::retrieval::{
    alpha_qe, average_qe, evaluate, search, DescriptorIndex, GroundTruth, QEConfig,
};
use gemret::synth::{generate, SynthConfig};
use gemret::trainer::Model;
use gemret::whitening::{apply_whitening, learn_lw, LabeledPairSet};
use gemret::Result;

fn main() -> Result<()> {
    let scene = generate(&SynthConfig::default(), 9)?;
    let model = Model::new(
        TinyFcn::default_seeded(1, 16, 1),
        PoolingConfig::gem_shared(3.0)?,
    );
    let ids: Vec<u64> = scene.graph.images().map(|i| i.id).collect();
    let table = model.descriptor_table(&scene.images, &ids)?;

    let mut pairs = Vec::new();
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            let label = if scene.graph.cluster_of(a)? == scene.graph.cluster_of(b)? {
                PairLabel::Matching
            } else {
                PairLabel::NonMatching
            };
            pairs.push((a, b, label));
        }
    }
    let lw = learn_lw(&LabeledPairSet { pairs, descriptors: table.clone() }, 16)?;

    let mut index = DescriptorIndex::new(16);
    let mut queries: Vec<(u64, DescriptorVector)> = Vec::new();
    let mut gt = GroundTruth::new();
    for &id in &ids {
        let d = apply_whitening(&lw, &table[&id])?;
        index.push(id, d.clone())?;
        queries.push((id, d));
        let cluster = scene.graph.cluster_of(id)?;
        gt.insert(
            id,
            scene.graph.clusters()[&cluster].iter().copied().filter(|&j| j != id).collect(),
        );
    }

    let plain = evaluate(&index, &queries, &gt, None)?.map;
    println!("plain search            mAP {plain:.4}");
    for n_qe in [2, 5, 10] {
        let aqe = evaluate(&index, &queries, &gt, Some(&QEConfig { n_qe, alpha: 0.0 }))?.map;
        println!("average QE  (n={n_qe:>2})      mAP {aqe:.4}");
    }
    for alpha in [1.0, 3.0, 5.0] {
        let cfg = QEConfig { n_qe: 5, alpha };
        let map = evaluate(&index, &queries, &gt, Some(&cfg))?.map;
        println!("alpha QE    (n= 5, a={alpha})  mAP {map:.4}");
    }

    // With α=0 every pooled neighbor gets weight 1, which is exactly the
    // average expansion; the ranked lists agree score for score.
    let q = &queries[0];
    let initial = search(&index, &q.1)?;
    let averaged = average_qe(&index, &q.1, &initial, &QEConfig { n_qe: 5, alpha: 0.0 })?;
    let powered = alpha_qe(&index, &q.1, &initial, &QEConfig { n_qe: 5, alpha: 0.0 })?;
    let max_diff = averaged
        .iter()
        .zip(&powered)
        .map(|(a, b)| {
            assert_eq!(a.id, b.id);
            (a.score - b.score).abs()
        })
        .fold(0.0, f64::max);
    println!("\nquery {}: alpha QE at a=0 vs average QE, max score diff {max_diff:.2e}", q.0);
    Ok(())
}
