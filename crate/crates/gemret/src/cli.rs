//! Command implementations behind the binary: dataset synthesis, training,
//! whitening, indexing, evaluation, and gradient verification. Each command is
//! an ordinary function over paths and [`RunConfig`] so tests and examples can
//! drive the same code the binary does.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::backbone::TinyFcn;
use crate::config::RunConfig;
use crate::dataset::{
    load_entry, load_graph_images, load_manifest, manifest_root, save_manifest, DatasetManifest,
    ManifestEntry,
};
use crate::error::{Error, Result};
use crate::image::{save_image, Image};
use crate::loss::{
    contrastive_grad, contrastive_loss, triplet_grad, triplet_loss, LossConfig, PairLabel,
};
use crate::mining::{load_graph, save_graph, MiningConfig, VisibilityGraph};
use crate::numerics::{
    dot, finite_diff_grad, l2_normalize, max_rel_err, rng_from_parts, ActivationTensor,
    DescriptorVector,
};
use crate::pooling::{gem_backward_p, pool, pool_backward_x, PoolingConfig};
use crate::retrieval::{
    evaluate, load_index, multiscale_descriptor, save_index, save_ranked_lists, DescriptorIndex,
    EvalReport, QEConfig,
};
use crate::synth::generate;
use crate::trainer::{
    batch_loss, compute_batch_gradients, fit, load_model, normalize_backward, save_model,
    save_report, Model, TrainConfig, TrainReport,
};
use crate::whitening::{apply_whitening, learn_lw, load_whitening, LabeledPairSet};
use crate::whitening::save_whitening;
use crate::mining::TrainingTuple;
use crate::numerics::DescriptorTable;

use rand::Rng;

/// Generates a dataset under `out_dir`: `images/*.pgm`, `graph.json`, and
/// `manifest.json` where every image queries for the rest of its cluster.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let scene = generate(&cfg.synth, cfg.seed)?;
    fs::create_dir_all(out_dir.join("images")).map_err(|e| Error::io(out_dir, e))?;
    for node in scene.graph.images() {
        save_image(&scene.images[&node.id], &out_dir.join(&node.file))?;
    }
    save_graph(&scene.graph, &out_dir.join("graph.json"))?;

    let entries: Vec<ManifestEntry> = scene
        .graph
        .images()
        .map(|n| ManifestEntry { id: n.id, file: n.file.clone(), crop: None })
        .collect();
    let queries: Vec<u64> = entries.iter().map(|e| e.id).collect();
    let ground_truth = scene
        .graph
        .clusters()
        .values()
        .flat_map(|members| {
            members.iter().map(|&q| {
                (q, members.iter().copied().filter(|&i| i != q).collect())
            })
        })
        .collect();
    let manifest =
        DatasetManifest { root: ".".to_string(), entries, queries, ground_truth };
    save_manifest(&manifest, &out_dir.join("manifest.json"))
}

/// Builds the configured model and backbone for a dataset with the given
/// channel count.
pub fn build_model(cfg: &RunConfig, channels: usize) -> Result<Model> {
    let net = TinyFcn::default_seeded(channels, cfg.descriptor_dim, cfg.backbone_seed);
    let pooling = cfg.pooling_config(cfg.descriptor_dim)?;
    Ok(Model::new(net, pooling))
}

/// Fine-tunes on tuples mined from the graph; writes the best-epoch
/// checkpoint and the report JSON.
pub fn cmd_train(
    cfg: &RunConfig,
    graph_path: &Path,
    checkpoint_out: &Path,
    report_out: &Path,
) -> Result<TrainReport> {
    let g = load_graph(graph_path)?;
    let dir = graph_path.parent().unwrap_or_else(|| Path::new("."));
    let images = load_graph_images(dir, &g)?;
    let channels = images.values().next().map_or(1, |i| i.channels);
    let mut model = build_model(cfg, channels)?;
    let report = fit(&mut model, &g, &images, &cfg.train_config(), &cfg.mining_config())?;
    save_model(&model, checkpoint_out)?;
    save_report(&report, report_out)?;
    Ok(report)
}

/// Multi-scale descriptors for the given ids, extracted in parallel but
/// returned in input order.
fn extract_all(
    model: &Model,
    scales: &[f64],
    images: &BTreeMap<u64, Image>,
    ids: &[u64],
) -> Result<Vec<(u64, DescriptorVector)>> {
    ids.par_iter()
        .map(|&id| {
            let img = images.get(&id).ok_or(Error::MissingImage(id))?;
            Ok((id, multiscale_descriptor(&model.net, &model.pooling, img, scales)?))
        })
        .collect()
}

/// A same-cluster pair qualifies as matching when one of its members could
/// have picked the other as its hard positive: they co-observe points, the
/// overlap threshold holds from at least one side, and the apparent scale
/// change is within bounds.
fn matching_pair(
    g: &VisibilityGraph,
    mining: &MiningConfig,
    a: u64,
    b: u64,
) -> Result<bool> {
    let pa = g.observed_points(a)?;
    let pb = g.observed_points(b)?;
    let shared = pa.intersection(pb).count();
    if shared == 0 {
        return Ok(false);
    }
    let overlap = (shared as f64 / pa.len() as f64).max(shared as f64 / pb.len() as f64);
    if overlap < mining.inlier_overlap {
        return Ok(false);
    }
    Ok(g.scale_change(a, b)? <= mining.scale_threshold)
}

/// Learns discriminative whitening from graph-labeled descriptor pairs:
/// matching pairs are mining-eligible same-cluster pairs, non-matching pairs
/// cross clusters.
pub fn cmd_whiten(
    cfg: &RunConfig,
    checkpoint: &Path,
    graph_path: &Path,
    target_dim: usize,
    out: &Path,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let g = load_graph(graph_path)?;
    let dir = graph_path.parent().unwrap_or_else(|| Path::new("."));
    let images = load_graph_images(dir, &g)?;
    let ids: Vec<u64> = g.images().map(|i| i.id).collect();

    let mut descriptors = DescriptorTable::new();
    for (id, d) in extract_all(&model, &cfg.scales, &images, &ids)? {
        descriptors.insert(id, d);
    }

    let mining = cfg.mining_config();
    let mut pairs = Vec::new();
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            if g.cluster_of(a)? != g.cluster_of(b)? {
                pairs.push((a, b, PairLabel::NonMatching));
            } else if matching_pair(&g, &mining, a, b)? {
                pairs.push((a, b, PairLabel::Matching));
            }
        }
    }

    let set = LabeledPairSet { pairs, descriptors };
    let transform = learn_lw(&set, target_dim)?;
    save_whitening(&transform, out)
}

/// Indexes every manifest entry: load, optional crop, multi-scale descriptor,
/// optional whitening, in manifest order.
pub fn cmd_index(
    cfg: &RunConfig,
    checkpoint: &Path,
    whitening: Option<&Path>,
    manifest_path: &Path,
    out: &Path,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let transform = whitening.map(load_whitening).transpose()?;
    let manifest = load_manifest(manifest_path)?;
    let root = manifest_root(manifest_path, &manifest);

    let k = model.net.layers.last().map_or(0, |l| l.out_maps);
    let dim = transform.as_ref().map_or(k, |t| t.out_dim());
    let mut index = DescriptorIndex::new(dim);

    let extracted: Result<Vec<(u64, DescriptorVector)>> = manifest
        .entries
        .par_iter()
        .map(|entry| {
            let img = load_entry(&root, entry)?;
            let mut d = multiscale_descriptor(&model.net, &model.pooling, &img, &cfg.scales)?;
            if let Some(t) = &transform {
                d = apply_whitening(t, &d)?;
            }
            Ok((entry.id, d))
        })
        .collect();
    for (id, d) in extracted? {
        index.push(id, d)?;
    }
    save_index(&index, out)
}

/// Ranks the index against every manifest query, scoring AP against the
/// manifest's ground truth. Returns the report and its printable form;
/// ranked lists go to `ranked_out` when given.
pub fn cmd_eval(
    index_path: &Path,
    manifest_path: &Path,
    qe: Option<&QEConfig>,
    ranked_out: Option<&Path>,
) -> Result<(EvalReport, String)> {
    let index = load_index(index_path)?;
    let manifest = load_manifest(manifest_path)?;
    let queries: Result<Vec<(u64, DescriptorVector)>> = manifest
        .queries
        .iter()
        .map(|&q| index.get(q).cloned().map(|d| (q, d)).ok_or(Error::UnknownImage(q)))
        .collect();
    let report = evaluate(&index, &queries?, &manifest.ground_truth, qe)?;
    if let Some(path) = ranked_out {
        save_ranked_lists(&report.ranked, path)?;
    }

    let mut text = String::new();
    for (id, ap) in &report.per_query {
        writeln!(text, "query {id:>6}  ap {ap:.6}").expect("string write");
    }
    writeln!(text, "mAP {:.6}  ({} queries)", report.map, report.per_query.len())
        .expect("string write");
    Ok((report, text))
}

/// One finite-difference suite: name, measured error, tolerance.
type Suite = (&'static str, f64, f64);

/// Runs every finite-difference suite and formats one line per suite. Any
/// suite over tolerance turns into a `GradCheckFailed` carrying the full
/// report. `corrupt` perturbs one analytic value to prove the harness can
/// fail.
pub fn cmd_gradcheck(seed: u64, corrupt: bool) -> Result<String> {
    let suites: Vec<Suite> = vec![
        ("gem pooling x-gradient", gradcheck_pool_x(seed, corrupt)?, 1e-4),
        ("gem exponent gradient (shared)", gradcheck_pool_p(seed, true)?, 1e-4),
        ("gem exponent gradient (per-map)", gradcheck_pool_p(seed, false)?, 1e-4),
        ("contrastive loss gradient", gradcheck_contrastive(seed)?, 1e-4),
        ("triplet loss gradient", gradcheck_triplet(seed)?, 1e-4),
        ("descriptor normalization gradient", gradcheck_normalize(seed)?, 1e-4),
        ("composed pipeline gradient", gradcheck_composed(seed)?, 1e-3),
    ];
    let mut text = String::new();
    let mut failures = 0;
    for (name, err, tol) in &suites {
        let status = if err < tol { "ok" } else { "FAIL" };
        if err >= tol {
            failures += 1;
        }
        writeln!(text, "{name:<36} max rel err {err:.3e}  tol {tol:.0e}  {status}")
            .expect("string write");
    }
    if failures > 0 {
        return Err(Error::GradCheckFailed(format!(
            "{failures} of {} suites over tolerance\n{text}",
            suites.len()
        )));
    }
    writeln!(text, "all gradient checks passed").expect("string write");
    Ok(text)
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> DescriptorVector {
    let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    l2_normalize(&DescriptorVector::raw(raw))
}

/// A unit vector orthogonal to `a`, built from a random direction.
fn orthogonal_unit(rng: &mut impl Rng, a: &DescriptorVector) -> DescriptorVector {
    loop {
        let c = random_unit(rng, a.dim());
        let proj = dot(&c.values, &a.values);
        let raw: Vec<f64> =
            c.values.iter().zip(&a.values).map(|(ci, ai)| ci - proj * ai).collect();
        if raw.iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-3 {
            return l2_normalize(&DescriptorVector::raw(raw));
        }
    }
}

/// Unit vector at a fixed small distance from `a` along an orthogonal
/// direction, keeping loss fixtures away from hinge boundaries.
fn offset_unit(rng: &mut impl Rng, a: &DescriptorVector, step: f64) -> DescriptorVector {
    let o = orthogonal_unit(rng, a);
    let raw: Vec<f64> =
        a.values.iter().zip(&o.values).map(|(ai, oi)| ai + step * oi).collect();
    l2_normalize(&DescriptorVector::raw(raw))
}

fn gradcheck_tensor(rng: &mut impl Rng, w: usize, h: usize, k: usize) -> ActivationTensor {
    let values: Vec<f64> = (0..w * h * k).map(|_| rng.random_range(0.05..2.0)).collect();
    ActivationTensor::new(w, h, k, values)
}

fn gradcheck_pool_x(seed: u64, corrupt: bool) -> Result<f64> {
    let mut rng = rng_from_parts(&[seed, 0x70786772]);
    let (w, h, k) = (4, 3, 2);
    let x = gradcheck_tensor(&mut rng, w, h, k);
    let weights: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cfg = PoolingConfig::gem_shared(3.0)?;
    let f = pool(&x, &cfg)?;
    let grad_f = DescriptorVector::raw(weights.clone());
    let mut analytic = pool_backward_x(&x, &cfg, &f, &grad_f)?.values;
    if corrupt {
        analytic[0] += 1e-2;
    }
    let numeric = finite_diff_grad(
        |vals| {
            let t = ActivationTensor::new(w, h, k, vals.to_vec());
            dot(&pool(&t, &cfg).unwrap().values, &weights)
        },
        &x.values,
        1e-5,
    );
    Ok(max_rel_err(&analytic, &numeric))
}

fn gradcheck_pool_p(seed: u64, shared: bool) -> Result<f64> {
    let mut rng = rng_from_parts(&[seed, 0x70677264]);
    let (w, h, k) = (4, 3, 2);
    let x = gradcheck_tensor(&mut rng, w, h, k);
    let weights: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let build = |ps: &[f64]| -> Result<PoolingConfig> {
        if shared {
            PoolingConfig::gem_shared(ps[0])
        } else {
            PoolingConfig::gem_per_map(ps.to_vec())
        }
    };
    let point: Vec<f64> = if shared { vec![2.5] } else { vec![1.5, 3.0] };
    let cfg = build(&point)?;
    let f = pool(&x, &cfg)?;
    let grad_f = DescriptorVector::raw(weights.clone());
    let analytic = gem_backward_p(&x, &cfg, &f, &grad_f)?;
    let numeric = finite_diff_grad(
        |ps| {
            let cfg = build(ps).unwrap();
            dot(&pool(&x, &cfg).unwrap().values, &weights)
        },
        &point,
        1e-5,
    );
    Ok(max_rel_err(&analytic, &numeric))
}

fn gradcheck_contrastive(seed: u64) -> Result<f64> {
    let mut rng = rng_from_parts(&[seed, 0x636e7467]);
    let a = random_unit(&mut rng, 4);
    // ‖a−b‖ ≈ 0.39: inside the τ = 0.75 margin, away from both the hinge
    // boundary and the coincident singularity.
    let b = offset_unit(&mut rng, &a, 0.4);
    let cfg = LossConfig::default();
    let point: Vec<f64> = a.values.iter().chain(&b.values).copied().collect();
    let mut worst = 0.0f64;
    for label in [PairLabel::Matching, PairLabel::NonMatching] {
        let (ga, gb) = contrastive_grad(&a, &b, label, &cfg)?;
        let analytic: Vec<f64> = ga.values.iter().chain(&gb.values).copied().collect();
        let numeric = finite_diff_grad(
            |v| {
                let (x, y) = v.split_at(4);
                contrastive_loss(
                    &DescriptorVector::raw(x.to_vec()),
                    &DescriptorVector::raw(y.to_vec()),
                    label,
                    &cfg,
                )
                .unwrap()
            },
            &point,
            1e-5,
        );
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

fn gradcheck_triplet(seed: u64) -> Result<f64> {
    let mut rng = rng_from_parts(&[seed, 0x74726970]);
    let q = random_unit(&mut rng, 4);
    // Positive farther than the negative keeps the hinge active.
    let pos = offset_unit(&mut rng, &q, 0.55);
    let neg = offset_unit(&mut rng, &q, 0.45);
    let cfg = LossConfig::default();
    let (gq, gp, gn) = triplet_grad(&q, &pos, &neg, &cfg)?;
    let analytic: Vec<f64> = gq
        .values
        .iter()
        .chain(&gp.values)
        .chain(&gn.values)
        .copied()
        .collect();
    let point: Vec<f64> = q
        .values
        .iter()
        .chain(&pos.values)
        .chain(&neg.values)
        .copied()
        .collect();
    let numeric = finite_diff_grad(
        |v| {
            triplet_loss(
                &DescriptorVector::raw(v[..4].to_vec()),
                &DescriptorVector::raw(v[4..8].to_vec()),
                &DescriptorVector::raw(v[8..].to_vec()),
                &cfg,
            )
            .unwrap()
        },
        &point,
        1e-5,
    );
    Ok(max_rel_err(&analytic, &numeric))
}

fn gradcheck_normalize(seed: u64) -> Result<f64> {
    let mut rng = rng_from_parts(&[seed, 0x6e6f726d]);
    let f = DescriptorVector::raw((0..5).map(|_| rng.random_range(0.3..2.0)).collect());
    let g = DescriptorVector::raw((0..5).map(|_| rng.random_range(-1.0..1.0)).collect());
    let analytic = normalize_backward(&f, &g)?;
    let numeric = finite_diff_grad(
        |v| {
            let n = l2_normalize(&DescriptorVector::raw(v.to_vec()));
            dot(&n.values, &g.values)
        },
        &f.values,
        1e-5,
    );
    Ok(max_rel_err(&analytic.values, &numeric))
}

/// Whole chain on a one-layer net: conv → gem (trainable p) → normalize →
/// contrastive over one tuple, differentiated with respect to every
/// parameter including the exponent.
fn gradcheck_composed(seed: u64) -> Result<f64> {
    let mut rng = rng_from_parts(&[seed, 0x656e6432]);
    let net = TinyFcn::seeded(1, &[(3, 2)], seed ^ 0x636d70);
    let model = Model::new(net, PoolingConfig::gem_shared(3.0)?);
    let mut images = BTreeMap::new();
    for id in 0..4u64 {
        let mut img = Image::zeros(8, 8, 1);
        for p in &mut img.pixels {
            *p = rng.random_range(0.0..1.0);
        }
        images.insert(id, img);
    }
    let batch = [TrainingTuple { query: 0, positive: 1, negatives: vec![2, 3] }];
    let mut cfg = TrainConfig::sgd();
    cfg.weight_decay = 0.0;

    let grads = compute_batch_gradients(&model, &cfg, &images, &batch)?;
    let mut analytic = grads.net.flatten();
    analytic.extend_from_slice(&grads.exponents);

    let point = model.flat_params();
    let numeric = finite_diff_grad(
        |params| {
            let mut probe = model.clone();
            probe.set_flat_params(params);
            batch_loss(&probe, &cfg, &images, &batch).unwrap()
        },
        &point,
        1e-5,
    );
    Ok(max_rel_err(&analytic, &numeric))
}
