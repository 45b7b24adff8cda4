//! Drives the full file-level pipeline the `gemret` binary exposes, end to
//! end in a scratch directory: synthesize a dataset, fine-tune, learn
//! whitening, build plain and whitened indexes, and evaluate with and
//! without query expansion.
//!
//! Run with `cargo run --release --example pipeline -- [epochs] [seed] [lr]`
//! (defaults 10 / 1 / 0.05; roughly half a minute unoptimized).

use std::fs;

use gemret::cli::{cmd_eval, cmd_index, cmd_synth, cmd_train, cmd_whiten};
use gemret::config::RunConfig;
use gemret::retrieval::QEConfig;
use gemret::Result;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map_or(10, |s| s.parse().expect("epochs"));
    let seed: u64 = args.get(2).map_or(1, |s| s.parse().expect("seed"));
    let lr: f64 = args.get(3).map_or(0.05, |s| s.parse().expect("lr"));
    let dir = std::env::temp_dir().join("gemret_pipeline_example");
    if dir.exists() {
        fs::remove_dir_all(&dir).expect("scratch dir removable");
    }
    fs::create_dir_all(&dir).expect("scratch dir creatable");
    println!("working under {}", dir.display());

    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.synth.images_per_cluster = (12, 12);
    cfg.initial_lr = lr;
    cfg.momentum = 0.5;
    cfg.batch_tuples = 2;
    cfg.epochs = epochs;

    cmd_synth(&cfg, &dir)?;
    println!("synthesized dataset: graph.json, manifest.json, images/");

    let checkpoint = dir.join("model.gemm");
    let report_path = dir.join("model.report.json");
    let report = cmd_train(&cfg, &dir.join("graph.json"), &checkpoint, &report_path)?;
    println!(
        "trained {} epochs, kept epoch {} (validation {:.4})",
        cfg.epochs,
        report.selected_epoch,
        report.validation[report.selected_epoch]
    );

    let whitening = dir.join("model.gemw");
    cmd_whiten(&cfg, &checkpoint, &dir.join("graph.json"), 16, &whitening)?;

    let plain_index = dir.join("plain.gemi");
    let white_index = dir.join("whitened.gemi");
    let manifest = dir.join("manifest.json");
    cmd_index(&cfg, &checkpoint, None, &manifest, &plain_index)?;
    cmd_index(&cfg, &checkpoint, Some(&whitening), &manifest, &white_index)?;

    let (plain, _) = cmd_eval(&plain_index, &manifest, None, None)?;
    let (whitened, _) = cmd_eval(&white_index, &manifest, None, None)?;
    let qe = QEConfig { n_qe: 3, alpha: 3.0 };
    let ranked = dir.join("ranked.txt");
    let (expanded, _) = cmd_eval(&white_index, &manifest, Some(&qe), Some(&ranked))?;

    println!();
    println!("plain descriptors        mAP {:.4}", plain.map);
    println!("whitened                 mAP {:.4}", whitened.map);
    println!("whitened + alpha QE      mAP {:.4}", expanded.map);
    println!();
    let lists = fs::read_to_string(&ranked).expect("ranked lists written");
    println!("first ranked lines:");
    for line in lists.lines().take(3) {
        println!("  {line}");
    }
    println!("artifacts left under {}", dir.display());
    Ok(())
}
