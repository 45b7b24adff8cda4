//! File-level round trips through the command layer plus the error paths a
//! user actually hits: wrong paths, impossible dimensions, and the gradcheck
//! negative control. One test drives the installed binary end to end.

use std::path::Path;
use std::process::Command;

use gemret::cli::{build_model, cmd_eval, cmd_gradcheck, cmd_index, cmd_synth, cmd_train, cmd_whiten};
use gemret::config::RunConfig;
use gemret::error::Error;
use gemret::retrieval::{load_index, QEConfig};
use gemret::trainer::{fit, load_model, load_report};
use gemret::whitening::load_whitening;

fn small_cfg() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 5;
    cfg.synth.images_per_cluster = (8, 8);
    cfg.synth.image_size = 28;
    cfg.epochs = 2;
    cfg.initial_lr = 0.05;
    cfg.momentum = 0.5;
    cfg.batch_tuples = 2;
    cfg
}

#[test]
fn files_round_trip_through_every_command() {
    let cfg = small_cfg();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    cmd_synth(&cfg, root).unwrap();
    let graph = root.join("graph.json");
    let manifest = root.join("manifest.json");
    assert!(graph.is_file() && manifest.is_file());
    assert!(root.join("images").read_dir().unwrap().count() >= 8 * 8);

    let checkpoint = root.join("model.gemm");
    let report_path = root.join("model.report.json");
    let report = cmd_train(&cfg, &graph, &checkpoint, &report_path).unwrap();
    assert_eq!(report.validation.len(), cfg.epochs + 1, "one entry per epoch plus baseline");
    assert!(report.selected_epoch < report.validation.len());
    let reloaded = load_report(&report_path).unwrap();
    assert_eq!(reloaded.validation, report.validation);
    assert_eq!(reloaded.selected_epoch, report.selected_epoch);
    let model = load_model(&checkpoint).unwrap();
    assert_eq!(model.flat_params().len(), build_model(&cfg, 1).unwrap().flat_params().len());

    let whitening = root.join("model.gemw");
    cmd_whiten(&cfg, &checkpoint, &graph, 8, &whitening).unwrap();
    let transform = load_whitening(&whitening).unwrap();
    assert_eq!(transform.in_dim(), cfg.descriptor_dim);
    assert_eq!(transform.out_dim(), 8);

    let plain = root.join("plain.gemi");
    let whitened = root.join("whitened.gemi");
    cmd_index(&cfg, &checkpoint, None, &manifest, &plain).unwrap();
    cmd_index(&cfg, &checkpoint, Some(&whitening), &manifest, &whitened).unwrap();
    let plain_index = load_index(&plain).unwrap();
    let whitened_index = load_index(&whitened).unwrap();
    assert_eq!(plain_index.len(), 8 * 8);
    assert_eq!(plain_index.dim(), cfg.descriptor_dim);
    assert_eq!(whitened_index.dim(), 8);

    let ranked_path = root.join("ranked.txt");
    let (eval, text) = cmd_eval(&plain, &manifest, None, Some(&ranked_path)).unwrap();
    assert!(eval.map.is_finite() && (0.0..=1.0).contains(&eval.map));
    assert_eq!(eval.per_query.len(), 8 * 8, "every image queries");
    assert!(text.contains("mAP"));
    let ranked = std::fs::read_to_string(&ranked_path).unwrap();
    assert_eq!(
        ranked.lines().count(),
        8 * 8 * (8 * 8 - 1),
        "one `query result rank score` line per returned result"
    );

    let (expanded, _) =
        cmd_eval(&plain, &manifest, Some(&QEConfig { n_qe: 3, alpha: 3.0 }), None).unwrap();
    assert!(expanded.map.is_finite() && (0.0..=1.0).contains(&expanded.map));
    let (whitened_eval, _) = cmd_eval(&whitened, &manifest, None, None).unwrap();
    assert!(whitened_eval.map.is_finite() && (0.0..=1.0).contains(&whitened_eval.map));
}

#[test]
fn zero_epoch_training_returns_the_initial_model() {
    let cfg = small_cfg();
    let scene = gemret::synth::generate(&cfg.synth, cfg.seed).unwrap();
    let mut model = build_model(&cfg, 1).unwrap();
    let before = model.flat_params();

    let mut train = cfg.train_config();
    train.epochs = 0;
    let report = fit(&mut model, &scene.graph, &scene.images, &train, &cfg.mining_config())
        .unwrap();
    assert_eq!(model.flat_params(), before, "no epochs, no parameter movement");
    assert_eq!(report.validation.len(), 1, "baseline validation only");
    assert_eq!(report.selected_epoch, 0);
}

#[test]
fn missing_graph_error_names_the_path() {
    let cfg = small_cfg();
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere").join("graph.json");
    let err = cmd_train(
        &cfg,
        &missing,
        &dir.path().join("model.gemm"),
        &dir.path().join("model.report.json"),
    )
    .unwrap_err();
    assert!(
        err.to_string().contains("nowhere"),
        "error should name the offending path: {err}"
    );
}

#[test]
fn whitening_rejects_impossible_target_dim() {
    let cfg = small_cfg();
    let dir = tempfile::tempdir().unwrap();
    cmd_synth(&cfg, dir.path()).unwrap();
    let checkpoint = dir.path().join("init.gemm");
    gemret::trainer::save_model(&build_model(&cfg, 1).unwrap(), &checkpoint).unwrap();

    let err = cmd_whiten(
        &cfg,
        &checkpoint,
        &dir.path().join("graph.json"),
        cfg.descriptor_dim + 1,
        &dir.path().join("w.gemw"),
    )
    .unwrap_err();
    assert!(
        matches!(err, Error::BadTargetDim { requested, available }
            if requested == cfg.descriptor_dim + 1 && available == cfg.descriptor_dim),
        "got {err}"
    );
}

#[test]
fn gradcheck_catches_a_corrupted_gradient() {
    let report = cmd_gradcheck(3, false).unwrap();
    assert!(report.lines().count() >= 7, "all suites reported");
    assert!(report.contains("ok"));

    let err = cmd_gradcheck(3, true).unwrap_err();
    match err {
        Error::GradCheckFailed(detail) => {
            assert!(detail.contains("FAIL"), "failure report:\n{detail}")
        }
        other => panic!("expected GradCheckFailed, got {other}"),
    }
}

fn run_binary(args: &[&str], dir: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_gemret"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "gemret {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn map_line(stdout: &str) -> String {
    stdout
        .lines()
        .find(|l| l.starts_with("mAP"))
        .unwrap_or_else(|| panic!("no mAP line in:\n{stdout}"))
        .to_string()
}

#[test]
fn binary_runs_the_whole_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(
        root.join("run.conf"),
        "images_per_cluster_min = 8\nimages_per_cluster_max = 8\nimage_size = 28\n\
         epochs = 1\ninitial_lr = 0.05\nmomentum = 0.5\nbatch_tuples = 2\n",
    )
    .unwrap();
    let common = ["--config", "run.conf", "--seed", "5", "--threads", "1"];

    fn with<'a>(common: &[&'a str], rest: &[&'a str]) -> Vec<&'a str> {
        let mut args = common.to_vec();
        args.extend_from_slice(rest);
        args
    }
    run_binary(&with(&common, &["synth", "--out", "data"]), root);
    run_binary(
        &with(&common, &["train", "--graph", "data/graph.json", "--out", "model.gemm"]),
        root,
    );
    run_binary(
        &with(&common, &[
            "whiten", "--checkpoint", "model.gemm", "--graph", "data/graph.json", "--dim", "8",
            "--out", "model.gemw",
        ]),
        root,
    );
    run_binary(
        &with(&common, &[
            "index", "--checkpoint", "model.gemm", "--manifest", "data/manifest.json", "--out",
            "plain.gemi",
        ]),
        root,
    );
    run_binary(
        &with(&common, &[
            "index", "--checkpoint", "model.gemm", "--whitening", "model.gemw", "--manifest",
            "data/manifest.json", "--out", "white.gemi",
        ]),
        root,
    );

    let plain = run_binary(
        &with(&common, &["eval", "--index", "plain.gemi", "--manifest", "data/manifest.json"]),
        root,
    );
    let aqe = run_binary(
        &with(&common, &[
            "eval", "--index", "plain.gemi", "--manifest", "data/manifest.json", "--aqe", "3",
        ]),
        root,
    );
    let alpha0 = run_binary(
        &with(&common, &[
            "eval", "--index", "plain.gemi", "--manifest", "data/manifest.json", "--alpha-qe",
            "0", "3",
        ]),
        root,
    );
    assert_eq!(map_line(&aqe), map_line(&alpha0), "--aqe N must equal --alpha-qe 0 N");
    assert!(map_line(&plain).starts_with("mAP"));
    run_binary(
        &with(&common, &[
            "eval", "--index", "white.gemi", "--manifest", "data/manifest.json", "--ranked",
            "ranked.txt",
        ]),
        root,
    );
    assert!(root.join("ranked.txt").is_file());

    run_binary(&with(&common, &["gradcheck"]), root);
    let corrupt = Command::new(env!("CARGO_BIN_EXE_gemret"))
        .args(["gradcheck", "--corrupt"])
        .current_dir(root)
        .output()
        .unwrap();
    assert!(!corrupt.status.success(), "corrupted gradcheck must exit nonzero");
    assert!(String::from_utf8_lossy(&corrupt.stderr).contains("FAIL"));
}
