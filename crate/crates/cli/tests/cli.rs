use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ltn::config::Config;
use ltn::data::{load_trajectory_file, scene_instances};
use ltn::model::Model;
use ltn_cli::{run_with_seed, SEED_ENV};
use tempfile::TempDir;

fn run(args: &[&str]) -> i32 {
    run_with_seed(std::iter::once("ltn").chain(args.iter().copied()), None)
}

fn p(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Value of `"key": value` in a rendered report.
fn report_value(text: &str, key: &str) -> f64 {
    let prefix = format!("\"{key}\": ");
    let line = text.lines().map(str::trim).find(|l| l.starts_with(&prefix)).unwrap_or_else(|| panic!("no {key} in {text}"));
    line[prefix.len()..].trim_end_matches(',').parse().unwrap()
}

const SMALL: &[&str] = &[
    "--history-hidden", "8", "--neighbor-hidden", "4", "--future-hidden", "8", "--attention-dim", "4",
    "--latent-hidden", "8", "--decoder-hidden", "8", "--classifier-hidden", "8", "--classifier-head-hidden", "8",
];

fn synth(dir: &TempDir, name: &str, scenes: &str, dynamics: &str) -> PathBuf {
    let data = p(dir, name);
    assert_eq!(run(&["synth-gen", "--out", s(&data), "--scenes", scenes, "--dynamics", dynamics, "--seed", "4"]), 0);
    data
}

#[test]
fn unknown_input_prints_usage_and_fails() {
    assert_ne!(run(&[]), 0);
    assert_ne!(run(&["fly"]), 0);
    assert_ne!(run(&["evaluate", "--data", "x", "--predictions", "y", "--out", "z", "--bogus", "1"]), 0);
    assert_ne!(run(&["synth-gen", "--out", "x", "--dynamics", "teleport"]), 0);
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn bad_config_values_fail() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "d.txt", "2", "turning");
    let ck = p(&dir, "ck.txt");
    assert_eq!(run(&["train", "--data", s(&data), "--checkpoint", s(&ck), "--epochs", "many"]), 1);
    assert!(!ck.exists());
}

#[test]
fn zero_epochs_writes_the_initialization() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "d.txt", "3", "turning");
    let ck = p(&dir, "ck.txt");
    let report = p(&dir, "report.txt");
    let mut args = vec!["train", "--data", s(&data), "--checkpoint", s(&ck), "--report", s(&report), "--epochs", "0", "--seed", "11"];
    args.extend_from_slice(SMALL);
    assert_eq!(run(&args), 0);
    let (_, cfg) = Model::load(&ck).unwrap();
    assert_eq!(cfg.train.seed, 11);
    assert_eq!(cfg.train.epochs, 0);
    assert_eq!(cfg.model.history_hidden, 8);
    let fresh = Model::new(cfg.model.clone(), 11);
    assert_eq!(fs::read_to_string(&ck).unwrap(), fresh.checkpoint_text(&cfg));
    assert_eq!(report_value(&fs::read_to_string(&report).unwrap(), "epochs_run"), 0.0);
}

#[test]
fn seed_override_applies_below_flags() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "d.txt", "2", "turning");
    let ck = p(&dir, "ck.txt");
    let base = ["train", "--data", s(&data), "--checkpoint", s(&ck), "--epochs", "0"];
    let argv = |extra: &[&'static str]| std::iter::once("ltn").chain(base.iter().copied()).chain(extra.iter().copied()).collect::<Vec<_>>();
    assert_eq!(run_with_seed(argv(&[]), Some("23".into())), 0);
    assert_eq!(Model::load(&ck).unwrap().1.train.seed, 23);
    assert_eq!(run_with_seed(argv(&["--seed", "5"]), Some("23".into())), 0);
    assert_eq!(Model::load(&ck).unwrap().1.train.seed, 5);
    assert_eq!(run_with_seed(argv(&[]), Some("x".into())), 1);

    let status = Command::new(env!("CARGO_BIN_EXE_ltn"))
        .args(base)
        .env(SEED_ENV, "31")
        .env("RUST_LOG", "off")
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(Model::load(&ck).unwrap().1.train.seed, 31);
}

#[test]
fn evaluating_the_truth_reports_zeros() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "d.txt", "4", "social_repulsion");
    let scenes = load_trajectory_file(&data, 0.4).unwrap();
    let named = scene_instances(&scenes, &Config::default().model, true);
    assert!(!named.is_empty());
    let mut csv = String::from("instance_id,kind,index,latent_index,score,step,x,y\n");
    for n in &named {
        for (kind, index) in [("proposal", 0), ("proposal", 1), ("selected", 0), ("mean", 0), ("raw", 0)] {
            for (t, q) in n.instance.target_future.as_ref().unwrap().iter().enumerate() {
                csv.push_str(&format!("{},{kind},{index},0,0.5,{},{:?},{:?}\n", n.id, t + 1, q.x, q.y));
            }
        }
    }
    let preds = p(&dir, "pred.csv");
    fs::write(&preds, csv).unwrap();
    let (out, report) = (p(&dir, "m.csv"), p(&dir, "r.txt"));
    assert_eq!(run(&["evaluate", "--data", s(&data), "--predictions", s(&preds), "--out", s(&out), "--report", s(&report)]), 0);
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(report_value(&text, "instances"), named.len() as f64);
    for key in ["ade", "fde", "min_ade_k", "min_fde_k", "fde_1s", "fde_4s", "raw_min_ade_k", "argmax_mean_fde"] {
        assert_eq!(report_value(&text, key), 0.0, "{key}");
    }
    let table = fs::read_to_string(&out).unwrap();
    assert_eq!(table.lines().count(), named.len() + 1);
    assert!(table.starts_with("instance_id,ade,fde,min_ade_20,min_fde_20,fde_1s,fde_2s,fde_3s,fde_4s"));
    for line in table.lines().skip(1) {
        assert!(line.split(',').skip(1).all(|v| v.parse::<f64>().unwrap() == 0.0), "{line}");
    }

    let partial = p(&dir, "partial.csv");
    let first = fs::read_to_string(&preds).unwrap().lines().take(3).collect::<Vec<_>>().join("\n");
    fs::write(&partial, first).unwrap();
    assert_eq!(run(&["evaluate", "--data", s(&data), "--predictions", s(&partial), "--out", s(&out)]), 1);
}

#[test]
fn pipeline_beats_constant_position_on_straight_walkers() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "cv.txt", "200", "constant_velocity");
    let ck = p(&dir, "ck.txt");
    let mut args = vec![
        "train", "--data", s(&data), "--checkpoint", s(&ck), "--report", "/dev/null",
        "--epochs", "3", "--learning-rate", "0.005", "--gamma", "1", "--seed", "2",
    ];
    args.extend_from_slice(SMALL);
    assert_eq!(run(&args), 0);

    let (preds, svgs) = (p(&dir, "pred.csv"), p(&dir, "svg"));
    assert_eq!(
        run(&["predict", "--data", s(&data), "--checkpoint", s(&ck), "--out", s(&preds), "--svg-dir", s(&svgs), "--svg-limit", "3"]),
        0
    );
    assert_eq!(fs::read_dir(&svgs).unwrap().count(), 3);
    let (out, report) = (p(&dir, "m.csv"), p(&dir, "r.txt"));
    assert_eq!(run(&["evaluate", "--data", s(&data), "--predictions", s(&preds), "--out", s(&out), "--report", s(&report)]), 0);
    let fde = report_value(&fs::read_to_string(&report).unwrap(), "fde");

    let scenes = load_trajectory_file(&data, 0.4).unwrap();
    let named = scene_instances(&scenes, &Config::default().model, true);
    let still: f64 = named
        .iter()
        .map(|n| n.instance.target_future.as_ref().unwrap().last().unwrap().distance(n.instance.last_observed()))
        .sum::<f64>()
        / named.len() as f64;
    println!("pipeline fde {fde:.3}, constant position {still:.3}");
    assert!(fde < still, "fde {fde} vs constant position {still}");
}

#[test]
fn predict_rejects_shape_changes() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "d.txt", "2", "turning");
    let ck = p(&dir, "ck.txt");
    let mut args = vec!["train", "--data", s(&data), "--checkpoint", s(&ck), "--epochs", "0"];
    args.extend_from_slice(SMALL);
    assert_eq!(run(&args), 0);
    let out = p(&dir, "pred.csv");
    assert_eq!(run(&["predict", "--data", s(&data), "--checkpoint", s(&ck), "--out", s(&out), "--decoder-hidden", "9"]), 1);
    assert_eq!(run(&["predict", "--data", s(&data), "--checkpoint", s(&ck), "--out", s(&out), "--proposal-pool", "4", "--n-proposals", "2"]), 0);
    let text = fs::read_to_string(&out).unwrap();
    let first = text.lines().nth(1).unwrap().split(',').next().unwrap().to_string();
    let proposals = text.lines().filter(|l| l.starts_with(&format!("{first},proposal,")) && l.contains(",1,")).count();
    assert!(proposals >= 1);
    let ids: std::collections::BTreeSet<&str> = text.lines().skip(1).filter(|l| l.contains(",proposal,")).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(ids.len(), 4);
}

#[test]
fn ablation_writes_a_side_by_side_report() {
    let dir = TempDir::new().unwrap();
    let data = synth(&dir, "d.txt", "6", "turning");
    let out = p(&dir, "ablate.txt");
    let mut args = vec!["ablate-cell", "--data", s(&data), "--out", s(&out), "--seeds", "1,2", "--epochs", "1", "--test-fraction", "0.5"];
    args.extend_from_slice(SMALL);
    assert_eq!(run(&args), 0);
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.lines().next().unwrap().contains("mogrifier_fde"));
    assert_eq!(report_value(&text, "mogrifier_rounds"), 6.0);
    assert!(report_value(&text, "vanilla_fde").is_finite());
    let mut zero = args.clone();
    zero.extend_from_slice(&["--decoder-rounds", "0"]);
    assert_eq!(run(&zero), 1);
}
