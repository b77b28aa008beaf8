//! Command-line entry points: synthetic data, training, prediction,
//! evaluation and the decoder-cell comparison.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{value_parser, Arg, ArgMatches, Command};
use ltn::classifier::{select_final_trajectory, TrajectoryProposal};
use ltn::config::{Config, KEYS};
use ltn::data::{
    generate_synthetic_scenes, load_trajectory_file, scene_instances, split_scenes, write_trajectory_file, Dynamics,
    NamedInstance, SynthConfig, SYNTH_DT,
};
use ltn::evaluation::{ablate_cell, raw_samples};
use ltn::metrics::{compute_metrics, mean_report};
use ltn::model::{derive_seed, Model};
use ltn::scene::Point;
use ltn::training::fit;

pub mod output;

use output::{
    metrics_csv, overlay_svg, parse_predictions, MetricsRow, Overlay, PathEntry, PredictionWriter, Report, RowKind,
};

/// Overrides the configured seed when set.
pub const SEED_ENV: &str = "LTN_SEED";

type CliResult<T> = Result<T, String>;

fn flag_name(key: &str) -> &'static str {
    Box::leak(key.replace('_', "-").into_boxed_str())
}

fn config_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .value_parser(value_parser!(PathBuf))
        .help("Flat `key = value` configuration file")];
    for &key in KEYS {
        args.push(
            Arg::new(key)
                .long(flag_name(key))
                .value_name("VALUE")
                .help(format!("Config key `{key}`"))
                .help_heading("Config"),
        );
    }
    args
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(value_parser!(PathBuf))
        .help(help)
}

fn data_args() -> [Arg; 2] {
    [
        path_arg("data", "Trajectory file, `frame agent x y` per line").required(true),
        Arg::new("dt")
            .long("dt")
            .value_parser(value_parser!(f64))
            .default_value("0.4")
            .help("Seconds between frames"),
    ]
}

pub fn command() -> Command {
    Command::new("ltn")
        .about("Two-stage trajectory forecaster: latent-variable proposals ranked by a classifier")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("synth-gen")
                .about("Write synthetic multi-agent scenes")
                .arg(path_arg("out", "Output trajectory file").required(true))
                .arg(Arg::new("seed").long("seed").value_parser(value_parser!(u64)))
                .arg(Arg::new("scenes").long("scenes").value_parser(value_parser!(usize)).default_value("100"))
                .arg(Arg::new("agents").long("agents").value_parser(value_parser!(usize)).default_value("3"))
                .arg(
                    Arg::new("dynamics")
                        .long("dynamics")
                        .value_parser(["constant_velocity", "turning", "social_repulsion"])
                        .default_value("social_repulsion"),
                )
                .arg(Arg::new("frames").long("frames").value_parser(value_parser!(usize)).default_value("20"))
                .arg(
                    Arg::new("noise")
                        .long("noise")
                        .value_parser(value_parser!(f64))
                        .default_value("0")
                        .help("Position noise standard deviation, meters"),
                ),
        )
        .subcommand(
            Command::new("train")
                .about("Fit a model and write a checkpoint and a training report")
                .args(data_args())
                .arg(path_arg("checkpoint", "Checkpoint to write").required(true))
                .arg(path_arg("report", "Report to write; stdout when absent"))
                .args(config_args()),
        )
        .subcommand(
            Command::new("predict")
                .about("Write scored proposal sets for every window of a trajectory file")
                .args(data_args())
                .arg(path_arg("checkpoint", "Trained checkpoint").required(true))
                .arg(path_arg("out", "Predictions CSV to write").required(true))
                .arg(path_arg("svg-dir", "Directory for overlay plots"))
                .arg(
                    Arg::new("svg-limit")
                        .long("svg-limit")
                        .value_parser(value_parser!(usize))
                        .default_value("10")
                        .help("Plots to write"),
                )
                .args(config_args()),
        )
        .subcommand(
            Command::new("evaluate")
                .about("Score a predictions CSV against the ground truth")
                .args(data_args())
                .arg(path_arg("predictions", "Predictions CSV").required(true))
                .arg(path_arg("out", "Per-instance metrics CSV to write").required(true))
                .arg(path_arg("report", "Summary report to write; stdout when absent"))
                .arg(
                    Arg::new("units")
                        .long("units")
                        .value_parser(["meters", "pixels"])
                        .default_value("meters"),
                )
                .args(config_args()),
        )
        .subcommand(
            Command::new("ablate-cell")
                .about("Compare the Mogrifier decoder against a plain GRU decoder")
                .args(data_args())
                .arg(path_arg("out", "Report to write; stdout when absent"))
                .arg(
                    Arg::new("seeds")
                        .long("seeds")
                        .value_delimiter(',')
                        .value_parser(value_parser!(u64))
                        .default_value("1,2,3"),
                )
                .arg(
                    Arg::new("test-fraction")
                        .long("test-fraction")
                        .value_parser(value_parser!(f64))
                        .default_value("0.2"),
                )
                .args(config_args()),
        )
}

/// Runs one invocation; `argv[0]` is the program name.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with_seed(argv, std::env::var(SEED_ENV).ok())
}

/// [`run_cli`] with the seed override passed explicitly.
pub fn run_with_seed<I, T>(argv: I, seed_override: Option<String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let seed = seed_override.as_deref();
    let result = match matches.subcommand() {
        Some(("synth-gen", m)) => synth_gen(m, seed),
        Some(("train", m)) => train(m, seed),
        Some(("predict", m)) => predict(m, seed),
        Some(("evaluate", m)) => evaluate(m),
        Some(("ablate-cell", m)) => ablate(m, seed),
        _ => Err("unknown subcommand".to_string()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> Option<&'a Path> {
    m.get_one::<PathBuf>(name).map(PathBuf::as_path)
}

fn required_path<'a>(m: &'a ArgMatches, name: &str) -> &'a Path {
    path(m, name).expect("clap enforces required arguments")
}

fn write(p: &Path, text: &str) -> CliResult<()> {
    fs::write(p, text).map_err(|e| format!("{}: {e}", p.display()))
}

fn write_or_print(p: Option<&Path>, text: &str) -> CliResult<()> {
    match p {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_seed(s: &str) -> CliResult<u64> {
    s.trim().parse().map_err(|_| format!("{SEED_ENV} must be an unsigned integer, got `{s}`"))
}

/// Config file, then the seed override, then individual flags.
fn build_config(base: Config, m: &ArgMatches, seed: Option<&str>) -> CliResult<Config> {
    let mut cfg = match path(m, "config") {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            text.parse::<Config>().map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => base,
    };
    if let Some(s) = seed {
        cfg.train.seed = parse_seed(s)?;
    }
    for &key in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v).map_err(|e| e.to_string())?;
        }
    }
    Ok(cfg)
}

fn load_named(m: &ArgMatches, cfg: &Config) -> CliResult<Vec<NamedInstance>> {
    let dt = *m.get_one::<f64>("dt").expect("defaulted");
    let scenes = load_trajectory_file(required_path(m, "data"), dt).map_err(|e| e.to_string())?;
    Ok(scene_instances(&scenes, &cfg.model, true))
}

fn synth_gen(m: &ArgMatches, seed: Option<&str>) -> CliResult<()> {
    let seed = match m.get_one::<u64>("seed") {
        Some(&s) => s,
        None => seed.map(parse_seed).transpose()?.unwrap_or(0),
    };
    let dynamics: Dynamics = m.get_one::<String>("dynamics").expect("defaulted").parse().map_err(|e: ltn::error::LtnError| e.to_string())?;
    let cfg = SynthConfig {
        seed,
        n_scenes: *m.get_one("scenes").expect("defaulted"),
        agents_per_scene: *m.get_one("agents").expect("defaulted"),
        dynamics,
        frames: *m.get_one("frames").expect("defaulted"),
        dt: SYNTH_DT,
        noise: *m.get_one("noise").expect("defaulted"),
        ..SynthConfig::default()
    };
    let scenes = generate_synthetic_scenes(&cfg).map_err(|e| e.to_string())?;
    let out = required_path(m, "out");
    write_trajectory_file(out, &scenes).map_err(|e| e.to_string())?;
    log::info!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

fn train(m: &ArgMatches, seed: Option<&str>) -> CliResult<()> {
    let cfg = build_config(Config::default(), m, seed)?;
    let dt = *m.get_one::<f64>("dt").expect("defaulted");
    let scenes = load_trajectory_file(required_path(m, "data"), dt).map_err(|e| e.to_string())?;
    let (train_scenes, val_scenes) = split_scenes(scenes, cfg.train.val_fraction);
    let strip = |s: &[ltn::scene::Scene]| -> Vec<_> {
        scene_instances(s, &cfg.model, true).into_iter().map(|n| n.instance).collect()
    };
    let (train_set, val_set) = (strip(&train_scenes), strip(&val_scenes));
    log::info!("training on {} instances, validating on {}", train_set.len(), val_set.len());

    let mut model = Model::new(cfg.model.clone(), cfg.train.seed);
    let report = fit(&mut model, &train_set, &val_set, &cfg.train).map_err(|e| e.to_string())?;
    model.save(&cfg, required_path(m, "checkpoint")).map_err(|e| e.to_string())?;

    let mut r = Report::default();
    r.int("train_instances", train_set.len())
        .int("val_instances", val_set.len())
        .int("epochs_run", report.epochs.len())
        .int("steps", report.steps.len())
        .text("diverged", if report.diverged { "yes" } else { "no" })
        .num("best_epoch", report.best_epoch.map(|e| e as f64).unwrap_or(f64::NAN));
    let col = |f: fn(&ltn::training::EpochStats) -> f64| report.epochs.iter().map(f).collect::<Vec<f64>>();
    r.nums("epoch_regression_loss", &col(|e| e.mean.reg_loss))
        .nums("epoch_reconstruction", &col(|e| e.mean.recon))
        .nums("epoch_kl", &col(|e| e.mean.kl))
        .nums("epoch_mutual_info", &col(|e| e.mean.mutual_info))
        .nums("epoch_classification_loss", &col(|e| e.mean.class_loss))
        .nums("epoch_total_loss", &col(|e| e.mean.total))
        .nums("epoch_class_weight", &col(|e| e.class_weight))
        .nums("epoch_val_ade", &col(|e| e.val_ade.unwrap_or(f64::NAN)))
        .nums("epoch_val_fde", &col(|e| e.val_fde.unwrap_or(f64::NAN)));
    for (k, v) in cfg.entries() {
        r.text(&format!("config.{k}"), &v);
    }
    write_or_print(path(m, "report"), &r.render())
}

/// Keys that only change how a loaded model is used.
const RUNTIME_KEYS: &[&str] = &["perception_distance", "n_proposals", "proposal_pool", "proposal_mode", "seed"];

fn predict(m: &ArgMatches, seed: Option<&str>) -> CliResult<()> {
    let (model, saved) = Model::load(required_path(m, "checkpoint")).map_err(|e| e.to_string())?;
    let cfg = build_config(saved.clone(), m, seed)?;
    for ((key, old), (_, new)) in saved.entries().iter().zip(cfg.entries()) {
        if is_model_key(key) && !RUNTIME_KEYS.contains(key) && *old != new {
            return Err(format!("`{key}` is fixed by the checkpoint"));
        }
    }
    let mut model = model;
    model.config.perception_distance = cfg.model.perception_distance;
    let named = load_named(m, &cfg)?;
    let pool = cfg.train.proposal_pool.max(cfg.train.n_proposals).max(1);
    let k = cfg.train.n_proposals.max(1);
    let svg_dir = path(m, "svg-dir");
    if let Some(d) = svg_dir {
        fs::create_dir_all(d).map_err(|e| format!("{}: {e}", d.display()))?;
    }
    let svg_limit = *m.get_one::<usize>("svg-limit").expect("defaulted");

    let mut out = PredictionWriter::default();
    for (i, n) in named.iter().enumerate() {
        let blind = n.instance.without_future();
        let s = derive_seed(cfg.train.seed, i as u64);
        let pred = model.predict(&blind, pool, cfg.train.proposal_mode, s).map_err(|e| e.to_string())?;
        for p in &pred.proposals {
            out.push(&n.id, &proposal_entry(RowKind::Proposal, p));
        }
        out.push(&n.id, &proposal_entry(RowKind::Selected, &pred.selected));
        let argmax = pred.prior.argmax();
        let mean = PathEntry {
            kind: RowKind::Mean,
            index: 0,
            latent_index: Some(argmax),
            score: None,
            positions: pred.mean_trajectory.clone(),
        };
        out.push(&n.id, &mean);
        for (j, positions) in raw_samples(&model, &blind, k, s).map_err(|e| e.to_string())?.into_iter().enumerate() {
            let raw = PathEntry {
                kind: RowKind::Raw,
                index: j,
                latent_index: Some(argmax),
                score: None,
                positions,
            };
            out.push(&n.id, &raw);
        }
        if let Some(d) = svg_dir.filter(|_| i < svg_limit) {
            let svg = overlay_svg(&Overlay {
                title: &n.id,
                history: &n.instance.target_history,
                truth: n.instance.target_future.as_deref(),
                proposals: pred.proposals.iter().map(|p| p.positions.as_slice()).collect(),
                selected: &pred.selected.positions,
            });
            write(&d.join(format!("{}.svg", n.id)), &svg)?;
        }
    }
    write(required_path(m, "out"), &out.finish())?;
    log::info!("wrote predictions for {} instances", named.len());
    Ok(())
}

fn is_model_key(key: &str) -> bool {
    let pos = KEYS.iter().position(|k| *k == key);
    let first_train = KEYS.iter().position(|k| *k == "alpha");
    matches!((pos, first_train), (Some(p), Some(t)) if p < t)
}

fn proposal_entry(kind: RowKind, p: &TrajectoryProposal) -> PathEntry {
    PathEntry {
        kind,
        index: p.index,
        latent_index: Some(p.latent_index),
        score: p.score,
        positions: p.positions.clone(),
    }
}

fn evaluate(m: &ArgMatches) -> CliResult<()> {
    let cfg = build_config(Config::default(), m, None)?;
    let named = load_named(m, &cfg)?;
    let pred_path = required_path(m, "predictions");
    let text = fs::read_to_string(pred_path).map_err(|e| format!("{}: {e}", pred_path.display()))?;
    let mut preds = parse_predictions(&text)?;
    let k = cfg.train.n_proposals.max(1);

    let mut rows = Vec::new();
    let mut argmax_fde = Vec::new();
    for n in &named {
        let Some(paths) = preds.remove(&n.id) else {
            return Err(format!("no predictions for instance {}", n.id));
        };
        let truth = n.instance.target_future.as_ref().expect("instances carry their future");
        let proposals: Vec<TrajectoryProposal> = paths
            .iter()
            .filter(|p| p.kind == RowKind::Proposal)
            .map(|p| TrajectoryProposal {
                score: p.score,
                ..TrajectoryProposal::new(p.index, p.positions.clone(), p.latent_index.unwrap_or(0))
            })
            .collect();
        if proposals.is_empty() {
            return Err(format!("instance {} has no proposals", n.id));
        }
        let top = select_final_trajectory(&proposals, k.min(proposals.len())).map_err(|e| e.to_string())?;
        let selected = match paths.iter().find(|p| p.kind == RowKind::Selected) {
            Some(p) => p.positions.clone(),
            None => top[0].positions.clone(),
        };
        let set: Vec<Vec<Point>> = top.into_iter().map(|p| p.positions).collect();
        let metrics = compute_metrics(&selected, &set, truth, n.instance.dt).map_err(|e| format!("{}: {e}", n.id))?;
        let raw: Vec<Vec<Point>> = paths.iter().filter(|p| p.kind == RowKind::Raw).map(|p| p.positions.clone()).collect();
        let raw = if raw.is_empty() {
            None
        } else {
            let r = compute_metrics(&raw[0], &raw, truth, n.instance.dt).map_err(|e| format!("{}: {e}", n.id))?;
            Some((r.min_ade_k, r.min_fde_k))
        };
        if let Some(p) = paths.iter().find(|p| p.kind == RowKind::Mean) {
            argmax_fde.push(ltn::metrics::fde(&p.positions, truth).map_err(|e| e.to_string())?);
        }
        rows.push(MetricsRow {
            id: n.id.clone(),
            metrics,
            raw,
        });
    }
    if let Some(id) = preds.keys().next() {
        return Err(format!("predictions name an unknown instance {id}"));
    }

    write(required_path(m, "out"), &metrics_csv(&rows, k))?;
    let reports: Vec<_> = rows.iter().map(|r| r.metrics.clone()).collect();
    let mut r = Report::default();
    r.int("instances", rows.len())
        .text("units", m.get_one::<String>("units").expect("defaulted"));
    match mean_report(&reports) {
        Some(mean) => {
            r.metrics("", &mean);
        }
        None => {
            r.metrics(
                "",
                &ltn::metrics::MetricsReport {
                    ade: f64::NAN,
                    fde: f64::NAN,
                    k,
                    min_ade_k: f64::NAN,
                    min_fde_k: f64::NAN,
                    fde_seconds: [None; 4],
                },
            );
        }
    }
    let raw: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.raw).collect();
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    r.num("raw_min_ade_k", mean(&raw.iter().map(|x| x.0).collect::<Vec<_>>()))
        .num("raw_min_fde_k", mean(&raw.iter().map(|x| x.1).collect::<Vec<_>>()))
        .num("argmax_mean_fde", mean(&argmax_fde));
    write_or_print(path(m, "report"), &r.render())
}

fn ablate(m: &ArgMatches, seed: Option<&str>) -> CliResult<()> {
    let cfg = build_config(Config::default(), m, seed)?;
    let dt = *m.get_one::<f64>("dt").expect("defaulted");
    let scenes = load_trajectory_file(required_path(m, "data"), dt).map_err(|e| e.to_string())?;
    let fraction = *m.get_one::<f64>("test-fraction").expect("defaulted");
    let (train_scenes, test_scenes) = split_scenes(scenes, fraction);
    let (train_scenes, val_scenes) = split_scenes(train_scenes, cfg.train.val_fraction);
    let train_set = scene_instances(&train_scenes, &cfg.model, true);
    let val_set = scene_instances(&val_scenes, &cfg.model, true);
    let test_set = scene_instances(&test_scenes, &cfg.model, true);
    let seeds: Vec<u64> = m.get_many::<u64>("seeds").expect("defaulted").copied().collect();
    let report = ablate_cell(&cfg, &seeds, &train_set, &val_set, &test_set).map_err(|e| e.to_string())?;

    let (mog_fde, van_fde) = report.mean_fde();
    let (mog_ade, van_ade) = report.mean_ade();
    let mut text = String::new();
    let _ = writeln!(text, "{:>6}  {:>14}  {:>14}  {:>14}  {:>14}", "seed", "mogrifier_ade", "mogrifier_fde", "vanilla_ade", "vanilla_fde");
    for row in &report.rows {
        let _ = writeln!(
            text,
            "{:>6}  {:>14.4}  {:>14.4}  {:>14.4}  {:>14.4}",
            row.seed, row.mogrifier.metrics.ade, row.mogrifier.metrics.fde, row.vanilla.metrics.ade, row.vanilla.metrics.fde
        );
    }
    let _ = writeln!(text, "{:>6}  {mog_ade:>14.4}  {mog_fde:>14.4}  {van_ade:>14.4}  {van_fde:>14.4}", "mean");
    let mut r = Report::default();
    r.int("mogrifier_rounds", report.rounds)
        .int("train_instances", train_set.len())
        .int("test_instances", test_set.len())
        .nums("seeds", &seeds.iter().map(|&s| s as f64).collect::<Vec<_>>())
        .num("mogrifier_fde", mog_fde)
        .num("vanilla_fde", van_fde)
        .num("mogrifier_ade", mog_ade)
        .num("vanilla_ade", van_ade)
        .num("fde_improvement", report.improvement());
    text.push('\n');
    text.push_str(&r.render());
    write_or_print(path(m, "out"), &text)
}
