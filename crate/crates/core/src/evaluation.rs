//! Held-out evaluation and the decoder-cell comparison.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{Config, ModelConfig, TrainConfig};
use crate::data::NamedInstance;
use crate::error::{LtnError, Result};
use crate::latent::ProposalMode;
use crate::metrics::{ade, compute_metrics, fde, mean_report, MetricsReport};
use crate::model::{derive_seed, Model};
use crate::scene::{Point, PredictionInstance};
use crate::training::{constant_velocity, fit, TrainReport};

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceEvaluation {
    pub id: String,
    /// Selected proposal as the single prediction, top-k by score as the set.
    pub metrics: MetricsReport,
    /// Mean path of the most probable latent symbol.
    pub argmax_ade: f64,
    pub argmax_fde: f64,
    pub cv_ade: f64,
    pub cv_fde: f64,
    /// Best of `k` raw samples from the most probable symbol's Gaussian.
    pub raw_min_ade_k: f64,
    pub raw_min_fde_k: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Proposals drawn per instance.
    pub pool: usize,
    /// Size of the sample sets the minima range over.
    pub k: usize,
    pub mode: ProposalMode,
    pub seed: u64,
}

impl EvalOptions {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        Self {
            pool: cfg.proposal_pool.max(cfg.n_proposals).max(1),
            k: cfg.n_proposals.max(1),
            mode: cfg.proposal_mode,
            seed: cfg.seed,
        }
    }
}

/// `k` samples from the Gaussian of the prior's most probable symbol.
pub fn raw_samples(model: &Model, inst: &PredictionInstance, k: usize, seed: u64) -> Result<Vec<Vec<Point>>> {
    let (prior, _) = model.decode_symbols(inst, &[0])?;
    let (_, dists) = model.decode_symbols(inst, &[prior.argmax()])?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7a11));
    Ok((0..k).map(|_| dists[0].sample(&mut rng)).collect())
}

pub fn evaluate_instance(model: &Model, named: &NamedInstance, opts: &EvalOptions, seed: u64) -> Result<InstanceEvaluation> {
    let inst = &named.instance;
    let truth = inst.target_future.as_ref().ok_or(LtnError::MissingFuture)?;
    let blind = inst.without_future();
    let pred = model.predict(&blind, opts.pool, opts.mode, seed)?;
    let top: Vec<Vec<Point>> = pred.top(opts.k)?.into_iter().map(|p| p.positions).collect();
    let metrics = compute_metrics(&pred.selected.positions, &top, truth, inst.dt)?;

    let raw = raw_samples(model, &blind, opts.k, seed)?;
    let raw_report = compute_metrics(&raw[0], &raw, truth, inst.dt)?;

    let cv = constant_velocity(inst);
    Ok(InstanceEvaluation {
        id: named.id.clone(),
        metrics,
        argmax_ade: ade(&pred.mean_trajectory, truth)?,
        argmax_fde: fde(&pred.mean_trajectory, truth)?,
        cv_ade: ade(&cv, truth)?,
        cv_fde: fde(&cv, truth)?,
        raw_min_ade_k: raw_report.min_ade_k,
        raw_min_fde_k: raw_report.min_fde_k,
    })
}

/// Evaluates every instance in parallel; instance `i` draws from the seed
/// `derive_seed(opts.seed, i)`, so results do not depend on thread count.
pub fn evaluate(model: &Model, instances: &[NamedInstance], opts: &EvalOptions) -> Result<Vec<InstanceEvaluation>> {
    instances
        .par_iter()
        .enumerate()
        .map(|(i, n)| evaluate_instance(model, n, opts, derive_seed(opts.seed, i as u64)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub instances: usize,
    pub metrics: MetricsReport,
    pub argmax_ade: f64,
    pub argmax_fde: f64,
    pub cv_ade: f64,
    pub cv_fde: f64,
    pub raw_min_ade_k: f64,
    pub raw_min_fde_k: f64,
}

pub fn summarize(evals: &[InstanceEvaluation]) -> Option<EvalSummary> {
    let reports: Vec<MetricsReport> = evals.iter().map(|e| e.metrics.clone()).collect();
    let metrics = mean_report(&reports)?;
    let n = evals.len() as f64;
    let avg = |f: fn(&InstanceEvaluation) -> f64| evals.iter().map(f).sum::<f64>() / n;
    Some(EvalSummary {
        instances: evals.len(),
        metrics,
        argmax_ade: avg(|e| e.argmax_ade),
        argmax_fde: avg(|e| e.argmax_fde),
        cv_ade: avg(|e| e.cv_ade),
        cv_fde: avg(|e| e.cv_fde),
        raw_min_ade_k: avg(|e| e.raw_min_ade_k),
        raw_min_fde_k: avg(|e| e.raw_min_fde_k),
    })
}

/// One trained model and its held-out summary.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub model: Model,
    pub report: TrainReport,
    pub summary: EvalSummary,
}

/// Fits a fresh model seeded with `train.seed` and evaluates it on `test`.
pub fn train_and_evaluate(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &[NamedInstance],
    val: &[NamedInstance],
    test: &[NamedInstance],
) -> Result<TrainedRun> {
    let strip = |v: &[NamedInstance]| v.iter().map(|n| n.instance.clone()).collect::<Vec<_>>();
    let mut model = Model::new(model_cfg.clone(), train_cfg.seed);
    let report = fit(&mut model, &strip(train), &strip(val), train_cfg)?;
    let evals = evaluate(&model, test, &EvalOptions::from_train(train_cfg))?;
    let summary = summarize(&evals).ok_or(LtnError::EmptyBatch)?;
    Ok(TrainedRun { model, report, summary })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub mogrifier: EvalSummary,
    pub vanilla: EvalSummary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rounds: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    fn mean(&self, f: impl Fn(&AblationRow) -> f64) -> f64 {
        self.rows.iter().map(f).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// Mean final-step FDE of the selected output, Mogrifier then vanilla.
    pub fn mean_fde(&self) -> (f64, f64) {
        (self.mean(|r| r.mogrifier.metrics.fde), self.mean(|r| r.vanilla.metrics.fde))
    }

    pub fn mean_ade(&self) -> (f64, f64) {
        (self.mean(|r| r.mogrifier.metrics.ade), self.mean(|r| r.vanilla.metrics.ade))
    }

    /// Relative FDE reduction of the Mogrifier decoder.
    pub fn improvement(&self) -> f64 {
        let (m, v) = self.mean_fde();
        (v - m) / v
    }
}

/// Trains the configured decoder and a zero-round (plain GRU) decoder on
/// identical data and seeds, one pair per seed.
pub fn ablate_cell(
    config: &Config,
    seeds: &[u64],
    train: &[NamedInstance],
    val: &[NamedInstance],
    test: &[NamedInstance],
) -> Result<AblationReport> {
    if config.model.decoder_rounds == 0 {
        return Err(LtnError::Invalid("the compared decoder needs at least one mogrifier round".into()));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let tc = TrainConfig {
            seed,
            ..config.train.clone()
        };
        let vanilla_cfg = ModelConfig {
            decoder_rounds: 0,
            ..config.model.clone()
        };
        let mogrifier = train_and_evaluate(&config.model, &tc, train, val, test)?.summary;
        let vanilla = train_and_evaluate(&vanilla_cfg, &tc, train, val, test)?.summary;
        log::info!(
            "seed {seed}: mogrifier fde {:.4}, vanilla fde {:.4}",
            mogrifier.metrics.fde,
            vanilla.metrics.fde
        );
        rows.push(AblationRow { seed, mogrifier, vanilla });
    }
    Ok(AblationReport {
        rounds: config.model.decoder_rounds,
        rows,
    })
}
