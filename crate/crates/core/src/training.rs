//! The composite objective and the optimization loop.
//!
//! A batch is built on a single tape: every instance contributes its prior
//! and posterior logits and the log-likelihood of its future under all 25
//! decoded components, so the expectation over the posterior is exact. The
//! classifier branch sees proposals and a detached history tensor, so its
//! loss only reaches the classifier parameters and `w`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{classification_loss_var, label_proposals, score_var, TrajectoryProposal};
use crate::config::TrainConfig;
use crate::encoders::{encode_future, encode_history};
use crate::error::{LtnError, Result};
use crate::latent::{
    decode, decoded_log_likelihood, distribution, kl_var, posterior_logits, prior_logits, read_distributions,
    sample_proposals, CategoricalLatent, DecodedDistribution,
};
use crate::metrics::{ade, fde};
use crate::model::{all_symbols, derive_seed, first_increment, future_increments, Model, ModelParams};
use crate::tensor::{Adam, AdamConfig, ParamStore, Tape, Var};

/// Per-instance inputs of the regression objective.
#[derive(Clone, Copy, Debug)]
pub struct LatentTerms {
    pub q_logits: Var,
    pub p_logits: Var,
    /// `[25]` log-likelihood of the future under each component.
    pub log_likelihood: Var,
}

/// Batch-mean parts of the regression objective, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct RegressionTerms {
    /// `mean_b(-E_b + beta KL_b) - alpha I_q`.
    pub loss: Var,
    pub expected_ll: Var,
    pub kl: Var,
    pub mutual_info: Var,
}

/// Negated objective: expected log-likelihood under `q`, the `beta`-weighted
/// KL to the prior, and the `alpha`-weighted mutual information of `q` over
/// the batch.
pub fn regression_loss(tape: &mut Tape<'_>, terms: &[LatentTerms], beta: f64, alpha: f64) -> Result<RegressionTerms> {
    if terms.is_empty() {
        return Err(LtnError::EmptyBatch);
    }
    let b = terms.len() as f64;
    let mut exp_lls = Vec::new();
    let mut kls = Vec::new();
    let mut log_qs = Vec::new();
    let mut qs = Vec::new();
    for t in terms {
        let q = tape.softmax(t.q_logits);
        exp_lls.push(tape.dot(q, t.log_likelihood)?);
        kls.push(kl_var(tape, t.q_logits, t.p_logits)?);
        let lq = tape.log_softmax(t.q_logits);
        let n = tape.shape(lq)[0];
        log_qs.push(tape.reshape(lq, &[1, n])?);
        qs.push((q, lq));
    }
    // log of the batch-average posterior, per symbol, via log-sum-exp so
    // that symbols with vanishing mass stay finite.
    let stacked = tape.concat(&log_qs)?;
    let lse = tape.log_sum_exp(stacked);
    let log_mean = tape.offset(lse, -b.ln());
    let mut mi_terms = Vec::new();
    for (q, lq) in qs {
        let diff = tape.sub(lq, log_mean)?;
        mi_terms.push(tape.dot(q, diff)?);
    }
    let mean = |tape: &mut Tape<'_>, xs: &[Var]| -> Result<Var> {
        let c = tape.concat(xs)?;
        Ok(tape.mean(c))
    };
    let expected_ll = mean(tape, &exp_lls)?;
    let kl = mean(tape, &kls)?;
    let mutual_info = mean(tape, &mi_terms)?;
    let neg_e = tape.neg(expected_ll);
    let bkl = tape.scale(kl, beta);
    let a = tape.add(neg_e, bkl)?;
    let ami = tape.scale(mutual_info, alpha);
    let loss = tape.sub(a, ami)?;
    Ok(RegressionTerms {
        loss,
        expected_ll,
        kl,
        mutual_info,
    })
}

/// Regression loss plus the mean per-proposal classification loss.
pub fn total_loss(reg_loss: f64, class_losses: &[f64]) -> f64 {
    if class_losses.is_empty() {
        return reg_loss;
    }
    reg_loss + class_losses.iter().sum::<f64>() / class_losses.len() as f64
}

/// Where the classifier's proposals come from.
#[derive(Clone, Debug)]
pub enum ProposalSource<'a> {
    /// Fresh samples from each instance's prior, seeded per instance.
    Sample { seeds: &'a [u64] },
    /// Given proposals, one set per instance.
    Fixed(&'a [Vec<TrajectoryProposal>]),
}

/// Scalar summaries of one batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub beta: f64,
    pub reg_loss: f64,
    /// Negated expected log-likelihood.
    pub recon: f64,
    pub kl: f64,
    pub mutual_info: f64,
    pub class_loss: f64,
    pub total: f64,
    /// ADE of the prior's most probable component mean.
    pub train_ade: f64,
    pub positive_fraction: f64,
}

pub struct BatchOutcome {
    pub total: Var,
    pub regression: Var,
    pub stats: StepStats,
    pub proposals: Vec<Vec<TrajectoryProposal>>,
    pub posteriors: Vec<CategoricalLatent>,
    /// Mean classification loss of each instance.
    pub class_losses: Vec<f64>,
}

/// Builds the full training objective of a batch on `tape`.
pub fn batch_objective(
    tape: &mut Tape<'_>,
    batch: &[&crate::scene::PredictionInstance],
    params: &ModelParams,
    train: &TrainConfig,
    beta: f64,
    source: ProposalSource<'_>,
) -> Result<BatchOutcome> {
    if batch.is_empty() {
        return Err(LtnError::EmptyBatch);
    }
    let z = all_symbols();
    let mut terms = Vec::new();
    let mut class_vars = Vec::new();
    let mut class_values = Vec::new();
    let mut all_props = Vec::new();
    let mut posteriors = Vec::new();
    let mut ade_sum = 0.0;
    let mut positives = 0usize;
    let mut proposal_count = 0usize;
    let log_w = tape.param(params.classifier.log_w);
    for (b, inst) in batch.iter().enumerate() {
        let truth = inst.target_future.as_ref().ok_or(LtnError::MissingFuture)?;
        let hist = encode_history(tape, inst, &params.encoder)?;
        let fut = encode_future(tape, inst, &params.encoder)?;
        let p_logits = prior_logits(tape, hist.v_i, &params.latent)?;
        let q_logits = posterior_logits(tape, hist.v_i, fut.v_f, &params.latent)?;
        let steps = truth.len();
        let outs = decode(tape, hist.v_i, &z, first_increment(inst), steps, &params.decoder)?;
        let incs = future_increments(inst)?;
        let log_likelihood = decoded_log_likelihood(tape, &outs, &incs)?;
        terms.push(LatentTerms {
            q_logits,
            p_logits,
            log_likelihood,
        });
        posteriors.push(distribution(tape, q_logits)?);

        let prior = distribution(tape, p_logits)?;
        let dists: Vec<DecodedDistribution> = read_distributions(tape, &outs, &z, inst.last_observed());
        ade_sum += ade(&dists[prior.argmax()].mean_trajectory(), truth)?;
        let mut props = match &source {
            ProposalSource::Sample { seeds } => {
                sample_proposals(&prior, train.n_proposals.max(1), train.proposal_mode, seeds[b], |zs| {
                    Ok(zs.iter().map(|&k| dists[k].clone()).collect())
                })?
            }
            ProposalSource::Fixed(sets) => sets[b].clone(),
        };
        label_proposals(&mut props, truth, train.gamma)?;
        let labels: Vec<bool> = props.iter().map(|p| p.label == Some(true)).collect();
        positives += labels.iter().filter(|&&l| l).count();
        proposal_count += labels.len();
        let v_i = tape.detach(hist.v_i);
        let scores = score_var(tape, &props, &inst.target_history, v_i, &params.classifier)?;
        for (p, &s) in props.iter_mut().zip(tape.value(scores).data()) {
            p.score = Some(s);
        }
        let c = classification_loss_var(tape, scores, &labels, log_w)?;
        class_values.push(tape.scalar(c));
        class_vars.push(c);
        all_props.push(props);
    }
    let reg = regression_loss(tape, &terms, beta, train.alpha)?;
    let class_cat = tape.concat(&class_vars)?;
    let class_mean = tape.mean(class_cat);
    let total = tape.add(reg.loss, class_mean)?;

    let n = batch.len() as f64;
    let stats = StepStats {
        beta,
        reg_loss: tape.scalar(reg.loss),
        recon: -tape.scalar(reg.expected_ll),
        kl: tape.scalar(reg.kl),
        mutual_info: tape.scalar(reg.mutual_info),
        class_loss: tape.scalar(class_mean),
        total: tape.scalar(total),
        train_ade: ade_sum / n,
        positive_fraction: positives as f64 / proposal_count.max(1) as f64,
    };
    Ok(BatchOutcome {
        total,
        regression: reg.loss,
        stats,
        proposals: all_props,
        posteriors,
        class_losses: class_values,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: u64,
    /// Batch means averaged over the epoch.
    pub mean: StepStats,
    pub class_weight: f64,
    pub val_ade: Option<f64>,
    pub val_fde: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Per optimizer step.
    pub steps: Vec<StepStats>,
    /// Epoch whose parameters were kept, by validation FDE.
    pub best_epoch: Option<usize>,
    pub diverged: bool,
}

impl TrainReport {
    pub fn all_finite(&self) -> bool {
        self.steps.iter().all(|s| {
            [s.reg_loss, s.recon, s.kl, s.mutual_info, s.class_loss, s.total, s.train_ade]
                .iter()
                .all(|v| v.is_finite())
        })
    }
}

fn mean_stats(steps: &[StepStats]) -> StepStats {
    let n = steps.len().max(1) as f64;
    let mut m = StepStats::default();
    for s in steps {
        m.reg_loss += s.reg_loss / n;
        m.recon += s.recon / n;
        m.kl += s.kl / n;
        m.mutual_info += s.mutual_info / n;
        m.class_loss += s.class_loss / n;
        m.total += s.total / n;
        m.train_ade += s.train_ade / n;
        m.positive_fraction += s.positive_fraction / n;
    }
    m.beta = steps.last().map_or(0.0, |s| s.beta);
    m
}

/// Mean ADE and FDE of the classifier-selected prediction.
pub fn validate(model: &Model, val: &[crate::scene::PredictionInstance], train: &TrainConfig) -> Result<(f64, f64)> {
    let mut a = 0.0;
    let mut f = 0.0;
    for (i, inst) in val.iter().enumerate() {
        let truth = inst.target_future.as_ref().ok_or(LtnError::MissingFuture)?;
        let p = model.predict(
            &inst.without_future(),
            train.n_proposals.max(1),
            train.proposal_mode,
            derive_seed(train.seed ^ 0x5eed, i as u64),
        )?;
        a += ade(&p.selected.positions, truth)?;
        f += fde(&p.selected.positions, truth)?;
    }
    let n = val.len().max(1) as f64;
    Ok((a / n, f / n))
}

/// Trains `model` in place on `train` and returns the report. With a
/// non-empty `val`, the parameters of the epoch with the lowest validation
/// FDE are kept. A non-finite loss or gradient stops training and keeps the
/// last finite parameters.
pub fn fit(
    model: &mut Model,
    train: &[crate::scene::PredictionInstance],
    val: &[crate::scene::PredictionInstance],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    if train.is_empty() {
        return Err(LtnError::EmptyBatch);
    }
    let mut adam = Adam::new(
        &model.store,
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut best: Option<(f64, ParamStore)> = None;
    let mut step: u64 = 0;
    let bs = cfg.batch_size.max(1);
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64)));
        let mut epoch_steps = Vec::new();
        for chunk in order.chunks(bs) {
            let beta = cfg.beta().value(step);
            let batch: Vec<&crate::scene::PredictionInstance> = chunk.iter().map(|&i| &train[i]).collect();
            let seeds: Vec<u64> = chunk
                .iter()
                .map(|&i| derive_seed(derive_seed(cfg.seed, step), i as u64))
                .collect();
            let (stats, mut grads) = {
                let mut tape = Tape::with_params(&model.store);
                let out = batch_objective(
                    &mut tape,
                    &batch,
                    &model.params,
                    cfg,
                    beta,
                    ProposalSource::Sample { seeds: &seeds },
                )?;
                if !out.stats.total.is_finite() {
                    log::error!("non-finite loss at step {step}: {:?}", out.stats);
                    report.diverged = true;
                    break 'epochs;
                }
                let g = tape.backward(out.total)?;
                (out.stats, tape.param_gradients(&g))
            };
            if cfg.freeze_class_weight {
                grads.zero_param(model.params.classifier.log_w);
            }
            if !grads.all_finite() {
                log::error!("non-finite gradient at step {step}");
                report.diverged = true;
                break 'epochs;
            }
            grads.clip_global_norm(cfg.grad_clip);
            adam.step(&mut model.store, &mut grads)?;
            log::debug!(
                "step {step} total {:.4} recon {:.4} kl {:.4} class {:.4}",
                stats.total,
                stats.recon,
                stats.kl,
                stats.class_loss
            );
            report.steps.push(stats.clone());
            epoch_steps.push(stats);
            step += 1;
        }
        let (val_ade, val_fde) = if val.is_empty() {
            (None, None)
        } else {
            let (a, f) = validate(model, val, cfg)?;
            (Some(a), Some(f))
        };
        if let Some(f) = val_fde {
            if best.as_ref().is_none_or(|(b, _)| f < *b) {
                best = Some((f, model.store.clone()));
                report.best_epoch = Some(epoch);
            }
        }
        let mean = mean_stats(&epoch_steps);
        log::info!(
            "epoch {epoch}: total {:.4} recon {:.4} kl {:.4} class {:.4} train_ade {:.3} val_fde {:?}",
            mean.total,
            mean.recon,
            mean.kl,
            mean.class_loss,
            mean.train_ade,
            val_fde
        );
        report.epochs.push(EpochStats {
            epoch,
            steps: epoch_steps.len() as u64,
            mean,
            class_weight: model.class_weight(),
            val_ade,
            val_fde,
        });
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok(report)
}

/// Constant-velocity extrapolation of the last observed displacement.
pub fn constant_velocity(inst: &crate::scene::PredictionInstance) -> Vec<crate::scene::Point> {
    let v = first_increment(inst);
    let o = inst.last_observed();
    (1..=inst.horizon.future_len()).map(|t| o + v.scale(t as f64)).collect()
}
