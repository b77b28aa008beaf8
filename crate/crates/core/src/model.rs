//! The assembled two-stage network, inference, and checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{score_proposals, select_final_trajectory, ClassifierParams, TrajectoryProposal};
use crate::config::{Config, ModelConfig, LATENT_SIZE};
use crate::encoders::{encode_history, EncoderParams};
use crate::error::{LtnError, Result};
use crate::latent::{
    decode, distribution, prior_logits, read_distributions, sample_proposals, CategoricalLatent, DecodedDistribution,
    DecoderParams, LatentParams, ProposalMode,
};
use crate::scene::{Point, PredictionInstance};
use crate::tensor::{ParamStore, Tape, Tensor};

const CHECKPOINT_MAGIC: &str = "ltn-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub latent: LatentParams,
    pub decoder: DecoderParams,
    pub classifier: ClassifierParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub params: ModelParams,
}

/// Last observed per-frame displacement.
pub fn first_increment(inst: &PredictionInstance) -> Point {
    let h = &inst.target_history;
    match h.len() {
        0 | 1 => Point::ORIGIN,
        n => h[n - 1] - h[n - 2],
    }
}

/// Per-frame displacements of the ground-truth future, starting from the
/// last observed position.
pub fn future_increments(inst: &PredictionInstance) -> Result<Vec<Point>> {
    let fut = inst.target_future.as_ref().ok_or(LtnError::MissingFuture)?;
    let mut prev = inst.last_observed();
    Ok(fut
        .iter()
        .map(|&p| {
            let d = p - prev;
            prev = p;
            d
        })
        .collect())
}

/// SplitMix64 of `(base, key)`, used to derive per-instance seeds.
pub fn derive_seed(base: u64, key: u64) -> u64 {
    let mut z = base ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub prior: CategoricalLatent,
    /// Mean path of the prior's most probable symbol.
    pub mean_trajectory: Vec<Point>,
    /// Scored proposals in sampling order.
    pub proposals: Vec<TrajectoryProposal>,
    /// Highest-scoring proposal.
    pub selected: TrajectoryProposal,
}

impl Prediction {
    /// The `k` best proposals by score.
    pub fn top(&self, k: usize) -> Result<Vec<TrajectoryProposal>> {
        select_final_trajectory(&self.proposals, k.min(self.proposals.len()))
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let vi = config.history_tensor_dim();
        let vf = config.future_tensor_dim();
        let encoder = EncoderParams::new(&mut store, &config, &mut rng);
        let latent = LatentParams::new(&mut store, vi, vf, config.latent_hidden, &mut rng);
        let decoder = DecoderParams::new(&mut store, vi, config.decoder_hidden, config.decoder_rounds, &mut rng);
        let classifier = ClassifierParams::new(
            &mut store,
            vi,
            config.classifier_hidden,
            config.classifier_head_hidden,
            &mut rng,
        );
        Self {
            config,
            store,
            params: ModelParams {
                encoder,
                latent,
                decoder,
                classifier,
            },
        }
    }

    /// Current BCE weight `w`.
    pub fn class_weight(&self) -> f64 {
        self.store.get(self.params.classifier.log_w).data()[0].exp()
    }

    /// Prior and decoded distributions for `z` without sampling.
    pub fn decode_symbols(&self, inst: &PredictionInstance, z: &[usize]) -> Result<(CategoricalLatent, Vec<DecodedDistribution>)> {
        let mut tape = Tape::with_params(&self.store);
        let hist = encode_history(&mut tape, inst, &self.params.encoder)?;
        let pl = prior_logits(&mut tape, hist.v_i, &self.params.latent)?;
        let prior = distribution(&tape, pl)?;
        let steps = inst.horizon.future_len();
        let outs = decode(&mut tape, hist.v_i, z, first_increment(inst), steps, &self.params.decoder)?;
        Ok((prior, read_distributions(&tape, &outs, z, inst.last_observed())))
    }

    /// Samples `pool` proposals, scores them and selects the best.
    pub fn predict(&self, inst: &PredictionInstance, pool: usize, mode: ProposalMode, seed: u64) -> Result<Prediction> {
        if pool == 0 {
            return Err(LtnError::Invalid("proposal pool must be positive".into()));
        }
        let mut tape = Tape::with_params(&self.store);
        let hist = encode_history(&mut tape, inst, &self.params.encoder)?;
        let v_i = tape.detach(hist.v_i);
        let pl = prior_logits(&mut tape, v_i, &self.params.latent)?;
        let prior = distribution(&tape, pl)?;
        let steps = inst.horizon.future_len();
        let origin = inst.last_observed();
        let inc = first_increment(inst);
        let dec = &self.params.decoder;
        let mut proposals = {
            let tape = &mut tape;
            sample_proposals(&prior, pool, mode, seed, |z| {
                let outs = decode(tape, v_i, z, inc, steps, dec)?;
                Ok(read_distributions(tape, &outs, z, origin))
            })?
        };
        let k = prior.argmax();
        let outs = decode(&mut tape, v_i, &[k], inc, steps, dec)?;
        let mean_trajectory = read_distributions(&tape, &outs, &[k], origin)[0].mean_trajectory();
        score_proposals(&mut tape, &mut proposals, &inst.target_history, v_i, &self.params.classifier)?;
        let selected = select_final_trajectory(&proposals, 1)?.remove(0);
        Ok(Prediction {
            prior,
            mean_trajectory,
            proposals,
            selected,
        })
    }

    /// History tensor of an instance, as plain values.
    pub fn history_tensor(&self, inst: &PredictionInstance) -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(&self.store);
        let h = encode_history(&mut tape, inst, &self.params.encoder)?;
        Ok(tape.value(h.v_i).data().to_vec())
    }

    pub fn checkpoint_text(&self, config: &Config) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
        let mut cfg = config.clone();
        cfg.model = self.config.clone();
        for line in cfg.to_text().lines() {
            let _ = writeln!(out, "config {line}");
        }
        for (_, name, t) in self.store.iter() {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "param {name} {} {}", t.rank(), dims.join(" "));
            let vals: Vec<String> = t.data().iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
        out
    }

    pub fn from_checkpoint_text(text: &str) -> Result<(Model, Config)> {
        let bad = |m: &str| LtnError::Parse(format!("checkpoint: {m}"));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == CHECKPOINT_MAGIC => {}
            _ => return Err(bad("missing header")),
        }
        let mut cfg_text = String::new();
        let mut params: Vec<(String, Tensor)> = Vec::new();
        while let Some((i, line)) = lines.next() {
            if let Some(rest) = line.strip_prefix("config ") {
                cfg_text.push_str(rest);
                cfg_text.push('\n');
            } else if let Some(rest) = line.strip_prefix("param ") {
                let mut parts = rest.split_whitespace();
                let name = parts.next().ok_or_else(|| bad(&format!("line {}: no name", i + 1)))?;
                let rank: usize = parts
                    .next()
                    .and_then(|r| r.parse().ok())
                    .ok_or_else(|| bad(&format!("line {}: no rank", i + 1)))?;
                let shape: Vec<usize> = parts.map(|d| d.parse().map_err(|_| bad("bad dim"))).collect::<Result<_>>()?;
                if shape.len() != rank {
                    return Err(bad(&format!("line {}: rank {rank} with {} dims", i + 1, shape.len())));
                }
                let (_, vals) = lines.next().ok_or_else(|| bad("missing values"))?;
                let data: Vec<f64> = vals
                    .split_whitespace()
                    .map(|v| v.parse().map_err(|_| bad(&format!("bad value `{v}`"))))
                    .collect::<Result<_>>()?;
                params.push((name.to_string(), Tensor::new(&shape, data)?));
            } else if !line.trim().is_empty() {
                return Err(bad(&format!("line {}: unexpected content", i + 1)));
            }
        }
        let config: Config = cfg_text.parse().map_err(|e| bad(&format!("{e}")))?;
        let mut model = Model::new(config.model.clone(), 0);
        if params.len() != model.store.len() {
            return Err(bad(&format!("{} parameters, model has {}", params.len(), model.store.len())));
        }
        for (name, value) in params {
            let id = model.store.find(&name).ok_or_else(|| bad(&format!("unknown parameter {name}")))?;
            model.store.set(id, value)?;
        }
        Ok((model, config))
    }

    pub fn save(&self, config: &Config, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_text(config))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Model, Config)> {
        Self::from_checkpoint_text(&std::fs::read_to_string(path)?)
    }
}

/// Every latent symbol, in order.
pub fn all_symbols() -> Vec<usize> {
    (0..LATENT_SIZE).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::toy_instance;

    #[test]
    fn construction_is_seeded() {
        let a = Model::new(ModelConfig::shrunk(), 3);
        let b = Model::new(ModelConfig::shrunk(), 3);
        let c = Model::new(ModelConfig::shrunk(), 4);
        assert_eq!(a, b);
        assert_ne!(a.store, c.store);
        assert_eq!(a.class_weight(), 1.0);
    }

    #[test]
    fn prediction_shapes_and_determinism() {
        let m = Model::new(ModelConfig::shrunk(), 1);
        let inst = toy_instance(2).without_future();
        let p = m.predict(&inst, 30, ProposalMode::Full, 9).unwrap();
        assert_eq!(p.proposals.len(), 30);
        assert_eq!(p.mean_trajectory.len(), 12);
        assert!(p.proposals.iter().all(|q| q.positions.len() == 12 && q.score.is_some()));
        let best = p.proposals.iter().map(|q| q.score.unwrap()).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(p.selected.score, Some(best));
        assert_eq!(p, m.predict(&inst, 30, ProposalMode::Full, 9).unwrap());
        let lm = m.predict(&inst, 5, ProposalMode::LatentMode, 9).unwrap();
        assert!(lm.proposals.iter().all(|q| q.latent_index == lm.prior.argmax()));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = Model::new(ModelConfig::shrunk(), 5);
        let mut cfg = Config::default();
        cfg.train.epochs = 2;
        let text = m.checkpoint_text(&cfg);
        let (back, cfg2) = Model::from_checkpoint_text(&text).unwrap();
        assert_eq!(back.store, m.store);
        assert_eq!(back.config, m.config);
        assert_eq!(cfg2.train.epochs, 2);
        assert_eq!(back.checkpoint_text(&cfg2), text);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        assert!(Model::from_checkpoint_text("nope").is_err());
        let m = Model::new(ModelConfig::shrunk(), 5);
        let text = m.checkpoint_text(&Config::default());
        let cut: String = text.lines().take(60).collect::<Vec<_>>().join("\n");
        assert!(Model::from_checkpoint_text(&cut).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(7, 7), derive_seed(7, 7));
    }
}
