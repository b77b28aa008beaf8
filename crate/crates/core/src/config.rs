//! Model and training configuration, with a flat `key = value` text form.
//!
//! Every key has a default, so an empty file is a valid configuration.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::latent::ProposalMode;
use crate::scene::Horizon;

/// Number of discrete latent symbols.
pub const LATENT_SIZE: usize = 25;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub obs_frames: usize,
    pub pred_frames: usize,
    pub history_hidden: usize,
    pub history_layers: usize,
    pub neighbor_hidden: usize,
    pub future_hidden: usize,
    pub future_layers: usize,
    pub encoder_rounds: usize,
    pub attention_dim: usize,
    pub use_map: bool,
    pub patch_cells: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub map_dim: usize,
    pub latent_hidden: usize,
    pub decoder_hidden: usize,
    pub decoder_rounds: usize,
    pub classifier_hidden: usize,
    pub classifier_head_hidden: usize,
    /// Neighbor radius in meters; `0` picks 10 m, or 30 m for scenes with vehicles.
    pub perception_distance: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            obs_frames: 8,
            pred_frames: 12,
            history_hidden: 32,
            history_layers: 2,
            neighbor_hidden: 8,
            future_hidden: 32,
            future_layers: 1,
            encoder_rounds: 6,
            attention_dim: 16,
            use_map: false,
            patch_cells: 8,
            conv1_channels: 4,
            conv2_channels: 8,
            map_dim: 32,
            latent_hidden: 32,
            decoder_hidden: 32,
            decoder_rounds: 6,
            classifier_hidden: 16,
            classifier_head_hidden: 16,
            perception_distance: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn horizon(&self) -> Horizon {
        Horizon::from_frames(self.obs_frames, self.pred_frames)
    }

    /// Width of the complete history tensor.
    pub fn history_tensor_dim(&self) -> usize {
        self.history_hidden + self.neighbor_hidden + if self.use_map { self.map_dim } else { 0 }
    }

    /// Width of the complete future tensor.
    pub fn future_tensor_dim(&self) -> usize {
        2 * self.future_hidden + self.neighbor_hidden
    }

    /// Small dimensions used by the desk-scale experiments.
    pub fn shrunk() -> Self {
        Self {
            history_hidden: 16,
            neighbor_hidden: 8,
            future_hidden: 16,
            attention_dim: 8,
            latent_hidden: 16,
            decoder_hidden: 16,
            classifier_hidden: 16,
            classifier_head_hidden: 16,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BetaSchedule {
    Constant(f64),
    /// `end * s + start * (1 - s)` with `s = sigmoid(rate * (step - midpoint))`.
    SigmoidAnneal {
        start: f64,
        end: f64,
        midpoint: f64,
        rate: f64,
    },
}

impl BetaSchedule {
    pub fn value(&self, step: u64) -> f64 {
        match *self {
            BetaSchedule::Constant(c) => c,
            BetaSchedule::SigmoidAnneal {
                start,
                end,
                midpoint,
                rate,
            } => {
                let s = 1.0 / (1.0 + (-(rate * (step as f64 - midpoint))).exp());
                end * s + start * (1.0 - s)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BetaKind {
    Constant,
    Anneal,
}

impl FromStr for BetaKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "constant" => Ok(BetaKind::Constant),
            "anneal" => Ok(BetaKind::Anneal),
            _ => Err(()),
        }
    }
}

impl std::fmt::Display for BetaKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BetaKind::Constant => "constant",
            BetaKind::Anneal => "anneal",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta_kind: BetaKind,
    pub beta_constant: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta_midpoint: f64,
    pub beta_rate: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub n_proposals: usize,
    /// Samples drawn per instance at prediction time before ranking.
    pub proposal_pool: usize,
    pub gamma: f64,
    pub seed: u64,
    pub grad_clip: f64,
    pub val_fraction: f64,
    /// Keep the BCE weight `w` fixed at its initial value.
    pub freeze_class_weight: bool,
    pub proposal_mode: ProposalMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta_kind: BetaKind::Anneal,
            beta_constant: 1.0,
            beta_start: 0.0,
            beta_end: 1.0,
            beta_midpoint: 400.0,
            beta_rate: 0.01,
            learning_rate: 0.002,
            batch_size: 16,
            epochs: 10,
            n_proposals: 20,
            proposal_pool: 60,
            gamma: 3.0,
            seed: 0,
            grad_clip: 10.0,
            val_fraction: 0.1,
            freeze_class_weight: false,
            proposal_mode: ProposalMode::Full,
        }
    }
}

impl TrainConfig {
    pub fn beta(&self) -> BetaSchedule {
        match self.beta_kind {
            BetaKind::Constant => BetaSchedule::Constant(self.beta_constant),
            BetaKind::Anneal => BetaSchedule::SigmoidAnneal {
                start: self.beta_start,
                end: self.beta_end,
                midpoint: self.beta_midpoint,
                rate: self.beta_rate,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
}

/// Every recognized key, in file order.
pub const KEYS: &[&str] = &[
    "obs_frames",
    "pred_frames",
    "history_hidden",
    "history_layers",
    "neighbor_hidden",
    "future_hidden",
    "future_layers",
    "encoder_rounds",
    "attention_dim",
    "use_map",
    "patch_cells",
    "conv1_channels",
    "conv2_channels",
    "map_dim",
    "latent_hidden",
    "decoder_hidden",
    "decoder_rounds",
    "classifier_hidden",
    "classifier_head_hidden",
    "perception_distance",
    "alpha",
    "beta_schedule",
    "beta_constant",
    "beta_start",
    "beta_end",
    "beta_midpoint",
    "beta_rate",
    "learning_rate",
    "batch_size",
    "epochs",
    "n_proposals",
    "proposal_pool",
    "gamma",
    "seed",
    "grad_clip",
    "val_fraction",
    "freeze_class_weight",
    "proposal_mode",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl Config {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let m = &mut self.model;
        let t = &mut self.train;
        let v = value.trim();
        match key {
            "obs_frames" => m.obs_frames = parse(key, v)?,
            "pred_frames" => m.pred_frames = parse(key, v)?,
            "history_hidden" => m.history_hidden = parse(key, v)?,
            "history_layers" => m.history_layers = parse(key, v)?,
            "neighbor_hidden" => m.neighbor_hidden = parse(key, v)?,
            "future_hidden" => m.future_hidden = parse(key, v)?,
            "future_layers" => m.future_layers = parse(key, v)?,
            "encoder_rounds" => m.encoder_rounds = parse(key, v)?,
            "attention_dim" => m.attention_dim = parse(key, v)?,
            "use_map" => m.use_map = parse(key, v)?,
            "patch_cells" => m.patch_cells = parse(key, v)?,
            "conv1_channels" => m.conv1_channels = parse(key, v)?,
            "conv2_channels" => m.conv2_channels = parse(key, v)?,
            "map_dim" => m.map_dim = parse(key, v)?,
            "latent_hidden" => m.latent_hidden = parse(key, v)?,
            "decoder_hidden" => m.decoder_hidden = parse(key, v)?,
            "decoder_rounds" => m.decoder_rounds = parse(key, v)?,
            "classifier_hidden" => m.classifier_hidden = parse(key, v)?,
            "classifier_head_hidden" => m.classifier_head_hidden = parse(key, v)?,
            "perception_distance" => m.perception_distance = parse(key, v)?,
            "alpha" => t.alpha = parse(key, v)?,
            "beta_schedule" => t.beta_kind = parse(key, v)?,
            "beta_constant" => t.beta_constant = parse(key, v)?,
            "beta_start" => t.beta_start = parse(key, v)?,
            "beta_end" => t.beta_end = parse(key, v)?,
            "beta_midpoint" => t.beta_midpoint = parse(key, v)?,
            "beta_rate" => t.beta_rate = parse(key, v)?,
            "learning_rate" => t.learning_rate = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "n_proposals" => t.n_proposals = parse(key, v)?,
            "proposal_pool" => t.proposal_pool = parse(key, v)?,
            "gamma" => t.gamma = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "grad_clip" => t.grad_clip = parse(key, v)?,
            "val_fraction" => t.val_fraction = parse(key, v)?,
            "freeze_class_weight" => t.freeze_class_weight = parse(key, v)?,
            "proposal_mode" => t.proposal_mode = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Current value of every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let vals: Vec<String> = vec![
            m.obs_frames.to_string(),
            m.pred_frames.to_string(),
            m.history_hidden.to_string(),
            m.history_layers.to_string(),
            m.neighbor_hidden.to_string(),
            m.future_hidden.to_string(),
            m.future_layers.to_string(),
            m.encoder_rounds.to_string(),
            m.attention_dim.to_string(),
            m.use_map.to_string(),
            m.patch_cells.to_string(),
            m.conv1_channels.to_string(),
            m.conv2_channels.to_string(),
            m.map_dim.to_string(),
            m.latent_hidden.to_string(),
            m.decoder_hidden.to_string(),
            m.decoder_rounds.to_string(),
            m.classifier_hidden.to_string(),
            m.classifier_head_hidden.to_string(),
            m.perception_distance.to_string(),
            t.alpha.to_string(),
            t.beta_kind.to_string(),
            t.beta_constant.to_string(),
            t.beta_start.to_string(),
            t.beta_end.to_string(),
            t.beta_midpoint.to_string(),
            t.beta_rate.to_string(),
            t.learning_rate.to_string(),
            t.batch_size.to_string(),
            t.epochs.to_string(),
            t.n_proposals.to_string(),
            t.proposal_pool.to_string(),
            t.gamma.to_string(),
            t.seed.to_string(),
            t.grad_clip.to_string(),
            t.val_fraction.to_string(),
            t.freeze_class_weight.to_string(),
            t.proposal_mode.to_string(),
        ];
        KEYS.iter().copied().zip(vals).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

impl FromStr for Config {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut cfg = Config::default();
        for (i, raw) in s.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_default() {
        assert_eq!("".parse::<Config>().unwrap(), Config::default());
    }

    #[test]
    fn text_round_trip() {
        let mut c = Config::default();
        c.set("epochs", "3").unwrap();
        c.set("beta_schedule", "constant").unwrap();
        c.set("beta_constant", "0.5").unwrap();
        c.set("decoder_rounds", "0").unwrap();
        let back: Config = c.to_text().parse().unwrap();
        assert_eq!(back, c);
        assert_eq!(back.train.beta(), BetaSchedule::Constant(0.5));
    }

    #[test]
    fn every_key_is_settable_and_listed() {
        let c = Config::default();
        let entries = c.entries();
        assert_eq!(entries.len(), KEYS.len());
        let mut d = Config::default();
        for (k, v) in entries {
            d.set(k, &v).unwrap();
        }
        assert_eq!(d, c);
    }

    #[test]
    fn unknown_key_and_bad_value_rejected() {
        assert_eq!(
            "nope = 1".parse::<Config>().unwrap_err(),
            ConfigError::UnknownKey("nope".into())
        );
        assert!(matches!(
            "epochs = many".parse::<Config>().unwrap_err(),
            ConfigError::BadValue { .. }
        ));
        assert_eq!(
            "epochs 3".parse::<Config>().unwrap_err(),
            ConfigError::Syntax { line: 1 }
        );
    }

    #[test]
    fn beta_schedule_values() {
        assert_eq!(BetaSchedule::Constant(1.0).value(12345), 1.0);
        let s = BetaSchedule::SigmoidAnneal {
            start: 0.0,
            end: 1.0,
            midpoint: 100.0,
            rate: 0.1,
        };
        assert_eq!(s.value(100), 0.5);
        assert!((s.value(1_000_000) - 1.0).abs() < 1e-12);
        let s2 = BetaSchedule::SigmoidAnneal {
            start: 0.2,
            end: 0.8,
            midpoint: 7.0,
            rate: 3.0,
        };
        assert!((s2.value(7) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn vi_dimension_depends_on_map() {
        let mut m = ModelConfig::default();
        assert_eq!(m.history_tensor_dim(), 40);
        m.use_map = true;
        assert_eq!(m.history_tensor_dim(), 72);
    }
}
