//! Hyperparameters. Every `Default` matches the published configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{BridgingError, Result};

/// How much of the pair-scoring network the bridging and coreference towers share.
///
/// Token embeddings and the BiLSTM are always shared; output heads never are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SharingMode {
    #[serde(rename = "ENCODER_ONLY")]
    EncoderOnly,
    #[serde(rename = "SHARE_FFNN_1")]
    ShareFfnn1,
    #[serde(rename = "SHARE_FFNN_2")]
    ShareFfnn2,
}

impl SharingMode {
    pub fn shared_layers(self) -> usize {
        match self {
            SharingMode::EncoderOnly => 0,
            SharingMode::ShareFfnn1 => 1,
            SharingMode::ShareFfnn2 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SharingMode::EncoderOnly => "ENCODER_ONLY",
            SharingMode::ShareFfnn1 => "SHARE_FFNN_1",
            SharingMode::ShareFfnn2 => "SHARE_FFNN_2",
        }
    }
}

impl fmt::Display for SharingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SharingMode {
    type Err = BridgingError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "ENCODER_ONLY" => Ok(SharingMode::EncoderOnly),
            "SHARE_FFNN_1" => Ok(SharingMode::ShareFfnn1),
            "SHARE_FFNN_2" => Ok(SharingMode::ShareFfnn2),
            _ => Err(BridgingError::Config(format!("unknown sharing mode `{s}`"))),
        }
    }
}

/// How the stacked layers of a contextual vector are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextualMode {
    /// Use the file's vectors as they are (the layers already concatenated).
    Concat,
    /// Average `contextual_layers` equal-width blocks of each vector.
    Mean,
}

impl FromStr for ContextualMode {
    type Err = BridgingError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "concat" => Ok(ContextualMode::Concat),
            "mean" => Ok(ContextualMode::Mean),
            _ => Err(BridgingError::Config(format!(
                "unknown contextual mode `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Width of the frozen word vectors; 0 disables the channel.
    pub static_dim: usize,
    pub char_dim: usize,
    pub char_filter_widths: Vec<usize>,
    pub char_filters: usize,
    /// Width of vectors in the contextual file; 0 disables the channel.
    pub contextual_dim: usize,
    pub contextual_mode: ContextualMode,
    pub contextual_layers: usize,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            static_dim: 300,
            char_dim: 8,
            char_filter_widths: vec![3, 4, 5],
            char_filters: 50,
            contextual_dim: 0,
            contextual_mode: ContextualMode::Concat,
            contextual_layers: 4,
            lstm_layers: 3,
            lstm_hidden: 200,
        }
    }
}

impl EncoderConfig {
    pub fn char_width(&self) -> usize {
        self.char_filter_widths.len() * self.char_filters
    }

    pub fn contextual_width(&self) -> usize {
        match self.contextual_mode {
            ContextualMode::Concat => self.contextual_dim,
            ContextualMode::Mean => self.contextual_dim / self.contextual_layers.max(1),
        }
    }

    /// Width of `emb_t`.
    pub fn embedding_width(&self) -> usize {
        self.static_dim + self.char_width() + self.contextual_width()
    }

    /// Width of `x_t`.
    pub fn token_width(&self) -> usize {
        2 * self.lstm_hidden
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerConfig {
    pub ffnn_layers: usize,
    pub ffnn_size: usize,
    /// Width of the mention-width and pair-distance embeddings.
    pub feature_dim: usize,
    pub max_antecedents: usize,
    pub sharing: SharingMode,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            ffnn_layers: 2,
            ffnn_size: 150,
            feature_dim: 20,
            max_antecedents: 150,
            sharing: SharingMode::ShareFfnn1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub scorer: ScorerConfig,
    /// Standard deviation of the truncated-normal dense-weight initializer.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            scorer: ScorerConfig::default(),
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Width of `M_i`.
    pub fn mention_width(&self) -> usize {
        3 * self.encoder.token_width() + self.scorer.feature_dim
    }

    /// Width of `P_(i,j)`.
    pub fn pair_width(&self) -> usize {
        3 * self.mention_width() + self.scorer.feature_dim
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let s = &self.scorer;
        let fail = |m: &str| Err(BridgingError::Config(m.to_string()));
        if e.char_dim == 0 || e.char_filters == 0 || e.char_filter_widths.is_empty() {
            return fail(
                "character CNN needs char_dim, char_filters and at least one filter width",
            );
        }
        if e.char_filter_widths.contains(&0) {
            return fail("filter widths must be positive");
        }
        if e.lstm_layers == 0 || e.lstm_hidden == 0 {
            return fail("encoder needs at least one LSTM layer of positive size");
        }
        if e.contextual_mode == ContextualMode::Mean
            && e.contextual_dim > 0
            && (e.contextual_layers == 0 || !e.contextual_dim.is_multiple_of(e.contextual_layers))
        {
            return fail("contextual_dim must divide evenly into contextual_layers for mean mode");
        }
        if s.ffnn_layers == 0 || s.ffnn_size == 0 || s.feature_dim == 0 {
            return fail("scorer needs at least one FFNN layer and positive sizes");
        }
        if s.sharing.shared_layers() > s.ffnn_layers {
            return fail("sharing mode shares more layers than the FFNN has");
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return fail("init_std must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutConfig {
    pub embedding: f64,
    pub lstm: f64,
    pub ffnn: f64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            embedding: 0.5,
            lstm: 0.4,
            ffnn: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// γ: DN and DO loss queries kept per bridging query.
    pub negative_ratio: f64,
    pub undersample: bool,
    /// Redraw the undersampled query set every epoch instead of once per run.
    pub resample_each_epoch: bool,
    pub seed: u64,
    pub dropout: DropoutConfig,
    pub bridging_weight: f64,
    pub coreference_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 200,
            negative_ratio: 2.0,
            undersample: true,
            resample_each_epoch: true,
            seed: 0,
            dropout: DropoutConfig::default(),
            bridging_weight: 1.0,
            coreference_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.dropout.embedding, self.dropout.lstm, self.dropout.ffnn];
        if rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(BridgingError::Config(
                "dropout rates must lie in [0, 1)".into(),
            ));
        }
        if !(self.negative_ratio >= 0.0 && self.negative_ratio.is_finite()) {
            return Err(BridgingError::Config("negative_ratio must be >= 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(BridgingError::Config(
                "learning_rate must be positive".into(),
            ));
        }
        if self.bridging_weight < 0.0 || self.coreference_weight < 0.0 {
            return Err(BridgingError::Config(
                "task-loss weights must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_widths() {
        let c = ModelConfig::default();
        assert_eq!(c.encoder.char_width(), 150);
        assert_eq!(c.encoder.embedding_width(), 450);
        assert_eq!(c.encoder.token_width(), 400);
        assert_eq!(c.mention_width(), 1220);
        assert_eq!(c.pair_width(), 3680);
    }

    #[test]
    fn contextual_widths() {
        let mut e = EncoderConfig {
            contextual_dim: 4096,
            ..EncoderConfig::default()
        };
        assert_eq!(e.embedding_width(), 4546);
        e.contextual_mode = ContextualMode::Mean;
        assert_eq!(e.contextual_width(), 1024);
    }

    #[test]
    fn sharing_mode_round_trips_names() {
        for m in [
            SharingMode::EncoderOnly,
            SharingMode::ShareFfnn1,
            SharingMode::ShareFfnn2,
        ] {
            assert_eq!(m.name().parse::<SharingMode>().unwrap(), m);
        }
        assert!("SHARE_ALL".parse::<SharingMode>().is_err());
    }

    #[test]
    fn rejects_bad_rates() {
        let mut t = TrainConfig::default();
        t.dropout.ffnn = 1.0;
        assert!(t.validate().is_err());
        let t = TrainConfig {
            negative_ratio: -1.0,
            ..TrainConfig::default()
        };
        assert!(t.validate().is_err());
    }
}
