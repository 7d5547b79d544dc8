use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the refiner. Unlisted JSON fields take the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    /// Refinement iterations `T`.
    pub iterations: usize,
    /// ConvGRU levels `K`; level `k` runs at `1 / 2^(k-1)` of the working
    /// resolution.
    pub gru_levels: usize,
    pub hidden_channels: usize,
    /// Channels of the fused focus map `G`.
    pub fused_channels: usize,
    /// Full resolution over working resolution.
    pub downsample_factor: usize,
    /// Loss weight ratio between consecutive iterations.
    pub alpha: f64,
    /// Output channels of the four stride-2 encoder stages.
    pub encoder_channels: [usize; 4],
    pub seed: u64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            iterations: 4,
            gru_levels: 3,
            hidden_channels: 128,
            fused_channels: 64,
            downsample_factor: 2,
            alpha: 0.9,
            encoder_channels: [32, 48, 64, 96],
            seed: 0,
        }
    }
}

impl RefinerConfig {
    /// Reduced widths for tests and desk-scale training.
    pub fn small(seed: u64) -> Self {
        RefinerConfig {
            hidden_channels: 16,
            fused_channels: 8,
            encoder_channels: [8, 8, 8, 8],
            seed,
            ..RefinerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if self.gru_levels == 0 || self.gru_levels > 6 {
            return bad(format!("gru_levels must be in 1..=6, got {}", self.gru_levels));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must be in (0, 1], got {}", self.alpha));
        }
        if ![1, 2, 4].contains(&self.downsample_factor) {
            return bad(format!("downsample_factor must be 1, 2 or 4, got {}", self.downsample_factor));
        }
        if self.hidden_channels == 0 || self.fused_channels == 0 || self.encoder_channels.contains(&0) {
            return bad("channel counts must be >= 1".into());
        }
        Ok(())
    }

    /// Full-resolution sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        self.downsample_factor << (self.gru_levels - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let c = RefinerConfig::default();
        assert_eq!(
            (c.iterations, c.gru_levels, c.hidden_channels, c.fused_channels, c.downsample_factor, c.alpha),
            (4, 3, 128, 64, 2, 0.9)
        );
        c.validate().unwrap();
        assert_eq!(c.size_multiple(), 8);
        for broken in [
            RefinerConfig { iterations: 0, ..c.clone() },
            RefinerConfig { gru_levels: 0, ..c.clone() },
            RefinerConfig { alpha: 0.0, ..c.clone() },
            RefinerConfig { alpha: 1.5, ..c.clone() },
            RefinerConfig { downsample_factor: 3, ..c.clone() },
        ] {
            assert!(broken.validate().is_err());
        }
    }

    #[test]
    fn json_fills_defaults_and_rejects_typos() {
        let c: RefinerConfig = serde_json::from_str(r#"{"hidden_channels": 16, "seed": 3}"#).unwrap();
        assert_eq!(c.hidden_channels, 16);
        assert_eq!(c.iterations, 4);
        assert!(serde_json::from_str::<RefinerConfig>(r#"{"hiden_channels": 16}"#).is_err());
    }
}
