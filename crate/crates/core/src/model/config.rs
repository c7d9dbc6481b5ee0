use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Profile {
    Full,
    Tiny,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Full => "full",
            Profile::Tiny => "tiny",
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "tiny" => Ok(Profile::Tiny),
            other => Err(Error::invalid(format!(
                "unknown profile `{other}` (expected full|tiny)"
            ))),
        }
    }
}

/// One spatial-pyramid-pooling branch: average pool with `window`, then a
/// 1x1 projection to `channels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SppBranch {
    pub window: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub profile: Profile,
    /// 1 (grayscale) or 3 (RGB).
    pub in_channels: usize,
    pub feature_channels: usize,
    /// Maximum disparity D in full-resolution pixels; a multiple of 3.
    pub max_disparity: usize,
    pub matching_channels: [usize; 4],
    pub spp: Vec<SppBranch>,
    /// Output width of the 3x3 conv fusing the pre-pooling map with the
    /// pyramid branches.
    pub fusion_channels: usize,
    pub dilations: [usize; 3],
    pub refine_channels: usize,
    pub refine_dilations: Vec<usize>,
    /// Control experiment: the matching net pairs the left features with a
    /// shifted copy of themselves instead of the right features.
    pub context_only: bool,
}

impl ModelConfig {
    pub fn full(in_channels: usize, max_disparity: usize) -> Self {
        ModelConfig {
            profile: Profile::Full,
            in_channels,
            feature_channels: 32,
            max_disparity,
            matching_channels: [48, 64, 96, 128],
            spp: vec![
                SppBranch {
                    window: 64,
                    channels: 32,
                },
                SppBranch {
                    window: 16,
                    channels: 32,
                },
            ],
            fusion_channels: 96,
            dilations: [2, 4, 8],
            refine_channels: 32,
            refine_dilations: vec![1, 2, 4, 8, 1, 1],
            context_only: false,
        }
    }

    pub fn tiny(in_channels: usize, max_disparity: usize) -> Self {
        ModelConfig {
            profile: Profile::Tiny,
            in_channels,
            feature_channels: 16,
            max_disparity,
            matching_channels: [24, 32, 48, 64],
            spp: vec![
                SppBranch {
                    window: 16,
                    channels: 16,
                },
                SppBranch {
                    window: 8,
                    channels: 16,
                },
            ],
            fusion_channels: 48,
            dilations: [2, 4, 8],
            refine_channels: 16,
            refine_dilations: vec![1, 2, 4],
            context_only: false,
        }
    }

    pub fn for_profile(profile: Profile, in_channels: usize, max_disparity: usize) -> Self {
        match profile {
            Profile::Full => Self::full(in_channels, max_disparity),
            Profile::Tiny => Self::tiny(in_channels, max_disparity),
        }
    }

    /// Number of disparity levels in the 1/3-resolution cost volume.
    pub fn levels(&self) -> usize {
        self.max_disparity / 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_disparity == 0 || !self.max_disparity.is_multiple_of(3) {
            return Err(Error::invalid(format!(
                "max disparity must be a positive multiple of 3, got {}",
                self.max_disparity
            )));
        }
        if !matches!(self.in_channels, 1 | 3) {
            return Err(Error::invalid(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        let positive = self.feature_channels > 0
            && self.fusion_channels > 0
            && self.refine_channels > 0
            && self.matching_channels.iter().all(|&c| c > 0)
            && self.dilations.iter().all(|&d| d > 0)
            && self.refine_dilations.iter().all(|&d| d > 0)
            && self.spp.iter().all(|b| b.window > 0 && b.channels > 0);
        if !positive {
            return Err(Error::invalid("channel counts, windows and dilations must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disparity_must_be_multiple_of_three() {
        assert!(ModelConfig::tiny(1, 24).validate().is_ok());
        assert!(ModelConfig::tiny(1, 25).validate().is_err());
        assert!(ModelConfig::tiny(1, 0).validate().is_err());
        assert!(ModelConfig::tiny(2, 24).validate().is_err());
    }

    #[test]
    fn fusion_input_matches_default_width() {
        let c = ModelConfig::full(3, 192);
        let fused: usize = c.feature_channels + c.spp.iter().map(|b| b.channels).sum::<usize>();
        assert_eq!(fused, 96);
        assert_eq!(c.levels(), 64);
    }
}
