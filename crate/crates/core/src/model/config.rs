use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How the two branches' feature maps are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fusion {
    /// Channel concatenation `[A ‖ B]`.
    Concatenate,
    /// Elementwise `|A - B|`.
    AbsDifference,
}

impl Fusion {
    /// Channel multiplier applied to fused features.
    pub fn width_factor(self) -> usize {
        match self {
            Fusion::Concatenate => 2,
            Fusion::AbsDifference => 1,
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Concatenate => "conc",
            Fusion::AbsDifference => "diff",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conc" | "concat" | "concatenate" => Ok(Fusion::Concatenate),
            "diff" | "abs-difference" | "absdiff" => Ok(Fusion::AbsDifference),
            _ => Err(Error::invalid("fusion", format!("`{s}` (expected conc or diff)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub fusion: Fusion,
    pub gated: bool,
    pub encoder_filters: Vec<usize>,
    pub decoder_filters: Vec<usize>,
    pub kernel: usize,
    pub input_channels: usize,
    /// Nominal `(H, W)`; any size divisible by `2^(levels-1)` is accepted at run time.
    pub input_size: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(Fusion::AbsDifference, true, vec![16, 32, 64, 128])
    }
}

impl ModelConfig {
    /// Config with the decoder ladder mirroring `encoder_filters`, 3x3 kernels,
    /// RGB input and a 112x112 nominal size.
    pub fn new(fusion: Fusion, gated: bool, encoder_filters: Vec<usize>) -> Self {
        let decoder_filters = encoder_filters.iter().rev().copied().collect();
        ModelConfig {
            fusion,
            gated,
            encoder_filters,
            decoder_filters,
            kernel: 3,
            input_channels: 3,
            input_size: (112, 112),
        }
    }

    pub fn with_input_size(mut self, h: usize, w: usize) -> Self {
        self.input_size = (h, w);
        self
    }

    pub fn levels(&self) -> usize {
        self.encoder_filters.len()
    }

    /// Spatial divisor imposed by the pooling ladder.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels().saturating_sub(1))
    }

    /// Name in the `FC-Siam-{conc,diff}[-Att]` style.
    pub fn network_name(&self) -> String {
        format!("FC-Siam-{}{}", self.fusion, if self.gated { "-Att" } else { "" })
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        if l < 2 {
            return Err(Error::invalid(
                "model config",
                "at least two encoder levels are required",
            ));
        }
        if self.decoder_filters.len() != l {
            return Err(Error::invalid(
                "model config",
                format!("{} encoder levels but {} decoder levels", l, self.decoder_filters.len()),
            ));
        }
        if self
            .encoder_filters
            .iter()
            .chain(&self.decoder_filters)
            .any(|&f| f == 0)
        {
            return Err(Error::invalid("model config", "filter counts must be positive"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::invalid(
                "model config",
                format!("kernel {} must be odd", self.kernel),
            ));
        }
        if self.input_channels == 0 {
            return Err(Error::invalid("model config", "input_channels must be positive"));
        }
        self.check_spatial(self.input_size.0, self.input_size.1)
    }

    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::shape(
                "model input",
                format!("{h}x{w} is not divisible by {m} for {} levels", self.levels()),
            ));
        }
        Ok(())
    }
}
