use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::Projection;
use crate::resample::Padding;

/// Network hyperparameters.
///
/// The encoder halves the input `log2(input_res / local_res)` times to reach
/// the local map, then once more for the global head. The decoder works at
/// `feature_res` and doubles `log2(out_res / feature_res)` times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_res: usize,
    /// Widths of the encoder blocks before the local head.
    pub encoder_widths: Vec<usize>,
    pub c_local: usize,
    pub c_global: usize,
    pub local_res: usize,
    pub feature_res: (usize, usize),
    pub out_res: (usize, usize),
    /// Width of the decoder stem, then of each upsampling block.
    pub decoder_widths: Vec<usize>,
    pub pe_freqs: usize,
    pub use_global: bool,
    pub use_pe: bool,
    pub use_attention: bool,
    pub projection: Projection,
    pub padding: Padding,
    pub leaky_slope: f64,
    pub max_groups: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_res: 64,
            encoder_widths: vec![16, 32],
            c_local: 64,
            c_global: 32,
            local_res: 8,
            feature_res: (16, 16),
            out_res: (64, 64),
            decoder_widths: vec![32, 16, 8],
            pe_freqs: 10,
            use_global: true,
            use_pe: true,
            use_attention: true,
            projection: Projection::Perspective,
            padding: Padding::Border,
            leaky_slope: 0.2,
            max_groups: 8,
            init_seed: 0,
        }
    }
}

fn log2_exact(ratio_of: usize, by: usize) -> Option<usize> {
    (by > 0 && ratio_of % by == 0 && (ratio_of / by).is_power_of_two()).then(|| (ratio_of / by).trailing_zeros() as usize)
}

impl ModelConfig {
    /// Small configuration for gradient checks and quick tests.
    pub fn miniature() -> Self {
        ModelConfig {
            input_res: 16,
            encoder_widths: vec![2],
            c_local: 3,
            c_global: 2,
            local_res: 4,
            feature_res: (4, 4),
            out_res: (16, 16),
            decoder_widths: vec![4, 3, 2],
            pe_freqs: 1,
            max_groups: 2,
            ..Self::default()
        }
    }

    /// Number of stride-2 encoder blocks producing the local map.
    pub fn encoder_depth(&self) -> usize {
        self.encoder_widths.len() + 1
    }

    /// Number of upsampling blocks in the decoder.
    pub fn upsample_blocks(&self) -> usize {
        self.decoder_widths.len() - 1
    }

    pub fn pe_channels(&self) -> usize {
        6 * self.pe_freqs + 3
    }

    /// Channels of the decoder input concatenation.
    pub fn decoder_in_channels(&self) -> usize {
        2 * self.c_local + usize::from(self.use_global) * 2 * self.c_global + usize::from(self.use_pe) * self.pe_channels()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::param(m));
        if self.pe_freqs < 1 {
            return bad("pe_freqs must be >= 1".into());
        }
        if self.c_local == 0 || self.c_global == 0 || self.encoder_widths.contains(&0) || self.decoder_widths.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        match log2_exact(self.input_res, self.local_res) {
            Some(d) if d == self.encoder_depth() => {}
            _ => {
                return bad(format!(
                    "input_res {} must equal local_res {} * 2^{} (one halving per encoder block)",
                    self.input_res,
                    self.local_res,
                    self.encoder_depth()
                ))
            }
        }
        if self.local_res < 4 {
            return bad("local_res must be >= 4 so the global head has at least 2x2 positions".into());
        }
        let (fr, fc) = self.feature_res;
        let (or, oc) = self.out_res;
        if fr < 2 || fc < 2 {
            return bad("feature_res must be at least 2x2".into());
        }
        match (log2_exact(or, fr), log2_exact(oc, fc)) {
            (Some(a), Some(b)) if a == b => {
                if a != self.upsample_blocks() {
                    return bad(format!(
                        "out_res / feature_res = 2^{a} needs {} decoder widths, got {}",
                        a + 1,
                        self.decoder_widths.len()
                    ));
                }
            }
            _ => {
                return bad(format!(
                    "out_res {:?} / feature_res {:?} must be the same power of two on both axes",
                    self.out_res, self.feature_res
                ))
            }
        }
        if self.use_attention && fr * fc > crate::autodiff::nn::MAX_ATTENTION_POSITIONS {
            return bad("attention resolution too large".into());
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad("leaky_slope must lie in [0, 1)".into());
        }
        if self.max_groups == 0 {
            return bad("max_groups must be >= 1".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
