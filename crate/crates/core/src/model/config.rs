//! Architecture hyperparameters, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::BallAttentionConfig;
use crate::error::{Error, Result};

/// Largest hidden width allowed for the message-passing embedding.
pub const MAX_MPNN_DIM: usize = 32;

/// Encoder/decoder architecture.
///
/// Stage `s` of `S` runs at the tree level reached after the first `s`
/// coarsening strides. The last encoder stage is the bottleneck; decoder
/// stage `s` (for `s < S − 1`) refines back to the level of encoder stage `s`
/// and adds its output as a skip connection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ErwinConfig {
    /// Spatial dimension of positions.
    pub dim: usize,
    /// Per-point input features; 0 feeds a constant one.
    #[serde(default)]
    pub in_features: usize,
    pub out_features: usize,
    pub enc_channels: Vec<usize>,
    pub enc_depths: Vec<usize>,
    pub enc_heads: Vec<usize>,
    /// Coarsening strides between consecutive stages (`S − 1` powers of two).
    #[serde(default)]
    pub strides: Vec<usize>,
    #[serde(default)]
    pub dec_depths: Vec<usize>,
    #[serde(default)]
    pub dec_heads: Vec<usize>,
    /// Ball size per stage; a single entry applies to every stage.
    pub ball_sizes: Vec<usize>,
    #[serde(default = "default_mpnn_dim")]
    pub mpnn_dim: usize,
    #[serde(default = "default_mpnn_steps")]
    pub mpnn_steps: usize,
    #[serde(default = "default_mpnn_knn")]
    pub mpnn_knn: usize,
    /// Alternate original and rotated partitions in consecutive blocks.
    #[serde(default = "default_rotate")]
    pub rotate: bool,
    /// Hidden width multiplier of the gated feed-forward unit.
    #[serde(default = "default_expansion")]
    pub ffn_expansion: usize,
}

fn default_mpnn_dim() -> usize {
    16
}
fn default_mpnn_steps() -> usize {
    1
}
fn default_mpnn_knn() -> usize {
    8
}
fn default_rotate() -> bool {
    true
}
fn default_expansion() -> usize {
    2
}

impl ErwinConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ErwinConfig = toml::from_str(s).map_err(|e| Error::Config(format!("invalid model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn stages(&self) -> usize {
        self.enc_channels.len()
    }

    pub fn ball_size(&self, stage: usize) -> usize {
        if self.ball_sizes.len() == 1 {
            self.ball_sizes[0]
        } else {
            self.ball_sizes[stage]
        }
    }

    /// `log₂` of the stride between stage `s` and `s + 1`.
    pub fn stride_log2(&self, s: usize) -> usize {
        self.strides[s].trailing_zeros() as usize
    }

    /// Tree level at which stage `s` runs.
    pub fn stage_level(&self, s: usize) -> usize {
        (0..s).map(|i| self.stride_log2(i)).sum()
    }

    /// Width of the embedding input (a constant column when there are no
    /// features).
    pub fn embed_in(&self) -> usize {
        self.in_features.max(1)
    }

    /// Attention shape for stage `s` (encoder when `decoder` is false).
    pub fn attention(&self, s: usize, decoder: bool) -> BallAttentionConfig {
        let heads = if decoder { self.dec_heads[s] } else { self.enc_heads[s] };
        BallAttentionConfig::new(self.ball_size(s), heads, self.enc_channels[s], self.dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.dim == 2 || self.dim == 3) {
            return bad(format!("dim must be 2 or 3, got {}", self.dim));
        }
        let s = self.stages();
        if s == 0 {
            return bad("enc-channels must list at least one stage".into());
        }
        if self.out_features == 0 {
            return bad("out-features must be positive".into());
        }
        for (name, len) in [
            ("enc-depths", self.enc_depths.len()),
            ("enc-heads", self.enc_heads.len()),
        ] {
            if len != s {
                return bad(format!("{name} has {len} entries for {s} stages"));
            }
        }
        for (name, len) in [
            ("strides", self.strides.len()),
            ("dec-depths", self.dec_depths.len()),
            ("dec-heads", self.dec_heads.len()),
        ] {
            if len != s - 1 {
                return bad(format!("{name} has {len} entries; {s} stages need {}", s - 1));
            }
        }
        if !(self.ball_sizes.len() == 1 || self.ball_sizes.len() == s) {
            return bad(format!(
                "ball-sizes has {} entries; expected 1 or {s}",
                self.ball_sizes.len()
            ));
        }
        if let Some(&b) = self.ball_sizes.iter().find(|b| !b.is_power_of_two()) {
            return bad(format!("ball size {b} is not a power of two"));
        }
        if let Some(&st) = self.strides.iter().find(|st| !st.is_power_of_two()) {
            return bad(format!("stride {st} is not a power of two"));
        }
        if self.enc_channels.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        for st in 0..s {
            let c = self.enc_channels[st];
            let heads = std::iter::once(self.enc_heads[st]).chain(self.dec_heads.get(st).copied());
            for h in heads {
                if h == 0 || !c.is_multiple_of(h) {
                    return bad(format!("stage {st}: {c} channels do not split into {h} heads"));
                }
            }
        }
        if self.mpnn_dim == 0 || self.mpnn_dim > MAX_MPNN_DIM {
            return bad(format!(
                "mpnn-dim must lie in 1..={MAX_MPNN_DIM}, got {}",
                self.mpnn_dim
            ));
        }
        if self.mpnn_steps > 0 && self.mpnn_knn == 0 {
            return bad("mpnn-knn must be positive when message passing is enabled".into());
        }
        if self.ffn_expansion == 0 {
            return bad("ffn-expansion must be positive".into());
        }
        Ok(())
    }

    /// Closed-form number of trainable scalars.
    ///
    /// - embedding: `in·H + H`, per step `(2H+d)·H + H + H² + H` for the edge
    ///   network and `2H·H + H + H² + H` for the node network, then `H·C₀ + C₀`;
    /// - per block of width `C` with `h` heads: two layer norms `4C`,
    ///   attention `4C² + d·C + h`, feed-forward `3·e·C²`;
    /// - coarsening `s → s+1` with stride `g`: `g(C_s + d)·C_{s+1}`;
    /// - refinement `s+1 → s`: `(C_{s+1} + g·d)·g·C_s`;
    /// - readout `C₀·out + out`.
    pub fn param_count(&self) -> usize {
        let (d, h) = (self.dim, self.mpnn_dim);
        let mut n = self.embed_in() * h + h;
        n += self.mpnn_steps * ((2 * h + d) * h + h + h * h + h + 2 * h * h + h + h * h + h);
        n += h * self.enc_channels[0] + self.enc_channels[0];
        let e = self.ffn_expansion;
        let block = |c: usize, heads: usize| 4 * c + 4 * c * c + d * c + heads + 3 * e * c * c;
        for s in 0..self.stages() {
            let c = self.enc_channels[s];
            n += self.enc_depths[s] * block(c, self.enc_heads[s]);
            if s + 1 < self.stages() {
                let g = self.strides[s];
                let c_next = self.enc_channels[s + 1];
                n += g * (c + d) * c_next;
                n += (c_next + g * d) * g * c;
                n += self.dec_depths[s] * block(c, self.dec_heads[s]);
            }
        }
        n + self.enc_channels[0] * self.out_features + self.out_features
    }
}
