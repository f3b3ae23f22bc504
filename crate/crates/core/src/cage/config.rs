//! Hyperparameters of one fusion block.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    Identity,
    Projected,
}

/// Configuration of one CAGE block. Every parameter tensor shape is a pure
/// function of this struct (see the shape audit in `params`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CageConfig {
    /// Image feature channels C.
    pub c_in: usize,
    /// Output channels.
    pub c_out: usize,
    /// Text embedding depth D.
    pub embed_dim: usize,
    /// Attention projection dimension P.
    pub proj_dim: usize,
    /// Attention head count h; d_k = P / h.
    pub heads: usize,
    /// Intermediate channels of the refined context path.
    pub ctx_channels: usize,
    /// Hidden width of the FiLM MLP.
    pub film_hidden: usize,
    /// Per-pixel occlusion gate on the context path.
    pub gate_enabled: bool,
    /// Output projection after head concatenation (ablation flag).
    pub attn_out_proj: bool,
    pub residual_kind: ResidualKind,
    pub ln_eps: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl CageConfig {
    /// Default block for a detector neck level: the projection dimension is
    /// half the input width and the context path half the output width.
    pub fn for_neck_level(c_in: usize, c_out: usize, embed_dim: usize) -> Self {
        let heads = 4;
        let proj_dim = (c_in / 2).max(heads);
        CageConfig {
            c_in,
            c_out,
            embed_dim,
            proj_dim,
            heads,
            ctx_channels: (c_out / 2).max(1),
            film_hidden: c_out,
            gate_enabled: true,
            attn_out_proj: true,
            residual_kind: if c_in == c_out {
                ResidualKind::Identity
            } else {
                ResidualKind::Projected
            },
            ln_eps: 1e-5,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.proj_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("c_in", self.c_in),
            ("c_out", self.c_out),
            ("embed_dim", self.embed_dim),
            ("proj_dim", self.proj_dim),
            ("heads", self.heads),
            ("ctx_channels", self.ctx_channels),
            ("film_hidden", self.film_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.proj_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "proj_dim {} not divisible by heads {}",
                self.proj_dim, self.heads
            )));
        }
        if self.residual_kind == ResidualKind::Identity && self.c_in != self.c_out {
            return Err(Error::Config(format!(
                "identity residual requires c_in == c_out, got {} vs {}",
                self.c_in, self.c_out
            )));
        }
        if self.ln_eps <= 0.0 || self.bn_eps <= 0.0 {
            return Err(Error::Config("eps must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must be in [0, 1]".into()));
        }
        Ok(())
    }
}
