//! Capability negotiation for external backbones.
//!
//! A backbone integration declares what it can do; before training or
//! probing, the declared capabilities are checked against what the run
//! needs. Failing the check is a capability error, distinct from bad input:
//! the CLI surfaces it with its own exit code so scripts can tell
//! "this model can't do that" apart from "your config is wrong".

use super::{Backbone, LatentSpec};
use crate::Result;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// What a backbone integration says it supports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneClaims {
    pub name: String,
    pub latent: LatentSpec,
    /// Cross-attention weights can be read out during the forward pass.
    pub exposes_attention: bool,
    /// Downsampling factors with at least one capturable attention layer.
    pub capture_factors: Vec<u32>,
    /// Prompt embeddings can be supplied or recomputed per step.
    pub text_conditioning: bool,
    pub max_tokens: usize,
}

impl BackboneClaims {
    pub fn for_backbone(name: &str, backbone: &dyn Backbone) -> Self {
        let mut factors: Vec<u32> =
            backbone.attention_layers().iter().map(|l| l.downsample_factor).collect();
        factors.sort_unstable();
        factors.dedup();
        BackboneClaims {
            name: name.to_string(),
            latent: backbone.latent(),
            exposes_attention: !factors.is_empty(),
            capture_factors: factors,
            text_conditioning: true,
            max_tokens: backbone.max_tokens(),
        }
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// What a particular run needs from the backbone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneRequirements {
    pub capture_factors: Vec<u32>,
    pub text_conditioning: bool,
    pub min_tokens: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CapabilityReport {
    pub satisfied: bool,
    pub missing: Vec<String>,
}

impl CapabilityReport {
    pub fn into_result(self) -> Result<()> {
        if self.satisfied {
            Ok(())
        } else {
            Err(crate::Error::capability(self.missing.join("; ")))
        }
    }
}

pub fn check_backbone(claims: &BackboneClaims, req: &BackboneRequirements) -> CapabilityReport {
    let mut missing = Vec::new();
    if !req.capture_factors.is_empty() && !claims.exposes_attention {
        missing.push(format!("{}: no attention capture at all", claims.name));
    } else {
        for f in &req.capture_factors {
            if !claims.capture_factors.contains(f) {
                missing.push(format!("{}: no attention capture at factor {f}", claims.name));
            }
        }
    }
    if req.text_conditioning && !claims.text_conditioning {
        missing.push(format!("{}: no text conditioning hook", claims.name));
    }
    if claims.max_tokens < req.min_tokens {
        missing.push(format!(
            "{}: supports {} tokens, run needs {}",
            claims.name, claims.max_tokens, req.min_tokens
        ));
    }
    CapabilityReport { satisfied: missing.is_empty(), missing }
}
